//! Tape-based reverse-mode automatic differentiation over dense f64
//! tensors: just enough ops to express the patch embedding, the masked
//! transformer stacks, the prediction heads and both losses.
//!
//! A [`Graph`] records one forward pass. Node creation order is the
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters live outside the graph in a [`ParamSet`]; each forward pass
//! injects them as leaves via [`Graph::param`] and collects their
//! gradients afterwards, which keeps concurrent per-sample graphs trivially
//! safe to run against one shared read-only parameter snapshot.
//!
//! Debug builds trap NaN/Inf at every op boundary.

pub mod fd;
mod tensor;

pub use tensor::{ParamSet, Tensor};

use std::collections::BTreeMap;

use crate::cloud::Point3;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Concat { parts: Vec<usize>, axis: usize },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    Transpose { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Mean { x: usize },
    Sum { x: usize },
    EmbeddingAdd { mat: usize, vec: usize },
    SegmentMax { x: usize, argmax: Vec<usize> },
    MeanRows { x: usize },
    Reshape { x: usize },
    CrossEntropy { logits: usize, label: usize },
    Chamfer { pred: usize, target: Tensor, nn_pt: Vec<usize>, nn_tp: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, usize)>,
    backward_run: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value out of {:?}",
            op_name(&op)
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Injects a named parameter and registers it for gradient collection.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.push((name.to_string(), v.0));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- forward ops -----------------------------------------------------

    /// [m,k]x[k,n] -> [m,n]; a rank-1 lhs of length k acts as [1,k] and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if tb.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul rhs must be rank 2, got {:?}",
                tb.shape()
            )));
        }
        let vector_lhs = ta.rank() == 1;
        let (m, k) = if vector_lhs {
            (1, ta.shape()[0])
        } else {
            (ta.shape()[0], ta.shape()[1])
        };
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let shape = if vector_lhs { vec![n] } else { vec![m, n] };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Scale { x: x.0, c }))
    }

    /// Concatenates along `axis` (0 = stack rows, 1 = widen columns).
    /// Rank-1 parts concatenate along axis 0 into a longer vector.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::ShapeMismatch("concat needs parts and axis 0|1".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let rank1 = first.len() == 1;
        if rank1 && axis != 0 {
            return Err(Error::ShapeMismatch("rank-1 concat must use axis 0".into()));
        }
        let mut data = Vec::new();
        if axis == 0 {
            let mut total_rows = 0usize;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                if t.rank() != first.len() {
                    return Err(Error::ShapeMismatch("concat axis 0 rank mismatch".into()));
                }
                if !rank1 {
                    if t.shape()[1] != first[1] {
                        return Err(Error::ShapeMismatch(
                            "concat axis 0 column mismatch".into(),
                        ));
                    }
                    total_rows += t.shape()[0];
                }
                data.extend_from_slice(t.data());
            }
            let shape = if rank1 {
                vec![data.len()]
            } else {
                vec![total_rows, first[1]]
            };
            let req = parts.iter().any(|&p| self.requires(p));
            let parts_idx = parts.iter().map(|p| p.0).collect();
            Ok(self.push(
                Tensor::new(shape, data)?,
                req,
                Op::Concat { parts: parts_idx, axis },
            ))
        } else {
            let rows = first[0];
            let mut cols_total = 0usize;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                if t.rank() != 2 || t.shape()[0] != rows {
                    return Err(Error::ShapeMismatch("concat axis 1 row mismatch".into()));
                }
                cols_total += t.shape()[1];
            }
            data = vec![0.0; rows * cols_total];
            let mut offset = 0usize;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let pc = t.shape()[1];
                for r in 0..rows {
                    data[r * cols_total + offset..r * cols_total + offset + pc]
                        .copy_from_slice(&t.data()[r * pc..(r + 1) * pc]);
                }
                offset += pc;
            }
            let req = parts.iter().any(|&p| self.requires(p));
            let parts_idx = parts.iter().map(|p| p.0).collect();
            Ok(self.push(
                Tensor::new(vec![rows, cols_total], data)?,
                req,
                Op::Concat { parts: parts_idx, axis },
            ))
        }
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || end > t.shape()[1] || start >= end {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {start}..{end} of {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![rows, width], data)?,
            req,
            Op::SliceCols { x: x.0, start },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || end > t.shape()[0] || start >= end {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows {start}..{end} of {:?}",
                t.shape()
            )));
        }
        let cols = t.shape()[1];
        let data = t.data()[start * cols..end * cols].to_vec();
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![end - start, cols], data)?,
            req,
            Op::SliceRows { x: x.0, start },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose needs rank 2, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = t.data()[r * cols + c];
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![cols, rows], data)?,
            req,
            Op::Transpose { x: x.0 },
        ))
    }

    /// Softmax over the last axis; each row sums to 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Softmax { x: x.0 }))
    }

    /// Normalizes each last-axis row to zero mean, unit variance (eps 1e-5).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::LayerNorm { x: x.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Relu { x: x.0 }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Gelu { x: x.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(m), req, Op::Mean { x: x.0 }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>();
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(s), req, Op::Sum { x: x.0 }))
    }

    /// Broadcast-adds a vector of length c onto every row of an [r,c]
    /// matrix.
    pub fn embedding_add(&mut self, mat: Var, vec: Var) -> Result<Var> {
        let (tm, tv) = (&self.nodes[mat.0].value, &self.nodes[vec.0].value);
        if tm.rank() != 2 || tv.rank() != 1 || tm.shape()[1] != tv.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "embedding_add {:?} + {:?}",
                tm.shape(),
                tv.shape()
            )));
        }
        let cols = tm.shape()[1];
        let mut data = tm.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(tv.data()) {
                *v += b;
            }
        }
        let shape = tm.shape().to_vec();
        let req = self.requires(mat) || self.requires(vec);
        Ok(self.push(
            Tensor::new(shape, data)?,
            req,
            Op::EmbeddingAdd {
                mat: mat.0,
                vec: vec.0,
            },
        ))
    }

    /// Column-wise max over fixed-size row segments: [r,c] with segment
    /// length s (s divides r) -> [r/s, c]. Ties take the first row.
    pub fn segment_max(&mut self, x: Var, segment: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || segment == 0 || t.shape()[0] % segment != 0 {
            return Err(Error::ShapeMismatch(format!(
                "segment_max segment {segment} of {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let out_rows = rows / segment;
        let mut data = vec![f64::NEG_INFINITY; out_rows * cols];
        let mut argmax = vec![0usize; out_rows * cols];
        for s in 0..out_rows {
            for r in 0..segment {
                let row = s * segment + r;
                for c in 0..cols {
                    let v = t.data()[row * cols + c];
                    if v > data[s * cols + c] {
                        data[s * cols + c] = v;
                        argmax[s * cols + c] = row;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![out_rows, cols], data)?,
            req,
            Op::SegmentMax { x: x.0, argmax },
        ))
    }

    /// Column-wise mean over all rows: [r,c] -> [c].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "mean_rows needs rank 2, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += t.data()[r * cols + c];
            }
        }
        for v in data.iter_mut() {
            *v /= rows as f64;
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::vector(data), req, Op::MeanRows { x: x.0 }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                t.shape()
            )));
        }
        let data = t.data().to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Reshape { x: x.0 }))
    }

    /// Cross entropy of a rank-1 logit vector against a class index,
    /// computed with a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.rank() != 1 || label >= t.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy label {label} on logits {:?}",
                t.shape()
            )));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::CrossEntropy {
                logits: logits.0,
                label,
            },
        ))
    }

    /// Chamfer distance (l1 + l2 form) between predicted points [k,3] and a
    /// constant target set, averaged per side. Differentiable with respect
    /// to the predictions through the nearest-neighbor assignments.
    pub fn chamfer_to(&mut self, pred: Var, target: &[Point3]) -> Result<Var> {
        let t = &self.nodes[pred.0].value;
        if t.rank() != 2 || t.shape()[1] != 3 || target.is_empty() || t.shape()[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "chamfer pred {:?} vs {} targets",
                t.shape(),
                target.len()
            )));
        }
        let k = t.shape()[0];
        let m = target.len();
        let pt = |i: usize| -> Point3 { [t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]] };

        let mut nn_pt = vec![0usize; k];
        let mut nn_tp = vec![0usize; m];
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for i in 0..k {
            let p = pt(i);
            let (mut best, mut best_d2) = (0usize, f64::INFINITY);
            for (j, &q) in target.iter().enumerate() {
                let d2 = crate::cloud::dist2(p, q);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = j;
                }
            }
            nn_pt[i] = best;
            l1 += best_d2.sqrt() / k as f64;
            l2 += best_d2 / k as f64;
        }
        for (j, &q) in target.iter().enumerate() {
            let (mut best, mut best_d2) = (0usize, f64::INFINITY);
            for i in 0..k {
                let d2 = crate::cloud::dist2(pt(i), q);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = i;
                }
            }
            nn_tp[j] = best;
            l1 += best_d2.sqrt() / m as f64;
            l2 += best_d2 / m as f64;
        }
        let mut flat = Vec::with_capacity(3 * m);
        for q in target {
            flat.extend_from_slice(q);
        }
        let req = self.requires(pred);
        Ok(self.push(
            Tensor::scalar(l1 + l2),
            req,
            Op::Chamfer {
                pred: pred.0,
                target: Tensor::matrix(m, 3, flat)?,
                nn_pt,
                nn_tp,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every parameter leaf that
    /// contributed receives a gradient; calling twice without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        if self.backward_run {
            return Err(Error::DoubleBackward);
        }
        self.backward_run = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.grads[id].is_none() {
                continue;
            }
            let g = self.grads[id].clone().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let vector_lhs = ta.rank() == 1;
                    let (m, k) = if vector_lhs {
                        (1, ta.shape()[0])
                    } else {
                        (ta.shape()[0], ta.shape()[1])
                    };
                    let n = tb.shape()[1];
                    let da = if self.nodes[a].requires_grad {
                        Some(matmul_nt(&g, tb.data(), m, n, k))
                    } else {
                        None
                    };
                    let db = if self.nodes[b].requires_grad {
                        Some(matmul_tn(ta.data(), &g, m, k, n))
                    } else {
                        None
                    };
                    if let Some(da) = da {
                        self.accumulate(a, &da);
                    }
                    if let Some(db) = db {
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a].requires_grad {
                        self.accumulate(a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        self.accumulate(b, &g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.nodes[b].value.data())
                            .map(|(gi, bi)| gi * bi)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(self.nodes[a].value.data())
                            .map(|(gi, ai)| gi * ai)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    if self.nodes[x].requires_grad {
                        let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Concat { parts, axis } => {
                    if axis == 0 {
                        // parts are contiguous in the flat output
                        let mut flat_off = 0usize;
                        for &p in &parts {
                            let numel = self.nodes[p].value.numel();
                            if self.nodes[p].requires_grad {
                                let dp = g[flat_off..flat_off + numel].to_vec();
                                self.accumulate(p, &dp);
                            }
                            flat_off += numel;
                        }
                    } else {
                        let out_cols = self.nodes[id].value.cols();
                        let mut col_off = 0usize;
                        for &p in &parts {
                            let t = &self.nodes[p].value;
                            let (pr, pc) = (t.shape()[0], t.shape()[1]);
                            if self.nodes[p].requires_grad {
                                let mut dp = vec![0.0; t.numel()];
                                for r in 0..pr {
                                    dp[r * pc..(r + 1) * pc].copy_from_slice(
                                        &g[r * out_cols + col_off
                                            ..r * out_cols + col_off + pc],
                                    );
                                }
                                self.accumulate(p, &dp);
                            }
                            col_off += pc;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.nodes[x].requires_grad {
                        let t = &self.nodes[x].value;
                        let (rows, cols) = (t.shape()[0], t.shape()[1]);
                        let width = self.nodes[id].value.shape()[1];
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            dx[r * cols + start..r * cols + start + width]
                                .copy_from_slice(&g[r * width..(r + 1) * width]);
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.nodes[x].requires_grad {
                        let t = &self.nodes[x].value;
                        let cols = t.shape()[1];
                        let mut dx = vec![0.0; t.numel()];
                        dx[start * cols..start * cols + g.len()].copy_from_slice(&g);
                        self.accumulate(x, &dx);
                    }
                }
                Op::Transpose { x } => {
                    if self.nodes[x].requires_grad {
                        let out = &self.nodes[id].value;
                        let (rows, cols) = (out.shape()[0], out.shape()[1]);
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[c * rows + r] = g[r * cols + c];
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Softmax { x } => {
                    if self.nodes[x].requires_grad {
                        let w = self.nodes[id].value.data();
                        let cols = self.nodes[id].value.cols();
                        let mut dx = vec![0.0; w.len()];
                        for (row, (wrow, grow)) in
                            w.chunks(cols).zip(g.chunks(cols)).enumerate()
                        {
                            let dot: f64 =
                                wrow.iter().zip(grow).map(|(wi, gi)| wi * gi).sum();
                            for c in 0..cols {
                                dx[row * cols + c] = wrow[c] * (grow[c] - dot);
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::LayerNorm { x } => {
                    if self.nodes[x].requires_grad {
                        let xin = self.nodes[x].value.data();
                        let yhat = self.nodes[id].value.data();
                        let cols = self.nodes[id].value.cols();
                        let n = cols as f64;
                        let mut dx = vec![0.0; xin.len()];
                        for row in 0..xin.len() / cols {
                            let xs = &xin[row * cols..(row + 1) * cols];
                            let ys = &yhat[row * cols..(row + 1) * cols];
                            let gs = &g[row * cols..(row + 1) * cols];
                            let mean = xs.iter().sum::<f64>() / n;
                            let var =
                                xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                            let g_mean = gs.iter().sum::<f64>() / n;
                            let gy_mean =
                                gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                            for c in 0..cols {
                                dx[row * cols + c] =
                                    inv * (gs[c] - g_mean - ys[c] * gy_mean);
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x].requires_grad {
                        let xin = self.nodes[x].value.data();
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(xin)
                            .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Gelu { x } => {
                    if self.nodes[x].requires_grad {
                        let xin = self.nodes[x].value.data();
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(xin)
                            .map(|(gi, &xi)| gi * gelu_grad_scalar(xi))
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Mean { x } => {
                    if self.nodes[x].requires_grad {
                        let n = self.nodes[x].value.numel();
                        let dx = vec![g[0] / n as f64; n];
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sum { x } => {
                    if self.nodes[x].requires_grad {
                        let n = self.nodes[x].value.numel();
                        let dx = vec![g[0]; n];
                        self.accumulate(x, &dx);
                    }
                }
                Op::EmbeddingAdd { mat, vec } => {
                    if self.nodes[mat].requires_grad {
                        self.accumulate(mat, &g);
                    }
                    if self.nodes[vec].requires_grad {
                        let cols = self.nodes[vec].value.numel();
                        let mut dv = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            for (d, gi) in dv.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                        self.accumulate(vec, &dv);
                    }
                }
                Op::SegmentMax { x, argmax } => {
                    if self.nodes[x].requires_grad {
                        let t = &self.nodes[x].value;
                        let cols = t.shape()[1];
                        let mut dx = vec![0.0; t.numel()];
                        let out_cols = cols;
                        for (flat, &src_row) in argmax.iter().enumerate() {
                            let c = flat % out_cols;
                            dx[src_row * cols + c] += g[flat];
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::MeanRows { x } => {
                    if self.nodes[x].requires_grad {
                        let t = &self.nodes[x].value;
                        let (rows, cols) = (t.shape()[0], t.shape()[1]);
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[r * cols + c] = g[c] / rows as f64;
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Reshape { x } => {
                    if self.nodes[x].requires_grad {
                        self.accumulate(x, &g);
                    }
                }
                Op::CrossEntropy { logits, label } => {
                    if self.nodes[logits].requires_grad {
                        let l = self.nodes[logits].value.data();
                        let mut sm = l.to_vec();
                        softmax_row(&mut sm);
                        let dx: Vec<f64> = sm
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| g[0] * (p - if i == label { 1.0 } else { 0.0 }))
                            .collect();
                        self.accumulate(logits, &dx);
                    }
                }
                Op::Chamfer {
                    pred,
                    target,
                    nn_pt,
                    nn_tp,
                } => {
                    if self.nodes[pred].requires_grad {
                        let pv = self.nodes[pred].value.data();
                        let k = self.nodes[pred].value.shape()[0];
                        let m = target.shape()[0];
                        let mut dx = vec![0.0; pv.len()];
                        let g0 = g[0];
                        for i in 0..k {
                            let j = nn_pt[i];
                            let diff = [
                                pv[3 * i] - target.data()[3 * j],
                                pv[3 * i + 1] - target.data()[3 * j + 1],
                                pv[3 * i + 2] - target.data()[3 * j + 2],
                            ];
                            let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
                                .sqrt();
                            for c in 0..3 {
                                // l1 direction term (guarded at zero distance)
                                if d > 1e-12 {
                                    dx[3 * i + c] += g0 * diff[c] / (d * k as f64);
                                }
                                // l2 term
                                dx[3 * i + c] += g0 * 2.0 * diff[c] / k as f64;
                            }
                        }
                        for j in 0..m {
                            let i = nn_tp[j];
                            let diff = [
                                pv[3 * i] - target.data()[3 * j],
                                pv[3 * i + 1] - target.data()[3 * j + 1],
                                pv[3 * i + 2] - target.data()[3 * j + 2],
                            ];
                            let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
                                .sqrt();
                            for c in 0..3 {
                                if d > 1e-12 {
                                    dx[3 * i + c] += g0 * diff[c] / (d * m as f64);
                                }
                                dx[3 * i + c] += g0 * 2.0 * diff[c] / m as f64;
                            }
                        }
                        self.accumulate(pred, &dx);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contrib: &[f64]) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// Clears all gradients so another backward pass may run.
    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.backward_run = false;
    }

    /// Gradients of all registered parameters, summed per name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, id) in &self.params {
            let grad = match &self.grads[*id] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[*id].value.numel()],
            };
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&grad) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), grad);
                }
            }
        }
        out
    }
}

// ---- kernels ---------------------------------------------------------------

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// a [m,n] x b^T where b is [k,n] -> [m,k].
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// a^T x b where a is [m,k], b is [m,n] -> [k,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Concat { .. } => "concat",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::Transpose { .. } => "transpose",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Mean { .. } => "mean",
        Op::Sum { .. } => "sum",
        Op::EmbeddingAdd { .. } => "embedding_add",
        Op::SegmentMax { .. } => "segment_max",
        Op::MeanRows { .. } => "mean_rows",
        Op::Reshape { .. } => "reshape",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Chamfer { .. } => "chamfer",
    }
}
