//! Token embedding: a shared mini-PointNet over patches, sinusoidal
//! absolute position encoding of the patch centers, and the fusion step
//! that adds the global non-parametric feature into the token stream.

use crate::autograd::{Graph, ParamSet, Tensor, Var};
use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::npe::GlobalFeature;
use crate::patches::PatchSet;

/// Embedding tokens plus their absolute position encodings, co-shaped
/// n x d and row-aligned with the Morton order of the patch centers.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub ape: Tensor,
}

impl TokenSequence {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.shape() != self.ape.shape() {
            return Err(Error::ShapeMismatch(format!(
                "tokens {:?} vs ape {:?}",
                self.tokens.shape(),
                self.ape.shape()
            )));
        }
        if !self.tokens.all_finite() || !self.ape.all_finite() {
            return Err(Error::Format("non-finite token entries".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[1]
    }
}

pub const POINTNET_PREFIX: &str = "embed.";

/// Two shared per-point layers (3 -> hidden -> d) with ReLU, max-pooled
/// over each patch. Fan-in-scaled init keeps token magnitudes O(1) so the
/// fusion and attention stages see usable variation from the start.
pub fn init_pointnet_params(params: &mut ParamSet, hidden: usize, d: usize, seed: u64) {
    let std1 = (2.0f64 / 3.0).sqrt();
    let std2 = (2.0f64 / hidden as f64).sqrt();
    params.insert("embed.w1", Tensor::randn(vec![3, hidden], std1, seed ^ 0x01));
    params.insert("embed.b1", Tensor::zeros(vec![hidden]));
    params.insert("embed.w2", Tensor::randn(vec![hidden, d], std2, seed ^ 0x02));
    params.insert("embed.b2", Tensor::zeros(vec![d]));
}

/// Builds the token matrix inside an autograd graph: all patches are
/// stacked into one (n*k) x 3 matrix, mapped point-wise, then max-pooled
/// per k-row segment. Permuting the points inside a patch leaves its token
/// unchanged.
pub fn pointnet_embed_graph(g: &mut Graph, params: &ParamSet, patches: &PatchSet) -> Result<Var> {
    patches.validate()?;
    let (n, k) = (patches.n, patches.k);
    let mut flat = Vec::with_capacity(n * k * 3);
    for patch in &patches.patches {
        for p in patch {
            flat.extend_from_slice(p);
        }
    }
    let x = g.constant(Tensor::matrix(n * k, 3, flat)?);
    let w1 = param(g, params, "embed.w1")?;
    let b1 = param(g, params, "embed.b1")?;
    let w2 = param(g, params, "embed.w2")?;
    let b2 = param(g, params, "embed.b2")?;
    let h = g.matmul(x, w1)?;
    let h = g.embedding_add(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    let h = g.embedding_add(h, b2)?;
    g.segment_max(h, k)
}

fn param(g: &mut Graph, params: &ParamSet, name: &str) -> Result<Var> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
    Ok(g.param(name, t))
}

/// Plain-value variant of [`pointnet_embed_graph`].
pub fn pointnet_embed(params: &ParamSet, patches: &PatchSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let tokens = pointnet_embed_graph(&mut g, params, patches)?;
    Ok(g.value(tokens).clone())
}

/// Sinusoidal absolute position encoding of 3D centers: d/3 channels per
/// axis, geometric wavelengths spanning 1 to 1e4, sin/cos interleaved.
pub fn ape_encode(centers: &[Point3], d: usize) -> Result<Tensor> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::BadDimension { dim: d });
    }
    let pairs = d / 6;
    let mut data = vec![0.0; centers.len() * d];
    for (row, &c) in centers.iter().enumerate() {
        for (axis, &t) in c.iter().enumerate() {
            let base = row * d + axis * 2 * pairs;
            for m in 0..pairs {
                let divisor = 10_000.0_f64.powf(6.0 * m as f64 / d as f64);
                let arg = t / divisor;
                data[base + 2 * m] = arg.sin();
                data[base + 2 * m + 1] = arg.cos();
            }
        }
    }
    Tensor::matrix(centers.len(), d, data)
}

/// APE for widths that are not multiples of six: the largest multiple of
/// six is encoded and the remaining channels stay zero.
pub fn ape_encode_padded(centers: &[Point3], d: usize) -> Result<Tensor> {
    if d % 6 == 0 {
        return ape_encode(centers, d);
    }
    let d6 = d - d % 6;
    if d6 == 0 {
        return Ok(Tensor::zeros(vec![centers.len(), d]));
    }
    let inner = ape_encode(centers, d6)?;
    let mut data = vec![0.0; centers.len() * d];
    for row in 0..centers.len() {
        data[row * d..row * d + d6].copy_from_slice(&inner.data()[row * d6..(row + 1) * d6]);
    }
    Tensor::matrix(centers.len(), d, data)
}

/// Feature fusion: out_row = global + lambda * token_row, position
/// encodings passed through unchanged.
pub fn fuse_features(
    tokens: &TokenSequence,
    global: &GlobalFeature,
    lambda: f64,
) -> Result<TokenSequence> {
    let d = tokens.d();
    if global.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: global.dim(),
        });
    }
    let mut data = tokens.tokens.data().to_vec();
    for row in data.chunks_mut(d) {
        for (v, gl) in row.iter_mut().zip(&global.values) {
            *v = gl + lambda * *v;
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::matrix(tokens.n(), d, data)?,
        ape: tokens.ape.clone(),
    })
}

/// Graph version of [`fuse_features`] over a token variable.
pub fn fuse_features_graph(
    g: &mut Graph,
    tokens: Var,
    global: &GlobalFeature,
    lambda: f64,
) -> Result<Var> {
    let d = g.value(tokens).shape()[1];
    if global.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: global.dim(),
        });
    }
    let scaled = g.scale(tokens, lambda)?;
    let gvec = g.constant(Tensor::vector(global.values.clone()));
    g.embedding_add(scaled, gvec)
}
