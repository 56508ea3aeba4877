//! Symmetric Chamfer distance between point sets, in both the l1 form
//! (plain distances) and the l2 form (squared distances). Each direction is
//! averaged over its own set so the value does not scale with set size.

use crate::cloud::{dist2, Point3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferLoss {
    pub l1_term: f64,
    pub l2_term: f64,
    pub total: f64,
}

/// d(p, Q) = min over q in Q of ||p - q||. l1 = mean_P d(p,Q) + mean_Q
/// d(q,P); l2 is the same with squared distances; total = l1 + l2.
pub fn chamfer(predicted: &[Point3], target: &[Point3]) -> Result<ChamferLoss> {
    if predicted.is_empty() || target.is_empty() {
        return Err(Error::EmptySet);
    }
    let (l1_pt, l2_pt) = directed(predicted, target);
    let (l1_tp, l2_tp) = directed(target, predicted);
    let l1_term = l1_pt + l1_tp;
    let l2_term = l2_pt + l2_tp;
    Ok(ChamferLoss {
        l1_term,
        l2_term,
        total: l1_term + l2_term,
    })
}

fn directed(from: &[Point3], to: &[Point3]) -> (f64, f64) {
    let mut sum_d = 0.0;
    let mut sum_d2 = 0.0;
    for &p in from {
        let best = to
            .iter()
            .map(|&q| dist2(p, q))
            .fold(f64::INFINITY, f64::min);
        sum_d += best.sqrt();
        sum_d2 += best;
    }
    let inv = 1.0 / from.len() as f64;
    (sum_d * inv, sum_d2 * inv)
}
