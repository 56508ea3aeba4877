//! Dual attention mask: a causal floor (token i sees tokens 0..=i) plus a
//! seeded random blocking of floor(extra_ratio * i) of the otherwise
//! visible positions in each row. The diagonal is never blocked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Additive penalty standing in for -inf ahead of the softmax; large
/// enough that blocked weights underflow to exactly zero.
pub const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct DualMask {
    n: usize,
    extra_ratio: f64,
    // row-major 0/1, 1 = attend
    matrix: Vec<u8>,
}

/// Builds the mask. Within row i, the blocked extra positions are drawn
/// without replacement from the strictly-lower columns 0..i.
pub fn make_dual_mask(n: usize, extra_ratio: f64, seed: u64) -> Result<DualMask> {
    if !(0.0..1.0).contains(&extra_ratio) {
        return Err(Error::BadRatio(extra_ratio));
    }
    if n == 0 {
        return Err(Error::InvalidCount {
            requested: 0,
            available: 0,
        });
    }
    let mut matrix = vec![0u8; n * n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        for j in 0..=i {
            matrix[i * n + j] = 1;
        }
        let extra = (extra_ratio * i as f64).floor() as usize;
        if extra > 0 {
            // partial Fisher-Yates over the candidate columns 0..i
            let mut candidates: Vec<usize> = (0..i).collect();
            for slot in 0..extra {
                let pick = slot + rng.random_range(0..(candidates.len() - slot) as u64) as usize;
                candidates.swap(slot, pick);
                matrix[i * n + candidates[slot]] = 0;
            }
        }
    }
    Ok(DualMask {
        n,
        extra_ratio,
        matrix,
    })
}

impl DualMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn extra_ratio(&self) -> f64 {
        self.extra_ratio
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.matrix[i * self.n + j] == 1
    }

    /// Count of blocked positions below the diagonal in row i.
    pub fn blocked_beyond_causal(&self, i: usize) -> usize {
        (0..i).filter(|&j| !self.allows(i, j)).count()
    }

    /// The additive attention penalty: 0 where attending is allowed,
    /// [`MASK_PENALTY`] where blocked.
    pub fn penalty_tensor(&self) -> Tensor {
        let data = self
            .matrix
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { MASK_PENALTY })
            .collect();
        Tensor::matrix(self.n, self.n, data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ratio_is_pure_causal() {
        let m = make_dual_mask(6, 0.0, 9).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn single_token_mask() {
        let m = make_dual_mask(1, 0.5, 0).unwrap();
        assert!(m.allows(0, 0));
    }

    #[test]
    fn blocked_counts_match_floor_rule() {
        let m = make_dual_mask(8, 0.25, 3).unwrap();
        for i in 0..8 {
            assert_eq!(m.blocked_beyond_causal(i), (0.25 * i as f64).floor() as usize);
            assert!(m.allows(i, i), "diagonal blocked at {i}");
            for j in i + 1..8 {
                assert!(!m.allows(i, j), "future visible at ({i},{j})");
            }
        }
    }

    #[test]
    fn ratios_from_acceptance_grid() {
        for &ratio in &[0.1, 0.3, 0.5] {
            let m = make_dual_mask(16, ratio, 7).unwrap();
            for i in 0..16 {
                assert_eq!(
                    m.blocked_beyond_causal(i),
                    (ratio * i as f64).floor() as usize
                );
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_dual_mask(12, 0.3, 5).unwrap();
        let b = make_dual_mask(12, 0.3, 5).unwrap();
        let c = make_dual_mask(12, 0.3, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(matches!(make_dual_mask(4, 1.0, 0), Err(Error::BadRatio(_))));
        assert!(matches!(
            make_dual_mask(4, -0.1, 0),
            Err(Error::BadRatio(_))
        ));
    }

    #[test]
    fn penalty_tensor_places_large_negatives() {
        let m = make_dual_mask(3, 0.0, 0).unwrap();
        let p = m.penalty_tensor();
        assert_eq!(p.get2(0, 1), MASK_PENALTY);
        assert_eq!(p.get2(1, 0), 0.0);
        assert_eq!(p.get2(2, 2), 0.0);
    }
}
