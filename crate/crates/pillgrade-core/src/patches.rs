//! Patch construction: FPS centers, Morton-sorted, each with its
//! k-neighborhood stored center-relative. Patches may overlap across
//! centers (n*k can exceed the point count); every neighborhood is drawn
//! independently from the full cloud.

use crate::cloud::{sub, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::geom::{fps, knn, morton_sort_normalized};

/// Morton-ordered centers plus their center-relative k-neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point3>,
    pub patches: Vec<Vec<Point3>>,
    pub n: usize,
    pub k: usize,
}

impl PatchSet {
    /// Checks the structural invariants (lengths, patch sizes).
    pub fn validate(&self) -> Result<()> {
        if self.centers.len() != self.n || self.patches.len() != self.n {
            return Err(Error::LengthMismatch {
                left: self.centers.len(),
                right: self.patches.len(),
            });
        }
        for p in &self.patches {
            if p.len() != self.k {
                return Err(Error::ShapeMismatch(format!(
                    "patch has {} points, expected {}",
                    p.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// Selects `n` FPS centers (start index 0), orders them by Morton code
/// (ties by original point index), and gathers each center's `k` nearest
/// neighbors expressed relative to the center. The cloud is expected to be
/// unit-sphere normalized; each axis is remapped from [-1,1] onto the unit
/// cube before Morton quantization.
pub fn build_patches(
    cloud: &PointCloud,
    n: usize,
    k: usize,
    bits_per_axis: u32,
) -> Result<PatchSet> {
    cloud.validate()?;
    let center_idx = fps(&cloud.points, n, 0)?;
    let ordered = morton_sort_normalized(&cloud.points, &center_idx, bits_per_axis);

    let mut centers = Vec::with_capacity(n);
    let mut patches = Vec::with_capacity(n);
    for &ci in &ordered {
        let center = cloud.points[ci];
        let neighbors = knn(&cloud.points, center, k)?;
        let patch: Vec<Point3> = neighbors
            .iter()
            .map(|&pi| sub(cloud.points[pi], center))
            .collect();
        centers.push(center);
        patches.push(patch);
    }
    let set = PatchSet {
        centers,
        patches,
        n,
        k,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::normalize_unit_sphere;
    use crate::geom::{morton_encode, DEFAULT_MORTON_BITS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_normalized(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        normalize_unit_sphere(&PointCloud::new(points)).unwrap().cloud
    }

    #[test]
    fn full_scale_shape() {
        let cloud = random_normalized(8192, 1);
        let set = build_patches(&cloud, 512, 32, DEFAULT_MORTON_BITS).unwrap();
        assert_eq!(set.n, 512);
        assert_eq!(set.centers.len(), 512);
        assert!(set.patches.iter().all(|p| p.len() == 32));
    }

    #[test]
    fn single_patch_centered_on_start_point() {
        let cloud = random_normalized(32, 2);
        let set = build_patches(&cloud, 1, 5, DEFAULT_MORTON_BITS).unwrap();
        assert_eq!(set.centers[0], cloud.points[0]);
        // nearest neighbor of the center is itself: zero offset present
        assert!(set.patches[0].iter().any(|&p| p == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn centers_follow_morton_comparator_oracle() {
        let cloud = random_normalized(64, 3);
        let set = build_patches(&cloud, 8, 4, DEFAULT_MORTON_BITS).unwrap();

        let center_idx = fps(&cloud.points, 8, 0).unwrap();
        let mut expect = center_idx;
        expect.sort_by(|&a, &b| {
            let code = |i: usize| {
                morton_encode(
                    crate::geom::normalized_to_unit_cube(cloud.points[i]),
                    DEFAULT_MORTON_BITS,
                )
            };
            code(a).cmp(&code(b)).then(a.cmp(&b))
        });
        let expect_centers: Vec<_> = expect.iter().map(|&i| cloud.points[i]).collect();
        assert_eq!(set.centers, expect_centers);
    }

    #[test]
    fn build_patches_is_deterministic() {
        let cloud = random_normalized(128, 4);
        let a = build_patches(&cloud, 16, 8, DEFAULT_MORTON_BITS).unwrap();
        let b = build_patches(&cloud, 16, 8, DEFAULT_MORTON_BITS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_patches_allowed() {
        // n*k far exceeds the point count; neighborhoods overlap by design
        let cloud = random_normalized(16, 5);
        let set = build_patches(&cloud, 8, 8, DEFAULT_MORTON_BITS).unwrap();
        assert_eq!(set.n * set.k, 64);
    }

    #[test]
    fn morton_sorted_center_codes_nondecreasing() {
        let cloud = random_normalized(100, 6);
        let set = build_patches(&cloud, 20, 4, DEFAULT_MORTON_BITS).unwrap();
        let codes: Vec<u64> = set
            .centers
            .iter()
            .map(|&c| morton_encode(crate::geom::normalized_to_unit_cube(c), DEFAULT_MORTON_BITS))
            .collect();
        assert!(codes.windows(2).all(|w| w[0] <= w[1]));
    }
}
