//! Point cloud container plus the deterministic preprocessing steps that
//! every pipeline stage assumes: seeded uniform downsampling and
//! unit-sphere normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// An ordered collection of 3D points with an optional grade label and an
/// opaque source identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: Option<u8>,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            label: None,
            id: String::new(),
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the container invariants: non-empty and all-finite.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptySet);
        }
        for p in &self.points {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Format(format!(
                    "non-finite coordinate in cloud {:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add(c, *p);
        }
        scale(c, 1.0 / n)
    }
}

/// Seeded uniform index sampling without replacement; the selected indices
/// are gathered in ascending original order so the identity case returns
/// the input sequence unchanged.
pub fn uniform_downsample(cloud: &PointCloud, target_count: usize, seed: u64) -> Result<PointCloud> {
    cloud.validate()?;
    if cloud.len() < target_count {
        return Err(Error::TooFewPoints {
            have: cloud.len(),
            need: target_count,
        });
    }
    let indices = sample_indices(cloud.len(), target_count, seed);
    let points = indices.iter().map(|&i| cloud.points[i]).collect();
    Ok(PointCloud {
        points,
        label: cloud.label,
        id: cloud.id.clone(),
    })
}

/// The index-selection procedure behind [`uniform_downsample`]: a partial
/// Fisher-Yates shuffle over `0..n` driven by a ChaCha8 stream, taking the
/// first `count` slots, returned sorted ascending.
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n.saturating_sub(1)) {
        let j = i + (rand::Rng::random_range(&mut rng, 0..(n - i) as u64)) as usize;
        idx.swap(i, j);
    }
    let mut taken: Vec<usize> = idx[..count].to_vec();
    taken.sort_unstable();
    taken
}

/// Result of [`normalize_unit_sphere`]. `degenerate` flags the all-points-
/// coincide case, where every point maps to the origin.
#[derive(Debug, Clone)]
pub struct NormalizedCloud {
    pub cloud: PointCloud,
    pub degenerate: bool,
}

/// Centers the cloud on its centroid and scales so the farthest point sits
/// on the unit sphere.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<NormalizedCloud> {
    cloud.validate()?;
    let c = cloud.centroid();
    let centered: Vec<Point3> = cloud.points.iter().map(|&p| sub(p, c)).collect();
    let max_norm = centered.iter().map(|&p| norm(p)).fold(0.0_f64, f64::max);
    let degenerate = max_norm < 1e-12;
    let points = if degenerate {
        vec![[0.0; 3]; centered.len()]
    } else {
        centered.iter().map(|&p| scale(p, 1.0 / max_norm)).collect()
    };
    Ok(NormalizedCloud {
        cloud: PointCloud {
            points,
            label: cloud.label,
            id: cloud.id.clone(),
        },
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ]
            })
            .collect();
        PointCloud::new(points)
    }

    #[test]
    fn downsample_identity_when_target_equals_len() {
        let cloud = random_cloud(10, 3).with_label(4).with_id("c");
        let out = uniform_downsample(&cloud, 10, 7).unwrap();
        assert_eq!(out.points, cloud.points);
        assert_eq!(out.label, Some(4));
        assert_eq!(out.id, "c");
    }

    #[test]
    fn downsample_matches_seeded_index_oracle() {
        // Oracle: replay the published selection procedure (partial
        // Fisher-Yates over a ChaCha8 stream) independently.
        let cloud = PointCloud::new((0..100).map(|i| [i as f64, 0.0, 0.0]).collect());
        let out = uniform_downsample(&cloud, 50, 7).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut idx: Vec<usize> = (0..100).collect();
        for i in 0..50 {
            let j = i + rng.random_range(0..(100 - i) as u64) as usize;
            idx.swap(i, j);
        }
        let mut expect: Vec<usize> = idx[..50].to_vec();
        expect.sort_unstable();
        let expect_points: Vec<Point3> = expect.iter().map(|&i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(out.points, expect_points);
    }

    #[test]
    fn downsample_rejects_small_cloud() {
        let cloud = random_cloud(5, 0);
        assert_eq!(
            uniform_downsample(&cloud, 6, 0),
            Err(Error::TooFewPoints { have: 5, need: 6 })
        );
    }

    #[test]
    fn downsample_draws_distinct_indices() {
        let cloud = random_cloud(64, 11);
        let out = uniform_downsample(&cloud, 40, 5).unwrap();
        assert_eq!(out.len(), 40);
        // all selected points exist in the input and indices were distinct
        let mut seen = std::collections::HashSet::new();
        for p in &out.points {
            let i = cloud.points.iter().position(|q| q == p).unwrap();
            assert!(seen.insert(i));
        }
    }

    #[test]
    fn normalize_two_point_symmetry() {
        let cloud = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let out = normalize_unit_sphere(&cloud).unwrap();
        assert!(!out.degenerate);
        assert_eq!(out.cloud.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_statistics_and_idempotence() {
        let cloud = random_cloud(50, 9);
        let once = normalize_unit_sphere(&cloud).unwrap().cloud;
        let c = once.centroid();
        assert!(norm(c) < 1e-9);
        let max_norm = once.points.iter().map(|&p| norm(p)).fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-9);

        let twice = normalize_unit_sphere(&once).unwrap().cloud;
        for (a, b) in once.points.iter().zip(&twice.points) {
            assert!(dist2(*a, *b).sqrt() < 1e-9);
        }
    }

    #[test]
    fn normalize_flags_degenerate_cloud() {
        let cloud = PointCloud::new(vec![[3.0, 3.0, 3.0]; 4]);
        let out = normalize_unit_sphere(&cloud).unwrap();
        assert!(out.degenerate);
        assert!(out.cloud.points.iter().all(|p| *p == [0.0, 0.0, 0.0]));
    }
}
