//! Synthetic pilling clouds for benchmarks and smoke tests: spheres with a
//! configurable number of raised surface bumps standing in for pills. More
//! bumps means more severe pilling, so bump count maps to a lower grade.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{norm, scale, Point3, PointCloud};
use crate::data::{write_manifest, ManifestEntry, Split};
use crate::error::Result;
use crate::io::write_xyz;

/// Bump height relative to the unit sphere radius.
pub const BUMP_RADIUS: f64 = 0.05;
// Chordal footprint of a bump, wider than it is tall so each pill covers
// enough surface samples to be visible at 512 points.
const BUMP_FOOTPRINT: f64 = 0.4;
// Minimum chordal distance between bump centers.
const BUMP_SEPARATION: f64 = 0.4;

fn unit_direction(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Quasi-uniform sphere directions: a Fibonacci lattice under a seeded
/// random rotation. Sampling noise stays negligible, so the pills carry
/// the entire class signal.
fn fibonacci_directions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut pts: Vec<Point3> = (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = std::f64::consts::TAU * i as f64 / golden;
            [r * theta.cos(), r * theta.sin(), z]
        })
        .collect();
    for axis in 0..3 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = angle.sin_cos();
        let i = (axis + 1) % 3;
        let j = (axis + 2) % 3;
        for p in pts.iter_mut() {
            let (pi, pj) = (p[i], p[j]);
            p[i] = cos * pi - sin * pj;
            p[j] = sin * pi + cos * pj;
        }
    }
    pts
}

/// Well-spread bump centers: farthest-point selection over a seeded
/// candidate pool, starting from a random site. Pills end up spread over
/// the whole surface the way abrasion wear does, at least
/// [`BUMP_SEPARATION`] apart for small counts.
fn bump_centers(rng: &mut ChaCha8Rng, count: usize) -> Vec<Point3> {
    if count == 0 {
        return Vec::new();
    }
    let pool: Vec<Point3> = (0..256).map(|_| unit_direction(rng)).collect();
    let start = rand::Rng::random_range(rng, 0..pool.len() as u64) as usize;
    let picked = crate::geom::fps(&pool, count.min(pool.len()), start).unwrap_or_default();
    picked.iter().map(|&i| pool[i]).collect()
}

/// One synthetic cloud: a quasi-uniform sampling of the unit sphere raised
/// outward near each of `bumps` separated bump centers (ellipsoidal
/// pill-shaped caps of height [`BUMP_RADIUS`]).
pub fn pilling_sphere(points: usize, bumps: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = bump_centers(&mut rng, bumps);
    let mut out = Vec::with_capacity(points);
    for dir in fibonacci_directions(points, &mut rng) {
        let mut radius = 1.0;
        for &c in &centers {
            let chord = norm(crate::cloud::sub(dir, c));
            if chord < BUMP_FOOTPRINT {
                // ellipsoidal cap: pill-like, sharp at the rim
                let t = chord / BUMP_FOOTPRINT;
                radius += BUMP_RADIUS * (1.0 - t * t).sqrt();
            }
        }
        out.push(scale(dir, radius));
    }
    PointCloud::new(out)
}

/// Mixes values into a fresh seed; used to derive per-cloud seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(b);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 29;
    x
}

/// Writes a complete synthetic dataset under `dir`: one XYZ file per cloud
/// in per-grade subdirectories plus a `manifest.csv`. `bump_counts[g]`
/// gives the bump count for grade `g+1`; higher grades get fewer bumps.
/// Returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    bump_counts: &[usize],
    train_per_class: usize,
    val_per_class: usize,
    points: usize,
    seed: u64,
) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for (gi, &bumps) in bump_counts.iter().enumerate() {
        let grade = (gi + 1) as u8;
        let grade_dir = dir.join(format!("grade{grade}"));
        std::fs::create_dir_all(&grade_dir)?;
        for i in 0..(train_per_class + val_per_class) {
            let cloud_seed = mix_seed(seed, grade as u64, i as u64);
            let cloud = pilling_sphere(points, bumps, cloud_seed);
            let file = grade_dir.join(format!("cloud_{i:04}.xyz"));
            write_xyz(&cloud, &file)?;
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("grade{grade}/cloud_{i:04}.xyz")),
                grade,
                split: if i < train_per_class {
                    Split::Train
                } else {
                    Split::Val
                },
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_without_bumps_has_unit_radius() {
        let cloud = pilling_sphere(256, 0, 1);
        assert_eq!(cloud.len(), 256);
        for p in &cloud.points {
            let r = norm(*p);
            assert!((r - 1.0).abs() < 0.01, "radius {r}");
        }
    }

    #[test]
    fn bumps_raise_some_points() {
        let cloud = pilling_sphere(512, 32, 2);
        let raised = cloud
            .points
            .iter()
            .filter(|&&p| norm(p) > 1.0 + BUMP_RADIUS * 0.3)
            .count();
        assert!(raised > 20, "only {raised} raised points");
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = pilling_sphere(128, 8, 42);
        let b = pilling_sphere(128, 8, 42);
        assert_eq!(a.points, b.points);
    }
}
