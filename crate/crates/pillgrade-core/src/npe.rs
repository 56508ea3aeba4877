//! Non-parametric point cloud encoder: trigonometric position embedding,
//! a multi-stage FPS/KNN/pool hierarchy that needs no learned weights, the
//! point memory bank used by the logit-fusion path, and the feature dump
//! format the ablation pipeline reads.
//!
//! Point order is canonicalized by Morton code (ties by coordinates)
//! before any sampling, which makes the extracted feature invariant to
//! input permutation and run-to-run deterministic.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{sub, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::geom::{fps, knn, morton_encode, normalized_to_unit_cube, DEFAULT_MORTON_BITS};

/// Configuration of the trigonometric embedding and the stage hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct NpeConfig {
    /// Magnitude of the embedding argument.
    pub alpha: f64,
    /// Wavelength base of the embedding argument.
    pub beta: f64,
    /// Initial feature width; six channels per (axis, sin/cos) pair.
    pub initial_dim: usize,
    /// Hierarchy depth; each stage halves the point count.
    pub stages: usize,
    /// Neighbors gathered per surviving point at each stage.
    pub neighbors_per_stage: usize,
}

impl Default for NpeConfig {
    fn default() -> Self {
        Self {
            alpha: 1000.0,
            beta: 100.0,
            initial_dim: 72,
            stages: 2,
            neighbors_per_stage: 16,
        }
    }
}

impl NpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_dim == 0 || self.initial_dim % 6 != 0 {
            return Err(Error::BadDimension {
                dim: self.initial_dim,
            });
        }
        if !(1..=5).contains(&self.stages) {
            return Err(Error::BadConfig(format!(
                "stages {} outside 1..=5",
                self.stages
            )));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 || self.neighbors_per_stage == 0 {
            return Err(Error::BadConfig(
                "alpha, beta and neighbors_per_stage must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pair frequency factors alpha / beta^(6m/dim).
fn pose_frequencies(alpha: f64, beta: f64, dim: usize) -> Vec<f64> {
    let pairs = dim / 6;
    (0..pairs)
        .map(|m| alpha / beta.powf(6.0 * m as f64 / dim as f64))
        .collect()
}

fn pose_embed_into(point: Point3, freqs: &[f64], out: &mut [f64]) {
    let pairs = freqs.len();
    for (axis, &t) in point.iter().enumerate() {
        let base = axis * 2 * pairs;
        for (m, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (f * t).sin_cos();
            out[base + 2 * m] = sin;
            out[base + 2 * m + 1] = cos;
        }
    }
}

/// Sine/cosine embedding of one point at the given width: for each axis t
/// and pair index m, out[2m] = sin(alpha*t / beta^(6m/dim)) and out[2m+1]
/// the matching cosine, axis blocks concatenated.
pub fn pose_embed_dim(point: Point3, alpha: f64, beta: f64, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 6 == 0);
    let freqs = pose_frequencies(alpha, beta, dim);
    let mut out = vec![0.0; dim];
    pose_embed_into(point, &freqs, &mut out);
    out
}

/// [`pose_embed_dim`] at the configured initial width.
pub fn pose_embed(point: Point3, config: &NpeConfig) -> Vec<f64> {
    pose_embed_dim(point, config.alpha, config.beta, config.initial_dim)
}

/// The learning-free global feature of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature {
    pub values: Vec<f64>,
}

impl GlobalFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Canonical processing order: ascending Morton code over the normalized
/// coordinates, ties by coordinate lexicographic order.
fn canonical_order(points: &[Point3]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = morton_encode(normalized_to_unit_cube(points[a]), DEFAULT_MORTON_BITS);
        let cb = morton_encode(normalized_to_unit_cube(points[b]), DEFAULT_MORTON_BITS);
        ca.cmp(&cb).then_with(|| {
            points[a]
                .partial_cmp(&points[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    order
}

/// Extracts the global feature: pose embeddings are aggregated through
/// `stages` rounds of FPS halving, KNN grouping, offset-modulated neighbor
/// features and max+mean pooling (doubling the width each stage), then
/// pooled over the surviving points and projected to `out_dim` with a
/// fixed seed-0 random projection.
pub fn npe_extract(cloud: &PointCloud, config: &NpeConfig, out_dim: usize) -> Result<GlobalFeature> {
    config.validate()?;
    cloud.validate()?;

    let order = canonical_order(&cloud.points);
    let mut points: Vec<Point3> = order.iter().map(|&i| cloud.points[i]).collect();
    let mut features: Vec<Vec<f64>> = points
        .iter()
        .map(|&p| pose_embed(p, config))
        .collect();

    for _stage in 0..config.stages {
        let n_next = points.len() / 2;
        if n_next == 0 {
            return Err(Error::TooFewPoints {
                have: points.len(),
                need: 2,
            });
        }
        let dim = features[0].len();
        let survivors = fps(&points, n_next, 0)?;
        let k = config.neighbors_per_stage.min(points.len());
        let freqs = pose_frequencies(config.alpha, config.beta, dim);

        let mut next_points = Vec::with_capacity(n_next);
        let mut next_features = Vec::with_capacity(n_next);
        let mut w = vec![0.0; dim];
        for &s in &survivors {
            let center = points[s];
            let neighbors = knn(&points, center, k)?;
            let mut maxed = vec![f64::NEG_INFINITY; dim];
            let mut meaned = vec![0.0; dim];
            for &j in &neighbors {
                pose_embed_into(sub(points[j], center), &freqs, &mut w);
                for d in 0..dim {
                    let modulated = (features[j][d] + w[d]) * w[d];
                    if modulated > maxed[d] {
                        maxed[d] = modulated;
                    }
                    meaned[d] += modulated;
                }
            }
            for v in meaned.iter_mut() {
                *v /= neighbors.len() as f64;
            }
            maxed.extend_from_slice(&meaned);
            next_points.push(center);
            next_features.push(maxed);
        }
        points = next_points;
        features = next_features;
    }

    // global max+mean pooling over whatever points remain
    let dim = features[0].len();
    let mut gmax = vec![f64::NEG_INFINITY; dim];
    let mut gmean = vec![0.0; dim];
    for f in &features {
        for d in 0..dim {
            if f[d] > gmax[d] {
                gmax[d] = f[d];
            }
            gmean[d] += f[d];
        }
    }
    for v in gmean.iter_mut() {
        *v /= features.len() as f64;
    }
    gmax.extend_from_slice(&gmean);

    Ok(GlobalFeature {
        values: project_fixed(&gmax, out_dim),
    })
}

/// Fixed deterministic projection (seed 0) from the raw pooled width onto
/// `out_dim`; the matrix depends only on the two dimensions.
fn project_fixed(raw: &[f64], out_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dist = Normal::new(0.0, 1.0 / (raw.len() as f64).sqrt()).unwrap();
    let mut out = vec![0.0; out_dim];
    for &r in raw {
        for o in out.iter_mut() {
            *o += r * dist.sample(&mut rng);
        }
    }
    out
}

/// Training-set features with labels; rows are unit-normalized so cosine
/// similarity is a dot product.
#[derive(Debug, Clone)]
pub struct PointMemoryBank {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

pub fn pmb_build(features: &[GlobalFeature], labels: &[u8]) -> Result<PointMemoryBank> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::EmptyBank);
    }
    let rows = features
        .iter()
        .map(|f| normalize_unit(&f.values))
        .collect();
    Ok(PointMemoryBank {
        features: rows,
        labels: labels.to_vec(),
    })
}

fn normalize_unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-300 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Class logits from similarity to the bank: each bank row of class c
/// contributes exp(-gamma * (1 - cos_sim)) to logits[c].
pub fn pmb_classify(
    bank: &PointMemoryBank,
    feature: &GlobalFeature,
    num_classes: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    if bank.features.is_empty() {
        return Err(Error::EmptyBank);
    }
    let dim = bank.features[0].len();
    if feature.values.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: feature.values.len(),
        });
    }
    let q = normalize_unit(&feature.values);
    let mut logits = vec![0.0; num_classes];
    for (row, &label) in bank.features.iter().zip(&bank.labels) {
        let sim: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
        let weight = (-gamma * (1.0 - sim)).exp();
        if label >= 1 && (label as usize) <= num_classes {
            logits[label as usize - 1] += weight;
        }
    }
    Ok(logits)
}

/// out = (1 - weight) * model + weight * pmb.
pub fn logits_interpolate(
    model_logits: &[f64],
    pmb_logits: &[f64],
    weight: f64,
) -> Result<Vec<f64>> {
    if model_logits.len() != pmb_logits.len() {
        return Err(Error::DimensionMismatch {
            expected: model_logits.len(),
            actual: pmb_logits.len(),
        });
    }
    Ok(model_logits
        .iter()
        .zip(pmb_logits)
        .map(|(m, p)| (1.0 - weight) * m + weight * p)
        .collect())
}

/// One record of the feature dump file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// 0 means unlabeled.
    pub label: u8,
    pub values: Vec<f32>,
}

const DUMP_MAGIC: &[u8; 8] = b"NPEDUMP1";

/// Binary feature dump: magic, record count, then per record the id
/// (length-prefixed UTF-8), label byte, feature width and the raw little
/// endian f32 vector.
pub fn write_feature_dump(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        w.write_all(&(r.id.len() as u32).to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&[r.label])?;
        w.write_all(&(r.values.len() as u32).to_le_bytes())?;
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_dump(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("feature dump too short".into()))?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("bad feature dump magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let id_len = u32::from_le_bytes(u32buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::Format("feature dump id is not UTF-8".into()))?;
        let mut label = [0u8; 1];
        r.read_exact(&mut label)?;
        r.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut values = Vec::with_capacity(dim);
        let mut f32buf = [0u8; 4];
        for _ in 0..dim {
            r.read_exact(&mut f32buf)?;
            values.push(f32::from_le_bytes(f32buf));
        }
        records.push(FeatureRecord {
            id,
            label: label[0],
            values,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::normalize_unit_sphere;
    use rand::{Rng, SeedableRng};
    use tempfile::TempDir;

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
    fn pose_embed_origin_alternates_zero_one() {
        let cfg = NpeConfig::default();
        let e = pose_embed([0.0, 0.0, 0.0], &cfg);
        assert_eq!(e.len(), 72);
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn pose_embed_scalar_hand_case() {
        // alpha=100, beta=100, dim=6: single pair per axis, scale = 1
        let e = pose_embed_dim([0.5, 0.0, 0.0], 100.0, 100.0, 6);
        assert!((e[0] - (50.0f64).sin()).abs() < 1e-15);
        assert!((e[1] - (50.0f64).cos()).abs() < 1e-15);
        // y and z blocks embed zero
        assert_eq!(&e[2..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pose_embed_bounded_and_pythagorean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let alpha = rng.random_range(10.0..3000.0);
            let beta = rng.random_range(10.0..400.0);
            let e = pose_embed_dim(p, alpha, beta, 36);
            for v in &e {
                assert!((-1.0..=1.0).contains(v));
            }
            for pair in e.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn npe_extract_is_deterministic() {
        let cloud = random_normalized(128, 1);
        let cfg = NpeConfig::default();
        let a = npe_extract(&cloud, &cfg, 64).unwrap();
        let b = npe_extract(&cloud, &cfg, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        assert!(a.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn npe_extract_is_permutation_invariant() {
        let cloud = random_normalized(64, 2);
        let cfg = NpeConfig {
            neighbors_per_stage: 8,
            ..NpeConfig::default()
        };
        let base = npe_extract(&cloud, &cfg, 48).unwrap();

        let mut permuted = cloud.clone();
        permuted.points.reverse();
        permuted.points.swap(3, 40);
        let shuffled = npe_extract(&permuted, &cfg, 48).unwrap();
        for (a, b) in base.values.iter().zip(&shuffled.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn npe_extract_rejects_tiny_clouds() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let cfg = NpeConfig::default();
        assert!(matches!(
            npe_extract(&cloud, &cfg, 16),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = NpeConfig {
            initial_dim: 70,
            ..NpeConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::BadDimension { .. })));
        let cfg = NpeConfig {
            stages: 6,
            ..NpeConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::BadConfig(_))));
    }

    #[test]
    fn pmb_rows_are_unit_norm() {
        let feats: Vec<GlobalFeature> = (0..100)
            .map(|i| GlobalFeature {
                values: (0..8).map(|d| ((i * 8 + d) as f64 * 0.37).sin() * 3.0).collect(),
            })
            .collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 8 + 1) as u8).collect();
        let bank = pmb_build(&feats, &labels).unwrap();
        for row in &bank.features {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pmb_classify_self_similarity_wins() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 1..=8u8 {
            let mut v = vec![0.0; 8];
            v[c as usize - 1] = 1.0;
            feats.push(GlobalFeature { values: v });
            labels.push(c);
        }
        let bank = pmb_build(&feats, &labels).unwrap();
        let logits = pmb_classify(&bank, &feats[2], 8, 1000.0).unwrap();
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
        assert!(logits.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn pmb_classify_orthogonal_vs_parallel() {
        let feats = vec![
            GlobalFeature {
                values: vec![1.0, 0.0, 0.0],
            },
            GlobalFeature {
                values: vec![0.0, 1.0, 0.0],
            },
        ];
        let bank = pmb_build(&feats, &[1, 2]).unwrap();
        let query = GlobalFeature {
            values: vec![0.0, 2.0, 0.0],
        };
        let logits = pmb_classify(&bank, &query, 2, 1000.0).unwrap();
        assert!(logits[1] > logits[0]);
    }

    #[test]
    fn pmb_classify_matches_nearest_neighbor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 1..=8u8 {
            for _ in 0..4 {
                let mut v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                v[c as usize % 16] += 2.5;
                feats.push(GlobalFeature { values: v });
                labels.push(c);
            }
        }
        let bank = pmb_build(&feats, &labels).unwrap();

        let mut agree = 0;
        for q in 0..20 {
            let query = GlobalFeature {
                values: (0..16)
                    .map(|d| feats[q].values[d] + rng.random_range(-0.05..0.05))
                    .collect(),
            };
            let logits = pmb_classify(&bank, &query, 8, 1000.0).unwrap();
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u8
                + 1;
            // 1-NN oracle in cosine space
            let qn = normalize_unit(&query.values);
            let nn = bank
                .features
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    let sa: f64 = a.iter().zip(&qn).map(|(x, y)| x * y).sum();
                    let sb: f64 = b.iter().zip(&qn).map(|(x, y)| x * y).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap()
                .0;
            if bank.labels[nn] == pred {
                agree += 1;
            }
        }
        assert!(agree >= 19, "only {agree}/20 agreement with 1-NN oracle");
    }

    #[test]
    fn pmb_classify_invariant_to_query_rescale() {
        let feats = vec![
            GlobalFeature {
                values: vec![0.6, 0.8, 0.0],
            },
            GlobalFeature {
                values: vec![0.0, 0.6, 0.8],
            },
        ];
        let bank = pmb_build(&feats, &[1, 2]).unwrap();
        let q1 = GlobalFeature {
            values: vec![0.1, 0.2, 0.3],
        };
        let q2 = GlobalFeature {
            values: vec![0.5, 1.0, 1.5],
        };
        let a = pmb_classify(&bank, &q1, 2, 1000.0).unwrap();
        let b = pmb_classify(&bank, &q2, 2, 1000.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let m = vec![1.0, 3.0];
        let p = vec![3.0, 1.0];
        assert_eq!(logits_interpolate(&m, &p, 0.0).unwrap(), m);
        assert_eq!(logits_interpolate(&m, &p, 1.0).unwrap(), p);
        assert_eq!(logits_interpolate(&m, &p, 0.5).unwrap(), vec![2.0, 2.0]);
        assert!(logits_interpolate(&m, &[1.0], 0.5).is_err());
    }

    #[test]
    fn pmb_build_errors() {
        assert!(matches!(pmb_build(&[], &[]), Err(Error::EmptyBank)));
        let f = vec![GlobalFeature {
            values: vec![1.0],
        }];
        assert!(matches!(
            pmb_build(&f, &[1, 2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn feature_dump_roundtrip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("features.bin");
        let records = vec![
            FeatureRecord {
                id: "cloud_a".into(),
                label: 3,
                values: vec![1.5, -2.25, 0.0],
            },
            FeatureRecord {
                id: "cloud_b".into(),
                label: 0,
                values: vec![0.125; 8],
            },
        ];
        write_feature_dump(&path, &records).unwrap();
        let back = read_feature_dump(&path).unwrap();
        assert_eq!(back, records);
    }
}
