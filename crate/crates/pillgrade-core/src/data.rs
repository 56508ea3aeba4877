//! Dataset manifest handling and classification metrics.
//!
//! A manifest is a UTF-8 CSV with header `path,grade,split`. Paths are
//! resolved relative to the manifest's directory. Splits can either be
//! taken from the file or reassigned with a seeded stratified split.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub grade: u8,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_counts: BTreeMap<u8, usize>,
    pub num_classes: usize,
    /// Directory that relative entry paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_entries(
        entries: Vec<ManifestEntry>,
        num_classes: usize,
        base_dir: PathBuf,
    ) -> Result<Self> {
        let mut class_counts = BTreeMap::new();
        for e in &entries {
            if e.grade == 0 || e.grade as usize > num_classes {
                return Err(Error::BadLabel {
                    label: e.grade,
                    num_classes,
                });
            }
            *class_counts.entry(e.grade).or_insert(0) += 1;
        }
        Ok(Self {
            entries,
            class_counts,
            num_classes,
            base_dir,
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> (usize, usize) {
        let train = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .count();
        (train, self.entries.len() - train)
    }
}

/// Stratified seeded split: within each grade (ascending), indices are
/// shuffled by a grade-derived ChaCha8 stream and the first
/// round(ratio * count) go to the train split.
pub fn assign_splits(grades: &[u8], ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::BadRatio(ratio));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &g) in grades.iter().enumerate() {
        by_class.entry(g).or_default().push(i);
    }
    let mut splits = vec![Split::Val; grades.len()];
    for (&grade, indices) in &by_class {
        let mut order = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (((grade as u64) << 32) | grade as u64));
        order.shuffle(&mut rng);
        let n_train = (ratio * order.len() as f64).round() as usize;
        let n_train = n_train.min(order.len());
        for &i in order.iter().take(n_train) {
            splits[i] = Split::Train;
        }
    }
    Ok(splits)
}

/// Loads a manifest CSV. When `ratio` is given the split column is
/// reassigned by [`assign_splits`]; otherwise the file's split tags are
/// kept. `check_files` verifies every referenced file exists.
pub fn load_manifest(
    path: &Path,
    ratio: Option<f64>,
    seed: u64,
    num_classes: usize,
    check_files: bool,
) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if lineno == 0 && trimmed.to_ascii_lowercase().starts_with("path,") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "expected path,grade[,split]".into(),
            });
        }
        let grade: u8 = fields[1].trim().parse().map_err(|_| Error::BadGrade {
            line: lineno + 1,
            value: fields[1].trim().to_string(),
        })?;
        if grade == 0 || grade as usize > num_classes {
            return Err(Error::BadGrade {
                line: lineno + 1,
                value: fields[1].trim().to_string(),
            });
        }
        let split = match fields.get(2).map(|s| s.trim()) {
            Some("train") | None | Some("") => Split::Train,
            Some("val") => Split::Val,
            Some(other) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("bad split tag {other:?}"),
                })
            }
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(fields[0].trim()),
            grade,
            split,
        });
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "manifest has no entries".into(),
        });
    }

    if let Some(r) = ratio {
        let grades: Vec<u8> = entries.iter().map(|e| e.grade).collect();
        let splits = assign_splits(&grades, r, seed)?;
        for (e, s) in entries.iter_mut().zip(splits) {
            e.split = s;
        }
    }

    let manifest = DatasetManifest::from_entries(entries, num_classes, base_dir)?;
    for (&grade, &count) in &manifest.class_counts {
        if count == 0 {
            return Err(Error::EmptyClass { grade });
        }
    }
    if check_files {
        for e in &manifest.entries {
            let resolved = manifest.resolve(e);
            if !resolved.exists() {
                return Err(Error::MissingFile(resolved));
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("path,grade,split\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{}\n",
            e.path.display(),
            e.grade,
            e.split
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Confusion-matrix metrics. Rows index the true grade, columns the
/// predicted grade (both zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
    pub oa: f64,
    pub macc: f64,
}

impl Metrics {
    /// Builds metrics from (true grade, predicted grade) pairs, grades in
    /// 1..=num_classes.
    pub fn from_predictions(pairs: &[(u8, u8)], num_classes: usize) -> Result<Self> {
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for &(truth, pred) in pairs {
            if truth == 0 || truth as usize > num_classes {
                return Err(Error::BadLabel {
                    label: truth,
                    num_classes,
                });
            }
            if pred == 0 || pred as usize > num_classes {
                return Err(Error::BadLabel {
                    label: pred,
                    num_classes,
                });
            }
            confusion[truth as usize - 1][pred as usize - 1] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
        let correct: usize = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum();
        let oa = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        let mut recall_sum = 0.0;
        let mut classes_seen = 0usize;
        for (i, row) in confusion.iter().enumerate() {
            let row_total: usize = row.iter().sum();
            if row_total > 0 {
                recall_sum += row[i] as f64 / row_total as f64;
                classes_seen += 1;
            }
        }
        let macc = if classes_seen == 0 {
            0.0
        } else {
            recall_sum / classes_seen as f64
        };
        Metrics {
            confusion,
            oa,
            macc,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion
            .iter()
            .map(|row| row.iter().sum::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::TempDir;

    #[test]
    fn textilenet8_counts_split_to_1068_267() {
        // grade 1: 150, grades 3 and 7: 180, others: 165 -> 1335 total
        let mut grades = Vec::new();
        for grade in 1..=8u8 {
            let count = match grade {
                1 => 150,
                3 | 7 => 180,
                _ => 165,
            };
            grades.extend(std::iter::repeat(grade).take(count));
        }
        assert_eq!(grades.len(), 1335);
        let splits = assign_splits(&grades, 0.8, 0).unwrap();
        let train = splits.iter().filter(|s| **s == Split::Train).count();
        assert_eq!(train, 1068);
        assert_eq!(grades.len() - train, 267);
    }

    #[test]
    fn split_is_stratified_within_one_sample() {
        let mut grades = Vec::new();
        for grade in 1..=5u8 {
            grades.extend(std::iter::repeat(grade).take(37));
        }
        let splits = assign_splits(&grades, 0.8, 3).unwrap();
        for grade in 1..=5u8 {
            let idx: Vec<usize> = grades
                .iter()
                .enumerate()
                .filter(|(_, g)| **g == grade)
                .map(|(i, _)| i)
                .collect();
            let train = idx
                .iter()
                .filter(|&&i| splits[i] == Split::Train)
                .count();
            let expect = (0.8 * 37.0_f64).round();
            assert!((train as f64 - expect).abs() <= 1.0);
        }
    }

    #[test]
    fn toy_split_deterministic() {
        let grades = vec![1u8, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let a = assign_splits(&grades, 0.8, 1).unwrap();
        let b = assign_splits(&grades, 0.8, 1).unwrap();
        assert_eq!(a, b);
        let train = a.iter().filter(|s| **s == Split::Train).count();
        assert_eq!(train, 8);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = TempDir::new().unwrap();
        let entries = vec![
            ManifestEntry {
                path: PathBuf::from("a.xyz"),
                grade: 1,
                split: Split::Train,
            },
            ManifestEntry {
                path: PathBuf::from("b.xyz"),
                grade: 2,
                split: Split::Val,
            },
        ];
        let mpath = dir.path().join("manifest.csv");
        write_manifest(&mpath, &entries).unwrap();
        // keep the file's split tags
        let m = load_manifest(&mpath, None, 0, 8, false).unwrap();
        assert_eq!(m.entries, entries);
        assert_eq!(m.class_counts.get(&1), Some(&1));

        // file checking hits the missing files
        assert!(matches!(
            load_manifest(&mpath, None, 0, 8, true),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn manifest_rejects_bad_grades() {
        let dir = TempDir::new().unwrap();
        let mpath = dir.path().join("manifest.csv");
        std::fs::write(&mpath, "path,grade,split\na.xyz,9,train\n").unwrap();
        assert!(matches!(
            load_manifest(&mpath, None, 0, 8, false),
            Err(Error::BadGrade { .. })
        ));
        std::fs::write(&mpath, "path,grade,split\na.xyz,x,train\n").unwrap();
        assert!(matches!(
            load_manifest(&mpath, None, 0, 8, false),
            Err(Error::BadGrade { .. })
        ));
    }

    #[test]
    fn metrics_hand_counts() {
        // 2 classes: class 1 correct 2/2, class 2 correct 0/2
        let pairs = [(1u8, 1u8), (1, 1), (2, 1), (2, 1)];
        let m = Metrics::from_predictions(&pairs, 2).unwrap();
        assert_eq!(m.oa, 0.5);
        assert_eq!(m.macc, 0.5);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn metrics_perfect_classifier() {
        let pairs: Vec<(u8, u8)> = (1..=8).map(|g| (g, g)).collect();
        let m = Metrics::from_predictions(&pairs, 8).unwrap();
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.macc, 1.0);
    }

    #[test]
    fn metrics_identities_on_random_confusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let c = 2 + rng.random_range(0..6u32) as usize;
            let confusion: Vec<Vec<usize>> = (0..c)
                .map(|_| (0..c).map(|_| rng.random_range(0..20u32) as usize).collect())
                .collect();
            let m = Metrics::from_confusion(confusion.clone());
            let total: usize = confusion.iter().flatten().sum();
            let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
            if total > 0 {
                assert!((m.oa - trace as f64 / total as f64).abs() < 1e-12);
            }
            let mut recalls = Vec::new();
            for i in 0..c {
                let row: usize = confusion[i].iter().sum();
                if row > 0 {
                    recalls.push(confusion[i][i] as f64 / row as f64);
                }
            }
            if !recalls.is_empty() {
                let expect = recalls.iter().sum::<f64>() / recalls.len() as f64;
                assert!((m.macc - expect).abs() < 1e-12);
            }
            assert_eq!(m.total(), total);
        }
    }

    #[test]
    fn manifest_hand_tally_of_random_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(u8, u8)> = (0..20)
            .map(|_| {
                (
                    rng.random_range(1..=4u8),
                    rng.random_range(1..=4u8),
                )
            })
            .collect();
        let m = Metrics::from_predictions(&pairs, 4).unwrap();
        // tally by hand
        let mut confusion = vec![vec![0usize; 4]; 4];
        for &(t, p) in &pairs {
            confusion[t as usize - 1][p as usize - 1] += 1;
        }
        assert_eq!(m.confusion, confusion);
    }
}
