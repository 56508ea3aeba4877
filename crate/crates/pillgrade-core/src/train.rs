//! Training loops (pretrain and fine-tune), evaluation, and the ablation
//! experiment drivers. Per-sample forward/backward passes inside a batch
//! run in parallel; gradients are reduced in sample order, so results are
//! bit-identical for any executor count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetManifest, Metrics, Split};
use crate::error::{Error, Result};
use crate::gpt::{prepare_sample, DualMask, FusionMode, GptConfig, GptModel, PreparedSample};
use crate::io::load_cloud;
use crate::npe::{pmb_build, PointMemoryBank};
use crate::optim::{cosine_lr, Optimizer};
use crate::synth::mix_seed;

/// Knobs of one training run. Paper-scale defaults; toy runs override.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Epochs of linear warmup ahead of the cosine decay (0 = none).
    pub warmup_epochs: usize,
    /// Seeded rotation about the vertical axis, applied per epoch.
    pub augment_rotate: bool,
    /// Per-point jitter amplitude (0 = off).
    pub augment_jitter: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 32,
            base_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            gamma: 1.0,
            warmup_epochs: 0,
            augment_rotate: false,
            augment_jitter: 0.0,
        }
    }
}

impl Schedule {
    pub fn augmented(&self) -> bool {
        self.augment_rotate || self.augment_jitter > 0.0
    }
}

/// One epoch-log row; validation columns stay empty during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_oa: Option<f64>,
    pub val_macc: Option<f64>,
}

/// Renders the epoch log as CSV, prefixed with `# `-style provenance.
pub fn epoch_log_csv(rows: &[EpochLog], provenance: &str) -> String {
    let mut out = String::new();
    for line in provenance.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("epoch,lr,train_loss,val_oa,val_macc\n");
    for r in rows {
        let oa = r.val_oa.map(|v| format!("{v}")).unwrap_or_default();
        let macc = r.val_macc.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, oa, macc
        ));
    }
    out
}

/// Loads and prepares every manifest entry (in manifest order, parallel).
pub fn load_samples(manifest: &DatasetManifest, config: &GptConfig) -> Result<Vec<PreparedSample>> {
    manifest
        .entries
        .par_iter()
        .map(|entry| {
            let cloud = load_cloud(&manifest.resolve(entry))?.with_label(entry.grade);
            prepare_sample(&cloud, config)
        })
        .collect()
}

/// Clouds plus their unaugmented prepared form. Training draws augmented
/// views from `clouds` when augmentation is on; evaluation always uses
/// `prepared`.
#[derive(Debug, Clone)]
pub struct SampleStore {
    pub clouds: Vec<crate::cloud::PointCloud>,
    pub prepared: Vec<PreparedSample>,
}

pub fn load_store(manifest: &DatasetManifest, config: &GptConfig) -> Result<SampleStore> {
    let clouds: Result<Vec<_>> = manifest
        .entries
        .par_iter()
        .map(|entry| Ok(load_cloud(&manifest.resolve(entry))?.with_label(entry.grade)))
        .collect();
    let clouds = clouds?;
    let prepared: Result<Vec<_>> = clouds
        .par_iter()
        .map(|cloud| prepare_sample(cloud, config))
        .collect();
    Ok(SampleStore {
        clouds,
        prepared: prepared?,
    })
}

/// Seeded augmentation: rotation about the vertical (z) axis and/or
/// gaussian point jitter.
pub fn augment_cloud(
    cloud: &crate::cloud::PointCloud,
    rotate: bool,
    jitter: f64,
    seed: u64,
) -> crate::cloud::PointCloud {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    if rotate {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = angle.sin_cos();
        for p in out.points.iter_mut() {
            let (x, y) = (p[0], p[1]);
            p[0] = cos * x - sin * y;
            p[1] = sin * x + cos * y;
        }
    }
    if jitter > 0.0 {
        for p in out.points.iter_mut() {
            for c in p.iter_mut() {
                *c += rng.random_range(-jitter..jitter);
            }
        }
    }
    out
}

fn shuffled(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

type GradMap = BTreeMap<String, Vec<f64>>;

fn merge_grads(total: &mut GradMap, part: GradMap) {
    for (name, grad) in part {
        match total.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&grad) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, grad);
            }
        }
    }
}

fn scale_grads(grads: &mut GradMap, factor: f64) {
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Generation,
    Finetune,
}

fn sample_pass(
    model: &GptModel,
    sample: &PreparedSample,
    mask: &DualMask,
    kind: LossKind,
) -> Result<(f64, GradMap)> {
    let mut g = crate::autograd::Graph::new();
    let loss = match kind {
        LossKind::Generation => model.pretrain_loss_graph(&mut g, sample, mask)?,
        LossKind::Finetune => {
            let label = sample.label.ok_or(Error::BadLabel {
                label: 0,
                num_classes: model.config.num_classes,
            })?;
            model.finetune_loss_graph(&mut g, sample, label, mask)?
        }
    };
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

/// Runs one optimization pass over `order`, with per-sample masks and
/// augmentations seeded from (seed, epoch, sample index). Returns the mean
/// training loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut GptModel,
    store: &SampleStore,
    order: &[usize],
    schedule: &Schedule,
    opt: &mut Optimizer,
    kind: LossKind,
    seed: u64,
    epoch: usize,
    step: &mut u64,
    total_steps: u64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut last_lr = schedule.base_lr;
    for batch in order.chunks(schedule.batch_size.max(1)) {
        let lr = lr_at(schedule, *step, total_steps)?;
        last_lr = lr;
        let passes: Vec<Result<(f64, GradMap)>> = batch
            .par_iter()
            .map(|&idx| {
                let mask = model.training_mask(mix_seed(seed, epoch as u64, idx as u64))?;
                let aug_seed = mix_seed(seed ^ 0xa46, epoch as u64, idx as u64);
                if schedule.augment_rotate && schedule.augment_jitter == 0.0 {
                    // rotation-only: FPS and KNN are rotation invariant, so
                    // the cached tokenization can be reused
                    use rand::Rng;
                    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let sample =
                        store.prepared[idx].rotated_about_z(angle, &model.config)?;
                    sample_pass(model, &sample, &mask, kind)
                } else if schedule.augmented() {
                    let cloud = augment_cloud(
                        &store.clouds[idx],
                        schedule.augment_rotate,
                        schedule.augment_jitter,
                        aug_seed,
                    );
                    let sample = prepare_sample(&cloud, &model.config)?;
                    sample_pass(model, &sample, &mask, kind)
                } else {
                    sample_pass(model, &store.prepared[idx], &mask, kind)
                }
            })
            .collect();
        let mut grads = GradMap::new();
        for pass in passes {
            let (loss, g) = pass?;
            loss_sum += loss;
            merge_grads(&mut grads, g);
        }
        scale_grads(&mut grads, 1.0 / batch.len() as f64);
        opt.step(&mut model.params, &grads, lr)?;
        *step += 1;
    }
    Ok((loss_sum / order.len().max(1) as f64, last_lr))
}

fn lr_at(schedule: &Schedule, step: u64, total_steps: u64) -> Result<f64> {
    let warm = schedule.warmup_epochs as u64;
    if warm > 0 && total_steps > 0 {
        let warm_steps = warm * total_steps.div_ceil(schedule.epochs.max(1) as u64);
        if step < warm_steps {
            return Ok(schedule.base_lr * (step + 1) as f64 / warm_steps as f64);
        }
        let rest = total_steps.saturating_sub(warm_steps).max(1);
        return cosine_lr(
            (step - warm_steps).min(rest),
            rest,
            schedule.base_lr,
            schedule.min_lr,
        );
    }
    cosine_lr(step.min(total_steps), total_steps.max(1), schedule.base_lr, schedule.min_lr)
}

fn total_steps(order_len: usize, schedule: &Schedule) -> u64 {
    let per_epoch = order_len.div_ceil(schedule.batch_size.max(1));
    (per_epoch * schedule.epochs) as u64
}

/// Autoregressive pretraining: optimizes the generation loss under the
/// dual mask over the train split.
pub fn pretrain(
    model: &mut GptModel,
    store: &SampleStore,
    train_indices: &[usize],
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let mut opt = Optimizer::new(schedule.weight_decay);
    let mut logs = Vec::with_capacity(schedule.epochs);
    let total = total_steps(train_indices.len(), schedule);
    let mut step = 0u64;
    for epoch in 1..=schedule.epochs {
        let order = shuffled(train_indices, mix_seed(seed, 0x0e0c, epoch as u64));
        let (train_loss, lr) = run_epoch(
            model,
            store,
            &order,
            schedule,
            &mut opt,
            LossKind::Generation,
            seed,
            epoch,
            &mut step,
            total,
        )?;
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_oa: None,
            val_macc: None,
        });
    }
    Ok(logs)
}

/// Builds the memory bank from the train split when logit fusion is on.
pub fn build_bank(
    model: &GptModel,
    samples: &[PreparedSample],
    train_indices: &[usize],
) -> Result<Option<PointMemoryBank>> {
    if model.config.fusion_mode != FusionMode::LogitInterpolation {
        return Ok(None);
    }
    let mut features = Vec::with_capacity(train_indices.len());
    let mut labels = Vec::with_capacity(train_indices.len());
    for &i in train_indices {
        let f = samples[i].global.clone().ok_or_else(|| {
            Error::BadConfig("logit interpolation requires global features".into())
        })?;
        let l = samples[i].label.ok_or(Error::BadLabel {
            label: 0,
            num_classes: model.config.num_classes,
        })?;
        features.push(f);
        labels.push(l);
    }
    Ok(Some(pmb_build(&features, &labels)?))
}

/// Evaluates prepared samples; parallel over samples, deterministic.
pub fn eval_prepared(
    model: &GptModel,
    samples: &[PreparedSample],
    indices: &[usize],
    pmb: Option<&PointMemoryBank>,
) -> Result<Metrics> {
    let pairs: Vec<Result<(u8, u8)>> = indices
        .par_iter()
        .map(|&i| {
            let truth = samples[i].label.ok_or(Error::BadLabel {
                label: 0,
                num_classes: model.config.num_classes,
            })?;
            let (_, pred) = model.classify_prepared(&samples[i], pmb)?;
            Ok((truth, pred))
        })
        .collect();
    let pairs: Result<Vec<(u8, u8)>> = pairs.into_iter().collect();
    Metrics::from_predictions(&pairs?, model.config.num_classes)
}

/// Loads the manifest's samples and scores the validation split.
pub fn evaluate(model: &GptModel, manifest: &DatasetManifest) -> Result<Metrics> {
    if manifest.num_classes != model.config.num_classes {
        return Err(Error::ClassMismatch {
            model: model.config.num_classes,
            manifest: manifest.num_classes,
        });
    }
    let samples = load_samples(manifest, &model.config)?;
    let val = manifest.split_indices(Split::Val);
    let train = manifest.split_indices(Split::Train);
    let pmb = build_bank(model, &samples, &train)?;
    eval_prepared(model, &samples, &val, pmb.as_ref())
}

/// Fine-tunes on the train split, evaluating on the validation split each
/// epoch. Returns the best-validation-OA model (ties keep the earlier
/// epoch) plus the per-epoch log.
pub fn train(
    model: &mut GptModel,
    store: &SampleStore,
    manifest: &DatasetManifest,
    schedule: &Schedule,
    seed: u64,
) -> Result<(GptModel, Vec<EpochLog>)> {
    if manifest.num_classes != model.config.num_classes {
        return Err(Error::ClassMismatch {
            model: model.config.num_classes,
            manifest: manifest.num_classes,
        });
    }
    model.config.gamma = schedule.gamma;
    let train_idx = manifest.split_indices(Split::Train);
    let val_idx = manifest.split_indices(Split::Val);
    let pmb = build_bank(model, &store.prepared, &train_idx)?;

    let mut opt = Optimizer::new(schedule.weight_decay);
    let mut logs = Vec::with_capacity(schedule.epochs);
    let total = total_steps(train_idx.len(), schedule);
    let mut step = 0u64;
    let mut best: Option<(f64, usize, GptModel)> = None;

    for epoch in 1..=schedule.epochs {
        let order = shuffled(&train_idx, mix_seed(seed, 0xf17e, epoch as u64));
        let (train_loss, lr) = run_epoch(
            model,
            store,
            &order,
            schedule,
            &mut opt,
            LossKind::Finetune,
            seed,
            epoch,
            &mut step,
            total,
        )?;
        let metrics = eval_prepared(model, &store.prepared, &val_idx, pmb.as_ref())?;
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_oa: Some(metrics.oa),
            val_macc: Some(metrics.macc),
        });
        let better = match &best {
            Some((best_oa, _, _)) => metrics.oa > *best_oa,
            None => true,
        };
        if better {
            best = Some((metrics.oa, epoch, model.clone()));
        }
    }
    let best_model = best.map(|(_, _, m)| m).unwrap_or_else(|| model.clone());
    Ok((best_model, logs))
}

// ---- ablation drivers -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    pub oa: f64,
    pub macc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummaryRow {
    pub alpha: f64,
    pub best_oa: f64,
    pub best_beta: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub cells: Vec<GridCell>,
    pub summary: Vec<GridSummaryRow>,
}

fn run_config(
    config: &GptConfig,
    manifest: &DatasetManifest,
    schedule: &Schedule,
    seed: u64,
) -> Result<Metrics> {
    let store = load_store(manifest, config)?;
    let mut model = GptModel::init(config.clone(), seed)?;
    let (best, _) = train(&mut model, &store, manifest, schedule, seed)?;
    let val = manifest.split_indices(Split::Val);
    let train_idx = manifest.split_indices(Split::Train);
    let pmb = build_bank(&best, &store.prepared, &train_idx)?;
    eval_prepared(&best, &store.prepared, &val, pmb.as_ref())
}

/// Trains one model per (alpha, beta) cell and reports OA; the summary
/// lists each alpha's best OA with the beta achieving it.
pub fn grid_search_alpha_beta(
    template: &GptConfig,
    manifest: &DatasetManifest,
    alphas: &[f64],
    betas: &[f64],
    schedule: &Schedule,
    seed: u64,
) -> Result<GridSearchResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::BadConfig("empty grid".into()));
    }
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let mut cfg = template.clone();
            cfg.npe.alpha = alpha;
            cfg.npe.beta = beta;
            let metrics = run_config(&cfg, manifest, schedule, seed)?;
            cells.push(GridCell {
                alpha,
                beta,
                oa: metrics.oa,
                macc: metrics.macc,
            });
        }
    }
    let mut summary = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut best: Option<&GridCell> = None;
        for cell in cells.iter().filter(|c| c.alpha == alpha) {
            if best.map(|b| cell.oa > b.oa).unwrap_or(true) {
                best = Some(cell);
            }
        }
        let best = best.unwrap();
        summary.push(GridSummaryRow {
            alpha,
            best_oa: best.oa,
            best_beta: best.beta,
        });
    }
    Ok(GridSearchResult { cells, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stages: usize,
    pub oa: f64,
    pub macc: f64,
    /// Configuration echo proving the rows differ only in stage count.
    pub config_echo: String,
}

/// One row per requested stage count, same schedule throughout.
pub fn stage_ablation(
    template: &GptConfig,
    manifest: &DatasetManifest,
    stages: &[usize],
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<StageRow>> {
    let mut rows = Vec::with_capacity(stages.len());
    for &s in stages {
        let mut cfg = template.clone();
        cfg.npe.stages = s;
        let metrics = run_config(&cfg, manifest, schedule, seed)?;
        rows.push(StageRow {
            stages: s,
            oa: metrics.oa,
            macc: metrics.macc,
            config_echo: format!("npe.stages={s}"),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub strategy: String,
    /// Shape of the tensor the fusion touches, batch first.
    pub data_dimension: String,
    pub oa: f64,
    pub macc: f64,
}

/// Compares feature-embedding fusion against logit interpolation.
pub fn fusion_ablation(
    template: &GptConfig,
    manifest: &DatasetManifest,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<FusionRow>> {
    let mut rows = Vec::with_capacity(2);
    for mode in [FusionMode::FeatureEmbedding, FusionMode::LogitInterpolation] {
        let mut cfg = template.clone();
        cfg.fusion_mode = mode;
        let metrics = run_config(&cfg, manifest, schedule, seed)?;
        let data_dimension = match mode {
            FusionMode::FeatureEmbedding => format!(
                "{}x{}x{}",
                schedule.batch_size, cfg.n_tokens, cfg.d_model
            ),
            _ => format!("{}x{}", schedule.batch_size, cfg.num_classes),
        };
        rows.push(FusionRow {
            strategy: match mode {
                FusionMode::FeatureEmbedding => "feature_embedding".to_string(),
                _ => "logit_interpolation".to_string(),
            },
            data_dimension,
            oa: metrics.oa,
            macc: metrics.macc,
        });
    }
    Ok(rows)
}

// ---- CSV emission ------------------------------------------------------------

fn provenance_block(provenance: &str) -> String {
    let mut out = String::new();
    for line in provenance.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn grid_csv(result: &GridSearchResult, provenance: &str) -> (String, String) {
    let mut raw = provenance_block(provenance);
    raw.push_str("alpha,beta,oa,macc\n");
    for c in &result.cells {
        raw.push_str(&format!("{},{},{},{}\n", c.alpha, c.beta, c.oa, c.macc));
    }
    let mut summary = provenance_block(provenance);
    summary.push_str("alpha,best_oa,best_beta\n");
    for s in &result.summary {
        summary.push_str(&format!("{},{},{}\n", s.alpha, s.best_oa, s.best_beta));
    }
    (raw, summary)
}

pub fn stage_csv(rows: &[StageRow], provenance: &str) -> String {
    let mut out = provenance_block(provenance);
    out.push_str("stages,oa,macc,config\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.stages, r.oa, r.macc, r.config_echo
        ));
    }
    out
}

pub fn fusion_csv(rows: &[FusionRow], provenance: &str) -> String {
    let mut out = provenance_block(provenance);
    out.push_str("strategy,data_dimension,oa,macc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.strategy, r.data_dimension, r.oa, r.macc
        ));
    }
    out
}

pub fn metrics_csv(metrics: &Metrics, provenance: &str) -> String {
    let mut out = provenance_block(provenance);
    out.push_str("metric,value\n");
    out.push_str(&format!("oa,{}\n", metrics.oa));
    out.push_str(&format!("macc,{}\n", metrics.macc));
    for (i, row) in metrics.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("confusion_{},{}\n", i + 1, cells.join(",")));
    }
    out
}

/// Writes text atomically enough for reruns to be byte-identical.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;
    use crate::synth::write_synthetic_dataset;
    use std::path::PathBuf;
    use tempfile::TempDir;

    fn toy_config() -> GptConfig {
        GptConfig {
            n_tokens: 8,
            group_size: 8,
            d_model: 24,
            n_heads: 2,
            extractor_depth: 1,
            generator_depth: 1,
            ffn_dim: 32,
            embed_hidden: 16,
            head_hidden: 24,
            num_classes: 2,
            extra_mask_ratio: 0.1,
            gamma: 0.0,
            lambda: 3.0,
            fusion_mode: FusionMode::FeatureEmbedding,
            npe: crate::npe::NpeConfig {
                initial_dim: 12,
                neighbors_per_stage: 8,
                ..Default::default()
            },
            ..GptConfig::default()
        }
    }

    fn toy_dataset(dir: &Path) -> DatasetManifest {
        let manifest_path =
            write_synthetic_dataset(dir, &[24, 0], 6, 2, 96, 7).unwrap();
        crate::data::load_manifest(&manifest_path, None, 0, 2, true).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let cfg = toy_config();
        let store = load_store(&manifest, &cfg).unwrap();
        let mut model = GptModel::init(cfg, 1).unwrap();
        let before = model.params.clone();
        let schedule = Schedule {
            epochs: 0,
            batch_size: 4,
            base_lr: 1e-3,
            gamma: 0.0,
            ..Schedule::default()
        };
        let (_best, logs) = train(&mut model, &store, &manifest, &schedule, 3).unwrap();
        assert!(logs.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn loss_decreases_on_toy_finetune() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let cfg = toy_config();
        let store = load_store(&manifest, &cfg).unwrap();
        let mut model = GptModel::init(cfg, 2).unwrap();
        let schedule = Schedule {
            epochs: 6,
            batch_size: 4,
            base_lr: 3e-3,
            weight_decay: 0.01,
            gamma: 0.0,
            ..Schedule::default()
        };
        let (_best, logs) = train(&mut model, &store, &manifest, &schedule, 4).unwrap();
        assert_eq!(logs.len(), 6);
        assert!(
            logs.last().unwrap().train_loss < logs[0].train_loss,
            "loss did not decrease: {} -> {}",
            logs[0].train_loss,
            logs.last().unwrap().train_loss
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let cfg = toy_config();
        let store = load_store(&manifest, &cfg).unwrap();
        let schedule = Schedule {
            epochs: 3,
            batch_size: 4,
            base_lr: 1e-3,
            gamma: 0.0,
            ..Schedule::default()
        };
        let mut m1 = GptModel::init(cfg.clone(), 5).unwrap();
        let (_b1, l1) = train(&mut m1, &store, &manifest, &schedule, 6).unwrap();
        let mut m2 = GptModel::init(cfg, 5).unwrap();
        let (_b2, l2) = train(&mut m2, &store, &manifest, &schedule, 6).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn pretrain_reduces_generation_loss() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let mut cfg = toy_config();
        cfg.fusion_mode = FusionMode::None;
        let store = load_store(&manifest, &cfg).unwrap();
        let mut model = GptModel::init(cfg, 3).unwrap();
        let train_idx = manifest.split_indices(Split::Train);
        let schedule = Schedule {
            epochs: 8,
            batch_size: 4,
            base_lr: 3e-3,
            weight_decay: 0.01,
            ..Schedule::default()
        };
        let logs = pretrain(&mut model, &store, &train_idx, &schedule, 8).unwrap();
        assert!(logs.last().unwrap().train_loss < logs[0].train_loss);
        assert!(logs.iter().all(|l| l.val_oa.is_none()));
    }

    #[test]
    fn grid_search_enumerates_all_cells() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let cfg = toy_config();
        let schedule = Schedule {
            epochs: 1,
            batch_size: 4,
            base_lr: 1e-3,
            gamma: 0.0,
            ..Schedule::default()
        };
        let result = grid_search_alpha_beta(
            &cfg,
            &manifest,
            &[100.0, 1000.0],
            &[50.0, 100.0],
            &schedule,
            9,
        )
        .unwrap();
        assert_eq!(result.cells.len(), 4);
        assert_eq!(result.summary.len(), 2);
        // determinism across invocations
        let again = grid_search_alpha_beta(
            &cfg,
            &manifest,
            &[100.0, 1000.0],
            &[50.0, 100.0],
            &schedule,
            9,
        )
        .unwrap();
        assert_eq!(result.cells, again.cells);
    }

    #[test]
    fn stage_ablation_echoes_configs() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let cfg = toy_config();
        let schedule = Schedule {
            epochs: 1,
            batch_size: 4,
            base_lr: 1e-3,
            gamma: 0.0,
            ..Schedule::default()
        };
        let rows = stage_ablation(&cfg, &manifest, &[1, 2], &schedule, 10).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].config_echo, "npe.stages=1");
        assert_eq!(rows[1].config_echo, "npe.stages=2");
    }

    #[test]
    fn fusion_ablation_emits_both_rows() {
        let dir = TempDir::new().unwrap();
        let manifest = toy_dataset(dir.path());
        let cfg = toy_config();
        let schedule = Schedule {
            epochs: 1,
            batch_size: 4,
            base_lr: 1e-3,
            gamma: 0.0,
            ..Schedule::default()
        };
        let rows = fusion_ablation(&cfg, &manifest, &schedule, 11).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].strategy, "feature_embedding");
        assert_eq!(rows[0].data_dimension, "4x8x24");
        assert_eq!(rows[1].strategy, "logit_interpolation");
        assert_eq!(rows[1].data_dimension, "4x2");
        assert!(rows.iter().all(|r| r.oa >= 0.0 && r.oa <= 1.0));
    }

    #[test]
    fn evaluate_checks_class_agreement() {
        let entries = vec![ManifestEntry {
            path: PathBuf::from("x.xyz"),
            grade: 1,
            split: Split::Val,
        }];
        let manifest =
            DatasetManifest::from_entries(entries, 4, PathBuf::from(".")).unwrap();
        let cfg = toy_config(); // num_classes = 2
        let model = GptModel::init(cfg, 1).unwrap();
        assert!(matches!(
            evaluate(&model, &manifest),
            Err(Error::ClassMismatch { .. })
        ));
    }

    #[test]
    fn epoch_log_csv_format() {
        let rows = vec![EpochLog {
            epoch: 1,
            lr: 0.001,
            train_loss: 2.5,
            val_oa: Some(0.75),
            val_macc: None,
        }];
        let csv = epoch_log_csv(&rows, "seed=1");
        assert!(csv.starts_with("# seed=1\n"));
        assert!(csv.contains("epoch,lr,train_loss,val_oa,val_macc\n"));
        assert!(csv.contains("1,0.001,2.5,0.75,\n"));
    }
}
