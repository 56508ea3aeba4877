//! Command-line entry point: preprocessing, pretraining, fine-tuning,
//! evaluation, single-cloud classification, feature dumps and the
//! ablation drivers.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use pillgrade_core::cloud::uniform_downsample;
use pillgrade_core::data::{load_manifest, write_manifest, ManifestEntry, Split};
use pillgrade_core::error::{Error, Result};
use pillgrade_core::gpt::checkpoint::{load_checkpoint, load_partial_into, save_checkpoint};
use pillgrade_core::gpt::{FusionMode, GptModel};
use pillgrade_core::io::{load_cloud, write_xyz};
use pillgrade_core::npe::{
    npe_extract, pmb_build, read_feature_dump, write_feature_dump, FeatureRecord, GlobalFeature,
};
use pillgrade_core::synth::{mix_seed, write_synthetic_dataset};
use pillgrade_core::train::{
    self, epoch_log_csv, fusion_ablation, fusion_csv, grid_csv, grid_search_alpha_beta,
    metrics_csv, stage_ablation, stage_csv, write_text,
};

#[derive(Parser)]
#[command(name = "pillgrade", version, about = "Point-cloud pilling grade classifier")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override config-file values.
#[derive(Args, Debug)]
struct Overrides {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// executor cap, 0 = all cores
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    fusion_mode: Option<FusionFlag>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    stages: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    extra_mask_ratio: Option<f64>,
    /// downsampling target point count
    #[arg(long, global = true)]
    points: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FusionFlag {
    Feature,
    Logits,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Downsample and normalize raw captures, emitting a dataset manifest
    Preprocess {
        /// directory with one subdirectory per grade
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic pilling dataset (spheres with surface bumps)
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        val_per_class: usize,
        /// points per cloud
        #[arg(long, default_value_t = 512)]
        cloud_points: usize,
        /// comma-separated bump counts, one per grade
        #[arg(long, default_value = "32,8,0")]
        bumps: String,
    },
    /// Autoregressive pretraining of the generation objective
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a classifier (optionally from a pretrained checkpoint)
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// restore embedding + extractor from this checkpoint first
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the manifest's validation split
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one cloud; prints "id,predicted_grade,logits..."
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        /// feature dump used to build the memory bank for logit fusion
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Dump non-parametric global features for every manifest entry
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alpha/beta grid search over the trigonometric embedding
    Gridsearch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// comma-separated magnitudes
        #[arg(long, default_value = "100,500,1000,2000,3000")]
        alphas: String,
        /// comma-separated wavelengths
        #[arg(long, default_value = "50,100,200,300,400")]
        betas: String,
    },
    /// Stage-count or fusion-strategy ablation
    Ablate {
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// stage counts for the stages study
        #[arg(long, default_value = "1,2,3,4,5")]
        stage_list: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Study {
    Stages,
    Fusion,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = RunConfig::default();
    match resolve_config(&mut cfg, &cli.overrides) {
        Ok(()) => {}
        Err(e) => return fail(&e),
    }
    if cfg.threads > 0 {
        // ignore the error when a pool already exists (tests call run twice)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    match run(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: category={} {e}", category(e));
    ExitCode::from(exit_code(e))
}

fn category(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "data",
        _ => "runtime",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadConfig(_)
        | Error::BadRatio(_)
        | Error::BadDimension { .. }
        | Error::ClassMismatch { .. }
        | Error::BadLabel { .. } => 2,
        Error::MissingFile(_)
        | Error::Parse { .. }
        | Error::BadGrade { .. }
        | Error::EmptyClass { .. }
        | Error::Io(_)
        | Error::Format(_)
        | Error::TooFewPoints { .. }
        | Error::EmptySet
        | Error::InvalidCount { .. } => 3,
        _ => 4,
    }
}

fn resolve_config(cfg: &mut RunConfig, flags: &Overrides) -> Result<()> {
    if let Some(path) = &flags.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.threads {
        cfg.threads = v;
    }
    if let Some(v) = flags.fusion_mode {
        cfg.gpt.fusion_mode = match v {
            FusionFlag::Feature => FusionMode::FeatureEmbedding,
            FusionFlag::Logits => FusionMode::LogitInterpolation,
            FusionFlag::None => FusionMode::None,
        };
    }
    if let Some(v) = flags.lambda {
        cfg.gpt.lambda = v;
    }
    if let Some(v) = flags.alpha {
        cfg.gpt.npe.alpha = v;
    }
    if let Some(v) = flags.beta {
        cfg.gpt.npe.beta = v;
    }
    if let Some(v) = flags.stages {
        cfg.gpt.npe.stages = v;
    }
    if let Some(v) = flags.gamma {
        cfg.gpt.gamma = v;
    }
    if let Some(v) = flags.extra_mask_ratio {
        cfg.gpt.extra_mask_ratio = v;
    }
    if let Some(v) = flags.points {
        cfg.points = v;
    }
    if let Some(v) = flags.epochs {
        cfg.schedule.epochs = v;
    }
    if let Some(v) = flags.batch {
        cfg.schedule.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.schedule.base_lr = v;
    }
    cfg.finalize()
}

fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Preprocess { input, output } => cmd_preprocess(cfg, input, output),
        Command::Synth {
            output,
            train_per_class,
            val_per_class,
            cloud_points,
            bumps,
        } => {
            let counts = parse_list::<usize>(bumps)?;
            std::fs::create_dir_all(output)?;
            let manifest = write_synthetic_dataset(
                output,
                &counts,
                *train_per_class,
                *val_per_class,
                *cloud_points,
                cfg.seed,
            )?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Pretrain { manifest, out, log } => cmd_pretrain(cfg, manifest, out, log.as_deref()),
        Command::Train {
            manifest,
            out,
            log,
            pretrained,
        } => cmd_train(cfg, manifest, out, log.as_deref(), pretrained.as_deref()),
        Command::Eval {
            manifest,
            checkpoint,
            out,
        } => cmd_eval(cfg, manifest, checkpoint, out.as_deref()),
        Command::Classify {
            checkpoint,
            cloud,
            features,
        } => cmd_classify(cfg, checkpoint, cloud, features.as_deref()),
        Command::Features { manifest, out } => cmd_features(cfg, manifest, out),
        Command::Gridsearch {
            manifest,
            out_dir,
            alphas,
            betas,
        } => cmd_gridsearch(cfg, manifest, out_dir, alphas, betas),
        Command::Ablate {
            study,
            manifest,
            out,
            stage_list,
        } => cmd_ablate(cfg, *study, manifest, out, stage_list),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| Error::BadConfig(format!("bad list entry {tok:?}")))
        })
        .collect()
}

/// Maps a grade directory name ("3", "grade3", "grade_3") to its number.
fn grade_of_dir(name: &str) -> Option<u8> {
    let digits: String = name.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().ok().filter(|&g| g >= 1)
}

fn cmd_preprocess(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut failures: Vec<String> = Vec::new();

    let mut grade_dirs: Vec<(u8, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|_| Error::MissingFile(input.to_path_buf()))? {
        let entry = entry?;
        if entry.path().is_dir() {
            if let Some(grade) = grade_of_dir(&entry.file_name().to_string_lossy()) {
                grade_dirs.push((grade, entry.path()));
            }
        }
    }
    grade_dirs.sort();
    if grade_dirs.is_empty() {
        return Err(Error::Parse {
            path: input.to_path_buf(),
            line: 0,
            message: "no per-grade subdirectories found".into(),
        });
    }

    for (grade, dir) in &grade_dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let out_dir = output.join(format!("grade{grade}"));
        std::fs::create_dir_all(&out_dir)?;
        for (i, file) in files.iter().enumerate() {
            let result = (|| -> Result<PathBuf> {
                let cloud = load_cloud(file)?;
                let down =
                    uniform_downsample(&cloud, cfg.points, mix_seed(cfg.seed, *grade as u64, i as u64))?;
                let normalized = pillgrade_core::cloud::normalize_unit_sphere(&down)?.cloud;
                let stem = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("cloud_{i}"));
                let out_file = out_dir.join(format!("{stem}.xyz"));
                write_xyz(&normalized, &out_file)?;
                Ok(PathBuf::from(format!("grade{grade}/{stem}.xyz")))
            })();
            match result {
                Ok(rel) => entries.push(ManifestEntry {
                    path: rel,
                    grade: *grade,
                    split: Split::Train,
                }),
                Err(e) => failures.push(format!("{}: {e}", file.display())),
            }
        }
    }

    if !failures.is_empty() {
        for f in &failures {
            eprintln!("preprocess failure: {f}");
        }
        return Err(Error::Format(format!(
            "{} input file(s) failed to preprocess",
            failures.len()
        )));
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: input.to_path_buf(),
            line: 0,
            message: "no input clouds found".into(),
        });
    }

    // stratified split over the collected grades
    let grades: Vec<u8> = entries.iter().map(|e| e.grade).collect();
    let splits = pillgrade_core::data::assign_splits(&grades, cfg.split_ratio, cfg.seed)?;
    for (e, s) in entries.iter_mut().zip(splits) {
        e.split = s;
    }
    let manifest_path = output.join("manifest.csv");
    write_manifest(&manifest_path, &entries)?;
    write_text(&output.join("preprocess_config.txt"), &cfg.echo())?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn num_classes_of(cfg: &RunConfig) -> usize {
    cfg.gpt.num_classes
}

fn cmd_pretrain(cfg: &RunConfig, manifest: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(
        manifest,
        Some(cfg.split_ratio),
        cfg.seed,
        num_classes_of(cfg),
        true,
    )?;
    let store = train::load_store(&manifest, &cfg.gpt)?;
    let mut model = GptModel::init(cfg.gpt.clone(), cfg.seed)?;
    let train_idx = manifest.split_indices(Split::Train);
    let logs = train::pretrain(&mut model, &store, &train_idx, &cfg.schedule, cfg.seed)?;
    save_checkpoint(&model, out)?;
    let csv = epoch_log_csv(&logs, &cfg.echo());
    match log {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    out: &Path,
    log: Option<&Path>,
    pretrained: Option<&Path>,
) -> Result<()> {
    let manifest = load_manifest(
        manifest,
        Some(cfg.split_ratio),
        cfg.seed,
        num_classes_of(cfg),
        true,
    )?;
    let store = train::load_store(&manifest, &cfg.gpt)?;
    let mut model = GptModel::init(cfg.gpt.clone(), cfg.seed)?;
    if let Some(ckpt) = pretrained {
        let restored = load_partial_into(&mut model, ckpt, &["embed.", "ext"])?;
        eprintln!("restored {restored} pretrained tensors");
    }
    let (best, logs) = train::train(&mut model, &store, &manifest, &cfg.schedule, cfg.seed)?;
    save_checkpoint(&best, out)?;
    let csv = epoch_log_csv(&logs, &cfg.echo());
    match log {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, manifest: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(
        manifest,
        Some(cfg.split_ratio),
        cfg.seed,
        model.config.num_classes,
        true,
    )?;
    let metrics = train::evaluate(&model, &manifest)?;
    let csv = metrics_csv(&metrics, &cfg.echo());
    match out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_classify(
    cfg: &RunConfig,
    checkpoint: &Path,
    cloud_path: &Path,
    features: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let cloud = load_cloud(cloud_path)?;
    let pmb = match features {
        Some(path) => {
            let records = read_feature_dump(path)?;
            let feats: Vec<GlobalFeature> = records
                .iter()
                .map(|r| GlobalFeature {
                    values: r.values.iter().map(|&v| v as f64).collect(),
                })
                .collect();
            let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
            Some(pmb_build(&feats, &labels)?)
        }
        None => None,
    };
    if model.config.fusion_mode == FusionMode::LogitInterpolation && pmb.is_none() {
        return Err(Error::BadConfig(
            "logit fusion needs --features to build the memory bank".into(),
        ));
    }
    // configuration echo goes to stderr; stdout carries the single result line
    eprint!("{}", prefix_lines(&cfg.echo()));
    let (logits, grade) = model.classify(&cloud, pmb.as_ref())?;
    let logit_list: Vec<String> = logits.iter().map(|v| format!("{v}")).collect();
    println!("{},{},{}", cloud.id, grade, logit_list.join(","));
    Ok(())
}

fn prefix_lines(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn cmd_features(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(
        manifest,
        Some(cfg.split_ratio),
        cfg.seed,
        num_classes_of(cfg),
        true,
    )?;
    let mut records = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let cloud = load_cloud(&manifest.resolve(entry))?;
        let normalized = pillgrade_core::cloud::normalize_unit_sphere(&cloud)?.cloud;
        let feature = npe_extract(&normalized, &cfg.gpt.npe, cfg.gpt.d_model)?;
        records.push(FeatureRecord {
            id: cloud.id.clone(),
            label: entry.grade,
            values: feature.values.iter().map(|&v| v as f32).collect(),
        });
    }
    write_feature_dump(out, &records)?;
    write_text(&out.with_extension("config.txt"), &cfg.echo())?;
    Ok(())
}

fn cmd_gridsearch(
    cfg: &RunConfig,
    manifest: &Path,
    out_dir: &Path,
    alphas: &str,
    betas: &str,
) -> Result<()> {
    let alphas = parse_list::<f64>(alphas)?;
    let betas = parse_list::<f64>(betas)?;
    let manifest = load_manifest(
        manifest,
        Some(cfg.split_ratio),
        cfg.seed,
        num_classes_of(cfg),
        true,
    )?;
    std::fs::create_dir_all(out_dir)?;
    let result =
        grid_search_alpha_beta(&cfg.gpt, &manifest, &alphas, &betas, &cfg.schedule, cfg.seed)?;
    let (raw, summary) = grid_csv(&result, &cfg.echo());
    write_text(&out_dir.join("grid_raw.csv"), &raw)?;
    write_text(&out_dir.join("grid_summary.csv"), &summary)?;
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    study: Study,
    manifest: &Path,
    out: &Path,
    stage_list: &str,
) -> Result<()> {
    let manifest = load_manifest(
        manifest,
        Some(cfg.split_ratio),
        cfg.seed,
        num_classes_of(cfg),
        true,
    )?;
    let csv = match study {
        Study::Stages => {
            let stages = parse_list::<usize>(stage_list)?;
            let rows = stage_ablation(&cfg.gpt, &manifest, &stages, &cfg.schedule, cfg.seed)?;
            stage_csv(&rows, &cfg.echo())
        }
        Study::Fusion => {
            let rows = fusion_ablation(&cfg.gpt, &manifest, &cfg.schedule, cfg.seed)?;
            fusion_csv(&rows, &cfg.echo())
        }
    };
    write_text(out, &csv)?;
    Ok(())
}
