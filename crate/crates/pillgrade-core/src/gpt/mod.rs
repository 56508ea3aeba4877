//! The transformer pipeline: dual-masked self-attention, extractor and
//! generator stacks, direction prompts, the patch prediction head, the
//! generation and fine-tune losses, and end-to-end classification.

pub mod checkpoint;
pub mod mask;

pub use mask::{make_dual_mask, DualMask, MASK_PENALTY};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, ParamSet, Tensor, Var};
use crate::cloud::{norm, sub, PointCloud};
use crate::embed::{
    ape_encode_padded, fuse_features_graph, init_pointnet_params, pointnet_embed_graph,
};
use crate::error::{Error, Result};
use crate::geom::DEFAULT_MORTON_BITS;
use crate::npe::{npe_extract, pmb_classify, GlobalFeature, NpeConfig, PointMemoryBank};
use crate::patches::{build_patches, PatchSet};

/// Where the non-parametric global feature enters the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Added into the token matrix ahead of the extractor.
    FeatureEmbedding,
    /// Blended into the classification logits after the forward pass.
    LogitInterpolation,
    /// No fusion.
    None,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::FeatureEmbedding => write!(f, "feature"),
            FusionMode::LogitInterpolation => write!(f, "logits"),
            FusionMode::None => write!(f, "none"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" | "feature_embedding" => Ok(FusionMode::FeatureEmbedding),
            "logits" | "logit_interpolation" => Ok(FusionMode::LogitInterpolation),
            "none" => Ok(FusionMode::None),
            other => Err(Error::BadConfig(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptConfig {
    /// Patch (token) count n.
    pub n_tokens: usize,
    /// Points per patch k.
    pub group_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub extractor_depth: usize,
    pub generator_depth: usize,
    pub ffn_dim: usize,
    /// Hidden width of the shared per-point embedding MLP.
    pub embed_hidden: usize,
    /// Hidden width of the patch prediction head.
    pub head_hidden: usize,
    pub num_classes: usize,
    pub extra_mask_ratio: f64,
    /// Weight of the generation loss inside the fine-tune loss.
    pub gamma: f64,
    /// Token weight in the feature fusion.
    pub lambda: f64,
    pub fusion_mode: FusionMode,
    /// Per-patch instead of whole-cloud non-parametric features.
    pub npe_per_patch: bool,
    /// Sharpness of the memory-bank similarity weighting.
    pub pmb_gamma: f64,
    /// Interpolation weight for logit fusion.
    pub logit_weight: f64,
    pub npe: NpeConfig,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            n_tokens: 512,
            group_size: 32,
            d_model: 384,
            n_heads: 6,
            extractor_depth: 12,
            generator_depth: 4,
            ffn_dim: 1536,
            embed_hidden: 128,
            head_hidden: 384,
            num_classes: 8,
            extra_mask_ratio: 0.1,
            gamma: 1.0,
            lambda: 3.0,
            fusion_mode: FusionMode::FeatureEmbedding,
            npe_per_patch: false,
            pmb_gamma: 1000.0,
            logit_weight: 0.5,
            npe: NpeConfig::default(),
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_tokens == 0
            || self.group_size == 0
            || self.ffn_dim == 0
            || self.embed_hidden == 0
            || self.head_hidden == 0
            || self.num_classes == 0
        {
            return Err(Error::BadConfig("zero-sized model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.extra_mask_ratio) {
            return Err(Error::BadRatio(self.extra_mask_ratio));
        }
        if self.gamma < 0.0 {
            return Err(Error::BadConfig(format!("gamma {} < 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.logit_weight) {
            return Err(Error::BadConfig(format!(
                "logit_weight {} outside [0,1]",
                self.logit_weight
            )));
        }
        self.npe.validate()
    }

    /// Canonical key=value serialization (sorted keys, one per line).
    pub fn to_kv(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("d_model", self.d_model.to_string());
        kv.insert("embed_hidden", self.embed_hidden.to_string());
        kv.insert("extra_mask_ratio", format!("{}", self.extra_mask_ratio));
        kv.insert("extractor_depth", self.extractor_depth.to_string());
        kv.insert("ffn_dim", self.ffn_dim.to_string());
        kv.insert("fusion_mode", self.fusion_mode.to_string());
        kv.insert("gamma", format!("{}", self.gamma));
        kv.insert("generator_depth", self.generator_depth.to_string());
        kv.insert("group_size", self.group_size.to_string());
        kv.insert("head_hidden", self.head_hidden.to_string());
        kv.insert("lambda", format!("{}", self.lambda));
        kv.insert("logit_weight", format!("{}", self.logit_weight));
        kv.insert("n_heads", self.n_heads.to_string());
        kv.insert("n_tokens", self.n_tokens.to_string());
        kv.insert("npe.alpha", format!("{}", self.npe.alpha));
        kv.insert("npe.beta", format!("{}", self.npe.beta));
        kv.insert("npe.initial_dim", self.npe.initial_dim.to_string());
        kv.insert(
            "npe.neighbors_per_stage",
            self.npe.neighbors_per_stage.to_string(),
        );
        kv.insert("npe.stages", self.npe.stages.to_string());
        kv.insert("npe_per_patch", self.npe_per_patch.to_string());
        kv.insert("num_classes", self.num_classes.to_string());
        kv.insert("pmb_gamma", format!("{}", self.pmb_gamma));
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses the canonical form produced by [`GptConfig::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = GptConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("bad config line {line:?}")))?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::BadConfig(format!("bad value {v:?} for {k}"));
        macro_rules! parse {
            ($v:expr) => {
                $v.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "n_tokens" => self.n_tokens = parse!(value),
            "group_size" => self.group_size = parse!(value),
            "d_model" => self.d_model = parse!(value),
            "n_heads" => self.n_heads = parse!(value),
            "extractor_depth" => self.extractor_depth = parse!(value),
            "generator_depth" => self.generator_depth = parse!(value),
            "ffn_dim" => self.ffn_dim = parse!(value),
            "embed_hidden" => self.embed_hidden = parse!(value),
            "head_hidden" => self.head_hidden = parse!(value),
            "num_classes" => self.num_classes = parse!(value),
            "extra_mask_ratio" => self.extra_mask_ratio = parse!(value),
            "gamma" => self.gamma = parse!(value),
            "lambda" => self.lambda = parse!(value),
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "npe_per_patch" => self.npe_per_patch = parse!(value),
            "pmb_gamma" => self.pmb_gamma = parse!(value),
            "logit_weight" => self.logit_weight = parse!(value),
            "npe.alpha" => self.npe.alpha = parse!(value),
            "npe.beta" => self.npe.beta = parse!(value),
            "npe.initial_dim" => self.npe.initial_dim = parse!(value),
            "npe.stages" => self.npe.stages = parse!(value),
            "npe.neighbors_per_stage" => self.npe.neighbors_per_stage = parse!(value),
            other => return Err(Error::BadConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Model parameters plus configuration; the serializable unit.
#[derive(Debug, Clone)]
pub struct GptModel {
    pub config: GptConfig,
    pub params: ParamSet,
}

fn mix(seed: u64, salt: u64) -> u64 {
    crate::synth::mix_seed(seed, salt, 0x5eed)
}

impl GptModel {
    /// Fresh model with seeded gaussian weights (std 0.02) and zero biases.
    pub fn init(config: GptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let d = config.d_model;
        let mut salt = 0u64;
        let mut next = |shape: Vec<usize>| {
            salt += 1;
            // fan-in scaled; keeps attention and FFN active from the start
            let std = (1.0 / shape[0] as f64).sqrt();
            Tensor::randn(shape, std, mix(seed, salt))
        };

        init_pointnet_params(&mut params, config.embed_hidden, d, mix(seed, 0xe43b));

        for (prefix, depth) in [("ext", config.extractor_depth), ("gen", config.generator_depth)]
        {
            for i in 0..depth {
                for w in ["wq", "wk", "wv", "wo"] {
                    params.insert(format!("{prefix}{i}.attn.{w}"), next(vec![d, d]));
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    params.insert(format!("{prefix}{i}.attn.{b}"), Tensor::zeros(vec![d]));
                }
                params.insert(
                    format!("{prefix}{i}.ffn.w1"),
                    next(vec![d, config.ffn_dim]),
                );
                params.insert(
                    format!("{prefix}{i}.ffn.b1"),
                    Tensor::zeros(vec![config.ffn_dim]),
                );
                params.insert(
                    format!("{prefix}{i}.ffn.w2"),
                    next(vec![config.ffn_dim, d]),
                );
                params.insert(format!("{prefix}{i}.ffn.b2"), Tensor::zeros(vec![d]));
            }
        }

        params.insert("gen.dir.w", next(vec![3, d]));
        params.insert("gen.dir.b", Tensor::zeros(vec![d]));

        let out3k = 3 * config.group_size;
        params.insert("head.pred.w1", next(vec![d, config.head_hidden]));
        params.insert("head.pred.b1", Tensor::zeros(vec![config.head_hidden]));
        params.insert("head.pred.w2", next(vec![config.head_hidden, out3k]));
        params.insert("head.pred.b2", Tensor::zeros(vec![out3k]));
        params.insert("head.cls.w", next(vec![d, config.num_classes]));
        params.insert("head.cls.b", Tensor::zeros(vec![config.num_classes]));

        Ok(Self { config, params })
    }

    /// The inference mask: vanilla causal, no extra blocking.
    pub fn causal_mask(&self) -> DualMask {
        make_dual_mask(self.config.n_tokens, 0.0, 0).unwrap()
    }

    /// Seeded training mask with the configured extra ratio.
    pub fn training_mask(&self, seed: u64) -> Result<DualMask> {
        make_dual_mask(self.config.n_tokens, self.config.extra_mask_ratio, seed)
    }

    /// Token matrix after the configured fusion step.
    fn fused_tokens(&self, g: &mut Graph, sample: &PreparedSample) -> Result<Var> {
        let tokens = pointnet_embed_graph(g, &self.params, &sample.patches)?;
        match self.config.fusion_mode {
            FusionMode::FeatureEmbedding => {
                if let Some(rows) = &sample.global_rows {
                    let scaled = g.scale(tokens, self.config.lambda)?;
                    let rows_var = g.constant(rows.clone());
                    g.add(scaled, rows_var)
                } else {
                    let global = sample.global.as_ref().ok_or_else(|| {
                        Error::BadConfig("feature fusion requires a global feature".into())
                    })?;
                    fuse_features_graph(g, tokens, global, self.config.lambda)
                }
            }
            _ => Ok(tokens),
        }
    }

    fn latent_from(&self, g: &mut Graph, sample: &PreparedSample, penalty: Var) -> Result<Var> {
        let fused = self.fused_tokens(g, sample)?;
        let ape = g.constant(sample.ape.clone());
        let x = g.add(fused, ape)?;
        self.stack(g, "ext", self.config.extractor_depth, x, penalty)
    }

    /// Tokens -> (fusion) -> +APE -> extractor stack.
    pub fn latent_graph(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        mask: &DualMask,
    ) -> Result<Var> {
        let penalty = g.constant(mask.penalty_tensor());
        self.latent_from(g, sample, penalty)
    }

    fn stack(
        &self,
        g: &mut Graph,
        prefix: &str,
        depth: usize,
        mut x: Var,
        penalty: Var,
    ) -> Result<Var> {
        for i in 0..depth {
            x = self.block(g, &format!("{prefix}{i}"), x, penalty)?;
        }
        Ok(x)
    }

    /// masked attention -> residual -> layer norm -> FFN -> residual ->
    /// layer norm.
    fn block(&self, g: &mut Graph, prefix: &str, x: Var, penalty: Var) -> Result<Var> {
        let attn = self.attention(g, &format!("{prefix}.attn"), x, penalty)?;
        let r1 = g.add(x, attn)?;
        let x1 = g.layer_norm(r1)?;
        let w1 = self.p(g, &format!("{prefix}.ffn.w1"))?;
        let b1 = self.p(g, &format!("{prefix}.ffn.b1"))?;
        let w2 = self.p(g, &format!("{prefix}.ffn.w2"))?;
        let b2 = self.p(g, &format!("{prefix}.ffn.b2"))?;
        let h = g.matmul(x1, w1)?;
        let h = g.embedding_add(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        let f = g.embedding_add(h, b2)?;
        let r2 = g.add(x1, f)?;
        g.layer_norm(r2)
    }

    /// Multi-head self-attention with the additive mask penalty applied to
    /// the pre-softmax scores; blocked weights underflow to exactly zero.
    pub fn attention(&self, g: &mut Graph, prefix: &str, x: Var, penalty: Var) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let wq = self.p(g, &format!("{prefix}.wq"))?;
        let bq = self.p(g, &format!("{prefix}.bq"))?;
        let wk = self.p(g, &format!("{prefix}.wk"))?;
        let bk = self.p(g, &format!("{prefix}.bk"))?;
        let wv = self.p(g, &format!("{prefix}.wv"))?;
        let bv = self.p(g, &format!("{prefix}.bv"))?;
        let wo = self.p(g, &format!("{prefix}.wo"))?;
        let bo = self.p(g, &format!("{prefix}.bo"))?;

        let q = g.matmul(x, wq)?;
        let q = g.embedding_add(q, bq)?;
        let k = g.matmul(x, wk)?;
        let k = g.embedding_add(k, bk)?;
        let v = g.matmul(x, wv)?;
        let v = g.embedding_add(v, bv)?;

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let masked = g.add(scores, penalty)?;
            let weights = g.softmax(masked)?;
            head_outputs.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat(&head_outputs, 1)?;
        let out = g.matmul(merged, wo)?;
        g.embedding_add(out, bo)
    }

    /// Classification head over the mean-pooled latent.
    pub fn logits_from_latent(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        let pooled = g.mean_rows(latent)?;
        let w = self.p(g, "head.cls.w")?;
        let b = self.p(g, "head.cls.b")?;
        let logits = g.matmul(pooled, w)?;
        g.add(logits, b)
    }

    /// Generator stack plus prediction head plus per-position Chamfer
    /// against the next patch; mean over the n-1 predicting positions.
    pub fn generation_from_latent(
        &self,
        g: &mut Graph,
        latent: Var,
        sample: &PreparedSample,
        penalty: Var,
    ) -> Result<Var> {
        let n = self.config.n_tokens;
        if n < 2 {
            return Err(Error::TooFewPatches { have: n });
        }
        let dirs = g.constant(sample.directions.clone());
        let dw = self.p(g, "gen.dir.w")?;
        let db = self.p(g, "gen.dir.b")?;
        let prompt = g.matmul(dirs, dw)?;
        let prompt = g.embedding_add(prompt, db)?;
        let y = g.add(latent, prompt)?;
        let y = self.stack(g, "gen", self.config.generator_depth, y, penalty)?;

        let w1 = self.p(g, "head.pred.w1")?;
        let b1 = self.p(g, "head.pred.b1")?;
        let w2 = self.p(g, "head.pred.w2")?;
        let b2 = self.p(g, "head.pred.b2")?;
        let h = g.matmul(y, w1)?;
        let h = g.embedding_add(h, b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w2)?;
        let out = g.embedding_add(h, b2)?; // n x 3k

        let k = self.config.group_size;
        let mut losses = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let row = g.slice_rows(out, i, i + 1)?;
            let pred = g.reshape(row, vec![k, 3])?;
            losses.push(g.chamfer_to(pred, &sample.patches.patches[i + 1])?);
        }
        let stacked = g.concat(&losses, 0)?;
        g.mean(stacked)
    }

    /// Generation loss under the given mask.
    pub fn pretrain_loss_graph(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        mask: &DualMask,
    ) -> Result<Var> {
        let penalty = g.constant(mask.penalty_tensor());
        let latent = self.latent_from(g, sample, penalty)?;
        self.generation_from_latent(g, latent, sample, penalty)
    }

    /// Cross entropy plus gamma-weighted generation loss; the generator
    /// branch is built only when gamma > 0.
    pub fn finetune_loss_graph(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        label: u8,
        mask: &DualMask,
    ) -> Result<Var> {
        if label == 0 || label as usize > self.config.num_classes {
            return Err(Error::BadLabel {
                label,
                num_classes: self.config.num_classes,
            });
        }
        let penalty = g.constant(mask.penalty_tensor());
        let latent = self.latent_from(g, sample, penalty)?;
        let logits = self.logits_from_latent(g, latent)?;
        let ld = g.cross_entropy(logits, label as usize - 1)?;
        if self.config.gamma > 0.0 {
            let lg = self.generation_from_latent(g, latent, sample, penalty)?;
            let scaled = g.scale(lg, self.config.gamma)?;
            g.add(ld, scaled)
        } else {
            Ok(ld)
        }
    }

    /// Full classification pipeline over a prepared sample using the
    /// vanilla causal mask; applies logit interpolation when configured.
    pub fn classify_prepared(
        &self,
        sample: &PreparedSample,
        pmb: Option<&PointMemoryBank>,
    ) -> Result<(Vec<f64>, u8)> {
        let mask = self.causal_mask();
        let mut g = Graph::new();
        let latent = self.latent_graph(&mut g, sample, &mask)?;
        let logits_var = self.logits_from_latent(&mut g, latent)?;
        let mut logits = g.value(logits_var).data().to_vec();

        if self.config.fusion_mode == FusionMode::LogitInterpolation {
            let bank = pmb.ok_or_else(|| {
                Error::BadConfig("logit interpolation requires a point memory bank".into())
            })?;
            let global = sample.global.as_ref().ok_or_else(|| {
                Error::BadConfig("logit interpolation requires a global feature".into())
            })?;
            let pmb_logits =
                pmb_classify(bank, global, self.config.num_classes, self.config.pmb_gamma)?;
            logits = crate::npe::logits_interpolate(&logits, &pmb_logits, self.config.logit_weight)?;
        }

        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok((logits, (best + 1) as u8))
    }

    /// Preprocess-and-classify for a raw cloud.
    pub fn classify(
        &self,
        cloud: &PointCloud,
        pmb: Option<&PointMemoryBank>,
    ) -> Result<(Vec<f64>, u8)> {
        let sample = prepare_sample(cloud, &self.config)?;
        self.classify_prepared(&sample, pmb)
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
        Ok(g.param(name, t))
    }
}

/// A cloud preprocessed for the model: normalized, cut into Morton-ordered
/// patches, with position encodings, next-center directions and the
/// non-parametric feature the configured fusion mode needs.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub label: Option<u8>,
    /// The normalized cloud the patches were cut from.
    pub points: Vec<crate::cloud::Point3>,
    pub patches: PatchSet,
    pub ape: Tensor,
    pub directions: Tensor,
    pub global: Option<GlobalFeature>,
    pub global_rows: Option<Tensor>,
}

impl PreparedSample {
    /// The sample as it would be prepared from the cloud rotated about the
    /// vertical axis. FPS selections and k-neighborhoods are rotation
    /// invariant, so only coordinates, the Morton order, the position
    /// encodings and the non-parametric feature need recomputation.
    pub fn rotated_about_z(&self, angle: f64, config: &GptConfig) -> Result<PreparedSample> {
        let (sin, cos) = angle.sin_cos();
        let rot = |p: crate::cloud::Point3| -> crate::cloud::Point3 {
            [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1], p[2]]
        };
        let points: Vec<_> = self.points.iter().map(|&p| rot(p)).collect();
        let centers: Vec<_> = self.patches.centers.iter().map(|&c| rot(c)).collect();
        let patches: Vec<Vec<_>> = self
            .patches
            .patches
            .iter()
            .map(|patch| patch.iter().map(|&p| rot(p)).collect())
            .collect();

        // restore Morton order over the rotated centers
        let idx: Vec<usize> = (0..centers.len()).collect();
        let order =
            crate::geom::morton_sort_normalized(&centers, &idx, crate::geom::DEFAULT_MORTON_BITS);
        let centers: Vec<_> = order.iter().map(|&i| centers[i]).collect();
        let patches: Vec<_> = order.iter().map(|&i| patches[i].clone()).collect();

        let patch_set = PatchSet {
            centers: centers.clone(),
            patches,
            n: self.patches.n,
            k: self.patches.k,
        };
        let ape = ape_encode_padded(&centers, config.d_model)?;
        let directions = direction_prompts(&centers)?;
        let mut global = None;
        if self.global.is_some() {
            let cloud = PointCloud::new(points.clone());
            global = Some(npe_extract(&cloud, &config.npe, config.d_model)?);
        }
        let mut global_rows = None;
        if self.global_rows.is_some() {
            global_rows = Some(per_patch_features(&patch_set, config)?);
        }
        Ok(PreparedSample {
            id: self.id.clone(),
            label: self.label,
            points,
            patches: patch_set,
            ape,
            directions,
            global,
            global_rows,
        })
    }
}

/// Unit direction from each center to the next; last row zero.
fn direction_prompts(centers: &[crate::cloud::Point3]) -> Result<Tensor> {
    let n = centers.len();
    let mut dirs = vec![0.0; n * 3];
    for i in 0..n.saturating_sub(1) {
        let d = sub(centers[i + 1], centers[i]);
        let len = norm(d);
        if len > 1e-12 {
            dirs[3 * i] = d[0] / len;
            dirs[3 * i + 1] = d[1] / len;
            dirs[3 * i + 2] = d[2] / len;
        }
    }
    Tensor::matrix(n, 3, dirs)
}

fn per_patch_features(patches: &PatchSet, config: &GptConfig) -> Result<Tensor> {
    let d = config.d_model;
    let n = patches.n;
    let mut rows = vec![0.0; n * d];
    for (i, patch) in patches.patches.iter().enumerate() {
        let absolute: Vec<_> = patch
            .iter()
            .map(|&p| crate::cloud::add(p, patches.centers[i]))
            .collect();
        let f = npe_extract(&PointCloud::new(absolute), &config.npe, d)?;
        rows[i * d..(i + 1) * d].copy_from_slice(&f.values);
    }
    Tensor::matrix(n, d, rows)
}

pub fn prepare_sample(cloud: &PointCloud, config: &GptConfig) -> Result<PreparedSample> {
    config.validate()?;
    let normalized = crate::cloud::normalize_unit_sphere(cloud)?.cloud;
    let patches = build_patches(
        &normalized,
        config.n_tokens,
        config.group_size,
        DEFAULT_MORTON_BITS,
    )?;
    let ape = ape_encode_padded(&patches.centers, config.d_model)?;
    let directions = direction_prompts(&patches.centers)?;

    let mut global = None;
    let mut global_rows = None;
    if config.fusion_mode != FusionMode::None {
        if config.npe_per_patch && config.fusion_mode == FusionMode::FeatureEmbedding {
            global_rows = Some(per_patch_features(&patches, config)?);
        }
        global = Some(npe_extract(&normalized, &config.npe, config.d_model)?);
    }

    Ok(PreparedSample {
        id: cloud.id.clone(),
        label: cloud.label,
        points: normalized.points,
        patches,
        ape,
        directions,
        global,
        global_rows,
    })
}
