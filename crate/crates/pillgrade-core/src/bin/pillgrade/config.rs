//! Run configuration: defaults, key=value config file, flag overrides.
//! The fully resolved form is echoed into every output artifact.

use std::path::Path;

use pillgrade_core::error::{Error, Result};
use pillgrade_core::gpt::GptConfig;
use pillgrade_core::train::Schedule;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gpt: GptConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// 0 means use every available core.
    pub threads: usize,
    /// Downsampling target for preprocessing.
    pub points: usize,
    pub split_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gpt: GptConfig::default(),
            schedule: Schedule::default(),
            seed: 0,
            threads: 0,
            points: 8192,
            split_ratio: 0.8,
        }
    }
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("bad config line {line:?}")))?;
            self.apply_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::BadConfig(format!("bad value {v:?} for {k}"));
        macro_rules! parse {
            ($v:expr) => {
                $v.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "seed" => self.seed = parse!(value),
            "threads" => self.threads = parse!(value),
            "points" => self.points = parse!(value),
            "split_ratio" => self.split_ratio = parse!(value),
            "epochs" => self.schedule.epochs = parse!(value),
            "batch" => self.schedule.batch_size = parse!(value),
            "lr" => self.schedule.base_lr = parse!(value),
            "min_lr" => self.schedule.min_lr = parse!(value),
            "weight_decay" => self.schedule.weight_decay = parse!(value),
            "warmup_epochs" => self.schedule.warmup_epochs = parse!(value),
            "augment_rotate" => self.schedule.augment_rotate = parse!(value),
            "augment_jitter" => self.schedule.augment_jitter = parse!(value),
            // gamma lives in both the model config and the schedule
            "gamma" => {
                self.gpt.gamma = parse!(value);
                self.schedule.gamma = self.gpt.gamma;
            }
            other => self.gpt.set_key(other, value)?,
        }
        Ok(())
    }

    /// Finishes resolution: keeps the schedule's gamma in sync and
    /// validates the model config.
    pub fn finalize(&mut self) -> Result<()> {
        self.schedule.gamma = self.gpt.gamma;
        if !(0.0..1.0).contains(&self.split_ratio) || self.split_ratio == 0.0 {
            return Err(Error::BadRatio(self.split_ratio));
        }
        self.gpt.validate()
    }

    /// Canonical echo of the resolved configuration, one key per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("augment_jitter={}\n", self.schedule.augment_jitter));
        out.push_str(&format!("augment_rotate={}\n", self.schedule.augment_rotate));
        out.push_str(&format!("batch={}\n", self.schedule.batch_size));
        out.push_str(&format!("epochs={}\n", self.schedule.epochs));
        out.push_str(&format!("lr={}\n", self.schedule.base_lr));
        out.push_str(&format!("min_lr={}\n", self.schedule.min_lr));
        out.push_str(&format!("points={}\n", self.points));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("split_ratio={}\n", self.split_ratio));
        out.push_str(&format!("threads={}\n", self.threads));
        out.push_str(&format!("warmup_epochs={}\n", self.schedule.warmup_epochs));
        out.push_str(&format!(
            "weight_decay={}\n",
            self.schedule.weight_decay
        ));
        out.push_str(&self.gpt.to_kv());
        out
    }
}
