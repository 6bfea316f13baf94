//! Architecture and training configuration.
//!
//! Training configs are flat `key = value` text; `#` starts a comment.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::render::RenderSettings;

/// Architecture constants. Everything that changes parameter shapes lives
/// here and is recorded in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder widths at H/2, H/4, H/8.
    pub channels: [usize; 3],
    /// Stage-1 feature width; stage i has `feature_channels / 2^(i-1)`.
    pub feature_channels: usize,
    pub gs_channels: usize,
    pub depth_candidates: usize,
    pub refine_hidden: usize,
    pub heads: usize,
    pub transformer_pairs: usize,
    pub ffn_hidden: usize,
    pub eam_channels: [usize; 2],
    pub mfm_hidden: [usize; 2],
    pub head_hidden: usize,
    pub sh_degree: usize,
    pub aux_channels: usize,
    /// Maximum relative depth change per refinement stage.
    pub eta: f64,
    /// Disable to run the transformer with self-attention only.
    pub cross_attention: bool,
    /// Settings for every render inside the model (error maps and losses).
    pub render: RenderSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128],
            feature_channels: 128,
            gs_channels: 32,
            depth_candidates: 32,
            refine_hidden: 64,
            heads: 4,
            transformer_pairs: 2,
            ffn_hidden: 256,
            eam_channels: [32, 64],
            mfm_hidden: [16, 8],
            head_hidden: 32,
            sh_degree: 1,
            aux_channels: 8,
            eta: 0.1,
            cross_attention: true,
            render: RenderSettings::default(),
        }
    }
}

impl ModelConfig {
    /// Feature width of stage `i` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.feature_channels >> (stage - 1)
    }

    /// Key/value pairs stored in checkpoints and compared on load.
    pub fn signature(&self) -> Vec<(String, String)> {
        vec![
            ("channels".into(), format!("{:?}", self.channels)),
            ("feature_channels".into(), self.feature_channels.to_string()),
            ("gs_channels".into(), self.gs_channels.to_string()),
            ("depth_candidates".into(), self.depth_candidates.to_string()),
            ("sh_degree".into(), self.sh_degree.to_string()),
            ("aux_channels".into(), self.aux_channels.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("transformer_pairs".into(), self.transformer_pairs.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.sh_degree > crate::sh::MAX_SH_DEGREE {
            return bad(format!("sh_degree {} exceeds 3", self.sh_degree));
        }
        if self.depth_candidates < 2 {
            return bad("depth_candidates must be at least 2".into());
        }
        if self.channels[2] % self.heads != 0 {
            return bad(format!(
                "bottleneck width {} is not divisible by {} heads",
                self.channels[2], self.heads
            ));
        }
        if self.feature_channels % 4 != 0 {
            return bad("feature_channels must be divisible by 4".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} outside [0, 1]", self.eta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub lambda_mse: f64,
    pub lambda_lpips: f64,
    pub eta: f64,
    pub depth_candidates: usize,
    pub sh_degree: usize,
    pub flip_augment: bool,
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub checkpoint_every: usize,
    /// Also supervise renders at the input views.
    pub supervise_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch: 1,
            lr: 2e-4,
            warmup_steps: 2000,
            seed: 0,
            lambda_mse: 1.0,
            lambda_lpips: 0.0,
            eta: 0.1,
            depth_candidates: 32,
            sh_degree: 1,
            flip_augment: true,
            near: None,
            far: None,
            checkpoint_every: 500,
            supervise_inputs: true,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "iters",
    "batch",
    "lr",
    "warmup_steps",
    "seed",
    "lambda_mse",
    "lambda_lpips",
    "eta",
    "depth_candidates",
    "sh_degree",
    "flip_augment",
    "near",
    "far",
    "checkpoint_every",
    "supervise_inputs",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CoreError::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl TrainConfig {
    /// Settings tuned for overfitting one small scene within a couple of
    /// thousand steps.
    pub fn overfit() -> Self {
        Self {
            lr: 2e-3,
            warmup_steps: 100,
            flip_augment: false,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "iters" => self.iters = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lambda_mse" => self.lambda_mse = parse(key, value)?,
            "lambda_lpips" => self.lambda_lpips = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "depth_candidates" => self.depth_candidates = parse(key, value)?,
            "sh_degree" => self.sh_degree = parse(key, value)?,
            "flip_augment" => self.flip_augment = parse_bool(key, value)?,
            "near" => self.near = parse_opt(key, value)?,
            "far" => self.far = parse_opt(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "supervise_inputs" => self.supervise_inputs = parse_bool(key, value)?,
            other => {
                return Err(CoreError::Config(format!(
                    "unknown key `{other}` (known: {})",
                    TRAIN_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parse config text on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| CoreError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.lambda_mse < 0.0 || self.lambda_lpips < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "iters = {}", self.iters);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda_mse = {}", self.lambda_mse);
        let _ = writeln!(s, "lambda_lpips = {}", self.lambda_lpips);
        let _ = writeln!(s, "eta = {}", self.eta);
        let _ = writeln!(s, "depth_candidates = {}", self.depth_candidates);
        let _ = writeln!(s, "sh_degree = {}", self.sh_degree);
        let _ = writeln!(s, "flip_augment = {}", self.flip_augment);
        let _ = writeln!(s, "near = {}", opt(self.near));
        let _ = writeln!(s, "far = {}", opt(self.far));
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "supervise_inputs = {}", self.supervise_inputs);
        s
    }

    /// Architecture implied by this config.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth_candidates: self.depth_candidates,
            sh_degree: self.sh_degree,
            eta: self.eta,
            ..ModelConfig::default()
        }
    }
}
