//! Run configuration: one flat text format with dotted keys, a typed
//! [`RunConfig`] holding every knob with its default, and `key=value`
//! overrides. Unknown keys are hard errors so typos cannot silently fall
//! back to defaults.
//!
//! File grammar: one `key = value` pair per line; `#` starts a comment;
//! blank lines are ignored; later assignments win.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::losses::{LossWeights, TdcConfig, ThresholdMode};
use crate::nets::ModelConfig;
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::{Error, Result};

/// Whether training optimizes the plain hybrid objective or the enhanced
/// one with the topological consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Hybrid,
    Enhanced,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(TrainMode::Hybrid),
            "enhanced" => Ok(TrainMode::Enhanced),
            other => Err(Error::Config(format!(
                "train.mode must be hybrid or enhanced, got {other}"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Hybrid => "hybrid",
            TrainMode::Enhanced => "enhanced",
        })
    }
}

/// Optimizer and learning-rate annealing settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_floor: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, lr_floor: 1e-6 }
    }
}

/// Dataset locations and augmentation. Paths are manifest files produced
/// by `gen-data` or assembled by hand; empty means unset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataConfig {
    pub train: String,
    pub val: String,
    pub flips: bool,
}

/// Synthetic-set generation knobs; the raster size always follows
/// `model.image_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub components: (usize, usize),
    pub holes: (usize, usize),
    pub noise_sigma: f64,
    pub contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 600, components: (1, 2), holes: (0, 2), noise_sigma: 0.15, contrast: 0.55 }
    }
}

/// Every runtime knob with its default. `render` and `apply` agree on the
/// key set, so a rendered config always parses back unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule_kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss: LossWeights,
    pub tdc: TdcConfig,
    pub tdc_samples: usize,
    pub mode: TrainMode,
    pub opt: OptConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub infer_t: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule_kind: ScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            loss: LossWeights::default(),
            tdc: TdcConfig::default(),
            tdc_samples: 4,
            mode: TrainMode::Hybrid,
            opt: OptConfig::default(),
            batch_size: 16,
            epochs: 30,
            seed: 0,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            infer_t: 1,
        }
    }
}

fn p<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key} expects {what}, got {value:?}")))
}

fn p_usize(key: &str, value: &str) -> Result<usize> {
    p(key, value, "an unsigned integer")
}

fn p_u64(key: &str, value: &str) -> Result<u64> {
    p(key, value, "an unsigned integer")
}

fn p_f64(key: &str, value: &str) -> Result<f64> {
    p(key, value, "a number")
}

fn p_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects true or false, got {value:?}"))),
    }
}

fn p_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| p_usize(key, part.trim()))
        .collect()
}

fn p_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let list = p_list(key, value)?;
    if list.len() != 2 {
        return Err(Error::Config(format!("{key} expects two comma-separated integers, got {value:?}")));
    }
    Ok((list[0], list[1]))
}

fn fmt_list(list: &[usize]) -> String {
    list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.image_size" => self.model.image_size = p_usize(key, value)?,
            "model.patch_size" => self.model.encoder.patch_size = p_usize(key, value)?,
            "model.embed_dim" => self.model.encoder.embed_dim = p_usize(key, value)?,
            "model.depth" => self.model.encoder.depth = p_usize(key, value)?,
            "model.heads" => self.model.encoder.heads = p_usize(key, value)?,
            "model.base_channels" => self.model.unet.base_channels = p_usize(key, value)?,
            "model.channel_multipliers" => {
                self.model.unet.channel_multipliers = p_list(key, value)?
            }
            "model.attention_levels" => self.model.unet.attention_levels = p_list(key, value)?,
            "model.time_embed_dim" => self.model.unet.time_embed_dim = p_usize(key, value)?,
            "schedule.kind" => self.schedule_kind = value.parse()?,
            "schedule.timesteps" => self.timesteps = p_usize(key, value)?,
            "schedule.beta_start" => self.beta_start = p_f64(key, value)?,
            "schedule.beta_end" => self.beta_end = p_f64(key, value)?,
            "loss.alpha" => self.loss.alpha = p_f64(key, value)?,
            "loss.beta" => self.loss.beta = p_f64(key, value)?,
            "loss.gamma_w" => self.loss.gamma_w = p_f64(key, value)?,
            "loss.lambda" => self.loss.lambda = p_f64(key, value)?,
            "loss.focal_gamma" => self.loss.focal_gamma = p_f64(key, value)?,
            "loss.smooth" => self.loss.smooth = p_f64(key, value)?,
            "loss.tdc.k" => self.tdc.k = p_usize(key, value)?,
            "loss.tdc.peak" => self.tdc.w_schedule.peak = p_f64(key, value)?,
            "loss.tdc.warmup_frac" => self.tdc.w_schedule.warmup_frac = p_f64(key, value)?,
            "loss.tdc.ramp_frac" => self.tdc.w_schedule.ramp_frac = p_f64(key, value)?,
            "loss.tdc.threshold_mode" => self.tdc.threshold_mode = value.parse()?,
            "loss.tdc.samples" => self.tdc_samples = p_usize(key, value)?,
            "train.mode" => self.mode = value.parse()?,
            "train.batch_size" => self.batch_size = p_usize(key, value)?,
            "train.epochs" => self.epochs = p_usize(key, value)?,
            "train.seed" => self.seed = p_u64(key, value)?,
            "opt.lr" => self.opt.lr = p_f64(key, value)?,
            "opt.beta1" => self.opt.beta1 = p_f64(key, value)?,
            "opt.beta2" => self.opt.beta2 = p_f64(key, value)?,
            "opt.eps" => self.opt.eps = p_f64(key, value)?,
            "opt.weight_decay" => self.opt.weight_decay = p_f64(key, value)?,
            "opt.lr_floor" => self.opt.lr_floor = p_f64(key, value)?,
            "data.train" => self.data.train = value.to_string(),
            "data.val" => self.data.val = value.to_string(),
            "data.flips" => self.data.flips = p_bool(key, value)?,
            "synth.count" => self.synth.count = p_usize(key, value)?,
            "synth.components" => self.synth.components = p_pair(key, value)?,
            "synth.holes" => self.synth.holes = p_pair(key, value)?,
            "synth.noise_sigma" => self.synth.noise_sigma = p_f64(key, value)?,
            "synth.contrast" => self.synth.contrast = p_f64(key, value)?,
            "infer.t" => self.infer_t = p_usize(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Parses a config file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then an optional file, then `key=value` overrides, then
    /// validation.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for set in sets {
            let (key, value) = set.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got {set:?}"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.tdc.validate()?;
        if self.timesteps == 0 {
            return Err(Error::Config("schedule.timesteps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.opt.lr.is_finite() && self.opt.lr > 0.0) {
            return Err(Error::Config(format!("opt.lr must be positive, got {}", self.opt.lr)));
        }
        if !(self.opt.lr_floor.is_finite() && (0.0..=self.opt.lr).contains(&self.opt.lr_floor)) {
            return Err(Error::Config(format!(
                "opt.lr_floor must lie in [0, opt.lr], got {}",
                self.opt.lr_floor
            )));
        }
        for (name, b) in [("opt.beta1", self.opt.beta1), ("opt.beta2", self.opt.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.opt.eps.is_finite() && self.opt.eps > 0.0) {
            return Err(Error::Config(format!("opt.eps must be positive, got {}", self.opt.eps)));
        }
        if !(self.opt.weight_decay.is_finite() && self.opt.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "opt.weight_decay must be nonnegative, got {}",
                self.opt.weight_decay
            )));
        }
        if self.infer_t == 0 || self.infer_t > self.timesteps {
            return Err(Error::Config(format!(
                "infer.t must lie in [1, schedule.timesteps], got {}",
                self.infer_t
            )));
        }
        if !(self.synth.noise_sigma.is_finite() && self.synth.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "synth.noise_sigma must be nonnegative, got {}",
                self.synth.noise_sigma
            )));
        }
        Ok(())
    }

    /// Instantiates the noise schedule described by the config.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.schedule_kind, self.timesteps, self.beta_start, self.beta_end)
    }

    /// Canonical text form containing every key; parsing it back
    /// reproduces the config exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let kind = match self.schedule_kind {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        };
        let mode = match self.tdc.threshold_mode {
            ThresholdMode::Soft => "soft",
            ThresholdMode::Binary => "binary-0.5",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("model.image_size", self.model.image_size.to_string()),
            ("model.patch_size", self.model.encoder.patch_size.to_string()),
            ("model.embed_dim", self.model.encoder.embed_dim.to_string()),
            ("model.depth", self.model.encoder.depth.to_string()),
            ("model.heads", self.model.encoder.heads.to_string()),
            ("model.base_channels", self.model.unet.base_channels.to_string()),
            ("model.channel_multipliers", fmt_list(&self.model.unet.channel_multipliers)),
            ("model.attention_levels", fmt_list(&self.model.unet.attention_levels)),
            ("model.time_embed_dim", self.model.unet.time_embed_dim.to_string()),
            ("schedule.kind", kind.to_string()),
            ("schedule.timesteps", self.timesteps.to_string()),
            ("schedule.beta_start", self.beta_start.to_string()),
            ("schedule.beta_end", self.beta_end.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.gamma_w", self.loss.gamma_w.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.focal_gamma", self.loss.focal_gamma.to_string()),
            ("loss.smooth", self.loss.smooth.to_string()),
            ("loss.tdc.k", self.tdc.k.to_string()),
            ("loss.tdc.peak", self.tdc.w_schedule.peak.to_string()),
            ("loss.tdc.warmup_frac", self.tdc.w_schedule.warmup_frac.to_string()),
            ("loss.tdc.ramp_frac", self.tdc.w_schedule.ramp_frac.to_string()),
            ("loss.tdc.threshold_mode", mode.to_string()),
            ("loss.tdc.samples", self.tdc_samples.to_string()),
            ("train.mode", self.mode.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("opt.lr", self.opt.lr.to_string()),
            ("opt.beta1", self.opt.beta1.to_string()),
            ("opt.beta2", self.opt.beta2.to_string()),
            ("opt.eps", self.opt.eps.to_string()),
            ("opt.weight_decay", self.opt.weight_decay.to_string()),
            ("opt.lr_floor", self.opt.lr_floor.to_string()),
            ("data.train", self.data.train.clone()),
            ("data.val", self.data.val.clone()),
            ("data.flips", self.data.flips.to_string()),
            ("synth.count", self.synth.count.to_string()),
            ("synth.components", format!("{},{}", self.synth.components.0, self.synth.components.1)),
            ("synth.holes", format!("{},{}", self.synth.holes.0, self.synth.holes.1)),
            ("synth.noise_sigma", self.synth.noise_sigma.to_string()),
            ("synth.contrast", self.synth.contrast.to_string()),
            ("infer.t", self.infer_t.to_string()),
        ];
        for (key, value) in pairs {
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}
