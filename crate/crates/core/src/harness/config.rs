//! Run configuration: one TOML document plus `key=value` overrides.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::dataset::{window_span, RefWindow, SyntheticSpec};
use crate::encoders::{EncoderConfig, TargetSpec};
use crate::error::{Error, Result};
use crate::eval::{EvalViews, FinetuneConfig, ProbeConfig, ViewProtocol};
use crate::objective::LossConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset container to load; empty means generate `synthetic`.
    pub path: String,
    pub synthetic: SyntheticSpec,
    /// Frames per clip (T).
    pub frames: usize,
    /// Temporal stride in raw frames (τ).
    pub stride: usize,
    /// Online views per sample besides the reference clip (0, 1 or 2).
    pub online_views: usize,
    pub ref_window: RefWindow,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            synthetic: SyntheticSpec::default(),
            frames: 8,
            stride: 8,
            online_views: 2,
            ref_window: RefWindow::Independent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// EMA coefficient of the momentum branch (used with the auxiliary loss).
    pub ema_momentum: f64,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every_epochs: usize,
    /// kNN snapshot every this many epochs; 0 disables.
    pub eval_every_epochs: usize,
    /// Background data-loading threads; 0 prepares batches inline.
    pub workers: usize,
    /// Batches each worker may prepare ahead of the training loop.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ema_momentum: 0.99,
            checkpoint_every_epochs: 1,
            eval_every_epochs: 0,
            workers: 0,
            prefetch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    /// Views per video for feature banks and probe training features.
    pub bank_clips: usize,
    pub bank_crops: usize,
    /// Views per video at test time (multi-view inference).
    pub test_clips: usize,
    pub test_crops: usize,
    /// Shorter side before cropping at evaluation; 0 uses the lower end of
    /// the augmentation resize range.
    pub resize_short: usize,
    pub semi_fractions: Vec<f64>,
    pub semi_seed: u64,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    /// Fine-tuning recipe used on semi-supervised subsets.
    pub semi: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            temperature: 0.07,
            bank_clips: 1,
            bank_crops: 1,
            test_clips: 10,
            test_crops: 3,
            resize_short: 0,
            semi_fractions: vec![0.01, 0.1],
            semi_seed: 0,
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            semi: FinetuneConfig {
                lr: 0.01,
                ..FinetuneConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub data: DataConfig,
    pub augment: AugConfig,
    pub encoder: EncoderConfig,
    pub targets: Vec<TargetSpec>,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk scale: 10 classes × 40 videos of 64 frames at 32 px, T = τ = 8,
    /// 28 px crops, 30 epochs at batch 16 against a class-oracle target.
    /// The LARS trust coefficient is raised to 0.02: at 0.001 a 540-step run
    /// moves each weight tensor too little to learn.
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            data: DataConfig::default(),
            augment: AugConfig::default(),
            encoder: EncoderConfig::default(),
            targets: vec![TargetSpec::Oracle {
                name: "oracle".into(),
                output_dim: 32,
                noise: 0.15,
                seed: 0,
            }],
            loss: LossConfig::default(),
            optim: OptimConfig {
                trust_coefficient: 0.02,
                ..OptimConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-resolution recipe: 224 px crops from 256..320 resizes, 100 epochs,
    /// 8 warmup epochs, batch 1024, 10 clips × 3 crops at test time. Still
    /// points at the synthetic generator; set `data.path` for real data.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.augment = AugConfig::full_scale();
        c.data.synthetic.spatial_size = 320;
        c.data.synthetic.raw_frames = 300;
        c.optim.batch_size = 1024;
        c.optim.total_epochs = 100;
        c.optim.warmup_epochs = 8;
        c.optim.trust_coefficient = 0.001;
        c.eval.resize_short = 256;
        c.eval.finetune.augment = AugConfig::full_scale();
        c.eval.semi.augment = AugConfig::full_scale();
        c
    }

    pub fn output_path(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }

    pub fn eval_resize_short(&self) -> usize {
        match self.eval.resize_short {
            0 => self.augment.resize_short_range[0],
            r => r,
        }
    }

    fn protocol(&self, clips: usize, crops: usize) -> ViewProtocol {
        ViewProtocol {
            clips,
            crops,
            frames: self.data.frames,
            stride: self.data.stride,
            resize_short: self.eval_resize_short(),
            crop_size: self.augment.crop_size,
        }
    }

    /// Views behind every feature-bank row.
    pub fn bank_protocol(&self) -> ViewProtocol {
        self.protocol(self.eval.bank_clips, self.eval.bank_crops)
    }

    pub fn test_protocol(&self) -> ViewProtocol {
        self.protocol(self.eval.test_clips, self.eval.test_crops)
    }

    /// Probe / fine-tune views: bank views for training features, test
    /// views for scoring.
    pub fn eval_views(&self) -> EvalViews {
        EvalViews {
            train: self.bank_protocol(),
            test: self.test_protocol(),
        }
    }

    /// Adapters that feed the loss, in `loss.targets` order.
    pub fn active_targets(&self) -> Result<Vec<&TargetSpec>> {
        self.loss
            .targets
            .iter()
            .map(|n| {
                self.targets
                    .iter()
                    .find(|t| t.name() == n)
                    .ok_or_else(|| Error::Config(format!("loss target {n:?} is not defined in [[targets]]")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        let d = &self.data;
        if d.frames == 0 || d.stride == 0 {
            return Err(Error::Config("data.frames and data.stride must be >= 1".into()));
        }
        if d.online_views > 2 {
            return Err(Error::Config(format!("data.online_views={} must be 0, 1 or 2", d.online_views)));
        }
        let span = window_span(d.frames, d.stride);
        if d.path.is_empty() {
            let s = &d.synthetic;
            if span > s.raw_frames {
                return Err(Error::Config(format!(
                    "window of T={} at stride {} spans {span} frames, more than data.synthetic.raw_frames={}",
                    d.frames, d.stride, s.raw_frames
                )));
            }
        }
        let mut names = HashSet::new();
        for t in &self.targets {
            if !names.insert(t.name()) {
                return Err(Error::Config(format!("target name {:?} is defined twice", t.name())));
            }
        }
        let mut used = HashSet::new();
        for n in &self.loss.targets {
            if !used.insert(n) {
                return Err(Error::Config(format!("loss target {n:?} listed twice")));
            }
        }
        self.active_targets()?;
        if !(self.train.ema_momentum >= 0.0 && self.train.ema_momentum <= 1.0) {
            return Err(Error::Config("train.ema_momentum must be in [0, 1]".into()));
        }
        if self.train.checkpoint_every_epochs == 0 {
            return Err(Error::Config("train.checkpoint_every_epochs must be >= 1".into()));
        }
        if self.train.workers > 0 && self.train.prefetch == 0 {
            return Err(Error::Config("train.prefetch must be >= 1 with workers".into()));
        }
        let e = &self.eval;
        if e.k == 0 || !(e.temperature > 0.0) {
            return Err(Error::Config("eval.k must be >= 1 and eval.temperature > 0".into()));
        }
        if e.semi_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("eval.semi_fractions must lie in (0, 1]".into()));
        }
        self.bank_protocol().validate()?;
        self.test_protocol().validate()?;
        e.probe.validate()?;
        e.finetune.validate(&self.test_protocol())?;
        e.semi.validate(&self.test_protocol())?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("parsing config: {e}")))?;
        let defaults = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        let mut merged = toml::Value::Table(defaults);
        merge(&mut merged, toml::Value::Table(file));
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (empty string: defaults only) and apply overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = if path.as_os_str().is_empty() {
            String::new()
        } else {
            std::fs::read_to_string(path)?
        };
        Self::from_toml_str(&text, overrides)
    }
}

/// Tables merge key by key; anything else is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `dotted.key=value`; array elements are addressed by index. The
/// key must already exist (after defaults and the file are merged), so
/// typos fail loudly.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            toml::Value::Table(t) => t.get_mut(part),
            toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *cur = parse_value(raw.trim());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), c);
        RunConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn overrides() {
        let c = RunConfig::from_toml_str(
            "seed = 3\n[optim]\ntotal_epochs = 4\n",
            &[
                "optim.warmup_epochs=1".into(),
                "targets.0.noise=0.05".into(),
                "output_dir=runs/x".into(),
                "augment.resize_short_range=[30, 36]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.optim.total_epochs, 4);
        assert_eq!(c.optim.warmup_epochs, 1);
        assert_eq!(c.output_dir, "runs/x");
        assert_eq!(c.augment.resize_short_range, [30, 36]);
        assert!(matches!(c.targets[0], TargetSpec::Oracle { noise, .. } if noise == 0.05));
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(RunConfig::from_toml_str("", &["optim.warmup=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("[train]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["noequals".into()]).is_err());
    }

    #[test]
    fn inconsistent_configs_fail() {
        let bad = [
            "data.frames=9",
            "augment.crop_size=36",
            "loss.targets=[\"missing\"]",
            "eval.finetune.augment.crop_size=24",
            "optim.warmup_epochs=31",
            "data.online_views=3",
        ];
        for o in bad {
            assert!(RunConfig::from_toml_str("", &[o.into()]).is_err(), "{o}");
        }
    }
}
