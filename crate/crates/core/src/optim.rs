//! LARS, momentum SGD and the linear-warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encoders::{Param, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Base learning rate is `base_lr_coefficient · batch_size / 256`.
    pub base_lr_coefficient: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub trust_coefficient: f64,
    /// Parameters whose name contains any of these substrings keep a unit
    /// adaptation ratio.
    pub exclude_from_adaptation: Vec<String>,
    /// Learning rate reached at the last step of the cosine phase.
    pub final_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr_coefficient: 2.4,
            batch_size: 16,
            warmup_epochs: 3,
            total_epochs: 30,
            weight_decay: 1e-6,
            momentum: 0.9,
            trust_coefficient: 0.001,
            exclude_from_adaptation: vec![".bias".into(), ".bn".into()],
            final_lr: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be >= 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "optim.warmup_epochs={} exceeds total_epochs={}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let reals = [
            ("base_lr_coefficient", self.base_lr_coefficient),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("trust_coefficient", self.trust_coefficient),
            ("final_lr", self.final_lr),
        ];
        for (name, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("optim.{name}={v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }

    pub fn is_excluded(&self, name: &str) -> bool {
        self.exclude_from_adaptation.iter().any(|p| name.contains(p.as_str()))
    }
}

/// Linear scaling rule: `coefficient · batch_size / 256`.
pub fn base_lr(cfg: &OptimConfig) -> f64 {
    cfg.base_lr_coefficient * cfg.batch_size as f64 / 256.0
}

/// Learning rate for `step` (0-based).
///
/// Warmup ramps linearly from 0 to the base rate over the warmup steps; the
/// cosine phase then runs from the base rate at the first post-warmup step
/// to `final_lr` at the last step.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    schedule(step, steps_per_epoch, cfg.warmup_epochs, cfg.total_epochs, base_lr(cfg), cfg.final_lr)
}

/// Same shape as [`lr_at`] with an explicit base rate.
pub fn schedule(step: usize, steps_per_epoch: usize, warmup_epochs: usize, total_epochs: usize, base: f64, floor: f64) -> Result<f64> {
    let total = steps_per_epoch * total_epochs;
    if step >= total {
        return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total} steps")));
    }
    let warmup = steps_per_epoch * warmup_epochs;
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let span = (total - 1 - warmup).max(1);
    let p = (step - warmup) as f64 / span as f64;
    Ok((floor + (base - floor) * 0.5 * (1.0 + (PI * p).cos())).max(0.0))
}

/// Hyperparameters of one LARS update.
#[derive(Clone, Copy, Debug)]
pub struct LarsHyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

/// Update one tensor in place and return the adaptation ratio used:
/// `g' = g + wd·w`, `r = trust·‖w‖/‖g'‖` (1 if excluded or a norm is 0),
/// `u ← momentum·u + r·lr·g'`, `w ← w − u`.
pub fn lars_update<F: Scalar>(w: &mut [F], g: &[F], buf: &mut [F], lr: f64, hp: &LarsHyper, excluded: bool) -> f64 {
    let wd = F::of(hp.weight_decay);
    let gp: Vec<F> = w.iter().zip(g).map(|(&wi, &gi)| gi + wd * wi).collect();
    let ratio = if excluded {
        1.0
    } else {
        let wn = w.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        let gn = gp.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if wn > 0.0 && gn > 0.0 {
            hp.trust_coefficient * wn / gn
        } else {
            1.0
        }
    };
    let coef = F::of(ratio * lr);
    let mom = F::of(hp.momentum);
    for ((wi, bi), gi) in w.iter_mut().zip(buf.iter_mut()).zip(gp) {
        *bi = mom * *bi + coef * gi;
        *wi = *wi - *bi;
    }
    ratio
}

fn check_grads<F: Scalar>(params: &[&mut Param<F>]) -> Result<()> {
    for p in params.iter() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}[{i}] = {:?}", p.name, p.grad[i])));
        }
    }
    Ok(())
}

/// LARS with per-tensor momentum buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Lars<F> {
    pub cfg: OptimConfig,
    pub buffers: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Lars<F> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            buffers: BTreeMap::new(),
        }
    }

    fn hyper(&self) -> LarsHyper {
        LarsHyper {
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
            trust_coefficient: self.cfg.trust_coefficient,
        }
    }

    /// Apply one update to every parameter from its accumulated gradient.
    /// Returns the adaptation ratio per parameter name. Non-finite
    /// gradients abort before any parameter changes.
    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) -> Result<BTreeMap<String, f64>> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        check_grads(params)?;
        let hp = self.hyper();
        let mut ratios = BTreeMap::new();
        for p in params.iter_mut() {
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| vec![F::zero(); p.numel()]);
            if buf.len() != p.numel() {
                return Err(Error::Shape(format!("momentum buffer of {} has {} entries, parameter {}", p.name, buf.len(), p.numel())));
            }
            let excluded = self.cfg.is_excluded(&p.name);
            let r = lars_update(&mut p.value, &p.grad, buf, lr, &hp, excluded);
            ratios.insert(p.name.clone(), r);
        }
        Ok(ratios)
    }
}

/// Momentum SGD: `buf ← momentum·buf + (g + wd·w)`, `w ← w − lr·buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) -> Result<()> {
        check_grads(params)?;
        let (mom, wd, lr) = (F::of(self.momentum), F::of(self.weight_decay), F::of(lr));
        for p in params.iter_mut() {
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| vec![F::zero(); p.numel()]);
            for ((w, b), &g) in p.value.iter_mut().zip(buf.iter_mut()).zip(&p.grad) {
                *b = mom * *b + g + wd * *w;
                *w = *w - lr * *b;
            }
        }
        Ok(())
    }
}
