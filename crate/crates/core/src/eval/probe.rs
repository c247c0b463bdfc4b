//! Linear classifier trained on frozen features.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bank::{extract_features, FeatureExtractor};
use super::views::{multi_view_predict, ClipScorer, EvalViews};
use super::{accuracy, argmax, labels_of, softmax_rows, EvalReport};
use crate::dataset::{Clip, VideoRecord};
use crate::encoders::Param;
use crate::error::{Error, Result};
use crate::optim::{schedule, Sgd};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            base_lr: 1.0,
            warmup_epochs: 8,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe.batch_size must be >= 1".into()));
        }
        if self.warmup_epochs > self.epochs && self.epochs > 0 {
            return Err(Error::Config("probe.warmup_epochs exceeds probe.epochs".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("probe rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// `logits = x · W + b`, zero-initialized so an untrained probe scores every
/// class equally and predicts class 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// Shape `[dim, classes]`.
    pub weight: Param<f64>,
    pub bias: Param<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: Param::filled("probe.weight", vec![dim, classes], 0.0),
            bias: Param::filled("probe.bias", vec![classes], 0.0),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let w = self.weight.matrix();
        if x.ncols() != w.nrows() {
            return Err(Error::Shape(format!("probe expects dim {}, got {}", w.nrows(), x.ncols())));
        }
        let mut y = x.dot(&w);
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Mean softmax cross-entropy over the batch; gradients accumulated.
    pub fn accumulate_grad(&mut self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let p = softmax_rows(self.logits(x)?.view());
        let n = labels.len() as f64;
        let mut d = p.clone();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            loss -= p[[i, l]].max(f64::MIN_POSITIVE).ln();
            d[[i, l]] -= 1.0;
        }
        d /= n;
        let dw = x.t().dot(&d);
        for (g, v) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in self.bias.grad.iter_mut().zip(d.sum_axis(Axis(0)).iter()) {
            *g += v;
        }
        Ok(loss / n)
    }
}

/// Frozen extractor plus linear head; each view's feature is normalized
/// before the head, matching how the training bank was built.
pub struct ProbeScorer<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub head: &'a LinearClassifier,
}

impl ClipScorer for ProbeScorer<'_> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn logits(&self, clips: &[&Clip]) -> Result<Array2<f64>> {
        let mut f = self.extractor.clip_features(clips)?;
        for mut row in f.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::ZeroNorm("clip feature"));
            }
            row /= n;
        }
        self.head.logits(f.view())
    }
}

/// Train a linear head on frozen features of `train`, report multi-view
/// top-1 on `val`. Fails if the extractor's parameters change.
pub fn linear_probe(
    extractor: &dyn FeatureExtractor,
    train: &[VideoRecord],
    val: &[VideoRecord],
    views: &EvalViews,
    cfg: &ProbeConfig,
    num_classes: usize,
) -> Result<(LinearClassifier, EvalReport)> {
    cfg.validate()?;
    let clock = Instant::now();
    let digest = extractor.param_digest();
    let bank = extract_features(extractor, train, &views.train, num_classes)?;
    let mut head = LinearClassifier::zeros(bank.dim(), num_classes);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let n = bank.len();
    let spe = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::hash_str("probe"), epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * spe + b;
            let lr = schedule(step, spe, cfg.warmup_epochs, cfg.epochs, cfg.base_lr, 0.0)?;
            let x = bank.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| bank.labels[i]).collect();
            head.weight.zero_grad();
            head.bias.zero_grad();
            let loss = head.accumulate_grad(x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("probe loss at epoch {epoch} batch {b}")));
            }
            opt.step(&mut [&mut head.weight, &mut head.bias], lr)?;
        }
    }
    let scorer = ProbeScorer {
        extractor,
        head: &head,
    };
    let labels = labels_of(val)?;
    let preds = val
        .iter()
        .map(|v| multi_view_predict(&scorer, v, &views.test).map(|s| argmax(s.view())))
        .collect::<Result<Vec<_>>>()?;
    if extractor.param_digest() != digest {
        return Err(Error::InvalidArgument("encoder parameters changed during the linear probe".into()));
    }
    let (top1, per_class) = accuracy(&preds, &labels)?;
    let report = EvalReport {
        protocol: "linear".into(),
        top1,
        per_class,
        config: serde_json::json!({ "probe": cfg, "views": views }),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    Ok((head, report))
}
