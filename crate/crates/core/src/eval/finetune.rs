//! Supervised fine-tuning of the whole encoder with a linear classifier.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::views::{multi_view_predict, ClipScorer, EvalViews, ViewProtocol};
use super::{accuracy, argmax, labels_of, softmax_rows, EvalReport};
use crate::augment::{augment_clip, AugConfig};
use crate::dataset::{sample_clip, Clip, VideoRecord};
use crate::encoders::layers::Linear;
use crate::encoders::{pool_frames, Mode, Param, VideoEncoder};
use crate::error::{Error, Result};
use crate::optim::{schedule, Sgd};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training-time augmentation; its crop must match the test crop.
    pub augment: AugConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: AugConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, test: &ViewProtocol) -> Result<()> {
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be >= 1".into()));
        }
        if self.epochs > 0 && self.warmup_epochs > self.epochs {
            return Err(Error::Config("finetune.warmup_epochs exceeds finetune.epochs".into()));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("finetune rates must be >= 0".into()));
        }
        if self.augment.crop_size != test.crop_size {
            return Err(Error::Config(format!(
                "finetune crop {} differs from the test crop {}",
                self.augment.crop_size, test.crop_size
            )));
        }
        Ok(())
    }
}

/// Encoder, temporal average pooling and a linear classifier.
#[derive(Clone, Debug)]
pub struct VideoClassifier {
    pub encoder: VideoEncoder<f32>,
    pub head: Linear<f32>,
}

impl VideoClassifier {
    /// Attach a zero-initialized classifier to `encoder`.
    pub fn new(encoder: VideoEncoder<f32>, num_classes: usize) -> Self {
        let d = encoder.out_dim();
        let head = Linear {
            weight: Param::filled("classifier.weight", vec![d, num_classes], 0.0),
            bias: Param::filled("classifier.bias", vec![num_classes], 0.0),
        };
        Self { encoder, head }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut p = self.encoder.params_mut();
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }

    /// One supervised forward/backward pass with batch statistics;
    /// gradients are accumulated, the mean cross-entropy returned.
    pub fn accumulate_grad(&mut self, clips: &[&Clip], labels: &[usize]) -> Result<f64> {
        let (h, [b, t], cache) = self.encoder.forward(clips, Mode::Train)?;
        self.encoder.update_running(&cache);
        let pooled = pool_frames(&h, t);
        let logits = self.head.forward(&pooled)?.mapv(f64::from);
        let p = softmax_rows(logits.view());
        let mut d = p.clone();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            loss -= p[[i, l]].max(f64::MIN_POSITIVE).ln();
            d[[i, l]] -= 1.0;
        }
        let inv_b = 1.0 / b as f64;
        let d_logits = d.mapv(|v| (v * inv_b) as f32);
        let d_pooled = self.head.backward(&pooled, &d_logits);
        let inv_t = 1.0 / t as f32;
        let mut d_h = Array2::<f32>::zeros(h.raw_dim());
        for (r, mut row) in d_h.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&d_pooled.row(r / t).mapv(|v| v * inv_t));
        }
        self.encoder.backward(cache, &d_h);
        Ok(loss * inv_b)
    }
}

impl ClipScorer for VideoClassifier {
    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn logits(&self, clips: &[&Clip]) -> Result<Array2<f64>> {
        let (h, [_, t], _) = self.encoder.forward(clips, Mode::Eval)?;
        Ok(self.head.forward(&pool_frames(&h, t))?.mapv(f64::from))
    }
}

/// Multi-view top-1 and per-class accuracy of `model` on `videos`.
pub fn evaluate_classifier(
    model: &dyn ClipScorer,
    videos: &[VideoRecord],
    test: &ViewProtocol,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    let labels = labels_of(videos)?;
    let preds = videos
        .iter()
        .map(|v| multi_view_predict(model, v, test).map(|s| argmax(s.view())))
        .collect::<Result<Vec<_>>>()?;
    accuracy(&preds, &labels)
}

/// Train every parameter with momentum SGD on augmented random clips of
/// `train`, then score `val` with the test views. Clip sampling and
/// augmentation for a video depend only on `(seed, epoch, video index)`.
pub fn finetune(
    mut model: VideoClassifier,
    train: &[VideoRecord],
    val: &[VideoRecord],
    views: &EvalViews,
    cfg: &FinetuneConfig,
) -> Result<(VideoClassifier, EvalReport)> {
    cfg.validate(&views.test)?;
    let clock = Instant::now();
    let labels = labels_of(train)?;
    if let Some(&l) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {l} outside {} classes", model.num_classes())));
    }
    let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let spe = train.len().div_ceil(cfg.batch_size);
    let (frames, stride) = (views.train.frames, views.train.stride);
    let tag = rng::hash_str("finetune");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag, epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * spe + b;
            let lr = schedule(step, spe, cfg.warmup_epochs, cfg.epochs, cfg.lr, 0.0)?;
            let clips = chunk
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(cfg.seed, &[tag, epoch as u64, i as u64]);
                    let raw = sample_clip(&train[i], frames, stride, &mut r)?;
                    augment_clip(&raw, &cfg.augment, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Clip> = clips.iter().collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model.params_mut().into_iter().for_each(Param::zero_grad);
            let loss = model.accumulate_grad(&refs, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tune loss at epoch {epoch} batch {b}")));
            }
            opt.step(&mut model.params_mut(), lr)?;
        }
    }
    let (top1, per_class) = evaluate_classifier(&model, val, &views.test)?;
    let report = EvalReport {
        protocol: "finetune".into(),
        top1,
        per_class,
        config: serde_json::json!({ "finetune": cfg, "views": views }),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
