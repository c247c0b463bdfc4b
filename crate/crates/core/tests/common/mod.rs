#![allow(dead_code)]

use std::collections::HashMap;

use clipdistill::augment::AugConfig;
use clipdistill::dataset::{make_synthetic_dataset, window_span, Clip, Split, SyntheticSpec, VideoRecord};
use clipdistill::encoders::EncoderConfig;
use clipdistill::eval::{FeatureBank, FeatureExtractor, ViewProtocol};
use clipdistill::harness::RunConfig;
use clipdistill::rng;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;

/// Reference kNN: full sort of every row by (similarity desc, index asc),
/// exp-weighted votes over the first `k`, lowest class wins ties.
pub fn knn_brute(features: &Array2<f64>, labels: &[usize], classes: usize, q: &Array1<f64>, k: usize, tau: f64) -> (usize, Vec<f64>) {
    let mut sims: Vec<(f64, usize)> = (0..features.nrows())
        .map(|i| ((0..q.len()).map(|j| features[[i, j]] * q[j]).sum(), i))
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = vec![0.0; classes];
    for &(s, i) in sims.iter().take(k) {
        votes[labels[i]] += (s / tau).exp();
    }
    let mut best = 0;
    for c in 1..classes {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    (best, votes)
}

pub fn unit_rows(r: &mut rng::Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0f64..1.0));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

/// Random bank with some exact duplicate rows so similarity ties occur.
pub fn random_bank(seed: u64, n: usize, d: usize, classes: usize) -> FeatureBank {
    let mut r = rng::stream(seed, &[0xba4c]);
    let mut f = unit_rows(&mut r, n, d);
    for i in (5..n).step_by(7) {
        let src = f.row(i - 5).to_owned();
        f.row_mut(i).assign(&src);
    }
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let ids = (0..n).map(|i| format!("b{i}")).collect();
    FeatureBank::new(f, labels, ids, classes).unwrap()
}

/// Tiny corpus: 16 raw frames at 16 px, windows of 4 frames at stride 2.
pub fn tiny_spec(num_classes: usize, per_class: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes,
        videos_per_class: per_class,
        raw_frames: 16,
        spatial_size: 16,
        seed,
        val_fraction: 0.25,
        min_window: window_span(4, 2),
    }
}

pub fn tiny_videos(num_classes: usize, per_class: usize, seed: u64) -> Vec<VideoRecord> {
    make_synthetic_dataset(&tiny_spec(num_classes, per_class, seed)).unwrap()
}

pub fn split(videos: &[VideoRecord]) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    let train = videos.iter().filter(|v| v.split == Split::Train).cloned().collect();
    let val = videos.iter().filter(|v| v.split == Split::Val).cloned().collect();
    (train, val)
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        widths: vec![4, 8],
        projector_hidden: 16,
        projector_dim: 8,
        predictor_hidden: 16,
        ..EncoderConfig::default()
    }
}

pub fn tiny_protocol() -> ViewProtocol {
    ViewProtocol {
        clips: 1,
        crops: 1,
        frames: 4,
        stride: 2,
        resize_short: 14,
        crop_size: 12,
    }
}

pub fn tiny_aug() -> AugConfig {
    AugConfig {
        resize_short_range: [14, 16],
        crop_size: 12,
        ..AugConfig::default()
    }
}

/// Run config for a fast end-to-end run in `dir`.
pub fn tiny_run(dir: &std::path::Path, classes: usize, per_class: usize, epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.output_dir = dir.to_string_lossy().into_owned();
    c.data.synthetic = tiny_spec(classes, per_class, 1);
    c.data.frames = 4;
    c.data.stride = 2;
    c.augment = tiny_aug();
    c.encoder = tiny_encoder();
    c.optim.batch_size = 4;
    c.optim.total_epochs = epochs;
    c.optim.warmup_epochs = 1.min(epochs);
    c.eval.k = 3;
    c.eval.resize_short = 14;
    c.eval.test_clips = 2;
    c.eval.test_crops = 3;
    c.eval.probe.epochs = 5;
    c.eval.probe.warmup_epochs = 1;
    c.eval.finetune.epochs = 2;
    c.eval.finetune.augment = tiny_aug();
    c.eval.semi.epochs = 2;
    c.eval.semi.augment = tiny_aug();
    c
}

/// Features computed from the clip's label and mean intensity, so classes
/// are linearly separable by construction.
pub struct LabelExtractor {
    pub labels: HashMap<String, usize>,
    pub classes: usize,
    pub noise: f64,
}

impl LabelExtractor {
    pub fn new(videos: &[VideoRecord], classes: usize, noise: f64) -> Self {
        let labels = videos.iter().map(|v| (v.id.clone(), v.label.unwrap())).collect();
        Self { labels, classes, noise }
    }
}

impl FeatureExtractor for LabelExtractor {
    fn clip_features(&self, clips: &[&Clip]) -> clipdistill::Result<Array2<f64>> {
        let d = self.classes + 2;
        let mut out = Array2::zeros((clips.len(), d));
        for (i, c) in clips.iter().enumerate() {
            let l = self.labels[&c.source_id];
            let m = c.frames.iter().map(|&v| v as f64).sum::<f64>() / c.frames.len() as f64;
            out[[i, l]] = 1.0;
            out[[i, self.classes]] = self.noise * (m - 0.5) * 4.0;
            out[[i, self.classes + 1]] = self.noise * ((c.start as f64).sin() + 0.5);
        }
        Ok(out)
    }
}

/// Small record with a 1×1 frame, for split tests that never touch pixels.
pub fn stub_video(id: usize, label: usize) -> VideoRecord {
    VideoRecord {
        id: format!("s{id:05}"),
        frames: Array4::zeros((1, 1, 1, 3)),
        label: Some(label),
        split: Split::Train,
    }
}

/// Least-squares fit of one-hot targets (with a bias column); returns the
/// training accuracy of the fitted linear map.
pub fn least_squares_accuracy(x: &Array2<f64>, labels: &[usize], classes: usize) -> f64 {
    let (n, d) = x.dim();
    let dd = d + 1;
    let mut a = vec![vec![0.0; dd + classes]; dd];
    for r in 0..n {
        let row: Vec<f64> = x.row(r).iter().copied().chain([1.0]).collect();
        for i in 0..dd {
            for j in 0..dd {
                a[i][j] += row[i] * row[j];
            }
            a[i][dd + labels[r]] += row[i];
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    for col in 0..dd {
        let piv = (col..dd).max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        let div = a[col][col];
        for v in a[col].iter_mut() {
            *v /= div;
        }
        for r in 0..dd {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, p) in a[r].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    let mut hits = 0;
    for r in 0..n {
        let row: Vec<f64> = x.row(r).iter().copied().chain([1.0]).collect();
        let scores: Vec<f64> = (0..classes)
            .map(|c| (0..dd).map(|i| row[i] * a[i][dd + c]).sum())
            .collect();
        let best = (0..classes).max_by(|&p, &q| scores[p].partial_cmp(&scores[q]).unwrap()).unwrap();
        hits += (best == labels[r]) as usize;
    }
    hits as f64 / n as f64
}
