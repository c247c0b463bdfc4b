//! Evaluation protocols: frozen-feature kNN, linear probe, fine-tuning,
//! stratified semi-supervised subsets and dense multi-view inference.

pub mod bank;
pub mod finetune;
pub mod knn;
pub mod probe;
pub mod split;
pub mod views;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bank::{average_and_normalize, extract_features, FeatureBank, FeatureExtractor};
pub use finetune::{evaluate_classifier, finetune, FinetuneConfig, VideoClassifier};
pub use knn::{knn_classify, knn_predict, knn_top1, KnnPrediction};
pub use probe::{linear_probe, LinearClassifier, ProbeConfig, ProbeScorer};
pub use split::{semi_split, semi_split_indices};
pub use views::{crop_boxes, dense_starts, eval_views, mean_softmax, multi_view_predict, ClipScorer, EvalViews, ViewProtocol};

/// Outcome of one evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub top1: f64,
    /// Accuracy of every class present in the evaluated set.
    #[serde(with = "class_keys")]
    pub per_class: BTreeMap<usize, f64>,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
}

/// Class ids as string keys. Integer keys do not survive deserialization
/// through the internally tagged metrics records.
mod class_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<String, f64>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

impl EvalReport {
    /// Same protocol, accuracies and config, ignoring timing.
    pub fn same_result(&self, other: &EvalReport) -> bool {
        self.protocol == other.protocol && self.top1 == other.top1 && self.per_class == other.per_class && self.config == other.config
    }
}

/// Top-1 and per-class accuracy of `predictions` against `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<(f64, BTreeMap<usize, f64>)> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &l) in predictions.iter().zip(labels) {
        let e = hits.entry(l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
            correct += 1;
        }
    }
    let per_class = hits.into_iter().map(|(c, (h, n))| (c, h as f64 / n as f64)).collect();
    Ok((correct as f64 / labels.len() as f64, per_class))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub(crate) fn labels_of(videos: &[crate::dataset::VideoRecord]) -> Result<Vec<usize>> {
    videos
        .iter()
        .map(|v| v.label.ok_or_else(|| Error::InvalidArgument(format!("video {} has no label", v.id))))
        .collect()
}

pub(crate) fn l2_normalize(v: Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroNorm("feature vector"));
    }
    Ok(v / n)
}
