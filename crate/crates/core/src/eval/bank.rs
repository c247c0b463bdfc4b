//! Frozen feature banks.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::views::{eval_views, ViewProtocol};
use super::{l2_normalize, labels_of};
use crate::container::{self, BlobReader, BlobWriter};
use crate::dataset::{Clip, VideoRecord};
use crate::encoders::{pool_frames, Mode, VideoEncoder};
use crate::error::{Error, Result};

const BANK_MAGIC: &[u8; 8] = b"CDBANK\0\0";

/// L2-normalized features with labels and source ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub num_classes: usize,
}

impl FeatureBank {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, ids: Vec<String>, num_classes: usize) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("feature bank is empty".into()));
        }
        if labels.len() != n || ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} rows, {} labels, {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside {num_classes} classes")));
        }
        for (i, row) in features.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(Error::InvalidArgument(format!("row {i} has norm {norm}")));
            }
        }
        Ok(Self {
            features,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = BlobWriter::new();
        let (offset, len) = blob.push_f64(self.features.as_standard_layout().as_slice().expect("standard layout"));
        let header = BankHeader {
            rows: self.len(),
            dim: self.dim(),
            dtype: "f64".into(),
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            offset,
            len,
        };
        container::write_file(path, BANK_MAGIC, &header, &blob.into_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, blob): (BankHeader, _) = container::read_file(path, BANK_MAGIC)?;
        if h.dtype != "f64" {
            return Err(Error::Format(format!("unsupported bank dtype {}", h.dtype)));
        }
        let data = BlobReader::new(&blob).f64s(h.offset, h.len)?;
        let features = Array2::from_shape_vec((h.rows, h.dim), data)
            .map_err(|e| Error::Format(format!("bank shape: {e}")))?;
        Self::new(features, h.labels, h.ids, h.num_classes)
    }
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    rows: usize,
    dim: usize,
    dtype: String,
    num_classes: usize,
    labels: Vec<usize>,
    ids: Vec<String>,
    offset: usize,
    len: usize,
}

/// Anything that turns clips into one feature vector each.
pub trait FeatureExtractor {
    /// `[clips, dim]` features, one row per clip.
    fn clip_features(&self, clips: &[&Clip]) -> Result<Array2<f64>>;

    /// Hash of every parameter and buffer, used to check frozen contracts.
    fn param_digest(&self) -> Option<u64> {
        None
    }
}

/// FNV-1a over the bit patterns of `values`.
pub fn digest_f32<'a>(values: impl IntoIterator<Item = &'a f32>, mut h: u64) -> u64 {
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

impl FeatureExtractor for VideoEncoder<f32> {
    /// Temporally pooled encoder features in evaluation mode.
    fn clip_features(&self, clips: &[&Clip]) -> Result<Array2<f64>> {
        let (h, [_, t], _) = self.forward(clips, Mode::Eval)?;
        Ok(pool_frames(&h, t).mapv(f64::from))
    }

    fn param_digest(&self) -> Option<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            h = digest_f32(&p.value, h);
        }
        for b in &self.blocks {
            h = digest_f32(b.bn.running_mean.iter().chain(&b.bn.running_var), h);
        }
        Some(h)
    }
}

/// Average rows and L2-normalize; a (numerically) zero mean is an error.
pub fn average_and_normalize(rows: ArrayView2<f64>) -> Result<Array1<f64>> {
    let mean = rows
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidArgument("no features to average".into()))?;
    let scale = rows
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    let n = mean.dot(&mean).sqrt();
    if !(n > 1e-12 * scale) {
        return Err(Error::ZeroNorm("averaged feature"));
    }
    l2_normalize(mean)
}

/// One bank row per video: features of every view in `p`, averaged and
/// normalized. Each video is processed on its own, so rows do not depend
/// on dataset order.
pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    videos: &[VideoRecord],
    p: &ViewProtocol,
    num_classes: usize,
) -> Result<FeatureBank> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("cannot extract features of an empty dataset".into()));
    }
    let labels = labels_of(videos)?;
    let mut rows = Vec::with_capacity(videos.len());
    for v in videos {
        let views = eval_views(v, p)?;
        let refs: Vec<&Clip> = views.iter().collect();
        let f = extractor.clip_features(&refs)?;
        rows.push(average_and_normalize(f.view())?);
    }
    let dim = rows[0].len();
    let mut features = Array2::zeros((rows.len(), dim));
    for (mut dst, r) in features.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(r);
    }
    FeatureBank::new(features, labels, videos.iter().map(|v| v.id.clone()).collect(), num_classes)
}
