//! Deterministic evaluation views: dense clip offsets and fixed crops.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_aug, resized_dims, AugParams};
use crate::dataset::{clip_at, window_span, Clip, VideoRecord};
use crate::error::{Error, Result};

use super::softmax_rows;

/// Which clips and crops represent a video at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewProtocol {
    pub clips: usize,
    pub crops: usize,
    pub frames: usize,
    pub stride: usize,
    /// Shorter side after resizing, before cropping.
    pub resize_short: usize,
    pub crop_size: usize,
}

impl Default for ViewProtocol {
    fn default() -> Self {
        Self {
            clips: 1,
            crops: 1,
            frames: 8,
            stride: 8,
            resize_short: 32,
            crop_size: 28,
        }
    }
}

impl ViewProtocol {
    pub fn with_views(&self, clips: usize, crops: usize) -> Self {
        Self {
            clips,
            crops,
            ..self.clone()
        }
    }

    pub fn num_views(&self) -> usize {
        self.clips * self.crops
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.crops == 0 || self.frames == 0 || self.stride == 0 {
            return Err(Error::Config("view protocol counts must be >= 1".into()));
        }
        if self.crop_size == 0 || self.crop_size > self.resize_short {
            return Err(Error::Config(format!(
                "crop_size {} must be in [1, resize_short={}]",
                self.crop_size, self.resize_short
            )));
        }
        Ok(())
    }
}

/// Views used to build training features and to score held-out videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalViews {
    pub train: ViewProtocol,
    pub test: ViewProtocol,
}

/// `clips` uniformly spaced window starts over `[0, max_start]`, both ends
/// included; a single clip takes the centered window. Short videos repeat
/// starts rather than failing.
pub fn dense_starts(max_start: usize, clips: usize) -> Vec<usize> {
    match clips {
        0 => vec![],
        1 => vec![max_start / 2],
        n => (0..n).map(|i| i * max_start / (n - 1)).collect(),
    }
}

/// Crop boxes `(top, left, size, size)` in a frame of `h × w`: one crop is
/// centered; several are spread evenly along the longer side (the width for
/// square frames) and centered along the other.
pub fn crop_boxes(h: usize, w: usize, size: usize, crops: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
    if size > h || size > w || size == 0 {
        return Err(Error::Geometry(format!("crop {size} does not fit a {h}x{w} frame")));
    }
    let along_width = w >= h;
    let (long, short) = if along_width { (w, h) } else { (h, w) };
    let off_short = (short - size) / 2;
    let offsets = dense_starts(long - size, crops);
    Ok(offsets
        .into_iter()
        .map(|o| {
            if along_width {
                (off_short, o, size, size)
            } else {
                (o, off_short, size, size)
            }
        })
        .collect())
}

/// Every view of `video`, clip-major then crop.
pub fn eval_views(video: &VideoRecord, p: &ViewProtocol) -> Result<Vec<Clip>> {
    p.validate()?;
    let span = window_span(p.frames, p.stride);
    if video.num_frames() < span {
        return Err(Error::VideoTooShort {
            id: video.id.clone(),
            frames: video.num_frames(),
            needed: span,
            t: p.frames,
            stride: p.stride,
        });
    }
    let (nh, nw) = resized_dims(video.height(), video.width(), p.resize_short);
    let boxes = crop_boxes(nh, nw, p.crop_size, p.crops)?;
    let mut out = Vec::with_capacity(p.num_views());
    for start in dense_starts(video.num_frames() - span, p.clips) {
        let clip = clip_at(video, start, p.frames, p.stride)?;
        for &b in &boxes {
            out.push(apply_aug(&clip, &AugParams::geometric(p.resize_short, b))?);
        }
    }
    Ok(out)
}

/// A model producing class logits per clip.
pub trait ClipScorer {
    fn num_classes(&self) -> usize;
    /// Logits `[clips, classes]`, one row per clip.
    fn logits(&self, clips: &[&Clip]) -> Result<Array2<f64>>;
}

/// Mean of per-view softmax distributions.
pub fn mean_softmax(logits: ArrayView2<f64>) -> Result<Array1<f64>> {
    if logits.nrows() == 0 {
        return Err(Error::InvalidArgument("no views to average".into()));
    }
    Ok(softmax_rows(logits).mean_axis(Axis(0)).expect("non-empty"))
}

/// Class scores of `video` averaged over every view in `p`.
pub fn multi_view_predict(model: &dyn ClipScorer, video: &VideoRecord, p: &ViewProtocol) -> Result<Array1<f64>> {
    let views = eval_views(video, p)?;
    let refs: Vec<&Clip> = views.iter().collect();
    let logits = model.logits(&refs)?;
    mean_softmax(logits.view())
}
