//! Synthetic video corpus, temporal clip sampling and multi-view construction.
//!
//! Classes are motion programs: a colored square moving over a static,
//! smoothly textured background with per-frame noise. Color, size, start
//! position and texture are random per video, so only the motion separates
//! classes. The horizontal sign of the velocity is random per video, which
//! keeps the class of a video unchanged under horizontal flips.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{self, BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const DATASET_MAGIC: &[u8; 8] = b"CDVIDEO\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One raw video: `frames` is N×H×W×3 of 8-bit intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Array4<u8>,
    pub label: Option<usize>,
    pub split: Split,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.frames.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.frames.len_of(Axis(2))
    }
}

/// Raw frames spanned by a window of `t` frames at stride `stride`.
pub fn window_span(t: usize, stride: usize) -> usize {
    (t - 1) * stride + 1
}

/// `t` frames subsampled at `stride` from a source video, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Array4<f32>,
    pub source_id: String,
    pub start: usize,
    pub stride: usize,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.frames.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.frames.len_of(Axis(2))
    }

    /// Raw frame index of every clip frame.
    pub fn raw_indices(&self) -> Vec<usize> {
        (0..self.num_frames())
            .map(|t| self.start + t * self.stride)
            .collect()
    }
}

/// `v_ref` feeds the target network, `online_views` feed the online network.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub v_ref: Clip,
    pub online_views: Vec<Clip>,
    pub source_id: String,
}

/// How the reference window relates to the online windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefWindow {
    /// Every window drawn independently and uniformly.
    #[default]
    Independent,
    /// `v_ref` takes the centered window; online views stay uniform.
    Centered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub raw_frames: usize,
    pub spatial_size: usize,
    pub seed: u64,
    /// Fraction of each class assigned to the validation split.
    pub val_fraction: f64,
    /// Shortest window any consumer will request; generation fails below it.
    pub min_window: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            videos_per_class: 40,
            raw_frames: 64,
            spatial_size: 32,
            seed: 0,
            val_fraction: 0.25,
            min_window: window_span(8, 8),
        }
    }
}

/// Velocity (px per raw frame at 32 px) of class `c`: vertical component
/// cycles through five levels, horizontal magnitude steps every five classes.
fn class_velocity(class: usize) -> (f64, f64) {
    const VY: [f64; 5] = [-0.5, -0.25, 0.0, 0.25, 0.5];
    let vy = VY[class % VY.len()];
    let vx = 0.375 * (class / VY.len()) as f64;
    (vy, vx)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_video(class: usize, frames: usize, size: usize, rng: &mut Rng) -> Array4<u8> {
    use std::f64::consts::TAU;
    let scale = size as f64 / 32.0;
    let sz = size as f64;

    // Static background: per-channel base level plus two low-frequency waves.
    let mut background = vec![0.0f64; size * size * 3];
    for ch in 0..3 {
        let base = rng.random_range(0.25..0.55);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.random_range(0.04..0.12),
                    rng.random_range(1..=3) as f64 * TAU / sz,
                    rng.random_range(1..=3) as f64 * TAU / sz,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let mut v = base;
                for &(amp, fx, fy, ph) in &waves {
                    v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
                }
                background[(y * size + x) * 3 + ch] = v;
            }
        }
    }

    let side = rng.random_range((sz / 5.0).round()..=(sz / 3.5).round()).max(1.0) as usize;
    let color = hsv_to_rgb(rng.random_range(0.0..1.0), 0.85, rng.random_range(0.85..1.0));
    let (vy, vx_mag) = class_velocity(class);
    let vx = if rng.random_bool(0.5) { vx_mag } else { -vx_mag };
    let (x0, y0) = (rng.random_range(0.0..sz), rng.random_range(0.0..sz));

    let mut out = Array4::<u8>::zeros((frames, size, size, 3));
    for f in 0..frames {
        let px = (x0 + vx * scale * f as f64).rem_euclid(sz).floor() as usize;
        let py = (y0 + vy * scale * f as f64).rem_euclid(sz).floor() as usize;
        for y in 0..size {
            let in_y = (y + size - py) % size < side;
            for x in 0..size {
                let in_sq = in_y && (x + size - px) % size < side;
                for ch in 0..3 {
                    let noise = rng.random_range(-0.03..0.03);
                    let v = if in_sq {
                        color[ch]
                    } else {
                        background[(y * size + x) * 3 + ch]
                    } + noise;
                    out[[f, y, x, ch]] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    out
}

/// Generate the synthetic corpus. Deterministic under `spec.seed`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<VideoRecord>> {
    if spec.num_classes == 0 || spec.videos_per_class == 0 || spec.spatial_size == 0 {
        return Err(Error::InvalidArgument(
            "num_classes, videos_per_class and spatial_size must be >= 1".into(),
        ));
    }
    if spec.raw_frames == 0 || spec.raw_frames < spec.min_window {
        return Err(Error::InvalidArgument(format!(
            "raw_frames={} is shorter than the required window of {} frames",
            spec.raw_frames, spec.min_window
        )));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in [0, 1), got {}",
            spec.val_fraction
        )));
    }
    let n_val = (spec.val_fraction * spec.videos_per_class as f64).round() as usize;
    let mut videos = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    for class in 0..spec.num_classes {
        for i in 0..spec.videos_per_class {
            let mut rng = rng::stream(spec.seed, &[class as u64, i as u64]);
            let frames = render_video(class, spec.raw_frames, spec.spatial_size, &mut rng);
            let split = if i < spec.videos_per_class - n_val {
                Split::Train
            } else {
                Split::Val
            };
            videos.push(VideoRecord {
                id: format!("c{class:03}_v{i:04}"),
                frames,
                label: Some(class),
                split,
            });
        }
    }
    Ok(videos)
}

fn check_window(video: &VideoRecord, t: usize, stride: usize) -> Result<usize> {
    if t == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "clip length and stride must be >= 1 (got T={t}, stride={stride})"
        )));
    }
    let needed = window_span(t, stride);
    if video.num_frames() < needed {
        return Err(Error::VideoTooShort {
            id: video.id.clone(),
            frames: video.num_frames(),
            needed,
            t,
            stride,
        });
    }
    Ok(video.num_frames() - needed)
}

/// Cut the clip starting at raw frame `start`.
pub fn clip_at(video: &VideoRecord, start: usize, t: usize, stride: usize) -> Result<Clip> {
    let max_start = check_window(video, t, stride)?;
    if start > max_start {
        return Err(Error::InvalidArgument(format!(
            "start {start} exceeds the last admissible start {max_start}"
        )));
    }
    let end = start + window_span(t, stride);
    let raw = video.frames.slice(s![start..end;stride, .., .., ..]);
    Ok(Clip {
        frames: raw.mapv(|v| v as f32 / 255.0),
        source_id: video.id.clone(),
        start,
        stride,
    })
}

/// Sample a clip whose start is uniform over every admissible window.
pub fn sample_clip(video: &VideoRecord, t: usize, stride: usize, rng: &mut Rng) -> Result<Clip> {
    let max_start = check_window(video, t, stride)?;
    let start = rng.random_range(0..=max_start);
    clip_at(video, start, t, stride)
}

/// Build the reference clip plus `num_online_views` online clips.
///
/// With `num_online_views == 0` the single online view reuses the reference
/// window; spatial augmentation is still drawn separately by the caller.
pub fn sample_views(
    video: &VideoRecord,
    num_online_views: usize,
    t: usize,
    stride: usize,
    anchor: RefWindow,
    rng: &mut Rng,
) -> Result<ViewSet> {
    if num_online_views > 2 {
        return Err(Error::InvalidArgument(format!(
            "num_online_views must be 0, 1 or 2 (got {num_online_views})"
        )));
    }
    let max_start = check_window(video, t, stride)?;
    let v_ref = match anchor {
        RefWindow::Independent => sample_clip(video, t, stride, rng)?,
        RefWindow::Centered => clip_at(video, max_start / 2, t, stride)?,
    };
    let online_views = if num_online_views == 0 {
        vec![v_ref.clone()]
    } else {
        (0..num_online_views)
            .map(|_| sample_clip(video, t, stride, rng))
            .collect::<Result<_>>()?
    };
    Ok(ViewSet {
        v_ref,
        online_views,
        source_id: video.id.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: Option<usize>,
    split: Split,
    shape: [usize; 4],
    offset: usize,
    len: usize,
}

/// Persist videos into one container file; the round trip is byte-exact.
pub fn save_dataset(path: &Path, videos: &[VideoRecord]) -> Result<()> {
    let mut blob = BlobWriter::new();
    let mut manifest = Vec::with_capacity(videos.len());
    for v in videos {
        let data: Vec<u8> = v.frames.iter().copied().collect();
        let (offset, len) = blob.push_u8(&data);
        let sh = v.frames.shape();
        manifest.push(ManifestEntry {
            id: v.id.clone(),
            label: v.label,
            split: v.split,
            shape: [sh[0], sh[1], sh[2], sh[3]],
            offset,
            len,
        });
    }
    container::write_file(path, DATASET_MAGIC, &manifest, &blob.into_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoRecord>> {
    let (manifest, blob): (Vec<ManifestEntry>, _) = container::read_file(path, DATASET_MAGIC)?;
    let reader = BlobReader::new(&blob);
    manifest
        .into_iter()
        .map(|e| {
            let data = reader.u8s(e.offset, e.len)?;
            let frames = Array4::from_shape_vec(e.shape, data)
                .map_err(|err| Error::Format(format!("video {}: {err}", e.id)))?;
            Ok(VideoRecord {
                id: e.id,
                frames,
                label: e.label,
                split: e.split,
            })
        })
        .collect()
}
