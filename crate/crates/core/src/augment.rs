//! Clip-consistent spatial augmentation.
//!
//! One [`AugParams`] draw is made per clip and applied identically to every
//! frame, in the fixed order resize → crop → flip → jitter (brightness →
//! contrast → saturation → hue) → grayscale → blur.

use ndarray::{s, Array3, Array4, ArrayView3, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Luminance weights used for grayscale, contrast and saturation.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Shorter side is resized to a uniform integer in `[lo, hi]`.
    pub resize_short_range: [usize; 2],
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub jitter_prob: f64,
    /// (brightness, contrast, saturation, hue)
    pub jitter_strengths: [f64; 4],
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
    pub interpolation: Interpolation,
}

impl Default for AugConfig {
    /// Desk-scale geometry (32..40 resize, 28 crop) with the reference
    /// probabilities and jitter strengths.
    fn default() -> Self {
        Self {
            resize_short_range: [32, 40],
            crop_size: 28,
            ..Self::full_scale()
        }
    }
}

impl AugConfig {
    /// The full-resolution recipe: resize 256..320, crop 224.
    pub fn full_scale() -> Self {
        Self {
            resize_short_range: [256, 320],
            crop_size: 224,
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strengths: [0.2, 0.2, 0.2, 0.05],
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: [0.1, 2.0],
            interpolation: Interpolation::Bilinear,
        }
    }

    /// Every probability disabled; only resize and crop remain.
    pub fn geometry_only(&self) -> Self {
        Self {
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name}={p} is not in [0, 1]")));
            }
        }
        let [lo, hi] = self.resize_short_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("augment.resize_short_range [{lo}, {hi}] is empty")));
        }
        if self.crop_size == 0 || self.crop_size > lo {
            return Err(Error::Config(format!(
                "augment.crop_size={} must be in [1, resize_short_range.lo={lo}]",
                self.crop_size
            )));
        }
        let [slo, shi] = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::Config(format!("augment.blur_sigma_range [{slo}, {shi}] must lie in (0, inf)")));
        }
        let [b, c, sat, h] = self.jitter_strengths;
        if [b, c, sat, h].iter().any(|v| !(*v >= 0.0)) || h > 0.5 {
            return Err(Error::Config("augment.jitter_strengths must be >= 0 with hue <= 0.5".into()));
        }
        Ok(())
    }
}

/// One clip's worth of augmentation decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub resize_short: usize,
    /// (top, left, height, width) in the resized frame.
    pub crop_box: (usize, usize, usize, usize),
    pub flip: bool,
    pub apply_jitter: bool,
    /// (brightness, contrast, saturation, hue)
    pub jitter_factors: [f32; 4],
    pub apply_gray: bool,
    pub blur_sigma: Option<f32>,
}

impl AugParams {
    /// Resize and crop only.
    pub fn geometric(resize_short: usize, crop_box: (usize, usize, usize, usize)) -> Self {
        Self {
            resize_short,
            crop_box,
            flip: false,
            apply_jitter: false,
            jitter_factors: [1.0, 1.0, 1.0, 0.0],
            apply_gray: false,
            blur_sigma: None,
        }
    }
}

/// Frame dimensions after scaling the shorter side to `short`.
pub fn resized_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    if h <= w {
        let nw = ((w as f64 * short as f64 / h as f64).round() as usize).max(short);
        (short, nw)
    } else {
        let nh = ((h as f64 * short as f64 / w as f64).round() as usize).max(short);
        (nh, short)
    }
}

/// Draw one parameter set for a clip with frames of `frame_shape = (h, w)`.
///
/// The number of random draws is fixed regardless of which branches fire.
pub fn draw_aug_params(cfg: &AugConfig, frame_shape: (usize, usize), rng: &mut Rng) -> Result<AugParams> {
    cfg.validate()?;
    let (h, w) = frame_shape;
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!("empty frame {h}x{w}")));
    }
    let [lo, hi] = cfg.resize_short_range;
    let resize_short = rng.random_range(lo..=hi);
    let (nh, nw) = resized_dims(h, w, resize_short);
    let c = cfg.crop_size;
    if nh < c || nw < c {
        return Err(Error::Geometry(format!("resized frame {nh}x{nw} cannot hold a {c}x{c} crop")));
    }
    let top = rng.random_range(0..=nh - c);
    let left = rng.random_range(0..=nw - c);
    let flip = rng.random_bool(cfg.hflip_prob);

    let apply_jitter = rng.random_bool(cfg.jitter_prob);
    let [bs, cs, ss, hs] = cfg.jitter_strengths;
    let mut factor = |strength: f64| -> f32 {
        let u: f64 = rng.random_range(-1.0..=1.0);
        (1.0 + strength * u).max(0.0) as f32
    };
    let (b, con, sat) = (factor(bs), factor(cs), factor(ss));
    let hue = (hs * rng.random_range(-1.0..=1.0)) as f32;

    let apply_gray = rng.random_bool(cfg.grayscale_prob);
    let apply_blur = rng.random_bool(cfg.blur_prob);
    let [slo, shi] = cfg.blur_sigma_range;
    let sigma = rng.random_range(slo..=shi) as f32;

    Ok(AugParams {
        resize_short,
        crop_box: (top, left, c, c),
        flip,
        apply_jitter,
        jitter_factors: [b, con, sat, hue],
        apply_gray,
        blur_sigma: apply_blur.then_some(sigma),
    })
}

/// Bilinear resize with half-pixel centers; identity when sizes match.
pub fn resize_bilinear(frame: ArrayView3<f32>, nh: usize, nw: usize) -> Array3<f32> {
    let (h, w, ch) = frame.dim();
    if (h, w) == (nh, nw) {
        return frame.to_owned();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, nh);
    let xs = taps(w, nw);
    let mut out = Array3::<f32>::zeros((nh, nw, ch));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let top = frame[[y0, x0, c]] * (1.0 - fx) + frame[[y0, x1, c]] * fx;
                let bot = frame[[y1, x0, c]] * (1.0 - fx) + frame[[y1, x1, c]] * fx;
                out[[oy, ox, c]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn hflip(frame: ArrayView3<f32>) -> Array3<f32> {
    frame.slice(s![.., ..;-1, ..]).to_owned()
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
}

pub fn grayscale(frame: ArrayView3<f32>) -> Array3<f32> {
    let mut out = frame.to_owned();
    for mut px in out.lanes_mut(Axis(2)) {
        let y = luma(px[0], px[1], px[2]);
        px.fill(y);
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, then hue; clamped to `[0, 1]` once at
/// the end. `factors = [b, c, s, h]` where `h` is a fraction of a full turn.
pub fn color_jitter(frame: ArrayView3<f32>, factors: [f32; 4]) -> Array3<f32> {
    let [b, c, sat, hue] = factors;
    let mut out = frame.to_owned();
    if b != 1.0 {
        out.mapv_inplace(|v| v * b);
    }
    if c != 1.0 {
        let n = (out.len() / 3) as f64;
        let mean = out
            .lanes(Axis(2))
            .into_iter()
            .map(|px| luma(px[0], px[1], px[2]) as f64)
            .sum::<f64>()
            / n;
        let mean = mean as f32;
        out.mapv_inplace(|v| c * v + (1.0 - c) * mean);
    }
    if sat != 1.0 {
        for mut px in out.lanes_mut(Axis(2)) {
            let y = luma(px[0], px[1], px[2]);
            px.mapv_inplace(|v| sat * v + (1.0 - sat) * y);
        }
    }
    if hue != 0.0 {
        for mut px in out.lanes_mut(Axis(2)) {
            let (r, g, bl) = (px[0].clamp(0.0, 1.0), px[1].clamp(0.0, 1.0), px[2].clamp(0.0, 1.0));
            let (h, s, v) = rgb_to_hsv(r, g, bl);
            let (r, g, bl) = hsv_to_rgb(h + hue, s, v);
            px[0] = r;
            px[1] = g;
            px[2] = bl;
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Result<Vec<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("blur sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| (v / total) as f32).collect())
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(frame: ArrayView3<f32>, sigma: f32) -> Result<Array3<f32>> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let (h, w, ch) = frame.dim();
    let mut tmp = Array3::<f32>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = reflect_index(x as i64 + k as i64 - radius, w);
                    acc += wgt * frame[[y, xx, c]];
                }
                tmp[[y, x, c]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for (k, wgt) in kernel.iter().enumerate() {
                    let yy = reflect_index(y as i64 + k as i64 - radius, h);
                    acc += wgt * tmp[[yy, x, c]];
                }
                out[[y, x, c]] = acc;
            }
        }
    }
    Ok(out)
}

/// Augment a single frame. Used by [`apply_aug`] for every frame of a clip.
pub fn apply_aug_frame(frame: ArrayView3<f32>, params: &AugParams) -> Result<Array3<f32>> {
    let (h, w, _) = frame.dim();
    let (nh, nw) = resized_dims(h, w, params.resize_short);
    let (top, left, ch, cw) = params.crop_box;
    if top + ch > nh || left + cw > nw {
        return Err(Error::Geometry(format!(
            "crop {ch}x{cw} at ({top}, {left}) exceeds resized frame {nh}x{nw}"
        )));
    }
    let resized = resize_bilinear(frame, nh, nw);
    let mut out = resized.slice(s![top..top + ch, left..left + cw, ..]).to_owned();
    if params.flip {
        out = hflip(out.view());
    }
    if params.apply_jitter {
        out = color_jitter(out.view(), params.jitter_factors);
    }
    if params.apply_gray {
        out = grayscale(out.view());
    }
    if let Some(sigma) = params.blur_sigma {
        out = gaussian_blur(out.view(), sigma)?;
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Apply one parameter set to every frame of `clip`.
pub fn apply_aug(clip: &Clip, params: &AugParams) -> Result<Clip> {
    let (_, _, ch, cw) = params.crop_box;
    let t = clip.num_frames();
    let mut frames = Array4::<f32>::zeros((t, ch, cw, 3));
    for (i, frame) in clip.frames.outer_iter().enumerate() {
        let out = apply_aug_frame(frame, params)?;
        Zip::from(frames.index_axis_mut(Axis(0), i))
            .and(&out)
            .for_each(|d, &s| *d = s);
    }
    Ok(Clip {
        frames,
        source_id: clip.source_id.clone(),
        start: clip.start,
        stride: clip.stride,
    })
}

/// Draw parameters for `clip` and apply them.
pub fn augment_clip(clip: &Clip, cfg: &AugConfig, rng: &mut Rng) -> Result<Clip> {
    let params = draw_aug_params(cfg, (clip.height(), clip.width()), rng)?;
    apply_aug(clip, &params)
}
