use clipdistill::augment::{
    apply_aug, apply_aug_frame, augment_clip, color_jitter, draw_aug_params, gaussian_blur, grayscale, hflip, AugConfig,
    AugParams,
};
use clipdistill::dataset::Clip;
use clipdistill::rng;
use ndarray::{Array3, Array4, Axis};
use proptest::prelude::*;
use rand::Rng;

fn random_frame(seed: u64, h: usize, w: usize) -> Array3<f32> {
    let mut r = rng::stream(seed, &[7]);
    Array3::from_shape_fn((h, w, 3), |_| r.random_range(0.0..1.0))
}

fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> Clip {
    let mut r = rng::stream(seed, &[8]);
    Clip {
        frames: Array4::from_shape_fn((t, h, w, 3), |_| r.random_range(0.0..1.0)),
        source_id: "v".into(),
        start: 0,
        stride: 1,
    }
}

/// Mirror padding that excludes the edge sample, written as explicit
/// bouncing rather than modular arithmetic.
fn mirror(mut i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i;
        }
    }
}

/// Dense 2-D convolution with an explicitly built 2-D Gaussian.
fn dense_blur(frame: &Array3<f32>, sigma: f64) -> Array3<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k2 = vec![vec![0.0f64; (2 * r + 1) as usize]; (2 * r + 1) as usize];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            k2[(dy + r) as usize][(dx + r) as usize] = v;
            total += v;
        }
    }
    let (h, w, c) = frame.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = mirror(y as i64 + dy, h as i64) as usize;
                let xx = mirror(x as i64 + dx, w as i64) as usize;
                acc += k2[(dy + r) as usize][(dx + r) as usize] / total * frame[[yy, xx, ch]] as f64;
            }
        }
        acc
    })
}

#[test]
fn blur_matches_dense_convolution() {
    for (seed, sigma) in [(1u64, 0.4f32), (2, 1.0), (3, 1.7), (4, 2.0)] {
        let f = random_frame(seed, 11, 9);
        let got = gaussian_blur(f.view(), sigma).unwrap();
        let want = dense_blur(&f, sigma as f64);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((*a as f64 - b).abs() < 1e-5, "sigma {sigma}: {a} vs {b}");
        }
    }
}

#[test]
fn blur_of_impulse_is_squared_center_tap() {
    let mut f = Array3::<f32>::zeros((15, 15, 3));
    f[[7, 7, 0]] = 1.0;
    let out = gaussian_blur(f.view(), 1.0).unwrap();
    let taps: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
    let center = 1.0 / taps.iter().sum::<f64>();
    assert!((out[[7, 7, 0]] as f64 - center * center).abs() < 1e-6);
    assert_eq!(out[[7, 7, 1]], 0.0);
}

#[test]
fn blur_mean_matches_dense_oracle_on_symmetric_image() {
    let (h, w) = (12, 10);
    let base = random_frame(9, h, w);
    let f = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (yy, xx) = (y.min(h - 1 - y), x.min(w - 1 - x));
        base[[yy, xx, c]]
    });
    let out = gaussian_blur(f.view(), 1.3).unwrap();
    let want = dense_blur(&f, 1.3);
    let m_want = want.iter().sum::<f64>() / want.len() as f64;
    let m_out = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
    assert!((m_want - m_out).abs() < 1e-5, "{m_want} vs {m_out}");
}

#[test]
fn empirical_rates_match_probabilities() {
    let cfg = AugConfig::default();
    let n = 10_000usize;
    let mut r = rng::stream(3, &[]);
    let (mut jit, mut gray, mut blur, mut flip) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..n {
        let p = draw_aug_params(&cfg, (32, 32), &mut r).unwrap();
        jit += p.apply_jitter as usize;
        gray += p.apply_gray as usize;
        blur += p.blur_sigma.is_some() as usize;
        flip += p.flip as usize;
        assert!(p.jitter_factors[3].abs() <= 0.05);
    }
    for (name, count, p) in [("jitter", jit, 0.8), ("gray", gray, 0.2), ("blur", blur, 0.5), ("flip", flip, 0.5)] {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count as f64 - n as f64 * p).abs() < 5.0 * sigma, "{name}: {count}/{n}");
    }
}

#[test]
fn zero_probabilities_disable_everything() {
    let cfg = AugConfig::default().geometry_only();
    let mut r = rng::stream(0, &[]);
    for _ in 0..100 {
        let p = draw_aug_params(&cfg, (32, 40), &mut r).unwrap();
        assert!(!p.flip && !p.apply_jitter && !p.apply_gray && p.blur_sigma.is_none());
    }
}

#[test]
fn infeasible_geometry_is_rejected() {
    let cfg = AugConfig::default();
    let p = AugParams::geometric(32, (10, 10, 28, 28));
    assert!(apply_aug_frame(random_frame(0, 32, 32).view(), &p).is_err());
    let bad = AugConfig {
        crop_size: 50,
        ..cfg
    };
    assert!(draw_aug_params(&bad, (32, 32), &mut rng::stream(0, &[])).is_err());
}

#[test]
fn jitter_edge_cases() {
    let f = random_frame(4, 6, 6);
    let id = color_jitter(f.view(), [1.0, 1.0, 1.0, 0.0]);
    assert!(id.iter().zip(f.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    let half = Array3::<f32>::from_elem((4, 4, 3), 0.5);
    let dim = color_jitter(half.view(), [0.8, 1.0, 1.0, 0.0]);
    assert!(dim.iter().all(|v| (v - 0.4).abs() < 1e-6));
    let gray = color_jitter(f.view(), [1.0, 1.0, 0.0, 0.0]);
    for px in gray.lanes(Axis(2)) {
        assert!((px[0] - px[1]).abs() < 1e-6 && (px[1] - px[2]).abs() < 1e-6);
    }
}

fn params_strategy() -> impl Strategy<Value = (u64, u64, usize)> {
    (0u64..10_000, 0u64..10_000, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn per_frame_equals_whole_clip((clip_seed, aug_seed, t) in params_strategy()) {
        let clip = random_clip(clip_seed, t, 20, 24);
        let cfg = AugConfig { resize_short_range: [20, 26], crop_size: 16, ..AugConfig::default() };
        let p = draw_aug_params(&cfg, (20, 24), &mut rng::stream(aug_seed, &[])).unwrap();
        let whole = apply_aug(&clip, &p).unwrap();
        prop_assert_eq!(whole.frames.shape(), &[t, 16, 16, 3]);
        for (i, frame) in clip.frames.outer_iter().enumerate() {
            let single = apply_aug_frame(frame, &p).unwrap();
            prop_assert_eq!(whole.frames.index_axis(Axis(0), i), single.view());
        }
        prop_assert!(whole.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_frames_stay_identical((clip_seed, aug_seed, t) in params_strategy()) {
        let f = random_frame(clip_seed, 20, 20);
        let frames = Array4::from_shape_fn((t, 20, 20, 3), |(_, y, x, c)| f[[y, x, c]]);
        let clip = Clip { frames, source_id: "v".into(), start: 0, stride: 1 };
        let cfg = AugConfig { resize_short_range: [20, 26], crop_size: 16, ..AugConfig::default() };
        let out = augment_clip(&clip, &cfg, &mut rng::stream(aug_seed, &[])).unwrap();
        for i in 1..t {
            prop_assert_eq!(out.frames.index_axis(Axis(0), i), out.frames.index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn augmentation_is_bit_deterministic((clip_seed, aug_seed, t) in params_strategy()) {
        let clip = random_clip(clip_seed, t, 20, 20);
        let cfg = AugConfig { resize_short_range: [20, 26], crop_size: 16, ..AugConfig::default() };
        let a = augment_clip(&clip, &cfg, &mut rng::stream(aug_seed, &[])).unwrap();
        let b = augment_clip(&clip, &cfg, &mut rng::stream(aug_seed, &[])).unwrap();
        prop_assert!(a.frames.iter().zip(b.frames.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn drawn_params_respect_ranges(seed in 0u64..100_000, h in 28usize..48, w in 28usize..48) {
        let cfg = AugConfig::default();
        let p = draw_aug_params(&cfg, (h, w), &mut rng::stream(seed, &[])).unwrap();
        let (nh, nw) = clipdistill::augment::resized_dims(h, w, p.resize_short);
        let (top, left, ch, cw) = p.crop_box;
        prop_assert!(top + ch <= nh && left + cw <= nw);
        prop_assert_eq!((ch, cw), (28, 28));
        if let Some(s) = p.blur_sigma {
            prop_assert!((0.1 - 1e-6..=2.0 + 1e-6).contains(&(s as f64)));
        }
        let [b, c, s, hue] = p.jitter_factors;
        for v in [b, c, s] {
            prop_assert!((0.8 - 1e-6..=1.2 + 1e-6).contains(&v));
        }
        prop_assert!(hue.abs() <= 0.05 + 1e-7);
    }

    #[test]
    fn grayscale_commutes_with_flip(seed in 0u64..10_000) {
        let f = random_frame(seed, 7, 9);
        let a = grayscale(hflip(f.view()).view());
        let b = hflip(grayscale(f.view()).view());
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn constant_frame_survives_blur(v in 0.0f32..1.0, sigma in 0.1f32..2.0) {
        let f = Array3::<f32>::from_elem((9, 9, 3), v);
        let out = gaussian_blur(f.view(), sigma).unwrap();
        prop_assert!(out.iter().all(|x| (x - v).abs() < 1e-6));
    }
}
