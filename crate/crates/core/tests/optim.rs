use clipdistill::encoders::Param;
use clipdistill::optim::{base_lr, lr_at, Lars, OptimConfig};
use clipdistill::rng;
use proptest::prelude::*;
use rand::Rng;

fn cfg(momentum: f64, wd: f64, trust: f64) -> OptimConfig {
    OptimConfig {
        momentum,
        weight_decay: wd,
        trust_coefficient: trust,
        ..OptimConfig::default()
    }
}

/// Closed-form single step from a given momentum buffer, one tensor.
fn oracle(w: &[f64], g: &[f64], u: &[f64], lr: f64, c: &OptimConfig, excluded: bool) -> (Vec<f64>, Vec<f64>) {
    let gp: Vec<f64> = w.iter().zip(g).map(|(w, g)| g + c.weight_decay * w).collect();
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gn = gp.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = if !excluded && wn > 0.0 && gn > 0.0 { c.trust_coefficient * wn / gn } else { 1.0 };
    let u2: Vec<f64> = u.iter().zip(&gp).map(|(u, g)| c.momentum * u + r * lr * g).collect();
    let w2: Vec<f64> = w.iter().zip(&u2).map(|(w, u)| w - u).collect();
    (w2, u2)
}

fn param(name: &str, value: Vec<f64>, grad: Vec<f64>) -> Param<f64> {
    let mut p = Param::new(name, vec![value.len()], value);
    p.grad = grad;
    p
}

#[test]
fn zero_gradient_weight_decay_case() {
    let c = cfg(0.0, 0.01, 0.001);
    let mut lars = Lars::new(c.clone());
    let mut p = param("w", vec![3.0, 4.0], vec![0.0, 0.0]);
    let ratios = lars.step(&mut [&mut p], 1.0).unwrap();
    assert!((ratios["w"] - 0.1).abs() < 1e-12);
    let (want, _) = oracle(&[3.0, 4.0], &[0.0, 0.0], &[0.0, 0.0], 1.0, &c, false);
    for (a, b) in p.value.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn excluded_names_get_unit_ratio() {
    let c = cfg(0.9, 1e-6, 0.001);
    let mut lars = Lars::new(c);
    let mut b = param("head.bias", vec![1.0, 2.0], vec![0.5, 0.5]);
    let mut n = param("block.bn.weight", vec![1.0, 2.0], vec![0.5, 0.5]);
    let mut w = param("head.weight", vec![1.0, 2.0], vec![0.5, 0.5]);
    let r = lars.step(&mut [&mut b, &mut n, &mut w], 0.1).unwrap();
    assert_eq!(r["head.bias"], 1.0);
    assert_eq!(r["block.bn.weight"], 1.0);
    assert!(r["head.weight"] != 1.0);
}

#[test]
fn multi_step_matches_oracle_with_momentum() {
    let c = cfg(0.9, 1e-4, 0.02);
    let mut lars = Lars::new(c.clone());
    let mut r = rng::stream(5, &[]);
    let mut w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut u = vec![0.0; 6];
    let mut p = param("w", w.clone(), vec![0.0; 6]);
    for step in 0..5 {
        let g: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        p.grad = g.clone();
        lars.step(&mut [&mut p], 0.3 + 0.1 * step as f64).unwrap();
        (w, u) = oracle(&w, &g, &u, 0.3 + 0.1 * step as f64, &c, false);
        for (a, b) in p.value.iter().zip(&w) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(lars.buffers["w"].len(), u.len());
    }
}

#[test]
fn non_finite_gradient_aborts_before_any_update() {
    let mut lars = Lars::new(cfg(0.9, 0.0, 0.001));
    let mut a = param("a", vec![1.0], vec![1.0]);
    let mut b = param("b", vec![1.0], vec![f64::NAN]);
    assert!(lars.step(&mut [&mut a, &mut b], 0.1).is_err());
    assert_eq!(a.value, vec![1.0]);
}

#[test]
fn schedule_landmarks() {
    let c = OptimConfig {
        base_lr_coefficient: 2.4,
        batch_size: 256,
        warmup_epochs: 2,
        total_epochs: 10,
        ..OptimConfig::default()
    };
    let spe = 5;
    let total = spe * 10;
    assert_eq!(lr_at(0, spe, &c).unwrap(), 0.0);
    assert!((lr_at(10, spe, &c).unwrap() - 2.4).abs() < 1e-12);
    let warm_left = lr_at(9, spe, &c).unwrap();
    assert!((warm_left - 2.4 * 9.0 / 10.0).abs() < 1e-12);
    // Cosine phase spans steps 10..=49, midpoint at 10 + 39/2.
    let mid = (lr_at(29, spe, &c).unwrap() + lr_at(30, spe, &c).unwrap()) / 2.0;
    assert!((mid - 1.2).abs() < 0.01);
    assert!(lr_at(total - 1, spe, &c).unwrap() <= 1e-12);
    assert!(lr_at(total, spe, &c).is_err());
    for (bs, want) in [(104, 0.975), (256, 2.4), (416, 3.9)] {
        assert!((base_lr(&OptimConfig { batch_size: bs, ..c.clone() }) - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lars_matches_closed_form(
        seed in 0u64..100_000, n in 1usize..12, momentum in 0.0f64..0.99, wd in 0.0f64..0.1,
        trust in 1e-4f64..0.1, lr in 0.0f64..3.0, excluded in any::<bool>(), zero_grad in any::<bool>(),
    ) {
        let c = cfg(momentum, wd, trust);
        let mut r = rng::stream(seed, &[]);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = if zero_grad { vec![0.0; n] } else { (0..n).map(|_| r.random_range(-2.0..2.0)).collect() };
        let u0: Vec<f64> = (0..n).map(|_| r.random_range(-0.1..0.1)).collect();
        let name = if excluded { "x.bias" } else { "x.weight" };
        let mut lars = Lars::new(c.clone());
        lars.buffers.insert(name.into(), u0.clone());
        let mut p = param(name, w.clone(), g.clone());
        lars.step(&mut [&mut p], lr).unwrap();
        let (w2, u2) = oracle(&w, &g, &u0, lr, &c, excluded);
        for (a, b) in p.value.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in lars.buffers[name].iter().zip(&u2) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_lars_is_plain_sgd(seed in 0u64..100_000, n in 1usize..10, lr in 0.0f64..2.0) {
        let c = OptimConfig {
            exclude_from_adaptation: vec!["".into()],
            ..cfg(0.0, 0.0, 0.001)
        };
        let mut r = rng::stream(seed, &[]);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut p = param("any", w.clone(), g.clone());
        Lars::new(c).step(&mut [&mut p], lr).unwrap();
        for ((a, w), g) in p.value.iter().zip(&w).zip(&g) {
            prop_assert!((a - (w - lr * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn visiting_order_does_not_matter(seed in 0u64..100_000) {
        let c = cfg(0.9, 1e-3, 0.01);
        let mut r = rng::stream(seed, &[]);
        let mk = |r: &mut rng::Rng, name: &str| {
            let v: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            param(name, v, g)
        };
        let (a, b, d) = (mk(&mut r, "a"), mk(&mut r, "b.bias"), mk(&mut r, "d"));
        let (mut a1, mut b1, mut d1) = (a.clone(), b.clone(), d.clone());
        let (mut a2, mut b2, mut d2) = (a, b, d);
        Lars::new(c.clone()).step(&mut [&mut a1, &mut b1, &mut d1], 0.5).unwrap();
        Lars::new(c).step(&mut [&mut d2, &mut a2, &mut b2], 0.5).unwrap();
        prop_assert_eq!((a1.value, b1.value, d1.value), (a2.value, b2.value, d2.value));
    }

    #[test]
    fn schedule_shape(spe in 1usize..20, warm in 0usize..5, extra in 1usize..20, coeff in 0.1f64..5.0) {
        let c = OptimConfig {
            base_lr_coefficient: coeff,
            batch_size: 256,
            warmup_epochs: warm,
            total_epochs: warm + extra,
            ..OptimConfig::default()
        };
        let total = spe * (warm + extra);
        let w = spe * warm;
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, spe, &c).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&v| (0.0..=coeff + 1e-12).contains(&v)));
        prop_assert!((lrs[w] - coeff).abs() < 1e-12);
        for s in 1..w {
            prop_assert!(lrs[s] > lrs[s - 1]);
        }
        for s in w + 1..total {
            prop_assert!(lrs[s] <= lrs[s - 1] + 1e-15);
        }
        if total - w > 1 {
            prop_assert!(lrs[total - 1] <= 1e-12);
        }
    }
}
