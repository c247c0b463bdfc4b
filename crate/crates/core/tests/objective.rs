use clipdistill::dataset::Clip;
use clipdistill::encoders::{EncoderConfig, MomentumNet, OnlineNet};
use clipdistill::objective::{
    aux_ssl_loss, cosine_distance, ensemble_loss, ensemble_loss_grad, iboot_loss, iboot_loss_grad, temporal_pool,
    total_loss, LossConfig, TargetReduction,
};
use clipdistill::rng;
use ndarray::{Array1, Array2, Array4, ArrayView2};
use proptest::prelude::*;
use rand::Rng;

fn cfg(pool: bool, targets: usize) -> LossConfig {
    LossConfig {
        temporal_pool: pool,
        targets: (0..targets).map(|i| format!("t{i}")).collect(),
        ..LossConfig::default()
    }
}

fn rand_mat(r: &mut rng::Rng, t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |_| r.random_range(-1.0..1.0))
}

/// Independent cosine distance: explicit loops, no shared helpers.
fn cos_dist(q: &[f64], k: &[f64]) -> f64 {
    let (mut qk, mut qq, mut kk) = (0.0, 0.0, 0.0);
    for (a, b) in q.iter().zip(k) {
        qk += a * b;
        qq += a * a;
        kk += b * b;
    }
    2.0 - 2.0 * qk / (qq.sqrt() * kk.sqrt())
}

fn mean_rows(m: &Array2<f64>) -> Vec<f64> {
    let t = m.nrows() as f64;
    (0..m.ncols()).map(|j| m.column(j).sum() / t).collect()
}

fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..16).prop_flat_map(|d| {
        (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
        )
    })
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn distance_in_range_and_matches_oracle((q, k) in vec_strategy()) {
        prop_assume!(nonzero(&q) && nonzero(&k));
        let d = cosine_distance(Array1::from(q.clone()).view(), Array1::from(k.clone()).view()).unwrap();
        prop_assert!((0.0..=4.0).contains(&d));
        prop_assert!((d - cos_dist(&q, &k)).abs() < 1e-12);
    }

    #[test]
    fn power_of_two_scaling_is_bit_exact((q, k) in vec_strategy(), ea in -20i32..20, eb in -20i32..20) {
        prop_assume!(nonzero(&q) && nonzero(&k));
        let (q, k) = (Array1::from(q), Array1::from(k));
        let base = cosine_distance(q.view(), k.view()).unwrap();
        let scaled = cosine_distance((&q * 2f64.powi(ea)).view(), (&k * 2f64.powi(eb)).view()).unwrap();
        prop_assert_eq!(base.to_bits(), scaled.to_bits());
    }

    #[test]
    fn arbitrary_positive_scaling_is_invariant((q, k) in vec_strategy(), a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        prop_assume!(nonzero(&q) && nonzero(&k));
        let (q, k) = (Array1::from(q), Array1::from(k));
        let base = cosine_distance(q.view(), k.view()).unwrap();
        let scaled = cosine_distance((&q * a).view(), (&k * b).view()).unwrap();
        prop_assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences(
        seed in 0u64..100_000, t in 1usize..5, d in 1usize..17, views in 1usize..3, pool in any::<bool>(),
    ) {
        let mut r = rng::stream(seed, &[]);
        let qs: Vec<Array2<f64>> = (0..views).map(|_| rand_mat(&mut r, t, d)).collect();
        let k = rand_mat(&mut r, t, d);
        let c = cfg(pool, 1);
        let qv: Vec<ArrayView2<f64>> = qs.iter().map(|q| q.view()).collect();
        let (_, grads) = iboot_loss_grad(&qv, k.view(), &c).unwrap();
        prop_assert_eq!(grads.len(), views);
        let eps = 1e-5;
        for v in 0..views {
            for idx in [(0, 0), (t - 1, d - 1), (t / 2, d / 2)] {
                let eval = |delta: f64| {
                    let mut p = qs.clone();
                    p[v][idx] += delta;
                    let pv: Vec<ArrayView2<f64>> = p.iter().map(|q| q.view()).collect();
                    iboot_loss(&pv, k.view(), &c).unwrap()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = grads[v][idx];
                let err = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-6);
                prop_assert!(err < 1e-4 || (numeric - a).abs() < 1e-9, "{} vs {}", a, numeric);
            }
        }
    }

    #[test]
    fn ensemble_is_sum_of_parts(seed in 0u64..100_000, t in 1usize..5, pool in any::<bool>()) {
        let mut r = rng::stream(seed, &[]);
        let (qa, qb) = ([rand_mat(&mut r, t, 6), rand_mat(&mut r, t, 6)], [rand_mat(&mut r, t, 9), rand_mat(&mut r, t, 9)]);
        let (ka, kb) = (rand_mat(&mut r, t, 6), rand_mat(&mut r, t, 9));
        let va: Vec<_> = qa.iter().map(|q| q.view()).collect();
        let vb: Vec<_> = qb.iter().map(|q| q.view()).collect();
        let c2 = cfg(pool, 2);
        let total = ensemble_loss(&[va.clone(), vb.clone()], &[ka.view(), kb.view()], &c2).unwrap();
        let la = iboot_loss(&va, ka.view(), &c2).unwrap();
        let lb = iboot_loss(&vb, kb.view(), &c2).unwrap();
        prop_assert!((total - la - lb).abs() < 1e-10);
        prop_assert!((0.0..=8.0).contains(&total));
        let single = ensemble_loss(&[va.clone()], &[ka.view()], &cfg(pool, 1)).unwrap();
        prop_assert_eq!(single, la);
        let mean = ensemble_loss(&[va, vb], &[ka.view(), kb.view()], &LossConfig { target_reduction: TargetReduction::Mean, ..c2 }).unwrap();
        prop_assert!((mean - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn static_frames_make_pooling_irrelevant(seed in 0u64..100_000, t in 1usize..6, d in 1usize..10) {
        let mut r = rng::stream(seed, &[]);
        let (qrow, krow) = (rand_mat(&mut r, 1, d), rand_mat(&mut r, 1, d));
        let q = Array2::from_shape_fn((t, d), |(_, j)| qrow[[0, j]]);
        let k = Array2::from_shape_fn((t, d), |(_, j)| krow[[0, j]]);
        let pooled = iboot_loss(&[q.view()], k.view(), &cfg(true, 1)).unwrap();
        let framewise = iboot_loss(&[q.view()], k.view(), &cfg(false, 1)).unwrap();
        prop_assert!((pooled - framewise).abs() < 1e-12);
    }
}

#[test]
fn loss_matches_direct_evaluation() {
    let mut r = rng::stream(1, &[]);
    let qs = [rand_mat(&mut r, 4, 7), rand_mat(&mut r, 4, 7)];
    let k = rand_mat(&mut r, 4, 7);
    let qv: Vec<_> = qs.iter().map(|q| q.view()).collect();
    let pooled = iboot_loss(&qv, k.view(), &cfg(true, 1)).unwrap();
    let want: f64 = qs.iter().map(|q| cos_dist(&mean_rows(q), &mean_rows(&k))).sum::<f64>() / 2.0;
    assert!((pooled - want).abs() < 1e-12);
    let framewise = iboot_loss(&qv, k.view(), &cfg(false, 1)).unwrap();
    let mut want = 0.0;
    for q in &qs {
        for t in 0..4 {
            want += cos_dist(&q.row(t).to_vec(), &k.row(t).to_vec()) / 8.0;
        }
    }
    assert!((framewise - want).abs() < 1e-12);
}

#[test]
fn gradients_exist_only_for_predictions() {
    let mut r = rng::stream(2, &[]);
    let q = rand_mat(&mut r, 3, 5);
    let k = rand_mat(&mut r, 3, 5);
    let k_before = k.clone();
    let c = cfg(false, 1);
    let e = ensemble_loss_grad(&[vec![q.view()]], &[k.view()], &c).unwrap();
    assert_eq!(e.grads.len(), 1);
    assert_eq!(e.grads[0].len(), 1);
    assert_eq!(e.grads[0][0].dim(), q.dim());
    assert_eq!(k, k_before);
}

#[test]
fn pooling_examples() {
    let m = ndarray::array![[2.0, 0.0], [0.0, 2.0]];
    assert_eq!(temporal_pool(m.view()).unwrap().to_vec(), vec![1.0, 1.0]);
    assert!(temporal_pool(Array2::<f64>::zeros((0, 3)).view()).is_err());
}

#[test]
fn aux_term_against_fresh_momentum_copy() {
    let enc = EncoderConfig {
        widths: vec![4, 6],
        projector_hidden: 8,
        projector_dim: 5,
        predictor_hidden: 8,
        ..Default::default()
    };
    let mut online = OnlineNet::<f64>::new(&enc, &[("t0".into(), 3)], true).unwrap();
    let mut momentum = MomentumNet::from_online(&online, 0.0).unwrap();
    momentum.update_from(&online).unwrap();
    let mut r = rng::stream(3, &[]);
    let clip = Clip {
        frames: Array4::from_shape_fn((4, 10, 10, 3), |_| r.random_range(0.0..1.0)),
        source_id: "v".into(),
        start: 0,
        stride: 1,
    };
    let (out, _) = online.forward_train(&[&clip]).unwrap();
    let km = momentum.project_train(&[&clip]).unwrap();
    assert_eq!(km, out.projections);
    let aux_pred = out.aux_predictions.unwrap();
    let c = LossConfig {
        targets: vec!["t0".into()],
        aux_ssl: true,
        aux_weight: 0.3,
        ..LossConfig::default()
    };
    let aux = aux_ssl_loss(&[aux_pred.view()], km.view(), &c).unwrap();
    let want = cos_dist(&mean_rows(&aux_pred), &mean_rows(&out.projections));
    assert!((aux - want).abs() < 1e-12);
    assert!((0.0..=4.0).contains(&aux));
    assert_eq!(total_loss(1.5, Some(aux), &LossConfig { aux_weight: 0.0, ..c.clone() }), 1.5);
    assert!((total_loss(1.5, Some(aux), &c) - (1.5 + 0.3 * aux)).abs() < 1e-15);
    assert!(aux_ssl_loss(&[aux_pred.view()], km.view(), &LossConfig::default()).is_err());
}
