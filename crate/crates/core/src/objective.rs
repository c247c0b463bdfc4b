//! Cosine-distance prediction losses.
//!
//! All losses take predictions `q` (online side) and targets `k` as
//! `[frames, dim]` matrices and return gradients for `q` only: targets are
//! treated as constants, so there is no code path that could produce a
//! gradient for them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetReduction {
    /// Per-target losses are added; one target reduces to the plain loss.
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Average frames before comparing (otherwise frame t matches frame t).
    pub temporal_pool: bool,
    /// Names of the target adapters that receive a prediction head.
    pub targets: Vec<String>,
    pub aux_ssl: bool,
    pub aux_weight: f64,
    pub target_reduction: TargetReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temporal_pool: true,
            targets: vec!["oracle".into()],
            aux_ssl: false,
            aux_weight: 0.0,
            target_reduction: TargetReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("loss.targets must not be empty".into()));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::Config(format!("loss.aux_weight={} must be >= 0", self.aux_weight)));
        }
        if self.aux_weight > 0.0 && !self.aux_ssl {
            return Err(Error::Config("loss.aux_weight > 0 requires loss.aux_ssl".into()));
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `2 − 2·cos(q, k)`, in `[0, 4]`.
pub fn cosine_distance(q: ArrayView1<f64>, k: ArrayView1<f64>) -> Result<f64> {
    cosine_distance_grad(q, k).map(|(d, _)| d)
}

/// Cosine distance and its gradient with respect to `q`.
pub fn cosine_distance_grad(q: ArrayView1<f64>, k: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if q.len() != k.len() {
        return Err(Error::Shape(format!("prediction dim {} vs target dim {}", q.len(), k.len())));
    }
    let (nq, nk) = (norm(q), norm(k));
    if !(nq > 0.0) {
        return Err(Error::ZeroNorm("prediction"));
    }
    if !(nk > 0.0) {
        return Err(Error::ZeroNorm("target"));
    }
    if !nq.is_finite() || !nk.is_finite() {
        return Err(Error::NonFinite("cosine distance input".into()));
    }
    let qn = &q / nq;
    let kn = &k / nk;
    let cos = qn.dot(&kn).clamp(-1.0, 1.0);
    let dist = (2.0 - 2.0 * cos).clamp(0.0, 4.0);
    // d/dq [−2 q̂·k̂] = −2/‖q‖ (k̂ − (q̂·k̂) q̂)
    let grad = (&kn - &(&qn * cos)) * (-2.0 / nq);
    Ok((dist, grad))
}

/// Arithmetic mean over the frame axis.
pub fn temporal_pool(features: ArrayView2<f64>) -> Result<Array1<f64>> {
    if features.nrows() == 0 {
        return Err(Error::Shape("cannot pool zero frames".into()));
    }
    Ok(features.mean_axis(Axis(0)).expect("non-empty"))
}

/// Single-target loss and the gradient for every view's predictions.
pub fn iboot_loss_grad(q_views: &[ArrayView2<f64>], k_ref: ArrayView2<f64>, cfg: &LossConfig) -> Result<(f64, Vec<Array2<f64>>)> {
    if q_views.is_empty() {
        return Err(Error::Shape("no online views".into()));
    }
    for q in q_views {
        if q.dim() != k_ref.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?}", q.dim(), k_ref.dim())));
        }
    }
    let frames = k_ref.nrows();
    if frames == 0 {
        return Err(Error::Shape("clips with zero frames".into()));
    }
    let v = q_views.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(q_views.len());
    if cfg.temporal_pool {
        let pk = temporal_pool(k_ref)?;
        for q in q_views {
            let (d, g) = cosine_distance_grad(temporal_pool(*q)?.view(), pk.view())?;
            total += d / v;
            let row = g / (v * frames as f64);
            let mut gq = Array2::zeros(q.raw_dim());
            for mut r in gq.rows_mut() {
                r.assign(&row);
            }
            grads.push(gq);
        }
    } else {
        let scale = v * frames as f64;
        for q in q_views {
            let mut gq = Array2::zeros(q.raw_dim());
            for (t, mut gr) in gq.rows_mut().into_iter().enumerate() {
                let (d, g) = cosine_distance_grad(q.row(t), k_ref.row(t))?;
                total += d / scale;
                gr.assign(&(g / scale));
            }
            grads.push(gq);
        }
    }
    Ok((total, grads))
}

/// Mean over online views of the cosine distance to the reference features,
/// pooled over frames or matched frame by frame.
pub fn iboot_loss(q_views: &[ArrayView2<f64>], k_ref: ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    iboot_loss_grad(q_views, k_ref, cfg).map(|(l, _)| l)
}

/// Per-target breakdown of an ensemble loss.
#[derive(Clone, Debug)]
pub struct EnsembleLoss {
    pub total: f64,
    pub per_target: Vec<f64>,
    /// `grads[target][view]`
    pub grads: Vec<Vec<Array2<f64>>>,
}

/// Sum (or mean, per config) over targets of the single-target loss.
/// `q_sets[i]` are the predictions of head `i` for every view.
pub fn ensemble_loss_grad(q_sets: &[Vec<ArrayView2<f64>>], k_set: &[ArrayView2<f64>], cfg: &LossConfig) -> Result<EnsembleLoss> {
    if q_sets.len() != k_set.len() || k_set.len() != cfg.targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets, {} target features, {} configured targets",
            q_sets.len(),
            k_set.len(),
            cfg.targets.len()
        )));
    }
    let scale = match cfg.target_reduction {
        TargetReduction::Sum => 1.0,
        TargetReduction::Mean => 1.0 / k_set.len() as f64,
    };
    let mut per_target = Vec::with_capacity(k_set.len());
    let mut grads = Vec::with_capacity(k_set.len());
    for (qs, k) in q_sets.iter().zip(k_set) {
        let (l, g) = iboot_loss_grad(qs, *k, cfg)?;
        per_target.push(l);
        grads.push(if scale == 1.0 { g } else { g.into_iter().map(|x| x * scale).collect() });
    }
    let total = per_target.iter().sum::<f64>() * scale;
    Ok(EnsembleLoss {
        total,
        per_target,
        grads,
    })
}

pub fn ensemble_loss(q_sets: &[Vec<ArrayView2<f64>>], k_set: &[ArrayView2<f64>], cfg: &LossConfig) -> Result<f64> {
    ensemble_loss_grad(q_sets, k_set, cfg).map(|e| e.total)
}

/// Same form as [`iboot_loss_grad`] against the momentum branch's
/// reference features. Unweighted; the caller applies `aux_weight`.
pub fn aux_ssl_loss_grad(q_views: &[ArrayView2<f64>], k_momentum: ArrayView2<f64>, cfg: &LossConfig) -> Result<(f64, Vec<Array2<f64>>)> {
    if !cfg.aux_ssl {
        return Err(Error::Config("auxiliary loss requested with loss.aux_ssl = false".into()));
    }
    iboot_loss_grad(q_views, k_momentum, cfg)
}

pub fn aux_ssl_loss(q_views: &[ArrayView2<f64>], k_momentum: ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    aux_ssl_loss_grad(q_views, k_momentum, cfg).map(|(l, _)| l)
}

/// `ensemble + aux_weight · aux`.
pub fn total_loss(ensemble: f64, aux: Option<f64>, cfg: &LossConfig) -> f64 {
    ensemble + aux.map_or(0.0, |a| cfg.aux_weight * a)
}
