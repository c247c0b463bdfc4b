//! Minimal layer library with explicit forward caches and backward passes.
//!
//! Activations of a batch of clips are stored as a row-major matrix whose
//! rows are indexed by `(clip, frame, y, x)` and whose columns are channels.
//! Every layer is generic over the float type so gradients can be verified
//! in `f64` while training runs in `f32`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, running stats updated.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![F::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    /// Kaiming-normal init with the given fan-in.
    pub fn kaiming(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| F::of(normal.sample(rng))).collect();
        Self::new(name, shape, value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    /// View as a matrix whose last axis is the final shape dimension.
    pub fn matrix(&self) -> ArrayView2<'_, F> {
        let cols = *self.shape.last().expect("non-scalar param");
        ArrayView2::from_shape((self.numel() / cols, cols), &self.value).expect("contiguous")
    }

    fn accumulate(&mut self, g: impl IntoIterator<Item = F>) {
        for (acc, v) in self.grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
}

/// Batch activation: `data` is `[b*t*h*w, channels]`.
#[derive(Clone, Debug)]
pub struct Act<F> {
    pub data: Array2<F>,
    /// (batch, frames, height, width)
    pub dims: [usize; 4],
}

impl<F: Scalar> Act<F> {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d<F> {
    /// Shape `[kt, kh, kw, cin, cout]`.
    pub weight: Param<F>,
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub ks: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad_s: usize,
}

pub struct ConvCache<F> {
    cols: Array2<F>,
    in_dims: [usize; 4],
    out_dims: [usize; 4],
}

impl<F: Scalar> Conv3d<F> {
    /// Temporal stride is always 1 and temporal padding `kt / 2`, so the
    /// number of frames is preserved.
    pub fn new(name: &str, cin: usize, cout: usize, kt: usize, ks: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = kt * ks * ks * cin;
        Self {
            weight: Param::kaiming(format!("{name}.weight"), vec![kt, ks, ks, cin, cout], fan_in, rng),
            cin,
            cout,
            kt,
            ks,
            stride,
            pad_t: kt / 2,
            pad_s: ks / 2,
        }
    }

    pub fn out_dims(&self, d: [usize; 4]) -> [usize; 4] {
        let so = |n: usize| (n + 2 * self.pad_s - self.ks) / self.stride + 1;
        [d[0], d[1] + 2 * self.pad_t + 1 - self.kt, so(d[2]), so(d[3])]
    }

    fn im2col(&self, x: &Act<F>) -> (Array2<F>, [usize; 4]) {
        let [b, t, h, w] = x.dims;
        let out = self.out_dims(x.dims);
        let [_, to, ho, wo] = out;
        let c = self.cin;
        let k = self.kt * self.ks * self.ks * c;
        let mut cols = Array2::<F>::zeros((b * to * ho * wo, k));
        let src = x.data.as_slice().expect("contiguous activation");
        let dst = cols.as_slice_mut().expect("fresh array");
        let mut row = 0;
        for bi in 0..b {
            for ti in 0..to {
                for yi in 0..ho {
                    for xi in 0..wo {
                        let base = row * k;
                        let mut col = 0;
                        for dt in 0..self.kt {
                            let tt = (ti + dt) as isize - self.pad_t as isize;
                            for dy in 0..self.ks {
                                let yy = (yi * self.stride + dy) as isize - self.pad_s as isize;
                                for dx in 0..self.ks {
                                    let xx = (xi * self.stride + dx) as isize - self.pad_s as isize;
                                    let inside = tt >= 0
                                        && (tt as usize) < t
                                        && yy >= 0
                                        && (yy as usize) < h
                                        && xx >= 0
                                        && (xx as usize) < w;
                                    if inside {
                                        let r = ((bi * t + tt as usize) * h + yy as usize) * w + xx as usize;
                                        dst[base + col..base + col + c].copy_from_slice(&src[r * c..(r + 1) * c]);
                                    }
                                    col += c;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        (cols, out)
    }

    fn col2im(&self, dcols: &Array2<F>, in_dims: [usize; 4], out_dims: [usize; 4]) -> Array2<F> {
        let [b, t, h, w] = in_dims;
        let [_, to, ho, wo] = out_dims;
        let c = self.cin;
        let k = dcols.ncols();
        let mut dx = Array2::<F>::zeros((b * t * h * w, c));
        let dst = dx.as_slice_mut().expect("fresh array");
        let src = dcols.as_slice().expect("contiguous");
        let mut row = 0;
        for bi in 0..b {
            for ti in 0..to {
                for yi in 0..ho {
                    for xi in 0..wo {
                        let base = row * k;
                        let mut col = 0;
                        for dt in 0..self.kt {
                            let tt = (ti + dt) as isize - self.pad_t as isize;
                            for dy in 0..self.ks {
                                let yy = (yi * self.stride + dy) as isize - self.pad_s as isize;
                                for dx_ in 0..self.ks {
                                    let xx = (xi * self.stride + dx_) as isize - self.pad_s as isize;
                                    let inside = tt >= 0
                                        && (tt as usize) < t
                                        && yy >= 0
                                        && (yy as usize) < h
                                        && xx >= 0
                                        && (xx as usize) < w;
                                    if inside {
                                        let r = ((bi * t + tt as usize) * h + yy as usize) * w + xx as usize;
                                        for ci in 0..c {
                                            dst[r * c + ci] += src[base + col + ci];
                                        }
                                    }
                                    col += c;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Act<F>) -> Result<(Act<F>, ConvCache<F>)> {
        if x.channels() != self.cin {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name,
                self.cin,
                x.channels()
            )));
        }
        let (cols, out_dims) = self.im2col(x);
        let y = cols.dot(&self.weight.matrix());
        Ok((
            Act { data: y, dims: out_dims },
            ConvCache {
                cols,
                in_dims: x.dims,
                out_dims,
            },
        ))
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, cache: ConvCache<F>, dy: &Array2<F>, need_input_grad: bool) -> Option<Array2<F>> {
        let dw = cache.cols.t().dot(dy);
        self.weight.accumulate(dw.iter().copied());
        need_input_grad.then(|| {
            let dcols = dy.dot(&self.weight.matrix().t());
            self.col2im(&dcols, cache.in_dims, cache.out_dims)
        })
    }
}

/// Per-channel normalization over all rows of the batch matrix.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

pub struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Vec<F>,
    mean: Vec<F>,
    var: Vec<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), vec![channels], F::one()),
            bias: Param::filled(format!("{name}.bias"), vec![channels], F::zero()),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: F::of(0.1),
            eps: F::of(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>, mode: Mode) -> Result<(Array2<F>, BnCache<F>)> {
        let c = self.weight.numel();
        if x.ncols() != c {
            return Err(Error::Shape(format!("{}: expected {c} channels, got {}", self.weight.name, x.ncols())));
        }
        let n = F::of(x.nrows() as f64);
        let (mean, var) = match mode {
            Mode::Train => {
                if x.nrows() == 0 {
                    return Err(Error::Shape("batch norm over an empty batch".into()));
                }
                let mean: Vec<F> = x.sum_axis(Axis(0)).iter().map(|&s| s / n).collect();
                let mut var = vec![F::zero(); c];
                for row in x.rows() {
                    for ((v, &xi), &m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                        let d = xi - m;
                        *v += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        for mut row in xhat.rows_mut() {
            for ((xi, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *xi = (*xi - m) * is;
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for ((yi, &g), &b) in row.iter_mut().zip(&self.weight.value).zip(&self.bias.value) {
                *yi = *yi * g + b;
            }
        }
        Ok((y, BnCache { xhat, inv_std, mean, var }))
    }

    /// Fold a training batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache<F>) {
        let n = F::of(cache.xhat.nrows() as f64);
        let unbias = if n > F::one() { n / (n - F::one()) } else { F::one() };
        let m = self.momentum;
        for i in 0..self.running_mean.len() {
            self.running_mean[i] = (F::one() - m) * self.running_mean[i] + m * cache.mean[i];
            self.running_var[i] = (F::one() - m) * self.running_var[i] + m * cache.var[i] * unbias;
        }
    }

    /// Backward through the batch-statistics path.
    pub fn backward(&mut self, cache: BnCache<F>, dy: &Array2<F>) -> Array2<F> {
        let c = self.weight.numel();
        let n = F::of(dy.nrows() as f64);
        let mut sum_dy = vec![F::zero(); c];
        let mut sum_dy_xhat = vec![F::zero(); c];
        for (dyr, xr) in dy.rows().into_iter().zip(cache.xhat.rows()) {
            for j in 0..c {
                sum_dy[j] += dyr[j];
                sum_dy_xhat[j] += dyr[j] * xr[j];
            }
        }
        self.weight.accumulate(sum_dy_xhat.iter().copied());
        self.bias.accumulate(sum_dy.iter().copied());
        let mut dx = Array2::<F>::zeros(dy.raw_dim());
        for ((mut dxr, dyr), xr) in dx.rows_mut().into_iter().zip(dy.rows()).zip(cache.xhat.rows()) {
            for j in 0..c {
                let g = self.weight.value[j];
                dxr[j] = g * cache.inv_std[j] / n * (n * dyr[j] - sum_dy[j] - xr[j] * sum_dy_xhat[j]);
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Linear<F> {
    /// Shape `[in, out]`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::kaiming(format!("{name}.weight"), vec![fan_in, fan_out], fan_in, rng),
            bias: Param::filled(format!("{name}.bias"), vec![fan_out], F::zero()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "{}: expected {} inputs, got {}",
                self.weight.name,
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight.matrix());
        for mut row in y.rows_mut() {
            for (yi, &b) in row.iter_mut().zip(&self.bias.value) {
                *yi += b;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let dw = x.t().dot(dy);
        self.weight.accumulate(dw.iter().copied());
        self.bias.accumulate(dy.sum_axis(Axis(0)).iter().copied());
        dy.dot(&self.weight.matrix().t())
    }
}

pub fn relu<F: Scalar>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<F: Scalar>(out: &Array2<F>, dy: &mut Array2<F>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
}

/// Two-layer perceptron: linear → batch norm → ReLU → linear.
#[derive(Clone, Debug)]
pub struct Mlp<F> {
    pub fc0: Linear<F>,
    pub bn0: BatchNorm<F>,
    pub fc1: Linear<F>,
}

pub struct MlpCache<F> {
    x: Array2<F>,
    bn: BnCache<F>,
    hidden: Array2<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(name: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            fc0: Linear::new(&format!("{name}.fc0"), input, hidden, rng),
            bn0: BatchNorm::new(&format!("{name}.bn0"), hidden),
            fc1: Linear::new(&format!("{name}.fc1"), hidden, output, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn forward(&self, x: &Array2<F>, mode: Mode) -> Result<(Array2<F>, MlpCache<F>)> {
        let pre = self.fc0.forward(x)?;
        let (mut hidden, bn) = self.bn0.forward(&pre, mode)?;
        relu(&mut hidden);
        let y = self.fc1.forward(&hidden)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                bn,
                hidden,
            },
        ))
    }

    pub fn update_running(&mut self, cache: &MlpCache<F>) {
        self.bn0.update_running(&cache.bn);
    }

    pub fn backward(&mut self, cache: MlpCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut dh = self.fc1.backward(&cache.hidden, dy);
        relu_backward(&cache.hidden, &mut dh);
        let dpre = self.bn0.backward(cache.bn, &dh);
        self.fc0.backward(&cache.x, &dpre)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![
            &self.fc0.weight,
            &self.fc0.bias,
            &self.bn0.weight,
            &self.bn0.bias,
            &self.fc1.weight,
            &self.fc1.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![
            &mut self.fc0.weight,
            &mut self.fc0.bias,
            &mut self.bn0.weight,
            &mut self.bn0.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<F>)> {
        let name = self.bn0.weight.name.trim_end_matches(".weight").to_string();
        vec![
            (format!("{name}.running_mean"), &mut self.bn0.running_mean),
            (format!("{name}.running_var"), &mut self.bn0.running_var),
        ]
    }
}
