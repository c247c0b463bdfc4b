//! Online video network: 3-D convolutional encoder, projector and
//! per-target predictor heads, plus the momentum (EMA) copy.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Act, BatchNorm, BnCache, Conv3d, ConvCache, Linear, Mlp, MlpCache, Mode, Param, Scalar};
use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Architecture of the online network. The projector and predictor sizes
/// are local choices, not taken from any reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels of each 3-D convolution block; depth is the length.
    pub widths: Vec<usize>,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    /// Spatial stride of every block (temporal stride is always 1).
    pub spatial_stride: usize,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub predictor_hidden: usize,
    /// When false each head is a single linear map into target space.
    pub use_predictor: bool,
    pub input_mean: f32,
    pub input_std: f32,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            temporal_kernel: 3,
            spatial_kernel: 3,
            spatial_stride: 2,
            projector_hidden: 128,
            projector_dim: 64,
            predictor_hidden: 128,
            use_predictor: true,
            input_mean: 0.45,
            input_std: 0.225,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder.widths must be non-empty and positive".into()));
        }
        if self.temporal_kernel % 2 == 0 || self.spatial_kernel % 2 == 0 {
            return Err(Error::Config("encoder kernels must be odd".into()));
        }
        if self.spatial_stride == 0 || self.projector_dim == 0 || self.projector_hidden == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("encoder sizes and strides must be >= 1".into()));
        }
        if !(self.input_std > 0.0) {
            return Err(Error::Config("encoder.input_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Stack clips into a batch activation, normalizing pixel values.
pub fn clips_to_act<F: Scalar>(clips: &[&Clip], mean: f32, std: f32) -> Result<Act<F>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Shape("empty clip batch".into()))?;
    let shape = first.frames.shape().to_vec();
    if shape[3] != 3 {
        return Err(Error::Shape(format!("clips must have 3 channels, got {}", shape[3])));
    }
    let mut data = Vec::with_capacity(clips.len() * first.frames.len());
    for c in clips {
        if c.frames.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "clip {} has shape {:?}, batch expects {:?}",
                c.source_id,
                c.frames.shape(),
                shape
            )));
        }
        data.extend(c.frames.iter().map(|&v| F::of(((v - mean) / std) as f64)));
    }
    let rows = data.len() / 3;
    Ok(Act {
        data: Array2::from_shape_vec((rows, 3), data).expect("consistent size"),
        dims: [clips.len(), shape[0], shape[1], shape[2]],
    })
}

#[derive(Clone, Debug)]
pub struct ConvBlock<F> {
    pub conv: Conv3d<F>,
    pub bn: BatchNorm<F>,
}

struct BlockCache<F> {
    conv: ConvCache<F>,
    bn: BnCache<F>,
    out: Array2<F>,
}

/// Temporal-length-preserving 3-D CNN emitting one feature per frame.
#[derive(Clone, Debug)]
pub struct VideoEncoder<F> {
    pub blocks: Vec<ConvBlock<F>>,
    pub input_mean: f32,
    pub input_std: f32,
}

pub struct EncoderCache<F> {
    blocks: Vec<BlockCache<F>>,
    pooled_hw: usize,
    last_rows: usize,
}

impl<F: Scalar> VideoEncoder<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut cin = 3;
        let blocks = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let name = format!("encoder.block{i}");
                let conv = Conv3d::new(
                    &format!("{name}.conv"),
                    cin,
                    w,
                    cfg.temporal_kernel,
                    cfg.spatial_kernel,
                    cfg.spatial_stride,
                    rng,
                );
                cin = w;
                ConvBlock {
                    conv,
                    bn: BatchNorm::new(&format!("{name}.bn"), w),
                }
            })
            .collect();
        Self {
            blocks,
            input_mean: cfg.input_mean,
            input_std: cfg.input_std,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().map(|b| b.conv.cout).unwrap_or(3)
    }

    /// Per-frame features `[batch * frames, channels]` after spatial pooling.
    pub fn forward(&self, clips: &[&Clip], mode: Mode) -> Result<(Array2<F>, [usize; 2], EncoderCache<F>)> {
        let mut x = clips_to_act::<F>(clips, self.input_mean, self.input_std)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, conv) = block.conv.forward(&x)?;
            let (mut out, bn) = block.bn.forward(&y.data, mode)?;
            relu(&mut out);
            x = Act {
                data: out.clone(),
                dims: y.dims,
            };
            caches.push(BlockCache { conv, bn, out });
        }
        let [b, t, h, w] = x.dims;
        let hw = h * w;
        let c = x.channels();
        let mut pooled = Array2::<F>::zeros((b * t, c));
        let inv = F::one() / F::of(hw as f64);
        for (r, chunk) in x.data.axis_chunks_iter(Axis(0), hw).enumerate() {
            let s = chunk.sum_axis(Axis(0));
            pooled.row_mut(r).assign(&(s * inv));
        }
        Ok((
            pooled,
            [b, t],
            EncoderCache {
                blocks: caches,
                pooled_hw: hw,
                last_rows: x.data.nrows(),
            },
        ))
    }

    pub fn update_running(&mut self, cache: &EncoderCache<F>) {
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.bn.update_running(&c.bn);
        }
    }

    pub fn backward(&mut self, cache: EncoderCache<F>, d_pooled: &Array2<F>) {
        let hw = cache.pooled_hw;
        let c = d_pooled.ncols();
        let inv = F::one() / F::of(hw as f64);
        let mut dx = Array2::<F>::zeros((cache.last_rows, c));
        for (r, mut chunk) in dx.axis_chunks_iter_mut(Axis(0), hw).enumerate() {
            let g = d_pooled.row(r).mapv(|v| v * inv);
            for mut row in chunk.rows_mut() {
                row.assign(&g);
            }
        }
        let n = self.blocks.len();
        for (i, (block, bc)) in self.blocks.iter_mut().zip(cache.blocks).enumerate().rev() {
            relu_backward(&bc.out, &mut dx);
            let dpre = block.bn.backward(bc.bn, &dx);
            let need = i > 0;
            match block.conv.backward(bc.conv, &dpre, need) {
                Some(g) => dx = g,
                None => debug_assert!(i == 0 && n > 0),
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.conv.weight, &b.bn.weight, &b.bn.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.conv.weight, &mut b.bn.weight, &mut b.bn.bias])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<F>)> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let name = b.bn.weight.name.trim_end_matches(".weight").to_string();
                [
                    (format!("{name}.running_mean"), &mut b.bn.running_mean),
                    (format!("{name}.running_var"), &mut b.bn.running_var),
                ]
            })
            .collect()
    }
}

/// Average rows `[batch * frames, d]` over frames, giving `[batch, d]`.
pub fn pool_frames<F: Scalar>(x: &Array2<F>, frames: usize) -> Array2<F> {
    let inv = F::one() / F::of(frames as f64);
    let b = x.nrows() / frames;
    let mut out = Array2::<F>::zeros((b, x.ncols()));
    for (i, chunk) in x.axis_chunks_iter(Axis(0), frames).enumerate() {
        out.row_mut(i).assign(&(chunk.sum_axis(Axis(0)) * inv));
    }
    out
}

/// Rows of clip `i` in a `[batch * frames, d]` matrix.
pub fn clip_rows<F>(x: &Array2<F>, frames: usize, i: usize) -> ArrayView2<'_, F> {
    x.slice(ndarray::s![i * frames..(i + 1) * frames, ..])
}

/// Encoder + projector; the part mirrored by the momentum branch.
#[derive(Clone, Debug)]
pub struct Backbone<F> {
    pub encoder: VideoEncoder<F>,
    pub projector: Mlp<F>,
}

pub struct BackboneCache<F> {
    encoder: EncoderCache<F>,
    projector: MlpCache<F>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let encoder = VideoEncoder::new(cfg, rng);
        let projector = Mlp::new("projector", encoder.out_dim(), cfg.projector_hidden, cfg.projector_dim, rng);
        Self { encoder, projector }
    }

    /// Returns (encoder features, projections, [batch, frames]).
    pub fn forward(&self, clips: &[&Clip], mode: Mode) -> Result<(Array2<F>, Array2<F>, [usize; 2], BackboneCache<F>)> {
        let (h, bt, encoder) = self.encoder.forward(clips, mode)?;
        let (z, projector) = self.projector.forward(&h, mode)?;
        Ok((h, z, bt, BackboneCache { encoder, projector }))
    }

    pub fn update_running(&mut self, cache: &BackboneCache<F>) {
        self.encoder.update_running(&cache.encoder);
        self.projector.update_running(&cache.projector);
    }

    pub fn backward(&mut self, cache: BackboneCache<F>, dz: &Array2<F>) {
        let dh = self.projector.backward(cache.projector, dz);
        self.encoder.backward(cache.encoder, &dh);
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.projector.params_mut());
        p
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<F>)> {
        let mut b = self.encoder.buffers_mut();
        b.extend(self.projector.buffers_mut());
        b
    }
}

/// Maps projections into one target's feature space.
#[derive(Clone, Debug)]
pub enum HeadNet<F> {
    Predictor(Mlp<F>),
    Linear(Linear<F>),
}

pub enum HeadCache<F> {
    Predictor(MlpCache<F>),
    Linear(Array2<F>),
}

impl<F: Scalar> HeadNet<F> {
    fn new(name: &str, cfg: &EncoderConfig, out: usize, rng: &mut Rng) -> Self {
        if cfg.use_predictor {
            HeadNet::Predictor(Mlp::new(name, cfg.projector_dim, cfg.predictor_hidden, out, rng))
        } else {
            HeadNet::Linear(Linear::new(name, cfg.projector_dim, out, rng))
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            HeadNet::Predictor(m) => m.out_dim(),
            HeadNet::Linear(l) => l.out_dim(),
        }
    }

    pub fn forward(&self, z: &Array2<F>, mode: Mode) -> Result<(Array2<F>, HeadCache<F>)> {
        match self {
            HeadNet::Predictor(m) => m.forward(z, mode).map(|(y, c)| (y, HeadCache::Predictor(c))),
            HeadNet::Linear(l) => l.forward(z).map(|y| (y, HeadCache::Linear(z.clone()))),
        }
    }

    fn update_running(&mut self, cache: &HeadCache<F>) {
        if let (HeadNet::Predictor(m), HeadCache::Predictor(c)) = (self, cache) {
            m.update_running(c);
        }
    }

    fn backward(&mut self, cache: HeadCache<F>, dy: &Array2<F>) -> Array2<F> {
        match (self, cache) {
            (HeadNet::Predictor(m), HeadCache::Predictor(c)) => m.backward(c, dy),
            (HeadNet::Linear(l), HeadCache::Linear(x)) => l.backward(&x, dy),
            _ => unreachable!("head cache kind matches head kind"),
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        match self {
            HeadNet::Predictor(m) => m.params(),
            HeadNet::Linear(l) => vec![&l.weight, &l.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        match self {
            HeadNet::Predictor(m) => m.params_mut(),
            HeadNet::Linear(l) => vec![&mut l.weight, &mut l.bias],
        }
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<F>)> {
        match self {
            HeadNet::Predictor(m) => m.buffers_mut(),
            HeadNet::Linear(_) => Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head<F> {
    pub target: String,
    pub net: HeadNet<F>,
}

/// Trainable online parameters θ and the step counter.
#[derive(Clone, Debug)]
pub struct OnlineNet<F> {
    pub backbone: Backbone<F>,
    pub heads: Vec<Head<F>>,
    /// Predicts momentum-branch projections for the auxiliary loss.
    pub aux_head: Option<HeadNet<F>>,
    pub step: u64,
}

/// Everything the online network emits for a batch of clips; each matrix
/// has `batch * frames` rows ordered clip-major.
#[derive(Clone, Debug)]
pub struct OnlineOutput<F> {
    pub batch: usize,
    pub frames: usize,
    pub features: Array2<F>,
    pub projections: Array2<F>,
    pub predictions: Vec<Array2<F>>,
    pub aux_predictions: Option<Array2<F>>,
}

pub struct OnlineCache<F> {
    backbone: BackboneCache<F>,
    heads: Vec<HeadCache<F>>,
    aux: Option<HeadCache<F>>,
}

/// Upstream gradients for [`OnlineNet::backward`].
pub struct OutputGrads<F> {
    /// One entry per head, `None` when the head did not enter the loss.
    pub predictions: Vec<Option<Array2<F>>>,
    pub aux_predictions: Option<Array2<F>>,
}

impl<F: Scalar> OnlineNet<F> {
    /// `targets` lists (name, output_dim) for every target adapter.
    pub fn new(cfg: &EncoderConfig, targets: &[(String, usize)], aux_ssl: bool) -> Result<Self> {
        cfg.validate()?;
        if targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        let mut rng = rng::stream(cfg.init_seed, &[0x0e_c0de]);
        let backbone = Backbone::new(cfg, &mut rng);
        let heads = targets
            .iter()
            .map(|(name, dim)| Head {
                target: name.clone(),
                net: HeadNet::new(&format!("predictor.{name}"), cfg, *dim, &mut rng),
            })
            .collect();
        let aux_head = aux_ssl.then(|| HeadNet::new("aux_predictor", cfg, cfg.projector_dim, &mut rng));
        Ok(Self {
            backbone,
            heads,
            aux_head,
            step: 0,
        })
    }

    fn run(&self, clips: &[&Clip], mode: Mode) -> Result<(OnlineOutput<F>, OnlineCache<F>)> {
        let (features, projections, [batch, frames], backbone) = self.backbone.forward(clips, mode)?;
        let mut predictions = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (q, c) = h.net.forward(&projections, mode)?;
            predictions.push(q);
            heads.push(c);
        }
        let (aux_predictions, aux) = match &self.aux_head {
            Some(h) => {
                let (q, c) = h.forward(&projections, mode)?;
                (Some(q), Some(c))
            }
            None => (None, None),
        };
        Ok((
            OnlineOutput {
                batch,
                frames,
                features,
                projections,
                predictions,
                aux_predictions,
            },
            OnlineCache { backbone, heads, aux },
        ))
    }

    /// Evaluation-mode forward; no state changes, no gradient cache kept.
    pub fn forward_eval(&self, clips: &[&Clip]) -> Result<OnlineOutput<F>> {
        self.run(clips, Mode::Eval).map(|(o, _)| o)
    }

    /// Training-mode forward: batch statistics over every clip in `clips`,
    /// running statistics updated.
    pub fn forward_train(&mut self, clips: &[&Clip]) -> Result<(OnlineOutput<F>, OnlineCache<F>)> {
        let (out, cache) = self.run(clips, Mode::Train)?;
        self.backbone.update_running(&cache.backbone);
        for (h, c) in self.heads.iter_mut().zip(&cache.heads) {
            h.net.update_running(c);
        }
        if let (Some(h), Some(c)) = (self.aux_head.as_mut(), cache.aux.as_ref()) {
            h.update_running(c);
        }
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for the given output gradients.
    pub fn backward(&mut self, cache: OnlineCache<F>, grads: OutputGrads<F>) -> Result<()> {
        if grads.predictions.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} prediction gradients for {} heads",
                grads.predictions.len(),
                self.heads.len()
            )));
        }
        let mut dz: Option<Array2<F>> = None;
        let mut add = |g: Array2<F>| match dz.as_mut() {
            Some(acc) => *acc += &g,
            None => dz = Some(g),
        };
        for ((head, hc), g) in self.heads.iter_mut().zip(cache.heads).zip(grads.predictions) {
            if let Some(g) = g {
                add(head.net.backward(hc, &g));
            }
        }
        match (self.aux_head.as_mut(), cache.aux, grads.aux_predictions) {
            (Some(h), Some(c), Some(g)) => add(h.backward(c, &g)),
            (_, _, None) => {}
            _ => return Err(Error::Shape("auxiliary gradient without an auxiliary head".into())),
        }
        if let Some(dz) = dz {
            self.backbone.backward(cache.backbone, &dz);
        }
        Ok(())
    }

    pub fn head_index(&self, target: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.target == target)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.backbone.params();
        for h in &self.heads {
            p.extend(h.net.params());
        }
        if let Some(h) = &self.aux_head {
            p.extend(h.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.backbone.params_mut();
        for h in &mut self.heads {
            p.extend(h.net.params_mut());
        }
        if let Some(h) = &mut self.aux_head {
            p.extend(h.params_mut());
        }
        p
    }

    /// Normalization running statistics, by name.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<F>)> {
        let mut b = self.backbone.buffers_mut();
        for h in &mut self.heads {
            b.extend(h.net.buffers_mut());
        }
        if let Some(h) = &mut self.aux_head {
            b.extend(h.buffers_mut());
        }
        b
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// EMA copy θ_m of the online backbone; never receives gradients.
#[derive(Clone, Debug)]
pub struct MomentumNet<F> {
    pub backbone: Backbone<F>,
    pub momentum: f64,
}

impl<F: Scalar> MomentumNet<F> {
    pub fn from_online(online: &OnlineNet<F>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            backbone: online.backbone.clone(),
            momentum,
        })
    }

    /// Projections of `clips` with batch statistics; running stats updated.
    pub fn project_train(&mut self, clips: &[&Clip]) -> Result<Array2<F>> {
        let (_, z, _, cache) = self.backbone.forward(clips, Mode::Train)?;
        self.backbone.update_running(&cache);
        Ok(z)
    }

    /// θ_m ← m·θ_m + (1−m)·θ with the stored coefficient.
    pub fn update_from(&mut self, online: &OnlineNet<F>) -> Result<()> {
        ema_update(self.backbone.params_mut(), &online.backbone.params(), self.momentum)
    }
}

/// Elementwise θ_m ← m·θ_m + (1−m)·θ over matching named tensors.
pub fn ema_update<F: Scalar>(target: Vec<&mut Param<F>>, source: &[&Param<F>], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("EMA coefficient {m} outside [0, 1]")));
    }
    if target.len() != source.len() {
        return Err(Error::Shape(format!("{} momentum tensors vs {} online tensors", target.len(), source.len())));
    }
    for (t, s) in target.iter().zip(source) {
        if t.name != s.name || t.shape != s.shape {
            return Err(Error::Shape(format!("{} {:?} does not mirror {} {:?}", t.name, t.shape, s.name, s.shape)));
        }
    }
    let (mf, rest) = (F::of(m), F::of(1.0 - m));
    for (t, s) in target.into_iter().zip(source) {
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            t.value.copy_from_slice(&s.value);
            continue;
        }
        for (a, &b) in t.value.iter_mut().zip(&s.value) {
            *a = mf * *a + rest * b;
        }
    }
    Ok(())
}

/// Initialize 3-D kernels from 2-D ones: each `[kh, kw, cin, cout]` kernel,
/// keyed by the encoder parameter name, is replicated over the temporal
/// extent and divided by it.
pub fn init_from_inflation<F: Scalar>(encoder: &mut VideoEncoder<F>, image_weights: &BTreeMap<String, Array4<F>>) -> Result<()> {
    for name in image_weights.keys() {
        if !encoder.blocks.iter().any(|b| &b.conv.weight.name == name) {
            return Err(Error::Shape(format!("no convolution named {name} in the encoder")));
        }
    }
    for block in &mut encoder.blocks {
        let conv = &mut block.conv;
        let Some(w2) = image_weights.get(&conv.weight.name) else {
            continue;
        };
        let expect = [conv.ks, conv.ks, conv.cin, conv.cout];
        if w2.shape() != expect {
            return Err(Error::Shape(format!(
                "{}: image kernel {:?} does not match spatial kernel {:?}",
                conv.weight.name,
                w2.shape(),
                expect
            )));
        }
        let scale = F::one() / F::of(conv.kt as f64);
        let flat: Vec<F> = w2.iter().map(|&v| v * scale).collect();
        for (dt, chunk) in conv.weight.value.chunks_exact_mut(flat.len()).enumerate() {
            debug_assert!(dt < conv.kt);
            chunk.copy_from_slice(&flat);
        }
    }
    Ok(())
}
