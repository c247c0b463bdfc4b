//! Frozen per-frame target networks.
//!
//! Adapters take `&self` only and expose no parameters to the optimizer, so
//! no gradient can reach them. Outputs are deterministic functions of the
//! clip (pixels and provenance).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView3};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, BlobReader, BlobWriter};
use crate::dataset::{Clip, VideoRecord};
use crate::error::{Error, Result};
use crate::rng;

const FEATURE_MAGIC: &[u8; 8] = b"CDFEAT\0\0";

/// A frozen image model applied independently to every frame of a clip.
pub trait TargetAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// One feature row per frame: `[frames, output_dim]`.
    fn encode(&self, clip: &Clip) -> Result<Array2<f32>>;
}

/// Serializable description of an adapter, resolved against a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    RandomProjection {
        name: String,
        output_dim: usize,
        hidden: usize,
        patch: usize,
        seed: u64,
    },
    Oracle {
        name: String,
        output_dim: usize,
        /// Norm of the per-frame perturbation added to the unit anchor.
        noise: f64,
        seed: u64,
    },
    FeatureFile {
        name: String,
        path: String,
    },
}

impl TargetSpec {
    pub fn name(&self) -> &str {
        match self {
            TargetSpec::RandomProjection { name, .. }
            | TargetSpec::Oracle { name, .. }
            | TargetSpec::FeatureFile { name, .. } => name,
        }
    }

    /// Instantiate for clips of `crop`×`crop` pixels drawn from `videos`.
    pub fn build(&self, crop: usize, videos: &[VideoRecord], num_classes: usize) -> Result<Box<dyn TargetAdapter>> {
        Ok(match self {
            TargetSpec::RandomProjection {
                name,
                output_dim,
                hidden,
                patch,
                seed,
            } => Box::new(RandomProjectionAdapter::new(name, crop, *patch, *hidden, *output_dim, *seed)?),
            TargetSpec::Oracle {
                name,
                output_dim,
                noise,
                seed,
            } => {
                let labels = videos
                    .iter()
                    .filter_map(|v| v.label.map(|l| (v.id.clone(), l)))
                    .collect();
                Box::new(OracleAdapter::new(name, labels, num_classes, *output_dim, *noise, *seed)?)
            }
            TargetSpec::FeatureFile { name, path } => Box::new(FeatureFileAdapter::load(name, Path::new(path))?),
        })
    }
}

fn check_clip(clip: &Clip) -> Result<()> {
    if clip.num_frames() == 0 || clip.frames.shape()[3] != 3 {
        return Err(Error::Shape(format!("target input must be T×H×W×3, got {:?}", clip.frames.shape())));
    }
    Ok(())
}

/// Patch-average → fixed random linear map → tanh → fixed random linear map.
pub struct RandomProjectionAdapter {
    name: String,
    crop: usize,
    patch: usize,
    grid: usize,
    w1: Array2<f32>,
    b1: Vec<f32>,
    w2: Array2<f32>,
}

impl RandomProjectionAdapter {
    pub fn new(name: &str, crop: usize, patch: usize, hidden: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if crop == 0 || patch == 0 || hidden == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("random projection sizes must be >= 1".into()));
        }
        let grid = crop.div_ceil(patch);
        let input = grid * grid * 3;
        let mut r = rng::stream(seed, &[rng::hash_str(name)]);
        let n1 = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("finite");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("finite");
        let w1 = Array2::from_shape_fn((input, hidden), |_| 4.0 * n1.sample(&mut r) as f32);
        let b1 = (0..hidden).map(|_| 0.1 * n2.sample(&mut r) as f32).collect();
        let w2 = Array2::from_shape_fn((hidden, output_dim), |_| n2.sample(&mut r) as f32);
        Ok(Self {
            name: name.to_string(),
            crop,
            patch,
            grid,
            w1,
            b1,
            w2,
        })
    }

    fn patch_vector(&self, frame: ArrayView3<f32>) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.grid * self.grid * 3];
        let mut counts = vec![0usize; self.grid * self.grid];
        for ((y, x, c), &v) in frame.indexed_iter() {
            let cell = (y / self.patch) * self.grid + x / self.patch;
            sums[cell * 3 + c] += v as f64 - 0.5;
            if c == 0 {
                counts[cell] += 1;
            }
        }
        sums.iter()
            .enumerate()
            .map(|(i, s)| (s / counts[i / 3].max(1) as f64) as f32)
            .collect()
    }
}

impl TargetAdapter for RandomProjectionAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn encode(&self, clip: &Clip) -> Result<Array2<f32>> {
        check_clip(clip)?;
        if clip.height() != self.crop || clip.width() != self.crop {
            return Err(Error::Shape(format!(
                "{} expects {}x{} frames, got {}x{}",
                self.name,
                self.crop,
                self.crop,
                clip.height(),
                clip.width()
            )));
        }
        let rows: Vec<f32> = clip
            .frames
            .outer_iter()
            .flat_map(|f| self.patch_vector(f))
            .collect();
        let x = Array2::from_shape_vec((clip.num_frames(), self.w1.nrows()), rows).expect("sized");
        let mut h = x.dot(&self.w1);
        for mut row in h.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v = (*v + b).tanh();
            }
        }
        Ok(h.dot(&self.w2))
    }
}

/// Noise norms below `sin(10°)` keep every oracle feature within 10° of its
/// unit anchor.
pub const ORACLE_MAX_NOISE: f64 = 0.173_648_177_666_930_3;

/// Emits the anchor direction of the clip's class plus a small bounded
/// perturbation. It looks up labels by source id, so it is a test fixture
/// with label access, not a model of any real image network.
pub struct OracleAdapter {
    name: String,
    labels: HashMap<String, usize>,
    anchors: Array2<f32>,
    noise: f64,
    seed: u64,
}

impl OracleAdapter {
    pub fn new(
        name: &str,
        labels: HashMap<String, usize>,
        num_classes: usize,
        output_dim: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("oracle needs >= 1 class and dimension".into()));
        }
        if !(0.0..ORACLE_MAX_NOISE).contains(&noise) {
            return Err(Error::InvalidArgument(format!(
                "oracle noise {noise} outside [0, {ORACLE_MAX_NOISE:.4}); larger values break the 10 degree bound"
            )));
        }
        if let Some((id, &l)) = labels.iter().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} of {id} exceeds {num_classes} classes")));
        }
        let mut r = rng::stream(seed, &[rng::hash_str(name), 1]);
        let mut anchors = Array2::<f32>::zeros((num_classes, output_dim));
        for mut row in anchors.rows_mut() {
            let v: Vec<f64> = (0..output_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (d, x) in row.iter_mut().zip(v) {
                *d = (x / n) as f32;
            }
        }
        Ok(Self {
            name: name.to_string(),
            labels,
            anchors,
            noise,
            seed,
        })
    }

    pub fn anchor(&self, class: usize) -> ndarray::ArrayView1<'_, f32> {
        self.anchors.row(class)
    }
}

impl TargetAdapter for OracleAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.anchors.ncols()
    }

    fn encode(&self, clip: &Clip) -> Result<Array2<f32>> {
        check_clip(clip)?;
        let &label = self
            .labels
            .get(&clip.source_id)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle has no label for {}", clip.source_id)))?;
        let d = self.output_dim();
        let id_key = rng::hash_str(&clip.source_id);
        let mut out = Array2::<f32>::zeros((clip.num_frames(), d));
        for (t, raw) in clip.raw_indices().into_iter().enumerate() {
            let mut r = rng::stream(self.seed, &[rng::hash_str(&self.name), id_key, raw as u64]);
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let u: f64 = rand::Rng::random_range(&mut r, 0.0..=1.0);
            let scale = self.noise * u / n;
            for (j, x) in dir.into_iter().enumerate() {
                out[[t, j]] = self.anchors[[label, j]] + (x * scale) as f32;
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureEntry {
    id: String,
    frames: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    dim: usize,
    entries: Vec<FeatureEntry>,
}

/// Per-frame features exported by an external image model, keyed by video
/// id and raw frame index.
pub struct FeatureFileAdapter {
    name: String,
    dim: usize,
    features: HashMap<String, Array2<f32>>,
}

impl FeatureFileAdapter {
    pub fn from_map(name: &str, dim: usize, features: HashMap<String, Array2<f32>>) -> Result<Self> {
        if let Some((id, f)) = features.iter().find(|(_, f)| f.ncols() != dim) {
            return Err(Error::Shape(format!("features of {id} have {} columns, expected {dim}", f.ncols())));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            features,
        })
    }

    pub fn load(name: &str, path: &Path) -> Result<Self> {
        let (header, blob): (FeatureHeader, _) = container::read_file(path, FEATURE_MAGIC)?;
        let reader = BlobReader::new(&blob);
        let mut features = HashMap::with_capacity(header.entries.len());
        for e in header.entries {
            let data = reader.f32s(e.offset, e.frames * header.dim)?;
            let arr = Array2::from_shape_vec((e.frames, header.dim), data).expect("sized");
            features.insert(e.id, arr);
        }
        Self::from_map(name, header.dim, features)
    }
}

/// Write per-frame features (`id → [raw_frames, dim]`) in the format read by
/// [`FeatureFileAdapter::load`].
pub fn export_features(path: &Path, dim: usize, features: &[(String, Array2<f32>)]) -> Result<()> {
    let mut blob = BlobWriter::new();
    let mut entries = Vec::with_capacity(features.len());
    for (id, f) in features {
        if f.ncols() != dim {
            return Err(Error::Shape(format!("features of {id} have {} columns, expected {dim}", f.ncols())));
        }
        let (offset, _) = blob.push_f32(&f.iter().copied().collect::<Vec<_>>());
        entries.push(FeatureEntry {
            id: id.clone(),
            frames: f.nrows(),
            offset,
        });
    }
    container::write_file(path, FEATURE_MAGIC, &FeatureHeader { dim, entries }, &blob.into_bytes())
}

impl TargetAdapter for FeatureFileAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, clip: &Clip) -> Result<Array2<f32>> {
        check_clip(clip)?;
        let f = self
            .features
            .get(&clip.source_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no exported features for {}", clip.source_id)))?;
        let mut out = Array2::<f32>::zeros((clip.num_frames(), self.dim));
        for (t, raw) in clip.raw_indices().into_iter().enumerate() {
            if raw >= f.nrows() {
                return Err(Error::Shape(format!("{} has {} exported frames, clip needs {raw}", clip.source_id, f.nrows())));
            }
            out.row_mut(t).assign(&f.row(raw));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn clip(id: &str, t: usize, start: usize, stride: usize, size: usize) -> Clip {
        Clip {
            frames: Array4::from_shape_fn((t, size, size, 3), |(i, y, x, c)| ((i + y * 3 + x * 5 + c) % 17) as f32 / 17.0),
            source_id: id.into(),
            start,
            stride,
        }
    }

    #[test]
    fn oracle_stays_within_ten_degrees() {
        let labels: HashMap<String, usize> = (0..4).map(|i| (format!("v{i}"), i % 3)).collect();
        let a = OracleAdapter::new("o", labels, 3, 16, ORACLE_MAX_NOISE - 1e-9, 2).unwrap();
        for i in 0..4 {
            let f = a.encode(&clip(&format!("v{i}"), 8, 1, 7, 4)).unwrap();
            let anchor = a.anchor(i % 3);
            for row in f.rows() {
                let cos = row.dot(&anchor) / row.dot(&row).sqrt();
                assert!(cos.acos().to_degrees() < 10.0);
            }
        }
        let labels: HashMap<String, usize> = [("v".to_string(), 0)].into();
        assert!(OracleAdapter::new("o", labels, 1, 4, 0.2, 0).is_err());
    }

    #[test]
    fn oracle_depends_on_raw_frame_not_position() {
        let labels: HashMap<String, usize> = [("v".to_string(), 0)].into();
        let a = OracleAdapter::new("o", labels, 1, 8, 0.1, 0).unwrap();
        let f1 = a.encode(&clip("v", 2, 4, 4, 4)).unwrap();
        let f2 = a.encode(&clip("v", 1, 8, 1, 4)).unwrap();
        assert_eq!(f1.row(1), f2.row(0));
        assert!(a.encode(&clip("missing", 1, 0, 1, 4)).is_err());
    }

    #[test]
    fn random_projection_is_deterministic_per_frame() {
        let a = RandomProjectionAdapter::new("rp", 8, 4, 12, 16, 3).unwrap();
        let c = clip("v", 3, 0, 1, 8);
        let f = a.encode(&c).unwrap();
        assert_eq!(f.dim(), (3, 16));
        assert_eq!(f, a.encode(&c).unwrap());
        let single = Clip {
            frames: c.frames.slice(ndarray::s![1..2, .., .., ..]).to_owned(),
            ..c.clone()
        };
        assert_eq!(a.encode(&single).unwrap().row(0), f.row(1));
        assert!(a.encode(&clip("v", 1, 0, 1, 6)).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let f = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f32);
        export_features(&path, 3, &[("v".into(), f.clone())]).unwrap();
        let a = FeatureFileAdapter::load("ext", &path).unwrap();
        let out = a.encode(&clip("v", 3, 1, 4, 2)).unwrap();
        assert_eq!(out.row(0), f.row(1));
        assert_eq!(out.row(2), f.row(9));
        assert!(a.encode(&clip("v", 3, 2, 4, 2)).is_err());
    }
}
