//! Deterministic batch preparation, inline or on background workers.
//!
//! Everything random about a batch is a function of `(seed, step)`: the
//! epoch's video order comes from `(seed, epoch)` and each sample's windows
//! and augmentations from `(seed, step, slot)`. Workers therefore produce
//! exactly the batches the inline path would, and the loop consumes them in
//! step order, so results do not depend on the worker count.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::augment::{augment_clip, AugConfig};
use crate::dataset::{sample_views, VideoRecord, ViewSet};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

use super::config::DataConfig;

/// One training batch of augmented view sets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub step: u64,
    pub epoch: usize,
    pub samples: Vec<ViewSet>,
    /// Stream key of every sample, for reproducing a failing batch.
    pub seeds: Vec<u64>,
}

/// Which videos land in which step. Incomplete final batches are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub num_videos: usize,
    pub steps_per_epoch: usize,
}

impl BatchPlan {
    pub fn new(num_videos: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || num_videos < batch_size {
            return Err(Error::Config(format!(
                "batch size {batch_size} needs at least that many training videos, have {num_videos}"
            )));
        }
        Ok(Self {
            seed,
            batch_size,
            num_videos,
            steps_per_epoch: num_videos / batch_size,
        })
    }

    pub fn epoch_of(&self, step: u64) -> usize {
        step as usize / self.steps_per_epoch
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_videos).collect();
        order.shuffle(&mut rng::stream(self.seed, &[rng::hash_str("epoch"), epoch as u64]));
        order
    }

    /// Video indices of `step`.
    pub fn indices(&self, step: u64) -> Vec<usize> {
        let order = self.epoch_order(self.epoch_of(step));
        let b = step as usize % self.steps_per_epoch;
        order[b * self.batch_size..(b + 1) * self.batch_size].to_vec()
    }

    pub fn sample_seed(&self, step: u64, slot: usize) -> u64 {
        rng::derive_key(self.seed, &[rng::hash_str("sample"), step, slot as u64])
    }
}

/// Sample windows for every slot of `step` and augment each clip
/// independently.
pub fn prepare_batch(videos: &[VideoRecord], plan: &BatchPlan, step: u64, data: &DataConfig, aug: &AugConfig) -> Result<Batch> {
    let idx = plan.indices(step);
    let mut samples = Vec::with_capacity(idx.len());
    let mut seeds = Vec::with_capacity(idx.len());
    for (slot, &i) in idx.iter().enumerate() {
        let key = plan.sample_seed(step, slot);
        let mut r = Rng::seed_from_u64(key);
        let raw = sample_views(&videos[i], data.online_views, data.frames, data.stride, data.ref_window, &mut r)?;
        let v_ref = augment_clip(&raw.v_ref, aug, &mut r)?;
        let online_views = raw
            .online_views
            .iter()
            .map(|c| augment_clip(c, aug, &mut r))
            .collect::<Result<_>>()?;
        samples.push(ViewSet {
            v_ref,
            online_views,
            source_id: raw.source_id,
        });
        seeds.push(key);
    }
    Ok(Batch {
        step,
        epoch: plan.epoch_of(step),
        samples,
        seeds,
    })
}

struct Shared {
    videos: Arc<Vec<VideoRecord>>,
    plan: BatchPlan,
    data: DataConfig,
    aug: AugConfig,
}

/// Yields batches for steps `start..end` in order.
pub struct Loader {
    shared: Arc<Shared>,
    next: u64,
    end: u64,
    start: u64,
    receivers: Vec<Receiver<Result<Batch>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Loader {
    /// `workers == 0` prepares each batch on the calling thread. Otherwise
    /// worker `w` prepares steps `start + w, start + w + workers, ...` into
    /// its own bounded queue of `prefetch` batches.
    pub fn new(
        videos: Arc<Vec<VideoRecord>>,
        plan: BatchPlan,
        data: DataConfig,
        aug: AugConfig,
        start: u64,
        end: u64,
        workers: usize,
        prefetch: usize,
    ) -> Self {
        let shared = Arc::new(Shared { videos, plan, data, aug });
        let mut receivers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers as u64 {
            let (tx, rx) = sync_channel(prefetch.max(1));
            let sh = Arc::clone(&shared);
            let stride = workers as u64;
            handles.push(std::thread::spawn(move || {
                let mut step = start + w;
                while step < end {
                    let b = prepare_batch(&sh.videos, &sh.plan, step, &sh.data, &sh.aug);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        return;
                    }
                    step += stride;
                }
            }));
            receivers.push(rx);
        }
        Self {
            shared,
            next: start,
            end,
            start,
            receivers,
            handles,
        }
    }

    pub fn next_batch(&mut self) -> Option<Result<Batch>> {
        if self.next >= self.end {
            return None;
        }
        let step = self.next;
        self.next += 1;
        if self.receivers.is_empty() {
            let s = &self.shared;
            return Some(prepare_batch(&s.videos, &s.plan, step, &s.data, &s.aug));
        }
        let w = ((step - self.start) % self.receivers.len() as u64) as usize;
        Some(
            self.receivers[w]
                .recv()
                .unwrap_or_else(|_| Err(Error::InvalidArgument(format!("loader worker {w} stopped before step {step}")))),
        )
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic_dataset, SyntheticSpec};

    fn videos() -> Arc<Vec<VideoRecord>> {
        let spec = SyntheticSpec {
            num_classes: 2,
            videos_per_class: 5,
            val_fraction: 0.0,
            ..Default::default()
        };
        Arc::new(make_synthetic_dataset(&spec).unwrap())
    }

    #[test]
    fn plan_covers_each_video_once_per_epoch() {
        let plan = BatchPlan::new(10, 3, 7).unwrap();
        assert_eq!(plan.steps_per_epoch, 3);
        let mut seen: Vec<usize> = (3..6).flat_map(|s| plan.indices(s)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(BatchPlan::new(2, 3, 0).is_err());
    }

    #[test]
    fn workers_match_inline() {
        let v = videos();
        let plan = BatchPlan::new(v.len(), 4, 3).unwrap();
        let data = DataConfig::default();
        let aug = AugConfig::default();
        let mut inline = Loader::new(v.clone(), plan.clone(), data.clone(), aug.clone(), 1, 5, 0, 1);
        let mut pooled = Loader::new(v, plan, data, aug, 1, 5, 3, 1);
        for _ in 1..5 {
            let a = inline.next_batch().unwrap().unwrap();
            let b = pooled.next_batch().unwrap().unwrap();
            assert_eq!(a.step, b.step);
            assert_eq!(a.seeds, b.seeds);
            assert_eq!(a.samples, b.samples);
        }
        assert!(inline.next_batch().is_none());
        assert!(pooled.next_batch().is_none());
    }

    #[test]
    fn early_drop_does_not_hang() {
        let v = videos();
        let plan = BatchPlan::new(v.len(), 2, 0).unwrap();
        let mut l = Loader::new(v, plan, DataConfig::default(), AugConfig::default(), 0, 100, 2, 1);
        l.next_batch().unwrap().unwrap();
        drop(l);
    }
}
