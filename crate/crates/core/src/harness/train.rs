//! The pretraining loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use super::checkpoint;
use super::config::RunConfig;
use super::loader::{Batch, BatchPlan, Loader};
use super::metrics::{EvalRecord, MetricsLog, Record, TrainRecord};
use crate::dataset::{load_dataset, make_synthetic_dataset, Clip, Split, VideoRecord};
use crate::encoders::{clip_rows, MomentumNet, OnlineNet, OutputGrads, TargetAdapter};
use crate::error::{Error, Result};
use crate::eval::{accuracy, extract_features, knn_predict, EvalReport};
use crate::objective::{aux_ssl_loss_grad, ensemble_loss_grad, total_loss};
use crate::optim::{lr_at, Lars};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// The configured corpus and its class count.
pub fn load_videos(cfg: &RunConfig) -> Result<(Vec<VideoRecord>, usize)> {
    if cfg.data.path.is_empty() {
        let v = make_synthetic_dataset(&cfg.data.synthetic)?;
        Ok((v, cfg.data.synthetic.num_classes))
    } else {
        let v = load_dataset(Path::new(&cfg.data.path))?;
        let classes = v.iter().filter_map(|r| r.label).max().map_or(0, |m| m + 1);
        Ok((v, classes))
    }
}

pub fn split_videos(videos: Vec<VideoRecord>) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    videos.into_iter().partition(|v| v.split == Split::Train)
}

/// Losses and learning rate of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub per_target: Vec<f64>,
    pub aux: Option<f64>,
}

/// Model, optimizer and data state of a pretraining run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub num_classes: usize,
    pub train_videos: Arc<Vec<VideoRecord>>,
    pub val_videos: Vec<VideoRecord>,
    pub targets: Vec<Box<dyn TargetAdapter>>,
    pub online: OnlineNet<f32>,
    pub momentum: Option<MomentumNet<f32>>,
    pub lars: Lars<f32>,
    pub plan: BatchPlan,
    /// Next step to run.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let (videos, classes) = load_videos(&cfg)?;
        Self::with_videos(cfg, videos, classes)
    }

    pub fn with_videos(cfg: RunConfig, videos: Vec<VideoRecord>, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let targets = cfg
            .active_targets()?
            .into_iter()
            .map(|t| t.build(cfg.augment.crop_size, &videos, num_classes))
            .collect::<Result<Vec<_>>>()?;
        let (train, val) = split_videos(videos);
        let heads: Vec<(String, usize)> = targets
            .iter()
            .map(|t| (t.name().to_string(), t.output_dim()))
            .collect();
        let online = OnlineNet::new(&cfg.encoder, &heads, cfg.loss.aux_ssl)?;
        let momentum = if cfg.loss.aux_ssl {
            Some(MomentumNet::from_online(&online, cfg.train.ema_momentum)?)
        } else {
            None
        };
        let plan = BatchPlan::new(train.len(), cfg.optim.batch_size, cfg.seed)?;
        Ok(Self {
            lars: Lars::new(cfg.optim.clone()),
            cfg,
            num_classes,
            train_videos: Arc::new(train),
            val_videos: val,
            targets,
            online,
            momentum,
            plan,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.plan.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        (self.plan.steps_per_epoch * self.cfg.optim.total_epochs) as u64
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        lr_at(step as usize, self.plan.steps_per_epoch, &self.cfg.optim)
    }

    pub fn loader(&self, end: u64) -> Loader {
        Loader::new(
            Arc::clone(&self.train_videos),
            self.plan.clone(),
            self.cfg.data.clone(),
            self.cfg.augment.clone(),
            self.step,
            end,
            self.cfg.train.workers,
            self.cfg.train.prefetch,
        )
    }

    /// Per-frame target features of `clip` for every active target.
    pub fn target_features(&self, clip: &Clip) -> Result<Vec<Array2<f32>>> {
        self.targets.iter().map(|t| t.encode(clip)).collect()
    }

    fn seed_trail(&self, batch: &Batch) -> String {
        let ids: Vec<&str> = batch.samples.iter().map(|s| s.source_id.as_str()).collect();
        format!(
            "step {} (epoch {}); run seed {}; sample seeds {:?}; videos {:?}",
            batch.step, batch.epoch, self.cfg.seed, batch.seeds, ids
        )
    }

    /// Predictions that collapse to zero or overflow mean the run diverged.
    fn diverged(&self, e: Error, batch: &Batch) -> Error {
        match e {
            Error::ZeroNorm(_) | Error::NonFinite(_) => Error::NonFinite(format!("{e}; {}", self.seed_trail(batch))),
            other => other,
        }
    }

    /// One optimization step on `batch`, which must be the batch of the
    /// trainer's current step.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        if batch.step != self.step {
            return Err(Error::InvalidArgument(format!("batch for step {} at step {}", batch.step, self.step)));
        }
        let b = batch.samples.len();
        let views = batch.samples[0].online_views.len();
        let lr = self.lr(self.step)?;

        // Frozen targets on v_ref; constants from here on.
        let k: Vec<Vec<Array2<f64>>> = batch
            .samples
            .iter()
            .map(|s| Ok(self.target_features(&s.v_ref)?.into_iter().map(|a| a.mapv(f64::from)).collect()))
            .collect::<Result<_>>()?;

        let clips: Vec<&Clip> = batch.samples.iter().flat_map(|s| s.online_views.iter()).collect();
        let (out, cache) = self.online.forward_train(&clips)?;
        let frames = out.frames;
        let preds: Vec<Array2<f64>> = out.predictions.iter().map(|p| p.mapv(f64::from)).collect();

        let k_momentum = match self.momentum.as_mut() {
            Some(m) => {
                let refs: Vec<&Clip> = batch.samples.iter().map(|s| &s.v_ref).collect();
                Some(m.project_train(&refs)?.mapv(f64::from))
            }
            None => None,
        };
        let aux_preds = out.aux_predictions.as_ref().map(|a| a.mapv(f64::from));

        let inv_b = 1.0 / b as f64;
        let mut grads: Vec<Array2<f32>> = preds.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let mut aux_grad = aux_preds.as_ref().map(|a| Array2::<f32>::zeros(a.raw_dim()));
        let mut per_target = vec![0.0; self.targets.len()];
        let mut ens_total = 0.0;
        let mut aux_total = 0.0;
        for i in 0..b {
            let q_sets: Vec<Vec<ArrayView2<f64>>> = preds
                .iter()
                .map(|p| (0..views).map(|v| clip_rows(p, frames, i * views + v)).collect())
                .collect();
            let k_set: Vec<ArrayView2<f64>> = k[i].iter().map(|a| a.view()).collect();
            let ens = ensemble_loss_grad(&q_sets, &k_set, &self.cfg.loss).map_err(|e| self.diverged(e, batch))?;
            ens_total += ens.total;
            for (t, l) in ens.per_target.iter().enumerate() {
                per_target[t] += l * inv_b;
            }
            for (g_t, gs) in grads.iter_mut().zip(&ens.grads) {
                for (v, g) in gs.iter().enumerate() {
                    let r = (i * views + v) * frames;
                    let mut dst = g_t.slice_mut(ndarray::s![r..r + frames, ..]);
                    dst.zip_mut_with(g, |d, &s| *d = (s * inv_b) as f32);
                }
            }
            if let (Some(km), Some(ap), Some(ag)) = (k_momentum.as_ref(), aux_preds.as_ref(), aux_grad.as_mut()) {
                let qv: Vec<ArrayView2<f64>> = (0..views).map(|v| clip_rows(ap, frames, i * views + v)).collect();
                let (l, gs) = aux_ssl_loss_grad(&qv, clip_rows(km, frames, i), &self.cfg.loss).map_err(|e| self.diverged(e, batch))?;
                aux_total += l;
                let w = self.cfg.loss.aux_weight * inv_b;
                for (v, g) in gs.iter().enumerate() {
                    let r = (i * views + v) * frames;
                    let mut dst = ag.slice_mut(ndarray::s![r..r + frames, ..]);
                    dst.zip_mut_with(g, |d, &s| *d = (s * w) as f32);
                }
            }
        }
        let aux = k_momentum.as_ref().map(|_| aux_total * inv_b);
        let loss_total = total_loss(ens_total * inv_b, aux, &self.cfg.loss);
        if !loss_total.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss_total}; {}", self.seed_trail(batch))));
        }

        self.online.zero_grad();
        self.online.backward(
            cache,
            OutputGrads {
                predictions: grads.into_iter().map(Some).collect(),
                aux_predictions: aux_grad,
            },
        )?;
        self.lars.step(&mut self.online.params_mut(), lr).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {}; sample seeds {:?}", batch.step, batch.seeds)),
            other => other,
        })?;
        if let Some(m) = self.momentum.as_mut() {
            m.update_from(&self.online)?;
        }
        self.online.step += 1;
        self.step += 1;
        Ok(StepStats {
            step: batch.step,
            epoch: batch.epoch,
            lr,
            loss_total,
            per_target,
            aux,
        })
    }

    /// kNN top-1 of the current encoder on the validation split.
    pub fn knn_report(&self) -> Result<EvalReport> {
        let clock = Instant::now();
        let enc = &self.online.backbone.encoder;
        let p = self.cfg.bank_protocol();
        let train = extract_features(enc, &self.train_videos, &p, self.num_classes)?;
        let val = extract_features(enc, &self.val_videos, &p, self.num_classes)?;
        let k = self.cfg.eval.k.min(train.len());
        let preds = knn_predict(&train, &val, k, self.cfg.eval.temperature)?;
        let (top1, per_class) = accuracy(&preds, &val.labels)?;
        Ok(EvalReport {
            protocol: "knn".into(),
            top1,
            per_class,
            config: serde_json::json!({ "k": k, "temperature": self.cfg.eval.temperature, "views": p }),
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        })
    }

    fn record(&self, s: &StepStats, started: Instant) -> Record {
        let loss_per_target: BTreeMap<String, f64> = self
            .targets
            .iter()
            .zip(&s.per_target)
            .map(|(t, &l)| (t.name().to_string(), l))
            .collect();
        Record::Train(TrainRecord {
            step: s.step,
            epoch: s.epoch,
            lr: s.lr,
            loss_total: s.loss_total,
            loss_per_target,
            aux_loss: s.aux,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        })
    }
}

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_path().join("checkpoints")
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_path().join("metrics.jsonl")
}

/// Run steps until `until` (exclusive, clamped to the schedule), logging
/// every step and checkpointing at configured epoch boundaries. Returns the
/// checkpoints written.
pub fn train_until(trainer: &mut Trainer, log: &mut MetricsLog, until: u64) -> Result<Vec<PathBuf>> {
    let end = until.min(trainer.total_steps());
    let spe = trainer.steps_per_epoch() as u64;
    let epochs = trainer.cfg.optim.total_epochs;
    let every = trainer.cfg.train.checkpoint_every_epochs;
    let eval_every = trainer.cfg.train.eval_every_epochs;
    let dir = checkpoint_dir(&trainer.cfg);
    std::fs::create_dir_all(&dir)?;
    let started = Instant::now();
    let mut written = Vec::new();
    let mut loader = trainer.loader(end);
    while let Some(batch) = loader.next_batch() {
        let batch = batch?;
        let stats = trainer.train_step(&batch)?;
        log.append(&trainer.record(&stats, started))?;
        if trainer.step % spe == 0 {
            let done = (trainer.step / spe) as usize;
            if eval_every > 0 && (done % eval_every == 0 || done == epochs) {
                let report = trainer.knn_report()?;
                log.append(&Record::Eval(EvalRecord {
                    step: trainer.step,
                    epoch: done,
                    report,
                }))?;
            }
            if done % every == 0 || done == epochs {
                let path = dir.join(format!("epoch_{done:04}.ckpt"));
                checkpoint::save(&path, trainer)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Result of [`run_pretrain`] or [`resume`].
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_step: u64,
}

fn write_run_files(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let info = serde_json::json!({ "code_version": CODE_VERSION, "seed": cfg.seed });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

/// Full pretraining run from scratch into `cfg.output_dir`.
pub fn run_pretrain(cfg: RunConfig) -> Result<PretrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    write_run_files(&trainer.cfg)?;
    let metrics = metrics_path(&trainer.cfg);
    let mut log = MetricsLog::open_truncated(&metrics, 0)?;
    let checkpoints = train_until(&mut trainer, &mut log, u64::MAX)?;
    Ok(PretrainOutcome {
        run_dir: trainer.cfg.output_path(),
        metrics,
        checkpoints,
        final_step: trainer.step,
    })
}

/// Continue the run saved in `checkpoint` to the end of its schedule.
pub fn resume(checkpoint: &Path) -> Result<PretrainOutcome> {
    let mut trainer = checkpoint::restore(checkpoint)?;
    write_run_files(&trainer.cfg)?;
    let metrics = metrics_path(&trainer.cfg);
    let mut log = MetricsLog::open_truncated(&metrics, trainer.step)?;
    let checkpoints = train_until(&mut trainer, &mut log, u64::MAX)?;
    Ok(PretrainOutcome {
        run_dir: trainer.cfg.output_path(),
        metrics,
        checkpoints,
        final_step: trainer.step,
    })
}
