//! Run orchestration: configuration, the pretraining loop, checkpoints,
//! metrics, evaluation dispatch and plots.

pub mod checkpoint;
pub mod config;
pub mod loader;
pub mod metrics;
pub mod plots;
pub mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

pub use config::{DataConfig, EvalConfig, RunConfig, TrainConfig};
pub use loader::{prepare_batch, Batch, BatchPlan, Loader};
pub use metrics::{read_log, EvalRecord, MetricsLog, Record, TrainRecord};
pub use plots::emit_plots;
pub use train::{load_videos, resume, run_pretrain, split_videos, train_until, PretrainOutcome, StepStats, Trainer};

use crate::dataset::VideoRecord;
use crate::encoders::VideoEncoder;
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, extract_features, finetune, knn_predict, linear_probe, semi_split, EvalReport, VideoClassifier,
};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Knn,
    Linear,
    Finetune,
    Semi,
    Multiview,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [Self::Knn, Self::Linear, Self::Finetune, Self::Semi, Self::Multiview];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Knn => "knn",
            Self::Linear => "linear",
            Self::Finetune => "finetune",
            Self::Semi => "semi",
            Self::Multiview => "multiview",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown protocol {s:?} (knn, linear, finetune, semi, multiview)")))
    }
}

/// Encoder from `checkpoint`, or a freshly initialized one, plus its step.
pub fn eval_encoder(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(VideoEncoder<f32>, u64)> {
    match checkpoint {
        Some(p) => checkpoint::load_encoder(p, &cfg.encoder),
        None => {
            let mut r = rng::stream(cfg.encoder.init_seed, &[0x0e_c0de]);
            Ok((VideoEncoder::new(&cfg.encoder, &mut r), 0))
        }
    }
}

fn knn_report(
    cfg: &RunConfig,
    enc: &VideoEncoder<f32>,
    train: &[VideoRecord],
    val: &[VideoRecord],
    classes: usize,
    multiview: bool,
) -> Result<EvalReport> {
    let clock = Instant::now();
    let bank_p = cfg.bank_protocol();
    let query_p = if multiview { cfg.test_protocol() } else { bank_p.clone() };
    let bank = extract_features(enc, train, &bank_p, classes)?;
    let queries = extract_features(enc, val, &query_p, classes)?;
    let preds = knn_predict(&bank, &queries, cfg.eval.k, cfg.eval.temperature)?;
    let (top1, per_class) = accuracy(&preds, &queries.labels)?;
    Ok(EvalReport {
        protocol: if multiview { "multiview" } else { "knn" }.into(),
        top1,
        per_class,
        config: serde_json::json!({
            "k": cfg.eval.k,
            "temperature": cfg.eval.temperature,
            "bank_views": bank_p,
            "query_views": query_p,
        }),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    })
}

/// Evaluate the encoder of `checkpoint` (random init when `None`) with
/// `protocol` and append the reports to the run's metrics log. `semi`
/// yields one report per configured fraction.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>, protocol: Protocol) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let (enc, step) = eval_encoder(cfg, checkpoint)?;
    let (videos, classes) = load_videos(cfg)?;
    let (train, val) = split_videos(videos);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("evaluation needs non-empty train and val splits".into()));
    }
    let views = cfg.eval_views();
    let reports = match protocol {
        Protocol::Knn | Protocol::Multiview => {
            if cfg.eval.k > train.len() {
                return Err(Error::Config(format!("eval.k={} exceeds {} training videos", cfg.eval.k, train.len())));
            }
            vec![knn_report(cfg, &enc, &train, &val, classes, protocol == Protocol::Multiview)?]
        }
        Protocol::Linear => vec![linear_probe(&enc, &train, &val, &views, &cfg.eval.probe, classes)?.1],
        Protocol::Finetune => {
            let model = VideoClassifier::new(enc, classes);
            vec![finetune(model, &train, &val, &views, &cfg.eval.finetune)?.1]
        }
        Protocol::Semi => {
            if cfg.eval.semi_fractions.is_empty() {
                return Err(Error::Config("semi protocol needs eval.semi_fractions".into()));
            }
            cfg.eval
                .semi_fractions
                .iter()
                .map(|&f| {
                    let subset = semi_split(&train, f, cfg.eval.semi_seed)?;
                    let model = VideoClassifier::new(enc.clone(), classes);
                    let (_, mut r) = finetune(model, &subset, &val, &views, &cfg.eval.semi)?;
                    r.protocol = format!("semi@{f}");
                    if let serde_json::Value::Object(m) = &mut r.config {
                        m.insert("fraction".into(), f.into());
                        m.insert("semi_seed".into(), cfg.eval.semi_seed.into());
                        m.insert("train_videos".into(), subset.len().into());
                    }
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    std::fs::create_dir_all(cfg.output_path())?;
    let mut log = MetricsLog::open(&train::metrics_path(cfg))?;
    let spe = (train.len() / cfg.optim.batch_size).max(1) as u64;
    for r in &reports {
        log.append(&Record::Eval(EvalRecord {
            step,
            epoch: (step / spe) as usize,
            report: r.clone(),
        }))?;
    }
    Ok(reports)
}
