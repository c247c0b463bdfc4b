//! Append-only JSON-lines metrics log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_per_target: BTreeMap<String, f64>,
    pub aux_loss: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Training steps completed when the evaluation ran.
    pub step: u64,
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Train(TrainRecord),
    Eval(EvalRecord),
}

/// One record per line, flushed as written so the file can be read while
/// a run is live. Training steps must strictly increase.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
}

impl MetricsLog {
    /// Open for appending, continuing after any existing records.
    pub fn open(path: &Path) -> Result<Self> {
        let last_step = if path.exists() {
            last_train_step(&read_log(path)?)
        } else {
            None
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step,
        })
    }

    /// Rewrite the log keeping only records from steps before `step`, then
    /// open it for appending. Used when resuming from a checkpoint taken
    /// earlier than the log's end.
    pub fn open_truncated(path: &Path, step: u64) -> Result<Self> {
        if path.exists() {
            let kept: Vec<Record> = read_log(path)?
                .into_iter()
                .filter(|r| match r {
                    Record::Train(t) => t.step < step,
                    Record::Eval(e) => e.step <= step,
                })
                .collect();
            let mut text = String::new();
            for r in &kept {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            std::fs::write(path, text)?;
        }
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &Record) -> Result<()> {
        if let Record::Train(t) = record {
            if self.last_step.is_some_and(|s| t.step <= s) {
                return Err(Error::InvalidArgument(format!(
                    "metrics step {} does not follow {}",
                    t.step,
                    self.last_step.unwrap_or_default()
                )));
            }
            self.last_step = Some(t.step);
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

fn last_train_step(records: &[Record]) -> Option<u64> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Train(t) => Some(t.step),
            Record::Eval(_) => None,
        })
        .max()
}

/// Parse every complete line; a torn final line (live writer) is skipped.
pub fn read_log(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let n = lines.len();
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == n => break,
            Err(e) => return Err(Error::Format(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

pub fn train_records(records: &[Record]) -> Vec<&TrainRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Train(t) => Some(t),
            Record::Eval(_) => None,
        })
        .collect()
}

pub fn eval_records(records: &[Record]) -> Vec<&EvalRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Eval(e) => Some(e),
            Record::Train(_) => None,
        })
        .collect()
}
