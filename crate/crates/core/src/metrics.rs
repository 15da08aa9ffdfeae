//! Metric files written by a run directory.
//!
//! `epochs.jsonl` gets one record per epoch as training proceeds,
//! `epochs.csv` holds the same rows for plotting, and `summary.json` the
//! final result. Wall-clock times go to `timing.json` so the other files stay
//! byte-identical across repeated runs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causes::PrototypeSummary;
use crate::error::MetricsError;
use crate::train::{CauseRecovery, EpochRecord, Method, RunOutput};

pub const EPOCHS_JSONL: &str = "epochs.jsonl";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMING_JSON: &str = "timing.json";

/// Append-only epoch log. Creating it truncates any earlier file.
pub struct EpochLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EpochLog {
    pub fn create(dir: &Path) -> Result<Self, MetricsError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(EPOCHS_JSONL);
        Ok(Self {
            out: BufWriter::new(File::create(&path)?),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes and flushes one line.
    pub fn append(&mut self, rec: &EpochRecord) -> Result<(), MetricsError> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochRecord>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MetricsError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

const CSV_HEADER: &str =
    "run,epoch,phase,loss_ce,loss_o,loss_v,loss_g,loss_total,train_acc,val_loss,val_acc,test_acc,prototypes,delta";

pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let phase = serde_json::to_value(r.phase).expect("phase serializes");
        let l = &r.train_loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.epoch,
            phase.as_str().unwrap_or_default(),
            l.ce,
            l.o,
            l.v,
            l.g,
            l.total,
            r.train_acc,
            r.val_loss,
            r.val_acc,
            r.test_acc,
            r.prototypes,
            r.delta.map(|d| d.to_string()).unwrap_or_default(),
        ));
    }
    s
}

pub fn write_epochs_csv(dir: &Path, records: &[EpochRecord]) -> Result<(), MetricsError> {
    fs::write(dir.join(EPOCHS_CSV), epochs_csv(records))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), MetricsError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub final_val_acc: f64,
    pub extractions: Vec<PrototypeSummary>,
    pub cause_recovery: Option<CauseRecovery>,
}

impl RunSummary {
    pub fn new(out: &RunOutput, method: Method, seed: u64) -> Self {
        Self {
            run: out.run.clone(),
            method,
            seed,
            epochs: out.epochs.len(),
            best_epoch: out.best_epoch,
            best_val_acc: out.best_val_acc,
            test_acc: out.test_acc,
            final_val_acc: out.epochs.last().map_or(0.0, |e| e.val_acc),
            extractions: out.extractions.clone(),
            cause_recovery: out.cause_recovery,
        }
    }
}

/// Mean and sample standard error of `values`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Seconds per labelled stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
}

impl Timing {
    pub fn record(&mut self, label: impl Into<String>, seconds: f64) {
        *self.seconds.entry(label.into()).or_default() += seconds;
    }
}
