//! Metrics files and side-by-side comparison of two runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{csv_err, Category, MemoryReport};
use crate::train::{RunReport, StepRecord};

pub const STEPS_CSV_HEADER: &str =
    "step,sweep,group,loss,lr,trainable_params,device_bytes,pgs_device_bytes,transfer_bytes";

/// Writes `steps.csv` (one row per step) and `memory.csv` (one row per
/// category plus `pgs` and `total`) into `dir`, creating it if needed.
pub fn emit_metrics(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let steps = dir.join("steps.csv");
    let file = File::create(&steps).map_err(|e| Error::io(&steps, e))?;
    write_steps_csv(&report.steps, BufWriter::new(file)).map_err(|e| with_path(e, &steps))?;
    let memory = dir.join("memory.csv");
    let file = File::create(&memory).map_err(|e| Error::io(&memory, e))?;
    report
        .memory
        .write_csv(BufWriter::new(file))
        .map_err(|e| with_path(e, &memory))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_steps_csv(records: &[StepRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    if records.is_empty() {
        w.write_record(STEPS_CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_steps_csv(input: impl std::io::Read) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != STEPS_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {:?}", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDelta {
    pub category: String,
    pub device_peak_a: u64,
    pub device_peak_b: u64,
    /// `b - a`.
    pub delta: i128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub task: String,
    pub label_a: String,
    pub label_b: String,
    pub final_loss: (f64, f64),
    pub eval_loss: (f64, f64),
    pub accuracy: (Option<f64>, Option<f64>),
    pub memory: Vec<CategoryDelta>,
    pub peak_transfer: (u64, u64),
    /// Rows of `(step, loss_a, loss_b)`; a side that ran fewer steps is empty.
    pub loss_curves: Vec<(usize, Option<f64>, Option<f64>)>,
}

impl ComparisonReport {
    pub fn delta(&self, category: &str) -> Option<i128> {
        self.memory.iter().find(|d| d.category == category).map(|d| d.delta)
    }

    /// Device-peak delta summed over gradients and optimizer state.
    pub fn grad_state_delta(&self) -> i128 {
        [Category::Grad, Category::State]
            .iter()
            .filter_map(|c| self.delta(c.name()))
            .sum()
    }

    pub fn write_loss_curves(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss_a", "loss_b"]).map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for &(step, a, b) in &self.loss_curves {
            w.write_record([step.to_string(), fmt(a), fmt(b)]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Human-readable summary table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        s += &format!("task: {}\n", self.task);
        s += &format!("{:<22}{:>16}{:>16}{:>16}\n", "", self.label_a, self.label_b, "delta");
        s += &format!(
            "{:<22}{:>16.6}{:>16.6}{:>16.6}\n",
            "final train loss",
            self.final_loss.0,
            self.final_loss.1,
            self.final_loss.1 - self.final_loss.0
        );
        s += &format!(
            "{:<22}{:>16.6}{:>16.6}{:>16.6}\n",
            "eval loss",
            self.eval_loss.0,
            self.eval_loss.1,
            self.eval_loss.1 - self.eval_loss.0
        );
        s += &format!(
            "{:<22}{:>16}{:>16}\n",
            "eval accuracy",
            opt(self.accuracy.0),
            opt(self.accuracy.1)
        );
        for d in &self.memory {
            s += &format!(
                "{:<22}{:>16}{:>16}{:>16}\n",
                format!("device peak {}", d.category),
                d.device_peak_a,
                d.device_peak_b,
                d.delta
            );
        }
        s += &format!(
            "{:<22}{:>16}{:>16}{:>16}\n",
            "peak step transfer",
            self.peak_transfer.0,
            self.peak_transfer.1,
            self.peak_transfer.1 as i128 - self.peak_transfer.0 as i128
        );
        s
    }
}

fn label(r: &RunReport) -> String {
    r.name.clone().unwrap_or_else(|| format!("{:?}", r.mode).to_lowercase())
}

fn peak_transfer(m: &MemoryReport) -> u64 {
    m.row("total").map_or(0, |r| r.peak_transfer_bytes)
}

pub fn compare_runs(a: &RunReport, b: &RunReport) -> Result<ComparisonReport> {
    if a.config.task != b.config.task {
        return Err(Error::Comparison(format!("tasks differ: {} vs {}", a.task, b.task)));
    }
    if a.config.arch != b.config.arch {
        return Err(Error::Comparison("architectures differ".into()));
    }
    let memory = a
        .memory
        .rows
        .iter()
        .map(|ra| {
            let pb = b.memory.row(&ra.category).map_or(0, |r| r.device_peak_bytes);
            CategoryDelta {
                category: ra.category.clone(),
                device_peak_a: ra.device_peak_bytes,
                device_peak_b: pb,
                delta: pb as i128 - ra.device_peak_bytes as i128,
            }
        })
        .collect();
    let len = a.steps.len().max(b.steps.len());
    let loss_curves = (0..len)
        .map(|i| (i + 1, a.steps.get(i).map(|r| r.loss), b.steps.get(i).map(|r| r.loss)))
        .collect();
    Ok(ComparisonReport {
        task: a.task.clone(),
        label_a: label(a),
        label_b: label(b),
        final_loss: (a.metrics.final_train_loss, b.metrics.final_train_loss),
        eval_loss: (a.metrics.eval_loss, b.metrics.eval_loss),
        accuracy: (a.metrics.eval_accuracy, b.metrics.eval_accuracy),
        memory,
        peak_transfer: (peak_transfer(&a.memory), peak_transfer(&b.memory)),
        loss_curves,
    })
}
