//! Run reports: per-epoch trajectories, layerwise tables and their JSON/CSV
//! encodings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sparsity: f64,
    pub train_loss: f64,
    /// `None` when no held-out rows are available.
    pub val_accuracy: Option<f64>,
}

/// One row of a layerwise sparsity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_index: usize,
    pub params: usize,
    pub kept: usize,
    pub keep_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: usize,
    pub records: Vec<EpochRecord>,
    pub pre_finetune_accuracy: Option<f64>,
    pub post_finetune_accuracy: Option<f64>,
    pub layerwise: Vec<LayerRow>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.epochs += 1;
        self.records.push(record);
    }

    /// Appends another phase (e.g. finetuning after mining), renumbering its
    /// epochs to continue this report's count.
    pub fn extend(&mut self, other: RunReport) {
        for mut r in other.records {
            r.epoch += self.epochs;
            self.records.push(r);
        }
        self.epochs += other.epochs;
        self.warnings.extend(other.warnings);
        if other.pre_finetune_accuracy.is_some() {
            self.pre_finetune_accuracy = other.pre_finetune_accuracy;
        }
        if other.post_finetune_accuracy.is_some() {
            self.post_finetune_accuracy = other.post_finetune_accuracy;
        }
        if !other.layerwise.is_empty() {
            self.layerwise = other.layerwise;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `epoch,sparsity,train_loss,val_accuracy`
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,sparsity,train_loss,val_accuracy\n");
        for r in &self.records {
            let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.sparsity, r.train_loss, acc);
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        fs::write(csv_path, self.metrics_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

/// `layer_index,params,kept,keep_fraction`
pub fn layerwise_csv(rows: &[LayerRow]) -> String {
    let mut out = String::from("layer_index,params,kept,keep_fraction\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.layer_index, r.params, r.kept, r.keep_fraction
        );
    }
    out
}
