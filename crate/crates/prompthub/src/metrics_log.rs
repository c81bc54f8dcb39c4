//! Newline-delimited JSON training log.
//!
//! The first line carries the resolved configuration; every optimizer step
//! and every epoch adds one record. The file is rewritten atomically on
//! each flush.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AppError, Result};
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Config {
        config: Value,
    },
    Step {
        step: usize,
        epoch: usize,
        l_p: f64,
        l_s: f64,
        l_u: f64,
        total: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        train_total: f64,
        /// mIoU for mask tasks, MSE for colorization.
        val_metric: f64,
        best: bool,
    },
}

pub struct MetricsLog {
    path: Option<PathBuf>,
    text: String,
    records: Vec<Record>,
}

impl MetricsLog {
    /// `path = None` keeps the log in memory only.
    pub fn new(path: Option<&Path>, config: Value) -> Result<Self> {
        let mut log = MetricsLog {
            path: path.map(Path::to_path_buf),
            text: String::new(),
            records: Vec::new(),
        };
        log.push(Record::Config { config })?;
        Ok(log)
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        self.text.push_str(&serde_json::to_string(&r)?);
        self.text.push('\n');
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        match &self.path {
            Some(p) => fsutil::write_atomic(p, self.text.as_bytes()),
            None => Ok(()),
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

pub fn parse(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::Data(format!("log line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| AppError::Data(format!("{}: not UTF-8", path.display())))?;
    parse(&text)
}
