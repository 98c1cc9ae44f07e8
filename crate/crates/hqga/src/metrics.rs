//! Per-epoch metrics CSV and the ablation results table.

use std::fs;
use std::path::Path;

use hqga_core::training::{AblationTable, EpochRecord};

use crate::dataset_io::{read_json, write_json};
use crate::error::{IoError, Result};

pub const CSV_HEADER: [&str; 4] = ["epoch", "stage", "loss", "val_acc"];

/// Streams epoch records to a CSV file, flushing after every row so a
/// crashed run still leaves its history behind.
pub struct MetricsWriter {
    inner: csv::Writer<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        }
        let inner = csv::WriterBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_err(path, e))?;
        Ok(Self { inner, path: path.to_path_buf() })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        self.inner.serialize(record).map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().map_err(|e| IoError::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    IoError::json(path, format!("csv: {e}"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(IoError::json(path, format!("unexpected header {header:?}")));
    }
    reader.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_ablation(table: &AblationTable, path: &Path) -> Result<()> {
    write_json(path, table)
}

pub fn read_ablation(path: &Path) -> Result<AblationTable> {
    read_json(path)
}
