//! Run artifacts: metrics CSV, binary checkpoints, genotype JSON and the
//! output directory guard.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use msgdas_core::engine::{EpochMetrics, SearchState};
use msgdas_core::searchspace::Genotype;
use serde::{Deserialize, Serialize};

use crate::config::SearchConfig;
use crate::error::{format_err, io_err, HarnessError, Result};

pub const GENOTYPE_FILE: &str = "genotype.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.json";

/// Appends one row per epoch and flushes after each row, so an aborted run
/// keeps every completed epoch.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(file),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::WriterBuilder::new().has_headers(fresh).from_writer(file),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        self.inner.serialize(m).map_err(|e| format_err(&self.path, e))?;
        self.inner.flush().map_err(io_err(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| format_err(path, e)))
        .collect()
}

/// Keeps only the rows of epochs `1..=epochs`; used when resuming from a
/// checkpoint older than the last logged row.
pub fn truncate_metrics(path: &Path, epochs: usize) -> Result<()> {
    let rows = if path.exists() { read_metrics(path)? } else { Vec::new() };
    let mut w = MetricsWriter::create(path)?;
    for m in rows.iter().filter(|m| m.epoch <= epochs) {
        w.write(m)?;
    }
    Ok(())
}

/// Everything needed to continue a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SearchConfig,
    pub state: SearchState<f32>,
}

impl Checkpoint {
    /// Written to a sibling temporary file first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        bincode::serialize_into(&mut w, self).map_err(|e| format_err(&tmp, e))?;
        w.flush().map_err(io_err(&tmp))?;
        drop(w);
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        bincode::deserialize_from(BufReader::new(file)).map_err(|e| format_err(path, e))
    }
}

pub fn write_genotype(path: &Path, g: &Genotype) -> Result<()> {
    let mut text = serde_json::to_string_pretty(g).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses and validates a genotype file.
pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let g: Genotype = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
    g.validate().map_err(|e| format_err(path, e))?;
    Ok(g)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Creates `dir` if needed and checks that none of `files` exist in it
/// unless `force` is set, in which case they are removed.
pub fn claim_outputs(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for name in files {
        let p = dir.join(name);
        if p.exists() {
            if !force {
                return Err(HarnessError::OutputExists(p));
            }
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    Ok(())
}
