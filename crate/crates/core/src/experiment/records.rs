use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::cache::{content_hash, io_err};
use super::ExperimentError;

/// Outcome of one `(n, seed)` cell of a convergence run. Metrics a run
/// kind does not produce are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub n: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub optimized_value: Option<f64>,
    pub optimized_std_error: Option<f64>,
    pub epsilon: Option<f64>,
    pub epsilon_std_error: Option<f64>,
    pub w2_terminal: Option<f64>,
    pub w2_mid: Option<f64>,
    pub coupling_gap: Option<f64>,
    #[serde(default)]
    pub theta: Vec<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

impl CellRecord {
    pub fn empty(n: usize, seed_index: usize, seed: u64) -> Self {
        Self {
            n,
            seed_index,
            seed,
            optimized_value: None,
            optimized_std_error: None,
            epsilon: None,
            epsilon_std_error: None,
            w2_terminal: None,
            w2_mid: None,
            coupling_gap: None,
            theta: Vec::new(),
            error: None,
        }
    }

    pub fn failed(n: usize, seed_index: usize, seed: u64, err: &dyn std::fmt::Display) -> Self {
        Self {
            error: Some(err.to_string()),
            ..Self::empty(n, seed_index, seed)
        }
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }

    pub fn checksum(&self) -> String {
        content_hash(self)
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    config_hash: String,
    record: CellRecord,
    checksum: String,
}

/// Append-only JSON-lines log of finished cells, used to resume runs.
pub struct RecordStore {
    path: PathBuf,
    config_hash: String,
    file: Mutex<File>,
}

impl RecordStore {
    /// Opens `path`, returning the store and every complete record written
    /// under the same configuration whose checksum verifies. Other lines
    /// are ignored and will be recomputed.
    pub fn open(
        path: impl Into<PathBuf>,
        config_hash: &str,
    ) -> Result<(Self, BTreeMap<(usize, usize), CellRecord>), ExperimentError> {
        let path = path.into();
        let mut done = BTreeMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(io_err(&path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_err(&path))?;
                let Ok(l) = serde_json::from_str::<Line>(&line) else {
                    continue;
                };
                if l.config_hash == config_hash
                    && l.record.is_complete()
                    && l.record.checksum() == l.checksum
                {
                    done.insert((l.record.n, l.record.seed_index), l.record);
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok((
            Self {
                path,
                config_hash: config_hash.to_string(),
                file: Mutex::new(file),
            },
            done,
        ))
    }

    pub fn append(&self, rec: &CellRecord) -> Result<(), ExperimentError> {
        let line = serde_json::to_string(&Line {
            config_hash: self.config_hash.clone(),
            checksum: rec.checksum(),
            record: rec.clone(),
        })
        .expect("serializable record");
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(io_err(&self.path))
    }

    /// Replaces the log with `records` in the given order.
    pub fn rewrite(&self, records: &[CellRecord]) -> Result<(), ExperimentError> {
        let mut text = String::new();
        for rec in records {
            text.push_str(
                &serde_json::to_string(&Line {
                    config_hash: self.config_hash.clone(),
                    checksum: rec.checksum(),
                    record: rec.clone(),
                })
                .expect("serializable record"),
            );
            text.push('\n');
        }
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        std::fs::write(&self.path, text).map_err(io_err(&self.path))?;
        *f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    n: usize,
    seed_index: usize,
    seed: u64,
    optimized_value: Option<f64>,
    optimized_std_error: Option<f64>,
    epsilon: Option<f64>,
    epsilon_std_error: Option<f64>,
    w2_terminal: Option<f64>,
    w2_mid: Option<f64>,
    coupling_gap: Option<f64>,
    error: Option<&'a str>,
}

pub fn write_records_csv(records: &[CellRecord], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(CsvRow {
            n: r.n,
            seed_index: r.seed_index,
            seed: r.seed,
            optimized_value: r.optimized_value,
            optimized_std_error: r.optimized_std_error,
            epsilon: r.epsilon,
            epsilon_std_error: r.epsilon_std_error,
            w2_terminal: r.w2_terminal,
            w2_mid: r.w2_mid,
            coupling_gap: r.coupling_gap,
            error: r.error.as_deref(),
        })
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}
