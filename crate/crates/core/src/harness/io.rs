//! Artifact files: JSONL episode datasets, JSON documents, CSV tables.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::agents::{TrajectoryRecord, TRAJECTORY_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Fails with a pointer to the producing subcommand if `path` is absent.
pub fn require(path: &Path, subcommand: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), subcommand })
    }
}

/// One JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

/// Reads an episode dataset and checks its schema version.
pub fn read_episodes<T: Scalar>(path: &Path) -> Result<Vec<TrajectoryRecord<T>>> {
    let eps: Vec<TrajectoryRecord<T>> = read_jsonl(path)?;
    if let Some(ep) = eps.iter().find(|e| e.schema_version != TRAJECTORY_SCHEMA_VERSION) {
        return Err(Error::InvalidInput(format!(
            "{}: episode {} has schema_version {}, expected {TRAJECTORY_SCHEMA_VERSION}",
            path.display(),
            ep.seed,
            ep.schema_version
        )));
    }
    Ok(eps)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display()))))
        .collect()
}

/// Standard artifact locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn train_y(&self) -> PathBuf {
        self.root.join("data/train_y.jsonl")
    }
    pub fn train_sf(&self) -> PathBuf {
        self.root.join("data/train_sf.jsonl")
    }
    pub fn cal(&self) -> PathBuf {
        self.root.join("data/cal.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("data/test.jsonl")
    }
    pub fn predictor(&self) -> PathBuf {
        self.root.join("models/predictor.json")
    }
    pub fn predictor_curve(&self) -> PathBuf {
        self.root.join("models/predictor_curve.csv")
    }
    pub fn conformal_radii(&self) -> PathBuf {
        self.root.join("radii/conformal.json")
    }
    pub fn gaussian_radii(&self) -> PathBuf {
        self.root.join("radii/gaussian.json")
    }
    /// Filter trained against the radii of `method` ("conformal" or "gaussian").
    pub fn filter(&self, method: &str) -> PathBuf {
        self.root.join(format!("models/filter_{method}.json"))
    }
    pub fn filter_curve(&self, method: &str) -> PathBuf {
        self.root.join(format!("models/filter_{method}_curve.csv"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval/metrics.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }
    pub fn coverage_csv(&self) -> PathBuf {
        self.root.join("reports/coverage.csv")
    }
    pub fn coverage_svg(&self) -> PathBuf {
        self.root.join("reports/coverage.svg")
    }
    pub fn shift(&self) -> PathBuf {
        self.root.join("reports/shift.json")
    }
}
