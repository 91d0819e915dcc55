//! On-disk formats: transition CSVs, run-log CSVs and JSON checkpoints.
//!
//! Floats are written in shortest round-trip form, so reading a file back gives
//! the exact same values and equal inputs produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::ClosedLoopLog;
use crate::plant::{Transition, TransitionDataset};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("missing {path}; run `{producer}` first")]
    Missing { path: PathBuf, producer: &'static str },
}

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TransitionRow {
    x1: f64,
    x2: f64,
    u1: f64,
    u2: f64,
    x1_next: f64,
    x2_next: f64,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err(path))
}

/// Columns `x1,x2,u1,u2,x1_next,x2_next`; mismatch targets are not stored.
pub fn write_dataset(path: &Path, data: &TransitionDataset) -> Result<()> {
    write_csv(
        path,
        data.records.iter().map(|r| TransitionRow {
            x1: r.x[0],
            x2: r.x[1],
            u1: r.u[0],
            u2: r.u[1],
            x1_next: r.x_next[0],
            x2_next: r.x_next[1],
        }),
    )
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    let rows: Vec<TransitionRow> = read_csv(path)?;
    Ok(TransitionDataset {
        records: rows
            .into_iter()
            .map(|r| Transition {
                x: [r.x1, r.x2],
                u: [r.u1, r.u2],
                x_next: [r.x1_next, r.x2_next],
                g: None,
            })
            .collect(),
    })
}

/// One closed-loop step as written to the run CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub k: usize,
    pub x1: f64,
    pub x2: f64,
    pub u1: f64,
    pub u2: f64,
    pub g1_real: f64,
    pub g2_real: f64,
    pub g1_mean: f64,
    pub g2_mean: f64,
    pub g1_std: f64,
    pub g2_std: f64,
    pub scen_lo_g1: f64,
    pub scen_hi_g1: f64,
    pub scen_lo_g2: f64,
    pub scen_hi_g2: f64,
    pub contained: u8,
    pub cost_step: f64,
    pub viol_x: f64,
    pub viol_u: f64,
    pub solver_iters: usize,
    pub solver_cost: f64,
}

pub fn run_rows(log: &ClosedLoopLog) -> Vec<RunRow> {
    log.steps
        .iter()
        .map(|s| RunRow {
            k: s.k,
            x1: s.x[0],
            x2: s.x[1],
            u1: s.u[0],
            u2: s.u[1],
            g1_real: s.g_real[0],
            g2_real: s.g_real[1],
            g1_mean: s.g_mean[0],
            g2_mean: s.g_mean[1],
            g1_std: s.g_std[0],
            g2_std: s.g_std[1],
            scen_lo_g1: s.envelope_lo[0],
            scen_hi_g1: s.envelope_hi[0],
            scen_lo_g2: s.envelope_lo[1],
            scen_hi_g2: s.envelope_hi[1],
            contained: s.contained as u8,
            cost_step: s.cost_step,
            viol_x: s.viol_x,
            viol_u: s.viol_u,
            solver_iters: s.solver_iters,
            solver_cost: s.solver_cost,
        })
        .collect()
}

pub fn write_run_log(path: &Path, log: &ClosedLoopLog) -> Result<()> {
    write_csv(path, run_rows(log))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// File names inside an output directory, with the command that produces each.
pub mod names {
    pub const CONFIG: &str = "config.json";
    pub const DATA: &str = "data.csv";
    pub const HELDOUT: &str = "heldout.csv";
    pub const NOMINAL: &str = "nominal.json";
    pub const NOMINAL_REPORT: &str = "nominal_report.json";
    pub const BNN: &str = "bnn.json";
    pub const BNN_REPORT: &str = "bnn_report.json";
    pub const META: &str = "meta.json";
    pub const META_REPORT: &str = "meta_report.json";
    pub const COMPARISON: &str = "comparison.json";
    pub const PLOTS: &str = "plots";

    pub fn run_csv(model: &str) -> String {
        format!("run_{model}.csv")
    }

    pub fn run_summary(model: &str) -> String {
        format!("run_{model}.json")
    }

    pub fn producer(name: &str) -> &'static str {
        match name {
            DATA | HELDOUT => "collect",
            NOMINAL | NOMINAL_REPORT => "fit-nominal",
            BNN | BNN_REPORT => "train-bnn",
            META | META_REPORT => "meta-train",
            COMPARISON => "compare",
            _ => "run",
        }
    }
}

/// An output directory holding every artifact of a pipeline.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    /// Path of an artifact that must already exist.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(IoError::Missing {
                path: p,
                producer: names::producer(name),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lpv::LpvModel;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let data = TransitionDataset {
            records: vec![
                Transition { x: [0.1, 1.0 / 3.0], u: [-0.5, 1e-300], x_next: [f64::MIN_POSITIVE, -2.5], g: None },
                Transition { x: [-4.0, 9.999999999999998], u: [0.0, -0.0], x_next: [1.0, 2.0], g: None },
            ],
        };
        write_dataset(&p, &data).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, data);
        let first = std::fs::read(&p).unwrap();
        write_dataset(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("x1,x2,u1,u2,x1_next,x2_next\n"));
    }

    #[test]
    fn json_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.json");
        let mut m = LpvModel::zeros();
        m.a[1][2] = 0.1 + 0.2;
        m.b[2][3] = -1.0 / 7.0;
        write_json(&p, &m).unwrap();
        assert_eq!(read_json::<LpvModel>(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"A\"") && text.contains("\"B\""));
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArtifactDir::new(dir.path());
        let e = a.require(names::META).unwrap_err().to_string();
        assert!(e.contains("meta-train"), "{e}");
        let e = a.require(names::DATA).unwrap_err().to_string();
        assert!(e.contains("collect"), "{e}");
    }
}
