//! Line-delimited dataset files.
//!
//! Line 0 is a header, then one record per trajectory, then an optional
//! normalizer record. Every record carries the format version.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DemoDataset, Normalizer, Split, Trajectory};
use super::task::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::fmt::{parse_record, to_line};

pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        version: u32,
        task: TaskSpec,
        split: Split,
        count: usize,
    },
    Trajectory {
        version: u32,
        task: TaskKind,
        #[serde(flatten)]
        traj: Trajectory,
    },
    Normalizer {
        version: u32,
        #[serde(flatten)]
        stats: Normalizer,
    },
}

impl Record {
    fn version(&self) -> u32 {
        match self {
            Record::Header { version, .. }
            | Record::Trajectory { version, .. }
            | Record::Normalizer { version, .. } => *version,
        }
    }
}

pub fn save_dataset(ds: &DemoDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |r: &Record| w.write_all(to_line(r).as_bytes());
    let header = Record::Header {
        version: DATASET_VERSION,
        task: ds.task,
        split: ds.split,
        count: ds.trajectories.len(),
    };
    emit(&header).map_err(|e| Error::io(path, e))?;
    for t in &ds.trajectories {
        let r = Record::Trajectory {
            version: DATASET_VERSION,
            task: ds.task.kind,
            traj: t.clone(),
        };
        emit(&r).map_err(|e| Error::io(path, e))?;
    }
    if let Some(n) = &ds.normalizer {
        let r = Record::Normalizer {
            version: DATASET_VERSION,
            stats: n.clone(),
        };
        emit(&r).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |record: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        record,
        reason,
    };
    let mut header = None;
    let mut trajectories = Vec::new();
    let mut normalizer = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = parse_record(&line, path, i)?;
        if rec.version() != DATASET_VERSION {
            return Err(bad(i, format!("unsupported version {}", rec.version())));
        }
        match rec {
            Record::Header {
                task, split, count, ..
            } if i == 0 => header = Some((task, split, count)),
            Record::Trajectory { task, traj, .. } => {
                let Some((spec, _, _)) = &header else {
                    return Err(bad(i, "trajectory before header".into()));
                };
                if task != spec.kind {
                    return Err(bad(i, format!("task {} differs from header", task.name())));
                }
                if traj.states.len() != traj.actions.len() + 1 {
                    return Err(bad(i, "states must be one longer than actions".into()));
                }
                trajectories.push(traj);
            }
            Record::Normalizer { stats, .. } if normalizer.is_none() => normalizer = Some(stats),
            _ => return Err(bad(i, "unexpected record".into())),
        }
    }
    let (task, split, count) = header.ok_or_else(|| bad(0, "missing header".into()))?;
    if trajectories.len() != count {
        return Err(bad(
            trajectories.len() + 1,
            format!("header declares {count} trajectories, found {}", trajectories.len()),
        ));
    }
    Ok(DemoDataset {
        task,
        trajectories,
        normalizer,
        split,
    })
}
