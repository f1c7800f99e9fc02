//! Transition datasets `(s, a, s')` with CSV persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::grid::StateActionGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
}

impl Bounds {
    pub fn from_grid(grid: &StateActionGrid) -> Self {
        Self {
            state_lo: grid.state_axes().iter().map(|a| a.lo).collect(),
            state_hi: grid.state_axes().iter().map(|a| a.hi).collect(),
            action_lo: grid.action_axes().iter().map(|a| a.lo).collect(),
            action_hi: grid.action_axes().iter().map(|a| a.hi).collect(),
        }
    }

    pub fn contains(&self, state: &[f64], action: &[f64]) -> bool {
        let inside = |x: &[f64], lo: &[f64], hi: &[f64]| {
            x.len() == lo.len() && x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *l <= *v && *v <= *h)
        };
        inside(state, &self.state_lo, &self.state_hi) && inside(action, &self.action_lo, &self.action_hi)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Descriptor of the generating policy.
    #[serde(default)]
    pub policy: serde_json::Value,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub bounds: Option<Bounds>,
}

/// Transitions stored row-major as `[s.., a.., s'..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    data: Vec<f64>,
    meta: DatasetMeta,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize, meta: DatasetMeta) -> Self {
        Self { state_dim, action_dim, data: Vec::new(), meta }
    }

    fn stride(&self) -> usize {
        2 * self.state_dim + self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Appends a record, rejecting it when it falls outside the declared bounds.
    pub fn push(&mut self, state: &[f64], action: &[f64], next_state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim || next_state.len() != self.state_dim {
            return Err(LdmError::DimensionMismatch { expected: self.state_dim, got: state.len() });
        }
        if action.len() != self.action_dim {
            return Err(LdmError::DimensionMismatch { expected: self.action_dim, got: action.len() });
        }
        if let Some(b) = &self.meta.bounds {
            if !b.contains(state, action) {
                return Err(LdmError::RecordOutOfBounds { row: self.len() });
            }
        }
        self.data.extend_from_slice(state);
        self.data.extend_from_slice(action);
        self.data.extend_from_slice(next_state);
        Ok(())
    }

    fn row(&self, i: usize) -> &[f64] {
        let k = self.stride();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.row(i)[..self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.row(i)[self.state_dim..self.state_dim + self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.row(i)[self.state_dim + self.action_dim..]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64])> + '_ {
        (0..self.len()).map(move |i| (self.state(i), self.action(i), self.next_state(i)))
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (0..self.state_dim).map(|d| format!("s{d}")).collect();
        h.extend((0..self.action_dim).map(|d| format!("a{d}")));
        h.extend((0..self.state_dim).map(|d| format!("sp{d}")));
        h
    }

    /// Writes the CSV and a JSON sidecar holding the metadata.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(self.header()).map_err(csv_err)?;
        for i in 0..self.len() {
            w.write_record(self.row(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        w.flush()?;
        let side = BufWriter::new(File::create(path.with_extension("json"))?);
        serde_json::to_writer_pretty(side, &self.meta)?;
        Ok(())
    }

    /// Reads a dataset CSV. Metadata comes from the sidecar when present;
    /// `bounds` overrides the sidecar bounds. Out-of-bounds rows are errors.
    pub fn read_csv(path: &Path, bounds: Option<&Bounds>) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            LdmError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let mut r = csv::Reader::from_reader(BufReader::new(file));
        let header = r.headers().map_err(csv_err)?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
                })
                .count()
        };
        let (ds, da) = (count("s"), count("a"));
        if ds == 0 || da == 0 || count("sp") != ds || header.len() != 2 * ds + da {
            return Err(LdmError::Parse(format!(
                "{}: header must be s0..sn,a0..am,sp0..spn",
                path.display()
            )));
        }
        let side = path.with_extension("json");
        let mut meta: DatasetMeta = if side.exists() {
            serde_json::from_reader(BufReader::new(File::open(&side)?))?
        } else {
            DatasetMeta::default()
        };
        if let Some(b) = bounds {
            meta.bounds = Some(b.clone());
        }
        let mut out = Self::new(ds, da, meta);
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| LdmError::Parse(format!("{}: row {}: {e}", path.display(), row + 1)))?;
            if vals.len() != 2 * ds + da {
                return Err(LdmError::Parse(format!("{}: row {}: wrong column count", path.display(), row + 1)));
            }
            out.push(&vals[..ds], &vals[ds..ds + da], &vals[ds + da..])
                .map_err(|e| match e {
                    LdmError::RecordOutOfBounds { .. } => LdmError::RecordOutOfBounds { row: row + 1 },
                    other => other,
                })?;
        }
        Ok(out)
    }
}

fn csv_err(e: csv::Error) -> LdmError {
    LdmError::Parse(e.to_string())
}
