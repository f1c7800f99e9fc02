//! Per-cell scalar fields (density, energy, LDM) and their sublevel sets.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::grid::{Interpolation, StateActionGrid};

/// Default density floor; energies of cells below it are replaced by the sentinel.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Sentinel energy for a given floor: the largest finite energy plus 100.
pub fn sentinel_for_floor(floor: f64) -> f64 {
    -floor.ln() + 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    Density,
    Energy,
    Ldm,
    Generic,
}

impl fmt::Display for FieldRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FieldRole::Density => "density",
            FieldRole::Energy => "energy",
            FieldRole::Ldm => "ldm",
            FieldRole::Generic => "generic",
        };
        f.write_str(s)
    }
}

/// Anything that can be evaluated at a continuous state-action pair.
pub trait StateActionFunction: Send + Sync {
    fn eval(&self, state: &[f64], action: &[f64]) -> f64;

    /// Minimum over a finite action set, with the lowest minimizing index.
    fn min_over(&self, state: &[f64], actions: &[Vec<f64>]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, a) in actions.iter().enumerate() {
            let v = self.eval(state, a);
            if v < best.0 {
                best = (v, i);
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<StateActionGrid>,
    values: Vec<f64>,
    role: FieldRole,
    sentinel: f64,
    interpolation: Interpolation,
}

impl ScalarField {
    pub fn new(
        grid: Arc<StateActionGrid>,
        values: Vec<f64>,
        role: FieldRole,
        sentinel: f64,
    ) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LdmError::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        if !sentinel.is_finite() {
            return Err(LdmError::InvalidParameter("sentinel must be finite".into()));
        }
        match role {
            FieldRole::Density => {
                if let Some(i) = values.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(LdmError::InvalidParameter(format!(
                        "density value at cell {i} is {} (must be finite and nonnegative)",
                        values[i]
                    )));
                }
            }
            FieldRole::Energy | FieldRole::Ldm => {
                if let Some(i) = values.iter().position(|v| !(*v <= sentinel)) {
                    return Err(LdmError::InvalidParameter(format!(
                        "{role} value at cell {i} is {} (must not exceed the sentinel {sentinel})",
                        values[i]
                    )));
                }
            }
            FieldRole::Generic => {}
        }
        Ok(Self { grid, values, role, sentinel, interpolation: Interpolation::default() })
    }

    pub fn constant(grid: Arc<StateActionGrid>, value: f64, role: FieldRole, sentinel: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n], role, sentinel)
    }

    pub fn from_fn(
        grid: Arc<StateActionGrid>,
        role: FieldRole,
        sentinel: f64,
        f: impl Fn(&[f64], &[f64]) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        let mut s = vec![0.0; grid.state_dim()];
        let mut a = vec![0.0; grid.action_dim()];
        for si in 0..grid.n_states() {
            grid.state_coords_into(si, &mut s);
            for ai in 0..grid.n_actions() {
                grid.action_coords_into(ai, &mut a);
                values.push(f(&s, &a));
            }
        }
        Self::new(grid, values, role, sentinel)
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn with_role(mut self, role: FieldRole) -> Result<Self> {
        let f = Self::new(self.grid.clone(), std::mem::take(&mut self.values), role, self.sentinel)?;
        Ok(f.with_interpolation(self.interpolation))
    }

    pub fn grid(&self) -> &StateActionGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<StateActionGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn sentinel(&self) -> f64 {
        self.sentinel
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Value assigned to points outside the grid.
    pub fn off_domain_value(&self) -> f64 {
        match self.role {
            FieldRole::Density => 0.0,
            _ => self.sentinel,
        }
    }

    pub fn require_role(&self, expected: &[FieldRole]) -> Result<()> {
        if expected.contains(&self.role) {
            Ok(())
        } else {
            let names: Vec<String> = expected.iter().map(|r| r.to_string()).collect();
            Err(LdmError::WrongRole { expected: names.join(" or "), got: self.role.to_string() })
        }
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(LdmError::GridMismatch)
        }
    }

    /// Value at an arbitrary point, interpolated per the field's rule.
    pub fn lookup(&self, state: &[f64], action: &[f64]) -> f64 {
        let mut acc = 0.0;
        let inside = self
            .grid
            .for_each_corner(state, action, self.interpolation, |i, w| acc += w * self.values[i]);
        if inside {
            acc
        } else {
            self.off_domain_value()
        }
    }

    /// Minimum over grid actions of the field at `state`, with the index of
    /// the lowest minimizing action. Off-domain states give the off-domain
    /// value and action 0.
    pub fn min_over_actions(&self, state: &[f64]) -> (f64, usize) {
        let Some(st) = self.grid.state_stencil(state, self.interpolation) else {
            return (self.off_domain_value(), 0);
        };
        let na = self.grid.n_actions();
        let mut best = (f64::INFINITY, 0);
        for a in 0..na {
            let v: f64 = st.iter().map(|(s, w)| w * self.values[s * na + a]).sum();
            if v < best.0 {
                best = (v, a);
            }
        }
        best
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn sublevel_set(&self, threshold: f64) -> Result<SublevelSet<'_>> {
        self.require_role(&[FieldRole::Energy, FieldRole::Ldm])?;
        Ok(SublevelSet::new(self, threshold))
    }

    pub fn sidecar(&self) -> FieldSidecar {
        FieldSidecar {
            grid: (*self.grid).clone(),
            role: self.role,
            sentinel: self.sentinel,
            interpolation: self.interpolation,
            metadata: serde_json::Value::Null,
        }
    }

    /// Writes `path` as CSV (`idx,s0..,a0..,value`) and a JSON sidecar next to it.
    pub fn write(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = vec!["idx".to_string()];
        header.extend((0..self.grid.state_dim()).map(|d| format!("s{d}")));
        header.extend((0..self.grid.action_dim()).map(|d| format!("a{d}")));
        header.push("value".into());
        writeln!(w, "{}", header.join(","))?;
        let mut s = vec![0.0; self.grid.state_dim()];
        let mut a = vec![0.0; self.grid.action_dim()];
        let na = self.grid.n_actions();
        for (i, v) in self.values.iter().enumerate() {
            self.grid.state_coords_into(i / na, &mut s);
            self.grid.action_coords_into(i % na, &mut a);
            write!(w, "{i}")?;
            for x in s.iter().chain(a.iter()) {
                write!(w, ",{x}")?;
            }
            writeln!(w, ",{v}")?;
        }
        w.flush()?;
        let mut sidecar = self.sidecar();
        sidecar.metadata = metadata;
        let file = File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
        Ok(())
    }

    /// Reads a field written by [`ScalarField::write`].
    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let sidecar: FieldSidecar = serde_json::from_reader(BufReader::new(open(&side)?))?;
        let grid = Arc::new(StateActionGrid::from_axes(
            sidecar.grid.state_axes().to_vec(),
            sidecar.grid.action_axes().to_vec(),
            true,
        )?);
        let n = grid.len();
        let width = 2 + grid.state_dim() + grid.action_dim();
        let mut values = vec![f64::NAN; n];
        let mut seen = vec![false; n];
        let reader = BufReader::new(open(path)?);
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line_no == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != width {
                return Err(LdmError::Parse(format!(
                    "{}:{}: expected {width} columns, found {}",
                    path.display(),
                    line_no + 1,
                    parts.len()
                )));
            }
            let idx: usize = parts[0].trim().parse().map_err(|_| {
                LdmError::Parse(format!("{}:{}: bad index `{}`", path.display(), line_no + 1, parts[0]))
            })?;
            let v: f64 = parts[width - 1].trim().parse().map_err(|_| {
                LdmError::Parse(format!(
                    "{}:{}: bad value `{}`",
                    path.display(),
                    line_no + 1,
                    parts[width - 1]
                ))
            })?;
            if idx >= n {
                return Err(LdmError::IndexOutOfRange { index: idx, total: n });
            }
            values[idx] = v;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(LdmError::Parse(format!("{}: cell {missing} is missing", path.display())));
        }
        Ok(Self::new(grid, values, sidecar.role, sidecar.sentinel)?
            .with_interpolation(sidecar.interpolation))
    }
}

impl StateActionFunction for ScalarField {
    fn eval(&self, state: &[f64], action: &[f64]) -> f64 {
        self.lookup(state, action)
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        LdmError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub grid: StateActionGrid,
    pub role: FieldRole,
    pub sentinel: f64,
    pub interpolation: Interpolation,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Cells of a field whose value does not exceed a threshold.
#[derive(Clone, Debug)]
pub struct SublevelSet<'f> {
    field: &'f ScalarField,
    threshold: f64,
    members: Vec<usize>,
}

impl<'f> SublevelSet<'f> {
    fn new(field: &'f ScalarField, threshold: f64) -> Self {
        let members = field
            .values()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v <= threshold)
            .map(|(i, _)| i)
            .collect();
        Self { field, threshold, members }
    }

    pub fn field(&self) -> &'f ScalarField {
        self.field
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_cell(&self, index: usize) -> bool {
        self.field.get(index) <= self.threshold
    }

    pub fn contains_point(&self, state: &[f64], action: &[f64]) -> bool {
        self.field.lookup(state, action) <= self.threshold
    }

    /// Fraction of grid cells in the set.
    pub fn volume_fraction(&self) -> f64 {
        self.members.len() as f64 / self.field.len() as f64
    }
}
