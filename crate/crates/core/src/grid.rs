//! Rectangular discretization of a joint state-action space.
//!
//! Every axis is a set of evenly spaced nodes running from `lo` to `hi`
//! inclusive. Cells are identified with nodes, so an axis with `count` nodes
//! has spacing `(hi - lo) / (count - 1)`. The flat cell index is
//! `state_index * n_actions + action_index`, with both parts row-major; the
//! action block of one state is therefore contiguous in memory.

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

pub const MAX_STATE_DIMS: usize = 4;
pub const MAX_ACTION_DIMS: usize = 4;
const MAX_STENCIL: usize = 1 << MAX_STATE_DIMS;

/// Relative distance (in units of node spacing) under which a coordinate is
/// treated as lying exactly on a node.
const SNAP: f64 = 1e-9;

/// How off-node points are read from a field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Multilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        Self { lo, hi, count }
    }

    fn validate(&self, allow_degenerate: bool, name: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(LdmError::InvalidGrid(format!("{name}: bounds must be finite")));
        }
        match self.count {
            0 => Err(LdmError::InvalidGrid(format!("{name}: count must be positive"))),
            1 if !allow_degenerate => Err(LdmError::InvalidGrid(format!(
                "{name}: degenerate single-node axis is not enabled"
            ))),
            1 => Ok(()),
            _ if self.lo < self.hi => Ok(()),
            _ => Err(LdmError::InvalidGrid(format!(
                "{name}: lower bound {} must be below upper bound {}",
                self.lo, self.hi
            ))),
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.count <= 1 {
            0.0
        } else {
            (self.hi - self.lo) / (self.count - 1) as f64
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        if self.count > 1 && i == self.count - 1 {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    /// Lower node index and fractional offset in `[0, 1)` of `x`, or `None`
    /// outside the axis.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if self.count == 1 {
            let tol = SNAP * self.lo.abs().max(1.0);
            return ((x - self.lo).abs() <= tol).then_some((0, 0.0));
        }
        if !x.is_finite() {
            return None;
        }
        let t = (x - self.lo) / self.spacing();
        let last = (self.count - 1) as f64;
        if t < -SNAP || t > last + SNAP {
            return None;
        }
        let r = t.round();
        let t = if (t - r).abs() <= SNAP { r } else { t };
        let t = t.clamp(0.0, last);
        // On the upper boundary the offset is zero and `i0 + 1` is never read.
        let i0 = t.floor() as usize;
        Some((i0, t - i0 as f64))
    }

    pub fn nearest(&self, x: f64) -> Option<usize> {
        self.locate(x)
            .map(|(i0, frac)| if frac > 0.5 { i0 + 1 } else { i0 })
    }
}

/// Corner indices and weights for reading a state-indexed block at an
/// arbitrary state. Zero-weight corners are omitted.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    len: usize,
    index: [usize; MAX_STENCIL],
    weight: [f64; MAX_STENCIL],
}

impl Stencil {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.index[..self.len]
            .iter()
            .copied()
            .zip(self.weight[..self.len].iter().copied())
    }
}

/// Lower corner (flat state index) and per-axis offsets in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateLocation {
    pub base: usize,
    pub frac: [f64; MAX_STATE_DIMS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateActionGrid {
    state_axes: Vec<Axis>,
    action_axes: Vec<Axis>,
}

impl StateActionGrid {
    pub fn new(
        state_lo: &[f64],
        state_hi: &[f64],
        state_counts: &[usize],
        action_lo: &[f64],
        action_hi: &[f64],
        action_counts: &[usize],
    ) -> Result<Self> {
        let axes = |lo: &[f64], hi: &[f64], counts: &[usize]| -> Result<Vec<Axis>> {
            if lo.len() != hi.len() || lo.len() != counts.len() {
                return Err(LdmError::InvalidGrid(
                    "bounds and counts must have equal lengths".into(),
                ));
            }
            Ok((0..lo.len()).map(|d| Axis::new(lo[d], hi[d], counts[d])).collect())
        };
        Self::from_axes(
            axes(state_lo, state_hi, state_counts)?,
            axes(action_lo, action_hi, action_counts)?,
            false,
        )
    }

    /// Builds a grid from explicit axes. Single-node axes are only accepted
    /// when `allow_degenerate` is set.
    pub fn from_axes(
        state_axes: Vec<Axis>,
        action_axes: Vec<Axis>,
        allow_degenerate: bool,
    ) -> Result<Self> {
        if state_axes.is_empty() || action_axes.is_empty() {
            return Err(LdmError::InvalidGrid(
                "grid needs at least one state and one action axis".into(),
            ));
        }
        if state_axes.len() > MAX_STATE_DIMS || action_axes.len() > MAX_ACTION_DIMS {
            return Err(LdmError::InvalidGrid(format!(
                "at most {MAX_STATE_DIMS} state and {MAX_ACTION_DIMS} action dimensions are supported"
            )));
        }
        for (d, ax) in state_axes.iter().enumerate() {
            ax.validate(allow_degenerate, &format!("state axis {d}"))?;
        }
        for (d, ax) in action_axes.iter().enumerate() {
            ax.validate(allow_degenerate, &format!("action axis {d}"))?;
        }
        Ok(Self { state_axes, action_axes })
    }

    pub fn state_axes(&self) -> &[Axis] {
        &self.state_axes
    }

    pub fn action_axes(&self) -> &[Axis] {
        &self.action_axes
    }

    pub fn state_dim(&self) -> usize {
        self.state_axes.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_axes.len()
    }

    pub fn n_states(&self) -> usize {
        self.state_axes.iter().map(|a| a.count).product()
    }

    pub fn n_actions(&self) -> usize {
        self.action_axes.iter().map(|a| a.count).product()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_index(&self, state_index: usize, action_index: usize) -> usize {
        state_index * self.n_actions() + action_index
    }

    pub fn split_index(&self, index: usize) -> (usize, usize) {
        let na = self.n_actions();
        (index / na, index % na)
    }

    pub fn state_coords(&self, state_index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        unravel_into(&self.state_axes, state_index, &mut out);
        out
    }

    pub fn action_coords(&self, action_index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.action_dim()];
        unravel_into(&self.action_axes, action_index, &mut out);
        out
    }

    pub fn state_coords_into(&self, state_index: usize, out: &mut [f64]) {
        unravel_into(&self.state_axes, state_index, out);
    }

    pub fn action_coords_into(&self, action_index: usize, out: &mut [f64]) {
        unravel_into(&self.action_axes, action_index, out);
    }

    /// Node coordinates of a cell.
    pub fn cell_to_coords(&self, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if index >= self.len() {
            return Err(LdmError::IndexOutOfRange { index, total: self.len() });
        }
        let (s, a) = self.split_index(index);
        Ok((self.state_coords(s), self.action_coords(a)))
    }

    /// Index of the node nearest to `(state, action)`; errors outside the domain.
    pub fn coords_to_cell(&self, state: &[f64], action: &[f64]) -> Result<usize> {
        let s = nearest_flat(&self.state_axes, state, 0)?;
        let a = nearest_flat(&self.action_axes, action, self.state_dim())?;
        Ok(self.cell_index(s, a))
    }

    pub fn nearest_state(&self, state: &[f64]) -> Option<usize> {
        nearest_flat(&self.state_axes, state, 0).ok()
    }

    pub fn nearest_action(&self, action: &[f64]) -> Option<usize> {
        nearest_flat(&self.action_axes, action, 0).ok()
    }

    pub fn contains_state(&self, state: &[f64]) -> bool {
        state.len() == self.state_dim()
            && self.state_axes.iter().zip(state).all(|(ax, &x)| ax.locate(x).is_some())
    }

    pub fn contains_action(&self, action: &[f64]) -> bool {
        action.len() == self.action_dim()
            && self.action_axes.iter().zip(action).all(|(ax, &x)| ax.locate(x).is_some())
    }

    /// Stencil over state nodes for reading any state-indexed block at
    /// `state`. Returns `None` when the state lies outside the grid.
    pub fn state_stencil(&self, state: &[f64], interp: Interpolation) -> Option<Stencil> {
        self.locate_state(state, interp).map(|loc| self.stencil_at(&loc))
    }

    /// Lower corner and per-axis offsets of `state`, the compact form of
    /// [`StateActionGrid::state_stencil`]. Offsets are zero under nearest
    /// interpolation.
    pub fn locate_state(&self, state: &[f64], interp: Interpolation) -> Option<StateLocation> {
        debug_assert_eq!(state.len(), self.state_dim());
        let mut loc = StateLocation { base: 0, frac: [0.0; MAX_STATE_DIMS] };
        let mut stride = 1usize;
        for d in (0..self.state_dim()).rev() {
            let ax = &self.state_axes[d];
            let (i0, frac) = ax.locate(state[d])?;
            match interp {
                Interpolation::Nearest => {
                    let i = if frac > 0.5 { i0 + 1 } else { i0 };
                    loc.base += i * stride;
                }
                Interpolation::Multilinear => {
                    loc.base += i0 * stride;
                    loc.frac[d] = frac;
                }
            }
            stride *= ax.count;
        }
        Some(loc)
    }

    /// Expands a location into corner indices and weights.
    #[inline]
    pub fn stencil_at(&self, loc: &StateLocation) -> Stencil {
        let mut active_stride = [0usize; MAX_STATE_DIMS];
        let mut active_frac = [0f64; MAX_STATE_DIMS];
        let mut n_active = 0usize;
        let mut stride = 1usize;
        for d in (0..self.state_dim()).rev() {
            if loc.frac[d] > 0.0 {
                active_stride[n_active] = stride;
                active_frac[n_active] = loc.frac[d];
                n_active += 1;
            }
            stride *= self.state_axes[d].count;
        }
        let mut st = Stencil {
            len: 1 << n_active,
            index: [0; MAX_STENCIL],
            weight: [0.0; MAX_STENCIL],
        };
        for mask in 0..st.len {
            let mut idx = loc.base;
            let mut w = 1.0;
            for k in 0..n_active {
                if mask & (1 << k) != 0 {
                    idx += active_stride[k];
                    w *= active_frac[k];
                } else {
                    w *= 1.0 - active_frac[k];
                }
            }
            st.index[mask] = idx;
            st.weight[mask] = w;
        }
        st
    }

    /// Calls `visit(cell_index, weight)` for every corner contributing to the
    /// value at `(state, action)`. Returns `false` (without visiting) when the
    /// point lies outside the grid.
    pub fn for_each_corner(
        &self,
        state: &[f64],
        action: &[f64],
        interp: Interpolation,
        mut visit: impl FnMut(usize, f64),
    ) -> bool {
        let Some(sst) = self.state_stencil(state, interp) else {
            return false;
        };
        // Action axes, innermost block.
        let da = self.action_dim();
        let mut base = 0usize;
        let mut active_stride = [0usize; MAX_ACTION_DIMS];
        let mut active_frac = [0f64; MAX_ACTION_DIMS];
        let mut n_active = 0usize;
        let mut stride = 1usize;
        for d in (0..da).rev() {
            let ax = &self.action_axes[d];
            let Some((i0, frac)) = ax.locate(action[d]) else {
                return false;
            };
            match interp {
                Interpolation::Nearest => {
                    base += if frac > 0.5 { i0 + 1 } else { i0 } * stride;
                }
                Interpolation::Multilinear => {
                    base += i0 * stride;
                    if frac > 0.0 {
                        active_stride[n_active] = stride;
                        active_frac[n_active] = frac;
                        n_active += 1;
                    }
                }
            }
            stride *= ax.count;
        }
        let na = self.n_actions();
        for (s_idx, s_w) in sst.iter() {
            for mask in 0..(1usize << n_active) {
                let mut idx = base;
                let mut w = s_w;
                for k in 0..n_active {
                    if mask & (1 << k) != 0 {
                        idx += active_stride[k];
                        w *= active_frac[k];
                    } else {
                        w *= 1.0 - active_frac[k];
                    }
                }
                visit(s_idx * na + idx, w);
            }
        }
        true
    }
}

fn unravel_into(axes: &[Axis], mut flat: usize, out: &mut [f64]) {
    for d in (0..axes.len()).rev() {
        let n = axes[d].count;
        out[d] = axes[d].node(flat % n);
        flat /= n;
    }
}

fn nearest_flat(axes: &[Axis], coords: &[f64], axis_offset: usize) -> Result<usize> {
    if coords.len() != axes.len() {
        return Err(LdmError::DimensionMismatch { expected: axes.len(), got: coords.len() });
    }
    let mut flat = 0usize;
    for (d, (ax, &x)) in axes.iter().zip(coords).enumerate() {
        let i = ax
            .nearest(x)
            .ok_or(LdmError::OffGrid { axis: axis_offset + d, value: x })?;
        flat = flat * ax.count + i;
    }
    Ok(flat)
}
