//! Uniform 1D finite volume grid and multi-variable cell-average state.

use crate::error::{Result, SolverError};

/// Uniform grid of `n_cells` cells on `[x_left, x_right]`.
/// Cell `i` is `[x_left + i*dx, x_left + (i+1)*dx]`; interface `k` (0..=n_cells)
/// sits at `x_left + k*dx`, shared by cells `k-1` and `k`.
#[derive(Debug, Clone)]
pub struct Grid1D {
    pub x_left: f64,
    pub x_right: f64,
    pub n_cells: usize,
    pub dx: f64,
    pub centers: Vec<f64>,
}

impl Grid1D {
    pub fn n_interfaces(&self) -> usize {
        self.n_cells + 1
    }

    /// Position of interface `k`.
    pub fn interface_x(&self, k: usize) -> f64 {
        self.x_left + k as f64 * self.dx
    }
}

/// Cell averages for `n_vars` variables at a given time.
/// `values[v][i]` is variable `v` in cell `i`.
#[derive(Debug, Clone)]
pub struct State {
    pub n_vars: usize,
    pub values: Vec<Vec<f64>>,
    pub time: f64,
}

impl State {
    pub fn new(n_vars: usize, n_cells: usize, time: f64) -> Self {
        State {
            n_vars,
            values: vec![vec![0.0; n_cells]; n_vars],
            time,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.values[0].len()
    }

    /// All variables of cell `i`, as a stack-friendly Vec of length n_vars.
    pub fn cell(&self, i: usize) -> Vec<f64> {
        (0..self.n_vars).map(|v| self.values[v][i]).collect()
    }

    pub fn set_cell(&mut self, i: usize, vals: &[f64]) {
        for v in 0..self.n_vars {
            self.values[v][i] = vals[v];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|row| row.iter().all(|x| x.is_finite()))
    }

    /// Max-norm distance to another state of the same shape.
    pub fn max_diff(&self, other: &State) -> f64 {
        let mut m: f64 = 0.0;
        for v in 0..self.n_vars {
            for i in 0..self.n_cells() {
                m = m.max((self.values[v][i] - other.values[v][i]).abs());
            }
        }
        m
    }
}

pub fn build_grid(x_left: f64, x_right: f64, n_cells: usize) -> Result<Grid1D> {
    if !(x_right > x_left) {
        return Err(SolverError::InvalidInput(format!(
            "degenerate domain: [{x_left}, {x_right}]"
        )));
    }
    if n_cells < 2 {
        return Err(SolverError::InvalidInput(format!(
            "need at least 2 cells, got {n_cells}"
        )));
    }
    let dx = (x_right - x_left) / n_cells as f64;
    let centers = (0..n_cells)
        .map(|i| x_left + (i as f64 + 0.5) * dx)
        .collect();
    Ok(Grid1D {
        x_left,
        x_right,
        n_cells,
        dx,
        centers,
    })
}

/// Initialize cell averages by midpoint sampling of `u0` (second order,
/// matching the scheme order).
pub fn cell_average_init<F>(u0: F, n_vars: usize, grid: &Grid1D) -> Result<State>
where
    F: Fn(f64) -> Vec<f64>,
{
    let mut state = State::new(n_vars, grid.n_cells, 0.0);
    for (i, &x) in grid.centers.iter().enumerate() {
        let vals = u0(x);
        if vals.len() != n_vars || vals.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidInput(format!(
                "initial data not finite (or wrong arity) at x = {x}"
            )));
        }
        state.set_cell(i, &vals);
    }
    Ok(state)
}

/// Initialize exact cell averages from an antiderivative `U` of the initial
/// datum: average over cell i = (U(x_{i+1/2}) - U(x_{i-1/2})) / dx.
pub fn cell_average_init_exact<F>(antiderivative: F, n_vars: usize, grid: &Grid1D) -> Result<State>
where
    F: Fn(f64) -> Vec<f64>,
{
    let mut state = State::new(n_vars, grid.n_cells, 0.0);
    for i in 0..grid.n_cells {
        let lo = antiderivative(grid.interface_x(i));
        let hi = antiderivative(grid.interface_x(i + 1));
        if lo.len() != n_vars || hi.len() != n_vars {
            return Err(SolverError::InvalidInput(
                "antiderivative arity mismatch".into(),
            ));
        }
        let vals: Vec<f64> = (0..n_vars).map(|v| (hi[v] - lo[v]) / grid.dx).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidInput(format!(
                "initial average not finite in cell {i}"
            )));
        }
        state.set_cell(i, &vals);
    }
    Ok(state)
}

/// Discrete mass per variable: mass[v] = dx * Σ_i values[v][i].
pub fn total_mass(state: &State, grid: &Grid1D) -> Vec<f64> {
    state
        .values
        .iter()
        .map(|row| grid.dx * row.iter().sum::<f64>())
        .collect()
}
