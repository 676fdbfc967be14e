//! Two-point numerical fluxes and semi-discrete right-hand-side assembly.

use crate::error::{Result, SolverError};
use crate::grid::{Grid1D, State};
use crate::problems::{apply_bc, BoundaryCondition};

/// How interface fluxes are built from the two adjacent cell states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NumericalFluxKind {
    /// Local Lax-Friedrichs: central flux plus wave-speed dissipation.
    Rusanov,
    /// Constant-speed scalar upwind.
    Upwind { speed: f64 },
    /// Arithmetic mean of the pointwise fluxes (centered scheme, no
    /// dissipation); used by the semi-linear rotating shallow water system.
    PairAverage,
}

/// Pointwise physics of a problem: the flux function, a local wave speed
/// bound, an optional non-flux source term, and the interface construction.
pub struct FluxFunction {
    pub n_vars: usize,
    pub kind: NumericalFluxKind,
    physical: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    wave_speed: Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    source: Option<Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>>,
    wave_range: Option<Box<dyn Fn(&[f64]) -> (f64, f64) + Send + Sync>>,
}

impl FluxFunction {
    pub fn new(
        n_vars: usize,
        kind: NumericalFluxKind,
        physical: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        wave_speed: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FluxFunction {
            n_vars,
            kind,
            physical: Box::new(physical),
            wave_speed: Box::new(wave_speed),
            source: None,
            wave_range: None,
        }
    }

    pub fn with_source(
        mut self,
        source: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.source = Some(Box::new(source));
        self
    }

    /// Attach signed characteristic speeds (smallest, largest eigenvalue of
    /// f'(u)); systems use this to widen refinement along wave directions.
    pub fn with_wave_range(
        mut self,
        range: impl Fn(&[f64]) -> (f64, f64) + Send + Sync + 'static,
    ) -> Self {
        self.wave_range = Some(Box::new(range));
        self
    }

    /// Pointwise physical flux f(u).
    #[inline]
    pub fn physical(&self, u: &[f64], out: &mut [f64]) {
        (self.physical)(u, out);
    }

    /// Nonnegative bound on |f'| between the two states (the Rusanov alpha).
    #[inline]
    pub fn wave_speed_bound(&self, u_l: &[f64], u_r: &[f64]) -> f64 {
        (self.wave_speed)(u_l, u_r)
    }

    pub fn has_source(&self) -> bool {
        self.source.is_some()
    }

    /// Signed eigenvalue range at a state; falls back to the symmetric
    /// interval given by the wave speed bound when no range is attached.
    pub fn wave_range(&self, u: &[f64]) -> (f64, f64) {
        match &self.wave_range {
            Some(r) => r(u),
            None => {
                let b = (self.wave_speed)(u, u);
                (-b, b)
            }
        }
    }

    /// Non-flux part of du/dt (zero if the problem has no source term).
    #[inline]
    pub fn source(&self, u: &[f64], out: &mut [f64]) {
        match &self.source {
            Some(s) => s(u, out),
            None => out.fill(0.0),
        }
    }

    /// Interface flux according to `kind`, written into `out`.
    pub fn interface(&self, u_l: &[f64], u_r: &[f64], out: &mut [f64]) {
        match self.kind {
            NumericalFluxKind::Rusanov => {
                let d = self.n_vars;
                let mut fl = [0.0; 4];
                let mut fr = [0.0; 4];
                self.physical(u_l, &mut fl[..d]);
                self.physical(u_r, &mut fr[..d]);
                let alpha = self.wave_speed_bound(u_l, u_r);
                for v in 0..d {
                    out[v] = 0.5 * ((fr[v] + fl[v]) - alpha * (u_r[v] - u_l[v]));
                }
            }
            NumericalFluxKind::Upwind { speed } => {
                out[0] = if speed >= 0.0 {
                    speed * u_l[0]
                } else {
                    speed * u_r[0]
                };
            }
            NumericalFluxKind::PairAverage => {
                let d = self.n_vars;
                let mut fl = [0.0; 4];
                let mut fr = [0.0; 4];
                self.physical(u_l, &mut fl[..d]);
                self.physical(u_r, &mut fr[..d]);
                for v in 0..d {
                    out[v] = 0.5 * (fl[v] + fr[v]);
                }
            }
        }
    }
}

/// One flux value per interface per variable, at a stated time. Interface `k`
/// is shared by cells `k-1` and `k`; a single stored value serves both sides.
#[derive(Debug, Clone)]
pub struct FluxField {
    pub n_vars: usize,
    pub values: Vec<Vec<f64>>,
    pub time: f64,
}

impl FluxField {
    pub fn new(n_vars: usize, n_interfaces: usize, time: f64) -> Self {
        FluxField {
            n_vars,
            values: vec![vec![0.0; n_interfaces]; n_vars],
            time,
        }
    }
}

/// Rusanov (local Lax-Friedrichs) two-point flux:
/// F = 1/2 [ (f(uR) + f(uL)) - alpha (uR - uL) ].
pub fn rusanov_flux(u_l: &[f64], u_r: &[f64], f: &FluxFunction) -> Result<Vec<f64>> {
    let d = f.n_vars;
    let mut fl = vec![0.0; d];
    let mut fr = vec![0.0; d];
    f.physical(u_l, &mut fl);
    f.physical(u_r, &mut fr);
    let alpha = f.wave_speed_bound(u_l, u_r);
    let out: Vec<f64> = (0..d)
        .map(|v| 0.5 * ((fr[v] + fl[v]) - alpha * (u_r[v] - u_l[v])))
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFinite(format!(
            "rusanov flux at uL={u_l:?}, uR={u_r:?}"
        )));
    }
    Ok(out)
}

/// Scalar upwind flux for constant advection speed.
pub fn upwind_flux(u_l: f64, u_r: f64, advection_speed: f64) -> f64 {
    if advection_speed >= 0.0 {
        advection_speed * u_l
    } else {
        advection_speed * u_r
    }
}

/// Semi-discrete tendencies du_i/dt = -(F_{i+1/2} - F_{i-1/2})/dx + s(u_i)
/// together with the interface fluxes used. For periodic boundaries the two
/// boundary slots hold the identical wrap flux.
pub fn semidiscrete_rhs(
    state: &State,
    f: &FluxFunction,
    grid: &Grid1D,
    bc: &BoundaryCondition,
) -> Result<(Vec<Vec<f64>>, FluxField)> {
    let n = grid.n_cells;
    let d = f.n_vars;
    let mut field = FluxField::new(d, n + 1, state.time);
    let mut buf = vec![0.0; d];

    for k in 1..n {
        f.interface(&state.cell(k - 1), &state.cell(k), &mut buf);
        for v in 0..d {
            field.values[v][k] = buf[v];
        }
    }
    if matches!(bc, BoundaryCondition::Periodic) {
        f.interface(&state.cell(n - 1), &state.cell(0), &mut buf);
        for v in 0..d {
            field.values[v][0] = buf[v];
            field.values[v][n] = buf[v];
        }
    } else {
        let (ghost_l, ghost_r) = apply_bc(state, bc, state.time);
        f.interface(&ghost_l, &state.cell(0), &mut buf);
        for v in 0..d {
            field.values[v][0] = buf[v];
        }
        f.interface(&state.cell(n - 1), &ghost_r, &mut buf);
        for v in 0..d {
            field.values[v][n] = buf[v];
        }
    }

    let mut tend = vec![vec![0.0; n]; d];
    let mut src = vec![0.0; d];
    for i in 0..n {
        f.source(&state.cell(i), &mut src);
        for v in 0..d {
            tend[v][i] = -(field.values[v][i + 1] - field.values[v][i]) / grid.dx + src[v];
        }
    }
    for v in 0..d {
        if field.values[v].iter().any(|x| !x.is_finite())
            || tend[v].iter().any(|x| !x.is_finite())
        {
            return Err(SolverError::NonFinite(format!(
                "semidiscrete rhs, variable {v} at t = {}",
                state.time
            )));
        }
    }
    Ok((tend, field))
}

/// Largest |wave speed| over all cells, from the problem's bound at equal
/// left/right arguments.
pub fn max_wave_speed(state: &State, f: &FluxFunction) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..state.n_cells() {
        let u = state.cell(i);
        m = m.max(f.wave_speed_bound(&u, &u));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, cell_average_init};
    use crate::problems::{burgers, BoundaryCondition};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn burgers_flux() -> FluxFunction {
        burgers(1.0, 0.0, 0.0).flux
    }

    #[test]
    fn rusanov_burgers_step_value() {
        // uL=1, uR=0: f = u^2/2, alpha = 1 -> F = 1/2 [(0 + 0.5) - 1*(0-1)] = 0.75
        let f = burgers_flux();
        let v = rusanov_flux(&[1.0], &[0.0], &f).unwrap();
        assert_abs_diff_eq!(v[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn rusanov_consistency_equal_states() {
        let f = burgers_flux();
        let v = rusanov_flux(&[0.5], &[0.5], &f).unwrap();
        assert_abs_diff_eq!(v[0], 0.125, epsilon = 1e-15);
        let z = rusanov_flux(&[0.0], &[0.0], &f).unwrap();
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn rusanov_antisymmetric_pair_matches_hand_formula() {
        // f even (u^2/2), uR = -uL: central part is f(uL), dissipation -alpha*(uR-uL)/2
        let f = burgers_flux();
        for ul in [0.3, 1.0, 2.5] {
            let ur = -ul;
            let v = rusanov_flux(&[ul], &[ur], &f).unwrap();
            let alpha = ul.abs();
            let expect = 0.5 * ul * ul - 0.5 * alpha * (ur - ul);
            assert_abs_diff_eq!(v[0], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn upwind_flux_cases() {
        assert_eq!(upwind_flux(2.0, 5.0, 1.0), 2.0);
        assert_eq!(upwind_flux(2.0, 5.0, -1.0), -5.0);
        assert_eq!(upwind_flux(2.0, 5.0, 0.0), 0.0);
    }

    #[test]
    fn constant_state_has_zero_tendency() {
        let g = build_grid(-1.0, 3.0, 40).unwrap();
        let s = cell_average_init(|_| vec![0.7], 1, &g).unwrap();
        let f = burgers_flux();
        let bc = BoundaryCondition::dirichlet(vec![0.7], vec![0.7]);
        let (tend, _) = semidiscrete_rhs(&s, &f, &g, &bc).unwrap();
        for t in &tend[0] {
            assert_abs_diff_eq!(*t, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn burgers_step_tendency_localized() {
        // step 1|0 with the jump on an interface: only the two flanking cells move
        let g = build_grid(-1.0, 1.0, 20).unwrap();
        let s = cell_average_init(|x| vec![if x < 0.0 { 1.0 } else { 0.0 }], 1, &g).unwrap();
        let f = burgers_flux();
        let bc = BoundaryCondition::dirichlet(vec![1.0], vec![0.0]);
        let (tend, field) = semidiscrete_rhs(&s, &f, &g, &bc).unwrap();
        // jump interface k=10: flux there is 0.75; neighbors carry f(1)=0.5, f(0)=0
        assert_abs_diff_eq!(field.values[0][10], 0.75, epsilon = 1e-14);
        for i in 0..20 {
            let expect = match i {
                9 => -(0.75 - 0.5) / g.dx,
                10 => -(0.0 - 0.75) / g.dx,
                _ => 0.0,
            };
            assert_abs_diff_eq!(tend[0][i], expect, epsilon = 1e-11);
        }
    }

    proptest! {
        #[test]
        fn telescoping_mass_identity(vals in proptest::collection::vec(-2.0..2.0f64, 16)) {
            // dx * sum of tendencies == -(F_right - F_left) for any state
            let g = build_grid(0.0, 1.0, 16).unwrap();
            let mut s = crate::grid::State::new(1, 16, 0.0);
            s.values[0].clone_from_slice(&vals);
            let f = burgers_flux();
            let bc = BoundaryCondition::dirichlet(vec![vals[0]], vec![vals[15]]);
            let (tend, field) = semidiscrete_rhs(&s, &f, &g, &bc).unwrap();
            let mass_rate: f64 = tend[0].iter().sum::<f64>() * g.dx;
            let boundary = -(field.values[0][16] - field.values[0][0]);
            prop_assert!((mass_rate - boundary).abs() <= 1e-13);
        }

        #[test]
        fn rusanov_consistency_property(u in -3.0..3.0f64) {
            let f = burgers_flux();
            let v = rusanov_flux(&[u], &[u], &f).unwrap();
            prop_assert!((v[0] - 0.5 * u * u).abs() < 1e-14);
        }

        #[test]
        fn wave_speed_bound_dominates_derivative(u in -3.0..3.0f64) {
            let f = burgers_flux();
            prop_assert!(f.wave_speed_bound(&[u], &[u]) >= u.abs() - 1e-14);
        }
    }

    #[test]
    fn periodic_wrap_flux_is_shared_bitwise() {
        let g = build_grid(0.0, 1.0, 8).unwrap();
        let s = cell_average_init(|x| vec![(6.28 * x).sin()], 1, &g).unwrap();
        let f = burgers_flux();
        let (_, field) = semidiscrete_rhs(&s, &f, &g, &BoundaryCondition::Periodic).unwrap();
        assert_eq!(field.values[0][0].to_bits(), field.values[0][8].to_bits());
    }
}
