//! Implicit one-step integrators (theta method and TR-BDF2), a Newton
//! solver with colored finite-difference banded Jacobians, and the state
//! extrapolation helpers used by the flux error estimator.

use crate::error::{Result, SolverError};
use crate::linalg::BandedMatrix;

/// TR-BDF2 interior node fraction, gamma = 2 - sqrt(2). This choice makes
/// the method L-stable and lets both stages share the same Jacobian scale.
pub const TRBDF2_GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

/// Quadrature weights (w1, w2, w3) of the flux-integral form of TR-BDF2:
/// u^{n+1} = u^n + dt (w1 f(u^n) + w2 f(u^g) + w3 f(u^{n+1})).
pub fn trbdf2_weights() -> (f64, f64, f64) {
    let g = TRBDF2_GAMMA;
    let w1 = 1.0 / (2.0 * (2.0 - g));
    let w3 = (1.0 - g) / (2.0 - g);
    (w1, w1, w3)
}

/// Time discretization selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// One-stage theta method: theta = 0 is forward Euler, 1/2 is the
    /// trapezoidal rule, 1 is backward Euler.
    Theta { theta: f64 },
    /// Two-stage TR-BDF2 with gamma = 2 - sqrt(2).
    TrBdf2,
}

impl Scheme {
    /// Formal order of accuracy of the step.
    pub fn order(&self) -> usize {
        match self {
            Scheme::Theta { theta } => {
                if (theta - 0.5).abs() < 1e-12 {
                    2
                } else {
                    1
                }
            }
            Scheme::TrBdf2 => 2,
        }
    }

    /// Order r entering the step controller exponent 1/(r+1).
    pub fn controller_order(&self) -> usize {
        match self {
            Scheme::Theta { .. } => 1,
            Scheme::TrBdf2 => 2,
        }
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self, Scheme::Theta { theta } if *theta == 0.0)
    }
}

/// Time integration settings shared by every step of a run.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            scheme: Scheme::TrBdf2,
            newton_tol: 1e-12,
            max_newton_iters: 30,
        }
    }
}

/// Linear extrapolation through (t_n, u_n) and the interior node:
/// out = u_n + fraction (u_mid - u_n), with fraction > 1 extrapolating.
pub fn linear_extrapolate(u_n: &[f64], u_mid: &[f64], fraction: f64, out: &mut [f64]) {
    for i in 0..u_n.len() {
        out[i] = u_n[i] + fraction * (u_mid[i] - u_n[i]);
    }
}

/// Cubic Hermite evaluation in the normalized variable beta, built from the
/// state and right-hand side at the two TR-BDF2 nodes t_n and t_n + gamma dt:
///   u(beta) = (a3 - 2 a2) beta^3 + (3 a2 - a3) beta^2 + a1 beta + a0
/// with a0 = u_n, a1 = gamma dt f_n, a2 = u_g - u_n - a1,
/// a3 = gamma dt (f_g - f_n). beta = 1/gamma lands on t_{n+1}.
pub fn hermite_extrapolate(
    u_n: &[f64],
    f_n: &[f64],
    u_g: &[f64],
    f_g: &[f64],
    gamma_dt: f64,
    beta: f64,
    out: &mut [f64],
) {
    for i in 0..u_n.len() {
        let a0 = u_n[i];
        let a1 = gamma_dt * f_n[i];
        let a2 = u_g[i] - u_n[i] - a1;
        let a3 = gamma_dt * (f_g[i] - f_n[i]);
        out[i] = ((a3 - 2.0 * a2) * beta + (3.0 * a2 - a3)) * beta * beta + a1 * beta + a0;
    }
}

/// Sparsity shape of a residual Jacobian, as seen by the finite-difference
/// assembly. `OpenRun` is a contiguous strip of cells with a three-cell
/// stencil; `CyclicRun` is a full periodic ring (wrap couplings force the
/// band to cover the whole matrix); `Dense` makes no structure assumption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StencilKind {
    OpenRun,
    CyclicRun,
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct JacobianStencil {
    pub n_cells: usize,
    pub n_vars: usize,
    pub kind: StencilKind,
}

impl JacobianStencil {
    pub fn open_run(n_cells: usize, n_vars: usize) -> Self {
        JacobianStencil {
            n_cells,
            n_vars,
            kind: StencilKind::OpenRun,
        }
    }

    pub fn cyclic_run(n_cells: usize, n_vars: usize) -> Self {
        JacobianStencil {
            n_cells,
            n_vars,
            kind: StencilKind::CyclicRun,
        }
    }

    pub fn dense(n: usize) -> Self {
        JacobianStencil {
            n_cells: n,
            n_vars: 1,
            kind: StencilKind::Dense,
        }
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_cells * self.n_vars
    }

    /// Band half-widths (kl, ku) for the flat cell-major unknown ordering.
    pub fn bandwidths(&self) -> (usize, usize) {
        let m = self.n_unknowns();
        if m == 0 {
            return (0, 0);
        }
        match self.kind {
            StencilKind::OpenRun => {
                let hw = (2 * self.n_vars - 1).min(m - 1);
                (hw, hw)
            }
            StencilKind::CyclicRun | StencilKind::Dense => (m - 1, m - 1),
        }
    }

    /// Groups of columns that can be perturbed together: no two columns in a
    /// group touch a common residual row. Cells interact up to distance one,
    /// so cells of equal color must be at least three apart (cyclically for
    /// rings), and distinct variables of one cell always get distinct colors.
    pub fn coloring(&self) -> Vec<Vec<usize>> {
        let m = self.n_cells;
        let d = self.n_vars;
        if m == 0 {
            return Vec::new();
        }
        let cell_groups: Vec<Vec<usize>> = match self.kind {
            StencilKind::Dense => (0..m).map(|c| vec![c]).collect(),
            StencilKind::OpenRun => {
                let q = 3.min(m);
                (0..q).map(|r| (r..m).step_by(q).collect()).collect()
            }
            StencilKind::CyclicRun => {
                let q = (3..=m)
                    .find(|q| m % q == 0 || m % q >= 3)
                    .unwrap_or(m)
                    .min(m);
                if q < 3 {
                    (0..m).map(|c| vec![c]).collect()
                } else {
                    (0..q).map(|r| (r..m).step_by(q).collect()).collect()
                }
            }
        };
        let mut colors = Vec::with_capacity(cell_groups.len() * d);
        for group in &cell_groups {
            for v in 0..d {
                colors.push(group.iter().map(|c| c * d + v).collect());
            }
        }
        colors
    }

    /// Residual rows structurally affected by unknown column `j`.
    fn rows_of_column(&self, j: usize, rows: &mut Vec<usize>) {
        rows.clear();
        let m = self.n_cells;
        let d = self.n_vars;
        match self.kind {
            StencilKind::Dense => rows.extend(0..m * d),
            StencilKind::OpenRun => {
                let cj = j / d;
                let lo = cj.saturating_sub(1);
                let hi = (cj + 1).min(m - 1);
                rows.extend(lo * d..(hi + 1) * d);
            }
            StencilKind::CyclicRun => {
                let cj = j / d;
                let mut cells = [(cj + m - 1) % m, cj, (cj + 1) % m];
                cells.sort_unstable();
                for w in 0..3 {
                    if w > 0 && cells[w] == cells[w - 1] {
                        continue;
                    }
                    rows.extend(cells[w] * d..(cells[w] + 1) * d);
                }
            }
        }
    }
}

/// Newton iteration for R(z) = 0 with a fresh finite-difference Jacobian per
/// iteration, assembled bandwise with the stencil's column coloring. Stops
/// when the update infinity norm drops to `tol`; returns the solution and
/// the iteration count.
pub fn newton_solve(
    residual: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    z0: &[f64],
    stencil: &JacobianStencil,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = z0.len();
    debug_assert_eq!(n, stencil.n_unknowns());
    let (kl, ku) = stencil.bandwidths();
    let colors = stencil.coloring();
    let sqrt_eps = f64::EPSILON.sqrt();

    let mut z = z0.to_vec();
    let mut r_base = vec![0.0; n];
    let mut r_pert = vec![0.0; n];
    let mut zp = vec![0.0; n];
    let mut rows = Vec::new();
    let mut jac = BandedMatrix::new(n, kl, ku);
    let mut last_update = f64::INFINITY;

    residual(&z, &mut r_base)?;
    if r_base.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFinite("newton initial residual".into()));
    }

    for iter in 0..max_iters {
        jac.reset();
        for group in &colors {
            zp.copy_from_slice(&z);
            for &j in group {
                zp[j] += sqrt_eps * (1.0 + z[j].abs());
            }
            residual(&zp, &mut r_pert)?;
            for &j in group {
                let h = zp[j] - z[j];
                stencil.rows_of_column(j, &mut rows);
                for &i in &rows {
                    jac.set(i, j, (r_pert[i] - r_base[i]) / h);
                }
            }
        }

        let mut delta: Vec<f64> = r_base.iter().map(|r| -r).collect();
        jac.solve_in_place(&mut delta)?;
        last_update = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if !last_update.is_finite() {
            return Err(SolverError::NonFinite("newton update".into()));
        }
        for i in 0..n {
            z[i] += delta[i];
        }
        residual(&z, &mut r_base)?;
        if r_base.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFinite("newton residual".into()));
        }
        if last_update <= tol {
            return Ok((z, iter + 1));
        }
    }
    Err(SolverError::NewtonDiverged {
        iters: max_iters,
        last_update,
    })
}

/// One theta method step for a plain ODE system du/dt = rhs(t, u).
/// Solves u1 = u0 + dt ((1-theta) f(t0, u0) + theta f(t0+dt, u1)).
pub fn theta_step(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    u0: &[f64],
    dt: f64,
    theta: f64,
    newton_tol: f64,
) -> Result<Vec<f64>> {
    let n = u0.len();
    let mut f0 = vec![0.0; n];
    rhs(t0, u0, &mut f0);
    let predictor: Vec<f64> = (0..n).map(|i| u0[i] + dt * f0[i]).collect();
    if theta == 0.0 {
        return Ok(predictor);
    }
    let stencil = JacobianStencil::dense(n);
    let mut fz = vec![0.0; n];
    let mut system = |z: &[f64], out: &mut [f64]| -> Result<()> {
        rhs(t0 + dt, z, &mut fz);
        for i in 0..n {
            out[i] = z[i] - u0[i] - dt * ((1.0 - theta) * f0[i] + theta * fz[i]);
        }
        Ok(())
    };
    let (z, _) = newton_solve(&mut system, &predictor, &stencil, newton_tol, 30)?;
    Ok(z)
}

/// One TR-BDF2 step for a plain ODE system, in the flux-integral form:
/// trapezoidal stage to t0 + gamma dt, then the weighted update
/// u1 = u0 + dt (w1 f0 + w2 fg + w3 f(t0+dt, u1)).
pub fn trbdf2_step(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    u0: &[f64],
    dt: f64,
    newton_tol: f64,
) -> Result<Vec<f64>> {
    let n = u0.len();
    let g = TRBDF2_GAMMA;
    let (w1, w2, w3) = trbdf2_weights();
    let stencil = JacobianStencil::dense(n);

    let mut f0 = vec![0.0; n];
    rhs(t0, u0, &mut f0);

    let mut fz = vec![0.0; n];
    let pred1: Vec<f64> = (0..n).map(|i| u0[i] + g * dt * f0[i]).collect();
    let mut stage1 = |z: &[f64], out: &mut [f64]| -> Result<()> {
        rhs(t0 + g * dt, z, &mut fz);
        for i in 0..n {
            out[i] = z[i] - u0[i] - 0.5 * g * dt * (f0[i] + fz[i]);
        }
        Ok(())
    };
    let (ug, _) = newton_solve(&mut stage1, &pred1, &stencil, newton_tol, 30)?;
    let mut fg = vec![0.0; n];
    rhs(t0 + g * dt, &ug, &mut fg);

    let mut pred2 = vec![0.0; n];
    linear_extrapolate(u0, &ug, 1.0 / g, &mut pred2);
    let mut stage2 = |z: &[f64], out: &mut [f64]| -> Result<()> {
        rhs(t0 + dt, z, &mut fz);
        for i in 0..n {
            out[i] = z[i] - u0[i] - dt * (w1 * f0[i] + w2 * fg[i] + w3 * fz[i]);
        }
        Ok(())
    };
    let (u1, _) = newton_solve(&mut stage2, &pred2, &stencil, newton_tol, 30)?;
    Ok(u1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn decay(_t: f64, u: &[f64], out: &mut [f64]) {
        out[0] = -u[0];
    }

    #[test]
    fn gamma_and_weights_identities() {
        let g = TRBDF2_GAMMA;
        assert_abs_diff_eq!(g, 0.5857864376269049, epsilon = 1e-15);
        let (w1, w2, w3) = trbdf2_weights();
        assert_abs_diff_eq!(w1 + w2 + w3, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w1, std::f64::consts::SQRT_2 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w3, g / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn backward_euler_decay_step() {
        // u1 = u0 / (1 + dt): 1 / 2 = 0.5
        let u1 = theta_step(&mut decay, 0.0, &[1.0], 1.0, 1.0, 1e-14).unwrap();
        assert_abs_diff_eq!(u1[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn trapezoid_decay_step() {
        // u1 = u0 (1 - dt/2) / (1 + dt/2) = 1/3
        let u1 = theta_step(&mut decay, 0.0, &[1.0], 1.0, 0.5, 1e-14).unwrap();
        assert_abs_diff_eq!(u1[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_euler_is_explicit() {
        let u1 = theta_step(&mut decay, 0.0, &[1.0], 1.0, 0.0, 1e-14).unwrap();
        assert_eq!(u1[0], 0.0);
    }

    #[test]
    fn trbdf2_matches_rational_stability_function() {
        // for u' = lam u one step reproduces
        //   ug = u (1 + g dt lam / 2) / (1 - g dt lam / 2)
        //   u1 = (u + dt lam (w1 u + w2 ug)) / (1 - dt lam w3)
        let lam = -0.1;
        let dt = 1.0;
        let g = TRBDF2_GAMMA;
        let (w1, w2, w3) = trbdf2_weights();
        let ug = (1.0 + 0.5 * g * dt * lam) / (1.0 - 0.5 * g * dt * lam);
        let expect = (1.0 + dt * lam * (w1 + w2 * ug)) / (1.0 - dt * lam * w3);
        let mut rhs = |_t: f64, u: &[f64], out: &mut [f64]| out[0] = lam * u[0];
        let u1 = trbdf2_step(&mut rhs, 0.0, &[1.0], dt, 1e-14).unwrap();
        assert_abs_diff_eq!(u1[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn trbdf2_second_order_on_decay() {
        let solve = |steps: usize| -> f64 {
            let dt = 1.0 / steps as f64;
            let mut u = vec![1.0];
            for k in 0..steps {
                u = trbdf2_step(&mut decay, k as f64 * dt, &u, dt, 1e-14).unwrap();
            }
            (u[0] - (-1.0f64).exp()).abs()
        };
        let order = (solve(8) / solve(16)).log2();
        assert!((order - 2.0).abs() < 0.2, "observed order {order}");
    }

    #[test]
    fn trbdf2_damps_stiff_modes() {
        let lam = -1e6;
        let mut rhs = |_t: f64, u: &[f64], out: &mut [f64]| out[0] = lam * u[0];
        let u1 = trbdf2_step(&mut rhs, 0.0, &[1.0], 1.0, 1e-10).unwrap();
        assert!(u1[0].abs() < 1e-3, "stiff amplification {}", u1[0]);
    }

    #[test]
    fn hermite_reproduces_cubic_exactly() {
        // u(t) = t^3 - 2 t^2 + 3 t - 1 is in the span of the extrapolant
        let u = |t: f64| t * t * t - 2.0 * t * t + 3.0 * t - 1.0;
        let du = |t: f64| 3.0 * t * t - 4.0 * t + 3.0;
        let (tn, gdt) = (0.2, 0.3);
        let mut out = [0.0];
        for beta in [0.0, 0.4, 1.0, 1.0 / TRBDF2_GAMMA, 2.3] {
            hermite_extrapolate(
                &[u(tn)],
                &[du(tn)],
                &[u(tn + gdt)],
                &[du(tn + gdt)],
                gdt,
                beta,
                &mut out,
            );
            assert_abs_diff_eq!(out[0], u(tn + beta * gdt), epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_extrapolation_basics() {
        let mut out = [0.0; 2];
        linear_extrapolate(&[1.0, 0.0], &[2.0, 1.0], 2.0, &mut out);
        assert_eq!(out, [3.0, 2.0]);
    }

    #[test]
    fn newton_finds_square_root() {
        let mut sys = |z: &[f64], out: &mut [f64]| -> crate::error::Result<()> {
            out[0] = z[0] * z[0] - 4.0;
            Ok(())
        };
        let (z, iters) =
            newton_solve(&mut sys, &[3.0], &JacobianStencil::dense(1), 1e-13, 30).unwrap();
        assert_abs_diff_eq!(z[0], 2.0, epsilon = 1e-10);
        assert!(iters < 10);
    }

    #[test]
    fn newton_reports_divergence_without_real_root() {
        let mut sys = |z: &[f64], out: &mut [f64]| -> crate::error::Result<()> {
            out[0] = z[0] * z[0] + 1.0;
            Ok(())
        };
        let err = newton_solve(&mut sys, &[1.0], &JacobianStencil::dense(1), 1e-13, 20);
        assert!(matches!(
            err,
            Err(crate::error::SolverError::NewtonDiverged { .. })
        ));
    }

    #[test]
    fn newton_solves_coupled_banded_system() {
        // tridiagonal nonlinear system: z_i + z_i^3 + 0.25 (neighbors) = b_i
        let m = 12;
        let target: Vec<f64> = (0..m).map(|i| 0.3 + 0.05 * i as f64).collect();
        let b: Vec<f64> = (0..m)
            .map(|i| {
                let zl = if i > 0 { target[i - 1] } else { 0.0 };
                let zr = if i + 1 < m { target[i + 1] } else { 0.0 };
                target[i] + target[i].powi(3) + 0.25 * (zl + zr)
            })
            .collect();
        let mut sys = |z: &[f64], out: &mut [f64]| -> crate::error::Result<()> {
            for i in 0..m {
                let zl = if i > 0 { z[i - 1] } else { 0.0 };
                let zr = if i + 1 < m { z[i + 1] } else { 0.0 };
                out[i] = z[i] + z[i].powi(3) + 0.25 * (zl + zr) - b[i];
            }
            Ok(())
        };
        let stencil = JacobianStencil::open_run(m, 1);
        let (z, _) = newton_solve(&mut sys, &vec![0.0; m], &stencil, 1e-13, 30).unwrap();
        for i in 0..m {
            assert_abs_diff_eq!(z[i], target[i], epsilon = 1e-9);
        }
    }

    fn check_coloring(stencil: &JacobianStencil) {
        let colors = stencil.coloring();
        let m = stencil.n_cells;
        let mut seen = vec![0usize; stencil.n_unknowns()];
        for group in &colors {
            for &j in group {
                seen[j] += 1;
            }
            for a in 0..group.len() {
                for b in (a + 1)..group.len() {
                    let (ca, cb) = (group[a] / stencil.n_vars, group[b] / stencil.n_vars);
                    let gap = ca.abs_diff(cb);
                    let dist = match stencil.kind {
                        StencilKind::CyclicRun => gap.min(m - gap),
                        _ => gap,
                    };
                    assert!(dist >= 3, "columns {} and {} collide", group[a], group[b]);
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "not a partition");
    }

    proptest! {
        #[test]
        fn coloring_is_valid_partition(m in 1usize..40, d in 1usize..4, cyclic: bool) {
            let stencil = if cyclic {
                JacobianStencil::cyclic_run(m, d)
            } else {
                JacobianStencil::open_run(m, d)
            };
            check_coloring(&stencil);
        }
    }

    #[test]
    fn cyclic_color_counts_follow_divisibility_rule() {
        // ring size 100: 3 fails (100 % 3 = 1), 4 divides -> 4 cell groups
        let q = |m: usize| JacobianStencil::cyclic_run(m, 1).coloring().len();
        assert_eq!(q(100), 4);
        assert_eq!(q(6), 3);
        assert_eq!(q(7), 4);
        assert_eq!(q(5), 5);
        assert_eq!(q(2), 2);
    }
}
