//! Sub-step machinery: decomposition of the active set into contiguous runs,
//! the implicit advance of one run with frozen-flux closures, the flux error
//! estimator, and the rejection/step-proposal operators.

use std::collections::HashMap;

use super::{AcceptedFluxRecord, EvalCounter, ToleranceConfig};
use crate::error::{Result, SolverError};
use crate::flux::{FluxFunction, FluxField};
use crate::grid::State;
use crate::integrators::{
    hermite_extrapolate, newton_solve, trbdf2_weights, JacobianStencil, Scheme, TRBDF2_GAMMA,
};
use crate::problems::BoundaryCondition;

/// Everything an implicit run solve needs besides the run itself.
pub(crate) struct RunContext<'a> {
    pub flux: &'a FluxFunction,
    pub bc: &'a BoundaryCondition,
    pub dx: f64,
    pub n_cells: usize,
    pub periodic: bool,
    pub frozen: &'a HashMap<usize, AcceptedFluxRecord>,
    pub counter: &'a EvalCounter,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
}

/// A maximal contiguous strip of active cells. For periodic domains the strip
/// may wrap around; if it covers the whole ring it is `cyclic` and owns every
/// interface exactly once.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RunGeometry {
    pub cells: Vec<usize>,
    pub cyclic: bool,
}

/// Split the sorted active-cell set into maximal contiguous runs, merging the
/// first and last across the periodic seam when both touch it.
pub(crate) fn decompose_runs(active: &[usize], n_cells: usize, periodic: bool) -> Vec<RunGeometry> {
    if active.is_empty() {
        return Vec::new();
    }
    if active.len() == n_cells {
        return vec![RunGeometry {
            cells: (0..n_cells).collect(),
            cyclic: periodic,
        }];
    }
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for &c in active {
        match runs.last_mut() {
            Some(run) if *run.last().unwrap() + 1 == c => run.push(c),
            _ => runs.push(vec![c]),
        }
    }
    if periodic && runs.len() > 1 {
        let wraps = runs[0][0] == 0 && *runs.last().unwrap().last().unwrap() == n_cells - 1;
        if wraps {
            let head = runs.remove(0);
            runs.last_mut().unwrap().extend(head);
        }
    }
    runs.into_iter()
        .map(|cells| RunGeometry { cells, cyclic: false })
        .collect()
}

/// Global interface index of a run-local edge. Edge `e` sits to the left of
/// the run's `e`-th cell; edge `m` is the right boundary of the last cell.
/// Runs are contiguous (modularly so on periodic domains), so the index is
/// an offset from the first cell.
pub(crate) fn global_interface(geo: &RunGeometry, e: usize, n_cells: usize, periodic: bool) -> usize {
    let k = geo.cells[0] + e;
    if periodic {
        k % n_cells
    } else {
        k
    }
}

/// Result of advancing one run over one sub-step: committed values, the
/// per-edge stage fluxes, the effective time-averaged fluxes and their
/// ledger addends, weighted sources, and the extrapolated endpoint fluxes
/// the estimator compares against. All edge arrays are flat `[edge * d + v]`.
pub(crate) struct RunStepData {
    pub geo: RunGeometry,
    pub z_new: Vec<f64>,
    pub edge_old: Vec<f64>,
    pub edge_new: Vec<f64>,
    pub edge_eff: Vec<f64>,
    pub edge_addend: Vec<f64>,
    pub edge_ext: Vec<f64>,
    pub source_eff: Vec<f64>,
    pub z_ext: Vec<f64>,
    pub newton_iters: u64,
}

fn gather(state: &State, cells: &[usize], d: usize) -> Vec<f64> {
    let mut z = vec![0.0; cells.len() * d];
    for (j, &c) in cells.iter().enumerate() {
        for v in 0..d {
            z[j * d + v] = state.values[v][c];
        }
    }
    z
}

/// Semi-discrete right-hand side restricted to one run. Frozen edges use the
/// stored effective flux; fresh edges are recomputed from the current run
/// values, with boundary ghosts where the run touches the domain edge. By
/// the structural law a fresh edge never needs a latent neighbor; if that is
/// ever violated the latent value from `state` is used and debug builds trap.
#[allow(clippy::too_many_arguments)]
fn run_rhs(
    ctx: &RunContext,
    geo: &RunGeometry,
    state: &State,
    z: &[f64],
    tend: &mut [f64],
    edges: &mut [f64],
    src: &mut [f64],
) -> Result<()> {
    let d = ctx.flux.n_vars;
    let m = geo.cells.len();
    let mut fbuf = vec![0.0; d];

    let n_fresh_edges = if geo.cyclic { m } else { m + 1 };
    for e in 0..n_fresh_edges {
        let k = global_interface(geo, e, ctx.n_cells, ctx.periodic);
        if let Some(rec) = ctx.frozen.get(&k) {
            edges[e * d..(e + 1) * d].copy_from_slice(&rec.value_eff);
            continue;
        }
        let (ul_owned, ur_owned);
        let ul: &[f64] = if geo.cyclic {
            let j = (e + m - 1) % m;
            &z[j * d..(j + 1) * d]
        } else if e > 0 {
            &z[(e - 1) * d..e * d]
        } else if !ctx.periodic && k == 0 {
            match ctx.bc {
                BoundaryCondition::Dirichlet { left: Some(v), .. } => v.as_slice(),
                _ => &z[0..d],
            }
        } else {
            debug_assert!(false, "fresh edge {k} with latent left neighbor");
            ul_owned = state.cell((k + ctx.n_cells - 1) % ctx.n_cells);
            &ul_owned
        };
        let ur: &[f64] = if e < m {
            &z[e * d..(e + 1) * d]
        } else if !ctx.periodic && k == ctx.n_cells {
            match ctx.bc {
                BoundaryCondition::Dirichlet { right: Some(v), .. } => v.as_slice(),
                _ => &z[(m - 1) * d..m * d],
            }
        } else {
            debug_assert!(false, "fresh edge {k} with latent right neighbor");
            ur_owned = state.cell(k % ctx.n_cells);
            &ur_owned
        };
        ctx.flux.interface(ul, ur, &mut fbuf);
        edges[e * d..(e + 1) * d].copy_from_slice(&fbuf);
    }
    if geo.cyclic {
        let (head, tail) = edges.split_at_mut(m * d);
        tail[..d].copy_from_slice(&head[..d]);
    }

    for c in 0..m {
        ctx.flux.source(&z[c * d..(c + 1) * d], &mut fbuf);
        for v in 0..d {
            src[c * d + v] = fbuf[v];
            tend[c * d + v] =
                -(edges[(c + 1) * d + v] - edges[c * d + v]) / ctx.dx + fbuf[v];
        }
    }
    ctx.counter.add((m * d) as u64);
    Ok(())
}

/// Evaluate interface fluxes on an already-extrapolated set of run values.
/// Frozen edges keep their effective value (they are never error-tested).
fn extrapolated_edges(ctx: &RunContext, geo: &RunGeometry, z_ext: &[f64], eff: &[f64]) -> Vec<f64> {
    let d = ctx.flux.n_vars;
    let m = geo.cells.len();
    let mut out = vec![0.0; (m + 1) * d];
    let mut fbuf = vec![0.0; d];
    let n_fresh_edges = if geo.cyclic { m } else { m + 1 };
    for e in 0..n_fresh_edges {
        let k = global_interface(geo, e, ctx.n_cells, ctx.periodic);
        if ctx.frozen.contains_key(&k) {
            out[e * d..(e + 1) * d].copy_from_slice(&eff[e * d..(e + 1) * d]);
            continue;
        }
        let ul: &[f64] = if geo.cyclic {
            let j = (e + m - 1) % m;
            &z_ext[j * d..(j + 1) * d]
        } else if e > 0 {
            &z_ext[(e - 1) * d..e * d]
        } else {
            match ctx.bc {
                BoundaryCondition::Dirichlet { left: Some(v), .. } => v.as_slice(),
                _ => &z_ext[0..d],
            }
        };
        let ur: &[f64] = if e < m {
            &z_ext[e * d..(e + 1) * d]
        } else {
            match ctx.bc {
                BoundaryCondition::Dirichlet { right: Some(v), .. } => v.as_slice(),
                _ => &z_ext[(m - 1) * d..m * d],
            }
        };
        ctx.flux.interface(ul, ur, &mut fbuf);
        out[e * d..(e + 1) * d].copy_from_slice(&fbuf);
    }
    if geo.cyclic {
        let last = m * d;
        for v in 0..d {
            out[last + v] = out[v];
        }
    }
    ctx.counter.add((m * d) as u64);
    out
}

/// Advance one run implicitly over `dt` without committing anything to the
/// global state. The committed candidate `z_new` is assembled in flux form
/// from the per-edge ledger addends, so it telescopes exactly against the
/// conservation ledger.
pub(crate) fn advance_run(
    ctx: &RunContext,
    geo: &RunGeometry,
    state: &State,
    dt: f64,
    scheme: Scheme,
) -> Result<RunStepData> {
    let d = ctx.flux.n_vars;
    let m = geo.cells.len();
    let nn = m * d;
    let ne = (m + 1) * d;
    let z_old = gather(state, &geo.cells, d);

    let mut tend_old = vec![0.0; nn];
    let mut edge_old = vec![0.0; ne];
    let mut src_old = vec![0.0; nn];
    run_rhs(ctx, geo, state, &z_old, &mut tend_old, &mut edge_old, &mut src_old)?;

    let stencil = if geo.cyclic {
        JacobianStencil::cyclic_run(m, d)
    } else {
        JacobianStencil::open_run(m, d)
    };

    let mut newton_iters = 0u64;
    let mut scratch_tend = vec![0.0; nn];
    let mut scratch_edges = vec![0.0; ne];
    let mut scratch_src = vec![0.0; nn];

    // endpoint stage data, effective combination, extrapolated states
    let (edge_new, edge_eff, source_eff, z_ext);
    match scheme {
        Scheme::Theta { theta } => {
            // tangent predictor in the exact flux-form arithmetic of a forward
            // Euler commit, so the explicit scheme reproduces it bitwise
            let mut z_pred = vec![0.0; nn];
            for c in 0..m {
                for v in 0..d {
                    let a_r = dt * edge_old[(c + 1) * d + v];
                    let a_l = dt * edge_old[c * d + v];
                    z_pred[c * d + v] =
                        z_old[c * d + v] - (a_r - a_l) / ctx.dx + dt * src_old[c * d + v];
                }
            }
            let z1 = if theta == 0.0 {
                z_pred.clone()
            } else {
                let mut residual = |z: &[f64], out: &mut [f64]| -> Result<()> {
                    run_rhs(ctx, geo, state, z, &mut scratch_tend, &mut scratch_edges, &mut scratch_src)?;
                    for i in 0..nn {
                        out[i] = z[i]
                            - z_old[i]
                            - dt * ((1.0 - theta) * tend_old[i] + theta * scratch_tend[i]);
                    }
                    Ok(())
                };
                let (z, iters) =
                    newton_solve(&mut residual, &z_pred, &stencil, ctx.newton_tol, ctx.max_newton_iters)?;
                newton_iters += iters as u64;
                z
            };
            let mut tend_1 = vec![0.0; nn];
            let mut edge_1 = vec![0.0; ne];
            let mut src_1 = vec![0.0; nn];
            run_rhs(ctx, geo, state, &z1, &mut tend_1, &mut edge_1, &mut src_1)?;

            let mut eff = vec![0.0; ne];
            for i in 0..ne {
                eff[i] = if theta == 0.0 {
                    edge_old[i]
                } else {
                    (1.0 - theta) * edge_old[i] + theta * edge_1[i]
                };
            }
            let mut s_eff = vec![0.0; nn];
            for i in 0..nn {
                s_eff[i] = if theta == 0.0 {
                    src_old[i]
                } else {
                    (1.0 - theta) * src_old[i] + theta * src_1[i]
                };
            }
            edge_new = edge_1;
            edge_eff = eff;
            source_eff = s_eff;
            z_ext = z_pred;
        }
        Scheme::TrBdf2 => {
            let g = TRBDF2_GAMMA;
            let (w1, w2, w3) = trbdf2_weights();
            let gdt = g * dt;

            let pred1: Vec<f64> = (0..nn).map(|i| z_old[i] + gdt * tend_old[i]).collect();
            let mut stage1 = |z: &[f64], out: &mut [f64]| -> Result<()> {
                run_rhs(ctx, geo, state, z, &mut scratch_tend, &mut scratch_edges, &mut scratch_src)?;
                for i in 0..nn {
                    out[i] = z[i] - z_old[i] - 0.5 * gdt * (tend_old[i] + scratch_tend[i]);
                }
                Ok(())
            };
            let (z_g, it1) =
                newton_solve(&mut stage1, &pred1, &stencil, ctx.newton_tol, ctx.max_newton_iters)?;
            newton_iters += it1 as u64;
            let mut tend_g = vec![0.0; nn];
            let mut edge_g = vec![0.0; ne];
            let mut src_g = vec![0.0; nn];
            run_rhs(ctx, geo, state, &z_g, &mut tend_g, &mut edge_g, &mut src_g)?;

            let pred2: Vec<f64> = (0..nn)
                .map(|i| z_old[i] + (z_g[i] - z_old[i]) / g)
                .collect();
            let mut stage2 = |z: &[f64], out: &mut [f64]| -> Result<()> {
                run_rhs(ctx, geo, state, z, &mut scratch_tend, &mut scratch_edges, &mut scratch_src)?;
                for i in 0..nn {
                    out[i] = z[i]
                        - z_old[i]
                        - dt * (w1 * tend_old[i] + w2 * tend_g[i] + w3 * scratch_tend[i]);
                }
                Ok(())
            };
            let (z1, it2) =
                newton_solve(&mut stage2, &pred2, &stencil, ctx.newton_tol, ctx.max_newton_iters)?;
            newton_iters += it2 as u64;
            let mut tend_1 = vec![0.0; nn];
            let mut edge_1 = vec![0.0; ne];
            let mut src_1 = vec![0.0; nn];
            run_rhs(ctx, geo, state, &z1, &mut tend_1, &mut edge_1, &mut src_1)?;

            let mut eff = vec![0.0; ne];
            for i in 0..ne {
                eff[i] = w1 * edge_old[i] + w2 * edge_g[i] + w3 * edge_1[i];
            }
            let mut s_eff = vec![0.0; nn];
            for i in 0..nn {
                s_eff[i] = w1 * src_old[i] + w2 * src_g[i] + w3 * src_1[i];
            }
            let mut ext = vec![0.0; nn];
            hermite_extrapolate(&z_old, &tend_old, &z_g, &tend_g, gdt, 1.0 / g, &mut ext);

            edge_new = edge_1;
            edge_eff = eff;
            source_eff = s_eff;
            z_ext = ext;
        }
    }

    // frozen edges bypass the stage combination: their effective value is the
    // stored one, exactly, so the ledger addends reproduce the parent record
    let mut edge_eff = edge_eff;
    for e in 0..=m {
        let k = global_interface(geo, e, ctx.n_cells, ctx.periodic);
        if let Some(rec) = ctx.frozen.get(&k) {
            edge_eff[e * d..(e + 1) * d].copy_from_slice(&rec.value_eff);
        }
    }

    let edge_addend: Vec<f64> = edge_eff.iter().map(|f| dt * f).collect();
    let mut z_new = vec![0.0; nn];
    for c in 0..m {
        for v in 0..d {
            let a_r = edge_addend[(c + 1) * d + v];
            let a_l = edge_addend[c * d + v];
            z_new[c * d + v] =
                z_old[c * d + v] - (a_r - a_l) / ctx.dx + dt * source_eff[c * d + v];
        }
    }
    if z_new.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFinite("run commit".into()));
    }

    let edge_ext = extrapolated_edges(ctx, geo, &z_ext, &edge_eff);

    Ok(RunStepData {
        geo: geo.clone(),
        z_new,
        edge_old,
        edge_new,
        edge_eff,
        edge_addend,
        edge_ext,
        source_eff,
        z_ext,
        newton_iters,
    })
}

/// Per-interface error of the computed endpoint fluxes against the
/// extrapolated ones, reduced over variables by the maximum.
pub fn estimate_flux_error(
    computed: &FluxField,
    extrapolated: &FluxField,
    scope: &[usize],
) -> Vec<f64> {
    scope
        .iter()
        .map(|&k| {
            (0..computed.n_vars)
                .map(|v| (computed.values[v][k] - extrapolated.values[v][k]).abs())
                .fold(0.0f64, f64::max)
        })
        .collect()
}

/// Interfaces in `scope` whose error exceeds the mixed threshold
/// tau_rel |F| + tau_abs, with |F| the largest variable magnitude there.
pub fn select_rejected(
    eps: &[f64],
    computed: &FluxField,
    tol: &ToleranceConfig,
    scope: &[usize],
) -> Vec<usize> {
    scope
        .iter()
        .zip(eps)
        .filter(|(&k, &e)| {
            let fmax = (0..computed.n_vars)
                .map(|v| computed.values[v][k].abs())
                .fold(0.0f64, f64::max);
            e > tol.tau_rel * fmax + tol.tau_abs
        })
        .map(|(&k, _)| k)
        .collect()
}

/// For systems, extend each rejection by ceil(local Courant) interfaces per
/// side, following the local wave directions; scalar problems pass through
/// unchanged. `local_courant` and `wave_directions` are per cell, the latter
/// as (has negative eigenvalue, has positive eigenvalue).
pub fn widen_rejections(
    rejected: &[usize],
    local_courant: &[f64],
    wave_directions: &[(bool, bool)],
    n_vars: usize,
    n_interfaces: usize,
) -> Vec<usize> {
    if n_vars < 2 {
        return rejected.to_vec();
    }
    let n_cells = local_courant.len();
    let mut keep: Vec<bool> = vec![false; n_interfaces + 1];
    for &k in rejected {
        keep[k] = true;
        let flank = |c: usize| (local_courant[c], wave_directions[c]);
        let mut c_loc: f64 = 0.0;
        let (mut neg, mut pos) = (false, false);
        if k > 0 {
            let (cc, (n, p)) = flank(k - 1);
            c_loc = c_loc.max(cc);
            neg |= n;
            pos |= p;
        }
        if k < n_cells {
            let (cc, (n, p)) = flank(k);
            c_loc = c_loc.max(cc);
            neg |= n;
            pos |= p;
        }
        let w = c_loc.ceil() as usize;
        if neg {
            for j in k.saturating_sub(w)..k {
                keep[j] = true;
            }
        }
        if pos {
            for j in (k + 1)..=(k + w).min(n_interfaces) {
                keep[j] = true;
            }
        }
    }
    (0..=n_interfaces).filter(|&k| keep[k]).collect()
}

/// Cells flanking any rejected interface; these are the components that must
/// be recomputed at the finer level (all variables jointly for systems).
pub fn derive_active_cells(rejected: &[usize], n_cells: usize, periodic: bool) -> Vec<usize> {
    let mut active = vec![false; n_cells];
    for &k in rejected {
        if periodic {
            active[(k + n_cells - 1) % n_cells] = true;
            active[k % n_cells] = true;
        } else {
            if k > 0 {
                active[k - 1] = true;
            }
            if k < n_cells {
                active[k] = true;
            }
        }
    }
    (0..n_cells).filter(|&c| active[c]).collect()
}

/// Never cut the step by more than this in one rejection; steep transients
/// refine geometrically over successive levels instead of collapsing at once.
/// Power of two so the snapped fraction below stays exact.
const FACTOR_MIN: f64 = 0.25;

/// New sub-step proposal from the rejected-interface errors:
/// dt_new = nu * dt_star * min_k ((tau_rel |F_k| + tau_abs) / eps_k)^(1/(r+1)),
/// with the overall reduction factor clamped to [FACTOR_MIN, 1] as is customary
/// for embedded error controllers.
pub fn propose_substep(eps: &[f64], fmax: &[f64], tol: &ToleranceConfig, dt_star: f64) -> f64 {
    let expo = 1.0 / (tol.order_r as f64 + 1.0);
    let ratio = eps
        .iter()
        .zip(fmax)
        .map(|(&e, &f)| {
            let thr = tol.tau_rel * f + tol.tau_abs;
            if e > 0.0 {
                (thr / e).powf(expo)
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min);
    dt_star * (tol.nu * ratio).clamp(FACTOR_MIN, 1.0)
}

/// Largest unit fraction of the parent step not exceeding the proposal:
/// dt_star / ceil(dt_star / dt_new). Guarantees exact tiling of the parent.
pub fn snap_to_fraction(dt_new: f64, dt_star: f64) -> f64 {
    if dt_new >= dt_star {
        return dt_star;
    }
    let m = (dt_star / dt_new).ceil().max(1.0);
    dt_star / m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{advection, burgers};
    use approx::assert_abs_diff_eq;

    fn tol() -> ToleranceConfig {
        ToleranceConfig {
            tau_abs: 1e-6,
            tau_rel: 1e-4,
            nu: 0.9,
            order_r: 2,
            max_depth: 10,
            global_dt: 0.1,
        }
    }

    fn field_from(vals: &[f64]) -> FluxField {
        let mut f = FluxField::new(1, vals.len(), 0.0);
        f.values[0].clone_from_slice(vals);
        f
    }

    #[test]
    fn error_estimate_examples() {
        let a = field_from(&[1.0, 2.0, 3.0]);
        let same = estimate_flux_error(&a, &a, &[0, 1, 2]);
        assert_eq!(same, vec![0.0, 0.0, 0.0]);
        let b = field_from(&[1.0002, 2.0, 3.0]);
        let eps = estimate_flux_error(&b, &a, &[0]);
        assert_abs_diff_eq!(eps[0], 2e-4, epsilon = 1e-16);
    }

    #[test]
    fn error_estimate_reduces_by_max_over_variables() {
        let mut c = FluxField::new(2, 1, 0.0);
        let mut e = FluxField::new(2, 1, 0.0);
        c.values[0][0] = 1.0 + 1e-5;
        c.values[1][0] = 2.0 + 3e-4;
        e.values[0][0] = 1.0;
        e.values[1][0] = 2.0;
        let eps = estimate_flux_error(&c, &e, &[0]);
        assert_abs_diff_eq!(eps[0], 3e-4, epsilon = 1e-15);
    }

    #[test]
    fn rejection_threshold_examples() {
        let f = field_from(&[1.0, 1.0, 1.0]);
        let t = tol();
        // 2e-4 > 1e-4 * 1 + 1e-6 rejected; 1e-4 <= 1.01e-4 accepted; 0 accepted
        let r = select_rejected(&[2e-4, 1e-4, 0.0], &f, &t, &[0, 1, 2]);
        assert_eq!(r, vec![0]);
    }

    #[test]
    fn propose_substep_hand_value() {
        let t = tol();
        let dt = propose_substep(&[1e-3], &[1.0], &t, 0.1);
        // 0.9 * 0.1 * (1.01e-1)^(1/3)
        let expect = 0.9 * 0.1 * (1.01e-1f64).powf(1.0 / 3.0);
        assert_abs_diff_eq!(dt, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(dt, 0.04191, epsilon = 5e-5);
    }

    #[test]
    fn proposal_reduction_floored_at_quarter() {
        let t = tol();
        // unclamped factor would be 0.9 * (1.01e-4 / 1e2)^(1/3) ~ 9e-3
        let dt = propose_substep(&[1e2], &[1.0], &t, 0.1);
        assert_eq!(dt, 0.025);
        // and the snapped fraction is exactly a quarter of the parent
        assert_eq!(snap_to_fraction(dt, 0.1), 0.025);
    }

    #[test]
    fn propose_substep_min_dominates() {
        let mut t = tol();
        t.nu = 1.0;
        t.tau_abs = 0.0;
        t.tau_rel = 1.0;
        // ratios 1 and 1/8 -> 0.1 * (1/8)^(1/3) = 0.05
        let dt = propose_substep(&[1.0, 8.0], &[1.0, 1.0], &t, 0.1);
        assert_abs_diff_eq!(dt, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn propose_substep_unit_ratio_keeps_step() {
        let mut t = tol();
        t.nu = 1.0;
        let thr = t.tau_rel * 1.0 + t.tau_abs;
        let dt = propose_substep(&[thr], &[1.0], &t, 0.1);
        assert_abs_diff_eq!(dt, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn snap_examples() {
        assert_abs_diff_eq!(snap_to_fraction(0.01945, 0.1), 0.1 / 6.0, epsilon = 1e-15);
        assert_eq!(snap_to_fraction(0.3, 0.1), 0.1);
        assert_eq!(snap_to_fraction(0.05, 0.1), 0.05);
    }

    #[test]
    fn widen_scalar_identity() {
        let r = widen_rejections(&[4], &[2.5; 10], &[(true, true); 10], 1, 10);
        assert_eq!(r, vec![4]);
    }

    #[test]
    fn widen_both_sides_by_ceil_courant() {
        let r = widen_rejections(&[5], &[2.5; 10], &[(true, true); 10], 2, 10);
        assert_eq!(r, vec![2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn widen_follows_wave_direction() {
        let r = widen_rejections(&[5], &[1.2; 10], &[(false, true); 10], 2, 10);
        assert_eq!(r, vec![5, 6, 7]);
        let l = widen_rejections(&[5], &[1.2; 10], &[(true, false); 10], 2, 10);
        assert_eq!(l, vec![3, 4, 5]);
    }

    #[test]
    fn widen_clips_at_domain_edge() {
        let r = widen_rejections(&[1], &[3.0; 8], &[(true, true); 8], 2, 8);
        assert_eq!(r, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn active_cells_from_rejections() {
        assert_eq!(derive_active_cells(&[4], 10, false), vec![3, 4]);
        assert_eq!(derive_active_cells(&[], 10, false), Vec::<usize>::new());
        assert_eq!(derive_active_cells(&[4, 5], 10, false), vec![3, 4, 5]);
        assert_eq!(derive_active_cells(&[0], 10, false), vec![0]);
        assert_eq!(derive_active_cells(&[0], 10, true), vec![0, 9]);
        assert_eq!(derive_active_cells(&[10], 10, false), vec![9]);
    }

    #[test]
    fn runs_split_on_gaps() {
        let runs = decompose_runs(&[1, 2, 3, 7, 8], 12, false);
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].cells, vec![1, 2, 3]);
        assert_eq!(runs[1].cells, vec![7, 8]);
        assert!(!runs[0].cyclic);
    }

    #[test]
    fn runs_merge_across_periodic_seam() {
        let runs = decompose_runs(&[0, 1, 9, 10, 11], 12, true);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].cells, vec![9, 10, 11, 0, 1]);
        assert!(!runs[0].cyclic);
        assert_eq!(global_interface(&runs[0], 0, 12, true), 9);
        assert_eq!(global_interface(&runs[0], 3, 12, true), 0);
        assert_eq!(global_interface(&runs[0], 5, 12, true), 2);
    }

    #[test]
    fn full_ring_is_cyclic() {
        let runs = decompose_runs(&(0..6).collect::<Vec<_>>(), 6, true);
        assert_eq!(runs.len(), 1);
        assert!(runs[0].cyclic);
        let open = decompose_runs(&(0..6).collect::<Vec<_>>(), 6, false);
        assert!(!open[0].cyclic);
    }

    #[test]
    fn frozen_only_cell_updates_by_pure_divergence() {
        // a 1-cell run whose edges are both frozen: the commit is exactly
        // u - (dt/dx) (F_right - F_left), with the stored effective values
        let p = burgers(1.0, 0.0, 0.0);
        let mut frozen = HashMap::new();
        let rec = |k: usize, val: f64| AcceptedFluxRecord {
            interface_index: k,
            value_old: vec![val],
            value_new: vec![val],
            value_eff: vec![val],
            accepted_dt: 0.1,
            accepted_at_time: 0.0,
        };
        frozen.insert(3, rec(3, 0.4));
        frozen.insert(4, rec(4, 0.1));
        let counter = EvalCounter::new();
        let ctx = RunContext {
            flux: &p.flux,
            bc: &p.bc,
            dx: 0.01,
            n_cells: 10,
            periodic: false,
            frozen: &frozen,
            counter: &counter,
            newton_tol: 1e-13,
            max_newton_iters: 30,
        };
        let geo = RunGeometry {
            cells: vec![3],
            cyclic: false,
        };
        let mut state = State::new(1, 10, 0.0);
        state.values[0][3] = 0.7;
        let dt = 0.05;
        let out = advance_run(&ctx, &geo, &state, dt, Scheme::TrBdf2).unwrap();
        let expect = 0.7 - (dt * 0.1 - dt * 0.4) / 0.01;
        assert_eq!(out.z_new[0], expect);
        assert_eq!(out.edge_addend[0], dt * 0.4);
        assert_eq!(out.edge_addend[1], dt * 0.1);
        // both frozen edges make the stage residuals affine in z, so each
        // of the two stage solves lands in a single Newton iteration
        assert_eq!(out.newton_iters, 2);
    }

    #[test]
    fn forward_euler_extrapolation_matches_commit_bitwise() {
        // theta = 0: the tangent predictor IS the committed state, so the
        // estimator sees identical fluxes and can never reject
        let p = advection(1.0);
        let frozen = HashMap::new();
        let counter = EvalCounter::new();
        let ctx = RunContext {
            flux: &p.flux,
            bc: &p.bc,
            dx: 0.125,
            n_cells: 8,
            periodic: true,
            frozen: &frozen,
            counter: &counter,
            newton_tol: 1e-13,
            max_newton_iters: 30,
        };
        let geo = RunGeometry {
            cells: (0..8).collect(),
            cyclic: true,
        };
        let mut state = State::new(1, 8, 0.0);
        for i in 0..8 {
            state.values[0][i] = (0.7 * i as f64).sin();
        }
        let out = advance_run(&ctx, &geo, &state, 0.05, Scheme::Theta { theta: 0.0 }).unwrap();
        for i in 0..out.edge_new.len() {
            assert_eq!(out.edge_new[i].to_bits(), out.edge_ext[i].to_bits());
        }
    }

    #[test]
    fn backward_euler_run_matches_hand_solve() {
        // upwind advection, 2-cell run, frozen outer edges: the BE system is
        // linear and solvable by hand
        let p = advection(1.0);
        let (dx, dt) = (0.25, 0.1);
        let mut frozen = HashMap::new();
        frozen.insert(
            1,
            AcceptedFluxRecord {
                interface_index: 1,
                value_old: vec![0.3],
                value_new: vec![0.3],
                value_eff: vec![0.3],
                accepted_dt: dt,
                accepted_at_time: 0.0,
            },
        );
        frozen.insert(
            3,
            AcceptedFluxRecord {
                interface_index: 3,
                value_old: vec![0.9],
                value_new: vec![0.9],
                value_eff: vec![0.9],
                accepted_dt: dt,
                accepted_at_time: 0.0,
            },
        );
        let counter = EvalCounter::new();
        let ctx = RunContext {
            flux: &p.flux,
            bc: &p.bc,
            dx,
            n_cells: 4,
            periodic: true,
            frozen: &frozen,
            counter: &counter,
            newton_tol: 1e-14,
            max_newton_iters: 30,
        };
        let geo = RunGeometry {
            cells: vec![1, 2],
            cyclic: false,
        };
        let mut state = State::new(1, 4, 0.0);
        state.values[0].clone_from_slice(&[0.3, 0.5, 0.8, 0.9]);
        let out = advance_run(&ctx, &geo, &state, dt, Scheme::Theta { theta: 1.0 }).unwrap();
        // implicit upwind: z1 solves z1 = u1 - (dt/dx)(z1 - 0.3)
        let lam = dt / dx;
        let z1 = (0.5 + lam * 0.3) / (1.0 + lam);
        // commit is flux-form with the converged interior flux F2 = z1
        let u1 = 0.5 - (dt * z1 - dt * 0.3) / dx;
        let u2 = 0.8 - (dt * 0.9 - dt * z1) / dx;
        assert_abs_diff_eq!(out.z_new[0], u1, epsilon = 1e-12);
        assert_abs_diff_eq!(out.z_new[1], u2, epsilon = 1e-12);
        assert!(counter.get() > 0);
    }
}
