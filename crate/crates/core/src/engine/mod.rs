//! Self-adjusting multirate time integration with frozen-flux conservation.
//!
//! Time advances in fixed global slabs. Each slab starts as a single
//! whole-domain implicit sub-step; interface fluxes whose extrapolation error
//! passes the tolerance are accepted and their time integrals entered into a
//! ledger, while the cells around rejected fluxes are re-integrated
//! recursively over the same interval with smaller sub-steps. Accepted fluxes
//! stay frozen during that recursion: finer levels reuse their effective
//! value scaled by the finer step length, which is what makes the committed
//! state reconstructible from the ledger and mass conservation exact up to
//! floating point round-off.

mod baseline;
mod ledger;
pub(crate) mod substep;

pub use baseline::{multirate_component_baseline, BaselineOutcome};
pub use ledger::{conservation_audit, AuditReport, FluxLedger};
pub use substep::{
    derive_active_cells, estimate_flux_error, propose_substep, select_rejected, snap_to_fraction,
    widen_rejections,
};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SolverError};
use crate::flux::max_wave_speed;
use crate::grid::{cell_average_init, total_mass, Grid1D, State};
use crate::integrators::IntegratorConfig;
use crate::problems::{BoundaryCondition, ProblemSpec};
use substep::{advance_run, decompose_runs, global_interface, RunContext, RunStepData};

/// Error tolerances and step-control constants shared by the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceConfig {
    pub tau_abs: f64,
    pub tau_rel: f64,
    /// safety factor applied to every step proposal, in (0, 1]
    pub nu: f64,
    /// classical order of the error estimate used by the controller
    pub order_r: usize,
    pub max_depth: usize,
    pub global_dt: f64,
}

impl ToleranceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_abs > 0.0) {
            return Err(SolverError::InvalidInput(format!(
                "tau_abs must be positive, got {}",
                self.tau_abs
            )));
        }
        if !(self.tau_rel >= 0.0) {
            return Err(SolverError::InvalidInput("tau_rel must be nonnegative".into()));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(SolverError::InvalidInput(format!(
                "safety factor nu must lie in (0, 1], got {}",
                self.nu
            )));
        }
        if self.order_r == 0 {
            return Err(SolverError::InvalidInput("order_r must be at least 1".into()));
        }
        if !(1..=20).contains(&self.max_depth) {
            return Err(SolverError::InvalidInput(format!(
                "max_depth must lie in 1..=20, got {}",
                self.max_depth
            )));
        }
        if !(self.global_dt > 0.0) {
            return Err(SolverError::InvalidInput("global_dt must be positive".into()));
        }
        Ok(())
    }
}

/// Cells to re-integrate at a level together with the rejected interfaces
/// that spawned them. Both lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    pub active_cells: Vec<usize>,
    pub rejected_fluxes: Vec<usize>,
}

impl ActiveSet {
    pub fn from_rejected(rejected: &[usize], n_cells: usize, periodic: bool) -> Self {
        ActiveSet {
            active_cells: derive_active_cells(rejected, n_cells, periodic),
            rejected_fluxes: rejected.to_vec(),
        }
    }

    /// Structural law: a cell is active exactly when one of its interfaces
    /// is rejected.
    pub fn consistent(&self, n_cells: usize, periodic: bool) -> bool {
        self.active_cells == derive_active_cells(&self.rejected_fluxes, n_cells, periodic)
    }
}

/// A flux accepted at some level: its endpoint stage values, the effective
/// time-averaged value finer levels reuse, and the interval it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedFluxRecord {
    pub interface_index: usize,
    pub value_old: Vec<f64>,
    pub value_new: Vec<f64>,
    /// stage-weighted combination actually integrated against time; this is
    /// what frozen reuse and the ledger addend are built from
    pub value_eff: Vec<f64>,
    pub accepted_dt: f64,
    pub accepted_at_time: f64,
}

/// Position of one sub-step inside the recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstepFrame {
    pub level_p: usize,
    pub substep_s: usize,
    pub t_star: f64,
    pub dt_star: f64,
    /// end of the interval this level must tile
    pub t_triangle: f64,
}

/// A scripted refinement decision: interfaces to reject and the number of
/// child sub-steps. An empty rejection list accepts the sub-step.
#[derive(Debug, Clone, Default)]
pub struct ForcedDecision {
    pub rejected: Vec<usize>,
    pub m: usize,
}

/// How rejection decisions are made.
#[derive(Clone)]
pub enum RefinementPolicy {
    /// flux error estimator against the tolerances (normal operation)
    Estimator,
    /// estimator, but any rejection refines every interface; this disables
    /// local freezing and reproduces a single-rate adaptive method
    InflateToAll,
    /// always reject one pinned interface with a fixed split below `depth`
    Forced { interface: usize, m: usize, depth: usize },
    /// arbitrary decisions keyed by (level, substep index)
    Scripted(Arc<dyn Fn(usize, usize) -> ForcedDecision + Send + Sync>),
}

impl fmt::Debug for RefinementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefinementPolicy::Estimator => write!(f, "Estimator"),
            RefinementPolicy::InflateToAll => write!(f, "InflateToAll"),
            RefinementPolicy::Forced { interface, m, depth } => f
                .debug_struct("Forced")
                .field("interface", interface)
                .field("m", m)
                .field("depth", depth)
                .finish(),
            RefinementPolicy::Scripted(_) => write!(f, "Scripted(..)"),
        }
    }
}

/// Shared counter for scalar right-hand-side component evaluations. Every
/// evaluation over a run of m cells with d variables adds m * d, including
/// the ones spent on finite-difference Jacobians and flux extrapolation.
#[derive(Debug, Default)]
pub struct EvalCounter {
    count: Cell<u64>,
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, n: u64) {
        self.count.set(self.count.get() + n);
    }

    pub fn get(&self) -> u64 {
        self.count.get()
    }
}

/// Everything configurable about an engine run.
#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub tol: ToleranceConfig,
    pub integrator: IntegratorConfig,
    pub policy: RefinementPolicy,
    /// extend rejections by ceil(local Courant) interfaces along wave
    /// directions (systems only)
    pub widening: bool,
}

/// One row of the sub-step history. The Courant number is global: largest
/// wave speed anywhere in the current state times dt / dx.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub courant: f64,
    pub level: usize,
    pub n_active: usize,
}

/// One refined cell at one sub-step start (level >= 1 only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveMapRow {
    pub t: f64,
    pub level: usize,
    pub cell: usize,
}

/// State and conservation audit at the end of one global slab.
#[derive(Debug, Clone)]
pub struct GlobalStepRecord {
    pub t_end: f64,
    pub state: State,
    pub audit: AuditReport,
}

/// Full outcome of an engine run.
#[derive(Debug, Clone)]
pub struct IntegrationOutput {
    pub final_state: State,
    pub global_steps: Vec<GlobalStepRecord>,
    pub courant_history: Vec<StepRecord>,
    pub active_map: Vec<ActiveMapRow>,
    pub n_global_steps: u64,
    pub n_total_substeps: u64,
    pub n_function_evals: u64,
    pub n_newton_iters: u64,
    pub mass_initial: Vec<f64>,
    pub mass_final: Vec<f64>,
}

/// Finite-volume initial condition: midpoint-rule cell averages of the
/// problem's initial profile.
pub fn initial_state(problem: &ProblemSpec, grid: &Grid1D) -> Result<State> {
    cell_average_init(|x| (problem.initial)(x), problem.n_vars, grid)
}

struct LevelCtx<'a> {
    problem: &'a ProblemSpec,
    grid: &'a Grid1D,
    opts: &'a EngineOptions,
    counter: &'a EvalCounter,
    periodic: bool,
    d: usize,
}

#[derive(Default)]
struct LevelOutputs {
    courant_history: Vec<StepRecord>,
    active_map: Vec<ActiveMapRow>,
    n_substeps: u64,
    newton_iters: u64,
}

struct FreshEdge {
    k: usize,
    run_idx: usize,
    edge: usize,
    eps: f64,
    fmax: f64,
}

struct SubstepEval {
    runs: Vec<RunStepData>,
    fresh: Vec<FreshEdge>,
    rejected: Vec<usize>,
    forced_m: Option<usize>,
    newton_iters: u64,
}

/// Advance every active run tentatively over one sub-step and decide which
/// fresh fluxes to reject. Nothing is committed to the state here.
fn attempt_substep(
    lc: &LevelCtx,
    level: usize,
    substep_idx: usize,
    state: &State,
    dt: f64,
    active: &[usize],
    frozen: &HashMap<usize, AcceptedFluxRecord>,
) -> Result<SubstepEval> {
    let d = lc.d;
    let n = lc.grid.n_cells;
    let ctx = RunContext {
        flux: &lc.problem.flux,
        bc: &lc.problem.bc,
        dx: lc.grid.dx,
        n_cells: n,
        periodic: lc.periodic,
        frozen,
        counter: lc.counter,
        newton_tol: lc.opts.integrator.newton_tol,
        max_newton_iters: lc.opts.integrator.max_newton_iters,
    };
    let geos = decompose_runs(active, n, lc.periodic);
    let mut runs = Vec::with_capacity(geos.len());
    let mut newton_iters = 0u64;
    for geo in &geos {
        let r = advance_run(&ctx, geo, state, dt, lc.opts.integrator.scheme)?;
        newton_iters += r.newton_iters;
        runs.push(r);
    }

    let mut fresh = Vec::new();
    for (ri, run) in runs.iter().enumerate() {
        let m = run.geo.cells.len();
        let count = if run.geo.cyclic { m } else { m + 1 };
        for e in 0..count {
            let k = global_interface(&run.geo, e, n, lc.periodic);
            if frozen.contains_key(&k) {
                continue;
            }
            let mut eps = 0.0f64;
            let mut fmax = 0.0f64;
            for v in 0..d {
                let fc = run.edge_new[e * d + v];
                eps = eps.max((fc - run.edge_ext[e * d + v]).abs());
                fmax = fmax.max(fc.abs());
            }
            fresh.push(FreshEdge { k, run_idx: ri, edge: e, eps, fmax });
        }
    }

    let tol = &lc.opts.tol;
    let fresh_keys: HashSet<usize> = fresh.iter().map(|f| f.k).collect();
    let (mut rejected, forced_m) = match &lc.opts.policy {
        RefinementPolicy::Estimator | RefinementPolicy::InflateToAll => {
            let mut rej: Vec<usize> = fresh
                .iter()
                .filter(|f| f.eps > tol.tau_rel * f.fmax + tol.tau_abs)
                .map(|f| f.k)
                .collect();
            if matches!(lc.opts.policy, RefinementPolicy::InflateToAll) {
                if !rej.is_empty() {
                    rej = fresh.iter().map(|f| f.k).collect();
                }
            } else if lc.opts.widening && d >= 2 && !rej.is_empty() {
                let mut local_c = vec![0.0; n];
                let mut dirs = vec![(false, false); n];
                for i in 0..n {
                    let u = state.cell(i);
                    let (lo, hi) = lc.problem.flux.wave_range(&u);
                    local_c[i] = lo.abs().max(hi.abs()) * dt / lc.grid.dx;
                    dirs[i] = (lo < 0.0, hi > 0.0);
                }
                let max_if = if lc.periodic { n - 1 } else { n };
                rej = widen_rejections(&rej, &local_c, &dirs, d, max_if)
                    .into_iter()
                    .filter(|k| fresh_keys.contains(k))
                    .collect();
            }
            (rej, None)
        }
        RefinementPolicy::Forced { interface, m, depth } => {
            if level < *depth && fresh_keys.contains(interface) {
                (vec![*interface], Some(*m))
            } else {
                (Vec::new(), None)
            }
        }
        RefinementPolicy::Scripted(f) => {
            let dec = f(level, substep_idx);
            let rej: Vec<usize> = dec
                .rejected
                .iter()
                .copied()
                .filter(|k| fresh_keys.contains(k))
                .collect();
            let m = if rej.is_empty() { None } else { Some(dec.m.max(1)) };
            (rej, m)
        }
    };
    rejected.sort_unstable();
    rejected.dedup();

    Ok(SubstepEval { runs, fresh, rejected, forced_m, newton_iters })
}

/// Write a run's committed values into the state and its weighted source
/// contributions into the ledger, skipping cells the child level will redo.
fn commit_run(
    state: &mut State,
    run: &RunStepData,
    d: usize,
    dt: f64,
    ledger: &mut FluxLedger,
    has_source: bool,
    skip: Option<&[bool]>,
) {
    let mut src = vec![0.0; d];
    for (j, &c) in run.geo.cells.iter().enumerate() {
        if skip.map_or(false, |mask| mask[c]) {
            continue;
        }
        for v in 0..d {
            state.values[v][c] = run.z_new[j * d + v];
        }
        if has_source {
            for v in 0..d {
                src[v] = dt * run.source_eff[j * d + v];
            }
            ledger.record_source(c, &src);
        }
    }
}

const MAX_NEWTON_RETRIES: usize = 5;

/// Integrate one level over `[t0, t0 + interval]`, recursing into finer
/// levels wherever fluxes are rejected. `active` and `frozen` are the
/// level's arrival sets and stay fixed for all its sub-steps.
#[allow(clippy::too_many_arguments)]
fn multirate_level(
    lc: &LevelCtx,
    level: usize,
    state: &mut State,
    t0: f64,
    interval: f64,
    dt_first: f64,
    active: &[usize],
    frozen: &HashMap<usize, AcceptedFluxRecord>,
    ledger: &mut FluxLedger,
    out: &mut LevelOutputs,
) -> Result<()> {
    let d = lc.d;
    let n = lc.grid.n_cells;
    let has_source = lc.problem.flux.has_source();
    let tiny = 1e-12 * interval.max(lc.opts.tol.global_dt);
    let dt_level = dt_first.min(interval);
    // accounting is by consumed length, not absolute time, so a level whose
    // step equals its whole interval reproduces the single-rate arithmetic
    // bit for bit
    let mut consumed = 0.0f64;
    let mut substep_idx = 0usize;

    while interval - consumed > tiny {
        let t_star = t0 + consumed;
        if substep_idx > 1_000_000 {
            return Err(SolverError::InvalidInput(format!(
                "sub-step loop at level {level} stalled at t = {t_star}"
            )));
        }
        let remaining = interval - consumed;
        let mut dt_att = dt_level.min(remaining);
        if remaining - dt_att < tiny {
            dt_att = remaining;
        }
        let frame = SubstepFrame {
            level_p: level,
            substep_s: substep_idx,
            t_star,
            dt_star: dt_att,
            t_triangle: t0 + interval,
        };

        // Newton breakdown is handled by retrying the same sub-step with a
        // halved step; the shortfall is picked up by later sub-steps
        let mut halvings = 0usize;
        let ev = loop {
            match attempt_substep(lc, level, substep_idx, state, dt_att, active, frozen) {
                Ok(ev) => break ev,
                Err(SolverError::NewtonDiverged { .. }) | Err(SolverError::NonFinite(_))
                    if halvings < MAX_NEWTON_RETRIES =>
                {
                    halvings += 1;
                    dt_att *= 0.5;
                    if dt_att < tiny {
                        return Err(SolverError::StepUnderflow { t: t_star, dt: dt_att });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let dt_att = dt_att;
        out.n_substeps += 1;
        out.newton_iters += ev.newton_iters;

        let cmax = max_wave_speed(state, &lc.problem.flux);
        out.courant_history.push(StepRecord {
            t: frame.t_star,
            dt: dt_att,
            courant: cmax * dt_att / lc.grid.dx,
            level,
            n_active: active.len(),
        });
        if level > 0 {
            for &c in active {
                out.active_map.push(ActiveMapRow { t: frame.t_star, level, cell: c });
            }
        }

        let rejected_set: HashSet<usize> = ev.rejected.iter().copied().collect();
        let mut accepted_records: Vec<AcceptedFluxRecord> = Vec::new();
        for fe in &ev.fresh {
            if rejected_set.contains(&fe.k) {
                continue;
            }
            let run = &ev.runs[fe.run_idx];
            let lo = fe.edge * d;
            let hi = lo + d;
            ledger.record_flux(fe.k, &run.edge_addend[lo..hi]);
            accepted_records.push(AcceptedFluxRecord {
                interface_index: fe.k,
                value_old: run.edge_old[lo..hi].to_vec(),
                value_new: run.edge_new[lo..hi].to_vec(),
                value_eff: run.edge_eff[lo..hi].to_vec(),
                accepted_dt: dt_att,
                accepted_at_time: t_star,
            });
        }

        if ev.rejected.is_empty() {
            for run in &ev.runs {
                commit_run(state, run, d, dt_att, ledger, has_source, None);
            }
        } else {
            if level + 1 > lc.opts.tol.max_depth {
                return Err(SolverError::MaxDepthExceeded {
                    max_depth: lc.opts.tol.max_depth,
                    t: t_star,
                    dt: dt_att,
                });
            }
            let child = ActiveSet::from_rejected(&ev.rejected, n, lc.periodic);
            debug_assert!(child.consistent(n, lc.periodic));
            let mut child_mask = vec![false; n];
            for &c in &child.active_cells {
                child_mask[c] = true;
            }
            for run in &ev.runs {
                commit_run(state, run, d, dt_att, ledger, has_source, Some(&child_mask));
            }

            let dt_child = match ev.forced_m {
                Some(m) => dt_att / m as f64,
                None => {
                    let mut eps = Vec::with_capacity(ev.rejected.len());
                    let mut fmax = Vec::with_capacity(ev.rejected.len());
                    for fe in &ev.fresh {
                        if rejected_set.contains(&fe.k) {
                            eps.push(fe.eps);
                            fmax.push(fe.fmax);
                        }
                    }
                    snap_to_fraction(
                        propose_substep(&eps, &fmax, &lc.opts.tol, dt_att),
                        dt_att,
                    )
                }
            };

            let mut child_frozen = frozen.clone();
            for rec in accepted_records {
                child_frozen.insert(rec.interface_index, rec);
            }
            multirate_level(
                lc,
                level + 1,
                state,
                t_star,
                dt_att,
                dt_child,
                &child.active_cells,
                &child_frozen,
                ledger,
                out,
            )?;
        }

        consumed += dt_att;
        substep_idx += 1;
    }
    Ok(())
}

/// Run the multirate integrator from t = 0 to `t_end` in fixed slabs of
/// `global_dt`, auditing conservation after every slab.
pub fn global_integrate(
    problem: &ProblemSpec,
    grid: &Grid1D,
    opts: &EngineOptions,
    t_end: f64,
) -> Result<IntegrationOutput> {
    opts.tol.validate()?;
    if !(t_end > 0.0) {
        return Err(SolverError::InvalidInput(format!(
            "t_end must be positive, got {t_end}"
        )));
    }
    if problem.n_vars != problem.flux.n_vars {
        return Err(SolverError::InvalidInput("problem variable count mismatch".into()));
    }
    let d = problem.n_vars;
    let n = grid.n_cells;
    let periodic = matches!(problem.bc, BoundaryCondition::Periodic);

    let mut state = initial_state(problem, grid)?;
    let mass_initial = total_mass(&state, grid);
    let counter = EvalCounter::new();
    let lc = LevelCtx { problem, grid, opts, counter: &counter, periodic, d };
    let mut out = LevelOutputs::default();
    let mut global_steps: Vec<GlobalStepRecord> = Vec::new();
    let all_cells: Vec<usize> = (0..n).collect();
    let no_frozen: HashMap<usize, AcceptedFluxRecord> = HashMap::new();

    let mut t = 0.0f64;
    let mut n_slabs = 0u64;
    while t_end - t > 1e-12 * t_end {
        let mut dt_slab = opts.tol.global_dt.min(t_end - t);
        if t_end - t - dt_slab < 1e-9 * opts.tol.global_dt {
            dt_slab = t_end - t;
        }
        let u_before = state.clone();
        let mut ledger = FluxLedger::new(d, n, periodic);
        multirate_level(
            &lc, 0, &mut state, t, dt_slab, dt_slab, &all_cells, &no_frozen, &mut ledger, &mut out,
        )?;
        t += dt_slab;
        state.time = t;
        if !state.is_finite() {
            return Err(SolverError::NonFinite(format!("state after slab ending at t = {t}")));
        }
        let audit = conservation_audit(&ledger, &u_before, &state, grid);
        global_steps.push(GlobalStepRecord { t_end: t, state: state.clone(), audit });
        n_slabs += 1;
    }

    let mass_final = total_mass(&state, grid);
    Ok(IntegrationOutput {
        final_state: state,
        global_steps,
        courant_history: out.courant_history,
        active_map: out.active_map,
        n_global_steps: n_slabs,
        n_total_substeps: out.n_substeps,
        n_function_evals: counter.get(),
        n_newton_iters: out.newton_iters,
        mass_initial,
        mass_final,
    })
}

/// Fixed-step whole-domain implicit integration with no error control and no
/// ledger; the reference the multirate engine must reproduce when its
/// tolerance is too loose to ever reject.
pub fn plain_single_rate(
    problem: &ProblemSpec,
    grid: &Grid1D,
    integ: &IntegratorConfig,
    global_dt: f64,
    t_end: f64,
) -> Result<Vec<State>> {
    let d = problem.n_vars;
    let n = grid.n_cells;
    let periodic = matches!(problem.bc, BoundaryCondition::Periodic);
    let mut state = initial_state(problem, grid)?;
    let counter = EvalCounter::new();
    let frozen: HashMap<usize, AcceptedFluxRecord> = HashMap::new();
    let ctx = RunContext {
        flux: &problem.flux,
        bc: &problem.bc,
        dx: grid.dx,
        n_cells: n,
        periodic,
        frozen: &frozen,
        counter: &counter,
        newton_tol: integ.newton_tol,
        max_newton_iters: integ.max_newton_iters,
    };
    let geo = decompose_runs(&(0..n).collect::<Vec<_>>(), n, periodic)
        .into_iter()
        .next()
        .expect("nonempty domain");

    let mut states = Vec::new();
    let mut t = 0.0f64;
    while t_end - t > 1e-12 * t_end {
        let mut dt = global_dt.min(t_end - t);
        if t_end - t - dt < 1e-9 * global_dt {
            dt = t_end - t;
        }
        let run = advance_run(&ctx, &geo, &state, dt, integ.scheme)?;
        for (j, &c) in geo.cells.iter().enumerate() {
            for v in 0..d {
                state.values[v][c] = run.z_new[j * d + v];
            }
        }
        t += dt;
        state.time = t;
        states.push(state.clone());
    }
    Ok(states)
}
