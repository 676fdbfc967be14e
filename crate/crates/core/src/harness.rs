//! Experiment harness: run configuration, named presets, the high-accuracy
//! reference oracle, error norms, the consistency experiment, CSV/JSON
//! reporting, and the command-line driver.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::engine::{
    self, global_integrate, multirate_component_baseline, AuditReport, EngineOptions,
    IntegrationOutput, RefinementPolicy, StepRecord, ToleranceConfig,
};
use crate::error::{Result, SolverError};
use crate::flux::semidiscrete_rhs;
use crate::grid::{build_grid, Grid1D, State};
use crate::integrators::{IntegratorConfig, Scheme, TRBDF2_GAMMA};
use crate::problems::{
    advection, buckley_leverett, burgers, rotating_shallow_water, saint_venant_dam_break,
    ProblemSpec,
};
use crate::reference::{reference_solve, ReferenceOptions};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "MULTIRATE_OUT_DIR";

fn default_nu() -> f64 {
    0.9
}
fn default_newton_tol() -> f64 {
    1e-12
}
fn default_max_depth() -> usize {
    10
}
fn default_widening() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub n_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TolSection {
    pub tau_abs: f64,
    pub tau_rel: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub global_dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegratorSection {
    /// "trbdf2", "theta", "forward_euler" or "backward_euler"
    pub scheme: String,
    #[serde(default)]
    pub theta: Option<f64>,
    /// only the L-stable TR-BDF2 value 2 - sqrt(2) is supported
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Conservative,
    ComponentBaseline,
    SingleRate,
}

/// One experiment, as read from a JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: String,
    pub grid: GridSection,
    pub tol: TolSection,
    pub integrator: IntegratorSection,
    pub mode: RunMode,
    pub t_end: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_widening")]
    pub widening: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| SolverError::InvalidInput(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme()?;
        self.build_problem()?;
        if self.grid.n_cells < 2 {
            return Err(SolverError::InvalidInput("grid.n_cells must be at least 2".into()));
        }
        if !(self.t_end > 0.0) {
            return Err(SolverError::InvalidInput("t_end must be positive".into()));
        }
        for &t in &self.snapshot_times {
            if !(0.0..=self.t_end + 1e-12 * self.t_end).contains(&t) {
                return Err(SolverError::InvalidInput(format!(
                    "snapshot time {t} outside [0, {}]",
                    self.t_end
                )));
            }
        }
        if let Some(g) = self.integrator.gamma {
            if (g - TRBDF2_GAMMA).abs() > 1e-12 {
                return Err(SolverError::InvalidInput(
                    "integrator.gamma must be 2 - sqrt(2)".into(),
                ));
            }
        }
        self.tolerance()?.validate()
    }

    pub fn scheme(&self) -> Result<Scheme> {
        match self.integrator.scheme.as_str() {
            "trbdf2" | "tr-bdf2" | "tr_bdf2" => Ok(Scheme::TrBdf2),
            "theta" => {
                let theta = self.integrator.theta.ok_or_else(|| {
                    SolverError::InvalidInput("theta scheme needs integrator.theta".into())
                })?;
                if !(0.0..=1.0).contains(&theta) {
                    return Err(SolverError::InvalidInput("theta must lie in [0, 1]".into()));
                }
                Ok(Scheme::Theta { theta })
            }
            "forward_euler" => Ok(Scheme::Theta { theta: 0.0 }),
            "backward_euler" => Ok(Scheme::Theta { theta: 1.0 }),
            other => Err(SolverError::InvalidInput(format!("unknown scheme '{other}'"))),
        }
    }

    pub fn build_problem(&self) -> Result<ProblemSpec> {
        match self.problem.as_str() {
            "burgers-shock" => Ok(burgers(1.0, 0.0, 0.0)),
            "burgers-rarefaction" => Ok(burgers(0.0, 1.0, 0.0)),
            "buckley-leverett" => Ok(buckley_leverett()),
            "dam-break" => Ok(saint_venant_dam_break()),
            "rotating-sw" => Ok(rotating_shallow_water()),
            "advection" => Ok(advection(1.0)),
            other => Err(SolverError::InvalidInput(format!("unknown problem '{other}'"))),
        }
    }

    pub fn tolerance(&self) -> Result<ToleranceConfig> {
        let scheme = self.scheme()?;
        Ok(ToleranceConfig {
            tau_abs: self.tol.tau_abs,
            tau_rel: self.tol.tau_rel,
            nu: self.tol.nu,
            order_r: scheme.controller_order(),
            max_depth: self.max_depth,
            global_dt: self.tol.global_dt,
        })
    }

    pub fn integrator_config(&self) -> Result<IntegratorConfig> {
        Ok(IntegratorConfig {
            scheme: self.scheme()?,
            newton_tol: self.integrator.newton_tol,
            max_newton_iters: 30,
        })
    }

    fn engine_options(&self, policy: RefinementPolicy) -> Result<EngineOptions> {
        Ok(EngineOptions {
            tol: self.tolerance()?,
            integrator: self.integrator_config()?,
            policy,
            widening: self.widening,
        })
    }
}

/// Summary of one experiment run, serialized to report.json.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub problem: String,
    pub mode: RunMode,
    pub mass_initial: Vec<f64>,
    pub mass_final: Vec<f64>,
    pub mass_ratio: Vec<f64>,
    pub mass_diff_normalized: Vec<f64>,
    pub l1_error: Option<f64>,
    pub n_global_steps: u64,
    pub n_total_substeps: u64,
    pub n_function_evals: u64,
    pub n_newton_iters: u64,
    pub courant_history: Vec<CourantRow>,
    pub active_map: Vec<ActiveRow>,
    /// worst reconstruction residual over all audited global steps
    pub audit_reconstruction_max: Option<f64>,
    /// true when every audited interface matched bitwise on both sides
    pub audit_sides_bitwise: Option<bool>,
    pub audit_mass_balance_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CourantRow {
    pub t: f64,
    pub dt: f64,
    pub courant: f64,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ActiveRow {
    pub t: f64,
    pub level: usize,
    pub cell: usize,
}

/// Everything a run produced, before and besides the files.
pub struct ExperimentOutcome {
    pub report: RunReport,
    pub final_state: State,
    /// state at the end of every global slab
    pub slab_states: Vec<(f64, State)>,
    /// per-slab conservation audits (conservative and single-rate modes)
    pub audits: Vec<(f64, AuditReport)>,
    /// snapshots actually taken: (requested, actual, state)
    pub snapshots: Vec<(f64, f64, State)>,
}

/// Discrete l1 norm of the difference: sum over variables and cells of
/// dx |a - b|.
pub fn l1_error(a: &State, b: &State, grid: &Grid1D) -> Result<f64> {
    if a.n_vars != b.n_vars || a.n_cells() != b.n_cells() || a.n_cells() != grid.n_cells {
        return Err(SolverError::InvalidInput("state shapes differ".into()));
    }
    let mut s = 0.0;
    for v in 0..a.n_vars {
        for i in 0..grid.n_cells {
            s += grid.dx * (a.values[v][i] - b.values[v][i]).abs();
        }
    }
    Ok(s)
}

/// High-accuracy method-of-lines oracle: Dormand-Prince 4(5) on the same
/// semidiscrete system, steps capped at 2e-5 of the horizon, rtol 1e-8,
/// atol 1e-10.
pub fn reference_solution(problem: &ProblemSpec, grid: &Grid1D, t_end: f64) -> Result<State> {
    let d = problem.n_vars;
    let n = grid.n_cells;
    let state0 = engine::initial_state(problem, grid)?;
    let mut y0 = vec![0.0; d * n];
    for v in 0..d {
        y0[v * n..(v + 1) * n].copy_from_slice(&state0.values[v]);
    }
    let mut scratch = State::new(d, n, 0.0);
    let mut rhs = |_t: f64, y: &[f64], dydt: &mut [f64]| {
        for v in 0..d {
            scratch.values[v].copy_from_slice(&y[v * n..(v + 1) * n]);
        }
        match semidiscrete_rhs(&scratch, &problem.flux, grid, &problem.bc) {
            Ok((tend, _)) => {
                for v in 0..d {
                    dydt[v * n..(v + 1) * n].copy_from_slice(&tend[v]);
                }
            }
            Err(_) => dydt.fill(f64::NAN),
        }
    };
    let opts = ReferenceOptions {
        rtol: 1e-8,
        atol: 1e-10,
        max_step: 2e-5 * t_end,
    };
    let y = reference_solve(&mut rhs, 0.0, &y0, t_end, &opts)?;
    let mut out = State::new(d, n, t_end);
    for v in 0..d {
        out.values[v].copy_from_slice(&y[v * n..(v + 1) * n]);
    }
    Ok(out)
}

/// Mass ratio and normalized difference with a zero-mass guard: when the
/// initial mass vanishes relative to the l1 scale of the data, the ratio is
/// reported as 1 - normalized difference instead of the raw quotient. A field
/// that starts identically zero falls back to absolute units so that a
/// roundoff-sized drift is not inflated into nonsense.
fn mass_summary(m0: &[f64], mf: &[f64], scale_l1: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ratio = Vec::with_capacity(m0.len());
    let mut diff = Vec::with_capacity(m0.len());
    for v in 0..m0.len() {
        let base = m0[v].abs().max(scale_l1[v]);
        let scale = if base > 0.0 { base } else { 1.0 };
        let dn = (mf[v] - m0[v]).abs() / scale;
        diff.push(dn);
        if m0[v].abs() > 1e-12 * scale {
            ratio.push(mf[v] / m0[v]);
        } else {
            ratio.push(1.0 - dn);
        }
    }
    (ratio, diff)
}

fn l1_scale(state: &State, grid: &Grid1D) -> Vec<f64> {
    (0..state.n_vars)
        .map(|v| state.values[v].iter().map(|u| grid.dx * u.abs()).sum())
        .collect()
}

fn pick_snapshots(
    requested: &[f64],
    initial: &State,
    slabs: &[(f64, State)],
) -> Vec<(f64, f64, State)> {
    let mut out = Vec::with_capacity(requested.len());
    for &treq in requested {
        let mut best: (f64, f64, &State) = (0.0, (treq - 0.0).abs(), initial);
        for (t, s) in slabs {
            let d = (treq - t).abs();
            if d < best.1 {
                best = (*t, d, s);
            }
        }
        out.push((treq, best.0, best.2.clone()));
    }
    out
}

/// Execute one experiment per the config, write any configured outputs, and
/// return the report plus full states.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let problem = config.build_problem()?;
    let grid = build_grid(problem.x_left, problem.x_right, config.grid.n_cells)?;
    let initial = engine::initial_state(&problem, &grid)?;
    let scale = l1_scale(&initial, &grid);

    let (report_core, final_state, slab_states, audits) = match config.mode {
        RunMode::Conservative | RunMode::SingleRate => {
            let policy = if config.mode == RunMode::Conservative {
                RefinementPolicy::Estimator
            } else {
                RefinementPolicy::InflateToAll
            };
            let opts = config.engine_options(policy)?;
            let out = global_integrate(&problem, &grid, &opts, config.t_end)?;
            let IntegrationOutput {
                final_state,
                global_steps,
                courant_history,
                active_map,
                n_global_steps,
                n_total_substeps,
                n_function_evals,
                n_newton_iters,
                mass_initial,
                mass_final,
            } = out;
            let audits: Vec<(f64, AuditReport)> =
                global_steps.iter().map(|g| (g.t_end, g.audit.clone())).collect();
            let slabs: Vec<(f64, State)> =
                global_steps.into_iter().map(|g| (g.t_end, g.state)).collect();
            let (mass_ratio, mass_diff) = mass_summary(&mass_initial, &mass_final, &scale);
            let report = RunReport {
                problem: config.problem.clone(),
                mode: config.mode,
                mass_initial,
                mass_final,
                mass_ratio,
                mass_diff_normalized: mass_diff,
                l1_error: None,
                n_global_steps,
                n_total_substeps,
                n_function_evals,
                n_newton_iters,
                courant_history: courant_rows(&courant_history),
                active_map: active_rows(&active_map),
                audit_reconstruction_max: audits
                    .iter()
                    .map(|(_, a)| a.reconstruction_residual)
                    .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r)))),
                audit_sides_bitwise: Some(audits.iter().all(|(_, a)| a.sides_bitwise_equal)),
                audit_mass_balance_max: audits
                    .iter()
                    .map(|(_, a)| a.mass_balance_residual)
                    .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r)))),
            };
            (report, final_state, slabs, audits)
        }
        RunMode::ComponentBaseline => {
            let tol = config.tolerance()?;
            let integ = config.integrator_config()?;
            let out = multirate_component_baseline(&problem, &grid, &tol, &integ, config.t_end)?;
            let (mass_ratio, mass_diff) = mass_summary(&out.mass_initial, &out.mass_final, &scale);
            let report = RunReport {
                problem: config.problem.clone(),
                mode: config.mode,
                mass_initial: out.mass_initial.clone(),
                mass_final: out.mass_final.clone(),
                mass_ratio,
                mass_diff_normalized: mass_diff,
                l1_error: None,
                n_global_steps: out.n_global_steps,
                n_total_substeps: out.n_total_substeps,
                n_function_evals: out.n_function_evals,
                n_newton_iters: out.n_newton_iters,
                courant_history: courant_rows(&out.courant_history),
                active_map: out
                    .active_map
                    .iter()
                    .map(|r| ActiveRow { t: r.t, level: r.level, cell: r.cell })
                    .collect(),
                audit_reconstruction_max: None,
                audit_sides_bitwise: None,
                audit_mass_balance_max: None,
            };
            (report, out.final_state, out.global_steps, Vec::new())
        }
    };

    let mut report = report_core;
    if let Some(exact) = &problem.exact {
        let mut truth = State::new(problem.n_vars, grid.n_cells, config.t_end);
        for i in 0..grid.n_cells {
            let vals = exact(grid.centers[i], config.t_end);
            for v in 0..problem.n_vars {
                truth.values[v][i] = vals[v];
            }
        }
        report.l1_error = Some(l1_error(&final_state, &truth, &grid)?);
    }

    let snapshots = pick_snapshots(&config.snapshot_times, &initial, &slab_states);
    let outcome = ExperimentOutcome {
        report,
        final_state,
        slab_states,
        audits,
        snapshots,
    };
    if let Some(dir) = resolve_out_dir(config) {
        write_outputs(&outcome, &problem, &grid, &dir)?;
    }
    Ok(outcome)
}

fn courant_rows(rows: &[StepRecord]) -> Vec<CourantRow> {
    rows.iter()
        .map(|r| CourantRow { t: r.t, dt: r.dt, courant: r.courant, level: r.level })
        .collect()
}

fn active_rows(rows: &[engine::ActiveMapRow]) -> Vec<ActiveRow> {
    rows.iter()
        .map(|r| ActiveRow { t: r.t, level: r.level, cell: r.cell })
        .collect()
}

fn resolve_out_dir(config: &RunConfig) -> Option<PathBuf> {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(d) if !d.is_empty() => Some(PathBuf::from(d)),
        _ => config.output_dir.clone(),
    }
}

/// Write report.json, courant.csv, active_map.csv, audit.json and the
/// snapshot files into `dir`. Column orders are fixed and the float
/// formatting is the shortest round-trip form, so identical runs produce
/// byte-identical files.
fn write_outputs(
    outcome: &ExperimentOutcome,
    problem: &ProblemSpec,
    grid: &Grid1D,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let report_json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| SolverError::InvalidInput(format!("report serialization: {e}")))?;
    fs::write(dir.join("report.json"), report_json + "\n")?;

    let mut courant = String::from("t,dt,courant\n");
    for r in &outcome.report.courant_history {
        courant.push_str(&format!("{},{},{}\n", r.t, r.dt, r.courant));
    }
    fs::write(dir.join("courant.csv"), courant)?;

    let mut active = String::from("step_start_time,level,cell_index\n");
    for r in &outcome.report.active_map {
        active.push_str(&format!("{},{},{}\n", r.t, r.level, r.cell));
    }
    fs::write(dir.join("active_map.csv"), active)?;

    if !outcome.audits.is_empty() {
        #[derive(Serialize)]
        struct AuditRow {
            t_end: f64,
            sides_bitwise_equal: bool,
            reconstruction_residual: f64,
            mass_balance_residual: f64,
        }
        let rows: Vec<AuditRow> = outcome
            .audits
            .iter()
            .map(|(t, a)| AuditRow {
                t_end: *t,
                sides_bitwise_equal: a.sides_bitwise_equal,
                reconstruction_residual: a.reconstruction_residual,
                mass_balance_residual: a.mass_balance_residual,
            })
            .collect();
        let audit_json = serde_json::to_string_pretty(&rows)
            .map_err(|e| SolverError::InvalidInput(format!("audit serialization: {e}")))?;
        fs::write(dir.join("audit.json"), audit_json + "\n")?;
    }

    for (idx, (_req, actual, state)) in outcome.snapshots.iter().enumerate() {
        let mut csv = String::from("t,x");
        for name in &problem.var_names {
            csv.push(',');
            csv.push_str(name);
        }
        csv.push('\n');
        for i in 0..grid.n_cells {
            csv.push_str(&format!("{},{}", actual, grid.centers[i]));
            for v in 0..problem.n_vars {
                csv.push_str(&format!(",{}", state.values[v][i]));
            }
            csv.push('\n');
        }
        fs::write(dir.join(format!("snapshot_{idx}.csv")), csv)?;
    }
    Ok(())
}

/// Built-in benchmark presets by name.
pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = |problem: &str,
               n_cells: usize,
               tau_abs: f64,
               tau_rel: f64,
               global_dt: f64,
               newton_tol: f64,
               t_end: f64,
               snapshot_times: Vec<f64>| RunConfig {
        problem: problem.to_string(),
        grid: GridSection { n_cells },
        tol: TolSection { tau_abs, tau_rel, nu: 0.9, global_dt },
        integrator: IntegratorSection {
            scheme: "trbdf2".to_string(),
            theta: None,
            gamma: None,
            newton_tol,
        },
        mode: RunMode::Conservative,
        t_end,
        snapshot_times,
        output_dir: None,
        max_depth: 10,
        widening: true,
    };
    match name {
        "burgers-shock" => Ok(cfg("burgers-shock", 400, 1e-4, 1e-6, 0.1, 1e-14, 1.0, vec![0.45, 1.0])),
        "burgers-rarefaction" => Ok(cfg(
            "burgers-rarefaction",
            400,
            1e-4,
            1e-6,
            0.1,
            1e-14,
            1.0,
            vec![0.5, 1.0],
        )),
        "buckley-leverett" => Ok(cfg(
            "buckley-leverett",
            100,
            1e-4,
            1e-5,
            0.1,
            1e-13,
            0.5,
            vec![0.25, 0.5],
        )),
        "dam-break" => Ok(cfg("dam-break", 300, 1e-2, 1e-4, 8.0, 1e-13, 100.0, vec![42.0, 100.0])),
        "rotating-sw" => Ok(cfg(
            "rotating-sw",
            480,
            1e-3,
            1e-4,
            700.0,
            1e-12,
            58100.0,
            vec![58100.0],
        )),
        other => Err(SolverError::InvalidInput(format!("unknown preset '{other}'"))),
    }
}

/// One grid level of the consistency experiment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConsistencyPoint {
    pub n_cells: usize,
    pub dx: f64,
    /// max-norm defect of the final fine sub-step at the refined cells,
    /// divided by the coarse step
    pub residual: f64,
}

/// Truncation study of the multirate interface coupling on linear advection
/// at fixed CFL. The flux at mid-domain is refined by one level (halved
/// step); a whole-domain attempt from the exact initial data provides the
/// frozen effective fluxes flanking the refined pair, and the final fine
/// sub-step is then taken from the exact mid-step solution. The reported
/// residual isolates the interface defect: with backward Euler the fresh
/// and frozen fluxes are both endpoint values so the defect shrinks with
/// dx, while forward Euler mixes evaluation times and keeps an O(1) floor.
pub fn consistency_experiment(theta: f64, cfl: f64, grids: &[usize]) -> Result<Vec<ConsistencyPoint>> {
    use crate::engine::substep::{advance_run, RunContext, RunGeometry};
    use crate::engine::{AcceptedFluxRecord, EvalCounter};
    use std::collections::HashMap;

    let mut out = Vec::with_capacity(grids.len());
    for &n in grids {
        if n < 8 {
            return Err(SolverError::InvalidInput("consistency grids need n >= 8".into()));
        }
        let p = advection(1.0);
        let grid = build_grid(p.x_left, p.x_right, n)?;
        let dt = cfl * grid.dx;
        let iface = n / 2;
        let exact = p.exact.as_ref().expect("advection has an exact solution");
        let scheme = Scheme::Theta { theta };
        let counter = EvalCounter::new();
        let no_frozen = HashMap::new();
        let ctx = RunContext {
            flux: &p.flux,
            bc: &p.bc,
            dx: grid.dx,
            n_cells: n,
            periodic: true,
            frozen: &no_frozen,
            counter: &counter,
            newton_tol: 1e-13,
            max_newton_iters: 30,
        };
        let full_geo = RunGeometry { cells: (0..n).collect(), cyclic: true };
        let u0 = engine::initial_state(&p, &grid)?;
        let parent = advance_run(&ctx, &full_geo, &u0, dt, scheme)?;

        // on the cyclic whole-domain run, local edge index == interface index
        let mut frozen = HashMap::new();
        for k in [iface - 1, iface + 1] {
            frozen.insert(
                k,
                AcceptedFluxRecord {
                    interface_index: k,
                    value_old: vec![parent.edge_old[k]],
                    value_new: vec![parent.edge_new[k]],
                    value_eff: vec![parent.edge_eff[k]],
                    accepted_dt: dt,
                    accepted_at_time: 0.0,
                },
            );
        }

        let mut mid = State::new(1, n, 0.5 * dt);
        for i in 0..n {
            mid.values[0][i] = exact(grid.centers[i], 0.5 * dt)[0];
        }
        let child_ctx = RunContext { frozen: &frozen, ..ctx };
        let geo = RunGeometry { cells: vec![iface - 1, iface], cyclic: false };
        let child = advance_run(&child_ctx, &geo, &mid, 0.5 * dt, scheme)?;

        let mut worst = 0.0f64;
        for (j, &c) in geo.cells.iter().enumerate() {
            let truth = exact(grid.centers[c], dt)[0];
            worst = worst.max((child.z_new[j] - truth).abs());
        }
        out.push(ConsistencyPoint { n_cells: n, dx: grid.dx, residual: worst / dt });
    }
    Ok(out)
}

#[derive(Parser, Debug)]
#[command(name = "multirate", about = "Multirate conservative finite volume benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Execute one experiment from a JSON config
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute a named preset (burgers-shock, burgers-rarefaction,
    /// buckley-leverett, dam-break, rotating-sw)
    Preset {
        name: String,
        /// conservative, component_baseline or single_rate
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run conservative, baseline and single-rate modes side by side
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Conservation audit only
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Truncation study with a pinned refinement region
    Consistency {
        /// forward_euler or backward_euler
        #[arg(long)]
        scheme: String,
        #[arg(long, default_value_t = 0.8)]
        cfl: f64,
    },
}

fn parse_mode(s: &str) -> Result<RunMode> {
    match s {
        "conservative" => Ok(RunMode::Conservative),
        "component_baseline" => Ok(RunMode::ComponentBaseline),
        "single_rate" => Ok(RunMode::SingleRate),
        other => Err(SolverError::InvalidInput(format!("unknown mode '{other}'"))),
    }
}

fn short_report(r: &RunReport) -> String {
    let ratio: Vec<String> = r.mass_ratio.iter().map(|x| format!("{x:.12}")).collect();
    let diff: Vec<String> = r.mass_diff_normalized.iter().map(|x| format!("{x:.3e}")).collect();
    format!(
        "mode={:?} mass_ratio=[{}] mass_diff=[{}] steps={} substeps={} evals={}",
        r.mode,
        ratio.join(", "),
        diff.join(", "),
        r.n_global_steps,
        r.n_total_substeps,
        r.n_function_evals
    )
}

/// Command-line driver. Exit codes: 0 success, 1 engine or audit failure,
/// 2 configuration or usage error.
pub fn cli_main<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(cli) {
        Ok(code) => code,
        Err(SolverError::InvalidInput(msg)) => {
            eprintln!("config error: {msg}");
            2
        }
        Err(SolverError::Io(e)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            1
        }
    }
}

fn run_cli(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Run { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let outcome = run_experiment(&cfg).map_err(promote_engine_error)?;
            println!("{}", short_report(&outcome.report));
            Ok(0)
        }
        Cmd::Preset { name, mode, out } => {
            let mut cfg = preset(&name)?;
            if let Some(m) = mode {
                cfg.mode = parse_mode(&m)?;
            }
            if let Some(dir) = out {
                cfg.output_dir = Some(dir);
            }
            let outcome = run_experiment(&cfg).map_err(promote_engine_error)?;
            println!("{}", short_report(&outcome.report));
            Ok(0)
        }
        Cmd::Compare { config } => {
            let base = RunConfig::from_file(&config)?;
            for mode in [RunMode::Conservative, RunMode::ComponentBaseline, RunMode::SingleRate] {
                let mut cfg = base.clone();
                cfg.mode = mode;
                if let Some(dir) = &base.output_dir {
                    let sub = match mode {
                        RunMode::Conservative => "conservative",
                        RunMode::ComponentBaseline => "component_baseline",
                        RunMode::SingleRate => "single_rate",
                    };
                    cfg.output_dir = Some(dir.join(sub));
                }
                let outcome = run_experiment(&cfg).map_err(promote_engine_error)?;
                println!("{}", short_report(&outcome.report));
            }
            Ok(0)
        }
        Cmd::Audit { config } => {
            let mut cfg = RunConfig::from_file(&config)?;
            cfg.mode = RunMode::Conservative;
            let outcome = run_experiment(&cfg).map_err(promote_engine_error)?;
            let mut ok = true;
            for (t, a) in &outcome.audits {
                println!(
                    "t={t} bitwise={} reconstruction={:.3e} mass_balance={:.3e}",
                    a.sides_bitwise_equal, a.reconstruction_residual, a.mass_balance_residual
                );
                ok &= a.sides_bitwise_equal && a.reconstruction_residual <= 1e-13;
            }
            Ok(if ok { 0 } else { 1 })
        }
        Cmd::Consistency { scheme, cfl } => {
            let theta = match scheme.as_str() {
                "forward_euler" => 0.0,
                "backward_euler" => 1.0,
                other => {
                    return Err(SolverError::InvalidInput(format!(
                        "consistency scheme must be forward_euler or backward_euler, got '{other}'"
                    )))
                }
            };
            let table = consistency_experiment(theta, cfl, &[100, 200, 400])?;
            println!("n_cells,dx,residual");
            for p in &table {
                println!("{},{},{}", p.n_cells, p.dx, p.residual);
            }
            Ok(0)
        }
    }
}

/// IO errors from reading configs are usage errors (exit 2), but anything
/// the engine raises mid-run is a run failure (exit 1).
fn promote_engine_error(e: SolverError) -> SolverError {
    match e {
        SolverError::InvalidInput(m) => SolverError::NonFinite(format!("engine rejected run: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> RunConfig {
        RunConfig {
            problem: "advection".into(),
            grid: GridSection { n_cells: 16 },
            tol: TolSection { tau_abs: 1e9, tau_rel: 0.0, nu: 0.9, global_dt: 0.05 },
            integrator: IntegratorSection {
                scheme: "trbdf2".into(),
                theta: None,
                gamma: None,
                newton_tol: 1e-12,
            },
            mode: RunMode::Conservative,
            t_end: 0.2,
            snapshot_times: vec![0.1, 0.2],
            output_dir: None,
            max_depth: 10,
            widening: true,
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let text = serde_json::to_string(&tiny_config()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.problem, "advection");
        assert_eq!(back.mode, RunMode::Conservative);
        back.validate().unwrap();
    }

    #[test]
    fn config_defaults_fill_in() {
        let text = r#"{
            "problem": "buckley-leverett",
            "grid": {"n_cells": 100},
            "tol": {"tau_abs": 1e-4, "tau_rel": 1e-5, "global_dt": 0.1},
            "integrator": {"scheme": "trbdf2"},
            "mode": "conservative",
            "t_end": 0.5
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.tol.nu, 0.9);
        assert_eq!(cfg.max_depth, 10);
        assert!(cfg.widening);
        assert!(cfg.snapshot_times.is_empty());
    }

    #[test]
    fn config_rejections() {
        let mut c = tiny_config();
        c.snapshot_times = vec![0.5];
        assert!(c.validate().is_err(), "snapshot beyond t_end");
        let mut c = tiny_config();
        c.integrator.scheme = "rk4".into();
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.integrator.scheme = "theta".into();
        assert!(c.validate().is_err(), "theta scheme without theta value");
        c.integrator.theta = Some(0.5);
        assert!(c.validate().is_ok());
        let mut c = tiny_config();
        c.integrator.gamma = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.problem = "kdv".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn l1_error_examples() {
        let grid = build_grid(0.0, 1.0, 10).unwrap();
        let a = State::new(1, 10, 0.0);
        assert_eq!(l1_error(&a, &a, &grid).unwrap(), 0.0);
        let mut b = a.clone();
        for x in b.values[0].iter_mut() {
            *x = 0.3;
        }
        assert_abs_diff_eq!(l1_error(&a, &b, &grid).unwrap(), 0.3, epsilon = 1e-14);
        let c = State::new(2, 10, 0.0);
        assert!(l1_error(&a, &c, &grid).is_err());
    }

    #[test]
    fn mass_summary_zero_mass_convention() {
        // zero-mean data: ratio falls back to 1 - normalized diff
        let (ratio, diff) = mass_summary(&[0.0], &[-0.004], &[2.0]);
        assert_abs_diff_eq!(diff[0], 0.002, epsilon = 1e-15);
        assert_abs_diff_eq!(ratio[0], 0.998, epsilon = 1e-15);
        // ordinary data: plain quotient
        let (ratio, diff) = mass_summary(&[2.0], &[1.9], &[2.0]);
        assert_abs_diff_eq!(ratio[0], 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(diff[0], 0.05, epsilon = 1e-15);
        // identically zero field: absolute units, no 1e300-scale blowup
        let (ratio, diff) = mass_summary(&[0.0], &[-1.1e-11], &[0.0]);
        assert_abs_diff_eq!(diff[0], 1.1e-11, epsilon = 1e-24);
        assert_abs_diff_eq!(ratio[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn presets_build_and_validate() {
        for name in [
            "burgers-shock",
            "burgers-rarefaction",
            "buckley-leverett",
            "dam-break",
            "rotating-sw",
        ] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(preset("kp-equation").is_err());
    }

    #[test]
    fn run_experiment_advection_smoke() {
        let outcome = run_experiment(&tiny_config()).unwrap();
        assert_eq!(outcome.report.n_global_steps, 4);
        assert_eq!(outcome.snapshots.len(), 2);
        assert_abs_diff_eq!(outcome.snapshots[0].1, 0.1, epsilon = 1e-12);
        assert!(outcome.report.audit_sides_bitwise.unwrap());
        assert!(outcome.report.audit_reconstruction_max.unwrap() < 1e-13);
        // periodic transport conserves mass to rounding
        assert!(outcome.report.mass_diff_normalized[0] < 1e-12);
        assert!(outcome.report.l1_error.is_some());
    }

    #[test]
    fn reference_constant_state_is_unchanged() {
        let p = burgers(0.5, 0.5, 0.0);
        let grid = build_grid(p.x_left, p.x_right, 20).unwrap();
        let r = reference_solution(&p, &grid, 0.05).unwrap();
        for i in 0..20 {
            assert_abs_diff_eq!(r.values[0][i], 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn consistency_backward_euler_beats_forward_euler() {
        // the frozen-flux time lag leaves forward Euler with an O(1)
        // residual floor at (c/4) max|u_t| (Taylor expansion of the fine
        // sub-step), while backward Euler shrinks with dx
        let be = consistency_experiment(1.0, 0.8, &[256]).unwrap();
        let fe = consistency_experiment(0.0, 0.8, &[256]).unwrap();
        assert!(be[0].residual.is_finite() && fe[0].residual.is_finite());
        assert!(
            fe[0].residual > 2.0 * be[0].residual,
            "explicit defect {} should dominate implicit {}",
            fe[0].residual,
            be[0].residual
        );
        let floor = 0.2 * 2.0 * std::f64::consts::PI;
        assert!((fe[0].residual / floor - 1.0).abs() < 0.05, "fe floor {}", fe[0].residual);
    }

    #[test]
    fn cli_exit_codes() {
        fn argv(s: &str) -> Vec<String> {
            s.split_whitespace().map(|w| w.to_string()).collect()
        }
        assert_eq!(cli_main(argv("multirate run --config /nonexistent.json")), 2);
        assert_eq!(cli_main(argv("multirate preset not-a-preset")), 2);
        assert_eq!(cli_main(argv("multirate consistency --scheme rk9")), 2);
        assert_eq!(cli_main(argv("multirate bogus-subcommand")), 2);
    }
}
