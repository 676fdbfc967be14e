//! Benchmark problem definitions: physics, boundary conditions, initial data,
//! and closed-form solutions where available.

use crate::flux::{FluxFunction, NumericalFluxKind};
use crate::grid::State;

/// Gravitational acceleration used by both shallow water problems.
pub const GRAVITY: f64 = 9.81;

/// Boundary treatment for the two outer interfaces.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition {
    /// Ghost cells hold a fixed value, or copy the adjacent interior cell
    /// when the value is `None` (zero-gradient outflow).
    Dirichlet {
        left: Option<Vec<f64>>,
        right: Option<Vec<f64>>,
    },
    Periodic,
}

impl BoundaryCondition {
    pub fn dirichlet(left: Vec<f64>, right: Vec<f64>) -> Self {
        BoundaryCondition::Dirichlet {
            left: Some(left),
            right: Some(right),
        }
    }

    pub fn zero_gradient() -> Self {
        BoundaryCondition::Dirichlet {
            left: None,
            right: None,
        }
    }
}

/// Ghost cell values for the left and right boundary at time `_t`.
pub fn apply_bc(state: &State, bc: &BoundaryCondition, _t: f64) -> (Vec<f64>, Vec<f64>) {
    let n = state.n_cells();
    match bc {
        BoundaryCondition::Dirichlet { left, right } => {
            let gl = left.clone().unwrap_or_else(|| state.cell(0));
            let gr = right.clone().unwrap_or_else(|| state.cell(n - 1));
            (gl, gr)
        }
        BoundaryCondition::Periodic => (state.cell(n - 1), state.cell(0)),
    }
}

/// A complete problem setup: domain, physics, boundaries, initial data, and
/// an optional exact solution `(x, t) -> u`.
pub struct ProblemSpec {
    pub name: String,
    pub n_vars: usize,
    pub var_names: Vec<&'static str>,
    pub x_left: f64,
    pub x_right: f64,
    pub flux: FluxFunction,
    pub bc: BoundaryCondition,
    pub initial: Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
    pub exact: Option<Box<dyn Fn(f64, f64) -> Vec<f64> + Send + Sync>>,
}

/// Burgers equation u_t + (u^2/2)_x = 0 on (-1, 3) with Riemann initial data
/// u_l for x < x0, u_r beyond, and fixed inflow values at both ends.
/// The exact solution is the entropy one: a shock moving at (u_l + u_r)/2
/// when u_l > u_r, otherwise a rarefaction fan.
pub fn burgers(u_l: f64, u_r: f64, x0: f64) -> ProblemSpec {
    let flux = FluxFunction::new(
        1,
        NumericalFluxKind::Rusanov,
        |u, out| out[0] = 0.5 * u[0] * u[0],
        |l, r| l[0].abs().max(r[0].abs()),
    );
    let exact: Box<dyn Fn(f64, f64) -> Vec<f64> + Send + Sync> = if u_l > u_r {
        let s = 0.5 * (u_l + u_r);
        Box::new(move |x, t| vec![if x - x0 < s * t { u_l } else { u_r }])
    } else {
        Box::new(move |x, t| {
            if t <= 0.0 {
                return vec![if x < x0 { u_l } else { u_r }];
            }
            let xi = (x - x0) / t;
            vec![xi.clamp(u_l, u_r)]
        })
    };
    ProblemSpec {
        name: format!("burgers(ul={u_l}, ur={u_r})"),
        n_vars: 1,
        var_names: vec!["u"],
        x_left: -1.0,
        x_right: 3.0,
        flux,
        bc: BoundaryCondition::dirichlet(vec![u_l], vec![u_r]),
        initial: Box::new(move |x| vec![if x < x0 { u_l } else { u_r }]),
        exact: Some(exact),
    }
}

/// Linear advection u_t + a u_x = 0 on the periodic unit interval with a
/// smooth sine profile; used for truncation-error studies.
pub fn advection(speed: f64) -> ProblemSpec {
    let flux = FluxFunction::new(
        1,
        NumericalFluxKind::Upwind { speed },
        move |u, out| out[0] = speed * u[0],
        move |_, _| speed.abs(),
    );
    let u0 = |x: f64| (2.0 * std::f64::consts::PI * x).sin();
    ProblemSpec {
        name: format!("advection(a={speed})"),
        n_vars: 1,
        var_names: vec!["u"],
        x_left: 0.0,
        x_right: 1.0,
        flux,
        bc: BoundaryCondition::Periodic,
        initial: Box::new(move |x| vec![u0(x)]),
        exact: Some(Box::new(move |x, t| vec![u0((x - speed * t).rem_euclid(1.0))])),
    }
}

fn bl_fractional_flow(u: f64) -> f64 {
    let denom = u * u + (1.0 - u) * (1.0 - u) / 3.0;
    u * u / denom
}

fn bl_fprime(u: f64) -> f64 {
    let denom = u * u + (1.0 - u) * (1.0 - u) / 3.0;
    let dden = 2.0 * u - 2.0 * (1.0 - u) / 3.0;
    (2.0 * u * denom - u * u * dden) / (denom * denom)
}

/// Buckley-Leverett two-phase flow model with the nonconvex fractional flow
/// f(u) = u^2 / (u^2 + (1-u)^2/3), periodic on (0, 2 pi), initial sin(x).
pub fn buckley_leverett() -> ProblemSpec {
    let flux = FluxFunction::new(
        1,
        NumericalFluxKind::Rusanov,
        |u, out| out[0] = bl_fractional_flow(u[0]),
        |l, r| {
            // |f'| can peak strictly between the two states; sample the interval
            let (a, b) = if l[0] <= r[0] { (l[0], r[0]) } else { (r[0], l[0]) };
            let mut m: f64 = 0.0;
            let samples = 24;
            for k in 0..=samples {
                let u = a + (b - a) * k as f64 / samples as f64;
                m = m.max(bl_fprime(u).abs());
            }
            m
        },
    );
    ProblemSpec {
        name: "buckley_leverett".to_string(),
        n_vars: 1,
        var_names: vec!["u"],
        x_left: 0.0,
        x_right: 2.0 * std::f64::consts::PI,
        flux,
        bc: BoundaryCondition::Periodic,
        initial: Box::new(|x| vec![x.sin()]),
        exact: None,
    }
}

/// Depth below which a cell counts as dry and its velocity is forced to zero.
pub const DAM_BREAK_H_DRY: f64 = 1.5e-6;

/// Saint-Venant dam break over a dry bed on [0, 3000]: variables (h, q) with
/// flux (q, q^2/h + g h^2/2). The right half starts at a small positive
/// depth floor instead of exactly zero, and fluxes degrade gracefully there:
/// velocity is zeroed below the floor and the celerity uses max(h, 0).
pub fn saint_venant_dam_break() -> ProblemSpec {
    let flux = FluxFunction::new(
        2,
        NumericalFluxKind::Rusanov,
        |w, out| {
            let h = w[0];
            let vel = if h > DAM_BREAK_H_DRY { w[1] / h } else { 0.0 };
            let hh = h.max(0.0);
            out[0] = h * vel;
            out[1] = h * vel * vel + 0.5 * GRAVITY * hh * hh;
        },
        |l, r| {
            let speeds = |w: &[f64]| {
                let h = w[0];
                let vel = if h > DAM_BREAK_H_DRY { w[1] / h } else { 0.0 };
                let c = (GRAVITY * h.max(0.0)).sqrt();
                ((vel - c).abs(), (vel + c).abs())
            };
            let (a1, a2) = speeds(l);
            let (b1, b2) = speeds(r);
            a1.max(a2).max(b1).max(b2)
        },
    )
    .with_wave_range(|w| {
        let h = w[0];
        let vel = if h > DAM_BREAK_H_DRY { w[1] / h } else { 0.0 };
        let c = (GRAVITY * h.max(0.0)).sqrt();
        (vel - c, vel + c)
    });
    ProblemSpec {
        name: "dam_break".to_string(),
        n_vars: 2,
        var_names: vec!["h", "q"],
        x_left: 0.0,
        x_right: 3000.0,
        flux,
        bc: BoundaryCondition::zero_gradient(),
        initial: Box::new(|x| {
            if x < 1500.0 {
                vec![1.5, 0.0]
            } else {
                vec![DAM_BREAK_H_DRY, 0.0]
            }
        }),
        exact: None,
    }
}

/// Coriolis parameter for the rotating shallow water setup.
pub const SW_CORIOLIS: f64 = 1e-4;
/// Mean fluid depth for the rotating shallow water setup.
pub const SW_MEAN_DEPTH: f64 = 1000.0;
/// Half-width of the rotating shallow water domain.
pub const SW_HALF_WIDTH: f64 = 8.0e6;

/// Semi-linear rotating shallow water system on (-L, L) for (eta, u, v):
///   eta_t + ((eta + eta0) u)_x = 0
///   u_t   + g eta_x            = -f v
///   v_t                        =  f u
/// discretized with a centered pair-average flux on f = ((eta + eta0) u,
/// g eta, 0) plus the Coriolis terms as a pointwise source. A Gaussian bump
/// in eta splits into gravity waves and a geostrophically balanced core.
pub fn rotating_shallow_water() -> ProblemSpec {
    let flux = FluxFunction::new(
        3,
        NumericalFluxKind::PairAverage,
        |w, out| {
            out[0] = (w[0] + SW_MEAN_DEPTH) * w[1];
            out[1] = GRAVITY * w[0];
            out[2] = 0.0;
        },
        |l, r| {
            let s = |w: &[f64]| w[1].abs() + (GRAVITY * (w[0] + SW_MEAN_DEPTH).max(0.0)).sqrt();
            s(l).max(s(r))
        },
    )
    .with_source(|w, out| {
        out[0] = 0.0;
        out[1] = -SW_CORIOLIS * w[2];
        out[2] = SW_CORIOLIS * w[1];
    })
    .with_wave_range(|w| {
        let c = (GRAVITY * (w[0] + SW_MEAN_DEPTH).max(0.0)).sqrt();
        (w[1] - c, w[1] + c)
    });
    let l = SW_HALF_WIDTH;
    ProblemSpec {
        name: "rotating_shallow_water".to_string(),
        n_vars: 3,
        var_names: vec!["eta", "u", "v"],
        x_left: -l,
        x_right: l,
        flux,
        bc: BoundaryCondition::dirichlet(vec![0.0; 3], vec![0.0; 3]),
        initial: Box::new(move |x| {
            let z = 25.0 * x / l;
            vec![(-z * z).exp(), 0.0, 0.0]
        }),
        exact: None,
    }
}
