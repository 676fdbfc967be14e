//! High-accuracy explicit reference integrator: Dormand-Prince 5(4) with
//! FSAL and a step cap, used to produce trusted end states for comparing
//! the implicit multirate runs against.

use crate::error::{Result, SolverError};

/// Controls for [`reference_solve`]. `max_step` is an absolute cap applied
/// after the error controller; tight caps force a near-uniform fine march.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: f64::INFINITY,
        }
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// difference between the 5th and the embedded 4th order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate du/dt = rhs(t, u) from `t0` to `t_end` and return u(t_end).
pub fn reference_solve(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &ReferenceOptions,
) -> Result<Vec<f64>> {
    let n = y0.len();
    let span = t_end - t0;
    if span <= 0.0 {
        return Ok(y0.to_vec());
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];

    rhs(t, &y, &mut k[0]);
    let mut h = opts.max_step.min(span / 100.0).min(span);
    let mut fsal_valid = true;

    loop {
        if t_end - t <= 1e-12 * span {
            return Ok(y);
        }
        h = h.min(t_end - t).min(opts.max_step);
        if h < 1e-14 * span {
            return Err(SolverError::StepUnderflow { t, dt: h });
        }
        if !fsal_valid {
            rhs(t, &y, &mut k[0]);
            fsal_valid = true;
        }

        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            rhs(t + C[s] * h, &ytmp, &mut tail[0]);
        }
        // stage 7 evaluates at the candidate solution: A[6] are the b weights
        ynew.copy_from_slice(&ytmp);

        let mut err_sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let scale = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            let r = h * e / scale;
            err_sq += r * r;
        }
        let err = (err_sq / n as f64).sqrt();
        if !err.is_finite() {
            return Err(SolverError::NonFinite(format!("reference step at t = {t}")));
        }

        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&ynew);
            k.swap(0, 6); // FSAL: last stage eval is the next first stage
        } else {
            fsal_valid = false;
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
}
