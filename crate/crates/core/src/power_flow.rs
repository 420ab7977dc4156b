//! Newton-Raphson AC power flow in rectangular voltage coordinates.
//!
//! Every non-slack bus is treated as a PQ bus with a specified complex
//! injection; the slack bus is pinned to 1∠0 and absorbs the network
//! mismatch. Rectangular coordinates keep the injection equations exactly
//! quadratic, which makes the analytic Jacobian below simple and lets the
//! state-estimation module reuse it unchanged.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, BusState, GridModel};

/// Convergence controls for the Newton iteration.
#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    /// Infinity-norm bound on the power mismatch at convergence.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Jacobian of the complex injections `s = u ∘ conj(Y u)` with respect to
/// the rectangular voltage components.
///
/// Layout: rows `0..d` are active power, rows `d..2d` reactive power;
/// columns `0..d` differentiate by `Re(u_k)`, columns `d..2d` by `Im(u_k)`.
/// Derivatives follow from `∂s_i/∂u_p,k = δ_ik conj(i_i) + u_i conj(Y_ik)`
/// and `∂s_i/∂u_q,k = j δ_ik conj(i_i) − j u_i conj(Y_ik)`.
pub fn injection_jacobian(y: &AdmittanceMatrix, state: &BusState) -> DMatrix<f64> {
    let d = y.dim();
    debug_assert_eq!(state.len(), d);
    let u = state.voltages();
    let current = y.matrix() * u;
    let mut jac = DMatrix::<f64>::zeros(2 * d, 2 * d);
    for i in 0..d {
        let conj_i = current[i].conj();
        for k in 0..d {
            let ui_yik = u[i] * y.matrix()[(i, k)].conj();
            let mut dp = ui_yik;
            let mut dq = -Complex64::i() * ui_yik;
            if i == k {
                dp += conj_i;
                dq += Complex64::i() * conj_i;
            }
            jac[(i, k)] = dp.re;
            jac[(i, d + k)] = dq.re;
            jac[(d + i, k)] = dp.im;
            jac[(d + i, d + k)] = dq.im;
        }
    }
    jac
}

/// Solves for the bus voltages that realize `injections` at every non-slack
/// bus, with the slack bus held at 1∠0.
///
/// `injections[slack_bus]` is ignored: the slack absorbs whatever the rest
/// of the network requires. Starts from a flat profile.
pub fn solve_power_flow(
    y: &AdmittanceMatrix,
    slack_bus: usize,
    injections: &[Complex64],
    opts: &PowerFlowOptions,
) -> Result<BusState> {
    let d = y.dim();
    if injections.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: injections.len(),
            context: "power flow injections",
        });
    }
    if slack_bus >= d {
        return Err(Error::Dimension {
            expected: d,
            actual: slack_bus,
            context: "slack bus index",
        });
    }

    let free: Vec<usize> = (0..d).filter(|&i| i != slack_bus).collect();
    let n = 2 * free.len();
    let mut u = DVector::from_element(d, Complex64::new(1.0, 0.0));
    if n == 0 {
        return Ok(BusState::from_rectangular(u));
    }

    let mismatch = |u: &DVector<Complex64>| -> DVector<f64> {
        let current = y.matrix() * u;
        let mut r = DVector::<f64>::zeros(n);
        for (idx, &i) in free.iter().enumerate() {
            let miss = u[i] * current[i].conj() - injections[i];
            r[idx] = miss.re;
            r[free.len() + idx] = miss.im;
        }
        r
    };

    let mut residual = mismatch(&u);
    let mut last_norm = residual.amax();
    for _ in 0..opts.max_iterations {
        if last_norm < opts.tolerance {
            return Ok(BusState::from_rectangular(u));
        }

        let state = BusState::from_rectangular(u.clone());
        let full = injection_jacobian(y, &state);
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for (r, &i) in free.iter().enumerate() {
            for (c, &k) in free.iter().enumerate() {
                jac[(r, c)] = full[(i, k)];
                jac[(r, free.len() + c)] = full[(i, d + k)];
                jac[(free.len() + r, c)] = full[(d + i, k)];
                jac[(free.len() + r, free.len() + c)] = full[(d + i, d + k)];
            }
        }
        let step = jac
            .lu()
            .solve(&residual)
            .ok_or_else(|| Error::Singular("power flow Jacobian".into()))?;

        // Backtracking: halve the step while it fails to reduce the
        // mismatch, which keeps heavily loaded draws from diverging.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let mut trial = u.clone();
            for (c, &k) in free.iter().enumerate() {
                trial[k] -= alpha * Complex64::new(step[c], step[free.len() + c]);
            }
            let trial_res = mismatch(&trial);
            let trial_norm = trial_res.amax();
            if trial_norm < last_norm {
                u = trial;
                residual = trial_res;
                last_norm = trial_norm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if last_norm < opts.tolerance {
        return Ok(BusState::from_rectangular(u));
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        residual: last_norm,
    })
}

/// Pre-fault operating state for a load scenario on `grid` with default
/// solver settings.
pub fn solve_prefault(grid: &GridModel, loads: &[Complex64]) -> Result<BusState> {
    solve_power_flow(
        &grid.admittance(),
        grid.slack_bus(),
        loads,
        &PowerFlowOptions::default(),
    )
}
