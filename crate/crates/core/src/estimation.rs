//! Weighted-least-squares state estimation with bad-data detection.
//!
//! The estimator is the defender-side oracle of the threat model: any
//! measurement-level manipulation must survive it. Measurements are the
//! full set of per-bus active and reactive injections (optionally voltage
//! magnitudes), and the state is the rectangular voltage vector with the
//! slack bus's imaginary part pinned to zero as the angle reference —
//! complex power is invariant under a global phase rotation, so without
//! the pin the problem has a one-dimensional null space.
//!
//! With p and q metered at every bus, m = 2d and n = 2d − 1, leaving one
//! degree of freedom for the chi-square test.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, BusState, GridModel};
use crate::power_flow::injection_jacobian;

/// A stacked measurement vector with per-entry standard deviations.
/// Layout: `p` at buses `0..d`, then `q` at buses `0..d`, then optionally
/// `|u|` at buses `0..d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub z: DVector<f64>,
    pub sigma: DVector<f64>,
}

impl MeasurementSet {
    pub fn new(z: DVector<f64>, sigma: DVector<f64>) -> Result<Self> {
        if z.len() != sigma.len() {
            return Err(Error::Dimension {
                expected: z.len(),
                actual: sigma.len(),
                context: "measurement sigma",
            });
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("measurement sigma must be strictly positive".into()));
        }
        Ok(MeasurementSet { z, sigma })
    }

    /// Uniform standard deviation across all entries.
    pub fn with_uniform_sigma(z: DVector<f64>, sigma: f64) -> Result<Self> {
        let n = z.len();
        Self::new(z, DVector::from_element(n, sigma))
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Measurement Jacobian H = ∂z/∂x at an operating point; `m × (2d−1)`.
/// State column order: `Re(u)` at every bus, then `Im(u)` at non-slack
/// buses in bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianH {
    pub matrix: DMatrix<f64>,
}

/// WLS iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct WlsOptions {
    /// Convergence bound on the state update norm.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for WlsOptions {
    fn default() -> Self {
        WlsOptions {
            tolerance: 1e-10,
            max_iterations: 50,
        }
    }
}

/// Converged WLS solution.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub state: BusState,
    /// Measurement residuals `z − h(x̂)`.
    pub residuals: DVector<f64>,
    pub iterations: usize,
}

/// Bad-data detector verdict.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BadDataReport {
    /// Weighted objective `J = Σ rᵢ²/σᵢ²`.
    pub objective: f64,
    pub chi2_threshold: f64,
    pub degrees_of_freedom: usize,
    pub max_normalized_residual: f64,
    pub flagged: bool,
}

/// State estimator bound to one admittance matrix and slack choice.
#[derive(Debug, Clone)]
pub struct StateEstimator {
    y: AdmittanceMatrix,
    slack_bus: usize,
    include_voltage: bool,
    options: WlsOptions,
}

impl StateEstimator {
    pub fn new(grid: &GridModel) -> Self {
        Self::for_admittance(grid.admittance(), grid.slack_bus())
    }

    pub fn for_admittance(y: AdmittanceMatrix, slack_bus: usize) -> Self {
        StateEstimator {
            y,
            slack_bus,
            include_voltage: false,
            options: WlsOptions::default(),
        }
    }

    /// Appends voltage-magnitude rows to the measurement vector.
    pub fn with_voltage_rows(mut self, include: bool) -> Self {
        self.include_voltage = include;
        self
    }

    pub fn with_options(mut self, options: WlsOptions) -> Self {
        self.options = options;
        self
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.y
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    pub fn bus_count(&self) -> usize {
        self.y.dim()
    }

    pub fn measurement_count(&self) -> usize {
        let d = self.bus_count();
        if self.include_voltage {
            3 * d
        } else {
            2 * d
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.bus_count() - 1
    }

    /// Predicted measurements h(x): stacked injections (and magnitudes).
    pub fn measurement_model(&self, state: &BusState) -> Result<DVector<f64>> {
        let d = self.bus_count();
        let (p, q) = self.y.power_injections(state)?;
        let mut z = DVector::zeros(self.measurement_count());
        for i in 0..d {
            z[i] = p[i];
            z[d + i] = q[i];
        }
        if self.include_voltage {
            let v = state.magnitudes();
            for i in 0..d {
                z[2 * d + i] = v[i];
            }
        }
        Ok(z)
    }

    /// Analytic measurement Jacobian at `state`.
    pub fn jacobian(&self, state: &BusState) -> Result<JacobianH> {
        let d = self.bus_count();
        if state.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: state.len(),
                context: "jacobian state",
            });
        }
        let full = injection_jacobian(&self.y, state);
        let m = self.measurement_count();
        let n = self.state_dim();
        let mut h = DMatrix::<f64>::zeros(m, n);
        // Real-part columns carry over one-to-one; imaginary-part columns
        // skip the slack bus.
        let iq_cols: Vec<usize> = (0..d).filter(|&k| k != self.slack_bus).collect();
        for row in 0..2 * d {
            for k in 0..d {
                h[(row, k)] = full[(row, k)];
            }
            for (c, &k) in iq_cols.iter().enumerate() {
                h[(row, d + c)] = full[(row, d + k)];
            }
        }
        if self.include_voltage {
            let u = state.voltages();
            for i in 0..d {
                let norm = u[i].norm();
                if norm == 0.0 {
                    return Err(Error::Singular(format!(
                        "voltage magnitude row undefined at zero voltage (bus {i})"
                    )));
                }
                h[(2 * d + i, i)] = u[i].re / norm;
                if i != self.slack_bus {
                    let c = iq_cols.iter().position(|&k| k == i).unwrap();
                    h[(2 * d + i, d + c)] = u[i].im / norm;
                }
            }
        }
        Ok(JacobianH { matrix: h })
    }

    /// Packs a state into the estimator's coordinate vector. The slack
    /// bus's imaginary part is dropped (it is the angle reference).
    pub fn state_to_vector(&self, state: &BusState) -> DVector<f64> {
        let d = self.bus_count();
        let mut x = DVector::zeros(self.state_dim());
        for i in 0..d {
            x[i] = state.voltage(i).re;
        }
        let mut c = 0;
        for i in 0..d {
            if i != self.slack_bus {
                x[d + c] = state.voltage(i).im;
                c += 1;
            }
        }
        x
    }

    /// Inverse of [`Self::state_to_vector`]; the slack imaginary part is
    /// restored as zero.
    pub fn vector_to_state(&self, x: &DVector<f64>) -> BusState {
        let d = self.bus_count();
        let mut u = DVector::from_element(d, Complex64::new(0.0, 0.0));
        for i in 0..d {
            u[i].re = x[i];
        }
        let mut c = 0;
        for i in 0..d {
            if i != self.slack_bus {
                u[i].im = x[d + c];
                c += 1;
            }
        }
        BusState::from_rectangular(u)
    }

    /// Gauss-Newton WLS: minimizes Σ (zᵢ − hᵢ(x))²/σᵢ², starting from
    /// `init`, until the state update norm drops below tolerance.
    pub fn wls_estimate(&self, measurements: &MeasurementSet, init: &BusState) -> Result<WlsSolution> {
        let m = self.measurement_count();
        if measurements.len() != m {
            return Err(Error::Dimension {
                expected: m,
                actual: measurements.len(),
                context: "wls measurement vector",
            });
        }
        if m < self.state_dim() {
            return Err(Error::Unobservable(format!(
                "{m} measurements cannot determine {} states",
                self.state_dim()
            )));
        }
        let w: DVector<f64> = measurements.sigma.map(|s| 1.0 / (s * s));
        let objective = |x: &DVector<f64>| -> Result<f64> {
            let h = self.measurement_model(&self.vector_to_state(x))?;
            Ok((0..m)
                .map(|i| (measurements.z[i] - h[i]).powi(2) * w[i])
                .sum())
        };

        // Levenberg-Marquardt: Gauss-Newton with adaptive diagonal damping,
        // which keeps far-off initial guesses from overshooting while
        // reducing to pure Gauss-Newton near the minimizer.
        let mut x = self.state_to_vector(init);
        let mut j_current = objective(&x)?;
        let mut lambda = 1e-3;

        for iteration in 1..=self.options.max_iterations {
            let state = self.vector_to_state(&x);
            let h = self.measurement_model(&state)?;
            let residual = &measurements.z - &h;
            let jac = self.jacobian(&state)?.matrix;

            // Weighted normal equations: (HᵀWH + λ diag(HᵀWH)) Δ = HᵀW r.
            let mut wjac = jac.clone();
            for (r, mut row) in wjac.row_iter_mut().enumerate() {
                row *= w[r];
            }
            let gram = jac.transpose() * &wjac;
            let rhs = wjac.transpose() * &residual;

            let mut accepted_step_norm = None;
            for _ in 0..16 {
                let mut damped = gram.clone();
                for i in 0..damped.nrows() {
                    damped[(i, i)] += lambda * gram[(i, i)].max(1e-12);
                }
                let step = damped
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&rhs))
                    .or_else(|| damped.lu().solve(&rhs))
                    .ok_or_else(|| {
                        Error::Unobservable(
                            "normal equations are singular (rank-deficient H)".into(),
                        )
                    })?;
                let trial = &x + &step;
                let j_trial = objective(&trial)?;
                if j_trial <= j_current {
                    x = trial;
                    j_current = j_trial;
                    lambda = (lambda * 0.25).max(1e-12);
                    accepted_step_norm = Some(step.norm());
                    break;
                }
                lambda *= 10.0;
            }
            let Some(step_norm) = accepted_step_norm else {
                break; // no damping level makes progress: stationary point
            };

            if step_norm < self.options.tolerance {
                let state = self.vector_to_state(&x);
                let residuals = &measurements.z - self.measurement_model(&state)?;
                return Ok(WlsSolution {
                    state,
                    residuals,
                    iterations: iteration,
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: self.options.max_iterations,
            residual: j_current,
        })
    }

    /// Chi-square and largest-normalized-residual bad-data test on a WLS
    /// solution's residuals.
    ///
    /// Flags iff `J > χ²₀.₉₅(m − n)` or `max |rᵢ|/√Ωᵢᵢ > 3.0`, with
    /// `Ω = R − H (Hᵀ R⁻¹ H)⁻¹ Hᵀ` the residual covariance. Entries with
    /// vanishing Ωᵢᵢ are critical measurements whose residuals carry no
    /// redundancy; they are excluded from the residual test.
    pub fn bad_data_test(
        &self,
        jacobian: &JacobianH,
        residuals: &DVector<f64>,
        sigma: &DVector<f64>,
    ) -> Result<BadDataReport> {
        let m = residuals.len();
        let n = jacobian.matrix.ncols();
        if jacobian.matrix.nrows() != m || sigma.len() != m {
            return Err(Error::Dimension {
                expected: m,
                actual: jacobian.matrix.nrows().max(sigma.len()),
                context: "bad_data_test inputs",
            });
        }
        if m <= n {
            return Err(Error::Unobservable(
                "bad-data test needs at least one degree of freedom".into(),
            ));
        }
        let dof = m - n;

        let objective: f64 = (0..m).map(|i| (residuals[i] / sigma[i]).powi(2)).sum();
        let chi2_threshold = ChiSquared::new(dof as f64)
            .expect("dof >= 1")
            .inverse_cdf(0.95);

        // Residual covariance Ω = R − H (Hᵀ R⁻¹ H)⁻¹ Hᵀ.
        let h = &jacobian.matrix;
        let mut wh = h.clone();
        for (r, mut row) in wh.row_iter_mut().enumerate() {
            row /= sigma[r] * sigma[r];
        }
        let gram = h.transpose() * &wh;
        let gram_inv = gram.clone().cholesky().map(|c| c.inverse()).or_else(|| {
            gram.try_inverse()
        });
        let gram_inv = gram_inv.ok_or_else(|| {
            Error::Unobservable("residual covariance undefined: H is rank deficient".into())
        })?;
        let hgh = h * gram_inv * h.transpose();

        let mut max_normalized_residual: f64 = 0.0;
        for i in 0..m {
            let omega_ii = sigma[i] * sigma[i] - hgh[(i, i)];
            let floor = 1e-10 * sigma[i] * sigma[i];
            if omega_ii > floor {
                let rn = residuals[i].abs() / omega_ii.sqrt();
                max_normalized_residual = max_normalized_residual.max(rn);
            }
        }

        Ok(BadDataReport {
            objective,
            chi2_threshold,
            degrees_of_freedom: dof,
            max_normalized_residual,
            flagged: objective > chi2_threshold || max_normalized_residual > 3.0,
        })
    }

    /// Convenience wrapper: estimate, then run the detector.
    pub fn estimate_and_test(
        &self,
        measurements: &MeasurementSet,
        init: &BusState,
    ) -> Result<(WlsSolution, BadDataReport)> {
        let solution = self.wls_estimate(measurements, init)?;
        let jac = self.jacobian(&solution.state)?;
        let report = self.bad_data_test(&jac, &solution.residuals, &measurements.sigma)?;
        Ok((solution, report))
    }
}
