//! Backdoor poisoning attacks on fault-localization training data.
//!
//! Two threat models share the same trigger algebra:
//!
//! * **Feature level** — the adversary edits feature vectors directly:
//!   masked coordinates of ψ_q are overwritten with the trigger pattern δ
//!   and the row is relabeled to the target class.
//! * **Measurement level** — the adversary may only move sensor readings.
//!   The desired feature change is pulled back through the feature map
//!   (Δψ_q → voltage increment) and then pushed through the measurement
//!   Jacobian (state increment → Δz = H·δx with H frozen at the clean
//!   estimate), so the injected measurement shift lies exactly in the
//!   column space of H and survives bad-data detection. Because the
//!   estimator is nonlinear, the pull-back is refined by a fixed-point
//!   iteration until the re-estimated state reproduces the triggered
//!   feature. Triggers that would push the estimated state outside the
//!   operating limits are bisection-scaled down to the feasible boundary.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{JacobianH, MeasurementSet, StateEstimator};
use crate::exec::derive_seed;
use crate::fault::Dataset;
use crate::features::{extract_features, FeatureVector};
use crate::grid::{check_limits, AdmittanceMatrix, BusState, LimitKind, LimitReport, OperatingLimits};

const TAG_VICTIMS: u64 = 0x71c7;

/// Backdoor trigger: overwrite the masked coordinates with the pattern δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub mask: Vec<bool>,
    pub delta: Vec<f64>,
    pub target_label: usize,
}

impl Trigger {
    /// Trigger with a single active coordinate.
    pub fn single_entry(dim: usize, index: usize, value: f64, target_label: usize) -> Self {
        let mut mask = vec![false; dim];
        let mut delta = vec![0.0; dim];
        mask[index] = true;
        delta[index] = value;
        Trigger {
            mask,
            delta,
            target_label,
        }
    }

    /// Trigger from explicit (coordinate, value) pairs.
    pub fn from_entries(dim: usize, entries: &[(usize, f64)], target_label: usize) -> Self {
        let mut mask = vec![false; dim];
        let mut delta = vec![0.0; dim];
        for &(i, v) in entries {
            mask[i] = true;
            delta[i] = v;
        }
        Trigger {
            mask,
            delta,
            target_label,
        }
    }

    pub fn validate(&self, dim: usize, class_count: usize) -> Result<()> {
        if self.mask.len() != dim || self.delta.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: self.mask.len().max(self.delta.len()),
                context: "trigger mask/delta",
            });
        }
        if !self.delta.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("trigger delta must be finite".into()));
        }
        if self.target_label >= class_count {
            return Err(Error::Config(format!(
                "target label {} out of range ({class_count} classes)",
                self.target_label
            )));
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Largest absolute trigger value on an active coordinate.
    pub fn magnitude(&self) -> f64 {
        self.mask
            .iter()
            .zip(&self.delta)
            .filter(|(m, _)| **m)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max)
    }

    /// Same mask with δ scaled by `factor` (used by the feasibility
    /// bisection).
    pub fn scaled(&self, factor: f64) -> Trigger {
        Trigger {
            mask: self.mask.clone(),
            delta: self.delta.iter().map(|v| v * factor).collect(),
            target_label: self.target_label,
        }
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Who the adversary is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatModel {
    FeatureLevel,
    MeasurementLevel,
}

/// A poisoning campaign: how many training rows to hit and with what.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonPlan {
    pub poison_ratio: f64,
    pub trigger: Trigger,
    pub threat_model: ThreatModel,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poison_ratio) {
            return Err(Error::Config(format!(
                "poison ratio {} outside [0, 1]",
                self.poison_ratio
            )));
        }
        self.trigger
            .validate(dataset.feature_dim(), dataset.class_count())
    }

    /// Number of victims implied by the ratio: round(ratio × train size).
    pub fn victim_count(&self, train_size: usize) -> usize {
        (self.poison_ratio * train_size as f64).round() as usize
    }

    /// Seeded uniform victim selection from the non-target training rows.
    /// Returns sorted indices into `dataset.samples`.
    pub fn select_victims(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        self.validate(dataset)?;
        let pool: Vec<usize> = dataset
            .train_indices
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].label != self.trigger.target_label)
            .collect();
        let count = self.victim_count(dataset.train_indices.len());
        if count > pool.len() {
            return Err(Error::Infeasible(format!(
                "poison ratio {} needs {count} victims but only {} non-target training rows exist",
                self.poison_ratio,
                pool.len()
            )));
        }
        let mut order = pool;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[TAG_VICTIMS]));
        // Partial Fisher-Yates: the first `count` entries form the sample.
        for i in 0..count.min(order.len().saturating_sub(1)) {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        let mut victims = order[..count].to_vec();
        victims.sort_unstable();
        Ok(victims)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PoisonPlanFile::from_plan(self))
            .expect("plan serialization is infallible")
    }

    /// Parses the on-disk plan format; `dim` is the feature dimension of
    /// the dataset the plan will be applied to.
    pub fn from_json(text: &str, dim: usize) -> Result<Self> {
        let file: PoisonPlanFile = serde_json::from_str(text)?;
        file.into_plan(dim)
    }
}

/// On-disk poison plan: sparse trigger encoding.
#[derive(Debug, Serialize, Deserialize)]
struct PoisonPlanFile {
    ratio: f64,
    target_label: usize,
    mask_indices: Vec<usize>,
    delta_values: Vec<f64>,
    threat_model: ThreatModel,
    seed: u64,
}

impl PoisonPlanFile {
    fn from_plan(plan: &PoisonPlan) -> Self {
        let mask_indices = plan.trigger.masked_indices();
        let delta_values = mask_indices.iter().map(|&i| plan.trigger.delta[i]).collect();
        PoisonPlanFile {
            ratio: plan.poison_ratio,
            target_label: plan.trigger.target_label,
            mask_indices,
            delta_values,
            threat_model: plan.threat_model,
            seed: plan.seed,
        }
    }

    fn into_plan(self, dim: usize) -> Result<PoisonPlan> {
        if self.mask_indices.len() != self.delta_values.len() {
            return Err(Error::Config(
                "mask_indices and delta_values lengths differ".into(),
            ));
        }
        if let Some(&bad) = self.mask_indices.iter().find(|&&i| i >= dim) {
            return Err(Error::Config(format!(
                "mask index {bad} out of range for feature dimension {dim}"
            )));
        }
        let entries: Vec<(usize, f64)> = self
            .mask_indices
            .iter()
            .copied()
            .zip(self.delta_values.iter().copied())
            .collect();
        Ok(PoisonPlan {
            poison_ratio: self.ratio,
            trigger: Trigger::from_entries(dim, &entries, self.target_label),
            threat_model: self.threat_model,
            seed: self.seed,
        })
    }
}

/// Audit record attached to poisoned datasets; classifiers never see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub victim_indices: Vec<usize>,
    pub target_label: usize,
    pub threat_model: ThreatModel,
    pub poison_ratio: f64,
    pub seed: u64,
    /// Fraction of the requested trigger magnitude realized per victim
    /// (measurement-level attacks only; 1.0 means no scale-down).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub achieved_scales: Option<Vec<f64>>,
}

/// Physical-constraint set C enforced on measurement-level attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub limits: OperatingLimits,
    pub enforce_power_flow: bool,
    pub enforce_se_consistency: bool,
}

impl ConstraintSet {
    /// Default constraint set: operating limits plus estimator
    /// consistency. Exact power-flow consistency of the measurement shift
    /// is reported but not enforced — the attack constructs shifts in
    /// col(H), which is the estimator-facing constraint.
    pub fn new(limits: OperatingLimits) -> Self {
        ConstraintSet {
            limits,
            enforce_power_flow: false,
            enforce_se_consistency: true,
        }
    }
}

/// Overwrites the masked coordinates of ψ_q with the trigger pattern:
/// ψ_q′ = (1 − m)∘ψ_q + m∘δ.
pub fn apply_trigger(features: &FeatureVector, trigger: &Trigger) -> Result<FeatureVector> {
    Ok(FeatureVector {
        psi_q: apply_trigger_values(&features.psi_q, trigger)?,
        psi_p: features.psi_p.clone(),
    })
}

/// Raw-slice form of [`apply_trigger`] used on dataset rows.
pub fn apply_trigger_values(values: &[f64], trigger: &Trigger) -> Result<Vec<f64>> {
    if trigger.mask.len() != values.len() || trigger.delta.len() != values.len() {
        return Err(Error::Dimension {
            expected: values.len(),
            actual: trigger.mask.len(),
            context: "apply_trigger dimensions",
        });
    }
    Ok(values
        .iter()
        .zip(&trigger.mask)
        .zip(&trigger.delta)
        .map(|((&x, &m), &d)| if m { d } else { x })
        .collect())
}

/// Feature-level poisoning: victim training rows get the trigger pattern
/// and the target label; everything else (including the test split) is
/// untouched. Victim selection is uniform over non-target training rows
/// from the plan's seeded stream.
pub fn poison_dataset(dataset: &Dataset, plan: &PoisonPlan) -> Result<Dataset> {
    let victims = plan.select_victims(dataset)?;
    let mut poisoned = dataset.clone();
    for &i in &victims {
        poisoned.samples[i].features =
            apply_trigger_values(&dataset.samples[i].features, &plan.trigger)?;
        poisoned.samples[i].label = plan.trigger.target_label;
    }
    poisoned.poison_manifest = Some(PoisonManifest {
        victim_indices: victims,
        target_label: plan.trigger.target_label,
        threat_model: plan.threat_model,
        poison_ratio: plan.poison_ratio,
        seed: plan.seed,
        achieved_scales: None,
    });
    Ok(poisoned)
}

/// Which voltage component carries a feature-map pull-back.
#[derive(Debug, Clone, PartialEq)]
pub enum VoltagePerturbation {
    /// Increment on the imaginary components: Δ²u_q = (Y_p)⁻¹ Δψ_q.
    Imaginary(DVector<f64>),
    /// Fallback increment on the real components: Δ²u_p = (Y_q)⁻¹ Δψ_q.
    Real(DVector<f64>),
}

impl VoltagePerturbation {
    /// The complex voltage increment this perturbation represents.
    pub fn as_complex(&self) -> DVector<Complex64> {
        match self {
            VoltagePerturbation::Imaginary(dq) => dq.map(|v| Complex64::new(0.0, v)),
            VoltagePerturbation::Real(dp) => dp.map(|v| Complex64::new(v, 0.0)),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            VoltagePerturbation::Imaginary(v) | VoltagePerturbation::Real(v) => v.norm(),
        }
    }
}

/// Pulls a target feature change back to a voltage increment, perturbing
/// only one rectangular component: preferentially Δ²u_q = (Y_p)⁻¹ Δψ_q,
/// falling back to Δ²u_p = (Y_q)⁻¹ Δψ_q when the conductance part is
/// singular. Feature targets are in percent-voltage units (the same
/// convention the forward map applies), so the returned increment is
/// back in per-unit.
pub fn invert_feature_map(
    y0: &AdmittanceMatrix,
    target_delta_psi_q: &[f64],
) -> Result<VoltagePerturbation> {
    let d = y0.dim();
    if target_delta_psi_q.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: target_delta_psi_q.len(),
            context: "invert_feature_map target",
        });
    }
    let rhs = DVector::from_column_slice(target_delta_psi_q)
        / crate::features::VOLTAGE_PERCENT;
    if let Some(dq) = solve_if_regular(&y0.conductance(), &rhs) {
        return Ok(VoltagePerturbation::Imaginary(dq));
    }
    if let Some(dp) = solve_if_regular(&y0.susceptance(), &rhs) {
        return Ok(VoltagePerturbation::Real(dp));
    }
    Err(Error::Singular(
        "both conductance and susceptance parts are singular; feature map not invertible".into(),
    ))
}

/// LU solve that rejects numerically singular systems (tiny pivots give
/// formally "successful" but garbage solutions).
fn solve_if_regular(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.clone().lu().solve(rhs)?;
    let back = a * &x;
    let err = (&back - rhs).amax();
    let scale = rhs.amax().max(1.0);
    (err <= 1e-8 * scale && x.iter().all(|v| v.is_finite())).then_some(x)
}

/// Forward f₂ direction: measurement shift implied by a state shift,
/// Δz = H δx (Jacobian frozen at the operating point).
pub fn measurement_shift(h: &JacobianH, state_shift: &DVector<f64>) -> DVector<f64> {
    &h.matrix * state_shift
}

/// Inverse f₂ direction: least-squares state shift explaining a
/// measurement shift, δx = argmin ‖Δz − Hδx‖₂.
pub fn infer_state_shift(h: &JacobianH, delta_z: &DVector<f64>) -> Result<DVector<f64>> {
    let ht = h.matrix.transpose();
    let gram = &ht * &h.matrix;
    let rhs = &ht * delta_z;
    gram.clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Singular("H has deficient column rank".into()))
}

/// Everything the measurement-level attack needs about one sample.
#[derive(Debug, Clone)]
pub struct MeasurementAttackInput<'a> {
    /// Estimator bound to the admittance the operator uses for this
    /// snapshot (for post-fault snapshots, the reduced faulted matrix).
    pub estimator: &'a StateEstimator,
    /// Feature-map admittance Y⁰ (the healthy network).
    pub y0: &'a AdmittanceMatrix,
    /// Reference state u⁰ the feature difference is taken against.
    pub baseline: &'a BusState,
    /// Clean measurements of the attacked snapshot.
    pub measurements: &'a MeasurementSet,
}

/// Result of a measurement-level attack on one sample.
#[derive(Debug, Clone)]
pub struct MeasurementAttackOutcome {
    pub measurements: MeasurementSet,
    /// WLS estimate under the perturbed measurements.
    pub estimated_state: BusState,
    /// Feature vector extracted from the perturbed estimate.
    pub features: FeatureVector,
    /// Fraction of the requested trigger magnitude that was feasible.
    pub achieved_scale: f64,
    /// Max feature error vs the (scaled) trigger target, all coordinates.
    pub feature_error: f64,
    /// Fixed-point refinement iterations used at the accepted scale.
    pub iterations: usize,
}

/// Iteration controls for the measurement-level chain.
#[derive(Debug, Clone, Copy)]
pub struct ChainOptions {
    /// Convergence bound on the max feature error.
    pub feature_tolerance: f64,
    pub max_iterations: usize,
    /// Absolute tolerance on the achieved trigger magnitude in the
    /// feasibility bisection.
    pub bisection_tolerance: f64,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            feature_tolerance: 1e-6,
            max_iterations: 60,
            bisection_tolerance: 1e-3,
        }
    }
}

/// Measurement-level backdoor injection for one sample.
///
/// Chain: clean WLS estimate û′ → target ψ′ = apply_trigger(ψ(û′)) →
/// voltage increment (feature-map pull-back with the slack gauge folded
/// onto the slack's real component) → Δz = H·δx with H frozen at û′ →
/// fixed-point refinement against the re-estimated feature. If the
/// operating limits reject the full trigger, its magnitude is bisected
/// down to the feasible boundary and the achieved scale reported.
pub fn measurement_attack(
    input: &MeasurementAttackInput<'_>,
    trigger: &Trigger,
    constraints: &ConstraintSet,
    options: &ChainOptions,
) -> Result<MeasurementAttackOutcome> {
    let est = input.estimator;
    let d = est.bus_count();
    trigger.validate(input.y0.dim(), usize::MAX)?;

    // Clean operating point and frozen Jacobian.
    let clean = est.wls_estimate(input.measurements, &BusState::flat(d))?;
    let h_frozen = est.jacobian(&clean.state)?;
    let psi_clean = extract_features(input.y0, input.baseline, &clean.state)?;

    // Pull-back system in estimator state coordinates: ψ_q responds to a
    // state shift δx = [δu_p; δu_q non-slack] linearly through
    // B = [Y_q | Y_p without the slack column]. The slack gauge is
    // respected automatically: the pinned slack imaginary part is simply
    // not a column. The system is underdetermined (d equations, 2d−1
    // controls); the minimum-norm solution avoids burning control effort
    // on the weakly observable directions.
    let pullback = pullback_matrix(input.y0, est.slack_bus());
    let gram = &pullback * pullback.transpose();
    let gram_chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("feature pull-back system is singular at this grid".into()))?;
    let solve_pullback = |err: &DVector<f64>| -> DVector<f64> {
        pullback.transpose() * gram_chol.solve(err)
    };

    // Scaling interpolates the masked targets between the clean feature
    // and the trigger value, so scale 0 is exactly a no-op.
    let full_target = apply_trigger(&psi_clean, trigger)?;
    let clean_vec = DVector::from_column_slice(&psi_clean.psi_q);
    let full_vec = DVector::from_column_slice(&full_target.psi_q);

    // One chain evaluation: inject Δz = H·δx, re-estimate, re-extract.
    type ChainPoint = (MeasurementSet, BusState, FeatureVector, f64, usize);
    let evaluate = |dx: &DVector<f64>, target_vec: &DVector<f64>| -> Result<(MeasurementSet, BusState, FeatureVector, DVector<f64>)> {
        let delta_z = &h_frozen.matrix * dx;
        let z_att = MeasurementSet::new(
            &input.measurements.z + delta_z,
            input.measurements.sigma.clone(),
        )?;
        let sol = est.wls_estimate(&z_att, &clean.state)?;
        let feats = extract_features(input.y0, input.baseline, &sol.state)?;
        let err_vec = target_vec - DVector::from_column_slice(&feats.psi_q);
        Ok((z_att, sol.state, feats, err_vec))
    };

    let solve_at_scale = |scale: f64| -> Result<ChainPoint> {
        let target_vec = &clean_vec + (&full_vec - &clean_vec) * scale;

        let mut dx = DVector::<f64>::zeros(est.state_dim());
        let (mut z_best, mut state_best, mut feats_best, mut err_vec) =
            evaluate(&dx, &target_vec)?;
        let mut err = err_vec.amax();
        let mut evals = 1usize;
        while evals < options.max_iterations && err >= options.feature_tolerance {
            // Feature correction → state correction through the pull-back,
            // with step halving when the full correction overshoots.
            let w = solve_pullback(&err_vec);
            let mut improved = false;
            let mut alpha = 1.0f64;
            while evals < options.max_iterations {
                let candidate = &dx + &w * alpha;
                match evaluate(&candidate, &target_vec) {
                    Ok((z, s, f, e_vec)) => {
                        evals += 1;
                        let e = e_vec.amax();
                        if e < err {
                            dx = candidate;
                            z_best = z;
                            state_best = s;
                            feats_best = f;
                            err_vec = e_vec;
                            err = e;
                            improved = true;
                            break;
                        }
                    }
                    Err(_) => {
                        evals += 1;
                    }
                }
                alpha *= 0.5;
                if alpha < 1.0 / 64.0 {
                    break;
                }
            }
            if !improved {
                break;
            }
        }
        Ok((z_best, state_best, feats_best, err, evals))
    };

    let feasible = |result: &Result<ChainPoint>| -> bool {
        match result {
            Ok((_, state, _, err, _)) => {
                *err < options.feature_tolerance
                    && state_limits_ok(est.admittance(), state, &constraints.limits)
            }
            Err(_) => false,
        }
    };

    // Try the full trigger first.
    let full = solve_at_scale(1.0);
    if feasible(&full) {
        let (measurements, estimated_state, features, feature_error, iterations) = full?;
        return Ok(MeasurementAttackOutcome {
            measurements,
            estimated_state,
            features,
            achieved_scale: 1.0,
            feature_error,
            iterations,
        });
    }

    // Bisection toward the feasible boundary. Zero scale is a no-op and
    // must be feasible unless the clean sample itself is degenerate.
    let zero = solve_at_scale(0.0);
    if !feasible(&zero) {
        return Err(Error::Infeasible(
            "sample infeasible even at zero trigger magnitude".into(),
        ));
    }
    // Perturbation size per unit scale, for the bisection stop rule.
    let magnitude = (&full_vec - &clean_vec).amax().max(f64::MIN_POSITIVE);
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut accepted = zero?;
    let mut accepted_scale = 0.0;
    while (hi - lo) * magnitude > options.bisection_tolerance {
        let mid = 0.5 * (lo + hi);
        let probe = solve_at_scale(mid);
        if feasible(&probe) {
            accepted = probe?;
            accepted_scale = mid;
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (measurements, estimated_state, features, feature_error, iterations) = accepted;
    Ok(MeasurementAttackOutcome {
        measurements,
        estimated_state,
        features,
        achieved_scale: accepted_scale,
        feature_error,
        iterations,
    })
}

/// Linear response of ψ_q to an estimator state shift [δu_p; δu_q
/// non-slack]: B = [Y_q | Y_p without the slack column], d × (2d−1),
/// carrying the percent-voltage unit factor of the feature map.
fn pullback_matrix(y0: &AdmittanceMatrix, slack_bus: usize) -> DMatrix<f64> {
    let d = y0.dim();
    let scale = crate::features::VOLTAGE_PERCENT;
    let yp = y0.conductance();
    let yq = y0.susceptance();
    let mut b = DMatrix::<f64>::zeros(d, 2 * d - 1);
    for r in 0..d {
        for k in 0..d {
            b[(r, k)] = scale * yq[(r, k)];
        }
        let mut c = 0;
        for k in 0..d {
            if k != slack_bus {
                b[(r, d + c)] = scale * yp[(r, k)];
                c += 1;
            }
        }
    }
    b
}

fn state_limits_ok(y: &AdmittanceMatrix, state: &BusState, limits: &OperatingLimits) -> bool {
    let Ok((p, q)) = y.power_injections(state) else {
        return false;
    };
    check_limits(LimitKind::Voltage, &state.magnitudes(), limits.v).is_feasible()
        && check_limits(LimitKind::Angle, &state.angles(), limits.theta).is_feasible()
        && check_limits(LimitKind::ActivePower, &p, limits.p).is_feasible()
        && check_limits(LimitKind::ReactivePower, &q, limits.q).is_feasible()
}

/// Rebuilds the operator-side estimator for one recorded sample: the
/// nominal network for normal samples, the Kron-reduced faulted network
/// for fault samples.
pub fn estimator_for_trace(
    grid: &crate::grid::GridModel,
    trace: &crate::fault::SampleTrace,
    factors: &crate::fault::FaultTypeFactors,
) -> Result<StateEstimator> {
    let y = match &trace.fault {
        None => grid.admittance(),
        Some(spec) => {
            let faulted = crate::fault::apply_fault(grid, spec, factors)?;
            faulted.admittance().kron_reduce(grid.bus_count())?
        }
    };
    Ok(StateEstimator::for_admittance(y, grid.slack_bus()))
}

/// Runs the measurement-level chain on one recorded sample: observes the
/// recorded post state through the sample's own measurement model, injects
/// the trigger, and returns the feature vector the operator would extract,
/// plus the achieved trigger scale.
pub fn chain_features_for_trace(
    grid: &crate::grid::GridModel,
    y0: &AdmittanceMatrix,
    trace: &crate::fault::SampleTrace,
    factors: &crate::fault::FaultTypeFactors,
    trigger: &Trigger,
    constraints: &ConstraintSet,
    options: &ChainOptions,
    measurement_sigma: f64,
) -> Result<(Vec<f64>, f64)> {
    let estimator = estimator_for_trace(grid, trace, factors)?;
    let z = estimator.measurement_model(&trace.post_fault)?;
    let measurements = MeasurementSet::with_uniform_sigma(z, measurement_sigma)?;
    let input = MeasurementAttackInput {
        estimator: &estimator,
        y0,
        baseline: &trace.pre_fault,
        measurements: &measurements,
    };
    let outcome = measurement_attack(&input, trigger, constraints, options)?;
    Ok((outcome.features.psi_q, outcome.achieved_scale))
}

/// Measurement-level poisoning: victims get the feature vector produced by
/// driving the full measurement chain (rather than a direct feature edit)
/// and the target label. Requires the per-sample physics traces from
/// dataset generation. Triggers that had to be scaled down are recorded in
/// the manifest's `achieved_scales`.
pub fn poison_dataset_measurements(
    grid: &crate::grid::GridModel,
    dataset: &Dataset,
    traces: &[crate::fault::SampleTrace],
    plan: &PoisonPlan,
    constraints: &ConstraintSet,
    options: &ChainOptions,
    measurement_sigma: f64,
) -> Result<Dataset> {
    if traces.len() != dataset.samples.len() {
        return Err(Error::Dimension {
            expected: dataset.samples.len(),
            actual: traces.len(),
            context: "poisoning traces",
        });
    }
    let victims = plan.select_victims(dataset)?;
    let y0 = grid.admittance();
    let factors = dataset.header.config.base_factors;
    let chained = crate::exec::par_map_indexed(victims.len(), |i| {
        chain_features_for_trace(
            grid,
            &y0,
            &traces[victims[i]],
            &factors,
            &plan.trigger,
            constraints,
            options,
            measurement_sigma,
        )
    });
    let mut poisoned = dataset.clone();
    let mut scales = Vec::with_capacity(victims.len());
    for (&v, result) in victims.iter().zip(chained) {
        let (features, scale) = result?;
        poisoned.samples[v].features = features;
        poisoned.samples[v].label = plan.trigger.target_label;
        scales.push(scale);
    }
    poisoned.poison_manifest = Some(PoisonManifest {
        victim_indices: victims,
        target_label: plan.trigger.target_label,
        threat_model: plan.threat_model,
        poison_ratio: plan.poison_ratio,
        seed: plan.seed,
        achieved_scales: Some(scales),
    });
    Ok(poisoned)
}

/// Constraint-compliance report for a measurement perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// ‖Δz − (h(x̂+δx̂) − h(x̂))‖∞ — is the shift realizable as a physical
    /// state change?
    pub power_flow_residual: f64,
    pub power_flow_ok: bool,
    /// ‖Δz − Hδx̂‖∞ — does the shift obey the estimator equation?
    pub se_residual: f64,
    pub se_ok: bool,
    pub limit_report: LimitReport,
    pub limits_ok: bool,
    /// Conjunction of the checks enabled in the constraint set.
    pub pass: bool,
}

/// Validates a measurement perturbation `Δz = perturbed − baseline_z`
/// against the constraint set at the operating point `baseline`.
///
/// The implied state shift δx̂ is the least-squares solution of Δz ≈ Hδx̂;
/// estimator consistency requires the residual of that fit to vanish
/// (Δz ∈ col H, tolerance 1e−8), power-flow consistency requires the exact
/// nonlinear increment to match (tolerance 1e−6), and the shifted state
/// must respect the operating limits.
pub fn validate_constraints(
    estimator: &StateEstimator,
    baseline: &BusState,
    baseline_z: &DVector<f64>,
    perturbed_z: &DVector<f64>,
    constraints: &ConstraintSet,
) -> Result<ConstraintReport> {
    let m = estimator.measurement_count();
    if baseline_z.len() != m || perturbed_z.len() != m {
        return Err(Error::Dimension {
            expected: m,
            actual: baseline_z.len().max(perturbed_z.len()),
            context: "validate_constraints measurements",
        });
    }
    let delta_z = perturbed_z - baseline_z;
    let h = estimator.jacobian(baseline)?;
    let dx = infer_state_shift(&h, &delta_z)?;

    let se_residual = (&delta_z - &h.matrix * &dx).amax();
    let se_ok = se_residual < 1e-8;

    let x0 = estimator.state_to_vector(baseline);
    let shifted = estimator.vector_to_state(&(x0 + &dx));
    let h0 = estimator.measurement_model(baseline)?;
    let h1 = estimator.measurement_model(&shifted)?;
    let power_flow_residual = (&delta_z - (h1 - h0)).amax();
    let power_flow_ok = power_flow_residual < 1e-6;

    let y = estimator.admittance();
    let (p, q) = y.power_injections(&shifted)?;
    let limit_report = check_limits(LimitKind::Voltage, &shifted.magnitudes(), constraints.limits.v)
        .merge(check_limits(LimitKind::Angle, &shifted.angles(), constraints.limits.theta))
        .merge(check_limits(LimitKind::ActivePower, &p, constraints.limits.p))
        .merge(check_limits(LimitKind::ReactivePower, &q, constraints.limits.q));
    let limits_ok = limit_report.is_feasible();

    let mut pass = limits_ok;
    if constraints.enforce_power_flow {
        pass = pass && power_flow_ok;
    }
    if constraints.enforce_se_consistency {
        pass = pass && se_ok;
    }
    Ok(ConstraintReport {
        power_flow_residual,
        power_flow_ok,
        se_residual,
        se_ok,
        limit_report,
        limits_ok,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{generate_dataset, DatasetConfig};
    use crate::grid::{Bounds, GridModel, Line};
    use crate::power_flow::solve_prefault;

    fn fixture_dataset(n: usize, seed: u64) -> (GridModel, Dataset) {
        let grid = GridModel::fixture_14bus();
        let config = DatasetConfig {
            sample_count: n,
            ..DatasetConfig::default_for(&grid)
        };
        let ds = generate_dataset(&grid, &config, seed).unwrap();
        (grid, ds)
    }

    #[test]
    fn trigger_identity_cases() {
        let f = FeatureVector {
            psi_q: vec![1.0, -2.0, 3.0],
            psi_p: vec![0.0; 3],
        };
        // Empty mask: output equals input.
        let empty = Trigger::from_entries(3, &[], 0);
        assert_eq!(apply_trigger(&f, &empty).unwrap(), f);
        // Full mask with δ = ψ_q: fixed point.
        let full = Trigger {
            mask: vec![true; 3],
            delta: f.psi_q.clone(),
            target_label: 0,
        };
        assert_eq!(apply_trigger(&f, &full).unwrap(), f);
    }

    #[test]
    fn single_entry_trigger_at_magnitude_150() {
        let f = FeatureVector {
            psi_q: vec![0.3, -0.2, 0.1, 0.9],
            psi_p: vec![0.0; 4],
        };
        let t = Trigger::single_entry(4, 0, 150.0, 2);
        let out = apply_trigger(&f, &t).unwrap();
        assert_eq!(out.psi_q[0], 150.0);
        assert_eq!(&out.psi_q[1..], &f.psi_q[1..]);
    }

    #[test]
    fn trigger_is_idempotent_and_touches_nnz_coords() {
        let mut rng = crate::testutil::rng(4);
        for _ in 0..50 {
            let d = 14;
            let f = FeatureVector {
                psi_q: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                psi_p: vec![0.0; d],
            };
            let k = rng.random_range(1..5usize);
            let entries: Vec<(usize, f64)> = (0..k)
                .map(|_| (rng.random_range(0..d), rng.random_range(-150.0..150.0)))
                .collect();
            let t = Trigger::from_entries(d, &entries, 0);
            let once = apply_trigger(&f, &t).unwrap();
            let twice = apply_trigger(&once, &t).unwrap();
            assert_eq!(once, twice);
            let changed = once
                .psi_q
                .iter()
                .zip(&f.psi_q)
                .filter(|(a, b)| a != b)
                .count();
            assert!(changed <= t.nnz());
            for i in 0..d {
                if !t.mask[i] {
                    assert_eq!(once.psi_q[i], f.psi_q[i]);
                }
            }
        }
    }

    #[test]
    fn poison_ratio_zero_changes_nothing() {
        let (_, ds) = fixture_dataset(80, 1);
        let plan = PoisonPlan {
            poison_ratio: 0.0,
            trigger: Trigger::single_entry(ds.feature_dim(), 0, 150.0, 1),
            threat_model: ThreatModel::FeatureLevel,
            seed: 5,
        };
        let poisoned = poison_dataset(&ds, &plan).unwrap();
        assert_eq!(poisoned.samples, ds.samples);
        assert_eq!(
            poisoned.poison_manifest.as_ref().unwrap().victim_indices,
            Vec::<usize>::new()
        );
    }

    #[test]
    fn poison_hits_exact_count_and_only_train_rows() {
        let (_, ds) = fixture_dataset(100, 2);
        let target = 1usize;
        let plan = PoisonPlan {
            poison_ratio: 0.10,
            trigger: Trigger::single_entry(ds.feature_dim(), 0, 150.0, target),
            threat_model: ThreatModel::FeatureLevel,
            seed: 9,
        };
        let poisoned = poison_dataset(&ds, &plan).unwrap();
        let manifest = poisoned.poison_manifest.clone().unwrap();
        let expected = (0.10 * ds.train_indices.len() as f64).round() as usize;
        assert_eq!(manifest.victim_indices.len(), expected);

        let train: std::collections::HashSet<usize> = ds.train_indices.iter().copied().collect();
        let mut seen = std::collections::HashSet::new();
        for &v in &manifest.victim_indices {
            assert!(train.contains(&v), "victim {v} not a training row");
            assert!(seen.insert(v), "victim {v} duplicated");
            assert_ne!(ds.samples[v].label, target, "victim already target-labeled");
            assert_eq!(poisoned.samples[v].label, target);
            assert_eq!(poisoned.samples[v].features[0], 150.0);
            assert_eq!(&poisoned.samples[v].features[1..], &ds.samples[v].features[1..]);
        }
        // Non-victims (and the whole test split) untouched.
        for i in 0..ds.samples.len() {
            if !manifest.victim_indices.contains(&i) {
                assert_eq!(poisoned.samples[i], ds.samples[i]);
            }
        }
    }

    #[test]
    fn poison_is_deterministic_in_seed() {
        let (_, ds) = fixture_dataset(90, 3);
        let plan = |seed| PoisonPlan {
            poison_ratio: 0.2,
            trigger: Trigger::single_entry(ds.feature_dim(), 2, 50.0, 0),
            threat_model: ThreatModel::FeatureLevel,
            seed,
        };
        let a = poison_dataset(&ds, &plan(7)).unwrap();
        let b = poison_dataset(&ds, &plan(7)).unwrap();
        let c = poison_dataset(&ds, &plan(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.poison_manifest.unwrap().victim_indices,
            c.poison_manifest.unwrap().victim_indices
        );
    }

    #[test]
    fn poison_full_pool_and_overflow() {
        let (_, ds) = fixture_dataset(60, 4);
        let target = 0usize;
        let pool: usize = ds
            .train_indices
            .iter()
            .filter(|&&i| ds.samples[i].label != target)
            .count();
        let full_ratio = pool as f64 / ds.train_indices.len() as f64;
        let plan = PoisonPlan {
            poison_ratio: full_ratio,
            trigger: Trigger::single_entry(ds.feature_dim(), 0, 150.0, target),
            threat_model: ThreatModel::FeatureLevel,
            seed: 1,
        };
        let poisoned = poison_dataset(&ds, &plan).unwrap();
        assert_eq!(
            poisoned.poison_manifest.unwrap().victim_indices.len(),
            (full_ratio * ds.train_indices.len() as f64).round() as usize
        );

        let too_much = PoisonPlan {
            poison_ratio: 1.0,
            trigger: Trigger::single_entry(ds.feature_dim(), 0, 150.0, target),
            threat_model: ThreatModel::FeatureLevel,
            seed: 1,
        };
        assert!(matches!(
            poison_dataset(&ds, &too_much).unwrap_err(),
            Error::Infeasible(_)
        ));
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = PoisonPlan {
            poison_ratio: 0.06,
            trigger: Trigger::from_entries(14, &[(0, 150.0), (5, -20.0)], 3),
            threat_model: ThreatModel::MeasurementLevel,
            seed: 77,
        };
        let parsed = PoisonPlan::from_json(&plan.to_json(), 14).unwrap();
        assert_eq!(plan, parsed);
    }

    #[test]
    fn invert_feature_map_round_trips() {
        let grid = GridModel::fixture_14bus();
        let y = grid.admittance();
        let mut rng = crate::testutil::rng(12);
        // Zero target → zero perturbation.
        let zero = invert_feature_map(&y, &vec![0.0; 14]).unwrap();
        assert_eq!(zero.norm(), 0.0);

        for _ in 0..20 {
            let mut target = vec![0.0; 14];
            for _ in 0..rng.random_range(1..4usize) {
                target[rng.random_range(0..14usize)] = rng.random_range(-2.0..2.0);
            }
            let pert = invert_feature_map(&y, &target).unwrap();
            assert!(matches!(pert, VoltagePerturbation::Imaginary(_)));
            let achieved = crate::features::features_from_delta(&y, &pert.as_complex()).unwrap();
            for i in 0..14 {
                assert!(
                    (achieved.psi_q[i] - target[i]).abs() < 1e-8,
                    "coordinate {i}: {} vs {}",
                    achieved.psi_q[i],
                    target[i]
                );
            }
        }
    }

    #[test]
    fn invert_feature_map_norm_bound() {
        let grid = GridModel::fixture_14bus();
        let y = grid.admittance();
        let yp = y.conductance();
        let sigma_min = yp.svd(false, false).singular_values.min();
        let mut target = vec![0.0; 14];
        target[3] = 1.5;
        let pert = invert_feature_map(&y, &target).unwrap();
        let bound = DVector::from_column_slice(&target).norm() / sigma_min;
        assert!(pert.norm() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn invert_feature_map_falls_back_to_real_component() {
        // Purely reactive network: Y_p = 0 is singular, so the inverse must
        // route through the susceptance part.
        let lines = vec![Line::new(0, 1, 0.0, -5.0), Line::new(1, 2, 0.0, -4.0)];
        let shunts = vec![
            Complex64::new(0.0, 0.4),
            Complex64::new(0.0, 0.5),
            Complex64::new(0.0, 0.3),
        ];
        let grid = GridModel::new(
            3,
            lines,
            shunts,
            0,
            crate::grid::OperatingLimits {
                v: Bounds::new(0.0, 10.0),
                theta: Bounds::new(-3.2, 3.2),
                p: Bounds::new(-100.0, 100.0),
                q: Bounds::new(-100.0, 100.0),
            },
        )
        .unwrap();
        let y = grid.admittance();
        let target = vec![0.2, -0.1, 0.05];
        let pert = invert_feature_map(&y, &target).unwrap();
        assert!(matches!(pert, VoltagePerturbation::Real(_)));
        let achieved = crate::features::features_from_delta(&y, &pert.as_complex()).unwrap();
        for i in 0..3 {
            assert!((achieved.psi_q[i] - target[i]).abs() < 1e-8);
        }
    }

    /// Clean measurement context on the fixture: a pre-fault operating
    /// point observed noiselessly.
    fn chain_context(
        grid: &GridModel,
        seed: u64,
    ) -> (StateEstimator, BusState, MeasurementSet) {
        let mut rng = crate::testutil::rng(seed);
        let loads = crate::testutil::random_loads(grid.bus_count(), grid.slack_bus(), &mut rng);
        let state = solve_prefault(grid, &loads).unwrap();
        let est = StateEstimator::new(grid);
        let z = est.measurement_model(&state).unwrap();
        let ms = MeasurementSet::with_uniform_sigma(z, 0.01).unwrap();
        (est, state, ms)
    }

    #[test]
    fn zero_trigger_leaves_measurements_unchanged() {
        let grid = GridModel::fixture_14bus();
        let (est, state, ms) = chain_context(&grid, 70);
        let y0 = grid.admittance();
        let input = MeasurementAttackInput {
            estimator: &est,
            y0: &y0,
            baseline: &state,
            measurements: &ms,
        };
        let trigger = Trigger::from_entries(14, &[], 0);
        let constraints = ConstraintSet::new(*grid.limits());
        let out = measurement_attack(&input, &trigger, &constraints, &ChainOptions::default()).unwrap();
        assert_eq!(out.achieved_scale, 1.0);
        assert!((&out.measurements.z - &ms.z).amax() < 1e-12);
    }

    #[test]
    fn chain_reproduces_triggered_feature_and_stays_consistent() {
        let grid = GridModel::fixture_14bus();
        let y0 = grid.admittance();
        for seed in [80u64, 81, 82] {
            let (est, state, ms) = chain_context(&grid, seed);
            let input = MeasurementAttackInput {
                estimator: &est,
                y0: &y0,
                baseline: &state,
                measurements: &ms,
            };
            // The baseline equals the measured state here, so ψ_clean = 0
            // and the triggered target is the trigger value itself.
            let trigger = Trigger::from_entries(14, &[(2, 0.4), (9, -0.25)], 0);
            let constraints = ConstraintSet::new(*grid.limits());
            let out =
                measurement_attack(&input, &trigger, &constraints, &ChainOptions::default())
                    .unwrap();
            assert_eq!(out.achieved_scale, 1.0);
            assert!(out.feature_error < 1e-4, "feature error {}", out.feature_error);
            assert!((out.features.psi_q[2] - 0.4).abs() < 1e-4);
            assert!((out.features.psi_q[9] + 0.25).abs() < 1e-4);

            // The measurement shift obeys the estimator equation exactly.
            let report = validate_constraints(&est, &state, &ms.z, &out.measurements.z, &constraints).unwrap();
            assert!(report.se_ok, "SE residual {}", report.se_residual);
            assert!(report.limits_ok);
            assert!(report.pass);
        }
    }

    #[test]
    fn infeasible_magnitude_bisects_to_boundary() {
        let grid = GridModel::fixture_14bus();
        let y0 = grid.admittance();
        let (est, state, ms) = chain_context(&grid, 90);
        let input = MeasurementAttackInput {
            estimator: &est,
            y0: &y0,
            baseline: &state,
            measurements: &ms,
        };
        // Tight voltage limits so moderate triggers already violate them.
        let mut limits = *grid.limits();
        limits.v = Bounds::new(0.9, 1.05);
        let constraints = ConstraintSet::new(limits);

        let trigger = Trigger::single_entry(14, 4, 800.0, 0);
        let opts = ChainOptions::default();
        let out = measurement_attack(&input, &trigger, &constraints, &opts).unwrap();
        assert!(out.achieved_scale < 1.0, "expected scale-down");
        assert!(out.achieved_scale > 0.0, "trigger should not vanish");
        let boundary = out.achieved_scale * trigger.magnitude();

        // Requesting far beyond the boundary lands on the same boundary.
        let bigger = Trigger::single_entry(14, 4, 8000.0, 0);
        let out2 = measurement_attack(&input, &bigger, &constraints, &opts).unwrap();
        let boundary2 = out2.achieved_scale * bigger.magnitude();
        assert!(
            (boundary - boundary2).abs() < 2.0 * opts.bisection_tolerance,
            "boundaries {boundary} vs {boundary2}"
        );
    }

    #[test]
    fn measurement_level_poisoning_routes_through_the_chain() {
        use crate::fault::generate_dataset_with_traces;
        let grid = GridModel::fixture_14bus();
        let config = DatasetConfig {
            sample_count: 40,
            ..DatasetConfig::default_for(&grid)
        };
        let (ds, traces) = generate_dataset_with_traces(&grid, &config, 6).unwrap();
        let plan = PoisonPlan {
            poison_ratio: 0.15,
            trigger: Trigger::from_entries(14, &[(3, 0.3)], 0),
            threat_model: ThreatModel::MeasurementLevel,
            seed: 2,
        };
        let constraints = ConstraintSet::new(*grid.limits());
        let poisoned = poison_dataset_measurements(
            &grid,
            &ds,
            &traces,
            &plan,
            &constraints,
            &ChainOptions::default(),
            0.01,
        )
        .unwrap();
        let manifest = poisoned.poison_manifest.clone().unwrap();
        assert!(!manifest.victim_indices.is_empty());
        let scales = manifest.achieved_scales.as_ref().unwrap();
        assert_eq!(scales.len(), manifest.victim_indices.len());
        for (&v, &s) in manifest.victim_indices.iter().zip(scales) {
            assert_eq!(poisoned.samples[v].label, 0);
            assert!(s > 0.0 && s <= 1.0, "victim {v} scale {s}");
            assert!(poisoned.samples[v].features.iter().all(|f| f.is_finite()));
            if s == 1.0 {
                // Full trigger realized: the masked coordinate carries δ.
                assert!(
                    (poisoned.samples[v].features[3] - 0.3).abs() < 1e-4,
                    "victim {v}: {}",
                    poisoned.samples[v].features[3]
                );
            }
        }
        // Non-victims untouched.
        for i in 0..ds.samples.len() {
            if !manifest.victim_indices.contains(&i) {
                assert_eq!(poisoned.samples[i], ds.samples[i]);
            }
        }
    }

    #[test]
    fn hand_broken_perturbation_fails_se_consistency() {
        let grid = GridModel::fixture_14bus();
        let (est, state, ms) = chain_context(&grid, 95);
        let constraints = ConstraintSet::new(*grid.limits());

        // Clean Δz = 0 passes everything.
        let clean = validate_constraints(&est, &state, &ms.z, &ms.z, &constraints).unwrap();
        assert!(clean.pass && clean.se_ok && clean.power_flow_ok);

        // A 0.5 pu bump on one measurement is not in col(H).
        let mut broken = ms.z.clone();
        broken[5] += 0.5;
        let report = validate_constraints(&est, &state, &ms.z, &broken, &constraints).unwrap();
        assert!(!report.se_ok, "SE residual {} unexpectedly small", report.se_residual);
        assert!(!report.pass);
    }

    #[test]
    fn state_and_measurement_shift_directions_are_inverse() {
        let grid = GridModel::fixture_14bus();
        let (est, state, _) = chain_context(&grid, 99);
        let h = est.jacobian(&state).unwrap();
        let mut rng = crate::testutil::rng(100);
        let dx = DVector::from_iterator(
            est.state_dim(),
            (0..est.state_dim()).map(|_| rng.random_range(-0.01..0.01)),
        );
        let dz = measurement_shift(&h, &dx);
        let back = infer_state_shift(&h, &dz).unwrap();
        assert!((&back - &dx).amax() < 1e-9);
    }
}
