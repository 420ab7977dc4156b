//! Quasi-steady-state fault simulation and labeled dataset generation.
//!
//! A fault on line `k` is modeled by splitting the line at a fractional
//! location into two series segments joined at a new virtual bus, attaching
//! a large shunt fault admittance there, and re-solving the power flow with
//! unchanged load injections. The virtual bus carries no injection, so it
//! is eliminated by Kron reduction before solving; the reduced solution is
//! exactly the restriction of the full faulted solution to the real buses,
//! and features keep the pre-fault dimension d.
//!
//! The four fault types are severity tiers of the single-phase-equivalent
//! fault admittance: three-phase faults are the most severe, then
//! double-line-to-ground, line-to-line, and line-to-ground.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, par_map_indexed};
use crate::features::extract_features;
use crate::grid::{
    check_limits, AdmittanceMatrix, BusState, GridModel, LimitKind, LimitReport, Line,
};
use crate::power_flow::{solve_power_flow, PowerFlowOptions};

/// Seed-stream tags for the independent per-sample random streams.
const TAG_SAMPLE: u64 = 0x5a17;
const TAG_SPLIT: u64 = 0xb115;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultType {
    #[serde(rename = "TP")]
    ThreePhase,
    #[serde(rename = "LG")]
    LineToGround,
    #[serde(rename = "DLG")]
    DoubleLineToGround,
    #[serde(rename = "LL")]
    LineToLine,
}

impl FaultType {
    pub const ALL: [FaultType; 4] = [
        FaultType::ThreePhase,
        FaultType::LineToGround,
        FaultType::DoubleLineToGround,
        FaultType::LineToLine,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FaultType::ThreePhase => "TP",
            FaultType::LineToGround => "LG",
            FaultType::DoubleLineToGround => "DLG",
            FaultType::LineToLine => "LL",
        }
    }
}

/// Per-type base factors for the fault admittance magnitude, ordered by
/// physical severity (TP > DLG > LL > LG).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultTypeFactors {
    pub tp: f64,
    pub dlg: f64,
    pub ll: f64,
    pub lg: f64,
}

impl Default for FaultTypeFactors {
    fn default() -> Self {
        FaultTypeFactors {
            tp: 10.0,
            dlg: 6.0,
            ll: 4.0,
            lg: 2.0,
        }
    }
}

impl FaultTypeFactors {
    pub fn factor(&self, fault_type: FaultType) -> f64 {
        match fault_type {
            FaultType::ThreePhase => self.tp,
            FaultType::DoubleLineToGround => self.dlg,
            FaultType::LineToLine => self.ll,
            FaultType::LineToGround => self.lg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.tp > self.dlg && self.dlg > self.ll && self.ll > self.lg;
        let positive = self.lg > 0.0;
        if !(ordered && positive) {
            return Err(Error::Config(
                "fault type factors must satisfy tp > dlg > ll > lg > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A single fault scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub line_index: usize,
    pub fault_type: FaultType,
    /// Position of the fault along the line, strictly inside (0, 1).
    pub location_fraction: f64,
    /// Multiplier on the per-type base admittance factor; > 0.
    pub fault_admittance_scale: f64,
}

impl FaultSpec {
    pub fn validate(&self, grid: &GridModel) -> Result<()> {
        if self.line_index >= grid.line_count() {
            return Err(Error::Config(format!(
                "fault line index {} out of range ({} lines)",
                self.line_index,
                grid.line_count()
            )));
        }
        if !(self.location_fraction > 0.0 && self.location_fraction < 1.0) {
            return Err(Error::Config(format!(
                "location fraction {} must lie strictly inside (0, 1)",
                self.location_fraction
            )));
        }
        if !(self.fault_admittance_scale > 0.0) {
            return Err(Error::Config(format!(
                "fault admittance scale {} must be positive",
                self.fault_admittance_scale
            )));
        }
        Ok(())
    }
}

/// Splits the faulted line at `location_fraction` into two series segments
/// joined at a new virtual bus (index `d`, appended last) and attaches the
/// shunt fault admittance there. Pure function of its inputs.
pub fn apply_fault(grid: &GridModel, spec: &FaultSpec, factors: &FaultTypeFactors) -> Result<GridModel> {
    spec.validate(grid)?;
    factors.validate()?;
    let d = grid.bus_count();
    let virtual_bus = d;
    let f = spec.location_fraction;

    // A length-f piece of a line with series impedance z has impedance f·z,
    // hence admittance y/f; the complement gets y/(1−f).
    let mut lines: Vec<Line> = Vec::with_capacity(grid.line_count() + 1);
    for (k, line) in grid.lines().iter().enumerate() {
        if k == spec.line_index {
            lines.push(Line {
                from: line.from,
                to: virtual_bus,
                admittance: line.admittance / f,
            });
            lines.push(Line {
                from: virtual_bus,
                to: line.to,
                admittance: line.admittance / (1.0 - f),
            });
        } else {
            lines.push(*line);
        }
    }

    let magnitude = spec.fault_admittance_scale * factors.factor(spec.fault_type);
    let mut shunts = grid.shunts().to_vec();
    // Single-phase-equivalent fault path, modeled as a conductance.
    shunts.push(Complex64::new(magnitude, 0.0));

    GridModel::new(d + 1, lines, shunts, grid.slack_bus(), *grid.limits())
}

/// Pre/post-fault state pair with the sample label.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub pre_fault: BusState,
    pub post_fault: BusState,
    pub label: usize,
}

/// Simulates one scenario: solves the pre-fault network for `loads`, then
/// either re-solves the Kron-reduced faulted network (same injections) or,
/// for the normal class (`fault = None`), reuses the pre-fault state. The
/// post state then receives zero-mean Gaussian measurement noise of
/// standard deviation `noise_sigma` on both rectangular components.
///
/// Labels: `0..E-1` name the faulted line, `E` is the normal class.
pub fn simulate_sample(
    grid: &GridModel,
    loads: &[Complex64],
    fault: Option<&FaultSpec>,
    factors: &FaultTypeFactors,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedSample> {
    let opts = PowerFlowOptions::default();
    let pre_fault = solve_power_flow(&grid.admittance(), grid.slack_bus(), loads, &opts)?;

    let (post_clean, label) = match fault {
        None => (pre_fault.clone(), grid.line_count()),
        Some(spec) => {
            let faulted = apply_fault(grid, spec, factors)?;
            let reduced = faulted.admittance().kron_reduce(grid.bus_count())?;
            let post = solve_power_flow(&reduced, grid.slack_bus(), loads, &opts)?;
            (post, spec.line_index)
        }
    };

    let post_fault = add_measurement_noise(&post_clean, noise_sigma, rng)?;
    Ok(SimulatedSample {
        pre_fault,
        post_fault,
        label,
    })
}

/// Adds zero-mean Gaussian noise to both rectangular voltage components.
pub fn add_measurement_noise(
    state: &BusState,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BusState> {
    if sigma == 0.0 {
        return Ok(state.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|_| Error::Config(format!("invalid noise sigma {sigma}")))?;
    let u = state.voltages().map(|c| {
        Complex64::new(c.re + normal.sample(rng), c.im + normal.sample(rng))
    });
    Ok(BusState::from_rectangular(u))
}

/// One labeled sample: the classifier feature vector ψ_q plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSample {
    pub features: Vec<f64>,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fault_type: Option<FaultType>,
}

/// Generation controls. Together with the grid and a seed these fully
/// determine the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub sample_count: usize,
    /// Sampling weights over the fault types [TP, LG, DLG, LL]; the class
    /// label itself (line index or normal) is drawn uniformly.
    pub type_mix: [f64; 4],
    /// Measurement noise on rectangular voltage components, per-unit.
    pub noise_sigma: f64,
    /// Complex base load per bus as [p, q]; the slack entry is ignored.
    pub base_loads: Vec<[f64; 2]>,
    /// Uniform range for the global load scaling factor.
    pub load_scale: [f64; 2],
    /// Uniform range for the fault location fraction, within (0, 1).
    pub location_range: [f64; 2],
    /// Uniform range for the fault admittance scale.
    pub admittance_scale_range: [f64; 2],
    /// Fraction of samples assigned to the training split.
    pub train_fraction: f64,
    #[serde(default)]
    pub base_factors: FaultTypeFactors,
    /// Redraw budget per sample before generation fails.
    #[serde(default = "default_max_redraws")]
    pub max_redraws: usize,
}

fn default_max_redraws() -> usize {
    60
}

impl DatasetConfig {
    /// Sensible defaults for a given grid: a mildly heterogeneous load
    /// profile and the severity tiers from [`FaultTypeFactors::default`].
    pub fn default_for(grid: &GridModel) -> Self {
        let base_loads = (0..grid.bus_count())
            .map(|i| {
                if i == grid.slack_bus() {
                    [0.0, 0.0]
                } else {
                    [
                        -(0.10 + 0.02 * (i % 4) as f64),
                        -(0.04 + 0.01 * (i % 3) as f64),
                    ]
                }
            })
            .collect();
        DatasetConfig {
            sample_count: 840,
            type_mix: [0.25, 0.25, 0.25, 0.25],
            noise_sigma: 1e-3,
            base_loads,
            load_scale: [0.8, 1.2],
            location_range: [0.2, 0.8],
            admittance_scale_range: [0.5, 2.0],
            train_fraction: 0.8,
            base_factors: FaultTypeFactors::default(),
            max_redraws: default_max_redraws(),
        }
    }

    pub fn validate(&self, grid: &GridModel) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be positive".into()));
        }
        if self.base_loads.len() != grid.bus_count() {
            return Err(Error::Dimension {
                expected: grid.bus_count(),
                actual: self.base_loads.len(),
                context: "base_loads length",
            });
        }
        if self.type_mix.iter().any(|&w| w < 0.0) || self.type_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("type_mix weights must be non-negative and not all zero".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        for (name, range) in [
            ("load_scale", self.load_scale),
            ("location_range", self.location_range),
            ("admittance_scale_range", self.admittance_scale_range),
        ] {
            if !(range[0] <= range[1]) {
                return Err(Error::Config(format!("{name} range is inverted")));
            }
        }
        if !(self.location_range[0] > 0.0 && self.location_range[1] < 1.0) {
            return Err(Error::Config("location_range must lie inside (0, 1)".into()));
        }
        if !(self.admittance_scale_range[0] > 0.0) {
            return Err(Error::Config("admittance scale must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie inside (0, 1)".into()));
        }
        self.base_factors.validate()?;
        Ok(())
    }
}

/// Provenance header persisted with every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub grid_hash: String,
    pub seed: u64,
    pub config: DatasetConfig,
}

/// A labeled feature dataset with a stratified train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<FaultSample>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Present only on poisoned datasets: audit record of which rows were
    /// altered. Ignored by training and evaluation.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub poison_manifest: Option<crate::attack::PoisonManifest>,
}

impl Dataset {
    /// Number of classes: one per line plus the normal class.
    pub fn class_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.label + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate_split()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// CSV export: one row per sample, feature columns then the label.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let d = self.feature_dim();
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        writer.write_record(&header)?;
        for sample in &self.samples {
            let mut row: Vec<String> = sample.features.iter().map(|x| x.to_string()).collect();
            row.push(sample.label.to_string());
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }

    fn validate_split(&self) -> Result<()> {
        let n = self.samples.len();
        let mut seen = vec![false; n];
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            if i >= n {
                return Err(Error::Config(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::Config(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        if !seen.into_iter().all(|s| s) {
            return Err(Error::Config("split does not cover all samples".into()));
        }
        Ok(())
    }
}

/// Physics context of one generated sample, kept in memory for the
/// measurement-level attack chain (never persisted).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub pre_fault: BusState,
    pub post_fault: BusState,
    pub loads: Vec<Complex64>,
    pub fault: Option<FaultSpec>,
}

/// Generates a dataset; see [`generate_dataset_with_traces`] for the
/// variant that also returns per-sample physics context.
pub fn generate_dataset(grid: &GridModel, config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    generate_dataset_with_traces(grid, config, seed).map(|(ds, _)| ds)
}

/// Deterministic dataset generation. Each sample draws from an independent
/// random stream derived from `(seed, sample index)`, so serial and
/// parallel runs produce identical bytes. Scenarios whose solve fails or
/// whose states violate the operating limits are redrawn from the same
/// stream, up to `config.max_redraws` attempts.
pub fn generate_dataset_with_traces(
    grid: &GridModel,
    config: &DatasetConfig,
    seed: u64,
) -> Result<(Dataset, Vec<SampleTrace>)> {
    config.validate(grid)?;
    let y0 = grid.admittance();

    let results: Vec<Result<(FaultSample, SampleTrace)>> =
        par_map_indexed(config.sample_count, |index| {
            generate_one(grid, &y0, config, seed, index)
        });

    let mut samples = Vec::with_capacity(config.sample_count);
    let mut traces = Vec::with_capacity(config.sample_count);
    for r in results {
        let (sample, trace) = r?;
        samples.push(sample);
        traces.push(trace);
    }

    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (train_indices, test_indices) = stratified_split(
        &labels,
        config.train_fraction,
        derive_seed(seed, &[TAG_SPLIT]),
    )?;

    let dataset = Dataset {
        header: DatasetHeader {
            grid_hash: grid.content_hash(),
            seed,
            config: config.clone(),
        },
        samples,
        train_indices,
        test_indices,
        poison_manifest: None,
    };
    Ok((dataset, traces))
}

fn generate_one(
    grid: &GridModel,
    y0: &AdmittanceMatrix,
    config: &DatasetConfig,
    seed: u64,
    index: usize,
) -> Result<(FaultSample, SampleTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SAMPLE, index as u64]));
    let class_count = grid.line_count() + 1;
    let mix_total: f64 = config.type_mix.iter().sum();

    // The label and fault type are drawn once per sample; infeasible
    // scenarios redraw only the continuous parameters, so rejection does
    // not skew the class or type histogram.
    let label = rng.random_range(0..class_count);
    let fault_type = if label < grid.line_count() {
        let mut pick = rng.random_range(0.0..mix_total);
        let mut chosen = FaultType::LineToLine;
        for (ft, &w) in FaultType::ALL.iter().zip(&config.type_mix) {
            if pick < w {
                chosen = *ft;
                break;
            }
            pick -= w;
        }
        Some(chosen)
    } else {
        None
    };

    for _attempt in 0..=config.max_redraws {
        let fault = fault_type.map(|fault_type| FaultSpec {
            line_index: label,
            fault_type,
            location_fraction: rng.random_range(config.location_range[0]..=config.location_range[1]),
            fault_admittance_scale: rng
                .random_range(config.admittance_scale_range[0]..=config.admittance_scale_range[1]),
        });

        let scale = rng.random_range(config.load_scale[0]..=config.load_scale[1]);
        let loads: Vec<Complex64> = config
            .base_loads
            .iter()
            .map(|pq| Complex64::new(pq[0] * scale, pq[1] * scale))
            .collect();

        let simulated = match simulate_sample(
            grid,
            &loads,
            fault.as_ref(),
            &config.base_factors,
            config.noise_sigma,
            &mut rng,
        ) {
            Ok(s) => s,
            Err(Error::NoConvergence { .. }) => continue,
            Err(e) => return Err(e),
        };

        if !state_within_limits(grid, y0, &simulated.pre_fault)
            || !state_within_limits(grid, y0, &simulated.post_fault)
        {
            continue;
        }

        let features = extract_features(y0, &simulated.pre_fault, &simulated.post_fault)?;
        if !features.is_finite() {
            continue;
        }
        let sample = FaultSample {
            features: features.psi_q,
            label: simulated.label,
            fault_type: fault.map(|f| f.fault_type),
        };
        let trace = SampleTrace {
            pre_fault: simulated.pre_fault,
            post_fault: simulated.post_fault,
            loads,
            fault,
        };
        return Ok((sample, trace));
    }
    Err(Error::Infeasible(format!(
        "sample {index}: no feasible scenario within {} redraws",
        config.max_redraws
    )))
}

/// Checks voltage magnitudes, angles, and injections of `state` against the
/// grid's operating limits.
pub fn state_within_limits(grid: &GridModel, y: &AdmittanceMatrix, state: &BusState) -> bool {
    limit_report(grid, y, state).map_or(false, |r| r.is_feasible())
}

/// Full limit report for a state: v, θ, p, q.
pub fn limit_report(
    grid: &GridModel,
    y: &AdmittanceMatrix,
    state: &BusState,
) -> Result<LimitReport> {
    let limits = grid.limits();
    let (p, q) = y.power_injections(state)?;
    let report = check_limits(LimitKind::Voltage, &state.magnitudes(), limits.v)
        .merge(check_limits(LimitKind::Angle, &state.angles(), limits.theta))
        .merge(check_limits(LimitKind::ActivePower, &p, limits.p))
        .merge(check_limits(LimitKind::ReactivePower, &q, limits.q));
    Ok(report)
}

/// Stratified split: per-class train counts follow the global ratio by
/// largest-remainder apportionment, and every class with at least two
/// samples keeps at least one sample on each side.
pub fn stratified_split(
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Config(
            "need at least two samples to form a train/test split".into(),
        ));
    }
    let class_count = labels.iter().max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label].push(i);
    }

    // Shuffle within each class from a dedicated stream.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_class.iter_mut() {
        // Fisher-Yates; rand's shuffle would also do, but an explicit loop
        // keeps the draw count independent of rand's internals.
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
    }

    let train_total = (train_fraction * n as f64).round() as usize;
    let train_total = train_total.clamp(1, n - 1);

    // Largest-remainder apportionment of train_total across classes.
    let mut train_counts: Vec<usize> = Vec::with_capacity(class_count);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(class_count);
    let mut assigned = 0usize;
    for (c, members) in by_class.iter().enumerate() {
        let exact = train_fraction * members.len() as f64;
        let floor = exact.floor() as usize;
        train_counts.push(floor.min(members.len()));
        assigned += train_counts[c];
        remainders.push((c, exact - floor as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = train_total.saturating_sub(assigned);
    for &(c, _) in remainders.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if train_counts[c] < by_class[c].len() {
            train_counts[c] += 1;
            leftover -= 1;
        }
    }

    // Coverage repair: every class with ≥ 2 members appears on both sides.
    for c in 0..class_count {
        let size = by_class[c].len();
        if size < 2 {
            continue;
        }
        if train_counts[c] == size {
            // Free a test slot here; hand the train slot to the class with
            // the most test surplus.
            if let Some(donor) = (0..class_count)
                .filter(|&k| k != c && by_class[k].len() > train_counts[k] + 1)
                .max_by_key(|&k| by_class[k].len() - train_counts[k])
            {
                train_counts[c] -= 1;
                train_counts[donor] += 1;
            } else {
                train_counts[c] -= 1;
            }
        } else if train_counts[c] == 0 {
            if let Some(donor) = (0..class_count)
                .filter(|&k| k != c && train_counts[k] > 1)
                .max_by_key(|&k| train_counts[k])
            {
                train_counts[c] += 1;
                train_counts[donor] -= 1;
            } else {
                return Err(Error::Config(format!(
                    "class {c} cannot be represented in both splits"
                )));
            }
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let k = train_counts[c];
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
