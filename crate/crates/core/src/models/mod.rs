//! From-scratch victim classifiers: a fully-connected network, a 1-D
//! convolutional network, and a one-vs-rest linear SVM, all trained by
//! seeded mini-batch gradient descent.
//!
//! Everything here is deliberately dependency-free numerics: forward and
//! backward passes are hand-written and validated against central finite
//! differences (see [`gradient_check`]).

mod cnn;
mod fcnn;
mod svm;

pub use cnn::CnnParams;
pub use fcnn::FcnnParams;
pub use svm::SvmParams;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::fault::Dataset;

const TAG_INIT: u64 = 0x1217;
const TAG_SHUFFLE: u64 = 0x5871;

/// Victim architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fcnn,
    Cnn,
    Svm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Fcnn, ModelKind::Cnn, ModelKind::Svm];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Fcnn => "fcnn",
            ModelKind::Cnn => "cnn",
            ModelKind::Svm => "svm",
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        match self {
            ModelKind::Fcnn => 1,
            ModelKind::Cnn => 2,
            ModelKind::Svm => 3,
        }
    }

}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcnn" => Ok(ModelKind::Fcnn),
            "cnn" => Ok(ModelKind::Cnn),
            "svm" => Ok(ModelKind::Svm),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected fcnn, cnn, or svm)"
            ))),
        }
    }
}

/// Only supported optimizer; kept as a tag for checkpoint provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
}

/// Mini-batch gradient-descent settings. Layer widths are exposed here so
/// toy shapes (gradient checks) and the default desk-scale shapes share
/// one code path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// L2 penalty; used by the SVM objective (NN models default to 0).
    pub weight_decay: f64,
    /// Hidden layer widths of the fully-connected network.
    pub fcnn_hidden: Vec<usize>,
    /// Channel counts of the convolutional stack.
    pub cnn_channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            optimizer: Optimizer::Sgd,
            weight_decay: 1e-4,
            fcnn_hidden: vec![128, 64],
            cnn_channels: vec![8, 16, 16, 32],
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.fcnn_hidden.is_empty() || self.fcnn_hidden.contains(&0) {
            return Err(Error::Config("FCNN hidden widths must be positive".into()));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::Config("CNN channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Per-feature standardization fit on the training split (after any
/// poisoning, as a victim would compute it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("cannot fit normalizer on empty data".into()));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n as f64).sqrt().max(1e-8))
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                actual: row.len(),
                context: "normalizer input",
            });
        }
        Ok(row
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect())
    }
}

/// Architecture-tagged parameter bundle, the checkpointable part of a
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelParams {
    Fcnn(FcnnParams),
    Cnn(CnnParams),
    Svm(SvmParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Fcnn(_) => ModelKind::Fcnn,
            ModelParams::Cnn(_) => ModelKind::Cnn,
            ModelParams::Svm(_) => ModelKind::Svm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelParams::Fcnn(p) => p.input_dim(),
            ModelParams::Cnn(p) => p.input_dim,
            ModelParams::Svm(p) => p.input_dim(),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            ModelParams::Fcnn(p) => p.class_count(),
            ModelParams::Cnn(p) => p.class_count(),
            ModelParams::Svm(p) => p.class_count(),
        }
    }

    /// Raw class scores (logits or margins) for a normalized input.
    fn scores_normalized(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ModelParams::Fcnn(p) => p.forward(x).scores,
            ModelParams::Cnn(p) => p.forward(x).scores,
            ModelParams::Svm(p) => p.scores(x),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Fcnn(p) => p.validate(),
            ModelParams::Cnn(p) => p.validate(),
            ModelParams::Svm(p) => p.validate(),
        }
    }
}

/// A trained classifier: parameters plus the input normalization that was
/// fit alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.params.kind()
    }

    pub fn class_count(&self) -> usize {
        self.params.class_count()
    }

    /// Raw per-class scores for an unnormalized feature vector.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = self.normalizer.apply(features)?;
        Ok(self.params.scores_normalized(&x))
    }

    /// Softmax of the scores; sums to 1 within 1e−9.
    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.scores(features)?))
    }

    /// Predicted class: argmax of the scores, ties broken by the lowest
    /// class index.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(features)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(text)?;
        model.params.validate()?;
        if model.normalizer.mean.len() != model.params.input_dim() {
            return Err(Error::Config(
                "normalizer dimension does not match model input".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Labeled design matrix extracted from one split of a dataset.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl DesignMatrix {
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("empty split".into()));
        }
        Ok(DesignMatrix {
            rows: indices
                .iter()
                .map(|&i| dataset.samples[i].features.clone())
                .collect(),
            labels: indices.iter().map(|&i| dataset.samples[i].label).collect(),
            class_count: dataset.class_count(),
        })
    }

    pub fn train_split(dataset: &Dataset) -> Result<Self> {
        Self::from_indices(dataset, &dataset.train_indices)
    }

    pub fn test_split(dataset: &Dataset) -> Result<Self> {
        Self::from_indices(dataset, &dataset.test_indices)
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Trains a model of the requested kind on the training split: fits the
/// normalizer on the (possibly poisoned) training rows, then runs seeded
/// mini-batch gradient descent. Deterministic given (kind, data, config).
pub fn train_model(kind: ModelKind, dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    let data = DesignMatrix::train_split(dataset)?;
    train_on_matrix(kind, &data, config)
}

/// Same as [`train_model`] but on an explicit design matrix.
pub fn train_on_matrix(
    kind: ModelKind,
    data: &DesignMatrix,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if data.rows.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let k = data.class_count;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {bad} out of range ({k} classes)")));
    }
    let normalizer = Normalizer::fit(&data.rows)?;
    let x: Vec<Vec<f64>> = data
        .rows
        .iter()
        .map(|r| normalizer.apply(r))
        .collect::<Result<_>>()?;

    let params = match kind {
        ModelKind::Fcnn => ModelParams::Fcnn(fcnn::train(&x, &data.labels, k, config)?),
        ModelKind::Cnn => ModelParams::Cnn(cnn::train(&x, &data.labels, k, config)?),
        ModelKind::Svm => ModelParams::Svm(svm::train(&x, &data.labels, k, config)?),
    };
    Ok(TrainedModel { params, normalizer })
}

/// Max relative error between analytic and central finite-difference
/// gradients of the training loss, on a small seeded toy instance.
pub fn gradient_check(
    kind: ModelKind,
    input_dim: usize,
    class_count: usize,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6c_ad, kind.tag()]));
    let x: Vec<Vec<f64>> = (0..sample_count)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<usize> = (0..sample_count)
        .map(|_| rng.random_range(0..class_count))
        .collect();
    let config = TrainConfig {
        fcnn_hidden: vec![6, 5],
        cnn_channels: vec![3, 4],
        weight_decay: 1e-3,
        ..TrainConfig::default()
    };
    match kind {
        ModelKind::Fcnn => {
            let mut p = fcnn::FcnnParams::init(input_dim, &config.fcnn_hidden, class_count, &mut rng);
            check_against_fd(&mut p, &x, &y)
        }
        ModelKind::Cnn => {
            let mut p = cnn::CnnParams::init(input_dim, &config.cnn_channels, class_count, &mut rng);
            check_against_fd(&mut p, &x, &y)
        }
        ModelKind::Svm => {
            let mut p = svm::SvmParams::init(input_dim, class_count, &mut rng);
            p.weight_decay = config.weight_decay;
            check_against_fd(&mut p, &x, &y)
        }
    }
}

/// Anything trainable by generic SGD: a flat parameter view plus a batch
/// loss/gradient evaluation in that flat layout.
pub(crate) trait Differentiable {
    fn params_flat(&self) -> Vec<f64>;
    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()>;
    /// Mean loss over the batch and its gradient, flat layout.
    fn loss_and_grad(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>);
}

fn check_against_fd<M: Differentiable>(
    model: &mut M,
    x: &[Vec<f64>],
    y: &[usize],
) -> Result<f64> {
    let theta = model.params_flat();
    let (_, analytic) = model.loss_and_grad(x, y);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        model.set_params_flat(&plus)?;
        let (lp, _) = model.loss_and_grad(x, y);
        let mut minus = theta.clone();
        minus[i] -= h;
        model.set_params_flat(&minus)?;
        let (lm, _) = model.loss_and_grad(x, y);
        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max(rel);
    }
    model.set_params_flat(&theta)?;
    Ok(worst)
}

/// Generic seeded mini-batch SGD over a [`Differentiable`] model.
pub(crate) fn sgd_train<M: Differentiable>(
    model: &mut M,
    x: &[Vec<f64>],
    y: &[usize],
    config: &TrainConfig,
    arch_tag: u64,
) -> Result<()> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SHUFFLE, arch_tag]));
    let mut theta = model.params_flat();

    for epoch in 0..config.epochs {
        // Fisher-Yates reshuffle per epoch from the same stream.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| x[i].clone()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (loss, grad) = model.loss_and_grad(&bx, &by);
            epoch_loss += loss * batch.len() as f64;
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= config.learning_rate * g;
            }
            model.set_params_flat(&theta)?;
        }
        epoch_loss /= n as f64;
        if !epoch_loss.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "non-finite parameters or loss ({epoch_loss}) at epoch {epoch}"
            )));
        }
    }
    Ok(())
}

/// Seeded RNG for parameter initialization, shared by all architectures.
pub(crate) fn init_rng(config: &TrainConfig, arch_tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_INIT, arch_tag]))
}

/// Uniform fan-in initialization: U(−1/√fan_in, 1/√fan_in).
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Softmax over a mutable buffer, avoiding the allocation of [`softmax`].
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Cross-entropy of a softmax distribution against a hard label.
pub fn cross_entropy(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
    log_sum - scores[label]
}

/// Argmax with ties broken by the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fully-connected layer, weights row-major (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub(crate) fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: init_uniform(rng, in_dim, in_dim * out_dim),
            bias: init_uniform(rng, in_dim, out_dim),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::Config("dense layer shape mismatch".into()));
        }
        if !self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::Config("dense layer has non-finite parameters".into()));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }

    /// Allocation-free forward: `out` is overwritten.
    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *out_v = self.bias[o] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>();
        }
    }

    /// Backward pass: accumulates ∂L/∂W and ∂L/∂b into the given buffers
    /// and returns ∂L/∂x.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        dout: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        self.backward_into(x, dout, dweight, dbias, &mut dx);
        dx
    }

    /// Allocation-free backward; `dx` is overwritten.
    pub(crate) fn backward_into(
        &self,
        x: &[f64],
        dout: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        dx: &mut [f64],
    ) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &g) in dout.iter().enumerate() {
            dbias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dweight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                drow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
