//! Multiclass SVM: one-vs-rest linear classifiers trained on the hinge
//! loss with an L2 penalty on the weights (biases unpenalized).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_rng, sgd_train, Dense, Differentiable, TrainConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// K one-vs-rest margins as a single K × d linear map.
    pub linear: Dense,
    /// L2 coefficient baked into the objective (kept with the parameters
    /// so the loss is a pure function of this struct).
    pub weight_decay: f64,
}

impl SvmParams {
    pub(crate) fn init(input_dim: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Self {
        SvmParams {
            linear: Dense::init(input_dim, class_count, rng),
            weight_decay: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn class_count(&self) -> usize {
        self.linear.out_dim
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.linear.validate()
    }

    /// Per-class margins.
    pub(crate) fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.linear.forward(x)
    }
}

impl Differentiable for SvmParams {
    fn params_flat(&self) -> Vec<f64> {
        let mut flat = self.linear.weight.clone();
        flat.extend_from_slice(&self.linear.bias);
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let w = self.linear.weight.len();
        if flat.len() != w + self.linear.bias.len() {
            return Err(crate::error::Error::Dimension {
                expected: w + self.linear.bias.len(),
                actual: flat.len(),
                context: "SVM flat parameters",
            });
        }
        self.linear.weight.copy_from_slice(&flat[..w]);
        self.linear.bias.copy_from_slice(&flat[w..]);
        Ok(())
    }

    fn loss_and_grad(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>) {
        let n = x.len().max(1) as f64;
        let d = self.linear.in_dim;
        let k = self.linear.out_dim;
        let mut dw = vec![0.0; self.linear.weight.len()];
        let mut db = vec![0.0; k];
        let mut loss = 0.0;
        for (sample, &label) in x.iter().zip(y) {
            let margins = self.scores(sample);
            for c in 0..k {
                let sign = if c == label { 1.0 } else { -1.0 };
                let slack = 1.0 - sign * margins[c];
                if slack > 0.0 {
                    loss += slack;
                    db[c] -= sign;
                    let row = &mut dw[c * d..(c + 1) * d];
                    for (g, &v) in row.iter_mut().zip(sample) {
                        *g -= sign * v;
                    }
                }
            }
        }
        loss /= n;
        // L2 on weights only.
        loss += 0.5
            * self.weight_decay
            * self.linear.weight.iter().map(|w| w * w).sum::<f64>();
        let mut flat: Vec<f64> = dw
            .iter()
            .zip(&self.linear.weight)
            .map(|(g, &w)| g / n + self.weight_decay * w)
            .collect();
        flat.extend(db.iter().map(|g| g / n));
        (loss, flat)
    }
}

pub(crate) fn train(
    x: &[Vec<f64>],
    y: &[usize],
    class_count: usize,
    config: &TrainConfig,
) -> Result<SvmParams> {
    let input_dim = x.first().map_or(0, Vec::len);
    let mut rng = init_rng(config, 3);
    let mut params = SvmParams::init(input_dim, class_count, &mut rng);
    params.weight_decay = config.weight_decay;
    sgd_train(&mut params, x, y, config, 3)?;
    params.validate()?;
    Ok(params)
}
