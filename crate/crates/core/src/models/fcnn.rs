//! Fully-connected network: input → hidden layers with ReLU → class
//! logits, trained with softmax cross-entropy.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, init_rng, sgd_train, softmax, Dense, Differentiable, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnnParams {
    pub layers: Vec<Dense>,
}

/// Forward-pass record: per-layer inputs (pre-activations applied) plus
/// final logits.
pub(crate) struct FcnnForward {
    /// Input of each layer, i.e. activations after the previous ReLU.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of each layer.
    pre: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl FcnnParams {
    pub(crate) fn init(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &width in hidden {
            layers.push(Dense::init(prev, width, rng));
            prev = width;
        }
        layers.push(Dense::init(prev, class_count, rng));
        FcnnParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("FCNN has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config("FCNN layer shapes do not chain".into()));
            }
        }
        self.layers.iter().try_for_each(Dense::validate)
    }

    pub(crate) fn forward(&self, x: &[f64]) -> FcnnForward {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            inputs.push(current.clone());
            let z = layer.forward(&current);
            pre.push(z.clone());
            current = if idx + 1 < self.layers.len() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        FcnnForward {
            inputs,
            pre,
            scores: current,
        }
    }
}

impl Differentiable for FcnnParams {
    fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(&l.weight);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.layers.iter().map(Dense::param_count).sum();
        if flat.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: flat.len(),
                context: "FCNN flat parameters",
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let (w, b) = (l.weight.len(), l.bias.len());
            l.weight.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            l.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    fn loss_and_grad(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>) {
        let n = x.len().max(1) as f64;
        let mut dws: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect();
        let mut dbs: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
        let mut loss = 0.0;
        for (sample, &label) in x.iter().zip(y) {
            let fwd = self.forward(sample);
            loss += cross_entropy(&fwd.scores, label);
            // dL/dlogits = softmax − onehot.
            let mut grad = softmax(&fwd.scores);
            grad[label] -= 1.0;
            for idx in (0..self.layers.len()).rev() {
                let layer = &self.layers[idx];
                let dx = layer.backward(&fwd.inputs[idx], &grad, &mut dws[idx], &mut dbs[idx]);
                if idx > 0 {
                    // Push through the previous layer's ReLU.
                    grad = dx
                        .iter()
                        .zip(&fwd.pre[idx - 1])
                        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                        .collect();
                }
            }
        }
        let mut flat = Vec::new();
        for (dw, db) in dws.iter().zip(&dbs) {
            flat.extend(dw.iter().map(|g| g / n));
            flat.extend(db.iter().map(|g| g / n));
        }
        (loss / n, flat)
    }
}

pub(crate) fn train(
    x: &[Vec<f64>],
    y: &[usize],
    class_count: usize,
    config: &TrainConfig,
) -> Result<FcnnParams> {
    let input_dim = x.first().map_or(0, Vec::len);
    let mut rng = init_rng(config, 1);
    let mut params = FcnnParams::init(input_dim, &config.fcnn_hidden, class_count, &mut rng);
    sgd_train(&mut params, x, y, config, 1)?;
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tests::toy_blobs;

    #[test]
    fn loss_decreases_over_epochs() {
        let (x, y) = toy_blobs(30, 4, 31);
        let config = TrainConfig {
            epochs: 1,
            fcnn_hidden: vec![8],
            seed: 2,
            ..TrainConfig::default()
        };
        let mut rng = init_rng(&config, 1);
        let initial = FcnnParams::init(4, &config.fcnn_hidden, 2, &mut rng);
        let (loss_before, _) = initial.loss_and_grad(&x, &y);
        let trained = train(
            &x,
            &y,
            2,
            &TrainConfig {
                epochs: 30,
                ..config
            },
        )
        .unwrap();
        let (loss_after, _) = trained.loss_and_grad(&x, &y);
        assert!(
            loss_after < loss_before,
            "loss {loss_before} → {loss_after} did not decrease"
        );
    }

    #[test]
    fn shapes_chain_from_input_to_classes() {
        let mut rng = crate::testutil::rng(1);
        let p = FcnnParams::init(14, &[128, 64], 21, &mut rng);
        assert_eq!(p.input_dim(), 14);
        assert_eq!(p.class_count(), 21);
        p.validate().unwrap();
        assert_eq!(p.forward(&vec![0.1; 14]).scores.len(), 21);
    }
}
