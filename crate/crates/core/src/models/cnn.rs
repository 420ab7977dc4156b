//! 1-D convolutional network: the feature vector is treated as a
//! length-d single-channel sequence, run through a stack of width-3
//! same-padded convolutions with ReLU, globally average-pooled over
//! positions, and mapped to class logits by one fully-connected layer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, init_rng, init_uniform, sgd_train, softmax_in_place, Dense, Differentiable, TrainConfig};
use crate::error::{Error, Result};

const KERNEL: usize = 3;

/// Width-3, stride-1, zero-padded 1-D convolution. Weights are row-major
/// over (out channel, in channel, tap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    fn init(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * KERNEL;
        Conv1d {
            in_channels,
            out_channels,
            weight: init_uniform(rng, fan_in, out_channels * in_channels * KERNEL),
            bias: init_uniform(rng, fan_in, out_channels),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.weight.len() != self.out_channels * self.in_channels * KERNEL
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Config("conv layer shape mismatch".into()));
        }
        if !self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::Config("conv layer has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Allocation-free forward over a channel-major (in_channels × len)
    /// buffer: `out` is overwritten. Boundary taps are peeled out of the
    /// position loop so the interior runs branch-free.
    fn forward_into(&self, input: &[f64], len: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.out_channels * len);
        for o in 0..self.out_channels {
            let dst = &mut out[o * len..(o + 1) * len];
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input[i * len..(i + 1) * len];
                let w = &self.weight[(o * self.in_channels + i) * KERNEL..];
                let (w0, w1, w2) = (w[0], w[1], w[2]);
                if len == 1 {
                    dst[0] += w1 * src[0];
                    continue;
                }
                dst[0] += w1 * src[0] + w2 * src[1];
                for p in 1..len - 1 {
                    dst[p] += w0 * src[p - 1] + w1 * src[p] + w2 * src[p + 1];
                }
                dst[len - 1] += w0 * src[len - 2] + w1 * src[len - 1];
            }
        }
    }

    /// Allocation-free backward; `din` is overwritten, `dweight`/`dbias`
    /// are accumulated into.
    fn backward_into(
        &self,
        input: &[f64],
        len: usize,
        dout: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        din: &mut [f64],
    ) {
        debug_assert_eq!(din.len(), self.in_channels * len);
        din.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..self.out_channels {
            let g_row = &dout[o * len..(o + 1) * len];
            dbias[o] += g_row.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let src = &input[i * len..(i + 1) * len];
                let base = (o * self.in_channels + i) * KERNEL;
                let w = &self.weight[base..base + KERNEL];
                let (w0, w1, w2) = (w[0], w[1], w[2]);
                let (mut dw0, mut dw1, mut dw2) = (0.0, 0.0, 0.0);
                let dsrc = &mut din[i * len..(i + 1) * len];
                if len == 1 {
                    dw1 += g_row[0] * src[0];
                    dsrc[0] += g_row[0] * w1;
                } else {
                    let g = g_row[0];
                    dw1 += g * src[0];
                    dw2 += g * src[1];
                    dsrc[0] += g * w1;
                    dsrc[1] += g * w2;
                    for p in 1..len - 1 {
                        let g = g_row[p];
                        dw0 += g * src[p - 1];
                        dw1 += g * src[p];
                        dw2 += g * src[p + 1];
                        dsrc[p - 1] += g * w0;
                        dsrc[p] += g * w1;
                        dsrc[p + 1] += g * w2;
                    }
                    let g = g_row[len - 1];
                    dw0 += g * src[len - 2];
                    dw1 += g * src[len - 1];
                    dsrc[len - 2] += g * w0;
                    dsrc[len - 1] += g * w1;
                }
                let dw = &mut dweight[base..base + KERNEL];
                dw[0] += dw0;
                dw[1] += dw1;
                dw[2] += dw2;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    pub input_dim: usize,
    pub convs: Vec<Conv1d>,
    pub fc: Dense,
}

/// Scratch buffers for one forward/backward pass, reusable across samples
/// so the training loop stays allocation-free.
pub(crate) struct CnnWorkspace {
    /// inputs[i] is the input map of conv layer i; inputs[L] is the final
    /// post-ReLU map that feeds the pool.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each conv layer.
    pre: Vec<Vec<f64>>,
    /// Pooled representation fed into the FC layer.
    pooled: Vec<f64>,
    pub scores: Vec<f64>,
    dlogits: Vec<f64>,
    dpooled: Vec<f64>,
    /// Gradient ping-pong buffers sized to the largest channel map.
    dmap: Vec<f64>,
    dnext: Vec<f64>,
}

impl CnnWorkspace {
    fn for_params(params: &CnnParams) -> Self {
        let len = params.input_dim;
        let classes = params.fc.out_dim;
        let mut inputs = Vec::with_capacity(params.convs.len() + 1);
        let mut pre = Vec::with_capacity(params.convs.len());
        inputs.push(vec![0.0; len]);
        let mut widest = 1;
        for conv in &params.convs {
            widest = widest.max(conv.out_channels);
            pre.push(vec![0.0; conv.out_channels * len]);
            inputs.push(vec![0.0; conv.out_channels * len]);
        }
        CnnWorkspace {
            inputs,
            pre,
            pooled: vec![0.0; params.convs.last().map_or(0, |c| c.out_channels)],
            scores: vec![0.0; classes],
            dlogits: vec![0.0; classes],
            dpooled: vec![0.0; params.convs.last().map_or(0, |c| c.out_channels)],
            dmap: vec![0.0; widest * len],
            dnext: vec![0.0; widest * len],
        }
    }
}

impl CnnParams {
    pub(crate) fn init(
        input_dim: usize,
        channels: &[usize],
        class_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(channels.len());
        let mut prev = 1;
        for &ch in channels {
            convs.push(Conv1d::init(prev, ch, rng));
            prev = ch;
        }
        CnnParams {
            input_dim,
            convs,
            fc: Dense::init(prev, class_count, rng),
        }
    }

    pub fn class_count(&self) -> usize {
        self.fc.out_dim
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::Config("CNN has no conv layers".into()));
        }
        if self.convs[0].in_channels != 1 {
            return Err(Error::Config("CNN first layer must take 1 channel".into()));
        }
        for pair in self.convs.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Config("CNN conv channels do not chain".into()));
            }
        }
        if self.fc.in_dim != self.convs.last().unwrap().out_channels {
            return Err(Error::Config("CNN FC input does not match pooled width".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("CNN input dimension must be positive".into()));
        }
        self.convs.iter().try_for_each(Conv1d::validate)?;
        self.fc.validate()
    }

    pub(crate) fn forward(&self, x: &[f64]) -> CnnWorkspace {
        let mut ws = CnnWorkspace::for_params(self);
        self.forward_with(x, &mut ws);
        ws
    }

    fn forward_with(&self, x: &[f64], ws: &mut CnnWorkspace) {
        let len = self.input_dim;
        ws.inputs[0].copy_from_slice(x);
        for (i, conv) in self.convs.iter().enumerate() {
            let (head, tail) = ws.inputs.split_at_mut(i + 1);
            conv.forward_into(&head[i], len, &mut ws.pre[i]);
            for (dst, &z) in tail[0].iter_mut().zip(&ws.pre[i]) {
                *dst = z.max(0.0);
            }
        }
        // Global average pool over positions.
        let last = &ws.inputs[self.convs.len()];
        let ch = self.convs.last().unwrap().out_channels;
        for c in 0..ch {
            ws.pooled[c] = last[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64;
        }
        self.fc.forward_into(&ws.pooled, &mut ws.scores);
    }
}

impl Differentiable for CnnParams {
    fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for c in &self.convs {
            flat.extend_from_slice(&c.weight);
            flat.extend_from_slice(&c.bias);
        }
        flat.extend_from_slice(&self.fc.weight);
        flat.extend_from_slice(&self.fc.bias);
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize =
            self.convs.iter().map(Conv1d::param_count).sum::<usize>() + self.fc.param_count();
        if flat.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: flat.len(),
                context: "CNN flat parameters",
            });
        }
        let mut offset = 0;
        for c in &mut self.convs {
            let (w, b) = (c.weight.len(), c.bias.len());
            c.weight.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            c.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        let (fw, fb) = (self.fc.weight.len(), self.fc.bias.len());
        self.fc.weight.copy_from_slice(&flat[offset..offset + fw]);
        offset += fw;
        self.fc.bias.copy_from_slice(&flat[offset..offset + fb]);
        Ok(())
    }

    fn loss_and_grad(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>) {
        let n = x.len().max(1) as f64;
        let len = self.input_dim;
        let mut dconv_w: Vec<Vec<f64>> = self.convs.iter().map(|c| vec![0.0; c.weight.len()]).collect();
        let mut dconv_b: Vec<Vec<f64>> = self.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect();
        let mut dfc_w = vec![0.0; self.fc.weight.len()];
        let mut dfc_b = vec![0.0; self.fc.bias.len()];
        let mut loss = 0.0;
        let mut ws = CnnWorkspace::for_params(self);
        for (sample, &label) in x.iter().zip(y) {
            self.forward_with(sample, &mut ws);
            loss += cross_entropy(&ws.scores, label);
            ws.dlogits.copy_from_slice(&ws.scores);
            softmax_in_place(&mut ws.dlogits);
            ws.dlogits[label] -= 1.0;
            self.fc
                .backward_into(&ws.pooled, &ws.dlogits, &mut dfc_w, &mut dfc_b, &mut ws.dpooled);
            // Un-pool: every position shares the channel gradient.
            let ch = self.convs.last().unwrap().out_channels;
            for c in 0..ch {
                let g = ws.dpooled[c] / len as f64;
                ws.dmap[c * len..(c + 1) * len].iter_mut().for_each(|v| *v = g);
            }
            for idx in (0..self.convs.len()).rev() {
                let conv = &self.convs[idx];
                let rows = conv.out_channels * len;
                // Through this layer's ReLU.
                for (g, &z) in ws.dmap[..rows].iter_mut().zip(&ws.pre[idx]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                conv.backward_into(
                    &ws.inputs[idx],
                    len,
                    &ws.dmap[..rows],
                    &mut dconv_w[idx],
                    &mut dconv_b[idx],
                    &mut ws.dnext[..conv.in_channels * len],
                );
                std::mem::swap(&mut ws.dmap, &mut ws.dnext);
            }
        }
        let mut flat = Vec::new();
        for (dw, db) in dconv_w.iter().zip(&dconv_b) {
            flat.extend(dw.iter().map(|g| g / n));
            flat.extend(db.iter().map(|g| g / n));
        }
        flat.extend(dfc_w.iter().map(|g| g / n));
        flat.extend(dfc_b.iter().map(|g| g / n));
        (loss / n, flat)
    }
}

pub(crate) fn train(
    x: &[Vec<f64>],
    y: &[usize],
    class_count: usize,
    config: &TrainConfig,
) -> Result<CnnParams> {
    let input_dim = x.first().map_or(0, Vec::len);
    let mut rng = init_rng(config, 2);
    let mut params = CnnParams::init(input_dim, &config.cnn_channels, class_count, &mut rng);
    sgd_train(&mut params, x, y, config, 2)?;
    params.validate()?;
    Ok(params)
}
