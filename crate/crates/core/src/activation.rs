//! Activation functions, the uniform quantizer and in-layer max pooling.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Relu,
    Sigmoid,
    Identity,
}

impl ActivationFn {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationFn::Relu => x.max(0.0),
            ActivationFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationFn::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationFn::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            ActivationFn::Identity => 1.0,
        }
    }

    /// Starting quantization step suited to the function's output range.
    pub fn default_q_init(self) -> f32 {
        match self {
            ActivationFn::Sigmoid => 0.05,
            ActivationFn::Relu | ActivationFn::Identity => 0.1,
        }
    }
}

/// How many quantization steps a layer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    NeuronWise,
    ChannelWise,
    LayerWise,
}

impl QuantMode {
    /// Number of q entries for a pre-pooling activation of `shape`.
    /// Channel-wise only applies to `[h, w, c]` maps; flat layers fall back
    /// to one step per neuron.
    pub fn group_count(self, shape: &[usize]) -> usize {
        match self {
            QuantMode::NeuronWise => shape.iter().product(),
            QuantMode::ChannelWise if shape.len() == 3 => shape[2],
            QuantMode::ChannelWise => shape.iter().product(),
            QuantMode::LayerWise => 1,
        }
    }

    pub fn grouping(self, shape: &[usize]) -> Grouping {
        match self {
            QuantMode::NeuronWise => Grouping::PerElement,
            QuantMode::ChannelWise if shape.len() == 3 => Grouping::PerChannel(shape[2]),
            QuantMode::ChannelWise => Grouping::PerElement,
            QuantMode::LayerWise => Grouping::Single,
        }
    }
}

/// Maps a flat activation index to its q entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    PerElement,
    PerChannel(usize),
    Single,
}

impl Grouping {
    #[inline]
    pub fn group_of(self, idx: usize) -> usize {
        match self {
            Grouping::PerElement => idx,
            Grouping::PerChannel(c) => idx % c,
            Grouping::Single => 0,
        }
    }
}

/// The real step an `f32` quantization parameter stands for: its shortest
/// decimal rendering, widened to `f64`. `0.2f32` thus acts as 0.2 rather
/// than 0.20000000298, so `0.5 / 0.2` lands exactly on its tie.
pub fn step_value(q: f32) -> f64 {
    format!("{q}").parse().expect("f32 display output parses as f64")
}

/// `round(f(z) / q) * q` with `q` already widened by [`step_value`];
/// rounding is half away from zero.
#[inline]
pub fn quantize_with_step(z: f64, q: f64, f: ActivationFn) -> f64 {
    (f.apply(z) / q).round() * q
}

pub fn quantize_scalar(z: f64, q: f32, f: ActivationFn) -> f64 {
    quantize_with_step(z, step_value(q), f)
}

fn check_q(q: &Tensor<f32>) -> Result<()> {
    if let Some(bad) = q.data().iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("quantization step must be positive and finite, got {bad}")));
    }
    Ok(())
}

fn grouping_for(q: &Tensor<f32>, shape: &[usize]) -> Result<Grouping> {
    let n: usize = shape.iter().product();
    match q.len() {
        1 => Ok(Grouping::Single),
        len if len == n => Ok(Grouping::PerElement),
        len if shape.len() == 3 && len == shape[2] => Ok(Grouping::PerChannel(len)),
        len => dim_err(format!("{len} quantization steps do not broadcast to {shape:?}")),
    }
}

/// Elementwise `f_q(z, q) = round(f(z) / q) * q`. `q` holds one step for
/// the whole tensor, one per channel (last axis) or one per element.
pub fn quantize_activation<E: Element>(z: &Tensor<E>, q: &Tensor<f32>, f: ActivationFn) -> Result<Tensor<E>> {
    check_q(q)?;
    let grouping = grouping_for(q, z.shape())?;
    let steps: Vec<f64> = q.data().iter().map(|&v| step_value(v)).collect();
    Tensor::new(
        z.shape().to_vec(),
        z.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| E::from_f64(quantize_with_step(v.to_f64(), steps[grouping.group_of(i)], f)))
            .collect(),
    )
}

/// Result of max pooling with the winning input index for every output.
pub struct Pooled {
    pub values: Vec<f64>,
    pub argmax: Vec<usize>,
    pub shape: Vec<usize>,
}

/// Non-overlapping max pooling of `[h, w, c]` data. Ties keep the first
/// index in scan order.
pub fn max_pool_with_argmax(x: &[f64], shape: &[usize], window: usize) -> Result<Pooled> {
    let &[h, w, c] = shape else {
        return dim_err(format!("max pooling needs [h, w, c], got {shape:?}"));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return dim_err(format!("max-pool window {window} does not divide {h}x{w}"));
    }
    let (oh, ow) = (h / window, w / window);
    let mut values = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((oy * window + dy) * w + ox * window + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(Pooled { values, argmax, shape: vec![oh, ow, c] })
}

/// Max-pools `o` when a window is configured, otherwise returns it as is.
pub fn maybe_max_pool<E: Element>(o: &Tensor<E>, window: Option<usize>) -> Result<Tensor<E>> {
    let Some(window) = window else {
        return Ok(o.clone());
    };
    let x: Vec<f64> = o.data().iter().map(|v| v.to_f64()).collect();
    let pooled = max_pool_with_argmax(&x, o.shape(), window)?;
    Tensor::new(pooled.shape, pooled.values.into_iter().map(E::from_f64).collect())
}
