//! The Delta Activation Layer.
//!
//! A layer keeps a persistent neuron state `Z`, initialised with the bias.
//! Each step it integrates incoming pre-activation deltas into `Z` (sigma),
//! applies the quantized activation `round(f(Z) / q) * q`, optionally
//! max-pools the result and emits the difference against its previous
//! output (delta). Either end can be switched off to bridge between dense
//! and delta segments of a network:
//!
//! | skip_integration | skip_differentiation | input  | output |
//! |------------------|----------------------|--------|--------|
//! | false            | false                | deltas | deltas |
//! | false            | true                 | deltas | dense  |
//! | true             | false                | dense  | deltas |
//! | true             | true                 | dense  | dense  |
//!
//! No threshold is applied to the emitted deltas: because the activation
//! is quantized, the delta path reproduces the quantized dense path.

use serde::{Deserialize, Serialize};

use crate::activation::{max_pool_with_argmax, step_value, ActivationFn, Grouping, QuantMode};
use crate::error::{config_err, dim_err, Result};
use crate::ops::OpCounter;
use crate::tensor::{num_elements, Element, Signal, SparseEvents, Tensor};

pub const DEFAULT_Q_MIN: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLayerConfig {
    pub quant_mode: QuantMode,
    pub activation: ActivationFn,
    /// Weight of this layer's L1 penalty on its emitted signal.
    pub sparsity_factor: f32,
    #[serde(default)]
    pub max_pool: Option<usize>,
    #[serde(default)]
    pub skip_integration: bool,
    #[serde(default)]
    pub skip_differentiation: bool,
    pub q_init: f32,
    pub q_min: f32,
}

impl DeltaLayerConfig {
    /// Full sigma-delta layer, channel-wise steps, default q for `activation`.
    pub fn new(activation: ActivationFn) -> Self {
        Self {
            quant_mode: QuantMode::ChannelWise,
            activation,
            sparsity_factor: 0.0,
            max_pool: None,
            skip_integration: false,
            skip_differentiation: false,
            q_init: activation.default_q_init(),
            q_min: DEFAULT_Q_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_min > 0.0) || !(self.q_init >= self.q_min) || !self.q_init.is_finite() {
            return config_err(format!("need q_init >= q_min > 0, got q_init={} q_min={}", self.q_init, self.q_min));
        }
        if !(self.sparsity_factor >= 0.0) || !self.sparsity_factor.is_finite() {
            return config_err(format!("sparsity factor must be finite and nonnegative, got {}", self.sparsity_factor));
        }
        if self.max_pool == Some(0) {
            return config_err("max-pool window must be positive");
        }
        Ok(())
    }

    pub fn integrates(&self) -> bool {
        !self.skip_integration
    }

    pub fn differentiates(&self) -> bool {
        !self.skip_differentiation
    }

    pub fn is_full(&self) -> bool {
        self.integrates() && self.differentiates()
    }
}

/// Shape after the optional max pooling.
pub fn pooled_shape(z_shape: &[usize], max_pool: Option<usize>) -> Result<Vec<usize>> {
    match max_pool {
        None => Ok(z_shape.to_vec()),
        Some(k) => match *z_shape {
            [h, w, c] if k > 0 && h % k == 0 && w % k == 0 => Ok(vec![h / k, w / k, c]),
            _ => dim_err(format!("max-pool window {k} does not fit activation {z_shape:?}")),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLayerState {
    /// Neuron state, pre-activation.
    pub z: Tensor<f64>,
    /// Last emitted output, post-pooling.
    pub o_prev: Tensor<f64>,
    /// Quantization steps, one per neuron, channel or layer.
    pub q: Tensor<f32>,
    pub t: u64,
}

/// Broadcasts a bias over `shape`: one value per element, per channel of a
/// `[h, w, c]` map, or a single scalar.
pub fn broadcast_bias(bias: &Tensor, shape: &[usize]) -> Result<Tensor<f64>> {
    let n = num_elements(shape);
    let b = bias.data();
    let data: Vec<f64> = match b.len() {
        len if len == n => b.iter().map(|&v| v as f64).collect(),
        1 => vec![b[0] as f64; n],
        len if shape.len() == 3 && len == shape[2] => (0..n).map(|i| b[i % len] as f64).collect(),
        len => return dim_err(format!("bias of {len} values does not broadcast to {shape:?}")),
    };
    Tensor::new(shape.to_vec(), data)
}

/// Fresh state: `Z = B`, previous output all zeros, `q = q_init`, `t = 0`.
pub fn init_state(config: &DeltaLayerConfig, bias: &Tensor, z_shape: &[usize]) -> Result<DeltaLayerState> {
    config.validate()?;
    let out_shape = pooled_shape(z_shape, config.max_pool)?;
    let groups = config.quant_mode.group_count(z_shape);
    Ok(DeltaLayerState {
        z: broadcast_bias(bias, z_shape)?,
        o_prev: Tensor::zeros(&out_shape),
        q: Tensor::full(&[groups], config.q_init),
        t: 0,
    })
}

/// L1 norm of a delta tensor.
pub fn sparsity_loss<E: Element>(deltas: &SparseEvents<E>) -> f64 {
    deltas.entries().iter().map(|&(_, v)| v.to_f64().abs()).sum()
}

/// A configured Delta Activation Layer with its running state.
#[derive(Clone, Debug)]
pub struct DeltaLayer {
    config: DeltaLayerConfig,
    state: DeltaLayerState,
    grouping: Grouping,
    steps: Vec<f64>,
}

impl DeltaLayer {
    pub fn new(config: DeltaLayerConfig, bias: &Tensor, z_shape: &[usize]) -> Result<Self> {
        let state = init_state(&config, bias, z_shape)?;
        Self::from_state(config, state)
    }

    pub fn from_state(config: DeltaLayerConfig, state: DeltaLayerState) -> Result<Self> {
        config.validate()?;
        let z_shape = state.z.shape().to_vec();
        if pooled_shape(&z_shape, config.max_pool)? != state.o_prev.shape() {
            return dim_err("previous output shape does not match the pooled state shape");
        }
        if state.q.len() != config.quant_mode.group_count(&z_shape) {
            return dim_err(format!(
                "{} quantization steps given, {:?} mode over {z_shape:?} needs {}",
                state.q.len(),
                config.quant_mode,
                config.quant_mode.group_count(&z_shape)
            ));
        }
        let grouping = config.quant_mode.grouping(&z_shape);
        let mut layer = Self { config, state, grouping, steps: Vec::new() };
        layer.clamp_and_cache_q();
        Ok(layer)
    }

    fn clamp_and_cache_q(&mut self) {
        let q_min = self.config.q_min;
        for q in self.state.q.data_mut() {
            if !(*q >= q_min) {
                *q = q_min;
            }
        }
        self.steps = self.state.q.data().iter().map(|&q| step_value(q)).collect();
    }

    pub fn config(&self) -> &DeltaLayerConfig {
        &self.config
    }

    pub fn state(&self) -> &DeltaLayerState {
        &self.state
    }

    pub fn into_state(self) -> DeltaLayerState {
        self.state
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    /// Replaces the quantization steps, clamping each at `q_min`.
    pub fn set_q(&mut self, q: &Tensor) -> Result<()> {
        if q.len() != self.state.q.len() {
            return dim_err(format!("expected {} quantization steps, got {}", self.state.q.len(), q.len()));
        }
        self.state.q.data_mut().copy_from_slice(q.data());
        self.clamp_and_cache_q();
        Ok(())
    }

    /// `Z += dz`, touching only the event indices.
    pub fn sigma_step(&mut self, dz: &SparseEvents<f64>, counter: &mut OpCounter) -> Result<&Tensor<f64>> {
        if self.config.skip_integration {
            return config_err("sigma_step on a layer configured to skip integration");
        }
        if dz.shape() != self.state.z.shape() {
            return dim_err(format!("delta shape {:?} does not match state {:?}", dz.shape(), self.state.z.shape()));
        }
        let z = self.state.z.data_mut();
        for &(i, v) in dz.entries() {
            z[i] += v;
        }
        counter.adds_state += dz.nnz() as u64;
        self.state.t += 1;
        Ok(&self.state.z)
    }

    /// Quantized activation of `z` under this layer's steps.
    pub fn quantize(&self, z: &[f64]) -> Vec<f64> {
        let f = self.config.activation;
        z.iter()
            .enumerate()
            .map(|(i, &v)| {
                (f.apply(v) / self.steps[self.grouping.group_of(i)]).round() * self.steps[self.grouping.group_of(i)]
            })
            .collect()
    }

    /// Quantize then max-pool, without touching the state.
    pub fn activate(&self, z: &[f64]) -> Result<Tensor<f64>> {
        let a = self.quantize(z);
        let z_shape = self.state.z.shape();
        match self.config.max_pool {
            None => Tensor::new(z_shape.to_vec(), a),
            Some(k) => {
                let p = max_pool_with_argmax(&a, z_shape, k)?;
                Tensor::new(p.shape, p.values)
            }
        }
    }

    /// Emits `o - O_prev` and stores `o`.
    pub fn delta_step(&mut self, o: Tensor<f64>) -> Result<SparseEvents<f64>> {
        if self.config.skip_differentiation {
            return config_err("delta_step on a layer configured to skip differentiation");
        }
        let events = crate::tensor::difference(&o, &self.state.o_prev)?;
        self.state.o_prev = o;
        Ok(events)
    }

    /// One time step: sigma (unless skipped), quantized activation, pooling,
    /// delta (unless skipped). `input` carries pre-activation deltas when the
    /// layer integrates and the full pre-activation otherwise.
    pub fn layer_forward(&mut self, input: Signal<f64>, counter: &mut OpCounter) -> Result<Signal<f64>> {
        match (input, self.config.skip_integration) {
            (Signal::Delta(dz), false) => {
                self.sigma_step(&dz, counter)?;
            }
            (Signal::Dense(z), true) => {
                if z.shape() != self.state.z.shape() {
                    return dim_err(format!(
                        "input shape {:?} does not match state {:?}",
                        z.shape(),
                        self.state.z.shape()
                    ));
                }
                self.state.z = z;
                self.state.t += 1;
            }
            (Signal::Delta(_), true) => {
                return config_err("layer skips integration but received deltas");
            }
            (Signal::Dense(_), false) => {
                return config_err("layer integrates deltas but received a dense tensor");
            }
        }
        let o = self.activate(self.state.z.data())?;
        if self.config.skip_differentiation {
            self.state.o_prev = o.clone();
            Ok(Signal::Dense(o))
        } else {
            Ok(Signal::Delta(self.delta_step(o)?))
        }
    }
}
