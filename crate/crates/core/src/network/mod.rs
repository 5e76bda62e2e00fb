//! Network description, shape planning and wiring rules.

mod measure;
mod session;

pub use measure::{
    compare_modes, frame_rate_experiment, memory_overhead_estimate, operation_sparsity, per_layer_report,
    per_layer_report_over, write_frame_rate_csv, write_per_layer_csv, EquivalenceReport, FrameRateRow, LayerReportRow,
    MemoryEstimate, MemorySheet, ModeComparison, EQUIVALENCE_TOLERANCE,
};
pub use session::{
    infer_delta, infer_hybrid, infer_normal, Activity, InferenceSession, LayerTrace, Mode, SessionSnapshot, StepTrace,
};

use serde::{Deserialize, Serialize};

use crate::activation::ActivationFn;
use crate::delta::{broadcast_bias, pooled_shape, DeltaLayerConfig};
use crate::error::{config_err, Result};
use crate::ops::{LinearOp, OpGeometry};
use crate::tensor::{num_elements, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OpSpec {
    Dense { units: usize },
    Conv2d { kernel: [usize; 2], filters: usize, stride: usize },
    AvgPool { window: usize },
}

/// Stateless activation, optionally max-pooled and L1-penalised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainActivation {
    pub function: ActivationFn,
    #[serde(default)]
    pub max_pool: Option<usize>,
    #[serde(default)]
    pub sparsity_factor: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActivationSpec {
    /// No activation; used after average pooling. Keeps the signal kind.
    Passthrough,
    Plain(PlainActivation),
    Delta(DeltaLayerConfig),
    /// Class scores of the final dense layer, never quantized.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: OpSpec,
    pub activation: ActivationSpec,
}

impl LayerSpec {
    pub fn sparsity_factor(&self) -> f32 {
        match &self.activation {
            ActivationSpec::Plain(p) => p.sparsity_factor,
            ActivationSpec::Delta(c) => c.sparsity_factor,
            _ => 0.0,
        }
    }

    pub fn set_sparsity_factor(&mut self, lambda: f32) {
        match &mut self.activation {
            ActivationSpec::Plain(p) => p.sparsity_factor = lambda,
            ActivationSpec::Delta(c) => c.sparsity_factor = lambda,
            _ => {}
        }
    }

    pub fn delta_config(&self) -> Option<&DeltaLayerConfig> {
        match &self.activation {
            ActivationSpec::Delta(c) => Some(c),
            _ => None,
        }
    }

    fn max_pool(&self) -> Option<usize> {
        match &self.activation {
            ActivationSpec::Plain(p) => p.max_pool,
            ActivationSpec::Delta(c) => c.max_pool,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[h, w, c]` of one frame.
    pub input_shape: Vec<usize>,
    /// Feed the first layer with frame differences instead of frames.
    #[serde(default)]
    pub input_delta: bool,
    pub layers: Vec<LayerSpec>,
}

/// Shapes and geometry of one layer.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub geometry: OpGeometry,
    pub weight_shape: Option<Vec<usize>>,
    pub bias_shape: Option<Vec<usize>>,
    /// Pre-activation shape (linear op output).
    pub z_shape: Vec<usize>,
    /// Emitted shape after any max pooling.
    pub out_shape: Vec<usize>,
    pub q_groups: Option<usize>,
    /// Whether the layer receives deltas when the network runs wired.
    pub input_is_delta: bool,
    /// Whether the layer emits deltas when the network runs wired.
    pub emits_delta: bool,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub layers: Vec<LayerPlan>,
}

impl NetworkSpec {
    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| &l.op) {
            Some(OpSpec::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Checks shapes and wiring and resolves every layer's geometry.
    ///
    /// Wiring: a layer that integrates must receive deltas, a layer that
    /// does not must receive dense input; plain activations need dense
    /// input; average pooling passes its input kind through.
    pub fn plan(&self) -> Result<Plan> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return config_err(format!("input shape must be [h, w, c], got {:?}", self.input_shape));
        }
        let Some(last) = self.layers.last() else {
            return config_err("network has no layers");
        };
        if !matches!((&last.op, &last.activation), (OpSpec::Dense { .. }, ActivationSpec::Output)) {
            return config_err("the last layer must be a dense output layer");
        }
        let mut shape = self.input_shape.clone();
        let mut delta = self.input_delta;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let is_last = i + 1 == self.layers.len();
            if matches!(layer.activation, ActivationSpec::Output) && !is_last {
                return config_err(format!("layer {i}: output activation only allowed last"));
            }
            let (op, weight_shape, bias_shape) = match layer.op {
                OpSpec::Dense { units } => {
                    let n = num_elements(&shape);
                    (LinearOp::Dense, Some(vec![units, n]), Some(vec![units]))
                }
                OpSpec::Conv2d { kernel, filters, stride } => {
                    let cin = shape.get(2).copied().unwrap_or(0);
                    (LinearOp::Conv2d { stride }, Some(vec![kernel[0], kernel[1], cin, filters]), Some(vec![filters]))
                }
                OpSpec::AvgPool { window } => (LinearOp::AvgPool { window }, None, None),
            };
            if weight_shape.as_ref().is_some_and(|w| w.contains(&0)) {
                return config_err(format!("layer {i}: zero-sized weights"));
            }
            let geometry = OpGeometry::new(op, weight_shape.as_deref(), &shape)
                .map_err(|e| crate::Error::Config(format!("layer {i}: {e}")))?;
            let z_shape = geometry.out_shape().to_vec();
            let is_pool = matches!(layer.op, OpSpec::AvgPool { .. });
            let is_passthrough = matches!(layer.activation, ActivationSpec::Passthrough);
            if is_pool != is_passthrough {
                return config_err(format!(
                    "layer {i}: average pooling pairs with a passthrough activation and only with it"
                ));
            }
            let out_shape = pooled_shape(&z_shape, layer.max_pool())
                .map_err(|e| crate::Error::Config(format!("layer {i}: {e}")))?;
            let input_is_delta = delta;
            let (emits_delta, q_groups) = match &layer.activation {
                ActivationSpec::Passthrough => (delta, None),
                ActivationSpec::Output => (false, None),
                ActivationSpec::Plain(_) => {
                    if delta {
                        return config_err(format!(
                            "layer {i}: plain activation fed with deltas; insert a sigma-only layer before it"
                        ));
                    }
                    (false, None)
                }
                ActivationSpec::Delta(cfg) => {
                    cfg.validate()?;
                    if cfg.integrates() != delta {
                        return config_err(format!(
                            "layer {i}: {} but receives {}",
                            if cfg.integrates() { "integrates" } else { "skips integration" },
                            if delta { "deltas" } else { "dense input" }
                        ));
                    }
                    (cfg.differentiates(), Some(cfg.quant_mode.group_count(&z_shape)))
                }
            };
            delta = emits_delta;
            layers.push(LayerPlan {
                geometry,
                weight_shape,
                bias_shape,
                z_shape,
                out_shape: out_shape.clone(),
                q_groups,
                input_is_delta,
                emits_delta,
            });
            shape = out_shape;
        }
        Ok(Plan { layers })
    }

    /// Every hidden weighted layer is a full sigma-delta layer and the
    /// input is differenced.
    pub fn is_full_delta(&self) -> bool {
        self.input_delta
            && self.layers.iter().all(|l| match &l.activation {
                ActivationSpec::Delta(c) => c.is_full(),
                ActivationSpec::Passthrough | ActivationSpec::Output => true,
                ActivationSpec::Plain(_) => false,
            })
    }

    pub fn has_delta_layers(&self) -> bool {
        self.layers.iter().any(|l| l.delta_config().is_some())
    }

    /// Number of weighted layers before the output layer.
    pub fn hidden_layer_count(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }
}

/// Trainable values of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub q: Option<Tensor>,
}

/// Weights, biases and quantization steps of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    /// He-uniform weights, zero biases, `q = q_init`.
    pub fn init(spec: &NetworkSpec, rng: &mut impl rand::Rng) -> Result<Self> {
        let plan = spec.plan()?;
        let layers = spec
            .layers
            .iter()
            .zip(&plan.layers)
            .map(|(layer, lp)| {
                let weight = lp.weight_shape.as_ref().map(|shape| {
                    let fan_in = lp.geometry.weight_len() / lp.geometry.out_shape().last().copied().unwrap_or(1);
                    let fan_in = match layer.op {
                        OpSpec::Dense { .. } => shape[1],
                        _ => fan_in,
                    };
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                    let data = (0..num_elements(shape)).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape.clone(), data).expect("planned shape")
                });
                let bias = lp.bias_shape.as_ref().map(|s| Tensor::zeros(s));
                let q = match (&layer.activation, lp.q_groups) {
                    (ActivationSpec::Delta(cfg), Some(g)) => Some(Tensor::full(&[g], cfg.q_init)),
                    _ => None,
                };
                LayerParams { weight, bias, q }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Checks every tensor against the plan.
    pub fn check(&self, spec: &NetworkSpec) -> Result<Plan> {
        let plan = spec.plan()?;
        if self.layers.len() != plan.layers.len() {
            return config_err(format!("{} parameter groups for {} layers", self.layers.len(), plan.layers.len()));
        }
        for (i, (p, lp)) in self.layers.iter().zip(&plan.layers).enumerate() {
            let ok = |t: &Option<Tensor>, s: &Option<Vec<usize>>| match (t, s) {
                (None, None) => true,
                (Some(t), Some(s)) => t.shape() == s.as_slice(),
                _ => false,
            };
            if !ok(&p.weight, &lp.weight_shape) || !ok(&p.bias, &lp.bias_shape) {
                return config_err(format!("layer {i}: weight or bias shape mismatch"));
            }
            if !ok(&p.q, &lp.q_groups.map(|g| vec![g])) {
                return config_err(format!("layer {i}: quantization step tensor missing or misshaped"));
            }
            if let Some(q) = &p.q {
                if q.data().iter().any(|&v| !(v > 0.0)) {
                    return config_err(format!("layer {i}: nonpositive quantization step"));
                }
            }
        }
        Ok(plan)
    }

    pub(crate) fn bias_state(&self, layer: usize, plan: &LayerPlan) -> Result<Option<Vec<f64>>> {
        self.layers[layer].bias.as_ref().map(|b| broadcast_bias(b, &plan.z_shape).map(|t| t.into_data())).transpose()
    }

    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_ref().map_or(0, |t| t.len()) + l.bias.as_ref().map_or(0, |t| t.len()))
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| [&l.weight, &l.bias, &l.q].into_iter().flatten().all(|t| t.all_finite()))
    }
}
