//! Training: total loss (cross-entropy plus per-layer L1 sparsity), the
//! straight-through estimator for the quantizer, the surrogate gradient
//! of the quantization step, SGD and the fan-out rule for sparsity factors.
//!
//! The recorded forward pass runs the network as the wired session would
//! see it, frame by frame, but keeps every layer's dense values. Neuron
//! states depend only on the current frame (`Z(t) = B + g(X(t))`), so the
//! per-frame gradients are exact and no gradient crosses time except the
//! sparsity term, which couples consecutive outputs through `O(t) - O(t-1)`.

mod loop_;

pub use loop_::{
    assign_sparsity_factors, calibrate_base_lambda, evaluate, train, write_training_log, EpochLog, EvalReport,
    LambdaSetting, TrainConfig, TrainOutcome,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{max_pool_with_argmax, step_value, ActivationFn, Grouping};
use crate::error::{Error, Result};
use crate::network::{ActivationSpec, LayerPlan, NetworkSpec, OpSpec, ParamSet, Plan};
use crate::ops::{OpCounter, OpGeometry};
use crate::tensor::Tensor;

/// Which surrogate turns a layer's sparsity loss into a q gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSurrogate {
    /// `-lambda * L / q`: the `-f_q / q` surrogate applied to the layer's
    /// own L1 term.
    #[default]
    Reciprocal,
    /// `-lambda * L`.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// When false, delta layers apply `f(Z)` without rounding, giving a
    /// smooth loss for gradient checks.
    pub quantize: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { quantize: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradOptions {
    pub surrogate: QSurrogate,
    /// Scales the cross-entropy gradient; 0 isolates the sparsity terms.
    pub accuracy_weight: f64,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self { surrogate: QSurrogate::Reciprocal, accuracy_weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub accuracy_loss: f64,
    /// Per layer, L1 of the emitted signal per frame; 0 for layers without
    /// an activation.
    pub sparsity_losses: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sparsity(&self) -> f64 {
        self.lambdas.iter().zip(&self.sparsity_losses).map(|(l, s)| l * s).sum()
    }
}

/// Gradient of one layer's parameters, shaped like them.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Option<Tensor<f64>>,
    pub bias: Option<Tensor<f64>>,
    pub q: Option<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub layers: Vec<LayerGrads>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let z = |t: &Option<Tensor>| t.as_ref().map(|t| Tensor::<f64>::zeros(t.shape()));
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads { weight: z(&l.weight), bias: z(&l.bias), q: z(&l.q) })
                .collect(),
        }
    }

    fn add(&mut self, other: &GradSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in [(&mut a.weight, &b.weight), (&mut a.bias, &b.bias), (&mut a.q, &b.q)] {
                if let (Some(x), Some(y)) = (x.as_mut(), y.as_ref()) {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| [&l.weight, &l.bias, &l.q].into_iter().flatten().all(|t| t.all_finite()))
    }
}

struct LayerTape {
    z: Vec<f64>,
    /// Activation before pooling (quantized for delta layers).
    a: Vec<f64>,
    argmax: Option<Vec<usize>>,
    out: Vec<f64>,
}

struct FrameTape {
    input: Vec<f64>,
    layers: Vec<LayerTape>,
    probs: Vec<f64>,
}

struct SeqTape {
    label: usize,
    frames: Vec<FrameTape>,
}

/// What [`backward`] needs from a recorded forward pass.
pub struct Tape {
    plan: Plan,
    seqs: Vec<SeqTape>,
    frames_total: usize,
    lambdas: Vec<f64>,
    /// Per layer and q group, the group's share of the sparsity loss.
    group_l1: Vec<Vec<f64>>,
}

impl Tape {
    pub fn frames(&self) -> usize {
        self.frames_total
    }
}

/// Per-batch results of [`forward_record`] other than the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    /// Predicted class per sequence and frame.
    pub frame_predictions: Vec<Vec<usize>>,
    /// Predicted class per sequence from the frame-averaged probabilities.
    pub sequence_predictions: Vec<usize>,
    pub loss: LossBreakdown,
    /// Wired-mode operation counts per layer.
    pub counters: Vec<OpCounter>,
}

/// One labelled training example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub frames: &'a [Tensor],
    pub label: usize,
}

struct LayerCtx<'a> {
    geometry: &'a OpGeometry,
    weight: &'a [f32],
    bias: Option<Vec<f64>>,
    act: Act,
    pool: Option<usize>,
    z_shape: &'a [usize],
}

#[derive(Clone)]
enum Act {
    None,
    Plain(ActivationFn),
    Delta { f: ActivationFn, steps: Vec<f64>, grouping: Grouping },
}

impl Act {
    fn has_activation(&self) -> bool {
        !matches!(self, Act::None)
    }
}

fn contexts<'a>(spec: &NetworkSpec, params: &'a ParamSet, plan: &'a Plan) -> Result<Vec<LayerCtx<'a>>> {
    spec.layers
        .iter()
        .zip(&plan.layers)
        .enumerate()
        .map(|(i, (layer, lp))| {
            let p = &params.layers[i];
            let (act, pool) = match &layer.activation {
                ActivationSpec::Plain(a) => (Act::Plain(a.function), a.max_pool),
                ActivationSpec::Delta(c) => {
                    let q = p.q.as_ref().ok_or_else(|| Error::Config(format!("layer {i}: missing q")))?;
                    let steps = q.data().iter().map(|&v| step_value(v.max(c.q_min))).collect();
                    (Act::Delta { f: c.activation, steps, grouping: c.quant_mode.grouping(&lp.z_shape) }, c.max_pool)
                }
                _ => (Act::None, None),
            };
            Ok(LayerCtx {
                geometry: &lp.geometry,
                weight: p.weight.as_ref().map(|w| w.data()).unwrap_or(&[]),
                bias: params.bias_state(i, lp)?,
                act,
                pool,
                z_shape: &lp.z_shape,
            })
        })
        .collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn forward_frame(ctx: &[LayerCtx<'_>], frame: &Tensor, opts: ForwardOptions) -> Result<FrameTape> {
    let input: Vec<f64> = frame.data().iter().map(|&v| v as f64).collect();
    let mut layers: Vec<LayerTape> = Vec::with_capacity(ctx.len());
    let mut scratch = OpCounter::default();
    for c in ctx {
        let x = layers.last().map_or(input.as_slice(), |l| l.out.as_slice());
        let mut z = vec![0.0; c.geometry.out_len()];
        c.geometry.accumulate_dense(c.weight, x, &mut z, &mut scratch)?;
        if let Some(b) = &c.bias {
            z.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let a: Vec<f64> = match &c.act {
            Act::None => z.clone(),
            Act::Plain(f) => z.iter().map(|&v| f.apply(v)).collect(),
            Act::Delta { f, steps, grouping } => z
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if opts.quantize {
                        let s = steps[grouping.group_of(i)];
                        (f.apply(v) / s).round() * s
                    } else {
                        f.apply(v)
                    }
                })
                .collect(),
        };
        let (out, am) = match c.pool {
            Some(k) => {
                let p = max_pool_with_argmax(&a, c.z_shape, k)?;
                (p.values, Some(p.argmax))
            }
            None => (a.clone(), None),
        };
        layers.push(LayerTape { z, a, argmax: am, out });
    }
    let probs = softmax(&layers.last().expect("at least one layer").out);
    Ok(FrameTape { input, layers, probs })
}

fn count_ops(plan: &Plan, seq: &SeqTape, counters: &mut [OpCounter]) {
    for (l, lp) in plan.layers.iter().enumerate() {
        let c = &mut counters[l];
        let mut prev: Option<&[f64]> = None;
        for f in &seq.frames {
            let x = if l == 0 { &f.input } else { &f.layers[l - 1].out };
            c.macs_total += lp.geometry.total_macs();
            for (i, &v) in x.iter().enumerate() {
                let e = match (lp.input_is_delta, prev) {
                    (true, Some(p)) => v - p[i],
                    _ => v,
                };
                if e != 0.0 {
                    c.macs_nonzero += lp.geometry.fanout_at(i);
                }
            }
            prev = Some(x);
        }
    }
}

/// Emitted signal of layer `l` at frame `t`: the output difference for
/// delta-emitting layers, the output itself otherwise.
fn emitted(lp: &LayerPlan, seq: &SeqTape, l: usize, t: usize, i: usize) -> f64 {
    let o = seq.frames[t].layers[l].out[i];
    match (lp.emits_delta, t) {
        (true, 0) | (false, _) => o,
        (true, _) => o - seq.frames[t - 1].layers[l].out[i],
    }
}

/// Runs every sequence of the batch through the network, recording what
/// the backward pass needs. Losses are averaged over all frames.
pub fn forward_record(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &[Example<'_>],
    opts: ForwardOptions,
) -> Result<(ForwardResult, Tape)> {
    let plan = params.check(spec)?;
    let Some(first) = batch.first() else {
        return Err(Error::Domain("empty batch".into()));
    };
    let t_len = first.frames.len();
    if t_len == 0 || batch.iter().any(|e| e.frames.len() != t_len) {
        return Err(Error::Dimension("batch sequences must share a positive length".into()));
    }
    let classes = spec.num_classes();
    if let Some(e) = batch.iter().find(|e| e.label >= classes) {
        return Err(Error::Domain(format!("label {} out of range for {classes} classes", e.label)));
    }
    let ctx = contexts(spec, params, &plan)?;
    let seqs = batch
        .par_iter()
        .map(|ex| {
            let frames = ex.frames.iter().map(|f| forward_frame(&ctx, f, opts)).collect::<Result<Vec<_>>>()?;
            Ok(SeqTape { label: ex.label, frames })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = (batch.len() * t_len) as f64;
    let lambdas: Vec<f64> = spec.layers.iter().map(|l| l.sparsity_factor() as f64).collect();
    let mut accuracy_loss = 0.0;
    let mut sparsity = vec![0.0; plan.layers.len()];
    let mut group_l1: Vec<Vec<f64>> = plan.layers.iter().map(|lp| vec![0.0; lp.q_groups.unwrap_or(0)]).collect();
    let mut counters = vec![OpCounter::default(); plan.layers.len()];
    let mut frame_predictions = Vec::with_capacity(seqs.len());
    let mut sequence_predictions = Vec::with_capacity(seqs.len());
    for seq in &seqs {
        let mut mean = vec![0.0; classes];
        let mut preds = Vec::with_capacity(t_len);
        for f in &seq.frames {
            accuracy_loss -= f.probs[seq.label].max(f64::MIN_POSITIVE).ln();
            mean.iter_mut().zip(&f.probs).for_each(|(m, p)| *m += p);
            preds.push(argmax(&f.probs));
        }
        frame_predictions.push(preds);
        sequence_predictions.push(argmax(&mean));
        for (l, lp) in plan.layers.iter().enumerate() {
            if !ctx[l].act.has_activation() {
                continue;
            }
            let grouping = match &ctx[l].act {
                Act::Delta { grouping, .. } => Some(*grouping),
                _ => None,
            };
            for t in 0..t_len {
                let tape = &seq.frames[t].layers[l];
                for i in 0..tape.out.len() {
                    let e = emitted(lp, seq, l, t, i).abs();
                    sparsity[l] += e;
                    if let Some(g) = grouping {
                        let pre = tape.argmax.as_ref().map_or(i, |am| am[i]);
                        group_l1[l][g.group_of(pre)] += e;
                    }
                }
            }
        }
        count_ops(&plan, seq, &mut counters);
    }
    accuracy_loss /= n;
    sparsity.iter_mut().for_each(|s| *s /= n);
    group_l1.iter_mut().flatten().for_each(|s| *s /= n);
    let mut loss = LossBreakdown { accuracy_loss, sparsity_losses: sparsity, lambdas: lambdas.clone(), total: 0.0 };
    loss.total = accuracy_loss + loss.weighted_sparsity();
    let tape = Tape { plan, seqs, frames_total: batch.len() * t_len, lambdas, group_l1 };
    Ok((ForwardResult { frame_predictions, sequence_predictions, loss, counters }, tape))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_bias_grad(grad: &mut [f64], gz: &[f64]) {
    let c = grad.len();
    for (i, g) in gz.iter().enumerate() {
        grad[i % c] += g;
    }
}

fn backward_seq(
    ctx: &[LayerCtx<'_>],
    tape: &Tape,
    seq: &SeqTape,
    params: &ParamSet,
    opts: GradOptions,
) -> Result<GradSet> {
    let plan = &tape.plan;
    let n = tape.frames_total as f64;
    let mut grads = GradSet::zeros_like(params);
    let layers = ctx.len();
    // the accuracy-only stream only has to reach the lowest q layer
    let low_q = (0..layers).find(|&l| matches!(ctx[l].act, Act::Delta { .. }));
    for t in 0..seq.frames.len() {
        let frame = &seq.frames[t];
        let mut g_acc: Vec<f64> = frame
            .probs
            .iter()
            .enumerate()
            .map(|(k, &p)| opts.accuracy_weight * (p - if k == seq.label { 1.0 } else { 0.0 }) / n)
            .collect();
        let mut g_tot = g_acc.clone();
        for l in (0..layers).rev() {
            let c = &ctx[l];
            let lt = &frame.layers[l];
            let lp = &plan.layers[l];
            let lambda = tape.lambdas[l];
            if c.act.has_activation() && lambda > 0.0 {
                let k = lambda / n;
                for (i, g) in g_tot.iter_mut().enumerate() {
                    *g += if lp.emits_delta {
                        let next = seq.frames.get(t + 1).map_or(0.0, |_| emitted(lp, seq, l, t + 1, i));
                        k * (sign(emitted(lp, seq, l, t, i)) - sign(next))
                    } else {
                        k * sign(lt.out[i])
                    };
                }
            }
            let unpool = |g: &[f64]| -> Vec<f64> {
                match &lt.argmax {
                    Some(am) => {
                        let mut ga = vec![0.0; lt.a.len()];
                        am.iter().zip(g).for_each(|(&j, &v)| ga[j] += v);
                        ga
                    }
                    None => g.to_vec(),
                }
            };
            let need_acc = low_q.is_some_and(|q| l >= q);
            let (ga_tot, ga_acc) = (unpool(&g_tot), if need_acc { unpool(&g_acc) } else { Vec::new() });
            let (gz_tot, gz_acc): (Vec<f64>, Vec<f64>) = match &c.act {
                Act::None => (ga_tot, ga_acc),
                Act::Plain(f) => {
                    let d: Vec<f64> = lt.z.iter().map(|&z| f.derivative(z)).collect();
                    (
                        ga_tot.iter().zip(&d).map(|(g, d)| g * d).collect(),
                        ga_acc.iter().zip(&d).map(|(g, d)| g * d).collect(),
                    )
                }
                Act::Delta { f, steps, grouping } => {
                    let gq = grads.layers[l].q.as_mut().expect("delta layer has q").data_mut();
                    for (i, (&g, &a)) in ga_acc.iter().zip(&lt.a).enumerate() {
                        let j = grouping.group_of(i);
                        gq[j] -= g * a / steps[j];
                    }
                    let d: Vec<f64> = lt.z.iter().map(|&z| f.derivative(z)).collect();
                    (
                        ga_tot.iter().zip(&d).map(|(g, d)| g * d).collect(),
                        ga_acc.iter().zip(&d).map(|(g, d)| g * d).collect(),
                    )
                }
            };
            let x = if l == 0 { &frame.input } else { &frame.layers[l - 1].out };
            let lg = &mut grads.layers[l];
            if let Some(b) = lg.bias.as_mut() {
                add_bias_grad(b.data_mut(), &gz_tot);
            }
            let mut scratch = Vec::new();
            let gw = match lg.weight.as_mut() {
                Some(w) => w.data_mut(),
                None => &mut scratch[..],
            };
            let gx = c.geometry.backward(c.weight, x, &gz_tot, gw)?;
            if l == 0 {
                break;
            }
            if low_q.is_some_and(|q| l > q) {
                let mut discard = vec![0.0; c.weight.len()];
                g_acc = c.geometry.backward(c.weight, x, &gz_acc, &mut discard)?;
            }
            g_tot = gx;
        }
    }
    Ok(grads)
}

/// Gradients of the recorded total loss. W and B follow the
/// straight-through estimator; q receives the `-f_q / q` surrogate on the
/// cross-entropy gradient plus its own layer's sparsity term.
pub fn backward(spec: &NetworkSpec, params: &ParamSet, tape: &Tape, opts: GradOptions) -> Result<GradSet> {
    if tape.seqs.is_empty() {
        return Err(Error::Usage("backward called without a recorded forward pass".into()));
    }
    let plan = params.check(spec)?;
    if plan.layers.len() != tape.plan.layers.len() {
        return Err(Error::Usage("tape was recorded for a different network".into()));
    }
    let ctx = contexts(spec, params, &plan)?;
    let parts =
        tape.seqs.par_iter().map(|seq| backward_seq(&ctx, tape, seq, params, opts)).collect::<Result<Vec<_>>>()?;
    let mut grads = GradSet::zeros_like(params);
    for p in &parts {
        grads.add(p);
    }
    for (l, c) in ctx.iter().enumerate() {
        if let Act::Delta { steps, .. } = &c.act {
            let lambda = tape.lambdas[l];
            let gq = grads.layers[l].q.as_mut().expect("delta layer has q").data_mut();
            for (j, g) in gq.iter_mut().enumerate() {
                let l1 = tape.group_l1[l][j];
                *g -= match opts.surrogate {
                    QSurrogate::Reciprocal => lambda * l1 / steps[j],
                    QSurrogate::Plain => lambda * l1,
                };
            }
        }
    }
    Ok(grads)
}

/// `p <- p - lr * g`, then every q is clamped at its layer's `q_min`.
pub fn sgd_step(spec: &NetworkSpec, params: &ParamSet, grads: &GradSet, lr: f64) -> Result<ParamSet> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    if grads.layers.len() != params.layers.len() {
        return Err(Error::Dimension("gradient and parameter layer counts differ".into()));
    }
    let mut out = params.clone();
    for (i, (p, g)) in out.layers.iter_mut().zip(&grads.layers).enumerate() {
        let q_min = spec.layers.get(i).and_then(|l| l.delta_config()).map(|c| c.q_min);
        for (kind, t, gt) in
            [("weight", &mut p.weight, &g.weight), ("bias", &mut p.bias, &g.bias), ("q", &mut p.q, &g.q)]
        {
            match (t.as_mut(), gt) {
                (None, None) => {}
                (Some(t), Some(gt)) if t.shape() == gt.shape() => {
                    for (v, d) in t.data_mut().iter_mut().zip(gt.data()) {
                        *v = (*v as f64 - lr * d) as f32;
                        if kind == "q" {
                            let m = q_min.unwrap_or(crate::delta::DEFAULT_Q_MIN);
                            if !(*v >= m) {
                                *v = m;
                            }
                        }
                    }
                }
                _ => return Err(Error::Dimension(format!("layer {i}: {kind} gradient shape mismatch"))),
            }
        }
    }
    Ok(out)
}

/// MACs that one nonzero output of layer `l` triggers downstream, away
/// from borders. Average pooling forwards the change to the next layer,
/// so its own MAC is added to that layer's fan-out.
pub fn downstream_fanout(spec: &NetworkSpec, l: usize) -> Result<f64> {
    let plan = spec.plan()?;
    let mut fan = 0.0;
    let mut k = l + 1;
    while let Some(next) = plan.layers.get(k) {
        fan += next.geometry.nominal_fanout();
        if !matches!(spec.layers[k].op, OpSpec::AvgPool { .. }) {
            break;
        }
        k += 1;
    }
    Ok(fan)
}

/// `lambda_l = base * fan-out` for every layer with an activation; 0 for
/// the others.
pub fn fanout_sparsity_factors(spec: &NetworkSpec, base: f64) -> Result<Vec<f64>> {
    (0..spec.layers.len())
        .map(|l| match spec.layers[l].activation {
            ActivationSpec::Plain(_) | ActivationSpec::Delta(_) => Ok(base * downstream_fanout(spec, l)?),
            _ => Ok(0.0),
        })
        .collect()
}
