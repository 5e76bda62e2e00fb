use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    backward, fanout_sparsity_factors, forward_record, sgd_step, Example, ForwardOptions, GradOptions, QSurrogate,
};
use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::network::{InferenceSession, Mode, NetworkSpec, ParamSet};
use crate::ops::OpCounter;

/// How the per-layer sparsity factors are set before training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaSetting {
    /// Use the factors already in the spec.
    Keep,
    /// Fan-out factors with the given base.
    Fixed { base: f64 },
    /// Fan-out factors with the base chosen so that at initialisation the
    /// weighted sparsity loss is `ratio` times the accuracy loss.
    Calibrated { ratio: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: LambdaSetting,
    #[serde(default)]
    pub surrogate: QSurrogate,
    /// Multiplies the learning rate for q. The q gradient sums over every
    /// neuron sharing the step, so at full rate it swamps the small q.
    #[serde(default = "unit")]
    pub q_lr_scale: f64,
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            batch_size: 10,
            lambda: LambdaSetting::Keep,
            surrogate: QSurrogate::Reciprocal,
            q_lr_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sequence-level training accuracy seen during the epoch.
    pub accuracy: f64,
    pub accuracy_loss: f64,
    /// Unweighted sum of the per-layer sparsity losses.
    pub sparsity_loss_total: f64,
    /// Mean q per layer at the end of the epoch; `None` without q.
    pub mean_q: Vec<Option<f64>>,
    /// Wired-mode operation sparsity per layer during the epoch.
    pub op_sparsity: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// The input spec with the sparsity factors used.
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
    pub base_lambda: Option<f64>,
}

/// Sets `lambda_l = base * fan-out_l` on every layer with an activation.
pub fn assign_sparsity_factors(spec: &mut NetworkSpec, base: f64) -> Result<()> {
    let lambdas = fanout_sparsity_factors(spec, base)?;
    for (layer, l) in spec.layers.iter_mut().zip(lambdas) {
        layer.set_sparsity_factor(l as f32);
    }
    Ok(())
}

/// Base factor making the fan-out weighted sparsity loss `ratio` times the
/// accuracy loss on `batch` at the given parameters.
pub fn calibrate_base_lambda(spec: &NetworkSpec, params: &ParamSet, batch: &[Example<'_>], ratio: f64) -> Result<f64> {
    let mut probe = spec.clone();
    assign_sparsity_factors(&mut probe, 1.0)?;
    let (fwd, _) = forward_record(&probe, params, batch, ForwardOptions::default())?;
    let weighted = fwd.loss.weighted_sparsity();
    Ok(if weighted > 0.0 { ratio * fwd.loss.accuracy_loss / weighted } else { 0.0 })
}

fn examples(data: &[(FrameSequence, usize)]) -> Vec<Example<'_>> {
    data.iter().map(|(s, l)| Example { frames: s.frames(), label: *l }).collect()
}

fn mean_q(params: &ParamSet) -> Vec<Option<f64>> {
    params
        .layers
        .iter()
        .map(|l| l.q.as_ref().map(|q| q.data().iter().map(|&v| v as f64).sum::<f64>() / q.len() as f64))
        .collect()
}

/// Mini-batch SGD over `data` for `cfg.epochs` epochs. The example order
/// is reshuffled every epoch from the seed; with the same inputs the
/// result is bit-identical.
pub fn train(
    spec: &NetworkSpec,
    params: &ParamSet,
    data: &[(FrameSequence, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(cfg.q_lr_scale > 0.0) || !cfg.q_lr_scale.is_finite() {
        return Err(Error::Config(format!("q learning-rate scale must be positive, got {}", cfg.q_lr_scale)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    params.check(spec)?;
    let mut spec = spec.clone();
    let mut params = params.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { spec, params, log: Vec::new(), base_lambda: None });
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let all = examples(data);
    let base_lambda = match cfg.lambda {
        LambdaSetting::Keep => None,
        LambdaSetting::Fixed { base } => Some(base),
        LambdaSetting::Calibrated { ratio } => {
            let n = cfg.batch_size.min(all.len());
            Some(calibrate_base_lambda(&spec, &params, &all[..n], ratio)?)
        }
    };
    if let Some(b) = base_lambda {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::Config(format!("base sparsity factor must be finite and nonnegative, got {b}")));
        }
        assign_sparsity_factors(&mut spec, b)?;
    }
    let gopts = GradOptions { surrogate: cfg.surrogate, accuracy_weight: 1.0 };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..all.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let (mut acc_loss, mut sp_loss, mut frames) = (0.0, 0.0, 0usize);
        let mut counters = vec![OpCounter::default(); spec.layers.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| all[i]).collect();
            let (fwd, tape) = forward_record(&spec, &params, &batch, ForwardOptions::default())?;
            if !fwd.loss.total.is_finite() {
                return Err(Error::Divergence { epoch, message: format!("loss became {}", fwd.loss.total) });
            }
            let mut grads = backward(&spec, &params, &tape, gopts)?;
            if cfg.q_lr_scale != 1.0 {
                for q in grads.layers.iter_mut().filter_map(|g| g.q.as_mut()) {
                    q.data_mut().iter_mut().for_each(|v| *v *= cfg.q_lr_scale);
                }
            }
            params = sgd_step(&spec, &params, &grads, cfg.lr)?;
            if !params.all_finite() {
                return Err(Error::Divergence { epoch, message: "parameters became non-finite".into() });
            }
            let n = tape.frames();
            frames += n;
            acc_loss += fwd.loss.accuracy_loss * n as f64;
            sp_loss += fwd.loss.sparsity_losses.iter().sum::<f64>() * n as f64;
            correct += fwd.sequence_predictions.iter().zip(&batch).filter(|(p, e)| **p == e.label).count();
            counters.iter_mut().zip(&fwd.counters).for_each(|(a, b)| a.merge(b));
        }
        log.push(EpochLog {
            epoch,
            accuracy: correct as f64 / all.len() as f64,
            accuracy_loss: acc_loss / frames as f64,
            sparsity_loss_total: sp_loss / frames as f64,
            mean_q: mean_q(&params),
            op_sparsity: counters.iter().map(|c| c.operation_sparsity().ok()).collect(),
        });
    }
    Ok(TrainOutcome { spec, params, log, base_lambda })
}

pub fn write_training_log<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "accuracy",
        "accuracy_loss",
        "sparsity_loss_total",
        "mean_q_per_layer",
        "op_sparsity_per_layer",
    ])?;
    let join = |v: &[Option<f64>]| {
        v.iter().map(|x| x.map(|x| format!("{x:.6}")).unwrap_or_default()).collect::<Vec<_>>().join(";")
    };
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.accuracy),
            format!("{:.6}", e.accuracy_loss),
            format!("{:.6}", e.sparsity_loss_total),
            join(&e.mean_q),
            join(&e.op_sparsity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub frames: u64,
    /// Sequence-level accuracy from frame-averaged class probabilities.
    pub accuracy: f64,
    /// Over all layers and frames, in the network's natural mode.
    pub operation_sparsity: f64,
    /// Zero fraction of the hidden layers' emitted signals.
    pub activation_sparsity: f64,
    pub per_layer_operation_sparsity: Vec<Option<f64>>,
}

/// Runs every sequence through a fresh session in the network's natural
/// mode (delta when fully delta, hybrid otherwise).
pub fn evaluate(spec: &NetworkSpec, params: &ParamSet, data: &[(FrameSequence, usize)]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let mode = Mode::natural_for(spec);
    let hidden = spec.hidden_layer_count();
    let parts = data
        .par_iter()
        .map(|(seq, label)| {
            let mut s = InferenceSession::new(spec, params, mode)?;
            let mut mean = vec![0.0; spec.num_classes()];
            for f in seq.frames() {
                let scores = s.step(f)?;
                let p = super::softmax(scores.data());
                mean.iter_mut().zip(&p).for_each(|(m, p)| *m += p);
            }
            let ok = super::argmax(&mean) == *label;
            let (nz, entries) =
                s.activity()[..hidden].iter().fold((0u64, 0u64), |(n, e), a| (n + a.nonzeros, e + a.entries));
            Ok((ok, s.counters().to_vec(), nz, entries, s.t()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counters = vec![OpCounter::default(); spec.layers.len()];
    let (mut correct, mut nz, mut entries, mut frames) = (0usize, 0u64, 0u64, 0u64);
    for (ok, c, n, e, t) in &parts {
        correct += *ok as usize;
        counters.iter_mut().zip(c).for_each(|(a, b)| a.merge(b));
        nz += n;
        entries += e;
        frames += t;
    }
    let mut total = OpCounter::default();
    counters.iter().for_each(|c| total.merge(c));
    Ok(EvalReport {
        sequences: data.len(),
        frames,
        accuracy: correct as f64 / data.len() as f64,
        operation_sparsity: total.operation_sparsity()?,
        activation_sparsity: if entries == 0 { 0.0 } else { 1.0 - nz as f64 / entries as f64 },
        per_layer_operation_sparsity: counters.iter().map(|c| c.operation_sparsity().ok()).collect(),
    })
}
