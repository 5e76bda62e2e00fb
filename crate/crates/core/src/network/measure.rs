use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ActivationSpec, Activity, InferenceSession, Mode, NetworkSpec, OpSpec, ParamSet};
use crate::data::{subsample, FrameSequence};
use crate::error::{Error, Result};
use crate::ops::OpCounter;
use crate::tensor::{num_elements, Tensor};

/// Largest score difference accepted between execution modes.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-4;

/// `1 - macs_nonzero / macs_total` summed over `layers` (all when `None`).
pub fn operation_sparsity(counters: &[OpCounter], layers: Option<&[usize]>) -> Result<f64> {
    let mut sum = OpCounter::default();
    match layers {
        Some(idx) => {
            for &i in idx {
                let c = counters.get(i).ok_or_else(|| Error::Dimension(format!("no counter for layer {i}")))?;
                sum.merge(c);
            }
        }
        None => counters.iter().for_each(|c| sum.merge(c)),
    }
    sum.operation_sparsity()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReportRow {
    pub layer: usize,
    pub kind: String,
    /// Mean number of nonzero emitted values (deltas for delta-emitting
    /// layers, activations otherwise) per frame.
    pub nonzeros_per_frame: f64,
    pub activation_sparsity: f64,
    /// Sparsity of this layer's own MACs; empty when it performs none.
    pub operation_sparsity: Option<f64>,
    pub macs_total: u64,
    pub macs_nonzero: u64,
}

fn layer_kind(op: &OpSpec, act: &ActivationSpec) -> String {
    let op = match op {
        OpSpec::Dense { .. } => "dense",
        OpSpec::Conv2d { .. } => "conv2d",
        OpSpec::AvgPool { .. } => "avgpool",
    };
    let act = match act {
        ActivationSpec::Passthrough => "passthrough".to_string(),
        ActivationSpec::Plain(_) => "plain".to_string(),
        ActivationSpec::Delta(c) => match (c.integrates(), c.differentiates()) {
            (true, true) => "dal".to_string(),
            (true, false) => "dal_sigma_only".to_string(),
            (false, true) => "dal_delta_only".to_string(),
            (false, false) => "dal_quantized".to_string(),
        },
        ActivationSpec::Output => "output".to_string(),
    };
    format!("{op}+{act}")
}

fn layer_rows(spec: &NetworkSpec, activity: &[Activity], counters: &[OpCounter]) -> Vec<LayerReportRow> {
    activity
        .iter()
        .zip(counters)
        .zip(&spec.layers)
        .enumerate()
        .map(|(i, ((a, c), l))| LayerReportRow {
            layer: i,
            kind: layer_kind(&l.op, &l.activation),
            nonzeros_per_frame: if a.frames == 0 { 0.0 } else { a.nonzeros as f64 / a.frames as f64 },
            activation_sparsity: if a.entries == 0 { 0.0 } else { 1.0 - a.nonzeros as f64 / a.entries as f64 },
            operation_sparsity: c.operation_sparsity().ok(),
            macs_total: c.macs_total,
            macs_nonzero: c.macs_nonzero,
        })
        .collect()
}

/// One row per layer with its emitted-activity and MAC statistics.
pub fn per_layer_report(session: &InferenceSession<'_>) -> Result<Vec<LayerReportRow>> {
    if session.t() == 0 {
        return Err(Error::Usage("per-layer report needs at least one processed frame".into()));
    }
    Ok(layer_rows(session.spec(), session.activity(), session.counters()))
}

/// Per-layer statistics pooled over `sequences`, each run from a fresh
/// session in the network's natural mode.
pub fn per_layer_report_over(
    spec: &NetworkSpec,
    params: &ParamSet,
    sequences: &[FrameSequence],
) -> Result<Vec<LayerReportRow>> {
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::Usage("per-layer report needs at least one processed frame".into()));
    }
    let parts = sequences
        .par_iter()
        .map(|seq| {
            let mut s = InferenceSession::new(spec, params, Mode::natural_for(spec))?;
            for f in seq.frames() {
                s.step(f)?;
            }
            Ok((s.activity().to_vec(), s.counters().to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut activity = vec![Activity::default(); spec.layers.len()];
    let mut counters = vec![OpCounter::default(); spec.layers.len()];
    for (a, c) in &parts {
        for (sum, x) in activity.iter_mut().zip(a) {
            sum.frames += x.frames;
            sum.nonzeros += x.nonzeros;
            sum.entries += x.entries;
        }
        counters.iter_mut().zip(c).for_each(|(sum, x)| sum.merge(x));
    }
    Ok(layer_rows(spec, &activity, &counters))
}

pub fn write_per_layer_csv<W: Write>(rows: &[LayerReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "kind",
        "nonzeros_per_frame",
        "activation_sparsity",
        "operation_sparsity",
        "macs_total",
        "macs_nonzero",
    ])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.kind.clone(),
            format!("{:.6}", r.nonzeros_per_frame),
            format!("{:.6}", r.activation_sparsity),
            r.operation_sparsity.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.macs_total.to_string(),
            r.macs_nonzero.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRateRow {
    pub divisor: usize,
    pub fps: f64,
    /// Frames measured, excluding each sequence's first frame.
    pub frames: u64,
    /// Mean zero fraction of the hidden layers' emitted signals.
    pub activation_sparsity: f64,
    pub operation_sparsity: f64,
}

#[derive(Default)]
struct Tally {
    frames: u64,
    nonzeros: u64,
    entries: u64,
    ops: OpCounter,
}

/// Runs the first frame, clears the counters, then runs the rest, so the
/// statistics describe steady-state frames only. A one-frame sequence is
/// measured on that frame.
fn measure_sequence(spec: &NetworkSpec, params: &ParamSet, frames: &[Tensor]) -> Result<Tally> {
    let mut s = InferenceSession::new(spec, params, Mode::natural_for(spec))?;
    for (t, f) in frames.iter().enumerate() {
        s.step(f)?;
        if t == 0 && frames.len() > 1 {
            s.reset_counters();
        }
    }
    let hidden = spec.hidden_layer_count();
    let mut tally = Tally::default();
    for (a, c) in s.activity()[..hidden].iter().zip(s.counters()) {
        tally.nonzeros += a.nonzeros;
        tally.entries += a.entries;
        tally.ops.merge(c);
    }
    tally.ops.merge(&s.counters()[hidden]);
    tally.frames = s.activity().first().map_or(0, |a| a.frames);
    Ok(tally)
}

/// Sparsity against frame rate: for each divisor `d`, every sequence is
/// subsampled to every `d`-th frame and run through a fresh session.
/// Rows come back in ascending frame-rate order.
pub fn frame_rate_experiment(
    spec: &NetworkSpec,
    params: &ParamSet,
    sequences: &[FrameSequence],
    divisors: &[usize],
) -> Result<Vec<FrameRateRow>> {
    params.check(spec)?;
    if sequences.is_empty() {
        return Err(Error::Domain("frame-rate experiment needs at least one sequence".into()));
    }
    let mut rows = Vec::with_capacity(divisors.len());
    for &d in divisors {
        if d == 0 {
            return Err(Error::Domain("subsample divisor must be at least 1".into()));
        }
        if let Some(short) = sequences.iter().find(|s| s.len() < d) {
            return Err(Error::Domain(format!("sequence of {} frames is shorter than divisor {d}", short.len())));
        }
        let tallies = sequences
            .par_iter()
            .map(|seq| measure_sequence(spec, params, subsample(seq, d)?.frames()))
            .collect::<Result<Vec<_>>>()?;
        let mut total = Tally::default();
        for t in &tallies {
            total.frames += t.frames;
            total.nonzeros += t.nonzeros;
            total.entries += t.entries;
            total.ops.merge(&t.ops);
        }
        let fps = sequences[0].fps() as f64 / d as f64;
        rows.push(FrameRateRow {
            divisor: d,
            fps,
            frames: total.frames,
            activation_sparsity: if total.entries == 0 {
                0.0
            } else {
                1.0 - total.nonzeros as f64 / total.entries as f64
            },
            operation_sparsity: total.ops.operation_sparsity()?,
        });
    }
    rows.sort_by(|a, b| a.fps.total_cmp(&b.fps).then(b.divisor.cmp(&a.divisor)));
    Ok(rows)
}

pub fn write_frame_rate_csv<W: Write>(rows: &[FrameRateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["divisor", "fps", "frames", "activation_sparsity", "operation_sparsity"])?;
    for r in rows {
        w.write_record([
            r.divisor.to_string(),
            format!("{:.6}", r.fps),
            r.frames.to_string(),
            format!("{:.6}", r.activation_sparsity),
            format!("{:.6}", r.operation_sparsity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Counts the memory estimator works from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySheet {
    /// Weights plus biases.
    pub weights: u64,
    /// Largest input-plus-output activation count of any single layer.
    pub max_adjacent_activations: u64,
    /// Neurons held by Delta Activation Layers.
    pub delta_neurons: u64,
}

impl MemorySheet {
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        let plan = spec.plan()?;
        let mut weights = 0u64;
        let mut max_pair = 0u64;
        let mut delta_neurons = 0u64;
        let mut in_len = num_elements(&spec.input_shape) as u64;
        for (layer, lp) in spec.layers.iter().zip(&plan.layers) {
            weights += lp.weight_shape.as_deref().map_or(0, num_elements) as u64;
            weights += lp.bias_shape.as_deref().map_or(0, num_elements) as u64;
            let out_len = num_elements(&lp.out_shape) as u64;
            max_pair = max_pair.max(in_len + num_elements(&lp.z_shape) as u64);
            if layer.delta_config().is_some() {
                delta_neurons += num_elements(&lp.z_shape) as u64;
            }
            in_len = out_len;
        }
        Ok(Self { weights, max_adjacent_activations: max_pair, delta_neurons })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weight_bits: u32,
    pub state_bits: u32,
    pub state_words: u32,
    pub weight_bytes: f64,
    pub normal_state_bytes: f64,
    pub delta_state_bytes: f64,
    pub normal_bytes: f64,
    pub delta_bytes: f64,
    pub ratio: f64,
    pub assumption: String,
}

/// Normal inference keeps the weights plus the widest input/output
/// activation pair; delta inference keeps the weights plus `state_words`
/// words for every delta neuron (two: `Z` and `O_prev`). A network without
/// delta layers keeps the normal activation buffer in both modes.
pub fn memory_overhead_estimate(
    sheet: &MemorySheet,
    state_bits: u32,
    weight_bits: u32,
    state_words: u32,
) -> Result<MemoryEstimate> {
    if state_bits == 0 || weight_bits == 0 || state_words == 0 {
        return Err(Error::Domain("bit widths and state words must be positive".into()));
    }
    let weight_bytes = sheet.weights as f64 * weight_bits as f64 / 8.0;
    let normal_state_bytes = sheet.max_adjacent_activations as f64 * state_bits as f64 / 8.0;
    let delta_state_bytes = if sheet.delta_neurons == 0 {
        normal_state_bytes
    } else {
        sheet.delta_neurons as f64 * state_words as f64 * state_bits as f64 / 8.0
    };
    let normal_bytes = weight_bytes + normal_state_bytes;
    let delta_bytes = weight_bytes + delta_state_bytes;
    let words = match state_words {
        1 => "one state word (Z) per delta neuron".to_string(),
        2 => "two state words (Z and O_prev) per delta neuron".to_string(),
        n => format!("{n} state words per delta neuron"),
    };
    Ok(MemoryEstimate {
        weight_bits,
        state_bits,
        state_words,
        weight_bytes,
        normal_state_bytes,
        delta_state_bytes,
        normal_bytes,
        delta_bytes,
        ratio: delta_bytes / normal_bytes,
        assumption: format!(
            "{words} at {state_bits} bits; normal mode holds the widest layer input+output at {state_bits} bits; weights at {weight_bits} bits"
        ),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub reference: Mode,
    pub candidate: Mode,
    pub max_abs_diff: f64,
    /// First step whose scores differ by more than the tolerance.
    pub first_divergent_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub frames: usize,
    pub comparisons: Vec<ModeComparison>,
    pub passed: bool,
}

/// Runs normal mode as the reference and compares hybrid mode, and delta
/// mode when the network supports it, frame by frame. `perturb_q` scales
/// every quantization step of the candidate sessions, which should break
/// the equivalence.
pub fn compare_modes(
    spec: &NetworkSpec,
    params: &ParamSet,
    frames: &[Tensor],
    perturb_q: Option<f32>,
) -> Result<EquivalenceReport> {
    let mut candidates = vec![Mode::Hybrid];
    if spec.is_full_delta() {
        candidates.insert(0, Mode::Delta);
    }
    let run = |mode: Mode| -> Result<Vec<Tensor<f64>>> {
        let mut s = InferenceSession::new(spec, params, mode)?;
        if let (Some(k), false) = (perturb_q, mode == Mode::Normal) {
            for (i, lp) in params.layers.iter().enumerate() {
                if let Some(q) = &lp.q {
                    s.override_q(i, &q.map(|v| v * k))?;
                }
            }
        }
        frames.iter().map(|f| s.step(f)).collect()
    };
    let reference = run(Mode::Normal)?;
    let mut comparisons = Vec::new();
    for mode in candidates {
        let scores = run(mode)?;
        let mut max_abs_diff = 0.0f64;
        let mut first = None;
        for (t, (a, b)) in reference.iter().zip(&scores).enumerate() {
            let d = a.max_abs_diff(b)?;
            if !(d <= EQUIVALENCE_TOLERANCE) && first.is_none() {
                first = Some(t);
            }
            max_abs_diff = max_abs_diff.max(if d.is_nan() { f64::INFINITY } else { d });
        }
        comparisons.push(ModeComparison {
            reference: Mode::Normal,
            candidate: mode,
            max_abs_diff,
            first_divergent_step: first,
        });
    }
    let passed = comparisons.iter().all(|c| c.first_divergent_step.is_none());
    Ok(EquivalenceReport { tolerance: EQUIVALENCE_TOLERANCE, frames: frames.len(), comparisons, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{ActivationFn, QuantMode};
    use crate::delta::DeltaLayerConfig;
    use crate::network::LayerSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dal() -> ActivationSpec {
        let mut c = DeltaLayerConfig::new(ActivationFn::Relu);
        c.quant_mode = QuantMode::LayerWise;
        c.q_init = 0.1;
        ActivationSpec::Delta(c)
    }

    fn spec(hidden: &[usize]) -> NetworkSpec {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&u| LayerSpec { op: OpSpec::Dense { units: u }, activation: dal() }).collect();
        layers.push(LayerSpec { op: OpSpec::Dense { units: 3 }, activation: ActivationSpec::Output });
        NetworkSpec { input_shape: vec![3, 3, 1], input_delta: true, layers }
    }

    fn walk(rng: &mut ChaCha8Rng, t: usize) -> Vec<Tensor> {
        let mut x: Vec<f32> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        (0..t)
            .map(|_| {
                for v in &mut x {
                    *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
                Tensor::new(vec![3, 3, 1], x.clone()).unwrap()
            })
            .collect()
    }

    #[test]
    fn operation_sparsity_bounds() {
        let full = OpCounter { macs_total: 10, macs_nonzero: 10, adds_state: 0 };
        assert_eq!(operation_sparsity(&[full], None).unwrap(), 0.0);
        assert!(operation_sparsity(&[OpCounter::default()], None).is_err());
        let half = OpCounter { macs_total: 10, macs_nonzero: 5, adds_state: 0 };
        assert_eq!(operation_sparsity(&[full, half], Some(&[1])).unwrap(), 0.5);
        assert!(operation_sparsity(&[full], Some(&[3])).is_err());
    }

    #[test]
    fn report_rows_match_counters() {
        let s = spec(&[5, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ParamSet::init(&s, &mut rng).unwrap();
        let mut sess = InferenceSession::new(&s, &params, Mode::Delta).unwrap();
        assert!(per_layer_report(&sess).is_err());
        for f in walk(&mut rng, 10) {
            sess.step(&f).unwrap();
        }
        let rows = per_layer_report(&sess).unwrap();
        assert_eq!(rows.len(), 3);
        let total: u64 = rows.iter().map(|r| r.macs_nonzero).sum();
        let counted: u64 = sess.counters().iter().map(|c| c.macs_nonzero).sum();
        assert_eq!(total, counted);
        let mut buf = Vec::new();
        write_per_layer_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn pooled_report_sums_sessions() {
        let s = spec(&[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ParamSet::init(&s, &mut rng).unwrap();
        let seqs: Vec<FrameSequence> =
            (0..3).map(|i| FrameSequence::new(walk(&mut rng, 4 + i), 30.0).unwrap()).collect();
        let pooled = per_layer_report_over(&s, &params, &seqs).unwrap();
        let mut nz = vec![0u64; 2];
        for seq in &seqs {
            let mut sess = InferenceSession::new(&s, &params, Mode::Delta).unwrap();
            seq.frames().iter().for_each(|f| {
                sess.step(f).unwrap();
            });
            for (n, c) in nz.iter_mut().zip(sess.counters()) {
                *n += c.macs_nonzero;
            }
        }
        assert_eq!(pooled.iter().map(|r| r.macs_nonzero).collect::<Vec<_>>(), nz);
        assert_eq!(pooled[0].macs_total, 15 * 9 * 5);
        assert!(per_layer_report_over(&s, &params, &[]).is_err());
    }

    #[test]
    fn frozen_video_sparsity_independent_of_divisor() {
        let s = spec(&[6]);
        let params = ParamSet::init(&s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let frame = walk(&mut ChaCha8Rng::seed_from_u64(3), 1).remove(0);
        let seq = FrameSequence::new(vec![frame; 12], 30.0).unwrap();
        let rows = frame_rate_experiment(&s, &params, std::slice::from_ref(&seq), &[1, 2, 4]).unwrap();
        assert_eq!(rows.iter().map(|r| r.divisor).collect::<Vec<_>>(), vec![4, 2, 1]);
        for r in &rows {
            assert_eq!(r.activation_sparsity, 1.0);
        }
        assert!(frame_rate_experiment(&s, &params, &[seq], &[13]).is_err());
    }

    #[test]
    fn toy_memory_arithmetic() {
        let mut s = spec(&[10]);
        s.input_shape = vec![1, 1, 2];
        let sheet = MemorySheet::from_spec(&s).unwrap();
        // 2->10 dense (20 + 10), 10->3 output (30 + 3)
        assert_eq!(sheet.weights, 63);
        assert_eq!(sheet.delta_neurons, 10);
        assert_eq!(sheet.max_adjacent_activations, 13);
        let e = memory_overhead_estimate(&sheet, 16, 8, 2).unwrap();
        assert_eq!(e.delta_state_bytes, 40.0);
        assert_eq!(e.normal_state_bytes, 26.0);
        assert_eq!(e.weight_bytes, 63.0);
        let plain = MemorySheet { delta_neurons: 0, ..sheet };
        let e = memory_overhead_estimate(&plain, 16, 8, 2).unwrap();
        assert_eq!(e.ratio, 1.0);
        assert!(memory_overhead_estimate(&plain, 0, 8, 2).is_err());
    }

    #[test]
    fn modes_agree_and_perturbation_is_caught() {
        let s = spec(&[8, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ParamSet::init(&s, &mut rng).unwrap();
        let frames = walk(&mut rng, 30);
        let ok = compare_modes(&s, &params, &frames, None).unwrap();
        assert!(ok.passed);
        assert_eq!(ok.comparisons.len(), 2);
        let bad = compare_modes(&s, &params, &frames, Some(1.7)).unwrap();
        assert!(!bad.passed);
        assert!(bad.comparisons[0].first_divergent_step.is_some());
    }
}
