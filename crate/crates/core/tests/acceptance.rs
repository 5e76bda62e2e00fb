//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Set `ACCEPTANCE_ONLY=3,7` to run a subset.

use std::time::Instant;

use dal_core::activation::{quantize_activation, step_value, ActivationFn, QuantMode};
use dal_core::data::{
    generate_dataset, generate_sequence, load_model, load_sequence, save_model, save_sequence, DatasetKind,
    DatasetSpec, FrameSequence, ShapeKind, SyntheticSceneSpec,
};
use dal_core::delta::{DeltaLayerConfig, DEFAULT_Q_MIN};
use dal_core::network::{
    compare_modes, frame_rate_experiment, memory_overhead_estimate, ActivationSpec, InferenceSession, LayerSpec,
    MemorySheet, Mode, NetworkSpec, OpSpec, ParamSet, EQUIVALENCE_TOLERANCE,
};
use dal_core::presets::{toy_cnn, Preset};
use dal_core::tensor::Tensor;
use dal_core::train::{
    backward, evaluate, forward_record, sgd_step, train, Example, ForwardOptions, GradOptions, GradSet, LambdaSetting,
    QSurrogate, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_dal(rng: &mut ChaCha8Rng, integrate: bool, differentiate: bool) -> DeltaLayerConfig {
    let f = [ActivationFn::Relu, ActivationFn::Sigmoid, ActivationFn::Identity][rng.gen_range(0..3)];
    let mut c = DeltaLayerConfig::new(f);
    c.quant_mode = [QuantMode::NeuronWise, QuantMode::ChannelWise, QuantMode::LayerWise][rng.gen_range(0..3)];
    c.skip_integration = !integrate;
    c.skip_differentiation = !differentiate;
    c
}

/// 2 to 5 layers: convolutions (sometimes average pooling) while the map
/// is spatial, then dense layers, then the output layer. With `hybrid`
/// the skip flags are drawn at random subject to the wiring rules;
/// otherwise every hidden layer is a full delta layer.
fn random_spec(rng: &mut ChaCha8Rng, hybrid: bool) -> NetworkSpec {
    let input_shape = vec![rng.gen_range(6..=9usize), rng.gen_range(6..=9usize), rng.gen_range(1..=2usize)];
    let input_delta = !hybrid || rng.gen_bool(0.5);
    let mut shape = input_shape.clone();
    let mut delta = input_delta;
    let total = rng.gen_range(2..=5);
    let mut layers = Vec::new();
    let mut spatial = true;
    for _ in 0..total - 1 {
        if spatial && shape[0] >= 4 && shape[1] >= 4 && rng.gen_bool(0.7) {
            if rng.gen_bool(0.2) && shape[0] % 2 == 0 && shape[1] % 2 == 0 {
                layers.push(LayerSpec { op: OpSpec::AvgPool { window: 2 }, activation: ActivationSpec::Passthrough });
                shape = vec![shape[0] / 2, shape[1] / 2, shape[2]];
                continue;
            }
            let (integrate, differentiate) = if hybrid { (delta, rng.gen_bool(0.5)) } else { (true, true) };
            let k = rng.gen_range(1..=3usize);
            let stride = rng.gen_range(1..=2usize);
            let filters = rng.gen_range(2..=5usize);
            let (oh, ow) = ((shape[0] - k) / stride + 1, (shape[1] - k) / stride + 1);
            let mut cfg = random_dal(rng, integrate, differentiate);
            let (mut ph, mut pw) = (oh, ow);
            if oh % 2 == 0 && ow % 2 == 0 && rng.gen_bool(0.4) {
                cfg.max_pool = Some(2);
                ph /= 2;
                pw /= 2;
            }
            layers.push(LayerSpec {
                op: OpSpec::Conv2d { kernel: [k, k], filters, stride },
                activation: ActivationSpec::Delta(cfg),
            });
            shape = vec![ph, pw, filters];
            delta = differentiate;
        } else {
            spatial = false;
            let (integrate, differentiate) = if hybrid { (delta, rng.gen_bool(0.5)) } else { (true, true) };
            let units = rng.gen_range(3..=12);
            layers.push(LayerSpec {
                op: OpSpec::Dense { units },
                activation: ActivationSpec::Delta(random_dal(rng, integrate, differentiate)),
            });
            shape = vec![1, 1, units];
            delta = differentiate;
        }
    }
    layers.push(LayerSpec { op: OpSpec::Dense { units: rng.gen_range(2..=5) }, activation: ActivationSpec::Output });
    NetworkSpec { input_shape, input_delta, layers }
}

fn random_params(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::init(spec, rng).unwrap();
    for l in &mut p.layers {
        if let Some(b) = &mut l.bias {
            b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        if let Some(q) = &mut l.q {
            q.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.5));
        }
    }
    p
}

/// Each pixel moves with probability 0.3 per step.
fn random_walk(rng: &mut ChaCha8Rng, shape: &[usize], t: usize) -> Vec<Tensor> {
    let n: usize = shape.iter().product();
    let mut x: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    (0..t)
        .map(|_| {
            for v in &mut x {
                if rng.gen_bool(0.3) {
                    *v = (*v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                }
            }
            Tensor::new(shape.to_vec(), x.clone()).unwrap()
        })
        .collect()
}

fn criterion_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut checked, mut failures) = (0.0f64, 0usize, Vec::new());
    for i in 0..50 {
        let hybrid = i % 2 == 1;
        let spec = random_spec(&mut rng, hybrid);
        let params = random_params(&spec, &mut rng);
        let frames = random_walk(&mut rng, &spec.input_shape, 50);
        let report = compare_modes(&spec, &params, &frames, None).unwrap();
        for c in &report.comparisons {
            worst = worst.max(c.max_abs_diff);
            checked += 1;
            if c.first_divergent_step.is_some() {
                failures.push(format!("spec {i} {:?} step {:?}", c.candidate, c.first_divergent_step));
            }
        }
        // counters: dense cost is mode independent
        let totals = |mode| {
            let mut s = InferenceSession::new(&spec, &params, mode).unwrap();
            frames.iter().for_each(|f| {
                s.step(f).unwrap();
            });
            s.counters().iter().map(|c| c.macs_total).collect::<Vec<_>>()
        };
        if totals(Mode::Normal) != totals(Mode::Hybrid) {
            failures.push(format!("spec {i}: macs_total differs between modes"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "50 specs, {checked} mode comparisons over 50 frames, max |diff| {worst:.2e} <= {EQUIVALENCE_TOLERANCE:e}{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

fn frozen_video(t: usize) -> FrameSequence {
    let scene = SyntheticSceneSpec {
        height: 64,
        width: 64,
        shape: ShapeKind::Disc,
        size: 6.0,
        start: [30.0, 22.0],
        velocity: [0.0, 0.0],
        camera_pan: [0.0, 0.0],
        noise_amplitude: 0.0,
        label: 1,
        seed: 99,
    };
    generate_sequence(&scene, t).unwrap().0
}

fn criterion_warm_idle() -> Outcome {
    let spec = toy_cnn([64, 64, 1], 4, Preset::Temporal).unwrap();
    let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let video = frozen_video(50);
    let mut s = InferenceSession::new(&spec, &params, Mode::Delta).unwrap();
    let mut idle = true;
    let mut after_first = Vec::new();
    for (t, f) in video.frames().iter().enumerate() {
        s.step(f).unwrap();
        let now: Vec<u64> = s.counters().iter().map(|c| c.macs_nonzero).collect();
        if t == 0 {
            after_first = now;
        } else if now != after_first {
            idle = false;
        }
    }
    let sparsity = dal_core::network::operation_sparsity(s.counters(), None).unwrap();
    outcome(
        idle && sparsity >= 0.95,
        format!(
            "macs_nonzero increments after frame 1: {}; operation sparsity at T=50 {sparsity:.4} (>= 0.95)",
            if idle { 0 } else { 1 }
        ),
    )
}

fn labelled(kind: DatasetKind, per_class: usize, take: usize, seed: u64) -> Vec<(FrameSequence, usize)> {
    let spec = DatasetSpec { kind, height: 64, width: 64, frames: 16, per_class, noise_amplitude: 0.0, seed };
    generate_dataset(&spec).unwrap().into_iter().take(take).map(|s| (s.sequence, s.label)).collect()
}

fn criterion_training() -> Outcome {
    let start = Instant::now();
    let train_set = labelled(DatasetKind::FrozenCam, 50, 200, 101);
    let test_set = labelled(DatasetKind::FrozenCam, 13, 50, 202);
    let run = |preset: Preset, lambda: LambdaSetting| {
        let spec = toy_cnn([64, 64, 1], 4, preset).unwrap();
        let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            lr: 0.2,
            batch_size: 10,
            lambda,
            surrogate: QSurrogate::Reciprocal,
            q_lr_scale: 0.01,
            seed: 7,
        };
        let out = train(&spec, &params, &train_set, &cfg).unwrap();
        (evaluate(&out.spec, &out.params, &test_set).unwrap(), out)
    };
    let (base, _) = run(Preset::Baseline, LambdaSetting::Keep);
    let (temp, out) = run(Preset::Temporal, LambdaSetting::Calibrated { ratio: 0.03 });
    let ratio = temp.operation_sparsity / base.operation_sparsity;
    let drop = base.accuracy - temp.accuracy;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        ratio >= 1.5 && drop <= 0.10 && minutes <= 15.0,
        format!(
            "op sparsity baseline {:.3} temporal {:.3} (x{ratio:.2}, need >= 1.5); accuracy baseline {:.3} temporal {:.3} (drop {:.1} pp, need <= 10); base lambda {:.2e}; both trainings {minutes:.1} min (<= 15)",
            base.operation_sparsity,
            temp.operation_sparsity,
            base.accuracy,
            temp.accuracy,
            drop * 100.0,
            out.base_lambda.unwrap_or(0.0)
        ),
    )
}

fn smooth_net() -> NetworkSpec {
    let mut c0 = DeltaLayerConfig::new(ActivationFn::Sigmoid);
    c0.sparsity_factor = 0.05;
    let mut c1 = DeltaLayerConfig::new(ActivationFn::Identity);
    c1.quant_mode = QuantMode::NeuronWise;
    c1.sparsity_factor = 0.02;
    let mut c2 = DeltaLayerConfig::new(ActivationFn::Sigmoid);
    c2.quant_mode = QuantMode::LayerWise;
    c2.sparsity_factor = 0.1;
    NetworkSpec {
        input_shape: vec![8, 8, 2],
        input_delta: true,
        layers: vec![
            LayerSpec {
                op: OpSpec::Conv2d { kernel: [3, 3], filters: 4, stride: 1 },
                activation: ActivationSpec::Delta(c0),
            },
            LayerSpec { op: OpSpec::AvgPool { window: 2 }, activation: ActivationSpec::Passthrough },
            LayerSpec {
                op: OpSpec::Conv2d { kernel: [2, 2], filters: 3, stride: 1 },
                activation: ActivationSpec::Delta(c1),
            },
            LayerSpec { op: OpSpec::Dense { units: 6 }, activation: ActivationSpec::Delta(c2) },
            LayerSpec { op: OpSpec::Dense { units: 4 }, activation: ActivationSpec::Output },
        ],
    }
}

fn slot(p: &mut ParamSet, l: usize, bias: bool) -> &mut [f32] {
    let layer = &mut p.layers[l];
    if bias { layer.bias.as_mut() } else { layer.weight.as_mut() }.unwrap().data_mut()
}

fn criterion_gradients() -> Outcome {
    let spec = smooth_net();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let params = random_params(&spec, &mut rng);
    let seqs: Vec<Vec<Tensor>> = (0..3).map(|_| random_walk(&mut rng, &spec.input_shape, 4)).collect();
    let batch: Vec<Example<'_>> = seqs.iter().enumerate().map(|(i, f)| Example { frames: f, label: i % 4 }).collect();
    let smooth = ForwardOptions { quantize: false };
    let loss = |p: &ParamSet| forward_record(&spec, p, &batch, smooth).unwrap().0.loss.total;
    let (_, tape) = forward_record(&spec, &params, &batch, smooth).unwrap();
    let grads = backward(&spec, &params, &tape, GradOptions::default()).unwrap();
    let weighted: Vec<usize> = (0..spec.layers.len()).filter(|&l| params.layers[l].weight.is_some()).collect();
    let (mut worst, mut probes) = (0.0f64, 0);
    for k in 0..120 {
        let l = weighted[k % weighted.len()];
        let bias = k % 3 == 2;
        let mut p = params.clone();
        let i = rng.gen_range(0..slot(&mut p, l, bias).len());
        let w0 = slot(&mut p, l, bias)[i];
        let (hi, lo) = (w0 + 1e-3, w0 - 1e-3);
        slot(&mut p, l, bias)[i] = hi;
        let fp = loss(&p);
        slot(&mut p, l, bias)[i] = lo;
        let fm = loss(&p);
        let numeric = (fp - fm) / (hi as f64 - lo as f64);
        let g = &grads.layers[l];
        let analytic = if bias { g.bias.as_ref() } else { g.weight.as_ref() }.unwrap().data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        probes += 1;
    }
    outcome(worst <= 1e-3, format!("{probes} probes, h=1e-3, max relative error {worst:.2e} (<= 1e-3)"))
}

fn criterion_q_sign() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut spec = smooth_net();
    // the last hidden layer is pushed into the ReLU dead zone: it never emits
    if let ActivationSpec::Delta(c) = &mut spec.layers[3].activation {
        c.activation = ActivationFn::Relu;
    }
    let mut violations = Vec::new();
    let (mut positive, mut silent) = (0, 0);
    for trial in 0..20 {
        let mut params = random_params(&spec, &mut rng);
        params.layers[3].bias.as_mut().unwrap().data_mut().iter_mut().for_each(|b| *b = -50.0);
        let frames = random_walk(&mut rng, &spec.input_shape, 5);
        let batch = [Example { frames: &frames, label: trial % 4 }];
        let (fwd, tape) = forward_record(&spec, &params, &batch, ForwardOptions::default()).unwrap();
        let grads =
            backward(&spec, &params, &tape, GradOptions { surrogate: QSurrogate::Reciprocal, accuracy_weight: 0.0 })
                .unwrap();
        let next = sgd_step(&spec, &params, &grads, 0.01).unwrap();
        for l in 0..spec.layers.len() {
            let (Some(q0), Some(q1)) = (&params.layers[l].q, &next.layers[l].q) else { continue };
            let dq: Vec<f64> = q1.data().iter().zip(q0.data()).map(|(a, b)| *a as f64 - *b as f64).collect();
            if fwd.loss.sparsity_losses[l] > 0.0 {
                positive += 1;
                if !dq.iter().any(|&d| d > 0.0) || dq.iter().any(|&d| d < 0.0) {
                    violations.push(format!("trial {trial} layer {l}: dq {dq:?}"));
                }
            } else {
                silent += 1;
                if dq.iter().any(|&d| d != 0.0) {
                    violations.push(format!("trial {trial} silent layer {l} moved"));
                }
            }
        }
    }
    let spec_floor = smooth_net();
    let mut params = random_params(&spec_floor, &mut rng);
    let mut below = 0;
    for _ in 0..1000 {
        let mut g = GradSet::zeros_like(&params);
        for l in &mut g.layers {
            if let Some(q) = &mut l.q {
                q.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..6.0));
            }
        }
        params = sgd_step(&spec_floor, &params, &g, 0.1).unwrap();
        below += params
            .layers
            .iter()
            .flat_map(|l| l.q.iter())
            .flat_map(|q| q.data())
            .filter(|&&v| v < DEFAULT_Q_MIN)
            .count();
    }
    outcome(
        violations.is_empty() && positive > 0 && silent > 0 && below == 0,
        format!(
            "{positive} emitting layer updates all dq > 0, {silent} silent layer updates dq = 0, {} violations; 1000 random steps, {below} q below q_min",
            violations.len()
        ),
    )
}

fn criterion_frame_rate() -> Outcome {
    let spec = toy_cnn([64, 64, 1], 4, Preset::Temporal).unwrap();
    let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(66)).unwrap();
    let data = DatasetSpec {
        kind: DatasetKind::FrozenCam,
        height: 64,
        width: 64,
        frames: 32,
        per_class: 25,
        noise_amplitude: 0.0,
        seed: 606,
    };
    let seqs: Vec<FrameSequence> = generate_dataset(&data).unwrap().into_iter().map(|s| s.sequence).collect();
    let rows = frame_rate_experiment(&spec, &params, &seqs, &[1, 4]).unwrap();
    let full = rows.iter().find(|r| r.divisor == 1).unwrap().activation_sparsity;
    let quarter = rows.iter().find(|r| r.divisor == 4).unwrap().activation_sparsity;
    let margin = (full - quarter) * 100.0;
    outcome(
        margin >= 2.0,
        format!(
            "{} sequences: sparsity at full rate {full:.4}, quarter rate {quarter:.4}, margin {margin:.2} pp (>= 2)",
            seqs.len()
        ),
    )
}

fn criterion_quantizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut bad = 0usize;
    for f in [ActivationFn::Relu, ActivationFn::Sigmoid] {
        for _ in 0..10 {
            let z = Tensor::new(vec![100_000], (0..100_000).map(|_| rng.gen_range(-10.0f64..10.0)).collect()).unwrap();
            let qf: f32 = rng.gen_range(0.01..1.0);
            let q = step_value(qf);
            let y = quantize_activation(&z, &Tensor::from_vec(vec![qf]), f).unwrap();
            for (zv, yv) in z.data().iter().zip(y.data()) {
                let fz = f.apply(*zv);
                let err = (yv - fz).abs();
                worst = worst.max(err / q);
                if err > q / 2.0 + 4.0 * f64::EPSILON * fz.abs().max(q) {
                    bad += 1;
                }
            }
        }
    }
    // staircases against a scalar oracle: nearest multiple of q, ties away from zero
    let oracle = |v: f64, q: f64| {
        let k = (v / q).floor();
        let frac = v / q - k;
        if frac >= 0.5 - 1e-12 {
            (k + 1.0) * q
        } else {
            k * q
        }
    };
    let mut spot_fail = Vec::new();
    for (f, q, zs) in [
        (ActivationFn::Relu, 1.0f32, vec![-3.0, -0.2, 0.0, 0.49, 0.5, 1.49, 2.4, 2.5, 3.7]),
        (ActivationFn::Sigmoid, 0.2f32, vec![-4.0, -1.5, -0.3, 0.0, 0.4, 1.1, 2.0, 5.0]),
    ] {
        for z in zs {
            let got = quantize_activation(&Tensor::from_vec(vec![z]), &Tensor::from_vec(vec![q]), f).unwrap().data()[0];
            let want = oracle(f.apply(z), step_value(q));
            if (got - want).abs() > 1e-12 {
                spot_fail.push(format!("{f:?} z={z}: {got} vs {want}"));
            }
        }
    }
    let tie =
        quantize_activation(&Tensor::from_vec(vec![0.0f64]), &Tensor::from_vec(vec![0.2f32]), ActivationFn::Sigmoid)
            .unwrap()
            .data()[0];
    if (tie - 0.6).abs() > 1e-12 {
        spot_fail.push(format!("sigmoid(0) at q=0.2 gave {tie}"));
    }
    outcome(
        bad == 0 && spot_fail.is_empty(),
        format!(
            "2x10^6 probes, max |f_q - f| / q = {worst:.6} (<= 0.5), {bad} violations; staircase spot checks {}",
            if spot_fail.is_empty() { "ok".to_string() } else { spot_fail.join("; ") }
        ),
    )
}

fn criterion_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let frames: Vec<Tensor> = (0..7)
        .map(|_| Tensor::new(vec![5, 6, 2], (0..60).map(|_| rng.gen_range(0.0f32..=1.0)).collect()).unwrap())
        .collect();
    let seq = FrameSequence::new(frames, 25.0).unwrap();
    let (a, b) = (dir.path().join("a.dseq"), dir.path().join("b.dseq"));
    save_sequence(&seq, &a).unwrap();
    let back = load_sequence(&a).unwrap();
    save_sequence(&back, &b).unwrap();
    if back != seq || std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap() {
        problems.push("sequence round trip differs");
    }

    let spec = toy_cnn([32, 32, 1], 4, Preset::Temporal).unwrap();
    let params = random_params(&spec, &mut rng);
    let video = generate_dataset(&DatasetSpec {
        kind: DatasetKind::MovingCam,
        height: 32,
        width: 32,
        frames: 10,
        per_class: 1,
        noise_amplitude: 0.0,
        seed: 8,
    })
    .unwrap()
    .remove(0)
    .sequence;
    let mut live = InferenceSession::new(&spec, &params, Mode::Delta).unwrap();
    for f in &video.frames()[..5] {
        live.step(f).unwrap();
    }
    let (m1, m2) = (dir.path().join("a.dmdl"), dir.path().join("b.dmdl"));
    save_model(&m1, &spec, &params, Some(&live.snapshot())).unwrap();
    let loaded = load_model(&m1).unwrap();
    save_model(&m2, &loaded.spec, &loaded.params, loaded.snapshot.as_ref()).unwrap();
    if std::fs::read(&m1).unwrap() != std::fs::read(&m2).unwrap() || loaded.params != params || loaded.spec != spec {
        problems.push("model round trip differs");
    }
    let mut resumed = InferenceSession::restore(&loaded.spec, &loaded.params, loaded.snapshot.unwrap()).unwrap();
    let mut fresh_live = InferenceSession::new(&spec, &params, Mode::Delta).unwrap();
    let mut fresh_loaded = InferenceSession::new(&loaded.spec, &loaded.params, Mode::Delta).unwrap();
    for f in &video.frames()[5..] {
        if live.step(f).unwrap() != resumed.step(f).unwrap() {
            problems.push("resumed session diverged");
            break;
        }
    }
    for f in video.frames() {
        if fresh_live.step(f).unwrap() != fresh_loaded.step(f).unwrap() {
            problems.push("post-load scores differ");
            break;
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "DSEQ and model files byte-identical after reload; resumed and reloaded sessions give identical scores"
                .to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn criterion_memory() -> Outcome {
    let mut problems = Vec::new();
    // 2 -> 10 delta neurons -> 3 outputs
    let mut c = DeltaLayerConfig::new(ActivationFn::Relu);
    c.quant_mode = QuantMode::LayerWise;
    let toy = NetworkSpec {
        input_shape: vec![1, 1, 2],
        input_delta: true,
        layers: vec![
            LayerSpec { op: OpSpec::Dense { units: 10 }, activation: ActivationSpec::Delta(c) },
            LayerSpec { op: OpSpec::Dense { units: 3 }, activation: ActivationSpec::Output },
        ],
    };
    let sheet = MemorySheet::from_spec(&toy).unwrap();
    let e = memory_overhead_estimate(&sheet, 16, 8, 2).unwrap();
    // weights 2*10+10 + 10*3+3 = 63 bytes at 8 bits; widest pair 10+3 at 2 bytes
    if e.weight_bytes != 63.0
        || e.delta_state_bytes != 40.0
        || e.normal_state_bytes != 26.0
        || e.normal_bytes != 89.0
        || e.delta_bytes != 103.0
    {
        problems.push(format!("toy estimate {e:?}"));
    }
    let plain = memory_overhead_estimate(&MemorySheet { delta_neurons: 0, ..sheet }, 16, 8, 2).unwrap();
    if plain.ratio != 1.0 {
        problems.push("no-delta ratio != 1".into());
    }
    // ResNet-50 sized sheet: 23M weights, 9.2M neurons, widest pair = 224x224x3 in + 112x112x64 out
    let resnet = MemorySheet {
        weights: 23_000_000,
        max_adjacent_activations: 224 * 224 * 3 + 112 * 112 * 64,
        delta_neurons: 9_200_000,
    };
    let two = memory_overhead_estimate(&resnet, 16, 8, 2).unwrap();
    let one = memory_overhead_estimate(&resnet, 16, 8, 1).unwrap();
    let normal_mb = two.normal_bytes / 1e6;
    let within = (normal_mb - 25.0).abs() / 25.0 <= 0.15;
    outcome(
        problems.is_empty() && within,
        format!(
            "toy counts exact{}; ResNet-50 sheet normal {normal_mb:.1} MB vs 25 MB ({:+.1}%); delta {:.1} MB with {} / {:.1} MB with {}",
            if problems.is_empty() { String::new() } else { format!(" FAILED: {}", problems.join(", ")) },
            (normal_mb - 25.0) / 25.0 * 100.0,
            two.delta_bytes / 1e6,
            two.assumption,
            one.delta_bytes / 1e6,
            one.assumption
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: Vec<Criterion> = vec![
        (1, "exact equivalence", criterion_equivalence),
        (2, "warm idle", criterion_warm_idle),
        (3, "sparsification by training", criterion_training),
        (4, "gradient correctness", criterion_gradients),
        (5, "q update sign and floor", criterion_q_sign),
        (6, "frame-rate monotonicity", criterion_frame_rate),
        (7, "quantizer properties", criterion_quantizer),
        (8, "format round trips", criterion_round_trips),
        (9, "memory estimator", criterion_memory),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {id} {name}: {} ({}; {secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
