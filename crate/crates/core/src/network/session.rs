use serde::{Deserialize, Serialize};

use super::{ActivationSpec, NetworkSpec, ParamSet, Plan};
use crate::activation::max_pool_with_argmax;
use crate::delta::{DeltaLayer, DeltaLayerState};
use crate::error::{config_err, dim_err, Error, Result};
use crate::ops::OpCounter;
use crate::tensor::{difference, sparsify, Signal, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Stateless per-frame pass; delta layers act as quantized activations.
    Normal,
    /// Every hidden layer is a full sigma-delta layer, input differenced.
    Delta,
    /// Whatever mix of delta and dense segments the spec wires up.
    Hybrid,
}

impl Mode {
    /// Delta for fully delta networks, hybrid otherwise.
    pub fn natural_for(spec: &NetworkSpec) -> Mode {
        if spec.is_full_delta() {
            Mode::Delta
        } else {
            Mode::Hybrid
        }
    }
}

enum Runtime {
    Stateless,
    Dal(DeltaLayer),
    Output { acc: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub frames: u64,
    pub nonzeros: u64,
    pub entries: u64,
}

/// Dense view of one layer at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Pre-activation (linear op output plus bias).
    pub z: Vec<f64>,
    /// Emitted values after activation and pooling, as full activations.
    pub out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub frame: Vec<f64>,
    pub layers: Vec<LayerTrace>,
}

/// Resumable state of an [`InferenceSession`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub mode: Mode,
    pub t: u64,
    pub prev_frame: Vec<f64>,
    pub dal_states: Vec<Option<DeltaLayerState>>,
    pub output_acc: Vec<f64>,
    pub counters: Vec<OpCounter>,
    pub activity: Vec<Activity>,
}

/// Stateful execution of a network over one frame sequence.
pub struct InferenceSession<'a> {
    spec: &'a NetworkSpec,
    params: &'a ParamSet,
    plan: Plan,
    biases: Vec<Option<Vec<f64>>>,
    mode: Mode,
    runtimes: Vec<Runtime>,
    counters: Vec<OpCounter>,
    activity: Vec<Activity>,
    prev_frame: Vec<f64>,
    t: u64,
}

impl<'a> InferenceSession<'a> {
    pub fn new(spec: &'a NetworkSpec, params: &'a ParamSet, mode: Mode) -> Result<Self> {
        let plan = params.check(spec)?;
        if mode == Mode::Delta && !spec.is_full_delta() {
            return config_err(
                "delta mode needs a differenced input and full sigma-delta hidden layers; use hybrid mode",
            );
        }
        let biases =
            (0..plan.layers.len()).map(|i| params.bias_state(i, &plan.layers[i])).collect::<Result<Vec<_>>>()?;
        let mut runtimes = Vec::with_capacity(plan.layers.len());
        for (i, (layer, lp)) in spec.layers.iter().zip(&plan.layers).enumerate() {
            let rt = match &layer.activation {
                ActivationSpec::Delta(cfg) => {
                    let mut cfg = cfg.clone();
                    if mode == Mode::Normal {
                        cfg.skip_integration = true;
                        cfg.skip_differentiation = true;
                    }
                    let bias = params.layers[i].bias.clone().unwrap_or_else(|| Tensor::from_vec(vec![0.0]));
                    let mut dal = DeltaLayer::new(cfg, &bias, &lp.z_shape)?;
                    if let Some(q) = &params.layers[i].q {
                        dal.set_q(q)?;
                    }
                    Runtime::Dal(dal)
                }
                ActivationSpec::Output => {
                    Runtime::Output { acc: biases[i].clone().unwrap_or_else(|| vec![0.0; lp.geometry.out_len()]) }
                }
                _ => Runtime::Stateless,
            };
            runtimes.push(rt);
        }
        let n = plan.layers.len();
        let input_len = spec.input_shape.iter().product();
        Ok(Self {
            spec,
            params,
            plan,
            biases,
            mode,
            runtimes,
            counters: vec![OpCounter::default(); n],
            activity: vec![Activity::default(); n],
            prev_frame: vec![0.0; input_len],
            t: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn counters(&self) -> &[OpCounter] {
        &self.counters
    }

    pub fn activity(&self) -> &[Activity] {
        &self.activity
    }

    pub fn reset_counters(&mut self) {
        self.counters.iter_mut().for_each(OpCounter::reset);
        self.activity.iter_mut().for_each(|a| *a = Activity::default());
    }

    pub fn delta_state(&self, layer: usize) -> Option<&DeltaLayerState> {
        match self.runtimes.get(layer) {
            Some(Runtime::Dal(d)) => Some(d.state()),
            _ => None,
        }
    }

    /// Overrides a layer's quantization steps for this session only.
    pub fn override_q(&mut self, layer: usize, q: &Tensor) -> Result<()> {
        match self.runtimes.get_mut(layer) {
            Some(Runtime::Dal(d)) => d.set_q(q),
            _ => config_err(format!("layer {layer} has no quantization steps")),
        }
    }

    /// Processes one frame and returns the class scores.
    pub fn step(&mut self, frame: &Tensor) -> Result<Tensor<f64>> {
        self.run(frame, false).map(|(s, _)| s)
    }

    /// Like [`InferenceSession::step`], also returning every layer's dense
    /// pre-activation and output.
    pub fn step_traced(&mut self, frame: &Tensor) -> Result<(Tensor<f64>, StepTrace)> {
        let (s, tr) = self.run(frame, true)?;
        Ok((s, tr.expect("trace requested")))
    }

    fn run(&mut self, frame: &Tensor, trace: bool) -> Result<(Tensor<f64>, Option<StepTrace>)> {
        if frame.shape() != self.spec.input_shape.as_slice() {
            return dim_err(format!(
                "frame shape {:?} does not match network input {:?}",
                frame.shape(),
                self.spec.input_shape
            ));
        }
        let wired = self.mode != Mode::Normal;
        let current = frame.cast::<f64>();
        let mut signal = if wired && self.spec.input_delta {
            let prev = Tensor::new(self.spec.input_shape.clone(), std::mem::take(&mut self.prev_frame))?;
            let d = difference(&current, &prev)?;
            Signal::Delta(d)
        } else {
            Signal::Dense(current.clone())
        };
        self.prev_frame = current.data().to_vec();

        let mut traces =
            trace.then(|| StepTrace { frame: current.into_data(), layers: Vec::with_capacity(self.plan.layers.len()) });
        for i in 0..self.plan.layers.len() {
            let lp = &self.plan.layers[i];
            let geom = &lp.geometry;
            let weight = self.params.layers[i].weight.as_ref().map(|w| w.data()).unwrap_or(&[]);
            let counter = &mut self.counters[i];
            let mut acc = vec![0.0f64; geom.out_len()];
            let pre = match &signal {
                Signal::Dense(x) => {
                    geom.accumulate_dense(weight, x.data(), &mut acc, counter)?;
                    if let Some(b) = &self.biases[i] {
                        for (a, b) in acc.iter_mut().zip(b) {
                            *a += b;
                        }
                    }
                    Signal::Dense(Tensor::new(lp.z_shape.clone(), acc)?)
                }
                Signal::Delta(ev) => {
                    geom.accumulate_events(weight, ev.entries(), &mut acc, counter)?;
                    Signal::Delta(sparsify(&Tensor::new(lp.z_shape.clone(), acc)?))
                }
            };
            let out = match (&self.spec.layers[i].activation, &mut self.runtimes[i]) {
                (ActivationSpec::Passthrough, _) => pre,
                (ActivationSpec::Plain(p), _) => {
                    let Signal::Dense(z) = pre else {
                        return Err(Error::Config(format!("layer {i}: plain activation received deltas")));
                    };
                    let a: Vec<f64> = z.data().iter().map(|&v| p.function.apply(v)).collect();
                    let o = match p.max_pool {
                        Some(k) => {
                            let pooled = max_pool_with_argmax(&a, &lp.z_shape, k)?;
                            Tensor::new(pooled.shape, pooled.values)?
                        }
                        None => Tensor::new(lp.z_shape.clone(), a)?,
                    };
                    if let Some(tr) = traces.as_mut() {
                        tr.layers.push(LayerTrace { z: z.into_data(), out: o.data().to_vec() });
                    }
                    Signal::Dense(o)
                }
                (ActivationSpec::Delta(_), Runtime::Dal(dal)) => {
                    let out = dal.layer_forward(pre, counter)?;
                    if let Some(tr) = traces.as_mut() {
                        tr.layers.push(LayerTrace {
                            z: dal.state().z.data().to_vec(),
                            out: dal.state().o_prev.data().to_vec(),
                        });
                    }
                    out
                }
                (ActivationSpec::Output, Runtime::Output { acc: scores }) => {
                    match pre {
                        Signal::Dense(z) => scores.copy_from_slice(z.data()),
                        Signal::Delta(dz) => {
                            for &(j, v) in dz.entries() {
                                scores[j] += v;
                            }
                            counter.adds_state += dz.nnz() as u64;
                        }
                    }
                    Signal::Dense(Tensor::new(lp.z_shape.clone(), scores.clone())?)
                }
                _ => unreachable!("runtime built from the same spec"),
            };
            if let Some(tr) = traces.as_mut() {
                if matches!(self.spec.layers[i].activation, ActivationSpec::Passthrough | ActivationSpec::Output) {
                    let out_dense = match &out {
                        Signal::Dense(t) => t.data().to_vec(),
                        Signal::Delta(_) => {
                            // rebuild the dense value from the previous layer's dense output
                            let input = tr.layers.last().map(|l| l.out.as_slice()).unwrap_or(&tr.frame);
                            let mut v = vec![0.0; geom.out_len()];
                            geom.accumulate_dense(weight, input, &mut v, &mut OpCounter::default())?;
                            v
                        }
                    };
                    tr.layers.push(LayerTrace { z: out_dense.clone(), out: out_dense });
                }
            }
            let act = &mut self.activity[i];
            act.frames += 1;
            act.nonzeros += out.nonzeros() as u64;
            act.entries += out.dense_len() as u64;
            signal = out;
        }
        self.t += 1;
        let Signal::Dense(scores) = signal else {
            unreachable!("output layer emits dense scores");
        };
        Ok((scores, traces))
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            mode: self.mode,
            t: self.t,
            prev_frame: self.prev_frame.clone(),
            dal_states: self
                .runtimes
                .iter()
                .map(|r| match r {
                    Runtime::Dal(d) => Some(d.state().clone()),
                    _ => None,
                })
                .collect(),
            output_acc: self
                .runtimes
                .iter()
                .find_map(|r| match r {
                    Runtime::Output { acc } => Some(acc.clone()),
                    _ => None,
                })
                .unwrap_or_default(),
            counters: self.counters.clone(),
            activity: self.activity.clone(),
        }
    }

    /// Rebuilds a session from a snapshot taken on the same spec.
    pub fn restore(spec: &'a NetworkSpec, params: &'a ParamSet, snap: SessionSnapshot) -> Result<Self> {
        let mut s = Self::new(spec, params, snap.mode)?;
        let n = s.plan.layers.len();
        if snap.dal_states.len() != n || snap.counters.len() != n || snap.activity.len() != n {
            return config_err("snapshot layer count does not match the network");
        }
        if snap.prev_frame.len() != s.prev_frame.len() {
            return config_err("snapshot input size does not match the network");
        }
        for (rt, st) in s.runtimes.iter_mut().zip(snap.dal_states) {
            match (rt, st) {
                (Runtime::Dal(d), Some(st)) => {
                    *d = DeltaLayer::from_state(d.config().clone(), st)?;
                }
                (Runtime::Output { acc }, None) => {
                    if snap.output_acc.len() != acc.len() {
                        return config_err("snapshot score accumulator size mismatch");
                    }
                    acc.copy_from_slice(&snap.output_acc);
                }
                (Runtime::Stateless, None) => {}
                _ => return config_err("snapshot layer kinds do not match the network"),
            }
        }
        s.t = snap.t;
        s.prev_frame = snap.prev_frame;
        s.counters = snap.counters;
        s.activity = snap.activity;
        Ok(s)
    }
}

fn infer_in(session: &mut InferenceSession<'_>, mode: Mode, frame: &Tensor) -> Result<Tensor<f64>> {
    if session.mode() != mode {
        return config_err(format!("session runs in {:?} mode, not {mode:?}", session.mode()));
    }
    session.step(frame)
}

/// Stateless quantized reference pass.
pub fn infer_normal(session: &mut InferenceSession<'_>, frame: &Tensor) -> Result<Tensor<f64>> {
    infer_in(session, Mode::Normal, frame)
}

/// Delta inference; scores are integrated from the last layer's deltas.
pub fn infer_delta(session: &mut InferenceSession<'_>, frame: &Tensor) -> Result<Tensor<f64>> {
    infer_in(session, Mode::Delta, frame)
}

pub fn infer_hybrid(session: &mut InferenceSession<'_>, frame: &Tensor) -> Result<Tensor<f64>> {
    infer_in(session, Mode::Hybrid, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{ActivationFn, QuantMode};
    use crate::delta::DeltaLayerConfig;
    use crate::network::{LayerParams, LayerSpec, OpSpec, PlainActivation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_net(acts: Vec<ActivationSpec>, input_delta: bool) -> NetworkSpec {
        let mut layers: Vec<LayerSpec> =
            acts.into_iter().map(|a| LayerSpec { op: OpSpec::Dense { units: 6 }, activation: a }).collect();
        layers.push(LayerSpec { op: OpSpec::Dense { units: 3 }, activation: ActivationSpec::Output });
        NetworkSpec { input_shape: vec![2, 2, 1], input_delta, layers }
    }

    fn full_dal() -> ActivationSpec {
        let mut c = DeltaLayerConfig::new(ActivationFn::Relu);
        c.quant_mode = QuantMode::NeuronWise;
        ActivationSpec::Delta(c)
    }

    fn frame(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![2, 2, 1], (0..4).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_frame_zero_bias_relu_gives_zero_scores() {
        let spec = dense_net(vec![full_dal(), full_dal()], true);
        let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut s = InferenceSession::new(&spec, &params, Mode::Normal).unwrap();
        let scores = infer_normal(&mut s, &Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_output_layer_is_affine() {
        let spec = dense_net(vec![], false);
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.layers[0].bias = Some(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let w = params.layers[0].weight.clone().unwrap();
        let x = frame(&mut ChaCha8Rng::seed_from_u64(2));
        let mut s = InferenceSession::new(&spec, &params, Mode::Normal).unwrap();
        let scores = s.step(&x).unwrap();
        for o in 0..3 {
            let mut e = [0.5, -1.0, 2.0][o];
            for i in 0..4 {
                e += w.data()[o * 4 + i] as f64 * x.data()[i] as f64;
            }
            assert!((scores.data()[o] - e).abs() < 1e-9);
        }
    }

    #[test]
    fn normal_mode_matches_hand_rolled_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plain = ActivationSpec::Plain(PlainActivation {
            function: ActivationFn::Sigmoid,
            max_pool: None,
            sparsity_factor: 0.0,
        });
        let mut c = DeltaLayerConfig::new(ActivationFn::Relu);
        c.skip_integration = true;
        c.skip_differentiation = true;
        c.quant_mode = QuantMode::LayerWise;
        c.q_init = 0.25;
        let spec = dense_net(vec![plain, ActivationSpec::Delta(c)], false);
        let mut params = ParamSet::init(&spec, &mut rng).unwrap();
        for l in &mut params.layers {
            if let Some(b) = &mut l.bias {
                b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let x = frame(&mut rng);
        let affine = |l: &LayerParams, x: &[f64]| -> Vec<f64> {
            let w = l.weight.as_ref().unwrap();
            let (o, i) = (w.shape()[0], w.shape()[1]);
            (0..o)
                .map(|r| {
                    l.bias.as_ref().unwrap().data()[r] as f64
                        + (0..i).map(|c| w.data()[r * i + c] as f64 * x[c]).sum::<f64>()
                })
                .collect()
        };
        let x0: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let h1: Vec<f64> = affine(&params.layers[0], &x0).iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let h2: Vec<f64> = affine(&params.layers[1], &h1).iter().map(|&z| (z.max(0.0) / 0.25).round() * 0.25).collect();
        let expect = affine(&params.layers[2], &h2);
        let mut s = InferenceSession::new(&spec, &params, Mode::Normal).unwrap();
        let got = s.step(&x).unwrap();
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_mode_requires_full_delta_spec() {
        let spec = dense_net(vec![full_dal()], false);
        let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(params.is_err(), "wiring check rejects integrating layer on dense input");
        let mut c = DeltaLayerConfig::new(ActivationFn::Relu);
        c.skip_integration = true;
        let spec = dense_net(vec![ActivationSpec::Delta(c)], false);
        let params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(InferenceSession::new(&spec, &params, Mode::Delta).is_err());
        assert!(InferenceSession::new(&spec, &params, Mode::Hybrid).is_ok());
    }

    #[test]
    fn first_delta_frame_equals_normal_and_idle_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = dense_net(vec![full_dal(), full_dal()], true);
        let params = ParamSet::init(&spec, &mut rng).unwrap();
        let x = frame(&mut rng);
        let mut n = InferenceSession::new(&spec, &params, Mode::Normal).unwrap();
        let mut d = InferenceSession::new(&spec, &params, Mode::Delta).unwrap();
        let a = infer_normal(&mut n, &x).unwrap();
        let b = infer_delta(&mut d, &x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-4);
        let before: Vec<u64> = d.counters().iter().map(|c| c.macs_nonzero).collect();
        for _ in 0..3 {
            let b = infer_delta(&mut d, &x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-4);
        }
        let after: Vec<u64> = d.counters().iter().map(|c| c.macs_nonzero).collect();
        assert_eq!(before, after);
        assert!(infer_normal(&mut d, &x).is_err());
    }

    #[test]
    fn snapshot_restore_resumes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = dense_net(vec![full_dal(), full_dal()], true);
        let params = ParamSet::init(&spec, &mut rng).unwrap();
        let frames: Vec<Tensor> = (0..12).map(|_| frame(&mut rng)).collect();
        let mut a = InferenceSession::new(&spec, &params, Mode::Delta).unwrap();
        let mut expect = Vec::new();
        for f in &frames {
            expect.push(a.step(f).unwrap());
        }
        let mut b = InferenceSession::new(&spec, &params, Mode::Delta).unwrap();
        for f in &frames[..6] {
            b.step(f).unwrap();
        }
        let snap = b.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let snap: SessionSnapshot = serde_json::from_str(&json).unwrap();
        let mut c = InferenceSession::restore(&spec, &params, snap).unwrap();
        for (f, e) in frames[6..].iter().zip(&expect[6..]) {
            assert_eq!(&c.step(f).unwrap(), e);
        }
    }
}
