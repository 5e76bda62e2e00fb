//! The toy CNN used by the experiments, in its four setups.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationFn;
use crate::delta::DeltaLayerConfig;
use crate::error::{config_err, Result};
use crate::network::{ActivationSpec, LayerSpec, NetworkSpec, OpSpec, PlainActivation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Plain ReLU network, no sparsity penalty.
    Baseline,
    /// Plain ReLU network with an L1 penalty on its activations.
    Spatial,
    /// Differenced input integrated by a sigma-only first layer; the rest
    /// runs dense.
    InputDelta,
    /// Differenced input and a full delta layer after every hidden op.
    Temporal,
}

impl Preset {
    pub fn wants_sparsity_penalty(self) -> bool {
        matches!(self, Preset::Spatial | Preset::Temporal)
    }
}

fn plain(max_pool: Option<usize>) -> ActivationSpec {
    ActivationSpec::Plain(PlainActivation { function: ActivationFn::Relu, max_pool, sparsity_factor: 0.0 })
}

fn dal(max_pool: Option<usize>, skip_differentiation: bool) -> ActivationSpec {
    let mut c = DeltaLayerConfig::new(ActivationFn::Relu);
    c.max_pool = max_pool;
    c.skip_differentiation = skip_differentiation;
    ActivationSpec::Delta(c)
}

/// conv 4x4/4 (8 filters) + pool 2, conv 3x3 (16 filters) + pool 2,
/// dense 32, dense output. Frames must be square-ish with sides that are
/// multiples of 16, at least 32.
pub fn toy_cnn(input_shape: [usize; 3], classes: usize, preset: Preset) -> Result<NetworkSpec> {
    let [h, w, _] = input_shape;
    let ok = |d: usize| d >= 32 && d.is_multiple_of(16);
    if !ok(h) || !ok(w) || classes == 0 {
        return config_err(format!("toy CNN needs frame sides that are multiples of 16 and at least 32, got {h}x{w}"));
    }
    let acts = match preset {
        Preset::Baseline | Preset::Spatial => [plain(Some(2)), plain(Some(2)), plain(None)],
        Preset::InputDelta => [dal(Some(2), true), plain(Some(2)), plain(None)],
        Preset::Temporal => [dal(Some(2), false), dal(Some(2), false), dal(None, false)],
    };
    let [a0, a1, a2] = acts;
    let spec = NetworkSpec {
        input_shape: input_shape.to_vec(),
        input_delta: matches!(preset, Preset::InputDelta | Preset::Temporal),
        layers: vec![
            LayerSpec { op: OpSpec::Conv2d { kernel: [4, 4], filters: 8, stride: 4 }, activation: a0 },
            LayerSpec { op: OpSpec::Conv2d { kernel: [3, 3], filters: 16, stride: 1 }, activation: a1 },
            LayerSpec { op: OpSpec::Dense { units: 32 }, activation: a2 },
            LayerSpec { op: OpSpec::Dense { units: classes }, activation: ActivationSpec::Output },
        ],
    };
    spec.plan()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_wire_up() {
        for p in [Preset::Baseline, Preset::Spatial, Preset::InputDelta, Preset::Temporal] {
            let s = toy_cnn([64, 64, 1], 4, p).unwrap();
            assert_eq!(s.num_classes(), 4);
            let plan = s.plan().unwrap();
            assert_eq!(plan.layers[1].out_shape, vec![3, 3, 16]);
        }
        assert!(!toy_cnn([64, 64, 1], 4, Preset::Baseline).unwrap().has_delta_layers());
        let t = toy_cnn([64, 64, 1], 4, Preset::Temporal).unwrap();
        assert!(t.is_full_delta());
        assert!(toy_cnn([40, 40, 1], 4, Preset::Baseline).is_err());
    }

    #[test]
    fn toy_cnn_mac_budget() {
        let s = toy_cnn([64, 64, 1], 4, Preset::Baseline).unwrap();
        let total: u64 = s.plan().unwrap().layers.iter().map(|l| l.geometry.total_macs()).sum();
        assert_eq!(total, 32768 + 41472 + 4608 + 128);
    }
}
