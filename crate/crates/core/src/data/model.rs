//! Model container: `"DMDL"`, u16 version, u16 reserved, u64 manifest
//! length, a JSON manifest, zero padding to an 8-byte boundary, then raw
//! little-endian tensor payloads, each starting at an 8-byte-aligned
//! offset relative to the payload start.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::delta::DeltaLayerState;
use crate::error::{format_err, Error, Result};
use crate::network::{LayerParams, Mode, NetworkSpec, ParamSet, SessionSnapshot};
use crate::ops::OpCounter;
use crate::tensor::{num_elements, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"DMDL";
pub const MODEL_VERSION: u16 = 1;
const PREFIX_LEN: usize = 4 + 2 + 2 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateLayerMeta {
    layer: usize,
    t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    mode: Mode,
    t: u64,
    delta_layers: Vec<StateLayerMeta>,
    counters: Vec<OpCounter>,
    activity: Vec<crate::network::Activity>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snapshot: Option<SnapshotMeta>,
}

/// Everything a model file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedModel {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub snapshot: Option<SessionSnapshot>,
}

enum Payload<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

struct Builder<'a> {
    entries: Vec<TensorEntry>,
    payloads: Vec<Payload<'a>>,
    offset: u64,
}

impl<'a> Builder<'a> {
    fn push(&mut self, name: String, shape: &[usize], p: Payload<'a>) {
        let (dtype, len) = match &p {
            Payload::F32(d) => (Dtype::F32, d.len()),
            Payload::F64(d) => (Dtype::F64, d.len()),
        };
        self.entries.push(TensorEntry { name, dtype, shape: shape.to_vec(), offset: self.offset });
        self.offset += ((len * dtype.size()) as u64).next_multiple_of(8);
        self.payloads.push(p);
    }
}

pub fn write_model<W: Write>(
    spec: &NetworkSpec,
    params: &ParamSet,
    snapshot: Option<&SessionSnapshot>,
    mut out: W,
) -> Result<()> {
    params.check(spec)?;
    let mut b = Builder { entries: Vec::new(), payloads: Vec::new(), offset: 0 };
    for (i, l) in params.layers.iter().enumerate() {
        for (kind, t) in [("weight", &l.weight), ("bias", &l.bias), ("q", &l.q)] {
            if let Some(t) = t {
                b.push(format!("layers.{i}.{kind}"), t.shape(), Payload::F32(t.data()));
            }
        }
    }
    let snapshot_meta = snapshot.map(|s| {
        b.push("state.prev_frame".into(), &[s.prev_frame.len()], Payload::F64(&s.prev_frame));
        b.push("state.output_acc".into(), &[s.output_acc.len()], Payload::F64(&s.output_acc));
        let mut delta_layers = Vec::new();
        for (i, st) in s.dal_states.iter().enumerate() {
            if let Some(st) = st {
                b.push(format!("state.{i}.z"), st.z.shape(), Payload::F64(st.z.data()));
                b.push(format!("state.{i}.o_prev"), st.o_prev.shape(), Payload::F64(st.o_prev.data()));
                b.push(format!("state.{i}.q"), st.q.shape(), Payload::F32(st.q.data()));
                delta_layers.push(StateLayerMeta { layer: i, t: st.t });
            }
        }
        SnapshotMeta { mode: s.mode, t: s.t, delta_layers, counters: s.counters.clone(), activity: s.activity.clone() }
    });
    let manifest = Manifest { spec: spec.clone(), tensors: b.entries, snapshot: snapshot_meta };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(PREFIX_LEN + json.len() + b.offset as usize + 8);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.resize(buf.len().next_multiple_of(8), 0);
    for p in &b.payloads {
        match p {
            Payload::F32(d) => d.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            Payload::F64(d) => d.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        buf.resize(buf.len().next_multiple_of(8), 0);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_model(
    path: impl AsRef<Path>,
    spec: &NetworkSpec,
    params: &ParamSet,
    snapshot: Option<&SessionSnapshot>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_model(spec, params, snapshot, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    base: usize,
    entries: Vec<TensorEntry>,
}

impl Reader<'_> {
    fn find(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn raw(&self, e: &TensorEntry) -> Result<(usize, &[u8])> {
        let n = num_elements(&e.shape);
        let start = self.base as u64 + e.offset;
        let len = (n * e.dtype.size()) as u64;
        if !e.offset.is_multiple_of(8) {
            return format_err(start, format!("tensor {} is not 8-byte aligned", e.name));
        }
        if start + len > self.bytes.len() as u64 {
            return format_err(self.bytes.len() as u64, format!("payload of tensor {} truncated", e.name));
        }
        Ok((start as usize, &self.bytes[start as usize..(start + len) as usize]))
    }

    fn f32(&self, name: &str) -> Result<Option<Tensor>> {
        let Some(e) = self.find(name) else { return Ok(None) };
        let (start, raw) = self.raw(e)?;
        if e.dtype != Dtype::F32 {
            return format_err(start as u64, format!("tensor {name} must be f32"));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(e.shape.clone(), data)
            .map(Some)
            .map_err(|err| Error::Format { offset: start as u64, message: format!("tensor {name}: {err}") })
    }

    fn f64(&self, name: &str) -> Result<Tensor<f64>> {
        let Some(e) = self.find(name) else {
            return format_err(self.base as u64, format!("snapshot tensor {name} missing"));
        };
        let (start, raw) = self.raw(e)?;
        if e.dtype != Dtype::F64 {
            return format_err(start as u64, format!("tensor {name} must be f64"));
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Format { offset: start as u64, message: format!("tensor {name}: {err}") })
    }
}

pub fn parse_model(bytes: &[u8]) -> Result<LoadedModel> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return format_err(0, "bad magic, expected \"DMDL\"");
    }
    if bytes.len() < PREFIX_LEN {
        return format_err(bytes.len() as u64, "header truncated");
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return format_err(4, format!("unsupported model version {version}, expected {MODEL_VERSION}"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if manifest_len > (bytes.len() - PREFIX_LEN) as u64 {
        return format_err(8, "manifest length exceeds file size");
    }
    let manifest_end = PREFIX_LEN + manifest_len as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[PREFIX_LEN..manifest_end])
        .map_err(|e| Error::Format { offset: PREFIX_LEN as u64, message: format!("manifest: {e}") })?;
    let reader = Reader { bytes, base: manifest_end.next_multiple_of(8), entries: manifest.tensors };
    let spec = manifest.spec;
    let plan = spec.plan().map_err(|e| Error::Format { offset: PREFIX_LEN as u64, message: e.to_string() })?;
    let mut layers = Vec::with_capacity(plan.layers.len());
    for i in 0..plan.layers.len() {
        layers.push(LayerParams {
            weight: reader.f32(&format!("layers.{i}.weight"))?,
            bias: reader.f32(&format!("layers.{i}.bias"))?,
            q: reader.f32(&format!("layers.{i}.q"))?,
        });
    }
    let params = ParamSet { layers };
    params.check(&spec).map_err(|e| Error::Format {
        offset: reader.base as u64,
        message: format!("parameters do not fit the network: {e}"),
    })?;
    let snapshot = match manifest.snapshot {
        None => None,
        Some(meta) => {
            let mut dal_states: Vec<Option<DeltaLayerState>> = vec![None; plan.layers.len()];
            for m in &meta.delta_layers {
                let Some(slot) = dal_states.get_mut(m.layer) else {
                    return format_err(PREFIX_LEN as u64, format!("snapshot names unknown layer {}", m.layer));
                };
                let q = reader.f32(&format!("state.{}.q", m.layer))?.ok_or_else(|| Error::Format {
                    offset: reader.base as u64,
                    message: format!("snapshot q for layer {} missing", m.layer),
                })?;
                *slot = Some(DeltaLayerState {
                    z: reader.f64(&format!("state.{}.z", m.layer))?,
                    o_prev: reader.f64(&format!("state.{}.o_prev", m.layer))?,
                    q,
                    t: m.t,
                });
            }
            Some(SessionSnapshot {
                mode: meta.mode,
                t: meta.t,
                prev_frame: reader.f64("state.prev_frame")?.into_data(),
                dal_states,
                output_acc: reader.f64("state.output_acc")?.into_data(),
                counters: meta.counters,
                activity: meta.activity,
            })
        }
    };
    Ok(LoadedModel { spec, params, snapshot })
}

pub fn read_model<R: Read>(mut input: R) -> Result<LoadedModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_model(&bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    parse_model(&std::fs::read(path)?)
}
