//! `ILQ1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ILQ1" | u32 version | u32 metadata length | metadata JSON
//!        | f32 blobs in the order listed by `tensors`
//!        | packed weight bytes in the order listed by `packed` (optional)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GaussianPolicy, LayerQuantizers, Linear, Mlp, PolicyMeta};
use crate::error::{CheckpointError, Error, Result};
use crate::quant::{FakeQuantizer, Method, QuantSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ILQ1";
pub const FORMAT_VERSION: u32 = 1;
/// Version of the optional packed-weights section.
pub const PACKED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerMeta {
    pub spec: QuantSpec,
    pub grad_scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerQuantMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<QuantizerMeta>,
    pub weight: QuantizerMeta,
    pub act: QuantizerMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedEntry {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub layer_dims: Vec<usize>,
    pub env: String,
    pub seed: u64,
    pub provenance: String,
    pub quant: Option<Vec<LayerQuantMeta>>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packed_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub packed: Vec<PackedEntry>,
}

/// Raw packed integer weights of one layer, stored after the float blobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSection {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub data: Vec<u8>,
}

fn tensors_of(policy: &GaussianPolicy) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, l) in policy.mlp.layers.iter().enumerate() {
        out.push((format!("layers.{i}.weight"), &l.weight));
        out.push((format!("layers.{i}.bias"), &l.bias));
    }
    out.push(("log_std".into(), &policy.log_std));
    for (i, q) in policy.quant.iter().flatten().enumerate() {
        if let Some(iq) = &q.input {
            out.push((format!("layers.{i}.input_step"), &iq.step));
        }
        out.push((format!("layers.{i}.weight_step"), &q.weight.step));
        out.push((format!("layers.{i}.act_step"), &q.act.step));
    }
    out
}

pub fn encode(policy: &GaussianPolicy, packed: &[PackedSection]) -> Result<Vec<u8>> {
    let tensors = tensors_of(policy);
    let meta = CheckpointMeta {
        layer_dims: policy.mlp.dims.clone(),
        env: policy.meta.env.clone(),
        seed: policy.meta.seed,
        provenance: policy.meta.provenance.clone(),
        quant: policy.quant.as_ref().map(|q| {
            q.iter()
                .map(|q| LayerQuantMeta {
                    input: q.input.as_ref().map(|iq| QuantizerMeta {
                        spec: iq.spec,
                        grad_scale: iq.grad_scale,
                    }),
                    weight: QuantizerMeta {
                        spec: q.weight.spec,
                        grad_scale: q.weight.grad_scale,
                    },
                    act: QuantizerMeta {
                        spec: q.act.spec,
                        grad_scale: q.act.grad_scale,
                    },
                })
                .collect()
        }),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        packed_version: (!packed.is_empty()).then_some(PACKED_VERSION),
        packed: packed
            .iter()
            .map(|p| PackedEntry {
                layer: p.layer,
                rows: p.rows,
                cols: p.cols,
                bits: p.bits,
                bytes: p.data.len(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::json("checkpoint metadata", e))?;
    let floats: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let packed_bytes: usize = packed.iter().map(|p| p.data.len()).sum();
    let mut out = Vec::with_capacity(12 + meta.len() + 4 * floats + packed_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in packed {
        out.extend_from_slice(&p.data);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Metadata(msg.into())
}

fn quantizer(meta: &QuantizerMeta, step: Tensor) -> Result<FakeQuantizer> {
    meta.spec.validate()?;
    if step.data().iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(bad("non-positive step size").into());
    }
    Ok(FakeQuantizer {
        spec: meta.spec,
        step: step.with_requires_grad(meta.spec.method == Method::Lsq),
        grad_scale: meta.grad_scale,
    })
}

pub fn decode(bytes: &[u8]) -> Result<(GaussianPolicy, Vec<PackedSection>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?).map_err(|e| bad(e.to_string()))?;
    if meta.layer_dims.len() < 2 || meta.layer_dims.contains(&0) {
        return Err(bad(format!("invalid layer dims {:?}", meta.layer_dims)).into());
    }
    if let Some(v) = meta.packed_version {
        if v != PACKED_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: v,
                supported: PACKED_VERSION,
            }
            .into());
        }
    }

    let mut blobs = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor too large"))?;
        blobs.push((entry, r.f32s(n)?));
    }
    let mut packed = Vec::with_capacity(meta.packed.len());
    for p in &meta.packed {
        packed.push(PackedSection {
            layer: p.layer,
            rows: p.rows,
            cols: p.cols,
            bits: p.bits,
            data: r.take(p.bytes)?.to_vec(),
        });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }

    let mut blobs = blobs.into_iter();
    let mut next = |name: String, shape: &[usize]| -> Result<Tensor> {
        let (entry, data) = blobs.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if entry.name != name || (!shape.is_empty() && entry.shape != shape) {
            return Err(bad(format!(
                "expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            ))
            .into());
        }
        Tensor::new(entry.shape.clone(), data)
    };

    let dims = &meta.layer_dims;
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        layers.push(Linear {
            weight: next(format!("layers.{i}.weight"), &[w[0], w[1]])?,
            bias: next(format!("layers.{i}.bias"), &[w[1]])?,
        });
    }
    let act_dim = dims[dims.len() - 1];
    let log_std = next("log_std".into(), &[1, act_dim])?;
    let quant = match &meta.quant {
        None => None,
        Some(qm) => {
            let mut q = Vec::with_capacity(qm.len());
            for (i, m) in qm.iter().enumerate() {
                let input = match &m.input {
                    Some(im) => Some(quantizer(im, next(format!("layers.{i}.input_step"), &[])?)?),
                    None => None,
                };
                let weight = quantizer(&m.weight, next(format!("layers.{i}.weight_step"), &[])?)?;
                let act = quantizer(&m.act, next(format!("layers.{i}.act_step"), &[])?)?;
                q.push(LayerQuantizers { input, weight, act });
            }
            Some(q)
        }
    };
    if blobs.next().is_some() {
        return Err(bad("unexpected extra tensors").into());
    }

    let mut policy = GaussianPolicy {
        mlp: Mlp {
            dims: dims.clone(),
            layers,
        },
        log_std,
        quant: None,
        meta: PolicyMeta {
            env: meta.env,
            seed: meta.seed,
            provenance: meta.provenance,
        },
    };
    if let Some(q) = quant {
        policy.set_quantizers(q)?;
    }
    Ok((policy, packed))
}

pub fn save(policy: &GaussianPolicy, path: impl AsRef<Path>) -> Result<()> {
    save_with_packed(policy, &[], path)
}

pub fn save_with_packed(policy: &GaussianPolicy, packed: &[PackedSection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(policy, packed)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<GaussianPolicy> {
    load_with_packed(path).map(|(p, _)| p)
}

pub fn load_with_packed(path: impl AsRef<Path>) -> Result<(GaussianPolicy, Vec<PackedSection>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
