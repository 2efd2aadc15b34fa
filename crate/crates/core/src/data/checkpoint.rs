//! Binary checkpoint files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "FNCK" | version u8 | doc_len u32 | doc (JSON: network, class_names, metadata)
//!        | entry_count u32 | entries | payload_len u64 | payload (f32) | crc32 u32
//! entry: name_len u16 | name | ndim u8 | dims (u32 each) | offset u64 (bytes into payload)
//! ```
//!
//! The CRC covers every byte before it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::BnState;
use crate::error::{Error, Result};
use crate::nn::{Model, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FNCK";
pub const FORMAT_VERSION: u8 = 1;

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub class_names: Vec<String>,
    /// Free-form training metadata (epoch, seed, metrics, ...).
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    network: NetworkSpec,
    class_names: Vec<String>,
    metadata: BTreeMap<String, serde_json::Value>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt(detail.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Captures parameters and initialized batch-norm statistics.
    pub fn from_model(model: &Model<f32>, class_names: Vec<String>, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        let mut tensors: Vec<NamedTensor> = model
            .parameters()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        for (i, st) in model.bn_states().iter().enumerate() {
            if let Some(BnState {
                running_mean: Some(m),
                running_var: Some(v),
            }) = st
            {
                for (suffix, vals) in [(RUNNING_MEAN, m), (RUNNING_VAR, v)] {
                    tensors.push(NamedTensor {
                        name: format!("{i}.batchnorm.{suffix}"),
                        shape: vec![vals.len()],
                        data: vals.clone(),
                    });
                }
            }
        }
        Self {
            spec: model.spec().clone(),
            class_names,
            metadata,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model. Every parameter the spec needs must be present
    /// with the right shape, and nothing else may be.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problems = Vec::new();
        let mut used = 0usize;
        let mut model = Model::build(self.spec.clone(), |name, shape| match by_name.get(name) {
            Some(t) if t.shape == shape => {
                used += 1;
                Tensor::new(t.shape.clone(), t.data.clone()).expect("checked shape")
            }
            Some(t) => {
                problems.push(format!("{name}: checkpoint shape {:?}, network expects {shape:?}", t.shape));
                Tensor::zeros(shape)
            }
            None => {
                problems.push(format!("{name}: missing"));
                Tensor::zeros(shape)
            }
        })?;
        for (i, st) in model.bn_states_mut().iter_mut().enumerate() {
            let Some(st) = st else { continue };
            let get = |suffix: &str| by_name.get(format!("{i}.batchnorm.{suffix}").as_str()).copied();
            match (get(RUNNING_MEAN), get(RUNNING_VAR)) {
                (Some(m), Some(v)) => {
                    used += 2;
                    st.running_mean = Some(m.data.clone());
                    st.running_var = Some(v.data.clone());
                }
                (None, None) => {}
                _ => problems.push(format!("layer {i}: incomplete running statistics")),
            }
        }
        if used != self.tensors.len() && problems.is_empty() {
            problems.push(format!("{} tensors do not belong to the network", self.tensors.len() - used));
        }
        if !problems.is_empty() {
            return Err(Error::Structural(format!("checkpoint does not match its network: {}", problems.join("; "))));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let doc = serde_json::to_string(&Document {
            network: self.spec.clone(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
        out.extend_from_slice(doc.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() || t.shape.len() > u8::MAX as usize {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    left: t.shape.clone(),
                    right: vec![t.data.len()],
                });
            }
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing FNCK magic"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 9 {
            return Err(corrupt("unexpected end of file"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let doc_len = r.u32()? as usize;
        let doc: Document = serde_json::from_slice(r.take(doc_len)?).map_err(|e| corrupt(format!("bad document: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let offset = r.u64()?;
            entries.push((name, shape, offset));
        }
        let payload_len = r.u64()?;
        let payload = r.take(usize::try_from(payload_len).map_err(|_| corrupt("payload too large"))?)?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            if offset != expected_offset || offset + 4 * n as u64 > payload_len {
                return Err(corrupt(format!("tensor {name} has offset {offset} outside the payload layout")));
            }
            let start = offset as usize;
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset += 4 * n as u64;
            tensors.push(NamedTensor { name, shape, data });
        }
        if expected_offset != payload_len {
            return Err(corrupt("payload length disagrees with manifest"));
        }
        Ok(Self {
            spec: doc.network,
            class_names: doc.class_names,
            metadata: doc.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Corrupt(d) => Error::Corrupt(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn_senet_with, CnnSenetOptions};

    fn small_model() -> Model<f32> {
        let spec = build_cnn_senet_with(&CnnSenetOptions {
            input_size: 72,
            ..CnnSenetOptions::new(3)
        })
        .unwrap();
        let mut m = Model::new(spec, 5).unwrap();
        if let Some(Some(st)) = m.bn_states_mut().get_mut(1) {
            st.running_mean = Some(vec![0.5; 32]);
            st.running_var = Some(vec![2.0; 32]);
        }
        m
    }

    fn ckpt() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), serde_json::json!(7));
        meta.insert("val_acc".into(), serde_json::json!(0.8125));
        Checkpoint::from_model(&small_model(), vec!["a".into(), "b".into(), "c".into()], meta)
    }

    #[test]
    fn bytes_round_trip() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m = back.to_model().unwrap();
        assert_eq!(m.bn_states()[1].as_ref().unwrap().running_var.as_deref(), Some(&[2.0f32; 32][..]));
    }

    #[test]
    fn truncation_and_bit_flips_are_corruption() {
        let bytes = ckpt().to_bytes().unwrap();
        for cut in [3, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let i = flipped.len() - 40;
        flipped[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_versions_are_refused() {
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn missing_tensor_is_structural() {
        let mut c = ckpt();
        c.tensors.remove(0);
        assert!(matches!(c.to_model(), Err(Error::Structural(_))));
    }
}
