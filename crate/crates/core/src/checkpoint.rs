//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MKAC" | version | header length | header (JSON network config)
//! tensor count | per tensor: name length, name, rank, dims..., f32 values
//! ```
//!
//! Only the inference network is stored: auxiliary heads never reach a
//! checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::NetConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Purpose};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MKAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Inference parameters of `model`, in registration order.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let tensors = model
            .inference_store()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.cast()))
            .collect();
        Self {
            config: model.config().clone(),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION as usize);
        let header = serde_json::to_vec(&self.config).expect("config serializes");
        put(&mut out, header.len());
        out.extend_from_slice(&header);
        put(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put(&mut out, 4);
            for d in t.dims() {
                put(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let config: NetConfig = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(Error::Format(format!("{name}: rank {rank} exceeds 4")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().skip(4 - rank) {
                *d = r.u32()? as usize;
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies the stored values into `store`, which must hold exactly the
    /// same names and shapes. Otherwise nothing is written and the error
    /// lists every missing, unexpected and mis-shaped tensor.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let stored: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut diff = Vec::new();
        for (_, p) in store.iter() {
            match stored.get(p.name.as_str()) {
                None => diff.push(format!("  missing from checkpoint: {} {:?}", p.name, p.value.dims())),
                Some(t) if t.dims() != p.value.dims() => diff.push(format!(
                    "  shape differs: {} model {:?} checkpoint {:?}",
                    p.name,
                    p.value.dims(),
                    t.dims()
                )),
                Some(_) => {}
            }
        }
        for (name, t) in &self.tensors {
            if store.id(name).is_none() {
                diff.push(format!("  not in model: {} {:?}", name, t.dims()));
            }
        }
        if !diff.is_empty() {
            return Err(Error::Checkpoint(diff.join("\n")));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).expect("checked above");
            store.set_value(id, t.cast())?;
        }
        Ok(())
    }

    /// Inference model described by the stored config.
    pub fn into_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::new(&self.config, Purpose::Inference, 0)?;
        self.apply_to(&mut model.store)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DecoderMode;
    use crate::model::AUX_PREFIX;

    fn tiny(width: usize) -> NetConfig {
        NetConfig {
            width,
            ..NetConfig::small(3)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::<f32>::new(&tiny(8), Purpose::Train, 3).unwrap();
        let ck = Checkpoint::from_model(&m);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        assert!(ck.tensors.iter().all(|(n, _)| !n.starts_with(AUX_PREFIX)));
        let loaded: Model<f32> = back.into_model().unwrap();
        assert_eq!(loaded.store.len(), m.inference_store().len());
        for ((_, a), (_, b)) in loaded.store.iter().zip(m.inference_store().iter()) {
            assert_eq!((&a.name, &a.value), (&b.name, &b.value));
        }
    }

    #[test]
    fn mismatched_config_reports_names() {
        let ck = Checkpoint::from_model(&Model::<f32>::new(&tiny(8), Purpose::Inference, 0).unwrap());
        let mut other = Model::<f32>::new(
            &NetConfig {
                decoder: DecoderMode::Concat,
                width: 16,
                ..tiny(8)
            },
            Purpose::Inference,
            0,
        )
        .unwrap();
        let before = other.store.clone();
        let err = ck.apply_to(&mut other.store).unwrap_err().to_string();
        assert!(err.contains("not in model: decoder.cam1"), "{err}");
        assert!(err.contains("shape differs: stage1.conv"), "{err}");
        assert_eq!(other.store.len(), before.len());
        for ((_, a), (_, b)) in other.store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_corrupt_bytes() {
        let bytes = Checkpoint::from_model(&Model::<f32>::new(&tiny(8), Purpose::Inference, 0).unwrap()).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
