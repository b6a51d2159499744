//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "XSSMCKPT"
//! version    u32
//! config     u64 length + UTF-8 JSON of the model config
//! count      u32
//! per tensor:
//!   name     u32 length + UTF-8
//!   ndim     u32
//!   dims     ndim × u64
//!   data     product(dims) × f64
//! ```
//!
//! Decoding treats the input as untrusted: every length is checked against
//! the bytes actually remaining before anything is allocated.

use std::path::Path;

use indexmap::IndexMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lm::LmParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XSSMCKPT";
pub const VERSION: u32 = 1;
const MAX_NDIM: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(config: &ModelConfig, params: &LmParams<Tensor>) -> Self {
        Checkpoint { config: config.clone(), tensors: params.to_named() }
    }

    pub fn into_params(self) -> Result<(ModelConfig, LmParams<Tensor>)> {
        let params = LmParams::from_named(&self.config, self.tensors)?;
        Ok((self.config, params))
    }

    pub fn encode(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        let payload: usize = self.tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.ndim() + 8 * t.len()).sum();
        let mut out = Vec::with_capacity(24 + cfg.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.len_u64()?;
        let cfg_bytes = r.take(cfg_len)?;
        let config: ModelConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let count = r.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()?;
            if ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = r.len_u64()?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} size overflows")))?;
                shape.push(d);
            }
            let nbytes = numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflows".into()))?;
            let raw = r.take(nbytes)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated: wanted {n} bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> (ModelConfig, LmParams<Tensor>) {
        let cfg = ModelConfig { d_model: 8, n_modules: 1, n_heads: 2, d_state: 4, chunk_len: 4, ..ModelConfig::micro() };
        let p = LmParams::init(&cfg, &mut Rng::new(1)).unwrap();
        (cfg, p)
    }

    #[test]
    fn bit_exact_round_trip() {
        let (cfg, p) = sample();
        let mut ck = Checkpoint::from_params(&cfg, &p);
        // awkward values survive too
        ck.tensors.insert("extra".into(), Tensor::vector(vec![-0.0, f64::MIN_POSITIVE, f64::NAN, f64::INFINITY]));
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.config, cfg);
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn params_round_trip_through_file() {
        let (cfg, p) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::from_params(&cfg, &p).save(&path).unwrap();
        let (cfg2, p2) = Checkpoint::load(&path).unwrap().into_params().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (cfg, p) = sample();
        let bytes = Checkpoint::from_params(&cfg, &p).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'Y';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::decode(&version).is_err());
        assert!(Checkpoint::decode(&[]).is_err());
        // absurd config length must not allocate
        let mut huge = MAGIC.to_vec();
        huge.extend_from_slice(&VERSION.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&huge).is_err());
    }

    #[test]
    fn shape_mismatch_against_config() {
        let (cfg, p) = sample();
        let mut ck = Checkpoint::from_params(&cfg, &p);
        ck.config.d_state = 6;
        assert!(matches!(ck.into_params(), Err(Error::Checkpoint(_))));
    }
}
