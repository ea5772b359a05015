//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SAECKPT\0"
//! version    u32      = 1
//! n_meta     u32
//!   repeated n_meta times:  key_len u32, key utf-8, val_len u32, val utf-8
//! n_tensors  u32
//!   repeated n_tensors times:
//!     name_len u32, name utf-8, flags u8 (bit 0 = trainable),
//!     ndim u32, dims u64 × ndim, data f64 × prod(dims)
//! ```
//!
//! Metadata keys and tensor names are written in sorted order, so equal
//! checkpoints serialize to identical bytes. Optimizer moments are stored as
//! ordinary tensors named `optim.m.<param>` / `optim.v.<param>`, with the step
//! counter and hyperparameters in metadata under `optim.*`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, SaeError};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SAECKPT\0";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl ModelCheckpoint {
    pub fn new(params: ParamStore) -> Self {
        ModelCheckpoint { metadata: BTreeMap::new(), params, optimizer: None }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| parse_err(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| parse_err(format!("metadata `{key}` = `{raw}` is not valid")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.metadata.clone();
        let mut tensors: BTreeMap<String, (&Tensor, bool)> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), (&p.value, p.trainable)))
            .collect();
        if let Some(opt) = &self.optimizer {
            let c = &opt.config;
            meta.insert("optim.step".into(), opt.step.to_string());
            for (k, v) in [
                ("lr_max", c.lr_max),
                ("lr_min", c.lr_min),
                ("beta1", c.beta1),
                ("beta2", c.beta2),
                ("eps", c.eps),
                ("weight_decay", c.weight_decay),
            ] {
                meta.insert(format!("optim.{k}"), format_f64(v));
            }
            meta.insert("optim.batch_size".into(), c.batch_size.to_string());
            for (name, m) in &opt.moments {
                tensors.insert(format!("{M_PREFIX}{name}"), (&m.m, false));
                tensors.insert(format!("{V_PREFIX}{name}"), (&m.v, false));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        for (k, v) in &meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, (t, trainable)) in &tensors {
            put_str(&mut out, name);
            out.push(u8::from(*trainable));
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

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(parse_err("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(parse_err(format!("unsupported checkpoint version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut params = ParamStore::new();
        let mut m_tensors = BTreeMap::new();
        let mut v_tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let flags = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| parse_err(format!("tensor `{name}`: {e}")))?;
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m_tensors.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v_tensors.insert(p.to_string(), t);
            } else {
                params.insert(name, t, flags & 1 == 1);
            }
        }
        if r.pos != bytes.len() {
            return Err(parse_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let optimizer = if metadata.contains_key("optim.step") {
            let mut num = |k: &str| -> Result<f64> {
                metadata
                    .remove(&format!("optim.{k}"))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(format!("bad optimizer field `{k}`")))
            };
            let step = num("step")? as u64;
            let config = AdamWConfig {
                lr_max: num("lr_max")?,
                lr_min: num("lr_min")?,
                beta1: num("beta1")?,
                beta2: num("beta2")?,
                eps: num("eps")?,
                weight_decay: num("weight_decay")?,
                batch_size: num("batch_size")? as usize,
            };
            let mut moments = BTreeMap::new();
            for (name, m) in m_tensors {
                let v = v_tensors
                    .remove(&name)
                    .ok_or_else(|| parse_err(format!("second moment missing for `{name}`")))?;
                moments.insert(name, Moments { m, v });
            }
            Some(AdamW { config, step, moments })
        } else {
            None
        };
        Ok(ModelCheckpoint { metadata, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| SaeError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| SaeError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            SaeError::Parse { message, .. } => SaeError::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

/// Shortest decimal text that parses back to the same `f64`.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_err(message: String) -> SaeError {
    SaeError::Parse { context: "checkpoint".into(), message }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(parse_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| parse_err("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("vit.head.weight", Tensor::randn(&[4, 3], 1.0, &mut rng), true);
        store.insert("vit.bn.running_mean", Tensor::randn(&[3], 1.0, &mut rng), false);
        let mut opt = AdamW::new(AdamWConfig { lr_max: 3e-4, ..Default::default() });
        opt.step = 17;
        opt.moments.insert(
            "vit.head.weight".into(),
            Moments {
                m: Tensor::randn(&[4, 3], 1.0, &mut rng),
                v: Tensor::randn(&[4, 3], 1.0, &mut rng).map(f64::abs),
            },
        );
        let mut ck = ModelCheckpoint::new(store).with_meta("arch", "vit").with_meta("epoch", 5);
        ck.optimizer = Some(opt);
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert!(!back.params.is_trainable("vit.bn.running_mean"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(ModelCheckpoint::from_bytes(b"nope").is_err());
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(SaeError::Parse { .. })));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(ModelCheckpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(ModelCheckpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            ModelCheckpoint::load(dir.path().join("missing")),
            Err(SaeError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_values_survive(values in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.insert("x", Tensor::new(vec![n], values).unwrap(), true);
            let ck = ModelCheckpoint::new(store);
            let back = ModelCheckpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
