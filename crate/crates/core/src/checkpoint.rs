//! Versioned model container and content digests.
//!
//! Layout: `GGCKPT\0\0`, u32 version, u64 header length, a JSON header
//! (kind, hyperparameters, digests, tensor names and shapes), then every
//! tensor as little-endian f64 in header order. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GGCKPT\0\0";
pub const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form (object keys sorted, shortest floats).
pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    sha256_hex(canonical_json(&v).as_bytes())
}

pub fn canonical_json(v: &serde_json::Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled,
    // so plain serialization is already canonical.
    serde_json::to_string(v).expect("value serializes")
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    hyper: serde_json::Value,
    digests: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub hyper: serde_json::Value,
    /// e.g. `config`, `dataset`, `vq` lineage digests.
    pub digests: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new<H: Serialize>(kind: &str, hyper: &H, params: ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            hyper: serde_json::to_value(hyper).expect("hyperparameters serialize"),
            digests: BTreeMap::new(),
            params,
        }
    }

    pub fn with_digest(mut self, key: &str, value: impl Into<String>) -> Self {
        self.digests.insert(key.to_string(), value.into());
        self
    }

    pub fn hyper_as<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_value(self.hyper.clone())
            .map_err(|e| Error::Config(format!("{} checkpoint hyperparameters: {e}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Lineage(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            hyper: self.hyper.clone(),
            digests: self.digests.clone(),
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut rest = &body[len..];
        let mut params = ParamStore::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(&format!("truncated tensor {name}")));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            params.add(name, Tensor::new(shape, data)?);
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Self {
            kind: header.kind,
            hyper: header.hyper,
            digests: header.digests,
            params,
        })
    }

    /// Writes the file and returns its sha256.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a", Tensor::normal(&[3, 5], 1.0, &mut rng));
        store.add("b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.1 + 0.2]).unwrap());
        let ck = Checkpoint::new("test", &serde_json::json!({"d": 4, "beta": 0.25}), store).with_digest("config", "abc");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let digest = ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest(), digest);
        assert_eq!(file_digest(&p).unwrap(), digest);
    }

    #[test]
    fn canonical_digest_ignores_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":{"b":2,"a":3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":{"a":3,"b":2},"x":1}"#).unwrap();
        assert_eq!(canonical_digest(&a), canonical_digest(&b));
        assert_ne!(canonical_digest(&a), canonical_digest(&serde_json::json!({"x": 2})));
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint", p).is_err());
    }
}
