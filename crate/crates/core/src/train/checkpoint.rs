//! Binary checkpoint: the magic bytes `AHGN1`, a little-endian `u64` header
//! length, a JSON header, then every parameter as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::dataset::Header;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"AHGN1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

/// Position of the training RNG: the run seed and the number of epochs
/// whose shuffles have been drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    dims: Header,
    config: TrainConfig,
    rng: RngState,
    params: BTreeMap<String, TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: Header,
    pub config: TrainConfig,
    pub rng: RngState,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut payload = Vec::with_capacity(self.params.numel() * 4);
        for (name, p) in self.params.iter() {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: p.value.shape().to_vec(),
                    dtype: "f32".into(),
                    offset: payload.len(),
                },
            );
            for &v in p.value.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&FileHeader {
            dims: self.dims,
            config: self.config.clone(),
            rng: self.rng,
            params: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let start = MAGIC.len() + 8;
        let end = start
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint header is truncated".into()))?;
        let header: FileHeader =
            serde_json::from_slice(&bytes[start..end]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let payload = &bytes[end..];
        let mut params = ParamStore::new();
        for (name, entry) in header.params {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            let stop = entry.offset + numel * 4;
            if stop > payload.len() {
                return Err(Error::Format(format!("{name}: payload is truncated")));
            }
            let data = payload[entry.offset..stop]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(&name, Tensor::new(entry.shape, data)?);
        }
        Ok(Checkpoint {
            dims: header.dims,
            config: header.config,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let dims = Header { d_v: 3, d_s: 2, d_h: 4 };
        Checkpoint {
            dims,
            config: TrainConfig {
                d: 4,
                ..TrainConfig::default()
            },
            rng: RngState { seed: 7, epoch: 2 },
            params: init_params(&dims, 4, 7),
        }
    }

    #[test]
    fn round_trip_within_f32_precision() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.dims, ck.dims);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.rng, ck.rng);
        for (name, p) in ck.params.iter() {
            let q = back.params.value(name).unwrap();
            assert_eq!(q.shape(), p.value.shape());
            assert!(q.max_abs_diff(&p.value) < 1e-7);
        }
        // A second round trip is exact.
        assert_eq!(back.to_bytes().unwrap(), Checkpoint::from_bytes(&back.to_bytes().unwrap()).unwrap().to_bytes().unwrap());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
