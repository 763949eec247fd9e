//! Binary checkpoint: magic, length-prefixed JSON manifest, little-endian f32
//! parameter payload, then Adam moments in the same layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams, Param};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"COGENT01";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    digest: String,
    arch: Architecture,
    stage: Stage,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    lambda_c: Option<f64>,
    lambda_r: Option<f64>,
    epoch: u64,
    step: u64,
    rng: RngState,
    norm: Option<NormStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub stage: Stage,
    pub lambdas: Option<(f64, f64)>,
    /// Epochs completed.
    pub epoch: u64,
    pub rng: RngState,
    pub norm: Option<NormStats>,
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_f32s(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f32>> {
    let end = *at + 4 * n;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
    *at = end;
    Ok(chunk
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        self.params.arch.digest()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .params()
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    trainable: p.trainable,
                };
                offset += 4 * p.value.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            version: VERSION,
            digest: self.digest(),
            arch: self.params.arch.clone(),
            stage: self.stage,
            tensors,
            payload_bytes: offset,
            lambda_c: self.lambdas.map(|l| l.0),
            lambda_r: self.lambdas.map(|l| l.1),
            epoch: self.epoch,
            step: self.adam.step,
            rng: self.rng,
            norm: self.norm.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 3 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.params() {
            put_f32s(&mut out, p.value.data());
        }
        for buf in self.adam.m.iter().chain(&self.adam.v) {
            put_f32s(&mut out, buf);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let m: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if m.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                m.version
            )));
        }
        if m.digest != m.arch.digest() {
            return Err(Error::Checkpoint(
                "manifest digest does not match its architecture".into(),
            ));
        }
        let mut at = 16 + len;
        let mut params = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            if (at - 16 - len) as u64 != e.offset {
                return Err(Error::Checkpoint(format!("offset mismatch at {}", e.name)));
            }
            params.push(Param {
                name: e.name.clone(),
                value: Tensor::new(e.shape.clone(), take_f32s(bytes, &mut at, n)?)?,
                trainable: e.trainable,
            });
        }
        let params = ModelParams::from_parts(m.arch.clone(), params)?;
        let sizes: Vec<usize> = params.params().iter().map(|p| p.value.len()).collect();
        let moments = |at: &mut usize| -> Result<Vec<Vec<f32>>> {
            sizes.iter().map(|&n| take_f32s(bytes, at, n)).collect()
        };
        let m1 = moments(&mut at)?;
        let m2 = moments(&mut at)?;
        if at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - at
            )));
        }
        let lambdas = match (m.lambda_c, m.lambda_r) {
            (Some(c), Some(r)) => Some((c, r)),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("half-specified λ pair".into())),
        };
        Ok(Checkpoint {
            params,
            adam: AdamState {
                step: m.step,
                m: m1,
                v: m2,
            },
            stage: m.stage,
            lambdas,
            epoch: m.epoch,
            rng: m.rng,
            norm: m.norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Refuses a checkpoint built for a different architecture.
    pub fn ensure_compatible(&self, arch: &Architecture) -> Result<()> {
        if self.params.arch.num_classes != arch.num_classes {
            return Err(Error::config(format!(
                "checkpoint was built for {} classes, corpus has {}",
                self.params.arch.num_classes, arch.num_classes
            )));
        }
        if self.digest() != arch.digest() {
            return Err(Error::config(format!(
                "checkpoint config digest {} does not match this run's {}",
                &self.digest()[..12],
                &arch.digest()[..12]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::model::{init_params, ModelConfig};
    use crate::patchmask::PatchConfig;

    fn sample() -> Checkpoint {
        let meta = DatasetMeta {
            name: "t".into(),
            seq_len: 16,
            channels: 2,
            num_classes: 3,
            sampling_note: String::new(),
        };
        let model = ModelConfig {
            d_model: 8,
            n_heads: 2,
            proj_dim: 4,
            init_seed: 3,
            ..ModelConfig::default()
        };
        let patch = PatchConfig {
            patch_len: 4,
            theta: 0.5,
            keep_zeroed: false,
        };
        let params = init_params(&Architecture::new(model, patch, &meta).unwrap());
        let mut adam = AdamState::new(&params);
        adam.step = 7;
        adam.m[2][1] = 0.25;
        adam.v[0][0] = 1e-9;
        Checkpoint {
            params,
            adam,
            stage: Stage::Pretrain,
            lambdas: Some((1.0, 0.1 + 0.2)),
            epoch: 4,
            rng: RngState {
                seed: 11,
                next_epoch: 4,
            },
            norm: Some(NormStats {
                mean: vec![0.1, -3.3],
                std: vec![1.7, 1e-8],
            }),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("none")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn mismatched_digest_is_refused() {
        let c = sample();
        let mut other = c.params.arch.clone();
        other.model.d_model = 16;
        assert!(matches!(c.ensure_compatible(&other), Err(Error::Config(_))));
        other = c.params.arch.clone();
        other.num_classes = 4;
        let err = c.ensure_compatible(&other).unwrap_err();
        assert!(err.to_string().contains("classes"));
        let mut same = c.params.arch.clone();
        same.model.init_seed = 99;
        c.ensure_compatible(&same).unwrap();
    }
}
