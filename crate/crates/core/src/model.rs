//! Patch-token transformer: encoder, mirrored decoder, projection head and
//! classifier, all expressed over a named parameter store.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetMeta;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::patchmask::PatchConfig;
use crate::seeding;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    pub classifier_hidden_ratio: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            n_blocks: 2,
            n_heads: 8,
            mlp_ratio: 4,
            proj_dim: 128,
            classifier_hidden_ratio: 0.10,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (k, v) in [
            ("model.d_model", self.d_model),
            ("model.n_blocks", self.n_blocks),
            ("model.n_heads", self.n_heads),
            ("model.mlp_ratio", self.mlp_ratio),
        ] {
            if v < 1 {
                bad.push(format!("{k} must be ≥ 1"));
            }
        }
        if self.n_heads >= 1 && !self.d_model.is_multiple_of(self.n_heads) {
            bad.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.proj_dim < 2 {
            bad.push(format!(
                "model.proj_dim must be ≥ 2 (got {})",
                self.proj_dim
            ));
        }
        if !(self.classifier_hidden_ratio > 0.0) {
            bad.push(format!(
                "model.classifier_hidden_ratio must be > 0 (got {})",
                self.classifier_hidden_ratio
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }
}

/// Everything that determines parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub patch: PatchConfig,
    pub seq_len: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(model: ModelConfig, patch: PatchConfig, meta: &DatasetMeta) -> Result<Self> {
        meta.validate()?;
        model.validate()?;
        patch.validate(meta.seq_len)?;
        Ok(Architecture {
            model,
            patch,
            seq_len: meta.seq_len,
            channels: meta.channels,
            num_classes: meta.num_classes,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.seq_len / self.patch.patch_len
    }

    pub fn patch_width(&self) -> usize {
        self.patch.patch_len * self.channels
    }

    /// Tokens per sample entering the encoder during pretraining.
    pub fn pretrain_tokens(&self) -> usize {
        self.patch.encoder_tokens(self.seq_len).expect("validated")
    }

    pub fn classifier_hidden(&self) -> usize {
        let rep = (self.num_patches() * self.model.d_model) as f64;
        ((self.model.classifier_hidden_ratio * rep).round() as usize).max(1)
    }

    /// Hex sha256 over the shape-determining fields (the init seed is excluded).
    pub fn digest(&self) -> String {
        let mut m = self.model;
        m.init_seed = 0;
        let key = serde_json::json!({
            "model": m,
            "patch": self.patch,
            "T": self.seq_len,
            "D": self.channels,
            "num_classes": self.num_classes,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    /// `(name, shape, trainable)` for every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let d = self.model.d_model;
        let h = d * self.model.mlp_ratio;
        let lw = self.patch_width();
        let n = self.num_patches();
        let mut out = Vec::new();
        let mut push =
            |name: String, shape: Vec<usize>, trainable: bool| out.push((name, shape, trainable));
        push("patch_proj.weight".into(), vec![lw, d], true);
        push("patch_proj.bias".into(), vec![d], true);
        push("cls_token".into(), vec![1, d], true);
        push("positional".into(), vec![n + 1, d], false);
        for stack in ["encoder", "decoder"] {
            for i in 0..self.model.n_blocks {
                let p = format!("{stack}.{i}");
                push(format!("{p}.ln1.gamma"), vec![d], true);
                push(format!("{p}.ln1.beta"), vec![d], true);
                for m in ["q", "k", "v", "out"] {
                    push(format!("{p}.attn.{m}.weight"), vec![d, d], true);
                    push(format!("{p}.attn.{m}.bias"), vec![d], true);
                }
                push(format!("{p}.ln2.gamma"), vec![d], true);
                push(format!("{p}.ln2.beta"), vec![d], true);
                push(format!("{p}.mlp.fc1.weight"), vec![d, h], true);
                push(format!("{p}.mlp.fc1.bias"), vec![h], true);
                push(format!("{p}.mlp.fc2.weight"), vec![h, d], true);
                push(format!("{p}.mlp.fc2.bias"), vec![d], true);
            }
        }
        push("decoder.mask_token".into(), vec![1, d], true);
        push("decoder.head.weight".into(), vec![d, lw], true);
        push("decoder.head.bias".into(), vec![lw], true);
        let s = self.pretrain_tokens();
        push("proj_head.fc1.weight".into(), vec![s * d, d], true);
        push("proj_head.fc1.bias".into(), vec![d], true);
        push(
            "proj_head.fc2.weight".into(),
            vec![d, self.model.proj_dim],
            true,
        );
        push("proj_head.fc2.bias".into(), vec![self.model.proj_dim], true);
        let ch = self.classifier_hidden();
        push("classifier.fc1.weight".into(), vec![n * d, ch], true);
        push("classifier.fc1.bias".into(), vec![ch], true);
        push(
            "classifier.fc2.weight".into(),
            vec![ch, self.num_classes],
            true,
        );
        push("classifier.fc2.bias".into(), vec![self.num_classes], true);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub arch: Architecture,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_parts(arch: Architecture, params: Vec<Param<T>>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(ModelParams {
            arch,
            params,
            index,
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn truncated_normal(rng: &mut seeding::Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

fn sinusoidal(rows: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d];
    for pos in 0..rows {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            out[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Initial value of one named tensor; each tensor draws from its own stream.
pub fn init_tensor(arch: &Architecture, name: &str, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let data = if name == "positional" {
        sinusoidal(shape[0], shape[1])
    } else if name.ends_with(".gamma") {
        vec![1.0; len]
    } else if name.ends_with(".bias") || name.ends_with(".beta") {
        vec![0.0; len]
    } else {
        let mut rng = seeding::stream(arch.model.init_seed, name, &[]);
        (0..len)
            .map(|_| truncated_normal(&mut rng) as f32)
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("layout shape")
}

pub fn init_params(arch: &Architecture) -> ModelParams {
    let params = arch
        .layout()
        .into_iter()
        .map(|(name, shape, trainable)| Param {
            value: init_tensor(arch, &name, &shape),
            name,
            trainable,
        })
        .collect();
    ModelParams::from_parts(arch.clone(), params).expect("layout is self-consistent")
}

impl ModelParams {
    /// Replaces every `classifier.*` tensor with a fresh draw.
    pub fn reset_classifier(&mut self) {
        let arch = self.arch.clone();
        for p in &mut self.params {
            if p.name.starts_with("classifier.") {
                p.value = init_tensor(&arch, &p.name, p.value.shape());
            }
        }
    }
}

/// One forward pass. Parameters are bound into the graph on first use, so a
/// branch that is never evaluated never receives a gradient.
pub struct Forward<'p, T: Real = f32> {
    pub g: Graph<T>,
    params: &'p ModelParams<T>,
    bound: Vec<(String, Var)>,
    lookup: HashMap<String, Var>,
    train: bool,
}

impl<'p, T: Real> Forward<'p, T> {
    pub fn new(params: &'p ModelParams<T>, train: bool) -> Self {
        Forward {
            g: Graph::new(),
            params,
            bound: Vec::new(),
            lookup: HashMap::new(),
            train,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.params.arch
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.lookup.get(name) {
            return Ok(v);
        }
        let i = *self
            .params
            .index
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let p = &self.params.params[i];
        let v = if self.train && p.trainable {
            self.g.param(p.value.clone())
        } else {
            self.g.constant(p.value.clone())
        };
        self.bound.push((name.to_string(), v));
        self.lookup.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Rows `table[idx + 1]` for each index, as a constant `[B, S, d]`.
    fn positions(&mut self, idx: &[Vec<usize>]) -> Result<Var> {
        let table = self.params.get("positional").expect("positional");
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        let s = idx.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(idx.len() * s * d);
        for ix in idx {
            if ix.len() != s {
                return Err(Error::contract("ragged patch indices"));
            }
            for &i in ix {
                if i + 1 >= rows {
                    return Err(Error::contract(format!(
                        "patch index {i} outside positional table of {} patches",
                        rows - 1
                    )));
                }
                data.extend_from_slice(&table.data()[(i + 1) * d..(i + 2) * d]);
            }
        }
        Ok(self.g.constant(Tensor::new(vec![idx.len(), s, d], data)?))
    }

    fn attention(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let shape = self.g.shape(x).to_vec();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let heads = self.arch().model.n_heads;
        let dh = d / heads;
        let split = |f: &mut Self, m: &str, perm: &[usize]| -> Result<Var> {
            let y = f.linear(x, &format!("{prefix}.attn.{m}"))?;
            let y = f.g.reshape(y, &[b, s, heads, dh])?;
            f.g.permute(y, perm)
        };
        let q = split(self, "q", &[0, 2, 1, 3])?;
        let kt = split(self, "k", &[0, 2, 3, 1])?;
        let v = split(self, "v", &[0, 2, 1, 3])?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = self.g.softmax(scores, 3)?;
        let ctx = self.g.matmul(att, v)?;
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.g.reshape(ctx, &[b, s, d])?;
        self.linear(ctx, &format!("{prefix}.attn.out"))
    }

    fn block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let a = self.norm(x, &format!("{prefix}.ln1"))?;
        let a = self.attention(a, prefix)?;
        let x = self.g.add(x, a)?;
        let m = self.norm(x, &format!("{prefix}.ln2"))?;
        let m = self.linear(m, &format!("{prefix}.mlp.fc1"))?;
        let m = self.g.gelu(m);
        let m = self.linear(m, &format!("{prefix}.mlp.fc2"))?;
        self.g.add(x, m)
    }

    fn stack(&mut self, mut x: Var, which: &str) -> Result<Var> {
        for i in 0..self.arch().model.n_blocks {
            x = self.block(x, &format!("{which}.{i}"))?;
        }
        Ok(x)
    }

    /// `tokens: [B, S, L·D]` at original patch indices `token_idx`
    /// → `[B, S+1, d]`, row 0 being the cls token.
    pub fn encode(&mut self, tokens: &Tensor<T>, token_idx: &[Vec<usize>]) -> Result<Var> {
        let shape = tokens.shape().to_vec();
        let lw = self.arch().patch_width();
        if shape.len() != 3 || shape[2] != lw || token_idx.len() != shape[0] || shape[1] < 1 {
            return Err(Error::Dimension {
                op: "encode",
                lhs: shape,
                rhs: vec![token_idx.len(), token_idx.first().map_or(0, Vec::len), lw],
            });
        }
        let b = shape[0];
        let d = self.arch().model.d_model;
        let pos = self.positions(token_idx)?;
        let x = self.g.constant(tokens.clone());
        let x = self.linear(x, "patch_proj")?;
        let x = self.g.relu(x);
        let x = self.g.add(x, pos)?;
        let cls = self.p("cls_token")?;
        let table = self.params.get("positional").expect("positional");
        let pos0 = self
            .g
            .constant(Tensor::new(vec![1, d], table.data()[..d].to_vec())?);
        let cls = self.g.add(cls, pos0)?;
        let cls = self.g.reshape(cls, &[1, 1, d])?;
        let cls = self.g.expand(cls, &[b, 1, d])?;
        let x = self.g.concat(&[cls, x], 1)?;
        self.stack(x, "encoder")
    }

    /// Patch rows of `z` flattened per sample: `[B, S·d]`.
    fn flatten_patches(&mut self, z: Var) -> Result<Var> {
        let s = self.g.shape(z).to_vec();
        let rows = self.g.narrow(z, 1, 1, s[1] - 1)?;
        self.g.reshape(rows, &[s[0], (s[1] - 1) * s[2]])
    }

    /// `[B, S+1, d] → [B, proj_dim]`, unit-norm rows.
    pub fn project_head(&mut self, z: Var) -> Result<Var> {
        let flat = self.flatten_patches(z)?;
        let h = self.linear(flat, "proj_head.fc1")?;
        let h = self.g.relu(h);
        let h = self.linear(h, "proj_head.fc2")?;
        Ok(self.g.l2_normalize(h))
    }

    /// Reconstructs the patches at `target_idx` from encoder output `z` whose
    /// patch rows sit at `token_idx`. Targets not among the tokens are decoded
    /// from mask tokens placed at their positions. Returns `[B, K, L·D]`.
    pub fn decode(
        &mut self,
        z: Var,
        token_idx: &[Vec<usize>],
        target_idx: &[Vec<usize>],
    ) -> Result<Var> {
        let shape = self.g.shape(z).to_vec();
        let (b, s1, d) = (shape[0], shape[1], shape[2]);
        if token_idx.len() != b
            || target_idx.len() != b
            || token_idx.iter().any(|t| t.len() + 1 != s1)
        {
            return Err(Error::contract(
                "decode: index lists do not match encoder output",
            ));
        }
        let covered = token_idx
            .iter()
            .zip(target_idx)
            .all(|(tok, tgt)| tgt.iter().all(|i| tok.contains(i)));
        let (seq, order): (Var, Vec<Vec<usize>>) = if covered {
            (z, token_idx.to_vec())
        } else {
            let n = self.arch().num_patches();
            let missing: Vec<Vec<usize>> = token_idx
                .iter()
                .map(|tok| (0..n).filter(|i| !tok.contains(i)).collect())
                .collect();
            let m = missing[0].len();
            if missing.iter().any(|v| v.len() != m) {
                return Err(Error::contract("decode: ragged masked sets"));
            }
            let mask = self.p("decoder.mask_token")?;
            let mask = self.g.reshape(mask, &[1, 1, d])?;
            let mask = self.g.expand(mask, &[b, m, d])?;
            let pos = self.positions(&missing)?;
            let mask = self.g.add(mask, pos)?;
            let full = self.g.concat(&[z, mask], 1)?;
            // Reorder to [cls, patch 0, …, patch N-1].
            let perm: Vec<Vec<usize>> = token_idx
                .iter()
                .zip(&missing)
                .map(|(tok, mis)| {
                    let mut at = vec![0usize; n];
                    for (j, &i) in tok.iter().enumerate() {
                        at[i] = 1 + j;
                    }
                    for (j, &i) in mis.iter().enumerate() {
                        at[i] = s1 + j;
                    }
                    std::iter::once(0).chain(at).collect()
                })
                .collect();
            (self.g.gather_rows(full, perm)?, vec![(0..n).collect(); b])
        };
        let y = self.stack(seq, "decoder")?;
        let rows = self.g.shape(y)[1];
        let patches = self.g.narrow(y, 1, 1, rows - 1)?;
        let out = self.linear(patches, "decoder.head")?;
        let pick: Vec<Vec<usize>> = order
            .iter()
            .zip(target_idx)
            .map(|(ord, tgt)| {
                tgt.iter()
                    .map(|i| ord.iter().position(|o| o == i).expect("covered"))
                    .collect()
            })
            .collect();
        if pick.iter().all(|p| p.iter().copied().eq(0..rows - 1)) {
            Ok(out)
        } else {
            self.g.gather_rows(out, pick)
        }
    }

    /// `[B, N+1, d]` → `(logits [B, C], hidden [B, H])`.
    pub fn classify(&mut self, z: Var) -> Result<(Var, Var)> {
        let n = self.arch().num_patches();
        let rows = self.g.shape(z)[1];
        if rows != n + 1 {
            return Err(Error::contract(format!(
                "classifier expects all {n} patches, got {}",
                rows - 1
            )));
        }
        let flat = self.flatten_patches(z)?;
        let h = self.linear(flat, "classifier.fc1")?;
        let hidden = self.g.relu(h);
        let logits = self.linear(hidden, "classifier.fc2")?;
        Ok((logits, hidden))
    }

    /// Gradients of `loss` for every trainable tensor that took part.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(String, Vec<T>)>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect())
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.iter().map(|(n, _)| n.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchmask::{apply_mask, patchify, MaskedBatch};

    pub(crate) fn micro_arch(keep_zeroed: bool) -> Architecture {
        let meta = DatasetMeta {
            name: "micro".into(),
            seq_len: 16,
            channels: 1,
            num_classes: 3,
            sampling_note: String::new(),
        };
        let model = ModelConfig {
            d_model: 8,
            n_heads: 2,
            proj_dim: 4,
            init_seed: 7,
            ..ModelConfig::default()
        };
        let patch = PatchConfig {
            patch_len: 4,
            theta: 0.5,
            keep_zeroed,
        };
        Architecture::new(model, patch, &meta).unwrap()
    }

    fn series(b: usize, t: usize, seed: u64) -> Vec<Tensor> {
        use rand::Rng as _;
        (0..b)
            .map(|i| {
                let mut r = seeding::stream(seed, "x", &[i as u64]);
                Tensor::new(
                    vec![t, 1],
                    (0..t).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn full_batch(arch: &Architecture, xs: &[Tensor]) -> MaskedBatch {
        let p: Vec<Tensor> = xs
            .iter()
            .map(|x| patchify(x, arch.patch.patch_len).unwrap())
            .collect();
        MaskedBatch::unmasked(&p).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_conventional() {
        let arch = micro_arch(false);
        let a = init_params(&arch);
        assert_eq!(a, init_params(&arch));
        for p in a.params() {
            if p.name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0));
            }
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
            if p.name.ends_with(".weight") || p.name == "cls_token" {
                assert!(p.value.data().iter().all(|&v| v.abs() <= 0.04 + 1e-7));
            }
        }
        assert!(
            !a.params()
                .iter()
                .find(|p| p.name == "positional")
                .unwrap()
                .trainable
        );
        let mut other = arch.clone();
        other.model.init_seed = 8;
        assert_ne!(
            init_params(&other).get("patch_proj.weight"),
            a.get("patch_proj.weight")
        );
        assert_eq!(other.digest(), arch.digest());
    }

    #[test]
    fn fd_shaped_parameter_count() {
        let meta = DatasetMeta {
            name: "fd".into(),
            seq_len: 1280,
            channels: 1,
            num_classes: 3,
            sampling_note: String::new(),
        };
        let arch =
            Architecture::new(ModelConfig::default(), PatchConfig::default(), &meta).unwrap();
        // Independent tally from the documented shapes.
        let (d, lw, n, v, h, p, c) = (
            512usize, 64usize, 20usize, 5usize, 2048usize, 128usize, 3usize,
        );
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d);
        let ch = 1024;
        let oracle = (lw * d + d)
            + d
            + (n + 1) * d
            + 4 * block
            + d
            + (d * lw + lw)
            + (v * d * d + d)
            + (d * p + p)
            + (n * d * ch + ch)
            + (ch * c + c);
        assert_eq!(arch.classifier_hidden(), 1024);
        assert_eq!(init_params(&arch).param_count(), oracle);
        assert_eq!(oracle, 24_554_179);
    }

    #[test]
    fn shape_contract() {
        let arch = micro_arch(false);
        let params = init_params(&arch);
        let xs = series(3, 16, 1);
        let mut rng = seeding::stream(0, "m", &[]);
        let samples: Vec<_> = xs
            .iter()
            .map(|x| {
                let m = crate::patchmask::sample_mask(4, 0.5, &mut rng).unwrap();
                apply_mask(patchify(x, 4).unwrap(), m).unwrap()
            })
            .collect();
        let mb = MaskedBatch::new(&samples, false).unwrap();
        let mut f = Forward::new(&params, true);
        let z = f.encode(&mb.tokens, &mb.token_idx).unwrap();
        assert_eq!(f.g.shape(z), &[3, 3, 8]);
        let h = f.project_head(z).unwrap();
        assert_eq!(f.g.shape(h), &[3, 4]);
        for row in f.g.value(h).data().chunks(4) {
            let n: f32 = row.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
        let rec = f.decode(z, &mb.token_idx, &mb.visible_idx).unwrap();
        assert_eq!(f.g.shape(rec), &[3, 2, 4]);
        let rec_m = f.decode(z, &mb.token_idx, &mb.masked_idx).unwrap();
        assert_eq!(f.g.shape(rec_m), &[3, 2, 4]);
        assert!(f.classify(z).is_err());

        let full = full_batch(&arch, &xs);
        let mut f = Forward::new(&params, false);
        let z = f.encode(&full.tokens, &full.token_idx).unwrap();
        let (logits, hidden) = f.classify(z).unwrap();
        assert_eq!(f.g.shape(logits), &[3, 3]);
        assert_eq!(f.g.shape(hidden), &[3, arch.classifier_hidden()]);
    }

    #[test]
    fn keep_zeroed_decode_gathers_visible() {
        let arch = micro_arch(true);
        let params = init_params(&arch);
        let xs = series(2, 16, 2);
        let samples: Vec<_> = xs
            .iter()
            .map(|x| apply_mask(patchify(x, 4).unwrap(), vec![false, true, true, false]).unwrap())
            .collect();
        let mb = MaskedBatch::new(&samples, true).unwrap();
        let mut f = Forward::new(&params, true);
        let z = f.encode(&mb.tokens, &mb.token_idx).unwrap();
        assert_eq!(f.g.shape(z), &[2, 5, 8]);
        let rec = f.decode(z, &mb.token_idx, &mb.visible_idx).unwrap();
        assert_eq!(f.g.shape(rec), &[2, 2, 4]);
    }

    #[test]
    fn positional_binding_follows_original_index() {
        let arch = micro_arch(false);
        let params = init_params(&arch);
        let x = &series(1, 16, 3)[0];
        let p = patchify(x, 4).unwrap();
        let w = 4;
        let rows = |ix: &[usize]| -> Tensor {
            let data = ix
                .iter()
                .flat_map(|&i| p.data()[i * w..(i + 1) * w].to_vec())
                .collect();
            Tensor::new(vec![1, ix.len(), w], data).unwrap()
        };
        let run = |ix: Vec<usize>| -> Vec<f32> {
            let mut f = Forward::new(&params, false);
            let z = f.encode(&rows(&ix), &[ix]).unwrap();
            f.g.value(z).data().to_vec()
        };
        let a = run(vec![0, 1, 3]);
        let b = run(vec![3, 1, 0]);
        let d = 8;
        let row = |v: &[f32], r: usize| v[r * d..(r + 1) * d].to_vec();
        assert_eq!(row(&a, 0), row(&b, 0));
        assert_eq!(row(&a, 1), row(&b, 3));
        assert_eq!(row(&a, 2), row(&b, 2));
        assert_eq!(row(&a, 3), row(&b, 1));
        // Same content at different original indices gives different embeddings.
        let c = run(vec![0, 1, 2]);
        let mut f = Forward::new(&params, false);
        let z = f.encode(&rows(&[0, 1, 3]), &[vec![0, 1, 2]]).unwrap();
        assert_ne!(f.g.value(z).data(), a.as_slice());
        assert_ne!(c, a);
    }

    #[test]
    fn out_of_range_index_is_contract_error() {
        let arch = micro_arch(false);
        let params = init_params(&arch);
        let t = Tensor::zeros(&[1, 1, 4]);
        let mut f = Forward::new(&params, false);
        assert!(matches!(f.encode(&t, &[vec![4]]), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let arch = micro_arch(false);
        let params = init_params(&arch);
        let full = full_batch(&arch, &series(2, 16, 4));
        let run = || {
            let mut f = Forward::new(&params, false);
            let z = f.encode(&full.tokens, &full.token_idx).unwrap();
            let (l, _) = f.classify(z).unwrap();
            f.g.value(l).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reconstruction_reaches_patch_projection() {
        let arch = micro_arch(false);
        let params = init_params(&arch);
        let full = full_batch(&arch, &series(2, 16, 5));
        let mut f = Forward::new(&params, true);
        let z = f.encode(&full.tokens, &full.token_idx).unwrap();
        let rec = f.decode(z, &full.token_idx, &full.visible_idx).unwrap();
        let target = f.g.constant(full.visible.clone());
        let diff = f.g.sub(rec, target).unwrap();
        let loss = f.g.sum_squares(diff);
        let grads = f.gradients(loss).unwrap();
        let g = &grads
            .iter()
            .find(|(n, _)| n == "patch_proj.weight")
            .unwrap()
            .1;
        assert!(g.iter().any(|&v| v != 0.0));
        assert!(!grads
            .iter()
            .any(|(n, _)| n.starts_with("proj_head") || n.starts_with("classifier")));
    }

    #[test]
    fn identical_rows_project_identically() {
        let arch = micro_arch(false);
        let params = init_params(&arch);
        let x = series(1, 16, 6).remove(0);
        let full = full_batch(&arch, &[x.clone(), x]);
        let mut f = Forward::new(&params, false);
        let z = f.encode(&full.tokens, &full.token_idx).unwrap();
        let (l, _) = f.classify(z).unwrap();
        let v = f.g.value(l).data();
        assert_eq!(v[..3], v[3..]);
    }
}
