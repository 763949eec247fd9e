//! Non-overlapping patching and exact-count patch masking.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeding::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Patch length `L` in time steps; a patch spans all channels.
    pub patch_len: usize,
    /// Masking ratio θ.
    pub theta: f64,
    /// Feed masked patches to the encoder as zero tokens instead of dropping them.
    pub keep_zeroed: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_len: 64,
            theta: 0.75,
            keep_zeroed: false,
        }
    }
}

pub fn masked_count(n: usize, theta: f64) -> usize {
    (theta * n as f64).round() as usize
}

impl PatchConfig {
    pub fn num_patches(&self, seq_len: usize) -> Result<usize> {
        if self.patch_len == 0 || self.patch_len > seq_len {
            return Err(Error::config(format!(
                "patch length {} must lie in [1, T={seq_len}]",
                self.patch_len
            )));
        }
        Ok(seq_len / self.patch_len)
    }

    pub fn num_visible(&self, seq_len: usize) -> Result<usize> {
        let n = self.num_patches(seq_len)?;
        Ok(n - masked_count(n, self.theta).min(n))
    }

    /// Token count the encoder sees per sample during pretraining.
    pub fn encoder_tokens(&self, seq_len: usize) -> Result<usize> {
        if self.keep_zeroed {
            self.num_patches(seq_len)
        } else {
            self.num_visible(seq_len)
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::config(format!(
                "patch.theta must lie in [0, 1) (got {})",
                self.theta
            )));
        }
        if self.num_visible(seq_len)? < 1 {
            return Err(Error::config(format!(
                "masking ratio {} leaves no visible patch out of {}",
                self.theta,
                self.num_patches(seq_len)?
            )));
        }
        Ok(())
    }
}

/// `[T, D] → [N, L, D]` with `N = ⌊T/L⌋`; trailing `T mod L` rows are dropped.
pub fn patchify(x: &Tensor, patch_len: usize) -> Result<Tensor> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if patch_len == 0 || patch_len > t {
        return Err(Error::config(format!(
            "patch length {patch_len} must lie in [1, T={t}]"
        )));
    }
    let n = t / patch_len;
    Tensor::new(
        vec![n, patch_len, d],
        x.data()[..n * patch_len * d].to_vec(),
    )
}

/// Binary mask with exactly `round(θ·N)` zeros (masked) at uniformly random
/// positions; `true` marks a visible patch.
pub fn sample_mask(n: usize, theta: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    let masked = masked_count(n, theta);
    if n == 0 || masked >= n {
        return Err(Error::config(format!(
            "masking ratio {theta} leaves no visible patch out of {n}"
        )));
    }
    let mut m = vec![true; n];
    for i in index::sample(rng, n, masked) {
        m[i] = false;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchedSample {
    /// `[N, L, D]`
    pub patches: Tensor,
    pub mask: Vec<bool>,
    /// Original indices of the visible patches, increasing.
    pub visible_idx: Vec<usize>,
}

pub fn apply_mask(patches: Tensor, mask: Vec<bool>) -> Result<PatchedSample> {
    if patches.shape()[0] != mask.len() {
        return Err(Error::contract(format!(
            "mask length {} does not match {} patches",
            mask.len(),
            patches.shape()[0]
        )));
    }
    let visible_idx = (0..mask.len()).filter(|&i| mask[i]).collect();
    Ok(PatchedSample {
        patches,
        mask,
        visible_idx,
    })
}

impl PatchedSample {
    pub fn num_patches(&self) -> usize {
        self.mask.len()
    }

    fn patch_width(&self) -> usize {
        self.patches.shape()[1] * self.patches.shape()[2]
    }

    fn rows(&self, idx: &[usize]) -> Vec<f32> {
        let w = self.patch_width();
        idx.iter()
            .flat_map(|&i| self.patches.data()[i * w..(i + 1) * w].iter().copied())
            .collect()
    }

    pub fn masked_idx(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    /// Visible patches flattened to `[V, L·D]`.
    pub fn visible_patches(&self) -> Tensor {
        let w = self.patch_width();
        Tensor::new(
            vec![self.visible_idx.len(), w],
            self.rows(&self.visible_idx),
        )
        .expect("visible")
    }

    /// The literal `x ∘ m` form: all `N` patches, masked ones zeroed, `[N, L·D]`.
    pub fn zeroed_patches(&self) -> Tensor {
        let w = self.patch_width();
        let mut data = self.patches.data().to_vec();
        for (i, &keep) in self.mask.iter().enumerate() {
            if !keep {
                data[i * w..(i + 1) * w].fill(0.0);
            }
        }
        Tensor::new(vec![self.mask.len(), w], data).expect("zeroed")
    }
}

/// A batch of masked samples laid out for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// Encoder input `[B, S, L·D]`.
    pub tokens: Tensor,
    /// Original patch index of each encoder token.
    pub token_idx: Vec<Vec<usize>>,
    pub visible_idx: Vec<Vec<usize>>,
    pub masked_idx: Vec<Vec<usize>>,
    /// Visible patches `[B, V, L·D]` (reconstruction targets).
    pub visible: Tensor,
    /// Masked patches `[B, N−V, L·D]`, absent when nothing is masked.
    pub masked: Option<Tensor>,
    pub num_patches: usize,
}

impl MaskedBatch {
    pub fn new(samples: &[PatchedSample], keep_zeroed: bool) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("empty masked batch"))?;
        let (n, v, w) = (
            first.num_patches(),
            first.visible_idx.len(),
            first.patch_width(),
        );
        if samples
            .iter()
            .any(|s| s.num_patches() != n || s.visible_idx.len() != v || s.patch_width() != w)
        {
            return Err(Error::contract(
                "samples in a batch must share N, V and patch size",
            ));
        }
        let b = samples.len();
        let masked_idx: Vec<Vec<usize>> = samples.iter().map(PatchedSample::masked_idx).collect();
        let visible_idx: Vec<Vec<usize>> = samples.iter().map(|s| s.visible_idx.clone()).collect();
        let (tokens, token_idx) = if keep_zeroed {
            let data = samples
                .iter()
                .flat_map(|s| s.zeroed_patches().into_data())
                .collect();
            (
                Tensor::new(vec![b, n, w], data)?,
                vec![(0..n).collect::<Vec<_>>(); b],
            )
        } else {
            let data = samples
                .iter()
                .flat_map(|s| s.rows(&s.visible_idx))
                .collect();
            (Tensor::new(vec![b, v, w], data)?, visible_idx.clone())
        };
        let visible = Tensor::new(
            vec![b, v, w],
            samples
                .iter()
                .flat_map(|s| s.rows(&s.visible_idx))
                .collect(),
        )?;
        let masked = if n > v {
            Some(Tensor::new(
                vec![b, n - v, w],
                samples
                    .iter()
                    .zip(&masked_idx)
                    .flat_map(|(s, ix)| s.rows(ix))
                    .collect(),
            )?)
        } else {
            None
        };
        Ok(MaskedBatch {
            tokens,
            token_idx,
            visible_idx,
            masked_idx,
            visible,
            masked,
            num_patches: n,
        })
    }

    /// Every patch visible, for fine-tuning and evaluation.
    pub fn unmasked(patched: &[Tensor]) -> Result<Self> {
        let samples: Vec<PatchedSample> = patched
            .iter()
            .map(|p| apply_mask(p.clone(), vec![true; p.shape()[0]]))
            .collect::<Result<_>>()?;
        MaskedBatch::new(&samples, false)
    }
}
