//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one buffer per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Weight decay applies to affine weights only.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One update. Tensors absent from `grads` are left untouched; a non-finite
/// gradient aborts before anything changes.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(String, Vec<f32>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let index: Vec<usize> = grads
        .iter()
        .map(|(name, g)| {
            let i = params
                .params()
                .iter()
                .position(|p| &p.name == name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown tensor {name}")))?;
            if params.params()[i].value.len() != g.len() || !params.params()[i].trainable {
                return Err(Error::contract(format!("gradient for {name} does not fit")));
            }
            Ok(i)
        })
        .collect::<Result<_>>()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((name, g), i) in grads.iter().zip(index) {
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = params.params_mut()[i].value.data_mut();
        for j in 0..g.len() {
            let gj = g[j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let wj = w[j] as f64;
            let update = (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps) + wd * wj;
            w[j] = (wj - cfg.lr * update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::model::{init_params, Architecture, ModelConfig};
    use crate::oracle;
    use crate::patchmask::PatchConfig;

    fn tiny() -> ModelParams {
        let meta = DatasetMeta {
            name: "t".into(),
            seq_len: 8,
            channels: 1,
            num_classes: 2,
            sampling_note: String::new(),
        };
        let model = ModelConfig {
            d_model: 4,
            n_blocks: 1,
            n_heads: 1,
            mlp_ratio: 1,
            proj_dim: 2,
            ..ModelConfig::default()
        };
        let patch = PatchConfig {
            patch_len: 2,
            theta: 0.5,
            keep_zeroed: false,
        };
        init_params(&Architecture::new(model, patch, &meta).unwrap())
    }

    fn grads_like(p: &ModelParams, value: f32) -> Vec<(String, Vec<f32>)> {
        p.params()
            .iter()
            .filter(|q| q.trainable)
            .map(|q| (q.name.clone(), vec![value; q.value.len()]))
            .collect()
    }

    #[test]
    fn zero_gradient_only_decays_weights() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &grads_like(&before, 0.0), &mut s, &cfg).unwrap();
        for (a, b) in p.params().iter().zip(before.params()) {
            let factor = if decays(&a.name) { 0.95 } else { 1.0 };
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((*x as f64 - *y as f64 * factor).abs() < 1e-7, "{}", a.name);
            }
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = tiny();
        let name = "cls_token";
        p.get_mut(name).unwrap().data_mut().fill(0.0);
        let mut s = AdamState::new(&p);
        let g = vec![(name.to_string(), vec![1.0f32; 4])];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        let expect = oracle::adam_first_step(0.0, 1.0, 0.1, 1e-8);
        for &w in p.get(name).unwrap().data() {
            assert!((w as f64 - expect).abs() < 1e-7);
            assert!((w as f64 + 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_changes_nothing() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = grads_like(&p, 0.1);
        g[3].1[0] = f32::NAN;
        let err = adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains(&g[3].0), "{err}");
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn three_steps_are_deterministic() {
        let run = || {
            let mut p = tiny();
            let mut s = AdamState::new(&p);
            for k in 0..3 {
                let g = grads_like(&p, 0.01 * (k as f32 + 1.0));
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_tensors_reject_gradients() {
        let mut p = tiny();
        let mut s = AdamState::new(&p);
        let n = p.get("positional").unwrap().len();
        let g = vec![("positional".to_string(), vec![0.0; n])];
        assert!(adam_step(&mut p, &g, &mut s, &AdamConfig::default()).is_err());
    }
}
