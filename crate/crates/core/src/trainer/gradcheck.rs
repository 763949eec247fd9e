//! Finite-difference audit of the full pretraining objective on a micro model.

use super::{architecture, build_pretrain_batch, pretrain_terms, weigh};
use crate::config::RunConfig;
use crate::data::{synthetic_corpus, Corpus, SyntheticSpec, TimeSeriesSample};
use crate::error::Result;
use crate::losses::LambdaPolicy;
use crate::model::{init_params, Forward, ModelConfig, ModelParams};
use crate::patchmask::PatchConfig;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Central differences cannot resolve gradient norms below this; tensors
/// where both sides fall under it (key biases, whose shift cancels in the
/// softmax) count as exact.
pub const NOISE: f64 = 1e-9;

/// T=16, D=1, L=4, d_model=8, two heads, batch of two, fixed λ.
pub fn micro() -> Result<(RunConfig, Corpus)> {
    let spec = SyntheticSpec {
        per_class: 2,
        seq_len: 16,
        ..SyntheticSpec::default()
    };
    let corpus = synthetic_corpus(&spec, 3)?;
    let mut c = RunConfig {
        model: ModelConfig {
            d_model: 8,
            n_heads: 2,
            proj_dim: 4,
            init_seed: 5,
            ..ModelConfig::default()
        },
        patch: PatchConfig {
            patch_len: 4,
            theta: 0.5,
            keep_zeroed: false,
        },
        ..RunConfig::default()
    };
    c.train.batch_size = 2;
    c.loss.lambda_policy = LambdaPolicy::Fixed;
    c.loss.lambda_r = 0.5;
    Ok((c, corpus))
}

fn loss_and_grads(
    params: &ModelParams<f64>,
    cfg: &RunConfig,
    batch: &super::PretrainBatch,
    with_grads: bool,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let mut f = Forward::new(params, true);
    let terms = pretrain_terms(&mut f, batch, &cfg.loss)?;
    let (total, _) = weigh(&mut f, &terms, &cfg.loss, &mut None)?;
    let value = f.g.value(total).item();
    let grads = if with_grads {
        f.gradients(total)?
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

/// Relative error `‖g − ĝ‖ / ‖ĝ‖` per bound tensor between the analytic
/// gradient `g` of the joint loss and central differences `ĝ`, at f64.
pub fn joint_gradient_errors(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<(String, f64)>> {
    let arch = architecture(cfg, corpus)?;
    let params = init_params(&arch).cast::<f64>();
    let samples: Vec<&TimeSeriesSample> = corpus.train.iter().take(cfg.train.batch_size).collect();
    let keys: Vec<u64> = (0..samples.len() as u64).collect();
    let batch = build_pretrain_batch(&samples, &keys, &[0], cfg)?;
    let (_, grads) = loss_and_grads(&params, cfg, &batch, true)?;
    let mut out = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        let (mut diff, mut norm) = (0.0, 0.0);
        for (j, &a) in g.iter().enumerate() {
            let at = |d: f64| -> Result<f64> {
                let mut p = params.clone();
                p.get_mut(&name).expect("bound").data_mut()[j] += d;
                Ok(loss_and_grads(&p, cfg, &batch, false)?.0)
            };
            let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
            diff += (a - numeric).powi(2);
            norm += numeric.powi(2);
        }
        let analytic = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = if norm.sqrt() < NOISE && analytic < NOISE {
            0.0
        } else {
            diff.sqrt() / norm.sqrt()
        };
        out.push((name, err));
    }
    Ok(out)
}
