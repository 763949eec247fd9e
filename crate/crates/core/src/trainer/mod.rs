//! Pretraining and fine-tuning loops, evaluation, embedding export and the
//! loss-configuration ablation.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;

use std::path::Path;

use log::info;
use serde::Serialize;

use crate::augment::make_view;
use crate::config::RunConfig;
use crate::data::{
    batch_indices, finetune_subset_indices, split_pretrain, BatchMode, Corpus, NormStats,
    TimeSeriesSample,
};
use crate::error::{Error, Result};
use crate::losses::{
    balance_lambdas, contrastive_loss, joint_loss, reconstruction_loss, LossConfig, LossMode,
    LossReport, ReconstructTarget, ReconstructViews,
};
use crate::model::{init_params, Architecture, Forward, ModelParams};
use crate::numerics::{Real, Tensor, Var};
use crate::patchmask::{apply_mask, patchify, sample_mask, MaskedBatch};
use crate::seeding;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState, Stage};
pub use metrics::{compute_metrics, silhouette, MetricReport};

/// Both masked views of one pretraining batch.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub orig: MaskedBatch,
    pub aug: MaskedBatch,
}

/// Augments each sample once and masks original and view independently.
/// Every draw is keyed by `(stream, sample key)`, never by call order.
pub fn build_pretrain_batch(
    samples: &[&TimeSeriesSample],
    keys: &[u64],
    stream: &[u64],
    cfg: &RunConfig,
) -> Result<PretrainBatch> {
    let l = cfg.patch.patch_len;
    let mut orig = Vec::with_capacity(samples.len());
    let mut aug = Vec::with_capacity(samples.len());
    for (s, &k) in samples.iter().zip(keys) {
        let key = |v: u64| [stream, &[k, v]].concat();
        let view = make_view(
            s,
            &cfg.augment,
            &mut seeding::stream(cfg.seed, "augment", &key(0)),
        )?;
        for (x, out, v) in [(&s.values, &mut orig, 1u64), (&view.values, &mut aug, 2)] {
            let p = patchify(x, l)?;
            let m = sample_mask(
                p.shape()[0],
                cfg.patch.theta,
                &mut seeding::stream(cfg.seed, "mask", &key(v)),
            )?;
            out.push(apply_mask(p, m)?);
        }
    }
    Ok(PretrainBatch {
        orig: MaskedBatch::new(&orig, cfg.patch.keep_zeroed)?,
        aug: MaskedBatch::new(&aug, cfg.patch.keep_zeroed)?,
    })
}

/// The loss terms of one batch, before weighting.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub l_c: Option<Var>,
    pub l_r_orig: Option<Var>,
    pub l_r_aug: Option<Var>,
    pub l_r: Option<Var>,
}

fn targets(mb: &MaskedBatch, target: ReconstructTarget) -> Result<(&[Vec<usize>], &Tensor)> {
    match target {
        ReconstructTarget::Visible => Ok((&mb.visible_idx, &mb.visible)),
        ReconstructTarget::Masked => mb
            .masked
            .as_ref()
            .map(|t| (mb.masked_idx.as_slice(), t))
            .ok_or_else(|| Error::config("masked reconstruction needs at least one masked patch")),
    }
}

/// Records every term the loss mode asks for. Branches a mode does not use
/// are never evaluated.
pub fn pretrain_terms<T: Real>(
    f: &mut Forward<'_, T>,
    batch: &PretrainBatch,
    loss: &LossConfig,
) -> Result<Terms> {
    let use_c = loss.mode.uses_contrastive();
    let use_r = loss.mode.uses_reconstruction();
    let both_views = loss.reconstruct_views == ReconstructViews::Both;
    let z = f.encode(&batch.orig.tokens.cast(), &batch.orig.token_idx)?;
    let z_aug = if use_c || (use_r && both_views) {
        Some(f.encode(&batch.aug.tokens.cast(), &batch.aug.token_idx)?)
    } else {
        None
    };
    let l_c = match (use_c, z_aug) {
        (true, Some(za)) => {
            let h = f.project_head(z)?;
            let ha = f.project_head(za)?;
            Some(contrastive_loss(
                &mut f.g,
                h,
                ha,
                loss.tau,
                loss.symmetric_ntxent,
            )?)
        }
        _ => None,
    };
    let recon = |f: &mut Forward<'_, T>, z: Var, mb: &MaskedBatch| -> Result<Var> {
        let (idx, target) = targets(mb, loss.reconstruct_target)?;
        let p_hat = f.decode(z, &mb.token_idx, idx)?;
        let p = f.g.constant(target.cast());
        reconstruction_loss(&mut f.g, p_hat, p)
    };
    let (mut l_r_orig, mut l_r_aug, mut l_r) = (None, None, None);
    if use_r {
        let o = recon(f, z, &batch.orig)?;
        l_r_orig = Some(o);
        l_r = Some(o);
        if both_views {
            let a = recon(f, z_aug.expect("encoded"), &batch.aug)?;
            let s = f.g.add(o, a)?;
            l_r_aug = Some(a);
            l_r = Some(f.g.scale(s, 0.5));
        }
    }
    Ok(Terms {
        l_c,
        l_r_orig,
        l_r_aug,
        l_r,
    })
}

fn value_of<T: Real>(f: &Forward<'_, T>, v: Option<Var>) -> Option<f64> {
    v.map(|v| f.g.value(v).item().f64())
}

/// Resolves λ (balancing on first use under the auto policy) and records the
/// weighted total.
pub fn weigh<T: Real>(
    f: &mut Forward<'_, T>,
    terms: &Terms,
    loss: &LossConfig,
    lambdas: &mut Option<(f64, f64)>,
) -> Result<(Var, LossReport)> {
    let (lc, lr) = match *lambdas {
        Some(l) => l,
        None => {
            let l = match loss.initial_lambdas() {
                Some(l) => l,
                None => balance_lambdas(
                    value_of(f, terms.l_c).unwrap_or(0.0),
                    value_of(f, terms.l_r).unwrap_or(0.0),
                )?,
            };
            *lambdas = Some(l);
            l
        }
    };
    let total = joint_loss(&mut f.g, terms.l_c, terms.l_r, lc, lr)?;
    let report = LossReport {
        l_r_orig: value_of(f, terms.l_r_orig),
        l_r_aug: value_of(f, terms.l_r_aug),
        l_r: value_of(f, terms.l_r),
        l_c: value_of(f, terms.l_c),
        total: f.g.value(total).item().f64(),
        lambda_c: lc,
        lambda_r: lr,
    };
    Ok((total, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means of each reported term.
    pub train: LossReport,
    pub sanity_total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Lowest sanity loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    pub first_batch: LossReport,
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
        reports.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    LossReport {
        l_r_orig: avg(|r| r.l_r_orig),
        l_r_aug: avg(|r| r.l_r_aug),
        l_r: avg(|r| r.l_r),
        l_c: avg(|r| r.l_c),
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        lambda_c: reports.last().map_or(0.0, |r| r.lambda_c),
        lambda_r: reports.last().map_or(0.0, |r| r.lambda_r),
    }
}

pub fn architecture(cfg: &RunConfig, corpus: &Corpus) -> Result<Architecture> {
    Architecture::new(cfg.model, cfg.patch, &corpus.meta)
}

fn sanity_loss(
    params: &ModelParams,
    sanity: &[TimeSeriesSample],
    cfg: &RunConfig,
    lambdas: (f64, f64),
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ix in batch_indices(
        sanity.len(),
        cfg.train.batch_size,
        cfg.seed,
        0,
        BatchMode::Evaluate,
    )? {
        let samples: Vec<&TimeSeriesSample> = ix.iter().map(|&i| &sanity[i]).collect();
        let keys: Vec<u64> = ix.iter().map(|&i| i as u64).collect();
        let batch = build_pretrain_batch(&samples, &keys, &[u64::MAX], cfg)?;
        let mut f = Forward::new(params, false);
        let terms = pretrain_terms(&mut f, &batch, &cfg.loss)?;
        let (_, rep) = weigh(&mut f, &terms, &cfg.loss, &mut Some(lambdas))?;
        total += rep.total * ix.len() as f64;
        count += ix.len();
    }
    Ok(total / count as f64)
}

/// Self-supervised pretraining on the training split. Reads neither the
/// validation nor the test split.
pub fn pretrain(corpus: &Corpus, cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let arch = architecture(cfg, corpus)?;
    let (pre, sanity) = split_pretrain(&corpus.train, &cfg.split_plan())?;
    let norm = NormStats::fit(&pre)?;
    let pre = norm.apply(&pre);
    let sanity = norm.apply(&sanity);
    if pre.len() < cfg.train.batch_size {
        return Err(Error::config(format!(
            "pretraining split has {} samples, fewer than one batch of {}",
            pre.len(),
            cfg.train.batch_size
        )));
    }
    let mut params = init_params(&arch);
    let mut state = AdamState::new(&params);
    let opt = cfg.train.adam(cfg.train.learning_rate);
    let mut lambdas: Option<(f64, f64)> = None;
    let mut first_batch = None;
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let snapshot = |params: &ModelParams, state: &AdamState, lambdas, epoch: usize| Checkpoint {
        params: params.clone(),
        adam: state.clone(),
        stage: Stage::Pretrain,
        lambdas,
        epoch: epoch as u64,
        rng: RngState {
            seed: cfg.seed,
            next_epoch: epoch as u64,
        },
        norm: Some(norm.clone()),
    };
    for epoch in 0..cfg.train.epochs_pretrain {
        let mut reports = Vec::new();
        for (b, ix) in batch_indices(
            pre.len(),
            cfg.train.batch_size,
            cfg.seed,
            epoch,
            BatchMode::Pretrain,
        )?
        .into_iter()
        .enumerate()
        {
            let samples: Vec<&TimeSeriesSample> = ix.iter().map(|&i| &pre[i]).collect();
            let keys: Vec<u64> = ix.iter().map(|&i| i as u64).collect();
            let batch = build_pretrain_batch(&samples, &keys, &[epoch as u64], cfg)?;
            let mut f = Forward::new(&params, true);
            let terms = pretrain_terms(&mut f, &batch, &cfg.loss)?;
            let (total, rep) = weigh(&mut f, &terms, &cfg.loss, &mut lambdas)?;
            if !rep.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = f.gradients(total)?;
            drop(f);
            adam_step(&mut params, &grads, &mut state, &opt)?;
            first_batch.get_or_insert(rep);
            reports.push(rep);
        }
        let lam = lambdas.expect("at least one batch per epoch");
        let sanity_total = sanity_loss(&params, &sanity, cfg, lam)?;
        let train = mean_report(&reports);
        info!(
            "pretrain epoch {epoch}: total {:.5} (l_c {:?}, l_r {:?}) sanity {:.5}",
            train.total, train.l_c, train.l_r, sanity_total
        );
        log.push(EpochLog {
            epoch,
            train,
            sanity_total,
        });
        if best.as_ref().is_none_or(|(s, _)| sanity_total < *s) {
            best = Some((sanity_total, snapshot(&params, &state, lambdas, epoch + 1)));
        }
    }
    let last = snapshot(&params, &state, lambdas, cfg.train.epochs_pretrain);
    Ok(PretrainOutcome {
        best: best.expect("at least one epoch").1,
        last,
        log,
        first_batch: first_batch.expect("at least one batch"),
    })
}

/// Per-sample outputs of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub probs: Vec<Vec<f64>>,
    pub preds: Vec<usize>,
    pub hidden: Vec<Vec<f64>>,
}

fn unmasked_batch(samples: &[&TimeSeriesSample], patch_len: usize) -> Result<MaskedBatch> {
    let p: Vec<Tensor> = samples
        .iter()
        .map(|s| patchify(&s.values, patch_len))
        .collect::<Result<_>>()?;
    MaskedBatch::unmasked(&p)
}

/// Runs the classifier over already-normalized samples.
pub fn predict(
    params: &ModelParams,
    samples: &[TimeSeriesSample],
    batch_size: usize,
) -> Result<Predictions> {
    let c = params.arch.num_classes;
    let mut out = Predictions {
        probs: Vec::new(),
        preds: Vec::new(),
        hidden: Vec::new(),
    };
    for ix in batch_indices(samples.len(), batch_size, 0, 0, BatchMode::Evaluate)? {
        let batch: Vec<&TimeSeriesSample> = ix.iter().map(|&i| &samples[i]).collect();
        let mb = unmasked_batch(&batch, params.arch.patch.patch_len)?;
        let mut f = Forward::new(params, false);
        let z = f.encode(&mb.tokens, &mb.token_idx)?;
        let (logits, hidden) = f.classify(z)?;
        let probs = crate::numerics::softmax(&f.g.value(logits).cast::<f64>(), 1)?;
        for row in probs.data().chunks(c) {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            out.preds.push(best);
            out.probs.push(row.to_vec());
        }
        let h = f.g.value(hidden);
        let w = h.shape()[1];
        out.hidden.extend(
            h.data()
                .chunks(w)
                .map(|r| r.iter().map(|&v| v as f64).collect()),
        );
    }
    Ok(out)
}

fn report_for(
    params: &ModelParams,
    samples: &[TimeSeriesSample],
    batch_size: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let p = predict(params, samples, batch_size)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&p.preds, &labels, &p.probs, params.arch.num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Highest validation F1.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub val: MetricReport,
    pub log: Vec<FinetuneLog>,
    pub subset_size: usize,
}

/// Supervised training of encoder and a fresh classifier on the stratified
/// labelled subset, without masking or augmentation. `from = None` trains
/// from scratch.
pub fn finetune(
    from: Option<&Checkpoint>,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let arch = architecture(cfg, corpus)?;
    let labels: Vec<usize> = corpus.train.iter().map(|s| s.label).collect();
    let subset: Vec<TimeSeriesSample> =
        finetune_subset_indices(&labels, arch.num_classes, &cfg.split_plan())?
            .into_iter()
            .map(|i| corpus.train[i].clone())
            .collect();
    let (mut params, norm, lambdas) = match from {
        Some(ckpt) => {
            ckpt.ensure_compatible(&arch)?;
            let mut p = ckpt.params.clone();
            p.arch.model.init_seed = arch.model.init_seed;
            p.reset_classifier();
            let norm = match &ckpt.norm {
                Some(n) => n.clone(),
                None => NormStats::fit(&subset)?,
            };
            (p, norm, ckpt.lambdas)
        }
        None => (init_params(&arch), NormStats::fit(&subset)?, None),
    };
    let train = norm.apply(&subset);
    let val = norm.apply(&corpus.val);
    let mut state = AdamState::new(&params);
    let opt = cfg.train.adam(cfg.train.finetune_learning_rate);
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint, MetricReport)> = None;
    let snapshot = |params: &ModelParams, state: &AdamState, epoch: usize| Checkpoint {
        params: params.clone(),
        adam: state.clone(),
        stage: Stage::Finetune,
        lambdas,
        epoch: epoch as u64,
        rng: RngState {
            seed: cfg.seed,
            next_epoch: epoch as u64,
        },
        norm: Some(norm.clone()),
    };
    let epochs = cfg.train.epochs_finetune;
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        for (b, ix) in batch_indices(
            train.len(),
            cfg.train.batch_size,
            cfg.seed,
            epoch,
            BatchMode::Finetune,
        )?
        .into_iter()
        .enumerate()
        {
            let batch: Vec<&TimeSeriesSample> = ix.iter().map(|&i| &train[i]).collect();
            let y: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mb = unmasked_batch(&batch, arch.patch.patch_len)?;
            let mut f = Forward::new(&params, true);
            let z = f.encode(&mb.tokens, &mb.token_idx)?;
            let (logits, _) = f.classify(z)?;
            let loss = f.g.cross_entropy(logits, &y)?;
            let value = f.g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += value * ix.len() as f64;
            let grads = f.gradients(loss)?;
            drop(f);
            adam_step(&mut params, &grads, &mut state, &opt)?;
        }
        let evaluate_now = (epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == epochs;
        let val_f1 = if evaluate_now && !val.is_empty() {
            let rep = report_for(&params, &val, cfg.train.batch_size)?;
            let f1 = rep.f1;
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, snapshot(&params, &state, epoch + 1), rep));
            }
            Some(f1)
        } else {
            None
        };
        let train_loss = loss_sum / train.len() as f64;
        info!("finetune epoch {epoch}: loss {train_loss:.5} val F1 {val_f1:?}");
        log.push(FinetuneLog {
            epoch,
            train_loss,
            val_f1,
        });
    }
    let last = snapshot(&params, &state, epochs);
    let (best, val) = match best {
        Some((_, ckpt, rep)) => (ckpt, rep),
        None => return Err(Error::contract("validation split is empty")),
    };
    Ok(FinetuneOutcome {
        best,
        last,
        val,
        log,
        subset_size: train.len(),
    })
}

fn classifier_ready(ckpt: &Checkpoint) -> Result<&NormStats> {
    if ckpt.stage != Stage::Finetune {
        return Err(Error::config(
            "checkpoint holds no trained classifier; fine-tune it first",
        ));
    }
    ckpt.norm.as_ref().ok_or_else(|| {
        Error::Checkpoint("fine-tuned checkpoint lacks normalization statistics".into())
    })
}

/// Metrics of a fine-tuned checkpoint on raw (unnormalized) samples.
pub fn evaluate(
    ckpt: &Checkpoint,
    samples: &[TimeSeriesSample],
    batch_size: usize,
) -> Result<MetricReport> {
    let norm = classifier_ready(ckpt)?;
    report_for(&ckpt.params, &norm.apply(samples), batch_size)
}

/// Writes `embeddings.csv` (`label,dim0,…`) and `silhouette.txt` into
/// `out_dir`; returns the silhouette score.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    samples: &[TimeSeriesSample],
    batch_size: usize,
    out_dir: &Path,
) -> Result<f64> {
    let norm = classifier_ready(ckpt)?;
    if samples.is_empty() {
        return Err(Error::contract(
            "cannot export embeddings of an empty split",
        ));
    }
    let p = predict(&ckpt.params, &norm.apply(samples), batch_size)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    std::fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("embeddings.csv"))?;
    let width = p.hidden.first().map_or(0, Vec::len);
    let mut header = vec!["label".to_string()];
    header.extend((0..width).map(|i| format!("dim{i}")));
    w.write_record(&header)?;
    for (y, h) in labels.iter().zip(&p.hidden) {
        let mut rec = vec![y.to_string()];
        rec.extend(h.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let s = silhouette(&p.hidden, &labels)?;
    std::fs::write(out_dir.join("silhouette.txt"), format!("{s}\n"))?;
    Ok(s)
}

pub const METRICS_HEADER: [&str; 8] = [
    "mode",
    "pretrained",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auroc",
    "auprc",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub mode: String,
    pub pretrained: bool,
    pub report: MetricReport,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let mut rec = vec![r.mode.clone(), r.pretrained.to_string()];
        rec.extend(r.report.headline().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// The three loss configurations of the ablation: original-view
/// reconstruction, both-view reconstruction, and the full joint objective.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |mode: LossMode, views: ReconstructViews| {
        let mut c = base.clone();
        c.loss.mode = mode;
        c.loss.reconstruct_views = views;
        c
    };
    vec![
        (
            "recon_original".into(),
            with(LossMode::GenerativeOnly, ReconstructViews::Original),
        ),
        (
            "recon_both".into(),
            with(LossMode::GenerativeOnly, ReconstructViews::Both),
        ),
        (
            "cogent".into(),
            with(LossMode::Cogent, ReconstructViews::Both),
        ),
    ]
}

/// Pretrain then fine-tune under each ablation configuration and report
/// test-split metrics of the best-validation checkpoint.
pub fn run_ablation(corpus: &Corpus, base: &RunConfig) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (mode, cfg) in ablation_configs(base) {
        let pre = pretrain(corpus, &cfg)?;
        let ft = finetune(Some(&pre.best), corpus, &cfg)?;
        rows.push((mode, ft.best, cfg.train.batch_size));
    }
    // Test rows are read only after every configuration has been trained.
    rows.into_iter()
        .map(|(mode, ckpt, bs)| {
            Ok(MetricRow {
                mode,
                pretrained: true,
                report: evaluate(&ckpt, corpus.test.rows(), bs)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
