use std::path::Path;

use super::*;
use crate::data::{gen_synthetic, load_corpus, SyntheticSpec};
use crate::model::ModelConfig;
use crate::patchmask::PatchConfig;

fn small_cfg(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        ..RunConfig::default()
    };
    c.model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        mlp_ratio: 2,
        proj_dim: 8,
        init_seed: seed,
        ..ModelConfig::default()
    };
    c.patch = PatchConfig {
        patch_len: 8,
        theta: 0.5,
        keep_zeroed: false,
    };
    c.train.batch_size = 8;
    c.train.epochs_pretrain = 2;
    c.train.epochs_finetune = 2;
    c
}

fn small_corpus(dir: &Path) -> Corpus {
    let spec = SyntheticSpec {
        per_class: 12,
        seq_len: 32,
        ..SyntheticSpec::default()
    };
    gen_synthetic(&spec, 1, dir).unwrap();
    load_corpus(dir).unwrap()
}

fn micro() -> (RunConfig, Corpus) {
    gradcheck::micro().unwrap()
}

fn joint_gradient_errors(cfg: &RunConfig, corpus: &Corpus) -> Vec<(String, f64)> {
    gradcheck::joint_gradient_errors(cfg, corpus).unwrap()
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let (cfg, corpus) = micro();
    let errs = joint_gradient_errors(&cfg, &corpus);
    let trainable = architecture(&cfg, &corpus)
        .unwrap()
        .layout()
        .into_iter()
        .filter(|(n, _, t)| *t && !n.starts_with("classifier") && n != "decoder.mask_token")
        .count();
    assert_eq!(errs.len(), trainable);
    for (name, e) in &errs {
        assert!(*e < gradcheck::TOLERANCE, "{name}: {e}");
    }
}

#[test]
fn masked_target_gradients_reach_mask_token() {
    let (mut cfg, corpus) = micro();
    cfg.loss.reconstruct_target = ReconstructTarget::Masked;
    let errs = joint_gradient_errors(&cfg, &corpus);
    assert!(errs.iter().any(|(n, _)| n == "decoder.mask_token"));
    for (name, e) in &errs {
        assert!(*e < gradcheck::TOLERANCE, "{name}: {e}");
    }
}

#[test]
fn contrastive_only_never_touches_decoder() {
    let (mut cfg, corpus) = micro();
    cfg.loss.mode = LossMode::ContrastiveOnly;
    let arch = architecture(&cfg, &corpus).unwrap();
    let params = init_params(&arch);
    let samples: Vec<&TimeSeriesSample> = corpus.train.iter().take(2).collect();
    let batch = build_pretrain_batch(&samples, &[0, 1], &[0], &cfg).unwrap();
    let mut f = Forward::new(&params, true);
    let terms = pretrain_terms(&mut f, &batch, &cfg.loss).unwrap();
    assert!(terms.l_r.is_none());
    let (total, rep) = weigh(&mut f, &terms, &cfg.loss, &mut None).unwrap();
    assert_eq!(rep.lambda_r, 0.0);
    let grads = f.gradients(total).unwrap();
    assert!(grads.iter().all(|(n, _)| !n.starts_with("decoder")));
}

#[test]
fn pretrain_is_deterministic_and_never_reads_test() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = small_cfg(3);
    let a = pretrain(&corpus, &cfg).unwrap();
    let b = pretrain(&corpus, &cfg).unwrap();
    assert_eq!(
        a.log[0].train.total.to_bits(),
        b.log[0].train.total.to_bits()
    );
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.log.len(), 2);
    let (lc, lr) = a.best.lambdas.unwrap();
    assert_eq!(lc, 1.0);
    let first = a.first_batch;
    assert!((lr - first.l_c.unwrap() / first.l_r.unwrap()).abs() < 1e-12);
    assert!(((first.total - 2.0 * first.l_c.unwrap()) / first.total).abs() < 1e-5);
    let ft = finetune(Some(&a.best), &corpus, &cfg).unwrap();
    assert_eq!(ft.subset_size, 12);
    assert_eq!(corpus.test.reads(), 0);
}

#[test]
fn generative_only_skips_contrastive_term() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut cfg = small_cfg(4);
    cfg.loss.mode = LossMode::GenerativeOnly;
    cfg.train.epochs_pretrain = 4;
    let out = pretrain(&corpus, &cfg).unwrap();
    assert!(out.log.iter().all(|e| e.train.l_c.is_none()));
    assert!(out.log.last().unwrap().train.l_r < out.log[0].train.l_r);
    assert_eq!(out.best.lambdas, Some((0.0, 1.0)));
}

#[test]
fn scratch_runs_ignore_loss_mode() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut gen = small_cfg(5);
    gen.loss.mode = LossMode::GenerativeOnly;
    let co = small_cfg(5);
    let a = finetune(None, &corpus, &gen).unwrap();
    let b = finetune(None, &corpus, &co).unwrap();
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.val, b.val);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = small_cfg(6);
    let ft = finetune(None, &corpus, &cfg).unwrap();
    let before = evaluate(&ft.best, &corpus.val, 8).unwrap();
    let path = dir.path().join("ft.ckpt");
    ft.best.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(evaluate(&back, &corpus.val, 8).unwrap(), before);
    assert_eq!(evaluate(&back, &corpus.val, 3).unwrap(), before);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn evaluation_requires_classifier_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = small_cfg(7);
    let pre = pretrain(&corpus, &cfg).unwrap();
    assert!(matches!(
        evaluate(&pre.best, &corpus.val, 8),
        Err(Error::Config(_))
    ));
    let ft = finetune(Some(&pre.best), &corpus, &cfg).unwrap();
    assert!(matches!(
        evaluate(&ft.best, &[], 8),
        Err(Error::Contract(_))
    ));
    let out = dir.path().join("emb");
    let s = export_embeddings(&ft.best, &corpus.val, 8, &out).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    let text = std::fs::read_to_string(out.join("embeddings.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("label,dim0,dim1"));
    assert_eq!(text.lines().count(), corpus.val.len() + 1);
    let sil: f64 = std::fs::read_to_string(out.join("silhouette.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert_eq!(sil, s);
}

#[test]
fn finetune_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = small_cfg(8);
    let pre = pretrain(&corpus, &cfg).unwrap();
    let mut other = cfg.clone();
    other.model.d_model = 8;
    assert!(matches!(
        finetune(Some(&pre.best), &corpus, &other),
        Err(Error::Config(_))
    ));
}

#[test]
fn finetune_from_checkpoint_keeps_encoder_and_resets_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut cfg = small_cfg(9);
    cfg.train.epochs_finetune = 1;
    cfg.train.finetune_learning_rate = 1e-12;
    let pre = pretrain(&corpus, &cfg).unwrap();
    let ft = finetune(Some(&pre.best), &corpus, &cfg).unwrap();
    let close = |name: &str, a: &ModelParams, b: &ModelParams| {
        a.get(name)
            .unwrap()
            .data()
            .iter()
            .zip(b.get(name).unwrap().data())
            .all(|(x, y)| (x - y).abs() < 1e-6)
    };
    assert!(close(
        "encoder.0.attn.q.weight",
        &ft.last.params,
        &pre.best.params
    ));
    assert!(close(
        "decoder.head.weight",
        &ft.last.params,
        &pre.best.params
    ));
    let fresh = init_params(&architecture(&cfg, &corpus).unwrap());
    assert!(close("classifier.fc1.weight", &ft.last.params, &fresh));
    assert_eq!(ft.last.norm, pre.best.norm);
}

#[test]
fn ablation_shape_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = small_cfg(10);
    let rows = run_ablation(&corpus, &cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(
        rows.iter().map(|r| r.mode.as_str()).collect::<Vec<_>>(),
        ["recon_original", "recon_both", "cogent"]
    );
    let direct = finetune(Some(&pretrain(&corpus, &cfg).unwrap().best), &corpus, &cfg).unwrap();
    assert_eq!(
        rows[2].report,
        evaluate(&direct.best, corpus.test.rows(), 8).unwrap()
    );
    let path = dir.path().join("ablation.csv");
    write_metrics_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 8));
}

#[test]
fn non_finite_parameters_abort_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut cfg = small_cfg(11);
    cfg.train.learning_rate = 1e30;
    cfg.train.epochs_pretrain = 3;
    let err = pretrain(&corpus, &cfg).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { .. } | Error::NonFinite(_)),
        "{err:?}"
    );
}
