use cogent::config::RunConfig;
use cogent::data::{synthetic_corpus, SyntheticSpec};
use cogent::model::ModelConfig;
use cogent::patchmask::PatchConfig;
use cogent::trainer::{finetune, pretrain};

fn cfg(epochs_pretrain: usize, epochs_finetune: usize) -> RunConfig {
    let mut c = RunConfig {
        model: ModelConfig {
            d_model: 64,
            n_heads: 4,
            mlp_ratio: 2,
            proj_dim: 32,
            ..ModelConfig::default()
        },
        patch: PatchConfig {
            patch_len: 16,
            ..PatchConfig::default()
        },
        ..RunConfig::default()
    };
    c.train.batch_size = 16;
    c.train.epochs_pretrain = epochs_pretrain;
    c.train.epochs_finetune = epochs_finetune;
    c
}

#[test]
fn pretraining_halves_the_joint_loss() {
    let corpus = synthetic_corpus(&SyntheticSpec::default(), 0).unwrap();
    let out = pretrain(&corpus, &cfg(30, 1)).unwrap();
    let first = out.first_batch.total;
    let last = out.log.last().unwrap().train.total;
    assert!(
        last < 0.5 * first,
        "first batch {first}, final epoch {last}"
    );
}

#[test]
fn separable_corpus_reaches_high_validation_f1() {
    let corpus = synthetic_corpus(&SyntheticSpec::default(), 0).unwrap();
    let out = finetune(None, &corpus, &cfg(1, 20)).unwrap();
    assert!(out.val.f1 >= 0.95, "validation F1 {}", out.val.f1);
}
