//! Library-versus-oracle checks run by the `selfcheck` subcommand and the
//! acceptance suite. Each returns a named pass/fail with the observed error.

use rand::Rng;

use crate::data::DatasetMeta;
use crate::error::Result;
use crate::losses::contrastive_loss;
use crate::model::{init_params, Architecture, Forward, ModelConfig};
use crate::numerics::{Graph, Tensor};
use crate::oracle;
use crate::patchmask::{apply_mask, patchify, sample_mask, MaskedBatch, PatchConfig};
use crate::seeding;
use crate::trainer::adam::{adam_step, AdamConfig, AdamState};
use crate::trainer::gradcheck;
use crate::trainer::metrics::{compute_metrics, silhouette};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check {
            name,
            passed,
            detail,
        }
    }

    fn failed(name: &'static str, e: crate::Error) -> Self {
        Check::new(name, false, format!("error: {e}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn guard(name: &'static str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::failed(name, e))
}

pub const NTXENT_TOLERANCE: f64 = 1e-5;
pub const CURVE_TOLERANCE: f64 = 1e-9;
pub const SILHOUETTE_HAND: f64 = 0.90025;
pub const SILHOUETTE_TOLERANCE: f64 = 1e-4;

/// Every tensor of the micro model, joint loss, central differences.
pub fn gradients() -> Check {
    const NAME: &str = "joint-loss gradients vs finite differences";
    guard(NAME, || {
        let (cfg, corpus) = gradcheck::micro()?;
        let errs = gradcheck::joint_gradient_errors(&cfg, &corpus)?;
        let (worst_name, worst) = errs
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .unwrap_or_default();
        Ok(Check::new(
            NAME,
            !errs.is_empty() && worst < gradcheck::TOLERANCE,
            format!("{} tensors, worst {worst:.2e} at {worst_name}", errs.len()),
        ))
    })
}

fn ntxent(h: &[Vec<f64>], h_aug: &[Vec<f64>], tau: f64, symmetric: bool) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(h)?);
    let b = g.constant(Tensor::from_rows(h_aug)?);
    let l = contrastive_loss(&mut g, a, b, tau, symmetric)?;
    Ok(g.value(l).item())
}

/// 20 random instances with B ≤ 4 and width ≤ 8.
pub fn ntxent_brute_force() -> Check {
    const NAME: &str = "NT-Xent vs brute force";
    guard(NAME, || {
        let mut rng = seeding::stream(0, "selfcheck-ntxent", &[]);
        let mut worst: f64 = 0.0;
        for k in 0..20 {
            let b = rng.random_range(1..=4);
            let w = rng.random_range(1..=8);
            let mut rows = || -> Vec<Vec<f64>> {
                (0..b)
                    .map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let (h, h_aug) = (rows(), rows());
            let tau = [0.1, 0.2, 0.5, 1.0][k % 4];
            let symmetric = k % 2 == 1;
            let got = ntxent(&h, &h_aug, tau, symmetric)?;
            worst =
                worst.max((got - oracle::nt_xent_brute_force(&h, &h_aug, tau, symmetric)).abs());
        }
        Ok(Check::new(
            NAME,
            worst < NTXENT_TOLERANCE,
            format!("20 instances, max |Δ| {worst:.2e}"),
        ))
    })
}

/// Equal similarities give ln(2B−1); a single identical pair gives 0.
pub fn ntxent_closed_forms() -> Check {
    const NAME: &str = "NT-Xent closed forms";
    guard(NAME, || {
        let mut worst: f64 = 0.0;
        for b in 2..=4usize {
            let same = vec![vec![0.6, -0.8]; b];
            worst =
                worst.max((ntxent(&same, &same, 0.2, false)? - ((2 * b - 1) as f64).ln()).abs());
        }
        let one = vec![vec![0.3, -0.4, 1.0]];
        let single = ntxent(&one, &one, 0.2, false)?;
        Ok(Check::new(
            NAME,
            worst < 1e-12 && single == 0.0,
            format!("ln(2B−1) max |Δ| {worst:.2e}, B=1 loss {single}"),
        ))
    })
}

/// Rows of the encoder output for one masked T=1280, D=1 sample.
fn encoder_rows(patch: PatchConfig) -> Result<usize> {
    let meta = DatasetMeta {
        name: "selfcheck".into(),
        seq_len: 1280,
        channels: 1,
        num_classes: 2,
        sampling_note: String::new(),
    };
    let model = ModelConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        proj_dim: 4,
        ..ModelConfig::default()
    };
    let params = init_params(&Architecture::new(model, patch, &meta)?);
    let x = Tensor::new(
        vec![1280, 1],
        (0..1280).map(|t| (t as f32 * 0.01).sin()).collect(),
    )?;
    let mask = sample_mask(
        patch.num_patches(1280)?,
        patch.theta,
        &mut seeding::stream(0, "selfcheck-mask", &[u64::MAX]),
    )?;
    let batch = MaskedBatch::new(
        &[apply_mask(patchify(&x, patch.patch_len)?, mask)?],
        patch.keep_zeroed,
    )?;
    let mut f = Forward::new(&params, false);
    let z = f.encode(&batch.tokens, &batch.token_idx)?;
    Ok(f.g.shape(z)[1])
}

/// T=1280, L=64, θ=0.75: 20 patches, 5 visible, 6 encoder rows; exact
/// counts over 1000 draws.
pub fn patch_arithmetic() -> Check {
    const NAME: &str = "patch and mask arithmetic";
    guard(NAME, || {
        let p = PatchConfig {
            patch_len: 64,
            theta: 0.75,
            keep_zeroed: false,
        };
        let (n, v) = (p.num_patches(1280)?, p.num_visible(1280)?);
        let rows = encoder_rows(p)?;
        let mut exact = 0;
        for k in 0..1000u64 {
            let m = sample_mask(n, p.theta, &mut seeding::stream(0, "selfcheck-mask", &[k]))?;
            exact += usize::from(m.iter().filter(|&&x| x).count() == v);
        }
        Ok(Check::new(
            NAME,
            (n, v, rows, exact) == (20, 5, 6, 1000),
            format!("N={n}, visible={v}, encoder rows={rows}, exact draws {exact}/1000"),
        ))
    })
}

/// Predictions, labels and coarse-grid scores for one random instance.
pub fn metric_instance(seed: u64) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>, usize) {
    let mut r = seeding::stream(seed, "selfcheck-metrics", &[]);
    let n = r.random_range(1..=50);
    let c = r.random_range(2..=4);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..c).map(|_| r.random_range(0..8) as f64 / 8.0).collect())
        .collect();
    let preds = (0..n).map(|_| r.random_range(0..c)).collect();
    (preds, labels, scores, c)
}

/// Macro F1 exactly, per-class AUROC and AUPRC within 1e-9, on 50 instances.
pub fn metrics_vs_oracles() -> Check {
    const NAME: &str = "metrics vs brute force";
    guard(NAME, || {
        let mut f1_exact = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..50 {
            let (preds, labels, scores, c) = metric_instance(seed);
            let r = compute_metrics(&preds, &labels, &scores, c)?;
            let exact = oracle::rational_to_f64(&oracle::macro_f1_rational(&preds, &labels, c));
            f1_exact += usize::from(r.f1 == exact);
            for (k, pc) in r.per_class.iter().enumerate() {
                let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
                let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
                if pos.iter().any(|&p| p) && pos.iter().any(|&p| !p) {
                    worst = worst.max((pc.auroc - oracle::auroc_threshold_sweep(&col, &pos)).abs());
                }
                if pos.iter().any(|&p| p) {
                    worst = worst.max((pc.auprc - oracle::auprc_threshold_sweep(&col, &pos)).abs());
                }
            }
        }
        Ok(Check::new(
            NAME,
            f1_exact == 50 && worst < CURVE_TOLERANCE,
            format!("F1 exact on {f1_exact}/50, AUROC/AUPRC max |Δ| {worst:.2e}"),
        ))
    })
}

/// Two tight pairs ten apart, the all-identical degenerate case, and the
/// brute-force oracle on the same points.
pub fn silhouette_examples() -> Check {
    const NAME: &str = "silhouette examples";
    guard(NAME, || {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let labels = [0, 0, 1, 1];
        let s = silhouette(&pts, &labels)?;
        let brute = oracle::silhouette_brute_force(&pts, &labels);
        let flat = silhouette(&vec![vec![1.0, 1.0]; 4], &labels)?;
        Ok(Check::new(
            NAME,
            (s - SILHOUETTE_HAND).abs() < SILHOUETTE_TOLERANCE
                && (s - brute).abs() < 1e-12
                && flat == 0.0,
            format!("hand example {s:.6}, oracle {brute:.6}, identical points {flat}"),
        ))
    })
}

/// First Adam step from zero moments moves each weight by −lr·sign(g).
pub fn adam_first_step() -> Check {
    const NAME: &str = "Adam first step";
    guard(NAME, || {
        let (cfg, corpus) = gradcheck::micro()?;
        let mut params = init_params(&crate::trainer::architecture(&cfg, &corpus)?);
        let name = "cls_token";
        let w0: Vec<f32> = params.get(name).expect("layout").data().to_vec();
        let g: Vec<f32> = (0..w0.len())
            .map(|i| if i % 2 == 0 { 0.5 } else { -2.0 })
            .collect();
        let mut state = AdamState::new(&params);
        let adam = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(
            &mut params,
            &[(name.to_string(), g.clone())],
            &mut state,
            &adam,
        )?;
        let worst = params
            .get(name)
            .expect("layout")
            .data()
            .iter()
            .zip(&w0)
            .zip(&g)
            .map(|((&w, &w0), &g)| {
                (w as f64 - oracle::adam_first_step(w0 as f64, g as f64, adam.lr, adam.eps)).abs()
            })
            .fold(0.0, f64::max);
        Ok(Check::new(
            NAME,
            worst < 1e-7,
            format!("max |Δ| {worst:.2e}"),
        ))
    })
}

pub fn all() -> Vec<Check> {
    vec![
        gradients(),
        ntxent_brute_force(),
        ntxent_closed_forms(),
        patch_arithmetic(),
        metrics_vs_oracles(),
        silhouette_examples(),
        adam_first_step(),
    ]
}
