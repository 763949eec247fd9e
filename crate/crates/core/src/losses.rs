//! Reconstruction, NT-Xent and the weighted joint objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Cogent,
    ContrastiveOnly,
    GenerativeOnly,
}

impl LossMode {
    pub fn uses_contrastive(self) -> bool {
        self != LossMode::GenerativeOnly
    }

    pub fn uses_reconstruction(self) -> bool {
        self != LossMode::ContrastiveOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Cogent => "cogent",
            LossMode::ContrastiveOnly => "contrastive_only",
            LossMode::GenerativeOnly => "generative_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructTarget {
    Visible,
    Masked,
}

/// Which views contribute a reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructViews {
    Original,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Auto,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub mode: LossMode,
    pub lambda_policy: LambdaPolicy,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub reconstruct_target: ReconstructTarget,
    pub reconstruct_views: ReconstructViews,
    pub symmetric_ntxent: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            mode: LossMode::Cogent,
            lambda_policy: LambdaPolicy::Auto,
            lambda_c: 1.0,
            lambda_r: 1.0,
            reconstruct_target: ReconstructTarget::Visible,
            reconstruct_views: ReconstructViews::Both,
            symmetric_ntxent: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tau > 0.0) {
            bad.push(format!("loss.tau must be > 0 (got {})", self.tau));
        }
        for (k, v) in [
            ("loss.lambda_c", self.lambda_c),
            ("loss.lambda_r", self.lambda_r),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bad.push(format!("{k} must be finite and ≥ 0 (got {v})"));
            }
        }
        if self.lambda_policy == LambdaPolicy::Fixed {
            let (c, r) = (self.lambda_c, self.lambda_r);
            match self.mode {
                LossMode::Cogent if !(c > 0.0 && r > 0.0) => {
                    bad.push("cogent mode needs loss.lambda_c > 0 and loss.lambda_r > 0".into())
                }
                LossMode::ContrastiveOnly if !(c > 0.0) => {
                    bad.push("contrastive_only mode needs loss.lambda_c > 0".into())
                }
                LossMode::GenerativeOnly if !(r > 0.0) => {
                    bad.push("generative_only mode needs loss.lambda_r > 0".into())
                }
                _ => {}
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    /// λ values with the absent term of a single-objective mode forced to 0.
    pub fn gate(&self, lambda_c: f64, lambda_r: f64) -> (f64, f64) {
        (
            if self.mode.uses_contrastive() {
                lambda_c
            } else {
                0.0
            },
            if self.mode.uses_reconstruction() {
                lambda_r
            } else {
                0.0
            },
        )
    }

    /// λ values usable before any batch is seen, or `None` when they are
    /// balanced from the first batch.
    pub fn initial_lambdas(&self) -> Option<(f64, f64)> {
        match (self.lambda_policy, self.mode) {
            (LambdaPolicy::Fixed, _) => Some(self.gate(self.lambda_c, self.lambda_r)),
            (LambdaPolicy::Auto, LossMode::Cogent) => None,
            (LambdaPolicy::Auto, _) => Some(self.gate(1.0, 1.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r_orig: Option<f64>,
    pub l_r_aug: Option<f64>,
    pub l_r: Option<f64>,
    pub l_c: Option<f64>,
    pub total: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
}

/// `(1/|M|)·Σ_patches ‖p̂ − p‖²` for `[B, K, W]` inputs, `|M| = B·K`.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, p_hat: Var, p: Var) -> Result<Var> {
    let (a, b) = (g.shape(p_hat).to_vec(), g.shape(p).to_vec());
    if a != b || a.len() != 3 {
        return Err(Error::contract(format!(
            "reconstruction shapes disagree: {a:?} vs {b:?}"
        )));
    }
    let diff = g.sub(p_hat, p)?;
    let ss = g.sum_squares(diff);
    Ok(g.scale(ss, 1.0 / (a[0] * a[1]) as f64))
}

/// `(l_r_orig, l_r_aug, l_r)` with `l_r` the mean of the two views.
pub fn reconstruction_pair<T: Real>(
    g: &mut Graph<T>,
    p_hat: Var,
    p: Var,
    p_hat_aug: Var,
    p_aug: Var,
) -> Result<(Var, Var, Var)> {
    let orig = reconstruction_loss(g, p_hat, p)?;
    let aug = reconstruction_loss(g, p_hat_aug, p_aug)?;
    let sum = g.add(orig, aug)?;
    Ok((orig, aug, g.scale(sum, 0.5)))
}

/// NT-Xent between `h` and its positives `h_aug`, both `[B, P]`. Rows are
/// normalized here, so any positive rescaling of the inputs is absorbed.
pub fn contrastive_loss<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    h_aug: Var,
    tau: f64,
    symmetric: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("loss.tau must be > 0 (got {tau})")));
    }
    let a = g.l2_normalize(h);
    let b = g.l2_normalize(h_aug);
    g.nt_xent(a, b, tau, symmetric)
}

/// `λ_c·L_c + λ_r·L_r`; a missing term contributes nothing.
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    l_c: Option<Var>,
    l_r: Option<Var>,
    lambda_c: f64,
    lambda_r: f64,
) -> Result<Var> {
    let parts: Vec<Var> = [(l_c, lambda_c), (l_r, lambda_r)]
        .into_iter()
        .filter_map(|(v, w)| v.map(|v| g.scale(v, w)))
        .collect();
    match parts.as_slice() {
        [] => Err(Error::contract("joint loss with no terms")),
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// `λ_c = 1`, `λ_r = l_c / l_r`, so both weighted terms start equal.
pub fn balance_lambdas(l_c: f64, l_r: f64) -> Result<(f64, f64)> {
    if !(l_r > 1e-12) || !l_r.is_finite() {
        return Err(Error::Balancing(format!(
            "reconstruction loss {l_r} is degenerate; cannot balance against contrastive loss {l_c}"
        )));
    }
    if !(l_c > 0.0) || !l_c.is_finite() {
        return Err(Error::Balancing(format!(
            "contrastive loss {l_c} must be > 0"
        )));
    }
    Ok((1.0, l_c / l_r))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::numerics::{finite_diff_check_many, Tensor};
    use crate::oracle;
    use crate::seeding;

    fn rand_rows(b: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = seeding::stream(seed, "rows", &[]);
        (0..b)
            .map(|_| (0..p).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn ntx(h: &[Vec<f64>], h2: &[Vec<f64>], tau: f64, sym: bool) -> f64 {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(h).unwrap());
        let b = g.constant(Tensor::from_rows(h2).unwrap());
        let l = contrastive_loss(&mut g, a, b, tau, sym).unwrap();
        g.value(l).item()
    }

    fn recon(p_hat: Tensor<f64>, p: Tensor<f64>) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let a = g.constant(p_hat);
        let b = g.constant(p);
        let l = reconstruction_loss(&mut g, a, b)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn reconstruction_examples() {
        let p = Tensor::<f64>::zeros(&[2, 3, 64]);
        let q = Tensor::<f64>::full(&[2, 3, 64], 1.0);
        assert_eq!(recon(p.clone(), p.clone()).unwrap(), 0.0);
        assert_eq!(recon(q, p).unwrap(), 64.0);

        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 1, 2]));
        let (o, a, r) = reconstruction_pair(&mut g, z, t, t, t).unwrap();
        assert_eq!(
            (g.value(o).item(), g.value(a).item(), g.value(r).item()),
            (5.0, 0.0, 2.5)
        );

        let bad = recon(Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn contrastive_examples() {
        let h = vec![vec![0.3, -0.4, 1.0]];
        assert_eq!(ntx(&h, &h, 0.2, false), 0.0);
        for b in 2..=4 {
            let same = vec![vec![1.0, 2.0]; b];
            let l = ntx(&same, &same, 0.2, false);
            assert!((l - ((2 * b - 1) as f64).ln()).abs() < 1e-12, "B={b}: {l}");
        }
        assert!(
            (ntx(
                &vec![vec![1.0, 0.0]; 2],
                &vec![vec![1.0, 0.0]; 2],
                0.2,
                false
            ) - 3f64.ln())
            .abs()
                < 1e-12
        );
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&h).unwrap());
        assert!(matches!(
            contrastive_loss(&mut g, a, a, 0.0, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contrastive_matches_brute_force() {
        let h = rand_rows(3, 8, 1);
        let h2 = rand_rows(3, 8, 2);
        let brute = oracle::nt_xent_brute_force(&h, &h2, 0.2, false);
        assert!((ntx(&h, &h2, 0.2, false) - brute).abs() < 1e-5);
        let brute_sym = oracle::nt_xent_brute_force(&h, &h2, 0.2, true);
        assert!((ntx(&h, &h2, 0.2, true) - brute_sym).abs() < 1e-5);
    }

    #[test]
    fn joint_and_gating() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let r = g.constant(Tensor::scalar(3.0));
        let t = joint_loss(&mut g, Some(c), Some(r), 1.0, 1.0).unwrap();
        assert_eq!(g.value(t).item(), 5.0);
        let t = joint_loss(&mut g, None, Some(r), 1.0, 0.5).unwrap();
        assert_eq!(g.value(t).item(), 1.5);
        assert!(joint_loss(&mut g, None, None, 1.0, 1.0).is_err());

        let gen = LossConfig {
            mode: LossMode::GenerativeOnly,
            ..LossConfig::default()
        };
        assert_eq!(gen.initial_lambdas(), Some((0.0, 1.0)));
        assert_eq!(LossConfig::default().initial_lambdas(), None);
        let fixed = LossConfig {
            lambda_policy: LambdaPolicy::Fixed,
            lambda_r: 0.0,
            ..LossConfig::default()
        };
        assert!(fixed.validate().is_err());
    }

    #[test]
    fn balancing() {
        let (c, r) = balance_lambdas(1.1, 64.0).unwrap();
        assert_eq!(c, 1.0);
        assert!((r - 0.0171875).abs() < 1e-15);
        assert_eq!(balance_lambdas(0.7, 0.7).unwrap(), (1.0, 1.0));
        assert!(matches!(
            balance_lambdas(1.0, 1e-13),
            Err(Error::Balancing(_))
        ));
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let h = Tensor::from_rows(&rand_rows(3, 5, 3)).unwrap();
        let h2 = Tensor::from_rows(&rand_rows(3, 5, 4)).unwrap();
        for sym in [false, true] {
            let f = |g: &mut Graph<f64>, v: &[Var]| contrastive_loss(g, v[0], v[1], 0.2, sym);
            let errs = finite_diff_check_many(&f, &[h.clone(), h2.clone()], 1e-5).unwrap();
            assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
        }
        let p = Tensor::new(vec![2, 2, 3], rand_rows(1, 12, 5).concat()).unwrap();
        let q = Tensor::new(vec![2, 2, 3], rand_rows(1, 12, 6).concat()).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| reconstruction_loss(g, v[0], v[1]);
        let errs = finite_diff_check_many(&f, &[p, q], 1e-5).unwrap();
        assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
    }

    fn rotate(rows: &[Vec<f64>], angle: f64) -> Vec<Vec<f64>> {
        let (s, c) = angle.sin_cos();
        rows.iter()
            .map(|r| {
                let mut r = r.clone();
                let (x, y) = (r[0], r[1]);
                r[0] = c * x - s * y;
                r[1] = s * x + c * y;
                r
            })
            .collect()
    }

    proptest! {
        #[test]
        fn contrastive_is_nonnegative_and_invariant(
            seed in any::<u64>(), b in 1usize..5, p in 2usize..7,
            angle in 0.0f64..std::f64::consts::TAU, scale in 0.01f64..100.0,
        ) {
            let h = rand_rows(b, p, seed);
            let h2 = rand_rows(b, p, seed.wrapping_add(1));
            let base = ntx(&h, &h2, 0.2, false);
            prop_assert!(base >= 0.0);
            let rot = ntx(&rotate(&h, angle), &rotate(&h2, angle), 0.2, false);
            prop_assert!((rot - base).abs() < 1e-5);
            let sc = |m: &[Vec<f64>]| m.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect::<Vec<Vec<f64>>>();
            prop_assert!((ntx(&sc(&h), &sc(&h2), 0.2, false) - base).abs() < 1e-5);
        }

        #[test]
        fn reconstruction_is_permutation_invariant(seed in any::<u64>(), k in 1usize..6) {
            let w = 3;
            let a = rand_rows(k, w, seed);
            let b = rand_rows(k, w, seed ^ 0xff);
            let t = |m: &[Vec<f64>]| Tensor::new(vec![1, m.len(), w], m.concat()).unwrap();
            let base = recon(t(&a), t(&b)).unwrap();
            let (mut ra, mut rb) = (a.clone(), b.clone());
            ra.reverse();
            rb.reverse();
            prop_assert!((recon(t(&ra), t(&rb)).unwrap() - base).abs() < 1e-12);
        }
    }
}
