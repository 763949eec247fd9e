//! Run configuration: defaults, JSON file, dotted command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::data::{SplitPlan, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::patchmask::PatchConfig;
use crate::trainer::adam::AdamConfig;

pub const SEED_ENV: &str = "COGENT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub pretrain_fraction: f64,
    pub label_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_fraction: 0.9,
            label_ratio: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub finetune_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_pretrain: 100,
            epochs_finetune: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            finetune_learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (k, v) in [
            ("train.epochs_pretrain", self.epochs_pretrain),
            ("train.epochs_finetune", self.epochs_finetune),
            ("train.eval_every", self.eval_every),
        ] {
            if v < 1 {
                bad.push(format!("{k} must be ≥ 1"));
            }
        }
        if self.batch_size < 2 {
            bad.push(format!(
                "train.batch_size must be ≥ 2 (got {})",
                self.batch_size
            ));
        }
        for (k, v) in [
            ("train.learning_rate", self.learning_rate),
            ("train.finetune_learning_rate", self.finetune_learning_rate),
            ("train.eps", self.eps),
        ] {
            if !(v > 0.0) {
                bad.push(format!("{k} must be > 0 (got {v})"));
            }
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("{k} must lie in [0, 1) (got {v})"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!(
                "train.weight_decay must be ≥ 0 (got {})",
                self.weight_decay
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub augment: AugmentConfig,
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            pretrain_fraction: self.data.pretrain_fraction,
            finetune_label_ratio: self.data.label_ratio,
            seed: self.seed,
        }
    }

    /// Constraint checks that need no dataset; every violation is listed.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut keep = |r: Result<()>| {
            if let Err(e) = r {
                bad.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        keep(self.split_plan().validate().map_err(|_| {
            Error::config("data.pretrain_fraction and data.label_ratio must lie in (0, 1]")
        }));
        keep(self.augment.validate());
        keep(self.model.validate());
        keep(self.loss.validate());
        keep(self.train.validate());
        if !(0.0..1.0).contains(&self.patch.theta) {
            keep(Err(Error::config(format!(
                "patch.theta must lie in [0, 1) (got {})",
                self.patch.theta
            ))));
        }
        if self.patch.patch_len < 1 {
            keep(Err(Error::config("patch.patch_len must be ≥ 1")));
        }
        if self.patch.theta == 0.0
            && self.loss.reconstruct_target == crate::losses::ReconstructTarget::Masked
        {
            keep(Err(Error::config(
                "loss.reconstruct_target=masked needs patch.theta > 0",
            )));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }
}

/// Turns a nested or flat (dotted keys) JSON object into `(path, value)` leaves.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn lookup<'a>(root: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.')
        .try_fold(root, |v, k| v.as_object_mut()?.get_mut(k))
}

fn same_kind(default: &Value, given: &Value) -> bool {
    match (default, given) {
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Number(d), Value::Number(g)) => {
            if d.is_f64() {
                true
            } else {
                g.is_u64()
            }
        }
        _ => false,
    }
}

/// Parses a command-line override against the kind of its default.
fn parse_override(default: &Value, raw: &str) -> Value {
    match default {
        Value::String(_) => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

/// Defaults < `COGENT_SEED` < file < overrides. Unknown keys, kind mismatches
/// and constraint violations are all reported together.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let mut merged = defaults.clone();
    let mut errors = Vec::new();
    let mut explicit = Vec::new();

    if let Some(s) = env_seed {
        match s.trim().parse::<u64>() {
            Ok(seed) => merged["seed"] = Value::from(seed),
            Err(_) => errors.push(format!("{SEED_ENV}={s:?} is not an unsigned integer")),
        }
    }

    let mut leaves = Vec::new();
    if let Some(path) = file {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        if !text.trim().is_empty() {
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            if !doc.is_object() {
                return Err(Error::config(format!(
                    "{}: top level must be an object",
                    path.display()
                )));
            }
            flatten("", &doc, &mut leaves);
        }
    }
    let mut cli = Vec::new();
    for (k, raw) in overrides {
        let mut probe = defaults.clone();
        match lookup(&mut probe, k) {
            Some(d) if !d.is_object() => cli.push((k.clone(), parse_override(d, raw))),
            _ => errors.push(format!("unknown key `{k}`")),
        }
    }
    leaves.extend(cli);

    for (k, v) in leaves {
        let mut probe = defaults.clone();
        let Some(d) = lookup(&mut probe, &k).filter(|d| !d.is_object()).cloned() else {
            errors.push(format!("unknown key `{k}`"));
            continue;
        };
        if !same_kind(&d, &v) {
            errors.push(format!("`{k}` expects a value like {d}, got {v}"));
            continue;
        }
        *lookup(&mut merged, &k).expect("checked") = v;
        explicit.push(k);
    }
    if !explicit.iter().any(|k| k == "model.init_seed") {
        merged["model"]["init_seed"] = merged["seed"].clone();
    }

    // Rejected leaves were skipped above, so the remainder still resolves and
    // its constraint violations join the report.
    let cfg: Option<RunConfig> = {
        // Enum spellings are the only thing left for serde to reject; name the key.
        let mut enum_errors = Vec::new();
        for (section, v) in merged.as_object().expect("object") {
            if let Value::Object(fields) = v {
                for (field, value) in fields {
                    if let Value::String(s) = value {
                        let mut probe = defaults.clone();
                        probe[section][field] = Value::String(s.clone());
                        if serde_json::from_value::<RunConfig>(probe).is_err() {
                            enum_errors
                                .push(format!("`{section}.{field}` has unknown value {s:?}"));
                        }
                    }
                }
            }
        }
        errors.extend(enum_errors);
        serde_json::from_value(merged).ok()
    };
    if let Some(cfg) = &cfg {
        if let Err(Error::Config(m)) = cfg.validate() {
            errors.push(m);
        }
    }
    match cfg {
        Some(cfg) if errors.is_empty() => Ok(cfg),
        _ => Err(Error::config(errors.join("; "))),
    }
}

/// Pretty JSON of the fully resolved config.
pub fn to_json(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossMode;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("run.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        let cfg = resolve_config(Some(&p), &[], None).unwrap();
        assert_eq!(cfg.patch.theta, 0.75);
        assert_eq!(cfg, resolve_config(None, &[], None).unwrap());
        let p = write(dir.path(), "{}");
        assert_eq!(
            resolve_config(Some(&p), &[], None).unwrap().model.d_model,
            512
        );
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"patch": {"theta": 0.6}, "seed": 4, "loss.mode": "generative_only"}"#,
        );
        let cfg = resolve_config(Some(&p), &[], Some("9")).unwrap();
        assert_eq!(
            (cfg.patch.theta, cfg.seed, cfg.loss.mode),
            (0.6, 4, LossMode::GenerativeOnly)
        );
        assert_eq!(cfg.model.init_seed, 4);
        let cfg = resolve_config(Some(&p), &ov(&[("patch.theta", "0.5")]), Some("9")).unwrap();
        assert_eq!(cfg.patch.theta, 0.5);
        let cfg = resolve_config(None, &[], Some("9")).unwrap();
        assert_eq!((cfg.seed, cfg.model.init_seed), (9, 9));
        let cfg = resolve_config(None, &ov(&[("model.init_seed", "2")]), Some("9")).unwrap();
        assert_eq!(cfg.model.init_seed, 2);
    }

    #[test]
    fn every_error_is_reported() {
        let err = resolve_config(
            None,
            &ov(&[("patch.theta", "1.0"), ("train.batch_size", "1")]),
            None,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("patch.theta") && msg.contains("[0, 1)"),
            "{msg}"
        );
        assert!(msg.contains("train.batch_size"), "{msg}");

        let err = resolve_config(
            None,
            &ov(&[
                ("model.width", "3"),
                ("model.d_model", "big"),
                ("loss.mode", "simclr"),
            ]),
            None,
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("model.width") && err.contains("model.d_model"),
            "{err}"
        );
        assert!(err.contains("loss.mode"), "{err}");

        let err = resolve_config(
            None,
            &ov(&[("nope.key", "3"), ("patch.theta", "1.0")]),
            None,
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("nope.key") && err.contains("patch.theta"),
            "{err}"
        );

        let err = resolve_config(None, &ov(&[("loss.mode", "simclr")]), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.mode"), "{err}");
        assert!(resolve_config(None, &ov(&[("model.d_model", "1.5")]), None).is_err());
        assert!(resolve_config(None, &[], Some("x")).is_err());
    }

    #[test]
    fn resolved_json_reproduces() {
        let cfg = resolve_config(
            None,
            &ov(&[("seed", "5"), ("augment.kind", "jitter")]),
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &to_json(&cfg).unwrap());
        assert_eq!(resolve_config(Some(&p), &[], Some("77")).unwrap(), cfg);
    }
}
