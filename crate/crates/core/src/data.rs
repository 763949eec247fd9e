//! Corpus loading, splits, normalization, batching and the synthetic generator.
//!
//! A corpus directory holds `meta.json` plus `train.csv`, `val.csv` and
//! `test.csv`. Each CSV row is one sample: an integer label followed by
//! `T·D` values in time-major order (`t0c0, t0c1, …, t1c0, …`), no header.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "D")]
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub sampling_note: String,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 1 || self.channels < 1 || self.num_classes < 2 {
            return Err(Error::config(format!(
                "dataset meta needs T ≥ 1, D ≥ 1, num_classes ≥ 2 (got T={}, D={}, classes={})",
                self.seq_len, self.channels, self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    /// `[T, D]`
    pub values: Tensor,
    pub label: usize,
}

/// A split whose row accesses are counted, so pipelines can prove they never
/// touched it before final evaluation.
#[derive(Debug, Default)]
pub struct GuardedSplit {
    rows: Vec<TimeSeriesSample>,
    reads: AtomicUsize,
}

impl GuardedSplit {
    pub fn new(rows: Vec<TimeSeriesSample>) -> Self {
        GuardedSplit {
            rows,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn rows(&self) -> &[TimeSeriesSample] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
pub struct Corpus {
    pub meta: DatasetMeta,
    pub train: Vec<TimeSeriesSample>,
    pub val: Vec<TimeSeriesSample>,
    pub test: GuardedSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config(format!(
                "unknown split `{other}` (train|val|test)"
            ))),
        }
    }
}

impl Corpus {
    pub fn split(&self, which: SplitName) -> &[TimeSeriesSample] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => self.test.rows(),
        }
    }
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&path)?)?;
    meta.validate()?;
    Ok(meta)
}

fn parse_rows(path: &Path, meta: &DatasetMeta) -> Result<Vec<TimeSeriesSample>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let width = meta.seq_len * meta.channels;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line,
            msg,
        };
        if record.len() != 1 + width {
            return Err(err(format!(
                "expected {} columns (label + {}×{} values), found {}",
                1 + width,
                meta.seq_len,
                meta.channels,
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| err(format!("label `{}` is not a class index", &record[0])))?;
        if label >= meta.num_classes {
            return Err(err(format!(
                "label {label} out of range for {} classes",
                meta.num_classes
            )));
        }
        let mut values = Vec::with_capacity(width);
        for (col, field) in record.iter().enumerate().skip(1) {
            let v: f32 = field
                .parse()
                .map_err(|_| err(format!("column {col}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("column {col}: non-finite value")));
            }
            values.push(v);
        }
        out.push(TimeSeriesSample {
            values: Tensor::new(vec![meta.seq_len, meta.channels], values)?,
            label,
        });
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta = read_meta(dir)?;
    let train = parse_rows(&dir.join("train.csv"), &meta)?;
    let val = parse_rows(&dir.join("val.csv"), &meta)?;
    let test = parse_rows(&dir.join("test.csv"), &meta)?;
    log::info!(
        "loaded corpus `{}`: {} train / {} val / {} test",
        meta.name,
        train.len(),
        val.len(),
        test.len()
    );
    Ok(Corpus {
        meta,
        train,
        val,
        test: GuardedSplit::new(test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pretrain_fraction: f64,
    pub finetune_label_ratio: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            pretrain_fraction: 0.9,
            finetune_label_ratio: 0.3,
            seed: 0,
        }
    }
}

impl SplitPlan {
    pub fn sanity_fraction(&self) -> f64 {
        1.0 - self.pretrain_fraction
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(self.pretrain_fraction) || !ok(self.finetune_label_ratio) {
            return Err(Error::config("split fractions must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Index form of [`split_pretrain`]: `(pretrain, sanity)`, each sorted.
///
/// The sanity share is `⌈(1 − pretrain_fraction)·n⌉`, clamped so both sides
/// are non-empty.
pub fn split_pretrain_indices(n: usize, plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::contract(format!(
            "pretraining split needs at least 2 samples, got {n}"
        )));
    }
    let raw = plan.sanity_fraction() * n as f64;
    let sanity = ((raw - 1e-9).ceil().max(1.0) as usize).min(n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::stream(
        plan.seed,
        "split.pretrain",
        &[n as u64],
    ));
    let mut sanity_idx = idx.split_off(n - sanity);
    idx.sort_unstable();
    sanity_idx.sort_unstable();
    Ok((idx, sanity_idx))
}

pub fn split_pretrain(
    train: &[TimeSeriesSample],
    plan: &SplitPlan,
) -> Result<(Vec<TimeSeriesSample>, Vec<TimeSeriesSample>)> {
    let (p, s) = split_pretrain_indices(train.len(), plan)?;
    Ok((
        p.iter().map(|&i| train[i].clone()).collect(),
        s.iter().map(|&i| train[i].clone()).collect(),
    ))
}

/// Stratified draw of `round(ratio·count_c)` (at least one) samples per class.
pub fn finetune_subset_indices(
    labels: &[usize],
    num_classes: usize,
    plan: &SplitPlan,
) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::contract("fine-tune pool is empty"));
    }
    let mut picked = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::contract(format!(
                "class {class} has no samples in the training pool"
            )));
        }
        let take = ((plan.finetune_label_ratio * members.len() as f64).round() as usize)
            .clamp(1, members.len());
        members.shuffle(&mut seeding::stream(
            plan.seed,
            "split.finetune",
            &[class as u64],
        ));
        picked.extend_from_slice(&members[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn sample_finetune_subset(
    train: &[TimeSeriesSample],
    num_classes: usize,
    plan: &SplitPlan,
) -> Result<Vec<TimeSeriesSample>> {
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    Ok(finetune_subset_indices(&labels, num_classes, plan)?
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn fit(samples: &[TimeSeriesSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("cannot fit normalization on no samples"))?;
        let d = first.values.shape()[1];
        let mut sum = vec![0f64; d];
        let mut count = 0usize;
        for s in samples {
            for row in s.values.data().chunks(d) {
                for (acc, &v) in sum.iter_mut().zip(row) {
                    *acc += v as f64;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0f64; d];
        for s in samples {
            for row in s.values.data().chunks(d) {
                for c in 0..d {
                    sq[c] += (row[c] as f64 - mean[c]).powi(2);
                }
            }
        }
        Ok(NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq
                .iter()
                .map(|&s| (s / count as f64).sqrt().max(STD_FLOOR) as f32)
                .collect(),
        })
    }

    pub fn apply_one(&self, s: &TimeSeriesSample) -> TimeSeriesSample {
        let d = self.mean.len();
        let mut values = s.values.clone();
        for row in values.data_mut().chunks_mut(d) {
            for c in 0..d {
                row[c] = ((row[c] as f64 - self.mean[c] as f64) / self.std[c] as f64) as f32;
            }
        }
        TimeSeriesSample {
            values,
            label: s.label,
        }
    }

    pub fn apply(&self, samples: &[TimeSeriesSample]) -> Vec<TimeSeriesSample> {
        samples.iter().map(|s| self.apply_one(s)).collect()
    }
}

/// Fits statistics on `samples` and returns them normalized.
pub fn normalize(samples: &[TimeSeriesSample]) -> Result<(Vec<TimeSeriesSample>, NormStats)> {
    let stats = NormStats::fit(samples)?;
    Ok((stats.apply(samples), stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled per epoch; the short final batch is dropped and `B ≥ 2`.
    Pretrain,
    /// Shuffled per epoch; the short final batch is kept.
    Finetune,
    /// Corpus order; the short final batch is kept.
    Evaluate,
}

pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if mode == BatchMode::Pretrain && batch_size < 2 {
        return Err(Error::config(
            "contrastive pretraining needs batch size ≥ 2 (one negative at least)",
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if mode != BatchMode::Evaluate {
        idx.shuffle(&mut seeding::stream(seed, "batches", &[epoch as u64]));
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if mode == BatchMode::Pretrain && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, D]`
    pub values: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub fn make_batches(
    samples: &[TimeSeriesSample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: BatchMode,
) -> Result<impl Iterator<Item = Batch> + '_> {
    let plan = batch_indices(samples.len(), batch_size, seed, epoch, mode)?;
    Ok(plan.into_iter().map(move |ix| {
        let shape = samples[ix[0]].values.shape().to_vec();
        let data: Vec<f32> = ix
            .iter()
            .flat_map(|&i| samples[i].values.data().iter().copied())
            .collect();
        Batch {
            values: Tensor::new(vec![ix.len(), shape[0], shape[1]], data).expect("batch shape"),
            labels: ix.iter().map(|&i| samples[i].label).collect(),
            indices: ix,
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "D")]
    pub channels: usize,
    pub sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 3,
            per_class: 100,
            seq_len: 96,
            channels: 1,
            sigma: 0.1,
        }
    }
}

/// Half-width of the per-sample phase draw, in radians.
pub const PHASE_JITTER: f64 = std::f64::consts::FRAC_PI_3;

fn synth_sample(class: usize, spec: &SyntheticSpec, rng: &mut seeding::Rng) -> Vec<f32> {
    use std::f64::consts::PI;
    let cycles = 2.0 + 1.5 * class as f64;
    let base_phase = class as f64 * PI / spec.num_classes as f64;
    let draw: f64 = rng.random_range(-PHASE_JITTER..PHASE_JITTER);
    let mut out = Vec::with_capacity(spec.seq_len * spec.channels);
    for t in 0..spec.seq_len {
        for c in 0..spec.channels {
            let channel_phase = c as f64 * PI / (spec.channels + 1) as f64;
            let angle = 2.0 * PI * cycles * t as f64 / spec.seq_len as f64
                + base_phase
                + channel_phase
                + draw;
            let noise: f64 = StandardNormal.sample(rng);
            out.push((angle.sin() + spec.sigma * noise) as f32);
        }
    }
    out
}

fn check_spec(spec: &SyntheticSpec) -> Result<DatasetMeta> {
    if spec.num_classes < 2 || spec.num_classes > 8 {
        return Err(Error::config("synthetic corpus supports 2..=8 classes"));
    }
    if spec.per_class == 0 || spec.seq_len == 0 || spec.channels == 0 || spec.sigma < 0.0 {
        return Err(Error::config(
            "synthetic corpus needs positive sizes and σ ≥ 0",
        ));
    }
    Ok(DatasetMeta {
        name: format!("synthetic-{}c", spec.num_classes),
        seq_len: spec.seq_len,
        channels: spec.channels,
        num_classes: spec.num_classes,
        sampling_note: format!("synthetic sinusoids, sigma={}", spec.sigma),
    })
}

fn synth_split(spec: &SyntheticSpec, seed: u64, k: u64) -> Vec<TimeSeriesSample> {
    let mut rng = seeding::stream(seed, "synthetic", &[k]);
    (0..spec.per_class * spec.num_classes)
        .map(|i| {
            let label = i % spec.num_classes;
            let values = synth_sample(label, spec, &mut rng);
            TimeSeriesSample {
                values: Tensor::new(vec![spec.seq_len, spec.channels], values).expect("sized"),
                label,
            }
        })
        .collect()
}

/// The corpus `gen_synthetic` would write, built in memory.
pub fn synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    let meta = check_spec(spec)?;
    Ok(Corpus {
        meta,
        train: synth_split(spec, seed, 0),
        val: synth_split(spec, seed, 1),
        test: GuardedSplit::new(synth_split(spec, seed, 2)),
    })
}

/// Generates class-conditional sinusoids: class `c` has its own frequency and
/// base phase, each sample draws a phase offset in `±PHASE_JITTER`, and iid
/// Gaussian noise of scale `sigma` is added. Writes `per_class` rows per class
/// to each of `train.csv`, `val.csv` and `test.csv`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<DatasetMeta> {
    let meta = check_spec(spec)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    for (k, split) in ["train", "val", "test"].iter().enumerate() {
        let path: PathBuf = dir.join(format!("{split}.csv"));
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)?;
        for s in synth_split(spec, seed, k as u64) {
            let mut row = Vec::with_capacity(s.values.len() + 1);
            row.push(s.label.to_string());
            row.extend(s.values.data().iter().map(f32::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(meta)
}
