//! Command-line front end. Dotted `--section.key value` overrides are pulled
//! out of argv before clap sees the rest.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{resolve_config, to_json, RunConfig, SEED_ENV};
use crate::data::{gen_synthetic, load_corpus, SplitName};
use crate::error::{Error, Result};
use crate::selfcheck;
use crate::trainer::{
    evaluate, export_embeddings, finetune, pretrain, run_ablation, write_metrics_csv, Checkpoint,
    EpochLog, FinetuneLog, MetricRow,
};

#[derive(Debug, Parser)]
#[command(
    name = "cogent",
    version,
    about = "Joint contrastive and masked-patch pretraining for time-series classification",
    after_help = "Any config key can be overridden as `--section.key value` (or `--seed N`)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON config file, flat dotted or nested keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic sinusoid corpus.
    GenSynthetic {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining on the training split.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning on a labelled subset, from a checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Pretrained checkpoint; omit to train from scratch. Its run's
        /// resolved.json is the default config.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        label_ratio: Option<f64>,
        #[arg(long, default_value = "corpus")]
        data: PathBuf,
        #[arg(long, default_value = "finetune")]
        out: PathBuf,
    },
    /// Metrics of a fine-tuned checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Also write metrics.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classifier hidden activations of one split, with their silhouette score.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and fine-tune under the three loss configurations; one CSV row each.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Corpus directory; a synthetic corpus is generated into `<out>/corpus` when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Check the library against its reference implementations.
    Selfcheck,
}

/// Separates `--a.b value`, `--a.b=value` and `--seed value` from the rest.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !(key.contains('.') || key == "seed") {
            rest.push(a.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| Error::config(format!("--{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

struct Session {
    overrides: Vec<(String, String)>,
    env_seed: Option<String>,
}

impl Session {
    fn resolve(&self, file: Option<&Path>) -> Result<RunConfig> {
        resolve_config(file, &self.overrides, self.env_seed.as_deref())
    }

    /// The explicit config, else the resolved.json beside `ckpt`, else defaults.
    fn resolve_near(&self, file: Option<&Path>, ckpt: Option<&Path>) -> Result<RunConfig> {
        let sibling = ckpt
            .and_then(Path::parent)
            .map(|d| d.join("resolved.json"))
            .filter(|p| p.is_file());
        self.resolve(file.or(sibling.as_deref()))
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.json"), to_json(cfg)? + "\n")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_pretrain_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "total",
        "l_c",
        "l_r",
        "l_r_orig",
        "l_r_aug",
        "lambda_c",
        "lambda_r",
        "sanity_total",
    ])?;
    for e in log {
        let t = &e.train;
        w.write_record([
            e.epoch.to_string(),
            t.total.to_string(),
            opt(t.l_c),
            opt(t.l_r),
            opt(t.l_r_orig),
            opt(t.l_r_aug),
            t.lambda_c.to_string(),
            t.lambda_r.to_string(),
            e.sanity_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_finetune_log(path: &Path, log: &[FinetuneLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_f1"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), opt(e.val_f1)])?;
    }
    w.flush()?;
    Ok(())
}

fn print_rows(rows: &[MetricRow]) {
    println!("{}", crate::trainer::METRICS_HEADER.join(","));
    for r in rows {
        let h = r.report.headline().map(|v| format!("{v:.4}"));
        println!("{},{},{}", r.mode, r.pretrained, h.join(","));
    }
}

fn dispatch(command: Command, s: &Session) -> Result<()> {
    match command {
        Command::GenSynthetic { cfg, out } => {
            let c = s.resolve(cfg.config.as_deref())?;
            let meta = gen_synthetic(&c.synthetic, c.seed, &out)?;
            println!(
                "wrote {} ({} classes, T={}, D={}) to {}",
                meta.name,
                meta.num_classes,
                meta.seq_len,
                meta.channels,
                out.display()
            );
        }
        Command::Pretrain { cfg, data, out } => {
            let c = s.resolve(cfg.config.as_deref())?;
            let corpus = load_corpus(&data)?;
            prepare_out(&out, &c)?;
            let r = pretrain(&corpus, &c)?;
            r.best.save(&out.join("best.ckpt"))?;
            r.last.save(&out.join("last.ckpt"))?;
            write_pretrain_log(&out.join("loss_log.csv"), &r.log)?;
            println!(
                "pretrained {} epochs; best sanity loss at epoch {}; checkpoints in {}",
                r.log.len(),
                r.best.epoch,
                out.display()
            );
        }
        Command::Finetune {
            cfg,
            from,
            label_ratio,
            data,
            out,
        } => {
            let mut c = s.resolve_near(cfg.config.as_deref(), from.as_deref())?;
            if let Some(r) = label_ratio {
                c.data.label_ratio = r;
                c.validate()?;
            }
            let corpus = load_corpus(&data)?;
            let ckpt = from.as_deref().map(Checkpoint::load).transpose()?;
            prepare_out(&out, &c)?;
            let r = finetune(ckpt.as_ref(), &corpus, &c)?;
            r.best.save(&out.join("best.ckpt"))?;
            r.last.save(&out.join("last.ckpt"))?;
            write_finetune_log(&out.join("finetune_log.csv"), &r.log)?;
            let rows = [MetricRow {
                mode: if ckpt.is_some() {
                    c.loss.mode.as_str().to_string()
                } else {
                    "scratch".into()
                },
                pretrained: ckpt.is_some(),
                report: r.val,
            }];
            write_metrics_csv(&out.join("metrics.csv"), &rows)?;
            info!("fine-tuned on {} labelled samples", r.subset_size);
            print_rows(&rows);
        }
        Command::Evaluate {
            cfg,
            ckpt,
            data,
            split,
            out,
        } => {
            let c = s.resolve_near(cfg.config.as_deref(), Some(&ckpt))?;
            let model = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let report = evaluate(&model, corpus.split(split), c.train.batch_size)?;
            let rows = [MetricRow {
                mode: format!("{split:?}").to_lowercase(),
                pretrained: model.lambdas.is_some(),
                report,
            }];
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                write_metrics_csv(&out.join("metrics.csv"), &rows)?;
            }
            print_rows(&rows);
        }
        Command::ExportEmbeddings {
            cfg,
            ckpt,
            data,
            split,
            out,
        } => {
            let c = s.resolve_near(cfg.config.as_deref(), Some(&ckpt))?;
            let model = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let score = export_embeddings(&model, corpus.split(split), c.train.batch_size, &out)?;
            println!(
                "silhouette {score:.6}; embeddings in {}",
                out.join("embeddings.csv").display()
            );
        }
        Command::Ablate { cfg, data, out } => {
            let c = s.resolve(cfg.config.as_deref())?;
            prepare_out(&out, &c)?;
            let data = match data {
                Some(d) => d,
                None => {
                    let d = out.join("corpus");
                    gen_synthetic(&c.synthetic, c.seed, &d)?;
                    d
                }
            };
            let corpus = load_corpus(&data)?;
            let rows = run_ablation(&corpus, &c)?;
            write_metrics_csv(&out.join("ablation.csv"), &rows)?;
            print_rows(&rows);
        }
        Command::Selfcheck => {
            let checks = selfcheck::all();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} self-check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Runs one command and returns the process exit code: 0 on success, 1 for
/// usage and configuration errors, 2 for internal failures.
pub fn main_with(argv: Vec<OsString>) -> i32 {
    let args: Vec<String> = match argv.into_iter().map(OsString::into_string).collect() {
        Ok(a) => a,
        Err(_) => {
            eprintln!("error: arguments must be valid UTF-8");
            return 1;
        }
    };
    let (rest, overrides) = match split_overrides(args.get(1..).unwrap_or_default()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let argv0 = args.first().cloned().unwrap_or_else(|| "cogent".into());
    let cli = match Cli::try_parse_from(std::iter::once(argv0).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let session = Session {
        overrides,
        env_seed: std::env::var(SEED_ENV).ok(),
    };
    match dispatch(cli.command, &session) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
