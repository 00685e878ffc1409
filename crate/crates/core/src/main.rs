use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uqrank::data::{encode_dialogs, gen_synthetic, Limits};
use uqrank::train::config::{load_task_spec, DiversitySource};
use uqrank::train::plot::plot_dir;
use uqrank::train::report::{self, summary_text};
use uqrank::train::run::{evaluate, load_split, run_experiment, run_id, sigma_o, write_split};
use uqrank::train::{ablate, AblationMode, Model, TrainConfig};
use uqrank::{Error, Result};

/// Probabilistic answer ranking for visual dialog.
#[derive(Parser)]
#[command(name = "uqrank", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (train and val splits) from a task spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model and write metrics, curves, attention grids and weights.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved model on a data split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write metrics.csv and uncertainty.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep over several seeds.
    Ablate {
        #[arg(long)]
        mode: AblationMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Singular-value diversity of a saved model's answer latents.
    Diversity {
        #[arg(long)]
        model: PathBuf,
        /// Data directory; defaults to regenerating the model's val split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// `latent` or `decoder-hidden`.
        #[arg(long)]
        source: Option<String>,
    },
    /// Render SVG charts from the CSVs in a run or ablation directory.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let cfg = cfg.with_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn records(
    model: &Model,
    data: Option<&Path>,
    split: &str,
) -> Result<Vec<uqrank::data::DialogRecord>> {
    let raw = match data {
        Some(d) => load_split(d, split)?,
        None => gen_synthetic(&model.cfg.val_spec())?,
    };
    Ok(encode_dialogs(&raw, &model.vocab, Limits::default()))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { spec, out } => {
            let (train, val_dialogs) = load_task_spec(&spec)?;
            let val = uqrank::data::SyntheticTaskSpec {
                num_dialogs: val_dialogs,
                id_offset: train.id_offset + train.num_dialogs as u64,
                ..train.clone()
            };
            write_split(&out, "train", &gen_synthetic(&train)?)?;
            write_split(&out, "val", &gen_synthetic(&val)?)?;
            println!(
                "wrote {} train and {} val dialogs to {}",
                train.num_dialogs,
                val.num_dialogs,
                out.display()
            );
        }
        Cmd::Train {
            config: c,
            out,
            overrides,
        } => {
            let cfg = config(c.as_deref(), &overrides)?;
            let result = run_experiment(&cfg)?;
            report::write_experiment(&out, &result)?;
            print!("{}", summary_text(&result));
        }
        Cmd::Eval {
            model,
            data,
            split,
            out,
        } => {
            let m = Model::load(&model)?;
            let recs = records(&m, Some(&data), &split)?;
            let e = evaluate(&m, &recs, &run_id(&m.cfg))?;
            let rows = [e.metrics.clone(), e.decoder_metrics.clone()];
            for r in &rows {
                println!(
                    "{}: R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  MRR {:.4}  mean rank {:.3}  NDCG {:.4}  sigma_o {:.4}",
                    r.run_id, r.r1, r.r5, r.r10, r.mrr, r.mean_rank, r.ndcg, r.sigma_o
                );
            }
            let u = e.mean_report();
            println!(
                "uncertainty: entropy {:.6}  aleatoric {:.6e}  epistemic {:.6e}  sigma2_p {:.6}",
                u.entropy, u.aleatoric_mean, u.epistemic_var, u.sigma_sq_p
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
                report::write_metrics(&dir.join(report::METRICS_FILE), &rows)?;
                report::write_uncertainty(&dir.join(report::UNCERTAINTY_FILE), &e.uncertainty)?;
            }
        }
        Cmd::Ablate {
            mode,
            config: c,
            overrides,
            seeds,
            out,
        } => {
            let cfg = config(c.as_deref(), &overrides)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let table = ablate(&cfg, mode, &seeds)?;
            report::write_ablation_report(&out, &table)?;
            print!("{}", report::ablation_summary(&table));
        }
        Cmd::Diversity {
            model,
            data,
            split,
            source,
        } => {
            let mut m = Model::load(&model)?;
            match source.as_deref() {
                None => {}
                Some("latent") => m.cfg.diversity_source = DiversitySource::Latent,
                Some("decoder-hidden") => m.cfg.diversity_source = DiversitySource::DecoderHidden,
                Some(s) => return Err(Error::Usage(format!("unknown diversity source {s:?}"))),
            }
            let recs = records(&m, data.as_deref(), &split)?;
            println!("sigma_o {}", sigma_o(&m, &recs)?);
        }
        Cmd::Plot { input } => {
            for f in plot_dir(&input)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("uqrank: {e}");
            ExitCode::FAILURE
        }
    }
}
