//! Command-line entry points: train models from config files, evaluate and
//! ensemble saved models, export annotated DOT trees, and inspect artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ant::config::RunConfig;
use ant::data::{load_csv, load_idx, Dataset};
use ant::eval::{ensemble_evaluate, error_for_mode, evaluate, export_dot, prune_below, EvalMode};
use ant::model::AntModel;
use ant::model_io::load_model;
use ant::module::TaskKind;
use ant::run::{dry_run, inspect_text, path_cost_summary, train_run};
use ant::{AntError, Result};

#[derive(Parser)]
#[command(name = "ant", version, about = "Adaptive neural trees: train, evaluate, export")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file and write run artifacts
    Train {
        /// Run config file (line-oriented key = value sections)
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Cap growth decisions and per-phase epochs (smoke runs)
        #[arg(long)]
        max_steps: Option<usize>,
        /// Override the config output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Validate config and model shapes without loading data or training
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate saved models; repeat --model to average an ensemble
    Eval {
        /// Model file; may be given multiple times
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// Data: a CSV file, or an IDX pair as images,labels
        #[arg(long)]
        data: String,
        /// Inference mode: multi, single, sampled, least-likely
        #[arg(long, default_value = "multi")]
        mode: EvalMode,
        /// RNG seed for sampled routing
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a DOT rendering of a model annotated with dataset statistics
    Export {
        #[arg(long)]
        model: PathBuf,
        /// Data: a CSV file, or an IDX pair as images,labels
        #[arg(long)]
        data: String,
        /// Drop leaves whose empirical visit probability is below this
        #[arg(long)]
        prune_below: Option<f64>,
        /// Output file; standard output when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the topology and cost summary of a saved model
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

const BATCH: usize = 512;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through this path too; those are not
            // usage errors
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e {
                AntError::Config(_) | AntError::Recipe(_) => 1,
                AntError::Training(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, max_steps, out_dir, dry_run: dry } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.training.rng_seed = s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            if let Some(n) = max_steps {
                cfg.apply_max_steps(n);
            }
            if dry {
                print!("{}", dry_run(&cfg)?);
                return Ok(());
            }
            let art = train_run(&cfg)?;
            println!("run complete: artifacts in {}", cfg.out_dir.display());
            println!("growth decisions: {}", art.history.len());
            print!("{}", art.report);
            Ok(())
        }
        Cmd::Eval { model, data, mode, seed } => cmd_eval(&model, &data, mode, seed),
        Cmd::Export { model, data, prune_below: thr, out } => {
            let m = load_model(&model)?;
            let ds = load_eval_dataset(&m, &data)?;
            let (m, removed) = match thr {
                Some(t) => prune_below(&m, &ds, t, BATCH)?,
                None => (m, Vec::new()),
            };
            if !removed.is_empty() {
                let names: Vec<String> = removed.iter().map(|n| format!("n{}", n)).collect();
                eprintln!("pruned {} leaves: {}", removed.len(), names.join(" "));
            }
            let text = export_dot(&m, &ds, BATCH)?;
            match out {
                Some(p) => std::fs::write(&p, text)?,
                None => print!("{}", text),
            }
            Ok(())
        }
        Cmd::Inspect { model } => {
            let m = load_model(&model)?;
            print!("{}", inspect_text(&m));
            Ok(())
        }
    }
}

fn cmd_eval(paths: &[PathBuf], data: &str, mode: EvalMode, seed: u64) -> Result<()> {
    let models: Vec<AntModel> = paths.iter().map(|p| load_model(p)).collect::<Result<_>>()?;
    let ds = load_eval_dataset(&models[0], data)?;
    if models.len() == 1 {
        let m = &models[0];
        let report = evaluate(m, &ds, BATCH)?;
        print!("{}", report);
        print!("{}", path_cost_summary(m, &ds)?);
        match mode {
            EvalMode::Multi | EvalMode::Single => {}
            EvalMode::Sampled | EvalMode::LeastLikely => {
                let err = error_for_mode(m, &ds, mode, seed, BATCH)?;
                println!("error_{} = {}", mode, err);
                if mode == EvalMode::LeastLikely {
                    println!("note: least-likely ties break to the lowest leaf id");
                }
            }
        }
    } else {
        for m in &models[1..] {
            if m.preprocess != models[0].preprocess {
                return Err(AntError::Model(
                    "ensemble members disagree on stored preprocessing".into(),
                ));
            }
        }
        let refs: Vec<&AntModel> = models.iter().collect();
        let err = ensemble_evaluate(&refs, &ds, mode, BATCH)?;
        println!("ensemble of {} models", models.len());
        println!("error_{} = {}", mode, err);
    }
    Ok(())
}

/// Load evaluation data for a saved model: `images,labels` names an IDX
/// pair, anything else is read as CSV with the model's input and output
/// widths. The model's stored preprocessing is applied.
fn load_eval_dataset(model: &AntModel, spec: &str) -> Result<Dataset> {
    let mut ds = if let Some((images, labels)) = spec.split_once(',') {
        load_idx(Path::new(images.trim()), Path::new(labels.trim()))?
    } else {
        let input_cols = match model.input_shape.as_slice() {
            [d] => *d,
            other => {
                return Err(AntError::Data(format!(
                    "CSV data suits vector models; this model expects shape {:?} (pass an IDX pair as images,labels)",
                    other
                )));
            }
        };
        let target_cols = match model.task {
            TaskKind::Regression { dim } => dim,
            TaskKind::Classification { .. } => {
                return Err(AntError::Data(
                    "CSV data is for regression models; pass an IDX pair as images,labels".into(),
                ));
            }
        };
        load_csv(Path::new(spec), input_cols, target_cols)?
    };
    if ds.input_shape != model.input_shape {
        return Err(AntError::Data(format!(
            "data shape {:?} does not match model input shape {:?}",
            ds.input_shape, model.input_shape
        )));
    }
    model.preprocess.apply(&mut ds);
    Ok(ds)
}
