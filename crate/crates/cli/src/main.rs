//! `regrad`: train classifiers, score inputs, and run the OOD, calibration,
//! active-learning and verification experiments.
//!
//! Exit codes: 0 on success, 1 on usage, configuration or domain errors, 2
//! on I/O errors.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use regrad_core::datasets::{load_csv, save_csv};
use regrad_core::harness::{
    exgrad_bound_sweep, run_synthetic_active_learning, run_synthetic_calibration, run_synthetic_ood, transfer_suite,
    verify_gaussian_posterior, verify_gradient_vanishing, write_csv_report, write_report, Experiment,
    PropositionReport,
};
use regrad_core::scorers::{score_all, Method};
use regrad_core::{Model, Result, UqError};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "regrad", version, about = "Gradient-based epistemic uncertainty for trained classifiers")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP on the synthetic clusters and save it as JSON.
    Train {
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write train/val/test/ood CSV files into this directory.
        #[arg(long)]
        export_data: Option<PathBuf>,
    },
    /// Score every row of a CSV dataset.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "regrad_star")]
        method: String,
        /// CSV file to write; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUROC/AUPR of every configured method, ID clusters versus OOD ring.
    EvalOod {
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// rAULC of every configured method on the test clusters.
    EvalCalibration {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pool-based active learning with each configured acquisition.
    ActiveLearn {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical checks of the properties behind the scores.
    Verify {
        #[arg(long, value_enum, default_value_t = Prop::All)]
        prop: Prop,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Prop {
    All,
    GaussianPosterior,
    PerturbationTransfer,
    GradientVanishing,
    ExgradBound,
}

fn out_dir(config: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| config.out_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|source| UqError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write_both<T: Serialize + Experiment>(report: &T, dir: &Path, stem: &str) -> Result<()> {
    let json = dir.join(format!("{stem}.json"));
    write_report(report, &json)?;
    write_csv_report(&report.csv_rows(), dir.join(format!("{stem}.csv")))?;
    eprintln!("wrote {}", json.display());
    Ok(())
}

fn train(config: &RunConfig, out: &Path, export: Option<&Path>) -> Result<()> {
    let task = config.task();
    let replica = task.replicate(config.seed)?;
    replica.model.save(out)?;
    let acc = replica.training.val_accuracy[replica.training.selected_epoch];
    eprintln!(
        "trained {} epochs, selected epoch {} (validation accuracy {acc:.4}); wrote {}",
        replica.training.val_accuracy.len(),
        replica.training.selected_epoch + 1,
        out.display()
    );
    if let Some(dir) = export {
        let dir = out_dir(config, Some(dir.to_path_buf()))?;
        for (name, data) in [
            ("train", &replica.train),
            ("val", &replica.val),
            ("test", &replica.test),
            ("ood", &replica.ood),
        ] {
            save_csv(data, dir.join(format!("{name}.csv")))?;
        }
    }
    Ok(())
}

fn score(config: &RunConfig, model: &Path, data: &Path, method: &str, out: Option<&Path>) -> Result<()> {
    let method: Method = method.parse()?;
    let model = Model::load(model)?;
    let data = load_csv(data)?;
    let cfg = config.scorer(method)?;
    let scores = score_all(&model, data.inputs(), &cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| UqError::Domain(e.to_string());
    w.write_record(["sample_index", "method", "score"]).map_err(csv_err)?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), method.to_string(), format!("{s:?}")])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| UqError::Domain(e.to_string()))?;
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|source| UqError::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => std::io::stdout().write_all(&bytes).map_err(|source| UqError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn verify(config: &RunConfig, prop: Prop) -> Result<Vec<PropositionReport>> {
    let v = &config.verify;
    let wanted = |p: Prop| prop == Prop::All || prop == p;
    let mut reports = Vec::new();
    if wanted(Prop::GaussianPosterior) {
        reports.push(verify_gaussian_posterior(&v.posterior_sizes, config.seed)?);
    }
    if wanted(Prop::PerturbationTransfer) {
        reports.push(transfer_suite(v.transfer_models, config.seed)?);
    }
    if wanted(Prop::GradientVanishing) {
        reports.push(verify_gradient_vanishing(&config.gradient_vanishing())?);
    }
    if wanted(Prop::ExgradBound) {
        let replica = config.task().replicate(config.seed)?;
        let n = v.bound_inputs.min(replica.test.len());
        reports.push(exgrad_bound_sweep(
            &replica.model,
            &replica.test.inputs()[..n],
            &v.bound_sigmas,
            v.bound_trials,
            config.seed,
        )?);
    }
    Ok(reports)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(UqError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| UqError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Train { out, export_data } => train(&config, &out, export_data.as_deref()),
        Command::Score {
            model,
            data,
            method,
            out,
        } => score(&config, &model, &data, &method, out.as_deref()),
        Command::EvalOod { out } => {
            let dir = out_dir(&config, out)?;
            let report = run_synthetic_ood(&config.task(), &config.scorers()?, &config.replica_seeds()?)?;
            for m in &report.methods {
                println!("{:<17} auroc {:.4} ± {:.4}  aupr {:.4} ± {:.4}", m.method.to_string(), m.auroc_mean, m.auroc_std, m.aupr_mean, m.aupr_std);
            }
            write_both(&report, &dir, "ood")
        }
        Command::EvalCalibration { out } => {
            let dir = out_dir(&config, out)?;
            let report = run_synthetic_calibration(&config.task(), &config.scorers()?, &config.replica_seeds()?)?;
            for m in &report.methods {
                println!("{:<17} raulc {:.4} ± {:.4}", m.method.to_string(), m.mean, m.std);
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            write_both(&report, &dir, "calibration")
        }
        Command::ActiveLearn { out } => {
            let dir = out_dir(&config, out)?;
            let seeds = config.replica_seeds()?;
            let mut all = Vec::new();
            for cfg in config.active_learning()? {
                let reports = run_synthetic_active_learning(&config.task(), &cfg, &seeds)?;
                let n = reports.len() as f64;
                println!(
                    "{:<17} final accuracy {:.4}  mean accuracy {:.4}",
                    cfg.acquisition.tag(),
                    reports.iter().map(|r| r.final_accuracy).sum::<f64>() / n,
                    reports.iter().map(|r| r.mean_accuracy).sum::<f64>() / n
                );
                all.extend(reports);
            }
            write_both(&all, &dir, "active_learning")
        }
        Command::Verify { prop, out } => {
            let dir = out_dir(&config, out)?;
            let reports = verify(&config, prop)?;
            for r in &reports {
                println!("{:<22} {:?}", r.proposition, r.status);
            }
            write_both(&reports, &dir, "propositions")
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                UqError::Io { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
