use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mixlogit::benchmark::{run_benchmark, simulate_replication, write_benchmark, Progress};
use mixlogit::eval::evaluate;
use mixlogit::io::{
    load_dataset, load_fit, load_truth, persist_fit, write_dataset, write_json, write_predictive_report, write_truth,
    FitFile, FitPayload, Manifest, Mode, RunConfig, TruthFile, SCHEMA_VERSION,
};
use mixlogit::mcmc::{run_mcmc, McmcConfig};
use mixlogit::vb::run_vb;
use mixlogit::{Error, Result};

/// Mixed logit with inter- and intra-individual heterogeneity.
#[derive(Parser)]
#[command(name = "mixlogit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel, its latent truth and the validation scenarios.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the variational posterior.
    FitVb {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Metropolis-within-Gibbs sampler.
    FitMcmc {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Retain μ draws for this truth file's within-person scenario.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fit on the validation scenarios.
    Evaluate {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated simulate, fit both estimators and evaluate.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, mode: Mode) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cfg.mode {
        Some(m) if m != mode => Err(Error::Validation(format!(
            "config is for mode {m:?}, command is {mode:?}"
        ))),
        _ => Ok(cfg),
    }
}

fn required(arg: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Validation(format!("{flag} is required (or set it under [paths])")))
}

fn manifest_beside(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn run(cli: Cli, started: Instant) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg = load_config(config.as_deref(), Mode::Simulate)?;
            let out = required(out, &cfg.paths.output_dir, "--out")?;
            let seed = seed.unwrap_or(cfg.master_seed);
            let sim = simulate_replication(&cfg, seed)?;
            let data_path = out.join("dataset.csv");
            let truth_path = out.join("truth.json");
            write_dataset(&data_path, &sim.data)?;
            write_truth(
                &truth_path,
                &TruthFile {
                    schema_version: SCHEMA_VERSION,
                    dgp: sim.dgp,
                    scenario_seed: seed,
                    truth: sim.truth,
                    scenarios: sim.scenarios,
                },
            )?;
            println!(
                "simulated {} persons, {} choices → {}",
                sim.data.n_persons(),
                sim.data.n_occasions(),
                out.display()
            );
            let mut m = Manifest::new("simulate", args, cfg);
            m.seeds = vec![seed];
            m.outputs = vec![data_path, truth_path];
            m.seconds = started.elapsed().as_secs_f64();
            write_json(out.join("manifest.json"), &m)
        }
        Command::FitVb { data, config, out } => {
            let cfg = load_config(config.as_deref(), Mode::FitVb)?;
            let data = load_dataset(required(data, &cfg.paths.dataset, "--data")?)?;
            let hyper = cfg.hyper.to_hyperparameters(data.k())?;
            let fit = run_vb(&data, &hyper, &cfg.vb)?;
            if fit.converged {
                println!("converged after {} sweeps in {:.2}s", fit.iterations, fit.seconds);
            } else {
                eprintln!(
                    "warning: no convergence within {} sweeps (δ = {:.4})",
                    fit.iterations, fit.delta
                );
            }
            persist_fit(&out, &FitFile::new(&data, hyper, FitPayload::Vb(fit)))?;
            let mut m = Manifest::new("fit-vb", args, cfg);
            m.outputs = vec![out.clone()];
            m.seconds = started.elapsed().as_secs_f64();
            write_json(manifest_beside(&out), &m)
        }
        Command::FitMcmc {
            data,
            config,
            truth,
            out,
        } => {
            let cfg = load_config(config.as_deref(), Mode::FitMcmc)?;
            let data = load_dataset(required(data, &cfg.paths.dataset, "--data")?)?;
            let hyper = cfg.hyper.to_hyperparameters(data.k())?;
            let mut mcmc: McmcConfig = cfg.mcmc.clone();
            if let Some(t) = truth.or_else(|| cfg.paths.truth.clone()) {
                mcmc.track_persons.extend(load_truth(t)?.scenarios.within.persons);
                mcmc.track_persons.sort_unstable();
                mcmc.track_persons.dedup();
            }
            let draws = run_mcmc(&data, &hyper, &mcmc)?;
            let rhat = draws.rhat_zeta.iter().copied().fold(f64::NAN, f64::max);
            println!(
                "{} draws in {:.2}s, max split-R̂(ζ) = {rhat:.3}",
                draws.n_draws(),
                draws.seconds
            );
            persist_fit(&out, &FitFile::new(&data, hyper, FitPayload::Mcmc(draws)))?;
            let mut m = Manifest::new("fit-mcmc", args, cfg);
            m.seeds = vec![mcmc.seed];
            m.outputs = vec![out.clone()];
            m.seconds = started.elapsed().as_secs_f64();
            write_json(manifest_beside(&out), &m)
        }
        Command::Evaluate {
            fit,
            truth,
            data,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref(), Mode::Evaluate)?;
            let truth = load_truth(required(truth, &cfg.paths.truth, "--truth")?)?;
            let data = load_dataset(required(data, &cfg.paths.dataset, "--data")?)?;
            let fit = load_fit(&fit)?;
            fit.check_data(&data)?;
            let report = evaluate(&data, &truth.truth, &truth.scenarios, &fit.fitted(), &cfg.eval)?;
            println!(
                "{}: TVD_B = {:.4}, TVD_W = {:.4}",
                report.method.label(),
                report.tvd_between.mean,
                report.tvd_within.mean
            );
            let csv = write_predictive_report(&out, &report)?;
            let mut m = Manifest::new("evaluate", args, cfg.clone());
            m.seeds = vec![cfg.eval.seed];
            m.outputs = vec![out.clone(), csv];
            m.seconds = started.elapsed().as_secs_f64();
            write_json(manifest_beside(&out), &m)
        }
        Command::Benchmark { config, out } => {
            let cfg = load_config(Some(&config), Mode::Benchmark)?;
            let out = required(out, &cfg.paths.output_dir, "--out")?;
            let report = run_benchmark(&cfg, |p| match p {
                Progress::Started { replication, seed } => {
                    eprintln!("replication {}/{} (seed {seed})", replication + 1, cfg.replications)
                }
                Progress::Finished([vb, mcmc]) => eprintln!(
                    "  VB   {:>8.2}s  TVD_B {:.4}  TVD_W {:.4}\n  MCMC {:>8.2}s  TVD_B {:.4}  TVD_W {:.4}",
                    vb.fit_seconds, vb.tvd_between, vb.tvd_within, mcmc.fit_seconds, mcmc.tvd_between, mcmc.tvd_within
                ),
                Progress::Failed(f) => eprintln!("warning: replication {} excluded: {}", f.replication, f.error),
            })?;
            write_benchmark(&report, &out)?;
            for s in &report.summary {
                println!(
                    "{:<5} time {:.2} ({:.2})  TVD_B {:.4} ({:.4})  TVD_W {:.4} ({:.4})",
                    s.method.label(),
                    s.time_mean,
                    s.time_se,
                    s.tvd_b_mean,
                    s.tvd_b_se,
                    s.tvd_w_mean,
                    s.tvd_w_se
                );
            }
            let mut m = Manifest::new("benchmark", args, cfg.clone());
            m.seeds = (0..cfg.replications).map(|r| cfg.replication_seed(r)).collect();
            m.outputs = ["summary.csv", "replications.csv", "report.json"]
                .iter()
                .map(|f| out.join(f))
                .collect();
            m.seconds = started.elapsed().as_secs_f64();
            write_json(out.join("manifest.json"), &m)
        }
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation errors; --help and --version are not errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, started) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
