//! Simulation study: repeated simulate → fit (VB and MCMC) → evaluate, and a
//! summary of estimation time and predictive accuracy per method.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Fitted, Method, PredictiveReport, Scenarios};
use crate::io::{write_json, RunConfig};
use crate::mcmc::{run_mcmc, McmcConfig};
use crate::model::{simulate_dataset, ChoiceDataset, DgpConfig, Hyperparameters, Truth};
use crate::stats::Rng;
use crate::vb::run_vb;

/// Stream of the replication seed used for the validation scenarios.
pub const SCENARIO_STREAM: u64 = 0x5CE7_A210;

/// Result of one method on one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub method: Method,
    /// Fitting time only.
    pub fit_seconds: f64,
    pub tvd_between: f64,
    pub tvd_within: f64,
    /// VB: reached the stopping rule. MCMC: max split-R̂ of ζ below 1.1.
    pub converged: bool,
    pub report: PredictiveReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub seed: u64,
    pub error: String,
}

/// Mean and standard error of the three statistics for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub condition: String,
    pub replications: usize,
    pub time_mean: f64,
    pub time_se: f64,
    pub tvd_b_mean: f64,
    pub tvd_b_se: f64,
    pub tvd_w_mean: f64,
    pub tvd_w_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: RunConfig,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<ReplicationFailure>,
    pub summary: Vec<SummaryRow>,
}

/// Everything a replication fits and scores.
pub struct SimulatedReplication {
    pub seed: u64,
    pub dgp: DgpConfig,
    pub data: ChoiceDataset,
    pub truth: Truth,
    pub scenarios: Scenarios,
}

/// Simulate the data and validation scenarios for seed `seed`.
pub fn simulate_replication(cfg: &RunConfig, seed: u64) -> Result<SimulatedReplication> {
    let dgp = cfg.dgp.to_config(seed)?;
    let (data, truth) = simulate_dataset(&dgp)?;
    let scenarios = Scenarios::generate(&truth, &dgp, &mut Rng::new(seed).split(SCENARIO_STREAM))?;
    Ok(SimulatedReplication {
        seed,
        dgp,
        data,
        truth,
        scenarios,
    })
}

/// Fit both estimators to one simulated replication and score them.
pub fn run_replication(cfg: &RunConfig, r: usize) -> Result<[ReplicationRecord; 2]> {
    let sim = simulate_replication(cfg, cfg.replication_seed(r))?;
    let hyper = cfg.hyper.to_hyperparameters(sim.data.k())?;
    fit_and_score(cfg, &hyper, &sim, r)
}

fn fit_and_score(
    cfg: &RunConfig,
    hyper: &Hyperparameters,
    sim: &SimulatedReplication,
    r: usize,
) -> Result<[ReplicationRecord; 2]> {
    let eval_cfg = EvalConfig {
        seed: sim.seed,
        ..cfg.eval.clone()
    };
    let score = |fitted: Fitted, fit_seconds: f64, converged: bool| -> Result<ReplicationRecord> {
        let report = evaluate(&sim.data, &sim.truth, &sim.scenarios, &fitted, &eval_cfg)?;
        Ok(ReplicationRecord {
            replication: r,
            seed: sim.seed,
            method: report.method,
            fit_seconds,
            tvd_between: report.tvd_between.mean,
            tvd_within: report.tvd_within.mean,
            converged,
            report,
        })
    };

    let vb = run_vb(&sim.data, hyper, &cfg.vb)?;
    let vb_record = score(Fitted::Vb(&vb.posterior), vb.seconds, vb.converged)?;

    let mcmc_cfg = McmcConfig {
        seed: sim.seed,
        track_persons: sim.scenarios.within.persons.clone(),
        ..cfg.mcmc.clone()
    };
    let draws = run_mcmc(&sim.data, hyper, &mcmc_cfg)?;
    let rhat_ok = draws.rhat_zeta.iter().all(|r| *r < 1.1);
    let mcmc_record = score(Fitted::Mcmc(&draws), draws.seconds, rhat_ok)?;
    Ok([vb_record, mcmc_record])
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-method mean and standard error over `records`.
pub fn summarize(records: &[ReplicationRecord], condition: &str) -> Vec<SummaryRow> {
    [Method::Vb, Method::Mcmc]
        .into_iter()
        .filter_map(|m| {
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == m).collect();
            if rows.is_empty() {
                return None;
            }
            let stat = |f: fn(&ReplicationRecord) -> f64| mean_se(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (time_mean, time_se) = stat(|r| r.fit_seconds);
            let (tvd_b_mean, tvd_b_se) = stat(|r| r.tvd_between);
            let (tvd_w_mean, tvd_w_se) = stat(|r| r.tvd_within);
            Some(SummaryRow {
                method: m,
                condition: condition.to_string(),
                replications: rows.len(),
                time_mean,
                time_se,
                tvd_b_mean,
                tvd_b_se,
                tvd_w_mean,
                tvd_w_se,
            })
        })
        .collect()
}

/// Progress notifications from [`run_benchmark`].
pub enum Progress<'a> {
    Started { replication: usize, seed: u64 },
    Finished(&'a [ReplicationRecord; 2]),
    Failed(&'a ReplicationFailure),
}

/// Run every replication. A failing replication is recorded and excluded
/// from the summary; if every replication fails the first error is returned.
pub fn run_benchmark(cfg: &RunConfig, mut progress: impl FnMut(Progress)) -> Result<BenchmarkReport> {
    cfg.validate()?;
    cfg.hyper.to_hyperparameters(cfg.dgp.k)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for r in 0..cfg.replications {
        let seed = cfg.replication_seed(r);
        progress(Progress::Started { replication: r, seed });
        match run_replication(cfg, r) {
            Ok(pair) => {
                progress(Progress::Finished(&pair));
                records.extend(pair);
            }
            Err(e) => {
                let failure = ReplicationFailure {
                    replication: r,
                    seed,
                    error: e.to_string(),
                };
                progress(Progress::Failed(&failure));
                failures.push(failure);
                first_error.get_or_insert(e);
            }
        }
    }
    if let (true, Some(e)) = (records.is_empty(), first_error) {
        return Err(e);
    }
    let condition = format!("N={} T={}", cfg.dgp.n_persons, cfg.dgp.n_occasions);
    Ok(BenchmarkReport {
        config: cfg.clone(),
        summary: summarize(&records, &condition),
        records,
        failures,
    })
}

/// Write `summary.csv`, `replications.csv` and `report.json` into `dir`.
pub fn write_benchmark(report: &BenchmarkReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |path: &Path, e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "method",
        "condition",
        "replications",
        "time_mean",
        "time_se",
        "tvd_b_mean",
        "tvd_b_se",
        "tvd_w_mean",
        "tvd_w_se",
    ])
    .map_err(|e| csv_err(&path, e))?;
    for s in &report.summary {
        w.write_record([
            s.method.label().to_string(),
            s.condition.clone(),
            s.replications.to_string(),
            s.time_mean.to_string(),
            s.time_se.to_string(),
            s.tvd_b_mean.to_string(),
            s.tvd_b_se.to_string(),
            s.tvd_w_mean.to_string(),
            s.tvd_w_se.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("replications.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["replication", "seed", "method", "fit_seconds", "tvd_b", "tvd_w", "converged"])
        .map_err(|e| csv_err(&path, e))?;
    for r in &report.records {
        w.write_record([
            r.replication.to_string(),
            r.seed.to_string(),
            r.method.label().to_string(),
            r.fit_seconds.to_string(),
            r.tvd_between.to_string(),
            r.tvd_within.to_string(),
            r.converged.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_json(dir.join("report.json"), report)
}
