//! Files: long-format choice data, versioned JSON containers for fits and
//! simulated truths, the TOML run configuration and run manifests.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Fitted, PredictiveReport, Scenarios};
use crate::mcmc::{McmcConfig, McmcDraws};
use crate::model::{ChoiceDataset, DgpConfig, Hyperparameters, Occasion, Truth};
use crate::stats::SpdMatrix;
use crate::vb::{VbConfig, VbFit};

/// Version written into, and required of, every JSON container.
pub const SCHEMA_VERSION: u32 = 1;

const ID_COLUMNS: [&str; 4] = ["person_id", "occasion_id", "alt_id", "chosen"];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            row,
            message: format!("{kind:?}"),
        },
    }
}

// ---------------------------------------------------------------------------
// Datasets

struct OccasionRows {
    id: String,
    alts: Vec<(String, Vec<f64>, bool)>,
    first_row: u64,
}

/// Read a long-format dataset: one row per (person, occasion, alternative)
/// under the header `person_id,occasion_id,alt_id,chosen,x1,...,xK`.
///
/// Persons, occasions and alternatives keep their order of first appearance.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChoiceDataset> {
    let path = path.as_ref();
    read_dataset(open(path)?, path)
}

/// As [`load_dataset`] from any reader; `path` only labels errors.
pub fn read_dataset(reader: impl Read, path: &Path) -> Result<ChoiceDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let k = header.len().saturating_sub(ID_COLUMNS.len());
    let expected: Vec<String> = ID_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((1..=k).map(|i| format!("x{i}")))
        .collect();
    if k == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "header must be `person_id,occasion_id,alt_id,chosen,x1,...,xK`, found `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut persons: Vec<(String, Vec<OccasionRows>)> = Vec::new();
    let mut person_index: HashMap<String, usize> = HashMap::new();
    let mut occasion_index: HashMap<(usize, String), usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let chosen = match &record[3] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("chosen must be 0 or 1, found `{other}`"))),
        };
        let x = (0..k)
            .map(|i| {
                let field = &record[4 + i];
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(format!("x{} is not a finite number: `{field}`", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;

        let p = *person_index.entry(record[0].to_string()).or_insert_with(|| {
            persons.push((record[0].to_string(), Vec::new()));
            persons.len() - 1
        });
        let occasions = &mut persons[p].1;
        let o = *occasion_index.entry((p, record[1].to_string())).or_insert_with(|| {
            occasions.push(OccasionRows {
                id: record[1].to_string(),
                alts: Vec::new(),
                first_row: row,
            });
            occasions.len() - 1
        });
        let occ = &mut occasions[o];
        if occ.alts.iter().any(|(a, _, _)| a == &record[2]) {
            return Err(parse_err(format!(
                "duplicate alternative `{}` in person `{}` occasion `{}`",
                &record[2], &record[0], &record[1]
            )));
        }
        occ.alts.push((record[2].to_string(), x, chosen));
    }
    if persons.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    }

    let persons = persons
        .into_iter()
        .map(|(pid, occasions)| {
            occasions
                .into_iter()
                .map(|occ| {
                    let chosen: Vec<usize> = occ.alts.iter().enumerate().filter(|a| a.1 .2).map(|a| a.0).collect();
                    if chosen.len() != 1 {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row: occ.first_row,
                            message: format!(
                                "person `{pid}` occasion `{}` has {} chosen alternatives, expected exactly one",
                                occ.id,
                                chosen.len()
                            ),
                        });
                    }
                    let j = occ.alts.len();
                    Ok(Occasion {
                        x: DMatrix::from_fn(j, k, |r, c| occ.alts[r].1[c]),
                        chosen: chosen[0],
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ChoiceDataset::new(k, persons)
}

/// Write `data` in the long format, with zero-based integer ids.
pub fn write_dataset(path: impl AsRef<Path>, data: &ChoiceDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    let header: Vec<String> = ID_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((1..=data.k()).map(|i| format!("x{i}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for n in 0..data.n_persons() {
        for (t, occ) in data.person_occasions(n).iter().enumerate() {
            for j in 0..occ.n_alts() {
                let mut row = vec![
                    n.to_string(),
                    t.to_string(),
                    j.to_string(),
                    u8::from(j == occ.chosen).to_string(),
                ];
                row.extend(occ.x.row(j).iter().map(f64::to_string));
                w.write_record(&row).map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON containers

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_reader(open(path)?).map_err(|e| json_error(path, e))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    if e.is_io() {
        return Error::io(path, e.into());
    }
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Read a container after checking its `schema_version`.
fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let value: serde_json::Value = read_json(path)?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "missing schema_version".into(),
    })?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| json_error(path, e))
}

/// Fitted posterior of either estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum FitPayload {
    Vb(VbFit),
    Mcmc(McmcDraws),
}

/// Self-describing fit container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub schema_version: u32,
    pub k: usize,
    pub n_persons: usize,
    pub n_occasions: usize,
    pub hyperparameters: Hyperparameters,
    pub fit: FitPayload,
}

impl FitFile {
    pub fn new(data: &ChoiceDataset, hyperparameters: Hyperparameters, fit: FitPayload) -> Self {
        FitFile {
            schema_version: SCHEMA_VERSION,
            k: data.k(),
            n_persons: data.n_persons(),
            n_occasions: data.n_occasions(),
            hyperparameters,
            fit,
        }
    }

    pub fn fitted(&self) -> Fitted<'_> {
        match &self.fit {
            FitPayload::Vb(f) => Fitted::Vb(&f.posterior),
            FitPayload::Mcmc(d) => Fitted::Mcmc(d),
        }
    }

    /// Wall-clock seconds spent fitting.
    pub fn seconds(&self) -> f64 {
        match &self.fit {
            FitPayload::Vb(f) => f.seconds,
            FitPayload::Mcmc(d) => d.seconds,
        }
    }

    /// Reject a fit whose dimensions do not match `data`.
    pub fn check_data(&self, data: &ChoiceDataset) -> Result<()> {
        if (self.k, self.n_persons, self.n_occasions) != (data.k(), data.n_persons(), data.n_occasions()) {
            return Err(Error::Dimension(format!(
                "fit has K={}, N={}, ΣT={}; data has K={}, N={}, ΣT={}",
                self.k,
                self.n_persons,
                self.n_occasions,
                data.k(),
                data.n_persons(),
                data.n_occasions()
            )));
        }
        Ok(())
    }
}

pub fn persist_fit(path: impl AsRef<Path>, fit: &FitFile) -> Result<()> {
    write_json(path, fit)
}

pub fn load_fit(path: impl AsRef<Path>) -> Result<FitFile> {
    read_versioned(path.as_ref())
}

/// Generating configuration, latent truth and validation scenarios of a
/// simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub dgp: DgpConfig,
    pub scenario_seed: u64,
    pub truth: Truth,
    pub scenarios: Scenarios,
}

pub fn write_truth(path: impl AsRef<Path>, truth: &TruthFile) -> Result<()> {
    write_json(path, truth)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<TruthFile> {
    read_versioned(path.as_ref())
}

/// Write `report` as JSON at `path` and its per-scenario TVDs as CSV next
/// to it (same stem, `.csv`). Returns the CSV path.
pub fn write_predictive_report(path: impl AsRef<Path>, report: &PredictiveReport) -> Result<PathBuf> {
    let path = path.as_ref();
    write_json(path, report)?;
    let csv_path = path.with_extension("csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    let rows = report.tvd_between.per_scenario.len().max(report.tvd_within.per_scenario.len());
    let cell = |v: &[f64], i: usize| v.get(i).map(f64::to_string).unwrap_or_default();
    w.write_record(["scenario", "tvd_between", "tvd_within"])
        .map_err(|e| csv_error(&csv_path, e))?;
    for i in 0..rows {
        w.write_record([
            i.to_string(),
            cell(&report.tvd_between.per_scenario, i),
            cell(&report.tvd_within.per_scenario, i),
        ])
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    FitVb,
    FitMcmc,
    Evaluate,
    Benchmark,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Data-generating process as written in a config file. Omitted population
/// values fall back to the reference population for `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n_persons: usize,
    pub n_occasions: usize,
    pub n_alts: usize,
    pub k: usize,
    pub zeta: Option<Vec<f64>>,
    pub sigma_b: Option<Vec<Vec<f64>>>,
    pub sigma_w: Option<Vec<Vec<f64>>>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n_persons: 1000,
            n_occasions: 20,
            n_alts: 5,
            k: 4,
            zeta: None,
            sigma_b: None,
            sigma_w: None,
        }
    }
}

fn square(rows: &[Vec<f64>], k: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension(format!("{what} must be {k}x{k}")));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

impl DgpSpec {
    pub fn to_config(&self, seed: u64) -> Result<DgpConfig> {
        let k = self.k;
        let mut cfg = if (1..=4).contains(&k) {
            DgpConfig::reference(self.n_persons, self.n_occasions, k)?
        } else {
            let (Some(_), Some(_), Some(_)) = (&self.zeta, &self.sigma_b, &self.sigma_w) else {
                return Err(Error::Validation(format!(
                    "K = {k} has no reference population; give zeta, sigma_b and sigma_w"
                )));
            };
            DgpConfig {
                n_persons: self.n_persons,
                n_occasions: self.n_occasions,
                n_alts: self.n_alts,
                k,
                zeta: DVector::zeros(k),
                sigma_b: DMatrix::zeros(k, k),
                sigma_w: DMatrix::zeros(k, k),
                seed,
            }
        };
        cfg.n_alts = self.n_alts;
        cfg.seed = seed;
        if let Some(z) = &self.zeta {
            if z.len() != k {
                return Err(Error::Dimension(format!("zeta must have {k} entries")));
            }
            cfg.zeta = DVector::from_column_slice(z);
        }
        if let Some(s) = &self.sigma_b {
            cfg.sigma_b = square(s, k, "sigma_b")?;
        }
        if let Some(s) = &self.sigma_w {
            cfg.sigma_w = square(s, k, "sigma_w")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prior constants as written in a config file; omitted values take the
/// defaults ξ0 = 0, Ξ0 = 10·I, ν_B = ν_W = 2, A_B = A_W = 1.04.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSpec {
    pub zeta_prior_mean: Option<Vec<f64>>,
    pub zeta_prior_cov: Option<Vec<Vec<f64>>>,
    pub nu_b: f64,
    pub nu_w: f64,
    pub scale_b: Option<Vec<f64>>,
    pub scale_w: Option<Vec<f64>>,
}

impl Default for HyperSpec {
    fn default() -> Self {
        HyperSpec {
            zeta_prior_mean: None,
            zeta_prior_cov: None,
            nu_b: 2.0,
            nu_w: 2.0,
            scale_b: None,
            scale_w: None,
        }
    }
}

impl HyperSpec {
    pub fn to_hyperparameters(&self, k: usize) -> Result<Hyperparameters> {
        let mut h = Hyperparameters::default_for(k);
        let vector = |v: &Option<Vec<f64>>, default: DVector<f64>, what: &str| match v {
            Some(v) if v.len() != k => Err(Error::Dimension(format!("{what} must have {k} entries"))),
            Some(v) => Ok(DVector::from_column_slice(v)),
            None => Ok(default),
        };
        h.zeta_prior_mean = vector(&self.zeta_prior_mean, h.zeta_prior_mean, "zeta_prior_mean")?;
        h.scale_b = vector(&self.scale_b, h.scale_b, "scale_b")?;
        h.scale_w = vector(&self.scale_w, h.scale_w, "scale_w")?;
        if let Some(rows) = &self.zeta_prior_cov {
            h.zeta_prior_cov = SpdMatrix::new(square(rows, k, "zeta_prior_cov")?)?;
        }
        h.nu_b = self.nu_b;
        h.nu_w = self.nu_w;
        h.validate()?;
        Ok(h)
    }
}

/// Everything a run needs, read from TOML. Every block is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub replications: usize,
    pub master_seed: u64,
    pub paths: Paths,
    pub dgp: DgpSpec,
    pub hyper: HyperSpec,
    pub mcmc: McmcConfig,
    pub vb: VbConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: None,
            replications: 10,
            master_seed: 0,
            paths: Paths::default(),
            dgp: DgpSpec::default(),
            hyper: HyperSpec::default(),
            mcmc: McmcConfig::default(),
            vb: VbConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s, path)
    }

    /// Checks everything except the prior block, whose dimension is only
    /// known once a dataset is chosen.
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Validation("replications must be at least 1".into()));
        }
        self.dgp.to_config(self.master_seed)?;
        self.mcmc.validate()?;
        self.vb.validate()?;
        self.eval.validate()
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        self.master_seed.wrapping_add(r as u64)
    }
}

/// Record of one command invocation: enough to rerun it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub arguments: Vec<String>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    pub seconds: f64,
}

impl Manifest {
    pub fn new(command: &str, arguments: Vec<String>, config: RunConfig) -> Self {
        Manifest {
            tool: "mixlogit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            arguments,
            config,
            seeds: Vec::new(),
            outputs: Vec::new(),
            seconds: 0.0,
        }
    }
}
