//! Out-of-sample predictive accuracy.
//!
//! Two validation scenarios are scored by the total variation distance between
//! the true predictive choice distribution and the one implied by a fitted
//! posterior: choices of new persons (between, TVD_B) and new choices of
//! persons already in the training panel (within, TVD_W). Every integral is
//! Monte Carlo. Each scenario draws from its own sub-stream of the evaluation
//! seed, so results do not depend on thread scheduling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::mcmc::McmcDraws;
use crate::model::{
    make_validation_scenarios, utilities_into, BetweenScenario, ChoiceDataset, DgpConfig, Truth, WithinScenario,
};
use crate::par::map_range;
use crate::stats::{lse_unchecked, psd_factor, sample_inverse_wishart, sample_mvn_factor, Rng};
use crate::vb::VariationalPosterior;

const SIMPLEX_TOL: f64 = 1e-9;

const STREAM_OUTER: u64 = 0;
const STREAM_TRUE_BETWEEN: u64 = 1;
const STREAM_EST_BETWEEN: u64 = 2;
const STREAM_TRUE_WITHIN: u64 = 3;
const STREAM_EST_WITHIN: u64 = 4;

/// Monte Carlo settings of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior draws of the population-level parameters.
    pub n_outer: usize,
    /// Mixing draws per posterior draw.
    pub n_inner: usize,
    /// Draws for the true predictive distributions.
    pub n_true: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_outer: 500,
            n_inner: 200,
            n_true: 100_000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_inner == 0 || self.n_true == 0 {
            return Err(Error::Validation("Monte Carlo draw counts must be positive".into()));
        }
        Ok(())
    }
}

/// Which estimator produced the predictive distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vb,
    Mcmc,
    TruthCheck,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Vb => "VB",
            Method::Mcmc => "MCMC",
            Method::TruthCheck => "truth",
        }
    }
}

/// A posterior to score. `Truth` plugs in the generating values, which makes
/// the estimated side a second Monte Carlo run of the true side.
#[derive(Clone, Copy, Debug)]
pub enum Fitted<'a> {
    Mcmc(&'a McmcDraws),
    Vb(&'a VariationalPosterior),
    Truth(&'a Truth),
}

impl Fitted<'_> {
    pub fn method(&self) -> Method {
        match self {
            Fitted::Mcmc(_) => Method::Mcmc,
            Fitted::Vb(_) => Method::Vb,
            Fitted::Truth(_) => Method::TruthCheck,
        }
    }

    fn k(&self) -> usize {
        match self {
            Fitted::Mcmc(d) => d.k,
            Fitted::Vb(vp) => vp.k(),
            Fitted::Truth(t) => t.zeta.len(),
        }
    }
}

/// Both validation scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenarios {
    pub between: BetweenScenario,
    pub within: WithinScenario,
}

impl Scenarios {
    pub fn generate(truth: &Truth, cfg: &DgpConfig, rng: &mut Rng) -> Result<Self> {
        let (between, within) = make_validation_scenarios(truth, cfg, rng)?;
        Ok(Scenarios { between, within })
    }
}

/// Total variation distance `½ Σ_j |p_j − q_j|` between two choice distributions.
pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions over {} and {} alternatives",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p)?;
    check_simplex(q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|v| !(*v >= -SIMPLEX_TOL)) {
        return Err(Error::Domain(format!("not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Running average of MNL probabilities on a fixed design.
struct MnlAverage<'a> {
    x: &'a DMatrix<f64>,
    sum: Vec<f64>,
    u: Vec<f64>,
    count: usize,
}

impl<'a> MnlAverage<'a> {
    fn new(x: &'a DMatrix<f64>) -> Self {
        let j = x.nrows();
        MnlAverage {
            x,
            sum: vec![0.0; j],
            u: vec![0.0; j],
            count: 0,
        }
    }

    fn add(&mut self, beta: &DVector<f64>) {
        utilities_into(self.x, beta.as_slice(), &mut self.u);
        let lse = lse_unchecked(&self.u);
        for (s, u) in self.sum.iter_mut().zip(&self.u) {
            *s += (u - lse).exp();
        }
        self.count += 1;
    }

    fn finish(self) -> DVector<f64> {
        let n = self.count as f64;
        DVector::from_iterator(self.sum.len(), self.sum.into_iter().map(|s| s / n))
    }
}

/// One posterior draw of the population-level parameters, as square-root
/// factors. `source` locates an MCMC draw as (chain, index).
struct GlobalDraw {
    zeta: DVector<f64>,
    lb: DMatrix<f64>,
    lw: DMatrix<f64>,
    source: Option<(usize, usize)>,
}

fn check_k(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Dimension(format!(
            "scenario has {found} attributes, parameters have {expected}"
        )));
    }
    Ok(())
}

fn truth_draw(truth: &Truth) -> Result<GlobalDraw> {
    Ok(GlobalDraw {
        zeta: truth.zeta.clone(),
        lb: psd_factor(&truth.sigma_b)?,
        lw: psd_factor(&truth.sigma_w)?,
        source: None,
    })
}

/// `n_outer` draws of (ζ, Σ_B, Σ_W). MCMC uses retained draws at evenly spaced
/// positions (all of them when fewer are available), VB samples the
/// variational factors.
fn outer_draws(fitted: &Fitted, n_outer: usize, rng: &mut Rng) -> Result<Vec<GlobalDraw>> {
    match fitted {
        Fitted::Truth(t) => {
            let d = truth_draw(t)?;
            Ok((0..n_outer)
                .map(|_| GlobalDraw {
                    zeta: d.zeta.clone(),
                    lb: d.lb.clone(),
                    lw: d.lw.clone(),
                    source: None,
                })
                .collect())
        }
        Fitted::Mcmc(draws) => {
            let index: Vec<(usize, usize)> = draws
                .chains
                .iter()
                .enumerate()
                .flat_map(|(c, ch)| (0..ch.len()).map(move |i| (c, i)))
                .collect();
            if index.is_empty() {
                return Err(Error::Validation("MCMC fit has no retained draws".into()));
            }
            let m = n_outer.min(index.len());
            Ok((0..m)
                .map(|o| {
                    let (c, i) = index[o * index.len() / m];
                    let ch = &draws.chains[c];
                    GlobalDraw {
                        zeta: ch.zeta[i].clone(),
                        lb: ch.sigma_b[i].factor().clone(),
                        lw: ch.sigma_w[i].factor().clone(),
                        source: Some((c, i)),
                    }
                })
                .collect())
        }
        Fitted::Vb(vp) => (0..n_outer)
            .map(|_| {
                let zeta = sample_mvn_factor(&vp.mu_zeta, vp.sigma_zeta.factor(), rng);
                let sb = sample_inverse_wishart(vp.w_b, &vp.theta_b, rng)?;
                let sw = sample_inverse_wishart(vp.w_w, &vp.theta_w, rng)?;
                Ok(GlobalDraw {
                    zeta,
                    lb: sb.factor().clone(),
                    lw: sw.factor().clone(),
                    source: None,
                })
            })
            .collect(),
    }
}

fn check_scenario_k(occasions: &[crate::model::Occasion], k: usize) -> Result<()> {
    occasions.iter().try_for_each(|o| check_k(o.x.ncols(), k))
}

/// True predictive distribution of each Between choice set: the MNL kernel
/// integrated over `μ ~ N(ζ, Σ_B)`, `β ~ N(μ, Σ_W)` with `n_mc` nested draws.
pub fn true_predictive_between(
    scenario: &BetweenScenario,
    truth: &Truth,
    n_mc: usize,
    rng: &Rng,
) -> Result<Vec<DVector<f64>>> {
    if n_mc == 0 {
        return Err(Error::Validation("n_mc must be positive".into()));
    }
    check_scenario_k(&scenario.occasions, truth.zeta.len())?;
    let d = truth_draw(truth)?;
    Ok(map_range(scenario.occasions.len(), |s| {
        let mut rng = rng.split(s as u64);
        let mut avg = MnlAverage::new(&scenario.occasions[s].x);
        for _ in 0..n_mc {
            let mu = sample_mvn_factor(&d.zeta, &d.lb, &mut rng);
            avg.add(&sample_mvn_factor(&mu, &d.lw, &mut rng));
        }
        avg.finish()
    }))
}

/// Estimated predictive distribution of each Between choice set: an outer
/// average over posterior draws of (ζ, Σ_B, Σ_W) and an inner average over
/// `n_inner` draws of μ and then β.
pub fn estimated_predictive_between(
    scenario: &BetweenScenario,
    fitted: &Fitted,
    n_outer: usize,
    n_inner: usize,
    rng: &Rng,
) -> Result<Vec<DVector<f64>>> {
    if n_outer == 0 || n_inner == 0 {
        return Err(Error::Validation("n_outer and n_inner must be positive".into()));
    }
    check_scenario_k(&scenario.occasions, fitted.k())?;
    let outer = outer_draws(fitted, n_outer, &mut rng.split(STREAM_OUTER))?;
    Ok(map_range(scenario.occasions.len(), |s| {
        let mut rng = rng.split(s as u64);
        let mut avg = MnlAverage::new(&scenario.occasions[s].x);
        for g in &outer {
            for _ in 0..n_inner {
                let mu = sample_mvn_factor(&g.zeta, &g.lb, &mut rng);
                avg.add(&sample_mvn_factor(&mu, &g.lw, &mut rng));
            }
        }
        avg.finish()
    }))
}

/// True predictive distribution of each Within choice set: the MNL kernel
/// integrated over `β ~ N(μ_n, Σ_W)` at the person's true `μ_n`.
pub fn true_predictive_within(
    scenario: &WithinScenario,
    truth: &Truth,
    n_mc: usize,
    rng: &Rng,
) -> Result<Vec<DVector<f64>>> {
    if n_mc == 0 {
        return Err(Error::Validation("n_mc must be positive".into()));
    }
    check_within(scenario)?;
    check_scenario_k(&scenario.occasions, truth.zeta.len())?;
    if let Some(&n) = scenario.persons.iter().find(|&&n| n >= truth.mu.len()) {
        return Err(Error::Validation(format!("person {n} is not in the training data")));
    }
    let lw = psd_factor(&truth.sigma_w)?;
    Ok(map_range(scenario.occasions.len(), |s| {
        let mut rng = rng.split(s as u64);
        let mu = &truth.mu[scenario.persons[s]];
        let mut avg = MnlAverage::new(&scenario.occasions[s].x);
        for _ in 0..n_mc {
            avg.add(&sample_mvn_factor(mu, &lw, &mut rng));
        }
        avg.finish()
    }))
}

fn check_within(scenario: &WithinScenario) -> Result<()> {
    if scenario.persons.len() != scenario.occasions.len() {
        return Err(Error::Dimension(format!(
            "within scenario lists {} persons for {} occasions",
            scenario.persons.len(),
            scenario.occasions.len()
        )));
    }
    Ok(())
}

/// Estimated predictive distribution of each Within choice set, integrating
/// over the posterior of (μ_n, Σ_W). MCMC pairs each Σ_W draw with the μ_n
/// retained at the same iteration; VB draws `μ_n ~ N(μ_μn, Σ_μn)`.
pub fn estimated_predictive_within(
    scenario: &WithinScenario,
    fitted: &Fitted,
    n_outer: usize,
    n_inner: usize,
    rng: &Rng,
) -> Result<Vec<DVector<f64>>> {
    if n_outer == 0 || n_inner == 0 {
        return Err(Error::Validation("n_outer and n_inner must be positive".into()));
    }
    check_within(scenario)?;
    check_scenario_k(&scenario.occasions, fitted.k())?;
    // Locate each person's posterior before drawing anything.
    let slots: Vec<usize> = scenario
        .persons
        .iter()
        .map(|&n| match fitted {
            Fitted::Truth(t) if n < t.mu.len() => Ok(n),
            Fitted::Vb(vp) if n < vp.n_persons() => Ok(n),
            Fitted::Mcmc(d) => d
                .tracked_persons()
                .iter()
                .position(|&p| p == n)
                .ok_or_else(|| Error::Validation(format!("no retained μ draws for person {n}"))),
            _ => Err(Error::Validation(format!("person {n} is not in the fitted posterior"))),
        })
        .collect::<Result<_>>()?;
    let outer = outer_draws(fitted, n_outer, &mut rng.split(STREAM_OUTER))?;
    Ok(map_range(scenario.occasions.len(), |s| {
        let mut rng = rng.split(s as u64);
        let slot = slots[s];
        let mut avg = MnlAverage::new(&scenario.occasions[s].x);
        for g in &outer {
            let mu = match fitted {
                Fitted::Truth(t) => t.mu[slot].clone(),
                Fitted::Vb(vp) => sample_mvn_factor(&vp.mu_mu[slot], vp.sigma_mu[slot].factor(), &mut rng),
                Fitted::Mcmc(d) => {
                    let (c, i) = g.source.expect("MCMC draws carry their position");
                    DVector::from_column_slice(&d.chains[c].mu[i][slot])
                }
            };
            for _ in 0..n_inner {
                avg.add(&sample_mvn_factor(&mu, &g.lw, &mut rng));
            }
        }
        avg.finish()
    }))
}

/// TVDs of one scenario and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdSummary {
    pub mean: f64,
    pub per_scenario: Vec<f64>,
}

impl TvdSummary {
    pub fn from_distributions(truth: &[DVector<f64>], estimate: &[DVector<f64>]) -> Result<Self> {
        if truth.len() != estimate.len() || truth.is_empty() {
            return Err(Error::Dimension(format!(
                "{} true and {} estimated distributions",
                truth.len(),
                estimate.len()
            )));
        }
        let per_scenario = truth
            .iter()
            .zip(estimate)
            .map(|(p, q)| tvd(p.as_slice(), q.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TvdSummary {
            mean: per_scenario.iter().sum::<f64>() / per_scenario.len() as f64,
            per_scenario,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveReport {
    pub method: Method,
    pub tvd_between: TvdSummary,
    pub tvd_within: TvdSummary,
    /// Posterior draws actually used (bounded by the retained draws for MCMC).
    pub n_mc_outer: usize,
    pub n_mc_inner: usize,
    pub n_mc_true: usize,
    pub seed: u64,
    /// Wall-clock time of the evaluation itself.
    pub seconds: f64,
}

/// Score `fitted` on both scenarios.
pub fn evaluate(
    data: &ChoiceDataset,
    truth: &Truth,
    scenarios: &Scenarios,
    fitted: &Fitted,
    cfg: &EvalConfig,
) -> Result<PredictiveReport> {
    cfg.validate()?;
    let start = Instant::now();
    if truth.mu.len() != data.n_persons() {
        return Err(Error::Dimension(format!(
            "truth has {} persons, data {}",
            truth.mu.len(),
            data.n_persons()
        )));
    }
    check_k(truth.zeta.len(), data.k())?;
    check_k(fitted.k(), data.k())?;
    let root = Rng::new(cfg.seed);
    let tb = true_predictive_between(&scenarios.between, truth, cfg.n_true, &root.split(STREAM_TRUE_BETWEEN))?;
    let eb = estimated_predictive_between(
        &scenarios.between,
        fitted,
        cfg.n_outer,
        cfg.n_inner,
        &root.split(STREAM_EST_BETWEEN),
    )?;
    let tw = true_predictive_within(&scenarios.within, truth, cfg.n_true, &root.split(STREAM_TRUE_WITHIN))?;
    let ew = estimated_predictive_within(
        &scenarios.within,
        fitted,
        cfg.n_outer,
        cfg.n_inner,
        &root.split(STREAM_EST_WITHIN),
    )?;
    let n_mc_outer = match fitted {
        Fitted::Mcmc(d) => cfg.n_outer.min(d.n_draws()),
        _ => cfg.n_outer,
    };
    Ok(PredictiveReport {
        method: fitted.method(),
        tvd_between: TvdSummary::from_distributions(&tb, &eb)?,
        tvd_within: TvdSummary::from_distributions(&tw, &ew)?,
        n_mc_outer,
        n_mc_inner: cfg.n_inner,
        n_mc_true: cfg.n_true,
        seed: cfg.seed,
        seconds: start.elapsed().as_secs_f64(),
    })
}
