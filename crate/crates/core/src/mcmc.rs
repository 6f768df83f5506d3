//! Metropolis-within-Gibbs posterior sampler.
//!
//! One sweep updates, in order: `a_B`, `Σ_B`, `a_W`, `Σ_W`, `ζ` and every
//! `μ_n` from their conjugate conditionals, then every `β_nt` with a
//! random-walk Metropolis step `β̃ = β + √ρ chol(Σ_W) η`.
//!
//! Chains start from ζ = μ = β = 0, Σ_B = Σ_W = I and a = 1. The step scale ρ
//! is adapted during burn-in only, by ×1.01 or ×0.99 after each batch of 100
//! sweeps depending on whether the batch acceptance rate beat the target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::model::{log_choice_prob, ChoiceDataset, Hyperparameters, Occasion, ParameterState};
use crate::serde_util::dvecs;
use crate::stats::{sample_gamma, sample_inverse_wishart, sample_mvn, Rng, SpdMatrix};

/// Sweeps per adaptation batch.
pub const ADAPT_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    /// Initial random-walk scale ρ.
    pub rho: f64,
    pub adapt_target: f64,
    pub adapt: bool,
    pub seed: u64,
    /// Persons whose μ_n draws are retained (for within-person prediction).
    pub track_persons: Vec<usize>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_chains: 2,
            n_iter: 200_000,
            n_burn: 100_000,
            thin: 10,
            rho: 0.1,
            adapt_target: 0.30,
            adapt: true,
            seed: 0,
            track_persons: Vec::new(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Validation("n_chains must be at least 1".into()));
        }
        if self.n_burn >= self.n_iter {
            return Err(Error::Validation(format!(
                "n_burn ({}) must be below n_iter ({})",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Validation("thin must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Validation("rho must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adapt_target) {
            return Err(Error::Validation("adapt_target must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Iteration numbers (1-based) whose state is retained.
    pub fn retained_iterations(&self) -> impl Iterator<Item = usize> {
        let thin = self.thin;
        (self.n_burn + thin..=self.n_iter).step_by(thin)
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }
}

/// Retained draws of one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    #[serde(with = "dvecs")]
    pub zeta: Vec<DVector<f64>>,
    pub sigma_b: Vec<SpdMatrix>,
    pub sigma_w: Vec<SpdMatrix>,
    /// `mu[d][i]` is the draw `d` of μ for `track_persons[i]`.
    pub mu: Vec<Vec<Vec<f64>>>,
    /// Acceptance rate of each batch of [`ADAPT_BATCH`] sweeps.
    pub acceptance: Vec<f64>,
    /// ρ after burn-in.
    pub rho: f64,
}

impl ChainDraws {
    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    /// Acceptance rate over the post-burn-in batches.
    pub fn sampling_acceptance(&self, n_burn: usize) -> f64 {
        let skip = n_burn / ADAPT_BATCH;
        let tail = &self.acceptance[skip.min(self.acceptance.len())..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcDraws {
    pub k: usize,
    pub n_persons: usize,
    pub config: McmcConfig,
    pub chains: Vec<ChainDraws>,
    /// Split-R̂ per component of ζ.
    pub rhat_zeta: Vec<f64>,
    pub seconds: f64,
}

impl McmcDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(ChainDraws::len).sum()
    }

    pub fn tracked_persons(&self) -> &[usize] {
        &self.config.track_persons
    }

    /// `(ζ, Σ_B, Σ_W)` across chains, chain by chain.
    pub fn global_draws(&self) -> impl Iterator<Item = (&DVector<f64>, &SpdMatrix, &SpdMatrix)> + '_ {
        self.chains
            .iter()
            .flat_map(|c| c.zeta.iter().zip(c.sigma_b.iter()).zip(c.sigma_w.iter()).map(|((z, b), w)| (z, b, w)))
    }

    pub fn posterior_mean_zeta(&self) -> DVector<f64> {
        let n = self.n_draws().max(1) as f64;
        self.global_draws().fold(DVector::zeros(self.k), |acc, (z, _, _)| acc + z) / n
    }

    /// Empirical quantile of component `k` of ζ over all retained draws.
    pub fn zeta_quantile(&self, k: usize, q: f64) -> f64 {
        let mut v: Vec<f64> = self.global_draws().map(|(z, _, _)| z[k]).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        quantile_sorted(&v, q)
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Gamma conditional of `a_B`: shape `(ν_B+K)/2`, rates `A_{B,k}^-2 + ν_B (Σ_B⁻¹)_kk`.
pub fn a_b_conditional(state: &ParameterState, hyper: &Hyperparameters) -> (f64, DVector<f64>) {
    a_conditional(hyper.nu_b, &hyper.rate_b(), &state.sigma_b)
}

pub fn a_w_conditional(state: &ParameterState, hyper: &Hyperparameters) -> (f64, DVector<f64>) {
    a_conditional(hyper.nu_w, &hyper.rate_w(), &state.sigma_w)
}

fn a_conditional(nu: f64, prior_rate: &DVector<f64>, sigma: &SpdMatrix) -> (f64, DVector<f64>) {
    let k = sigma.dim();
    let inv = sigma.inverse();
    let shape = 0.5 * (nu + k as f64);
    let rates = DVector::from_fn(k, |i, _| prior_rate[i] + nu * inv[(i, i)]);
    (shape, rates)
}

/// Inverse-Wishart conditional of `Σ_B`: `(ν_B + N + K − 1, 2ν_B diag(a_B) + Σ_n (μ_n−ζ)(μ_n−ζ)ᵀ)`.
pub fn sigma_b_conditional(
    state: &ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
) -> Result<(f64, SpdMatrix)> {
    let k = data.k();
    let mut scale = DMatrix::from_diagonal(&(&state.a_b * (2.0 * hyper.nu_b)));
    for mu in &state.mu {
        let d = mu - &state.zeta;
        scale.ger(1.0, &d, &d, 1.0);
    }
    let dof = hyper.nu_b + data.n_persons() as f64 + k as f64 - 1.0;
    Ok((dof, SpdMatrix::from_symmetrized(scale)?))
}

/// Inverse-Wishart conditional of `Σ_W`: `(ν_W + Σ T_n + K − 1, 2ν_W diag(a_W) + Σ_nt (β_nt−μ_n)(β_nt−μ_n)ᵀ)`.
pub fn sigma_w_conditional(
    state: &ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
) -> Result<(f64, SpdMatrix)> {
    let k = data.k();
    let mut scale = DMatrix::from_diagonal(&(&state.a_w * (2.0 * hyper.nu_w)));
    for (n, i, _) in data.iter() {
        let d = &state.beta[i] - &state.mu[n];
        scale.ger(1.0, &d, &d, 1.0);
    }
    let dof = hyper.nu_w + data.n_occasions() as f64 + k as f64 - 1.0;
    Ok((dof, SpdMatrix::from_symmetrized(scale)?))
}

/// Normal conditional of ζ: covariance `(Ξ0⁻¹ + N Σ_B⁻¹)⁻¹`.
pub fn zeta_conditional(
    state: &ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
) -> Result<(DVector<f64>, SpdMatrix)> {
    let prior_prec = hyper.zeta_prior_cov.inverse();
    let prec_b = state.sigma_b.inverse();
    let n = data.n_persons() as f64;
    let cov = SpdMatrix::from_symmetrized(&prior_prec + &prec_b * n)?.inverse_spd()?;
    let mu_sum = state.mu.iter().fold(DVector::zeros(data.k()), |acc, m| acc + m);
    let mean = cov.values() * (&prior_prec * &hyper.zeta_prior_mean + &prec_b * mu_sum);
    Ok((mean, cov))
}

/// Normal conditional of μ_n: covariance `(Σ_B⁻¹ + T_n Σ_W⁻¹)⁻¹`.
pub fn mu_conditional(state: &ParameterState, data: &ChoiceDataset, n: usize) -> Result<(DVector<f64>, SpdMatrix)> {
    let prec_b = state.sigma_b.inverse();
    let prec_w = state.sigma_w.inverse();
    mu_conditional_with(state, data, n, &prec_b, &prec_w)
}

fn mu_conditional_with(
    state: &ParameterState,
    data: &ChoiceDataset,
    n: usize,
    prec_b: &DMatrix<f64>,
    prec_w: &DMatrix<f64>,
) -> Result<(DVector<f64>, SpdMatrix)> {
    let t = data.t_of(n) as f64;
    let cov = SpdMatrix::from_symmetrized(prec_b + prec_w * t)?.inverse_spd()?;
    let beta_sum = data
        .occasion_range(n)
        .fold(DVector::zeros(data.k()), |acc, i| acc + &state.beta[i]);
    let mean = cov.values() * (prec_b * &state.zeta + prec_w * beta_sum);
    Ok((mean, cov))
}

pub fn update_a_b(state: &mut ParameterState, hyper: &Hyperparameters, rng: &mut Rng) -> Result<()> {
    let (shape, rates) = a_b_conditional(state, hyper);
    for (a, r) in state.a_b.iter_mut().zip(rates.iter()) {
        *a = sample_gamma(shape, *r, rng)?;
    }
    Ok(())
}

pub fn update_sigma_b(
    state: &mut ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
    rng: &mut Rng,
) -> Result<()> {
    let (dof, scale) = sigma_b_conditional(state, data, hyper)?;
    state.sigma_b = sample_inverse_wishart(dof, &scale, rng)?;
    Ok(())
}

pub fn update_a_w(state: &mut ParameterState, hyper: &Hyperparameters, rng: &mut Rng) -> Result<()> {
    let (shape, rates) = a_w_conditional(state, hyper);
    for (a, r) in state.a_w.iter_mut().zip(rates.iter()) {
        *a = sample_gamma(shape, *r, rng)?;
    }
    Ok(())
}

pub fn update_sigma_w(
    state: &mut ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
    rng: &mut Rng,
) -> Result<()> {
    let (dof, scale) = sigma_w_conditional(state, data, hyper)?;
    state.sigma_w = sample_inverse_wishart(dof, &scale, rng)?;
    Ok(())
}

pub fn update_zeta(
    state: &mut ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
    rng: &mut Rng,
) -> Result<()> {
    let (mean, cov) = zeta_conditional(state, data, hyper)?;
    state.zeta = sample_mvn(&mean, &cov, rng)?;
    Ok(())
}

/// Redraw every μ_n.
pub fn update_mu(state: &mut ParameterState, data: &ChoiceDataset, rng: &mut Rng) -> Result<()> {
    let prec_b = state.sigma_b.inverse();
    let prec_w = state.sigma_w.inverse();
    for n in 0..data.n_persons() {
        let (mean, cov) = mu_conditional_with(state, data, n, &prec_b, &prec_w)?;
        state.mu[n] = sample_mvn(&mean, &cov, rng)?;
    }
    Ok(())
}

/// Conjugate part of a sweep (a_B, Σ_B, a_W, Σ_W, ζ, μ_1:N), in place.
pub fn gibbs_conjugate_step(
    state: &mut ParameterState,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
    rng: &mut Rng,
) -> Result<()> {
    update_a_b(state, hyper, rng)?;
    update_sigma_b(state, data, hyper, rng)?;
    update_a_w(state, hyper, rng)?;
    update_sigma_w(state, data, hyper, rng)?;
    update_zeta(state, data, hyper, rng)?;
    update_mu(state, data, rng)
}

/// Chain starting point: ζ = 0, Σ_B = Σ_W = I and a = 1, with μ_n and β_nt
/// drawn from the hierarchy at those values.
pub fn initial_state(data: &ChoiceDataset, rng: &mut Rng) -> ParameterState {
    let mut state = ParameterState::initial(data);
    for mu in state.mu.iter_mut() {
        *mu = rng.standard_normal_vec(data.k());
    }
    for (n, i, _) in data.iter() {
        state.beta[i] = &state.mu[n] + rng.standard_normal_vec(data.k());
    }
    state
}

/// Random-walk Metropolis kernel for one `β_nt`, with Σ_W-derived quantities
/// precomputed once per sweep.
pub struct BetaKernel {
    k: usize,
    /// `√ρ · chol(Σ_W)`, column-major.
    step: Vec<f64>,
    /// Σ_W⁻¹, column-major.
    precision: Vec<f64>,
    proposal: Vec<f64>,
    utilities: Vec<f64>,
}

impl BetaKernel {
    pub fn new(sigma_w: &SpdMatrix, rho: f64, max_alts: usize) -> Self {
        let k = sigma_w.dim();
        BetaKernel {
            k,
            step: (sigma_w.factor() * rho.sqrt()).as_slice().to_vec(),
            precision: sigma_w.inverse().as_slice().to_vec(),
            proposal: vec![0.0; k],
            utilities: vec![0.0; max_alts.max(1)],
        }
    }

    fn quad(&self, x: &[f64], mu: &[f64]) -> f64 {
        let k = self.k;
        let mut acc = 0.0;
        for j in 0..k {
            let dj = x[j] - mu[j];
            let col = &self.precision[j * k..(j + 1) * k];
            let mut s = 0.0;
            for i in 0..k {
                s += col[i] * (x[i] - mu[i]);
            }
            acc += dj * s;
        }
        acc
    }

    /// `ln r` for moving from `beta` to `proposal`.
    pub fn log_ratio(&mut self, occ: &Occasion, beta: &[f64], proposal: &[f64], mu: &[f64]) -> f64 {
        let ll_new = log_choice_prob(occ, proposal, &mut self.utilities);
        let ll_old = log_choice_prob(occ, beta, &mut self.utilities);
        ll_new - ll_old - 0.5 * (self.quad(proposal, mu) - self.quad(beta, mu))
    }

    /// Propose with innovation `eta` and accept when `ln u ≤ ln r`.
    pub fn update(&mut self, occ: &Occasion, beta: &mut [f64], mu: &[f64], eta: &[f64], log_u: f64) -> bool {
        let k = self.k;
        let mut proposal = std::mem::take(&mut self.proposal);
        proposal.copy_from_slice(beta);
        for j in 0..k {
            let e = eta[j];
            if e != 0.0 {
                let col = &self.step[j * k..(j + 1) * k];
                for i in j..k {
                    proposal[i] += col[i] * e;
                }
            }
        }
        let accept = log_u <= self.log_ratio(occ, beta, &proposal, mu);
        if accept {
            beta.copy_from_slice(&proposal);
        }
        self.proposal = proposal;
        accept
    }
}

/// Metropolis update of every `β_nt`. Returns the number of accepted moves.
pub fn mh_beta_step(state: &mut ParameterState, data: &ChoiceDataset, rho: f64, rng: &mut Rng) -> usize {
    let k = data.k();
    let mut kernel = BetaKernel::new(&state.sigma_w, rho, data.max_alts());
    let mut eta = vec![0.0; k];
    let mut accepted = 0;
    for (n, i, occ) in data.iter() {
        eta.iter_mut().for_each(|e| *e = rng.standard_normal());
        let log_u = rng.uniform().ln();
        let mu = state.mu[n].as_slice();
        if kernel.update(occ, state.beta[i].as_mut_slice(), mu, &eta, log_u) {
            accepted += 1;
        }
    }
    accepted
}

/// Split-R̂ of a scalar quantity over several chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if half < 2 {
        return f64::NAN;
    }
    let seqs: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let c = &c[c.len() - 2 * half..];
            [&c[..half], &c[half..]]
        })
        .collect();
    let n = half as f64;
    let m = seqs.len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mean)| s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

fn run_chain(
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
    cfg: &McmcConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let mut rng = Rng::new(cfg.seed).split(chain as u64);
    let mut state = initial_state(data, &mut rng);
    let mut rho = cfg.rho;
    let per_chain = cfg.draws_per_chain();
    let mut out = ChainDraws {
        zeta: Vec::with_capacity(per_chain),
        sigma_b: Vec::with_capacity(per_chain),
        sigma_w: Vec::with_capacity(per_chain),
        mu: Vec::with_capacity(if cfg.track_persons.is_empty() { 0 } else { per_chain }),
        acceptance: Vec::with_capacity(cfg.n_iter / ADAPT_BATCH + 1),
        rho,
    };
    let mut batch_accepted = 0usize;
    let mut batch_sweeps = 0usize;
    for iter in 1..=cfg.n_iter {
        gibbs_conjugate_step(&mut state, data, hyper, &mut rng)?;
        batch_accepted += mh_beta_step(&mut state, data, rho, &mut rng);
        batch_sweeps += 1;

        if batch_sweeps == ADAPT_BATCH || iter == cfg.n_iter {
            let rate = batch_accepted as f64 / (batch_sweeps * data.n_occasions()) as f64;
            out.acceptance.push(rate);
            if cfg.adapt && iter <= cfg.n_burn {
                rho *= if rate > cfg.adapt_target { 1.01 } else { 0.99 };
            }
            batch_accepted = 0;
            batch_sweeps = 0;
        }
        if iter == cfg.n_burn {
            out.rho = rho;
        }

        if iter > cfg.n_burn && (iter - cfg.n_burn) % cfg.thin == 0 {
            out.zeta.push(state.zeta.clone());
            out.sigma_b.push(state.sigma_b.clone());
            out.sigma_w.push(state.sigma_w.clone());
            if !cfg.track_persons.is_empty() {
                out.mu.push(cfg.track_persons.iter().map(|&n| state.mu[n].as_slice().to_vec()).collect());
            }
        }
    }
    Ok(out)
}

/// Run every chain and collect thinned post-burn-in draws.
pub fn run_mcmc(data: &ChoiceDataset, hyper: &Hyperparameters, cfg: &McmcConfig) -> Result<McmcDraws> {
    cfg.validate()?;
    hyper.validate()?;
    if hyper.k() != data.k() {
        return Err(Error::Dimension("hyperparameters and data disagree on K".into()));
    }
    if let Some(&n) = cfg.track_persons.iter().find(|&&n| n >= data.n_persons()) {
        return Err(Error::Validation(format!("tracked person {n} is not in the dataset")));
    }
    let start = Instant::now();

    let chains = crate::par::map_range(cfg.n_chains, |c| run_chain(data, hyper, cfg, c));
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let rhat_zeta = (0..data.k())
        .map(|k| {
            let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.zeta.iter().map(|z| z[k]).collect()).collect();
            split_rhat(&traces)
        })
        .collect();
    Ok(McmcDraws {
        k: data.k(),
        n_persons: data.n_persons(),
        config: cfg.clone(),
        chains,
        rhat_zeta,
        seconds,
    })
}
