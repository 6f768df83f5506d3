//! Mixed logit model: panel choice data, the MNL kernel, the joint log density
//! of the hierarchy and the synthetic data-generating process.
//!
//! The hierarchy is
//!
//! ```text
//! a_{B,k} ~ Gamma(1/2, A_{B,k}^-2)          a_{W,k} ~ Gamma(1/2, A_{W,k}^-2)
//! Σ_B ~ IW(ν_B + K - 1, 2ν_B diag(a_B))     Σ_W ~ IW(ν_W + K - 1, 2ν_W diag(a_W))
//! ζ ~ N(ξ0, Ξ0)
//! μ_n ~ N(ζ, Σ_B)
//! β_nt ~ N(μ_n, Σ_W)
//! y_nt ~ MNL(X_nt β_nt)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util::{dmat, dvec, dvecs};
use crate::stats::{
    lse_unchecked, logpdf_gamma, logpdf_inverse_wishart, logpdf_mvn, psd_factor, sample_gamma,
    sample_inverse_wishart, sample_mvn, sample_mvn_factor, Rng, SpdMatrix, LN_2PI,
};

/// Number of decision-makers in each validation scenario.
pub const VALIDATION_PERSONS: usize = 25;

/// One choice situation: a `J × K` design matrix and the chosen row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occasion {
    #[serde(with = "dmat")]
    pub x: DMatrix<f64>,
    pub chosen: usize,
}

impl Occasion {
    pub fn n_alts(&self) -> usize {
        self.x.nrows()
    }

    /// Representative utilities `X β` written into `out`.
    #[inline]
    pub(crate) fn utilities_into(&self, beta: &[f64], out: &mut [f64]) {
        utilities_into(&self.x, beta, out)
    }
}

#[inline]
pub(crate) fn utilities_into(x: &DMatrix<f64>, beta: &[f64], out: &mut [f64]) {
    let j = x.nrows();
    let data = x.as_slice();
    out[..j].iter_mut().for_each(|u| *u = 0.0);
    for (k, b) in beta.iter().enumerate() {
        let col = &data[k * j..(k + 1) * j];
        for (u, xv) in out[..j].iter_mut().zip(col) {
            *u += xv * b;
        }
    }
}

/// Ragged panel of choices: persons, each with `T_n ≥ 1` occasions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    k: usize,
    occasions: Vec<Occasion>,
    person_starts: Vec<usize>,
}

impl ChoiceDataset {
    pub fn new(k: usize, persons: Vec<Vec<Occasion>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("K must be positive".into()));
        }
        if persons.is_empty() {
            return Err(Error::Validation("dataset has no persons".into()));
        }
        let mut occasions = Vec::new();
        let mut person_starts = vec![0];
        for (n, occ) in persons.into_iter().enumerate() {
            if occ.is_empty() {
                return Err(Error::Validation(format!("person {n} has no occasions")));
            }
            for (t, o) in occ.into_iter().enumerate() {
                if o.x.ncols() != k {
                    return Err(Error::Dimension(format!(
                        "person {n} occasion {t}: design matrix has {} columns, expected {k}",
                        o.x.ncols()
                    )));
                }
                if o.n_alts() == 0 || o.chosen >= o.n_alts() {
                    return Err(Error::Validation(format!(
                        "person {n} occasion {t}: chosen index {} outside 0..{}",
                        o.chosen,
                        o.n_alts()
                    )));
                }
                if o.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("person {n} occasion {t}: non-finite attribute")));
                }
                occasions.push(o);
            }
            person_starts.push(occasions.len());
        }
        Ok(ChoiceDataset {
            k,
            occasions,
            person_starts,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_persons(&self) -> usize {
        self.person_starts.len() - 1
    }

    /// Total number of occasions, Σ_n T_n.
    pub fn n_occasions(&self) -> usize {
        self.occasions.len()
    }

    pub fn t_of(&self, n: usize) -> usize {
        self.person_starts[n + 1] - self.person_starts[n]
    }

    /// Range of global occasion indices belonging to person `n`.
    pub fn occasion_range(&self, n: usize) -> std::ops::Range<usize> {
        self.person_starts[n]..self.person_starts[n + 1]
    }

    pub fn person_occasions(&self, n: usize) -> &[Occasion] {
        &self.occasions[self.occasion_range(n)]
    }

    pub fn occasions(&self) -> &[Occasion] {
        &self.occasions
    }

    pub fn max_alts(&self) -> usize {
        self.occasions.iter().map(Occasion::n_alts).max().unwrap_or(0)
    }

    /// Same design with the chosen alternatives replaced, in global occasion order.
    pub fn with_choices(&self, choices: &[usize]) -> Result<Self> {
        if choices.len() != self.occasions.len() {
            return Err(Error::Dimension(format!(
                "{} choices for {} occasions",
                choices.len(),
                self.occasions.len()
            )));
        }
        let mut out = self.clone();
        for (o, &c) in out.occasions.iter_mut().zip(choices) {
            if c >= o.n_alts() {
                return Err(Error::Validation(format!("chosen index {c} outside 0..{}", o.n_alts())));
            }
            o.chosen = c;
        }
        Ok(out)
    }

    /// Iterator over `(person, global occasion index, occasion)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Occasion)> + '_ {
        (0..self.n_persons()).flat_map(move |n| self.occasion_range(n).map(move |i| (n, i, &self.occasions[i])))
    }
}

/// Prior constants of the hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// ξ0
    #[serde(with = "dvec")]
    pub zeta_prior_mean: DVector<f64>,
    /// Ξ0
    pub zeta_prior_cov: SpdMatrix,
    pub nu_b: f64,
    pub nu_w: f64,
    /// A_{B,1:K}
    #[serde(with = "dvec")]
    pub scale_b: DVector<f64>,
    /// A_{W,1:K}
    #[serde(with = "dvec")]
    pub scale_w: DVector<f64>,
}

impl Hyperparameters {
    /// ξ0 = 0, Ξ0 = 10·I, ν_B = ν_W = 2, A = 1.04.
    pub fn default_for(k: usize) -> Self {
        Hyperparameters {
            zeta_prior_mean: DVector::zeros(k),
            zeta_prior_cov: SpdMatrix::scaled_identity(k, 10.0),
            nu_b: 2.0,
            nu_w: 2.0,
            scale_b: DVector::from_element(k, 1.04),
            scale_w: DVector::from_element(k, 1.04),
        }
    }

    pub fn k(&self) -> usize {
        self.zeta_prior_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Validation("hyperparameters have K = 0".into()));
        }
        if self.zeta_prior_cov.dim() != k || self.scale_b.len() != k || self.scale_w.len() != k {
            return Err(Error::Dimension("hyperparameter blocks disagree on K".into()));
        }
        if !(self.nu_b > 0.0 && self.nu_w > 0.0) {
            return Err(Error::Validation("ν_B and ν_W must be positive".into()));
        }
        if self.scale_b.iter().chain(self.scale_w.iter()).any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Validation("A_B and A_W entries must be positive".into()));
        }
        Ok(())
    }

    /// Gamma shape `s` of the auxiliary scales.
    pub fn shape(&self) -> f64 {
        0.5
    }

    /// `r_{B,k} = A_{B,k}^-2`
    pub fn rate_b(&self) -> DVector<f64> {
        self.scale_b.map(|a| a.powi(-2))
    }

    pub fn rate_w(&self) -> DVector<f64> {
        self.scale_w.map(|a| a.powi(-2))
    }

    /// `ω_B = ν_B + K − 1`
    pub fn omega_b(&self) -> f64 {
        self.nu_b + self.k() as f64 - 1.0
    }

    pub fn omega_w(&self) -> f64 {
        self.nu_w + self.k() as f64 - 1.0
    }

    /// `B_B = 2 ν_B diag(a_B)`
    pub fn iw_scale_b(&self, a_b: &DVector<f64>) -> Result<SpdMatrix> {
        SpdMatrix::from_diagonal(&(a_b * (2.0 * self.nu_b)))
    }

    pub fn iw_scale_w(&self, a_w: &DVector<f64>) -> Result<SpdMatrix> {
        SpdMatrix::from_diagonal(&(a_w * (2.0 * self.nu_w)))
    }
}

/// One complete value of every model parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    #[serde(with = "dvec")]
    pub a_b: DVector<f64>,
    #[serde(with = "dvec")]
    pub a_w: DVector<f64>,
    pub sigma_b: SpdMatrix,
    pub sigma_w: SpdMatrix,
    #[serde(with = "dvec")]
    pub zeta: DVector<f64>,
    /// μ_n, one per person.
    #[serde(with = "dvecs")]
    pub mu: Vec<DVector<f64>>,
    /// β_nt indexed by global occasion.
    #[serde(with = "dvecs")]
    pub beta: Vec<DVector<f64>>,
}

impl ParameterState {
    /// ζ, μ, β at zero; Σ_B, Σ_W at I; a vectors at one.
    pub fn initial(data: &ChoiceDataset) -> Self {
        let k = data.k();
        ParameterState {
            a_b: DVector::from_element(k, 1.0),
            a_w: DVector::from_element(k, 1.0),
            sigma_b: SpdMatrix::identity(k),
            sigma_w: SpdMatrix::identity(k),
            zeta: DVector::zeros(k),
            mu: vec![DVector::zeros(k); data.n_persons()],
            beta: vec![DVector::zeros(k); data.n_occasions()],
        }
    }

    pub fn check_dims(&self, data: &ChoiceDataset) -> Result<()> {
        let k = data.k();
        let ok = self.a_b.len() == k
            && self.a_w.len() == k
            && self.sigma_b.dim() == k
            && self.sigma_w.dim() == k
            && self.zeta.len() == k
            && self.mu.len() == data.n_persons()
            && self.beta.len() == data.n_occasions()
            && self.mu.iter().chain(self.beta.iter()).all(|v| v.len() == k);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("parameter state does not match the dataset".into()))
        }
    }
}

/// MNL choice probabilities `softmax(X β)`.
pub fn mnl_choice_prob(x: &DMatrix<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if x.ncols() != beta.len() || x.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "design matrix {}x{} against coefficient vector of length {}",
            x.nrows(),
            x.ncols(),
            beta.len()
        )));
    }
    let mut u = vec![0.0; x.nrows()];
    utilities_into(x, beta.as_slice(), &mut u);
    Ok(DVector::from_vec(softmax_in_place(&mut u).to_vec()))
}

#[inline]
pub(crate) fn softmax_in_place(u: &mut [f64]) -> &mut [f64] {
    let lse = lse_unchecked(u);
    u.iter_mut().for_each(|v| *v = (*v - lse).exp());
    u
}

/// `ln P(y | X, β)` for a single occasion.
pub fn log_choice_prob(occ: &Occasion, beta: &[f64], scratch: &mut [f64]) -> f64 {
    occ.utilities_into(beta, scratch);
    let j = occ.n_alts();
    scratch[occ.chosen] - lse_unchecked(&scratch[..j])
}

/// Term-wise decomposition of the joint log density.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DensityTerms {
    pub choices: f64,
    pub beta: f64,
    pub mu: f64,
    pub zeta: f64,
    pub sigma_b: f64,
    pub sigma_w: f64,
    pub a_b: f64,
    pub a_w: f64,
}

impl DensityTerms {
    pub fn total(&self) -> f64 {
        self.choices + self.beta + self.mu + self.zeta + self.sigma_b + self.sigma_w + self.a_b + self.a_w
    }
}

/// Every normalized log term of `ln P(y, θ)`.
pub fn joint_log_density_terms(
    data: &ChoiceDataset,
    theta: &ParameterState,
    hyper: &Hyperparameters,
) -> Result<DensityTerms> {
    theta.check_dims(data)?;
    if hyper.k() != data.k() {
        return Err(Error::Dimension("hyperparameters and data disagree on K".into()));
    }
    let k = data.k();
    let mut scratch = vec![0.0; data.max_alts()];

    let choices = data
        .iter()
        .map(|(_, i, occ)| log_choice_prob(occ, theta.beta[i].as_slice(), &mut scratch))
        .sum();

    let gauss = |x: &DVector<f64>, m: &DVector<f64>, cov: &SpdMatrix| {
        -0.5 * (k as f64 * LN_2PI + cov.log_det() + cov.inv_quad_form(&(x - m)))
    };
    let beta = data
        .iter()
        .map(|(n, i, _)| gauss(&theta.beta[i], &theta.mu[n], &theta.sigma_w))
        .sum();
    let mu = theta.mu.iter().map(|m| gauss(m, &theta.zeta, &theta.sigma_b)).sum();
    let zeta = logpdf_mvn(&theta.zeta, &hyper.zeta_prior_mean, &hyper.zeta_prior_cov)?;

    let sigma_b = logpdf_inverse_wishart(&theta.sigma_b, hyper.omega_b(), &hyper.iw_scale_b(&theta.a_b)?);
    let sigma_w = logpdf_inverse_wishart(&theta.sigma_w, hyper.omega_w(), &hyper.iw_scale_w(&theta.a_w)?);

    let s = hyper.shape();
    let a_b = theta.a_b.iter().zip(hyper.rate_b().iter()).map(|(a, r)| logpdf_gamma(*a, s, *r)).sum();
    let a_w = theta.a_w.iter().zip(hyper.rate_w().iter()).map(|(a, r)| logpdf_gamma(*a, s, *r)).sum();

    Ok(DensityTerms {
        choices,
        beta,
        mu,
        zeta,
        sigma_b,
        sigma_w,
        a_b,
        a_w,
    })
}

pub fn joint_log_density(data: &ChoiceDataset, theta: &ParameterState, hyper: &Hyperparameters) -> Result<f64> {
    Ok(joint_log_density_terms(data, theta, hyper)?.total())
}

/// Settings of the synthetic panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_persons: usize,
    pub n_occasions: usize,
    pub n_alts: usize,
    pub k: usize,
    #[serde(with = "dvec")]
    pub zeta: DVector<f64>,
    /// Between-person covariance. May be the zero matrix.
    #[serde(with = "dmat")]
    pub sigma_b: DMatrix<f64>,
    /// Within-person covariance. May be the zero matrix.
    #[serde(with = "dmat")]
    pub sigma_w: DMatrix<f64>,
    pub seed: u64,
}

const REFERENCE_ZETA: [f64; 4] = [-1.4, 0.8, 1.0, 1.5];

/// The reference 4×4 correlation pattern: unit diagonal, 0.8 off-diagonal.
pub fn reference_sigma(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.8 })
}

impl DgpConfig {
    /// Reference population: ζ = (−1.4, 0.8, 1.0, 1.5), Σ_B = 1.5·Σ and
    /// Σ_W = 0.5·Σ. For `k < 4` the leading entries and block are used.
    pub fn reference(n_persons: usize, n_occasions: usize, k: usize) -> Result<Self> {
        if k == 0 || k > REFERENCE_ZETA.len() {
            return Err(Error::Validation(format!("reference population has 1..=4 attributes, got {k}")));
        }
        let sigma = reference_sigma(k);
        Ok(DgpConfig {
            n_persons,
            n_occasions,
            n_alts: 5,
            k,
            zeta: DVector::from_column_slice(&REFERENCE_ZETA[..k]),
            sigma_b: &sigma * 1.5,
            sigma_w: &sigma * 0.5,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_persons == 0 || self.n_occasions == 0 || self.n_alts == 0 || self.k == 0 {
            return Err(Error::Validation("DGP sizes must all be positive".into()));
        }
        let k = self.k;
        if self.zeta.len() != k || self.sigma_b.shape() != (k, k) || self.sigma_w.shape() != (k, k) {
            return Err(Error::Dimension("DGP parameter blocks disagree with K".into()));
        }
        psd_factor(&self.sigma_b)?;
        psd_factor(&self.sigma_w)?;
        Ok(())
    }
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::reference(1000, 20, 4).expect("reference population is valid")
    }
}

/// Latent values used to generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(with = "dvec")]
    pub zeta: DVector<f64>,
    #[serde(with = "dmat")]
    pub sigma_b: DMatrix<f64>,
    #[serde(with = "dmat")]
    pub sigma_w: DMatrix<f64>,
    #[serde(with = "dvecs")]
    pub mu: Vec<DVector<f64>>,
    #[serde(with = "dvecs")]
    pub beta: Vec<DVector<f64>>,
}

impl Truth {
    /// As a [`ParameterState`]; fails when a true covariance is singular.
    /// The auxiliary scales are not part of the DGP and are set to one.
    pub fn to_state(&self) -> Result<ParameterState> {
        let k = self.zeta.len();
        Ok(ParameterState {
            a_b: DVector::from_element(k, 1.0),
            a_w: DVector::from_element(k, 1.0),
            sigma_b: SpdMatrix::from_symmetrized(self.sigma_b.clone())?,
            sigma_w: SpdMatrix::from_symmetrized(self.sigma_w.clone())?,
            zeta: self.zeta.clone(),
            mu: self.mu.clone(),
            beta: self.beta.clone(),
        })
    }
}

fn gumbel(rng: &mut Rng) -> f64 {
    -(-rng.uniform().ln()).ln()
}

fn uniform_design(j: usize, k: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(j, k, |_, _| rng.uniform())
}

/// Utility maximization with Gumbel(0, 1) disturbances.
pub fn sample_choice(x: &DMatrix<f64>, beta: &DVector<f64>, rng: &mut Rng) -> usize {
    let mut u = vec![0.0; x.nrows()];
    utilities_into(x, beta.as_slice(), &mut u);
    u.iter()
        .map(|v| v + gumbel(rng))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
        .0
}

/// Draw a synthetic panel and the latent truth behind it.
pub fn simulate_dataset(cfg: &DgpConfig) -> Result<(ChoiceDataset, Truth)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let lb = psd_factor(&cfg.sigma_b)?;
    let lw = psd_factor(&cfg.sigma_w)?;
    let mut persons = Vec::with_capacity(cfg.n_persons);
    let mut mus = Vec::with_capacity(cfg.n_persons);
    let mut betas = Vec::with_capacity(cfg.n_persons * cfg.n_occasions);
    for _ in 0..cfg.n_persons {
        let mu = sample_mvn_factor(&cfg.zeta, &lb, &mut rng);
        let mut occasions = Vec::with_capacity(cfg.n_occasions);
        for _ in 0..cfg.n_occasions {
            let beta = sample_mvn_factor(&mu, &lw, &mut rng);
            let x = uniform_design(cfg.n_alts, cfg.k, &mut rng);
            let chosen = sample_choice(&x, &beta, &mut rng);
            occasions.push(Occasion { x, chosen });
            betas.push(beta);
        }
        persons.push(occasions);
        mus.push(mu);
    }
    let data = ChoiceDataset::new(cfg.k, persons)?;
    let truth = Truth {
        zeta: cfg.zeta.clone(),
        sigma_b: cfg.sigma_b.clone(),
        sigma_w: cfg.sigma_w.clone(),
        mu: mus,
        beta: betas,
    };
    Ok((data, truth))
}

/// Draw every parameter from the prior, shaped like `data`.
pub fn sample_from_prior(data: &ChoiceDataset, hyper: &Hyperparameters, rng: &mut Rng) -> Result<ParameterState> {
    hyper.validate()?;
    let s = hyper.shape();
    let a_b = hyper
        .rate_b()
        .iter()
        .map(|r| sample_gamma(s, *r, rng))
        .collect::<Result<Vec<_>>>()?;
    let a_w = hyper
        .rate_w()
        .iter()
        .map(|r| sample_gamma(s, *r, rng))
        .collect::<Result<Vec<_>>>()?;
    let a_b = DVector::from_vec(a_b);
    let a_w = DVector::from_vec(a_w);
    let sigma_b = sample_inverse_wishart(hyper.omega_b(), &hyper.iw_scale_b(&a_b)?, rng)?;
    let sigma_w = sample_inverse_wishart(hyper.omega_w(), &hyper.iw_scale_w(&a_w)?, rng)?;
    let zeta = sample_mvn(&hyper.zeta_prior_mean, &hyper.zeta_prior_cov, rng)?;
    let mu: Vec<_> = (0..data.n_persons())
        .map(|_| sample_mvn_factor(&zeta, sigma_b.factor(), rng))
        .collect();
    let beta = data
        .iter()
        .map(|(n, _, _)| sample_mvn_factor(&mu[n], sigma_w.factor(), rng))
        .collect();
    Ok(ParameterState {
        a_b,
        a_w,
        sigma_b,
        sigma_w,
        zeta,
        mu,
        beta,
    })
}

/// Redraw every choice from the MNL kernel at the given coefficients.
pub fn resample_choices(data: &ChoiceDataset, beta: &[DVector<f64>], rng: &mut Rng) -> Result<ChoiceDataset> {
    let choices: Vec<usize> = data
        .occasions()
        .iter()
        .zip(beta)
        .map(|(o, b)| sample_choice(&o.x, b, rng))
        .collect();
    data.with_choices(&choices)
}

/// Share of choices that differ from the alternative with the highest
/// deterministic utility `X β_nt`.
pub fn error_rate(data: &ChoiceDataset, truth: &Truth) -> f64 {
    let mut u = vec![0.0; data.max_alts()];
    let errors = data
        .iter()
        .filter(|(_, i, occ)| {
            occ.utilities_into(truth.beta[*i].as_slice(), &mut u);
            let best = u[..occ.n_alts()]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, v)| if *v > b.1 { (j, *v) } else { b })
                .0;
            best != occ.chosen
        })
        .count();
    errors as f64 / data.n_occasions() as f64
}

/// New persons, one occasion each, from the same population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetweenScenario {
    pub occasions: Vec<Occasion>,
}

/// One extra occasion for a subset of training persons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WithinScenario {
    pub persons: Vec<usize>,
    pub occasions: Vec<Occasion>,
}

/// Build both validation scenarios with [`VALIDATION_PERSONS`] persons each.
pub fn make_validation_scenarios(
    truth: &Truth,
    cfg: &DgpConfig,
    rng: &mut Rng,
) -> Result<(BetweenScenario, WithinScenario)> {
    make_validation_scenarios_sized(truth, cfg, VALIDATION_PERSONS, rng)
}

pub fn make_validation_scenarios_sized(
    truth: &Truth,
    cfg: &DgpConfig,
    size: usize,
    rng: &mut Rng,
) -> Result<(BetweenScenario, WithinScenario)> {
    cfg.validate()?;
    if truth.mu.len() < size {
        return Err(Error::Validation(format!(
            "within-person scenario needs {size} training persons, dataset has {}",
            truth.mu.len()
        )));
    }
    let lb = psd_factor(&cfg.sigma_b)?;
    let lw = psd_factor(&cfg.sigma_w)?;

    let mut between_rng = rng.split(0);
    let between = (0..size)
        .map(|_| {
            let mu = sample_mvn_factor(&cfg.zeta, &lb, &mut between_rng);
            let beta = sample_mvn_factor(&mu, &lw, &mut between_rng);
            let x = uniform_design(cfg.n_alts, cfg.k, &mut between_rng);
            let chosen = sample_choice(&x, &beta, &mut between_rng);
            Occasion { x, chosen }
        })
        .collect();

    let mut within_rng = rng.split(1);
    let mut persons = rand::seq::index::sample(&mut within_rng, truth.mu.len(), size).into_vec();
    persons.sort_unstable();
    let occasions = persons
        .iter()
        .map(|&n| {
            let beta = sample_mvn_factor(&truth.mu[n], &lw, &mut within_rng);
            let x = uniform_design(cfg.n_alts, cfg.k, &mut within_rng);
            let chosen = sample_choice(&x, &beta, &mut within_rng);
            Occasion { x, chosen }
        })
        .collect();
    Ok((BetweenScenario { occasions: between }, WithinScenario { persons, occasions }))
}
