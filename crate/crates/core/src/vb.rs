//! Mean-field variational Bayes by coordinate ascent.
//!
//! The Gaussian factors `q(β_nt)` are not conjugate. They are updated by
//! nonconjugate variational message passing, with the expected log-sum-exp
//! replaced by its second-order delta-method expansion around `μ_βnt`. All
//! other factors have closed-form optimal densities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::model::{ChoiceDataset, Hyperparameters, Occasion};
use crate::par::map_range;
use crate::serde_util::{dvec, dvecs};
use crate::stats::{lse_unchecked, SpdMatrix};

/// Largest accepted norm of a single NCVMP mean step.
pub const MAX_STEP_NORM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VbConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Number of iterates averaged before computing δ.
    pub window: usize,
}

impl Default for VbConfig {
    fn default() -> Self {
        VbConfig {
            tol: 0.005,
            max_iter: 500,
            window: 5,
        }
    }
}

impl VbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Validation("tol must be positive".into()));
        }
        if self.window == 0 || self.max_iter <= self.window {
            return Err(Error::Validation("max_iter must exceed the averaging window".into()));
        }
        Ok(())
    }
}

/// Parameters of every variational factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub c_b: f64,
    pub c_w: f64,
    #[serde(with = "dvec")]
    pub d_b: DVector<f64>,
    #[serde(with = "dvec")]
    pub d_w: DVector<f64>,
    pub w_b: f64,
    pub w_w: f64,
    pub theta_b: SpdMatrix,
    pub theta_w: SpdMatrix,
    #[serde(with = "dvec")]
    pub mu_zeta: DVector<f64>,
    pub sigma_zeta: SpdMatrix,
    #[serde(with = "dvecs")]
    pub mu_mu: Vec<DVector<f64>>,
    pub sigma_mu: Vec<SpdMatrix>,
    /// Indexed by global occasion.
    #[serde(with = "dvecs")]
    pub mu_beta: Vec<DVector<f64>>,
    pub sigma_beta: Vec<SpdMatrix>,
}

impl VariationalPosterior {
    /// Starting values: μ_ζ = 0, Σ_ζ = I, μ_μn = 0, Σ_μn = I, μ_βnt = 0,
    /// Σ_βnt = I, d_B = d_W = 1; constants and Θ from those values.
    pub fn initial(data: &ChoiceDataset, hyper: &Hyperparameters) -> Result<Self> {
        let k = data.k();
        let kf = k as f64;
        let mut vp = VariationalPosterior {
            c_b: 0.5 * (hyper.nu_b + kf),
            c_w: 0.5 * (hyper.nu_w + kf),
            d_b: DVector::from_element(k, 1.0),
            d_w: DVector::from_element(k, 1.0),
            w_b: hyper.nu_b + data.n_persons() as f64 + kf - 1.0,
            w_w: hyper.nu_w + data.n_occasions() as f64 + kf - 1.0,
            theta_b: SpdMatrix::identity(k),
            theta_w: SpdMatrix::identity(k),
            mu_zeta: DVector::zeros(k),
            sigma_zeta: SpdMatrix::identity(k),
            mu_mu: vec![DVector::zeros(k); data.n_persons()],
            sigma_mu: vec![SpdMatrix::identity(k); data.n_persons()],
            mu_beta: vec![DVector::zeros(k); data.n_occasions()],
            sigma_beta: vec![SpdMatrix::identity(k); data.n_occasions()],
        };
        vp.theta_b = theta_b(&vp, hyper)?;
        vp.theta_w = theta_w(&vp, data, hyper)?;
        Ok(vp)
    }

    pub fn k(&self) -> usize {
        self.mu_zeta.len()
    }

    pub fn n_persons(&self) -> usize {
        self.mu_mu.len()
    }

    /// `E[Σ_B⁻¹] = w_B Θ_B⁻¹`
    pub fn expected_prec_b(&self) -> DMatrix<f64> {
        self.theta_b.inverse() * self.w_b
    }

    /// `E[Σ_W⁻¹] = w_W Θ_W⁻¹`
    pub fn expected_prec_w(&self) -> DMatrix<f64> {
        self.theta_w.inverse() * self.w_w
    }

    pub fn check_dims(&self, data: &ChoiceDataset) -> Result<()> {
        let k = data.k();
        let ok = self.k() == k
            && self.mu_mu.len() == data.n_persons()
            && self.sigma_mu.len() == data.n_persons()
            && self.mu_beta.len() == data.n_occasions()
            && self.sigma_beta.len() == data.n_occasions();
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("variational posterior does not match the dataset".into()))
        }
    }

    /// Stopping-rule vector `[μ_ζ, diag Θ_B, diag Θ_W, d_B, d_W]`.
    pub fn monitored(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(5 * self.k());
        v.extend(self.mu_zeta.iter());
        v.extend(self.theta_b.values().diagonal().iter());
        v.extend(self.theta_w.values().diagonal().iter());
        v.extend(self.d_b.iter());
        v.extend(self.d_w.iter());
        v
    }

    fn all_finite(&self) -> bool {
        std::iter::once(&self.theta_b)
            .chain(std::iter::once(&self.theta_w))
            .chain(std::iter::once(&self.sigma_zeta))
            .chain(&self.sigma_mu)
            .chain(&self.sigma_beta)
            .all(|s| s.values().iter().all(|v| v.is_finite()))
    }
}

/// Softmax at the expansion point and the curvature of the log-sum-exp there.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLinearization {
    pub p0: DVector<f64>,
    /// `Xᵀ (diag p0 − p0 p0ᵀ) X`
    pub curvature: DMatrix<f64>,
}

impl LogitLinearization {
    pub fn at(x: &DMatrix<f64>, mu: &DVector<f64>) -> (f64, Self) {
        let u = x * mu;
        let lse = lse_unchecked(u.as_slice());
        let p0 = u.map(|v| (v - lse).exp());
        let xp = x.tr_mul(&p0);
        let mut curvature = x.tr_mul(&DMatrix::from_diagonal(&p0)) * x;
        curvature.ger(-1.0, &xp, &xp, 1.0);
        (lse, LogitLinearization { p0, curvature })
    }
}

/// Delta-method `E ln Σ_j exp(X_j β)` for `β ~ N(μ, Σ)`:
/// `lse(Xμ) + ½ tr(curvature · Σ)`. `sigma` may be zero.
pub fn expected_lse(x: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> (f64, LogitLinearization) {
    let (lse, lin) = LogitLinearization::at(x, mu);
    let tr = lin.curvature.component_mul(sigma).sum();
    (lse + 0.5 * tr, lin)
}

/// Delta-approximated `E_q f(β_nt)`, dropping the `tr(Σ_μn Θ_W⁻¹)` term
/// that does not involve `q(β_nt)`. `prec_w` is `w_W Θ_W⁻¹`.
pub fn expected_f(
    occ: &Occasion,
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
    mu_mu: &DVector<f64>,
    prec_w: &DMatrix<f64>,
) -> f64 {
    let d = mu_beta - mu_mu;
    let quad = d.dot(&(prec_w * &d));
    let trace = prec_w.component_mul(sigma_beta).sum();
    let chosen = occ.x.row(occ.chosen).transpose().dot(mu_beta);
    let (e_lse, _) = expected_lse(&occ.x, mu_beta, sigma_beta);
    -0.5 * quad - 0.5 * trace + chosen - e_lse
}

/// Gradients of [`expected_f`] with respect to `μ_βnt` and `Σ_βnt`.
pub fn ncvmp_gradients(
    occ: &Occasion,
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
    mu_mu: &DVector<f64>,
    prec_w: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let (_, lin) = LogitLinearization::at(&occ.x, mu_beta);
    let grad_mu = mean_gradient(occ, mu_beta, sigma_beta, mu_mu, prec_w, &lin);
    let grad_sigma = (prec_w + &lin.curvature) * -0.5;
    (grad_mu, grad_sigma)
}

fn mean_gradient(
    occ: &Occasion,
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
    mu_mu: &DVector<f64>,
    prec_w: &DMatrix<f64>,
    lin: &LogitLinearization,
) -> DVector<f64> {
    let x = &occ.x;
    let p = &lin.p0;
    let mut resid = -p.clone();
    resid[occ.chosen] += 1.0;
    let s = x * sigma_beta * x.transpose();
    let v = &s * p - s.diagonal() * 0.5;
    // (diag p − p pᵀ) v
    let pv = p.dot(&v);
    let wv = p.component_mul(&v) - p * pv;
    -(prec_w * (mu_beta - mu_mu)) + x.tr_mul(&(resid + wv))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Full,
    Halved,
    /// Previous values kept.
    Rejected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NcvmpStep {
    pub mu: DVector<f64>,
    pub sigma: SpdMatrix,
    pub status: StepStatus,
}

/// One fixed-point update of `q(β_nt)`.
///
/// `Σ' = (w_W Θ_W⁻¹ + curvature)⁻¹`, then `μ' = μ + Σ' ∇_μ` with the gradient
/// taken at `(μ, Σ')`. Steps longer than [`MAX_STEP_NORM`] are halved once and
/// rejected if still too long.
pub fn ncvmp_beta_update(
    occ: &Occasion,
    mu_beta: &DVector<f64>,
    sigma_beta: &SpdMatrix,
    mu_mu: &DVector<f64>,
    prec_w: &DMatrix<f64>,
) -> NcvmpStep {
    let reject = || NcvmpStep {
        mu: mu_beta.clone(),
        sigma: sigma_beta.clone(),
        status: StepStatus::Rejected,
    };
    let (_, lin) = LogitLinearization::at(&occ.x, mu_beta);
    let sigma = match SpdMatrix::from_symmetrized(prec_w + &lin.curvature).and_then(|p| p.inverse_spd()) {
        Ok(s) => s,
        Err(_) => return reject(),
    };
    let grad = mean_gradient(occ, mu_beta, sigma.values(), mu_mu, prec_w, &lin);
    let mut step = sigma.values() * grad;
    let mut status = StepStatus::Full;
    if !(step.norm() <= MAX_STEP_NORM) {
        step *= 0.5;
        status = StepStatus::Halved;
        if !(step.norm() <= MAX_STEP_NORM) {
            return reject();
        }
    }
    NcvmpStep {
        mu: mu_beta + step,
        sigma,
        status,
    }
}

/// `Θ_B = 2ν_B diag(c_B/d_B) + N Σ_ζ + Σ_n (Σ_μn + (μ_μn − μ_ζ)(μ_μn − μ_ζ)ᵀ)`
pub fn theta_b(vp: &VariationalPosterior, hyper: &Hyperparameters) -> Result<SpdMatrix> {
    let mut m = DMatrix::from_diagonal(&vp.d_b.map(|d| 2.0 * hyper.nu_b * vp.c_b / d));
    m += vp.sigma_zeta.values() * vp.n_persons() as f64;
    for (mu, sigma) in vp.mu_mu.iter().zip(&vp.sigma_mu) {
        m += sigma.values();
        let d = mu - &vp.mu_zeta;
        m.ger(1.0, &d, &d, 1.0);
    }
    SpdMatrix::from_symmetrized(m)
}

/// `Θ_W = 2ν_W diag(c_W/d_W) + Σ_n T_n Σ_μn + Σ_nt (Σ_βnt + (μ_βnt − μ_μn)(μ_βnt − μ_μn)ᵀ)`
pub fn theta_w(vp: &VariationalPosterior, data: &ChoiceDataset, hyper: &Hyperparameters) -> Result<SpdMatrix> {
    let mut m = DMatrix::from_diagonal(&vp.d_w.map(|d| 2.0 * hyper.nu_w * vp.c_w / d));
    for n in 0..data.n_persons() {
        m += vp.sigma_mu[n].values() * data.t_of(n) as f64;
        for i in data.occasion_range(n) {
            m += vp.sigma_beta[i].values();
            let d = &vp.mu_beta[i] - &vp.mu_mu[n];
            m.ger(1.0, &d, &d, 1.0);
        }
    }
    SpdMatrix::from_symmetrized(m)
}

/// Counts of damped and rejected NCVMP steps in one sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepStats {
    pub halved: usize,
    pub rejected: usize,
}

/// NCVMP update of every `q(β_nt)` with the other factors held fixed.
pub fn update_beta_factors(vp: &mut VariationalPosterior, data: &ChoiceDataset) -> SweepStats {
    let prec_w = vp.expected_prec_w();
    let owner: Vec<usize> = data.iter().map(|(n, _, _)| n).collect();
    let occasions = data.occasions();
    let steps = {
        let vp = &*vp;
        map_range(occasions.len(), |i| {
            ncvmp_beta_update(&occasions[i], &vp.mu_beta[i], &vp.sigma_beta[i], &vp.mu_mu[owner[i]], &prec_w)
        })
    };
    let mut stats = SweepStats::default();
    for (i, step) in steps.into_iter().enumerate() {
        match step.status {
            StepStatus::Full => {}
            StepStatus::Halved => stats.halved += 1,
            StepStatus::Rejected => {
                stats.rejected += 1;
                continue;
            }
        }
        vp.mu_beta[i] = step.mu;
        vp.sigma_beta[i] = step.sigma;
    }
    stats
}

/// `Σ_μn = (w_BΘ_B⁻¹ + T_n w_WΘ_W⁻¹)⁻¹`, `μ_μn = Σ_μn (w_BΘ_B⁻¹ μ_ζ + w_WΘ_W⁻¹ Σ_t μ_βnt)`.
pub fn update_mu_factors(vp: &mut VariationalPosterior, data: &ChoiceDataset) -> Result<()> {
    let prec_b = vp.expected_prec_b();
    let prec_w = vp.expected_prec_w();
    let from_zeta = &prec_b * &vp.mu_zeta;
    for n in 0..data.n_persons() {
        let t = data.t_of(n) as f64;
        let sigma = SpdMatrix::from_symmetrized(&prec_b + &prec_w * t)?.inverse_spd()?;
        let beta_sum = data
            .occasion_range(n)
            .fold(DVector::zeros(data.k()), |acc, i| acc + &vp.mu_beta[i]);
        vp.mu_mu[n] = sigma.values() * (&from_zeta + &prec_w * beta_sum);
        vp.sigma_mu[n] = sigma;
    }
    Ok(())
}

/// `Σ_ζ = (Ξ0⁻¹ + N w_BΘ_B⁻¹)⁻¹`, `μ_ζ = Σ_ζ (Ξ0⁻¹ ξ0 + w_BΘ_B⁻¹ Σ_n μ_μn)`.
pub fn update_zeta_factor(vp: &mut VariationalPosterior, hyper: &Hyperparameters) -> Result<()> {
    let prior_prec = hyper.zeta_prior_cov.inverse();
    let prec_b = vp.expected_prec_b();
    let n = vp.n_persons() as f64;
    let sigma = SpdMatrix::from_symmetrized(&prior_prec + &prec_b * n)?.inverse_spd()?;
    let mu_sum = vp.mu_mu.iter().fold(DVector::zeros(vp.k()), |acc, m| acc + m);
    vp.mu_zeta = sigma.values() * (&prior_prec * &hyper.zeta_prior_mean + &prec_b * mu_sum);
    vp.sigma_zeta = sigma;
    Ok(())
}

/// `d_k = A_k⁻² + w ν (Θ⁻¹)_kk` for both blocks.
pub fn update_d(vp: &mut VariationalPosterior, hyper: &Hyperparameters) {
    let inv_b = vp.theta_b.inverse();
    let inv_w = vp.theta_w.inverse();
    let k = vp.k();
    vp.d_b = DVector::from_fn(k, |i, _| hyper.scale_b[i].powi(-2) + vp.w_b * hyper.nu_b * inv_b[(i, i)]);
    vp.d_w = DVector::from_fn(k, |i, _| hyper.scale_w[i].powi(-2) + vp.w_w * hyper.nu_w * inv_w[(i, i)]);
}

/// One coordinate-ascent sweep: β factors, μ_n, ζ, Θ_B, Θ_W, then d_B, d_W.
pub fn sweep_global_updates(
    vp: &mut VariationalPosterior,
    data: &ChoiceDataset,
    hyper: &Hyperparameters,
) -> Result<SweepStats> {
    let stats = update_beta_factors(vp, data);
    update_mu_factors(vp, data)?;
    update_zeta_factor(vp, hyper)?;
    vp.theta_b = theta_b(vp, hyper)?;
    vp.theta_w = theta_w(vp, data, hyper)?;
    update_d(vp, hyper);
    Ok(stats)
}

/// Relative change between two averaged stopping-rule vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub delta: f64,
    pub converged: bool,
    /// Components skipped because `|ϑ̄_i| < 1e-12`.
    pub skipped: Vec<usize>,
}

/// `δ = max_i |cur_i − prev_i| / |prev_i|`; converged iff `δ < tol`.
pub fn convergence_delta(prev: &[f64], cur: &[f64], tol: f64) -> Delta {
    let mut delta = 0.0f64;
    let mut skipped = Vec::new();
    for (i, (p, c)) in prev.iter().zip(cur).enumerate() {
        if p.abs() < 1e-12 {
            skipped.push(i);
            continue;
        }
        delta = delta.max((c - p).abs() / p.abs());
    }
    Delta {
        delta,
        converged: delta < tol,
        skipped,
    }
}

/// History of stopping-rule vectors with window averaging.
#[derive(Clone, Debug, Default)]
pub struct ConvergenceMonitor {
    history: Vec<Vec<f64>>,
    window: usize,
    tol: f64,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, tol: f64) -> Self {
        ConvergenceMonitor {
            history: Vec::new(),
            window,
            tol,
        }
    }

    pub fn push(&mut self, theta: Vec<f64>) {
        self.history.push(theta);
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    fn average(&self, end: usize) -> Vec<f64> {
        let rows = &self.history[end - self.window..end];
        let mut avg = vec![0.0; rows[0].len()];
        for r in rows {
            avg.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        avg.iter_mut().for_each(|a| *a /= self.window as f64);
        avg
    }

    /// δ between the two most recent window averages, once `window + 1`
    /// iterates are recorded.
    pub fn delta(&self) -> Option<Delta> {
        let len = self.history.len();
        if len <= self.window {
            return None;
        }
        Some(convergence_delta(&self.average(len - 1), &self.average(len), self.tol))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbFit {
    pub posterior: VariationalPosterior,
    pub config: VbConfig,
    pub iterations: usize,
    pub converged: bool,
    pub delta: f64,
    /// Stopping-rule components skipped by the division guard at the last check.
    pub skipped_components: Vec<usize>,
    pub halved_steps: usize,
    pub rejected_steps: usize,
    pub seconds: f64,
}

/// Coordinate ascent until the averaged relative change drops below `tol` or
/// `max_iter` sweeps have run.
pub fn run_vb(data: &ChoiceDataset, hyper: &Hyperparameters, cfg: &VbConfig) -> Result<VbFit> {
    cfg.validate()?;
    hyper.validate()?;
    if hyper.k() != data.k() {
        return Err(Error::Dimension("hyperparameters and data disagree on K".into()));
    }
    let start = Instant::now();
    let mut vp = VariationalPosterior::initial(data, hyper)?;
    let mut monitor = ConvergenceMonitor::new(cfg.window, cfg.tol);
    let mut last = Delta {
        delta: f64::INFINITY,
        converged: false,
        skipped: Vec::new(),
    };
    let (mut halved, mut rejected) = (0, 0);
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let stats = sweep_global_updates(&mut vp, data, hyper)?;
        halved += stats.halved;
        rejected += stats.rejected;
        iterations += 1;
        if !vp.all_finite() {
            return Err(Error::NotSpd(format!("non-finite variational parameters at sweep {iterations}")));
        }
        monitor.push(vp.monitored());
        if let Some(d) = monitor.delta() {
            last = d;
            if last.converged {
                break;
            }
        }
    }
    Ok(VbFit {
        posterior: vp,
        config: cfg.clone(),
        iterations,
        converged: last.converged,
        delta: last.delta,
        skipped_components: last.skipped,
        halved_steps: halved,
        rejected_steps: rejected,
        seconds: start.elapsed().as_secs_f64(),
    })
}
