//! Browser demo: simulate a panel, compare the delta-method expected
//! log-sum-exp with Monte Carlo, and fit a small variational posterior.
//!
//! Every export returns a JSON string. The `*_json` functions hold the logic
//! and are plain Rust, so they also run (and are tested) off the browser.

use mixlogit::model::{error_rate, simulate_dataset, DgpConfig};
use mixlogit::stats::{sample_mvn_factor, Rng};
use mixlogit::vb::{expected_lse, run_vb, VbConfig};
use mixlogit::{model::Hyperparameters, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_PERSONS: usize = 2_000;
const MAX_OCCASIONS: usize = 50;

fn bounded(name: &str, v: usize, lo: usize, hi: usize) -> Result<usize> {
    if !(lo..=hi).contains(&v) {
        return Err(mixlogit::Error::Validation(format!("{name} must lie in {lo}..={hi}, got {v}")));
    }
    Ok(v)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[derive(Serialize)]
struct SimulationPreview {
    n_persons: usize,
    n_choices: usize,
    error_rate: f64,
    /// Share of choices falling on each alternative.
    choice_shares: Vec<f64>,
    /// First two components of each person's true μ_n.
    mu: Vec<[f64; 2]>,
    zeta: Vec<f64>,
}

pub fn simulate_preview_json(n_persons: usize, n_occasions: usize, seed: u64) -> Result<String> {
    let cfg = DgpConfig::reference(
        bounded("persons", n_persons, 1, MAX_PERSONS)?,
        bounded("occasions", n_occasions, 1, MAX_OCCASIONS)?,
        4,
    )?
    .with_seed(seed);
    let (data, truth) = simulate_dataset(&cfg)?;
    let mut shares = vec![0.0; cfg.n_alts];
    for occ in data.occasions() {
        shares[occ.chosen] += 1.0;
    }
    let n = data.n_occasions() as f64;
    shares.iter_mut().for_each(|s| *s /= n);
    Ok(to_json(&SimulationPreview {
        n_persons: data.n_persons(),
        n_choices: data.n_occasions(),
        error_rate: error_rate(&data, &truth),
        choice_shares: shares,
        mu: truth.mu.iter().map(|m| [m[0], m[1]]).collect(),
        zeta: truth.zeta.iter().copied().collect(),
    }))
}

#[derive(Serialize)]
struct DeltaComparison {
    scales: Vec<f64>,
    delta: Vec<f64>,
    monte_carlo: Vec<f64>,
    /// Monte Carlo standard errors.
    se: Vec<f64>,
}

/// `E ln Σ_j exp(X_j β)` for `β ~ N(μ, s·I)` on a random `J × K` design, by
/// the delta method and by `n_draws` Monte Carlo draws, over `s` in
/// `0, max_scale/(points−1), …, max_scale`.
pub fn delta_vs_monte_carlo_json(
    n_alts: usize,
    k: usize,
    max_scale: f64,
    points: usize,
    n_draws: usize,
    seed: u64,
) -> Result<String> {
    let j = bounded("alternatives", n_alts, 1, 20)?;
    let k = bounded("attributes", k, 1, 10)?;
    let points = bounded("points", points, 2, 100)?;
    let n_draws = bounded("draws", n_draws, 2, 1_000_000)?;
    if !(max_scale > 0.0 && max_scale.is_finite()) {
        return Err(mixlogit::Error::Validation("max_scale must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let x = DMatrix::from_fn(j, k, |_, _| rng.uniform());
    let mu = DVector::from_fn(k, |_, _| rng.standard_normal());
    let mut out = DeltaComparison {
        scales: Vec::new(),
        delta: Vec::new(),
        monte_carlo: Vec::new(),
        se: Vec::new(),
    };
    for i in 0..points {
        let s = max_scale * i as f64 / (points - 1) as f64;
        let sigma = DMatrix::identity(k, k) * s;
        let factor = DMatrix::identity(k, k) * s.sqrt();
        let draws: Vec<f64> = (0..n_draws)
            .map(|_| {
                let u = &x * sample_mvn_factor(&mu, &factor, &mut rng);
                let m = u.max();
                m + u.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n_draws as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64;
        out.scales.push(s);
        out.delta.push(expected_lse(&x, &mu, &sigma).0);
        out.monte_carlo.push(mean);
        out.se.push((var / n_draws as f64).sqrt());
    }
    Ok(to_json(&out))
}

#[derive(Serialize)]
struct VbSummary {
    iterations: usize,
    converged: bool,
    delta: f64,
    seconds: f64,
    mu_zeta: Vec<f64>,
    /// Marginal posterior standard deviations of ζ.
    sd_zeta: Vec<f64>,
    true_zeta: Vec<f64>,
    /// Diagonals of E[Σ_B] and E[Σ_W] under the inverse-Wishart factors.
    sigma_b: Vec<f64>,
    sigma_w: Vec<f64>,
    true_sigma_b: Vec<f64>,
    true_sigma_w: Vec<f64>,
}

/// Simulate a two-attribute panel and fit it by variational Bayes.
pub fn fit_vb_json(n_persons: usize, n_occasions: usize, seed: u64, max_iter: usize) -> Result<String> {
    let cfg = DgpConfig::reference(
        bounded("persons", n_persons, 1, MAX_PERSONS)?,
        bounded("occasions", n_occasions, 1, MAX_OCCASIONS)?,
        2,
    )?
    .with_seed(seed);
    let (data, truth) = simulate_dataset(&cfg)?;
    let vb_cfg = VbConfig {
        max_iter: bounded("max_iter", max_iter, 1, 5_000)?,
        ..VbConfig::default()
    };
    let fit = run_vb(&data, &Hyperparameters::default_for(2), &vb_cfg)?;
    let vp = &fit.posterior;
    let iw_mean = |theta: &DMatrix<f64>, w: f64| -> Vec<f64> { theta.diagonal().iter().map(|t| t / (w - 3.0)).collect() };
    Ok(to_json(&VbSummary {
        iterations: fit.iterations,
        converged: fit.converged,
        delta: fit.delta,
        seconds: fit.seconds,
        mu_zeta: vp.mu_zeta.iter().copied().collect(),
        sd_zeta: vp.sigma_zeta.values().diagonal().iter().map(|v| v.sqrt()).collect(),
        true_zeta: truth.zeta.iter().copied().collect(),
        sigma_b: iw_mean(vp.theta_b.values(), vp.w_b),
        sigma_w: iw_mean(vp.theta_w.values(), vp.w_w),
        true_sigma_b: truth.sigma_b.diagonal().iter().copied().collect(),
        true_sigma_w: truth.sigma_w.diagonal().iter().copied().collect(),
    }))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate_preview(n_persons: usize, n_occasions: usize, seed: u64) -> std::result::Result<String, JsError> {
    js(simulate_preview_json(n_persons, n_occasions, seed))
}

#[wasm_bindgen]
pub fn delta_vs_monte_carlo(
    n_alts: usize,
    k: usize,
    max_scale: f64,
    points: usize,
    n_draws: usize,
    seed: u64,
) -> std::result::Result<String, JsError> {
    js(delta_vs_monte_carlo_json(n_alts, k, max_scale, points, n_draws, seed))
}

#[wasm_bindgen]
pub fn fit_vb(n_persons: usize, n_occasions: usize, seed: u64, max_iter: usize) -> std::result::Result<String, JsError> {
    js(fit_vb_json(n_persons, n_occasions, seed, max_iter))
}
