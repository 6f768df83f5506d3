//! Seedable random streams, SPD matrix storage and the densities and samplers
//! shared by both estimators.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Deterministic random stream.
///
/// A stream is identified by its seed and a stream id. [`Rng::split`] derives
/// a child stream from a key without advancing the parent, so work that is
/// distributed across threads (chains, persons, scenarios) stays reproducible.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `key`. Independent of how far `self` has advanced.
    pub fn split(&self, key: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Rng::with_stream(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = rand::Rng::random(self);
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn standard_normal_vec(&mut self, k: usize) -> DVector<f64> {
        DVector::from_fn(k, |_, _| self.standard_normal())
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Symmetric positive definite matrix with its lower Cholesky factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SpdMatrix {
    values: DMatrix<f64>,
    factor: DMatrix<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl SpdMatrix {
    /// Validates symmetry and factorizes. A failed factorization is retried
    /// once with `1e-10 * trace / K` added to the diagonal.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let k = values.nrows();
        if k == 0 || values.ncols() != k {
            return Err(Error::Dimension(format!(
                "expected a non-empty square matrix, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        for i in 0..k {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSpd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        if let Some(chol) = Cholesky::new(values.clone()) {
            return Ok(SpdMatrix {
                factor: chol.unpack(),
                values,
            });
        }
        let trace = values.trace();
        if trace <= 0.0 {
            return Err(Error::NotSpd("non-positive trace".into()));
        }
        let mut jittered = values;
        let jitter = 1e-10 * trace / k as f64;
        for i in 0..k {
            jittered[(i, i)] += jitter;
        }
        match Cholesky::new(jittered.clone()) {
            Some(chol) => Ok(SpdMatrix {
                factor: chol.unpack(),
                values: jittered,
            }),
            None => Err(Error::NotSpd("Cholesky failed after jitter".into())),
        }
    }

    /// Like [`SpdMatrix::new`] but averages `m` with its transpose first.
    pub fn from_symmetrized(m: DMatrix<f64>) -> Result<Self> {
        let sym = (&m + m.transpose()) * 0.5;
        Self::new(sym)
    }

    pub fn identity(k: usize) -> Self {
        Self::scaled_identity(k, 1.0)
    }

    pub fn scaled_identity(k: usize, s: f64) -> Self {
        assert!(s > 0.0, "scale must be positive");
        SpdMatrix {
            values: DMatrix::identity(k, k) * s,
            factor: DMatrix::identity(k, k) * s.sqrt(),
        }
    }

    pub fn from_diagonal(d: &DVector<f64>) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(d))
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Lower-triangular `L` with `L Lᵀ = values`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    fn cholesky(&self) -> Cholesky<f64, Dyn> {
        // The factor is already known; rebuild the wrapper without refactoring.
        Cholesky::pack_dirty(self.factor.clone())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.cholesky().inverse();
        (&inv + inv.transpose()) * 0.5
    }

    /// Inverse as a new SPD matrix.
    pub fn inverse_spd(&self) -> Result<SpdMatrix> {
        SpdMatrix::new(self.inverse())
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.cholesky().solve(b)
    }

    /// `xᵀ A⁻¹ x` via a triangular solve.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        let z = self
            .factor
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    pub fn scale(&self, s: f64) -> Result<SpdMatrix> {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("scale factor must be positive, got {s}")));
        }
        Ok(SpdMatrix {
            values: &self.values * s,
            factor: &self.factor * s.sqrt(),
        })
    }
}

impl TryFrom<Vec<Vec<f64>>> for SpdMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SpdMatrix::new(rows_to_matrix(&rows)?)
    }
}

impl From<SpdMatrix> for Vec<Vec<f64>> {
    fn from(m: SpdMatrix) -> Self {
        matrix_to_rows(&m.values)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `ln Σ exp(v_i)` in max-shifted form.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty vector".into()));
    }
    Ok(lse_unchecked(v))
}

#[inline]
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Draw `mean + L z` with `z` i.i.d. standard normal.
pub fn sample_mvn(mean: &DVector<f64>, cov: &SpdMatrix, rng: &mut Rng) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::Dimension(format!(
            "mean has length {}, covariance is {}x{}",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    Ok(sample_mvn_factor(mean, cov.factor(), rng))
}

/// As [`sample_mvn`] with an explicit (possibly zero) square-root factor.
pub fn sample_mvn_factor(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut Rng) -> DVector<f64> {
    let z = rng.standard_normal_vec(mean.len());
    mean + factor * z
}

/// Gamma draw in the shape/rate parameterization, density ∝ a^{shape−1} e^{−rate·a}.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut Rng) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "gamma parameters must be positive and finite (shape {shape}, rate {rate})"
        )));
    }
    // rand_distr takes a scale, not a rate.
    let dist = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    loop {
        let draw = dist.sample(rng);
        if draw > 0.0 {
            return Ok(draw);
        }
    }
}

/// Inverse-Wishart draw with density ∝ |Ω|^{−(dof+K+1)/2} exp(−½ tr(S Ω⁻¹)).
///
/// With `S = L Lᵀ` and `A` the Bartlett factor of a Wishart(dof, I) draw,
/// `L A⁻ᵀ A⁻¹ Lᵀ` is the required inverse-Wishart(dof, S) draw.
pub fn sample_inverse_wishart(dof: f64, scale: &SpdMatrix, rng: &mut Rng) -> Result<SpdMatrix> {
    let k = scale.dim();
    if !(dof > k as f64 - 1.0) || !dof.is_finite() {
        return Err(Error::Domain(format!(
            "inverse-Wishart degrees of freedom {dof} must exceed K - 1 = {}",
            k as f64 - 1.0
        )));
    }
    let mut a = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        let chi2 = sample_gamma(0.5 * (dof - i as f64), 0.5, rng)?;
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.standard_normal();
        }
    }
    let a_inv = a
        .solve_lower_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::NotSpd("singular Bartlett factor".into()))?;
    let g = scale.factor() * a_inv.transpose();
    SpdMatrix::from_symmetrized(&g * g.transpose())
}

/// Fully normalized multivariate normal log density.
pub fn logpdf_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &SpdMatrix) -> Result<f64> {
    let k = cov.dim();
    if x.len() != k || mean.len() != k {
        return Err(Error::Dimension(format!(
            "x has length {}, mean {}, covariance {k}x{k}",
            x.len(),
            mean.len()
        )));
    }
    let diff = x - mean;
    Ok(-0.5 * (k as f64 * LN_2PI + cov.log_det() + cov.inv_quad_form(&diff)))
}

pub(crate) fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// ln Γ_K(a), the log multivariate gamma function.
pub fn ln_multivariate_gamma(k: usize, a: f64) -> f64 {
    let kf = k as f64;
    kf * (kf - 1.0) / 4.0 * PI.ln() + (1..=k).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Normalized Gamma(shape, rate) log density.
pub fn logpdf_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Normalized inverse-Wishart(dof, scale) log density at `omega`.
pub fn logpdf_inverse_wishart(omega: &SpdMatrix, dof: f64, scale: &SpdMatrix) -> f64 {
    let k = omega.dim() as f64;
    let tr = (scale.values() * omega.inverse()).trace();
    0.5 * dof * scale.log_det()
        - 0.5 * dof * k * std::f64::consts::LN_2
        - ln_multivariate_gamma(omega.dim(), 0.5 * dof)
        - 0.5 * (dof + k + 1.0) * omega.log_det()
        - 0.5 * tr
}

/// Square-root factor of a positive semidefinite covariance. The all-zero
/// matrix maps to a zero factor, anything else must factorize.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    Ok(SpdMatrix::from_symmetrized(m.clone())?.factor().clone())
}
