//! Gaussian and GMM emission densities, the closed-form cross expected
//! log-likelihood between Gaussians, and the GMM-level variational bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::logspace::{ln, log_sum_exp, softmax_in_place, xlogy};

/// Default eigenvalue floor applied to estimated covariances.
pub const DEFAULT_COV_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Tolerance on probability vectors read from files or built by callers.
pub const PROB_TOL: f64 = 1e-12;

/// A multivariate normal density with cached Cholesky factor, inverse and log-determinant.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
    log_det: f64,
    diagonal: bool,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    /// Builds a Gaussian from a symmetric positive-definite covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("Gaussian of dimension zero"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameter".into()));
        }
        let scale = cov.amax().max(1e-300);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        ": asymmetric entry ({i},{j})"
                    )));
                }
            }
        }
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
        if diagonal {
            if let Some(i) = (0..d).find(|&i| cov[(i, i)] <= 0.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    ": variance {} at index {i}",
                    cov[(i, i)]
                )));
            }
            let chol = DMatrix::from_diagonal(&cov.diagonal().map(f64::sqrt));
            let cov_inv = DMatrix::from_diagonal(&cov.diagonal().map(|v| 1.0 / v));
            let log_det = cov.diagonal().iter().map(|v| v.ln()).sum();
            return Ok(Self {
                mean,
                cov,
                chol,
                cov_inv,
                log_det,
                diagonal,
            });
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(String::new()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let cov_inv = chol.inverse();
        Ok(Self {
            mean,
            cov,
            chol: l,
            cov_inv,
            log_det,
            diagonal,
        })
    }

    /// Builds a Gaussian after symmetrizing `cov` and raising every eigenvalue to at least `floor`.
    pub fn with_floor(mean: DVector<f64>, cov: DMatrix<f64>, floor: f64) -> Result<Self> {
        let d = cov.nrows();
        if cov.ncols() != d {
            return Err(Error::invalid("covariance is not square"));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || sym[(i, j)] == 0.0));
        let fixed = if diagonal {
            DMatrix::from_diagonal(&sym.diagonal().map(|v| v.max(floor)))
        } else {
            let eig = SymmetricEigen::new(sym.clone());
            if eig.eigenvalues.iter().all(|&v| v >= floor) {
                sym
            } else {
                let vals = eig.eigenvalues.map(|v| v.max(floor));
                let v = &eig.eigenvectors;
                let r = v * DMatrix::from_diagonal(&vals) * v.transpose();
                (&r + r.transpose()) * 0.5
            }
        };
        Self::new(mean, fixed)
    }

    pub fn univariate(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        Self::new(mean, DMatrix::from_diagonal(&variances))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// True when the covariance has no off-diagonal entries; the diagonal fast paths apply.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    fn mahalanobis(&self, diff: &DVector<f64>) -> f64 {
        if self.diagonal {
            return diff
                .iter()
                .zip(self.cov_inv.diagonal().iter())
                .map(|(x, p)| x * x * p)
                .sum();
        }
        let z = self
            .chol
            .solve_lower_triangular(diff)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis(&diff))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol * z
    }
}

/// `E_{y ~ base}[log reduced(y)]` in closed form.
pub fn expected_gauss_ll(base: &Gaussian, reduced: &Gaussian) -> Result<f64> {
    let d = reduced.dim();
    if base.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: base.dim(),
        });
    }
    let trace = if reduced.diagonal {
        (0..d)
            .map(|i| reduced.cov_inv[(i, i)] * base.cov[(i, i)])
            .sum::<f64>()
    } else {
        reduced.cov_inv.component_mul(&base.cov).sum()
    };
    let diff = &reduced.mean - &base.mean;
    let value =
        -0.5 * (d as f64 * LN_2PI + reduced.log_det + trace + reduced.mahalanobis(&diff));
    if !value.is_finite() {
        return Err(Error::Numerical(
            "expected log-likelihood is not finite; covariance floor violated".into(),
        ));
    }
    Ok(value)
}

/// A Gaussian mixture with weights `c` summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(format!(
                "GMM with {} weights and {} components",
                weights.len(),
                components.len()
            )));
        }
        check_probabilities(&weights, "GMM weights")?;
        let d = components[0].dim();
        if let Some(g) = components.iter().find(|g| g.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: g.dim(),
            });
        }
        Ok(Self {
            weights,
            components,
        })
    }

    /// Single-component mixture.
    pub fn single(g: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![g],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Per-component `log c_m + log N(x; mu_m, Sigma_m)`.
    pub fn component_log_densities(&self, x: &DVector<f64>, out: &mut [f64]) {
        for ((o, w), g) in out.iter_mut().zip(&self.weights).zip(&self.components) {
            *o = ln(*w) + g.log_pdf(x);
        }
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let mut buf = vec![0.0; self.n_components()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let m = sample_categorical(&self.weights, rng);
        self.components[m].sample(rng)
    }
}

pub(crate) fn check_probabilities(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contain a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid(format!("{what} sum to {s}, not 1")));
    }
    Ok(())
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Row-stochastic responsibilities between base components (rows) and reduced components (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct EtaMatrix {
    pub values: DMatrix<f64>,
}

impl EtaMatrix {
    /// Rows are uniform.
    pub fn uniform(m_base: usize, m_reduced: usize) -> Self {
        Self {
            values: DMatrix::from_element(m_base, m_reduced, 1.0 / m_reduced as f64),
        }
    }

    pub fn get(&self, m: usize, l: usize) -> f64 {
        self.values[(m, l)]
    }
}

/// Optimal responsibilities together with the bound they attain.
#[derive(Clone, Debug)]
pub struct GmmBound {
    pub eta: EtaMatrix,
    pub value: f64,
}

/// Variational E-step and bound for one pair of emission GMMs in a single pass.
pub fn gmm_bound(base: &Gmm, reduced: &Gmm) -> Result<GmmBound> {
    let (mb, mr) = (base.n_components(), reduced.n_components());
    let mut eta = DMatrix::zeros(mb, mr);
    let mut row = vec![0.0; mr];
    let mut value = 0.0;
    for (m, gb) in base.components.iter().enumerate() {
        for (l, gr) in reduced.components.iter().enumerate() {
            row[l] = ln(reduced.weights[l]) + expected_gauss_ll(gb, gr)?;
        }
        let lse = softmax_in_place(&mut row);
        for (l, &v) in row.iter().enumerate() {
            eta[(m, l)] = v;
        }
        if base.weights[m] > 0.0 {
            value += base.weights[m] * lse;
        }
    }
    Ok(GmmBound {
        eta: EtaMatrix { values: eta },
        value,
    })
}

/// Optimal variational responsibilities `eta_{l|m}` for a base/reduced GMM pair.
pub fn gmm_variational_estep(base: &Gmm, reduced: &Gmm) -> Result<EtaMatrix> {
    gmm_bound(base, reduced).map(|b| b.eta)
}

/// The GMM lower bound evaluated at an arbitrary row-stochastic `eta`.
pub fn gmm_lower_bound(base: &Gmm, reduced: &Gmm, eta: &EtaMatrix) -> Result<f64> {
    let (mb, mr) = (base.n_components(), reduced.n_components());
    if eta.values.nrows() != mb || eta.values.ncols() != mr {
        return Err(Error::invalid(format!(
            "eta is {}x{}, expected {mb}x{mr}",
            eta.values.nrows(),
            eta.values.ncols()
        )));
    }
    let mut total = 0.0;
    for (m, gb) in base.components.iter().enumerate() {
        let mut inner = 0.0;
        for (l, gr) in reduced.components.iter().enumerate() {
            let e = eta.values[(m, l)];
            if e == 0.0 {
                continue;
            }
            inner += xlogy(e, reduced.weights[l]) - xlogy(e, e)
                + e * expected_gauss_ll(gb, gr)?;
        }
        total += base.weights[m] * inner;
    }
    Ok(total)
}
