//! Parametric nuisance models: logistic propensity scores and arm-wise
//! linear outcome regressions, with optional K-fold cross-fitting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{GateError, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_CLIP_EPS: f64 = 1e-12;
pub const DEFAULT_K_FOLDS: usize = 5;

/// One column of a design matrix, referring to covariates by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Linear(String),
    Square(String),
    Product(String, String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Linear(a) => write!(f, "{a}"),
            Term::Square(a) => write!(f, "{a}^2"),
            Term::Product(a, b) => write!(f, "{a}*{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Resolved {
    Linear(usize),
    Square(usize),
    Product(usize, usize),
}

/// Model form of a nuisance regression.
///
/// `terms: None` means main effects of every covariate in the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignSpec {
    pub terms: Option<Vec<Term>>,
    pub intercept: bool,
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec::main_effects()
    }
}

impl DesignSpec {
    pub fn main_effects() -> Self {
        DesignSpec {
            terms: None,
            intercept: true,
        }
    }

    pub fn intercept_only() -> Self {
        DesignSpec {
            terms: Some(Vec::new()),
            intercept: true,
        }
    }

    pub fn with_terms(terms: Vec<Term>) -> Self {
        DesignSpec {
            terms: Some(terms),
            intercept: true,
        }
    }

    /// Drops every term that mentions `name`.
    pub fn without(&self, name: &str) -> Self {
        let terms = self.terms.as_ref().map(|ts| {
            ts.iter()
                .filter(|t| match t {
                    Term::Linear(a) | Term::Square(a) => a != name,
                    Term::Product(a, b) => a != name && b != name,
                })
                .cloned()
                .collect()
        });
        DesignSpec {
            terms,
            intercept: self.intercept,
        }
    }

    fn resolve(&self, names: &[String]) -> Result<Vec<Resolved>> {
        let idx = |name: &str| {
            names.iter().position(|c| c == name).ok_or_else(|| {
                GateError::Config(format!("design term refers to unknown covariate {name:?}"))
            })
        };
        match &self.terms {
            None => Ok((0..names.len()).map(Resolved::Linear).collect()),
            Some(ts) => ts
                .iter()
                .map(|t| {
                    Ok(match t {
                        Term::Linear(a) => Resolved::Linear(idx(a)?),
                        Term::Square(a) => Resolved::Square(idx(a)?),
                        Term::Product(a, b) => Resolved::Product(idx(a)?, idx(b)?),
                    })
                })
                .collect(),
        }
    }

    pub fn n_columns(&self, d: &Dataset) -> Result<usize> {
        Ok(self.resolve(d.covariate_names())?.len() + usize::from(self.intercept))
    }

    /// Design matrix over the given rows of `d`.
    pub fn design_rows(&self, d: &Dataset, rows: &[usize]) -> Result<DMatrix<f64>> {
        let terms = self.resolve(d.covariate_names())?;
        let k = terms.len() + usize::from(self.intercept);
        Ok(DMatrix::from_fn(rows.len(), k, |r, c| {
            let x = d.row(rows[r]);
            let c = if self.intercept {
                if c == 0 {
                    return 1.0;
                }
                c - 1
            } else {
                c
            };
            match terms[c] {
                Resolved::Linear(j) => x[j],
                Resolved::Square(j) => x[j] * x[j],
                Resolved::Product(j, l) => x[j] * x[l],
            }
        }))
    }

    pub fn design(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        let rows: Vec<usize> = (0..d.n()).collect();
        self.design_rows(d, &rows)
    }
}

impl FromStr for DesignSpec {
    type Err = GateError;

    /// `main`, `1` (intercept only) or a comma-separated list such as
    /// `x1, x2^2, x1*x3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "main" | "" => return Ok(DesignSpec::main_effects()),
            "1" => return Ok(DesignSpec::intercept_only()),
            _ => {}
        }
        let terms = s
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                let bad = || GateError::Config(format!("cannot parse design term {tok:?}"));
                if tok.is_empty() {
                    return Err(bad());
                }
                if let Some(base) = tok.strip_suffix("^2") {
                    let base = base.trim();
                    if base.is_empty() {
                        return Err(bad());
                    }
                    Ok(Term::Square(base.to_string()))
                } else if let Some((a, b)) = tok.split_once('*') {
                    let (a, b) = (a.trim(), b.trim());
                    if a.is_empty() || b.is_empty() {
                        return Err(bad());
                    }
                    Ok(Term::Product(a.to_string(), b.to_string()))
                } else {
                    Ok(Term::Linear(tok.to_string()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DesignSpec::with_terms(terms))
    }
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.terms {
            None => f.write_str("main"),
            Some(ts) if ts.is_empty() => f.write_str("1"),
            Some(ts) => {
                let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                f.write_str(&parts.join(", "))
            }
        }
    }
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let (n, k) = x.shape();
    let err = GateError::Rank { rows: n, cols: k };
    if n < k || k == 0 {
        return Err(err);
    }
    let r = x.clone().qr().r();
    let diag: Vec<f64> = (0..k).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) || diag.iter().any(|&v| v <= 1e-10 * max) {
        return Err(err);
    }
    Ok(())
}

/// Least-squares coefficients via a QR factorisation.
pub fn fit_ols(design: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    if design.nrows() != y.len() {
        return Err(GateError::Dimension {
            expected: design.nrows(),
            got: y.len(),
        });
    }
    check_rank(design)?;
    let qr = design.clone().qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(GateError::Rank {
            rows: design.nrows(),
            cols: design.ncols(),
        })?;
    Ok(beta.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Euclidean norm of the log-likelihood gradient at the returned coefficients.
    pub gradient_norm: f64,
}

#[inline]
pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
#[inline]
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn log_likelihood(eta: &DVector<f64>, a: &[u8]) -> f64 {
    eta.iter()
        .zip(a)
        .map(|(&e, &ai)| if ai == 1 { e } else { 0.0 } - softplus(e))
        .sum()
}

/// Logistic regression by iteratively reweighted least squares.
///
/// Fitted probabilities numerically at 0 or 1: the hallmark of separation.
fn saturated(eta: &DVector<f64>) -> bool {
    eta.iter().any(|v| v.abs() > SATURATION)
}

const SATURATION: f64 = 30.0;

/// Starts from zero and takes Newton steps (halved while the likelihood
/// drops) until the gradient norm is at most `tol`. Under separation the
/// last iterate is returned with `converged = false`.
pub fn fit_logistic(design: &DMatrix<f64>, a: &[u8], tol: f64, max_iter: usize) -> Result<LogisticFit> {
    let (n, k) = design.shape();
    if n != a.len() {
        return Err(GateError::Dimension {
            expected: n,
            got: a.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(GateError::Config(format!("tolerance must be positive, got {tol}")));
    }
    check_rank(design)?;

    let target = DVector::from_iterator(n, a.iter().map(|&v| v as f64));
    let mut beta = DVector::<f64>::zeros(k);
    let mut eta = design * &beta;
    let mut ll = log_likelihood(&eta, a);
    let mut iterations = 0;
    loop {
        let p = eta.map(sigmoid);
        let grad = design.tr_mul(&(&target - &p));
        let gradient_norm = grad.norm();
        if gradient_norm <= tol || iterations >= max_iter {
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                converged: gradient_norm <= tol && !saturated(&eta),
                iterations,
                gradient_norm,
            });
        }
        iterations += 1;

        let w = p.map(|v| v * (1.0 - v));
        let mut weighted = design.clone();
        for (mut row, &wi) in weighted.row_iter_mut().zip(w.iter()) {
            row *= wi;
        }
        let hessian = design.tr_mul(&weighted);
        let step = match hessian.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match hessian.lu().solve(&grad) {
                Some(s) => s,
                None => {
                    // information matrix collapsed (separation)
                    return Ok(LogisticFit {
                        coefficients: beta.iter().copied().collect(),
                        converged: false,
                        iterations,
                        gradient_norm,
                    });
                }
            },
        };

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_eta = design * &cand;
            let cand_ll = log_likelihood(&cand_eta, a);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            let p = eta.map(sigmoid);
            let gradient_norm = design.tr_mul(&(&target - &p)).norm();
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                converged: gradient_norm <= tol && !saturated(&eta),
                iterations,
                gradient_norm,
            });
        }
    }
}

pub fn predict_linear(design: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    (design * DVector::from_column_slice(coef)).iter().copied().collect()
}

pub fn predict_logistic(design: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    predict_linear(design, coef).into_iter().map(sigmoid).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    /// Clipped into `[clip_eps, 1 − clip_eps]`.
    pub pi_hat: Vec<f64>,
    pub clip_count: usize,
    pub converged: bool,
}

/// Clips each value into `[eps, 1 − eps]`, returning how many moved.
pub fn clip_propensities(pi: &mut [f64], eps: f64) -> usize {
    let (lo, hi) = (eps, 1.0 - eps);
    let mut clipped = 0;
    for v in pi.iter_mut() {
        if *v < lo {
            *v = lo;
            clipped += 1;
        } else if *v > hi {
            *v = hi;
            clipped += 1;
        }
    }
    clipped
}

pub fn estimate_propensity(d: &Dataset, spec: &DesignSpec, clip_eps: f64) -> Result<PropensityFit> {
    if !(clip_eps > 0.0 && clip_eps < 0.5) {
        return Err(GateError::Config(format!("clip_eps must lie in (0, 0.5), got {clip_eps}")));
    }
    let x = spec.design(d)?;
    let fit = fit_logistic(&x, d.a(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mut pi_hat = predict_logistic(&x, &fit.coefficients);
    let clip_count = clip_propensities(&mut pi_hat, clip_eps);
    Ok(PropensityFit {
        pi_hat,
        clip_count,
        converged: fit.converged,
    })
}

/// Arm-specific outcome predictions for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePredictions {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// Fold of each unit when cross-fitted.
    pub folds: Option<Vec<usize>>,
}

fn fit_arm(d: &Dataset, spec: &DesignSpec, train: &[usize]) -> Result<Vec<f64>> {
    let x = spec.design_rows(d, train)?;
    let y: Vec<f64> = train.iter().map(|&i| d.y()[i]).collect();
    fit_ols(&x, &y)
}

/// Arm-wise OLS on the full sample, predicted at every unit.
pub fn fit_outcome_models(d: &Dataset, spec: &DesignSpec) -> Result<OutcomePredictions> {
    let x_all = spec.design(d)?;
    let b0 = fit_arm(d, spec, &d.arm_indices(0))?;
    let b1 = fit_arm(d, spec, &d.arm_indices(1))?;
    Ok(OutcomePredictions {
        mu0: predict_linear(&x_all, &b0),
        mu1: predict_linear(&x_all, &b1),
        folds: None,
    })
}

/// Balanced random partition of `0..n` into `k` folds.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// Out-of-fold arm-wise OLS predictions.
pub fn cross_fit_outcome_models(
    d: &Dataset,
    spec: &DesignSpec,
    k_folds: usize,
    seed: u64,
) -> Result<OutcomePredictions> {
    if k_folds < 2 {
        return Err(GateError::Config(format!("need at least 2 folds, got {k_folds}")));
    }
    let folds = assign_folds(d.n(), k_folds, seed);
    for fold in 0..k_folds {
        for arm in [0u8, 1] {
            if !(0..d.n()).any(|i| folds[i] == fold && d.a()[i] == arm) {
                return Err(GateError::Fold { fold, arm });
            }
        }
    }
    let x_all = spec.design(d)?;
    let mut mu0 = vec![0.0; d.n()];
    let mut mu1 = vec![0.0; d.n()];
    for fold in 0..k_folds {
        let held: Vec<usize> = (0..d.n()).filter(|&i| folds[i] == fold).collect();
        let x_held = x_all.select_rows(held.iter());
        for (arm, out) in [(0u8, &mut mu0), (1u8, &mut mu1)] {
            let train: Vec<usize> = (0..d.n())
                .filter(|&i| folds[i] != fold && d.a()[i] == arm)
                .collect();
            let beta = fit_arm(d, spec, &train)?;
            for (&i, v) in held.iter().zip(predict_linear(&x_held, &beta)) {
                out[i] = v;
            }
        }
    }
    Ok(OutcomePredictions {
        mu0,
        mu1,
        folds: Some(folds),
    })
}

/// Cross-fitting that falls back to fewer folds when a fold misses an arm.
pub fn cross_fit_with_fallback(
    d: &Dataset,
    spec: &DesignSpec,
    k_folds: usize,
    seed: u64,
) -> Result<OutcomePredictions> {
    let mut k = k_folds;
    loop {
        match cross_fit_outcome_models(d, spec, k, seed) {
            Err(GateError::Fold { .. }) if k > 2 => k -= 1,
            other => return other,
        }
    }
}

/// All nuisance quantities for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFit {
    pub pi_hat: Vec<f64>,
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    pub cross_fitted: bool,
    pub fold_assignment: Option<Vec<usize>>,
    pub clip_count: usize,
}

impl NuisanceFit {
    pub fn new(propensity: PropensityFit, outcomes: OutcomePredictions) -> Self {
        NuisanceFit {
            pi_hat: propensity.pi_hat,
            mu0_hat: outcomes.mu0,
            mu1_hat: outcomes.mu1,
            cross_fitted: outcomes.folds.is_some(),
            fold_assignment: outcomes.folds,
            clip_count: propensity.clip_count,
        }
    }
}
