//! Multinomial logit choice probabilities and Newton maximum likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, Observation, Provenance};
use crate::numeric::log_sum_exp;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

const MAX_HALVINGS: usize = 60;
/// Coefficients beyond this magnitude mean the likelihood is unbounded
/// (perfect separation).
const SEPARATION_BOUND: f64 = 1e6;
/// Largest `1 − P(chosen)` over all rows that still counts as a perfect fit.
const SEPARATION_MISFIT: f64 = 1e-4;

/// One decision: a `J × K` attribute matrix and the chosen alternative
/// (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRow {
    pub x: DMatrix<f64>,
    pub choice: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDataset {
    rows: Vec<ChoiceRow>,
    num_alternatives: usize,
    num_covariates: usize,
}

impl ChoiceDataset {
    pub fn new(rows: Vec<ChoiceRow>, num_alternatives: usize, num_covariates: usize) -> Result<Self> {
        if num_alternatives < 2 || num_covariates < 1 {
            return Err(Error::config("choice data needs J >= 2 and K >= 1"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.x.nrows() != num_alternatives || r.x.ncols() != num_covariates {
                return Err(Error::shape(format!(
                    "row {i}: covariate matrix is {}×{}, expected {num_alternatives}×{num_covariates}",
                    r.x.nrows(),
                    r.x.ncols()
                )));
            }
            if r.choice >= num_alternatives {
                return Err(Error::shape(format!("row {i}: choice {} out of range", r.choice)));
            }
        }
        Ok(ChoiceDataset {
            rows,
            num_alternatives,
            num_covariates,
        })
    }

    pub fn rows(&self) -> &[ChoiceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_alternatives(&self) -> usize {
        self.num_alternatives
    }

    pub fn num_covariates(&self) -> usize {
        self.num_covariates
    }

    pub fn covariates(&self) -> Vec<DMatrix<f64>> {
        self.rows.iter().map(|r| r.x.clone()).collect()
    }

    pub fn from_dataset(data: &Dataset, num_alternatives: usize, num_covariates: usize) -> Result<Self> {
        let rows = data
            .observations()
            .iter()
            .map(|o| {
                if o.covariates.len() != num_alternatives * num_covariates {
                    return Err(Error::shape("covariate vector is not J×K"));
                }
                Ok(ChoiceRow {
                    x: DMatrix::from_row_slice(num_alternatives, num_covariates, &o.covariates),
                    choice: o.outcome as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ChoiceDataset::new(rows, num_alternatives, num_covariates)
    }

    pub fn to_dataset(&self, provenance: Provenance) -> Dataset {
        let obs = self
            .rows
            .iter()
            .map(|r| {
                let cov: Vec<f64> = (0..r.x.nrows())
                    .flat_map(|j| r.x.row(j).iter().copied().collect::<Vec<_>>())
                    .collect();
                Observation::with_covariates(r.choice as f64, cov)
            })
            .collect();
        Dataset::new(obs, provenance)
    }
}

/// Utilities `x·β` for a row-major `J × K` covariate slice.
pub(crate) fn utilities(covariates: &[f64], j: usize, k: usize, beta: &[f64]) -> Vec<f64> {
    (0..j)
        .map(|a| (0..k).map(|c| covariates[a * k + c] * beta[c]).sum())
        .collect()
}

fn softmax(utilities: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(utilities);
    utilities.iter().map(|u| (u - lse).exp()).collect()
}

pub(crate) fn sample_choice<R: Rng + ?Sized>(
    covariates: &[f64],
    j: usize,
    k: usize,
    beta: &[f64],
    rng: &mut R,
) -> usize {
    draw_index(&softmax(&utilities(covariates, j, k, beta)), rng)
}

pub(crate) fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Choice probabilities: softmax of `x·β` over the `J` alternatives.
pub fn mnl_choice_prob(beta: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != beta.len() {
        return Err(Error::shape(format!(
            "covariate matrix has {} columns, beta has length {}",
            x.ncols(),
            beta.len()
        )));
    }
    let u = x * DVector::from_column_slice(beta);
    Ok(softmax(u.as_slice()))
}

/// Sample one choice per covariate matrix from the logit with coefficients `beta`.
pub fn simulate_choices<R: Rng + ?Sized>(beta: &[f64], xs: &[DMatrix<f64>], rng: &mut R) -> Result<Vec<usize>> {
    xs.iter()
        .map(|x| Ok(draw_index(&mnl_choice_prob(beta, x)?, rng)))
        .collect()
}

struct Evaluation {
    log_likelihood: f64,
    gradient: DVector<f64>,
    neg_hessian: DMatrix<f64>,
}

pub fn log_likelihood(data: &ChoiceDataset, beta: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    data.rows
        .iter()
        .map(|r| {
            let u = &r.x * &b;
            u[r.choice] - log_sum_exp(u.as_slice())
        })
        .sum()
}

/// Analytic score `Σ_i X_iᵀ(e_{y_i} − p_i)`.
pub fn gradient(data: &ChoiceDataset, beta: &[f64]) -> Vec<f64> {
    evaluate(data, beta, false).gradient.as_slice().to_vec()
}

fn evaluate(data: &ChoiceDataset, beta: &[f64], with_hessian: bool) -> Evaluation {
    let k = data.num_covariates;
    let b = DVector::from_column_slice(beta);
    let mut ll = 0.0;
    let mut grad = DVector::zeros(k);
    let mut neg_h = DMatrix::zeros(k, k);
    for r in &data.rows {
        let u = &r.x * &b;
        let lse = log_sum_exp(u.as_slice());
        ll += u[r.choice] - lse;
        let p = u.map(|v| (v - lse).exp());
        // X^T (e_y - p)
        let xbar = r.x.tr_mul(&p);
        grad += r.x.row(r.choice).transpose() - &xbar;
        if with_hessian {
            // X^T diag(p) X - xbar xbar^T
            let weighted = DMatrix::from_fn(r.x.nrows(), k, |j, c| r.x[(j, c)] * p[j]);
            neg_h += r.x.tr_mul(&weighted) - &xbar * xbar.transpose();
        }
    }
    Evaluation {
        log_likelihood: ll,
        gradient: grad,
        neg_hessian: neg_h,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnlFit {
    pub beta: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Log likelihood after each accepted step, starting from β = 0.
    pub trace: Vec<f64>,
}

/// Maximum likelihood for the logit by Newton steps with step-halving,
/// starting from β = 0.
pub fn fit_mnl(data: &ChoiceDataset, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    fit_mnl_detailed(data, tol, max_iter).map(|f| f.beta)
}

pub fn fit_mnl_detailed(data: &ChoiceDataset, tol: f64, max_iter: usize) -> Result<MnlFit> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let k = data.num_covariates;
    let mut beta = vec![0.0; k];
    let mut eval = evaluate(data, &beta, true);
    let mut trace = vec![eval.log_likelihood];
    for iteration in 0..=max_iter {
        let gnorm = eval.gradient.amax();
        if gnorm <= tol {
            // Every choice predicted almost surely by a nonzero coefficient
            // means the supremum is only approached as |β| → ∞ (separation).
            if beta.iter().any(|b| *b != 0.0) && perfectly_predicted(data, &beta) {
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    gradient_norm: gnorm,
                    log_likelihood: eval.log_likelihood,
                });
            }
            return Ok(MnlFit {
                beta,
                log_likelihood: eval.log_likelihood,
                iterations: iteration,
                gradient_norm: gnorm,
                trace,
            });
        }
        let nonconvergence = |gradient_norm| Error::NonConvergence {
            iterations: iteration,
            gradient_norm,
            log_likelihood: eval.log_likelihood,
        };
        if iteration == max_iter || !eval.log_likelihood.is_finite() {
            return Err(nonconvergence(gnorm));
        }
        let direction = newton_direction(&eval.neg_hessian, &eval.gradient).ok_or_else(|| nonconvergence(gnorm))?;

        let slack = 64.0 * f64::EPSILON * (1.0 + eval.log_likelihood.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<f64> = beta.iter().zip(direction.iter()).map(|(b, d)| b + step * d).collect();
            let cand_eval = evaluate(data, &candidate, true);
            let ll = cand_eval.log_likelihood;
            let improved = ll > eval.log_likelihood
                || (ll >= eval.log_likelihood - slack && cand_eval.gradient.amax() < gnorm);
            if ll.is_finite() && improved {
                accepted = Some((candidate, cand_eval));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, cand_eval)) = accepted else {
            return Err(nonconvergence(gnorm));
        };
        if candidate.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            return Err(Error::NonConvergence {
                iterations: iteration + 1,
                gradient_norm: cand_eval.gradient.amax(),
                log_likelihood: cand_eval.log_likelihood,
            });
        }
        beta = candidate;
        eval = cand_eval;
        trace.push(eval.log_likelihood);
    }
    unreachable!("loop returns on the final iteration")
}

fn perfectly_predicted(data: &ChoiceDataset, beta: &[f64]) -> bool {
    data.rows().iter().all(|row| {
        mnl_choice_prob(beta, &row.x).is_ok_and(|p| p[row.choice] > 1.0 - SEPARATION_MISFIT)
    })
}

fn newton_direction(neg_hessian: &DMatrix<f64>, gradient: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = neg_hessian.diagonal().amax().max(1.0);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut m = neg_hessian.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(gradient);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    pub(crate) fn simulated(beta: &[f64], j: usize, n: usize, seed: u64) -> ChoiceDataset {
        let k = beta.len();
        let mut r = rng::seeded(seed);
        let rows = (0..n)
            .map(|_| {
                let x = DMatrix::from_fn(j, k, |_, _| r.sample::<f64, _>(StandardNormal));
                let choice = draw_index(&mnl_choice_prob(beta, &x).unwrap(), &mut r);
                ChoiceRow { x, choice }
            })
            .collect();
        ChoiceDataset::new(rows, j, k).unwrap()
    }

    #[test]
    fn zero_beta_gives_uniform() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let p = mnl_choice_prob(&[0.0, 0.0], &x).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_alternative_closed_form() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 3f64.ln()]);
        let p = mnl_choice_prob(&[1.0], &x).unwrap();
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let beta = [0.7, -1.3];
        let p = mnl_choice_prob(&beta, &x).unwrap();
        // adding a constant c to every utility: shift first covariate by c / beta[0]
        let shifted = x.map_with_location(|_, c, v| if c == 0 { v + 5.0 / 0.7 } else { v });
        let q = mnl_choice_prob(&beta, &shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let huge = x.map(|v| v * 1e3);
        let r = mnl_choice_prob(&beta, &huge).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(r.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recovers_simulated_coefficients() {
        let beta0 = [1.0, -0.5];
        let data = simulated(&beta0, 3, 20_000, 11);
        let fit = fit_mnl_detailed(&data, 1e-8, 50).unwrap();
        for (b, t) in fit.beta.iter().zip(beta0) {
            assert!((b - t).abs() < 0.05, "{b} vs {t}");
        }
        assert!(fit.gradient_norm <= 1e-8);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = simulated(&[0.4, -0.2, 0.9], 4, 300, 5);
        let mut r = rng::seeded(99);
        for _ in 0..10 {
            let beta: Vec<f64> = (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let g = gradient(&data, &beta);
            let h = 1e-5;
            for c in 0..3 {
                let mut up = beta.clone();
                up[c] += h;
                let mut down = beta.clone();
                down[c] -= h;
                let fd = (log_likelihood(&data, &up) - log_likelihood(&data, &down)) / (2.0 * h);
                assert!((fd - g[c]).abs() < 1e-6 * (1.0 + g[c].abs()), "{fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn identical_covariates_give_zero() {
        let rows = (0..30)
            .map(|i| ChoiceRow {
                x: DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]),
                choice: i % 3,
            })
            .collect();
        let data = ChoiceDataset::new(rows, 3, 2).unwrap();
        let beta = fit_mnl(&data, 1e-10, 20).unwrap();
        assert!(beta.iter().all(|b| b.abs() <= 1e-10));
    }

    #[test]
    fn perfect_separation_is_nonconvergence() {
        let rows = (0..40)
            .map(|i| {
                let v = if i % 2 == 0 { 1.0 } else { -1.0 };
                ChoiceRow {
                    x: DMatrix::from_row_slice(2, 1, &[v, 0.0]),
                    choice: if v > 0.0 { 0 } else { 1 },
                }
            })
            .collect();
        let data = ChoiceDataset::new(rows, 2, 1).unwrap();
        assert!(matches!(fit_mnl(&data, 1e-8, 200), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let data = simulated(&[0.3, 0.1], 3, 10, 1);
        let back = ChoiceDataset::from_dataset(&data.to_dataset(Provenance::Synthetic), 3, 2).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn shape_validation() {
        let bad = ChoiceRow {
            x: DMatrix::zeros(2, 2),
            choice: 0,
        };
        assert!(ChoiceDataset::new(vec![bad.clone()], 3, 2).is_err());
        let out_of_range = ChoiceRow {
            x: DMatrix::zeros(3, 2),
            choice: 3,
        };
        assert!(ChoiceDataset::new(vec![out_of_range], 3, 2).is_err());
        assert!(mnl_choice_prob(&[1.0], &DMatrix::zeros(3, 2)).is_err());
    }
}
