//! Choosing the trust parameter λ from real data: the marginal likelihood of
//! `D_r` under the foundation prior, its λ-derivative, and a bracketed root
//! search on `[0, λ_max]`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::models::{self, Dataset, LikelihoodSpec, NormalStats, PriorSpec};

/// Grid resolution for non-conjugate calibration quadrature.
pub const CALIBRATION_GRID_CELLS: usize = 4096;
pub const DEFAULT_LAMBDA_MAX: f64 = 0.5;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

/// Evenly spaced points probed on `(0, λ_max]` before bisection.
const SCAN_POINTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lambda_star: f64,
    pub constrained: bool,
    /// Every `(λ, gradient)` evaluated, in evaluation order.
    pub gradient_trace: Vec<(f64, f64)>,
    pub lambda_max: f64,
}

fn prepared(prior: &PriorSpec, like: &LikelihoodSpec) -> Result<PriorSpec> {
    prior.validate()?;
    like.validate()?;
    models::quadrature_ready(prior, like, CALIBRATION_GRID_CELLS)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be a finite nonnegative number, got {lambda}")));
    }
    Ok(())
}

/// `log m_λ(D_r) = log ∫ π L_s^λ L_r − log ∫ π L_s^λ`.
pub fn log_marginal(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    d_star: &Dataset,
    d_real: &Dataset,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    let base = prepared(prior, like)?;
    let rho = models::power_update(&base, like, d_star, lambda)?;
    let v = models::log_tempered_evidence(&rho, like, d_real, 1.0)?;
    if !v.is_finite() {
        return Err(Error::Degenerate(format!("log marginal is {v}")));
    }
    Ok(v)
}

/// `∂/∂λ log m_λ(D_r) = E_{π_sr,λ}[log L(D_s|θ)] − E_{ρ_λ}[log L(D_s|θ)]`.
pub fn trust_gradient(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    d_star: &Dataset,
    d_real: &Dataset,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    let base = prepared(prior, like)?;
    if d_real.is_empty() || d_real.total_weight() == 0.0 || d_star.is_empty() {
        return Ok(0.0);
    }
    let rho = models::power_update(&base, like, d_star, lambda)?;
    let sr = models::power_update(&rho, like, d_real, 1.0)?;
    let g = match (&rho, &sr, like) {
        (PriorSpec::Beta { a: a0, b: b0 }, PriorSpec::Beta { a: a1, b: b1 }, LikelihoodSpec::Bernoulli) => {
            let (s, f) = models::bernoulli_counts(d_star);
            let e = |a: f64, b: f64| {
                let t = digamma(a + b);
                s * (digamma(a) - t) + f * (digamma(b) - t)
            };
            e(*a1, *b1) - e(*a0, *b0)
        }
        (
            PriorSpec::NormalKnownVariance { mean: m0, variance: v0 },
            PriorSpec::NormalKnownVariance { mean: m1, variance: v1 },
            LikelihoodSpec::NormalKnownVariance { noise_variance },
        ) => {
            // E[Σ w (y−θ)²] = scatter + W((ȳ−m)² + V); constants cancel.
            let st = NormalStats::from(d_star);
            let ybar = st.mean();
            let q = |m: f64, v: f64| st.weight * ((ybar - m).powi(2) + v);
            -(q(*m1, *v1) - q(*m0, *v0)) / (2.0 * noise_variance)
        }
        (PriorSpec::Grid(g0), PriorSpec::Grid(g1), _) => {
            let ll = like.log_likelihood_on_grid(d_star, g0)?;
            g1.expectation(&ll) - g0.expectation(&ll)
        }
        _ => {
            return Err(Error::UnsupportedPair {
                prior: prior.name().into(),
                likelihood: like.name().into(),
            })
        }
    };
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("trust gradient at λ={lambda} is {g}")));
    }
    Ok(g)
}

/// Solves `trust_gradient(λ) = 0` on `[0, λ_max]`.
///
/// A gradient that is already zero at 0 resolves to λ*=0 unconstrained; a
/// negative gradient at 0 or a positive one throughout the range returns the
/// boundary with `constrained` set.
pub fn calibrate_lambda(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    d_star: &Dataset,
    d_real: &Dataset,
    lambda_max: f64,
) -> Result<CalibrationResult> {
    if !(lambda_max > 0.0 && lambda_max <= 1.0) {
        return Err(Error::config(format!("lambda_max must lie in (0, 1], got {lambda_max}")));
    }
    let mut trace = Vec::new();
    let mut grad = |lambda: f64| -> Result<f64> {
        let g = trust_gradient(prior, like, d_star, d_real, lambda)?;
        trace.push((lambda, g));
        Ok(g)
    };
    let done = |lambda_star: f64, constrained: bool, trace: Vec<(f64, f64)>| CalibrationResult {
        lambda_star,
        constrained,
        gradient_trace: trace,
        lambda_max,
    };

    let g0 = grad(0.0)?;
    if g0.abs() <= GRADIENT_TOLERANCE {
        return Ok(done(0.0, false, trace));
    }
    if g0 < 0.0 {
        return Ok(done(0.0, true, trace));
    }

    let mut lo = 0.0;
    let mut hi = None;
    for k in 1..=SCAN_POINTS {
        let lambda = if k == SCAN_POINTS {
            lambda_max
        } else {
            lambda_max * k as f64 / SCAN_POINTS as f64
        };
        let g = grad(lambda)?;
        if g.abs() <= GRADIENT_TOLERANCE {
            return Ok(done(lambda, false, trace));
        }
        if g < 0.0 {
            hi = Some(lambda);
            break;
        }
        lo = lambda;
    }
    let Some(mut hi) = hi else {
        return Ok(done(lambda_max, true, trace));
    };

    // Bisect until the gradient is within tolerance or the bracket cannot
    // shrink any further in floating point.
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = grad(mid)?;
        if g.abs() <= GRADIENT_TOLERANCE {
            return Ok(done(mid, false, trace));
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = trace
        .iter()
        .filter(|(l, _)| *l == lo || *l == hi)
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(l, _)| *l)
        .unwrap_or(lo);
    Ok(done(best, false, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssLambda {
    pub lambda: f64,
    pub clamped: bool,
}

/// λ giving the synthetic data an effective sample size of `target_ess`.
/// `target_ess = 1` is the unit-information choice.
pub fn lambda_from_ess(target_ess: f64, n_s: usize) -> Result<EssLambda> {
    if n_s == 0 {
        return Err(Error::config("synthetic sample size must be at least 1"));
    }
    if !(target_ess > 0.0 && target_ess.is_finite()) {
        return Err(Error::config("target effective sample size must be positive"));
    }
    let raw = target_ess / n_s as f64;
    Ok(EssLambda {
        lambda: raw.clamp(0.0, 1.0),
        clamped: raw > 1.0,
    })
}
