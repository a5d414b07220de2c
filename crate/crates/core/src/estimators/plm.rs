//! Partially linear model `Y = Tθ + g(X, Z) + U` where `Z` is never observed
//! and is instead drawn from a conditional generator given `X`. The inner
//! expectation over `Z` is replaced by an average over seeded draws and `g`
//! is a ridge-penalized polynomial expansion, so the fit is a linear solve.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolynomialBasis {
    pub x_order: u32,
    pub z_order: u32,
}

impl Default for PolynomialBasis {
    fn default() -> Self {
        PolynomialBasis { x_order: 3, z_order: 3 }
    }
}

/// Conditional generator for `Z` given `X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZSamplerSpec {
    Constant { value: f64 },
    /// `offset + slope·x + amplitude·sin(frequency·x) + sd·ε`.
    AffineSine {
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        slope: f64,
        #[serde(default)]
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        sd: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ZSamplerSpec {
    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        match *self {
            ZSamplerSpec::Constant { value } => value,
            ZSamplerSpec::AffineSine {
                offset,
                slope,
                amplitude,
                frequency,
                sd,
            } => {
                let mean = offset + slope * x + amplitude * (frequency * x).sin();
                if sd == 0.0 {
                    mean
                } else {
                    mean + sd * rng.sample::<f64, _>(StandardNormal)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlmFit {
    pub theta_hat: f64,
    pub theta_se: f64,
    /// Coefficients on the standardized basis, in `basis_terms` order.
    pub g_basis_coefficients: Vec<f64>,
    pub basis_terms: Vec<(u32, u32)>,
    pub ridge_penalty: f64,
    pub mc_draws: usize,
}

/// Centering and scaling applied before raising to powers.
#[derive(Clone, Copy, Debug)]
struct Standardizer {
    mean: f64,
    sd: f64,
}

impl Standardizer {
    fn fit<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Standardizer { mean, sd: var.sqrt() }
    }

    fn apply(&self, v: f64) -> f64 {
        if self.sd > 0.0 {
            (v - self.mean) / self.sd
        } else {
            0.0
        }
    }
}

/// Draws `m` values of `Z` for each `x`; row `i` holds the draws for `x[i]`.
pub fn draw_z(sampler: &ZSamplerSpec, x: &[f64], m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    x.iter()
        .map(|&xi| (0..m).map(|_| sampler.sample(xi, &mut r)).collect())
        .collect()
}

/// Basis exponents `(a, b)` for `x̃^a z̃^b`. Terms in `Z` are dropped when
/// every draw is identical, leaving a model in `X` alone.
pub fn basis_terms(basis: PolynomialBasis, z_varies: bool) -> Vec<(u32, u32)> {
    let z_max = if z_varies { basis.z_order } else { 0 };
    let mut terms = Vec::new();
    for b in 0..=z_max {
        for a in 0..=basis.x_order {
            terms.push((a, b));
        }
    }
    terms
}

/// Expanded design with one row per `(i, m)` draw, `i`-major: column 0 is
/// `T`, the rest are the basis terms.
pub fn plm_design(t: &[f64], x: &[f64], z: &[Vec<f64>], basis: PolynomialBasis) -> Result<(DMatrix<f64>, Vec<(u32, u32)>)> {
    let n = t.len();
    if x.len() != n || z.len() != n {
        return Err(Error::shape("t, x and z draws must have the same length"));
    }
    let m = z.first().map_or(0, Vec::len);
    if m == 0 || z.iter().any(|d| d.len() != m) {
        return Err(Error::shape("every observation needs the same positive number of Z draws"));
    }
    let sx = Standardizer::fit(x.iter());
    let sz = Standardizer::fit(z.iter().flatten());
    let first_z = z[0][0];
    let z_varies = z.iter().flatten().any(|&v| v != first_z);
    let terms = basis_terms(basis, z_varies);
    let mut design = DMatrix::zeros(n * m, terms.len() + 1);
    for i in 0..n {
        let xs = sx.apply(x[i]);
        for (k, &zv) in z[i].iter().enumerate() {
            let zs = sz.apply(zv);
            let row = i * m + k;
            design[(row, 0)] = t[i];
            for (c, &(a, b)) in terms.iter().enumerate() {
                design[(row, c + 1)] = xs.powi(a as i32) * zs.powi(b as i32);
            }
        }
    }
    Ok((design, terms))
}

/// Minimizes `Σ_i (1/M) Σ_m (Y_i − T_i θ − g(X_i, Z_im))² + penalty·‖g‖²`.
/// `θ` and the intercept are not penalized.
#[allow(clippy::too_many_arguments)]
pub fn fit_plm(
    y: &[f64],
    t: &[f64],
    x: &[f64],
    z_sampler: &ZSamplerSpec,
    m: usize,
    basis: PolynomialBasis,
    penalty: f64,
    seed: u64,
) -> Result<PlmFit> {
    if m == 0 {
        return Err(Error::config("Monte Carlo draw count must be at least 1"));
    }
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::config("ridge penalty must be finite and nonnegative"));
    }
    if y.len() != t.len() {
        return Err(Error::shape("y and t must have the same length"));
    }
    if y.iter().chain(t).chain(x).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PLM data must be finite".into()));
    }
    let z = draw_z(z_sampler, x, m, seed);
    let (design, terms) = plm_design(t, x, &z, basis)?;
    let p = design.ncols();
    let n = y.len();
    if n <= p {
        return Err(Error::config(format!("{n} observations cannot identify {p} coefficients")));
    }
    // Least squares on the stacked rows scaled by 1/√M, with one extra row
    // √penalty·e_c per penalized coefficient; solved by QR.
    let inv_m = 1.0 / m as f64;
    let penalized: Vec<usize> = terms
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != (0, 0))
        .map(|(c, _)| c + 1)
        .filter(|_| penalty > 0.0)
        .collect();
    let rows = n * m + penalized.len();
    let mut a = DMatrix::zeros(rows, p);
    a.view_mut((0, 0), (n * m, p)).copy_from(&(&design * inv_m.sqrt()));
    let mut rhs = DVector::zeros(rows);
    for r in 0..n * m {
        rhs[r] = y[r / m] * inv_m.sqrt();
    }
    for (extra, &c) in penalized.iter().enumerate() {
        a[(n * m + extra, c)] = penalty.sqrt();
    }
    let qr = a.qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * diag_max) {
        return Err(Error::Singular(
            "PLM normal equations are singular; raise the ridge penalty or shrink the basis".into(),
        ));
    }
    qr.q_tr_mul(&mut rhs);
    let singular = || Error::Singular("PLM triangular solve failed".into());
    let coef = r.solve_upper_triangular(&rhs.rows(0, p).into_owned()).ok_or_else(singular)?;
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("PLM solution is not finite".into()));
    }

    // Residuals against the draw-averaged fit.
    let fitted = &design * &coef;
    let mut sse = 0.0;
    for i in 0..n {
        let avg = (0..m).map(|k| fitted[i * m + k]).sum::<f64>() * inv_m;
        sse += (y[i] - avg).powi(2);
    }
    let sigma2 = sse / (n - p) as f64;
    // [(RᵀR)⁻¹]₀₀ = ‖R⁻ᵀ e₀‖².
    let e0 = DVector::from_fn(p, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let u = r.tr_solve_upper_triangular(&e0).ok_or_else(singular)?;
    let var_theta = sigma2 * u.norm_squared();

    Ok(PlmFit {
        theta_hat: coef[0],
        theta_se: var_theta.max(0.0).sqrt(),
        g_basis_coefficients: coef.iter().skip(1).copied().collect(),
        basis_terms: terms,
        ridge_penalty: penalty,
        mc_draws: m,
    })
}

/// Draws used by the simulated design
/// `Y = θT + sin(3X) + 0.5Z + U`, `T = X + ν`, `Z = sin(3X) + 0.3ξ`,
/// `X ~ U(−1, 1)`; `Z` is latent and not returned.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPlm {
    pub y: Vec<f64>,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
}

pub fn simulate_plm_design(n: usize, theta: f64, noise_sd: f64, seed: u64) -> SimulatedPlm {
    let mut r = rng::seeded(seed);
    let mut out = SimulatedPlm {
        y: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x: f64 = r.random_range(-1.0..1.0);
        let t = x + r.sample::<f64, _>(StandardNormal);
        let z = (3.0 * x).sin() + 0.3 * r.sample::<f64, _>(StandardNormal);
        let u = noise_sd * r.sample::<f64, _>(StandardNormal);
        out.y.push(theta * t + (3.0 * x).sin() + 0.5 * z + u);
        out.t.push(t);
        out.x.push(x);
    }
    out
}

/// The informative sampler for the simulated design: `N(sin(3x), 0.3²)`.
pub fn informative_sampler() -> ZSamplerSpec {
    ZSamplerSpec::AffineSine {
        offset: 0.0,
        slope: 0.0,
        amplitude: 1.0,
        frequency: 3.0,
        sd: 0.3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_z_equals_x_only_model() {
        let sim = simulate_plm_design(500, 2.0, 0.5, 1);
        let a = fit_plm(&sim.y, &sim.t, &sim.x, &ZSamplerSpec::Constant { value: 3.0 }, 5, PolynomialBasis::default(), 0.0, 2).unwrap();
        let b = fit_plm(
            &sim.y,
            &sim.t,
            &sim.x,
            &ZSamplerSpec::Constant { value: -1.0 },
            1,
            PolynomialBasis { x_order: 3, z_order: 0 },
            0.0,
            3,
        )
        .unwrap();
        assert_eq!(a.basis_terms, b.basis_terms);
        assert!((a.theta_hat - b.theta_hat).abs() < 1e-10);
    }

    #[test]
    fn penalty_zero_single_draw_is_ols() {
        let sim = simulate_plm_design(300, 2.0, 0.5, 4);
        let sampler = ZSamplerSpec::AffineSine {
            offset: 0.1,
            slope: 0.5,
            amplitude: 1.0,
            frequency: 2.0,
            sd: 0.0,
        };
        let basis = PolynomialBasis { x_order: 2, z_order: 2 };
        let fit = fit_plm(&sim.y, &sim.t, &sim.x, &sampler, 1, basis, 0.0, 5).unwrap();
        let z = draw_z(&sampler, &sim.x, 1, 5);
        let (design, _) = plm_design(&sim.t, &sim.x, &z, basis).unwrap();
        let ols = design
            .clone()
            .svd(true, true)
            .solve(&DVector::from_column_slice(&sim.y), 1e-14)
            .unwrap();
        assert!((fit.theta_hat - ols[0]).abs() <= 1e-9);
        for (a, b) in fit.g_basis_coefficients.iter().zip(ols.iter().skip(1)) {
            assert!((a - b).abs() <= 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn informative_fit_is_near_truth() {
        let sim = simulate_plm_design(5000, 2.0, 0.5, 6);
        let fit = fit_plm(&sim.y, &sim.t, &sim.x, &informative_sampler(), 20, PolynomialBasis::default(), 1e-6, 7).unwrap();
        assert!((fit.theta_hat - 2.0).abs() < 3.0 * fit.theta_se, "{fit:?}");
        assert_eq!(fit.mc_draws, 20);
    }

    #[test]
    fn singular_design_is_signaled() {
        let n = 50;
        let x = vec![0.5; n];
        let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y = t.clone();
        let err = fit_plm(&y, &t, &x, &ZSamplerSpec::Constant { value: 0.0 }, 1, PolynomialBasis::default(), 0.0, 1);
        assert!(matches!(err, Err(Error::Singular(_))), "{err:?}");
        assert!(fit_plm(&y, &t, &x, &ZSamplerSpec::Constant { value: 0.0 }, 0, PolynomialBasis::default(), 0.0, 1).is_err());
    }
}
