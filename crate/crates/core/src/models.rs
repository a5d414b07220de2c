//! Parametric likelihood and prior families.
//!
//! Priors come in three closed-form families (Beta, Normal with known
//! variance, Dirichlet) plus a piecewise-constant [`GridPrior`] that acts as
//! the universal fallback. Likelihoods are Bernoulli, Normal with known noise
//! variance, and multinomial logit. [`power_update`] computes the tempered
//! posterior `π(θ)·L(D|θ)^λ` for conjugate pairs in closed form and for grids
//! by pointwise reweighting.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimators::mnl;
use crate::numeric::{log_sum_exp, xlny};
use crate::rng;

/// Default number of cells per axis for display grids.
pub const DEFAULT_GRID_CELLS_1D: usize = 1024;
pub const DEFAULT_GRID_CELLS_2D: usize = 128;

/// Half-width, in prior standard deviations, of the grid built for a Normal
/// prior.
const NORMAL_GRID_HALF_WIDTH_SD: f64 = 12.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterPoint(pub Vec<f64>);

impl ParameterPoint {
    pub fn scalar(value: f64) -> Self {
        ParameterPoint(vec![value])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParameterPoint {
    fn from(v: Vec<f64>) -> Self {
        ParameterPoint(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
    Auxiliary,
    /// Drawn from the anticipated (prior predictive) distribution.
    Anticipated,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
            Provenance::Auxiliary => "auxiliary",
            Provenance::Anticipated => "anticipated",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            "auxiliary" => Ok(Provenance::Auxiliary),
            "anticipated" => Ok(Provenance::Anticipated),
            other => Err(Error::config(format!("unknown provenance '{other}'"))),
        }
    }
}

/// One observation: an outcome plus an optional covariate vector. For the
/// multinomial logit family the outcome is the 0-based chosen alternative and
/// the covariates are the row-major `J × K` attribute matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub outcome: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<f64>,
}

impl Observation {
    pub fn outcome(outcome: f64) -> Self {
        Observation {
            outcome,
            covariates: Vec::new(),
        }
    }

    pub fn with_covariates(outcome: f64, covariates: Vec<f64>) -> Self {
        Observation {
            outcome,
            covariates,
        }
    }

    /// Outcome followed by covariates.
    pub fn feature_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.covariates.len());
        v.push(self.outcome);
        v.extend_from_slice(&self.covariates);
        v
    }
}

/// Tagged collection of weighted observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    weights: Vec<f64>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>, provenance: Provenance) -> Self {
        let weights = vec![1.0; observations.len()];
        Dataset {
            observations,
            weights,
            provenance,
        }
    }

    pub fn with_weights(
        observations: Vec<Observation>,
        weights: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if weights.len() != observations.len() {
            return Err(Error::shape(format!(
                "{} weights for {} observations",
                weights.len(),
                observations.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::config(format!("observation weight {w} is not a finite nonnegative number")));
        }
        Ok(Dataset {
            observations,
            weights,
            provenance,
        })
    }

    pub fn empty(provenance: Provenance) -> Self {
        Dataset::new(Vec::new(), provenance)
    }

    pub fn from_outcomes(outcomes: &[f64], provenance: Provenance) -> Self {
        Dataset::new(
            outcomes.iter().map(|&y| Observation::outcome(y)).collect(),
            provenance,
        )
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Observation, f64)> {
        self.observations.iter().zip(self.weights.iter().copied())
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.outcome).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Concatenation keeping `self`'s provenance.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut observations = self.observations.clone();
        observations.extend_from_slice(&other.observations);
        let mut weights = self.weights.clone();
        weights.extend_from_slice(&other.weights);
        Dataset {
            observations,
            weights,
            provenance: self.provenance,
        }
    }

    /// Same observations with every weight multiplied by `factor`.
    pub fn scale_weights(&self, factor: f64) -> Dataset {
        Dataset {
            observations: self.observations.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
            provenance: self.provenance,
        }
    }

    pub fn split_at(&self, mid: usize) -> (Dataset, Dataset) {
        let mid = mid.min(self.len());
        let left = Dataset {
            observations: self.observations[..mid].to_vec(),
            weights: self.weights[..mid].to_vec(),
            provenance: self.provenance,
        };
        let right = Dataset {
            observations: self.observations[mid..].to_vec(),
            weights: self.weights[mid..].to_vec(),
            provenance: self.provenance,
        };
        (left, right)
    }

    pub fn require(&self, expected: Provenance) -> Result<()> {
        if self.provenance != expected {
            return Err(Error::Provenance {
                expected,
                found: self.provenance,
            });
        }
        Ok(())
    }

    /// SHA-256 over the exact bit patterns of outcomes, covariates and weights.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.provenance.to_string().as_bytes());
        hasher.update((self.len() as u64).to_le_bytes());
        for (obs, w) in self.iter() {
            hasher.update(obs.outcome.to_bits().to_le_bytes());
            hasher.update((obs.covariates.len() as u64).to_le_bytes());
            for c in &obs.covariates {
                hasher.update(c.to_bits().to_le_bytes());
            }
            hasher.update(w.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

impl GridAxis {
    pub fn new(lower: f64, upper: f64, cells: usize) -> Self {
        GridAxis {
            lower,
            upper,
            cells,
        }
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.width()
    }

    fn locate(&self, x: f64) -> Option<usize> {
        if !(x >= self.lower && x <= self.upper) {
            return None;
        }
        let i = ((x - self.lower) / self.width()).floor() as usize;
        Some(i.min(self.cells - 1))
    }
}

/// Piecewise-constant density on a uniform tensor-product mesh. Cells are
/// stored row-major (last axis fastest); `log_density` holds the log density
/// value on each cell, so `Σ exp(log_density) · cell_measure = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPrior {
    pub axes: Vec<GridAxis>,
    #[serde(with = "crate::serde_ext::extended_f64_vec")]
    pub log_density: Vec<f64>,
}

impl GridPrior {
    pub fn uniform(axes: Vec<GridAxis>) -> Result<Self> {
        let n = axes.iter().map(|a| a.cells).product();
        GridPrior::from_unnormalized(axes, vec![0.0; n])
    }

    /// Builds a grid from unnormalized log density values and normalizes it.
    pub fn from_unnormalized(axes: Vec<GridAxis>, log_values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::config("grid needs at least one axis"));
        }
        for a in &axes {
            if a.cells == 0 || !(a.upper > a.lower) || !a.lower.is_finite() || !a.upper.is_finite() {
                return Err(Error::config(format!("invalid grid axis {a:?}")));
            }
        }
        let n: usize = axes.iter().map(|a| a.cells).product();
        if log_values.len() != n {
            return Err(Error::shape(format!(
                "grid has {n} cells but {} log weights",
                log_values.len()
            )));
        }
        let mut grid = GridPrior {
            axes,
            log_density: log_values,
        };
        grid.normalize()?;
        Ok(grid)
    }

    /// Grid that places all mass in one small cell around `theta`.
    pub fn point_mass(theta: &[f64], half_width: f64) -> Result<Self> {
        let axes = theta
            .iter()
            .map(|&t| GridAxis::new(t - half_width, t + half_width, 1))
            .collect();
        GridPrior::uniform(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_cells(&self) -> usize {
        self.log_density.len()
    }

    pub fn cell_measure(&self) -> f64 {
        self.axes.iter().map(GridAxis::width).product()
    }

    pub fn center(&self, mut index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            out[k] = axis.center(index % axis.cells);
            index /= axis.cells;
        }
        out
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.n_cells()).map(|i| self.center(i)).collect()
    }

    pub fn locate(&self, theta: &[f64]) -> Option<usize> {
        if theta.len() != self.axes.len() {
            return None;
        }
        let mut index = 0usize;
        for (axis, &x) in self.axes.iter().zip(theta) {
            index = index * axis.cells + axis.locate(x)?;
        }
        Some(index)
    }

    /// Probability mass of each cell.
    pub fn masses(&self) -> Vec<f64> {
        let m = self.cell_measure();
        self.log_density.iter().map(|l| l.exp() * m).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for (i, p) in self.masses().into_iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (m, c) in mean.iter_mut().zip(self.center(i)) {
                *m += p * c;
            }
        }
        mean
    }

    /// Expectation of `values[cell]` under the grid distribution. Cells with
    /// zero mass are skipped so `-inf` values there do not poison the sum.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.masses()
            .into_iter()
            .zip(values)
            .filter(|(p, _)| *p > 0.0)
            .map(|(p, v)| p * v)
            .sum()
    }

    pub fn density_at(&self, theta: &[f64]) -> f64 {
        self.log_density_at(theta).exp()
    }

    pub fn log_density_at(&self, theta: &[f64]) -> f64 {
        match self.locate(theta) {
            Some(i) => self.log_density[i],
            None => f64::NEG_INFINITY,
        }
    }

    /// Adds `lambda · log_lik[cell]` to every cell and renormalizes.
    pub fn reweight(&self, log_lik: &[f64], lambda: f64) -> Result<Self> {
        if lambda == 0.0 {
            return Ok(self.clone());
        }
        let log_values = self
            .log_density
            .iter()
            .zip(log_lik)
            .map(|(&lp, &ll)| {
                if lp == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    lp + lambda * ll
                }
            })
            .collect();
        GridPrior::from_unnormalized(self.axes.clone(), log_values)
    }

    /// Log of the normalizer `Σ exp(log_density + λ·log_lik) · measure`.
    pub fn log_normalizer(&self, log_lik: &[f64], lambda: f64) -> f64 {
        let terms: Vec<f64> = self
            .log_density
            .iter()
            .zip(log_lik)
            .map(|(&lp, &ll)| {
                if lp == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else if lambda == 0.0 {
                    lp
                } else {
                    lp + lambda * ll
                }
            })
            .collect();
        log_sum_exp(&terms) + self.cell_measure().ln()
    }

    fn normalize(&mut self) -> Result<()> {
        if self.log_density.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("grid log weight is NaN or +inf".into()));
        }
        let z = log_sum_exp(&self.log_density) + self.cell_measure().ln();
        if !z.is_finite() {
            return Err(Error::Degenerate("grid has no cell with positive mass".into()));
        }
        for v in &mut self.log_density {
            *v -= z;
        }
        Ok(())
    }

    fn sample_one<R: Rng + ?Sized>(&self, cumulative: &[f64], rng: &mut R) -> Vec<f64> {
        let total = *cumulative.last().expect("grid has cells");
        let u: f64 = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let center = self.center(idx);
        center
            .iter()
            .zip(&self.axes)
            .map(|(c, a)| c + (rng.random::<f64>() - 0.5) * a.width())
            .collect()
    }

    pub fn normalization_error(&self) -> f64 {
        (self.masses().iter().sum::<f64>() - 1.0).abs()
    }
}

/// Prior family over θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorSpec {
    Beta { a: f64, b: f64 },
    NormalKnownVariance { mean: f64, variance: f64 },
    Dirichlet { concentration: Vec<f64> },
    Grid(GridPrior),
}

impl PriorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PriorSpec::Beta { .. } => "beta",
            PriorSpec::NormalKnownVariance { .. } => "normal_known_variance",
            PriorSpec::Dirichlet { .. } => "dirichlet",
            PriorSpec::Grid(_) => "grid",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::Beta { .. } | PriorSpec::NormalKnownVariance { .. } => 1,
            PriorSpec::Dirichlet { concentration } => concentration.len(),
            PriorSpec::Grid(g) => g.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            PriorSpec::Beta { a, b } => {
                positive("beta a", *a)?;
                positive("beta b", *b)
            }
            PriorSpec::NormalKnownVariance { mean, variance } => {
                if !mean.is_finite() {
                    return Err(Error::config("normal prior mean must be finite"));
                }
                positive("normal prior variance", *variance)
            }
            PriorSpec::Dirichlet { concentration } => {
                if concentration.len() < 2 {
                    return Err(Error::config("dirichlet needs at least two components"));
                }
                concentration.iter().try_for_each(|&c| positive("dirichlet concentration", c))
            }
            PriorSpec::Grid(g) => {
                let err = g.normalization_error();
                if err > 1e-8 {
                    return Err(Error::config(format!("grid weights not normalized (error {err:e})")));
                }
                Ok(())
            }
        }
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::shape(format!(
                "{} prior has dimension {}, got point of dimension {}",
                self.name(),
                self.dim(),
                theta.len()
            )));
        }
        Ok(match self {
            PriorSpec::Beta { a, b } => {
                let x = theta[0];
                if !(0.0..=1.0).contains(&x) {
                    return Ok(f64::NEG_INFINITY);
                }
                xlny(a - 1.0, x) + xlny(b - 1.0, 1.0 - x) - ln_beta(*a, *b)
            }
            PriorSpec::NormalKnownVariance { mean, variance } => {
                normal_log_pdf(theta[0], *mean, *variance)
            }
            PriorSpec::Dirichlet { concentration } => {
                let sum: f64 = theta.iter().sum();
                if theta.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (sum - 1.0).abs() > 1e-9 {
                    return Ok(f64::NEG_INFINITY);
                }
                let alpha0: f64 = concentration.iter().sum();
                let norm = ln_gamma(alpha0) - concentration.iter().map(|&c| ln_gamma(c)).sum::<f64>();
                norm + concentration
                    .iter()
                    .zip(theta)
                    .map(|(&c, &x)| xlny(c - 1.0, x))
                    .sum::<f64>()
            }
            PriorSpec::Grid(g) => g.log_density_at(theta),
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            PriorSpec::Beta { a, b } => vec![a / (a + b)],
            PriorSpec::NormalKnownVariance { mean, .. } => vec![*mean],
            PriorSpec::Dirichlet { concentration } => {
                let s: f64 = concentration.iter().sum();
                concentration.iter().map(|c| c / s).collect()
            }
            PriorSpec::Grid(g) => g.mean(),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<ParameterPoint>> {
        self.validate()?;
        let mut rng = rng::seeded(seed);
        let sampler = PriorSampler::new(self)?;
        Ok((0..n).map(|_| sampler.draw(&mut rng)).collect())
    }

    /// Discretizes the prior onto a uniform grid with `cells` cells per axis,
    /// using the density at each cell center.
    pub fn to_grid(&self, cells: usize) -> Result<GridPrior> {
        let axis = match self {
            PriorSpec::Grid(g) => return Ok(g.clone()),
            PriorSpec::Beta { .. } => GridAxis::new(0.0, 1.0, cells),
            PriorSpec::NormalKnownVariance { mean, variance } => {
                let half = NORMAL_GRID_HALF_WIDTH_SD * variance.sqrt();
                GridAxis::new(mean - half, mean + half, cells)
            }
            PriorSpec::Dirichlet { .. } => {
                return Err(Error::UnsupportedPair {
                    prior: "dirichlet".into(),
                    likelihood: "grid discretization".into(),
                })
            }
        };
        let axes = vec![axis];
        let values = (0..cells)
            .map(|i| self.log_density(&[axes[0].center(i)]))
            .collect::<Result<Vec<_>>>()?;
        GridPrior::from_unnormalized(axes, values)
    }
}

/// Pre-built sampler so repeated draws share one distribution object.
enum PriorSampler<'a> {
    Beta(Beta<f64>),
    Normal(Normal<f64>),
    Dirichlet(Vec<Gamma<f64>>),
    Grid(&'a GridPrior, Vec<f64>),
}

impl<'a> PriorSampler<'a> {
    fn new(prior: &'a PriorSpec) -> Result<Self> {
        let bad = |e: &dyn fmt::Display| Error::config(e.to_string());
        Ok(match prior {
            PriorSpec::Beta { a, b } => PriorSampler::Beta(Beta::new(*a, *b).map_err(|e| bad(&e))?),
            PriorSpec::NormalKnownVariance { mean, variance } => {
                PriorSampler::Normal(Normal::new(*mean, variance.sqrt()).map_err(|e| bad(&e))?)
            }
            PriorSpec::Dirichlet { concentration } => PriorSampler::Dirichlet(
                concentration
                    .iter()
                    .map(|&c| Gamma::new(c, 1.0).map_err(|e| bad(&e)))
                    .collect::<Result<_>>()?,
            ),
            PriorSpec::Grid(g) => {
                let mut acc = 0.0;
                let cumulative = g
                    .masses()
                    .into_iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                PriorSampler::Grid(g, cumulative)
            }
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterPoint {
        match self {
            PriorSampler::Beta(d) => ParameterPoint::scalar(d.sample(rng)),
            PriorSampler::Normal(d) => ParameterPoint::scalar(d.sample(rng)),
            PriorSampler::Dirichlet(gammas) => {
                let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
                let s: f64 = draws.iter().sum();
                ParameterPoint(draws.into_iter().map(|x| x / s).collect())
            }
            PriorSampler::Grid(g, cumulative) => ParameterPoint(g.sample_one(cumulative, rng)),
        }
    }
}

/// Likelihood family `L(D|θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LikelihoodSpec {
    Bernoulli,
    NormalKnownVariance {
        noise_variance: f64,
    },
    MultinomialLogit {
        num_alternatives: usize,
        num_covariates: usize,
    },
}

impl LikelihoodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodSpec::Bernoulli => "bernoulli",
            LikelihoodSpec::NormalKnownVariance { .. } => "normal_known_variance",
            LikelihoodSpec::MultinomialLogit { .. } => "multinomial_logit",
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            LikelihoodSpec::Bernoulli | LikelihoodSpec::NormalKnownVariance { .. } => 1,
            LikelihoodSpec::MultinomialLogit { num_covariates, .. } => *num_covariates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LikelihoodSpec::Bernoulli => Ok(()),
            LikelihoodSpec::NormalKnownVariance { noise_variance } => {
                if *noise_variance > 0.0 && noise_variance.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("noise variance must be positive"))
                }
            }
            LikelihoodSpec::MultinomialLogit {
                num_alternatives,
                num_covariates,
            } => {
                if *num_alternatives < 2 || *num_covariates < 1 {
                    Err(Error::config("multinomial logit needs J >= 2 and K >= 1"))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::shape(format!(
                "{} likelihood has parameter dimension {}, got {}",
                self.name(),
                self.param_dim(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Checks that an observation has the shape this family expects.
    pub fn check_observation(&self, obs: &Observation) -> Result<()> {
        match self {
            LikelihoodSpec::Bernoulli => {
                if obs.outcome != 0.0 && obs.outcome != 1.0 {
                    return Err(Error::shape(format!("bernoulli outcome must be 0 or 1, got {}", obs.outcome)));
                }
            }
            LikelihoodSpec::NormalKnownVariance { .. } => {
                if !obs.outcome.is_finite() {
                    return Err(Error::shape("normal outcome must be finite"));
                }
            }
            LikelihoodSpec::MultinomialLogit {
                num_alternatives,
                num_covariates,
            } => {
                let j = obs.outcome;
                if j.fract() != 0.0 || j < 0.0 || j >= *num_alternatives as f64 {
                    return Err(Error::shape(format!(
                        "choice {j} outside 0..{num_alternatives}"
                    )));
                }
                if obs.covariates.len() != num_alternatives * num_covariates {
                    return Err(Error::shape(format!(
                        "expected {} covariates (J×K), got {}",
                        num_alternatives * num_covariates,
                        obs.covariates.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Log density of one observation. Zero-density cases return `-inf`.
    pub fn log_density(&self, obs: &Observation, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_observation(obs)?;
        Ok(self.log_density_unchecked(obs, theta))
    }

    fn log_density_unchecked(&self, obs: &Observation, theta: &[f64]) -> f64 {
        match self {
            LikelihoodSpec::Bernoulli => {
                let p = theta[0];
                if !(0.0..=1.0).contains(&p) {
                    return f64::NEG_INFINITY;
                }
                if obs.outcome == 1.0 {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            }
            LikelihoodSpec::NormalKnownVariance { noise_variance } => {
                normal_log_pdf(obs.outcome, theta[0], *noise_variance)
            }
            LikelihoodSpec::MultinomialLogit {
                num_alternatives,
                num_covariates,
            } => {
                let utilities = mnl::utilities(&obs.covariates, *num_alternatives, *num_covariates, theta);
                let choice = obs.outcome as usize;
                utilities[choice] - log_sum_exp(&utilities)
            }
        }
    }

    /// Σ_i w_i log f(obs_i | θ). Observations with zero weight are skipped.
    pub fn log_likelihood(&self, data: &Dataset, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let mut total = 0.0;
        for (obs, w) in data.iter() {
            self.check_observation(obs)?;
            if w == 0.0 {
                continue;
            }
            total += w * self.log_density_unchecked(obs, theta);
        }
        Ok(total)
    }

    /// Log likelihood at every cell center of `grid`. Bernoulli and Normal use
    /// weighted sufficient statistics.
    pub fn log_likelihood_on_grid(&self, data: &Dataset, grid: &GridPrior) -> Result<Vec<f64>> {
        self.check_theta(&grid.center(0))?;
        for obs in data.observations() {
            self.check_observation(obs)?;
        }
        let n = grid.n_cells();
        if data.is_empty() {
            return Ok(vec![0.0; n]);
        }
        Ok(match self {
            LikelihoodSpec::Bernoulli => {
                let (s, f) = bernoulli_counts(data);
                (0..n)
                    .map(|i| {
                        let p = grid.center(i)[0];
                        if !(0.0..=1.0).contains(&p) {
                            f64::NEG_INFINITY
                        } else {
                            xlny(s, p) + xlny(f, 1.0 - p)
                        }
                    })
                    .collect()
            }
            LikelihoodSpec::NormalKnownVariance { noise_variance } => {
                let stats = NormalStats::from(data);
                (0..n)
                    .map(|i| stats.log_likelihood(grid.center(i)[0], *noise_variance))
                    .collect()
            }
            LikelihoodSpec::MultinomialLogit { .. } => (0..n)
                .map(|i| {
                    let theta = grid.center(i);
                    data.iter()
                        .filter(|(_, w)| *w != 0.0)
                        .map(|(obs, w)| w * self.log_density_unchecked(obs, &theta))
                        .sum()
                })
                .collect(),
        })
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Observation {
        match self {
            LikelihoodSpec::Bernoulli => {
                let u: f64 = rng.random();
                Observation::outcome(if u < theta[0] { 1.0 } else { 0.0 })
            }
            LikelihoodSpec::NormalKnownVariance { noise_variance } => {
                let z: f64 = rng.sample(StandardNormal);
                Observation::outcome(theta[0] + noise_variance.sqrt() * z)
            }
            LikelihoodSpec::MultinomialLogit {
                num_alternatives,
                num_covariates,
            } => {
                let covariates: Vec<f64> = (0..num_alternatives * num_covariates)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let choice = mnl::sample_choice(&covariates, *num_alternatives, *num_covariates, theta, rng);
                Observation::with_covariates(choice as f64, covariates)
            }
        }
    }

    /// Maximum-likelihood estimate of θ from `data`.
    pub fn mle(&self, data: &Dataset) -> Result<ParameterPoint> {
        if data.is_empty() || data.total_weight() == 0.0 {
            return Err(Error::EmptyData);
        }
        for obs in data.observations() {
            self.check_observation(obs)?;
        }
        match self {
            LikelihoodSpec::Bernoulli | LikelihoodSpec::NormalKnownVariance { .. } => {
                let w = data.total_weight();
                let s: f64 = data.iter().map(|(o, w)| w * o.outcome).sum();
                Ok(ParameterPoint::scalar(s / w))
            }
            LikelihoodSpec::MultinomialLogit {
                num_alternatives,
                num_covariates,
            } => {
                let choices = mnl::ChoiceDataset::from_dataset(data, *num_alternatives, *num_covariates)?;
                let beta = mnl::fit_mnl(&choices, mnl::DEFAULT_TOLERANCE, mnl::DEFAULT_MAX_ITER)?;
                Ok(ParameterPoint(beta))
            }
        }
    }
}

pub(crate) fn normal_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * PI * variance).ln() - (x - mean) * (x - mean) / (2.0 * variance)
}

/// Weighted (successes, failures).
pub(crate) fn bernoulli_counts(data: &Dataset) -> (f64, f64) {
    let mut s = 0.0;
    let mut f = 0.0;
    for (obs, w) in data.iter() {
        if obs.outcome == 1.0 {
            s += w;
        } else {
            f += w;
        }
    }
    (s, f)
}

/// Weighted sufficient statistics for the Normal likelihood:
/// total weight, weighted sum, and weighted sum of squared deviations.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormalStats {
    pub weight: f64,
    pub sum: f64,
    pub scatter: f64,
}

impl From<&Dataset> for NormalStats {
    fn from(data: &Dataset) -> Self {
        let weight = data.total_weight();
        let sum: f64 = data.iter().map(|(o, w)| w * o.outcome).sum();
        let scatter = if weight > 0.0 {
            let mean = sum / weight;
            data.iter().map(|(o, w)| w * (o.outcome - mean).powi(2)).sum()
        } else {
            0.0
        };
        NormalStats {
            weight,
            sum,
            scatter,
        }
    }
}

impl NormalStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.weight
    }

    pub fn log_likelihood(&self, theta: f64, noise_variance: f64) -> f64 {
        if self.weight == 0.0 {
            return 0.0;
        }
        let d = self.mean() - theta;
        -0.5 * self.weight * (2.0 * PI * noise_variance).ln()
            - (self.scatter + self.weight * d * d) / (2.0 * noise_variance)
    }
}

/// Σ_i w_i log f(obs_i | θ).
pub fn log_likelihood(like: &LikelihoodSpec, data: &Dataset, theta: &ParameterPoint) -> Result<f64> {
    like.log_likelihood(data, theta.as_slice())
}

/// Normalized log prior density; `-inf` outside the support.
pub fn log_prior_density(prior: &PriorSpec, theta: &ParameterPoint) -> Result<f64> {
    prior.log_density(theta.as_slice())
}

pub fn sample_prior(prior: &PriorSpec, n: usize, seed: u64) -> Result<Vec<ParameterPoint>> {
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    prior.sample(n, seed)
}

fn check_pair_dims(prior: &PriorSpec, like: &LikelihoodSpec) -> Result<()> {
    if prior.dim() != like.param_dim() {
        return Err(Error::shape(format!(
            "prior dimension {} does not match {} parameter dimension {}",
            prior.dim(),
            like.name(),
            like.param_dim()
        )));
    }
    Ok(())
}

pub fn is_conjugate(prior: &PriorSpec, like: &LikelihoodSpec) -> bool {
    matches!(
        (prior, like),
        (PriorSpec::Beta { .. }, LikelihoodSpec::Bernoulli)
            | (PriorSpec::NormalKnownVariance { .. }, LikelihoodSpec::NormalKnownVariance { .. })
    )
}

/// The prior itself when it pairs conjugately with `like` or is already a
/// grid; otherwise its discretization on `cells` cells per axis.
pub fn quadrature_ready(prior: &PriorSpec, like: &LikelihoodSpec, cells: usize) -> Result<PriorSpec> {
    if is_conjugate(prior, like) || matches!(prior, PriorSpec::Grid(_)) {
        Ok(prior.clone())
    } else {
        Ok(PriorSpec::Grid(prior.to_grid(cells)?))
    }
}

/// The tempered update `π(θ)·L(data|θ)^λ`, normalized, in the same
/// representation as the prior.
pub fn power_update(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    data: &Dataset,
    lambda: f64,
) -> Result<PriorSpec> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be a finite nonnegative number, got {lambda}")));
    }
    prior.validate()?;
    like.validate()?;
    check_pair_dims(prior, like)?;
    for obs in data.observations() {
        like.check_observation(obs)?;
    }
    if !(is_conjugate(prior, like) || matches!(prior, PriorSpec::Grid(_))) {
        return Err(Error::UnsupportedPair {
            prior: prior.name().into(),
            likelihood: like.name().into(),
        });
    }
    if lambda == 0.0 || data.is_empty() {
        return Ok(prior.clone());
    }
    match (prior, like) {
        (PriorSpec::Beta { a, b }, LikelihoodSpec::Bernoulli) => {
            let (s, f) = bernoulli_counts(data);
            Ok(PriorSpec::Beta {
                a: a + lambda * s,
                b: b + lambda * f,
            })
        }
        (
            PriorSpec::NormalKnownVariance { mean, variance },
            LikelihoodSpec::NormalKnownVariance { noise_variance },
        ) => {
            let stats = NormalStats::from(data);
            let precision = 1.0 / variance + lambda * stats.weight / noise_variance;
            let post_mean = (mean / variance + lambda * stats.sum / noise_variance) / precision;
            Ok(PriorSpec::NormalKnownVariance {
                mean: post_mean,
                variance: 1.0 / precision,
            })
        }
        (PriorSpec::Grid(g), _) => {
            let ll = like.log_likelihood_on_grid(data, g)?;
            Ok(PriorSpec::Grid(g.reweight(&ll, lambda)?))
        }
        _ => unreachable!("pair support checked above"),
    }
}

/// Standard Bayes conditioning on auxiliary data, used before anticipation.
pub fn condition_prior(prior: &PriorSpec, like: &LikelihoodSpec, aux: &Dataset) -> Result<PriorSpec> {
    aux.require(Provenance::Auxiliary)?;
    power_update(prior, like, aux, 1.0)
}

/// `log ∫ π(θ) L(data|θ)^λ dθ` for a conjugate pair (closed form) or a grid
/// prior (quadrature).
pub fn log_tempered_evidence(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    data: &Dataset,
    lambda: f64,
) -> Result<f64> {
    check_pair_dims(prior, like)?;
    for obs in data.observations() {
        like.check_observation(obs)?;
    }
    if lambda == 0.0 || data.is_empty() {
        return Ok(0.0);
    }
    match (prior, like) {
        (PriorSpec::Beta { a, b }, LikelihoodSpec::Bernoulli) => {
            let (s, f) = bernoulli_counts(data);
            Ok(ln_beta(a + lambda * s, b + lambda * f) - ln_beta(*a, *b))
        }
        (
            PriorSpec::NormalKnownVariance { mean, variance },
            LikelihoodSpec::NormalKnownVariance { noise_variance },
        ) => {
            let stats = NormalStats::from(data);
            let w = lambda * stats.weight;
            if w == 0.0 {
                return Ok(0.0);
            }
            let scatter = lambda * stats.scatter;
            let ybar = stats.mean();
            Ok(-0.5 * w * (2.0 * PI * noise_variance).ln() - scatter / (2.0 * noise_variance)
                + 0.5 * (2.0 * PI * noise_variance / w).ln()
                + normal_log_pdf(ybar, *mean, variance + noise_variance / w))
        }
        (PriorSpec::Grid(g), _) => {
            let ll = like.log_likelihood_on_grid(data, g)?;
            let z = g.log_normalizer(&ll, lambda);
            if z.is_nan() {
                return Err(Error::Degenerate("evidence integrand is NaN".into()));
            }
            Ok(z)
        }
        _ => Err(Error::UnsupportedPair {
            prior: prior.name().into(),
            likelihood: like.name().into(),
        }),
    }
}
