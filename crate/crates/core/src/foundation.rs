//! The foundation prior `ρ(θ | D_s*, λ) ∝ π(θ) L(D_s*|θ)^λ`, its
//! representations, mixtures across prompts and the combined posterior with
//! real data.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    self, Dataset, GridPrior, LikelihoodSpec, ParameterPoint, PriorSpec, Provenance, DEFAULT_GRID_CELLS_1D,
};
use crate::numeric::{median, squared_distance};
use crate::promptloop::{Generator, Prompt};
use crate::rng;

/// Smallest kernel bandwidth used for sample-bag densities.
const MIN_KDE_BANDWIDTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedComponent {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Representation {
    Conjugate { prior: PriorSpec },
    Grid { grid: GridPrior },
    SampleBag {
        points: Vec<ParameterPoint>,
        weights: Vec<f64>,
        #[serde(default)]
        excluded: Vec<ExcludedComponent>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationPrior {
    pub representation: Representation,
    pub lambda_used: f64,
    /// SHA-256 of the synthetic data that shaped this prior.
    pub source_data_digest: String,
}

impl FoundationPrior {
    fn from_spec(spec: PriorSpec, lambda_used: f64, source_data_digest: String) -> Self {
        let representation = match spec {
            PriorSpec::Grid(grid) => Representation::Grid { grid },
            prior => Representation::Conjugate { prior },
        };
        FoundationPrior {
            representation,
            lambda_used,
            source_data_digest,
        }
    }

    /// The distribution as a prior for further updating. Sample bags have no
    /// density suitable for that.
    pub fn as_prior(&self) -> Result<PriorSpec> {
        match &self.representation {
            Representation::Conjugate { prior } => Ok(prior.clone()),
            Representation::Grid { grid } => Ok(PriorSpec::Grid(grid.clone())),
            Representation::SampleBag { .. } => Err(Error::config(
                "a sample-bag representation cannot be used as a prior for updating",
            )),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.representation {
            Representation::Conjugate { prior } => prior.dim(),
            Representation::Grid { grid } => grid.dim(),
            Representation::SampleBag { points, .. } => points.first().map_or(0, ParameterPoint::dim),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.representation {
            Representation::Conjugate { prior } => prior.mean(),
            Representation::Grid { grid } => grid.mean(),
            Representation::SampleBag { points, weights, .. } => {
                let mut m = vec![0.0; self.dim()];
                for (p, w) in points.iter().zip(weights) {
                    for (mi, x) in m.iter_mut().zip(p.as_slice()) {
                        *mi += w * x;
                    }
                }
                m
            }
        }
    }

    pub fn density_at(&self, points: &[ParameterPoint]) -> Result<Vec<f64>> {
        self.check_points(points)?;
        Ok(match &self.representation {
            Representation::Conjugate { prior } => points
                .iter()
                .map(|p| prior.log_density(p.as_slice()).map(f64::exp))
                .collect::<Result<_>>()?,
            Representation::Grid { grid } => points.iter().map(|p| grid.density_at(p.as_slice())).collect(),
            Representation::SampleBag { points: bag, weights, .. } => {
                let h = kde_bandwidth(bag);
                points.iter().map(|p| kde(bag, weights, h, p.as_slice())).collect()
            }
        })
    }

    fn check_points(&self, points: &[ParameterPoint]) -> Result<()> {
        let d = self.dim();
        match points.iter().find(|p| p.dim() != d) {
            Some(p) => Err(Error::shape(format!("point has dimension {}, distribution has {d}", p.dim()))),
            None => Ok(()),
        }
    }
}

/// Median pairwise distance of the bag, floored.
fn kde_bandwidth(points: &[ParameterPoint]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            d.push(squared_distance(points[i].as_slice(), points[j].as_slice()).sqrt());
        }
    }
    median(&mut d).unwrap_or(0.0).max(MIN_KDE_BANDWIDTH)
}

fn kde(points: &[ParameterPoint], weights: &[f64], h: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let norm = (2.0 * PI * h * h).powf(d / 2.0);
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * (-squared_distance(p.as_slice(), x) / (2.0 * h * h)).exp())
        .sum::<f64>()
        / norm
}

/// Tempered update of `prior` with synthetic data `d_star` at trust `lambda`.
///
/// Conjugate pairs stay in closed form; a grid prior stays a grid; any other
/// one-dimensional prior is discretized to the default grid first.
pub fn tilt(prior: &PriorSpec, like: &LikelihoodSpec, d_star: &Dataset, lambda: f64) -> Result<FoundationPrior> {
    d_star.require(Provenance::Synthetic)?;
    let base = updatable(prior, like)?;
    let spec = models::power_update(&base, like, d_star, lambda)?;
    Ok(FoundationPrior::from_spec(spec, lambda, d_star.digest()))
}

fn updatable(prior: &PriorSpec, like: &LikelihoodSpec) -> Result<PriorSpec> {
    if prior.dim() == 1 {
        models::quadrature_ready(prior, like, DEFAULT_GRID_CELLS_1D)
    } else {
        Ok(prior.clone())
    }
}

/// `π(θ | D_r, D_s, λ) ∝ L(D_r|θ) L(D_s*|θ)^λ π(θ)`, computed in one update
/// with the synthetic observations down-weighted by λ.
pub fn combined_posterior(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    d_star: &Dataset,
    lambda: f64,
    d_real: &Dataset,
) -> Result<FoundationPrior> {
    d_star.require(Provenance::Synthetic)?;
    d_real.require(Provenance::Real)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be a finite nonnegative number, got {lambda}")));
    }
    let base = updatable(prior, like)?;
    let pooled = d_star.scale_weights(lambda).concat(d_real);
    let spec = models::power_update(&base, like, &pooled, 1.0)?;
    Ok(FoundationPrior::from_spec(spec, lambda, d_star.digest()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMixture {
    pub components: Vec<(FoundationPrior, f64)>,
}

/// Normalizes the prompt weights into a finite mixture of foundation priors.
pub fn mix_prompts(components: Vec<(FoundationPrior, f64)>) -> Result<PromptMixture> {
    let Some(first) = components.first() else {
        return Err(Error::config("a prompt mixture needs at least one component"));
    };
    let d = first.0.dim();
    if components.iter().any(|(c, _)| c.dim() != d) {
        return Err(Error::shape("mixture components have different parameter dimensions"));
    }
    if components.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("mixture weights must be finite and nonnegative"));
    }
    let total: f64 = components.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::config("mixture weights are all zero"));
    }
    Ok(PromptMixture {
        components: components.into_iter().map(|(c, w)| (c, w / total)).collect(),
    })
}

impl PromptMixture {
    pub fn dim(&self) -> usize {
        self.components[0].0.dim()
    }

    pub fn density_at(&self, points: &[ParameterPoint]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; points.len()];
        for (c, w) in &self.components {
            for (o, v) in out.iter_mut().zip(c.density_at(points)?) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (c, w) in &self.components {
            for (mi, x) in m.iter_mut().zip(c.mean()) {
                *mi += w * x;
            }
        }
        m
    }
}

/// Either a single foundation prior or a prompt mixture.
#[derive(Clone, Copy, Debug)]
pub enum Distribution<'a> {
    Single(&'a FoundationPrior),
    Mixture(&'a PromptMixture),
}

pub fn density_at(dist: Distribution<'_>, points: &[ParameterPoint]) -> Result<Vec<f64>> {
    match dist {
        Distribution::Single(f) => f.density_at(points),
        Distribution::Mixture(m) => m.density_at(points),
    }
}

/// One generated dataset per prompt, each reduced to its maximum-likelihood
/// estimate; the estimates form a uniformly weighted bag.
///
/// Each distinct prompt draws with its own seed derived from `seed` and the
/// prompt's contents, so repeated prompts reproduce the same dataset.
/// Components whose estimate fails are excluded and listed.
#[allow(clippy::too_many_arguments)]
pub fn sample_bag_representation(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    gen: &dyn Generator,
    prompts: &[Prompt],
    n_obs: usize,
    lambda: f64,
    seed: u64,
) -> Result<FoundationPrior> {
    if prompts.is_empty() {
        return Err(Error::config("sample-bag representation needs at least one prompt"));
    }
    if prior.dim() != like.param_dim() {
        return Err(Error::shape("prior and likelihood parameter dimensions differ"));
    }
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    let mut pooled = Dataset::empty(Provenance::Synthetic);
    let mut seeds: BTreeMap<Vec<u64>, u64> = BTreeMap::new();
    for (index, q) in prompts.iter().enumerate() {
        let key: Vec<u64> = q.as_slice().iter().map(|x| x.to_bits()).collect();
        let next = seeds.len() as u64;
        let s = *seeds.entry(key).or_insert_with(|| rng::derive_seed(seed, next));
        let data = gen.generate(q, n_obs, s)?;
        pooled = pooled.concat(&data);
        match like.mle(&data) {
            Ok(theta) => points.push(theta),
            Err(e @ (Error::NonConvergence { .. } | Error::Singular(_) | Error::Degenerate(_))) => {
                warn!("prompt {index} excluded from the sample bag: {e}");
                excluded.push(ExcludedComponent {
                    index,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if points.is_empty() {
        return Err(Error::Degenerate("every sample-bag component failed to estimate".into()));
    }
    let w = 1.0 / points.len() as f64;
    Ok(FoundationPrior {
        representation: Representation::SampleBag {
            weights: vec![w; points.len()],
            points,
            excluded,
        },
        lambda_used: lambda,
        source_data_digest: pooled.digest(),
    })
}
