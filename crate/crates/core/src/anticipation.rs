//! Anticipated (prior predictive) data and the divergence κ between an
//! anticipated sample and a synthetic dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, Dataset, LikelihoodSpec, PriorSpec, Provenance};
use crate::numeric::{median, squared_distance};
use crate::rng;

/// Cap on the number of pooled points used by the median-heuristic bandwidth.
const MEDIAN_HEURISTIC_POINTS: usize = 1000;

/// Grid resolution used when the negative log predictive needs quadrature.
const PREDICTIVE_GRID_CELLS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnticipatedSample {
    pub datasets: Vec<Dataset>,
    pub source_prior: PriorSpec,
    pub source_like: LikelihoodSpec,
    pub seed: u64,
}

impl AnticipatedSample {
    /// Wraps externally supplied datasets (e.g. real data when calibrating a
    /// prompt against observations instead of anticipation).
    pub fn from_datasets(
        datasets: Vec<Dataset>,
        source_prior: PriorSpec,
        source_like: LikelihoodSpec,
    ) -> Result<Self> {
        if datasets.is_empty() || datasets.iter().all(Dataset::is_empty) {
            return Err(Error::EmptyData);
        }
        Ok(AnticipatedSample {
            datasets,
            source_prior,
            source_like,
            seed: 0,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.datasets.first().map_or(0, Dataset::len)
    }

    /// Every observation from every dataset, as one weighted dataset.
    pub fn pooled(&self) -> Dataset {
        self.datasets
            .iter()
            .fold(Dataset::empty(Provenance::Anticipated), |acc, d| acc.concat(d))
    }
}

/// Draws `n_datasets` datasets, each from a fresh `θ ~ π` followed by
/// `n_obs` observations from `L(·|θ)`.
pub fn sample_prior_predictive(
    prior: &PriorSpec,
    like: &LikelihoodSpec,
    n_datasets: usize,
    n_obs: usize,
    seed: u64,
) -> Result<AnticipatedSample> {
    if n_datasets == 0 || n_obs == 0 {
        return Err(Error::config("n_datasets and n_obs must be at least 1"));
    }
    prior.validate()?;
    like.validate()?;
    if prior.dim() != like.param_dim() {
        return Err(Error::shape("prior and likelihood parameter dimensions differ"));
    }
    let thetas = prior.sample(n_datasets, seed)?;
    let mut rng = rng::seeded(rng::derive_seed(seed, 1));
    let datasets = thetas
        .iter()
        .map(|theta| {
            let obs = (0..n_obs)
                .map(|_| like.sample_observation(theta.as_slice(), &mut rng))
                .collect();
            Dataset::new(obs, Provenance::Anticipated)
        })
        .collect();
    Ok(AnticipatedSample {
        datasets,
        source_prior: prior.clone(),
        source_like: like.clone(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceSpec {
    /// Weighted squared differences of raw outcome moments.
    MomentMatch {
        orders: Vec<u32>,
        order_weights: Vec<f64>,
    },
    /// Biased (V-statistic) squared MMD with a Gaussian kernel. `None`
    /// selects the median heuristic on the anticipated sample.
    Mmd {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    /// `−(1/N_s) log p(D_s)` under the anticipated sample's source prior.
    NegLogPredictive,
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DivergenceSpec::MomentMatch {
                orders,
                order_weights,
            } => {
                if orders.is_empty() || orders.contains(&0) {
                    return Err(Error::config("moment orders must be nonempty and >= 1"));
                }
                if order_weights.len() != orders.len() {
                    return Err(Error::config("one weight per moment order required"));
                }
                if order_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(Error::config("moment weights must be nonnegative"));
                }
                Ok(())
            }
            DivergenceSpec::Mmd { bandwidth: Some(h) } if !(*h > 0.0 && h.is_finite()) => {
                Err(Error::config("MMD bandwidth must be positive"))
            }
            _ => Ok(()),
        }
    }
}

pub fn divergence(
    spec: &DivergenceSpec,
    anticipated: &AnticipatedSample,
    synthetic: &Dataset,
    like: Option<&LikelihoodSpec>,
) -> Result<f64> {
    spec.validate()?;
    if synthetic.is_empty() {
        return Err(Error::EmptyData);
    }
    match spec {
        DivergenceSpec::MomentMatch {
            orders,
            order_weights,
        } => {
            let pooled = anticipated.pooled();
            if pooled.is_empty() {
                return Err(Error::EmptyData);
            }
            Ok(orders
                .iter()
                .zip(order_weights)
                .map(|(&k, &w)| {
                    let d = raw_moment(&pooled, k) - raw_moment(synthetic, k);
                    w * d * d
                })
                .sum())
        }
        DivergenceSpec::Mmd { bandwidth } => {
            let a = features(&anticipated.pooled());
            if a.is_empty() {
                return Err(Error::EmptyData);
            }
            let s = features(synthetic);
            let h = match bandwidth {
                Some(h) => *h,
                None => median_heuristic(&a),
            };
            Ok(mmd_v_statistic(&a, &s, h))
        }
        DivergenceSpec::NegLogPredictive => {
            let like = like.ok_or_else(|| Error::config("negative log predictive needs a likelihood"))?;
            let prior = models::quadrature_ready(&anticipated.source_prior, like, PREDICTIVE_GRID_CELLS)?;
            let log_p = models::log_tempered_evidence(&prior, like, synthetic, 1.0)?;
            Ok(-log_p / synthetic.total_weight())
        }
    }
}

/// Weighted raw moment `Σ w y^k / Σ w` of the outcomes.
fn raw_moment(data: &Dataset, order: u32) -> f64 {
    let total = data.total_weight();
    data.iter().map(|(o, w)| w * o.outcome.powi(order as i32)).sum::<f64>() / total
}

fn features(data: &Dataset) -> Vec<Vec<f64>> {
    data.observations().iter().map(|o| o.feature_vector()).collect()
}

fn kernel_mean(x: &[Vec<f64>], y: &[Vec<f64>], two_h2: f64) -> f64 {
    let mut total = 0.0;
    for a in x {
        let mut row = 0.0;
        for b in y {
            row += (-squared_distance(a, b) / two_h2).exp();
        }
        total += row;
    }
    total / (x.len() as f64 * y.len() as f64)
}

/// Biased squared MMD with Gaussian kernel `exp(−‖x−y‖²/(2h²))`.
///
/// The two samples are put in a canonical order before the cross term is
/// summed, so the result is bit-for-bit symmetric in its arguments, and
/// `mmd(A, A)` is exactly zero.
pub fn mmd_v_statistic(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> f64 {
    let (x, y) = if canonical_cmp(x, y).is_gt() { (y, x) } else { (x, y) };
    let two_h2 = 2.0 * bandwidth * bandwidth;
    let kxx = kernel_mean(x, x, two_h2);
    let kyy = kernel_mean(y, y, two_h2);
    let kxy = kernel_mean(x, y, two_h2);
    (kxx + kyy - 2.0 * kxy).max(0.0)
}

fn canonical_cmp(x: &[Vec<f64>], y: &[Vec<f64>]) -> std::cmp::Ordering {
    x.len().cmp(&y.len()).then_with(|| {
        x.iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Median pairwise Euclidean distance over (at most) the first 1000 points.
/// Falls back to the mean nonzero distance, then to 1, when the median is 0.
pub fn median_heuristic(points: &[Vec<f64>]) -> f64 {
    let pts = &points[..points.len().min(MEDIAN_HEURISTIC_POINTS)];
    let mut d = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            d.push(squared_distance(&pts[i], &pts[j]).sqrt());
        }
    }
    let nonzero: Vec<f64> = d.iter().copied().filter(|v| *v > 0.0).collect();
    match median(&mut d) {
        Some(m) if m > 0.0 => m,
        _ if !nonzero.is_empty() => nonzero.iter().sum::<f64>() / nonzero.len() as f64,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GridPrior, Observation};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_points(mean: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| vec![mean + r.sample::<f64, _>(StandardNormal)]).collect()
    }

    #[test]
    fn uniform_prior_predictive_fraction() {
        let s = sample_prior_predictive(&PriorSpec::Beta { a: 1.0, b: 1.0 }, &LikelihoodSpec::Bernoulli, 10_000, 1, 3)
            .unwrap();
        let pooled = s.pooled();
        let frac = pooled.outcomes().iter().sum::<f64>() / pooled.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(s.datasets.iter().all(|d| d.provenance() == Provenance::Anticipated && d.len() == 1));
    }

    #[test]
    fn point_mass_prior_predictive() {
        let prior = PriorSpec::Grid(GridPrior::point_mass(&[0.2], 1e-9).unwrap());
        let s = sample_prior_predictive(&prior, &LikelihoodSpec::Bernoulli, 200, 100, 8).unwrap();
        let pooled = s.pooled();
        let mean = pooled.outcomes().iter().sum::<f64>() / pooled.len() as f64;
        // 4 standard errors of a Bernoulli(0.2) mean over 20,000 draws
        assert!((mean - 0.2).abs() < 4.0 * (0.16f64 / 20_000.0).sqrt(), "{mean}");
    }

    #[test]
    fn normal_prior_predictive_variance() {
        // pooled variance = prior variance + noise variance
        let s = sample_prior_predictive(
            &PriorSpec::NormalKnownVariance { mean: 0.0, variance: 1.0 },
            &LikelihoodSpec::NormalKnownVariance { noise_variance: 1.0 },
            20_000,
            5,
            21,
        )
        .unwrap();
        let y = s.pooled().outcomes();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!((v - 2.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn prior_predictive_is_deterministic() {
        let f = || {
            sample_prior_predictive(&PriorSpec::Beta { a: 2.0, b: 3.0 }, &LikelihoodSpec::Bernoulli, 20, 7, 5).unwrap()
        };
        assert_eq!(f(), f());
        assert!(sample_prior_predictive(&PriorSpec::Beta { a: 2.0, b: 3.0 }, &LikelihoodSpec::Bernoulli, 0, 7, 5).is_err());
    }

    #[test]
    fn mmd_identical_and_shifted() {
        let a = normal_points(0.0, 500, 1);
        let b = normal_points(3.0, 500, 2);
        let same = mmd_v_statistic(&a, &a, 1.0);
        assert_eq!(same, 0.0);
        let apart = mmd_v_statistic(&a, &b, 1.0);
        assert!(apart >= 100.0 * same.max(1e-12), "{apart}");
        // brute-force value of the biased estimator
        let k = |x: f64, y: f64| (-(x - y) * (x - y) / 2.0).exp();
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for p in &a {
            for q in &a {
                kxx += k(p[0], q[0]);
            }
            for q in &b {
                kxy += k(p[0], q[0]);
            }
        }
        for p in &b {
            for q in &b {
                kyy += k(p[0], q[0]);
            }
        }
        let n2 = 500.0 * 500.0;
        let oracle = kxx / n2 + kyy / n2 - 2.0 * kxy / n2;
        assert!((apart - oracle).abs() < 1e-12);
    }

    #[test]
    fn mmd_is_exactly_symmetric() {
        let a = normal_points(0.0, 60, 3);
        let b = normal_points(0.5, 45, 4);
        assert_eq!(mmd_v_statistic(&a, &b, 0.7).to_bits(), mmd_v_statistic(&b, &a, 0.7).to_bits());
    }

    #[test]
    fn moment_match_example() {
        let anticipated = AnticipatedSample::from_datasets(
            vec![Dataset::from_outcomes(&[0.0, 1.0], Provenance::Anticipated)],
            PriorSpec::Beta { a: 1.0, b: 1.0 },
            LikelihoodSpec::Bernoulli,
        )
        .unwrap();
        let synthetic = Dataset::from_outcomes(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], Provenance::Synthetic);
        let spec = DivergenceSpec::MomentMatch {
            orders: vec![1],
            order_weights: vec![1.0],
        };
        let k = divergence(&spec, &anticipated, &synthetic, None).unwrap();
        assert!((k - 0.04).abs() < 1e-15, "{k}");
    }

    #[test]
    fn divergence_errors() {
        let anticipated = AnticipatedSample::from_datasets(
            vec![Dataset::from_outcomes(&[0.0, 1.0], Provenance::Anticipated)],
            PriorSpec::Beta { a: 1.0, b: 1.0 },
            LikelihoodSpec::Bernoulli,
        )
        .unwrap();
        let empty = Dataset::empty(Provenance::Synthetic);
        let spec = DivergenceSpec::Mmd { bandwidth: None };
        assert_eq!(divergence(&spec, &anticipated, &empty, None), Err(Error::EmptyData));
        let one = Dataset::from_outcomes(&[1.0], Provenance::Synthetic);
        assert!(matches!(
            divergence(&DivergenceSpec::NegLogPredictive, &anticipated, &one, None),
            Err(Error::Config(_))
        ));
        assert!(DivergenceSpec::Mmd { bandwidth: Some(0.0) }.validate().is_err());
        assert!(DivergenceSpec::MomentMatch { orders: vec![], order_weights: vec![] }.validate().is_err());
    }

    #[test]
    fn neg_log_predictive_beta_bernoulli() {
        let anticipated = AnticipatedSample::from_datasets(
            vec![Dataset::from_outcomes(&[0.0], Provenance::Anticipated)],
            PriorSpec::Beta { a: 1.0, b: 1.0 },
            LikelihoodSpec::Bernoulli,
        )
        .unwrap();
        let syn = Dataset::from_outcomes(&[1.0, 0.0], Provenance::Synthetic);
        let k = divergence(&DivergenceSpec::NegLogPredictive, &anticipated, &syn, Some(&LikelihoodSpec::Bernoulli)).unwrap();
        // p(1,0) = B(2,2)/B(1,1) = 1/6
        assert!((k - 6f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_uses_covariates() {
        let d1 = Dataset::new(vec![Observation::with_covariates(0.0, vec![1.0])], Provenance::Synthetic);
        let d2 = Dataset::new(vec![Observation::with_covariates(0.0, vec![5.0])], Provenance::Anticipated);
        let ant = AnticipatedSample::from_datasets(vec![d2], PriorSpec::Beta { a: 1.0, b: 1.0 }, LikelihoodSpec::Bernoulli)
            .unwrap();
        let k = divergence(&DivergenceSpec::Mmd { bandwidth: Some(1.0) }, &ant, &d1, None).unwrap();
        assert!(k > 1.9);
    }

    #[test]
    fn median_heuristic_fallbacks() {
        assert_eq!(median_heuristic(&[vec![1.0], vec![1.0]]), 1.0);
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![1.0]];
        // distances: 0,0,1,0,1,1 -> median 0.5
        assert_eq!(median_heuristic(&pts), 0.5);
    }
}
