//! Two-step random-coefficients logit: basis coefficients fitted on synthetic
//! choices over the real covariates, then simplex mixture weights from the
//! real choices.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::icls::{icls_simplex, MixtureWeights};
use super::mnl::{self, ChoiceDataset, ChoiceRow};
use crate::error::{Error, Result};
use crate::foundation::ExcludedComponent;
use crate::promptloop::Prompt;
use crate::rng;

/// Produces choices on given covariate matrices for a prompt.
pub trait ChoiceSynthesizer {
    /// One 0-based choice per covariate matrix.
    fn synthesize_choices(&self, q: &Prompt, x: &[DMatrix<f64>], seed: u64) -> Result<Vec<usize>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub betas: Vec<Vec<f64>>,
}

impl BasisSet {
    pub fn new(betas: Vec<Vec<f64>>) -> Result<Self> {
        let b = BasisSet { betas };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.betas.first() else {
            return Err(Error::config("basis set is empty"));
        };
        let k = first.len();
        if k == 0 {
            return Err(Error::config("basis coefficients must have length >= 1"));
        }
        if self.betas.iter().any(|b| b.len() != k) {
            return Err(Error::shape("basis coefficients have different lengths"));
        }
        if self.betas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn num_covariates(&self) -> usize {
        self.betas.first().map_or(0, Vec::len)
    }

    /// Appends user-supplied extra basis elements.
    pub fn augment(mut self, extra: Vec<Vec<f64>>) -> Result<Self> {
        self.betas.extend(extra);
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub basis: BasisSet,
    /// Prompts whose fit failed and were left out of the basis.
    pub dropped: Vec<ExcludedComponent>,
}

/// For each prompt, synthesizes `n_obs` choices on the real covariates
/// (cycled when `n_obs` exceeds their count) and fits a logit.
pub fn bfr_first_stage(
    gen: &dyn ChoiceSynthesizer,
    prompts: &[Prompt],
    x_real: &[DMatrix<f64>],
    n_obs: usize,
    seed: u64,
) -> Result<FirstStage> {
    if prompts.is_empty() {
        return Err(Error::config("first stage needs at least one prompt"));
    }
    let Some(first) = x_real.first() else {
        return Err(Error::EmptyData);
    };
    if n_obs == 0 {
        return Err(Error::config("n_obs must be at least 1"));
    }
    let (j, k) = first.shape();
    let x: Vec<DMatrix<f64>> = (0..n_obs).map(|i| x_real[i % x_real.len()].clone()).collect();
    let mut betas = Vec::new();
    let mut dropped = Vec::new();
    for (b, q) in prompts.iter().enumerate() {
        let choices = gen.synthesize_choices(q, &x, rng::derive_seed(seed, b as u64))?;
        if choices.len() != x.len() {
            return Err(Error::Generator {
                message: format!("expected {} choices, got {}", x.len(), choices.len()),
                diagnostics: String::new(),
            });
        }
        let rows = x
            .iter()
            .zip(choices)
            .map(|(m, choice)| ChoiceRow { x: m.clone(), choice })
            .collect();
        let data = ChoiceDataset::new(rows, j, k)?;
        match mnl::fit_mnl(&data, mnl::DEFAULT_TOLERANCE, mnl::DEFAULT_MAX_ITER) {
            Ok(beta) => betas.push(beta),
            Err(e @ (Error::NonConvergence { .. } | Error::Singular(_))) => {
                warn!("basis component {b} dropped: {e}");
                dropped.push(ExcludedComponent {
                    index: b,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if betas.is_empty() {
        return Err(Error::Degenerate("every first-stage fit failed".into()));
    }
    Ok(FirstStage {
        basis: BasisSet::new(betas)?,
        dropped,
    })
}

fn check_basis(basis: &BasisSet, k: usize) -> Result<()> {
    basis.validate()?;
    if basis.num_covariates() != k {
        return Err(Error::shape(format!(
            "basis has {} coefficients, choice data has {k} covariates",
            basis.num_covariates()
        )));
    }
    Ok(())
}

/// ICLS of the stacked one-hot real choices on the basis choice
/// probabilities `P(j | X_i, β_b)`.
pub fn bfr_second_stage(choices_real: &ChoiceDataset, basis: &BasisSet) -> Result<MixtureWeights> {
    check_basis(basis, choices_real.num_covariates())?;
    if choices_real.is_empty() {
        return Err(Error::EmptyData);
    }
    let j = choices_real.num_alternatives();
    let n = choices_real.len();
    let mut y = DVector::zeros(n * j);
    let mut p = DMatrix::zeros(n * j, basis.len());
    for (i, row) in choices_real.rows().iter().enumerate() {
        y[i * j + row.choice] = 1.0;
        for (b, beta) in basis.betas.iter().enumerate() {
            for (a, prob) in mnl::mnl_choice_prob(beta, &row.x)?.into_iter().enumerate() {
                p[(i * j + a, b)] = prob;
            }
        }
    }
    icls_simplex(&y, &p)
}

/// Observed choice shares for one covariate configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub x: DMatrix<f64>,
    pub shares: Vec<f64>,
    /// Number of individual choices behind the shares.
    pub count: usize,
}

/// Groups individual choices by identical covariate matrices, in order of
/// first appearance.
pub fn aggregate_shares(data: &ChoiceDataset) -> Vec<ShareRow> {
    let mut out: Vec<ShareRow> = Vec::new();
    let j = data.num_alternatives();
    for row in data.rows() {
        let pos = out.iter().position(|s| s.x == row.x);
        let entry = match pos {
            Some(p) => &mut out[p],
            None => {
                out.push(ShareRow {
                    x: row.x.clone(),
                    shares: vec![0.0; j],
                    count: 0,
                });
                out.last_mut().expect("just pushed")
            }
        };
        entry.shares[row.choice] += 1.0;
        entry.count += 1;
    }
    for s in &mut out {
        let c = s.count as f64;
        for v in &mut s.shares {
            *v /= c;
        }
    }
    out
}

/// Second stage on share data. Rows are weighted by `√count`, which gives
/// the same weights as the individual-level fit on the underlying choices.
pub fn bfr_second_stage_shares(shares: &[ShareRow], basis: &BasisSet) -> Result<MixtureWeights> {
    let Some(first) = shares.first() else {
        return Err(Error::EmptyData);
    };
    let (j, k) = first.x.shape();
    check_basis(basis, k)?;
    let mut y = DVector::zeros(shares.len() * j);
    let mut p = DMatrix::zeros(shares.len() * j, basis.len());
    for (m, s) in shares.iter().enumerate() {
        if s.x.shape() != (j, k) || s.shares.len() != j {
            return Err(Error::shape(format!("share row {m} does not match the first row's shape")));
        }
        let scale = (s.count.max(1) as f64).sqrt();
        for a in 0..j {
            y[m * j + a] = scale * s.shares[a];
        }
        for (b, beta) in basis.betas.iter().enumerate() {
            for (a, prob) in mnl::mnl_choice_prob(beta, &s.x)?.into_iter().enumerate() {
                p[(m * j + a, b)] = scale * prob;
            }
        }
    }
    icls_simplex(&y, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Mixture of logits: each row picks a component by `weights`, then a
    /// choice from that component's logit.
    pub(crate) fn mixture_choices(betas: &[Vec<f64>], weights: &[f64], j: usize, n: usize, seed: u64) -> ChoiceDataset {
        let k = betas[0].len();
        let mut r = rng::seeded(seed);
        let rows = (0..n)
            .map(|_| {
                let x = DMatrix::from_fn(j, k, |_, _| r.sample::<f64, _>(StandardNormal));
                let c = mnl::draw_index(weights, &mut r);
                let probs = mnl::mnl_choice_prob(&betas[c], &x).unwrap();
                let choice = mnl::draw_index(&probs, &mut r);
                ChoiceRow { x, choice }
            })
            .collect();
        ChoiceDataset::new(rows, j, k).unwrap()
    }

    /// Uses the prompt itself as the logit coefficient.
    struct PromptIsBeta;

    impl ChoiceSynthesizer for PromptIsBeta {
        fn synthesize_choices(&self, q: &Prompt, x: &[DMatrix<f64>], seed: u64) -> Result<Vec<usize>> {
            mnl::simulate_choices(q.as_slice(), x, &mut rng::seeded(seed))
        }
    }

    fn covariates(n: usize, j: usize, k: usize, seed: u64) -> Vec<DMatrix<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| DMatrix::from_fn(j, k, |_, _| r.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    #[test]
    fn basis_validation() {
        assert!(BasisSet::new(vec![]).is_err());
        assert!(BasisSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let b = BasisSet::new(vec![vec![1.0, 2.0]]).unwrap();
        assert_eq!(b.augment(vec![vec![0.0, 0.0]]).unwrap().len(), 2);
    }

    #[test]
    fn first_stage_recovers_signs() {
        let x = covariates(5000, 3, 2, 1);
        let beta0 = vec![1.0, -0.5];
        let neg: Vec<f64> = beta0.iter().map(|v| -v).collect();
        let fs = bfr_first_stage(&PromptIsBeta, &[Prompt(beta0.clone()), Prompt(neg.clone())], &x, 20_000, 3).unwrap();
        assert!(fs.dropped.is_empty());
        for (got, want) in fs.basis.betas.iter().zip([&beta0, &neg]) {
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 0.05, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn first_stage_uniform_generator_gives_zero() {
        let x = covariates(2000, 3, 2, 2);
        let fs = bfr_first_stage(&PromptIsBeta, &[Prompt(vec![0.0, 0.0])], &x, 20_000, 5).unwrap();
        assert!(fs.basis.betas[0].iter().all(|b| b.abs() < 0.05));
    }

    #[test]
    fn second_stage_recovers_even_mixture() {
        let betas = vec![vec![1.0, -0.5], vec![-1.0, 1.0]];
        let data = mixture_choices(&betas, &[0.5, 0.5], 3, 20_000, 9);
        let w = bfr_second_stage(&data, &BasisSet::new(betas).unwrap()).unwrap();
        assert!((w.w[0] - 0.5).abs() < 0.05, "{:?}", w.w);
        w.validate().unwrap();
    }

    #[test]
    fn second_stage_prefers_true_component() {
        let truth = vec![0.8, -0.4];
        let data = mixture_choices(std::slice::from_ref(&truth), &[1.0], 3, 10_000, 10);
        let w = bfr_second_stage(&data, &BasisSet::new(vec![truth, vec![-6.0, 7.0]]).unwrap()).unwrap();
        assert!(w.w[0] >= 0.9, "{:?}", w.w);
    }

    #[test]
    fn second_stage_flags_small_samples() {
        let data = mixture_choices(&[vec![1.0]], &[1.0], 2, 1, 11);
        let basis = BasisSet::new(vec![vec![1.0], vec![0.0], vec![-1.0]]).unwrap();
        assert!(bfr_second_stage(&data, &basis).unwrap().rank_deficient);
    }

    #[test]
    fn share_aggregation_matches_individual_fit() {
        let betas = vec![vec![1.0, -0.5], vec![-1.0, 1.0]];
        let markets = covariates(4, 3, 2, 12);
        let mut r = rng::seeded(13);
        let rows = (0..3000)
            .map(|i| {
                let x = markets[i % markets.len()].clone();
                let c = mnl::draw_index(&[0.3, 0.7], &mut r);
                let choice = mnl::draw_index(&mnl::mnl_choice_prob(&betas[c], &x).unwrap(), &mut r);
                ChoiceRow { x, choice }
            })
            .collect();
        let data = ChoiceDataset::new(rows, 3, 2).unwrap();
        let basis = BasisSet::new(betas).unwrap();
        let individual = bfr_second_stage(&data, &basis).unwrap();
        let shares = aggregate_shares(&data);
        assert_eq!(shares.len(), 4);
        assert_eq!(shares.iter().map(|s| s.count).sum::<usize>(), 3000);
        let pooled = bfr_second_stage_shares(&shares, &basis).unwrap();
        for (a, b) in individual.w.iter().zip(&pooled.w) {
            assert!((a - b).abs() < 1e-8, "{:?} {:?}", individual.w, pooled.w);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let data = mixture_choices(&[vec![1.0, 0.0]], &[1.0], 3, 10, 14);
        assert!(bfr_second_stage(&data, &BasisSet::new(vec![vec![1.0]]).unwrap()).is_err());
    }
}
