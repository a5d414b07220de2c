//! Zero-mean Gaussian process with a squared-exponential kernel, conditioned
//! first on synthetic points and then on real ones.
//!
//! The Cholesky factor of the conditioning covariance is extended block by
//! block as points arrive, so sequential and joint conditioning take
//! different numerical paths to the same posterior.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::squared_distance;

/// Diagonal jitter tried once when a Cholesky block fails.
pub const CHOLESKY_JITTER: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquaredExponential {
    pub length_scale: f64,
    pub signal_variance: f64,
}

impl SquaredExponential {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.signal_variance * (-squared_distance(a, b) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct GpData {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

impl GpData {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::shape(format!("{} inputs for {} outputs", inputs.len(), outputs.len())));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::shape("GP inputs have different dimensions"));
            }
        }
        if inputs.iter().flatten().chain(&outputs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GP data must be finite".into()));
        }
        Ok(GpData { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpState {
    pub kernel: SquaredExponential,
    pub noise_variance: f64,
    pub data: GpData,
    /// Lower Cholesky factor of `K + noise·I (+ jitter)` over `data`.
    chol: DMatrix<f64>,
    pub jitter_used: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpPrediction {
    pub mean: Vec<f64>,
    /// Variance of the latent function, without observation noise.
    pub variance: Vec<f64>,
}

impl GpState {
    pub fn prior(kernel: SquaredExponential, noise_variance: f64) -> Result<Self> {
        if !(kernel.length_scale > 0.0 && kernel.signal_variance > 0.0 && noise_variance > 0.0) {
            return Err(Error::config("GP length scale, signal variance and noise variance must be positive"));
        }
        if ![kernel.length_scale, kernel.signal_variance, noise_variance].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("GP hyperparameters must be finite".into()));
        }
        Ok(GpState {
            kernel,
            noise_variance,
            data: GpData::default(),
            chol: DMatrix::zeros(0, 0),
            jitter_used: false,
        })
    }

    pub fn n_points(&self) -> usize {
        self.data.len()
    }

    /// Conditions on additional points.
    pub fn condition(&self, new: &GpData) -> Result<Self> {
        if new.is_empty() {
            return Ok(self.clone());
        }
        let existing_dim = self.data.inputs.first().map(Vec::len);
        let new_dim = new.inputs[0].len();
        if existing_dim.is_some_and(|d| d != new_dim) || new.inputs.iter().any(|x| x.len() != new_dim) {
            return Err(Error::shape("GP inputs have different dimensions"));
        }
        let n0 = self.n_points();
        let n1 = new.len();
        let k = &self.kernel;
        let cross = DMatrix::from_fn(n0, n1, |i, j| k.eval(&self.data.inputs[i], &new.inputs[j]));
        // B = L⁻¹ K₀₁, so the new block is K₁₁ + σ²I − BᵀB.
        let b = if n0 > 0 {
            self.chol
                .solve_lower_triangular(&cross)
                .ok_or_else(|| Error::Singular("existing GP factor is singular".into()))?
        } else {
            DMatrix::zeros(0, n1)
        };
        let mut block = DMatrix::from_fn(n1, n1, |i, j| {
            let v = k.eval(&new.inputs[i], &new.inputs[j]);
            if i == j {
                v + self.noise_variance
            } else {
                v
            }
        });
        block -= b.tr_mul(&b);
        let mut jitter_used = self.jitter_used;
        let lower = match block.clone().cholesky() {
            Some(c) => c.l(),
            None => {
                warn!("GP covariance block not positive definite; adding jitter {CHOLESKY_JITTER}");
                jitter_used = true;
                for i in 0..n1 {
                    block[(i, i)] += CHOLESKY_JITTER;
                }
                block
                    .cholesky()
                    .ok_or_else(|| Error::Singular("GP covariance is not positive definite after jitter".into()))?
                    .l()
            }
        };
        let mut chol = DMatrix::zeros(n0 + n1, n0 + n1);
        chol.view_mut((0, 0), (n0, n0)).copy_from(&self.chol);
        chol.view_mut((n0, 0), (n1, n0)).copy_from(&b.transpose());
        chol.view_mut((n0, n0), (n1, n1)).copy_from(&lower);

        let mut data = self.data.clone();
        data.inputs.extend(new.inputs.iter().cloned());
        data.outputs.extend(&new.outputs);
        Ok(GpState {
            kernel: self.kernel,
            noise_variance: self.noise_variance,
            data,
            chol,
            jitter_used,
        })
    }

    pub fn predict(&self, query: &[Vec<f64>]) -> Result<GpPrediction> {
        let n = self.n_points();
        if n == 0 {
            return Ok(GpPrediction {
                mean: vec![0.0; query.len()],
                variance: query.iter().map(|q| self.kernel.eval(q, q)).collect(),
            });
        }
        let dim = self.data.inputs[0].len();
        if query.iter().any(|q| q.len() != dim) {
            return Err(Error::shape(format!("query points must have dimension {dim}")));
        }
        let singular = || Error::Singular("GP factor is singular".into());
        let y = DVector::from_column_slice(&self.data.outputs);
        let half = self.chol.solve_lower_triangular(&y).ok_or_else(singular)?;
        let kq = DMatrix::from_fn(n, query.len(), |i, j| self.kernel.eval(&self.data.inputs[i], &query[j]));
        let v = self.chol.solve_lower_triangular(&kq).ok_or_else(singular)?;
        let mean = v.tr_mul(&half).iter().copied().collect();
        let variance = query
            .iter()
            .enumerate()
            .map(|(j, q)| (self.kernel.eval(q, q) - v.column(j).norm_squared()).max(0.0))
            .collect();
        Ok(GpPrediction { mean, variance })
    }
}

/// Conditions `gp0` on the first `n_s_used` synthetic points.
pub fn gp_refine(synthetic: &GpData, gp0: &GpState, n_s_used: usize) -> Result<GpState> {
    if n_s_used > synthetic.len() {
        return Err(Error::config(format!(
            "n_s_used = {n_s_used} exceeds the {} synthetic points available",
            synthetic.len()
        )));
    }
    let subset = GpData::new(
        synthetic.inputs[..n_s_used].to_vec(),
        synthetic.outputs[..n_s_used].to_vec(),
    )?;
    gp0.condition(&subset)
}

/// Conditions on real observations.
pub fn gp_update(gp: &GpState, real: &GpData) -> Result<GpState> {
    gp.condition(real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn kernel() -> SquaredExponential {
        SquaredExponential {
            length_scale: 0.4,
            signal_variance: 1.5,
        }
    }

    fn points(n: usize, seed: u64, f: impl Fn(f64) -> f64, noise: f64) -> GpData {
        let mut r = rng::seeded(seed);
        let xs: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let ys = xs.iter().map(|&x| f(x) + noise * r.sample::<f64, _>(StandardNormal)).collect();
        GpData::new(xs.into_iter().map(|x| vec![x]).collect(), ys).unwrap()
    }

    fn grid(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![-2.5 + 5.0 * i as f64 / (n - 1) as f64]).collect()
    }

    #[test]
    fn zero_points_is_identity() {
        let gp0 = GpState::prior(kernel(), 0.1).unwrap();
        let syn = points(5, 1, f64::sin, 0.1);
        assert_eq!(gp_refine(&syn, &gp0, 0).unwrap(), gp0);
        assert_eq!(gp_update(&gp0, &GpData::default()).unwrap(), gp0);
        assert!(gp_refine(&syn, &gp0, 6).is_err());
    }

    #[test]
    fn conditioning_contracts_variance() {
        let gp0 = GpState::prior(kernel(), 0.05).unwrap();
        let post = gp_refine(&points(20, 2, f64::sin, 0.2), &gp0, 20).unwrap();
        let q = grid(100);
        let before = gp0.predict(&q).unwrap();
        let after = post.predict(&q).unwrap();
        for (a, b) in after.variance.iter().zip(&before.variance) {
            assert!(*a <= b + 1e-10);
        }
    }

    #[test]
    fn interpolates_in_the_noise_free_limit() {
        let gp0 = GpState::prior(kernel(), 1e-12).unwrap();
        let one = GpData::new(vec![vec![0.3]], vec![1.7]).unwrap();
        let post = gp_update(&gp0, &one).unwrap();
        let p = post.predict(&[vec![0.3]]).unwrap();
        assert!((p.mean[0] - 1.7).abs() < 1e-8);
    }

    #[test]
    fn sequential_equals_joint() {
        let gp0 = GpState::prior(kernel(), 0.1).unwrap();
        let syn = points(15, 3, |x| x.sin() + 0.5, 0.1);
        let real = points(12, 4, f64::sin, 0.1);
        let seq = gp_update(&gp_refine(&syn, &gp0, 15).unwrap(), &real).unwrap();
        let mut all = syn.clone();
        all.inputs.extend(real.inputs.clone());
        all.outputs.extend(real.outputs.clone());
        let joint = gp_update(&gp0, &all).unwrap();
        let q = grid(100);
        let a = seq.predict(&q).unwrap();
        let b = joint.predict(&q).unwrap();
        for i in 0..q.len() {
            assert!((a.mean[i] - b.mean[i]).abs() <= 1e-10);
            assert!((a.variance[i] - b.variance[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn many_real_points_override_biased_synthetic() {
        let noise_sd = 0.1;
        let gp0 = GpState::prior(kernel(), noise_sd * noise_sd).unwrap();
        let syn = points(20, 5, |x| x.sin() + 1.0, noise_sd);
        let real = points(200, 6, f64::sin, noise_sd);
        let post = gp_update(&gp_refine(&syn, &gp0, 20).unwrap(), &real).unwrap();
        let p = post.predict(&real.inputs).unwrap();
        let rmse = (p.mean.iter().zip(&real.outputs).map(|(m, y)| (m - y).powi(2)).sum::<f64>()
            / real.len() as f64)
            .sqrt();
        assert!(rmse < 2.0 * noise_sd, "{rmse}");
    }

    #[test]
    fn duplicate_points_use_jitter_or_noise() {
        let gp0 = GpState::prior(kernel(), 1e-12).unwrap();
        let d = GpData::new(vec![vec![0.0], vec![0.0]], vec![1.0, 1.0]).unwrap();
        let post = gp_update(&gp0, &d).unwrap();
        assert_eq!(post.n_points(), 2);
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(GpState::prior(
            SquaredExponential {
                length_scale: 0.0,
                signal_variance: 1.0
            },
            0.1
        )
        .is_err());
        assert!(GpData::new(vec![vec![0.0]], vec![]).is_err());
    }
}
