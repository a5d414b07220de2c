//! Least squares on the probability simplex:
//! `min ‖y − P w‖²  s.t.  w ≥ 0, Σ w = 1`, by a primal active-set method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub w: Vec<f64>,
    /// `‖y − P w‖²` at `w`.
    pub objective: f64,
    /// `P` has rank below its column count; the working-set systems were
    /// solved in the minimum-norm sense.
    pub rank_deficient: bool,
    pub iterations: usize,
}

impl MixtureWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("mixture weights must be nonnegative"));
        }
        let s: f64 = self.w.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::config(format!("mixture weights sum to {s}")));
        }
        Ok(())
    }
}

/// Relative singular-value cutoff used for rank decisions and minimum-norm
/// solves.
const RANK_TOL: f64 = 1e-10;

pub fn objective(y: &DVector<f64>, p: &DMatrix<f64>, w: &[f64]) -> f64 {
    (y - p * DVector::from_column_slice(w)).norm_squared()
}

pub fn matrix_rank(p: &DMatrix<f64>) -> usize {
    if p.nrows() == 0 || p.ncols() == 0 {
        return 0;
    }
    let sv = p.clone().svd(false, false).singular_values;
    let max = sv.amax();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > RANK_TOL * max).count()
}

pub fn icls_simplex(y: &DVector<f64>, p: &DMatrix<f64>) -> Result<MixtureWeights> {
    let n = p.nrows();
    let b = p.ncols();
    if b == 0 {
        return Err(Error::config("need at least one column"));
    }
    if y.len() != n {
        return Err(Error::shape(format!("y has length {}, P has {n} rows", y.len())));
    }
    if p.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ICLS inputs must be finite".into()));
    }
    let rank_deficient = n < b || matrix_rank(p) < b;
    if b == 1 {
        return Ok(MixtureWeights {
            w: vec![1.0],
            objective: objective(y, p, &[1.0]),
            rank_deficient,
            iterations: 0,
        });
    }

    let q = p.tr_mul(p);
    let c = p.tr_mul(y);
    let scale = 1.0 + q.amax() + c.amax();
    let kkt_tol = 1e-12 * scale;

    let mut w = vec![1.0 / b as f64; b];
    let mut free = vec![true; b];
    let max_iter = 100 + 20 * b;

    for iteration in 1..=max_iter {
        let idx: Vec<usize> = (0..b).filter(|&i| free[i]).collect();
        let target = solve_working_set(&q, &c, &idx);

        if idx.iter().zip(&target).all(|(_, &v)| v >= 0.0) {
            for wi in w.iter_mut() {
                *wi = 0.0;
            }
            for (&i, &v) in idx.iter().zip(&target) {
                w[i] = v;
            }
            let grad = gradient(&q, &c, &w);
            let nu = idx.iter().map(|&i| grad[i]).sum::<f64>() / idx.len() as f64;
            let candidate = (0..b)
                .filter(|&i| !free[i])
                .map(|i| (i, grad[i] - nu))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match candidate {
                Some((i, mu)) if mu < -kkt_tol => free[i] = true,
                _ => {
                    let w = project_to_simplex(w);
                    return Ok(MixtureWeights {
                        objective: objective(y, p, &w),
                        w,
                        rank_deficient,
                        iterations: iteration,
                    });
                }
            }
        } else {
            // Move toward the working-set optimum until a weight hits zero.
            let mut alpha = 1.0;
            let mut blocking = None;
            for (&i, &v) in idx.iter().zip(&target) {
                if v < 0.0 {
                    let a = w[i] / (w[i] - v);
                    if a < alpha {
                        alpha = a;
                        blocking = Some(i);
                    }
                }
            }
            for (&i, &v) in idx.iter().zip(&target) {
                w[i] += alpha * (v - w[i]);
            }
            if let Some(i) = blocking {
                w[i] = 0.0;
                free[i] = false;
            }
            for &i in &idx {
                if w[i] <= 0.0 {
                    w[i] = 0.0;
                    free[i] = false;
                }
            }
            if free.iter().all(|f| !f) {
                // only reachable through rounding: restart from the vertex the
                // working-set solution favoured most
                let (pos, _) = target
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("working set is nonempty");
                free[idx[pos]] = true;
                w[idx[pos]] = 1.0;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        gradient_norm: f64::NAN,
        log_likelihood: f64::NAN,
    })
}

/// Gradient of `wᵀQw − 2cᵀw`.
fn gradient(q: &DMatrix<f64>, c: &DVector<f64>, w: &[f64]) -> DVector<f64> {
    (q * DVector::from_column_slice(w) - c) * 2.0
}

/// Equality-constrained minimizer over the free indices:
/// `[2Q_FF 1; 1ᵀ 0] [w_F; ν] = [2c_F; 1]`, minimum-norm when singular.
fn solve_working_set(q: &DMatrix<f64>, c: &DVector<f64>, idx: &[usize]) -> Vec<f64> {
    let m = idx.len();
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (a, &i) in idx.iter().enumerate() {
        for (bb, &j) in idx.iter().enumerate() {
            kkt[(a, bb)] = 2.0 * q[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
        rhs[a] = 2.0 * c[i];
    }
    rhs[m] = 1.0;
    let eps = RANK_TOL * kkt.amax().max(1.0);
    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) && (&kkt * &s - &rhs).amax() <= 1e-9 * (1.0 + rhs.amax()) => s,
        _ => kkt
            .svd(true, true)
            .solve(&rhs, eps)
            .expect("SVD with both factors computed"),
    };
    sol.rows(0, m).iter().copied().collect()
}

fn project_to_simplex(mut w: Vec<f64>) -> Vec<f64> {
    for v in w.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

/// KKT residual for `min ‖y − Pw‖²` on the simplex: stationarity on the
/// support and sign of the multipliers off it. Returned relative to
/// `1 + max|∇|`.
pub fn kkt_residual(y: &DVector<f64>, p: &DMatrix<f64>, w: &[f64]) -> f64 {
    let q = p.tr_mul(p);
    let c = p.tr_mul(y);
    let g = gradient(&q, &c, w);
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    let nu = support.iter().map(|&i| g[i]).sum::<f64>() / support.len().max(1) as f64;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let r = g[i] - nu;
        worst = worst.max(if w[i] > 0.0 { r.abs() } else { (-r).max(0.0) });
    }
    worst / (1.0 + g.amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn single_column_is_one() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let p = DMatrix::from_column_slice(3, 1, &[0.0, 5.0, -1.0]);
        let r = icls_simplex(&y, &p).unwrap();
        assert_eq!(r.w, vec![1.0]);
    }

    #[test]
    fn recovers_interior_weights() {
        let mut r = rng::seeded(4);
        let p = DMatrix::from_fn(20, 2, |_, _| r.random::<f64>());
        let y = &p * DVector::from_vec(vec![0.3, 0.7]);
        let res = icls_simplex(&y, &p).unwrap();
        assert!((res.w[0] - 0.3).abs() < 1e-8 && (res.w[1] - 0.7).abs() < 1e-8, "{:?}", res.w);
        assert!(!res.rank_deficient);
    }

    #[test]
    fn negative_unconstrained_weight_hits_boundary() {
        // y lies beyond column 0 on the line through columns 0 and 1
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.2, 0.0, 1.0, 0.3, 0.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.5, -0.5, 0.0]);
        let res = icls_simplex(&y, &p).unwrap();
        let brute = brute_force(&y, &p, 1000);
        assert!(res.objective <= brute + 1e-12);
        assert!(brute - res.objective <= 2e-3);
        assert!(res.w.contains(&0.0));
        assert!(kkt_residual(&y, &p, &res.w) < 1e-7);
    }

    fn brute_force(y: &DVector<f64>, p: &DMatrix<f64>, steps: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                best = best.min(objective(y, p, &w));
            }
        }
        best
    }

    #[test]
    fn fewer_rows_than_columns_flags_rank() {
        let p = DMatrix::from_row_slice(2, 3, &[0.2, 0.5, 0.9, 0.8, 0.5, 0.1]);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let res = icls_simplex(&y, &p).unwrap();
        assert!(res.rank_deficient);
        res.validate().unwrap();
    }

    #[test]
    fn duplicate_columns_are_handled() {
        let mut r = rng::seeded(8);
        let col: Vec<f64> = (0..10).map(|_| r.random()).collect();
        let other: Vec<f64> = (0..10).map(|_| r.random()).collect();
        let mut data = col.clone();
        data.extend(&col);
        data.extend(&other);
        let p = DMatrix::from_column_slice(10, 3, &data);
        let y = DVector::from_vec(col.iter().zip(&other).map(|(a, b)| 0.5 * a + 0.5 * b).collect());
        let res = icls_simplex(&y, &p).unwrap();
        assert!(res.rank_deficient);
        res.validate().unwrap();
        assert!(res.objective < 1e-16, "{}", res.objective);
        assert!((res.w[0] + res.w[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn shape_errors() {
        let p = DMatrix::zeros(3, 2);
        assert!(icls_simplex(&DVector::zeros(2), &p).is_err());
        let mut bad = DMatrix::zeros(3, 2);
        bad[(0, 0)] = f64::NAN;
        assert!(icls_simplex(&DVector::zeros(3), &bad).is_err());
    }
}
