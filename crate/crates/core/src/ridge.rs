//! Closed-form ridge regression with an unpenalized intercept.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Solve `(XᵀX + λI)w = Xᵀy` on centred data, so the intercept
/// `mean(y) − mean(X)·w` carries no penalty.
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeModel> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows vs {} targets",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidInput("ridge needs at least one row".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge penalty must be > 0, got {lambda}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch("ragged feature rows".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite ridge input".into()));
    }

    let n = x.len();
    let x_mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let mut gram = xc.transpose() * &xc;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge normal matrix not positive definite".into()))?;
    let w = chol.solve(&rhs);
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - x_mean.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();
    if !intercept.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numerical("ridge solution is not finite".into()));
    }
    Ok(RidgeModel { intercept, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn exact_line_as_penalty_vanishes() {
        let m = fit_ridge(&[vec![1.0], vec![2.0]], &[1.0, 2.0], 1e-12).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-9);
        assert!(m.intercept.abs() < 1e-9);
    }

    #[test]
    fn huge_penalty_shrinks_to_mean() {
        let x = vec![vec![1.0], vec![2.0], vec![4.0]];
        let y = [3.0, 5.0, 10.0];
        let m = fit_ridge(&x, &y, 1e12).unwrap();
        assert!(m.weights[0].abs() < 1e-9);
        assert!((m.intercept - 6.0).abs() < 1e-8);
    }

    #[test]
    fn normal_equation_residual() {
        // Residual of the augmented system [1 X]ᵀ[1 X]β + λ·diag(0,1..1)β = [1 X]ᵀy,
        // assembled independently of the centred solve.
        let mut r = rng::stream(42, "ridge-test", &[]);
        let (n, d, lambda) = (80, 6, 0.7);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
        let m = fit_ridge(&x, &y, lambda).unwrap();
        let beta: Vec<f64> = std::iter::once(m.intercept).chain(m.weights.clone()).collect();
        let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(x[i].clone()).collect() };
        let mut residual = vec![0.0; d + 1];
        let mut aty = vec![0.0; d + 1];
        for i in 0..n {
            let a = row(i);
            let fit: f64 = a.iter().zip(&beta).map(|(u, v)| u * v).sum();
            for j in 0..=d {
                residual[j] += a[j] * fit;
                aty[j] += a[j] * y[i];
            }
        }
        for j in 1..=d {
            residual[j] += lambda * beta[j];
        }
        let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
        let res: Vec<f64> = residual.iter().zip(&aty).map(|(a, b)| a - b).collect();
        assert!(norm(&res) < 1e-8 * norm(&aty), "residual {}", norm(&res));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_ridge(&[vec![1.0]], &[1.0], 0.0).is_err());
        assert!(fit_ridge(&[vec![f64::NAN]], &[1.0], 1.0).is_err());
        assert!(fit_ridge(&[vec![1.0]], &[1.0, 2.0], 1.0).is_err());
    }
}
