//! Forward noising kernels, closed-form marginals and the exact posteriors
//! `q(x_{t-1} | x_t, x_0)` and `q(v_{t-1} | v_t, v_0)`.

use crate::autodiff::Matrix;
use crate::error::{invalid, Error, Result};
use crate::geometry::Vec3;
use crate::rng::Noise;
use crate::schedule::Schedule;

/// Noisy positions and feature distributions at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Vec<Vec3>,
    /// `n x K`, one probability vector per atom.
    pub v: Matrix,
    pub t: usize,
}

impl DiffusionState {
    pub fn n_atoms(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.v.nrows() != self.x.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} feature rows",
                self.x.len(),
                self.v.nrows()
            )));
        }
        for row in self.v.rows() {
            if row.iter().any(|&p| p < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(invalid("feature rows must be probability vectors"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<Vec3>,
    pub variance: f64,
}

/// Coefficients of the Gaussian posterior: `mean = c0 * x_0 + ct * x_t`, and its variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub c0: f64,
    pub ct: f64,
    pub variance: f64,
}

pub fn posterior_coefficients(t: usize, s: &Schedule) -> Result<PosteriorCoefficients> {
    s.check_step(t)?;
    let ab = s.alpha_bar_x(t);
    let ab_prev = s.alpha_bar_x(t - 1);
    let beta = s.beta_x(t);
    let alpha = s.alpha_x(t);
    Ok(PosteriorCoefficients {
        c0: ab_prev.sqrt() * beta / (1.0 - ab),
        ct: alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        variance: (1.0 - ab_prev) / (1.0 - ab) * beta,
    })
}

/// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`; returns `(x_t, eps)`.
pub fn noise_positions(x0: &[Vec3], t: usize, s: &Schedule, noise: &mut Noise) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    s.check_step(t)?;
    let ab = s.alpha_bar_x(t);
    let eps: Vec<Vec3> = x0.iter().map(|_| noise.normal3()).collect();
    let xt = x0
        .iter()
        .zip(&eps)
        .map(|(x, e)| x * ab.sqrt() + e * (1.0 - ab).sqrt())
        .collect();
    Ok((xt, eps))
}

/// One forward step `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn step_positions(x_prev: &[Vec3], t: usize, s: &Schedule, noise: &mut Noise) -> Result<Vec<Vec3>> {
    s.check_step(t)?;
    let b = s.beta_x(t);
    Ok(x_prev
        .iter()
        .map(|x| x * (1.0 - b).sqrt() + noise.normal3() * b.sqrt())
        .collect())
}

/// `abar * v0 + (1 - abar) / K`.
pub fn mix_uniform(v: &[f64], alpha: f64) -> Vec<f64> {
    let k = v.len() as f64;
    v.iter().map(|&p| alpha * p + (1.0 - alpha) / k).collect()
}

fn one_hot_class(row: &[f64]) -> Option<usize> {
    let hot = row.iter().position(|&p| p == 1.0)?;
    row.iter()
        .enumerate()
        .all(|(i, &p)| i == hot || p == 0.0)
        .then_some(hot)
}

/// Draws one-hot `v_t` from `Cat(abar_t v_0 + (1 - abar_t) / K)` per atom.
pub fn noise_features(v0: &Matrix, t: usize, s: &Schedule, noise: &mut Noise) -> Result<Matrix> {
    s.check_step(t)?;
    let ab = s.alpha_bar_v(t);
    let mut out = Matrix::zeros(v0.raw_dim());
    for (i, row) in v0.rows().into_iter().enumerate() {
        let row = row.to_vec();
        if one_hot_class(&row).is_none() {
            return Err(invalid(format!("v0 row {i} is not one-hot")));
        }
        let k = noise.categorical(&mix_uniform(&row, ab));
        out[[i, k]] = 1.0;
    }
    Ok(out)
}

/// Closed-form Gaussian posterior of `x_{t-1}`.
pub fn posterior_positions(xt: &[Vec3], x0: &[Vec3], t: usize, s: &Schedule) -> Result<GaussianPosterior> {
    if xt.len() != x0.len() {
        return Err(Error::ShapeMismatch("x_t and x_0 lengths differ".into()));
    }
    let c = posterior_coefficients(t, s)?;
    Ok(GaussianPosterior {
        mean: x0.iter().zip(xt).map(|(a, b)| a * c.c0 + b * c.ct).collect(),
        variance: c.variance,
    })
}

/// Normalized `[alpha_t v_t + (1 - alpha_t)/K] * [abar_{t-1} v_0 + (1 - abar_{t-1})/K]`.
pub fn categorical_posterior(vt: &[f64], v0: &[f64], alpha_t: f64, abar_prev: f64) -> Result<Vec<f64>> {
    if vt.len() != v0.len() {
        return Err(Error::ShapeMismatch("v_t and v_0 lengths differ".into()));
    }
    let a = mix_uniform(vt, alpha_t);
    let b = mix_uniform(v0, abar_prev);
    let unnorm: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let z: f64 = unnorm.iter().sum();
    if !(z >= 1e-300) {
        return Err(Error::DegeneratePosterior);
    }
    Ok(unnorm.into_iter().map(|c| c / z).collect())
}

/// Categorical posterior of `v_{t-1}` for every atom (`n x K`).
pub fn posterior_features(vt: &Matrix, v0: &Matrix, t: usize, s: &Schedule) -> Result<Matrix> {
    s.check_step(t)?;
    if vt.dim() != v0.dim() {
        return Err(Error::ShapeMismatch("v_t and v_0 shapes differ".into()));
    }
    let mut out = Matrix::zeros(vt.raw_dim());
    for i in 0..vt.nrows() {
        let c = categorical_posterior(
            &vt.row(i).to_vec(),
            &v0.row(i).to_vec(),
            s.alpha_v(t),
            s.alpha_bar_v(t - 1),
        )?;
        out.row_mut(i).assign(&ndarray::Array1::from(c));
    }
    Ok(out)
}

/// Row-stochastic step transition `Q_t = alpha I + (1 - alpha)/K 11^T`.
pub fn transition_matrix(alpha: f64, k: usize) -> Matrix {
    Matrix::from_shape_fn((k, k), |(i, j)| {
        (1.0 - alpha) / k as f64 + if i == j { alpha } else { 0.0 }
    })
}
