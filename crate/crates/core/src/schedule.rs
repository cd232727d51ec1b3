//! Variance schedules: sigmoid for positions, cosine for atom features.
//!
//! Arrays of per-step values are indexed `t = 1..=T` and stored with a
//! placeholder at index 0, so `beta[t]` reads naturally. Cumulative products
//! carry `alpha_bar[0] = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const BETA_V_CLIP: f64 = 0.999;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `beta_t = sigmoid(w1 * (2t/T - 1)) * (w2 - w3) + w3` for `t = 1..=T`.
pub fn sigmoid_beta_schedule(t_max: usize, w1: f64, w2: f64, w3: f64) -> Result<Vec<f64>> {
    if t_max < 2 {
        return Err(invalid("schedule needs T >= 2"));
    }
    let betas: Vec<f64> = (1..=t_max)
        .map(|t| sigmoid(w1 * (2.0 * t as f64 / t_max as f64 - 1.0)) * (w2 - w3) + w3)
        .collect();
    if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
        return Err(invalid(format!("sigmoid schedule produced beta = {b} outside (0, 1)")));
    }
    Ok(betas)
}

/// Returns `(beta_v[1..=T], alpha_bar_v[0..=T])` where `alpha_bar` is the
/// closed form `f(t) / f(0)` and `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}`
/// clipped at 0.999.
pub fn cosine_beta_schedule(t_max: usize, s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if t_max < 2 {
        return Err(invalid("schedule needs T >= 2"));
    }
    let f = |t: usize| {
        let a = ((t as f64 / t_max as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        a.cos().powi(2)
    };
    let f0 = f(0);
    let alpha_bar: Vec<f64> = (0..=t_max).map(|t| f(t) / f0).collect();
    let betas = (1..=t_max)
        .map(|t| (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(BETA_V_CLIP))
        .collect();
    Ok((betas, alpha_bar))
}

/// Cumulative products `prod_{tau <= t} (1 - beta_tau)` with a leading 1.
pub fn alpha_bar(betas: &[f64]) -> Result<Vec<f64>> {
    if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
        return Err(invalid(format!("beta = {b} outside (0, 1)")));
    }
    let mut out = Vec::with_capacity(betas.len() + 1);
    out.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        out.push(acc);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigmoid_w1: f64,
    pub sigmoid_w2: f64,
    pub sigmoid_w3: f64,
    pub cosine_s: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            sigmoid_w1: 6.0,
            sigmoid_w2: 1e-7,
            sigmoid_w3: 0.01,
            cosine_s: 0.01,
        }
    }
}

/// Precomputed position and feature schedules.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    t_max: usize,
    beta_x: Vec<f64>,
    beta_v: Vec<f64>,
    alpha_bar_x: Vec<f64>,
    alpha_bar_v: Vec<f64>,
}

impl Schedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let bx = sigmoid_beta_schedule(config.steps, config.sigmoid_w1, config.sigmoid_w2, config.sigmoid_w3)?;
        let (bv, _) = cosine_beta_schedule(config.steps, config.cosine_s)?;
        // The feature chain uses the product of clipped steps so that marginals
        // and step kernels agree exactly.
        let abx = alpha_bar(&bx)?;
        let abv = alpha_bar(&bv)?;
        let pad = |v: Vec<f64>| std::iter::once(0.0).chain(v).collect::<Vec<_>>();
        Ok(Self {
            t_max: config.steps,
            beta_x: pad(bx),
            beta_v: pad(bv),
            alpha_bar_x: abx,
            alpha_bar_v: abv,
        })
    }

    pub fn with_steps(t_max: usize) -> Result<Self> {
        Self::new(&ScheduleConfig {
            steps: t_max,
            ..ScheduleConfig::default()
        })
    }

    pub fn steps(&self) -> usize {
        self.t_max
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(invalid(format!("step {t} outside 1..={}", self.t_max)));
        }
        Ok(())
    }

    pub fn beta_x(&self, t: usize) -> f64 {
        self.beta_x[t]
    }

    pub fn beta_v(&self, t: usize) -> f64 {
        self.beta_v[t]
    }

    pub fn alpha_x(&self, t: usize) -> f64 {
        1.0 - self.beta_x[t]
    }

    pub fn alpha_v(&self, t: usize) -> f64 {
        1.0 - self.beta_v[t]
    }

    pub fn alpha_bar_x(&self, t: usize) -> f64 {
        self.alpha_bar_x[t]
    }

    pub fn alpha_bar_v(&self, t: usize) -> f64 {
        self.alpha_bar_v[t]
    }

    /// Rows `(t, beta_x, beta_v, alpha_bar_x, alpha_bar_v)` for `t = 1..=T`.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64, f64)> + '_ {
        (1..=self.t_max).map(|t| {
            (
                t,
                self.beta_x[t],
                self.beta_v[t],
                self.alpha_bar_x[t],
                self.alpha_bar_v[t],
            )
        })
    }
}
