//! Ancestral sampling with optional shape guidance.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{invalid, Error, Result};
use crate::forward_process::{categorical_posterior, posterior_coefficients, DiffusionState};
use crate::geometry::{build_surface_point_cloud_with, Atom, AtomClass, Molecule, Vec3};
use crate::predictor::{Prediction, Predictor};
use crate::rng::Noise;
use crate::schedule::Schedule;
use crate::shape_autoencoder::Autoencoder;
use crate::training::AtomCountHistogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Mean n-NN distance (Å) above which an atom is pulled toward the shape.
    pub gamma: f64,
    /// Guidance runs for `t >= stop_step`.
    pub stop_step: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub neighbors: usize,
    /// Variance of the atom-centered Gaussians guidance points are drawn from.
    pub phi: f64,
    pub points_per_atom: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            stop_step: 300,
            sigma_min: 0.2,
            sigma_max: 0.8,
            neighbors: 5,
            phi: 0.049,
            points_per_atom: 20,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.gamma > 0.0) || self.neighbors == 0 || self.points_per_atom == 0 {
            return Err(invalid(
                "guidance needs gamma > 0, neighbors >= 1, points_per_atom >= 1",
            ));
        }
        if self.stop_step <= 1 || self.stop_step > t_max {
            return Err(invalid(format!("stop step must lie in 2..={t_max}")));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max && self.sigma_max <= 1.0) {
            return Err(invalid("sigma range must satisfy 0 <= min <= max <= 1"));
        }
        if !(self.phi >= 0.0) {
            return Err(invalid("phi must be nonnegative"));
        }
        Ok(())
    }
}

/// Variance used when sampling `x_{t-1}` from the learned posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `1 - abar_t`.
    #[default]
    AsPrinted,
    /// The exact posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    BetaTilde,
}

impl PosteriorVariance {
    pub fn value(self, t: usize, s: &Schedule) -> Result<f64> {
        Ok(match self {
            PosteriorVariance::AsPrinted => 1.0 - s.alpha_bar_x(t),
            PosteriorVariance::BetaTilde => posterior_coefficients(t, s)?.variance,
        })
    }
}

/// `x_T ~ N(0, I)`, `v_T ~ Cat(1/K)` per atom.
pub fn sample_prior(n_atoms: usize, k: usize, t_max: usize, noise: &mut Noise) -> Result<DiffusionState> {
    if n_atoms == 0 {
        return Err(Error::EmptyMolecule);
    }
    let x = (0..n_atoms).map(|_| noise.normal3()).collect();
    let mut v = Matrix::zeros((n_atoms, k));
    for i in 0..n_atoms {
        v[[i, noise.index(k)]] = 1.0;
    }
    Ok(DiffusionState { x, v, t: t_max })
}

/// `points_per_atom` draws from `N(x_i, phi I)` around every atom position.
pub fn build_guidance_points(positions: &[Vec3], cfg: &GuidanceConfig, noise: &mut Noise) -> Result<Vec<Vec3>> {
    if positions.is_empty() {
        return Err(Error::EmptyMolecule);
    }
    let sd = cfg.phi.sqrt();
    let mut out = Vec::with_capacity(positions.len() * cfg.points_per_atom);
    for p in positions {
        for _ in 0..cfg.points_per_atom {
            out.push(p + noise.normal3() * sd);
        }
    }
    Ok(out)
}

/// Indices of the `n` points of `q` nearest to `x`, ties broken by index.
pub fn nearest_points(x: &Vec3, q: &[Vec3], n: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = q.iter().enumerate().map(|(i, p)| ((p - x).norm_squared(), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if n < idx.len() {
        idx.select_nth_unstable_by(n, cmp);
        idx.truncate(n);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|p| p.1).collect()
}

/// Mean distance from `x` to its `n` nearest points of `q`, and their centroid.
pub fn nearest_mean(x: &Vec3, q: &[Vec3], n: usize) -> (f64, Vec3) {
    let idx = nearest_points(x, q, n);
    let m = idx.len() as f64;
    let dist = idx.iter().map(|&i| (q[i] - x).norm()).sum::<f64>() / m;
    let centroid = idx.iter().map(|&i| q[i]).sum::<Vec3>() / m;
    (dist, centroid)
}

/// Pulls every atom whose mean distance to its `n` nearest guidance points
/// exceeds `gamma` toward their centroid with weight `sigmas[i]`. Returns the
/// adjusted positions and the indices that moved.
pub fn apply_shape_guidance_with(
    x0: &[Vec3],
    q: &[Vec3],
    cfg: &GuidanceConfig,
    sigmas: &[f64],
) -> Result<(Vec<Vec3>, Vec<usize>)> {
    if q.len() < cfg.neighbors {
        return Err(invalid(format!(
            "{} guidance points but n = {}",
            q.len(),
            cfg.neighbors
        )));
    }
    let mut out = x0.to_vec();
    let mut moved = Vec::new();
    for (i, x) in x0.iter().enumerate() {
        let (dist, centroid) = nearest_mean(x, q, cfg.neighbors);
        if dist > cfg.gamma {
            out[i] = x * (1.0 - sigmas[i]) + centroid * sigmas[i];
            moved.push(i);
        }
    }
    Ok((out, moved))
}

/// Draws one `sigma ~ U[sigma_min, sigma_max]` per atom and applies guidance.
pub fn apply_shape_guidance(
    x0: &[Vec3],
    q: &[Vec3],
    cfg: &GuidanceConfig,
    noise: &mut Noise,
) -> Result<(Vec<Vec3>, Vec<usize>)> {
    let sigmas: Vec<f64> = x0
        .iter()
        .map(|_| noise.uniform_range(cfg.sigma_min, cfg.sigma_max))
        .collect();
    apply_shape_guidance_with(x0, q, cfg, &sigmas)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// One backward step from `t` to `t - 1` using the predicted clean state.
/// At `t = 1` returns the posterior mean and the most likely class.
pub fn denoise_step(
    state: &DiffusionState,
    pred: &Prediction,
    s: &Schedule,
    variance: PosteriorVariance,
    noise: &mut Noise,
) -> Result<DiffusionState> {
    let t = state.t;
    let c = posterior_coefficients(t, s)?;
    let var = variance.value(t, s)?;
    let last = t == 1;
    let x = state
        .x
        .iter()
        .zip(&pred.x0)
        .map(|(xt, x0)| {
            let mean = x0 * c.c0 + xt * c.ct;
            if last {
                mean
            } else {
                mean + noise.normal3() * var.sqrt()
            }
        })
        .collect();
    let mut v = Matrix::zeros(state.v.raw_dim());
    for i in 0..state.v.nrows() {
        let probs = categorical_posterior(
            &state.v.row(i).to_vec(),
            &pred.v0.row(i).to_vec(),
            s.alpha_v(t),
            s.alpha_bar_v(t - 1),
        )?;
        let k = if last {
            argmax(&probs)
        } else {
            noise.categorical(&probs)
        };
        v[[i, k]] = 1.0;
    }
    Ok(DiffusionState { x, v, t: t - 1 })
}

/// Guidance activity at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub adjusted: Vec<usize>,
    /// Mean n-NN distance of every predicted atom before adjustment
    /// (empty when guidance is off at this step).
    pub distances: Vec<f64>,
    /// Displacement of every predicted atom by guidance (empty when off).
    pub shifts: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub molecule: Molecule,
    pub trace: Vec<StepTrace>,
}

/// Trained components needed for generation.
pub struct Sampler<'a> {
    pub autoencoder: &'a Autoencoder,
    pub predictor: &'a Predictor,
    pub schedule: &'a Schedule,
    pub atom_counts: &'a AtomCountHistogram,
    pub variance: PosteriorVariance,
}

impl Sampler<'_> {
    /// Generates one molecule shaped like `condition`, expressed in the
    /// condition's frame. `n_atoms` overrides the atom-count distribution.
    pub fn generate(
        &self,
        condition: &Molecule,
        guidance: Option<&GuidanceConfig>,
        n_atoms: Option<usize>,
        noise: &Noise,
    ) -> Result<Generated> {
        let t_max = self.schedule.steps();
        if let Some(g) = guidance {
            g.validate(t_max)?;
        }
        let mut shape_noise = noise.child(&[1]);
        let mut count_noise = noise.child(&[2]);
        let mut guide_noise = noise.child(&[3]);
        let mut sigma_noise = noise.child(&[4]);
        let mut chain = noise.child(&[5]);

        let cloud = build_surface_point_cloud_with(condition, self.autoencoder.config.n_points, &mut shape_noise)?;
        let shape = self.autoencoder.encode(&cloud)?;
        let n = match n_atoms {
            Some(n) => n,
            None => self.atom_counts.sample(&mut count_noise)?,
        };
        let centered: Vec<Vec3> = condition.atoms().iter().map(|a| a.position - cloud.offset).collect();
        let q = match guidance {
            Some(cfg) => build_guidance_points(&centered, cfg, &mut guide_noise)?,
            None => Vec::new(),
        };

        let mut state = sample_prior(n, self.predictor.config.classes, t_max, &mut chain)?;
        let mut trace = Vec::with_capacity(t_max);
        while state.t >= 1 {
            let t = state.t;
            let mut pred = self.predictor.predict(&state.x, &state.v, &shape.vn, t)?;
            let mut step = StepTrace {
                t,
                adjusted: Vec::new(),
                distances: Vec::new(),
                shifts: Vec::new(),
            };
            if let Some(cfg) = guidance {
                // Draw every step so sigma values line up across stop steps.
                let sigmas: Vec<f64> = (0..n)
                    .map(|_| sigma_noise.uniform_range(cfg.sigma_min, cfg.sigma_max))
                    .collect();
                if t >= cfg.stop_step {
                    step.distances = pred.x0.iter().map(|x| nearest_mean(x, &q, cfg.neighbors).0).collect();
                    let (adj, moved) = apply_shape_guidance_with(&pred.x0, &q, cfg, &sigmas)?;
                    step.shifts = adj.iter().zip(&pred.x0).map(|(a, b)| (a - b).norm()).collect();
                    step.adjusted = moved;
                    pred.x0 = adj;
                }
            }
            state = denoise_step(&state, &pred, self.schedule, self.variance, &mut chain)?;
            if state.x.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
                return Err(Error::NonFinite(format!("sampling step {t}")));
            }
            trace.push(step);
            if state.t == 0 {
                break;
            }
        }
        let atoms = state
            .x
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let k = argmax(&state.v.row(i).to_vec());
                Ok(Atom::new(x + cloud.offset, AtomClass::from_index(k)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Generated {
            molecule: Molecule::new(atoms)?,
            trace,
        })
    }
}
