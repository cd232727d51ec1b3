//! Diffusion training: SNR-weighted position loss, categorical KL loss and the
//! optimization loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{invalid, Error, Result};
use crate::forward_process::{categorical_posterior, mix_uniform, noise_features, noise_positions};
use crate::geometry::{build_surface_point_cloud_with, Molecule, Vec3, NUM_CLASSES};
use crate::nn::{Adam, PlateauSchedule};
use crate::predictor::{positions_matrix, Predictor};
use crate::rng::Noise;
use crate::schedule::Schedule;
use crate::shape_autoencoder::{split_indices, Autoencoder};

pub const KL_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `min(abar / (1 - abar), delta)`.
    Snr,
    /// Constant weight 1.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub delta: f64,
    pub xi: f64,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub eval_every: usize,
    pub val_fraction: f64,
    /// Noise draws per validation molecule.
    pub val_draws: usize,
    pub weighting: Weighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            delta: 10.0,
            xi: 100.0,
            lr_factor: 0.6,
            min_lr: 1e-5,
            patience: 10,
            eval_every: 50,
            val_fraction: 0.2,
            val_draws: 4,
            weighting: Weighting::Snr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.xi >= 0.0) || !(self.lr >= 0.0) {
            return Err(invalid("need delta > 0, xi >= 0 and lr >= 0"));
        }
        if self.batch_size == 0 || self.val_draws == 0 {
            return Err(invalid("batch_size and val_draws must be positive"));
        }
        Ok(())
    }

    pub fn weight(&self, t: usize, s: &Schedule) -> f64 {
        match self.weighting {
            Weighting::Snr => snr_weight(t, s, self.delta),
            Weighting::Uniform => 1.0,
        }
    }
}

/// `min(abar_t / (1 - abar_t), delta)`.
pub fn snr_weight(t: usize, s: &Schedule, delta: f64) -> f64 {
    snr_weight_from_alpha_bar(s.alpha_bar_x(t), delta)
}

pub fn snr_weight_from_alpha_bar(ab: f64, delta: f64) -> f64 {
    if ab >= 1.0 {
        return delta;
    }
    (ab / (1.0 - ab)).min(delta)
}

/// `w * sum_a |x0_hat_a - x0_a|^2`.
pub fn position_loss(x0_hat: &[Vec3], x0: &[Vec3], weight: f64) -> Result<f64> {
    if x0_hat.len() != x0.len() {
        return Err(Error::ShapeMismatch("position counts differ".into()));
    }
    Ok(weight * x0_hat.iter().zip(x0).map(|(a, b)| (a - b).norm_squared()).sum::<f64>())
}

/// `KL(c || c_theta)` with `c_theta` clamped at `1e-30` inside the log.
pub fn kl_divergence(c: &[f64], c_theta: &[f64]) -> f64 {
    c.iter()
        .zip(c_theta)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(KL_FLOOR).ln()))
        .sum()
}

/// Sum over atoms of `KL(c(v_t, v_0) || c(v_t, v0_hat))`.
pub fn feature_kl_loss(v0_hat: &Matrix, v0: &Matrix, vt: &Matrix, t: usize, s: &Schedule) -> Result<f64> {
    s.check_step(t)?;
    if v0_hat.dim() != v0.dim() || vt.dim() != v0.dim() {
        return Err(Error::ShapeMismatch("feature matrices differ in shape".into()));
    }
    let (alpha, ab_prev) = (s.alpha_v(t), s.alpha_bar_v(t - 1));
    let mut total = 0.0;
    for i in 0..v0.nrows() {
        let vt_i = vt.row(i).to_vec();
        let c = categorical_posterior(&vt_i, &v0.row(i).to_vec(), alpha, ab_prev)?;
        let ct = categorical_posterior(&vt_i, &v0_hat.row(i).to_vec(), alpha, ab_prev)?;
        total += kl_divergence(&c, &ct);
    }
    Ok(total)
}

/// One training molecule: positions centered on its surface-cloud center,
/// one-hot features and the frozen shape embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub x0: Vec<Vec3>,
    pub v0: Matrix,
    pub shape: Matrix,
}

impl TrainingSample {
    pub fn n_atoms(&self) -> usize {
        self.x0.len()
    }
}

/// Encodes every molecule once with the frozen autoencoder.
pub fn prepare_samples(mols: &[Molecule], ae: &Autoencoder, seed: u64) -> Result<Vec<TrainingSample>> {
    mols.iter()
        .enumerate()
        .map(|(i, m)| {
            let mut noise = Noise::derived(seed, &[0xC10D, i as u64]);
            let cloud = build_surface_point_cloud_with(m, ae.config.n_points, &mut noise)?;
            let shape = ae.encode(&cloud)?.vn;
            let mut v0 = Matrix::zeros((m.len(), NUM_CLASSES));
            for (a, atom) in m.atoms().iter().enumerate() {
                v0[[a, atom.class.index()]] = 1.0;
            }
            Ok(TrainingSample {
                x0: m.atoms().iter().map(|a| a.position - cloud.offset).collect(),
                v0,
                shape,
            })
        })
        .collect()
}

/// A sample with its drawn step and noisy state; the loss is a deterministic
/// function of the parameters given this.
#[derive(Clone, Debug)]
pub struct NoisedSample<'a> {
    pub sample: &'a TrainingSample,
    pub t: usize,
    pub xt: Vec<Vec3>,
    pub vt: Matrix,
}

pub fn draw_noised<'a>(sample: &'a TrainingSample, s: &Schedule, noise: &mut Noise) -> Result<NoisedSample<'a>> {
    let t = 1 + noise.index(s.steps());
    let (xt, _) = noise_positions(&sample.x0, t, s, noise)?;
    let vt = noise_features(&sample.v0, t, s, noise)?;
    Ok(NoisedSample { sample, t, xt, vt })
}

/// Position and feature loss terms of one sample as `1 x 1` nodes.
pub fn sample_loss_terms(
    pred: &Predictor,
    g: &mut Graph,
    ns: &NoisedSample,
    s: &Schedule,
    cfg: &TrainConfig,
) -> Result<(Var, Var)> {
    let x = g.constant(positions_matrix(&ns.xt));
    let shape = g.constant(ns.sample.shape.clone());
    let (x0_hat, v0_hat) = pred.forward(g, x, &ns.vt, shape, ns.t)?;

    let x0 = g.constant(positions_matrix(&ns.sample.x0));
    let diff = g.sub(x0_hat, x0);
    let sq = g.square(diff);
    let sq = g.sum_all(sq);
    let lx = g.scale(sq, cfg.weight(ns.t, s));

    let (alpha, ab_prev) = (s.alpha_v(ns.t), s.alpha_bar_v(ns.t - 1));
    let k = pred.config.classes as f64;
    let n = ns.xt.len();
    let mut c = Matrix::zeros(ns.vt.raw_dim());
    let mut a = Matrix::zeros(ns.vt.raw_dim());
    let mut entropy = 0.0;
    for i in 0..n {
        let vt_i = ns.vt.row(i).to_vec();
        let ci = categorical_posterior(&vt_i, &ns.sample.v0.row(i).to_vec(), alpha, ab_prev)?;
        entropy += ci.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        c.row_mut(i).assign(&ndarray::Array1::from(ci));
        a.row_mut(i).assign(&ndarray::Array1::from(mix_uniform(&vt_i, alpha)));
    }
    let a = g.constant(a);
    let prior = g.scale(v0_hat, ab_prev);
    let prior = g.add_scalar(prior, (1.0 - ab_prev) / k);
    let unnorm = g.mul(a, prior);
    let z = g.sum_cols(unnorm);
    let zinv = g.recip(z);
    let c_theta = g.mul_col(unnorm, zinv);
    let log_ct = g.ln_clamped(c_theta, KL_FLOOR);
    let c = g.constant(c);
    let cross = g.mul(c, log_ct);
    let cross = g.sum_all(cross);
    let lv = g.scale(cross, -1.0);
    let lv = g.add_scalar(lv, entropy);
    Ok((lx, lv))
}

/// `sum over samples of (L^x + xi * L^v)`.
pub fn batch_loss_var(
    pred: &Predictor,
    g: &mut Graph,
    batch: &[NoisedSample],
    s: &Schedule,
    cfg: &TrainConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for ns in batch {
        let (lx, lv) = sample_loss_terms(pred, g, ns, s, cfg)?;
        let lv = g.scale(lv, cfg.xi);
        terms.push(g.add(lx, lv));
    }
    let all = g.concat_rows(&terms);
    Ok(g.sum_all(all))
}

/// Summed batch loss and its parameter gradients.
pub fn parameter_gradients(
    pred: &Predictor,
    batch: &[NoisedSample],
    s: &Schedule,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let mut g = Graph::with_params(&pred.params, true);
    let loss = batch_loss_var(pred, &mut g, batch, s, cfg)?;
    let grads = g.backward(loss).for_params(&pred.params);
    for (name, gr) in pred.params.names().iter().zip(&grads) {
        if gr.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((g.scalar(loss), grads))
}

pub fn batch_loss(pred: &Predictor, batch: &[NoisedSample], s: &Schedule, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::with_params(&pred.params, false);
    let loss = batch_loss_var(pred, &mut g, batch, s, cfg)?;
    Ok(g.scalar(loss))
}

/// Empirical distribution of atom counts, `(count, frequency)` sorted by count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomCountHistogram {
    pub counts: Vec<(usize, usize)>,
}

impl AtomCountHistogram {
    pub fn from_counts(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut map = std::collections::BTreeMap::new();
        for s in sizes {
            *map.entry(s).or_insert(0usize) += 1;
        }
        Self {
            counts: map.into_iter().collect(),
        }
    }

    pub fn sample(&self, noise: &mut Noise) -> Result<usize> {
        if self.counts.is_empty() {
            return Err(invalid("empty atom-count histogram"));
        }
        let w: Vec<f64> = self.counts.iter().map(|c| c.1 as f64).collect();
        Ok(self.counts[noise.categorical(&w)].0)
    }
}

/// Optimizer state that, together with the parameters, fully determines the
/// rest of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub step: usize,
    pub adam: Adam,
    pub plateau: PlateauSchedule,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub struct DiffusionTrainer<'a> {
    pub predictor: Predictor,
    pub state: TrainerState,
    pub config: TrainConfig,
    pub schedule: &'a Schedule,
    pub seed: u64,
    train: Vec<&'a TrainingSample>,
    val: Vec<&'a TrainingSample>,
}

impl<'a> DiffusionTrainer<'a> {
    pub fn new(
        predictor: Predictor,
        samples: &'a [TrainingSample],
        schedule: &'a Schedule,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(invalid("empty dataset"));
        }
        let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, seed);
        let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };
        let state = TrainerState {
            step: 0,
            adam: Adam::new(&predictor.params, config.beta1, config.beta2, config.eps),
            plateau: PlateauSchedule::new(config.lr, config.lr_factor, config.min_lr, config.patience),
        };
        Ok(Self {
            predictor,
            state,
            config,
            schedule,
            seed,
            train: train_idx.iter().map(|&i| &samples[i]).collect(),
            val: val_idx.iter().map(|&i| &samples[i]).collect(),
        })
    }

    /// The stream used for the batch of step `step` (1-based).
    pub fn step_noise(&self, step: usize) -> Noise {
        Noise::derived(self.seed, &[0xBA7C, step as u64])
    }

    /// Mean validation loss over fixed noise draws.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for (i, sample) in self.val.iter().enumerate() {
            let mut noise = Noise::derived(self.seed, &[0x7A1D, i as u64]);
            let draws: Vec<NoisedSample> = (0..self.config.val_draws)
                .map(|_| draw_noised(sample, self.schedule, &mut noise))
                .collect::<Result<_>>()?;
            total += batch_loss(&self.predictor, &draws, self.schedule, &self.config)?;
            count += draws.len();
        }
        Ok(total / count as f64)
    }

    /// Runs one optimizer step and returns the batch-mean training loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step + 1;
        let mut noise = self.step_noise(step);
        let batch: Vec<NoisedSample> = (0..self.config.batch_size)
            .map(|_| {
                let sample = self.train[noise.index(self.train.len())];
                draw_noised(sample, self.schedule, &mut noise)
            })
            .collect::<Result<_>>()?;
        let (loss, mut grads) = parameter_gradients(&self.predictor, &batch, self.schedule, &self.config)?;
        let scale = 1.0 / batch.len() as f64;
        for gr in &mut grads {
            gr.mapv_inplace(|x| x * scale);
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        self.state
            .adam
            .update(&mut self.predictor.params, &grads, self.state.plateau.lr);
        self.state.step = step;
        Ok(loss)
    }

    /// Trains until `config.steps`, evaluating every `eval_every` steps (and
    /// at the start and end). Only the scheduled evaluations feed the plateau
    /// schedule, so a run split across a resume matches an uninterrupted one.
    pub fn run(&mut self, mut log: impl FnMut(LogRow)) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        if self.state.step == 0 {
            let v = self.validation_loss()?;
            let row = LogRow {
                step: 0,
                train_loss: f64::NAN,
                val_loss: v,
                lr: self.state.plateau.lr,
            };
            log(row);
            rows.push(row);
        }
        while self.state.step < self.config.steps {
            let loss = self.step()?;
            let step = self.state.step;
            let scheduled = step.is_multiple_of(self.config.eval_every.max(1));
            if scheduled || step == self.config.steps {
                let v = self.validation_loss()?;
                if scheduled {
                    self.state.plateau.observe(v);
                }
                let row = LogRow {
                    step,
                    train_loss: loss,
                    val_loss: v,
                    lr: self.state.plateau.lr,
                };
                log(row);
                rows.push(row);
            }
        }
        Ok(rows)
    }

    pub fn train_atom_counts(&self) -> AtomCountHistogram {
        AtomCountHistogram::from_counts(self.train.iter().map(|s| s.n_atoms()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;
    use proptest::prelude::*;

    fn small_predictor(seed: u64) -> Predictor {
        Predictor::new(
            PredictorConfig {
                hidden: 8,
                layers: 2,
                heads: 2,
                neighbors: 3,
                rbf_count: 4,
                time_dim: 4,
                vn_hidden: 3,
                shape_dim: 4,
                ..PredictorConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn sample(n: usize, seed: u64) -> TrainingSample {
        let mut noise = Noise::new(seed);
        let mut v0 = Matrix::zeros((n, NUM_CLASSES));
        for i in 0..n {
            v0[[i, noise.index(NUM_CLASSES)]] = 1.0;
        }
        TrainingSample {
            x0: (0..n).map(|_| noise.normal3()).collect(),
            v0,
            shape: Matrix::from_shape_fn((3, 4), |_| noise.standard_normal()),
        }
    }

    #[test]
    fn snr_weight_examples() {
        assert!((snr_weight_from_alpha_bar(0.5, 10.0) - 1.0).abs() < 1e-15);
        assert_eq!(snr_weight_from_alpha_bar(0.999, 10.0), 10.0);
        assert_eq!(snr_weight_from_alpha_bar(1.0, 10.0), 10.0);
        assert!(snr_weight_from_alpha_bar(1e-12, 10.0) < 1e-11);
    }

    #[test]
    fn snr_weight_shape_over_steps() {
        let s = Schedule::with_steps(1000).unwrap();
        let w: Vec<f64> = (1..=1000).map(|t| snr_weight(t, &s, 10.0)).collect();
        assert!(w.iter().all(|&x| x > 0.0));
        for t in 1..=1000 {
            let ab = s.alpha_bar_x(t);
            if ab / (1.0 - ab) >= 10.0 {
                assert_eq!(w[t - 1], 10.0);
            }
        }
        assert!(w.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn position_loss_examples() {
        let a = [Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(position_loss(&a, &[Vec3::zeros()], 1.0).unwrap(), 1.0);
        assert_eq!(position_loss(&a, &a, 3.0).unwrap(), 0.0);
        assert!(position_loss(&a, &[], 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert!((kl_divergence(&[0.75, 0.25], &[0.5, 0.5]) - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((kl_divergence(&[0.75, 0.25], &[0.5, 0.5]) - 0.13081).abs() < 1e-5);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(1e-6f64..1.0, 5), b in proptest::collection::vec(1e-6f64..1.0, 5)) {
            let za: f64 = a.iter().sum();
            let zb: f64 = b.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / za).collect();
            let q: Vec<f64> = b.iter().map(|x| x / zb).collect();
            prop_assert!(kl_divergence(&p, &q) >= -1e-15);
        }
    }

    #[test]
    fn graph_loss_matches_plain_functions() {
        let s = Schedule::with_steps(1000).unwrap();
        let p = small_predictor(1);
        let smp = sample(5, 2);
        let cfg = TrainConfig::default();
        for seed in 0..5 {
            let ns = draw_noised(&smp, &s, &mut Noise::new(seed)).unwrap();
            let pred = p.predict(&ns.xt, &ns.vt, &smp.shape, ns.t).unwrap();
            let lx = position_loss(&pred.x0, &smp.x0, snr_weight(ns.t, &s, 10.0)).unwrap();
            let lv = feature_kl_loss(&pred.v0, &smp.v0, &ns.vt, ns.t, &s).unwrap();
            let got = batch_loss(&p, std::slice::from_ref(&ns), &s, &cfg).unwrap();
            let want = lx + 100.0 * lv;
            assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn xi_zero_leaves_position_loss_and_arithmetic() {
        let s = Schedule::with_steps(1000).unwrap();
        let p = small_predictor(3);
        let smp = sample(4, 4);
        let ns = draw_noised(&smp, &s, &mut Noise::new(5)).unwrap();
        let cfg = TrainConfig {
            xi: 0.0,
            ..TrainConfig::default()
        };
        let pred = p.predict(&ns.xt, &ns.vt, &smp.shape, ns.t).unwrap();
        let lx = position_loss(&pred.x0, &smp.x0, snr_weight(ns.t, &s, 10.0)).unwrap();
        let got = batch_loss(&p, std::slice::from_ref(&ns), &s, &cfg).unwrap();
        assert!((got - lx).abs() < 1e-12 * lx.max(1.0));
        // L = L^x + xi L^v with L^x = 2, L^v = 0.01, xi = 100
        assert!((2.0 + 100.0 * 0.01 - 3.0f64).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_gives_zero_kl() {
        let s = Schedule::with_steps(1000).unwrap();
        let smp = sample(3, 6);
        let ns = draw_noised(&smp, &s, &mut Noise::new(7)).unwrap();
        assert!(feature_kl_loss(&smp.v0, &smp.v0, &ns.vt, ns.t, &s).unwrap().abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let s = Schedule::with_steps(1000).unwrap();
        let p = small_predictor(8);
        let smp = sample(4, 9);
        let ns = draw_noised(&smp, &s, &mut Noise::new(10)).unwrap();
        let cfg = TrainConfig::default();
        let (l1, g1) = parameter_gradients(&p, std::slice::from_ref(&ns), &s, &cfg).unwrap();
        let (l2, g2) = parameter_gradients(&p, &[ns.clone(), ns.clone()], &s, &cfg).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.iter().zip(b).all(|(x, y)| *y == 2.0 * x));
        }
    }

    #[test]
    fn perfect_positions_give_zero_position_gradients() {
        // Zero parameters predict x_t exactly, so using x_t as the target
        // makes the position term and its gradient vanish.
        let s = Schedule::with_steps(1000).unwrap();
        let mut p = small_predictor(11);
        p.params.fill(0.0);
        let smp = sample(3, 12);
        let mut ns = draw_noised(&smp, &s, &mut Noise::new(13)).unwrap();
        let target = TrainingSample {
            x0: ns.xt.clone(),
            ..smp.clone()
        };
        ns.sample = &target;
        let cfg = TrainConfig {
            xi: 0.0,
            ..TrainConfig::default()
        };
        let (loss, grads) = parameter_gradients(&p, std::slice::from_ref(&ns), &s, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn loss_draws_are_deterministic() {
        let s = Schedule::with_steps(1000).unwrap();
        let smp = sample(4, 14);
        let a = draw_noised(&smp, &s, &mut Noise::new(15)).unwrap();
        let b = draw_noised(&smp, &s, &mut Noise::new(15)).unwrap();
        assert_eq!((a.t, &a.xt, &a.vt), (b.t, &b.xt, &b.vt));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let s = Schedule::with_steps(1000).unwrap();
        let samples: Vec<TrainingSample> = (0..6).map(|i| sample(3 + i % 3, 20 + i as u64)).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let p = small_predictor(16);
        let mut tr = DiffusionTrainer::new(p.clone(), &samples, &s, cfg, 17).unwrap();
        tr.run(|_| {}).unwrap();
        assert_eq!(tr.predictor.params, p.params);
    }

    #[test]
    fn histogram_sampling() {
        let h = AtomCountHistogram::from_counts([3, 5, 5, 7]);
        assert_eq!(h.counts, vec![(3, 1), (5, 2), (7, 1)]);
        let mut noise = Noise::new(1);
        for _ in 0..20 {
            assert!([3, 5, 7].contains(&h.sample(&mut noise).unwrap()));
        }
        assert!(AtomCountHistogram::default().sample(&mut noise).is_err());
    }
}
