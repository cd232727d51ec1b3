//! Oracle suite: independent recomputations of the posteriors and marginals,
//! rotation equivariance of every network and finite-difference gradients.

use std::time::Instant;

use crate::autodiff::{Graph, Matrix};
use crate::error::Result;
use crate::forward_process::{
    categorical_posterior, noise_positions, posterior_positions, step_positions, transition_matrix,
};
use crate::geometry::{random_rotation, AtomClass, Element, Molecule, PointCloud, Vec3, NUM_CLASSES};
use crate::nn::ParamSet;
use crate::predictor::{Predictor, PredictorConfig};
use crate::rng::Noise;
use crate::schedule::{cosine_beta_schedule, sigmoid_beta_schedule, Schedule, ScheduleConfig};
use crate::shape_autoencoder::{Autoencoder, AutoencoderConfig, ShapeEmbedding, ShapeExample};
use crate::training::{batch_loss, draw_noised, parameter_gradients, TrainConfig, TrainingSample};
use crate::vn_layers::{points_to_vn, rotate_vn, VnInvariant, VnLeakyRelu, VnLinear, DEFAULT_SLOPE};

/// Outcome of one oracle check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Self {
        let start = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        Self {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// `alpha I + (1 - alpha) / K` built from scratch.
fn uniform_mixing(alpha: f64, k: usize) -> Matrix {
    Matrix::from_shape_fn(
        (k, k),
        |(i, j)| if i == j { alpha } else { 0.0 } + (1.0 - alpha) / k as f64,
    )
}

/// Largest deviation between the closed-form categorical posterior and
/// Bayes' rule over the one-step kernel and the composed `t - 1` step
/// kernel, over all `(v_0, v_t)` class pairs.
pub fn categorical_posterior_deviation(s: &Schedule, steps: &[usize]) -> Result<f64> {
    let k = NUM_CLASSES;
    let mut worst = 0.0f64;
    for &t in steps {
        s.check_step(t)?;
        let mut composed = Matrix::eye(k);
        for tau in 1..t {
            composed = composed.dot(&uniform_mixing(s.alpha_v(tau), k));
        }
        let step = uniform_mixing(s.alpha_v(t), k);
        for a in 0..k {
            for b in 0..k {
                // p(v_{t-1} = c | v_t = b, v_0 = a) ∝ step[c, b] * composed[a, c]
                let joint: Vec<f64> = (0..k).map(|c| step[[c, b]] * composed[[a, c]]).collect();
                let z: f64 = joint.iter().sum();
                let mut v0 = vec![0.0; k];
                v0[a] = 1.0;
                let mut vt = vec![0.0; k];
                vt[b] = 1.0;
                let got = categorical_posterior(&vt, &v0, s.alpha_v(t), s.alpha_bar_v(t - 1))?;
                for c in 0..k {
                    worst = worst.max((got[c] - joint[c] / z).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Importance-weighted Monte-Carlo estimate of `E[x_{t-1} | x_t, x_0]` per
/// coordinate: proposals from `q(x_{t-1} | x_0)`, weights `q(x_t | x_{t-1})`.
/// Returns the largest `|estimate - closed form| / standard error`.
pub fn gaussian_posterior_zscore(s: &Schedule, t: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut noise = Noise::derived(seed, &[0x6A05, t as u64]);
    let x0 = vec![Vec3::new(1.2, -0.7, 0.3)];
    let (xt, _) = noise_positions(&x0, t, s, &mut noise)?;
    let mean = posterior_positions(&xt, &x0, t, s)?.mean[0];
    let (ab_prev, alpha, beta) = (s.alpha_bar_x(t - 1), s.alpha_x(t), s.beta_x(t));
    let mut worst = 0.0f64;
    for d in 0..3 {
        let z: Vec<f64> = (0..samples)
            .map(|_| ab_prev.sqrt() * x0[0][d] + (1.0 - ab_prev).sqrt() * noise.standard_normal())
            .collect();
        let logw: Vec<f64> = z
            .iter()
            .map(|zi| -(xt[0][d] - alpha.sqrt() * zi).powi(2) / (2.0 * beta))
            .collect();
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let sw: f64 = w.iter().sum();
        let est = w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>() / sw;
        let se = (w.iter().zip(&z).map(|(wi, zi)| (wi * (zi - est)).powi(2)).sum::<f64>()).sqrt() / sw;
        worst = worst.max((est - mean[d]).abs() / se);
    }
    Ok(worst)
}

/// Largest deviation between the product of one-step categorical kernels and
/// the closed-form marginal, over `t = 1..=T`.
pub fn categorical_marginal_deviation(s: &Schedule) -> f64 {
    let k = NUM_CLASSES;
    let mut composed = Matrix::eye(k);
    let mut worst = 0.0f64;
    for t in 1..=s.steps() {
        composed = composed.dot(&transition_matrix(s.alpha_v(t), k));
        let closed = uniform_mixing(s.alpha_bar_v(t), k);
        worst = worst.max((&composed - &closed).iter().fold(0.0f64, |a, x| a.max(x.abs())));
    }
    worst
}

/// Runs `chains` step-by-step position chains to each of `steps` and returns
/// the largest z-score of the empirical mean and variance against the
/// closed-form marginal.
pub fn gaussian_marginal_zscore(s: &Schedule, steps: &[usize], chains: usize, seed: u64) -> Result<f64> {
    let x0 = Vec3::new(0.8, -1.5, 0.4);
    let mut noise = Noise::derived(seed, &[0x3A26]);
    let mut x = vec![x0; chains];
    let mut worst = 0.0f64;
    let last = steps.iter().copied().max().unwrap_or(0);
    for t in 1..=last {
        x = step_positions(&x, t, s, &mut noise)?;
        if !steps.contains(&t) {
            continue;
        }
        let ab = s.alpha_bar_x(t);
        let n = chains as f64;
        for d in 0..3 {
            let mean = x.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = x.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let z_mean = (mean - ab.sqrt() * x0[d]).abs() / ((1.0 - ab) / n).sqrt();
            let z_var = (var - (1.0 - ab)).abs() / ((1.0 - ab) * (2.0 / (n - 1.0)).sqrt());
            worst = worst.max(z_mean).max(z_var);
        }
    }
    Ok(worst)
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

fn positions_rel_err(a: &[Vec3], b: &[Vec3]) -> f64 {
    rel_err(&points_to_vn(a), &points_to_vn(b))
}

/// Small molecule used by the equivariance and gradient checks.
pub fn probe_molecule() -> Molecule {
    use crate::geometry::Atom;
    let c = AtomClass::new(Element::C, false).unwrap();
    let n = AtomClass::new(Element::N, false).unwrap();
    let o = AtomClass::new(Element::O, false).unwrap();
    Molecule::new(vec![
        Atom::new(Vec3::new(0.0, 0.0, 0.0), c),
        Atom::new(Vec3::new(1.52, 0.05, 0.0), c),
        Atom::new(Vec3::new(2.05, 1.45, 0.1), n),
        Atom::new(Vec3::new(-0.6, -1.3, 0.4), o),
        Atom::new(Vec3::new(3.4, 1.6, -0.5), c),
    ])
    .unwrap()
}

/// Maximum relative equivariance errors of each network component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivarianceReport {
    pub vn_layers: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub predictor_layers: f64,
    pub predictor_positions: f64,
    pub predictor_features: f64,
}

impl EquivarianceReport {
    pub fn max(&self) -> f64 {
        [
            self.vn_layers,
            self.encoder,
            self.decoder,
            self.predictor_layers,
            self.predictor_positions,
            self.predictor_features,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Checks every network against `rotations` random rotations.
pub fn equivariance_report(
    ae_config: &AutoencoderConfig,
    pred_config: &PredictorConfig,
    rotations: usize,
    seed: u64,
) -> Result<EquivarianceReport> {
    let mut rep = EquivarianceReport::default();
    let mut noise = Noise::derived(seed, &[0xE0]);

    let mut ps = ParamSet::new();
    let lin = VnLinear::new(&mut ps, "lin", 6, 5, &mut noise);
    let act = VnLeakyRelu::new(&mut ps, "act", 5, 4, DEFAULT_SLOPE, &mut noise);
    let inv = VnInvariant::new(&mut ps, "inv", 4, 8, &mut noise);
    let vn_input = Matrix::from_shape_fn((3 * 7, 6), |_| noise.standard_normal());
    let vn_outputs = |x: &Matrix| {
        let mut g = Graph::with_params(&ps, false);
        let xv = g.constant(x.clone());
        let a = lin.forward(&mut g, xv);
        let b = act.forward(&mut g, a);
        let c = inv.forward(&mut g, b);
        (g.value(a).clone(), g.value(b).clone(), g.value(c).clone())
    };
    let base_vn = vn_outputs(&vn_input);

    let ae = Autoencoder::new(ae_config.clone(), seed)?;
    let mol = probe_molecule();
    let ex = ShapeExample::from_molecule(&mol, ae_config.n_points, ae_config.n_queries.min(32), &mut noise)?;
    let h = ae.encode(&ex.cloud)?;
    let queries = ex.queries.clone();
    let sdf = Matrix::from_shape_vec((queries.len(), 1), ae.decode_many(&queries, &h)).unwrap();

    let pred = Predictor::new(pred_config.clone(), seed)?;
    let n_atoms = 12;
    let x: Vec<Vec3> = (0..n_atoms).map(|_| noise.normal3() * 1.5).collect();
    let mut v = Matrix::zeros((n_atoms, pred_config.classes));
    for i in 0..n_atoms {
        v[[i, noise.index(pred_config.classes)]] = 1.0;
    }
    let shape = Matrix::from_shape_fn((3, pred_config.shape_dim), |_| noise.standard_normal());
    let t = 37;
    let layers = pred.layer_outputs(&x, &v, &shape, t)?;
    let out = pred.predict(&x, &v, &shape, t)?;

    for r_seed in 0..rotations as u64 {
        let r = random_rotation(derive(seed, r_seed));
        let m = r.matrix();

        let rot = vn_outputs(&rotate_vn(&vn_input, m));
        rep.vn_layers = rep
            .vn_layers
            .max(rel_err(&rot.0, &rotate_vn(&base_vn.0, m)))
            .max(rel_err(&rot.1, &rotate_vn(&base_vn.1, m)))
            .max(rel_err(&rot.2, &base_vn.2));

        let cloud = PointCloud {
            points: ex.cloud.points.iter().map(|p| m * p).collect(),
            centered: true,
            offset: m * ex.cloud.offset,
        };
        let hr = ae.encode(&cloud)?;
        rep.encoder = rep.encoder.max(rel_err(&hr.vn, &h.rotated(m).vn));

        let rq: Vec<Vec3> = queries.iter().map(|q| m * q).collect();
        let rh = ShapeEmbedding { vn: h.rotated(m).vn };
        let sdf_r = Matrix::from_shape_vec((rq.len(), 1), ae.decode_many(&rq, &rh)).unwrap();
        rep.decoder = rep.decoder.max(rel_err(&sdf_r, &sdf));

        let rx: Vec<Vec3> = x.iter().map(|p| m * p).collect();
        let rshape = rotate_vn(&shape, m);
        let rl = pred.layer_outputs(&rx, &v, &rshape, t)?;
        for ((h0, x0), (h1, x1)) in layers.iter().zip(&rl) {
            let rx0: Vec<Vec3> = x0.iter().map(|p| m * p).collect();
            rep.predictor_layers = rep
                .predictor_layers
                .max(rel_err(h1, h0))
                .max(positions_rel_err(x1, &rx0));
        }
        let ro = pred.predict(&rx, &v, &rshape, t)?;
        let rx0: Vec<Vec3> = out.x0.iter().map(|p| m * p).collect();
        rep.predictor_positions = rep.predictor_positions.max(positions_rel_err(&ro.x0, &rx0));
        rep.predictor_features = rep.predictor_features.max(rel_err(&ro.v0, &out.v0));
    }
    Ok(rep)
}

fn derive(seed: u64, k: u64) -> u64 {
    crate::rng::derive_seed(seed, &[0x207A, k])
}

/// Finite-difference comparison over every scalar of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Gradient norm, relative to the summed magnitude `M` of the loss's terms,
/// below which a tensor is compared absolutely: central differences carry
/// roundoff of order `eps * M / h`, and `M` exceeds the loss itself when terms
/// cancel (entropy minus cross-entropy in the KL).
pub const GRAD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)` in the Euclidean norm. Applied per
/// parameter tensor, so roundoff in components far below the tensor's scale
/// does not dominate.
pub fn gradient_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

fn finite_difference<M>(
    model: &mut M,
    params: fn(&mut M) -> &mut ParamSet,
    loss: impl Fn(&M) -> Result<f64>,
    analytic: &[Matrix],
    magnitude: f64,
) -> Result<GradientReport> {
    let names = params(model).names().to_vec();
    let floor = GRAD_FLOOR * magnitude.max(1.0);
    let mut rep = GradientReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (p, name) in names.iter().enumerate() {
        let len = params(model).values()[p].len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params(model).values()[p].as_slice().unwrap()[i];
            params(model).values_mut()[p].as_slice_mut().unwrap()[i] = orig + FD_STEP;
            let up = loss(model)?;
            params(model).values_mut()[p].as_slice_mut().unwrap()[i] = orig - FD_STEP;
            let down = loss(model)?;
            params(model).values_mut()[p].as_slice_mut().unwrap()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let a = analytic[p].as_slice().unwrap();
        let err = gradient_rel_err(a, &numeric, floor);
        if err > rep.max_rel {
            let (i, _) = a
                .iter()
                .zip(&numeric)
                .map(|(x, y)| (x - y).abs())
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            rep.max_rel = err;
            rep.worst = format!(
                "{name} (largest gap at [{i}]: analytic {:.6e}, numeric {:.6e})",
                a[i], numeric[i]
            );
        }
        rep.checked += len;
    }
    Ok(rep)
}

/// Gradient check of the shape autoencoder on a one-molecule batch.
pub fn autoencoder_gradients(config: &AutoencoderConfig, seed: u64) -> Result<GradientReport> {
    let mut ae = Autoencoder::new(config.clone(), seed)?;
    let ex = ShapeExample::from_molecule(
        &probe_molecule(),
        config.n_points,
        config.n_queries,
        &mut Noise::new(seed),
    )?;
    let batch = vec![ex];
    let (loss, grads) = ae.loss_and_grads(&batch)?;
    finite_difference(&mut ae, |m| &mut m.params, |m| m.loss(&batch), &grads, loss)
}

/// Gradient check of the denoiser loss on a one-sample batch.
pub fn predictor_gradients(config: &PredictorConfig, t: usize, seed: u64) -> Result<GradientReport> {
    let mut pred = Predictor::new(config.clone(), seed)?;
    let s = Schedule::with_steps(1000)?;
    let mol = probe_molecule();
    let mut noise = Noise::new(seed);
    let mut v0 = Matrix::zeros((mol.len(), config.classes));
    for (i, a) in mol.atoms().iter().enumerate() {
        v0[[i, a.class.index()]] = 1.0;
    }
    let c = mol.centroid();
    let sample = TrainingSample {
        x0: mol.positions().iter().map(|p| p - c).collect(),
        v0,
        shape: Matrix::from_shape_fn((3, config.shape_dim), |_| noise.standard_normal()),
    };
    let mut ns = draw_noised(&sample, &s, &mut noise)?;
    ns.t = t;
    ns.xt = noise_positions(&sample.x0, t, &s, &mut noise)?.0;
    ns.vt = crate::forward_process::noise_features(&sample.v0, t, &s, &mut noise)?;
    let batch = vec![ns];
    let cfg = TrainConfig::default();
    let (loss, grads) = parameter_gradients(&pred, &batch, &s, &cfg)?;
    // |cross-entropy| = |entropy| + KL
    let ns = &batch[0];
    let mut entropy = 0.0;
    for i in 0..ns.vt.nrows() {
        let c = categorical_posterior(
            &ns.vt.row(i).to_vec(),
            &ns.sample.v0.row(i).to_vec(),
            s.alpha_v(t),
            s.alpha_bar_v(t - 1),
        )?;
        entropy += c.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    let magnitude = loss + 2.0 * cfg.xi * entropy.abs();
    finite_difference(
        &mut pred,
        |m| &mut m.params,
        |m| batch_loss(m, &batch, &s, &cfg),
        &grads,
        magnitude,
    )
}

/// Reduced widths used for the exhaustive gradient checks.
pub fn gradient_check_configs() -> (AutoencoderConfig, PredictorConfig) {
    (
        AutoencoderConfig {
            hidden: 8,
            latent: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            k: 6,
            n_points: 24,
            n_queries: 16,
            ..AutoencoderConfig::default()
        },
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
    )
}

/// Schedule reference values and monotonicity.
pub fn schedule_checks() -> Result<Vec<(String, bool)>> {
    let cfg = ScheduleConfig::default();
    let bx = sigmoid_beta_schedule(cfg.steps, cfg.sigmoid_w1, cfg.sigmoid_w2, cfg.sigmoid_w3)?;
    let (_, abv) = cosine_beta_schedule(cfg.steps, cfg.cosine_s)?;
    let s = Schedule::new(&cfg)?;
    let mono = |f: &dyn Fn(usize) -> f64| (1..=cfg.steps).all(|t| f(t) <= f(t - 1));
    Ok(vec![
        (
            format!("sigmoid beta at T/2 = {:.8}", bx[cfg.steps / 2 - 1]),
            (bx[cfg.steps / 2 - 1] - 0.00500005).abs() < 1e-12,
        ),
        (format!("cosine abar_0 = {}", abv[0]), abv[0] == 1.0),
        (
            format!("cosine abar_T = {:.3e}", abv[cfg.steps]),
            abv[cfg.steps].abs() < 1e-12,
        ),
        ("abar_x nonincreasing".into(), mono(&|t| s.alpha_bar_x(t))),
        ("abar_v nonincreasing".into(), mono(&|t| s.alpha_bar_v(t))),
        (
            format!("max beta_x = {:.5}", bx.iter().copied().fold(0.0, f64::max)),
            bx.iter().all(|&b| b < 0.1),
        ),
    ])
}

/// Runs every oracle with the acceptance tolerances.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let schedule = Schedule::with_steps(1000);
    let s = match schedule {
        Ok(s) => s,
        Err(e) => {
            out.push(Check::timed("schedule", || Ok((false, e.to_string()))));
            return out;
        }
    };
    out.push(Check::timed("categorical posterior vs Bayes", || {
        let d = categorical_posterior_deviation(&s, &[1, 2, 500, 1000])?;
        Ok((d < 1e-12, format!("max deviation {d:.3e}")))
    }));
    out.push(Check::timed("gaussian posterior vs importance sampling", || {
        let mut worst = 0.0f64;
        for t in [2, 10, 500] {
            worst = worst.max(gaussian_posterior_zscore(&s, t, 100_000, seed)?);
        }
        Ok((worst < 4.0, format!("max z-score {worst:.2}")))
    }));
    out.push(Check::timed("forward marginals", || {
        let cat = categorical_marginal_deviation(&s);
        let z = gaussian_marginal_zscore(&s, &[10, 100, 1000], 20_000, seed)?;
        Ok((
            cat < 1e-12 && z < 4.0,
            format!("categorical max deviation {cat:.3e}, gaussian max z-score {z:.2}"),
        ))
    }));
    out.push(Check::timed("rotation equivariance", || {
        let rep = equivariance_report(&AutoencoderConfig::default(), &PredictorConfig::default(), 100, seed)?;
        Ok((rep.max() < 1e-6, format!("{rep:?}")))
    }));
    out.push(Check::timed("finite-difference gradients", || {
        let (ae_cfg, pred_cfg) = gradient_check_configs();
        let mut reports = vec![autoencoder_gradients(&ae_cfg, seed)?];
        for t in [1, 500, 1000] {
            reports.push(predictor_gradients(&pred_cfg, t, seed)?);
        }
        let checked: usize = reports.iter().map(|r| r.checked).sum();
        let worst = reports.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
        Ok((
            worst.max_rel < 1e-4,
            format!(
                "{checked} scalars, max rel err {:.3e} at {}",
                worst.max_rel, worst.worst
            ),
        ))
    }));
    out.push(Check::timed("schedules", || {
        let checks = schedule_checks()?;
        let ok = checks.iter().all(|c| c.1);
        let detail = checks
            .iter()
            .map(|(n, p)| format!("{n}: {}", if *p { "ok" } else { "FAIL" }))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((ok, detail))
    }));
    out
}
