//! Shape autoencoder: an equivariant point-cloud encoder producing a `d_p x 3`
//! shape embedding and an invariant decoder that predicts signed distances of
//! query points.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{build_surface_point_cloud_with, sample_query_points_with, Molecule, PointCloud, Vec3};
use crate::nn::{Adam, Mlp, ParamSet};
use crate::rng::{derive_seed, Noise};
use crate::vn_layers::{rotate_vn, VnDgcnn, VnInvariant, DEFAULT_SLOPE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    /// Number of rows `d_p` of the shape embedding.
    pub latent: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub k: usize,
    pub n_points: usize,
    pub n_queries: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub val_fraction: f64,
    pub eval_every: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            latent: 32,
            encoder_layers: 4,
            decoder_layers: 4,
            k: 20,
            n_points: 128,
            n_queries: 256,
            batch_size: 4,
            steps: 200,
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            val_fraction: 0.2,
            eval_every: 20,
        }
    }
}

impl AutoencoderConfig {
    /// Full-size settings: 512 surface points, 1024 queries, batch 16.
    pub fn full_scale() -> Self {
        Self {
            n_points: 512,
            n_queries: 1024,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.encoder_layers == 0 || self.decoder_layers < 2 {
            return Err(invalid(
                "autoencoder dimensions must be positive (decoder needs 2+ layers)",
            ));
        }
        if self.n_points <= self.k || self.n_points < 8 {
            return Err(invalid("n_points must exceed k and be at least 8"));
        }
        if self.n_queries < 2 || !self.n_queries.is_multiple_of(2) {
            return Err(invalid("n_queries must be even"));
        }
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(invalid("batch_size must be positive and lr nonnegative"));
        }
        Ok(())
    }
}

/// Equivariant shape embedding; row `c` is a 3-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeEmbedding {
    /// VN layout: `3 x d_p`, column `c` holds row `c` of the embedding.
    pub vn: Matrix,
}

impl ShapeEmbedding {
    pub fn dim(&self) -> usize {
        self.vn.ncols()
    }

    pub fn rows(&self) -> Vec<Vec3> {
        (0..self.dim())
            .map(|c| Vec3::new(self.vn[[0, c]], self.vn[[1, c]], self.vn[[2, c]]))
            .collect()
    }

    pub fn rotated(&self, r: &Matrix3<f64>) -> Self {
        Self {
            vn: rotate_vn(&self.vn, r),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.vn.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// A centered surface cloud with query samples expressed in the same frame.
#[derive(Clone, Debug)]
pub struct ShapeExample {
    pub cloud: PointCloud,
    pub queries: Vec<Vec3>,
    pub targets: Vec<f64>,
}

impl ShapeExample {
    pub fn from_molecule(mol: &Molecule, n_points: usize, n_queries: usize, noise: &mut Noise) -> Result<Self> {
        let cloud = build_surface_point_cloud_with(mol, n_points, noise)?;
        let qs = sample_query_points_with(mol, n_queries, noise)?;
        Ok(Self {
            queries: qs.iter().map(|q| q.point - cloud.offset).collect(),
            targets: qs.iter().map(|q| q.signed_distance).collect(),
            cloud,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: ParamSet,
    pub encoder: VnDgcnn,
    pub vn_in: VnInvariant,
    pub decoder: Mlp,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut noise = Noise::derived(seed, &[0xAE]);
        let mut params = ParamSet::new();
        let encoder = VnDgcnn::new(
            &mut params,
            "enc",
            config.encoder_layers,
            config.hidden,
            config.latent,
            config.k,
            &mut noise,
        );
        let vn_in = VnInvariant::new(&mut params, "dec.vn_in", config.latent, config.hidden, &mut noise);
        let mut dims = vec![2 * config.latent + 1];
        dims.extend(std::iter::repeat_n(config.hidden, config.decoder_layers - 1));
        dims.push(1);
        let decoder = Mlp::new(&mut params, "dec.mlp", &dims, DEFAULT_SLOPE, &mut noise);
        Ok(Self {
            config,
            params,
            encoder,
            vn_in,
            decoder,
        })
    }

    /// Mean-pooled encoder output, `3 x d_p`.
    pub fn encode_var(&self, g: &mut Graph, cloud: &PointCloud) -> Result<Var> {
        if !cloud.centered || cloud.mean().amax() > 1e-9 {
            return Err(invalid("encoder requires a centered point cloud"));
        }
        let per_point = self.encoder.forward(g, &cloud.points)?;
        Ok(g.reduce_mid(per_point, 1, cloud.len(), 3, true))
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<ShapeEmbedding> {
        let mut g = Graph::with_params(&self.params, false);
        let h = self.encode_var(&mut g, cloud)?;
        Ok(ShapeEmbedding { vn: g.value(h).clone() })
    }

    /// Predicted signed distances for `queries` given an embedding node `h` (`3 x d_p`).
    pub fn decode_var(&self, g: &mut Graph, h: Var, queries: &[Vec3]) -> Var {
        let nq = queries.len();
        let q = g.constant(Matrix::from_shape_fn((nq, 3), |(i, d)| queries[i][d]));
        let dots = g.matmul(q, h);
        let sq = g.constant(Matrix::from_shape_fn((nq, 1), |(i, _)| queries[i].norm_squared()));
        let inv = self.vn_in.forward(g, h);
        let inv = g.gather_rows(inv, vec![0; nq]);
        let input = g.concat_cols(&[dots, sq, inv]);
        self.decoder.forward(g, input)
    }

    pub fn decode(&self, q: &Vec3, h: &ShapeEmbedding) -> f64 {
        self.decode_many(std::slice::from_ref(q), h)[0]
    }

    pub fn decode_many(&self, queries: &[Vec3], h: &ShapeEmbedding) -> Vec<f64> {
        let mut g = Graph::with_params(&self.params, false);
        let hv = g.constant(h.vn.clone());
        let out = self.decode_var(&mut g, hv, queries);
        g.value(out).iter().copied().collect()
    }

    /// Sum of squared signed-distance errors per example, averaged over the batch.
    pub fn loss_var(&self, g: &mut Graph, batch: &[ShapeExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            let h = self.encode_var(g, &ex.cloud)?;
            let pred = self.decode_var(g, h, &ex.queries);
            terms.push(squared_error(g, pred, &ex.targets));
        }
        let all = g.concat_rows(&terms);
        let total = g.sum_all(all);
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    pub fn loss(&self, batch: &[ShapeExample]) -> Result<f64> {
        let mut g = Graph::with_params(&self.params, false);
        let l = self.loss_var(&mut g, batch)?;
        Ok(g.scalar(l))
    }

    /// Loss and gradients for every parameter.
    pub fn loss_and_grads(&self, batch: &[ShapeExample]) -> Result<(f64, Vec<Matrix>)> {
        let mut g = Graph::with_params(&self.params, true);
        let l = self.loss_var(&mut g, batch)?;
        let grads = g.backward(l).for_params(&self.params);
        Ok((g.scalar(l), grads))
    }
}

/// `sum_q (o_q - pred_q)^2` as a `1 x 1` node.
pub fn squared_error(g: &mut Graph, pred: Var, targets: &[f64]) -> Var {
    let t = g.constant(Matrix::from_shape_fn((targets.len(), 1), |(i, _)| targets[i]));
    let diff = g.sub(pred, t);
    let sq = g.square(diff);
    g.sum_all(sq)
}

/// Plain evaluation of the pretraining objective for a single example.
pub fn pretrain_loss_value(predicted: &[f64], targets: &[f64]) -> f64 {
    predicted.iter().zip(targets).map(|(p, o)| (o - p) * (o - p)).sum()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    /// `(step, train_loss, val_loss, lr)`; train loss is NaN for evaluation-only rows.
    pub rows: Vec<(usize, f64, f64, f64)>,
}

impl TrainingCurve {
    pub fn initial_val(&self) -> Option<f64> {
        self.rows.first().map(|r| r.2)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.rows.last().map(|r| r.2)
    }
}

/// Splits indices into (train, validation); at least one of each when possible.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut noise = Noise::derived(seed, &[0x5917]);
    for i in (1..n).rev() {
        let j = noise.index(i + 1);
        idx.swap(i, j);
    }
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains the autoencoder with Adam, resampling surface points and queries
/// every epoch. Validation examples use a fixed draw.
pub fn fit_autoencoder(
    dataset: &[Molecule],
    config: &AutoencoderConfig,
    seed: u64,
    mut log: impl FnMut(usize, f64, f64, f64),
) -> Result<(Autoencoder, TrainingCurve)> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut model = Autoencoder::new(config.clone(), seed)?;
    let (train, val) = split_indices(dataset.len(), config.val_fraction, seed);
    let val_idx = if val.is_empty() { train.clone() } else { val };
    let val_set: Vec<ShapeExample> = val_idx
        .iter()
        .map(|&i| {
            let mut noise = Noise::derived(seed, &[0x7A1, i as u64]);
            ShapeExample::from_molecule(&dataset[i], config.n_points, config.n_queries, &mut noise)
        })
        .collect::<Result<_>>()?;
    let eval = |m: &Autoencoder| -> Result<f64> {
        let mut total = 0.0;
        for chunk in val_set.chunks(config.batch_size) {
            total += m.loss(chunk)? * chunk.len() as f64;
        }
        Ok(total / val_set.len() as f64)
    };

    let mut adam = Adam::new(&model.params, config.beta1, config.beta2, config.eps);
    let mut curve = TrainingCurve::default();
    let v0 = eval(&model)?;
    curve.rows.push((0, f64::NAN, v0, config.lr));
    log(0, f64::NAN, v0, config.lr);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor >= order.len() {
                order = train.clone();
                let mut noise = Noise::derived(seed, &[0xE90C, epoch]);
                for i in (1..order.len()).rev() {
                    order.swap(i, noise.index(i + 1));
                }
                cursor = 0;
                epoch += 1;
            }
            let i = order[cursor];
            cursor += 1;
            let mut noise = Noise::new(derive_seed(seed, &[0x5A3, i as u64, epoch]));
            batch.push(ShapeExample::from_molecule(
                &dataset[i],
                config.n_points,
                config.n_queries,
                &mut noise,
            )?);
        }
        let (loss, grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("shape pretraining diverged at step {step}")));
        }
        adam.update(&mut model.params, &grads, config.lr);
        if step % config.eval_every.max(1) == 0 || step == config.steps {
            let v = eval(&model)?;
            curve.rows.push((step, loss, v, config.lr));
            log(step, loss, v, config.lr);
        }
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, Atom, AtomClass, Element};

    fn tiny_config() -> AutoencoderConfig {
        AutoencoderConfig {
            hidden: 8,
            latent: 4,
            encoder_layers: 2,
            decoder_layers: 3,
            k: 4,
            n_points: 24,
            n_queries: 16,
            batch_size: 2,
            steps: 5,
            eval_every: 5,
            ..AutoencoderConfig::default()
        }
    }

    fn mol() -> Molecule {
        let c = AtomClass::new(Element::C, false).unwrap();
        let o = AtomClass::new(Element::O, false).unwrap();
        Molecule::new(vec![
            Atom::new(Vec3::new(0.0, 0.0, 0.0), c),
            Atom::new(Vec3::new(1.5, 0.1, 0.0), c),
            Atom::new(Vec3::new(2.1, 1.3, 0.2), o),
        ])
        .unwrap()
    }

    #[test]
    fn encoder_is_equivariant_and_permutation_invariant() {
        let ae = Autoencoder::new(tiny_config(), 1).unwrap();
        let ex = ShapeExample::from_molecule(&mol(), 24, 16, &mut Noise::new(2)).unwrap();
        let h = ae.encode(&ex.cloud).unwrap();
        for s in 0..5 {
            let r = random_rotation(s);
            let hr = ae.encode(&ex.cloud.rotated(&r)).unwrap();
            let diff = (&hr.vn - &h.rotated(r.matrix()).vn)
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!(diff / h.frobenius() < 1e-8);
        }
        let mut rev = ex.cloud.clone();
        rev.points.reverse();
        let hp = ae.encode(&rev).unwrap();
        assert!((&hp.vn - &h.vn).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn encoder_rejects_uncentered_clouds() {
        let ae = Autoencoder::new(tiny_config(), 1).unwrap();
        let pts = (0..30).map(|i| Vec3::new(i as f64, 1.0, 0.0)).collect();
        assert!(ae.encode(&PointCloud::new(pts)).is_err());
    }

    #[test]
    fn duplicated_points_leave_embedding_unchanged() {
        // Duplicate points fall outside the kNN contract, so check the pooling step.
        let ae = Autoencoder::new(tiny_config(), 3).unwrap();
        let ex = ShapeExample::from_molecule(&mol(), 24, 16, &mut Noise::new(4)).unwrap();
        let mut g = Graph::with_params(&ae.params, false);
        let per_point = ae.encoder.forward(&mut g, &ex.cloud.points).unwrap();
        let once = g.reduce_mid(per_point, 1, 24, 3, true);
        let twice_rows = g.concat_rows(&[per_point, per_point]);
        let twice = g.reduce_mid(twice_rows, 1, 48, 3, true);
        assert!((g.value(once) - g.value(twice)).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn decoder_joint_rotation_invariance_and_negative_control() {
        let ae = Autoencoder::new(tiny_config(), 5).unwrap();
        let ex = ShapeExample::from_molecule(&mol(), 24, 16, &mut Noise::new(6)).unwrap();
        let h = ae.encode(&ex.cloud).unwrap();
        let q = Vec3::new(0.4, -1.1, 0.7);
        let base = ae.decode(&q, &h);
        let r = random_rotation(9);
        let joint = ae.decode(&(r.matrix() * q), &h.rotated(r.matrix()));
        assert!((joint - base).abs() <= 1e-9 * base.abs().max(1.0));
        let query_only = ae.decode(&(r.matrix() * q), &h);
        assert!((query_only - base).abs() > 1e-9);
    }

    #[test]
    fn zero_query_depends_only_on_invariant_block() {
        let ae = Autoencoder::new(tiny_config(), 7).unwrap();
        let ex = ShapeExample::from_molecule(&mol(), 24, 16, &mut Noise::new(8)).unwrap();
        let h = ae.encode(&ex.cloud).unwrap();
        let r = random_rotation(3);
        let a = ae.decode(&Vec3::zeros(), &h);
        let b = ae.decode(&Vec3::zeros(), &h.rotated(r.matrix()));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_arithmetic() {
        assert_eq!(pretrain_loss_value(&[3.0], &[1.0]), 4.0);
        assert_eq!(pretrain_loss_value(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
    }

    #[test]
    fn batch_loss_matches_explicit_loop() {
        let ae = Autoencoder::new(tiny_config(), 9).unwrap();
        let mut noise = Noise::new(10);
        let batch: Vec<ShapeExample> = (0..3)
            .map(|_| ShapeExample::from_molecule(&mol(), 24, 16, &mut noise).unwrap())
            .collect();
        let mut want = 0.0;
        for ex in &batch {
            let h = ae.encode(&ex.cloud).unwrap();
            want += pretrain_loss_value(&ae.decode_many(&ex.queries, &h), &ex.targets);
        }
        want /= 3.0;
        assert!((ae.loss(&batch).unwrap() - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = vec![mol(), mol().translated(&Vec3::new(1.0, 0.0, 0.0))];
        let cfg = AutoencoderConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let (model, _) = fit_autoencoder(&data, &cfg, 11, |_, _, _, _| {}).unwrap();
        let fresh = Autoencoder::new(cfg, 11).unwrap();
        assert_eq!(model.params, fresh.params);
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![mol(), mol().translated(&Vec3::new(1.0, 0.0, 0.0)), mol()];
        let run = || fit_autoencoder(&data, &tiny_config(), 12, |_, _, _, _| {}).unwrap().1;
        let (a, b) = (run(), run());
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.2.to_bits(), y.2.to_bits());
        }
    }

    #[test]
    fn split_keeps_both_sides() {
        let (t, v) = split_indices(10, 0.2, 1);
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t, v) = split_indices(1, 0.2, 1);
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
