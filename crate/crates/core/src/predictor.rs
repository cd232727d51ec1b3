//! Shape-conditioned denoiser.
//!
//! Each layer first updates invariant atom embeddings with attention over the
//! atom's nearest neighbors, then moves positions along `x_i - x_j` with
//! per-head attention gates and a vector-neuron update that also sees the
//! shape embedding. Positions enter invariant parts only through distances,
//! so the positions output is rotation-equivariant and the feature output is
//! invariant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{knn_graph, Vec3, NUM_CLASSES};
use crate::nn::{Linear, Mlp, ParamSet};
use crate::rng::Noise;
use crate::vn_layers::{VnInvariant, VnLeakyRelu, VnLinear, DEFAULT_SLOPE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub neighbors: usize,
    pub rbf_count: usize,
    pub rbf_max: f64,
    pub time_dim: usize,
    /// Hidden vector channels of the per-layer VN update.
    pub vn_hidden: usize,
    pub classes: usize,
    /// Rows of the shape embedding.
    pub shape_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 8,
            heads: 16,
            neighbors: 8,
            rbf_count: 16,
            rbf_max: 10.0,
            time_dim: 16,
            vn_hidden: 16,
            classes: NUM_CLASSES,
            shape_dim: 32,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.classes < 2 {
            return Err(invalid("predictor dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid("head count must divide the hidden size"));
        }
        if self.neighbors == 0 || self.rbf_count < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid("need neighbors >= 1, rbf_count >= 2 and an even time_dim"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x0: Vec<Vec3>,
    /// `n x K` softmax rows.
    pub v0: Matrix,
}

/// Sinusoidal encoding of the step index.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Clone, Debug)]
struct Layer {
    // feature attention
    h_edge: Linear,
    h_qkv: Linear,
    h_out: Linear,
    // position attention: logits and gates per head
    x_edge: Mlp,
    vn_act: VnLeakyRelu,
    vn_out: VnLinear,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: ParamSet,
    embed: Linear,
    shape_inv: VnInvariant,
    layers: Vec<Layer>,
    head: Mlp,
}

/// Edge list of the current neighbor graph; rows ordered by source atom.
struct Edges {
    k: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut noise = Noise::derived(seed, &[0xD1FF]);
        let mut params = ParamSet::new();
        let c = &config;
        let d = c.hidden;
        let embed = Linear::new(&mut params, "embed", c.classes + c.time_dim, d, &mut noise);
        let shape_inv = VnInvariant::new(&mut params, "shape_inv", c.shape_dim, d, &mut noise);
        let edge_in = 2 * d + c.rbf_count + c.shape_dim;
        let layers = (0..c.layers)
            .map(|l| Layer {
                h_edge: Linear::new(&mut params, &format!("layer{l}.h_edge"), edge_in, d, &mut noise),
                h_qkv: Linear::new(&mut params, &format!("layer{l}.h_qkv"), d, 3 * d, &mut noise),
                h_out: Linear::new(&mut params, &format!("layer{l}.h_out"), d, d, &mut noise),
                x_edge: Mlp::new(
                    &mut params,
                    &format!("layer{l}.x_edge"),
                    &[edge_in, d, 2 * c.heads],
                    DEFAULT_SLOPE,
                    &mut noise,
                ),
                vn_act: VnLeakyRelu::new(
                    &mut params,
                    &format!("layer{l}.vn_act"),
                    1 + c.heads + c.shape_dim,
                    c.vn_hidden,
                    DEFAULT_SLOPE,
                    &mut noise,
                ),
                vn_out: VnLinear::new(&mut params, &format!("layer{l}.vn_out"), c.vn_hidden, 1, &mut noise),
            })
            .collect();
        let head = Mlp::new(&mut params, "head", &[d, d, c.classes], DEFAULT_SLOPE, &mut noise);
        Ok(Self {
            config,
            params,
            embed,
            shape_inv,
            layers,
            head,
        })
    }

    fn edges(&self, x: &Matrix) -> Result<Option<Edges>> {
        let n = x.nrows();
        if n < 2 {
            return Ok(None);
        }
        let pts: Vec<Vec3> = (0..n).map(|i| Vec3::new(x[[i, 0]], x[[i, 1]], x[[i, 2]])).collect();
        let k = self.config.neighbors.min(n - 1);
        let g = knn_graph(&pts, k)?;
        let src = (0..n * k).map(|e| e / k).collect();
        Ok(Some(Edges {
            k,
            src,
            dst: g.neighbors,
        }))
    }

    /// Gaussian radial basis of edge lengths, `E x rbf_count`.
    fn rbf(&self, g: &mut Graph, dist: Var) -> Var {
        let m = self.config.rbf_count;
        let spacing = self.config.rbf_max / (m - 1) as f64;
        let ones = g.constant(Matrix::ones((1, m)));
        let tiled = g.matmul(dist, ones);
        let centers = g.constant(Matrix::from_shape_fn((1, m), |(_, c)| -(c as f64) * spacing));
        let shifted = g.add_row(tiled, centers);
        let sq = g.square(shifted);
        let scaled = g.scale(sq, -0.5 / (spacing * spacing));
        g.exp(scaled)
    }

    /// Block indicator `hidden x heads` (scaled) used to sum per-head products.
    fn head_blocks(&self, scale: f64) -> Matrix {
        let dh = self.config.hidden / self.config.heads;
        Matrix::from_shape_fn((self.config.hidden, self.config.heads), |(r, h)| {
            if r / dh == h {
                scale
            } else {
                0.0
            }
        })
    }

    /// Graph-level forward pass. `x` is `n x 3` (centered frame), `v` is
    /// `n x K`, `shape` is the `3 x d_p` embedding. Returns `(x0_hat, v0_hat)`.
    pub fn forward(&self, g: &mut Graph, x: Var, v: &Matrix, shape: Var, t: usize) -> Result<(Var, Var)> {
        self.forward_recorded(g, x, v, shape, t, &mut Vec::new())
    }

    /// Like [`Predictor::forward`], also pushing `(h, x)` after every layer.
    fn forward_recorded(
        &self,
        g: &mut Graph,
        x: Var,
        v: &Matrix,
        shape: Var,
        t: usize,
        record: &mut Vec<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let n = g.value(x).nrows();
        if n == 0 {
            return Err(Error::EmptyMolecule);
        }
        if v.dim() != (n, c.classes) || g.value(x).ncols() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "positions {:?}, features {:?}",
                g.value(x).dim(),
                v.dim()
            )));
        }
        if g.value(x).iter().chain(v.iter()).any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("predictor input".into()));
        }
        let temb = time_embedding(t, c.time_dim);
        let input = Matrix::from_shape_fn((n, c.classes + c.time_dim), |(i, j)| {
            if j < c.classes {
                v[[i, j]]
            } else {
                temb[j - c.classes]
            }
        });
        let input = g.constant(input);
        let mut h = self.embed.forward(g, input);
        let hs = self.shape_inv.forward(g, shape);
        let shape_rows = g.gather_rows(shape, (0..n).flat_map(|_| 0..3).collect());
        let mut x = x;
        let dh = c.hidden / c.heads;
        let blocks = g.constant(self.head_blocks(1.0 / (dh as f64).sqrt()));
        let spread = g.constant(self.head_blocks(1.0).t().as_standard_layout().into_owned());

        for layer in &self.layers {
            let edges = self.edges(g.value(x))?;
            let x_vn = g.reshape(x, 3 * n, 1);
            let dx = match &edges {
                None => g.constant(Matrix::zeros((3 * n, c.heads))),
                Some(e) => {
                    let n_e = e.src.len();
                    let xi = g.gather_rows(x, e.src.clone());
                    let xj = g.gather_rows(x, e.dst.clone());
                    let diff = g.sub(xi, xj);
                    let d2 = g.square(diff);
                    let d2 = g.sum_cols(d2);
                    let d2 = g.add_scalar(d2, 1e-12);
                    let dist = g.sqrt(d2);
                    let rbf = self.rbf(g, dist);
                    let hs_e = g.gather_rows(hs, vec![0; n_e]);

                    // invariant update
                    let hi = g.gather_rows(h, e.src.clone());
                    let hj = g.gather_rows(h, e.dst.clone());
                    let z = g.concat_cols(&[hi, hj, rbf, hs_e]);
                    let hid = layer.h_edge.forward(g, z);
                    let hid = g.leaky_relu(hid, DEFAULT_SLOPE);
                    let qkv = layer.h_qkv.forward(g, hid);
                    let q = g.slice_cols(qkv, 0, c.hidden);
                    let k = g.slice_cols(qkv, c.hidden, 2 * c.hidden);
                    let val = g.slice_cols(qkv, 2 * c.hidden, 3 * c.hidden);
                    let qk = g.mul(q, k);
                    let logits = g.matmul(qk, blocks);
                    let att = g.segment_softmax(logits, e.k);
                    let att = g.matmul(att, spread);
                    let weighted = g.mul(att, val);
                    let agg = g.reduce_mid(weighted, n, e.k, 1, false);
                    let upd = layer.h_out.forward(g, agg);
                    h = g.add(h, upd);

                    // equivariant update with the refreshed embeddings
                    let hi = g.gather_rows(h, e.src.clone());
                    let hj = g.gather_rows(h, e.dst.clone());
                    let z = g.concat_cols(&[hi, hj, rbf, hs_e]);
                    let out = layer.x_edge.forward(g, z);
                    let logits = g.slice_cols(out, 0, c.heads);
                    let gates = g.slice_cols(out, c.heads, 2 * c.heads);
                    let att = g.segment_softmax(logits, e.k);
                    let w = g.mul(att, gates);
                    let w3 = g.expand_mid(w, n_e, 3, 1);
                    let diff_vn = g.reshape(diff, 3 * n_e, 1);
                    let per_edge = g.mul_col(w3, diff_vn);
                    g.reduce_mid(per_edge, n, e.k, 3, false)
                }
            };
            let mean = g.sum_cols(dx);
            let mean = g.scale(mean, 1.0 / c.heads as f64);
            let stacked = g.concat_cols(&[x_vn, dx, shape_rows]);
            let act = layer.vn_act.forward(g, stacked);
            let vn = layer.vn_out.forward(g, act);
            let step = g.add(mean, vn);
            let new_x = g.add(x_vn, step);
            x = g.reshape(new_x, n, 3);
            record.push((h, x));
        }
        let logits = self.head.forward(g, h);
        let v0 = g.softmax_rows(logits);
        Ok((x, v0))
    }

    pub fn predict(&self, x: &[Vec3], v: &Matrix, shape: &Matrix, t: usize) -> Result<Prediction> {
        let mut g = Graph::with_params(&self.params, false);
        let xv = g.constant(positions_matrix(x));
        let hv = g.constant(shape.clone());
        let (x0, v0) = self.forward(&mut g, xv, v, hv, t)?;
        Ok(Prediction {
            x0: matrix_positions(g.value(x0)),
            v0: g.value(v0).clone(),
        })
    }

    /// Per-layer invariant embeddings (`n x hidden`) and positions.
    pub fn layer_outputs(&self, x: &[Vec3], v: &Matrix, shape: &Matrix, t: usize) -> Result<Vec<(Matrix, Vec<Vec3>)>> {
        let mut g = Graph::with_params(&self.params, false);
        let xv = g.constant(positions_matrix(x));
        let hv = g.constant(shape.clone());
        let mut record = Vec::new();
        self.forward_recorded(&mut g, xv, v, hv, t, &mut record)?;
        Ok(record
            .into_iter()
            .map(|(h, x)| (g.value(h).clone(), matrix_positions(g.value(x))))
            .collect())
    }
}

pub fn positions_matrix(x: &[Vec3]) -> Matrix {
    Matrix::from_shape_fn((x.len(), 3), |(i, d)| x[i][d])
}

pub fn matrix_positions(m: &Matrix) -> Vec<Vec3> {
    m.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}
