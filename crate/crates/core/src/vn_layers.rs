//! Vector-neuron layers.
//!
//! All features use the VN layout described in [`crate::autodiff`]: `n` items
//! with `c` vector channels form an `(n * 3) x c` matrix. Rotating the input
//! by `R` maps every 3-row block `B` to `R * B`, and every layer here commutes
//! with that action.

use nalgebra::Matrix3;

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{invalid, Result};
use crate::geometry::{knn_graph, KnnGraph, Vec3};
use crate::nn::{Linear, Mlp, ParamSet};
use crate::rng::Noise;

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Stacks points as a single-channel VN feature, `(n * 3) x 1`.
pub fn points_to_vn(points: &[Vec3]) -> Matrix {
    Matrix::from_shape_fn((points.len() * 3, 1), |(r, _)| points[r / 3][r % 3])
}

/// Applies `r` to every 3-row block of a VN-layout matrix.
pub fn rotate_vn(m: &Matrix, r: &Matrix3<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.raw_dim());
    for n in 0..m.nrows() / 3 {
        for c in 0..m.ncols() {
            for a in 0..3 {
                out[[3 * n + a, c]] = (0..3).map(|b| r[(a, b)] * m[[3 * n + b, c]]).sum();
            }
        }
    }
    out
}

/// Channel mixing without bias.
#[derive(Clone, Debug)]
pub struct VnLinear {
    pub lin: Linear,
}

impl VnLinear {
    pub fn new(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, noise: &mut Noise) -> Self {
        Self {
            lin: Linear::no_bias(params, name, c_in, c_out, noise),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.lin.forward(g, x)
    }
}

/// Feature map `W X` with a learned direction `U X`, followed by the VN leaky ReLU.
#[derive(Clone, Debug)]
pub struct VnLeakyRelu {
    pub weight: VnLinear,
    pub direction: VnLinear,
    pub slope: f64,
}

impl VnLeakyRelu {
    pub fn new(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, slope: f64, noise: &mut Noise) -> Self {
        Self {
            weight: VnLinear::new(params, &format!("{name}.w"), c_in, c_out, noise),
            direction: VnLinear::new(params, &format!("{name}.u"), c_in, c_out, noise),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let q = self.weight.forward(g, x);
        let d = self.direction.forward(g, x);
        g.vn_leaky_relu(q, d, self.slope)
    }
}

/// Rotation-invariant read-out: inner products of every channel with the
/// normalized channel mean, passed through an MLP.
#[derive(Clone, Debug)]
pub struct VnInvariant {
    pub mlp: Mlp,
    pub channels: usize,
}

impl VnInvariant {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, hidden: usize, noise: &mut Noise) -> Self {
        Self {
            mlp: Mlp::new(params, name, &[channels, hidden, channels], DEFAULT_SLOPE, noise),
            channels,
        }
    }

    /// Inner products `<H_c, mean(H) / |mean(H)|>` for a batch of embeddings,
    /// `(b * 3) x c -> b x c`. Items whose mean is shorter than `1e-12` use the
    /// direction `(1, 0, 0)`.
    pub fn inner_products(g: &mut Graph, h: Var) -> Var {
        let (rows, c) = g.value(h).dim();
        let b = rows / 3;
        let sums = g.sum_cols(h);
        let mean = g.scale(sums, 1.0 / c as f64);
        // Degenerate items get +1 under the square root and a zero mask, so the
        // normalized direction stays finite and the fallback takes over.
        let norms2: Vec<f64> = (0..b)
            .map(|i| (0..3).map(|k| g.value(mean)[[3 * i + k, 0]].powi(2)).sum())
            .collect();
        let degenerate: Vec<bool> = norms2.iter().map(|&n2| n2.sqrt() < 1e-12).collect();
        let sq = g.square(mean);
        let n2 = g.reduce_mid(sq, b, 3, 1, false);
        let pad = g.constant(Matrix::from_shape_fn(
            (b, 1),
            |(i, _)| if degenerate[i] { 1.0 } else { 0.0 },
        ));
        let n2 = g.add(n2, pad);
        let norm = g.sqrt(n2);
        let inv = g.recip(norm);
        let inv = g.expand_mid(inv, b, 3, 1);
        let dir = g.mul(mean, inv);
        let dir = if degenerate.iter().any(|&d| d) {
            let mask = g.constant(Matrix::from_shape_fn((rows, 1), |(r, _)| {
                if degenerate[r / 3] {
                    0.0
                } else {
                    1.0
                }
            }));
            let fallback = g.constant(Matrix::from_shape_fn((rows, 1), |(r, _)| {
                if degenerate[r / 3] && r % 3 == 0 {
                    1.0
                } else {
                    0.0
                }
            }));
            let masked = g.mul(dir, mask);
            g.add(masked, fallback)
        } else {
            dir
        };
        let proj = g.mul_col(h, dir);
        g.reduce_mid(proj, b, 3, 1, false)
    }

    pub fn forward(&self, g: &mut Graph, h: Var) -> Var {
        let ip = Self::inner_products(g, h);
        self.mlp.forward(g, ip)
    }
}

/// One edge-convolution layer over a fixed kNN graph.
///
/// For an edge `i -> j` the pre-activation is `W_d (x_j - x_i) + W_c x_i`,
/// directions use separate weights of the same form, and messages are
/// averaged over the `k` neighbors.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub w_diff: VnLinear,
    pub w_center: VnLinear,
    pub u_diff: VnLinear,
    pub u_center: VnLinear,
    pub slope: f64,
}

impl EdgeConv {
    pub fn new(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, noise: &mut Noise) -> Self {
        Self {
            w_diff: VnLinear::new(params, &format!("{name}.w_diff"), c_in, c_out, noise),
            w_center: VnLinear::new(params, &format!("{name}.w_center"), c_in, c_out, noise),
            u_diff: VnLinear::new(params, &format!("{name}.u_diff"), c_in, c_out, noise),
            u_center: VnLinear::new(params, &format!("{name}.u_center"), c_in, c_out, noise),
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, graph: &KnnGraph, idx: &EdgeIndex) -> Var {
        let n = graph.n_nodes();
        let k = graph.k;
        // Linear maps commute with the edge construction, so project per node
        // first and gather afterwards.
        let edge = |g: &mut Graph, diff: &VnLinear, center: &VnLinear| {
            let a = diff.forward(g, x);
            let b = center.forward(g, x);
            let aj = g.gather_rows(a, idx.neighbor_rows.clone());
            let c = g.sub(b, a);
            let ci = g.expand_mid(c, n, k, 3);
            g.add(aj, ci)
        };
        let q = edge(g, &self.w_diff, &self.w_center);
        let d = edge(g, &self.u_diff, &self.u_center);
        let act = g.vn_leaky_relu(q, d, self.slope);
        g.reduce_mid(act, n, k, 3, true)
    }
}

/// Row indices that gather neighbor features into edge order `(i, m, d)`.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub neighbor_rows: Vec<usize>,
}

impl EdgeIndex {
    pub fn new(graph: &KnnGraph) -> Self {
        let neighbor_rows = graph
            .neighbors
            .iter()
            .flat_map(|&j| (0..3).map(move |d| 3 * j + d))
            .collect();
        Self { neighbor_rows }
    }
}

/// Stack of edge convolutions whose concatenated outputs are mixed into
/// `out_dim` channels per point.
#[derive(Clone, Debug)]
pub struct VnDgcnn {
    pub layers: Vec<EdgeConv>,
    pub head: VnLinear,
    pub k: usize,
}

impl VnDgcnn {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        n_layers: usize,
        hidden: usize,
        out_dim: usize,
        k: usize,
        noise: &mut Noise,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let c_in = if l == 0 { 1 } else { hidden };
                EdgeConv::new(params, &format!("{name}.conv{l}"), c_in, hidden, noise)
            })
            .collect();
        let head = VnLinear::new(params, &format!("{name}.head"), n_layers * hidden, out_dim, noise);
        Self { layers, head, k }
    }

    /// Per-point features, `(n * 3) x out_dim`, for a centered cloud.
    pub fn forward(&self, g: &mut Graph, points: &[Vec3]) -> Result<Var> {
        if points.len() <= self.k {
            return Err(invalid(format!(
                "need more than {} points, got {}",
                self.k,
                points.len()
            )));
        }
        let graph = knn_graph(points, self.k)?;
        let idx = EdgeIndex::new(&graph);
        let mut x = g.constant(points_to_vn(points));
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, x, &graph, &idx);
            outs.push(x);
        }
        let cat = g.concat_cols(&outs);
        Ok(self.head.forward(g, cat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;

    fn random(rows: usize, cols: usize, noise: &mut Noise) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| noise.standard_normal())
    }

    fn max_abs(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn vn_linear_identity_and_loop_oracle() {
        let mut noise = Noise::new(1);
        let mut ps = ParamSet::new();
        let lin = VnLinear::new(&mut ps, "l", 4, 3, &mut noise);
        let x = random(6, 4, &mut noise);
        let mut g = Graph::with_params(&ps, false);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, xv);
        let w = ps.get(lin.lin.weight);
        for r in 0..6 {
            for o in 0..3 {
                let want: f64 = (0..4).map(|c| w[[o, c]] * x[[r, c]]).sum();
                assert!((g.value(y)[[r, o]] - want).abs() < 1e-14);
            }
        }

        let mut ps = ParamSet::new();
        let id = VnLinear::new(&mut ps, "id", 4, 4, &mut noise);
        ps.values_mut()[0] = Matrix::eye(4);
        let mut g = Graph::with_params(&ps, false);
        let xv = g.constant(x.clone());
        let y = id.forward(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }

    fn eval_layer(f: &dyn Fn(&mut Graph, Var) -> Var, ps: &ParamSet, x: &Matrix) -> Matrix {
        let mut g = Graph::with_params(ps, false);
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv);
        g.value(y).clone()
    }

    #[test]
    fn vn_linear_and_relu_are_equivariant() {
        let mut noise = Noise::new(2);
        let mut ps = ParamSet::new();
        let lin = VnLinear::new(&mut ps, "l", 5, 4, &mut noise);
        let act = VnLeakyRelu::new(&mut ps, "a", 5, 4, 0.2, &mut noise);
        for s in 0..100 {
            let r = *random_rotation(s).matrix();
            let x = random(12, 5, &mut noise);
            let xr = rotate_vn(&x, &r);
            let f = |g: &mut Graph, v: Var| lin.forward(g, v);
            assert!(max_abs(&eval_layer(&f, &ps, &xr), &rotate_vn(&eval_layer(&f, &ps, &x), &r)) < 1e-12);
            let f = |g: &mut Graph, v: Var| act.forward(g, v);
            assert!(max_abs(&eval_layer(&f, &ps, &xr), &rotate_vn(&eval_layer(&f, &ps, &x), &r)) < 1e-10);
        }
    }

    #[test]
    fn vn_relu_special_cases() {
        let mut g = Graph::new();
        // q perpendicular to d: unchanged
        let q = g.constant(Matrix::from_shape_vec((3, 1), vec![1.0, 0.0, 0.0]).unwrap());
        let d = g.constant(Matrix::from_shape_vec((3, 1), vec![0.0, 1.0, 0.0]).unwrap());
        let y = g.vn_leaky_relu(q, d, 0.2);
        assert_eq!(g.value(y), g.value(q));
        // slope 1 is the identity
        let d2 = g.constant(Matrix::from_shape_vec((3, 1), vec![-1.0, 0.3, 0.0]).unwrap());
        let y = g.vn_leaky_relu(q, d2, 1.0);
        assert_eq!(g.value(y), g.value(q));
        // opposite direction with slope 0 removes the component
        let y = g.vn_leaky_relu(q, d2, 0.0);
        let out = g.value(y);
        let dot: f64 = (0..3).map(|k| out[[k, 0]] * g.value(d2)[[k, 0]]).sum();
        assert!(dot.abs() < 1e-15);
        // zero direction: unchanged
        let z = g.constant(Matrix::zeros((3, 1)));
        let y = g.vn_leaky_relu(q, z, 0.0);
        assert_eq!(g.value(y), g.value(q));
    }

    fn invariant_out(inv: &VnInvariant, ps: &ParamSet, h: &Matrix) -> Matrix {
        let mut g = Graph::with_params(ps, false);
        let hv = g.constant(h.clone());
        let y = inv.forward(&mut g, hv);
        g.value(y).clone()
    }

    #[test]
    fn vn_invariant_is_rotation_invariant() {
        let mut noise = Noise::new(3);
        let mut ps = ParamSet::new();
        let inv = VnInvariant::new(&mut ps, "inv", 6, 8, &mut noise);
        let h = random(3, 6, &mut noise);
        let base = invariant_out(&inv, &ps, &h);
        assert_eq!(invariant_out(&inv, &ps, &rotate_vn(&h, &Matrix3::identity())), base);
        for s in 0..50 {
            let r = *random_rotation(s).matrix();
            assert!(max_abs(&invariant_out(&inv, &ps, &rotate_vn(&h, &r)), &base) < 1e-10);
        }
    }

    #[test]
    fn parallel_rows_give_their_norms() {
        // all channels equal to v: every inner product is |v|
        let v = [0.3, -1.2, 0.5];
        let h = Matrix::from_shape_fn((3, 4), |(d, _)| v[d]);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let ip = VnInvariant::inner_products(&mut g, hv);
        let norm = (0.09f64 + 1.44 + 0.25).sqrt();
        for c in 0..4 {
            assert!((g.value(ip)[[0, c]] - norm).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_mean_embedding_uses_fallback_direction() {
        // channels cancel: mean is zero, so the x axis is used
        let h = Matrix::from_shape_vec((3, 2), vec![1.0, -1.0, 2.0, -2.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let hv = g.leaf(h);
        let ip = VnInvariant::inner_products(&mut g, hv);
        assert_eq!(g.value(ip).as_slice().unwrap(), &[1.0, -1.0]);
        let loss = g.sum_all(ip);
        let grads = g.backward(loss);
        assert!(grads.get(hv).unwrap().iter().all(|x| x.is_finite()));
    }

    fn dgcnn_out(net: &VnDgcnn, ps: &ParamSet, pts: &[Vec3]) -> Matrix {
        let mut g = Graph::with_params(ps, false);
        let y = net.forward(&mut g, pts).unwrap();
        g.value(y).clone()
    }

    fn cloud(n: usize, noise: &mut Noise) -> Vec<Vec3> {
        let pts: Vec<Vec3> = (0..n).map(|_| noise.normal3() * 2.0).collect();
        let mean = pts.iter().sum::<Vec3>() / n as f64;
        pts.into_iter().map(|p| p - mean).collect()
    }

    #[test]
    fn dgcnn_is_rotation_equivariant() {
        let mut noise = Noise::new(4);
        let mut ps = ParamSet::new();
        let net = VnDgcnn::new(&mut ps, "enc", 3, 6, 5, 4, &mut noise);
        let pts = cloud(16, &mut noise);
        let base = dgcnn_out(&net, &ps, &pts);
        for s in 0..10 {
            let r = *random_rotation(100 + s).matrix();
            let rotated: Vec<Vec3> = pts.iter().map(|p| r * p).collect();
            let out = dgcnn_out(&net, &ps, &rotated);
            assert!(max_abs(&out, &rotate_vn(&base, &r)) < 1e-8);
        }
    }

    #[test]
    fn dgcnn_is_permutation_covariant() {
        let mut noise = Noise::new(5);
        let mut ps = ParamSet::new();
        let net = VnDgcnn::new(&mut ps, "enc", 2, 4, 3, 3, &mut noise);
        let pts = cloud(12, &mut noise);
        let perm: Vec<usize> = vec![3, 7, 0, 11, 1, 2, 10, 4, 9, 5, 8, 6];
        let permuted: Vec<Vec3> = perm.iter().map(|&p| pts[p]).collect();
        let base = dgcnn_out(&net, &ps, &pts);
        let out = dgcnn_out(&net, &ps, &permuted);
        for (i, &p) in perm.iter().enumerate() {
            for d in 0..3 {
                for c in 0..3 {
                    assert!((out[[3 * i + d, c]] - base[[3 * p + d, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dgcnn_rejects_small_clouds() {
        let mut noise = Noise::new(6);
        let mut ps = ParamSet::new();
        let net = VnDgcnn::new(&mut ps, "enc", 1, 2, 2, 4, &mut noise);
        let mut g = Graph::with_params(&ps, false);
        assert!(net.forward(&mut g, &cloud(4, &mut noise)).is_err());
    }
}
