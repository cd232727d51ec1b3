//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! loaded first so that `ParamId(i)` maps to node `i`; calling
//! [`Graph::backward`] returns gradients for every tracked node.
//!
//! Vector-neuron features are stored in "VN layout": a batch of `n` features
//! with `c` channels is an `(n * 3) x c` matrix whose row `3 * i + d` holds the
//! `d`-th spatial component of every channel of item `i`. Channel mixing is then
//! a single right-multiplication by a transposed weight.

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::{ParamId, ParamSet};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Matrix, &[Matrix]) -> Vec<(usize, Matrix)>>;

pub struct Graph {
    values: Vec<Matrix>,
    backward: Vec<Option<BackwardFn>>,
    tracked: Vec<bool>,
    n_params: usize,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of the first `params.len()` nodes, zero-filled where untouched.
    pub fn for_params(&self, params: &ParamSet) -> Vec<Matrix> {
        params
            .values()
            .iter()
            .enumerate()
            .map(|(i, p)| self.grads[i].clone().unwrap_or_else(|| Matrix::zeros(p.raw_dim())))
            .collect()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            backward: Vec::new(),
            tracked: Vec::new(),
            n_params: 0,
        }
    }

    /// Creates a graph whose first nodes are the parameters of `params`.
    /// With `track == false` no backward closures are recorded.
    pub fn with_params(params: &ParamSet, track: bool) -> Self {
        let mut g = Self::new();
        for m in params.values() {
            g.values.push(m.clone());
            g.backward.push(None);
            g.tracked.push(track);
        }
        g.n_params = params.len();
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.n_params, "parameter {} not loaded", id.0);
        Var(id.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.values[v.0];
        assert_eq!(m.dim(), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.values.push(m);
        self.backward.push(None);
        self.tracked.push(false);
        Var(self.values.len() - 1)
    }

    /// Tracked leaf that is not a registered parameter (used for input gradients).
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.values.push(m);
        self.backward.push(None);
        self.tracked.push(true);
        Var(self.values.len() - 1)
    }

    fn push<F>(&mut self, value: Matrix, parents: &[Var], f: F) -> Var
    where
        F: Fn(&Matrix, &[Matrix]) -> Vec<(usize, Matrix)> + 'static,
    {
        let tracked = parents.iter().any(|p| self.tracked[p.0]);
        self.values.push(value);
        self.backward.push(if tracked { Some(Box::new(f)) } else { None });
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    fn next_index(&self) -> usize {
        self.values.len()
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(f) = &self.backward[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            for (p, gp) in f(&g, &self.values) {
                if !self.tracked[p] {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &gp,
                    slot @ None => *slot = Some(gp),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].dot(&self.values[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push(out, &[a, b], move |g, v| {
            vec![(ai, g.dot(&v[bi].t())), (bi, v[ai].t().dot(g))]
        })
    }

    /// `a * b^T`; with `b` an `out x in` weight this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].dot(&self.values[b.0].t());
        let (ai, bi) = (a.0, b.0);
        self.push(out, &[a, b], move |g, v| {
            vec![(ai, g.dot(&v[bi])), (bi, g.t().dot(&v[ai]))]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.values[a.0].t().as_standard_layout().into_owned();
        let ai = a.0;
        self.push(out, &[a], move |g, _| {
            vec![(ai, g.t().as_standard_layout().into_owned())]
        })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = &self.values[a.0];
        let (r0, c0) = src.dim();
        assert_eq!(r0 * c0, rows * cols, "reshape size mismatch");
        let out = to_shape(src, rows, cols);
        let ai = a.0;
        self.push(out, &[a], move |g, _| vec![(ai, to_shape(g, r0, c0))])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let out = &self.values[a.0] + &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(out, &[a, b], move |g, _| vec![(ai, g.clone()), (bi, g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let out = &self.values[a.0] - &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(out, &[a, b], move |g, _| vec![(ai, g.clone()), (bi, -g)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let out = &self.values[a.0] * &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(out, &[a, b], move |g, v| vec![(ai, g * &v[bi]), (bi, g * &v[ai])])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.values[a.0].dim();
        assert_eq!(self.values[row.0].dim(), (1, ca), "add_row shape");
        let out = &self.values[a.0] + &self.values[row.0];
        let (ai, bi) = (a.0, row.0);
        let _ = ra;
        self.push(out, &[a, row], move |g, _| {
            vec![(ai, g.clone()), (bi, g.sum_axis(Axis(0)).insert_axis(Axis(0)))]
        })
    }

    /// Multiplies row `r` of `a` by `s[r, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (ra, _) = self.values[a.0].dim();
        assert_eq!(self.values[s.0].dim(), (ra, 1), "mul_col shape");
        let out = &self.values[a.0] * &self.values[s.0];
        let (ai, si) = (a.0, s.0);
        self.push(out, &[a, s], move |g, v| {
            let gs = (g * &v[ai]).sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![(ai, g * &v[si]), (si, gs)]
        })
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = &self.values[a.0] * sv;
        let (ai, si) = (a.0, s.0);
        self.push(out, &[a, s], move |g, v| {
            let sv = v[si][[0, 0]];
            let gs = (g * &v[ai]).sum();
            vec![(ai, g * sv), (si, Matrix::from_elem((1, 1), gs))]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.values[a.0] * c;
        let ai = a.0;
        self.push(out, &[a], move |g, _| vec![(ai, g * c)])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = &self.values[a.0] + c;
        let ai = a.0;
        self.push(out, &[a], move |g, _| vec![(ai, g.clone())])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x * x);
        let ai = a.0;
        self.push(out, &[a], move |g, v| vec![(ai, g * &v[ai] * 2.0)])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::sqrt);
        let (ai, oi) = (a.0, self.next_index());
        self.push(out, &[a], move |g, v| {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(&v[oi]).for_each(|x, &y| {
                *x = if y > 0.0 { *x / (2.0 * y) } else { 0.0 };
            });
            vec![(ai, ga)]
        })
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| 1.0 / x);
        let (ai, oi) = (a.0, self.next_index());
        self.push(out, &[a], move |g, v| vec![(ai, -(g * &v[oi] * &v[oi]))])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::exp);
        let (ai, oi) = (a.0, self.next_index());
        self.push(out, &[a], move |g, v| vec![(ai, g * &v[oi])])
    }

    /// `ln(max(a, floor))`; entries at or below `floor` receive zero gradient.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.values[a.0].mapv(|x| x.max(floor).ln());
        let ai = a.0;
        self.push(out, &[a], move |g, v| {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(&v[ai]).for_each(|x, &y| {
                *x = if y > floor { *x / y } else { 0.0 };
            });
            vec![(ai, ga)]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.values[a.0].mapv(|x| if x > 0.0 { x } else { slope * x });
        let ai = a.0;
        self.push(out, &[a], move |g, v| {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(&v[ai]).for_each(|x, &y| {
                if y <= 0.0 {
                    *x *= slope;
                }
            });
            vec![(ai, ga)]
        })
    }

    // ---- reductions and indexing ----------------------------------------

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.values[a.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        let ai = a.0;
        let cols = self.values[a.0].ncols();
        self.push(out, &[a], move |g, _| {
            let rows = g.nrows();
            let mut ga = Matrix::zeros((rows, cols));
            for r in 0..rows {
                ga.row_mut(r).fill(g[[r, 0]]);
            }
            vec![(ai, ga)]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.values[a.0].sum());
        let ai = a.0;
        let dim = self.values[a.0].raw_dim();
        self.push(out, &[a], move |g, _| vec![(ai, Matrix::from_elem(dim, g[[0, 0]]))])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = &self.values[a.0];
        let cols = src.ncols();
        let mut out = Matrix::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        let ai = a.0;
        let src_rows = src.nrows();
        self.push(out, &[a], move |g, _| {
            let mut ga = Matrix::zeros((src_rows, cols));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = ga.row_mut(i);
                row += &g.row(r);
            }
            vec![(ai, ga)]
        })
    }

    /// Rows are indexed as `(o, m, i)` with `o < outer`, `m < mid`, `i < inner`;
    /// sums (or averages) over `m`, giving `outer * inner` rows.
    pub fn reduce_mid(&mut self, a: Var, outer: usize, mid: usize, inner: usize, mean: bool) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.nrows(), outer * mid * inner, "reduce_mid rows");
        let cols = src.ncols();
        let scale = if mean { 1.0 / mid as f64 } else { 1.0 };
        let mut out = Matrix::zeros((outer * inner, cols));
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    let mut row = out.row_mut(o * inner + i);
                    row.scaled_add(scale, &src.row((o * mid + m) * inner + i));
                }
            }
        }
        let ai = a.0;
        self.push(out, &[a], move |g, _| {
            let mut ga = Matrix::zeros((outer * mid * inner, cols));
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        let mut row = ga.row_mut((o * mid + m) * inner + i);
                        row.scaled_add(scale, &g.row(o * inner + i));
                    }
                }
            }
            vec![(ai, ga)]
        })
    }

    /// Inverse of [`Graph::reduce_mid`]: repeats each `(o, i)` row `mid` times.
    pub fn expand_mid(&mut self, a: Var, outer: usize, mid: usize, inner: usize) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.nrows(), outer * inner, "expand_mid rows");
        let cols = src.ncols();
        let mut out = Matrix::zeros((outer * mid * inner, cols));
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out.row_mut((o * mid + m) * inner + i).assign(&src.row(o * inner + i));
                }
            }
        }
        let ai = a.0;
        self.push(out, &[a], move |g, _| {
            let mut ga = Matrix::zeros((outer * inner, cols));
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        let mut row = ga.row_mut(o * inner + i);
                        row += &g.row((o * mid + m) * inner + i);
                    }
                }
            }
            vec![(ai, ga)]
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.values[parts[0].0].nrows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.values[p.0].nrows(), rows, "concat_cols rows");
                self.values[p.0].ncols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Matrix::zeros((rows, total));
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            out.slice_mut(s![.., off..off + w]).assign(&self.values[p.0]);
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, parts, move |g, _| {
            let mut off = 0;
            ids.iter()
                .zip(&widths)
                .map(|(&id, &w)| {
                    let part = g.slice(s![.., off..off + w]).to_owned();
                    off += w;
                    (id, part)
                })
                .collect()
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.values[parts[0].0].ncols();
        let heights: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.values[p.0].ncols(), cols, "concat_rows cols");
                self.values[p.0].nrows()
            })
            .collect();
        let total: usize = heights.iter().sum();
        let mut out = Matrix::zeros((total, cols));
        let mut off = 0;
        for (p, &h) in parts.iter().zip(&heights) {
            out.slice_mut(s![off..off + h, ..]).assign(&self.values[p.0]);
            off += h;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, parts, move |g, _| {
            let mut off = 0;
            ids.iter()
                .zip(&heights)
                .map(|(&id, &h)| {
                    let part = g.slice(s![off..off + h, ..]).to_owned();
                    off += h;
                    (id, part)
                })
                .collect()
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.values[a.0].slice(s![.., start..end]).to_owned();
        let ai = a.0;
        let dim = self.values[a.0].raw_dim();
        self.push(out, &[a], move |g, _| {
            let mut ga = Matrix::zeros(dim);
            ga.slice_mut(s![.., start..end]).assign(g);
            vec![(ai, ga)]
        })
    }

    // ---- normalizations -------------------------------------------------

    /// Column-wise softmax within consecutive row segments of length `seg`.
    pub fn segment_softmax(&mut self, a: Var, seg: usize) -> Var {
        let src = &self.values[a.0];
        let (rows, cols) = src.dim();
        assert!(seg > 0 && rows % seg == 0, "segment_softmax rows");
        let mut out = src.clone();
        for start in (0..rows).step_by(seg) {
            let mut block = out.slice_mut(s![start..start + seg, ..]);
            for c in 0..cols {
                let mut col = block.column_mut(c);
                let mx = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                col.mapv_inplace(|x| (x - mx).exp());
                let z = col.sum();
                col.mapv_inplace(|x| x / z);
            }
        }
        let (ai, oi) = (a.0, self.next_index());
        self.push(out, &[a], move |g, v| {
            let y = &v[oi];
            let mut ga = Matrix::zeros((rows, cols));
            for start in (0..rows).step_by(seg) {
                for c in 0..cols {
                    let mut dot = 0.0;
                    for r in start..start + seg {
                        dot += y[[r, c]] * g[[r, c]];
                    }
                    for r in start..start + seg {
                        ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
            }
            vec![(ai, ga)]
        })
    }

    /// Softmax across the columns of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for mut row in out.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let (ai, oi) = (a.0, self.next_index());
        self.push(out, &[a], move |g, v| {
            let y = &v[oi];
            let mut ga = g * y;
            for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&yr).for_each(|x, &yy| *x -= yy * dot);
            }
            vec![(ai, ga)]
        })
    }

    /// Vector-neuron leaky ReLU on VN-layout features `q` with directions `d`.
    ///
    /// Per item and channel: keep `q` if `<q, d> >= 0`, otherwise remove
    /// `(1 - slope)` of its component along `d`. Directions with norm below
    /// `1e-12` leave `q` unchanged.
    pub fn vn_leaky_relu(&mut self, q: Var, d: Var, slope: f64) -> Var {
        self.check_same(q, d, "vn_leaky_relu");
        let (rows, cols) = self.values[q.0].dim();
        assert_eq!(rows % 3, 0, "VN layout needs 3 rows per item");
        let kappa = 1.0 - slope;
        let qv = &self.values[q.0];
        let dv = &self.values[d.0];
        let mut out = qv.clone();
        for n in 0..rows / 3 {
            for c in 0..cols {
                let (dot, dd) = vn_dots(qv, dv, n, c);
                if dot < 0.0 && dd >= VN_EPS * VN_EPS {
                    let coef = kappa * dot / dd;
                    for k in 0..3 {
                        out[[3 * n + k, c]] -= coef * dv[[3 * n + k, c]];
                    }
                }
            }
        }
        let (qi, di) = (q.0, d.0);
        self.push(out, &[q, d], move |g, v| {
            let (qv, dv) = (&v[qi], &v[di]);
            let mut gq = g.clone();
            let mut gd = Matrix::zeros((rows, cols));
            for n in 0..rows / 3 {
                for c in 0..cols {
                    let (dot, dd) = vn_dots(qv, dv, n, c);
                    if !(dot < 0.0 && dd >= VN_EPS * VN_EPS) {
                        continue;
                    }
                    let mut gdot = 0.0;
                    for k in 0..3 {
                        gdot += g[[3 * n + k, c]] * dv[[3 * n + k, c]];
                    }
                    for k in 0..3 {
                        let r = 3 * n + k;
                        gq[[r, c]] -= kappa * dv[[r, c]] * gdot / dd;
                        gd[[r, c]] = -kappa
                            * ((qv[[r, c]] / dd - 2.0 * dot * dv[[r, c]] / (dd * dd)) * gdot + dot / dd * g[[r, c]]);
                    }
                }
            }
            vec![(qi, gq), (di, gd)]
        })
    }

    fn check_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.values[a.0].dim(),
            self.values[b.0].dim(),
            "{op}: operand shapes differ"
        );
    }
}

pub(crate) const VN_EPS: f64 = 1e-12;

fn vn_dots(q: &Matrix, d: &Matrix, n: usize, c: usize) -> (f64, f64) {
    let mut dot = 0.0;
    let mut dd = 0.0;
    for k in 0..3 {
        let (qq, dk) = (q[[3 * n + k, c]], d[[3 * n + k, c]]);
        dot += qq * dk;
        dd += dk * dk;
    }
    (dot, dd)
}

fn to_shape(m: &Matrix, rows: usize, cols: usize) -> Matrix {
    let flat: Vec<f64> = m.iter().copied().collect();
    Matrix::from_shape_vec((rows, cols), flat).expect("reshape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Noise;

    fn random(rows: usize, cols: usize, noise: &mut Noise) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| noise.standard_normal())
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for every input entry.
    fn check_op<F>(inputs: Vec<Matrix>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut noise = Noise::new(99);
        let mut build = |inputs: &[Matrix], weight: &mut Option<Matrix>| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
            let out = f(&mut g, &vars);
            let dim = g.value(out).raw_dim();
            let w = weight
                .get_or_insert_with(|| Matrix::from_shape_fn(dim, |_| noise.standard_normal()))
                .clone();
            let wv = g.constant(w);
            let prod = g.mul(out, wv);
            let loss = g.sum_all(prod);
            (g, vars, loss)
        };
        let mut weight = None;
        let (g, vars, loss) = build(&inputs, &mut weight);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(inputs[k].raw_dim()));
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let (gp, _, lp) = build(&plus, &mut weight);
                let (gm, _, lm) = build(&minus, &mut weight);
                let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let mut n = Noise::new(1);
        check_op(vec![random(3, 4, &mut n), random(4, 2, &mut n)], |g, v| {
            g.matmul(v[0], v[1])
        });
        check_op(vec![random(3, 4, &mut n), random(5, 4, &mut n)], |g, v| {
            g.matmul_nt(v[0], v[1])
        });
        check_op(vec![random(3, 4, &mut n)], |g, v| g.transpose(v[0]));
        check_op(vec![random(6, 2, &mut n)], |g, v| g.reshape(v[0], 3, 4));
    }

    #[test]
    fn elementwise_gradients() {
        let mut n = Noise::new(2);
        let pos = random(3, 3, &mut n).mapv(|x| x.abs() + 0.5);
        check_op(vec![random(3, 3, &mut n), random(3, 3, &mut n)], |g, v| {
            g.add(v[0], v[1])
        });
        check_op(vec![random(3, 3, &mut n), random(3, 3, &mut n)], |g, v| {
            g.sub(v[0], v[1])
        });
        check_op(vec![random(3, 3, &mut n), random(3, 3, &mut n)], |g, v| {
            g.mul(v[0], v[1])
        });
        check_op(vec![random(4, 3, &mut n), random(1, 3, &mut n)], |g, v| {
            g.add_row(v[0], v[1])
        });
        check_op(vec![random(4, 3, &mut n), random(4, 1, &mut n)], |g, v| {
            g.mul_col(v[0], v[1])
        });
        check_op(vec![random(4, 3, &mut n), random(1, 1, &mut n)], |g, v| {
            g.mul_scalar(v[0], v[1])
        });
        check_op(vec![random(3, 3, &mut n)], |g, v| g.square(v[0]));
        check_op(vec![pos.clone()], |g, v| g.sqrt(v[0]));
        check_op(vec![pos.clone()], |g, v| g.recip(v[0]));
        check_op(vec![pos.clone()], |g, v| g.ln_clamped(v[0], 1e-30));
        check_op(vec![random(3, 3, &mut n)], |g, v| g.exp(v[0]));
        check_op(vec![random(3, 3, &mut n)], |g, v| g.leaky_relu(v[0], 0.2));
        check_op(vec![random(3, 3, &mut n)], |g, v| {
            let a = g.scale(v[0], -1.5);
            g.add_scalar(a, 2.0)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut n = Noise::new(3);
        check_op(vec![random(4, 3, &mut n)], |g, v| g.sum_cols(v[0]));
        check_op(vec![random(4, 3, &mut n)], |g, v| g.sum_all(v[0]));
        check_op(vec![random(4, 3, &mut n)], |g, v| {
            g.gather_rows(v[0], vec![3, 0, 0, 2, 1, 3])
        });
        check_op(vec![random(12, 2, &mut n)], |g, v| g.reduce_mid(v[0], 2, 3, 2, true));
        check_op(vec![random(12, 2, &mut n)], |g, v| g.reduce_mid(v[0], 2, 2, 3, false));
        check_op(vec![random(4, 2, &mut n)], |g, v| g.expand_mid(v[0], 2, 3, 2));
        check_op(vec![random(3, 2, &mut n), random(3, 4, &mut n)], |g, v| {
            g.concat_cols(&[v[0], v[1], v[0]])
        });
        check_op(vec![random(3, 5, &mut n)], |g, v| g.slice_cols(v[0], 1, 4));
        check_op(vec![random(2, 3, &mut n), random(4, 3, &mut n)], |g, v| {
            g.concat_rows(&[v[0], v[1], v[0]])
        });
        check_op(vec![random(6, 3, &mut n)], |g, v| g.segment_softmax(v[0], 3));
        check_op(vec![random(4, 5, &mut n)], |g, v| g.softmax_rows(v[0]));
    }

    #[test]
    fn vn_leaky_relu_gradient() {
        let mut n = Noise::new(4);
        for _ in 0..5 {
            check_op(vec![random(9, 4, &mut n), random(9, 4, &mut n)], |g, v| {
                g.vn_leaky_relu(v[0], v[1], 0.2)
            });
        }
    }

    #[test]
    fn untracked_graph_records_no_closures() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::ones((2, 2)));
        let b = g.exp(a);
        assert!(g.backward[b.0].is_none());
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut n = Noise::new(5);
        let mut g = Graph::new();
        let a = g.constant(random(8, 3, &mut n));
        let s = g.segment_softmax(a, 4);
        let v = g.value(s);
        for start in [0, 4] {
            for c in 0..3 {
                let total: f64 = (start..start + 4).map(|r| v[[r, c]]).sum();
                assert!((total - 1.0).abs() < 1e-14);
            }
        }
    }
}
