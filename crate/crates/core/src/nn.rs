//! Parameter storage, dense layers and the Adam optimizer.

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::rng::Noise;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        noise: &mut Noise,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Matrix::from_shape_fn((rows, cols), |_| noise.uniform_range(-bound, bound));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for m in &mut self.values {
            m.fill(value);
        }
    }

    /// Replaces values by name; every parameter must be present with the same shape.
    pub fn load_from(&mut self, names: &[String], values: &[Matrix]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let pos = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if values[pos].dim() != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    values[pos].dim(),
                    slot.dim()
                )));
            }
            slot.assign(&values[pos]);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, noise: &mut Noise) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, noise);
        let bias = params.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, noise);
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// Linear map without bias (used for vector-neuron channel mixing).
    pub fn no_bias(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, noise: &mut Noise) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, noise);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul_nt(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of dense layers with leaky-ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(params: &mut ParamSet, name: &str, dims: &[usize], slope: f64, noise: &mut Noise) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], noise))
            .collect();
        Self { layers, slope }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.leaky_relu(x, self.slope);
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Matrix], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_evals: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, min_lr: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            min_lr,
            patience,
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_evals = 0;
            }
        }
    }
}
