//! Seeded random streams.
//!
//! Every stochastic operation draws through [`Noise`], a ChaCha stream that can
//! optionally rotate its 3D Gaussian draws. Rotating the draws lets tests couple
//! two sampler runs whose inputs differ by a rigid rotation.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a key path,
/// e.g. `(seed, [molecule, atom, t])`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(seed), |acc, &k| mix(acc ^ mix(k)))
}

/// Serializable position of a [`Noise`] stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Noise {
    rng: ChaCha8Rng,
    rotation: Option<Matrix3<f64>>,
}

impl Noise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            rotation: None,
        }
    }

    pub fn derived(seed: u64, keys: &[u64]) -> Self {
        Self::new(derive_seed(seed, keys))
    }

    /// Same stream, but every [`Noise::normal3`] draw is left-multiplied by `r`.
    pub fn rotated(mut self, r: Matrix3<f64>) -> Self {
        self.rotation = Some(r);
        self
    }

    pub fn rotation(&self) -> Option<&Matrix3<f64>> {
        self.rotation.as_ref()
    }

    /// Child stream keyed on this stream's seed; inherits the rotation.
    pub fn child(&self, keys: &[u64]) -> Self {
        let base = u64::from_le_bytes(self.rng.get_seed()[..8].try_into().unwrap());
        Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(base ^ self.rng.get_stream(), keys)),
            rotation: self.rotation,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Isotropic standard normal 3-vector (rotated if this stream is rotated).
    pub fn normal3(&mut self) -> Vector3<f64> {
        let v = Vector3::new(self.standard_normal(), self.standard_normal(), self.standard_normal());
        match &self.rotation {
            Some(r) => r * v,
            None => v,
        }
    }

    /// Draws a class index from (possibly unnormalized) probabilities.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let mut u = self.uniform() * total;
        for (k, &p) in probs.iter().enumerate() {
            if u < p {
                return k;
            }
            u -= p;
        }
        // rounding fallthrough: last class with positive mass
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self { rng, rotation: None }
    }
}
