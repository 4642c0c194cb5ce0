//! Named parameter storage shared by every trainable module.
//!
//! Slots are handed out in construction order, which fixes both the
//! checkpoint layout and the initialization RNG stream.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Mat, NodeId};

pub type Slot = usize;

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> Slot {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, slot: Slot) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: Slot) -> &Mat {
        &self.values[slot]
    }

    pub fn set(&mut self, slot: Slot, value: Mat) {
        assert_eq!(self.values[slot].dim(), value.dim(), "shape change on {}", self.names[slot]);
        self.values[slot] = value;
    }

    pub fn entry_mut(&mut self, slot: Slot) -> &mut Mat {
        &mut self.values[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Materialize a parameter as a graph leaf.
    pub fn node(&self, g: &mut Graph, slot: Slot) -> NodeId {
        g.param(slot, self.values[slot].clone())
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Seeded symmetric scale-controlled initialization: every tensor is drawn
/// in declaration order from one ChaCha stream.
pub struct Initializer {
    rng: ChaCha12Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    /// Uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)) with `fan_in = rows`.
    pub fn uniform_fan_in(&mut self, rows: usize, cols: usize) -> Mat {
        let bound = 1.0 / (rows as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound))
    }

    /// Uniform with an explicit fan-in (for kernels whose rows are taps).
    pub fn uniform_with_fan_in(&mut self, rows: usize, cols: usize, fan_in: usize) -> Mat {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound))
    }

    /// Identity on the leading diagonal plus small uniform noise.
    pub fn identity_plus_noise(&mut self, rows: usize, cols: usize, eps: f64) -> Mat {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let base = if r == c { 1.0 } else { 0.0 };
            base + self.rng.random_range(-eps..eps)
        })
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Mat {
        Array2::zeros((rows, cols))
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Mat {
        Array2::ones((rows, cols))
    }
}
