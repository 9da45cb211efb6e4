//! Reverse-mode automatic differentiation over dense f64 matrices, plus the
//! Adam optimizer and the binary tensor checkpoint container shared by both
//! trainable models.
//!
//! The engine is a per-example tape: each training example builds a small
//! graph, runs one backward pass, and contributes gradients that the caller
//! accumulates. Parameters enter graphs as shared leaves (`Arc` clones, no
//! copying); embedding-table lookups produce sparse row gradients so large
//! tables never materialize dense gradient buffers.

pub mod adam;
pub mod checkpoint;
pub mod graph;

pub use adam::Adam;
pub use graph::{Graph, NodeId, SparseGrad};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense matrix alias used throughout the models.
pub type Mat = Array2<f64>;

/// Draws an (rows x cols) matrix with N(0, std^2) entries via Box-Muller,
/// keeping the stream independent of rand's distribution internals.
pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            m[(i, j)] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
        }
    }
    m
}

/// Seeds a ChaCha stream for a named component.
pub fn component_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, label))
}

/// Named parameter collection addressed by stable visit order.
///
/// Models register every parameter tensor here; training, checkpointing, and
/// gradient checks all iterate the same order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<std::sync::Arc<Mat>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a tensor and returns its slot index.
    pub fn register(&mut self, name: &str, tensor: Mat) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(std::sync::Arc::new(tensor));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn get(&self, slot: usize) -> &Mat {
        &self.tensors[slot]
    }

    /// Shared handle for inserting into a graph without copying.
    pub fn shared(&self, slot: usize) -> std::sync::Arc<Mat> {
        std::sync::Arc::clone(&self.tensors[slot])
    }

    /// Mutable access for the optimizer; clones only if a graph still holds
    /// the tensor.
    pub fn get_mut(&mut self, slot: usize) -> &mut Mat {
        std::sync::Arc::make_mut(&mut self.tensors[slot])
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter().map(|t| t.as_ref()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Dense gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Mat>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let grads = (0..params.len())
            .map(|s| Array2::zeros(params.get(s).dim()))
            .collect();
        Self { grads }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, slot: usize) -> &Mat {
        &self.grads[slot]
    }

    /// Adds `scale * grad` into a slot.
    pub fn add_dense(&mut self, slot: usize, grad: &Mat, scale: f64) {
        self.grads[slot].scaled_add(scale, grad);
    }

    /// Adds `scale * grad` into specific rows of a slot.
    pub fn add_rows(&mut self, slot: usize, rows: &[usize], grad: &Mat, scale: f64) {
        for (local, &row) in rows.iter().enumerate() {
            let mut target = self.grads[slot].row_mut(row);
            target.scaled_add(scale, &grad.row(local));
        }
    }
}
