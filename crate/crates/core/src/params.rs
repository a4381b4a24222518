//! Named parameter arrays shared by the networks and the optimizer.
//!
//! A [`ParamSet`] owns the learnable arrays of one model in a fixed insertion
//! order; gradients live in a parallel [`GradBuffer`]. The order is part of
//! the model definition, so optimizer state and checkpoints line up
//! deterministically.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter `{name}` has {actual} values, expected {rows}x{cols}")]
    BadLength { name: String, rows: usize, cols: usize, actual: usize },
    #[error("gradient buffer has {actual} arrays, parameter set has {expected}")]
    GradArity { expected: usize, actual: usize },
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<usize, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::DuplicateName(name));
        }
        if values.len() != rows * cols {
            return Err(ParamError::BadLength { name, rows, cols, actual: values.len() });
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(ParamEntry { name, rows, cols, values });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    // Box-Muller on uniform draws keeps us independent of distribution crates.
    let n = rows * cols;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos() * std);
        if out.len() < n {
            out.push(r * theta.sin() * std);
        }
    }
    out
}

/// Gradient arrays aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { grads: params.iter().map(|e| vec![0.0; e.values.len()]).collect() }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn array(&self, idx: usize) -> &[f64] {
        &self.grads[idx]
    }

    pub fn array_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.grads[idx]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `self += other * scale`, in fixed array order.
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) -> Result<(), ParamError> {
        if self.grads.len() != other.grads.len() {
            return Err(ParamError::GradArity { expected: self.grads.len(), actual: other.grads.len() });
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
        Ok(())
    }

    /// Global L2 norm over all arrays.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for g in &mut self.grads {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
}
