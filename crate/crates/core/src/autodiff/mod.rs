//! Reverse-mode differentiable arrays.
//!
//! A [`Tape`] records one computation graph over 2-D `f64` arrays. Every
//! operation validates shapes, computes forward values, registers a backward
//! rule and faults on any non-finite result. [`Tape::backward`] walks the
//! records in reverse insertion order (which is a topological order by
//! construction), visiting each node exactly once.
//!
//! Parameters enter a graph through [`Tape::param`], which leases the array
//! from a [`ParamSet`]; after a backward pass their gradients are folded into
//! a [`GradBuffer`] with [`Tape::accumulate_param_grads`].

mod attention;
pub mod gradcheck;
mod ops;
#[cfg(test)]
mod tests;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::params::{GradBuffer, ParamSet};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },
    #[error("{op}: {msg}")]
    BadArg { op: &'static str, msg: String },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
}

/// Handle to one array recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(ArrayId, ArrayId),
    Sub(ArrayId, ArrayId),
    Mul(ArrayId, ArrayId),
    Scale(ArrayId, f64),
    AddBias(ArrayId, ArrayId),
    Matmul(ArrayId, ArrayId),
    Tanh(ArrayId),
    Gelu(ArrayId),
    Exp(ArrayId),
    SoftmaxRows(ArrayId),
    LogSoftmaxRows(ArrayId),
    LayerNorm { x: ArrayId, gain: ArrayId, bias: ArrayId, stats: Vec<(f64, f64)> },
    Dropout { x: ArrayId, mask_scale: Vec<f64> },
    Reshape(ArrayId),
    ConcatRows(Vec<ArrayId>),
    SliceRows { x: ArrayId, start: usize },
    GatherRows { x: ArrayId, indices: Vec<usize> },
    SelectPerRow { x: ArrayId, indices: Vec<usize> },
    Clamp { x: ArrayId, lo: f64, hi: f64 },
    MinElem(ArrayId, ArrayId),
    SumAll(ArrayId),
    MeanAll(ArrayId),
    CausalAttention { q: ArrayId, k: ArrayId, v: ArrayId, heads: usize, weights: Vec<f64> },
    PooledAttention {
        q: ArrayId,
        k: ArrayId,
        v: ArrayId,
        heads: usize,
        group: usize,
        mask: Vec<bool>,
        weights: Vec<f64>,
    },
    CrossEntropy { logits: ArrayId, targets: Vec<usize>, mask: Vec<f64>, probs: Vec<f64> },
}

/// Recording tape for one forward/backward pass.
pub struct Tape {
    pub(crate) shapes: Vec<(usize, usize)>,
    pub(crate) vals: Vec<Vec<f64>>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    pub(crate) ops: Vec<Op>,
    leases: Vec<(usize, ArrayId)>,
    train: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl Tape {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            leases: Vec::new(),
            train: false,
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    /// Training-mode tape; dropout masks are drawn from a counter-based
    /// stream so a given (seed, call index) pair always yields the same mask.
    pub fn training(dropout_seed: u64) -> Self {
        let mut t = Self::new();
        t.train = true;
        t.dropout_seed = dropout_seed;
        t
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Number of dropout calls recorded so far (for run logs).
    pub fn dropout_calls(&self) -> u64 {
        self.dropout_calls
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: ArrayId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn values(&self, id: ArrayId) -> &[f64] {
        &self.vals[id.0]
    }

    pub fn grad(&self, id: ArrayId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Value of a 1x1 array.
    pub fn scalar(&self, id: ArrayId) -> f64 {
        debug_assert_eq!(self.shapes[id.0], (1, 1));
        self.vals[id.0][0]
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        op: Op,
    ) -> Result<ArrayId, NumericsError> {
        debug_assert_eq!(values.len(), rows * cols);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        self.shapes.push((rows, cols));
        self.vals.push(values);
        self.grads.push(None);
        self.ops.push(op);
        Ok(ArrayId(self.ops.len() - 1))
    }

    /// Record an input array.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<ArrayId, NumericsError> {
        if values.len() != rows * cols {
            return Err(NumericsError::BadArg {
                op: "leaf",
                msg: format!("{} values for a {rows}x{cols} array", values.len()),
            });
        }
        self.push("leaf", rows, cols, values, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Result<ArrayId, NumericsError> {
        self.leaf(1, 1, vec![value])
    }

    /// Lease a parameter array into the graph.
    pub fn param(&mut self, set: &ParamSet, idx: usize) -> Result<ArrayId, NumericsError> {
        let e = set.entry(idx);
        let id = self.push("param", e.rows, e.cols, e.values.clone(), Op::Leaf)?;
        self.leases.push((idx, id));
        Ok(id)
    }

    /// Draw a dropout mask from the counter-based stream.
    pub(crate) fn next_dropout_mask(&mut self, n: usize, rate: f64) -> Vec<f64> {
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.dropout_seed, "dropout", call));
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        (0..n)
            .map(|_| if rng.gen_range(0.0..1.0) < keep { scale } else { 0.0 })
            .collect()
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once in
    /// reverse insertion order.
    pub fn backward(&mut self, loss: ArrayId) -> Result<(), NumericsError> {
        if self.shapes[loss.0] != (1, 1) {
            return Err(NumericsError::NonScalarLoss(self.shapes[loss.0]));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
            self.scatter(i, &g)?;
        }
        // leaf gradients stay on the tape; fault on non-finite ones too
        for (i, op) in self.ops.iter().enumerate() {
            if matches!(op, Op::Leaf) {
                if let Some(g) = &self.grads[i] {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(NumericsError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn ensure_grad(&mut self, id: ArrayId) -> &mut [f64] {
        let n = self.shapes[id.0].0 * self.shapes[id.0].1;
        self.grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Fold leased parameter gradients into `buf`, scaled by `scale`, in
    /// lease order.
    pub fn accumulate_param_grads(&self, buf: &mut GradBuffer, scale: f64) {
        for &(idx, id) in &self.leases {
            if let Some(g) = &self.grads[id.0] {
                let dst = buf.array_mut(idx);
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s * scale;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
