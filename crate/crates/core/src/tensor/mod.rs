//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! The engine is a tape: [`Graph`] records every primitive application as a
//! node holding its output values and the op that produced it, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! The primitive set is exactly what the fusion network needs (conv, batch
//! norm, pooling, bilinear upsampling, attention algebra, dropout); there is
//! no broadcasting and no implicit casting. Everything is deterministic for a
//! fixed seed, including dropout masks.

mod graph;
#[cfg(test)]
mod tests;

pub use graph::{positional_table, Gradients, Graph, Mode, NodeId, RunningStats};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Row-major dense tensor. Shapes are explicit; operations never broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor_from_vec",
                got: vec![data.len()],
                expected: format!("{n} elements for shape {shape:?}"),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Symmetric uniform init on `(-bound, bound)`, the fan-in scaled scheme
    /// used for every trainable tensor in the network.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar (1-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // x * 0.0 is zero only for finite x; summing those products turns the
        // check into a plain reduction, which runs far faster than an
        // early-exit scan on the large tensors this guards.
        let d = &self.data;
        let n4 = d.len() & !3;
        let mut acc = [0.0f64; 4];
        for c in d[..n4].chunks_exact(4) {
            acc[0] += c[0] * 0.0;
            acc[1] += c[1] * 0.0;
            acc[2] += c[2] * 0.0;
            acc[3] += c[3] * 0.0;
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for &v in &d[n4..] {
            s += v * 0.0;
        }
        s == 0.0
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                got: self.shape.clone(),
                expected: format!("shape with {} elements, requested {shape:?}", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
