//! Parameter storage and the layer building blocks of the fusion network.
//!
//! All learnable tensors live in one [`ParamSet`] in creation order; layers
//! keep indices into it. Binding the set onto a tape yields node ids in the
//! same order, so optimizer state, gradients, and checkpoints all share a
//! single canonical enumeration and cannot drift apart.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, NodeId, RunningStats, Tensor};

/// Index of one learnable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
}

/// All learnable tensors of a network, in creation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Copies every tensor whose name also exists in `other`. Shapes must
    /// match where names do.
    pub fn copy_matching(&mut self, other: &ParamSet) {
        for entry in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|e| e.name == entry.name) {
                assert_eq!(
                    entry.tensor.shape(),
                    src.tensor.shape(),
                    "parameter '{}' changed shape",
                    entry.name
                );
                entry.tensor = src.tensor.clone();
            }
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Node ids of a [`ParamSet`] bound onto one tape, aligned with the set's
/// canonical order.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Loads every parameter onto the tape as a gradient-carrying leaf.
pub fn bind_all(params: &ParamSet, g: &mut Graph) -> Bound {
    Bound {
        ids: params.tensors().map(|t| g.param(t.clone())).collect(),
    }
}

fn uniform_init(
    params: &mut ParamSet,
    name: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha20Rng,
) -> ParamId {
    let bound = (1.0 / fan_in as f64).sqrt();
    params.add(name, Tensor::uniform(shape, bound, rng))
}

/// 2d convolution with bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        pad: (usize, usize),
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = c_in * kh * kw;
        let w = uniform_init(params, format!("{name}.w"), &[c_out, c_in, kh, kw], fan_in, rng);
        let b = uniform_init(params, format!("{name}.b"), &[c_out], fan_in, rng);
        Conv2d { w, b, pad }
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, bound.id(self.w), bound.id(self.b), self.pad)
    }
}

/// Batch normalization over the channel axis, with running statistics for
/// evaluation mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        BatchNorm2d {
            gamma,
            beta,
            stats: RunningStats::new(channels),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        g.batchnorm2d(
            x,
            bound.id(self.gamma),
            bound.id(self.beta),
            &mut self.stats,
            BN_EPS,
            BN_MOMENTUM,
        )
    }
}

/// Bias-free linear projection over the last axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearLayer {
    pub w: ParamId,
}

impl LinearLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let w = uniform_init(params, format!("{name}.w"), &[d_in, d_out], d_in, rng);
        LinearLayer { w }
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        g.linear(x, bound.id(self.w), None)
    }
}

/// Two conv-norm-relu blocks, the repeating unit of both the contracting and
/// the expanding path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        ConvBlock {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), c_in, c_out, 3, 3, (1, 1), rng),
            bn1: BatchNorm2d::new(params, &format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), c_out, c_out, 3, 3, (1, 1), rng),
            bn2: BatchNorm2d::new(params, &format!("{name}.bn2"), c_out),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.apply(g, bound, x)?;
        let h = self.bn1.apply(g, bound, h)?;
        let h = g.relu(h);
        let h = self.conv2.apply(g, bound, h)?;
        let h = self.bn2.apply(g, bound, h)?;
        Ok(g.relu(h))
    }
}
