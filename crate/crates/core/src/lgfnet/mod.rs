//! Residual fusion network over windowed response sequences.
//!
//! The model consumes blocks of consecutive table rows as one-channel images
//! of shape `(batch, 1, window, d_in)`, where each row concatenates the state
//! coordinates with the low-fidelity responses. A four-stage contracting path
//! pools only along the window axis, a pool-free bottleneck applies
//! self-attention across the channel-position tokens, and the expanding path
//! mirrors the contraction with skip connections. The head maps each row's
//! feature stack to the predicted high-minus-low residual, so the fused
//! surface is always `y_l + delta`.

mod layers;

pub use layers::{bind_all, Bound, ParamId, ParamSet, BN_EPS, BN_MOMENTUM};

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, WindowPlan};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::tensor::{Graph, Mode, NodeId, Tensor};
use layers::{Conv2d, ConvBlock, LinearLayer};

/// Windows processed per evaluation batch during inference.
const INFER_BATCH: usize = 16;

/// Architecture and windowing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channel widths of the five contracting stages; each stage doubles the
    /// previous width.
    pub channels: [usize; 5],
    /// Rows per window. Four pooling stages halve it in turn, so it must be
    /// a positive multiple of 16.
    pub window: usize,
    /// Offset between consecutive training windows.
    pub stride: usize,
    /// Features per row: state coordinates plus low-fidelity responses.
    pub d_in: usize,
    /// Residual outputs per row.
    pub d_out: usize,
    /// Attention heads; must divide `d_in`.
    pub heads: usize,
    /// Dropout probability on the attention weights, training mode only.
    pub dropout: f64,
    /// Overlapping windows when true, disjoint edge-padded chunks when false.
    pub use_sliding_window: bool,
    /// Bottleneck self-attention on/off.
    pub use_attention: bool,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 {
                return Err(CoreError::invalid(
                    "network config",
                    format!("stage {} has zero channels", i + 1),
                ));
            }
        }
        for i in 0..4 {
            if self.channels[i + 1] != 2 * self.channels[i] {
                return Err(CoreError::invalid(
                    "network config",
                    format!(
                        "channel widths must double stage to stage, got {} after {}",
                        self.channels[i + 1],
                        self.channels[i]
                    ),
                ));
            }
        }
        if self.window == 0 || self.window % 16 != 0 {
            return Err(CoreError::invalid(
                "network config",
                format!(
                    "window {} is not a positive multiple of 16; four pooling stages halve it in turn",
                    self.window
                ),
            ));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(CoreError::invalid(
                "network config",
                format!("stride {} must be in 1..={}", self.stride, self.window),
            ));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(CoreError::invalid(
                "network config",
                "need at least one input feature and one output",
            ));
        }
        if self.heads == 0 || self.d_in % self.heads != 0 {
            return Err(CoreError::invalid(
                "network config",
                format!("{} heads do not divide feature width {}", self.heads, self.d_in),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::invalid(
                "network config",
                format!("dropout {} outside [0, 1)", self.dropout),
            ));
        }
        Ok(())
    }

    /// Window extent at the bottleneck.
    pub fn bottleneck_window(&self) -> usize {
        self.window / 16
    }
}

/// Bottleneck self-attention over channel-position tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Attention {
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    heads: usize,
    dropout: f64,
}

impl Attention {
    fn new(params: &mut ParamSet, d: usize, heads: usize, dropout: f64, rng: &mut ChaCha20Rng) -> Self {
        Attention {
            wq: LinearLayer::new(params, "attn.wq", d, d, rng),
            wk: LinearLayer::new(params, "attn.wk", d, d, rng),
            wv: LinearLayer::new(params, "attn.wv", d, d, rng),
            wo: LinearLayer::new(params, "attn.wo", d, d, rng),
            heads,
            dropout,
        }
    }

    /// `(b, c, l, d)` in and out. The feature map is flattened to
    /// `c*l` tokens of width `d`; the positional encoding feeds the
    /// projections while the residual path carries the raw tokens, so a zero
    /// output projection makes the whole block a no-op.
    fn apply(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let s = g.data(x).shape().to_vec();
        let (b, c, l, d) = (s[0], s[1], s[2], s[3]);
        let tokens = c * l;
        let t = g.reshape(x, &[b, tokens, d])?;
        let tp = g.add_positional_encoding(t)?;
        let q = self.wq.apply(g, bound, tp)?;
        let k = self.wk.apply(g, bound, tp)?;
        let v = self.wv.apply(g, bound, tp)?;
        let dk = d / self.heads;
        let (q, k, v) = if self.heads > 1 {
            (
                split_heads(g, q, b, tokens, self.heads, dk)?,
                split_heads(g, k, b, tokens, self.heads, dk)?,
                split_heads(g, v, b, tokens, self.heads, dk)?,
            )
        } else {
            (q, k, v)
        };
        let kt = g.transpose_last2(k)?;
        let scores = g.bmm(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let probs = g.softmax_lastdim(scaled)?;
        let probs = g.dropout(probs, self.dropout)?;
        let mixed = g.bmm(probs, v)?;
        let mixed = if self.heads > 1 {
            merge_heads(g, mixed, b, tokens, self.heads, dk)?
        } else {
            mixed
        };
        let out = self.wo.apply(g, bound, mixed)?;
        let res = g.add(t, out)?;
        g.reshape(res, &[b, c, l, d])
    }
}

fn split_heads(
    g: &mut Graph,
    x: NodeId,
    b: usize,
    tokens: usize,
    heads: usize,
    dk: usize,
) -> Result<NodeId> {
    let x = g.reshape(x, &[b, tokens, heads, dk])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, tokens, dk])
}

fn merge_heads(
    g: &mut Graph,
    x: NodeId,
    b: usize,
    tokens: usize,
    heads: usize,
    dk: usize,
) -> Result<NodeId> {
    let x = g.reshape(x, &[b, heads, tokens, dk])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, tokens, heads * dk])
}

/// The full fusion network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LgfNet {
    pub config: ArchConfig,
    pub params: ParamSet,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    attn: Option<Attention>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

impl LgfNet {
    pub fn new(config: ArchConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let ch = config.channels;

        let mut enc = Vec::with_capacity(4);
        let mut c_in = 1;
        for i in 0..4 {
            enc.push(ConvBlock::new(
                &mut params,
                &format!("enc{}", i + 1),
                c_in,
                ch[i],
                rng,
            ));
            c_in = ch[i];
        }
        let bottleneck = ConvBlock::new(&mut params, "bottleneck", ch[3], ch[4], rng);
        let attn = if config.use_attention {
            Some(Attention::new(
                &mut params,
                config.d_in,
                config.heads,
                config.dropout,
                rng,
            ))
        } else {
            None
        };
        let mut dec = Vec::with_capacity(4);
        let mut c_deep = ch[4];
        for i in (0..4).rev() {
            dec.push(ConvBlock::new(
                &mut params,
                &format!("dec{}", i + 1),
                c_deep + ch[i],
                ch[i],
                rng,
            ));
            c_deep = ch[i];
        }
        let head = Conv2d::new(
            &mut params,
            "head",
            ch[0],
            config.d_out,
            1,
            config.d_in,
            (0, 0),
            rng,
        );
        Ok(LgfNet {
            config,
            params,
            enc,
            bottleneck,
            attn,
            dec,
            head,
        })
    }

    /// Binds the parameters onto a tape; node ids follow the canonical
    /// parameter order.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        bind_all(&self.params, g)
    }

    /// Runs the network on `(b, 1, window, d_in)` input, producing the
    /// `(b, 1, window, d_out)` residual prediction.
    ///
    /// Takes `&mut self` because training mode updates the normalization
    /// layers' running statistics; evaluation mode leaves them untouched.
    pub fn forward(&mut self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let s = g.data(x).shape().to_vec();
        let expect = [self.config.window, self.config.d_in];
        if s.len() != 4 || s[1] != 1 || s[2] != expect[0] || s[3] != expect[1] {
            return Err(CoreError::ShapeMismatch {
                op: "network forward",
                got: s,
                expected: format!("(b, 1, {}, {})", expect[0], expect[1]),
            });
        }

        let mut h = x;
        let mut skips = Vec::with_capacity(4);
        for stage in &mut self.enc {
            h = stage.apply(g, bound, h)?;
            skips.push(h);
            h = g.maxpool2_l(h)?;
        }
        h = self.bottleneck.apply(g, bound, h)?;
        if let Some(attn) = &self.attn {
            h = attn.apply(g, bound, h)?;
        }
        for (i, stage) in self.dec.iter_mut().enumerate() {
            h = g.upsample2_l(h)?;
            h = g.concat_channels(h, skips[3 - i])?;
            h = stage.apply(g, bound, h)?;
        }
        let y = self.head.apply(g, bound, h)?;
        g.permute(y, &[0, 3, 2, 1])
    }

    /// Zeros the output head, making every residual prediction exactly zero
    /// in normalized units.
    pub fn zero_output_head(&mut self) {
        for id in [self.head.w, self.head.b] {
            let t = self.params.get_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().map(|t| t.numel()).sum()
    }
}

/// A trained network with the normalization and column identities it was
/// trained under, so a checkpoint alone suffices to run inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionModel {
    pub net: LgfNet,
    /// Statistics of the raw input columns (states then low-fidelity
    /// responses).
    pub input_stats: NormStats,
    /// Statistics of the raw residual targets.
    pub target_stats: NormStats,
    /// Names of the state coordinate columns, in input order.
    pub state_names: Vec<String>,
    /// Names of the fused response columns, in output order.
    pub response_names: Vec<String>,
}

impl FusionModel {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Checkpoint {
            message: format!("serialize: {e}"),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: FusionModel = serde_json::from_str(s).map_err(|e| CoreError::Checkpoint {
            message: format!("parse: {e}"),
        })?;
        model.net.config.validate()?;
        let d_in = model.net.config.d_in;
        let d_out = model.net.config.d_out;
        if model.input_stats.mean.len() != d_in || model.target_stats.mean.len() != d_out {
            return Err(CoreError::Checkpoint {
                message: format!(
                    "normalization widths {} and {} do not match the architecture ({} in, {} out)",
                    model.input_stats.mean.len(),
                    model.target_stats.mean.len(),
                    d_in,
                    d_out
                ),
            });
        }
        if model.state_names.len() + model.response_names.len() != d_in
            || model.response_names.len() != d_out
        {
            return Err(CoreError::Checkpoint {
                message: format!(
                    "{} state and {} response names do not match the architecture ({} in, {} out)",
                    model.state_names.len(),
                    model.response_names.len(),
                    d_in,
                    d_out
                ),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Residual predictions and the fused surface for one input table.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// Denormalized residual predictions, `n x d_out`.
    pub delta: Mat,
    /// `y_l + delta`, elementwise, `n x d_out`.
    pub fused: Mat,
}

/// Runs the trained model over a full table of raw inputs.
///
/// `inputs` is `n x d_in` in the model's column layout: state coordinates
/// first, then the `d_out` low-fidelity response columns. Rows are windowed
/// according to the architecture (overlapping windows averaged where they
/// overlap, or disjoint padded chunks), pushed through the network in
/// evaluation mode, and stitched back into one row-aligned prediction.
pub fn fuse_inference(model: &mut FusionModel, inputs: &Mat) -> Result<FusionOutput> {
    let config = model.net.config.clone();
    let n = inputs.rows();
    let d_in = config.d_in;
    let d_out = config.d_out;
    if inputs.cols() != d_in {
        return Err(CoreError::ShapeMismatch {
            op: "fuse inference",
            got: vec![n, inputs.cols()],
            expected: format!("n x {d_in} (states then low-fidelity responses)"),
        });
    }
    if d_out > d_in {
        return Err(CoreError::invalid(
            "fuse inference",
            "more outputs than input columns",
        ));
    }

    let mut normed = vec![0.0; n * d_in];
    for i in 0..n {
        for c in 0..d_in {
            normed[i * d_in + c] = model.input_stats.apply_value(c, inputs[(i, c)]);
        }
    }

    // Tables shorter than one window fall back to a single padded chunk;
    // sliding placement needs at least one full window of rows.
    let plan = if config.use_sliding_window && n >= config.window {
        WindowPlan::sliding(n, config.window, config.stride)?
    } else {
        WindowPlan::chunked(n, config.window)?
    };
    let window_rows = plan.extract(&normed, d_in);
    let n_windows = plan.n_windows();
    let l = config.window;

    let mut predicted = vec![0.0; n_windows * l * d_out];
    let mut w0 = 0;
    while w0 < n_windows {
        let w1 = (w0 + INFER_BATCH).min(n_windows);
        let nb = w1 - w0;
        let chunk = &window_rows[w0 * l * d_in..w1 * l * d_in];
        let x = Tensor::from_vec(&[nb, 1, l, d_in], chunk.to_vec())?;

        // Dropout is inert in evaluation mode, so the seed is irrelevant.
        let mut g = Graph::new(Mode::Eval, 0);
        let bound = model.net.bind(&mut g);
        let xid = g.leaf(x);
        let out = model.net.forward(&mut g, &bound, xid)?;
        let data = g.data(out).data();
        predicted[w0 * l * d_out..w1 * l * d_out].copy_from_slice(data);
        w0 = w1;
    }

    let stitched = plan.overlap_mean(&predicted, d_out);
    let mut delta = Mat::zeros(n, d_out);
    let mut fused = Mat::zeros(n, d_out);
    for i in 0..n {
        for c in 0..d_out {
            let dn = model.target_stats.invert_value(c, stitched[i * d_out + c]);
            delta[(i, c)] = dn;
            fused[(i, c)] = inputs[(i, d_in - d_out + c)] + dn;
        }
    }
    Ok(FusionOutput { delta, fused })
}
