//! The autodiff tape: nodes, primitive forward kernels, reverse accumulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{strides_of, Tensor};
use crate::error::{CoreError, Result};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics. Owned by the layer, updated by the graph
/// in training mode, read in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxLastDim(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
    },
    TransposeLast2(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: (usize, usize),
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPoolL2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    UpsampleL2(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    ConcatChannels(NodeId, NodeId),
    SliceLastDim {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatLastDim(Vec<NodeId>),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    AddPosEnc(NodeId),
    MeanAll(NodeId),
}

struct Node {
    data: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients per tape node after a backward pass. Interior node gradients are
/// consumed during accumulation; leaf gradients (parameters) remain readable.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha20Rng,
}

const BN_COUNT_MIN: usize = 1;

/// Attention tensors run to hundreds of megabytes, past glibc's mmap
/// threshold, so each graph rebuild would otherwise return them to the kernel
/// and refault every page on the next step. Keeping blocks this size on the
/// heap free-list roughly halves training wall time.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

impl Graph {
    /// `seed` drives dropout masks only; identical seed and inputs give
    /// bit-identical outputs.
    pub fn new(mode: Mode, seed: u64) -> Self {
        tune_allocator();
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].data
    }

    fn push(&mut self, data: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(
            data.is_finite(),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            data,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input node; gradients are not propagated into it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable parameter node; `backward` reports its gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    // ── elementwise ──

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.data(a), self.data(b));
        if ta.shape() != tb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: name,
                got: tb.shape().to_vec(),
                expected: format!("{:?}", ta.shape()),
            });
        }
        let shape = ta.shape().to_vec();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, op, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.data(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_vec(&t.shape().to_vec(), data).expect("scale preserves shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.data(x);
        let data: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::from_vec(&t.shape().to_vec(), data).expect("relu preserves shape");
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    // ── reductions and attention algebra ──

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.data(x);
        let n = t.numel() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), needs)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.data(x);
        let shape = t.shape().to_vec();
        let d = *shape.last().ok_or_else(|| CoreError::ShapeMismatch {
            op: "softmax_lastdim",
            got: shape.clone(),
            expected: "rank >= 1".into(),
        })?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::SoftmaxLastDim(x),
            needs,
        ))
    }

    /// Applies `w` (and optional bias) to the last axis: `y = x w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (tx, tw) = (self.data(x), self.data(w));
        if tw.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                got: tw.shape().to_vec(),
                expected: "rank-2 weight (d_in, d_out)".into(),
            });
        }
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        let d_last = *tx.shape().last().unwrap_or(&0);
        if d_last != din {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                got: tx.shape().to_vec(),
                expected: format!("last axis {din}"),
            });
        }
        if let Some(bid) = b {
            let tb = self.data(bid);
            if tb.shape() != [dout] {
                return Err(CoreError::ShapeMismatch {
                    op: "linear",
                    got: tb.shape().to_vec(),
                    expected: format!("[{dout}]"),
                });
            }
        }
        let rows = tx.numel() / din;
        let mut out = vec![0.0; rows * dout];
        {
            let xd = tx.data();
            let wd = tw.data();
            for m in 0..rows {
                let xrow = &xd[m * din..(m + 1) * din];
                let orow = &mut out[m * dout..(m + 1) * dout];
                for (k, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[k * dout..(k + 1) * dout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        if let Some(bid) = b {
            let tb = self.data(bid).data().to_vec();
            for row in out.chunks_mut(dout) {
                for (o, bv) in row.iter_mut().zip(&tb) {
                    *o += bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Linear { x, w, b }, needs))
    }

    /// Batched matrix product `(B, n, k) x (B, k, m) -> (B, n, m)`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.data(a), self.data(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::ShapeMismatch {
                op: "bmm",
                got: sb.to_vec(),
                expected: format!("(B, k, m) compatible with {sa:?}"),
            });
        }
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * n * m];
        let (ad, bd) = (ta.data(), tb.data());
        if m <= MM_NARROW && k > MM_NARROW {
            // Narrow right factor: the row-accumulation route below degrades
            // to length-m inner loops, so transpose b and take long dots.
            let mut bt = vec![0.0; k * m];
            for bi in 0..bs {
                let abase = bi * n * k;
                let bbase = bi * k * m;
                let obase = bi * n * m;
                for kk in 0..k {
                    for j in 0..m {
                        bt[j * k + kk] = bd[bbase + kk * m + j];
                    }
                }
                for i in 0..n {
                    let arow = &ad[abase + i * k..abase + (i + 1) * k];
                    for j in 0..m {
                        out[obase + i * m + j] = dot(arow, &bt[j * k..(j + 1) * k]);
                    }
                }
            }
        } else {
            for bi in 0..bs {
                let abase = bi * n * k;
                let bbase = bi * k * m;
                let obase = bi * n * m;
                for i in 0..n {
                    let arow = &ad[abase + i * k..abase + (i + 1) * k];
                    let orow = &mut out[obase + i * m..obase + (i + 1) * m];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &bd[bbase + kk * m..bbase + (kk + 1) * m];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[bs, n, m], out)?,
            Op::Bmm { a, b },
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.data(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(CoreError::ShapeMismatch {
                op: "transpose_last2",
                got: s.to_vec(),
                expected: "rank >= 2".into(),
            });
        }
        let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
        let outer: usize = s[..s.len() - 2].iter().product();
        let mut out = vec![0.0; t.numel()];
        let xd = t.data();
        for o in 0..outer {
            let base = o * n * m;
            for i in 0..n {
                for j in 0..m {
                    out[base + j * n + i] = xd[base + i * m + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::TransposeLast2(x),
            needs,
        ))
    }

    // ── convolution stack ──

    /// 2-D convolution, stride 1, explicit zero padding.
    /// `x`: (b, c_in, h, w); `w`: (c_out, c_in, kh, kw); `b`: (c_out).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let (tx, tw, tb) = (self.data(x), self.data(w), self.data(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                got: sx.to_vec(),
                expected: "(b, c_in, h, w)".into(),
            });
        }
        if sw.len() != 4 || sw[1] != sx[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                got: sw.to_vec(),
                expected: format!("(c_out, {}, kh, kw)", sx[1]),
            });
        }
        if tb.shape() != [sw[0]] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                got: tb.shape().to_vec(),
                expected: format!("[{}]", sw[0]),
            });
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kh == 0 || kw == 0 {
            return Err(CoreError::invalid("conv2d", "zero-sized kernel"));
        }
        let (ph, pw) = pad;
        let ho = (h + 2 * ph).checked_sub(kh - 1).unwrap_or(0);
        let wo = (wd + 2 * pw).checked_sub(kw - 1).unwrap_or(0);
        if ho == 0 || wo == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                got: sx.to_vec(),
                expected: format!("input large enough for kernel ({kh},{kw}) with pad ({ph},{pw})"),
            });
        }
        // Patch-matrix form: one long contiguous dot product per output value
        // instead of scattered kernel taps. The patch row layout matches the
        // weight row layout, so the dot runs over both slices directly.
        let geo = ConvGeometry {
            bsz,
            cin,
            h,
            wd,
            kh,
            kw,
            ph,
            pw,
            ho,
            wo,
        };
        let xd = tx.data();
        let wdat = tw.data();
        let bd = tb.data();
        let patches = im2col(xd, &geo);
        let k = cin * kh * kw;
        let howo = ho * wo;
        let mut out = vec![0.0; bsz * cout * howo];
        // Channel blocking keeps each streaming pass over the patch matrix
        // serving several output channels.
        let mut co0 = 0;
        while co0 < cout {
            let cb = (cout - co0).min(8);
            for r in 0..bsz * howo {
                let prow = &patches[r * k..(r + 1) * k];
                let (n, sp) = (r / howo, r % howo);
                for co in co0..co0 + cb {
                    out[(n * cout + co) * howo + sp] =
                        dot(prow, &wdat[co * k..(co + 1) * k]) + bd[co];
                }
            }
            co0 += cb;
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[bsz, cout, ho, wo], out)?,
            Op::Conv2d { x, w, b, pad },
            needs,
        ))
    }

    /// Batch normalization over (batch, h, w) per channel on a rank-4 input.
    /// Training mode normalizes with batch statistics and updates `running`;
    /// eval mode normalizes with `running` and leaves it untouched.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStats,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let tx = self.data(x);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "batchnorm2d",
                got: sx,
                expected: "(b, c, h, w)".into(),
            });
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.data(id).shape();
            if s != [c] {
                return Err(CoreError::ShapeMismatch {
                    op: "batchnorm2d",
                    got: s.to_vec(),
                    expected: format!("{name} of shape [{c}]"),
                });
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "batchnorm2d",
                got: vec![running.mean.len()],
                expected: format!("running stats of length {c}"),
            });
        }
        let plane = h * w;
        let count = bsz * plane;
        debug_assert!(count >= BN_COUNT_MIN);
        let xd = self.data(x).data().to_vec();
        let (mean, var) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for n in 0..bsz {
                        let base = (n * c + ch) * plane;
                        for v in &xd[base..base + plane] {
                            acc += v;
                        }
                    }
                    let m = acc / count as f64;
                    let mut vacc = 0.0;
                    for n in 0..bsz {
                        let base = (n * c + ch) * plane;
                        for v in &xd[base..base + plane] {
                            let d = v - m;
                            vacc += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = vacc / count as f64;
                }
                // Running update uses the unbiased variance, as is conventional.
                for ch in 0..c {
                    let unbiased = if count > 1 {
                        var[ch] * count as f64 / (count as f64 - 1.0)
                    } else {
                        var[ch]
                    };
                    running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mean[ch];
                    running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.data(gamma).data().to_vec();
        let bd = self.data(beta).data().to_vec();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for n in 0..bsz {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + plane {
                    let xh = (xd[i] - m) * is;
                    x_hat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&[bsz, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            needs,
        ))
    }

    /// Max pooling with window (2, 1): halves the h axis, keeps w.
    pub fn maxpool2_l(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.data(x);
        let s = tx.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[2] == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "maxpool2d_2x1",
                got: s.to_vec(),
                expected: "(b, c, even h, w)".into(),
            });
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = h / 2;
        let mut out = vec![0.0; bsz * c * ho * w];
        let mut argmax = vec![0usize; out.len()];
        let xd = tx.data();
        for n in 0..bsz {
            for ch in 0..c {
                let ibase = (n * c + ch) * h * w;
                let obase = (n * c + ch) * ho * w;
                for oi in 0..ho {
                    let r0 = ibase + (2 * oi) * w;
                    let r1 = r0 + w;
                    let orow = obase + oi * w;
                    for j in 0..w {
                        // Ties take the earlier row for a deterministic subgradient.
                        let (a, b) = (xd[r0 + j], xd[r1 + j]);
                        if b > a {
                            out[orow + j] = b;
                            argmax[orow + j] = r1 + j;
                        } else {
                            out[orow + j] = a;
                            argmax[orow + j] = r0 + j;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[bsz, c, ho, w], out)?,
            Op::MaxPoolL2 { x, argmax },
            needs,
        ))
    }

    /// Bilinear upsampling with factor (2, 1): doubles the h axis, keeps w.
    /// Half-pixel centers with edge clamping.
    pub fn upsample2_l(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.data(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "bilinear_upsample_2x1",
                got: s.to_vec(),
                expected: "(b, c, h, w)".into(),
            });
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = 2 * h;
        let taps = upsample_taps(h);
        let mut out = vec![0.0; bsz * c * ho * w];
        let xd = tx.data();
        for n in 0..bsz {
            for ch in 0..c {
                let ibase = (n * c + ch) * h * w;
                let obase = (n * c + ch) * ho * w;
                for (oi, &(i0, i1, f)) in taps.iter().enumerate() {
                    let r0 = ibase + i0 * w;
                    let r1 = ibase + i1 * w;
                    let orow = obase + oi * w;
                    for j in 0..w {
                        out[orow + j] = (1.0 - f) * xd[r0 + j] + f * xd[r1 + j];
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[bsz, c, ho, w], out)?,
            Op::UpsampleL2(x),
            needs,
        ))
    }

    /// Inverted dropout with keep-scale 1/(1-p). Identity in eval mode.
    /// The mask depends only on the graph seed and op order, not on values.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::invalid("dropout", format!("rate {p} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.data(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let tx = self.data(x);
        let data: Vec<f64> = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(&tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Concatenates two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.data(a), self.data(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(CoreError::ShapeMismatch {
                op: "concat_channels",
                got: sb.to_vec(),
                expected: format!("(b, *, h, w) matching {sa:?}"),
            });
        }
        let (bsz, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut out = vec![0.0; bsz * (ca + cb) * plane];
        let (ad, bd) = (ta.data(), tb.data());
        for n in 0..bsz {
            let dst = n * (ca + cb) * plane;
            out[dst..dst + ca * plane].copy_from_slice(&ad[n * ca * plane..(n + 1) * ca * plane]);
            out[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&bd[n * cb * plane..(n + 1) * cb * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[bsz, ca + cb, h, w], out)?,
            Op::ConcatChannels(a, b),
            needs,
        ))
    }

    /// Takes `[start, start+len)` of the last axis.
    pub fn slice_lastdim(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = self.data(x);
        let s = tx.shape();
        let d = *s.last().unwrap_or(&0);
        if len == 0 || start + len > d {
            return Err(CoreError::ShapeMismatch {
                op: "slice_lastdim",
                got: s.to_vec(),
                expected: format!("last axis covering [{start}, {})", start + len),
            });
        }
        let rows = tx.numel() / d;
        let mut out = vec![0.0; rows * len];
        let xd = tx.data();
        for m in 0..rows {
            out[m * len..(m + 1) * len].copy_from_slice(&xd[m * d + start..m * d + start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::SliceLastDim { x, start, len },
            needs,
        ))
    }

    /// Concatenates along the last axis; all parts share leading dimensions.
    pub fn concat_lastdim(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_lastdim", "no parts"));
        }
        let lead = self.data(parts[0]).shape()[..self.data(parts[0]).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.data(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_lastdim",
                    got: s.to_vec(),
                    expected: format!("leading dims {lead:?}"),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let pd = self.data(p).data();
            for m in 0..rows {
                out[m * total + off..m * total + off + wd]
                    .copy_from_slice(&pd[m * wd..(m + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::ConcatLastDim(parts.to_vec()),
            needs,
        ))
    }

    /// Shape reinterpretation; data order is unchanged.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let tx = self.data(x);
        let n: usize = shape.iter().product();
        if n != tx.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                got: tx.shape().to_vec(),
                expected: format!("{shape:?} with equal element count"),
            });
        }
        let out = Tensor::from_vec(shape, tx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let tx = self.data(x);
        let s = tx.shape().to_vec();
        let r = s.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of 0..{r}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(tx.data(), &s, perm, &out_shape);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Adds the sinusoidal positional table to a (b, tokens, d) tensor:
    /// feature 2i is sin(t * 10000^(-2i/d)), feature 2i+1 the matching cosine;
    /// an odd final feature is the leftover sine channel.
    pub fn add_positional_encoding(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.data(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "positional_encoding",
                got: s.to_vec(),
                expected: "(b, tokens, d)".into(),
            });
        }
        let (bsz, tokens, d) = (s[0], s[1], s[2]);
        let table = positional_table(tokens, d);
        let mut out = tx.data().to_vec();
        for n in 0..bsz {
            let base = n * tokens * d;
            for (o, t) in out[base..base + tokens * d].iter_mut().zip(&table) {
                *o += t;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[bsz, tokens, d], out)?,
            Op::AddPosEnc(x),
            needs,
        ))
    }

    /// Mean squared error over all elements: `mean((pred - target)^2)`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean_all(sq))
    }

    // ── reverse pass ──

    /// Accumulates gradients of `loss` (a scalar node) with respect to every
    /// node that can reach it; returns the per-leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let lt = self.data(loss);
        if lt.numel() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "backward",
                got: lt.shape().to_vec(),
                expected: "scalar loss".into(),
            });
        }
        if !lt.is_finite() {
            return Err(CoreError::NonFinite {
                op: "backward",
                context: "loss value".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            } else {
                grads[id].take().expect("checked above")
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => unreachable!("leaves are skipped"),
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || {
                    let data = g.data().iter().map(|v| -v).collect();
                    Tensor::from_vec(g.shape(), data).expect("same shape")
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.data(*a).data(), self.data(*b).data());
                self.accum(grads, *a, || {
                    let data = g.data().iter().zip(tb).map(|(gv, bv)| gv * bv).collect();
                    Tensor::from_vec(g.shape(), data).expect("same shape")
                });
                self.accum(grads, *b, || {
                    let data = g.data().iter().zip(ta).map(|(gv, av)| gv * av).collect();
                    Tensor::from_vec(g.shape(), data).expect("same shape")
                });
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accum(grads, *x, || {
                    let data = g.data().iter().map(|v| v * f).collect();
                    Tensor::from_vec(g.shape(), data).expect("same shape")
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x).data();
                self.accum(grads, *x, || {
                    let data = g
                        .data()
                        .iter()
                        .zip(xd)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    Tensor::from_vec(g.shape(), data).expect("same shape")
                });
            }
            Op::SoftmaxLastDim(x) => {
                let s = node.data.data();
                let d = *node.data.shape().last().unwrap();
                self.accum(grads, *x, || {
                    let mut out = vec![0.0; s.len()];
                    for ((srow, grow), orow) in s
                        .chunks(d)
                        .zip(g.data().chunks(d))
                        .zip(out.chunks_mut(d))
                    {
                        let sg = dot(srow, grow);
                        for ((o, sv), gv) in orow.iter_mut().zip(srow).zip(grow) {
                            *o = sv * (gv - sg);
                        }
                    }
                    Tensor::from_vec(g.shape(), out).expect("same shape")
                });
            }
            Op::MeanAll(x) => {
                let tx = self.data(*x);
                let gv = g.item() / tx.numel() as f64;
                self.accum(grads, *x, || {
                    Tensor::from_vec(tx.shape(), vec![gv; tx.numel()]).expect("same shape")
                });
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Bmm { a, b } => self.backprop_bmm(*a, *b, g, grads),
            Op::TransposeLast2(x) => {
                let s = node.data.shape();
                let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
                let outer: usize = s[..s.len() - 2].iter().product();
                self.accum(grads, *x, || {
                    let gd = g.data();
                    let mut out = vec![0.0; gd.len()];
                    for o in 0..outer {
                        let base = o * n * m;
                        for i in 0..n {
                            for j in 0..m {
                                out[base + j * n + i] = gd[base + i * m + j];
                            }
                        }
                    }
                    Tensor::from_vec(self.data(*x).shape(), out).expect("same count")
                });
            }
            Op::Conv2d { x, w, b, pad } => self.backprop_conv(*x, *w, *b, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => self.backprop_batchnorm(*x, *gamma, *beta, x_hat, inv_std, g, grads),
            Op::MaxPoolL2 { x, argmax } => {
                let tx = self.data(*x);
                self.accum(grads, *x, || {
                    let mut out = vec![0.0; tx.numel()];
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        out[src] += gv;
                    }
                    Tensor::from_vec(tx.shape(), out).expect("same count")
                });
            }
            Op::UpsampleL2(x) => {
                let tx = self.data(*x);
                let s = tx.shape();
                let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
                let taps = upsample_taps(h);
                self.accum(grads, *x, || {
                    let gd = g.data();
                    let mut out = vec![0.0; tx.numel()];
                    for n in 0..bsz {
                        for ch in 0..c {
                            let ibase = (n * c + ch) * h * w;
                            let obase = (n * c + ch) * 2 * h * w;
                            for (oi, &(i0, i1, f)) in taps.iter().enumerate() {
                                let orow = obase + oi * w;
                                for j in 0..w {
                                    let gv = gd[orow + j];
                                    out[ibase + i0 * w + j] += (1.0 - f) * gv;
                                    out[ibase + i1 * w + j] += f * gv;
                                }
                            }
                        }
                    }
                    Tensor::from_vec(s, out).expect("same count")
                });
            }
            Op::Dropout { x, mask } => {
                self.accum(grads, *x, || {
                    let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    Tensor::from_vec(g.shape(), data).expect("same shape")
                });
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.data(*a).shape().to_vec(), self.data(*b).shape().to_vec());
                let (bsz, ca, cb) = (sa[0], sa[1], sb[1]);
                let plane = sa[2] * sa[3];
                let gd = g.data();
                self.accum(grads, *a, || {
                    let mut out = vec![0.0; bsz * ca * plane];
                    for n in 0..bsz {
                        let src = n * (ca + cb) * plane;
                        out[n * ca * plane..(n + 1) * ca * plane]
                            .copy_from_slice(&gd[src..src + ca * plane]);
                    }
                    Tensor::from_vec(&sa, out).expect("same count")
                });
                self.accum(grads, *b, || {
                    let mut out = vec![0.0; bsz * cb * plane];
                    for n in 0..bsz {
                        let src = n * (ca + cb) * plane + ca * plane;
                        out[n * cb * plane..(n + 1) * cb * plane]
                            .copy_from_slice(&gd[src..src + cb * plane]);
                    }
                    Tensor::from_vec(&sb, out).expect("same count")
                });
            }
            Op::SliceLastDim { x, start, len } => {
                let tx = self.data(*x);
                let d = *tx.shape().last().unwrap();
                let (start, len) = (*start, *len);
                self.accum(grads, *x, || {
                    let gd = g.data();
                    let rows = tx.numel() / d;
                    let mut out = vec![0.0; tx.numel()];
                    for m in 0..rows {
                        out[m * d + start..m * d + start + len]
                            .copy_from_slice(&gd[m * len..(m + 1) * len]);
                    }
                    Tensor::from_vec(tx.shape(), out).expect("same count")
                });
            }
            Op::ConcatLastDim(parts) => {
                let total = *node.data.shape().last().unwrap();
                let rows = node.data.numel() / total;
                let gd = g.data();
                let mut off = 0;
                for &p in parts {
                    let tp = self.data(p);
                    let wd = *tp.shape().last().unwrap();
                    let start = off;
                    self.accum(grads, p, || {
                        let mut out = vec![0.0; tp.numel()];
                        for m in 0..rows {
                            out[m * wd..(m + 1) * wd]
                                .copy_from_slice(&gd[m * total + start..m * total + start + wd]);
                        }
                        Tensor::from_vec(tp.shape(), out).expect("same count")
                    });
                    off += wd;
                }
            }
            Op::Reshape(x) => {
                let tx = self.data(*x);
                self.accum(grads, *x, || {
                    Tensor::from_vec(tx.shape(), g.data().to_vec()).expect("same count")
                });
            }
            Op::Permute { x, perm } => {
                let tx = self.data(*x);
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accum(grads, *x, || {
                    let out = permute_data(g.data(), g.shape(), &inv, tx.shape());
                    Tensor::from_vec(tx.shape(), out).expect("same count")
                });
            }
            Op::AddPosEnc(x) => {
                self.accum(grads, *x, || g.clone());
            }
        }
    }

    fn accum(&self, grads: &mut Vec<Option<Tensor>>, id: NodeId, make: impl FnOnce() -> Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let contribution = make();
        match &mut grads[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contribution.shape());
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backprop_linear(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let tx = self.data(x);
        let tw = self.data(w);
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.numel() / din;
        let gd = g.data();
        if self.nodes[x.0].needs_grad {
            let wd = tw.data();
            let mut out = vec![0.0; tx.numel()];
            for m in 0..rows {
                let grow = &gd[m * dout..(m + 1) * dout];
                let xrow = &mut out[m * din..(m + 1) * din];
                for k in 0..din {
                    let wrow = &wd[k * dout..(k + 1) * dout];
                    let mut acc = 0.0;
                    for (gv, wv) in grow.iter().zip(wrow) {
                        acc += gv * wv;
                    }
                    xrow[k] = acc;
                }
            }
            self.accum(grads, x, || {
                Tensor::from_vec(tx.shape(), out).expect("same count")
            });
        }
        if self.nodes[w.0].needs_grad {
            let xd = tx.data();
            let mut out = vec![0.0; din * dout];
            for m in 0..rows {
                let xrow = &xd[m * din..(m + 1) * din];
                let grow = &gd[m * dout..(m + 1) * dout];
                for (k, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &mut out[k * dout..(k + 1) * dout];
                    for (o, gv) in wrow.iter_mut().zip(grow) {
                        *o += xv * gv;
                    }
                }
            }
            self.accum(grads, w, || {
                Tensor::from_vec(&[din, dout], out).expect("same count")
            });
        }
        if let Some(bid) = b {
            if self.nodes[bid.0].needs_grad {
                let mut out = vec![0.0; dout];
                for m in 0..rows {
                    for (o, gv) in out.iter_mut().zip(&gd[m * dout..(m + 1) * dout]) {
                        *o += gv;
                    }
                }
                self.accum(grads, bid, || {
                    Tensor::from_vec(&[dout], out).expect("same count")
                });
            }
        }
    }

    fn backprop_bmm(&self, a: NodeId, b: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let (ta, tb) = (self.data(a), self.data(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let gd = g.data();
        if self.nodes[a.0].needs_grad {
            // dA = g @ B^T
            let bd = tb.data();
            let mut out = vec![0.0; ta.numel()];
            if m <= MM_NARROW && k > MM_NARROW {
                // dA rows are sums of m scaled b-columns; with b transposed
                // those columns are contiguous.
                let mut bt = vec![0.0; k * m];
                for bi in 0..bs {
                    let gbase = bi * n * m;
                    let bbase = bi * k * m;
                    let abase = bi * n * k;
                    for kk in 0..k {
                        for j in 0..m {
                            bt[j * k + kk] = bd[bbase + kk * m + j];
                        }
                    }
                    for i in 0..n {
                        let arow = &mut out[abase + i * k..abase + (i + 1) * k];
                        for j in 0..m {
                            let gv = gd[gbase + i * m + j];
                            if gv != 0.0 {
                                axpy(arow, gv, &bt[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            } else {
                for bi in 0..bs {
                    let gbase = bi * n * m;
                    let bbase = bi * k * m;
                    let abase = bi * n * k;
                    for i in 0..n {
                        let grow = &gd[gbase + i * m..gbase + (i + 1) * m];
                        let arow = &mut out[abase + i * k..abase + (i + 1) * k];
                        for kk in 0..k {
                            arow[kk] = dot(grow, &bd[bbase + kk * m..bbase + (kk + 1) * m]);
                        }
                    }
                }
            }
            self.accum(grads, a, || {
                Tensor::from_vec(sa, out).expect("same count")
            });
        }
        if self.nodes[b.0].needs_grad {
            // dB = A^T @ g
            let ad = ta.data();
            let mut out = vec![0.0; tb.numel()];
            for bi in 0..bs {
                let gbase = bi * n * m;
                let bbase = bi * k * m;
                let abase = bi * n * k;
                for i in 0..n {
                    let arow = &ad[abase + i * k..abase + (i + 1) * k];
                    let grow = &gd[gbase + i * m..gbase + (i + 1) * m];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &mut out[bbase + kk * m..bbase + (kk + 1) * m];
                        for (o, gv) in brow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            }
            self.accum(grads, b, || {
                Tensor::from_vec(sb, out).expect("same count")
            });
        }
    }

    fn backprop_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: (usize, usize),
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let (tx, tw) = (self.data(x), self.data(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (ph, pw) = pad;
        let sg = g.shape();
        let (ho, wo) = (sg[2], sg[3]);
        let gd = g.data();
        if self.nodes[b.0].needs_grad {
            let mut out = vec![0.0; cout];
            for n in 0..bsz {
                for co in 0..cout {
                    let base = (n * cout + co) * ho * wo;
                    out[co] += gd[base..base + ho * wo].iter().sum::<f64>();
                }
            }
            self.accum(grads, b, || {
                Tensor::from_vec(&[cout], out).expect("same count")
            });
        }
        let geo = ConvGeometry {
            bsz,
            cin,
            h,
            wd,
            kh,
            kw,
            ph,
            pw,
            ho,
            wo,
        };
        let k = cin * kh * kw;
        let howo = ho * wo;
        let need_w = self.nodes[w.0].needs_grad;
        let need_x = self.nodes[x.0].needs_grad;
        if need_w {
            let patches = im2col(tx.data(), &geo);
            let mut out = vec![0.0; tw.numel()];
            for n in 0..bsz {
                for co in 0..cout {
                    let grow = &gd[(n * cout + co) * howo..(n * cout + co + 1) * howo];
                    let wg = &mut out[co * k..(co + 1) * k];
                    for (sp, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let r = n * howo + sp;
                        axpy(wg, gv, &patches[r * k..(r + 1) * k]);
                    }
                }
            }
            self.accum(grads, w, || {
                Tensor::from_vec(sw, out).expect("same count")
            });
        }
        if need_x {
            // Patch-space gradient first, then the taps fold back onto the
            // input (the exact adjoint of the im2col gather).
            let wdat = tw.data();
            let mut gp = vec![0.0; bsz * howo * k];
            for n in 0..bsz {
                for co in 0..cout {
                    let grow = &gd[(n * cout + co) * howo..(n * cout + co + 1) * howo];
                    let wrow = &wdat[co * k..(co + 1) * k];
                    for (sp, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let r = n * howo + sp;
                        axpy(&mut gp[r * k..(r + 1) * k], gv, wrow);
                    }
                }
            }
            let mut out = vec![0.0; tx.numel()];
            col2im_add(&mut out, &gp, &geo);
            self.accum(grads, x, || {
                Tensor::from_vec(sx, out).expect("same count")
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batchnorm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: &[f64],
        inv_std: &[f64],
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let tx = self.data(x);
        let s = tx.shape();
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let count = (bsz * plane) as f64;
        let gd = g.data();
        let gammad = self.data(gamma).data();
        // Channel sums shared by all three gradients.
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for n in 0..bsz {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let mut a = 0.0;
                let mut b = 0.0;
                for i in base..base + plane {
                    a += gd[i];
                    b += gd[i] * x_hat[i];
                }
                sum_g[ch] += a;
                sum_gx[ch] += b;
            }
        }
        if self.nodes[gamma.0].needs_grad {
            self.accum(grads, gamma, || {
                Tensor::from_vec(&[c], sum_gx.clone()).expect("channel count")
            });
        }
        if self.nodes[beta.0].needs_grad {
            self.accum(grads, beta, || {
                Tensor::from_vec(&[c], sum_g.clone()).expect("channel count")
            });
        }
        if self.nodes[x.0].needs_grad {
            let train = self.mode == Mode::Train;
            let mut out = vec![0.0; tx.numel()];
            for n in 0..bsz {
                for ch in 0..c {
                    let base = (n * c + ch) * plane;
                    let k = gammad[ch] * inv_std[ch];
                    if train {
                        let mg = sum_g[ch] / count;
                        let mgx = sum_gx[ch] / count;
                        for i in base..base + plane {
                            out[i] = k * (gd[i] - mg - x_hat[i] * mgx);
                        }
                    } else {
                        for i in base..base + plane {
                            out[i] = k * gd[i];
                        }
                    }
                }
            }
            self.accum(grads, x, || {
                Tensor::from_vec(s, out).expect("same count")
            });
        }
    }
}

/// Width at or below which a matmul factor counts as narrow; attention
/// products against value matrices sit far below it, plain matmuls far above.
const MM_NARROW: usize = 8;

/// Dot product over four independent accumulators so the reduction
/// vectorizes. The grouping is fixed, so results are reproducible run to run.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n4 = a.len() & !3;
    let mut acc = [0.0f64; 4];
    for (x, y) in a[..n4].chunks_exact(4).zip(b[..n4].chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in a[n4..].iter().zip(&b[n4..]) {
        s += x * y;
    }
    s
}

/// `dst += f * src`, elementwise.
fn axpy(dst: &mut [f64], f: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += f * s;
    }
}

/// Shape bundle shared by the convolution kernels.
struct ConvGeometry {
    bsz: usize,
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

/// Gathers convolution patches: one row per output position `(n, oi, oj)`,
/// one column per kernel tap `(ci, u, v)` in weight-row order. Taps that fall
/// outside the padded input stay zero.
fn im2col(xd: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.cin * g.kh * g.kw;
    let mut patches = vec![0.0; g.bsz * g.ho * g.wo * k];
    for n in 0..g.bsz {
        let nbase = n * g.ho * g.wo;
        for ci in 0..g.cin {
            let xbase = (n * g.cin + ci) * g.h * g.wd;
            let kbase = ci * g.kh * g.kw;
            for u in 0..g.kh {
                let oi_lo = g.ph.saturating_sub(u);
                let oi_hi = (g.h + g.ph - u).min(g.ho);
                for oi in oi_lo..oi_hi {
                    let ii = oi + u - g.ph;
                    let xrow = &xd[xbase + ii * g.wd..xbase + (ii + 1) * g.wd];
                    let rbase = (nbase + oi * g.wo) * k + kbase + u * g.kw;
                    for oj in 0..g.wo {
                        let v_lo = g.pw.saturating_sub(oj);
                        let v_hi = (g.wd + g.pw - oj).min(g.kw);
                        if v_lo >= v_hi {
                            continue;
                        }
                        patches[rbase + oj * k + v_lo..rbase + oj * k + v_hi]
                            .copy_from_slice(&xrow[oj + v_lo - g.pw..oj + v_hi - g.pw]);
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of [`im2col`]: accumulates a patch-space gradient back onto the
/// input layout. Zero-padded taps have no source position and are dropped.
fn col2im_add(out: &mut [f64], gp: &[f64], g: &ConvGeometry) {
    let k = g.cin * g.kh * g.kw;
    for n in 0..g.bsz {
        let nbase = n * g.ho * g.wo;
        for ci in 0..g.cin {
            let xbase = (n * g.cin + ci) * g.h * g.wd;
            let kbase = ci * g.kh * g.kw;
            for u in 0..g.kh {
                let oi_lo = g.ph.saturating_sub(u);
                let oi_hi = (g.h + g.ph - u).min(g.ho);
                for oi in oi_lo..oi_hi {
                    let ii = oi + u - g.ph;
                    let xrow = &mut out[xbase + ii * g.wd..xbase + (ii + 1) * g.wd];
                    let rbase = (nbase + oi * g.wo) * k + kbase + u * g.kw;
                    for oj in 0..g.wo {
                        let v_lo = g.pw.saturating_sub(oj);
                        let v_hi = (g.wd + g.pw - oj).min(g.kw);
                        if v_lo >= v_hi {
                            continue;
                        }
                        let src = &gp[rbase + oj * k + v_lo..rbase + oj * k + v_hi];
                        let dst = &mut xrow[oj + v_lo - g.pw..oj + v_hi - g.pw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps for doubling an axis of length `h` with half-pixel
/// centers and edge clamping: output row `oi` reads input rows `(i0, i1)`
/// with weight `f` on `i1`.
fn upsample_taps(h: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * h)
        .map(|oi| {
            let src = (oi as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let f = src - floor;
            let i0 = floor as isize;
            let clamp = |i: isize| i.clamp(0, h as isize - 1) as usize;
            (clamp(i0), clamp(i0 + 1), f)
        })
        .collect()
}

fn permute_data(src: &[f64], src_shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let rank = src_shape.len();
    let src_strides = strides_of(src_shape);
    let out_strides = strides_of(out_shape);
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for (flat, v) in src.iter().enumerate() {
        // Decode the source multi-index.
        let mut rem = flat;
        for (i, st) in src_strides.iter().enumerate() {
            idx[i] = rem / st;
            rem %= st;
        }
        // Output axis i carries source axis perm[i].
        let mut oflat = 0;
        for (i, &p) in perm.iter().enumerate() {
            oflat += idx[p] * out_strides[i];
        }
        out[oflat] = *v;
    }
    out
}

/// The sinusoidal table for `tokens` positions at width `d`, row-major.
pub fn positional_table(tokens: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; tokens * d];
    for t in 0..tokens {
        for k in 0..d {
            let pair = k - (k % 2);
            let omega = (-((pair as f64) / d as f64) * 10000f64.ln()).exp();
            let angle = t as f64 * omega;
            table[t * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}
