//! The gradient tape.
//!
//! A [`Graph`] is an append-only record of executed operations. Every op
//! pushes one node holding the result value plus enough metadata to replay
//! its adjoint; [`Graph::backward`] walks the record once in reverse and
//! accumulates gradients additively into every participating node.
//!
//! Node indices are already a topological order (an op can only consume
//! previously created nodes), so the reverse sweep needs no explicit sort.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

/// Per-channel running mean/variance kept by batch normalization across
/// training steps. Initialized to mean 0, variance 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningMoments<T> {
    pub fn new(channels: usize) -> Self {
        RunningMoments {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Which statistics batch normalization uses, and whether it updates them.
pub enum BnMode<'a, T> {
    /// Normalize with the current batch statistics and fold them into the
    /// running moments.
    Train {
        running: &'a mut RunningMoments<T>,
        momentum: T,
    },
    /// Normalize with stored running moments; nothing is mutated.
    Infer { running: &'a RunningMoments<T> },
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        // per-channel statistics actually used by the forward pass
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    BroadcastMul {
        features: usize,
        alpha: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    Ln {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    MeanAll {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Append-only operation tape over rank-4 tensors.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Only leaves with `requires_grad` (and the
    /// ops derived from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "Var belongs to a different graph");
        &self.nodes[v.idx].value
    }

    /// Gradient of the last `backward` call, if this node participated.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.graph, self.id, "Var belongs to a different graph");
        self.nodes[v.idx].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.value(v).shape();
        self.grad(v)
            .map(|g| Tensor::new(shape, g.to_vec()).expect("grad has value shape"))
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "{op}: tensor is not on this tape"
            )));
        }
        Ok(v.idx)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    // ---- operators ------------------------------------------------------

    /// 2D cross-correlation with a 3x3 (pad 1) or 1x1 (pad 0) kernel,
    /// stride 1; spatial size is preserved. `weight` is `(c_out, c_in, k, k)`
    /// and `bias` is `(c_out, 1, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xi = self.check(x, "conv2d")?;
        let wi = self.check(weight, "conv2d")?;
        let bi = self.check(bias, "conv2d")?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let bs = self.nodes[bi].value.shape();
        if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
            return Err(Error::Config(format!(
                "conv2d: unsupported kernel size {}x{}, only 1x1 and 3x3 are supported",
                ws.h, ws.w
            )));
        }
        if ws.c != xs.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: format!("input {xs}"),
                rhs: format!("weight {ws}"),
            });
        }
        if bs != (Shape { n: ws.n, c: 1, h: 1, w: 1 }) {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: format!("weight {ws}"),
                rhs: format!("bias {bs}"),
            });
        }
        let k = ws.h;
        let pad = if k == 3 { 1 } else { 0 };
        let out = conv2d_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            k,
            pad,
        );
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        Ok(self.push(
            out,
            needs,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                k,
                pad,
            },
        ))
    }

    /// Per-channel batch normalization over the `(n, h, w)` axes followed by
    /// the learned scale/shift. `gamma` and `beta` are `(c, 1, 1, 1)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<Var> {
        let xi = self.check(x, "batch_norm")?;
        let gi = self.check(gamma, "batch_norm")?;
        let bi = self.check(beta, "batch_norm")?;
        let xs = self.nodes[xi].value.shape();
        let c = xs.c;
        let want = Shape { n: c, c: 1, h: 1, w: 1 };
        for (name, i) in [("gamma", gi), ("beta", bi)] {
            let got = self.nodes[i].value.shape();
            if got != want {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: format!("input {xs}"),
                    rhs: format!("{name} {got}"),
                });
            }
        }
        let per = xs.n * xs.plane_len();
        let (mean, invstd, train) = match mode {
            BnMode::Train { running, momentum } => {
                if running.mean.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: format!("input {xs}"),
                        rhs: format!("running stats over {} channels", running.mean.len()),
                    });
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for n in 0..xs.n {
                        for &v in self.nodes[xi].value.plane(n, ch) {
                            acc += v.as_f64();
                        }
                    }
                    mean[ch] = acc / per as f64;
                    let mut sq = 0.0f64;
                    for n in 0..xs.n {
                        for &v in self.nodes[xi].value.plane(n, ch) {
                            let d = v.as_f64() - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / per as f64;
                    if !var[ch].is_finite() {
                        return Err(Error::Numeric(format!(
                            "batch_norm: non-finite batch variance in channel {ch}"
                        )));
                    }
                }
                let m = momentum.as_f64();
                for ch in 0..c {
                    running.mean[ch] =
                        T::from_f64((1.0 - m) * running.mean[ch].as_f64() + m * mean[ch]);
                    running.var[ch] =
                        T::from_f64((1.0 - m) * running.var[ch].as_f64() + m * var[ch]);
                }
                let eps = eps.as_f64();
                let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (mean, invstd, true)
            }
            BnMode::Infer { running } => {
                if running.mean.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: format!("input {xs}"),
                        rhs: format!("running stats over {} channels", running.mean.len()),
                    });
                }
                let eps = eps.as_f64();
                let mean = running.mean.iter().map(|&v| v.as_f64()).collect();
                let invstd = running
                    .var
                    .iter()
                    .map(|&v| 1.0 / (v.as_f64() + eps).sqrt())
                    .collect();
                (mean, invstd, false)
            }
        };
        let mut out = Tensor::zeros(xs);
        for ch in 0..c {
            let g = self.nodes[gi].value.data()[ch].as_f64();
            let b = self.nodes[bi].value.data()[ch].as_f64();
            for n in 0..xs.n {
                let src = self.nodes[xi].value.plane(n, ch);
                let start = xs.plane(n, ch);
                let dst = &mut out.data_mut()[start..start + xs.plane_len()];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = T::from_f64(g * (v.as_f64() - mean[ch]) * invstd[ch] + b);
                }
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        Ok(self.push(
            out,
            needs,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean,
                invstd,
                train,
            },
        ))
    }

    /// Rectified linear activation, `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "relu")?;
        let out = self.nodes[xi].value.map(|v| v.max(T::zero()));
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::Relu { x: xi }))
    }

    /// Logistic sigmoid. Saturates into the open interval `(0, 1)`: extreme
    /// inputs land on the closest representable value inside it rather than
    /// exactly 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "sigmoid")?;
        let half = T::from_f64(0.5);
        let floor = T::min_positive_value();
        let ceil = T::one() - T::epsilon() * half;
        let out = self.nodes[xi].value.map(|v| {
            let y = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            y.max(floor).min(ceil)
        });
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::Sigmoid { x: xi }))
    }

    /// One 2x2 max-pool with stride 2. Ties route the gradient to the first
    /// maximum in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "downsample2")?;
        let xs = self.nodes[xi].value.shape();
        if !xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "downsample2",
                lhs: format!("input {xs}"),
                rhs: "2x2 pooling window".to_string(),
            });
        }
        assert!(xs.count() < u32::MAX as usize);
        let os = Shape {
            n: xs.n,
            c: xs.c,
            h: xs.h / 2,
            w: xs.w / 2,
        };
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0u32; os.count()];
        let mut oi = 0usize;
        for n in 0..xs.n {
            for ch in 0..xs.c {
                let base = xs.plane(n, ch);
                let plane = self.nodes[xi].value.plane(n, ch);
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let i00 = (2 * oy) * xs.w + 2 * ox;
                        let cand = [i00, i00 + 1, i00 + xs.w, i00 + xs.w + 1];
                        let mut best = cand[0];
                        for &c in &cand[1..] {
                            if plane[c] > plane[best] {
                                best = c;
                            }
                        }
                        out.data_mut()[oi] = plane[best];
                        argmax[oi] = (base + best) as u32;
                        oi += 1;
                    }
                }
            }
        }
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::MaxPool2 { x: xi, argmax }))
    }

    /// Repeated 2x2 max-pooling until the spatial size is divided by
    /// `factor` (a power of two; 1 is the identity).
    pub fn downsample2(&mut self, x: Var, factor: usize) -> Result<Var> {
        let levels = pow2_levels(factor, "downsample2")?;
        let xi = self.check(x, "downsample2")?;
        let xs = self.nodes[xi].value.shape();
        if !xs.h.is_multiple_of(factor) || !xs.w.is_multiple_of(factor) {
            return Err(Error::ShapeMismatch {
                op: "downsample2",
                lhs: format!("input {xs}"),
                rhs: format!("factor {factor}"),
            });
        }
        let mut v = x;
        for _ in 0..levels {
            v = self.max_pool2(v)?;
        }
        Ok(v)
    }

    /// Nearest-neighbor upsampling: every pixel becomes a `factor x factor`
    /// block (`factor` a power of two; 1 is the identity).
    pub fn upsample2(&mut self, x: Var, factor: usize) -> Result<Var> {
        pow2_levels(factor, "upsample2")?;
        let xi = self.check(x, "upsample2")?;
        if factor == 1 {
            return Ok(x);
        }
        let xs = self.nodes[xi].value.shape();
        let os = Shape {
            n: xs.n,
            c: xs.c,
            h: xs.h * factor,
            w: xs.w * factor,
        };
        let mut out = Tensor::zeros(os);
        for n in 0..xs.n {
            for ch in 0..xs.c {
                let src = self.nodes[xi].value.plane(n, ch);
                let start = os.plane(n, ch);
                let dst = &mut out.data_mut()[start..start + os.plane_len()];
                for oy in 0..os.h {
                    let sy = oy / factor;
                    for ox in 0..os.w {
                        dst[oy * os.w + ox] = src[sy * xs.w + ox / factor];
                    }
                }
            }
        }
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::Upsample { x: xi, factor }))
    }

    /// Channel concatenation: `a`'s channels first, then `b`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a, "concat_channels")?;
        let bi = self.check(b, "concat_channels")?;
        let sa = self.nodes[ai].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        let os = Shape {
            n: sa.n,
            c: sa.c + sb.c,
            h: sa.h,
            w: sa.w,
        };
        let mut out = Tensor::zeros(os);
        let pl = sa.plane_len();
        for n in 0..sa.n {
            let dst_a = os.plane(n, 0);
            out.data_mut()[dst_a..dst_a + sa.c * pl]
                .copy_from_slice(&self.nodes[ai].value.data()[sa.plane(n, 0)..sa.plane(n, 0) + sa.c * pl]);
            let dst_b = os.plane(n, sa.c);
            out.data_mut()[dst_b..dst_b + sb.c * pl]
                .copy_from_slice(&self.nodes[bi].value.data()[sb.plane(n, 0)..sb.plane(n, 0) + sb.c * pl]);
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, needs, Op::Concat { a: ai, b: bi }))
    }

    /// Multiply every feature channel elementwise by a single-channel map:
    /// `out[n,c,y,x] = features[n,c,y,x] * alpha[n,0,y,x]`.
    pub fn broadcast_mul(&mut self, features: Var, alpha: Var) -> Result<Var> {
        let fi = self.check(features, "broadcast_mul")?;
        let ai = self.check(alpha, "broadcast_mul")?;
        let fs = self.nodes[fi].value.shape();
        let as_ = self.nodes[ai].value.shape();
        if as_.c != 1 || as_.n != fs.n || as_.h != fs.h || as_.w != fs.w {
            return Err(Error::ShapeMismatch {
                op: "broadcast_mul",
                lhs: format!("features {fs}"),
                rhs: format!("alpha {as_} (one channel required)"),
            });
        }
        let mut out = Tensor::zeros(fs);
        let pl = fs.plane_len();
        for n in 0..fs.n {
            let amap = self.nodes[ai].value.plane(n, 0);
            for ch in 0..fs.c {
                let src = self.nodes[fi].value.plane(n, ch);
                let start = fs.plane(n, ch);
                let dst = &mut out.data_mut()[start..start + pl];
                for i in 0..pl {
                    dst[i] = src[i] * amap[i];
                }
            }
        }
        let needs = self.needs(fi) || self.needs(ai);
        Ok(self.push(
            out,
            needs,
            Op::BroadcastMul {
                features: fi,
                alpha: ai,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape_pair(a, b, "add")?;
        let out = Tensor::new(
            self.nodes[ai].value.shape(),
            self.nodes[ai]
                .value
                .data()
                .iter()
                .zip(self.nodes[bi].value.data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, needs, Op::Add { a: ai, b: bi }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape_pair(a, b, "mul")?;
        let out = Tensor::new(
            self.nodes[ai].value.shape(),
            self.nodes[ai]
                .value
                .data()
                .iter()
                .zip(self.nodes[bi].value.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, needs, Op::Mul { a: ai, b: bi }))
    }

    fn same_shape_pair(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let ai = self.check(a, op)?;
        let bi = self.check(b, op)?;
        let sa = self.nodes[ai].value.shape();
        let sb = self.nodes[bi].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        Ok((ai, bi))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let xi = self.check(x, "affine")?;
        let out = self.nodes[xi].value.map(|v| scale * v + shift);
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::Affine { x: xi, scale }))
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "ln")?;
        let out = self.nodes[xi].value.map(|v| v.ln());
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::Ln { x: xi }))
    }

    /// Elementwise clamp into `[lo, hi]`. The adjoint passes through inside
    /// the interval and is zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let xi = self.check(x, "clamp")?;
        let out = self.nodes[xi].value.map(|v| v.max(lo).min(hi));
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::Clamp { x: xi, lo, hi }))
    }

    /// Mean over all elements, as a `(1,1,1,1)` scalar tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x, "mean_all")?;
        let count = self.nodes[xi].value.data().len();
        let sum: f64 = self.nodes[xi].value.data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::new(
            Shape { n: 1, c: 1, h: 1, w: 1 },
            vec![T::from_f64(sum / count as f64)],
        )?;
        let needs = self.needs(xi);
        Ok(self.push(out, needs, Op::MeanAll { x: xi }))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Populate `grad` on every node reachable from `loss` that requires a
    /// gradient. `loss` must be a `(1,1,1,1)` scalar. Gradients from earlier
    /// calls are discarded first, so repeated calls from identical state
    /// produce identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss, "backward")?;
        let ls = self.nodes[li].value.shape();
        if ls != (Shape { n: 1, c: 1, h: 1, w: 1 }) {
            return Err(Error::Autodiff(format!(
                "backward: loss must be a (1,1,1,1) scalar, got {ls}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[li].needs_grad {
            return Ok(());
        }
        self.nodes[li].grad = Some(vec![T::one()]);

        for idx in (0..=li).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let contribs = self.parent_contributions(idx);
            for (parent, contrib) in contribs {
                self.add_grad(parent, contrib);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, idx: usize, contrib: Vec<T>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let node = &mut self.nodes[idx];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            None => {
                debug_assert_eq!(contrib.len(), node.value.data().len());
                node.grad = Some(contrib);
            }
        }
    }

    /// Adjoint of the op that produced node `idx`, as one gradient
    /// contribution per parent. Pure reads; accumulation happens after.
    fn parent_contributions(&self, idx: usize) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[idx];
        let grad = node.grad.as_ref().expect("checked by caller");
        match &node.op {
            Op::Leaf => Vec::new(),

            Op::Conv2d { x, w, b, k, pad } => {
                let grads = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    grad,
                    *k,
                    *pad,
                );
                vec![(*x, grads.grad_x), (*w, grads.grad_w), (*b, grads.grad_b)]
            }

            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let xs = self.nodes[*x].value.shape();
                let per = (xs.n * xs.plane_len()) as f64;
                let mut gx = vec![T::zero(); xs.count()];
                let mut gg = vec![T::zero(); xs.c];
                let mut gb = vec![T::zero(); xs.c];
                for ch in 0..xs.c {
                    let g_scale = self.nodes[*gamma].value.data()[ch].as_f64();
                    // channel reductions
                    let mut sum_g = 0.0f64;
                    let mut sum_gx = 0.0f64;
                    for n in 0..xs.n {
                        let base = xs.plane(n, ch);
                        let xv = self.nodes[*x].value.plane(n, ch);
                        for i in 0..xs.plane_len() {
                            let gy = grad[base + i].as_f64();
                            let xhat = (xv[i].as_f64() - mean[ch]) * invstd[ch];
                            sum_g += gy;
                            sum_gx += gy * xhat;
                        }
                    }
                    gb[ch] = T::from_f64(sum_g);
                    gg[ch] = T::from_f64(sum_gx);
                    let mean_g = sum_g / per;
                    let mean_gx = sum_gx / per;
                    for n in 0..xs.n {
                        let base = xs.plane(n, ch);
                        let xv = self.nodes[*x].value.plane(n, ch);
                        for i in 0..xs.plane_len() {
                            let gy = grad[base + i].as_f64();
                            let d = if *train {
                                let xhat = (xv[i].as_f64() - mean[ch]) * invstd[ch];
                                g_scale * invstd[ch] * (gy - mean_g - xhat * mean_gx)
                            } else {
                                g_scale * invstd[ch] * gy
                            };
                            gx[base + i] = T::from_f64(d);
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }

            Op::Relu { x } => {
                let src = self.nodes[*x].value.data();
                let g = grad
                    .iter()
                    .zip(src)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, g)]
            }

            Op::Sigmoid { x } => {
                let y = node.value.data();
                let g = grad
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                vec![(*x, g)]
            }

            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); self.nodes[*x].value.data().len()];
                for (i, &src) in argmax.iter().enumerate() {
                    let s = src as usize;
                    gx[s] = gx[s] + grad[i];
                }
                vec![(*x, gx)]
            }

            Op::Upsample { x, factor } => {
                let xs = self.nodes[*x].value.shape();
                let f = *factor;
                let ow = xs.w * f;
                let mut gx = vec![T::zero(); xs.count()];
                for n in 0..xs.n {
                    for ch in 0..xs.c {
                        let ibase = xs.plane(n, ch);
                        let obase = ibase * f * f;
                        for iy in 0..xs.h {
                            for ix in 0..xs.w {
                                let mut acc = 0.0f64;
                                for dy in 0..f {
                                    let row = obase + (iy * f + dy) * ow + ix * f;
                                    for dx in 0..f {
                                        acc += grad[row + dx].as_f64();
                                    }
                                }
                                gx[ibase + iy * xs.w + ix] = T::from_f64(acc);
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }

            Op::Concat { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let os = node.value.shape();
                let pl = sa.plane_len();
                let mut ga = vec![T::zero(); sa.count()];
                let mut gb = vec![T::zero(); sb.count()];
                for n in 0..sa.n {
                    let oa = os.plane(n, 0);
                    ga[sa.plane(n, 0)..sa.plane(n, 0) + sa.c * pl]
                        .copy_from_slice(&grad[oa..oa + sa.c * pl]);
                    let ob = os.plane(n, sa.c);
                    gb[sb.plane(n, 0)..sb.plane(n, 0) + sb.c * pl]
                        .copy_from_slice(&grad[ob..ob + sb.c * pl]);
                }
                vec![(*a, ga), (*b, gb)]
            }

            Op::BroadcastMul { features, alpha } => {
                let fs = self.nodes[*features].value.shape();
                let pl = fs.plane_len();
                let mut gf = vec![T::zero(); fs.count()];
                let mut ga = vec![T::zero(); self.nodes[*alpha].value.data().len()];
                for n in 0..fs.n {
                    let amap = self.nodes[*alpha].value.plane(n, 0);
                    let abase = n * pl;
                    for i in 0..pl {
                        let mut acc = 0.0f64;
                        for ch in 0..fs.c {
                            let base = fs.plane(n, ch);
                            let fv = self.nodes[*features].value.data()[base + i];
                            let gy = grad[base + i];
                            gf[base + i] = gy * amap[i];
                            acc += gy.as_f64() * fv.as_f64();
                        }
                        ga[abase + i] = T::from_f64(acc);
                    }
                }
                vec![(*features, gf), (*alpha, ga)]
            }

            Op::Add { a, b } => vec![(*a, grad.clone()), (*b, grad.clone())],

            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let ga = grad.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                let gb = grad.iter().zip(av).map(|(&g, &v)| g * v).collect();
                vec![(*a, ga), (*b, gb)]
            }

            Op::Affine { x, scale } => {
                let g = grad.iter().map(|&g| g * *scale).collect();
                vec![(*x, g)]
            }

            Op::Ln { x } => {
                let src = self.nodes[*x].value.data();
                let g = grad.iter().zip(src).map(|(&g, &v)| g / v).collect();
                vec![(*x, g)]
            }

            Op::Clamp { x, lo, hi } => {
                let src = self.nodes[*x].value.data();
                let g = grad
                    .iter()
                    .zip(src)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                vec![(*x, g)]
            }

            Op::MeanAll { x } => {
                let count = self.nodes[*x].value.data().len();
                let share = grad[0] / T::from_f64(count as f64);
                vec![(*x, vec![share; count])]
            }
        }
    }
}

fn pow2_levels(factor: usize, op: &'static str) -> Result<usize> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "{op}: factor must be a power of two >= 1, got {factor}"
        )));
    }
    Ok(factor.trailing_zeros() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), values).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 3), &[-1.0, 0.0, 2.0]), false);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = g.leaf(t((1, 1, 1, 3), &[-5.0, -0.1, -2.0]), false);
        let out = g.relu(neg).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let pos = g.leaf(t((1, 1, 1, 3), &[5.0, 0.1, 2.0]), false);
        let out = g.relu(pos).unwrap();
        assert_eq!(g.value(out).data(), g.value(pos).data());
    }

    #[test]
    fn sigmoid_known_values_and_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 3), &[0.0, 10.0, -10.0]), false);
        let y = g.sigmoid(x).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 0.9999546021312976).abs() < 1e-12);
        // symmetry on sampled points
        for v in [-3.0, -0.7, 0.1, 2.5] {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(t((1, 1, 1, 1), &[v]), false);
            let b = g.leaf(t((1, 1, 1, 1), &[-v]), false);
            let sa = g.sigmoid(a).unwrap();
            let sb = g.sigmoid(b).unwrap();
            let lhs = g.value(sb).data()[0];
            let rhs = 1.0 - g.value(sa).data()[0];
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_saturates_inside_open_interval() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(
            Tensor::from_f64(Shape::new(1, 1, 1, 2).unwrap(), &[-200.0, 200.0]).unwrap(),
            false,
        );
        let y = g.sigmoid(x).unwrap();
        let out = g.value(y).data();
        assert!(out[0] > 0.0 && out[1] < 1.0);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn downsample_takes_block_max() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let y = g.downsample2(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 1, 1, 1).unwrap());
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let y = g.downsample2(x, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 2, 8, 8).unwrap(), 0.25), false);
        let y = g.downsample2(x, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn downsample_rejects_indivisible_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 6, 6).unwrap()), false);
        assert!(matches!(
            g.downsample2(x, 4),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let y = g.upsample2(x, 2).unwrap();
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y).data(), &expect);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let y = g.upsample2(x, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn down_of_up_roundtrips() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.leaf(t((1, 1, 4, 4), &vals), false);
        let up = g.upsample2(x, 2).unwrap();
        let back = g.downsample2(up, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn concat_orders_channels_and_checks_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(Shape::new(1, 32, 16, 16).unwrap(), 1.0), false);
        let b = g.leaf(Tensor::full(Shape::new(1, 64, 16, 16).unwrap(), 2.0), false);
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 96, 16, 16).unwrap());
        assert_eq!(g.value(y).plane(0, 0), g.value(a).plane(0, 0));
        assert!(g.value(y).plane(0, 32).iter().all(|&v| v == 2.0));

        let c = g.leaf(Tensor::zeros(Shape::new(1, 64, 8, 8).unwrap()), false);
        let err = g.concat_channels(a, c).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1,32,16,16)") && msg.contains("(1,64,8,8)"), "{msg}");
    }

    #[test]
    fn broadcast_mul_identity_zero_and_scale() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 - 5.0).collect();
        let f = g.leaf(t((1, 2, 3, 4), &vals), false);
        let ones = g.leaf(Tensor::full(Shape::new(1, 1, 3, 4).unwrap(), 1.0), false);
        let y = g.broadcast_mul(f, ones).unwrap();
        assert_eq!(g.value(y).data(), g.value(f).data());

        let zeros = g.leaf(Tensor::zeros(Shape::new(1, 1, 3, 4).unwrap()), false);
        let y0 = g.broadcast_mul(f, zeros).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));

        let halves = g.leaf(Tensor::full(Shape::new(1, 1, 3, 4).unwrap(), 0.5), false);
        let yh = g.broadcast_mul(f, halves).unwrap();
        for (o, i) in g.value(yh).data().iter().zip(&vals) {
            assert_eq!(*o, i * 0.5);
        }

        let bad = g.leaf(Tensor::zeros(Shape::new(1, 2, 3, 4).unwrap()), false);
        assert!(g.broadcast_mul(f, bad).is_err());
    }

    #[test]
    fn batch_norm_constant_input_returns_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(2, 1, 3, 3).unwrap(), 5.0), false);
        let gamma = g.leaf(Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), 1.0), false);
        let beta = g.leaf(Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), 0.3), false);
        let mut running = RunningMoments::new(1);
        let y = g
            .batch_norm(
                x,
                gamma,
                beta,
                1e-5,
                BnMode::Train {
                    running: &mut running,
                    momentum: 0.1,
                },
            )
            .unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.3).abs() < 1e-9, "{v}");
        }
        // running stats moved toward batch stats (mean 5, var 0)
        assert!((running.mean[0] - 0.5).abs() < 1e-12);
        assert!((running.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_two_values_hand_computed() {
        // values {1, 3}: mean 2, biased var 1 -> (x-2)/sqrt(1+1e-5)
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((2, 1, 1, 1), &[1.0, 3.0]), false);
        let gamma = g.leaf(Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), 1.0), false);
        let beta = g.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1).unwrap()), false);
        let mut running = RunningMoments::new(1);
        let y = g
            .batch_norm(
                x,
                gamma,
                beta,
                1e-5,
                BnMode::Train {
                    running: &mut running,
                    momentum: 0.1,
                },
            )
            .unwrap();
        let out = g.value(y).data();
        assert!((out[0] + 0.999995).abs() < 1e-6, "{}", out[0]);
        assert!((out[1] - 0.999995).abs() < 1e-6, "{}", out[1]);
    }

    #[test]
    fn batch_norm_normalizes_random_input() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..2 * 3 * 8 * 8)
            .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract() * 4.0 - 1.0)
            .collect();
        let x = g.leaf(t((2, 3, 8, 8), &vals), false);
        let gamma = g.leaf(Tensor::full(Shape::new(3, 1, 1, 1).unwrap(), 1.0), false);
        let beta = g.leaf(Tensor::zeros(Shape::new(3, 1, 1, 1).unwrap()), false);
        let mut running = RunningMoments::new(3);
        let y = g
            .batch_norm(
                x,
                gamma,
                beta,
                1e-5,
                BnMode::Train {
                    running: &mut running,
                    momentum: 0.1,
                },
            )
            .unwrap();
        let out = g.value(y);
        let per = 2 * 8 * 8;
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for n in 0..2 {
                for &v in out.plane(n, ch) {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / per as f64;
            let var = sq / per as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 2), &[2.0, 6.0]), false);
        let gamma = g.leaf(Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), 1.0), false);
        let beta = g.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1).unwrap()), false);
        let running = RunningMoments {
            mean: vec![2.0],
            var: vec![4.0],
        };
        let y = g
            .batch_norm(x, gamma, beta, 0.0, BnMode::Infer { running: &running })
            .unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.0).abs() < 1e-12);
        assert!((out[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum x_i^2 over x = (3, -1) -> grad (6, -2)
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 2), &[3.0, -1.0]), true);
        let sq = g.mul(x, x).unwrap();
        let mean = g.mean_all(sq).unwrap();
        let loss = g.affine(mean, 2.0, 0.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 1), &[0.0]), true);
        let y = g.sigmoid(x).unwrap();
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        // loss = mean(x * x) + 3 * mean(x): dl/dx = (2x + 3) / 2 over 2 elems
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 2), &[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let m1 = g.mean_all(sq).unwrap();
        let m2 = g.mean_all(x).unwrap();
        let m2s = g.affine(m2, 3.0, 0.0).unwrap();
        let loss = g.add(m1, m2s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.5, 3.5]);
    }

    #[test]
    fn backward_twice_from_identical_state_matches() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).cos()).collect();
        let x = g.leaf(t((1, 2, 2, 2), &vals), true);
        let y = g.sigmoid(x).unwrap();
        let loss = g.mean_all(y).unwrap();
        g.backward(loss).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 2), &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn foreign_var_is_a_usage_error() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.leaf(t((1, 1, 1, 1), &[1.0]), true);
        assert!(matches!(g2.relu(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn conv2d_shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4).unwrap()), false);
        let w = g.leaf(Tensor::zeros(Shape::new(2, 4, 3, 3).unwrap()), false);
        let b = g.leaf(Tensor::zeros(Shape::new(2, 1, 1, 1).unwrap()), false);
        let msg = g.conv2d(x, w, b).unwrap_err().to_string();
        assert!(msg.contains("(1,3,4,4)") && msg.contains("(2,4,3,3)"), "{msg}");

        let w5 = g.leaf(Tensor::zeros(Shape::new(2, 3, 5, 5).unwrap()), false);
        assert!(matches!(g.conv2d(x, w5, b), Err(Error::Config(_))));
    }

    #[test]
    fn conv2d_is_linear_with_zero_bias() {
        let mut g = Graph::<f64>::new();
        let xv: Vec<f64> = (0..16).map(|i| (i as f64 * 0.31).sin()).collect();
        let yv: Vec<f64> = (0..16).map(|i| (i as f64 * 0.77).cos()).collect();
        let wv: Vec<f64> = (0..9).map(|i| (i as f64 * 1.7).sin()).collect();
        let a = 2.5f64;
        let x = g.leaf(t((1, 1, 4, 4), &xv), false);
        let y = g.leaf(t((1, 1, 4, 4), &yv), false);
        let w = g.leaf(t((1, 1, 3, 3), &wv), false);
        let b = g.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1).unwrap()), false);

        let ax = g.affine(x, a, 0.0).unwrap();
        let axy = g.add(ax, y).unwrap();
        let lhs = g.conv2d(axy, w, b).unwrap();

        let cx = g.conv2d(x, w, b).unwrap();
        let cy = g.conv2d(y, w, b).unwrap();
        let acx = g.affine(cx, a, 0.0).unwrap();
        let rhs = g.add(acx, cy).unwrap();

        for (l, r) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
            let rel = (l - r).abs() / l.abs().max(r.abs()).max(1.0);
            assert!(rel < 1e-5, "{l} vs {r}");
        }
    }
}
