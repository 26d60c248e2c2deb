//! Reverse-mode autodiff on a Wengert list.
//!
//! A `Tape` owns every intermediate tensor of one forward pass as a `Node`;
//! ops record the context needed for their backward rule (dropout masks,
//! pool argmax, batch statistics). `backward` walks the list in reverse,
//! accumulating gradients additively into every `requires_grad` node, and
//! may run once per tape. Networks that only need values (no gradients)
//! build their leaves with `requires_grad = false` and skip backward
//! entirely.

use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const LOG_FLOOR: f64 = 1e-7;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvT2d { x: usize, w: usize, b: Option<usize>, stride: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, training: bool, mean: Vec<S>, invstd: Vec<S> },
    LeakyRelu { x: usize, slope: f64 },
    Sigmoid { x: usize },
    Dropout { x: usize, mask: Vec<S> },
    Resize { x: usize },
    MaxPool { x: usize, argmax: Vec<u32> },
    Concat { xs: Vec<usize> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulMap { x: usize, map: usize },
    MulChan { x: usize, gate: usize },
    MaxElem { a: usize, b: usize },
    GlobalAvgPool { x: usize },
    Affine { x: usize, a: f64 },
    LogClamped { x: usize },
    SumAll { x: usize },
    Div { a: usize, b: usize },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
    fault: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, fault: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Corrupt conv2d's input-gradient rule (scales it by 2). Exists so the
    /// gradient checker can prove it detects a broken backward pass.
    #[doc(hidden)]
    pub fn inject_fault(&mut self) {
        self.fault = true;
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = kernels::conv_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|bv| self.nodes[bv.0].value.data()),
            stride,
            pad,
        );
        let req = self.rg(x) || self.rg(w) || b.map_or(false, |bv| self.rg(bv));
        self.push(y, req, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be rank 4, got {ws:?}");
        assert_eq!(ws[2], ws[3], "conv_transpose2d kernels are square, got {ws:?}");
        let (it, ot, k) = (ws[0], ws[1], ws[2]);
        let xv = &self.nodes[x.0].value;
        let th = kernels::convt_out_size(xv.h(), k, stride, 0);
        let tw = kernels::convt_out_size(xv.w(), k, stride, 0);
        let y = kernels::convt_core(
            xv,
            self.nodes[w.0].value.data(),
            it,
            ot,
            k,
            b.map(|bv| self.nodes[bv.0].value.data()),
            stride,
            0,
            th,
            tw,
        );
        let req = self.rg(x) || self.rg(w) || b.map_or(false, |bv| self.rg(bv));
        self.push(y, req, Op::ConvT2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride })
    }

    /// Batch normalization. Training mode uses per-channel batch statistics
    /// (biased variance) and, when `update_running` is set, folds them into
    /// the running buffers with momentum 0.1; eval mode normalizes with the
    /// running statistics. Running buffers live outside the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [S],
        running_var: &mut [S],
        training: bool,
        update_running: bool,
    ) -> Var {
        let (mean, invstd) = if training {
            let (mean, var) = kernels::bn_stats(&self.nodes[x.0].value);
            if update_running {
                for (r, &b) in running_mean.iter_mut().zip(&mean) {
                    *r = S::fr((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b.as_f64());
                }
                for (r, &b) in running_var.iter_mut().zip(&var) {
                    *r = S::fr((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b.as_f64());
                }
            }
            let invstd: Vec<S> =
                var.iter().map(|&v| S::fr(1.0 / (v.as_f64() + BN_EPS).sqrt())).collect();
            (mean, invstd)
        } else {
            let mean = running_mean.to_vec();
            let invstd: Vec<S> =
                running_var.iter().map(|&v| S::fr(1.0 / (v.as_f64() + BN_EPS).sqrt())).collect();
            (mean, invstd)
        };
        let y = kernels::bn_apply(
            &self.nodes[x.0].value,
            &mean,
            &invstd,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let req = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(y, req, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, training, mean, invstd })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        assert!((0.0..1.0).contains(&slope), "leaky_relu slope must be in [0,1), got {slope}");
        let s = S::fr(slope);
        let y = self.nodes[x.0].value.map(|v| if v >= S::zero() { v } else { v * s });
        let req = self.rg(x);
        self.push(y, req, Op::LeakyRelu { x: x.0, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(|v| {
            let v = v.as_f64();
            S::fr(if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { let e = v.exp(); e / (1.0 + e) })
        });
        let req = self.rg(x);
        self.push(y, req, Op::Sigmoid { x: x.0 })
    }

    /// Inverted dropout. Eval mode and p=0 are exact identities (no node).
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1), got {p}");
        if !training || p == 0.0 {
            return x;
        }
        let scale = S::fr(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { scale })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), data);
        let req = self.rg(x);
        self.push(y, req, Op::Dropout { x: x.0, mask })
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let y = kernels::resize_fwd(&self.nodes[x.0].value, oh, ow);
        let req = self.rg(x);
        self.push(y, req, Op::Resize { x: x.0 })
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Var {
        let (y, argmax) = kernels::maxpool_fwd(&self.nodes[x.0].value, k);
        let req = self.rg(x);
        self.push(y, req, Op::MaxPool { x: x.0, argmax })
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_channels needs at least one input");
        if xs.len() == 1 {
            return xs[0];
        }
        let (n, h, w) = {
            let t = &self.nodes[xs[0].0].value;
            (t.n(), t.h(), t.w())
        };
        let mut c_total = 0;
        for &v in xs {
            let t = &self.nodes[v.0].value;
            assert!(
                t.n() == n && t.h() == h && t.w() == w,
                "concat_channels spatial mismatch: {:?} vs {:?}",
                t.shape(),
                self.nodes[xs[0].0].value.shape()
            );
            c_total += t.c();
        }
        let mut y = Tensor::zeros(vec![n, c_total, h, w]);
        let plane = h * w;
        let ys = y.data_mut();
        for ni in 0..n {
            let mut co = 0;
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let c = t.c();
                ys[(ni * c_total + co) * plane..(ni * c_total + co + c) * plane]
                    .copy_from_slice(&t.data()[ni * c * plane..(ni + 1) * c * plane]);
                co += c;
            }
        }
        let req = xs.iter().any(|&v| self.rg(v));
        self.push(y, req, Op::Concat { xs: xs.iter().map(|v| v.0).collect() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(av.shape().to_vec(), data);
        let req = self.rg(a) || self.rg(b);
        self.push(y, req, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(av.shape().to_vec(), data);
        let req = self.rg(a) || self.rg(b);
        self.push(y, req, Op::Mul { a: a.0, b: b.0 })
    }

    /// x [N,C,H,W] scaled by a single-channel map [N,1,H,W], broadcast over C.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Var {
        let (xv, mv) = (&self.nodes[x.0].value, &self.nodes[map.0].value);
        let (n, c, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        assert_eq!(mv.shape(), &[n, 1, h, w], "mul_map expects [N,1,H,W] map");
        let plane = h * w;
        let mut y = Tensor::zeros(vec![n, c, h, w]);
        let ys = y.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    ys[base + i] = xv.data()[base + i] * mv.data()[ni * plane + i];
                }
            }
        }
        let req = self.rg(x) || self.rg(map);
        self.push(y, req, Op::MulMap { x: x.0, map: map.0 })
    }

    /// x [N,C,H,W] scaled per channel by a gate [N,C,1,1].
    pub fn mul_chan(&mut self, x: Var, gate: Var) -> Var {
        let (xv, gv) = (&self.nodes[x.0].value, &self.nodes[gate.0].value);
        let (n, c, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        assert_eq!(gv.shape(), &[n, c, 1, 1], "mul_chan expects [N,C,1,1] gate");
        let plane = h * w;
        let mut y = Tensor::zeros(vec![n, c, h, w]);
        let ys = y.data_mut();
        for nc in 0..n * c {
            let g = gv.data()[nc];
            for i in 0..plane {
                ys[nc * plane + i] = xv.data()[nc * plane + i] * g;
            }
        }
        let req = self.rg(x) || self.rg(gate);
        self.push(y, req, Op::MulChan { x: x.0, gate: gate.0 })
    }

    /// Elementwise maximum; on ties the gradient routes to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "max_elem shape mismatch");
        let data: Vec<S> =
            av.data().iter().zip(bv.data()).map(|(&x, &y)| if x >= y { x } else { y }).collect();
        let y = Tensor::new(av.shape().to_vec(), data);
        let req = self.rg(a) || self.rg(b);
        self.push(y, req, Op::MaxElem { a: a.0, b: b.0 })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        let plane = (h * w) as f64;
        let mut y = Tensor::zeros(vec![n, c, 1, 1]);
        let ys = y.data_mut();
        for nc in 0..n * c {
            let mut s = 0.0f64;
            for &v in &xv.data()[nc * h * w..(nc + 1) * h * w] {
                s += v.as_f64();
            }
            ys[nc] = S::fr(s / plane);
        }
        let req = self.rg(x);
        self.push(y, req, Op::GlobalAvgPool { x: x.0 })
    }

    /// a*x + b elementwise with f64 coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (sa, sb) = (S::fr(a), S::fr(b));
        let y = self.nodes[x.0].value.map(|v| v * sa + sb);
        let req = self.rg(x);
        self.push(y, req, Op::Affine { x: x.0, a })
    }

    /// ln(max(x, 1e-7)); gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(|v| S::fr(v.as_f64().max(LOG_FLOOR).ln()));
        let req = self.rg(x);
        self.push(y, req, Op::LogClamped { x: x.0 })
    }

    /// Sum of all elements to a [1] tensor, f64 accumulation.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = kernels::sum_all(self.nodes[x.0].value.data());
        let req = self.rg(x);
        self.push(Tensor::scalar(s), req, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Scalar division a/b; both operands must be [1] tensors.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(av.is_scalar() && bv.is_scalar(), "div expects scalar tensors");
        let y = Tensor::scalar(av.item().as_f64() / bv.item().as_f64());
        let req = self.rg(a) || self.rg(b);
        self.push(y, req, Op::Div { a: a.0, b: b.0 })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape's single backward
    /// allowance; every `requires_grad` node reachable from `out` ends up
    /// with its accumulated gradient available via `grad`.
    pub fn backward(&mut self, out: Var) {
        assert!(!self.consumed, "tape already consumed by a previous backward call");
        self.consumed = true;
        let node = &self.nodes[out.0];
        assert!(
            node.value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            node.value.shape()
        );
        assert!(node.requires_grad, "loss does not depend on any requires_grad leaf");
        self.nodes[out.0].grad = Some(vec![S::one()]);
        for i in (0..=out.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let gy = self.nodes[i].grad.take().unwrap();
            let dy = Tensor::new(self.nodes[i].value.shape().to_vec(), gy);
            self.backprop(i, &op, &dy);
            self.nodes[i].grad = Some(dy.into_data());
        }
    }

    fn accum(&mut self, idx: usize, contrib: Vec<S>) {
        let node = &mut self.nodes[idx];
        debug_assert_eq!(node.value.numel(), contrib.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn backprop(&mut self, i: usize, op: &Op<S>, dy: &Tensor<S>) {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let ws = self.nodes[w].value.shape().to_vec();
                let (o, ci, k) = (ws[0], ws[1], ws[2]);
                if self.nodes[x].requires_grad {
                    let (h, wd) = (self.nodes[x].value.h(), self.nodes[x].value.w());
                    let mut dx = kernels::convt_core(
                        dy, self.nodes[w].value.data(), o, ci, k, None, stride, pad, h, wd,
                    );
                    if self.fault {
                        let two = S::fr(2.0);
                        for v in dx.data_mut() {
                            *v = *v * two;
                        }
                    }
                    self.accum(x, dx.into_data());
                }
                if self.nodes[w].requires_grad {
                    let dw = kernels::conv_dw(&self.nodes[x].value, dy, k, stride, pad);
                    self.accum(w, dw.into_data());
                }
                if let Some(bv) = b {
                    if self.nodes[bv].requires_grad {
                        self.accum(bv, kernels::bias_grad(dy));
                    }
                }
            }
            Op::ConvT2d { x, w, b, stride } => {
                let k = self.nodes[w].value.shape()[2];
                if self.nodes[x].requires_grad {
                    // adjoint of scatter is gather: a plain conv with the
                    // same [I,O,K,K] buffer read as an [O'=I, I'=O] weight
                    let dx = kernels::conv_fwd(dy, &self.nodes[w].value, None, stride, 0);
                    self.accum(x, dx.into_data());
                }
                if self.nodes[w].requires_grad {
                    let dw = kernels::convt_dw(&self.nodes[x].value, dy, k, stride, 0);
                    self.accum(w, dw.into_data());
                }
                if let Some(bv) = b {
                    if self.nodes[bv].requires_grad {
                        self.accum(bv, kernels::bias_grad(dy));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, training, ref mean, ref invstd } => {
                let (dx, dgamma, dbeta) = if training {
                    kernels::bn_bwd_train(
                        &self.nodes[x].value, dy, mean, invstd, self.nodes[gamma].value.data(),
                    )
                } else {
                    kernels::bn_bwd_eval(
                        &self.nodes[x].value, dy, mean, invstd, self.nodes[gamma].value.data(),
                    )
                };
                if self.nodes[x].requires_grad {
                    self.accum(x, dx.into_data());
                }
                if self.nodes[gamma].requires_grad {
                    self.accum(gamma, dgamma);
                }
                if self.nodes[beta].requires_grad {
                    self.accum(beta, dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.nodes[x].requires_grad {
                    let s = S::fr(slope);
                    let contrib: Vec<S> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xv, &g)| if xv >= S::zero() { g } else { g * s })
                        .collect();
                    self.accum(x, contrib);
                }
            }
            Op::Sigmoid { x } => {
                if self.nodes[x].requires_grad {
                    let contrib: Vec<S> = self.nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &g)| g * y * (S::one() - y))
                        .collect();
                    self.accum(x, contrib);
                }
            }
            Op::Dropout { x, ref mask } => {
                if self.nodes[x].requires_grad {
                    let contrib: Vec<S> = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.accum(x, contrib);
                }
            }
            Op::Resize { x } => {
                if self.nodes[x].requires_grad {
                    let (h, w) = (self.nodes[x].value.h(), self.nodes[x].value.w());
                    self.accum(x, kernels::resize_bwd(dy, h, w).into_data());
                }
            }
            Op::MaxPool { x, ref argmax } => {
                if self.nodes[x].requires_grad {
                    let contrib = kernels::maxpool_bwd(dy.data(), argmax, self.nodes[x].value.numel());
                    self.accum(x, contrib);
                }
            }
            Op::Concat { ref xs } => {
                let (n, c_total, h, w) = (dy.n(), dy.c(), dy.h(), dy.w());
                let plane = h * w;
                let mut co = 0;
                for &xi in xs {
                    let c = self.nodes[xi].value.c();
                    if self.nodes[xi].requires_grad {
                        let mut contrib = vec![S::zero(); n * c * plane];
                        for ni in 0..n {
                            contrib[ni * c * plane..(ni + 1) * c * plane].copy_from_slice(
                                &dy.data()[(ni * c_total + co) * plane..(ni * c_total + co + c) * plane],
                            );
                        }
                        self.accum(xi, contrib);
                    }
                    co += c;
                }
            }
            Op::Add { a, b } => {
                if self.nodes[a].requires_grad {
                    self.accum(a, dy.data().to_vec());
                }
                if self.nodes[b].requires_grad {
                    self.accum(b, dy.data().to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let contrib: Vec<S> =
                        dy.data().iter().zip(self.nodes[b].value.data()).map(|(&g, &v)| g * v).collect();
                    self.accum(a, contrib);
                }
                if self.nodes[b].requires_grad {
                    let contrib: Vec<S> =
                        dy.data().iter().zip(self.nodes[a].value.data()).map(|(&g, &v)| g * v).collect();
                    self.accum(b, contrib);
                }
            }
            Op::MulMap { x, map } => {
                let (n, c, h, w) = (dy.n(), dy.c(), dy.h(), dy.w());
                let plane = h * w;
                if self.nodes[x].requires_grad {
                    let mv = self.nodes[map].value.data();
                    let mut contrib = vec![S::zero(); n * c * plane];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                contrib[base + p] = dy.data()[base + p] * mv[ni * plane + p];
                            }
                        }
                    }
                    self.accum(x, contrib);
                }
                if self.nodes[map].requires_grad {
                    let xv = self.nodes[x].value.data();
                    let mut contrib = vec![S::zero(); n * plane];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                contrib[ni * plane + p] =
                                    contrib[ni * plane + p] + dy.data()[base + p] * xv[base + p];
                            }
                        }
                    }
                    self.accum(map, contrib);
                }
            }
            Op::MulChan { x, gate } => {
                let (n, c, h, w) = (dy.n(), dy.c(), dy.h(), dy.w());
                let plane = h * w;
                if self.nodes[x].requires_grad {
                    let gv = self.nodes[gate].value.data();
                    let mut contrib = vec![S::zero(); n * c * plane];
                    for nc in 0..n * c {
                        let g = gv[nc];
                        for p in 0..plane {
                            contrib[nc * plane + p] = dy.data()[nc * plane + p] * g;
                        }
                    }
                    self.accum(x, contrib);
                }
                if self.nodes[gate].requires_grad {
                    let xv = self.nodes[x].value.data();
                    let mut contrib = vec![S::zero(); n * c];
                    for nc in 0..n * c {
                        let mut s = 0.0f64;
                        for p in 0..plane {
                            s += dy.data()[nc * plane + p].as_f64() * xv[nc * plane + p].as_f64();
                        }
                        contrib[nc] = S::fr(s);
                    }
                    self.accum(gate, contrib);
                }
            }
            Op::MaxElem { a, b } => {
                let take_a: Vec<bool> = {
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    av.iter().zip(bv).map(|(&x, &y)| x >= y).collect()
                };
                if self.nodes[a].requires_grad {
                    let contrib: Vec<S> = dy
                        .data()
                        .iter()
                        .zip(&take_a)
                        .map(|(&g, &t)| if t { g } else { S::zero() })
                        .collect();
                    self.accum(a, contrib);
                }
                if self.nodes[b].requires_grad {
                    let contrib: Vec<S> = dy
                        .data()
                        .iter()
                        .zip(&take_a)
                        .map(|(&g, &t)| if t { S::zero() } else { g })
                        .collect();
                    self.accum(b, contrib);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.nodes[x].requires_grad {
                    let (h, w) = (self.nodes[x].value.h(), self.nodes[x].value.w());
                    let plane = h * w;
                    let inv = S::fr(1.0 / plane as f64);
                    let mut contrib = vec![S::zero(); self.nodes[x].value.numel()];
                    for (nc, &g) in dy.data().iter().enumerate() {
                        let gv = g * inv;
                        for p in 0..plane {
                            contrib[nc * plane + p] = gv;
                        }
                    }
                    self.accum(x, contrib);
                }
            }
            Op::Affine { x, a } => {
                if self.nodes[x].requires_grad {
                    let s = S::fr(a);
                    self.accum(x, dy.data().iter().map(|&g| g * s).collect());
                }
            }
            Op::LogClamped { x } => {
                if self.nodes[x].requires_grad {
                    let floor = S::fr(LOG_FLOOR);
                    let contrib: Vec<S> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xv, &g)| if xv >= floor { g / xv } else { S::zero() })
                        .collect();
                    self.accum(x, contrib);
                }
            }
            Op::SumAll { x } => {
                if self.nodes[x].requires_grad {
                    let g = dy.item();
                    self.accum(x, vec![g; self.nodes[x].value.numel()]);
                }
            }
            Op::Div { a, b } => {
                let av = self.nodes[a].value.item().as_f64();
                let bv = self.nodes[b].value.item().as_f64();
                let g = dy.item().as_f64();
                if self.nodes[a].requires_grad {
                    self.accum(a, vec![S::fr(g / bv)]);
                }
                if self.nodes[b].requires_grad {
                    self.accum(b, vec![S::fr(-g * av / (bv * bv))]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference gradient of `f` w.r.t. a flat input vector.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += eps;
                lo[i] -= eps;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sum_loss_gives_unit_gradients() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(vec![2, 1, 3, 3], 0.75), true);
        let loss = t.sum_all(x);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[1.0; 18][..]);
    }

    #[test]
    fn square_loss_gives_two_x() {
        let mut rng = stream(7, "test", 0);
        let mut t = Tape::<f64>::new();
        let xv = randt(&mut rng, vec![1, 1, 4, 4]);
        let expect: Vec<f64> = xv.data().iter().map(|&v| 2.0 * v).collect();
        let x = t.leaf(xv, true);
        let sq = t.mul(x, x);
        let loss = t.sum_all(sq);
        t.backward(loss);
        assert!(max_rel_err(t.grad(x).unwrap(), &expect) < 1e-12);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(vec![1, 1, 2, 2], 3.0), true);
        let y = t.add(x, x);
        let loss = t.sum_all(y);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[2.0; 4][..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let r = std::panic::catch_unwind(|| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0), true);
            t.backward(x);
        });
        assert!(r.is_err());
    }

    #[test]
    fn tape_consumed_once() {
        let r = std::panic::catch_unwind(|| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::scalar(2.0), true);
            let loss = t.affine(x, 3.0, 0.0);
            t.backward(loss);
            t.backward(loss);
        });
        assert!(r.is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]), false);
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(y).data(), &[-0.2, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_values_and_stability() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![4], vec![0.0, -100.0, 700.0, -700.0]), false);
        let y = t.sigmoid(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] <= 1e-30);
        assert!(v[2] <= 1.0 && v[2] > 1.0 - 1e-12);
        assert!(v[3] >= 0.0 && v[3].is_finite());

        let mut tf = Tape::<f32>::new();
        let xf = tf.leaf(Tensor::new(vec![2], vec![88.0f32, -88.0]), false);
        let yf = tf.sigmoid(xf);
        assert!(tf.value(yf).all_finite());
    }

    #[test]
    fn dropout_identities_and_concentration() {
        let mut rng = stream(11, "test", 1);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(vec![10], 1.0), true);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng), x);

        let big = t.leaf(Tensor::full(vec![100_000], 1.0), false);
        let d = t.dropout(big, 0.5, true, &mut rng);
        let survivors = t.value(d).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        // survivors carry the inverse keep probability
        assert!(t.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_backward_uses_recorded_mask() {
        let mut rng = stream(11, "test", 2);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(vec![1, 1, 8, 8], 0.5), true);
        let d = t.dropout(x, 0.3, true, &mut rng);
        let mask: Vec<f64> = t.value(d).data().iter().map(|&v| v / 0.5).collect();
        let loss = t.sum_all(d);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &mask[..]);
    }

    #[test]
    fn concat_channels_shapes_and_backward() {
        let mut t = Tape::<f64>::new();
        let img = t.leaf(Tensor::full(vec![2, 3, 4, 4], 1.0), true);
        let map = t.leaf(Tensor::full(vec![2, 1, 4, 4], 2.0), true);
        assert_eq!(t.concat_channels(&[img]), img);
        let cat = t.concat_channels(&[img, map]);
        assert_eq!(t.value(cat).shape(), &[2, 4, 4, 4]);
        // channel order preserved per sample
        assert_eq!(t.value(cat).data()[0], 1.0);
        assert_eq!(t.value(cat).data()[3 * 16], 2.0);
        let loss = t.sum_all(cat);
        t.backward(loss);
        assert_eq!(t.grad(img).unwrap(), &[1.0; 96][..]);
        assert_eq!(t.grad(map).unwrap(), &[1.0; 32][..]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let r = std::panic::catch_unwind(|| {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(Tensor::zeros(vec![1, 1, 4, 4]), false);
            let b = t.leaf(Tensor::zeros(vec![1, 1, 2, 2]), false);
            t.concat_channels(&[a, b]);
        });
        assert!(r.is_err());
    }

    #[test]
    fn batch_norm_normalizes_and_eval_is_identity() {
        let mut rng = stream(13, "test", 3);
        let mut t = Tape::<f64>::new();
        let xv = randt(&mut rng, vec![2, 3, 4, 4]);
        let x = t.leaf(xv.clone(), false);
        let gamma = t.leaf(Tensor::full(vec![3], 1.0), false);
        let beta = t.leaf(Tensor::full(vec![3], 0.0), false);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = t.batch_norm(x, gamma, beta, &mut rm, &mut rv, true, true);
        let (m, v) = crate::kernels::bn_stats(t.value(y));
        for c in 0..3 {
            assert!(m[c].abs() < 1e-4);
            assert!((v[c] - 1.0).abs() < 1e-4);
        }
        // one EMA update moved the buffers off their init
        assert!(rm.iter().any(|&v| v != 0.0));

        let mut t2 = Tape::<f64>::new();
        let x2 = t2.leaf(xv.clone(), false);
        let g2 = t2.leaf(Tensor::full(vec![3], 1.0), false);
        let b2 = t2.leaf(Tensor::full(vec![3], 0.0), false);
        let mut rm2 = vec![0.0; 3];
        let mut rv2 = vec![1.0; 3];
        let y2 = t2.batch_norm(x2, g2, b2, &mut rm2, &mut rv2, false, false);
        let err = max_rel_err(t2.value(y2).data(), xv.data());
        assert!(err < 1e-4, "eval-mode identity error {err}");
    }

    #[test]
    fn composed_pipeline_matches_finite_differences() {
        // conv -> batch_norm -> leaky_relu -> sigmoid -> mean w.r.t. input,
        // weights, bias, gamma, beta all at once.
        let mut rng = stream(17, "test", 4);
        let xv = randt(&mut rng, vec![2, 2, 5, 5]);
        let wv = randt(&mut rng, vec![3, 2, 3, 3]);
        let bv = randt(&mut rng, vec![3]);
        let gv = Tensor::new(vec![3], vec![1.1, 0.9, 1.3]);
        let bev = Tensor::new(vec![3], vec![0.1, -0.2, 0.0]);

        let run = |x: &[f64], w: &[f64], b: &[f64], g: &[f64], be: &[f64], want_grad: bool| {
            let mut t = Tape::<f64>::new();
            let xl = t.leaf(Tensor::new(vec![2, 2, 5, 5], x.to_vec()), true);
            let wl = t.leaf(Tensor::new(vec![3, 2, 3, 3], w.to_vec()), true);
            let bl = t.leaf(Tensor::new(vec![3], b.to_vec()), true);
            let gl = t.leaf(Tensor::new(vec![3], g.to_vec()), true);
            let bel = t.leaf(Tensor::new(vec![3], be.to_vec()), true);
            let mut rm = vec![0.0; 3];
            let mut rv = vec![1.0; 3];
            let c = t.conv2d(xl, wl, Some(bl), 1, 1);
            let n = t.batch_norm(c, gl, bel, &mut rm, &mut rv, true, false);
            let a = t.leaky_relu(n, 0.2);
            let s = t.sigmoid(a);
            let loss = t.mean_all(s);
            if want_grad {
                t.backward(loss);
                let grads: Vec<Vec<f64>> = [xl, wl, bl, gl, bel]
                    .iter()
                    .map(|&v| t.grad(v).unwrap().to_vec())
                    .collect();
                (t.value(loss).item(), Some(grads))
            } else {
                (t.value(loss).item(), None)
            }
        };

        let (_, grads) = run(xv.data(), wv.data(), bv.data(), gv.data(), bev.data(), true);
        let grads = grads.unwrap();
        let slots: Vec<&[f64]> = vec![xv.data(), wv.data(), bv.data(), gv.data(), bev.data()];
        for (si, base) in slots.iter().enumerate() {
            let f = |p: &[f64]| {
                let mut all: Vec<Vec<f64>> = slots.iter().map(|s| s.to_vec()).collect();
                all[si] = p.to_vec();
                run(&all[0], &all[1], &all[2], &all[3], &all[4], false).0
            };
            let num = fd_grad(&f, base, 1e-3);
            let err = max_rel_err(&grads[si], &num);
            assert!(err < 1e-3, "slot {si} rel err {err}");
        }
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = stream(19, "test", 5);
        let xv = randt(&mut rng, vec![1, 3, 3, 3]);
        let wv = randt(&mut rng, vec![3, 2, 2, 2]);
        let bv = randt(&mut rng, vec![2]);
        let run = |x: &[f64], w: &[f64], b: &[f64], want_grad: bool| {
            let mut t = Tape::<f64>::new();
            let xl = t.leaf(Tensor::new(vec![1, 3, 3, 3], x.to_vec()), true);
            let wl = t.leaf(Tensor::new(vec![3, 2, 2, 2], w.to_vec()), true);
            let bl = t.leaf(Tensor::new(vec![2], b.to_vec()), true);
            let y = t.conv_transpose2d(xl, wl, Some(bl), 2);
            assert_eq!(t.value(y).shape(), &[1, 2, 6, 6]);
            let s = t.sigmoid(y);
            let loss = t.mean_all(s);
            if want_grad {
                t.backward(loss);
                let g: Vec<Vec<f64>> =
                    [xl, wl, bl].iter().map(|&v| t.grad(v).unwrap().to_vec()).collect();
                (t.value(loss).item(), Some(g))
            } else {
                (t.value(loss).item(), None)
            }
        };
        let (_, grads) = run(xv.data(), wv.data(), bv.data(), true);
        let grads = grads.unwrap();
        let slots: Vec<&[f64]> = vec![xv.data(), wv.data(), bv.data()];
        for (si, base) in slots.iter().enumerate() {
            let f = |p: &[f64]| {
                let mut all: Vec<Vec<f64>> = slots.iter().map(|s| s.to_vec()).collect();
                all[si] = p.to_vec();
                run(&all[0], &all[1], &all[2], false).0
            };
            let err = max_rel_err(&grads[si], &fd_grad(&f, base, 1e-3));
            assert!(err < 1e-3, "slot {si} rel err {err}");
        }
    }

    #[test]
    fn small_op_gradients_match_finite_differences() {
        // resize, max_pool, mul_map, mul_chan, max_elem, gap, log, div on one graph
        let mut rng = stream(23, "test", 6);
        let xv = randt(&mut rng, vec![2, 2, 4, 4]);
        let mv = randt(&mut rng, vec![2, 1, 4, 4]);
        let run = |x: &[f64], m: &[f64], want_grad: bool| {
            let mut t = Tape::<f64>::new();
            let xl = t.leaf(Tensor::new(vec![2, 2, 4, 4], x.to_vec()), true);
            let ml = t.leaf(Tensor::new(vec![2, 1, 4, 4], m.to_vec()), true);
            let sm = t.sigmoid(ml);
            let prod = t.mul_map(xl, sm);
            let up = t.bilinear_resize(prod, 6, 6);
            let down = t.max_pool2d(up, 2);
            let gate = t.global_avg_pool(down);
            let gated = t.mul_chan(down, gate);
            let neg = t.affine(gated, -1.0, 0.1);
            let mx = t.max_elem(gated, neg);
            let sig = t.sigmoid(mx);
            let lg = t.log_clamped(sig);
            let num = t.sum_all(lg);
            let den = t.affine(num, 0.5, 3.0);
            let loss = t.div(num, den);
            if want_grad {
                t.backward(loss);
                let g = vec![t.grad(xl).unwrap().to_vec(), t.grad(ml).unwrap().to_vec()];
                (t.value(loss).item(), Some(g))
            } else {
                (t.value(loss).item(), None)
            }
        };
        let (_, grads) = run(xv.data(), mv.data(), true);
        let grads = grads.unwrap();
        let slots: Vec<&[f64]> = vec![xv.data(), mv.data()];
        for (si, base) in slots.iter().enumerate() {
            let f = |p: &[f64]| {
                let mut all: Vec<Vec<f64>> = slots.iter().map(|s| s.to_vec()).collect();
                all[si] = p.to_vec();
                run(&all[0], &all[1], false).0
            };
            let err = max_rel_err(&grads[si], &fd_grad(&f, base, 1e-4));
            assert!(err < 1e-3, "slot {si} rel err {err}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(vec![4], 2.0), true);
        let c = t.constant(Tensor::full(vec![4], 3.0));
        let y = t.mul(x, c);
        let loss = t.sum_all(y);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[3.0; 4][..]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let once = || {
            let mut rng = stream(29, "test", 7);
            let mut t = Tape::<f64>::new();
            let xv = randt(&mut rng, vec![2, 3, 6, 6]);
            let wv = randt(&mut rng, vec![4, 3, 3, 3]);
            let x = t.leaf(xv, true);
            let w = t.leaf(wv, true);
            let c = t.conv2d(x, w, None, 2, 1);
            let d = t.dropout(c, 0.4, true, &mut rng);
            let s = t.sigmoid(d);
            let loss = t.mean_all(s);
            t.backward(loss);
            (t.value(loss).item(), t.grad(w).unwrap().to_vec())
        };
        let (l1, g1) = once();
        let (l2, g2) = once();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
