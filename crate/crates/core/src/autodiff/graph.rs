//! Recording graph: eager forward evaluation with reverse-mode backward.
//!
//! Each builder method validates shapes, computes its output immediately, and
//! records the operation so [`Graph::backward`] can replay the chain rule in
//! reverse creation order. Shape violations are caller bugs and panic with
//! the operation name and offending dimensions; data-dependent failures
//! (non-finite values reaching the sampler) also panic, and the trainer
//! guards against them by checking losses before stepping.

use super::kernels;
use super::store::{VarId, VarStore};
use super::tensor::Tensor;
use crate::num::Real;
use crate::rng::StreamRng;
use std::collections::HashMap;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Parameter node, tagged with its store's identity so one graph can mix
    /// parameters from several stores without `VarId` collisions.
    Param(u64, VarId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddChan(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clip(NodeId, f64, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Gather(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Reshape(NodeId),
    StopGrad,
    StSample(NodeId),
    BceLogits(NodeId, Tensor<f64>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<F> {
    by_node: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a node, if any flowed there.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node[id.0].as_ref()
    }
}

/// Dynamic computation graph over tensors of scalar type `F`.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<(u64, VarId), NodeId>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    // ---- leaves -----------------------------------------------------------

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input that participates in differentiation (used by gradient checks).
    pub fn input_grad(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Materialises a stored parameter in this graph (cached: repeated calls
    /// for the same variable return the same node, so gradients accumulate).
    pub fn param(&mut self, store: &VarStore<F>, var: VarId) -> NodeId {
        let key = (store.uid(), var);
        if let Some(&id) = self.param_nodes.get(&key) {
            return id;
        }
        let id = self.push(store.get(var).clone(), Op::Param(store.uid(), var), true);
        self.param_nodes.insert(key, id);
        id
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_same_shape(&self, name: &str, a: NodeId, b: NodeId) {
        assert_eq!(
            self.val(a).dims(),
            self.val(b).dims(),
            "{name}: operand dims differ: {:?} vs {:?}",
            self.val(a).dims(),
            self.val(b).dims()
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape("add", a, b);
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.val(a).dims().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape("sub", a, b);
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.val(a).dims().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape("mul", a, b);
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.val(a).dims().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape("div", a, b);
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let t = Tensor::new(self.val(a).dims().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cf = F::of(c);
        let t = self.val(a).map(|x| x * cf);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cf = F::of(c);
        let t = self.val(a).map(|x| x + cf);
        let ng = self.needs(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let t = self.val(a).map(|x| one / (one + (-x).exp()));
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let t = self.val(a).map(|x| x / (one + (-x).exp()));
        let ng = self.needs(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(t, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(|x| x.sqrt());
        let ng = self.needs(a);
        self.push(t, Op::Sqrt(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(|x| x.exp());
        let ng = self.needs(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let t = self.val(a).map(|x| x.ln());
        let ng = self.needs(a);
        self.push(t, Op::Log(a), ng)
    }

    /// Clamp to `[lo, hi]`; gradient passes only inside the closed interval.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clip: lo {lo} > hi {hi}");
        let (lf, hf) = (F::of(lo), F::of(hi));
        let t = self.val(a).map(|x| x.max(lf).min(hf));
        let ng = self.needs(a);
        self.push(t, Op::Clip(a, lo, hi), ng)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.val(a).dims2();
        let (kb, n) = self.val(b).dims2();
        assert_eq!(
            ka, kb,
            "matmul: inner dims differ: [{m},{ka}] x [{kb},{n}]"
        );
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.val(a).data(), m, ka, self.val(b).data(), n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), ng)
    }

    /// Adds a length-`C` vector to every row of `x` (last-dim broadcast).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("add_bias: rank >= 1");
        assert_eq!(
            self.val(b).dims(),
            &[c],
            "add_bias: bias dims {:?} do not match last dim {c} of {:?}",
            self.val(b).dims(),
            dims
        );
        let bias = self.val(b).data().to_vec();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(dims, data), Op::AddBias(x, b), ng)
    }

    /// Adds a per-channel vector to an `[N,C,H,W]` tensor.
    pub fn add_chan(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        assert_eq!(dims.len(), 4, "add_chan: expected NCHW, got {dims:?}");
        let (c, hw) = (dims[1], dims[2] * dims[3]);
        assert_eq!(
            self.val(b).dims(),
            &[c],
            "add_chan: bias dims {:?} vs channels {c}",
            self.val(b).dims()
        );
        let bias = self.val(b).data().to_vec();
        let mut data = self.val(x).data().to_vec();
        for item in data.chunks_mut(c * hw) {
            for (ch, plane) in item.chunks_mut(hw).enumerate() {
                let bv = bias[ch];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(dims, data), Op::AddChan(x, b), ng)
    }

    /// Strided 2-D convolution with zero padding.
    /// `x: [N,Ci,H,W]`, `k: [Co,Ci,kh,kw]` → `[N,Co,Ho,Wo]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> NodeId {
        let xd = self.val(x).dims().to_vec();
        let kd = self.val(k).dims().to_vec();
        assert_eq!(xd.len(), 4, "conv2d: input must be NCHW, got {xd:?}");
        assert_eq!(kd.len(), 4, "conv2d: kernel must be [Co,Ci,kh,kw], got {kd:?}");
        assert_eq!(
            xd[1], kd[1],
            "conv2d: input channels {} vs kernel channels {}",
            xd[1], kd[1]
        );
        let (n, ci, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (co, kh, kw) = (kd[0], kd[2], kd[3]);
        let ho = kernels::conv_out_size(h, kh, stride, pad);
        let wo = kernels::conv_out_size(w, kw, stride, pad);
        let mut out = vec![F::zero(); n * co * ho * wo];
        kernels::conv2d_forward(
            self.val(x).data(),
            n,
            ci,
            h,
            w,
            self.val(k).data(),
            co,
            kh,
            kw,
            stride,
            pad,
            &mut out,
        );
        let ng = self.needs(x) || self.needs(k);
        self.push(
            Tensor::new(vec![n, co, ho, wo], out),
            Op::Conv2d { x, k, stride, pad },
            ng,
        )
    }

    /// Transposed (fractionally strided) 2-D convolution.
    /// `x: [N,Ci,H,W]`, `k: [Ci,Co,kh,kw]` → `[N,Co,(H-1)s-2p+kh, (W-1)s-2p+kw]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> NodeId {
        let xd = self.val(x).dims().to_vec();
        let kd = self.val(k).dims().to_vec();
        assert_eq!(xd.len(), 4, "conv_transpose2d: input must be NCHW, got {xd:?}");
        assert_eq!(
            kd.len(),
            4,
            "conv_transpose2d: kernel must be [Ci,Co,kh,kw], got {kd:?}"
        );
        assert_eq!(
            xd[1], kd[0],
            "conv_transpose2d: input channels {} vs kernel {}",
            xd[1], kd[0]
        );
        let (n, ci, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (co, kh, kw) = (kd[1], kd[2], kd[3]);
        let ho = kernels::convt_out_size(h, kh, stride, pad);
        let wo = kernels::convt_out_size(w, kw, stride, pad);
        // Geometry must invert a forward conv exactly for the adjoint trick.
        assert_eq!(kernels::conv_out_size(ho, kh, stride, pad), h);
        assert_eq!(kernels::conv_out_size(wo, kw, stride, pad), w);
        let mut out = vec![F::zero(); n * co * ho * wo];
        kernels::conv2d_input_grad(
            self.val(x).data(),
            n,
            ci,
            self.val(k).data(),
            co,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
            &mut out,
        );
        let ng = self.needs(x) || self.needs(k);
        self.push(
            Tensor::new(vec![n, co, ho, wo], out),
            Op::ConvT2d { x, k, stride, pad },
            ng,
        )
    }

    // ---- normalisation and rows -------------------------------------------

    /// Layer normalisation over the last dimension with learned gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("layer_norm: rank >= 1");
        assert_eq!(self.val(gain).dims(), &[c], "layer_norm: gain dims");
        assert_eq!(self.val(bias).dims(), &[c], "layer_norm: bias dims");
        let epsf = F::of(eps);
        let cn = F::of(c as f64);
        let g = self.val(gain).data().to_vec();
        let b = self.val(bias).data().to_vec();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<F>() / cn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / cn;
            let inv = F::one() / (var + epsf).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Tensor::new(dims, data),
            Op::LayerNorm { x, gain, bias, eps },
            ng,
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("softmax: rank >= 1");
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(dims, data), Op::Softmax(x), ng)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("log_softmax: rank >= 1");
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<F>()
                .ln()
                + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(dims, data), Op::LogSoftmax(x), ng)
    }

    /// Picks one column per row: `out[r] = x[r, idx[r]]`.
    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("gather: rank >= 1");
        let rows = self.val(x).numel() / c;
        assert_eq!(
            idx.len(),
            rows,
            "gather: {} indices for {} rows",
            idx.len(),
            rows
        );
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < c, "gather: index {i} out of range {c} at row {r}");
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| self.val(x).data()[r * c + i])
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::new(vec![rows], data), Op::Gather(x, idx), ng)
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_cols: empty input list");
        let lead: Vec<usize> = {
            let d = self.val(xs[0]).dims();
            d[..d.len() - 1].to_vec()
        };
        let mut total = 0;
        for &x in xs {
            let d = self.val(x).dims();
            assert_eq!(
                &d[..d.len() - 1],
                lead.as_slice(),
                "concat_cols: leading dims differ"
            );
            total += *d.last().unwrap();
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut data = vec![F::zero(); rows * total];
        let mut offset = 0;
        for &x in xs {
            let c = *self.val(x).dims().last().unwrap();
            let src = self.val(x).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut dims = lead;
        dims.push(total);
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::new(dims, data), Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Slice `[from, to)` of the last dimension.
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("slice_cols: rank >= 1");
        assert!(
            from < to && to <= c,
            "slice_cols: [{from},{to}) out of range for width {c}"
        );
        let rows = self.val(x).numel() / c;
        let width = to - from;
        let mut data = vec![F::zero(); rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&self.val(x).data()[r * c + from..r * c + to]);
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = width;
        let ng = self.needs(x);
        self.push(Tensor::new(out_dims, data), Op::SliceCols(x, from, to), ng)
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_rows: empty input list");
        let tail: Vec<usize> = self.val(xs[0]).dims()[1..].to_vec();
        let mut rows = 0;
        for &x in xs {
            assert_eq!(
                &self.val(x).dims()[1..],
                tail.as_slice(),
                "concat_rows: trailing dims differ"
            );
            rows += self.val(x).dims()[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>().max(1));
        for &x in xs {
            data.extend_from_slice(self.val(x).data());
        }
        let mut dims = vec![rows];
        dims.extend_from_slice(&tail);
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::new(dims, data), Op::ConcatRows(xs.to_vec()), ng)
    }

    /// Slice `[from, to)` of the first dimension.
    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let n = dims[0];
        assert!(
            from < to && to <= n,
            "slice_rows: [{from},{to}) out of range for {n} rows"
        );
        let stride = self.val(x).numel() / n;
        let data = self.val(x).data()[from * stride..to * stride].to_vec();
        let mut out_dims = dims;
        out_dims[0] = to - from;
        let ng = self.needs(x);
        self.push(Tensor::new(out_dims, data), Op::SliceRows(x, from, to), ng)
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: F = self.val(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.val(x).numel();
        assert!(n > 0, "mean of empty tensor");
        let s: F = self.val(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s / F::of(n as f64)), Op::Mean(x), ng)
    }

    /// Sum over the last dimension: `[.., C] -> [..]` flattened to rows.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        let c = *dims.last().expect("row_sum: rank >= 1");
        let rows = self.val(x).numel() / c;
        let data = self
            .val(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().sum())
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::new(vec![rows], data), Op::RowSum(x), ng)
    }

    /// Same data, new dims.
    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> NodeId {
        let t = self.val(x).reshaped(dims);
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Forward identity; blocks gradients.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x).clone();
        self.push(t, Op::StopGrad, false)
    }

    // ---- stochastic -------------------------------------------------------

    /// Samples a one-hot row per distribution row of `probs` (last dim is the
    /// category axis). Backward passes gradients through unchanged, i.e. as
    /// if the output were the input probability vector (straight-through).
    pub fn st_sample(&mut self, probs: NodeId, rng: &mut StreamRng) -> NodeId {
        let dims = self.val(probs).dims().to_vec();
        let c = *dims.last().expect("st_sample: rank >= 1");
        assert!(
            self.val(probs).all_finite(),
            "st_sample: non-finite probabilities (upstream logits invalid)"
        );
        let mut data = vec![F::zero(); self.val(probs).numel()];
        for (r, row) in self.val(probs).data().chunks(c).enumerate() {
            let u = F::of(rng.uniform());
            let mut acc = F::zero();
            let mut chosen = c - 1; // numeric slack lands mass on last class
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = j;
                    break;
                }
            }
            data[r * c + chosen] = F::one();
        }
        let ng = self.needs(probs);
        self.push(Tensor::new(dims, data), Op::StSample(probs), ng)
    }

    /// Softmax → mix with `mix` of uniform mass → straight-through one-hot
    /// sample. The composition used for every categorical latent.
    pub fn categorical_st(&mut self, logits: NodeId, mix: f64, rng: &mut StreamRng) -> NodeId {
        let c = *self.val(logits).dims().last().expect("categorical_st") as f64;
        let probs = self.softmax(logits);
        let scaled = self.scale(probs, 1.0 - mix);
        let mixed = self.add_scalar(scaled, mix / c);
        self.st_sample(mixed, rng)
    }

    /// Numerically stable elementwise binary cross-entropy from logits
    /// against constant targets in `[0,1]`:
    /// `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_logits(&mut self, x: NodeId, targets: &[f64]) -> NodeId {
        let dims = self.val(x).dims().to_vec();
        assert_eq!(
            targets.len(),
            self.val(x).numel(),
            "bce_logits: target length {} vs input {}",
            targets.len(),
            self.val(x).numel()
        );
        let data = self
            .val(x)
            .data()
            .iter()
            .zip(targets)
            .map(|(&xv, &t)| {
                let x64 = xv.as_f64();
                F::of(x64.max(0.0) - x64 * t + (-x64.abs()).exp().ln_1p())
            })
            .collect();
        let ng = self.needs(x);
        self.push(
            Tensor::new(dims, data),
            Op::BceLogits(x, Tensor::new(vec![targets.len()], targets.to_vec())),
            ng,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        assert_eq!(
            self.val(loss).numel(),
            1,
            "backward: loss must be scalar, got dims {:?}",
            self.val(loss).dims()
        );
        let mut by_node: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss.0] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = by_node[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut by_node);
            by_node[id] = Some(g);
        }
        Gradients { by_node }
    }

    /// Collects this store's parameter gradients aligned with its variable
    /// order. Parameters the loss never touched get explicit zero gradients;
    /// parameters of *other* stores appearing in the graph are ignored.
    pub fn param_grads(&self, grads: &Gradients<F>, store: &VarStore<F>) -> Vec<Tensor<F>> {
        let mut out: Vec<Tensor<F>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.dims().to_vec()))
            .collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(uid, var) = node.op {
                if uid != store.uid() {
                    continue;
                }
                if let Some(g) = grads.wrt(NodeId(id)) {
                    let dst = &mut out[var.0];
                    assert_eq!(dst.dims(), g.dims());
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        }
        out
    }

    fn propagate(&self, id: usize, g: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Param(..) => {}
            Op::Add(a, b) => {
                self.acc_data(grads, *a, g.data(), F::one());
                self.acc_data(grads, *b, g.data(), F::one());
            }
            Op::Sub(a, b) => {
                self.acc_data(grads, *a, g.data(), F::one());
                self.acc_data(grads, *b, g.data(), -F::one());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.val(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.acc_data(grads, *a, &d, F::one());
                }
                if self.needs(*b) {
                    let d: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.val(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.acc_data(grads, *b, &d, F::one());
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let d: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.val(*b).data())
                        .map(|(&gv, &bv)| gv / bv)
                        .collect();
                    self.acc_data(grads, *a, &d, F::one());
                }
                if self.needs(*b) {
                    let d: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.val(*a).data().iter().zip(self.val(*b).data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.acc_data(grads, *b, &d, F::one());
                }
            }
            Op::Scale(a, c) => self.acc_data(grads, *a, g.data(), F::of(*c)),
            Op::AddScalar(a) => self.acc_data(grads, *a, g.data(), F::one()),
            Op::Matmul(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let (_, n) = self.val(*b).dims2();
                if self.needs(*a) {
                    // da = g * b^T
                    let mut bt = vec![F::zero(); k * n];
                    kernels::transpose(self.val(*b).data(), k, n, &mut bt);
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul(g.data(), m, n, &bt, k, &mut da);
                    self.acc_data(grads, *a, &da, F::one());
                }
                if self.needs(*b) {
                    // db = a^T * g
                    let mut at = vec![F::zero(); m * k];
                    kernels::transpose(self.val(*a).data(), m, k, &mut at);
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul(&at, k, m, g.data(), n, &mut db);
                    self.acc_data(grads, *b, &db, F::one());
                }
            }
            Op::AddBias(x, b) => {
                self.acc_data(grads, *x, g.data(), F::one());
                if self.needs(*b) {
                    let c = self.val(*b).numel();
                    let mut db = vec![F::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc_data(grads, *b, &db, F::one());
                }
            }
            Op::AddChan(x, b) => {
                self.acc_data(grads, *x, g.data(), F::one());
                if self.needs(*b) {
                    let dims = self.val(*x).dims();
                    let (c, hw) = (dims[1], dims[2] * dims[3]);
                    let mut db = vec![F::zero(); c];
                    for item in g.data().chunks(c * hw) {
                        for (ch, plane) in item.chunks(hw).enumerate() {
                            for &gv in plane {
                                db[ch] += gv;
                            }
                        }
                    }
                    self.acc_data(grads, *b, &db, F::one());
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let xd = self.val(*x).dims();
                let kd = self.val(*k).dims();
                let (n, ci, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                let (co, kh, kw) = (kd[0], kd[2], kd[3]);
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); n * ci * h * w];
                    kernels::conv2d_input_grad(
                        g.data(),
                        n,
                        co,
                        self.val(*k).data(),
                        ci,
                        kh,
                        kw,
                        h,
                        w,
                        *stride,
                        *pad,
                        &mut dx,
                    );
                    self.acc_data(grads, *x, &dx, F::one());
                }
                if self.needs(*k) {
                    let mut dk = vec![F::zero(); co * ci * kh * kw];
                    kernels::conv2d_kernel_grad(
                        self.val(*x).data(),
                        g.data(),
                        n,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dk,
                    );
                    self.acc_data(grads, *k, &dk, F::one());
                }
            }
            Op::ConvT2d { x, k, stride, pad } => {
                let xd = self.val(*x).dims();
                let kd = self.val(*k).dims();
                let (n, ci, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                let (co, kh, kw) = (kd[1], kd[2], kd[3]);
                let od = node.value.dims();
                let (ho, wo) = (od[2], od[3]);
                if self.needs(*x) {
                    // dx = conv(g, k) with k read as [co'=Ci, ci'=Co, kh, kw].
                    let mut dx = vec![F::zero(); n * ci * h * w];
                    kernels::conv2d_forward(
                        g.data(),
                        n,
                        co,
                        ho,
                        wo,
                        self.val(*k).data(),
                        ci,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dx,
                    );
                    self.acc_data(grads, *x, &dx, F::one());
                }
                if self.needs(*k) {
                    // dk = kernel-grad of the underlying conv with the roles
                    // of image (g) and output-grad (x) swapped.
                    let mut dk = vec![F::zero(); ci * co * kh * kw];
                    kernels::conv2d_kernel_grad(
                        g.data(),
                        self.val(*x).data(),
                        n,
                        co,
                        ho,
                        wo,
                        ci,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dk,
                    );
                    self.acc_data(grads, *k, &dk, F::one());
                }
            }
            Op::Tanh(a) => {
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (F::one() - y * y))
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Sigmoid(a) => {
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (F::one() - y))
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Silu(a) => {
                let one = F::one();
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| {
                        let s = one / (one + (-x).exp());
                        gv * (s + x * s * (one - s))
                    })
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Square(a) => {
                let two = F::of(2.0);
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| gv * two * x)
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Sqrt(a) => {
                let half = F::of(0.5);
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * half / y)
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Exp(a) => {
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Log(a) => {
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Clip(a, lo, hi) => {
                let (lf, hf) = (F::of(*lo), F::of(*hi));
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| {
                        if x >= lf && x <= hf {
                            gv
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = self.val(*gain).numel();
                let cn = F::of(c as f64);
                let epsf = F::of(*eps);
                let gains = self.val(*gain).data();
                let xv = self.val(*x).data();
                let rows = xv.len() / c;
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgain = vec![F::zero(); c];
                let mut dbias = vec![F::zero(); c];
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let mean = xr.iter().copied().sum::<F>() / cn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cn;
                    let inv = F::one() / (var + epsf).sqrt();
                    // dxhat = g ⊙ gain; then the standard layer-norm backward.
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gains[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gains[j];
                        dx[r * c + j] =
                            inv * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
                    }
                }
                self.acc_data(grads, *x, &dx, F::one());
                if self.needs(*gain) {
                    self.acc_data(grads, *gain, &dgain, F::one());
                }
                if self.needs(*bias) {
                    self.acc_data(grads, *bias, &dbias, F::one());
                }
            }
            Op::Softmax(a) => {
                let c = *node.value.dims().last().unwrap();
                let y = node.value.data();
                let mut d = vec![F::zero(); y.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::LogSoftmax(a) => {
                let c = *node.value.dims().last().unwrap();
                let y = node.value.data();
                let mut d = vec![F::zero(); y.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gsum: F = gr.iter().copied().sum();
                    for j in 0..c {
                        d[r * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.acc_data(grads, *a, &d, F::one());
            }
            Op::Gather(x, idx) => {
                let c = *self.val(*x).dims().last().unwrap();
                let mut d = vec![F::zero(); self.val(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    d[r * c + i] = g.data()[r];
                }
                self.acc_data(grads, *x, &d, F::one());
            }
            Op::ConcatCols(xs) => {
                let total = *node.value.dims().last().unwrap();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for &x in xs {
                    let c = *self.val(x).dims().last().unwrap();
                    if self.needs(x) {
                        let mut d = vec![F::zero(); rows * c];
                        for r in 0..rows {
                            d[r * c..(r + 1) * c].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        self.acc_data(grads, x, &d, F::one());
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, from, to) => {
                let c = *self.val(*x).dims().last().unwrap();
                let width = to - from;
                let rows = self.val(*x).numel() / c;
                let mut d = vec![F::zero(); self.val(*x).numel()];
                for r in 0..rows {
                    d[r * c + from..r * c + to]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                self.acc_data(grads, *x, &d, F::one());
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.val(x).numel();
                    if self.needs(x) {
                        self.acc_data(grads, x, &g.data()[start..start + len], F::one());
                    }
                    start += len;
                }
            }
            Op::SliceRows(x, from, to) => {
                let n = self.val(*x).dims()[0];
                let stride = self.val(*x).numel() / n;
                let mut d = vec![F::zero(); self.val(*x).numel()];
                d[from * stride..to * stride].copy_from_slice(g.data());
                self.acc_data(grads, *x, &d, F::one());
            }
            Op::Sum(x) => {
                let gv = g.item();
                let d = vec![gv; self.val(*x).numel()];
                self.acc_data(grads, *x, &d, F::one());
            }
            Op::Mean(x) => {
                let n = self.val(*x).numel();
                let gv = g.item() / F::of(n as f64);
                let d = vec![gv; n];
                self.acc_data(grads, *x, &d, F::one());
            }
            Op::RowSum(x) => {
                let c = *self.val(*x).dims().last().unwrap();
                let rows = self.val(*x).numel() / c;
                let mut d = vec![F::zero(); self.val(*x).numel()];
                for r in 0..rows {
                    let gv = g.data()[r];
                    for j in 0..c {
                        d[r * c + j] = gv;
                    }
                }
                self.acc_data(grads, *x, &d, F::one());
            }
            Op::Reshape(x) => {
                self.acc_data(grads, *x, g.data(), F::one());
            }
            Op::StopGrad => {}
            Op::StSample(src) => {
                // Straight-through: behave as if the output were the mixed
                // probability vector itself.
                self.acc_data(grads, *src, g.data(), F::one());
            }
            Op::BceLogits(x, targets) => {
                let one = F::one();
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.val(*x).data().iter().zip(targets.data()))
                    .map(|(&gv, (&xv, &t))| {
                        let s = one / (one + (-xv).exp());
                        gv * (s - F::of(t))
                    })
                    .collect();
                self.acc_data(grads, *x, &d, F::one());
            }
        }
    }

    /// Accumulates `scale * delta` into the gradient slot of `id` (if the
    /// node participates in differentiation).
    fn acc_data(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, delta: &[F], scale: F) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                debug_assert_eq!(t.numel(), delta.len());
                for (d, &s) in t.data_mut().iter_mut().zip(delta) {
                    *d += scale * s;
                }
            }
            None => {
                let dims = self.val(id).dims().to_vec();
                let mut t = Tensor::zeros(dims);
                for (d, &s) in t.data_mut().iter_mut().zip(delta) {
                    *d = scale * s;
                }
                *slot = Some(t);
            }
        }
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}
