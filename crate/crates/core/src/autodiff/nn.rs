//! Neural-network building blocks: parameter initialisation plus thin layer
//! structs that pair stored variables with their forward computation.
//!
//! Layers hold [`VarId`]s only; weights live in the [`VarStore`] so the
//! optimiser and checkpointing see every parameter in creation order.

use super::graph::{Graph, NodeId};
use super::store::{VarId, VarStore};
use super::tensor::Tensor;
use crate::num::Real;
use crate::rng::StreamRng;

/// Uniform Glorot initialisation: `U(-limit, limit)` with
/// `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<F: Real>(
    dims: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut StreamRng,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(dims, -limit, limit, rng)
}

/// Affine layer `y = x W + b` with `W: [in, out]`, `b: [out]`.
pub struct Dense {
    pub w: VarId,
    pub b: VarId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<F: Real>(
        store: &mut VarStore<F>,
        rng: &mut StreamRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            glorot_uniform(vec![in_dim, out_dim], in_dim, out_dim, rng),
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
    ) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Learned gain/bias pair for layer normalisation over the last dimension.
pub struct LayerNormParams {
    pub gain: VarId,
    pub bias: VarId,
}

impl LayerNormParams {
    pub fn new<F: Real>(store: &mut VarStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{name}.ln_gain"), Tensor::full(vec![dim], F::one()));
        let bias = store.add(&format!("{name}.ln_bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
    ) -> NodeId {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, 1e-5)
    }
}

/// Bias-free affine map, layer normalisation, then SiLU: the hidden block
/// used throughout the world model and the policy/value heads.
pub struct NormedSiluLayer {
    pub w: VarId,
    pub ln: LayerNormParams,
}

impl NormedSiluLayer {
    pub fn new<F: Real>(
        store: &mut VarStore<F>,
        rng: &mut StreamRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            glorot_uniform(vec![in_dim, out_dim], in_dim, out_dim, rng),
        );
        let ln = LayerNormParams::new(store, name, out_dim);
        Self { w, ln }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
    ) -> NodeId {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        let y = self.ln.forward(g, store, y);
        g.silu(y)
    }
}

/// Stack of [`NormedSiluLayer`]s followed by a plain affine output layer.
pub struct Mlp {
    pub hidden: Vec<NormedSiluLayer>,
    pub out: Dense,
}

impl Mlp {
    pub fn new<F: Real>(
        store: &mut VarStore<F>,
        rng: &mut StreamRng,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        out_dim: usize,
    ) -> Self {
        assert!(hidden_layers >= 1, "mlp {name}: need at least one hidden layer");
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut d = in_dim;
        for i in 0..hidden_layers {
            hidden.push(NormedSiluLayer::new(
                store,
                rng,
                &format!("{name}.h{i}"),
                d,
                hidden_dim,
            ));
            d = hidden_dim;
        }
        let out = Dense::new(store, rng, &format!("{name}.out"), d, out_dim);
        Self { hidden, out }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
    ) -> NodeId {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(g, store, h);
        }
        self.out.forward(g, store, h)
    }
}

/// Strided convolution layer with per-channel bias.
/// Kernel `[out_ch, in_ch, k, k]`, forward on `[N, in_ch, H, W]`.
pub struct Conv2dLayer {
    pub k: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<F: Real>(
        store: &mut VarStore<F>,
        rng: &mut StreamRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let fan_out = out_ch * ksize * ksize;
        let k = store.add(
            &format!("{name}.k"),
            glorot_uniform(vec![out_ch, in_ch, ksize, ksize], fan_in, fan_out, rng),
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        Self { k, b, stride, pad }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
    ) -> NodeId {
        let k = g.param(store, self.k);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, k, self.stride, self.pad);
        g.add_chan(y, b)
    }
}

/// Transposed-convolution layer with per-channel bias.
/// Kernel `[in_ch, out_ch, k, k]`, upsamples `[N, in_ch, H, W]`.
pub struct Deconv2dLayer {
    pub k: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2dLayer {
    pub fn new<F: Real>(
        store: &mut VarStore<F>,
        rng: &mut StreamRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let fan_out = out_ch * ksize * ksize;
        let k = store.add(
            &format!("{name}.k"),
            glorot_uniform(vec![in_ch, out_ch, ksize, ksize], fan_in, fan_out, rng),
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        Self { k, b, stride, pad }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
    ) -> NodeId {
        let k = g.param(store, self.k);
        let b = g.param(store, self.b);
        let y = g.conv_transpose2d(x, k, self.stride, self.pad);
        g.add_chan(y, b)
    }
}

/// Gated recurrent unit with fused gate weights.
///
/// `wx: [in, 3H]`, `wh: [H, 3H]`, `b: [3H]`, gates ordered reset, update,
/// candidate. The reset gate scales the *projected* hidden state, so with
/// all-zero parameters the update gate is 1/2 and the cell exactly halves
/// its state each step.
pub struct GruCell {
    pub wx: VarId,
    pub wh: VarId,
    pub b: VarId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Real>(
        store: &mut VarStore<F>,
        rng: &mut StreamRng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.add(
            &format!("{name}.wx"),
            glorot_uniform(vec![in_dim, 3 * hidden], in_dim, hidden, rng),
        );
        let wh = store.add(
            &format!("{name}.wh"),
            glorot_uniform(vec![hidden, 3 * hidden], hidden, hidden, rng),
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![3 * hidden]));
        Self {
            wx,
            wh,
            b,
            hidden,
        }
    }

    /// One step: `x [N, in]`, `h [N, H]` → new `h [N, H]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        x: NodeId,
        h: NodeId,
    ) -> NodeId {
        let hd = self.hidden;
        let wx = g.param(store, self.wx);
        let wh = g.param(store, self.wh);
        let b = g.param(store, self.b);
        let xz = g.matmul(x, wx);
        let xz = g.add_bias(xz, b);
        let hz = g.matmul(h, wh);
        let rx = g.slice_cols(xz, 0, hd);
        let ux = g.slice_cols(xz, hd, 2 * hd);
        let cx = g.slice_cols(xz, 2 * hd, 3 * hd);
        let rh = g.slice_cols(hz, 0, hd);
        let uh = g.slice_cols(hz, hd, 2 * hd);
        let ch = g.slice_cols(hz, 2 * hd, 3 * hd);
        let r_pre = g.add(rx, rh);
        let reset = g.sigmoid(r_pre);
        let u_pre = g.add(ux, uh);
        let update = g.sigmoid(u_pre);
        let ch_gated = g.mul(reset, ch);
        let c_pre = g.add(cx, ch_gated);
        let cand = g.tanh(c_pre);
        let keep = g.one_minus(update);
        let kept = g.mul(keep, h);
        let new = g.mul(update, cand);
        g.add(kept, new)
    }
}
