//! Recurrent state-space world model over tactile + position observations.
//!
//! The model embeds each observation (convolution stack over the tactile
//! frame, concatenated with the symlog-compressed position reading), carries
//! a deterministic GRU path, and represents per-step stochastic state as a
//! vector of categorical groups sampled with a straight-through estimator.
//! Decoder heads reconstruct the frame and position reading and predict the
//! reward (two-hot over a symlog-spaced grid) and episode continuation.
//!
//! Training minimises reconstruction/prediction losses plus two KL terms
//! between posterior and prior latents — one training the prior toward the
//! (frozen) posterior, one regularising the posterior toward the (frozen)
//! prior — each floored at a free-nats threshold after summing over groups.

use crate::autodiff::nn::{Conv2dLayer, Deconv2dLayer, Dense, GruCell, Mlp, NormedSiluLayer};
use crate::autodiff::{Graph, NodeId, Tensor, VarId, VarStore};
use crate::num::{symexp, symlog, Real};
use crate::rng::StreamRng;
use crate::twohot::Bins;

/// Frame geometry the encoder/decoder are built for.
pub const IMG_SIZE: usize = 64;
pub const IMG_CH: usize = 3;
const IMG_LEN: usize = IMG_CH * IMG_SIZE * IMG_SIZE;
/// Spatial side length after the four stride-2 convolutions.
const CONV_OUT: usize = IMG_SIZE / 16;

/// How stochastic latents are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentMode {
    /// One-hot samples with straight-through gradients (training mode).
    #[default]
    Sampled,
    /// Mixed class probabilities passed through directly. Fully
    /// differentiable; used by finite-difference gradient checks.
    Soft,
}

/// Network and loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    /// Channel count of the first convolution; doubles each layer.
    pub conv_base: usize,
    /// Observation embedding width.
    pub embed: usize,
    /// Deterministic (GRU) state width.
    pub deter: usize,
    /// Number of categorical groups in the stochastic state.
    pub groups: usize,
    /// Classes per group.
    pub classes: usize,
    /// Hidden width of the MLP heads.
    pub hidden: usize,
    /// Hidden layers in each MLP head.
    pub hidden_layers: usize,
    /// Bins of the reward head's two-hot grid.
    pub reward_bins: usize,
    /// Raw-reward magnitude the grid covers (symlog-spaced).
    pub reward_limit: f64,
    /// Uniform mixture weight added to categorical probabilities.
    pub unimix: f64,
    /// Free-nats floor applied to each KL term per sequence element.
    pub free_bits: f64,
    /// Position readings are scaled by this before symlog (metres to
    /// millimetres by default, so typical values are O(10), not O(0.01)).
    pub proprio_scale: f64,
    /// Action vector width.
    pub action_dim: usize,
    /// Weight of the prediction (reconstruction) losses.
    pub beta_pred: f64,
    /// Weight of the KL training the prior.
    pub beta_dyn: f64,
    /// Weight of the KL regularising the posterior.
    pub beta_rep: f64,
    pub latent_mode: LatentMode,
    /// Freeze one side of each KL term (always on in training; gradient
    /// checks turn it off because finite differences see both sides).
    pub kl_stopgrad: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            conv_base: 8,
            embed: 256,
            deter: 256,
            groups: 16,
            classes: 16,
            hidden: 256,
            hidden_layers: 1,
            reward_bins: 41,
            reward_limit: 120.0,
            unimix: 0.01,
            free_bits: 1.0,
            proprio_scale: 1000.0,
            action_dim: 3,
            beta_pred: 1.0,
            beta_dyn: 0.5,
            beta_rep: 0.1,
            latent_mode: LatentMode::Sampled,
            kl_stopgrad: true,
        }
    }
}

impl ModelDims {
    /// A deliberately tiny configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            conv_base: 2,
            embed: 16,
            deter: 16,
            groups: 4,
            classes: 4,
            hidden: 16,
            hidden_layers: 1,
            reward_bins: 11,
            ..Self::default()
        }
    }

    /// Width of the flattened stochastic state.
    pub fn latent_dim(&self) -> usize {
        self.groups * self.classes
    }

    /// Width of the model feature `[deterministic; stochastic]`.
    pub fn feature_dim(&self) -> usize {
        self.deter + self.latent_dim()
    }

    /// Flattened convolution output width.
    fn conv_flat(&self) -> usize {
        8 * self.conv_base * CONV_OUT * CONV_OUT
    }
}

/// One training batch of sequences, time-major: index `[t][b]`.
#[derive(Debug, Clone)]
pub struct BatchSeq<F> {
    pub batch: usize,
    pub steps: usize,
    /// `[T*B, 3*64*64]` pixels in `[0, 1]`.
    pub frames: Vec<F>,
    /// `[T*B, 3]` raw position readings, metres.
    pub proprio: Vec<F>,
    /// `[T*B, A]` action taken *before* each observation, unit scale.
    pub actions: Vec<F>,
    /// `[T*B]` reward received with each observation.
    pub rewards: Vec<F>,
    /// `[T*B]` 1.0 where the observation starts an episode.
    pub is_first: Vec<F>,
    /// `[T*B]` 1.0 where the observation ends an episode in a terminal state.
    pub is_terminal: Vec<F>,
}

impl<F: Real> BatchSeq<F> {
    pub fn validate(&self, action_dim: usize) {
        let n = self.batch * self.steps;
        assert!(n > 0, "empty batch");
        assert_eq!(self.frames.len(), n * IMG_LEN, "frame buffer length");
        assert_eq!(self.proprio.len(), n * 3, "proprio buffer length");
        assert_eq!(self.actions.len(), n * action_dim, "action buffer length");
        assert_eq!(self.rewards.len(), n, "reward buffer length");
        assert_eq!(self.is_first.len(), n, "is_first buffer length");
        assert_eq!(self.is_terminal.len(), n, "is_terminal buffer length");
    }
}

// ---- submodules -----------------------------------------------------------

struct Encoder {
    convs: Vec<Conv2dLayer>,
    fc: NormedSiluLayer,
}

impl Encoder {
    fn new<F: Real>(store: &mut VarStore<F>, rng: &mut StreamRng, dims: &ModelDims) -> Self {
        let chans = [
            IMG_CH,
            dims.conv_base,
            2 * dims.conv_base,
            4 * dims.conv_base,
            8 * dims.conv_base,
        ];
        let convs = (0..4)
            .map(|i| {
                Conv2dLayer::new(
                    store,
                    rng,
                    &format!("enc.conv{i}"),
                    chans[i],
                    chans[i + 1],
                    4,
                    2,
                    1,
                )
            })
            .collect();
        let fc = NormedSiluLayer::new(store, rng, "enc.fc", dims.conv_flat() + 3, dims.embed);
        Self { convs, fc }
    }

    /// `frames [N, 3, 64, 64]`, `proprio [N, 3]` (already symlog-scaled) →
    /// embedding `[N, E]`.
    fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        frames: NodeId,
        proprio: NodeId,
        flat_dim: usize,
    ) -> NodeId {
        let mut h = frames;
        for conv in &self.convs {
            h = conv.forward(g, store, h);
            h = g.silu(h);
        }
        let n = g.value(h).dims()[0];
        let flat = g.reshape(h, vec![n, flat_dim]);
        let cat = g.concat_cols(&[flat, proprio]);
        self.fc.forward(g, store, cat)
    }
}

struct Rssm {
    gru: GruCell,
    prior_mlp: Mlp,
    post_mlp: Mlp,
    /// Learned initial deterministic state, `[1, deter]`.
    h0: VarId,
    /// Learned initial stochastic-state logits, `[1, groups*classes]`.
    z0_logits: VarId,
}

impl Rssm {
    fn new<F: Real>(store: &mut VarStore<F>, rng: &mut StreamRng, dims: &ModelDims) -> Self {
        let gru = GruCell::new(
            store,
            rng,
            "rssm.gru",
            dims.latent_dim() + dims.action_dim,
            dims.deter,
        );
        let prior_mlp = Mlp::new(
            store,
            rng,
            "rssm.prior",
            dims.deter,
            dims.hidden,
            dims.hidden_layers,
            dims.latent_dim(),
        );
        let post_mlp = Mlp::new(
            store,
            rng,
            "rssm.post",
            dims.deter + dims.embed,
            dims.hidden,
            dims.hidden_layers,
            dims.latent_dim(),
        );
        let h0 = store.add("rssm.h0", Tensor::zeros(vec![1, dims.deter]));
        let z0_logits = store.add("rssm.z0_logits", Tensor::zeros(vec![1, dims.latent_dim()]));
        Self {
            gru,
            prior_mlp,
            post_mlp,
            h0,
            z0_logits,
        }
    }
}

struct Decoder {
    img_fc: Dense,
    deconvs: Vec<Deconv2dLayer>,
    proprio_mlp: Mlp,
    reward_mlp: Mlp,
    cont_mlp: Mlp,
}

impl Decoder {
    fn new<F: Real>(store: &mut VarStore<F>, rng: &mut StreamRng, dims: &ModelDims) -> Self {
        let img_fc = Dense::new(store, rng, "dec.fc", dims.feature_dim(), dims.conv_flat());
        let chans = [
            8 * dims.conv_base,
            4 * dims.conv_base,
            2 * dims.conv_base,
            dims.conv_base,
            IMG_CH,
        ];
        let deconvs = (0..4)
            .map(|i| {
                Deconv2dLayer::new(
                    store,
                    rng,
                    &format!("dec.deconv{i}"),
                    chans[i],
                    chans[i + 1],
                    4,
                    2,
                    1,
                )
            })
            .collect();
        let proprio_mlp = Mlp::new(
            store,
            rng,
            "dec.proprio",
            dims.feature_dim(),
            dims.hidden,
            dims.hidden_layers,
            3,
        );
        let reward_mlp = Mlp::new(
            store,
            rng,
            "dec.reward",
            dims.feature_dim(),
            dims.hidden,
            dims.hidden_layers,
            dims.reward_bins,
        );
        let cont_mlp = Mlp::new(
            store,
            rng,
            "dec.cont",
            dims.feature_dim(),
            dims.hidden,
            dims.hidden_layers,
            1,
        );
        Self {
            img_fc,
            deconvs,
            proprio_mlp,
            reward_mlp,
            cont_mlp,
        }
    }

    /// Feature `[N, feat]` → frame prediction `[N, 3, 64, 64]`.
    fn image<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        feat: NodeId,
        dims: &ModelDims,
    ) -> NodeId {
        let n = g.value(feat).dims()[0];
        let x = self.img_fc.forward(g, store, feat);
        let x = g.silu(x);
        let mut h = g.reshape(x, vec![n, 8 * dims.conv_base, CONV_OUT, CONV_OUT]);
        for (i, deconv) in self.deconvs.iter().enumerate() {
            h = deconv.forward(g, store, h);
            if i + 1 < self.deconvs.len() {
                h = g.silu(h);
            }
        }
        h
    }
}

// ---- KL between grouped categoricals --------------------------------------

/// Which side of the KL is held fixed (stop-gradient).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlSide {
    /// `KL(sg(q) || p)`: trains `p` toward the frozen `q`.
    FixQ,
    /// `KL(q || sg(p))`: pulls `q` toward the frozen `p`.
    FixP,
    /// No side frozen. Finite differences measure the true derivative, so
    /// gradient checks need this mode; training never uses it.
    Free,
}

/// Sum over groups of `KL(q_g || p_g)` for each row of logits.
///
/// `q_logits`/`p_logits` are `[N, groups*classes]`; both distributions get
/// the same uniform mixture before the divergence. Returns `[N, 1]`.
pub fn grouped_categorical_kl<F: Real>(
    g: &mut Graph<F>,
    q_logits: NodeId,
    p_logits: NodeId,
    groups: usize,
    classes: usize,
    unimix: f64,
    side: KlSide,
) -> NodeId {
    let n = g.value(q_logits).dims()[0];
    let per_group = |g: &mut Graph<F>, logits: NodeId| -> (NodeId, NodeId) {
        let rows = g.reshape(logits, vec![n * groups, classes]);
        let probs = g.softmax(rows);
        let mixed = if unimix > 0.0 {
            let scaled = g.scale(probs, 1.0 - unimix);
            g.add_scalar(scaled, unimix / classes as f64)
        } else {
            probs
        };
        let log_mixed = g.log(mixed);
        (mixed, log_mixed)
    };
    let (qp, ql) = per_group(g, q_logits);
    let (_, pl) = per_group(g, p_logits);
    let (qp, ql, pl) = match side {
        KlSide::FixQ => (g.stop_grad(qp), g.stop_grad(ql), pl),
        KlSide::FixP => (qp, ql, g.stop_grad(pl)),
        KlSide::Free => (qp, ql, pl),
    };
    let diff = g.sub(ql, pl);
    let terms = g.mul(qp, diff);
    let per_group_kl = g.row_sum(terms); // [N*groups]
    let regrouped = g.reshape(per_group_kl, vec![n, groups]);
    let summed = g.row_sum(regrouped); // [N]
    g.reshape(summed, vec![n, 1])
}

// ---- the model ------------------------------------------------------------

/// Latent state nodes inside one graph.
#[derive(Debug, Clone, Copy)]
pub struct StateNodes {
    /// Deterministic path, `[N, deter]`.
    pub h: NodeId,
    /// Flattened stochastic state, `[N, groups*classes]`.
    pub z: NodeId,
}

/// Result of observing a batch of sequences.
pub struct Observed {
    /// Features of every step, `[T*B, feature_dim]`, time-major.
    pub features: NodeId,
    /// Posterior logits per step, `[T*B, groups*classes]`.
    pub post_logits: NodeId,
    /// Prior logits per step, same shape.
    pub prior_logits: NodeId,
}

/// Scalar loss nodes of one world-model training step.
pub struct WmLoss {
    pub total: NodeId,
    pub image: NodeId,
    pub proprio: NodeId,
    pub reward: NodeId,
    pub cont: NodeId,
    /// Free-bits-floored KL training the prior, `KL(sg(post) || prior)`.
    pub kl_dyn: NodeId,
    /// Free-bits-floored KL regularising the posterior.
    pub kl_rep: NodeId,
}

pub struct WorldModel<F> {
    pub dims: ModelDims,
    encoder: Encoder,
    rssm: Rssm,
    decoder: Decoder,
    bins: Bins<F>,
}

impl<F: Real> WorldModel<F> {
    pub fn new(store: &mut VarStore<F>, rng: &mut StreamRng, dims: ModelDims) -> Self {
        assert!(dims.unimix >= 0.0 && dims.unimix < 1.0, "unimix in [0, 1)");
        let encoder = Encoder::new(store, rng, &dims);
        let rssm = Rssm::new(store, rng, &dims);
        let decoder = Decoder::new(store, rng, &dims);
        // Neutral initial reward/continuation predictions: zero the output
        // weights so early training is not chasing random head noise.
        for var in [decoder.reward_mlp.out.w, decoder.cont_mlp.out.w] {
            for v in store.get_mut(var).data_mut() {
                *v = F::zero();
            }
        }
        let bins = Bins::symlog_spaced(dims.reward_bins, F::of(dims.reward_limit));
        Self {
            dims,
            encoder,
            rssm,
            decoder,
            bins,
        }
    }

    pub fn bins(&self) -> &Bins<F> {
        &self.bins
    }

    /// Applies the model's scaling+symlog to raw position readings.
    pub fn proprio_feature(&self, raw: &[F]) -> Vec<F> {
        raw.iter()
            .map(|&v| symlog(v * F::of(self.dims.proprio_scale)))
            .collect()
    }

    /// Model feature: concatenated deterministic and stochastic state.
    pub fn feature_of(&self, g: &mut Graph<F>, state: StateNodes) -> NodeId {
        g.concat_cols(&[state.h, state.z])
    }

    /// Splits feature *values* `[N, feat]` back into `(h, z)` tensors.
    pub fn split_features(&self, feats: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
        let dims = feats.dims();
        assert_eq!(dims.len(), 2);
        assert_eq!(dims[1], self.dims.feature_dim());
        let (n, hd, zd) = (dims[0], self.dims.deter, self.dims.latent_dim());
        let mut h = Vec::with_capacity(n * hd);
        let mut z = Vec::with_capacity(n * zd);
        for row in 0..n {
            let base = row * (hd + zd);
            h.extend_from_slice(&feats.data()[base..base + hd]);
            z.extend_from_slice(&feats.data()[base + hd..base + hd + zd]);
        }
        (Tensor::new(vec![n, hd], h), Tensor::new(vec![n, zd], z))
    }

    /// Stochastic-state distribution from logits: per-group softmax with the
    /// uniform mixture, flattened back to `[N, groups*classes]`.
    fn latent_probs(&self, g: &mut Graph<F>, logits: NodeId) -> NodeId {
        let n = g.value(logits).dims()[0];
        let d = &self.dims;
        let rows = g.reshape(logits, vec![n * d.groups, d.classes]);
        let probs = g.softmax(rows);
        let mixed = if d.unimix > 0.0 {
            let scaled = g.scale(probs, 1.0 - d.unimix);
            g.add_scalar(scaled, d.unimix / d.classes as f64)
        } else {
            probs
        };
        g.reshape(mixed, vec![n, d.latent_dim()])
    }

    /// Draws the stochastic state from logits according to the latent mode.
    fn sample_latent(&self, g: &mut Graph<F>, logits: NodeId, rng: &mut StreamRng) -> NodeId {
        let probs = self.latent_probs(g, logits);
        match self.dims.latent_mode {
            LatentMode::Soft => probs,
            LatentMode::Sampled => {
                let n = g.value(probs).dims()[0];
                let d = &self.dims;
                let rows = g.reshape(probs, vec![n * d.groups, d.classes]);
                let sample = g.st_sample(rows, rng);
                g.reshape(sample, vec![n, d.latent_dim()])
            }
        }
    }

    /// Learned initial state broadcast to `n` rows.
    fn initial_state(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        n: usize,
        rng: &mut StreamRng,
    ) -> StateNodes {
        let ones = g.input(Tensor::full(vec![n, 1], F::one()));
        let h0 = g.param(store, self.rssm.h0);
        let z0l = g.param(store, self.rssm.z0_logits);
        let h = g.matmul(ones, h0);
        let z0_logits = g.matmul(ones, z0l);
        let z = self.sample_latent(g, z0_logits, rng);
        StateNodes { h, z }
    }

    /// Initial state *values* for online collection (batch of one).
    pub fn initial_state_values(
        &self,
        store: &VarStore<F>,
        rng: &mut StreamRng,
    ) -> (Tensor<F>, Tensor<F>) {
        let mut g: Graph<F> = Graph::new();
        let s = self.initial_state(&mut g, store, 1, rng);
        (g.value(s.h).clone(), g.value(s.z).clone())
    }

    /// One dynamics step: previous state and the action taken → next
    /// deterministic state and prior logits.
    fn dynamics(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        state: StateNodes,
        action: NodeId,
    ) -> (NodeId, NodeId) {
        let x = g.concat_cols(&[state.z, action]);
        let h = self.rssm.gru.forward(g, store, x, state.h);
        let prior_logits = self.rssm.prior_mlp.forward(g, store, h);
        (h, prior_logits)
    }

    /// One imagination step: state evolves under `action` and the stochastic
    /// state is drawn from the prior.
    pub fn imagine_step(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        state: StateNodes,
        action: NodeId,
        rng: &mut StreamRng,
    ) -> StateNodes {
        let (h, prior_logits) = self.dynamics(g, store, state, action);
        let z = self.sample_latent(g, prior_logits, rng);
        StateNodes { h, z }
    }

    /// One filtering step for online collection: advance the dynamics with
    /// the action just taken, then condition on the new observation.
    /// Returns the posterior state.
    #[allow(clippy::too_many_arguments)]
    pub fn observe_step(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        state: StateNodes,
        action: NodeId,
        frame: NodeId,
        proprio: NodeId,
        rng: &mut StreamRng,
    ) -> StateNodes {
        let (h, _) = self.dynamics(g, store, state, action);
        let embed = self
            .encoder
            .forward(g, store, frame, proprio, self.dims.conv_flat());
        let cat = g.concat_cols(&[h, embed]);
        let post_logits = self.rssm.post_mlp.forward(g, store, cat);
        let z = self.sample_latent(g, post_logits, rng);
        StateNodes { h, z }
    }

    /// Filters a whole batch of sequences, producing per-step features and
    /// posterior/prior logits. Sequences start from the learned initial
    /// state; rows flagged `is_first` reset to it mid-sequence (with their
    /// stored action zeroed, since no action preceded a reset).
    pub fn observe(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        batch: &BatchSeq<F>,
        rng: &mut StreamRng,
    ) -> Observed {
        let d = &self.dims;
        batch.validate(d.action_dim);
        let (b, t) = (batch.batch, batch.steps);
        let n = b * t;

        let frames = g.input(Tensor::new(
            vec![n, IMG_CH, IMG_SIZE, IMG_SIZE],
            batch.frames.clone(),
        ));
        let proprio = g.input(Tensor::new(
            vec![n, 3],
            self.proprio_feature(&batch.proprio),
        ));
        let actions = g.input(Tensor::new(vec![n, d.action_dim], batch.actions.clone()));
        let firsts = g.input(Tensor::new(vec![n, 1], batch.is_first.clone()));

        let embeds = self.encoder.forward(g, store, frames, proprio, d.conv_flat());

        let ones_h = g.input(Tensor::full(vec![1, d.deter], F::one()));
        let ones_z = g.input(Tensor::full(vec![1, d.latent_dim()], F::one()));
        let ones_a = g.input(Tensor::full(vec![1, d.action_dim], F::one()));

        let mut state = self.initial_state(g, store, b, rng);
        let mut features = Vec::with_capacity(t);
        let mut post_all = Vec::with_capacity(t);
        let mut prior_all = Vec::with_capacity(t);

        for step in 0..t {
            let rows = (step * b, (step + 1) * b);
            let embed_t = g.slice_rows(embeds, rows.0, rows.1);
            let action_t = g.slice_rows(actions, rows.0, rows.1);
            let first_t = g.slice_rows(firsts, rows.0, rows.1);

            // Blend the carried state with the initial state wherever an
            // episode restarted, and zero the (meaningless) stored action.
            let keep = g.one_minus(first_t);
            let keep_a = g.matmul(keep, ones_a);
            let action_t = g.mul(action_t, keep_a);
            if step > 0 {
                let init = self.initial_state(g, store, b, rng);
                let m_h = g.matmul(first_t, ones_h);
                let k_h = g.matmul(keep, ones_h);
                let m_z = g.matmul(first_t, ones_z);
                let k_z = g.matmul(keep, ones_z);
                let hm = g.mul(m_h, init.h);
                let hk = g.mul(k_h, state.h);
                let zm = g.mul(m_z, init.z);
                let zk = g.mul(k_z, state.z);
                state = StateNodes {
                    h: g.add(hm, hk),
                    z: g.add(zm, zk),
                };
            }

            let (h, prior_logits) = self.dynamics(g, store, state, action_t);
            let cat = g.concat_cols(&[h, embed_t]);
            let post_logits = self.rssm.post_mlp.forward(g, store, cat);
            let z = self.sample_latent(g, post_logits, rng);
            state = StateNodes { h, z };
            features.push(self.feature_of(g, state));
            post_all.push(post_logits);
            prior_all.push(prior_logits);
        }

        Observed {
            features: g.concat_rows(&features),
            post_logits: g.concat_rows(&post_all),
            prior_logits: g.concat_rows(&prior_all),
        }
    }

    /// Reward-head logits for features.
    pub fn reward_logits(&self, g: &mut Graph<F>, store: &VarStore<F>, feat: NodeId) -> NodeId {
        self.decoder.reward_mlp.forward(g, store, feat)
    }

    /// Continuation-head logit for features, `[N, 1]`.
    pub fn cont_logits(&self, g: &mut Graph<F>, store: &VarStore<F>, feat: NodeId) -> NodeId {
        self.decoder.cont_mlp.forward(g, store, feat)
    }

    /// Frame reconstruction for features, `[N, 3, 64, 64]`.
    pub fn decode_frames(&self, g: &mut Graph<F>, store: &VarStore<F>, feat: NodeId) -> NodeId {
        self.decoder.image(g, store, feat, &self.dims)
    }

    /// Position-reading reconstruction (symlog-scaled space), `[N, 3]`.
    pub fn decode_proprio(&self, g: &mut Graph<F>, store: &VarStore<F>, feat: NodeId) -> NodeId {
        self.decoder.proprio_mlp.forward(g, store, feat)
    }

    /// Expected raw reward per row from reward-head logit *values*.
    pub fn decode_reward_values(&self, logits: &Tensor<F>) -> Vec<F> {
        let k = self.dims.reward_bins;
        let dims = logits.dims();
        assert_eq!(dims.len(), 2);
        assert_eq!(dims[1], k);
        let mut out = Vec::with_capacity(dims[0]);
        for row in logits.data().chunks(k) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
            let probs: Vec<F> = exps.iter().map(|&e| e / total).collect();
            out.push(symexp(self.bins.decode(&probs)));
        }
        out
    }

    /// Continuation probabilities from continuation-head logit *values*.
    pub fn decode_cont_values(&self, logits: &Tensor<F>) -> Vec<F> {
        logits
            .data()
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect()
    }

    /// Builds the full training loss for a batch.
    pub fn loss(
        &self,
        g: &mut Graph<F>,
        store: &VarStore<F>,
        batch: &BatchSeq<F>,
        rng: &mut StreamRng,
    ) -> (WmLoss, Observed) {
        let d = &self.dims;
        let observed = self.observe(g, store, batch, rng);
        let n = batch.batch * batch.steps;
        let feats = observed.features;

        // Frame reconstruction: squared error summed per frame, then meaned.
        let pred_img = self.decoder.image(g, store, feats, d);
        let target_img = g.input(Tensor::new(
            vec![n, IMG_CH, IMG_SIZE, IMG_SIZE],
            batch.frames.clone(),
        ));
        let diff = g.sub(pred_img, target_img);
        let sq = g.square(diff);
        let flat = g.reshape(sq, vec![n, IMG_LEN]);
        let per_frame = g.row_sum(flat);
        let image = g.mean(per_frame);

        // Position-reading reconstruction in symlog-scaled space.
        let pred_pro = self.decoder.proprio_mlp.forward(g, store, feats);
        let target_pro = g.input(Tensor::new(vec![n, 3], self.proprio_feature(&batch.proprio)));
        let dp = g.sub(pred_pro, target_pro);
        let sqp = g.square(dp);
        let perp = g.row_sum(sqp);
        let proprio = g.mean(perp);

        // Reward: cross-entropy against the two-hot encoding of the symlog
        // reward.
        let reward_logits = self.decoder.reward_mlp.forward(g, store, feats);
        let mut tw = Vec::with_capacity(n * d.reward_bins);
        for &r in &batch.rewards {
            tw.extend(self.bins.encode(symlog(r)));
        }
        let target_rw = g.input(Tensor::new(vec![n, d.reward_bins], tw));
        let lsm = g.log_softmax(reward_logits);
        let ce_terms = g.mul(target_rw, lsm);
        let ce_rows = g.row_sum(ce_terms);
        let neg = g.scale(ce_rows, -1.0);
        let reward = g.mean(neg);

        // Continuation: binary cross-entropy toward 1 - is_terminal.
        let cont_logits = self.decoder.cont_mlp.forward(g, store, feats);
        let cont_targets: Vec<f64> = batch
            .is_terminal
            .iter()
            .map(|&v| 1.0 - v.as_f64())
            .collect();
        let bce = g.bce_logits(cont_logits, &cont_targets);
        let cont = g.mean(bce);

        // KL terms on the latent distributions, group-summed per step and
        // floored at the free-bits threshold before averaging.
        let floor = |g: &mut Graph<F>, kl: NodeId| -> NodeId {
            let clipped = g.clip(kl, d.free_bits, f64::INFINITY);
            g.mean(clipped)
        };
        let (dyn_side, rep_side) = if d.kl_stopgrad {
            (KlSide::FixQ, KlSide::FixP)
        } else {
            (KlSide::Free, KlSide::Free)
        };
        let dyn_rows = grouped_categorical_kl(
            g,
            observed.post_logits,
            observed.prior_logits,
            d.groups,
            d.classes,
            d.unimix,
            dyn_side,
        );
        let kl_dyn = floor(g, dyn_rows);
        let rep_rows = grouped_categorical_kl(
            g,
            observed.post_logits,
            observed.prior_logits,
            d.groups,
            d.classes,
            d.unimix,
            rep_side,
        );
        let kl_rep = floor(g, rep_rows);

        let pred_sum = {
            let a = g.add(image, proprio);
            let b = g.add(reward, cont);
            g.add(a, b)
        };
        let total = {
            let p = g.scale(pred_sum, d.beta_pred);
            let dy = g.scale(kl_dyn, d.beta_dyn);
            let rp = g.scale(kl_rep, d.beta_rep);
            let s = g.add(p, dy);
            g.add(s, rp)
        };

        (
            WmLoss {
                total,
                image,
                proprio,
                reward,
                cont,
                kl_dyn,
                kl_rep,
            },
            observed,
        )
    }
}
