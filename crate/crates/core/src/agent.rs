//! Actor-critic trained inside the learned dynamics model.
//!
//! The policy and value networks never see pixels: both act on the world
//! model's latent feature vector. Training data comes from rolling the
//! model's prior dynamics forward from replayed posterior states — no
//! environment interaction — and the actor maximises λ-returns via
//! reinforce-with-baseline while the critic regresses those returns as a
//! two-hot distribution over a symlog-spaced grid.
//!
//! Policy, critic, and world model live in separate [`VarStore`]s. The
//! update builds one graph over all three, but actions and advantages enter
//! as constants and features are detached, so each backward pass reaches
//! exactly one store; the world model is never touched.

use core::fmt;

use crate::autodiff::nn::Mlp;
use crate::autodiff::{Adam, Graph, NodeId, Tensor, VarStore};
use crate::num::{symexp, symlog, Real};
use crate::rng::StreamRng;
use crate::twohot::Bins;
use crate::worldmodel::{ModelDims, StateNodes, WorldModel};

/// Discount factor for imagined rewards.
pub const DISCOUNT: f64 = 0.997;
/// Mixing weight of the λ-return recursion.
pub const LAMBDA: f64 = 0.95;
/// Default imagination rollout length.
pub const IMAG_HORIZON: usize = 15;
/// Entropy bonus weight in the actor objective.
pub const ENTROPY_SCALE: f64 = 3e-4;
/// EMA decay of the return-percentile tracker.
pub const RANGE_DECAY: f64 = 0.99;
/// Per-update EMA rate pulling the target critic toward the online critic.
pub const TARGET_TAU: f64 = 0.02;
/// Weight of the critic's regularisation toward its own slow copy.
pub const TARGET_REG_WEIGHT: f64 = 1.0;
/// Smallest / largest standard deviation the policy can express.
pub const MIN_STD: f64 = 0.1;
pub const MAX_STD: f64 = 1.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Per-dimension entropy constant of a unit Gaussian, `(1 + ln 2π) / 2`.
const GAUSS_ENT: f64 = 1.418_938_533_204_672_7;

/// Hyperparameters of the policy/value networks and their update.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Width of the world-model feature the networks consume.
    pub feature_dim: usize,
    /// Action vector width.
    pub action_dim: usize,
    /// Hidden width of both MLPs.
    pub hidden: usize,
    /// Hidden layers in both MLPs.
    pub layers: usize,
    /// Bins of the critic's two-hot grid.
    pub value_bins: usize,
    /// Raw-return magnitude the grid covers (symlog-spaced).
    pub value_limit: f64,
    /// Imagination rollout length used by the trainer.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_scale: f64,
    /// EMA decay of the return-percentile tracker.
    pub range_decay: f64,
    /// EMA rate of the target critic.
    pub target_tau: f64,
    /// Weight of the CE pull toward the target critic's distribution.
    pub target_reg: f64,
    pub min_std: f64,
    pub max_std: f64,
}

impl AgentConfig {
    /// Defaults sized for a given world model.
    pub fn for_model(dims: &ModelDims) -> Self {
        Self {
            feature_dim: dims.feature_dim(),
            action_dim: dims.action_dim,
            hidden: dims.hidden,
            layers: 2,
            value_bins: dims.reward_bins,
            value_limit: 300.0,
            horizon: IMAG_HORIZON,
            gamma: DISCOUNT,
            lambda: LAMBDA,
            entropy_scale: ENTROPY_SCALE,
            range_decay: RANGE_DECAY,
            target_tau: TARGET_TAU,
            target_reg: TARGET_REG_WEIGHT,
            min_std: MIN_STD,
            max_std: MAX_STD,
        }
    }

    /// A deliberately small configuration for tests.
    pub fn tiny(dims: &ModelDims) -> Self {
        Self {
            layers: 1,
            value_bins: 7,
            value_limit: 100.0,
            horizon: 5,
            ..Self::for_model(dims)
        }
    }

    fn validate(&self) {
        assert!(self.feature_dim >= 1 && self.action_dim >= 1);
        assert!(self.layers >= 1, "need at least one hidden layer");
        assert!(self.value_bins >= 2, "two-hot grid needs >= 2 bins");
        assert!(self.value_limit > 0.0);
        assert!(self.horizon >= 1, "imagination horizon must be >= 1");
        assert!(self.gamma > 0.0 && self.gamma <= 1.0);
        assert!((0.0..=1.0).contains(&self.lambda));
        assert!((0.0..1.0).contains(&self.range_decay));
        assert!(self.target_tau > 0.0 && self.target_tau <= 1.0);
        assert!(self.min_std > 0.0 && self.max_std >= self.min_std);
    }
}

/// Graph nodes of the policy distribution: per-dimension mean and standard
/// deviation of the pre-squash Gaussian, each `[N, action_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyNodes {
    pub mean: NodeId,
    pub std: NodeId,
}

/// One batch of imagined rollouts. All tensors are detached values: row `b`
/// of step `t` continues rollout `b`.
#[derive(Debug, Clone)]
pub struct ImaginedTrajectory<F> {
    pub batch: usize,
    pub horizon: usize,
    /// `horizon + 1` feature tensors `[batch, feature_dim]`; index 0 is the
    /// start state, index `t + 1` the state reached by action `t`.
    pub features: Vec<Tensor<F>>,
    /// `horizon` action tensors `[batch, action_dim]`, components in (−1, 1).
    pub actions: Vec<Tensor<F>>,
    /// Pre-squash Gaussian samples matching `actions` (`a = tanh(u)`).
    pub pre_tanh: Vec<Tensor<F>>,
    /// `horizon` predicted-reward vectors `[batch]` for arriving at state
    /// `t + 1`.
    pub rewards: Vec<Vec<F>>,
    /// `horizon` continuation probabilities `[batch]` of state `t + 1`.
    pub continues: Vec<Vec<F>>,
}

impl<F: Real> ImaginedTrajectory<F> {
    fn check(&self, cfg: &AgentConfig) {
        assert!(self.batch >= 1 && self.horizon >= 1);
        assert_eq!(self.features.len(), self.horizon + 1);
        assert_eq!(self.actions.len(), self.horizon);
        assert_eq!(self.pre_tanh.len(), self.horizon);
        assert_eq!(self.rewards.len(), self.horizon);
        assert_eq!(self.continues.len(), self.horizon);
        for f in &self.features {
            assert_eq!(f.dims(), [self.batch, cfg.feature_dim]);
        }
        for (a, u) in self.actions.iter().zip(&self.pre_tanh) {
            assert_eq!(a.dims(), [self.batch, cfg.action_dim]);
            assert_eq!(u.dims(), [self.batch, cfg.action_dim]);
        }
        for (r, c) in self.rewards.iter().zip(&self.continues) {
            assert_eq!(r.len(), self.batch);
            assert_eq!(c.len(), self.batch);
        }
    }
}

/// Scalar diagnostics of one actor-critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentDiag {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Mean policy entropy (pre-squash Gaussian, nats).
    pub entropy: f64,
    pub mean_return: f64,
    pub mean_value: f64,
    /// Denominator applied to advantages this update.
    pub return_scale: f64,
}

/// Loss nodes plus diagnostics, for callers that drive backward themselves.
pub struct AgentLossNodes {
    pub actor_loss: NodeId,
    pub critic_loss: NodeId,
    pub diag: AgentDiag,
}

/// Non-finite numbers encountered while building or applying an update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentError {
    NonFinite { what: &'static str },
}

impl fmt::Display for AgentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFinite { what } => {
                write!(f, "non-finite values in {what}; aborting update")
            }
        }
    }
}

impl std::error::Error for AgentError {}

/// λ-returns over one sequence.
///
/// `rewards[t]` is the reward for the transition into state `t + 1`,
/// `next_values[t]` the critic's value of state `t + 1` (the last entry is
/// the bootstrap), and `continues[t]` the continuation probability of state
/// `t + 1`. Computes
/// `R_t = r_t + γ·c_t·((1−λ)·V_{t+1} + λ·R_{t+1})` with `R_H = V_H`.
pub fn lambda_returns<F: Real>(
    rewards: &[F],
    next_values: &[F],
    continues: &[F],
    gamma: f64,
    lambda: f64,
) -> Vec<F> {
    let h = rewards.len();
    assert!(h >= 1, "need at least one step");
    assert_eq!(next_values.len(), h, "one next-state value per step");
    assert_eq!(continues.len(), h, "one continuation flag per step");
    let (gamma, lambda) = (F::of(gamma), F::of(lambda));
    let one_minus_lambda = F::one() - lambda;
    let mut out = vec![F::zero(); h];
    // At the end of the horizon the recursion bottoms out at the bootstrap
    // value, for which the (1−λ)/λ mixture is the value itself.
    let mut next = next_values[h - 1];
    for t in (0..h).rev() {
        let mixed = if t == h - 1 {
            next
        } else {
            one_minus_lambda * next_values[t] + lambda * next
        };
        next = rewards[t] + gamma * continues[t] * mixed;
        out[t] = next;
    }
    out
}

/// Tracks exponential moving averages of the 5th and 95th percentiles of
/// λ-returns; advantages are divided by `max(1, p95 − p5)` so learning is
/// invariant to return scale without amplifying tiny spreads.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReturnNormalizer {
    pub decay: f64,
    pub p5: Option<f64>,
    pub p95: Option<f64>,
}

impl ReturnNormalizer {
    pub fn new(decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must be in [0, 1)");
        Self {
            decay,
            p5: None,
            p95: None,
        }
    }

    /// Folds one batch of returns into the percentile averages.
    pub fn observe(&mut self, returns: &[f64]) {
        assert!(!returns.is_empty(), "cannot observe an empty batch");
        let mut sorted = returns.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
        let lo = percentile(&sorted, 0.05);
        let hi = percentile(&sorted, 0.95);
        let blend = |old: Option<f64>, new: f64| {
            Some(match old {
                None => new,
                Some(o) => self.decay * o + (1.0 - self.decay) * new,
            })
        };
        self.p5 = blend(self.p5, lo);
        self.p95 = blend(self.p95, hi);
    }

    /// Current advantage denominator, `max(1, p95 − p5)`; 1 before any data.
    pub fn scale(&self) -> f64 {
        match (self.p5, self.p95) {
            (Some(lo), Some(hi)) => (hi - lo).max(1.0),
            _ => 1.0,
        }
    }
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Baseline-subtracted returns divided by the tracked percentile range.
/// Folds `returns` into the normaliser first.
pub fn normalized_advantages(
    returns: &[f64],
    values: &[f64],
    norm: &mut ReturnNormalizer,
) -> Vec<f64> {
    assert_eq!(returns.len(), values.len());
    norm.observe(returns);
    let s = norm.scale();
    returns
        .iter()
        .zip(values)
        .map(|(r, v)| (r - v) / s)
        .collect()
}

/// Builds an empty store holding copies of every tensor in `src`, in the
/// same order and under the same names. Used for the critic's slow copy.
pub fn mirror_store<F: Real>(src: &VarStore<F>) -> VarStore<F> {
    let mut out = VarStore::new();
    for (_, name, t) in src.iter() {
        out.add(name, t.clone());
    }
    out
}

/// Moves every tensor of `target` a step `tau` toward its counterpart in
/// `online`: `target ← (1 − τ)·target + τ·online`.
pub fn ema_blend<F: Real>(online: &VarStore<F>, target: &mut VarStore<F>, tau: f64) {
    assert_eq!(online.len(), target.len(), "stores must mirror each other");
    let (keep, step) = (F::of(1.0 - tau), F::of(tau));
    for i in 0..online.len() {
        let id = crate::autodiff::VarId(i);
        assert_eq!(online.name(id), target.name(id), "store layout mismatch");
        let src = online.get(id).data().to_vec();
        let dst = target.get_mut(id).data_mut();
        assert_eq!(src.len(), dst.len(), "store layout mismatch");
        for (d, s) in dst.iter_mut().zip(src) {
            *d = keep * *d + step * s;
        }
    }
}

fn stack_rows<F: Real>(parts: &[Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty());
    let cols = parts[0].dims()[1];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        assert_eq!(p.dims().len(), 2);
        assert_eq!(p.dims()[1], cols);
        rows += p.dims()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

fn all_finite<F: Real>(xs: &[F]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 − tanh(u)²)` without catastrophic cancellation for large `|u|`.
fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - stable_softplus(-2.0 * u))
}

/// Policy and value networks plus the critic's two-hot grid. Parameters
/// live in the caller's stores; this struct holds only layout handles.
pub struct ActorCritic<F> {
    cfg: AgentConfig,
    actor: Mlp,
    critic: Mlp,
    bins: Bins<F>,
}

impl<F: Real> ActorCritic<F> {
    /// Creates both networks, registering the actor's parameters in
    /// `actor_store` and the critic's in `critic_store`. Output layers start
    /// at zero: the initial policy is a centred mid-spread Gaussian and the
    /// initial value estimate is exactly zero.
    pub fn new(
        cfg: AgentConfig,
        actor_store: &mut VarStore<F>,
        critic_store: &mut VarStore<F>,
        rng: &mut StreamRng,
    ) -> Self {
        cfg.validate();
        let actor = Mlp::new(
            actor_store,
            &mut rng.child("actor"),
            "actor",
            cfg.feature_dim,
            cfg.hidden,
            cfg.layers,
            2 * cfg.action_dim,
        );
        let critic = Mlp::new(
            critic_store,
            &mut rng.child("critic"),
            "critic",
            cfg.feature_dim,
            cfg.hidden,
            cfg.layers,
            cfg.value_bins,
        );
        for v in actor_store.get_mut(actor.out.w).data_mut() {
            *v = F::zero();
        }
        for v in critic_store.get_mut(critic.out.w).data_mut() {
            *v = F::zero();
        }
        let bins = Bins::symlog_spaced(cfg.value_bins, F::of(cfg.value_limit));
        Self {
            cfg,
            actor,
            critic,
            bins,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// The critic's two-hot grid (centres in symlog space).
    pub fn bins(&self) -> &Bins<F> {
        &self.bins
    }

    /// Policy distribution for features `[N, feature_dim]`. The standard
    /// deviation is squashed into `[min_std, max_std]`.
    pub fn policy(&self, g: &mut Graph<F>, store: &VarStore<F>, feat: NodeId) -> PolicyNodes {
        let a = self.cfg.action_dim;
        let raw = self.actor.forward(g, store, feat);
        let mean = g.slice_cols(raw, 0, a);
        let std_raw = g.slice_cols(raw, a, 2 * a);
        let unit = g.sigmoid(std_raw);
        let spread = g.scale(unit, self.cfg.max_std - self.cfg.min_std);
        let std = g.add_scalar(spread, self.cfg.min_std);
        PolicyNodes { mean, std }
    }

    /// Draws pre-squash Gaussian samples `u = μ + σ·ε` from distribution
    /// values.
    fn sample_pre_tanh(mean: &Tensor<F>, std: &Tensor<F>, rng: &mut StreamRng) -> Tensor<F> {
        assert_eq!(mean.dims(), std.dims());
        let data = mean
            .data()
            .iter()
            .zip(std.data())
            .map(|(&m, &s)| m + s * F::of(rng.normal()))
            .collect();
        Tensor::new(mean.dims().to_vec(), data)
    }

    /// Actions for features `[N, feature_dim]`: `tanh` of a Gaussian sample,
    /// or of the mean when `rng` is `None` (deterministic evaluation).
    /// Components lie in (−1, 1).
    pub fn act(
        &self,
        store: &VarStore<F>,
        features: &Tensor<F>,
        rng: Option<&mut StreamRng>,
    ) -> Tensor<F> {
        let mut g: Graph<F> = Graph::new();
        let f = g.input(features.clone());
        let pol = self.policy(&mut g, store, f);
        let mean = g.value(pol.mean);
        let u = match rng {
            Some(r) => Self::sample_pre_tanh(mean, g.value(pol.std), r),
            None => mean.clone(),
        };
        u.map(|x| x.tanh())
    }

    /// Log-density of the squashed actions `tanh(u)` under the policy, as a
    /// `[N, 1]` node. `u` enters as a constant, so gradients flow only into
    /// the distribution parameters — the score-function form.
    pub fn log_prob(
        &self,
        g: &mut Graph<F>,
        pol: PolicyNodes,
        u: &Tensor<F>,
    ) -> NodeId {
        let n = u.dims()[0];
        let a = self.cfg.action_dim;
        assert_eq!(u.dims(), [n, a]);
        // Per-row constant: the Gaussian normalisation and the tanh change
        // of variables, neither of which depends on the parameters.
        let const_row: Vec<F> = u
            .data()
            .chunks(a)
            .map(|row| {
                let jac: f64 = row.iter().map(|&v| log1m_tanh_sq(v.as_f64())).sum();
                F::of(-0.5 * LN_2PI * a as f64 - jac)
            })
            .collect();
        let u_node = g.input(u.clone());
        let diff = g.sub(u_node, pol.mean);
        let z = g.div(diff, pol.std);
        let q = g.square(z);
        let qh = g.scale(q, -0.5);
        let ls = g.log(pol.std);
        let per_dim = g.sub(qh, ls);
        let summed = g.row_sum(per_dim);
        let summed = g.reshape(summed, vec![n, 1]);
        let c = g.input(Tensor::new(vec![n, 1], const_row));
        g.add(summed, c)
    }

    /// Differential entropy of the pre-squash Gaussian, `[N, 1]`.
    pub fn entropy(&self, g: &mut Graph<F>, pol: PolicyNodes) -> NodeId {
        let dims = g.value(pol.std).dims().to_vec();
        let (n, a) = (dims[0], dims[1]);
        let ls = g.log(pol.std);
        let summed = g.row_sum(ls);
        let summed = g.reshape(summed, vec![n, 1]);
        g.add_scalar(summed, GAUSS_ENT * a as f64)
    }

    /// Critic's bin logits for features, `[N, value_bins]`.
    pub fn value_logits(&self, g: &mut Graph<F>, store: &VarStore<F>, feat: NodeId) -> NodeId {
        self.critic.forward(g, store, feat)
    }

    /// Expected raw-scale values from bin logits `[N, value_bins]`.
    pub fn decode_values(&self, logits: &Tensor<F>) -> Vec<F> {
        let k = self.cfg.value_bins;
        assert_eq!(logits.dims().len(), 2);
        assert_eq!(logits.dims()[1], k);
        logits
            .data()
            .chunks(k)
            .map(|row| {
                let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
                let total: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
                let probs: Vec<F> = exps.iter().map(|&e| e / total).collect();
                symexp(self.bins.decode(&probs))
            })
            .collect()
    }

    /// Rolls the prior dynamics forward `horizon` steps from detached start
    /// states, sampling actions from the policy. Purely model-driven: the
    /// only inputs are tensors and parameters, never an environment.
    pub fn imagine(
        &self,
        wm: &WorldModel<F>,
        wm_store: &VarStore<F>,
        actor_store: &VarStore<F>,
        start_h: &Tensor<F>,
        start_z: &Tensor<F>,
        horizon: usize,
        rng: &mut StreamRng,
    ) -> ImaginedTrajectory<F> {
        assert!(horizon >= 1, "imagination horizon must be >= 1");
        let n = start_h.dims()[0];
        assert!(n >= 1);
        assert_eq!(start_z.dims()[0], n);

        let mut g: Graph<F> = Graph::new();
        let mut state = StateNodes {
            h: g.input(start_h.clone()),
            z: g.input(start_z.clone()),
        };
        let mut feat = wm.feature_of(&mut g, state);

        let mut features = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut pre_tanh = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut continues = Vec::with_capacity(horizon);
        features.push(g.value(feat).clone());

        for _ in 0..horizon {
            let pol = self.policy(&mut g, actor_store, feat);
            let u = Self::sample_pre_tanh(g.value(pol.mean), g.value(pol.std), rng);
            let a = u.map(|x| x.tanh());
            let a_node = g.input(a.clone());
            pre_tanh.push(u);
            actions.push(a);

            state = wm.imagine_step(&mut g, wm_store, state, a_node, rng);
            feat = wm.feature_of(&mut g, state);
            features.push(g.value(feat).clone());

            let r_logits = wm.reward_logits(&mut g, wm_store, feat);
            rewards.push(wm.decode_reward_values(g.value(r_logits)));
            let c_logits = wm.cont_logits(&mut g, wm_store, feat);
            continues.push(wm.decode_cont_values(g.value(c_logits)));
        }

        ImaginedTrajectory {
            batch: n,
            horizon,
            features,
            actions,
            pre_tanh,
            rewards,
            continues,
        }
    }

    /// Builds both losses over one imagined batch.
    ///
    /// Advantages, return targets, and rollout weights enter the graph as
    /// constants computed here, so `backward(actor_loss)` reaches only
    /// `actor_store` and `backward(critic_loss)` only `critic_store`.
    pub fn losses(
        &self,
        g: &mut Graph<F>,
        actor_store: &VarStore<F>,
        critic_store: &VarStore<F>,
        target_store: &VarStore<F>,
        traj: &ImaginedTrajectory<F>,
        norm: &mut ReturnNormalizer,
    ) -> Result<AgentLossNodes, AgentError> {
        traj.check(&self.cfg);
        let cfg = &self.cfg;
        let n = traj.batch;
        let hor = traj.horizon;
        let hn = hor * n;

        for (r, c) in traj.rewards.iter().zip(&traj.continues) {
            if !all_finite(r) || !all_finite(c) {
                return Err(AgentError::NonFinite {
                    what: "imagined rewards/continuations",
                });
            }
        }

        // One critic pass over every state of every rollout, step-major.
        let feat_all = g.input(stack_rows(&traj.features));
        let logits_all = self.value_logits(g, critic_store, feat_all);
        let values_all = self.decode_values(g.value(logits_all));
        if !all_finite(&values_all) {
            return Err(AgentError::NonFinite {
                what: "critic values",
            });
        }

        // λ-returns per rollout, flattened step-major like everything else.
        let mut returns = vec![F::zero(); hn];
        let mut rewards_b = vec![F::zero(); hor];
        let mut next_values_b = vec![F::zero(); hor];
        let mut continues_b = vec![F::zero(); hor];
        for b in 0..n {
            for t in 0..hor {
                rewards_b[t] = traj.rewards[t][b];
                next_values_b[t] = values_all[(t + 1) * n + b];
                continues_b[t] = traj.continues[t][b];
            }
            let r = lambda_returns(&rewards_b, &next_values_b, &continues_b, cfg.gamma, cfg.lambda);
            for t in 0..hor {
                returns[t * n + b] = r[t];
            }
        }
        if !all_finite(&returns) {
            return Err(AgentError::NonFinite { what: "λ-returns" });
        }

        let returns_f64: Vec<f64> = returns.iter().map(|v| v.as_f64()).collect();
        let values_f64: Vec<f64> = values_all[..hn].iter().map(|v| v.as_f64()).collect();
        let advantages = normalized_advantages(&returns_f64, &values_f64, norm);
        let scale = norm.scale();

        // Down-weight steps the model predicts to lie beyond termination:
        // w_0 = 1, w_{t+1} = w_t · γ · c_t.
        let mut weights = vec![0.0f64; hn];
        for b in 0..n {
            let mut w = 1.0;
            for t in 0..hor {
                weights[t * n + b] = w;
                w *= cfg.gamma * traj.continues[t][b].as_f64();
            }
        }
        let w_node = g.input(Tensor::new(
            vec![hn, 1],
            weights.iter().map(|&v| F::of(v)).collect(),
        ));

        // Actor: reinforce on the score of the taken actions plus an
        // entropy bonus, maximised (hence the final negation).
        let feat_act = g.slice_rows(feat_all, 0, hn);
        let pol = self.policy(g, actor_store, feat_act);
        let u_all = stack_rows(&traj.pre_tanh);
        let logp = self.log_prob(g, pol, &u_all);
        let ent = self.entropy(g, pol);
        let adv_node = g.input(Tensor::new(
            vec![hn, 1],
            advantages.iter().map(|&v| F::of(v)).collect(),
        ));
        let score = g.mul(logp, adv_node);
        let bonus = g.scale(ent, cfg.entropy_scale);
        let objective = g.add(score, bonus);
        let weighted = g.mul(objective, w_node);
        let mean_obj = g.mean(weighted);
        let actor_loss = g.scale(mean_obj, -1.0);

        // Critic: cross-entropy to the two-hot of the λ-return, plus a pull
        // toward the slow copy's predicted distribution.
        let logits_train = g.slice_rows(logits_all, 0, hn);
        let logp_bins = g.log_softmax(logits_train);
        let mut target_rows = Vec::with_capacity(hn * cfg.value_bins);
        for &r in &returns {
            target_rows.extend(self.bins.encode(symlog(r)));
        }
        let target_node = g.input(Tensor::new(vec![hn, cfg.value_bins], target_rows));
        let ce_ret = cross_entropy_rows(g, target_node, logp_bins, hn);

        let target_logits = self.value_logits(g, target_store, feat_act);
        let target_probs = g.softmax(target_logits);
        let target_probs = g.stop_grad(target_probs);
        let ce_slow = cross_entropy_rows(g, target_probs, logp_bins, hn);

        let ce_slow_w = g.scale(ce_slow, cfg.target_reg);
        let ce = g.add(ce_ret, ce_slow_w);
        let ce_weighted = g.mul(ce, w_node);
        let critic_loss = g.mean(ce_weighted);

        let diag = AgentDiag {
            actor_loss: g.value(actor_loss).item().as_f64(),
            critic_loss: g.value(critic_loss).item().as_f64(),
            entropy: mean_f64(g.value(ent).data()),
            mean_return: returns_f64.iter().sum::<f64>() / hn as f64,
            mean_value: values_f64.iter().sum::<f64>() / hn as f64,
            return_scale: scale,
        };
        if !diag.actor_loss.is_finite() || !diag.critic_loss.is_finite() {
            return Err(AgentError::NonFinite { what: "loss values" });
        }
        Ok(AgentLossNodes {
            actor_loss,
            critic_loss,
            diag,
        })
    }

    /// One full update: build losses, step both optimisers, advance the
    /// slow critic copy. The world-model store is read, never written.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        traj: &ImaginedTrajectory<F>,
        actor_store: &mut VarStore<F>,
        actor_opt: &mut Adam<F>,
        critic_store: &mut VarStore<F>,
        critic_opt: &mut Adam<F>,
        target_store: &mut VarStore<F>,
        norm: &mut ReturnNormalizer,
    ) -> Result<AgentDiag, AgentError> {
        let mut g: Graph<F> = Graph::new();
        let nodes = self.losses(&mut g, actor_store, critic_store, target_store, traj, norm)?;

        let actor_grads = {
            let grads = g.backward(nodes.actor_loss);
            g.param_grads(&grads, actor_store)
        };
        let critic_grads = {
            let grads = g.backward(nodes.critic_loss);
            g.param_grads(&grads, critic_store)
        };
        for t in actor_grads.iter().chain(&critic_grads) {
            if !all_finite(t.data()) {
                return Err(AgentError::NonFinite { what: "gradients" });
            }
        }

        actor_opt
            .step(actor_store, &actor_grads)
            .expect("gradients align with the actor store");
        critic_opt
            .step(critic_store, &critic_grads)
            .expect("gradients align with the critic store");
        ema_blend(critic_store, target_store, self.cfg.target_tau);
        Ok(nodes.diag)
    }
}

/// Row-wise `−Σ target · logp`, averaged into a `[N, 1]` node.
fn cross_entropy_rows<F: Real>(
    g: &mut Graph<F>,
    target: NodeId,
    log_probs: NodeId,
    n: usize,
) -> NodeId {
    let prod = g.mul(target, log_probs);
    let s = g.row_sum(prod);
    let s = g.reshape(s, vec![n, 1]);
    g.scale(s, -1.0)
}

fn mean_f64<F: Real>(xs: &[F]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum::<f64>() / xs.len() as f64
}
