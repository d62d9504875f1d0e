//! Training loop: collect experience, train the world model on replayed
//! windows, train the agent in imagination, evaluate, checkpoint.
//!
//! The loop alternates fixed-size collection chunks with a burst of gradient
//! steps sized by the replay ratio (replayed steps per collected step),
//! carrying the fractional remainder between chunks. Every piece of mutable
//! state — network parameters, optimiser moments, replay contents, random
//! streams, the environment mid-episode, the online belief — is saved in
//! checkpoints, so a resumed run continues the exact step sequence of an
//! uninterrupted one and writes the same metrics.

mod checkpoint;
mod config;
mod metrics;
mod replay;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointWriter, MAGIC, VERSION};
pub use config::{hex, ConfigError, RunConfig, TrainSettings};
pub use metrics::MetricsWriter;
pub use replay::{frame_chw, pixel_level, ReplayBuffer, StepRecord, FRAME_LEN};

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{mirror_store, ActorCritic, AgentError, ReturnNormalizer};
use crate::autodiff::{Adam, Graph, Tensor, VarId, VarStore};
use crate::env::{scale_unit_action, EnvSetupError, EnvSnapshot, InsertEnv, Observation, StopCause};
use crate::num::Real;
use crate::rng::StreamRng;
use crate::sim::Vec3;
use crate::worldmodel::{StateNodes, WorldModel, IMG_CH, IMG_SIZE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Setup(#[from] EnvSetupError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite {what} after {env_steps} environment steps; state saved to {checkpoint}")]
    NonFinite { what: String, env_steps: u64, checkpoint: PathBuf },
    #[error("replay holds {have} steps, one training window needs {need}")]
    ReplayNotReady { have: usize, need: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io { path: path.to_owned(), source }
}

/// Outcome of one evaluation round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: u32,
    /// Fraction of episodes ending at the goal.
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    /// Episode count per stop cause.
    pub causes: BTreeMap<String, u32>,
}

/// What acts during evaluation.
pub enum EvalPolicy<'a, F: Real> {
    /// Uniform random unit actions — the floor any learned policy must beat.
    Random,
    /// The learned policy, acting deterministically (the mean action)
    /// through the world model's belief filter.
    Agent {
        wm: &'a WorldModel<F>,
        wm_store: &'a VarStore<F>,
        ac: &'a ActorCritic<F>,
        actor_store: &'a VarStore<F>,
    },
}

fn cause_name(cause: StopCause) -> &'static str {
    match cause {
        StopCause::Goal => "goal",
        StopCause::LeftWorkspace => "left_workspace",
        StopCause::Timeout => "timeout",
    }
}

/// The recurrent belief carried across one episode during collection and
/// evaluation: deterministic state plus sampled stochastic state.
struct Belief<F: Real> {
    h: Tensor<F>,
    z: Tensor<F>,
}

impl<F: Real> Belief<F> {
    fn reset(wm: &WorldModel<F>, store: &VarStore<F>, rng: &mut StreamRng) -> Self {
        let (h, z) = wm.initial_state_values(store, rng);
        Self { h, z }
    }

    /// Advances the filter with the action just taken and the observation it
    /// produced.
    fn observe(
        &mut self,
        wm: &WorldModel<F>,
        store: &VarStore<F>,
        prev_unit_action: Vec3,
        obs: &Observation,
        rng: &mut StreamRng,
    ) {
        let mut g: Graph<F> = Graph::new();
        let state =
            StateNodes { h: g.input(self.h.clone()), z: g.input(self.z.clone()) };
        let action = g.input(Tensor::new(
            vec![1, 3],
            prev_unit_action.iter().map(|&x| F::of(x)).collect(),
        ));
        let frame =
            g.input(Tensor::new(vec![1, IMG_CH, IMG_SIZE, IMG_SIZE], frame_chw(&obs.tactile)));
        let raw: Vec<F> = obs.proprio.iter().map(|&x| F::of(x)).collect();
        let proprio = g.input(Tensor::new(vec![1, 3], wm.proprio_feature(&raw)));
        let next = wm.observe_step(&mut g, store, state, action, frame, proprio, rng);
        self.h = g.value(next.h).clone();
        self.z = g.value(next.z).clone();
    }

    /// The `[1, deter + latent]` feature the policy consumes.
    fn feature(&self) -> Tensor<F> {
        let mut data = self.h.data().to_vec();
        data.extend_from_slice(self.z.data());
        Tensor::new(vec![1, self.h.dims()[1] + self.z.dims()[1]], data)
    }
}

/// Runs episodes with a fresh environment and reports aggregate results.
/// Uses only streams derived from `rng`, never touches replay, and leaves
/// the caller's training state untouched.
pub fn evaluate<F: Real>(
    cfg: &RunConfig,
    policy: EvalPolicy<'_, F>,
    episodes: u32,
    rng: &mut StreamRng,
) -> Result<EvalReport, EnvSetupError> {
    let mut env = InsertEnv::new(
        cfg.geom.clone(),
        cfg.sim.clone(),
        cfg.gel.clone(),
        cfg.env.clone(),
        rng.child("env"),
    )?;
    let mut successes = 0u32;
    let mut return_sum = 0.0;
    let mut length_sum = 0u64;
    let mut causes: BTreeMap<String, u32> = BTreeMap::new();
    for ep in 0..u64::from(episodes) {
        let mut action_rng = rng.child_indexed("action", ep);
        let mut latent_rng = rng.child_indexed("latent", ep);
        let obs = env.reset();
        let mut belief = match &policy {
            EvalPolicy::Agent { wm, wm_store, .. } => {
                let mut b = Belief::reset(wm, wm_store, &mut latent_rng);
                b.observe(wm, wm_store, [0.0; 3], &obs, &mut latent_rng);
                Some(b)
            }
            EvalPolicy::Random => None,
        };
        loop {
            let unit: Vec3 = match &policy {
                EvalPolicy::Random => {
                    let mut u = [0.0; 3];
                    for v in &mut u {
                        *v = action_rng.uniform_in(-1.0, 1.0);
                    }
                    u
                }
                EvalPolicy::Agent { ac, actor_store, .. } => {
                    let feat = belief.as_ref().expect("agent evaluation keeps a belief").feature();
                    let a = ac.act(actor_store, &feat, None);
                    [a.data()[0].as_f64(), a.data()[1].as_f64(), a.data()[2].as_f64()]
                }
            };
            let out = env
                .step(scale_unit_action(unit, env.max_step()))
                .expect("the episode is active until a stop cause is seen");
            return_sum += out.reward.total;
            length_sum += 1;
            if out.terminated || out.truncated {
                let cause = out.cause.expect("an ended episode names its cause");
                if cause == StopCause::Goal {
                    successes += 1;
                }
                *causes.entry(cause_name(cause).to_owned()).or_insert(0) += 1;
                break;
            }
            if let (Some(b), EvalPolicy::Agent { wm, wm_store, .. }) = (&mut belief, &policy) {
                b.observe(wm, wm_store, unit, &out.obs, &mut latent_rng);
            }
        }
    }
    let n = f64::from(episodes.max(1));
    Ok(EvalReport {
        episodes,
        success_rate: f64::from(successes) / n,
        mean_return: return_sum / n,
        mean_length: length_sum as f64 / n,
        causes,
    })
}

/// Everything a training run carries between steps.
pub struct Trainer<F: Real> {
    cfg: RunConfig,
    root: StreamRng,
    env: InsertEnv,
    wm: WorldModel<F>,
    wm_store: VarStore<F>,
    wm_opt: Adam<F>,
    ac: ActorCritic<F>,
    actor_store: VarStore<F>,
    actor_opt: Adam<F>,
    critic_store: VarStore<F>,
    critic_opt: Adam<F>,
    target_store: VarStore<F>,
    norm: ReturnNormalizer,
    replay: ReplayBuffer,
    explore_rng: StreamRng,
    replay_rng: StreamRng,
    latent_rng: StreamRng,
    imagine_rng: StreamRng,
    belief_rng: StreamRng,
    belief: Belief<F>,
    needs_reset: bool,
    ep_return: f64,
    ep_len: u64,
    env_steps: u64,
    grad_steps: u64,
    /// Fractional gradient steps owed; whole units are spent each cycle.
    credit: f64,
    eval_round: u64,
    last_eval: u64,
    last_ckpt: u64,
}

/// Consumed random streams, restored by position on resume. Streams that
/// are only ever forked by name (the root, per-episode children) carry no
/// position of their own.
const STREAM_LABELS: [&str; 5] = ["explore", "replay", "wm-latent", "imagine", "belief"];

/// Counters and small state serialised into the checkpoint's `meta` blob.
#[derive(Serialize, Deserialize)]
struct MetaState {
    env_steps: u64,
    grad_steps: u64,
    credit: f64,
    eval_round: u64,
    last_eval: u64,
    last_ckpt: u64,
    needs_reset: bool,
    ep_return: f64,
    ep_len: u64,
    /// Step counters of the world-model, actor and critic optimisers.
    adam_steps: [u64; 3],
    streams: BTreeMap<String, u128>,
    norm: ReturnNormalizer,
    env: EnvSnapshot,
}

/// What `train` hands back when the step budget is spent.
#[derive(Debug)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub final_eval: EvalReport,
    /// Path of the final checkpoint.
    pub checkpoint: PathBuf,
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainerError> {
        cfg.validate()?;
        let root = StreamRng::root(cfg.seed);
        let env = InsertEnv::new(
            cfg.geom.clone(),
            cfg.sim.clone(),
            cfg.gel.clone(),
            cfg.env.clone(),
            root.child("train-env"),
        )?;
        let mut wm_store = VarStore::new();
        let mut wm_rng = root.child("wm-init");
        let wm = WorldModel::new(&mut wm_store, &mut wm_rng, cfg.model.clone());
        let mut actor_store = VarStore::new();
        let mut critic_store = VarStore::new();
        let mut ac_rng = root.child("agent-init");
        let ac = ActorCritic::new(cfg.agent_config(), &mut actor_store, &mut critic_store, &mut ac_rng);
        let target_store = mirror_store(&critic_store);
        let wm_opt = Adam::new(&wm_store, cfg.train.wm_lr, Some(cfg.train.wm_clip));
        let actor_opt = Adam::new(&actor_store, cfg.train.ac_lr, Some(cfg.train.ac_clip));
        let critic_opt = Adam::new(&critic_store, cfg.train.ac_lr, Some(cfg.train.ac_clip));
        let norm = ReturnNormalizer::new(cfg.agent.range_decay);
        let replay = ReplayBuffer::new(cfg.train.replay_capacity);
        let belief = Belief {
            h: Tensor::new(vec![1, cfg.model.deter], vec![F::zero(); cfg.model.deter]),
            z: Tensor::new(vec![1, cfg.model.latent_dim()], vec![F::zero(); cfg.model.latent_dim()]),
        };
        let [explore_rng, replay_rng, latent_rng, imagine_rng, belief_rng] =
            STREAM_LABELS.map(|label| root.child(label));
        Ok(Self {
            cfg,
            root,
            env,
            wm,
            wm_store,
            wm_opt,
            ac,
            actor_store,
            actor_opt,
            critic_store,
            critic_opt,
            target_store,
            norm,
            replay,
            explore_rng,
            replay_rng,
            latent_rng,
            imagine_rng,
            belief_rng,
            belief,
            needs_reset: true,
            ep_return: 0.0,
            ep_len: 0,
            env_steps: 0,
            grad_steps: 0,
            credit: 0.0,
            eval_round: 0,
            last_eval: 0,
            last_ckpt: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    /// Collects `n` environment steps (resets happen lazily and are not
    /// counted), pushing every observation into replay. With `random` the
    /// actions are uniform in the unit cube; otherwise the policy acts on
    /// the filtered belief with exploration noise.
    pub fn collect(
        &mut self,
        n: u64,
        random: bool,
        m: &mut MetricsWriter,
    ) -> Result<(), TrainerError> {
        let metrics_path = self.cfg.out_dir.join("metrics.jsonl");
        for _ in 0..n {
            if self.needs_reset {
                let obs = self.env.reset();
                self.replay.push(StepRecord {
                    frame: obs.tactile.clone(),
                    proprio: obs.proprio,
                    prev_action: [0.0; 3],
                    reward: 0.0,
                    is_first: true,
                    is_terminal: false,
                });
                self.belief = Belief::reset(&self.wm, &self.wm_store, &mut self.belief_rng);
                self.belief.observe(&self.wm, &self.wm_store, [0.0; 3], &obs, &mut self.belief_rng);
                self.needs_reset = false;
                self.ep_return = 0.0;
                self.ep_len = 0;
            }
            let unit: Vec3 = if random {
                let mut u = [0.0; 3];
                for v in &mut u {
                    *v = self.explore_rng.uniform_in(-1.0, 1.0);
                }
                u
            } else {
                let feat = self.belief.feature();
                let a = self.ac.act(&self.actor_store, &feat, Some(&mut self.explore_rng));
                [a.data()[0].as_f64(), a.data()[1].as_f64(), a.data()[2].as_f64()]
            };
            let out = self
                .env
                .step(scale_unit_action(unit, self.env.max_step()))
                .expect("the episode is active after a lazy reset");
            self.env_steps += 1;
            self.ep_return += out.reward.total;
            self.ep_len += 1;
            let ended = out.terminated || out.truncated;
            self.replay.push(StepRecord {
                frame: out.obs.tactile.clone(),
                proprio: out.obs.proprio,
                prev_action: unit,
                reward: out.reward.total,
                is_first: false,
                is_terminal: out.terminated,
            });
            if ended {
                let success = out.cause == Some(StopCause::Goal);
                m.log(self.env_steps, "episode/return", self.ep_return)
                    .map_err(io_err(&metrics_path))?;
                m.log(self.env_steps, "episode/length", self.ep_len as f64)
                    .map_err(io_err(&metrics_path))?;
                m.log(self.env_steps, "episode/success", f64::from(u8::from(success)))
                    .map_err(io_err(&metrics_path))?;
                self.needs_reset = true;
            } else {
                self.belief.observe(&self.wm, &self.wm_store, unit, &out.obs, &mut self.belief_rng);
            }
        }
        Ok(())
    }

    /// One gradient step: world model on a replayed batch, then actor and
    /// critic on rollouts imagined from that batch's posterior states.
    /// `NonFinite` errors leave the checkpoint path for [`Trainer::run`] to
    /// fill after it saves the crash state.
    fn grad_step(&mut self, m: &mut MetricsWriter) -> Result<(), TrainerError> {
        let metrics_path = self.cfg.out_dir.join("metrics.jsonl");
        let nonfinite = |what: String, env_steps: u64| TrainerError::NonFinite {
            what,
            env_steps,
            checkpoint: PathBuf::new(),
        };
        let t = self.cfg.train.clone();
        let starts = self
            .replay
            .sample_starts(t.batch, t.seq_len, &mut self.replay_rng)
            .ok_or(TrainerError::ReplayNotReady { have: self.replay.len(), need: t.seq_len })?;
        let batch = self.replay.batch::<F>(&starts, t.seq_len);

        let mut g: Graph<F> = Graph::new();
        let (loss, observed) = self.wm.loss(&mut g, &self.wm_store, &batch, &mut self.latent_rng);
        let named = [
            ("wm/total", loss.total),
            ("wm/image", loss.image),
            ("wm/proprio", loss.proprio),
            ("wm/reward", loss.reward),
            ("wm/cont", loss.cont),
            ("wm/kl_dyn", loss.kl_dyn),
            ("wm/kl_rep", loss.kl_rep),
        ];
        // Forward values are finite by construction — the graph refuses to
        // build non-finite nodes, and `run` turns that refusal into the
        // crash-checkpoint abort.
        let wm_values = named.map(|(_, node)| g.value(node).data()[0].as_f64());
        let grads = g.backward(loss.total);
        let wm_grads = g.param_grads(&grads, &self.wm_store);
        self.wm_opt
            .step(&mut self.wm_store, &wm_grads)
            .map_err(|e| nonfinite(format!("world-model update ({e})"), self.env_steps))?;

        // Imagination starts from the batch's posterior states, detached.
        let feats = g.value(observed.features);
        let rows = feats.dims()[0];
        let width = feats.dims()[1];
        let take = t.imag_batch.min(rows);
        let starts_tensor = if take < rows {
            let mut data = Vec::with_capacity(take * width);
            for _ in 0..take {
                let r = self.imagine_rng.below(rows);
                data.extend_from_slice(&feats.data()[r * width..(r + 1) * width]);
            }
            Tensor::new(vec![take, width], data)
        } else {
            feats.clone()
        };
        let (h0, z0) = self.wm.split_features(&starts_tensor);
        let traj = self.ac.imagine(
            &self.wm,
            &self.wm_store,
            &self.actor_store,
            &h0,
            &z0,
            self.cfg.agent.horizon,
            &mut self.imagine_rng,
        );
        let diag = self
            .ac
            .update(
                &traj,
                &mut self.actor_store,
                &mut self.actor_opt,
                &mut self.critic_store,
                &mut self.critic_opt,
                &mut self.target_store,
                &mut self.norm,
            )
            .map_err(|AgentError::NonFinite { what }| nonfinite(what.to_owned(), self.env_steps))?;
        self.grad_steps += 1;

        for ((name, _), v) in named.iter().zip(wm_values) {
            m.log(self.env_steps, name, v).map_err(io_err(&metrics_path))?;
        }
        for (name, v) in [
            ("wm/grad_norm", self.wm_opt.last_global_norm()),
            ("agent/actor_loss", diag.actor_loss),
            ("agent/critic_loss", diag.critic_loss),
            ("agent/entropy", diag.entropy),
            ("agent/mean_return", diag.mean_return),
            ("agent/mean_value", diag.mean_value),
            ("agent/return_scale", diag.return_scale),
        ] {
            m.log(self.env_steps, name, v).map_err(io_err(&metrics_path))?;
        }
        Ok(())
    }

    /// Evaluates the current policy on its own environment and streams.
    pub fn evaluate(&self, episodes: u32, rng: &mut StreamRng) -> Result<EvalReport, TrainerError> {
        Ok(evaluate(
            &self.cfg,
            EvalPolicy::Agent {
                wm: &self.wm,
                wm_store: &self.wm_store,
                ac: &self.ac,
                actor_store: &self.actor_store,
            },
            episodes,
            rng,
        )?)
    }

    fn run_eval(&mut self, m: &mut MetricsWriter) -> Result<EvalReport, TrainerError> {
        let round = self.eval_round;
        self.eval_round += 1;
        let mut rng = self.root.child_indexed("eval", round);
        let report = self.evaluate(self.cfg.train.eval_episodes, &mut rng)?;
        let metrics_path = self.cfg.out_dir.join("metrics.jsonl");
        m.log(self.env_steps, "eval/success_rate", report.success_rate)
            .map_err(io_err(&metrics_path))?;
        m.log(self.env_steps, "eval/mean_return", report.mean_return)
            .map_err(io_err(&metrics_path))?;
        m.log(self.env_steps, "eval/mean_length", report.mean_length)
            .map_err(io_err(&metrics_path))?;

        #[derive(Serialize)]
        struct EvalLine<'a> {
            step: u64,
            round: u64,
            #[serde(flatten)]
            report: &'a EvalReport,
        }
        let path = self.cfg.out_dir.join("evals.jsonl");
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let line = serde_json::to_string(&EvalLine { step: self.env_steps, round, report: &report })
            .expect("evaluation report serialises");
        writeln!(file, "{line}").map_err(io_err(&path))?;
        Ok(report)
    }

    /// Runs one gradient step with numeric faults turned into errors. The
    /// graph layer enforces finiteness by panicking the moment a non-finite
    /// value would enter a computation; at this boundary that panic becomes
    /// the documented abort-with-crash-checkpoint, while every other panic
    /// (a genuine bug) is re-raised untouched.
    fn guarded_grad_step(&mut self, m: &mut MetricsWriter) -> Result<(), TrainerError> {
        let env_steps = self.env_steps;
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| self.grad_step(m))) {
            Ok(result) => result,
            Err(payload) => {
                let msg = panic_text(payload.as_ref());
                match msg.strip_prefix("non-finite ") {
                    Some(what) => Err(TrainerError::NonFinite {
                        what: what.to_owned(),
                        env_steps,
                        checkpoint: PathBuf::new(),
                    }),
                    None => std::panic::resume_unwind(payload),
                }
            }
        }
    }

    /// Fills in the crash-checkpoint path on non-finite failures.
    fn crashed(&self, e: TrainerError) -> TrainerError {
        if let TrainerError::NonFinite { what, env_steps, .. } = e {
            let path = self.cfg.out_dir.join("crash.tdrm");
            let _ = self.save_checkpoint(&path);
            TrainerError::NonFinite { what, env_steps, checkpoint: path }
        } else {
            e
        }
    }

    /// Drives the whole run to its step budget, then evaluates once more and
    /// writes the final checkpoint.
    pub fn run(&mut self, m: &mut MetricsWriter) -> Result<TrainSummary, TrainerError> {
        let t = self.cfg.train.clone();
        let metrics_path = self.cfg.out_dir.join("metrics.jsonl");
        while self.env_steps < t.env_steps {
            let random = self.env_steps < t.prefill;
            let mut chunk = t.collect_chunk.min(t.env_steps - self.env_steps);
            if random {
                // Never let a chunk straddle the prefill boundary, so the
                // ratio accounting starts exactly at the boundary.
                chunk = chunk.min(t.prefill - self.env_steps);
            }
            self.collect(chunk, random, m)?;
            if !random && t.replay_ratio > 0.0 {
                self.credit += chunk as f64 * t.replay_ratio / (t.batch * t.seq_len) as f64;
                while self.credit >= 1.0 {
                    if let Err(e) = self.guarded_grad_step(m) {
                        return Err(self.crashed(e));
                    }
                    self.credit -= 1.0;
                }
            }
            if t.eval_every > 0 && t.eval_episodes > 0 {
                while self.env_steps - self.last_eval >= t.eval_every {
                    self.last_eval += t.eval_every;
                    self.run_eval(m)?;
                }
            }
            if t.checkpoint_every > 0 {
                while self.env_steps - self.last_ckpt >= t.checkpoint_every {
                    self.last_ckpt += t.checkpoint_every;
                    self.save_checkpoint(&self.cfg.out_dir.join("checkpoint.tdrm"))?;
                }
            }
            m.flush().map_err(io_err(&metrics_path))?;
        }
        let final_eval = self.run_eval(m)?;
        let checkpoint = self.cfg.out_dir.join("final.tdrm");
        self.save_checkpoint(&checkpoint)?;
        m.flush().map_err(io_err(&metrics_path))?;
        Ok(TrainSummary {
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            final_eval,
            checkpoint,
        })
    }

    /// Writes the complete run state. Tensor data is stored as 32-bit
    /// floats, the precision the networks train in.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainerError> {
        let mut w = CheckpointWriter::create(path, &self.cfg.hash())?;
        w.blob("config", self.cfg.canonical_json().as_bytes())?;
        let meta = MetaState {
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            credit: self.credit,
            eval_round: self.eval_round,
            last_eval: self.last_eval,
            last_ckpt: self.last_ckpt,
            needs_reset: self.needs_reset,
            ep_return: self.ep_return,
            ep_len: self.ep_len,
            adam_steps: [self.wm_opt.steps(), self.actor_opt.steps(), self.critic_opt.steps()],
            streams: self.stream_positions(),
            norm: self.norm.clone(),
            env: self.env.snapshot(),
        };
        w.blob("meta", &serde_json::to_vec(&meta).expect("meta serialises"))?;
        let mut replay_bytes = Vec::new();
        self.replay.write_blob(&mut replay_bytes).expect("writing to memory cannot fail");
        w.blob("replay", &replay_bytes)?;
        w.tensor("belief/h", &self.belief.h)?;
        w.tensor("belief/z", &self.belief.z)?;
        for (prefix, store) in [
            ("wm", &self.wm_store),
            ("actor", &self.actor_store),
            ("critic", &self.critic_store),
            ("target", &self.target_store),
        ] {
            for (_, name, tensor) in store.iter() {
                w.tensor(&format!("{prefix}/{name}"), tensor)?;
            }
        }
        for (prefix, opt, store) in [
            ("opt/wm", &self.wm_opt, &self.wm_store),
            ("opt/actor", &self.actor_opt, &self.actor_store),
            ("opt/critic", &self.critic_opt, &self.critic_store),
        ] {
            let (ms, vs, _) = opt.state();
            for ((_, name, _), (mt, vt)) in store.iter().zip(ms.iter().zip(vs)) {
                w.tensor(&format!("{prefix}/m/{name}"), mt)?;
                w.tensor(&format!("{prefix}/v/{name}"), vt)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    fn stream_positions(&self) -> BTreeMap<String, u128> {
        let fields = [
            &self.explore_rng,
            &self.replay_rng,
            &self.latent_rng,
            &self.imagine_rng,
            &self.belief_rng,
        ];
        STREAM_LABELS
            .iter()
            .zip(fields)
            .map(|(label, rng)| ((*label).to_owned(), rng.position()))
            .collect()
    }

    /// Rebuilds a trainer from a checkpoint, using the configuration stored
    /// inside it. `out_dir` names where the resumed run writes.
    pub fn from_checkpoint(
        path: impl AsRef<Path>,
        out_dir: impl Into<PathBuf>,
    ) -> Result<Self, TrainerError> {
        let ck = Checkpoint::read(path)?;
        let text = std::str::from_utf8(ck.bytes("config")?).map_err(|_| {
            CheckpointError::Malformed { what: "config".to_owned(), detail: "not UTF-8".to_owned() }
        })?;
        let mut cfg = RunConfig::from_json_str(text)?;
        cfg.out_dir = out_dir.into();
        if ck.config_hash != cfg.hash() {
            return Err(CheckpointError::HashMismatch {
                found: hex(&ck.config_hash),
                expected: hex(&cfg.hash()),
            }
            .into());
        }
        Self::restore(cfg, &ck)
    }

    /// Rebuilds from a checkpoint that must match an explicitly provided
    /// configuration — the resume-with-config path.
    pub fn from_checkpoint_with_config(
        path: impl AsRef<Path>,
        cfg: RunConfig,
    ) -> Result<Self, TrainerError> {
        let ck = Checkpoint::read(path)?;
        if ck.config_hash != cfg.hash() {
            return Err(CheckpointError::HashMismatch {
                found: hex(&ck.config_hash),
                expected: hex(&cfg.hash()),
            }
            .into());
        }
        Self::restore(cfg, &ck)
    }

    fn restore(cfg: RunConfig, ck: &Checkpoint) -> Result<Self, TrainerError> {
        let mut t = Self::new(cfg)?;
        let meta: MetaState = serde_json::from_slice(ck.bytes("meta")?).map_err(|e| {
            CheckpointError::Malformed { what: "meta".to_owned(), detail: e.to_string() }
        })?;
        t.env_steps = meta.env_steps;
        t.grad_steps = meta.grad_steps;
        t.credit = meta.credit;
        t.eval_round = meta.eval_round;
        t.last_eval = meta.last_eval;
        t.last_ckpt = meta.last_ckpt;
        t.needs_reset = meta.needs_reset;
        t.ep_return = meta.ep_return;
        t.ep_len = meta.ep_len;
        t.norm = meta.norm;
        t.env.restore(&meta.env);
        for (label, rng) in STREAM_LABELS.iter().zip([
            &mut t.explore_rng,
            &mut t.replay_rng,
            &mut t.latent_rng,
            &mut t.imagine_rng,
            &mut t.belief_rng,
        ]) {
            let position = meta.streams.get(*label).ok_or_else(|| {
                CheckpointError::Malformed {
                    what: "meta".to_owned(),
                    detail: format!("stream `{label}` missing"),
                }
            })?;
            *rng = StreamRng::from_parts(t.root.child(label).seed_bytes(), *position);
        }
        t.replay = ReplayBuffer::read_blob(&mut ck.bytes("replay")?.as_ref() as &mut &[u8])
            .map_err(|e| CheckpointError::Malformed {
                what: "replay".to_owned(),
                detail: e.to_string(),
            })?;
        if t.replay.capacity() != t.cfg.train.replay_capacity {
            return Err(CheckpointError::Malformed {
                what: "replay".to_owned(),
                detail: "capacity does not match the configuration".to_owned(),
            }
            .into());
        }
        t.belief.h = ck.tensor("belief/h")?;
        t.belief.z = ck.tensor("belief/z")?;
        for (prefix, store) in [
            ("wm", &mut t.wm_store),
            ("actor", &mut t.actor_store),
            ("critic", &mut t.critic_store),
            ("target", &mut t.target_store),
        ] {
            restore_store(prefix, store, ck)?;
        }
        for ((prefix, opt, store), steps) in [
            ("opt/wm", &mut t.wm_opt, &t.wm_store),
            ("opt/actor", &mut t.actor_opt, &t.actor_store),
            ("opt/critic", &mut t.critic_opt, &t.critic_store),
        ]
        .into_iter()
        .zip(meta.adam_steps)
        {
            let mut ms = Vec::with_capacity(store.len());
            let mut vs = Vec::with_capacity(store.len());
            for (_, name, _) in store.iter() {
                ms.push(ck.tensor(&format!("{prefix}/m/{name}"))?);
                vs.push(ck.tensor(&format!("{prefix}/v/{name}"))?);
            }
            opt.restore(ms, vs, steps);
        }
        Ok(t)
    }
}

fn panic_text(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with a non-text payload".to_owned()
    }
}

fn restore_store<F: Real>(
    prefix: &str,
    store: &mut VarStore<F>,
    ck: &Checkpoint,
) -> Result<(), TrainerError> {
    let names: Vec<(VarId, String)> =
        store.iter().map(|(id, name, _)| (id, name.to_owned())).collect();
    for (id, name) in names {
        let blob = format!("{prefix}/{name}");
        let tensor: Tensor<F> = ck.tensor(&blob)?;
        if tensor.dims() != store.get(id).dims() {
            return Err(CheckpointError::Malformed {
                what: blob,
                detail: format!(
                    "shape {:?} does not match the model's {:?}",
                    tensor.dims(),
                    store.get(id).dims()
                ),
            }
            .into());
        }
        *store.get_mut(id) = tensor;
    }
    Ok(())
}

/// Runs a full training job: creates the output directory and metrics log,
/// then drives the loop to its budget.
pub fn train<F: Real>(cfg: RunConfig) -> Result<TrainSummary, TrainerError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut m = MetricsWriter::create(&metrics_path, &cfg).map_err(io_err(&metrics_path))?;
    let mut t = Trainer::<F>::new(cfg)?;
    t.run(&mut m)
}

/// Continues a checkpointed run in `out_dir` until its configured budget.
pub fn resume<F: Real>(
    checkpoint: impl AsRef<Path>,
    out_dir: impl Into<PathBuf>,
) -> Result<TrainSummary, TrainerError> {
    run_loaded(Trainer::<F>::from_checkpoint(checkpoint, out_dir)?)
}

/// Continues a checkpointed run that must match `cfg` (the checkpoint is
/// rejected if its digest differs); writes into `cfg.out_dir`.
pub fn resume_with_config<F: Real>(
    checkpoint: impl AsRef<Path>,
    cfg: RunConfig,
) -> Result<TrainSummary, TrainerError> {
    run_loaded(Trainer::<F>::from_checkpoint_with_config(checkpoint, cfg)?)
}

fn run_loaded<F: Real>(mut t: Trainer<F>) -> Result<TrainSummary, TrainerError> {
    let out = t.cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut m = MetricsWriter::open_or_create(&metrics_path, &t.cfg).map_err(io_err(&metrics_path))?;
    t.run(&mut m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    /// A configuration small enough to train for a few hundred steps in a
    /// test, with every cadence exercised.
    fn tiny_cfg(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::from_json_str(
            r#"{
                "seed": 11,
                "env.horizon": 30,
                "model.conv_base": 2, "model.embed": 16, "model.deter": 16,
                "model.groups": 4, "model.classes": 4, "model.hidden": 16,
                "model.hidden_layers": 1, "model.reward_bins": 11,
                "agent.hidden": 16, "agent.layers": 1, "agent.value_bins": 7,
                "agent.horizon": 5,
                "train.env_steps": 440, "train.replay_capacity": 600,
                "train.batch": 2, "train.seq_len": 8, "train.replay_ratio": 1.0,
                "train.collect_chunk": 40, "train.eval_every": 200,
                "train.eval_episodes": 1, "train.checkpoint_every": 160,
                "train.prefill": 120, "train.imag_batch": 8
            }"#,
        )
        .unwrap();
        cfg.out_dir = out.to_owned();
        cfg
    }

    fn read_lines(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
    }

    fn line_step(line: &str) -> u64 {
        let v: Value = serde_json::from_str(line).unwrap();
        v["step"].as_u64().unwrap()
    }

    #[test]
    fn collecting_zero_steps_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut m = MetricsWriter::create(dir.path().join("metrics.jsonl"), &cfg).unwrap();
        let env_before = t.env.snapshot();
        t.collect(0, true, &mut m).unwrap();
        assert_eq!(t.env_steps(), 0);
        assert!(t.replay().is_empty());
        assert_eq!(t.env.snapshot(), env_before);
        assert!(t.needs_reset);
    }

    #[test]
    fn collection_interleaves_resets_and_episode_markers() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut m = MetricsWriter::create(dir.path().join("metrics.jsonl"), &cfg).unwrap();
        t.collect(100, true, &mut m).unwrap();
        assert_eq!(t.env_steps(), 100);

        let mut firsts = 0;
        let mut steps = 0;
        for i in 0..t.replay().len() {
            let rec = t.replay().get(i);
            if rec.is_first {
                firsts += 1;
                assert_eq!(rec.prev_action, [0.0; 3]);
                assert_eq!(rec.reward, 0.0);
                assert!(!rec.is_terminal);
            } else {
                steps += 1;
            }
        }
        assert_eq!(steps, 100, "every environment step is stored once");
        // Horizon 30 forces at least three episode boundaries in 100 steps.
        assert!(firsts >= 3, "expected several episode starts, saw {firsts}");
        assert_eq!(t.replay().len(), 100 + firsts);
    }

    #[test]
    fn ablated_runs_store_blanked_observations() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.env.ablation = crate::env::Ablation::NoTactile;
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut m = MetricsWriter::create(dir.path().join("metrics.jsonl"), &cfg).unwrap();
        t.collect(40, true, &mut m).unwrap();
        for i in 0..t.replay().len() {
            assert!(t.replay().get(i).frame.iter().all(|&b| b == 0));
        }

        let mut cfg = tiny_cfg(dir.path());
        cfg.env.ablation = crate::env::Ablation::NoProprio;
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        t.collect(40, true, &mut m).unwrap();
        for i in 0..t.replay().len() {
            assert_eq!(t.replay().get(i).proprio, [0.0; 3]);
        }
    }

    #[test]
    fn evaluation_touches_neither_replay_nor_the_training_environment() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut m = MetricsWriter::create(dir.path().join("metrics.jsonl"), &cfg).unwrap();
        t.collect(50, true, &mut m).unwrap();
        let replay_len = t.replay().len();
        let env_before = t.env.snapshot();

        let report = t.evaluate(2, &mut StreamRng::root(99).child("eval")).unwrap();
        assert_eq!(report.episodes, 2);
        assert_eq!(report.causes.values().sum::<u32>(), 2);
        assert!(report.mean_length >= 1.0);
        assert_eq!(t.replay().len(), replay_len);
        assert_eq!(t.env.snapshot(), env_before);
    }

    #[test]
    fn random_evaluation_reports_a_full_cause_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let mut rng = StreamRng::root(5).child("random-eval");
        let report = evaluate::<f32>(&cfg, EvalPolicy::Random, 3, &mut rng).unwrap();
        assert_eq!(report.episodes, 3);
        assert_eq!(report.causes.values().sum::<u32>(), 3);
        // Returns are finite and lengths bounded by the horizon.
        assert!(report.mean_return.is_finite());
        assert!(report.mean_length <= 30.0);
    }

    /// One full tiny run twice over: byte-identical metrics. Then a resume
    /// from the mid-run checkpoint, which must reproduce the tail of the
    /// uninterrupted log exactly.
    #[test]
    fn runs_repeat_bit_for_bit_and_resume_continues_the_same_log() {
        let base = tempfile::tempdir().unwrap();
        let dir_a = base.path().join("a");
        let dir_b = base.path().join("b");
        let dir_c = base.path().join("c");

        let summary_a = train::<f32>(tiny_cfg(&dir_a)).unwrap();
        let summary_b = train::<f32>(tiny_cfg(&dir_b)).unwrap();
        assert_eq!(summary_a.env_steps, 440);
        assert_eq!(summary_a.grad_steps, summary_b.grad_steps);
        assert!(summary_a.grad_steps >= 15, "got {}", summary_a.grad_steps);

        let bytes_a = std::fs::read(dir_a.join("metrics.jsonl")).unwrap();
        let bytes_b = std::fs::read(dir_b.join("metrics.jsonl")).unwrap();
        assert_eq!(bytes_a, bytes_b, "identical runs must log identical bytes");

        // checkpoint.tdrm was last overwritten at 320 environment steps.
        let summary_c = resume::<f32>(dir_a.join("checkpoint.tdrm"), &dir_c).unwrap();
        assert_eq!(summary_c.env_steps, 440);

        let tail_a: Vec<String> = read_lines(&dir_a.join("metrics.jsonl"))
            .into_iter()
            .skip(1)
            .filter(|l| line_step(l) > 320)
            .collect();
        let tail_c: Vec<String> = read_lines(&dir_c.join("metrics.jsonl"))
            .into_iter()
            .skip(1)
            .collect();
        assert!(tail_a.len() >= 100, "need a meaningful overlap, got {}", tail_a.len());
        assert_eq!(tail_a, tail_c, "a resumed run must continue the exact log");

        // The resumed final state matches the uninterrupted one too.
        let final_a = std::fs::read(summary_a.checkpoint).unwrap();
        let final_c = std::fs::read(summary_c.checkpoint).unwrap();
        assert_eq!(final_a, final_c);
    }

    #[test]
    fn checkpoints_from_other_configurations_are_rejected() {
        let base = tempfile::tempdir().unwrap();
        let dir = base.path().join("run");
        let cfg = tiny_cfg(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let path = dir.join("state.tdrm");
        t.save_checkpoint(&path).unwrap();

        let mut other = cfg.clone();
        other.seed = 12;
        match Trainer::<f32>::from_checkpoint_with_config(&path, other) {
            Err(TrainerError::Checkpoint(CheckpointError::HashMismatch { .. })) => {}
            Err(e) => panic!("expected a digest mismatch, got {e}"),
            Ok(_) => panic!("expected a digest mismatch, got a trainer"),
        }
        // The matching configuration is accepted.
        Trainer::<f32>::from_checkpoint_with_config(&path, cfg).unwrap();
    }

    #[test]
    fn non_finite_losses_abort_with_a_crash_checkpoint() {
        let base = tempfile::tempdir().unwrap();
        let dir = base.path().join("run");
        let mut cfg = tiny_cfg(&dir);
        cfg.train.env_steps = 200;
        std::fs::create_dir_all(&dir).unwrap();
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut m = MetricsWriter::create(dir.join("metrics.jsonl"), &cfg).unwrap();

        // Poison the reward head: collection is unaffected (the belief
        // filter never consults it), so the failure surfaces in a loss.
        let poisoned = t
            .wm_store
            .iter()
            .find(|(_, name, _)| name.starts_with("dec.reward"))
            .map(|(id, _, _)| id)
            .expect("the world model has a reward head");
        for v in t.wm_store.get_mut(poisoned).data_mut() {
            *v = f32::NAN;
        }

        match t.run(&mut m) {
            Err(TrainerError::NonFinite { what, checkpoint, .. }) => {
                assert!(what.contains("forward value"), "unexpected fault: {what}");
                assert!(checkpoint.ends_with("crash.tdrm"));
                let ck = Checkpoint::read(&checkpoint).unwrap();
                assert!(ck.blobs.contains_key("replay"));
                assert!(ck.blobs.contains_key("meta"));
            }
            Ok(s) => panic!("expected a non-finite abort, finished with {} steps", s.env_steps),
            Err(e) => panic!("expected a non-finite abort, got {e}"),
        }
    }

    #[test]
    fn gradient_bursts_follow_the_replay_ratio_with_carry() {
        let base = tempfile::tempdir().unwrap();
        let dir = base.path().join("run");
        let mut cfg = tiny_cfg(&dir);
        // ratio 2.5 over windows of 16: each 40-step chunk owes 6.25 steps.
        cfg.train.replay_ratio = 2.5;
        cfg.train.env_steps = 280;
        cfg.train.eval_every = 0;
        cfg.train.checkpoint_every = 0;
        let summary = train::<f32>(cfg).unwrap();
        // Four post-prefill chunks owe 25 gradient steps in total.
        assert_eq!(summary.grad_steps, 25);
    }
}
