//! Episodic peg-insertion task over the contact simulator.
//!
//! Each episode the peg starts at a random pose above the plate and the hole
//! must be reached under *partial observability*: the reported gripper
//! position is corrupted by a constant per-episode offset, so the true hole
//! location can only be pinned down through contact. Observations are the
//! rendered tactile frame (quantised to 8-bit, exactly as a replay buffer
//! would store it) plus the offset position reading.
//!
//! The reward is a sum of four interpretable parts: distance shaping toward
//! the goal, a large terminal bonus for insertion, a large terminal penalty
//! for leaving the workspace, and a small action-magnitude cost.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;
use crate::sim::{
    add3, clamp3, dist3, in_goal, in_workspace, norm3, GeometryError, PegSim, SimParams, SimState,
    TaskGeometry, Vec3,
};
use crate::tactile::{apply_pixel_noise, CalibrationError, GelParams, GelRenderer, FRAME_LEN};

/// Weight on the distance-to-goal shaping term (per metre).
pub const DISTANCE_WEIGHT: f64 = 5.0;
/// Bonus paid once when the peg reaches the goal region.
pub const GOAL_BONUS: f64 = 100.0;
/// Penalty paid once when the peg leaves the workspace.
pub const LEAVE_PENALTY: f64 = 100.0;
/// Weight on the commanded-action magnitude cost (per metre).
pub const ACTION_COST_WEIGHT: f64 = 1e-3;

/// Per-step reward, split into its four parts. `total` is always their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// `-DISTANCE_WEIGHT * |p - goal|`, dense shaping toward the goal.
    pub distance: f64,
    /// `GOAL_BONUS` on the step that reaches the goal region, else 0.
    pub goal_bonus: f64,
    /// `-LEAVE_PENALTY` on the step that exits the workspace, else 0.
    pub leave_penalty: f64,
    /// `-ACTION_COST_WEIGHT * |a|`, discourages large commands.
    pub action_cost: f64,
    /// Sum of the four parts; the scalar the agent maximises.
    pub total: f64,
}

/// Computes the reward for being at `p` after commanding `action`, with the
/// termination flags already decided by the caller. The two terminal terms
/// are driven purely by the flags; callers are responsible for making them
/// mutually exclusive (reaching the goal takes precedence).
pub fn reward(
    p: Vec3,
    action: Vec3,
    reached_goal: bool,
    left_workspace: bool,
    geom: &TaskGeometry,
) -> RewardBreakdown {
    let distance = -DISTANCE_WEIGHT * dist3(p, geom.goal);
    let goal_bonus = if reached_goal { GOAL_BONUS } else { 0.0 };
    let leave_penalty = if left_workspace { -LEAVE_PENALTY } else { 0.0 };
    let action_cost = -ACTION_COST_WEIGHT * norm3(action);
    RewardBreakdown {
        distance,
        goal_bonus,
        leave_penalty,
        action_cost,
        total: distance + goal_bonus + leave_penalty + action_cost,
    }
}

/// Why an episode stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCause {
    /// Peg reached the goal region (success).
    Goal,
    /// Peg left the workspace box.
    LeftWorkspace,
    /// Step limit reached without terminating.
    Timeout,
}

impl StopCause {
    pub fn as_str(self) -> &'static str {
        match self {
            StopCause::Goal => "goal",
            StopCause::LeftWorkspace => "left_workspace",
            StopCause::Timeout => "timeout",
        }
    }
}

/// Which part of the observation to blank out, for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    None,
    /// Tactile frame zeroed; position reading kept.
    NoTactile,
    /// Position reading zeroed; tactile frame kept.
    NoProprio,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoTactile => "no_tactile",
            Ablation::NoProprio => "no_proprio",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Ablation::None),
            "no_tactile" => Ok(Ablation::NoTactile),
            "no_proprio" => Ok(Ablation::NoProprio),
            other => Err(format!(
                "unknown ablation {other:?} (expected none, no_tactile, or no_proprio)"
            )),
        }
    }
}

/// Episode-level task parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    /// Steps per episode before truncation.
    pub horizon: u64,
    /// Half-range of the per-episode position-reading offset, m (each
    /// component drawn uniformly from ±this).
    pub offset_range: f64,
    /// Start pose box, m (uniform per component).
    pub start_min: Vec3,
    pub start_max: Vec3,
    /// Observation part to blank out.
    pub ablation: Ablation,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            horizon: 200,
            offset_range: 0.005,
            start_min: [-0.015, -0.015, 0.010],
            start_max: [0.015, 0.015, 0.030],
            ablation: Ablation::None,
        }
    }
}

/// What the agent sees: an 8-bit RGB tactile frame and a position reading.
///
/// The frame is stored exactly as quantised, so an observation replayed from
/// a buffer is bit-identical to the one produced online. The position
/// reading is the true peg position plus the episode's constant offset; the
/// true hole location never appears here.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// 64x64x3 interleaved RGB, row-major, one byte per channel.
    pub tactile: Vec<u8>,
    /// Offset position reading, m.
    pub proprio: Vec3,
}

impl Observation {
    /// Tactile frame as floats in [0, 1], HWC order (network input form).
    pub fn tactile_f32(&self) -> Vec<f32> {
        self.tactile.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

/// Blanks out one observation part in place; shapes are unchanged.
pub fn apply_ablation(obs: &mut Observation, mode: Ablation) {
    match mode {
        Ablation::None => {}
        Ablation::NoTactile => obs.tactile.iter_mut().for_each(|b| *b = 0),
        Ablation::NoProprio => obs.proprio = [0.0; 3],
    }
}

/// Scales a unit-box policy action (components in [-1, 1]) to metres.
pub fn scale_unit_action(unit: Vec3, max_step: f64) -> Vec3 {
    [
        unit[0] * max_step,
        unit[1] * max_step,
        unit[2] * max_step,
    ]
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: RewardBreakdown,
    /// Episode ended by reaching the goal or leaving the workspace.
    pub terminated: bool,
    /// Episode ended by the step limit (never together with `terminated`).
    pub truncated: bool,
    pub cause: Option<StopCause>,
    /// Contact reaction force this step, N (what the tactile frame renders).
    pub force: Vec3,
}

/// Errors from environment construction.
#[derive(Debug, Error)]
pub enum EnvSetupError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("offset range must be finite and non-negative, got {0}")]
    BadOffsetRange(f64),
    #[error("start box is empty or inverted on axis {axis}")]
    EmptyStartBox { axis: usize },
    #[error("start box must lie strictly above the plate (z > 0), min z is {0}")]
    StartBoxTouchesPlate(f64),
    #[error("start box leaves the workspace on axis {axis}")]
    StartBoxOutsideWorkspace { axis: usize },
}

/// Errors from stepping.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("step called before the first reset")]
    NotStarted,
    #[error("step called on a finished episode ({0}); call reset first")]
    EpisodeOver(&'static str),
}

struct Episode {
    index: u64,
    /// Per-episode stream: start/offset draws, then per-step pixel noise.
    stream: StreamRng,
    sim: PegSim,
    offset: Vec3,
    start: Vec3,
    steps: u64,
    finished: Option<StopCause>,
}

/// Everything needed to restore an environment mid-run: the episode counter,
/// and for the active episode its simulator state and noise-stream position.
/// Stream *identities* are re-derived from the environment's own stream, so
/// only positions are recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub next_episode: u64,
    pub episode: Option<EpisodeSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSnapshot {
    pub index: u64,
    pub stream_position: u128,
    pub sim: SimState,
    pub offset: Vec3,
    pub start: Vec3,
    pub steps: u64,
    pub finished: Option<StopCause>,
}

/// The insertion task environment.
pub struct InsertEnv {
    geom: TaskGeometry,
    sim_params: SimParams,
    env_params: EnvParams,
    renderer: GelRenderer,
    /// Parent stream; episodes derive children from its identity, so its
    /// position never advances and needs no checkpointing.
    rng: StreamRng,
    next_episode: u64,
    episode: Option<Episode>,
}

impl InsertEnv {
    pub fn new(
        geom: TaskGeometry,
        sim_params: SimParams,
        gel_params: GelParams,
        env_params: EnvParams,
        rng: StreamRng,
    ) -> Result<Self, EnvSetupError> {
        geom.validate()?;
        if env_params.horizon == 0 {
            return Err(EnvSetupError::ZeroHorizon);
        }
        if !env_params.offset_range.is_finite() || env_params.offset_range < 0.0 {
            return Err(EnvSetupError::BadOffsetRange(env_params.offset_range));
        }
        for axis in 0..3 {
            if env_params.start_min[axis] > env_params.start_max[axis] {
                return Err(EnvSetupError::EmptyStartBox { axis });
            }
            if env_params.start_min[axis] < geom.workspace_min[axis]
                || env_params.start_max[axis] > geom.workspace_max[axis]
            {
                return Err(EnvSetupError::StartBoxOutsideWorkspace { axis });
            }
        }
        if env_params.start_min[2] <= 0.0 {
            return Err(EnvSetupError::StartBoxTouchesPlate(env_params.start_min[2]));
        }
        let renderer = GelRenderer::new(gel_params)?;
        Ok(Self {
            geom,
            sim_params,
            env_params,
            renderer,
            rng,
            next_episode: 0,
            episode: None,
        })
    }

    pub fn geometry(&self) -> &TaskGeometry {
        &self.geom
    }

    pub fn params(&self) -> &EnvParams {
        &self.env_params
    }

    pub fn sim_params(&self) -> &SimParams {
        &self.sim_params
    }

    /// Largest commanded step per axis, m (policy actions scale to ±this).
    pub fn max_step(&self) -> f64 {
        self.sim_params.max_step
    }

    /// True peg position (not part of the observation; for oracles, traces
    /// and tests).
    pub fn true_position(&self) -> Option<Vec3> {
        self.episode.as_ref().map(|e| e.sim.state().pos)
    }

    /// The active episode's position-reading offset (diagnostics only).
    pub fn episode_offset(&self) -> Option<Vec3> {
        self.episode.as_ref().map(|e| e.offset)
    }

    /// Steps taken in the active episode.
    pub fn episode_steps(&self) -> Option<u64> {
        self.episode.as_ref().map(|e| e.steps)
    }

    /// Starts a new episode and returns its first observation.
    pub fn reset(&mut self) -> Observation {
        let index = self.next_episode;
        self.next_episode += 1;
        let mut stream = self.rng.child_indexed("episode", index);
        let r = self.env_params.offset_range;
        let offset = [
            stream.uniform_in(-r, r),
            stream.uniform_in(-r, r),
            stream.uniform_in(-r, r),
        ];
        let start = [
            stream.uniform_in(self.env_params.start_min[0], self.env_params.start_max[0]),
            stream.uniform_in(self.env_params.start_min[1], self.env_params.start_max[1]),
            stream.uniform_in(self.env_params.start_min[2], self.env_params.start_max[2]),
        ];
        let sim = PegSim::new(self.geom.clone(), self.sim_params.clone(), start);
        let mut episode = Episode {
            index,
            stream,
            sim,
            offset,
            start,
            steps: 0,
            finished: None,
        };
        let obs = self.observe(&mut episode, [0.0; 3]);
        self.episode = Some(episode);
        obs
    }

    /// Advances one step. The action is a relative position target in metres;
    /// components are clipped to ±`max_step` before use, and the action cost
    /// is charged on the clipped command.
    pub fn step(&mut self, action: Vec3) -> Result<StepOutcome, EnvError> {
        let geom = self.geom.clone();
        let horizon = self.env_params.horizon;
        let max_step = self.sim_params.max_step;
        let mut episode = match self.episode.take() {
            None => return Err(EnvError::NotStarted),
            Some(e) => e,
        };
        if let Some(cause) = episode.finished {
            self.episode = Some(episode);
            return Err(EnvError::EpisodeOver(cause.as_str()));
        }

        let clipped = clamp3(action, max_step);
        let force = episode.sim.step(clipped);
        let p = episode.sim.state().pos;
        episode.steps += 1;

        // Reaching the goal takes precedence over leaving the workspace, so
        // the terminal bonus and penalty are mutually exclusive.
        let reached_goal = in_goal(p, &geom);
        let left_workspace = !reached_goal && !in_workspace(p, &geom);
        let terminated = reached_goal || left_workspace;
        let truncated = !terminated && episode.steps >= horizon;
        let cause = if reached_goal {
            Some(StopCause::Goal)
        } else if left_workspace {
            Some(StopCause::LeftWorkspace)
        } else if truncated {
            Some(StopCause::Timeout)
        } else {
            None
        };
        episode.finished = cause.filter(|_| terminated || truncated);

        let reward = reward(p, clipped, reached_goal, left_workspace, &geom);
        let obs = self.observe(&mut episode, force);
        self.episode = Some(episode);
        Ok(StepOutcome {
            obs,
            reward,
            terminated,
            truncated,
            cause,
            force,
        })
    }

    /// Renders, noises, quantises, and ablates the observation for `force`.
    fn observe(&self, episode: &mut Episode, force: Vec3) -> Observation {
        let mut frame = self.renderer.render(force);
        let sigma = self.renderer.params.noise_sigma;
        if sigma > 0.0 {
            apply_pixel_noise(&mut frame, sigma, &mut episode.stream);
        }
        let mut obs = Observation {
            tactile: frame.to_rgb8(),
            proprio: add3(episode.sim.state().pos, episode.offset),
        };
        debug_assert_eq!(obs.tactile.len(), FRAME_LEN);
        apply_ablation(&mut obs, self.env_params.ablation);
        obs
    }

    /// Captures everything needed to resume this environment exactly.
    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            next_episode: self.next_episode,
            episode: self.episode.as_ref().map(|e| EpisodeSnapshot {
                index: e.index,
                stream_position: e.stream.position(),
                sim: e.sim.state().clone(),
                offset: e.offset,
                start: e.start,
                steps: e.steps,
                finished: e.finished,
            }),
        }
    }

    /// Restores a snapshot taken from an environment with the same seed and
    /// parameters. Observations and episode draws then continue bit-for-bit.
    pub fn restore(&mut self, snap: &EnvSnapshot) {
        self.next_episode = snap.next_episode;
        self.episode = snap.episode.as_ref().map(|e| {
            let seed = self.rng.child_indexed("episode", e.index).seed_bytes();
            let stream = StreamRng::from_parts(seed, e.stream_position);
            let mut sim =
                PegSim::new(self.geom.clone(), self.sim_params.clone(), e.start);
            sim.restore(e.sim.clone());
            Episode {
                index: e.index,
                stream,
                sim,
                offset: e.offset,
                start: e.start,
                steps: e.steps,
                finished: e.finished,
            }
        });
    }
}

/// One line of an episode trace (serialises to a flat JSON object; a file of
/// these, one per line, is the episode's JSONL trace).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// Clipped command, m.
    pub action: Vec3,
    /// True peg position after the step, m.
    pub position: Vec3,
    /// Observed (offset) position reading, m.
    pub proprio: Vec3,
    /// Contact force, N.
    pub force: Vec3,
    pub reward: f64,
    pub distance: f64,
    pub goal_bonus: f64,
    pub leave_penalty: f64,
    pub action_cost: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub cause: Option<String>,
}

impl TraceRecord {
    pub fn new(step: u64, action_m: Vec3, position: Vec3, out: &StepOutcome) -> Self {
        Self {
            step,
            action: action_m,
            position,
            proprio: out.obs.proprio,
            force: out.force,
            reward: out.reward.total,
            distance: out.reward.distance,
            goal_bonus: out.reward.goal_bonus,
            leave_penalty: out.reward.leave_penalty,
            action_cost: out.reward.action_cost,
            terminated: out.terminated,
            truncated: out.truncated,
            cause: out.cause.map(|c| c.as_str().to_string()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet_gel() -> GelParams {
        GelParams {
            noise_sigma: 0.0,
            ..GelParams::default()
        }
    }

    fn make_env(seed: u64) -> InsertEnv {
        InsertEnv::new(
            TaskGeometry::default(),
            SimParams::default(),
            GelParams::default(),
            EnvParams::default(),
            StreamRng::root(seed).child("env"),
        )
        .expect("default env must build")
    }

    fn make_quiet_env(seed: u64) -> InsertEnv {
        InsertEnv::new(
            TaskGeometry::default(),
            SimParams::default(),
            quiet_gel(),
            EnvParams::default(),
            StreamRng::root(seed).child("env"),
        )
        .expect("default env must build")
    }

    // ---- reward ----

    #[test]
    fn reward_matches_hand_computed_lateral_case() {
        let geom = TaskGeometry::default();
        // 10 mm lateral error, 1 mm diagonal command, no terminal flags.
        let p = add3(geom.goal, [0.01, 0.0, 0.0]);
        let a = [0.001, 0.001, 0.0];
        let r = reward(p, a, false, false, &geom);
        assert_abs_diff_eq!(r.distance, -0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(r.goal_bonus, 0.0);
        assert_abs_diff_eq!(r.leave_penalty, 0.0);
        assert_abs_diff_eq!(r.action_cost, -1.4142135623730952e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(r.total, -0.050001414213562374, epsilon = 1e-15);
    }

    #[test]
    fn reward_matches_hand_computed_exit_case() {
        let geom = TaskGeometry::default();
        // 20 mm from the goal, zero action, workspace exited.
        let p = add3(geom.goal, [0.0, 0.02, 0.0]);
        let r = reward(p, [0.0; 3], false, true, &geom);
        assert_abs_diff_eq!(r.distance, -0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.leave_penalty, -100.0);
        assert_abs_diff_eq!(r.total, -100.1, epsilon = 1e-12);
    }

    #[test]
    fn reward_at_goal_pays_the_bonus() {
        let geom = TaskGeometry::default();
        let r = reward(geom.goal, [0.0; 3], true, false, &geom);
        assert_abs_diff_eq!(r.distance, 0.0);
        assert_abs_diff_eq!(r.goal_bonus, 100.0);
        assert_abs_diff_eq!(r.total, 100.0);
    }

    #[test]
    fn reward_parts_always_sum_to_total() {
        let geom = TaskGeometry::default();
        let mut rng = StreamRng::root(9).child("reward-sum");
        for _ in 0..10_000 {
            let p = [
                rng.uniform_in(-0.05, 0.05),
                rng.uniform_in(-0.05, 0.05),
                rng.uniform_in(-0.02, 0.05),
            ];
            let a = [
                rng.uniform_in(-0.002, 0.002),
                rng.uniform_in(-0.002, 0.002),
                rng.uniform_in(-0.002, 0.002),
            ];
            let g = rng.uniform() < 0.5;
            let l = !g && rng.uniform() < 0.5;
            let r = reward(p, a, g, l, &geom);
            let sum = r.distance + r.goal_bonus + r.leave_penalty + r.action_cost;
            assert_abs_diff_eq!(r.total, sum, epsilon = 1e-12);
        }
    }

    // ---- episode mechanics ----

    #[test]
    fn step_before_reset_is_an_error() {
        let mut env = make_quiet_env(1);
        assert!(matches!(env.step([0.0; 3]), Err(EnvError::NotStarted)));
    }

    #[test]
    fn episode_truncates_at_the_horizon_and_then_refuses_steps() {
        let mut env = make_quiet_env(2);
        env.reset();
        let horizon = env.params().horizon;
        for i in 1..=horizon {
            let out = env.step([0.0; 3]).expect("in-episode step");
            assert!(!out.terminated, "no-op episode must not terminate");
            assert_eq!(out.truncated, i == horizon, "truncation only at the end");
            if i == horizon {
                assert_eq!(out.cause, Some(StopCause::Timeout));
            } else {
                assert_eq!(out.cause, None);
            }
        }
        let err = env.step([0.0; 3]).unwrap_err();
        assert_eq!(err, EnvError::EpisodeOver("timeout"));
    }

    #[test]
    fn leaving_the_workspace_terminates_with_the_penalty() {
        let mut env = make_quiet_env(3);
        env.reset();
        // March +x; the workspace edge is at 30 mm, steps are 2 mm.
        let mut exited = false;
        for _ in 0..60 {
            let out = env.step([1.0, 0.0, 0.0]).expect("step");
            if out.terminated {
                assert_eq!(out.cause, Some(StopCause::LeftWorkspace));
                assert_abs_diff_eq!(out.reward.leave_penalty, -100.0);
                assert_abs_diff_eq!(out.reward.goal_bonus, 0.0);
                assert!(out.reward.total < -99.0);
                exited = true;
                break;
            }
        }
        assert!(exited, "marching laterally must exit the workspace");
        assert_eq!(env.step([0.0; 3]).unwrap_err(), EnvError::EpisodeOver("left_workspace"));
    }

    #[test]
    fn guided_descent_into_the_hole_terminates_with_the_bonus() {
        // Cheat: read the true position and walk straight to above the hole,
        // then descend. Verifies the success path end to end.
        let mut env = make_quiet_env(4);
        env.reset();
        let geom = env.geometry().clone();
        let mut reached = false;
        for _ in 0..200 {
            let p = env.true_position().unwrap();
            let above = [geom.goal[0], geom.goal[1], 0.004];
            let target = if dist3([p[0], p[1], 0.0], [above[0], above[1], 0.0]) > 1e-4 {
                [above[0] - p[0], above[1] - p[1], (above[2] - p[2]).clamp(-0.002, 0.002)]
            } else {
                [0.0, 0.0, -0.002]
            };
            let out = env.step(target).expect("step");
            if out.terminated {
                assert_eq!(out.cause, Some(StopCause::Goal));
                assert_abs_diff_eq!(out.reward.goal_bonus, 100.0);
                assert_abs_diff_eq!(out.reward.leave_penalty, 0.0);
                assert!(out.reward.total > 99.0);
                reached = true;
                break;
            }
        }
        assert!(reached, "guided descent must reach the goal region");
        assert_eq!(env.step([0.0; 3]).unwrap_err(), EnvError::EpisodeOver("goal"));
    }

    // ---- observation contract ----

    #[test]
    fn position_reading_is_true_position_plus_constant_episode_offset() {
        let mut env = make_env(5);
        let first = env.reset();
        let offset = env.episode_offset().unwrap();
        let start = env.true_position().unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(first.proprio[i], start[i] + offset[i], epsilon = 1e-15);
        }
        let mut rng = StreamRng::root(99).child("acts");
        for _ in 0..50 {
            let a = [
                rng.uniform_in(-0.002, 0.002),
                rng.uniform_in(-0.002, 0.002),
                rng.uniform_in(-0.002, 0.002),
            ];
            let out = env.step(a).expect("step");
            let p = env.true_position().unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(out.obs.proprio[i], p[i] + offset[i], epsilon = 1e-15);
            }
            assert_eq!(env.episode_offset().unwrap(), offset, "offset is constant");
            if out.terminated || out.truncated {
                break;
            }
        }
    }

    #[test]
    fn offsets_vary_across_episodes_and_match_their_distribution() {
        let mut env = make_quiet_env(6);
        let n = 3000;
        let mut offsets = Vec::with_capacity(n);
        let mut abs_sum = 0.0;
        for _ in 0..n {
            env.reset();
            let o = env.episode_offset().unwrap();
            let s = env.true_position().unwrap();
            let params = env.params().clone();
            for i in 0..3 {
                assert!(o[i].abs() <= params.offset_range, "offset inside ±range");
                assert!(
                    s[i] >= params.start_min[i] && s[i] <= params.start_max[i],
                    "start inside the start box"
                );
                abs_sum += o[i].abs();
            }
            offsets.push(o);
        }
        offsets.dedup();
        assert_eq!(offsets.len(), n, "every episode draws a fresh offset");
        // |component| ~ U(0, 5 mm): mean 2.5 mm, sd 1.443 mm; 9000 samples
        // put 3 sigma of the mean at 0.046 mm.
        let mean = abs_sum / (3 * n) as f64;
        assert!(
            (mean - 0.0025).abs() < 5e-5,
            "mean |offset| {mean} out of tolerance"
        );
    }

    #[test]
    fn noise_free_frame_matches_the_renderer_exactly() {
        let mut env = make_quiet_env(7);
        env.reset();
        let out = env.step([0.0, 0.0, -0.002]).expect("step");
        let renderer = GelRenderer::new(quiet_gel()).unwrap();
        let expect = renderer.render(out.force).to_rgb8();
        assert_eq!(out.obs.tactile, expect, "frame is render + quantise only");
    }

    #[test]
    fn pressing_down_changes_the_frame() {
        let mut env = make_quiet_env(8);
        let idle = env.reset().tactile;
        // Descend to the plate and keep pressing: contact force must move
        // the imprint.
        let mut last = None;
        for _ in 0..30 {
            let out = env.step([0.0, 0.0, -0.002]).expect("step");
            if out.force[2] != 0.0 {
                last = Some(out.obs.tactile);
            }
            if out.terminated || out.truncated {
                break;
            }
        }
        let pressed = last.expect("descending must make contact");
        assert_ne!(idle, pressed, "contact must change the tactile frame");
    }

    #[test]
    fn ablations_blank_exactly_one_part() {
        for (mode, tactile_zero, proprio_zero) in [
            (Ablation::NoTactile, true, false),
            (Ablation::NoProprio, false, true),
            (Ablation::None, false, false),
        ] {
            let params = EnvParams {
                ablation: mode,
                ..EnvParams::default()
            };
            let mut env = InsertEnv::new(
                TaskGeometry::default(),
                SimParams::default(),
                quiet_gel(),
                params,
                StreamRng::root(11).child("env"),
            )
            .unwrap();
            let obs = env.reset();
            assert_eq!(obs.tactile.len(), FRAME_LEN, "shape never changes");
            assert_eq!(
                obs.tactile.iter().all(|&b| b == 0),
                tactile_zero,
                "tactile blanking for {mode:?}"
            );
            assert_eq!(obs.proprio == [0.0; 3], proprio_zero, "proprio blanking for {mode:?}");
        }
    }

    #[test]
    fn ablation_parses_and_round_trips() {
        for mode in [Ablation::None, Ablation::NoTactile, Ablation::NoProprio] {
            assert_eq!(mode.as_str().parse::<Ablation>().unwrap(), mode);
        }
        assert!("tactile_off".parse::<Ablation>().is_err());
    }

    // ---- determinism and restore ----

    #[test]
    fn same_seed_same_actions_give_identical_observations() {
        let acts: Vec<Vec3> = {
            let mut r = StreamRng::root(77).child("acts");
            (0..40)
                .map(|_| {
                    [
                        r.uniform_in(-0.002, 0.002),
                        r.uniform_in(-0.002, 0.002),
                        r.uniform_in(-0.002, 0.002),
                    ]
                })
                .collect()
        };
        let run = |seed: u64| {
            let mut env = make_env(seed);
            let mut frames = vec![env.reset().tactile];
            let mut props = Vec::new();
            for &a in &acts {
                let out = env.step(a).expect("step");
                props.push(out.obs.proprio);
                frames.push(out.obs.tactile);
                if out.terminated || out.truncated {
                    break;
                }
            }
            (frames, props)
        };
        assert_eq!(run(13), run(13), "same seed must reproduce bit-for-bit");
        assert_ne!(run(13).0, run(14).0, "different seeds must differ");
    }

    #[test]
    fn snapshot_restore_resumes_bit_for_bit() {
        let mut env = make_env(21);
        env.reset();
        let mut rng = StreamRng::root(22).child("acts");
        let act = |rng: &mut StreamRng| -> Vec3 {
            [
                rng.uniform_in(-0.002, 0.002),
                rng.uniform_in(-0.002, 0.002),
                rng.uniform_in(-0.001, 0.0005),
            ]
        };
        for _ in 0..30 {
            env.step(act(&mut rng)).expect("warmup step");
        }
        let snap = env.snapshot();
        let replay_acts: Vec<Vec3> = (0..25).map(|_| act(&mut rng)).collect();

        let mut first = Vec::new();
        for &a in &replay_acts {
            let out = env.step(a).expect("step");
            first.push((out.obs.tactile.clone(), out.obs.proprio, out.reward.total));
            if out.terminated || out.truncated {
                break;
            }
        }
        // A fresh env with the same seed, restored from the snapshot, must
        // produce the identical continuation (including pixel noise).
        let mut env2 = make_env(21);
        env2.restore(&snap);
        assert_eq!(env2.snapshot(), snap, "snapshot survives a round trip");
        let mut second = Vec::new();
        for &a in &replay_acts {
            let out = env2.step(a).expect("step");
            second.push((out.obs.tactile.clone(), out.obs.proprio, out.reward.total));
            if out.terminated || out.truncated {
                break;
            }
        }
        assert_eq!(first, second);
    }

    #[test]
    fn reset_after_restore_continues_the_episode_sequence() {
        let mut env = make_env(31);
        env.reset(); // episode 0
        env.reset(); // episode 1
        let snap = env.snapshot();
        let a = env.reset().proprio; // episode 2
        let mut env2 = make_env(31);
        env2.restore(&snap);
        let b = env2.reset().proprio; // episode 2 again
        assert_eq!(a, b, "episode draws must continue from the counter");
    }

    // ---- setup validation ----

    #[test]
    fn constructor_rejects_bad_parameters() {
        let mk = |params: EnvParams| {
            InsertEnv::new(
                TaskGeometry::default(),
                SimParams::default(),
                quiet_gel(),
                params,
                StreamRng::root(0).child("env"),
            )
        };
        assert!(matches!(
            mk(EnvParams {
                horizon: 0,
                ..EnvParams::default()
            }),
            Err(EnvSetupError::ZeroHorizon)
        ));
        assert!(matches!(
            mk(EnvParams {
                offset_range: f64::NAN,
                ..EnvParams::default()
            }),
            Err(EnvSetupError::BadOffsetRange(_))
        ));
        assert!(matches!(
            mk(EnvParams {
                start_min: [0.02, -0.015, 0.010],
                start_max: [-0.02, 0.015, 0.030],
                ..EnvParams::default()
            }),
            Err(EnvSetupError::EmptyStartBox { axis: 0 })
        ));
        assert!(matches!(
            mk(EnvParams {
                start_min: [-0.015, -0.015, -0.001],
                start_max: [0.015, 0.015, 0.030],
                ..EnvParams::default()
            }),
            Err(EnvSetupError::StartBoxTouchesPlate(_))
        ));
        assert!(matches!(
            mk(EnvParams {
                start_max: [0.045, 0.015, 0.030],
                ..EnvParams::default()
            }),
            Err(EnvSetupError::StartBoxOutsideWorkspace { axis: 0 })
        ));
    }

    #[test]
    fn unit_action_scaling_maps_the_box_corners() {
        let a = scale_unit_action([1.0, -1.0, 0.5], 0.002);
        assert_abs_diff_eq!(a[0], 0.002);
        assert_abs_diff_eq!(a[1], -0.002);
        assert_abs_diff_eq!(a[2], 0.001);
    }

    #[test]
    fn trace_record_serialises_flat_json() {
        let mut env = make_quiet_env(41);
        env.reset();
        let out = env.step([0.0, 0.0, -0.002]).unwrap();
        let rec = TraceRecord::new(1, [0.0, 0.0, -0.002], env.true_position().unwrap(), &out);
        let line = rec.to_json();
        let back: TraceRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.step, 1);
        assert_abs_diff_eq!(back.reward, out.reward.total, epsilon = 0.0);
        assert!(line.starts_with('{') && !line.contains('\n'), "one flat line");
    }
}
