//! Scripted baseline controller for the insertion task.
//!
//! The task is solvable without the true hole position by touch alone:
//! descend until the plate blocks the peg, then sweep an outward square
//! spiral while pressing down, and drop in when the downward press stops
//! meeting resistance. This module scripts exactly that strategy, planning
//! in *reading* coordinates (true position plus the unknown episode offset),
//! and provides a small harness to measure its success rate. It serves as a
//! task-solvability check and as a reference point for learned policies.

use crate::env::{InsertEnv, Observation, StopCause};
use crate::sim::{SimParams, TaskGeometry, Vec3};

/// What a controller sees each step: the observation the agent would get,
/// plus the contact force a wrist force sensor would report.
pub struct ControlInput<'a> {
    pub obs: &'a Observation,
    pub force: Vec3,
}

/// A policy that maps observations to actions in metres.
pub trait Controller {
    /// Called at the start of every episode.
    fn begin_episode(&mut self);
    /// Returns the next relative position command, m (clipped by the
    /// environment to its per-axis limit).
    fn act(&mut self, input: ControlInput) -> Vec3;
}

/// Downward force magnitude that counts as contact, N.
const CONTACT_FORCE: f64 = 0.1;
/// Reading-space distance at which a lateral waypoint counts as reached, m.
const WAYPOINT_TOL: f64 = 1e-5;
/// Drop below the plate-contact reading that counts as entering the hole, m.
const DROP_MARGIN: f64 = 3e-4;
/// Upper bound on spiral waypoints; past this the episode is lost anyway.
const MAX_WAYPOINTS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    /// Move laterally until the reading sits over the nominal hole position.
    Approach,
    /// Straight down until the plate pushes back.
    Descend,
    /// Outward square spiral around the contact point, pressing down.
    Spiral {
        plate_z: f64,
        target: [f64; 2],
        path: SpiralPath,
    },
    /// Resistance vanished: push straight down to the goal.
    Insert,
}

/// Square-spiral waypoint generator on a fixed grid pitch: legs run
/// east, north, west, south with lengths 1, 1, 2, 2, 3, 3, ...
#[derive(Debug, Clone, PartialEq)]
struct SpiralPath {
    centre: [f64; 2],
    pitch: f64,
    pos: [i64; 2],
    dir: usize,
    leg: u64,
    remaining: u64,
    emitted: usize,
}

impl SpiralPath {
    fn new(centre: [f64; 2], pitch: f64) -> Self {
        Self {
            centre,
            pitch,
            pos: [0, 0],
            dir: 0,
            leg: 1,
            remaining: 1,
            emitted: 0,
        }
    }

    /// Next waypoint in reading coordinates, or `None` once the search area
    /// is exhausted.
    fn next_waypoint(&mut self) -> Option<[f64; 2]> {
        if self.emitted >= MAX_WAYPOINTS {
            return None;
        }
        const DIRS: [[i64; 2]; 4] = [[1, 0], [0, 1], [-1, 0], [0, -1]];
        let d = DIRS[self.dir];
        self.pos = [self.pos[0] + d[0], self.pos[1] + d[1]];
        self.remaining -= 1;
        if self.remaining == 0 {
            self.dir = (self.dir + 1) % 4;
            // Leg length grows by one every second turn.
            if self.dir % 2 == 0 {
                self.leg += 1;
            }
            self.remaining = self.leg;
        }
        self.emitted += 1;
        Some([
            self.centre[0] + self.pos[0] as f64 * self.pitch,
            self.centre[1] + self.pos[1] as f64 * self.pitch,
        ])
    }
}

/// The scripted touch-search policy.
pub struct SpiralSearchController {
    /// Nominal hole position in reading coordinates (the reading equals the
    /// true position only up to the unknown offset, hence the search).
    nominal_goal: [f64; 2],
    max_step: f64,
    /// Spiral grid pitch, m. Half the radial clearance guarantees that some
    /// pressed waypoint lands inside the clearance circle.
    pitch: f64,
    /// Downward command issued while sweeping, m.
    press: f64,
    phase: Phase,
}

impl SpiralSearchController {
    pub fn new(geom: &TaskGeometry, sim: &SimParams) -> Self {
        Self {
            nominal_goal: [geom.goal[0], geom.goal[1]],
            max_step: sim.max_step,
            pitch: geom.clearance() / 2.0,
            press: sim.max_step / 4.0,
            phase: Phase::Approach,
        }
    }

    /// Componentwise move toward `target` in the x-y plane, clipped to the
    /// step limit, keeping `dz` as the vertical command.
    fn lateral_step(&self, reading: Vec3, target: [f64; 2], dz: f64) -> Vec3 {
        [
            (target[0] - reading[0]).clamp(-self.max_step, self.max_step),
            (target[1] - reading[1]).clamp(-self.max_step, self.max_step),
            dz,
        ]
    }
}

impl Controller for SpiralSearchController {
    fn begin_episode(&mut self) {
        self.phase = Phase::Approach;
    }

    fn act(&mut self, input: ControlInput) -> Vec3 {
        let r = input.obs.proprio;
        loop {
            match &mut self.phase {
                Phase::Approach => {
                    let dx = self.nominal_goal[0] - r[0];
                    let dy = self.nominal_goal[1] - r[1];
                    if dx.hypot(dy) < WAYPOINT_TOL {
                        self.phase = Phase::Descend;
                        continue;
                    }
                    return self.lateral_step(r, self.nominal_goal, 0.0);
                }
                Phase::Descend => {
                    if input.force[2].abs() > CONTACT_FORCE {
                        // Plate found: spiral around the contact point.
                        let mut path = SpiralPath::new([r[0], r[1]], self.pitch);
                        let target = path.next_waypoint().expect("fresh spiral has waypoints");
                        self.phase = Phase::Spiral {
                            plate_z: r[2],
                            target,
                            path,
                        };
                        continue;
                    }
                    return [0.0, 0.0, -self.max_step];
                }
                Phase::Spiral {
                    plate_z,
                    target,
                    path,
                } => {
                    if r[2] < *plate_z - DROP_MARGIN {
                        // The press went through: we are in the hole.
                        self.phase = Phase::Insert;
                        continue;
                    }
                    // Lateral motion on the plate is unobstructed, so the
                    // reading sits on the last commanded waypoint. On arrival
                    // advance two waypoints per command: consecutive
                    // waypoints are one pitch apart, so the combined move
                    // fits the step limit and pressed endpoints stay close
                    // enough together that one must land inside the
                    // clearance circle.
                    if (target[0] - r[0]).hypot(target[1] - r[1]) <= WAYPOINT_TOL {
                        for _ in 0..2 {
                            match path.next_waypoint() {
                                Some(w) => *target = w,
                                None => return [0.0; 3],
                            }
                        }
                    }
                    let t = *target;
                    return self.lateral_step(r, t, -self.press);
                }
                Phase::Insert => return [0.0, 0.0, -self.max_step],
            }
        }
    }
}

/// Outcome of one scripted episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub cause: StopCause,
    pub steps: u64,
    pub reward_sum: f64,
}

impl EpisodeResult {
    pub fn success(&self) -> bool {
        self.cause == StopCause::Goal
    }
}

/// Runs one episode of `controller` in `env` (resets first).
pub fn run_episode(env: &mut InsertEnv, controller: &mut dyn Controller) -> EpisodeResult {
    let mut obs = env.reset();
    controller.begin_episode();
    let mut force = [0.0; 3];
    let mut reward_sum = 0.0;
    let mut steps = 0;
    loop {
        let action = controller.act(ControlInput { obs: &obs, force });
        let out = env
            .step(action)
            .expect("harness never steps a finished episode");
        steps += 1;
        reward_sum += out.reward.total;
        if let Some(cause) = out.cause {
            return EpisodeResult {
                cause,
                steps,
                reward_sum,
            };
        }
        obs = out.obs;
        force = out.force;
    }
}

/// Fraction of `episodes` the controller solves, with per-cause counts.
pub struct SolvabilityReport {
    pub episodes: u64,
    pub successes: u64,
    pub timeouts: u64,
    pub exits: u64,
    pub mean_steps_to_success: f64,
}

impl SolvabilityReport {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

pub fn measure_solvability(
    env: &mut InsertEnv,
    controller: &mut dyn Controller,
    episodes: u64,
) -> SolvabilityReport {
    let mut report = SolvabilityReport {
        episodes,
        successes: 0,
        timeouts: 0,
        exits: 0,
        mean_steps_to_success: 0.0,
    };
    let mut success_steps = 0u64;
    for _ in 0..episodes {
        let result = run_episode(env, controller);
        match result.cause {
            StopCause::Goal => {
                report.successes += 1;
                success_steps += result.steps;
            }
            StopCause::Timeout => report.timeouts += 1,
            StopCause::LeftWorkspace => report.exits += 1,
        }
    }
    if report.successes > 0 {
        report.mean_steps_to_success = success_steps as f64 / report.successes as f64;
    }
    report
}
