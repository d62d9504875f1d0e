//! Quasi-static peg-in-hole contact simulator.
//!
//! The peg is a vertical cylinder commanded by relative position targets.
//! Instead of integrating rigid-body dynamics, each control step projects
//! the commanded position onto the contact-feasible set `F` and reports a
//! spring reaction force proportional to the blocked displacement — the
//! steady state of a stiff position-tracking impedance controller.
//!
//! With the peg bottom-centre at `p`, plate top at `z = 0`, and radial
//! clearance `c = hole_radius - peg_radius`:
//!
//! `F = { p : p_z >= 0 }  ∪  { p : sqrt(p_x²+p_y²) <= c  and  p_z >= -hole_depth }`
//!
//! a union of two convex sets (the free half-space above the plate and the
//! clearance cylinder of the hole). Projection onto each piece has a closed
//! form; the projection onto `F` is the nearer of the two.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3-vector in metres (or Newtons for forces).
pub type Vec3 = [f64; 3];

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn dist3(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

/// Componentwise clamp to `[-limit, limit]`.
pub fn clamp3(a: Vec3, limit: f64) -> Vec3 {
    [
        a[0].clamp(-limit, limit),
        a[1].clamp(-limit, limit),
        a[2].clamp(-limit, limit),
    ]
}

/// Invalid task geometry (checked when a config is loaded).
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("peg radius {peg} m must be smaller than hole radius {hole} m")]
    PegDoesNotFit { peg: f64, hole: f64 },
    #[error("hole depth must be positive, got {0} m")]
    NonPositiveDepth(f64),
    #[error("goal tolerance must be positive on every axis, got {0:?}")]
    NonPositiveTolerance(Vec3),
    #[error("workspace min {min:?} must be below max {max:?} on every axis")]
    EmptyWorkspace { min: Vec3, max: Vec3 },
    #[error("goal {0:?} lies outside the workspace")]
    GoalOutsideWorkspace(Vec3),
}

/// Peg, hole, goal region and workspace box. Lengths in metres; the hole is
/// centred on the origin with its top face in the plane `z = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGeometry {
    pub peg_radius: f64,
    pub hole_radius: f64,
    pub hole_depth: f64,
    /// Target position for the peg bottom-centre (inside the hole).
    pub goal: Vec3,
    /// Strict componentwise tolerance around `goal`.
    pub goal_tol: Vec3,
    pub workspace_min: Vec3,
    pub workspace_max: Vec3,
}

impl Default for TaskGeometry {
    fn default() -> Self {
        Self {
            peg_radius: 0.010,
            hole_radius: 0.012,
            hole_depth: 0.015,
            goal: [0.0, 0.0, -0.010],
            goal_tol: [0.005, 0.005, 0.010],
            workspace_min: [-0.030, -0.030, -0.012],
            workspace_max: [0.030, 0.030, 0.040],
        }
    }
}

impl TaskGeometry {
    /// Radial clearance between peg and hole.
    pub fn clearance(&self) -> f64 {
        self.hole_radius - self.peg_radius
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.peg_radius >= self.hole_radius {
            return Err(GeometryError::PegDoesNotFit {
                peg: self.peg_radius,
                hole: self.hole_radius,
            });
        }
        if self.hole_depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(self.hole_depth));
        }
        if self.goal_tol.iter().any(|&t| t <= 0.0) {
            return Err(GeometryError::NonPositiveTolerance(self.goal_tol));
        }
        for i in 0..3 {
            if self.workspace_min[i] >= self.workspace_max[i] {
                return Err(GeometryError::EmptyWorkspace {
                    min: self.workspace_min,
                    max: self.workspace_max,
                });
            }
        }
        if !in_workspace(self.goal, self) {
            return Err(GeometryError::GoalOutsideWorkspace(self.goal));
        }
        Ok(())
    }
}

/// Contact stiffness and actuation limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Per-axis spring stiffness, N/m.
    pub stiffness: Vec3,
    /// Componentwise bound on one step's commanded displacement, m.
    pub max_step: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            stiffness: [1000.0, 1000.0, 1000.0],
            max_step: 0.002,
        }
    }
}

/// True iff `p` is reachable by the (rigid) peg: above the plate, or within
/// the hole clearance down to the hole bottom. All bounds are closed.
pub fn feasible(p: Vec3, geom: &TaskGeometry) -> bool {
    if p[2] >= 0.0 {
        return true;
    }
    let radial = (p[0] * p[0] + p[1] * p[1]).sqrt();
    radial <= geom.clearance() && p[2] >= -geom.hole_depth
}

/// Projection of `u` onto the half-space above the plate.
fn project_halfspace(u: Vec3) -> Vec3 {
    [u[0], u[1], u[2].max(0.0)]
}

/// Projection of `u` onto the clearance cylinder `{radial <= c, z >= -D}`.
fn project_cylinder(u: Vec3, geom: &TaskGeometry) -> Vec3 {
    let c = geom.clearance();
    let radial = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let (mut x, mut y) = if radial > c {
        let k = c / radial;
        (u[0] * k, u[1] * k)
    } else {
        (u[0], u[1])
    };
    // Rounding in the rescale can overshoot the boundary by an ulp; walk
    // back so the strict invariant `radial <= clearance` holds exactly.
    while x * x + y * y > c * c {
        x *= 1.0 - f64::EPSILON;
        y *= 1.0 - f64::EPSILON;
    }
    [x, y, u[2].max(-geom.hole_depth)]
}

/// Euclidean projection of a commanded point onto the feasible set: the
/// nearer of the two convex projections, with exact ties resolved toward
/// the region `prev` occupies (above-plate wins when `prev` is in both).
pub fn project_to_feasible(u: Vec3, prev: Vec3, geom: &TaskGeometry) -> Vec3 {
    if feasible(u, geom) {
        return u;
    }
    let a = project_halfspace(u);
    let b = project_cylinder(u, geom);
    let da = dist3(a, u);
    let db = dist3(b, u);
    if da < db {
        a
    } else if db < da {
        b
    } else if prev[2] >= 0.0 {
        a
    } else {
        b
    }
}

/// Strict componentwise goal test: `|goal - p| < goal_tol` on every axis.
pub fn in_goal(p: Vec3, geom: &TaskGeometry) -> bool {
    (0..3).all(|i| (geom.goal[i] - p[i]).abs() < geom.goal_tol[i])
}

/// Closed containment in the workspace box.
pub fn in_workspace(p: Vec3, geom: &TaskGeometry) -> bool {
    (0..3).all(|i| p[i] >= geom.workspace_min[i] && p[i] <= geom.workspace_max[i])
}

/// Simulator state: actual peg position, last reaction force, step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Peg bottom-centre position, m. Always feasible.
    pub pos: Vec3,
    /// Reaction force from the last step, N: `stiffness ⊙ (commanded - actual)`.
    pub force: Vec3,
    pub step: u64,
}

/// The simulator proper: geometry + parameters + current state.
#[derive(Debug, Clone)]
pub struct PegSim {
    pub geom: TaskGeometry,
    pub params: SimParams,
    state: SimState,
}

impl PegSim {
    /// Creates a simulator with the peg resting at `start` (must be feasible).
    pub fn new(geom: TaskGeometry, params: SimParams, start: Vec3) -> Self {
        assert!(
            feasible(start, &geom),
            "simulator start position {start:?} is not feasible"
        );
        Self {
            geom,
            params,
            state: SimState {
                pos: start,
                force: [0.0; 3],
                step: 0,
            },
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Restores a previously recorded state (checkpoint resume).
    pub fn restore(&mut self, state: SimState) {
        assert!(
            feasible(state.pos, &self.geom),
            "restored position {:?} is not feasible",
            state.pos
        );
        self.state = state;
    }

    /// Applies one relative position command (clipped to ±max_step per
    /// axis), resolves contact, and returns the reaction force.
    pub fn step(&mut self, action: Vec3) -> Vec3 {
        let a = clamp3(action, self.params.max_step);
        let u = add3(self.state.pos, a);
        let p = project_to_feasible(u, self.state.pos, &self.geom);
        let k = self.params.stiffness;
        let blocked = sub3(u, p);
        let force = [k[0] * blocked[0], k[1] * blocked[1], k[2] * blocked[2]];
        self.state = SimState {
            pos: p,
            force,
            step: self.state.step + 1,
        };
        force
    }
}

/// Grid-search projection oracle used by the equivalence tests: samples
/// each convex piece of the feasible set on a refining grid and returns
/// both candidates with their distances. The cylinder piece is sampled in
/// cylindrical coordinates so its curved boundary and bottom plane are
/// exact grid boundaries; the half-space is sampled Cartesian. Distance to
/// a point is unimodal on a convex set, so halving the search box around
/// the incumbent converges without stalling in a false minimum.
pub fn grid_projection_oracle(u: Vec3, geom: &TaskGeometry) -> [(Vec3, f64); 2] {
    let half = grid_refine_halfspace(u);
    let cyl = grid_refine_cylinder(u, geom);
    [(half, dist3(half, u)), (cyl, dist3(cyl, u))]
}

const ORACLE_GRID_N: i32 = 10;
const ORACLE_LEVELS: usize = 40;

fn grid_refine_halfspace(u: Vec3) -> Vec3 {
    let n = ORACLE_GRID_N;
    let mut centre = [u[0], u[1], 0.04];
    let mut half = 0.08;
    let mut best = centre;
    let mut best_d = f64::INFINITY;
    for _ in 0..ORACLE_LEVELS {
        for ix in -n..=n {
            for iy in -n..=n {
                for iz in -n..=n {
                    let p = [
                        centre[0] + ix as f64 * half / n as f64,
                        centre[1] + iy as f64 * half / n as f64,
                        (centre[2] + iz as f64 * half / n as f64).max(0.0),
                    ];
                    let d = dist3(p, u);
                    if d < best_d {
                        best_d = d;
                        best = p;
                    }
                }
            }
        }
        centre = best;
        half *= 0.5;
    }
    best
}

fn grid_refine_cylinder(u: Vec3, geom: &TaskGeometry) -> Vec3 {
    let n = ORACLE_GRID_N;
    let c = geom.clearance();
    let z_lo = -geom.hole_depth;
    let z_hi = 0.05;
    // Search coordinates (radius, azimuth, height); clamping makes the
    // boundary values r = c and z = -hole_depth exactly representable.
    let mut centre = [0.5 * c, 0.0, 0.5 * (z_lo + z_hi)];
    let mut half = [0.5 * c, std::f64::consts::PI, 0.5 * (z_hi - z_lo)];
    let mut best_coord = centre;
    let mut best_point = [0.0, 0.0, z_lo];
    let mut best_d = f64::INFINITY;
    for _ in 0..ORACLE_LEVELS {
        for ir in -n..=n {
            for it in -n..=n {
                for iz in -n..=n {
                    let r = (centre[0] + ir as f64 * half[0] / n as f64).clamp(0.0, c);
                    let th = centre[1] + it as f64 * half[1] / n as f64;
                    let z = (centre[2] + iz as f64 * half[2] / n as f64).clamp(z_lo, z_hi);
                    let p = [r * th.cos(), r * th.sin(), z];
                    let d = dist3(p, u);
                    if d < best_d {
                        best_d = d;
                        best_coord = [r, th, z];
                        best_point = p;
                    }
                }
            }
        }
        centre = best_coord;
        half = [half[0] * 0.5, half[1] * 0.5, half[2] * 0.5];
    }
    best_point
}
