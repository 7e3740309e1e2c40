//! Scene data model: agents, map, ground truth, predictions.
//!
//! Scenes are stored as JSON with a fixed key order and shortest-round-trip
//! float formatting, so serializing the same scene twice yields identical
//! bytes. All positions are meters, velocities m/s, headings radians in
//! `(-pi, pi]`; time is discretized at a fixed step with `t_obs` observed
//! states and `t_hat` future waypoints.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Observation steps per scene unless a file says otherwise.
pub const DEFAULT_T_OBS: usize = 10;
/// Future waypoints per scene unless a file says otherwise.
pub const DEFAULT_T_HAT: usize = 30;
/// Seconds between consecutive states/waypoints (10 Hz).
pub const TIME_STEP: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("scene '{scene_id}' invalid: {reason}")]
    Invalid { scene_id: String, reason: String },
    #[error("scene '{scene_id}' has no agent with id {agent}")]
    UnknownAgent { scene_id: String, agent: u64 },
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % TAU;
    if t <= -PI {
        t += TAU;
    } else if t > PI {
        t -= TAU;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Point {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Point {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> [f64; 2] {
        [p.x, p.y]
    }
}

/// One observed kinematic state: position, velocity, heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
}

impl From<[f64; 5]> for AgentState {
    fn from(v: [f64; 5]) -> AgentState {
        AgentState { x: v[0], y: v[1], vx: v[2], vy: v[3], heading: v[4] }
    }
}

impl From<AgentState> for [f64; 5] {
    fn from(s: AgentState) -> [f64; 5] {
        [s.x, s.y, s.vx, s.vy, s.heading]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Vehicle, AgentKind::Pedestrian, AgentKind::Cyclist];

    pub fn label(&self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Cyclist => "cyclist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    Lane,
    Branch,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub kind: AgentKind,
    /// Exactly `t_obs` states, oldest first.
    pub history: Vec<AgentState>,
}

impl AgentTrack {
    pub fn last_state(&self) -> &AgentState {
        self.history.last().expect("validated histories are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub id: u64,
    pub kind: PolylineKind,
    /// At least two points, ordered along the element.
    pub points: Vec<Point>,
}

/// A 2-D waypoint sequence at the scene time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(pub Vec<Point>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn endpoint(&self) -> &Point {
        self.0.last().expect("trajectories are non-empty")
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub t_obs: usize,
    pub t_hat: usize,
    pub agents: Vec<AgentTrack>,
    pub map: Vec<MapPolyline>,
    /// Agents with ground-truth futures, in prediction order.
    pub targets: Vec<u64>,
    pub future: BTreeMap<u64, Trajectory>,
    /// For synthetic scenes: the noise-free candidate futures the generator
    /// sampled from. Interactive scenes store each target's candidates
    /// consecutively, in `targets` order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_branches: Option<Vec<Trajectory>>,
}

impl Scene {
    pub fn agent(&self, id: u64) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn target_kind(&self, id: u64) -> Option<AgentKind> {
        self.agent(id).map(|a| a.kind)
    }

    fn invalid(&self, reason: impl Into<String>) -> SceneError {
        SceneError::Invalid { scene_id: self.scene_id.clone(), reason: reason.into() }
    }

    /// Check every structural invariant; errors name the violated one.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.scene_id.is_empty() {
            return Err(self.invalid("scene_id must be non-empty"));
        }
        if self.t_obs == 0 {
            return Err(self.invalid("t_obs must be at least 1"));
        }
        if self.t_hat == 0 {
            return Err(self.invalid("t_hat must be at least 1"));
        }
        let mut agent_ids = BTreeSet::new();
        for agent in &self.agents {
            if !agent_ids.insert(agent.id) {
                return Err(self.invalid(format!("duplicate agent id {}", agent.id)));
            }
            if agent.history.len() != self.t_obs {
                return Err(self.invalid(format!(
                    "agent {} history length {} != t_obs {}",
                    agent.id,
                    agent.history.len(),
                    self.t_obs
                )));
            }
            for (t, s) in agent.history.iter().enumerate() {
                let fields = [s.x, s.y, s.vx, s.vy, s.heading];
                if fields.iter().any(|v| !v.is_finite()) {
                    return Err(self.invalid(format!("agent {} state {t} is not finite", agent.id)));
                }
                if s.heading <= -PI || s.heading > PI {
                    return Err(self.invalid(format!(
                        "agent {} state {t} heading {} outside (-pi, pi]",
                        agent.id, s.heading
                    )));
                }
            }
        }
        let mut poly_ids = BTreeSet::new();
        for poly in &self.map {
            if !poly_ids.insert(poly.id) {
                return Err(self.invalid(format!("duplicate polyline id {}", poly.id)));
            }
            if poly.points.len() < 2 {
                return Err(self.invalid(format!("polyline {} has fewer than 2 points", poly.id)));
            }
            if poly.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
                return Err(self.invalid(format!("polyline {} has a non-finite point", poly.id)));
            }
        }
        if self.targets.is_empty() {
            return Err(self.invalid("at least one target agent is required"));
        }
        let mut seen_targets = BTreeSet::new();
        for &t in &self.targets {
            if !seen_targets.insert(t) {
                return Err(self.invalid(format!("duplicate target id {t}")));
            }
            if !agent_ids.contains(&t) {
                return Err(self.invalid(format!("target {t} is not an agent in the scene")));
            }
            let Some(traj) = self.future.get(&t) else {
                return Err(self.invalid(format!("target {t} has no ground-truth future")));
            };
            if traj.len() != self.t_hat {
                return Err(self.invalid(format!(
                    "target {t} future length {} != t_hat {}",
                    traj.len(),
                    self.t_hat
                )));
            }
            if traj.points().iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
                return Err(self.invalid(format!("target {t} future has a non-finite waypoint")));
            }
        }
        for id in self.future.keys() {
            if !seen_targets.contains(id) {
                return Err(self.invalid(format!("future present for non-target agent {id}")));
            }
        }
        if let Some(branches) = &self.oracle_branches {
            if branches.is_empty() {
                return Err(self.invalid("oracle_branches present but empty"));
            }
            for (i, b) in branches.iter().enumerate() {
                if b.len() != self.t_hat {
                    return Err(self.invalid(format!(
                        "oracle branch {i} length {} != t_hat {}",
                        b.len(),
                        self.t_hat
                    )));
                }
            }
        }
        Ok(())
    }

    /// Wrap every heading into `(-pi, pi]` (applied on load so that files
    /// written by other tools with unwrapped angles still validate).
    pub fn normalize_headings(&mut self) {
        for agent in &mut self.agents {
            for state in &mut agent.history {
                state.heading = wrap_angle(state.heading);
            }
        }
    }
}

/// The canonical byte representation used by [`save_scene`]: pretty-printed
/// JSON in struct key order with a trailing newline.
pub fn canonical_json(scene: &Scene) -> String {
    let mut s = serde_json::to_string_pretty(scene).expect("scene serialization cannot fail");
    s.push('\n');
    s
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    scene.validate()?;
    std::fs::write(path, canonical_json(scene))
        .map_err(|source| SceneError::Io { path: path.to_path_buf(), source })
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SceneError::Io { path: path.to_path_buf(), source })?;
    let mut scene: Scene = serde_json::from_str(&text).map_err(|e| SceneError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scene.normalize_headings();
    scene.validate()?;
    Ok(scene)
}

/// Rigid transform between the world frame and a target-centric frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    /// World position that maps to the local origin.
    pub origin: Point,
    /// World heading that maps to local +x.
    pub rotation: f64,
}

impl FrameTransform {
    pub fn to_local_point(&self, p: &Point) -> Point {
        let (sin, cos) = self.rotation.sin_cos();
        let dx = p.x - self.origin.x;
        let dy = p.y - self.origin.y;
        Point { x: cos * dx + sin * dy, y: -sin * dx + cos * dy }
    }

    pub fn to_world_point(&self, p: &Point) -> Point {
        let (sin, cos) = self.rotation.sin_cos();
        Point { x: self.origin.x + cos * p.x - sin * p.y, y: self.origin.y + sin * p.x + cos * p.y }
    }

    pub fn to_local_state(&self, s: &AgentState) -> AgentState {
        let (sin, cos) = self.rotation.sin_cos();
        let p = self.to_local_point(&Point::new(s.x, s.y));
        AgentState {
            x: p.x,
            y: p.y,
            vx: cos * s.vx + sin * s.vy,
            vy: -sin * s.vx + cos * s.vy,
            heading: wrap_angle(s.heading - self.rotation),
        }
    }

    pub fn to_world_state(&self, s: &AgentState) -> AgentState {
        let (sin, cos) = self.rotation.sin_cos();
        let p = self.to_world_point(&Point::new(s.x, s.y));
        AgentState {
            x: p.x,
            y: p.y,
            vx: cos * s.vx - sin * s.vy,
            vy: sin * s.vx + cos * s.vy,
            heading: wrap_angle(s.heading + self.rotation),
        }
    }

    pub fn to_local_trajectory(&self, t: &Trajectory) -> Trajectory {
        Trajectory(t.points().iter().map(|p| self.to_local_point(p)).collect())
    }

    pub fn to_world_trajectory(&self, t: &Trajectory) -> Trajectory {
        Trajectory(t.points().iter().map(|p| self.to_world_point(p)).collect())
    }
}

/// Re-express the whole scene in the frame of `target`: its last observed
/// position becomes the origin and its last heading becomes +x. Returns the
/// transform so predictions can be mapped back to world coordinates.
pub fn normalize_scene(scene: &Scene, target: u64) -> Result<(Scene, FrameTransform), SceneError> {
    let anchor = scene
        .agent(target)
        .ok_or(SceneError::UnknownAgent { scene_id: scene.scene_id.clone(), agent: target })?;
    let last = anchor.last_state();
    let frame = FrameTransform { origin: Point::new(last.x, last.y), rotation: last.heading };
    let mut out = scene.clone();
    for agent in &mut out.agents {
        for state in &mut agent.history {
            *state = frame.to_local_state(state);
        }
    }
    for poly in &mut out.map {
        for p in &mut poly.points {
            *p = frame.to_local_point(p);
        }
    }
    for traj in out.future.values_mut() {
        *traj = frame.to_local_trajectory(traj);
    }
    if let Some(branches) = &mut out.oracle_branches {
        for b in branches.iter_mut() {
            *b = frame.to_local_trajectory(b);
        }
    }
    Ok((out, frame))
}

// ---- prediction containers -------------------------------------------------

/// One predicted future: waypoints, per-waypoint uncertainty scales (x, y),
/// and a confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub trajectory: Trajectory,
    /// Positive Laplace scale per waypoint, stored as (x-scale, y-scale).
    pub scales: Vec<Point>,
    pub confidence: f64,
}

/// Ordered modes for a single target agent. The order is the decode order:
/// index 0 was produced first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub modes: Vec<ModePrediction>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.modes.len()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.confidence).collect()
    }
}

/// One joint mode: a future for every target (aligned with the scene's
/// target order) plus a scene-level score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModePrediction {
    pub trajectories: Vec<Trajectory>,
    pub scales: Vec<Vec<Point>>,
    pub scene_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPredictionSet {
    pub target_ids: Vec<u64>,
    pub modes: Vec<JointModePrediction>,
}

impl JointPredictionSet {
    pub fn k(&self) -> usize {
        self.modes.len()
    }
}
