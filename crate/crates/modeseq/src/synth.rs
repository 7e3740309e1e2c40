//! Synthetic fork-junction benchmark.
//!
//! Every scene puts a target on a straight approach toward a junction where
//! the lane splits into B branches with known selection probabilities. The
//! ground-truth future follows one sampled branch with a smooth noise walk
//! on top; the noise-free candidates are stored as `oracle_branches` so
//! diversity metrics have an exact reference. Generation is a pure function
//! of the spec: the same spec produces byte-identical scenes.
//!
//! The interactive variant crosses two such approaches at one junction and
//! couples the targets' branch choices, optionally forbidding the
//! (proceed, proceed) pair outright.

use crate::scene::{
    save_scene, wrap_angle, AgentKind, AgentState, AgentTrack, MapPolyline, Point, PolylineKind,
    Scene, SceneError, Trajectory, TIME_STEP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Largest supported branch count.
pub const MAX_BRANCHES: usize = 8;
/// Minimum pairwise separation between noise-free branch endpoints (meters).
pub const MIN_ENDPOINT_SEPARATION: f64 = 4.0;
/// Manifest header magic; bump the version when the format changes.
pub const MANIFEST_MAGIC: &str = "# modeseq-dataset v1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid fork spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path} line {line}: {message}")]
    ManifestFormat { path: PathBuf, line: usize, message: String },
    #[error("generated branch endpoints too close ({separation:.2} m) in scene '{scene_id}'")]
    BranchesTooClose { scene_id: String, separation: f64 },
}

/// Parameters of the fork benchmark. Angles are the final headings of the
/// branches relative to the approach direction; probabilities are the
/// branch-selection distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkSpec {
    pub branches: usize,
    pub branch_probs: Vec<f64>,
    pub branch_angles: Vec<f64>,
    /// Approach speed in m/s.
    pub approach_speed: f64,
    /// Scale of the smooth waypoint noise walk, meters.
    pub waypoint_noise_sigma: f64,
    /// Turning radius used after the junction, meters.
    pub turn_radius: f64,
    /// Distance from the last observed position to the junction, meters.
    pub junction_distance: f64,
    pub t_obs: usize,
    pub t_hat: usize,
    pub seed: u64,
}

impl ForkSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.branches == 0 || self.branches > MAX_BRANCHES {
            return Err(SynthError::InvalidSpec(format!(
                "branch count {} outside 1..={MAX_BRANCHES}",
                self.branches
            )));
        }
        if self.branch_probs.len() != self.branches {
            return Err(SynthError::InvalidSpec(format!(
                "{} probabilities for {} branches",
                self.branch_probs.len(),
                self.branches
            )));
        }
        if self.branch_angles.len() != self.branches {
            return Err(SynthError::InvalidSpec(format!(
                "{} angles for {} branches",
                self.branch_angles.len(),
                self.branches
            )));
        }
        if self.branch_probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(SynthError::InvalidSpec("branch probabilities must be non-negative".into()));
        }
        let sum: f64 = self.branch_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidSpec(format!(
                "branch probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        if self.approach_speed <= 0.0 {
            return Err(SynthError::InvalidSpec("approach speed must be positive".into()));
        }
        if self.waypoint_noise_sigma < 0.0 {
            return Err(SynthError::InvalidSpec("noise sigma must be non-negative".into()));
        }
        if self.turn_radius <= 0.0 || self.junction_distance <= 0.0 {
            return Err(SynthError::InvalidSpec("radius and junction distance must be positive".into()));
        }
        if self.t_obs < 2 || self.t_hat < 2 {
            return Err(SynthError::InvalidSpec("t_obs and t_hat must be at least 2".into()));
        }
        Ok(())
    }

    /// Spec with `seed` replaced, for deriving per-scene specs.
    pub fn with_seed(&self, seed: u64) -> ForkSpec {
        ForkSpec { seed, ..self.clone() }
    }
}

/// Three-way fork used throughout the benchmark suite.
pub fn fork3_spec() -> ForkSpec {
    ForkSpec {
        branches: 3,
        branch_probs: vec![0.5, 0.3, 0.2],
        branch_angles: vec![-0.7, 0.0, 0.7],
        approach_speed: 8.0,
        waypoint_noise_sigma: 0.15,
        turn_radius: 8.0,
        junction_distance: 6.0,
        t_obs: crate::scene::DEFAULT_T_OBS,
        t_hat: crate::scene::DEFAULT_T_HAT,
        seed: 0,
    }
}

/// Evenly fanned fork with `b` branches, for stress tests.
pub fn fork_spec_with_branches(b: usize) -> ForkSpec {
    let angles: Vec<f64> = if b == 1 {
        vec![0.0]
    } else {
        (0..b).map(|i| -1.3 + 2.6 * i as f64 / (b as f64 - 1.0)).collect()
    };
    // Adjacent branches share their turning arc until the inner one peels
    // off, so dense fans only separate on the straight segment afterwards —
    // a faster approach buys the post-junction distance that needs.
    ForkSpec {
        branches: b,
        branch_probs: vec![1.0 / b as f64; b],
        branch_angles: angles,
        approach_speed: 12.0,
        turn_radius: 10.0,
        ..fork3_spec()
    }
}

/// How the two targets of an interactive scene choose branches together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Joint distribution is the product of the marginals.
    Independent,
    /// Both targets proceeding through the junction is forbidden: the
    /// (proceed, proceed) cell has probability exactly zero.
    YieldOrProceed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Fork,
    Interactive(Coupling),
}

// ---- deterministic randomness ----------------------------------------------

/// splitmix64, used to derive independent per-scene seeds from (seed, index).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal via Box-Muller on a uniform source.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Joint branch-pair table for an interactive scene: cell (i, j) is the
/// probability that target 0 takes branch i and target 1 takes branch j.
/// Index 0 is "proceed" in both marginals.
pub fn joint_branch_table(
    probs0: &[f64],
    probs1: &[f64],
    coupling: Coupling,
) -> Result<Vec<Vec<f64>>, SynthError> {
    let mut table: Vec<Vec<f64>> =
        probs0.iter().map(|&p| probs1.iter().map(|&q| p * q).collect()).collect();
    if coupling == Coupling::YieldOrProceed {
        table[0][0] = 0.0;
        let mass: f64 = table.iter().flatten().sum();
        if mass <= 0.0 {
            return Err(SynthError::InvalidSpec(
                "yield_or_proceed coupling leaves no admissible branch pair".into(),
            ));
        }
        for row in &mut table {
            for cell in row.iter_mut() {
                *cell /= mass;
            }
        }
    }
    Ok(table)
}

/// Draw a branch pair from the coupled joint table.
pub fn sample_branch_pair(
    probs0: &[f64],
    probs1: &[f64],
    coupling: Coupling,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize), SynthError> {
    let table = joint_branch_table(probs0, probs1, coupling)?;
    let flat: Vec<f64> = table.iter().flatten().copied().collect();
    let idx = sample_index(&flat, rng);
    Ok((idx / probs1.len(), idx % probs1.len()))
}

// ---- geometry ----------------------------------------------------------------

/// Noise-free branch future: straight to the junction, constant-curvature
/// arc until the heading change reaches `angle`, then straight again.
fn branch_path(
    speed: f64,
    angle: f64,
    radius: f64,
    junction_distance: f64,
    t_hat: usize,
) -> Vec<Point> {
    let ds = speed * TIME_STEP;
    let mut pts = Vec::with_capacity(t_hat);
    let (mut x, mut y, mut theta) = (0.0f64, 0.0f64, 0.0f64);
    let mut s = 0.0;
    for _ in 0..t_hat {
        if s + ds > junction_distance && theta != angle {
            let dtheta = ds / radius;
            theta = if angle >= 0.0 {
                (theta + dtheta).min(angle)
            } else {
                (theta - dtheta).max(angle)
            };
        }
        x += ds * theta.cos();
        y += ds * theta.sin();
        s += ds;
        pts.push(Point::new(x, y));
    }
    pts
}

/// Future that brakes to a stop roughly one meter before the junction.
fn yield_path(speed: f64, junction_distance: f64, t_hat: usize) -> Vec<Point> {
    let stop_distance = (junction_distance - 1.0).max(0.5);
    let decel = speed * speed / (2.0 * stop_distance);
    let mut pts = Vec::with_capacity(t_hat);
    let mut v = speed;
    let mut x = 0.0;
    for _ in 0..t_hat {
        v = (v - decel * TIME_STEP).max(0.0);
        x += v * TIME_STEP;
        pts.push(Point::new(x, 0.0));
    }
    pts
}

/// Straight-line history ending at the origin with heading 0.
fn straight_history(speed: f64, t_obs: usize) -> Vec<AgentState> {
    (0..t_obs)
        .map(|t| AgentState {
            x: -(speed * TIME_STEP) * (t_obs - 1 - t) as f64,
            y: 0.0,
            vx: speed,
            vy: 0.0,
            heading: 0.0,
        })
        .collect()
}

/// Smooth random-walk noise in the path's local frame: per-step increments
/// are Gaussian with std `sigma/2`, clamped to `sigma`, and accumulate, so
/// consecutive waypoints stay coherent instead of jittering independently.
fn apply_noise_walk(clean: &[Point], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    if sigma == 0.0 {
        return clean.to_vec();
    }
    let mut out = Vec::with_capacity(clean.len());
    let (mut off_lon, mut off_lat) = (0.0f64, 0.0f64);
    let mut prev = Point::new(0.0, 0.0);
    for (i, p) in clean.iter().enumerate() {
        off_lon += (normal(rng) * sigma / 2.0).clamp(-sigma, sigma);
        off_lat += (normal(rng) * sigma / 2.0).clamp(-sigma, sigma);
        // Tangent of the clean path at this waypoint.
        let (dx, dy) = if i == 0 { (p.x, p.y) } else { (p.x - prev.x, p.y - prev.y) };
        let norm = dx.hypot(dy).max(1e-9);
        let (tx, ty) = (dx / norm, dy / norm);
        out.push(Point::new(
            p.x + tx * off_lon - ty * off_lat,
            p.y + ty * off_lon + tx * off_lat,
        ));
        prev = *p;
    }
    out
}

fn min_endpoint_separation(branches: &[Trajectory]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..branches.len() {
        for j in (i + 1)..branches.len() {
            min = min.min(branches[i].endpoint().distance(branches[j].endpoint()));
        }
    }
    min
}

/// Index of the branch whose endpoint is nearest to the trajectory's
/// endpoint — how tests and reports attribute a future to a branch.
pub fn nearest_branch_index(traj: &Trajectory, branches: &[Trajectory]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, b) in branches.iter().enumerate() {
        let d = traj.endpoint().distance(b.endpoint());
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

// ---- single-target fork scene -------------------------------------------------

/// Per-scene jitter so scenes are geometrically distinct: the encoder has to
/// read the map instead of memorizing one layout.
struct JitteredFork {
    speed: f64,
    angles: Vec<f64>,
    junction_distance: f64,
}

fn jitter_fork(spec: &ForkSpec, rng: &mut ChaCha8Rng) -> JitteredFork {
    JitteredFork {
        speed: spec.approach_speed * rng.gen_range(0.9..1.1),
        angles: spec.branch_angles.iter().map(|&a| a + rng.gen_range(-0.06..0.06)).collect(),
        junction_distance: spec.junction_distance + rng.gen_range(-1.0..1.0),
    }
}

fn background_agents(
    rng: &mut ChaCha8Rng,
    speed_hint: f64,
    t_obs: usize,
    first_id: u64,
) -> (Vec<AgentTrack>, Vec<MapPolyline>) {
    let n = rng.gen_range(0..=3usize);
    let mut agents = Vec::new();
    let mut lanes = Vec::new();
    for i in 0..n {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.gen_range(3.5..7.0);
        let back = rng.gen_range(-18.0..-4.0);
        let speed = speed_hint * rng.gen_range(0.6..1.1);
        let kind = match rng.gen_range(0..10) {
            0..=6 => AgentKind::Vehicle,
            7..=8 => AgentKind::Cyclist,
            _ => AgentKind::Pedestrian,
        };
        let history = (0..t_obs)
            .map(|t| AgentState {
                x: back - speed * TIME_STEP * (t_obs - 1 - t) as f64,
                y: lateral,
                vx: speed,
                vy: 0.0,
                heading: 0.0,
            })
            .collect();
        agents.push(AgentTrack { id: first_id + i as u64, kind, history });
        lanes.push(MapPolyline {
            id: 200 + i as u64,
            kind: PolylineKind::Lane,
            points: vec![Point::new(-30.0, lateral), Point::new(40.0, lateral)],
        });
    }
    (agents, lanes)
}

/// Generate one fork scene. Fully determined by the spec (including its
/// seed); the target has agent id 1.
pub fn generate_fork_scene(spec: &ForkSpec, scene_id: &str) -> Result<Scene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jit = jitter_fork(spec, &mut rng);

    let branches: Vec<Trajectory> = jit
        .angles
        .iter()
        .map(|&a| {
            Trajectory(branch_path(jit.speed, a, spec.turn_radius, jit.junction_distance, spec.t_hat))
        })
        .collect();
    let separation = min_endpoint_separation(&branches);
    if spec.branches > 1 && separation <= MIN_ENDPOINT_SEPARATION {
        return Err(SynthError::BranchesTooClose { scene_id: scene_id.into(), separation });
    }

    let chosen = sample_index(&spec.branch_probs, &mut rng);
    let future = Trajectory(apply_noise_walk(
        branches[chosen].points(),
        spec.waypoint_noise_sigma,
        &mut rng,
    ));

    let target = AgentTrack {
        id: 1,
        kind: AgentKind::Vehicle,
        history: straight_history(jit.speed, spec.t_obs),
    };
    let (bg_agents, bg_lanes) = background_agents(&mut rng, jit.speed, spec.t_obs, 10);

    let mut map = vec![MapPolyline {
        id: 100,
        kind: PolylineKind::Lane,
        points: vec![
            Point::new(-jit.speed * TIME_STEP * (spec.t_obs as f64) - 10.0, 0.0),
            Point::new(jit.junction_distance, 0.0),
        ],
    }];
    for (i, b) in branches.iter().enumerate() {
        // Branch centerlines follow the noise-free candidate paths.
        let mut points = vec![Point::new(jit.junction_distance, 0.0)];
        points.extend(b.points().iter().skip(1).step_by(3).copied());
        if points.len() < 2 {
            points.push(*b.endpoint());
        }
        map.push(MapPolyline { id: 101 + i as u64, kind: PolylineKind::Branch, points });
    }
    map.extend(bg_lanes);

    let mut agents = vec![target];
    agents.extend(bg_agents);

    let scene = Scene {
        scene_id: scene_id.to_string(),
        t_obs: spec.t_obs,
        t_hat: spec.t_hat,
        agents,
        map,
        targets: vec![1],
        future: BTreeMap::from([(1u64, future)]),
        oracle_branches: Some(branches),
    };
    scene.validate()?;
    Ok(scene)
}

// ---- interactive scene --------------------------------------------------------

/// Generate a two-target crossing scene. Target 1 approaches the junction
/// along +x, target 2 along -y; each either proceeds through or yields
/// (brakes to a stop). Branch choices are coupled per `coupling`. Oracle
/// branches are stored as `[t1-proceed, t1-yield, t2-proceed, t2-yield]`.
pub fn generate_interactive_scene(
    spec: &ForkSpec,
    coupling: Coupling,
    scene_id: &str,
) -> Result<Scene, SynthError> {
    spec.validate()?;
    if spec.branches != 2 {
        return Err(SynthError::InvalidSpec(format!(
            "interactive scenes need exactly 2 branches (proceed, yield), got {}",
            spec.branches
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jits: [JitteredFork; 2] = [jitter_fork(spec, &mut rng), jitter_fork(spec, &mut rng)];

    // Per-target candidate futures in each target's own approach frame.
    let local_branches: Vec<[Trajectory; 2]> = jits
        .iter()
        .map(|j| {
            [
                Trajectory(branch_path(j.speed, 0.0, spec.turn_radius, j.junction_distance, spec.t_hat)),
                Trajectory(yield_path(j.speed, j.junction_distance, spec.t_hat)),
            ]
        })
        .collect();

    let (b0, b1) =
        sample_branch_pair(&spec.branch_probs, &spec.branch_probs, coupling, &mut rng)?;

    // Target 2's frame: rotated -90 degrees, positioned so both approaches
    // meet at target 1's junction point.
    let junction = Point::new(jits[0].junction_distance, 0.0);
    let t2_origin = Point::new(junction.x, junction.y + jits[1].junction_distance);
    let place_t2 = |p: &Point| -> Point {
        // Local +x maps to world -y.
        Point::new(t2_origin.x + p.y, t2_origin.y - p.x)
    };

    let mut oracle = Vec::with_capacity(4);
    for b in &local_branches[0] {
        oracle.push(b.clone());
    }
    for b in &local_branches[1] {
        oracle.push(Trajectory(b.points().iter().map(&place_t2).collect()));
    }

    let chosen = [b0, b1];
    let mut future = BTreeMap::new();
    for (t, &branch) in chosen.iter().enumerate() {
        let noisy = apply_noise_walk(
            local_branches[t][branch].points(),
            spec.waypoint_noise_sigma,
            &mut rng,
        );
        let world: Vec<Point> =
            if t == 0 { noisy } else { noisy.iter().map(&place_t2).collect() };
        future.insert((t + 1) as u64, Trajectory(world));
    }

    let t1 = AgentTrack {
        id: 1,
        kind: AgentKind::Vehicle,
        history: straight_history(jits[0].speed, spec.t_obs),
    };
    let t2_history: Vec<AgentState> = straight_history(jits[1].speed, spec.t_obs)
        .into_iter()
        .map(|s| {
            let p = place_t2(&Point::new(s.x, s.y));
            AgentState {
                x: p.x,
                y: p.y,
                vx: s.vy,
                vy: -s.vx,
                heading: wrap_angle(s.heading - FRAC_PI_2),
            }
        })
        .collect();
    let t2 = AgentTrack { id: 2, kind: AgentKind::Vehicle, history: t2_history };

    let map = vec![
        MapPolyline {
            id: 100,
            kind: PolylineKind::Lane,
            points: vec![Point::new(-20.0, 0.0), Point::new(junction.x + 25.0, 0.0)],
        },
        MapPolyline {
            id: 101,
            kind: PolylineKind::Lane,
            points: vec![
                Point::new(junction.x, junction.y + jits[1].junction_distance + 14.0),
                Point::new(junction.x, junction.y - 25.0),
            ],
        },
    ];

    let scene = Scene {
        scene_id: scene_id.to_string(),
        t_obs: spec.t_obs,
        t_hat: spec.t_hat,
        agents: vec![t1, t2],
        map,
        targets: vec![1, 2],
        future,
        oracle_branches: Some(oracle),
    };
    scene.validate()?;
    Ok(scene)
}

/// Spec for interactive scenes: two actions with a 0.6/0.4 proceed/yield
/// marginal per target.
pub fn interactive_spec() -> ForkSpec {
    ForkSpec {
        branches: 2,
        branch_probs: vec![0.6, 0.4],
        branch_angles: vec![0.0, 0.0],
        ..fork3_spec()
    }
}

// ---- datasets and manifests ----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub generator_version: String,
    pub spec_hash: String,
    pub relative_paths: Vec<String>,
}

impl DatasetManifest {
    pub fn scene_paths(&self) -> Vec<PathBuf> {
        self.relative_paths.iter().map(|p| self.root.join(p)).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

/// Hash of everything that determines dataset content.
fn spec_hash(spec: &ForkSpec, kind: DatasetKind, n: usize, seed: u64) -> String {
    let mut hasher = Sha256::new();
    let blob = serde_json::json!({
        "spec": spec, "kind": kind, "count": n, "seed": seed,
    });
    hasher.update(serde_json::to_vec(&blob).expect("spec serialization cannot fail"));
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate `n` scenes under `out_dir` and write a manifest listing them.
/// Scene i uses the per-index seed `mix_seed(seed, i)`, so any scene can be
/// regenerated in isolation. Returns the manifest path.
pub fn generate_dataset(
    spec: &ForkSpec,
    kind: DatasetKind,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::InvalidSpec("dataset size must be positive".into()));
    }
    let scenes_dir = out_dir.join("scenes");
    std::fs::create_dir_all(&scenes_dir).map_err(io_err(&scenes_dir))?;

    let mut relative_paths = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed = mix_seed(seed, i as u64);
        let per_scene = spec.with_seed(scene_seed);
        let (prefix, scene) = match kind {
            DatasetKind::Fork => {
                let id = format!("fork-{i:06}");
                ("fork", generate_fork_scene(&per_scene, &id)?)
            }
            DatasetKind::Interactive(coupling) => {
                let id = format!("xing-{i:06}");
                ("xing", generate_interactive_scene(&per_scene, coupling, &id)?)
            }
        };
        let rel = format!("scenes/{prefix}-{i:06}.json");
        save_scene(&scene, &out_dir.join(&rel))?;
        relative_paths.push(rel);
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        spec_hash: spec_hash(spec, kind, n, seed),
        relative_paths,
    };
    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest, &manifest_path)?;
    Ok(manifest_path)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), SynthError> {
    let mut text = format!(
        "{MANIFEST_MAGIC} generator={} spec_sha256={}\n",
        manifest.generator_version, manifest.spec_hash
    );
    for rel in &manifest.relative_paths {
        text.push_str(rel);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, SynthError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(SynthError::ManifestFormat {
            path: path.to_path_buf(),
            line: 1,
            message: "empty manifest".into(),
        });
    };
    if !header.starts_with(MANIFEST_MAGIC) {
        return Err(SynthError::ManifestFormat {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header starting with '{MANIFEST_MAGIC}'"),
        });
    }
    let mut generator_version = String::new();
    let mut spec_hash = String::new();
    for field in header.trim_start_matches(MANIFEST_MAGIC).split_whitespace() {
        if let Some(v) = field.strip_prefix("generator=") {
            generator_version = v.to_string();
        } else if let Some(v) = field.strip_prefix("spec_sha256=") {
            spec_hash = v.to_string();
        }
    }
    let mut relative_paths = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if Path::new(line).is_absolute() {
            return Err(SynthError::ManifestFormat {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "manifest paths must be relative".into(),
            });
        }
        relative_paths.push(line.to_string());
    }
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(DatasetManifest { root, generator_version, spec_hash, relative_paths })
}

/// Load every scene listed by a manifest, in listed order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Scene>, SynthError> {
    let manifest = read_manifest(manifest_path)?;
    manifest
        .scene_paths()
        .iter()
        .map(|p| crate::scene::load_scene(p).map_err(SynthError::from))
        .collect()
}

/// SHA-256 over the manifest bytes and every listed scene file, in order.
pub fn dataset_hash(manifest_path: &Path) -> Result<String, SynthError> {
    let manifest = read_manifest(manifest_path)?;
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(manifest_path).map_err(io_err(manifest_path))?);
    for p in manifest.scene_paths() {
        hasher.update(std::fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(hex(&hasher.finalize()))
}
