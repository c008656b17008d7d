//! Closed-loop episodes for a holonomic point robot.
//!
//! The robot drives straight at the goal until a sensed obstacle's unsafe
//! disk blocks the next `ρ` meters of that line, then hands control to an
//! avoidance controller (the trained network or the grid baseline).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    distance, goal_unit_vector, nearest_obstacle, point_segment_distance, Bounds, Control, Environment,
    Obstacle, Position, DEFAULT_GOAL_THRESHOLD,
};
use crate::gridhjr::{default_dt, descent_control, reach_time_field, Grid2D, SolverSettings, ValueField};
use crate::neuralnet::{control_at, InputScaling, MlpParameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Neurohjr,
    Classical,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerKind::Neurohjr => "neurohjr",
            ControllerKind::Classical => "classical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyModel {
    None,
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Nominal,
    Avoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub sensor_radius: f64,
    pub max_episode_time: f64,
    pub controller: ControllerKind,
    pub latency_model: LatencyModel,
    pub rng_seed: u64,
    /// Half-width of the square the start is jittered in, per episode seed.
    pub start_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            sensor_radius: 5.0,
            max_episode_time: 300.0,
            controller: ControllerKind::Neurohjr,
            latency_model: LatencyModel::None,
            rng_seed: 0,
            start_jitter: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt {} must be > 0", self.dt));
        }
        if !(self.sensor_radius.is_finite() && self.sensor_radius > 0.0) {
            return bad(format!("sensor_radius {} must be > 0", self.sensor_radius));
        }
        if !(self.max_episode_time.is_finite() && self.max_episode_time > self.dt) {
            return bad(format!(
                "max_episode_time {} must exceed dt {}",
                self.max_episode_time, self.dt
            ));
        }
        if !(self.start_jitter.is_finite() && self.start_jitter >= 0.0) {
            return bad(format!("start_jitter {} must be >= 0", self.start_jitter));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub ux: f64,
    pub uy: f64,
    pub mode: Mode,
    pub min_center_distance: f64,
}

impl TrajectorySample {
    pub fn position(&self) -> Position {
        Position::new(self.px, self.py)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Vec<TrajectorySample>,
    pub reached_goal: bool,
    /// Kinematic time plus charged compute time under measured latency.
    pub travel_time: f64,
    pub path_length: f64,
    /// Smallest nearest-center distance over the trajectory.
    pub min_clearance: f64,
    /// Some sample lay inside an obstacle's physical disk.
    pub safety_violation: bool,
    /// Wall-clock control time; zero unless latency is measured.
    pub control_compute_time: f64,
    pub control_steps: usize,
    pub resolve_count: usize,
    pub resolve_time: f64,
}

impl EpisodeResult {
    pub fn kinematic_time(&self) -> f64 {
        self.trajectory.last().map_or(0.0, |s| s.t)
    }

    pub fn mean_control_time(&self) -> f64 {
        if self.control_steps == 0 {
            0.0
        } else {
            self.control_compute_time / self.control_steps as f64
        }
    }
}

/// Grid baseline: bang-bang descent of the goal arrival-time field with a
/// one-step lookahead.
#[derive(Debug, Clone)]
pub struct ClassicalPlanner {
    pub field: ValueField,
    pub horizon: f64,
    pub dt: f64,
}

impl ClassicalPlanner {
    pub fn solve(env: &Environment, settings: &SolverSettings) -> Result<Self> {
        let grid = Grid2D::covering(env.bounds(), settings.h)?;
        let dt = default_dt(&grid, settings.cfl_factor);
        let field = reach_time_field(env, &grid, settings.reach_horizon, dt)?;
        Ok(Self {
            field,
            horizon: settings.reach_horizon,
            dt,
        })
    }

    fn resolve(&mut self, env: &Environment) -> Result<()> {
        self.field = reach_time_field(env, &self.field.grid, self.horizon, self.dt)?;
        Ok(())
    }
}

/// What a controller needs at run time; either part may be absent when the
/// corresponding controller is not used.
#[derive(Debug, Clone, Default)]
pub struct ControllerResources {
    pub params: Option<MlpParameters>,
    pub planner: Option<ClassicalPlanner>,
}

impl ControllerResources {
    pub fn neuro(params: MlpParameters) -> Self {
        Self {
            params: Some(params),
            planner: None,
        }
    }

    pub fn classical(planner: ClassicalPlanner) -> Self {
        Self {
            params: None,
            planner: Some(planner),
        }
    }
}

/// Explicit Euler step, clamped to the workspace.
pub fn step(p: Position, u: Control, dt: f64, bounds: Bounds) -> Position {
    bounds.clamp(Position::new(p.px + u.ux * dt, p.py + u.uy * dt))
}

/// Obstacles whose centers lie within `radius` of `p`, in index order.
pub fn sense(p: Position, env: &Environment, radius: f64) -> Vec<Obstacle> {
    env.obstacles()
        .iter()
        .filter(|o| distance(p, o.center) <= radius)
        .copied()
        .collect()
}

/// AVOID when a sensed unsafe disk meets the next `lookahead` meters of the
/// straight line to the goal.
pub fn select_mode(p: Position, env: &Environment, sensed: &[Obstacle], lookahead: f64) -> Mode {
    if sensed.is_empty() {
        return Mode::Nominal;
    }
    let goal = env.goal();
    let d = distance(p, goal);
    let end = if d <= lookahead || d == 0.0 {
        goal
    } else {
        let k = lookahead / d;
        Position::new(p.px + (goal.px - p.px) * k, p.py + (goal.py - p.py) * k)
    };
    let blocked = sensed
        .iter()
        .any(|o| point_segment_distance(o.center, p, end) <= env.unsafe_radius(o));
    if blocked {
        Mode::Avoid
    } else {
        Mode::Nominal
    }
}

/// Unit-speed heading at the goal.
pub fn nominal_control(p: Position, env: &Environment) -> Result<Control> {
    let (ux, uy) = goal_unit_vector(p, env)?;
    Ok(Control::new(ux, uy))
}

pub fn neuro_control(params: &MlpParameters, scaling: &InputScaling, p: Position) -> Result<Control> {
    control_at(params, scaling, p)
}

/// Start position for an episode: the environment's start, jittered
/// uniformly within `±jitter` per axis and redrawn while unsafe.
pub fn episode_start(env: &Environment, jitter: f64, seed: u64) -> Result<Position> {
    if jitter == 0.0 {
        return Ok(env.start());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = env.start();
    for _ in 0..1000 {
        let p = env.bounds().clamp(Position::new(
            s.px + rng.gen_range(-jitter..=jitter),
            s.py + rng.gen_range(-jitter..=jitter),
        ));
        if env.with_start(p).is_ok() {
            return Ok(p);
        }
    }
    Err(Error::SamplingExhausted {
        attempts: 1000,
        accepted: 0,
        requested: 1,
    })
}

fn min_center_distance(p: Position, env: &Environment) -> f64 {
    nearest_obstacle(p, env).map_or(f64::INFINITY, |(_, d)| d)
}

fn inside_obstacle(p: Position, env: &Environment) -> bool {
    env.obstacles().iter().any(|o| distance(p, o.center) < o.radius)
}

/// Runs one episode from the (possibly jittered) start.
pub fn run_episode(env: &Environment, cfg: &SimConfig, res: &ControllerResources) -> Result<EpisodeResult> {
    cfg.validate()?;
    let start = episode_start(env, cfg.start_jitter, cfg.rng_seed)?;
    let env = env.with_start(start)?;
    let scaling = InputScaling::from_bounds(env.bounds());
    let mut planner = None;
    let params = match cfg.controller {
        ControllerKind::Neurohjr => Some(
            res.params
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("neurohjr controller needs a checkpoint".into()))?,
        ),
        ControllerKind::Classical => {
            planner = Some(
                res.planner
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("classical controller needs a value field".into()))?,
            );
            None
        }
    };
    let measured = cfg.latency_model == LatencyModel::Measured;
    let bounds = env.bounds();
    let goal = env.goal();

    let mut trajectory = Vec::new();
    let mut p = start;
    let mut steps = 0usize;
    let mut mode = Mode::Nominal;
    let mut compute = 0.0;
    let mut resolve_count = 0;
    let mut resolve_time = 0.0;
    let mut path_length = 0.0;
    let reached_goal = loop {
        let t = steps as f64 * cfg.dt;
        if distance(p, goal) < env.goal_threshold() {
            break true;
        }
        if t >= cfg.max_episode_time - 1e-9 * cfg.dt {
            break false;
        }
        let sensed = sense(p, &env, cfg.sensor_radius);
        let next_mode = select_mode(p, &env, &sensed, cfg.sensor_radius);
        let timer = Instant::now();
        if let Some(pl) = planner.as_mut() {
            if measured && next_mode == Mode::Avoid && mode == Mode::Nominal {
                pl.resolve(&env)?;
                resolve_count += 1;
                resolve_time += timer.elapsed().as_secs_f64();
            }
        }
        let u = match next_mode {
            Mode::Nominal => nominal_control(p, &env)?,
            Mode::Avoid => match (params, planner.as_ref()) {
                (Some(w), _) => neuro_control(w, &scaling, p)?,
                (None, Some(pl)) => descent_control(&pl.field, p, cfg.dt)?,
                (None, None) => unreachable!("controller resources checked above"),
            },
        };
        if measured {
            compute += timer.elapsed().as_secs_f64();
        }
        mode = next_mode;
        trajectory.push(TrajectorySample {
            t,
            px: p.px,
            py: p.py,
            ux: u.ux,
            uy: u.uy,
            mode,
            min_center_distance: min_center_distance(p, &env),
        });
        let next = step(p, u, cfg.dt, bounds);
        path_length += distance(p, next);
        p = next;
        steps += 1;
    };
    let t_end = steps as f64 * cfg.dt;
    trajectory.push(TrajectorySample {
        t: t_end,
        px: p.px,
        py: p.py,
        ux: 0.0,
        uy: 0.0,
        mode,
        min_center_distance: min_center_distance(p, &env),
    });
    let min_clearance = trajectory
        .iter()
        .map(|s| s.min_center_distance)
        .fold(f64::INFINITY, f64::min);
    let safety_violation = trajectory.iter().any(|s| inside_obstacle(s.position(), &env));
    Ok(EpisodeResult {
        trajectory,
        reached_goal,
        travel_time: t_end + compute,
        path_length,
        min_clearance,
        safety_violation,
        control_compute_time: compute,
        control_steps: steps,
        resolve_count,
        resolve_time,
    })
}

/// Random obstacle layouts for Monte Carlo runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEnvSpec {
    pub bounds: Bounds,
    pub start: Position,
    pub goal: Position,
    pub n_obstacles: usize,
    pub radius: f64,
    pub safety_margin: f64,
    pub goal_threshold: f64,
    /// Extra gap between start/goal and every unsafe disk.
    pub endpoint_clearance: f64,
    pub max_attempts: usize,
}

impl Default for RandomEnvSpec {
    fn default() -> Self {
        Self {
            bounds: Bounds::square(45.0).expect("valid default bounds"),
            start: Position::new(1.0, 1.0),
            goal: Position::new(40.0, 40.0),
            n_obstacles: 10,
            radius: 2.0,
            safety_margin: 1.0,
            goal_threshold: DEFAULT_GOAL_THRESHOLD,
            endpoint_clearance: 2.0,
            max_attempts: 10_000,
        }
    }
}

impl RandomEnvSpec {
    /// Uniform centers at least `R` inside the bounds, kept
    /// `R_d + clearance` from the start and goal; physical disks never
    /// overlap.
    pub fn generate(&self, seed: u64) -> Result<Environment> {
        let b = self.bounds;
        let r = self.radius;
        if !(r > 0.0 && b.x_max - b.x_min > 2.0 * r && b.y_max - b.y_min > 2.0 * r) {
            return Err(Error::InvalidEnvironment(format!(
                "obstacle radius {r} does not fit the workspace"
            )));
        }
        let keep_out = self.radius + self.safety_margin + self.endpoint_clearance;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obstacles: Vec<Obstacle> = Vec::with_capacity(self.n_obstacles);
        let mut attempts = 0;
        while obstacles.len() < self.n_obstacles {
            attempts += 1;
            if attempts > self.max_attempts {
                return Err(Error::SamplingExhausted {
                    attempts: attempts - 1,
                    accepted: obstacles.len(),
                    requested: self.n_obstacles,
                });
            }
            let c = Position::new(
                rng.gen_range(b.x_min + r..=b.x_max - r),
                rng.gen_range(b.y_min + r..=b.y_max - r),
            );
            if distance(c, self.start) < keep_out || distance(c, self.goal) < keep_out {
                continue;
            }
            if obstacles.iter().any(|o| distance(o.center, c) < 2.0 * self.radius) {
                continue;
            }
            obstacles.push(Obstacle::new(c, self.radius));
        }
        Environment::new(
            b,
            self.start,
            self.goal,
            obstacles,
            self.safety_margin,
            self.goal_threshold,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_id: usize,
    pub controller: ControllerKind,
    pub travel_time_s: f64,
    pub path_length_m: f64,
    pub min_clearance_m: f64,
    pub reached_goal: bool,
    pub compute_time_s: f64,
}

impl SummaryRow {
    pub fn new(run_id: usize, controller: ControllerKind, r: &EpisodeResult) -> Self {
        Self {
            run_id,
            controller,
            travel_time_s: r.travel_time,
            path_length_m: r.path_length,
            min_clearance_m: r.min_clearance,
            reached_goal: r.reached_goal,
            compute_time_s: r.control_compute_time,
        }
    }
}

/// One Monte Carlo run: the same environment under both controllers.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub run_id: usize,
    pub environment: Environment,
    pub candidate_kind: ControllerKind,
    pub candidate: EpisodeResult,
    pub baseline_kind: ControllerKind,
    pub baseline: EpisodeResult,
}

impl ComparisonRun {
    pub fn travel_time_reduction(&self) -> f64 {
        reduction(self.baseline.travel_time, self.candidate.travel_time)
    }

    pub fn path_length_reduction(&self) -> f64 {
        reduction(self.baseline.path_length, self.candidate.path_length)
    }
}

/// Percent reduction of `new` relative to `base`.
pub fn reduction(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (base - new) / base
    }
}

#[derive(Debug, Clone, Default)]
pub struct ComparisonSummary {
    pub runs: Vec<ComparisonRun>,
}

impl ComparisonSummary {
    fn mean(&self, f: impl Fn(&ComparisonRun) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }

    /// (candidate, baseline)
    pub fn mean_travel_time(&self) -> (f64, f64) {
        (self.mean(|r| r.candidate.travel_time), self.mean(|r| r.baseline.travel_time))
    }

    /// (candidate, baseline)
    pub fn mean_path_length(&self) -> (f64, f64) {
        (self.mean(|r| r.candidate.path_length), self.mean(|r| r.baseline.path_length))
    }

    /// Mean of per-run travel-time reductions, percent.
    pub fn mean_travel_time_reduction(&self) -> f64 {
        self.mean(ComparisonRun::travel_time_reduction)
    }

    /// Mean of per-run path-length reductions, percent.
    pub fn mean_path_length_reduction(&self) -> f64 {
        self.mean(ComparisonRun::path_length_reduction)
    }

    /// Episodes that entered an obstacle: (candidate, baseline).
    pub fn safety_violations(&self) -> (usize, usize) {
        (
            self.runs.iter().filter(|r| r.candidate.safety_violation).count(),
            self.runs.iter().filter(|r| r.baseline.safety_violation).count(),
        )
    }

    /// Mean per-step control compute time of the candidate.
    pub fn mean_candidate_step_time(&self) -> f64 {
        let steps: usize = self.runs.iter().map(|r| r.candidate.control_steps).sum();
        let time: f64 = self.runs.iter().map(|r| r.candidate.control_compute_time).sum();
        time / steps.max(1) as f64
    }

    /// Mean wall-clock time of one baseline re-solve, if any happened.
    pub fn mean_baseline_resolve_time(&self) -> Option<f64> {
        let n: usize = self.runs.iter().map(|r| r.baseline.resolve_count).sum();
        let time: f64 = self.runs.iter().map(|r| r.baseline.resolve_time).sum();
        (n > 0).then(|| time / n as f64)
    }

    pub fn rows(&self) -> Vec<SummaryRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                [
                    SummaryRow::new(r.run_id, r.candidate_kind, &r.candidate),
                    SummaryRow::new(r.run_id, r.baseline_kind, &r.baseline),
                ]
            })
            .collect()
    }
}

/// Generates `n_runs` environments from consecutive seeds and runs both
/// configurations on each. `prepare` builds the controller resources for
/// one environment (typically solving fields and training a network).
pub fn run_monte_carlo(
    spec: &RandomEnvSpec,
    n_runs: usize,
    base_seed: u64,
    candidate: &SimConfig,
    baseline: &SimConfig,
    mut prepare: impl FnMut(usize, &Environment) -> Result<ControllerResources>,
) -> Result<ComparisonSummary> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be >= 1".into()));
    }
    candidate.validate()?;
    baseline.validate()?;
    let mut runs = Vec::with_capacity(n_runs);
    for run_id in 0..n_runs {
        let environment = spec.generate(base_seed.wrapping_add(run_id as u64))?;
        let res = prepare(run_id, &environment)?;
        let cand = run_episode(&environment, candidate, &res)?;
        let base = run_episode(&environment, baseline, &res)?;
        runs.push(ComparisonRun {
            run_id,
            environment,
            candidate_kind: candidate.controller,
            candidate: cand,
            baseline_kind: baseline.controller,
            baseline: base,
        });
    }
    Ok(ComparisonSummary { runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub sensor_radius_m: f64,
    pub travel_time_s: f64,
    pub path_length_m: f64,
    pub min_clearance_m: f64,
    pub reached_goal: bool,
}

/// One episode per sensor radius, in input order.
pub fn run_ablation(
    env: &Environment,
    radii: &[f64],
    cfg: &SimConfig,
    res: &ControllerResources,
) -> Result<Vec<AblationRow>> {
    if radii.is_empty() {
        return Err(Error::InvalidArgument("no sensor radii given".into()));
    }
    radii
        .iter()
        .map(|&rho| {
            let c = SimConfig {
                sensor_radius: rho,
                ..cfg.clone()
            };
            let r = run_episode(env, &c, res)?;
            Ok(AblationRow {
                sensor_radius_m: rho,
                travel_time_s: r.travel_time,
                path_length_m: r.path_length,
                min_clearance_m: r.min_clearance,
                reached_goal: r.reached_goal,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::init_params;

    fn env_with(obstacles: Vec<Obstacle>, threshold: f64) -> Environment {
        Environment::new(
            Bounds::square(45.0).unwrap(),
            Position::new(1.0, 1.0),
            Position::new(40.0, 40.0),
            obstacles,
            1.0,
            threshold,
        )
        .unwrap()
    }

    #[test]
    fn step_examples() {
        let b = Bounds::square(45.0).unwrap();
        assert_eq!(step(Position::new(1.0, 1.0), Control::new(1.0, 0.0), 0.1, b), Position::new(1.1, 1.0));
        assert_eq!(step(Position::new(3.0, 4.0), Control::ZERO, 0.1, b), Position::new(3.0, 4.0));
        assert_eq!(step(Position::new(44.95, 0.02), Control::new(1.0, -1.0), 0.1, b), Position::new(45.0, 0.0));
    }

    #[test]
    fn sense_examples() {
        let e = env_with(
            vec![
                Obstacle::new(Position::new(14.0, 10.0), 1.0),
                Obstacle::new(Position::new(10.0, 16.0), 1.0),
                Obstacle::new(Position::new(10.0, 15.0), 1.0),
            ],
            0.5,
        );
        let p = Position::new(10.0, 10.0);
        assert_eq!(sense(p, &e, 5.0), vec![e.obstacles()[0], e.obstacles()[2]]);
        assert!(sense(p, &e, 3.0).is_empty());
        assert!(sense(p, &env_with(vec![], 0.5), 5.0).is_empty());
    }

    #[test]
    fn select_mode_examples() {
        // goal straight up the diagonal from (10,10)
        let e = env_with(vec![Obstacle::new(Position::new(20.0, 20.0), 2.0)], 0.5);
        let p = Position::new(10.0, 10.0);
        assert_eq!(select_mode(p, &e, &[], 5.0), Mode::Nominal);

        let dir = std::f64::consts::FRAC_1_SQRT_2;
        let ahead = Obstacle::new(Position::new(p.px + 4.0 * dir, p.py + 4.0 * dir), 2.0);
        assert_eq!(select_mode(p, &e, &[ahead], 5.0), Mode::Avoid);

        // 4 m off to the side: the segment's closest point is p itself
        let side = Obstacle::new(Position::new(p.px + 4.0 * dir, p.py - 4.0 * dir), 2.0);
        assert!(point_segment_distance(side.center, p, Position::new(p.px + 5.0 * dir, p.py + 5.0 * dir)) > 3.0);
        assert_eq!(select_mode(p, &e, &[side], 5.0), Mode::Nominal);

        // beyond the lookahead the same obstacle does not trigger
        let far = Obstacle::new(Position::new(p.px + 8.5 * dir, p.py + 8.5 * dir), 2.0);
        assert_eq!(select_mode(p, &e, &[far], 5.0), Mode::Nominal);
        assert_eq!(select_mode(p, &e, &[far], 6.0), Mode::Avoid);
    }

    #[test]
    fn nominal_control_examples() {
        let mk = |goal| {
            Environment::new(Bounds::square(45.0).unwrap(), Position::new(0.0, 0.0), goal, vec![], 1.0, 0.5).unwrap()
        };
        let u = nominal_control(Position::new(0.0, 0.0), &mk(Position::new(3.0, 4.0))).unwrap();
        assert!((u.ux - 0.6).abs() < 1e-15 && (u.uy - 0.8).abs() < 1e-15);
        assert_eq!(nominal_control(Position::new(0.0, 0.0), &mk(Position::new(5.0, 0.0))).unwrap(), Control::new(1.0, 0.0));
        let u = nominal_control(Position::new(7.0, 2.0), &mk(Position::new(30.0, 41.0))).unwrap();
        assert!((u.norm() - 1.0).abs() < 1e-12);
        assert!(nominal_control(Position::new(3.0, 4.0), &mk(Position::new(3.0, 4.0))).is_err());
    }

    #[test]
    fn neuro_control_examples() {
        let s = InputScaling::from_bounds(Bounds::square(45.0).unwrap());
        let p = Position::new(12.0, 30.0);
        assert_eq!(neuro_control(&MlpParameters::zeros(), &s, p).unwrap(), Control::ZERO);
        let w = init_params(3);
        let u = neuro_control(&w, &s, p).unwrap();
        assert!(u.in_box());
        assert_eq!(u, neuro_control(&w, &s, p).unwrap());
    }

    #[test]
    fn obstacle_free_episode_is_a_straight_line() {
        let e = env_with(vec![], 0.1);
        let straight = distance(e.start(), e.goal());
        for controller in [ControllerKind::Neurohjr, ControllerKind::Classical] {
            let cfg = SimConfig {
                controller,
                ..SimConfig::default()
            };
            let res = ControllerResources {
                params: Some(MlpParameters::zeros()),
                planner: Some(ClassicalPlanner {
                    field: ValueField::new(Grid2D::covering(e.bounds(), 5.0).unwrap(), vec![0.0; 100], 0.0).unwrap(),
                    horizon: 1.0,
                    dt: 1.0,
                }),
            };
            let r = run_episode(&e, &cfg, &res).unwrap();
            assert!(r.reached_goal);
            assert!((r.path_length - straight).abs() <= 2.0 * cfg.dt, "{}", r.path_length);
            assert!(r.trajectory.iter().all(|s| s.mode == Mode::Nominal));
            assert_eq!(r.min_clearance, f64::INFINITY);
            for w in r.trajectory.windows(2) {
                let dt = w[1].t - w[0].t;
                assert!((dt - cfg.dt).abs() < 1e-9);
                assert!(distance(w[0].position(), w[1].position()) <= 2f64.sqrt() * cfg.dt + 1e-12);
            }
            let last = r.trajectory.last().unwrap();
            assert!(distance(last.position(), e.goal()) < e.goal_threshold());
        }
    }

    #[test]
    fn episode_times_out() {
        let e = env_with(vec![], 0.5);
        let cfg = SimConfig {
            max_episode_time: 0.1,
            ..SimConfig::default()
        };
        assert!(run_episode(&e, &cfg, &ControllerResources::neuro(MlpParameters::zeros())).is_err());
        let cfg = SimConfig {
            max_episode_time: 0.15,
            dt: 0.15,
            ..SimConfig::default()
        };
        let cfg = SimConfig { max_episode_time: 0.2, dt: 0.1, ..cfg };
        let r = run_episode(&e, &cfg, &ControllerResources::neuro(MlpParameters::zeros())).unwrap();
        assert!(!r.reached_goal);
        assert_eq!(r.control_steps, 2);
    }

    #[test]
    fn missing_resources_are_errors() {
        let e = env_with(vec![], 0.5);
        let cfg = SimConfig::default();
        assert!(run_episode(&e, &cfg, &ControllerResources::default()).is_err());
        let cfg = SimConfig {
            controller: ControllerKind::Classical,
            ..cfg
        };
        assert!(run_episode(&e, &cfg, &ControllerResources::neuro(MlpParameters::zeros())).is_err());
    }

    #[test]
    fn classical_episode_avoids_and_resolves() {
        let e = env_with(vec![Obstacle::new(Position::new(20.0, 20.0), 2.0)], 0.5);
        let settings = SolverSettings {
            h: 0.5,
            ..SolverSettings::default()
        };
        let planner = ClassicalPlanner::solve(&e, &settings).unwrap();
        let res = ControllerResources::classical(planner);
        let cfg = SimConfig {
            controller: ControllerKind::Classical,
            ..SimConfig::default()
        };
        let r = run_episode(&e, &cfg, &res).unwrap();
        assert!(r.reached_goal);
        assert!(r.min_clearance > 2.0, "{}", r.min_clearance);
        assert!(!r.safety_violation);
        assert_eq!(r.resolve_count, 0);
        assert_eq!(r.travel_time, r.kinematic_time());
        assert!(r.trajectory.iter().any(|s| s.mode == Mode::Avoid));
        let steps_sum: f64 = r
            .trajectory
            .windows(2)
            .map(|w| distance(w[0].position(), w[1].position()))
            .sum();
        assert!((steps_sum - r.path_length).abs() < 1e-9);
        assert_eq!(r, run_episode(&e, &cfg, &res).unwrap());

        let measured = SimConfig {
            latency_model: LatencyModel::Measured,
            ..cfg
        };
        let m = run_episode(&e, &measured, &res).unwrap();
        assert!(m.resolve_count >= 1);
        assert!(m.resolve_time > 0.0);
        assert!(m.travel_time > m.kinematic_time());
        assert_eq!(m.trajectory.len(), r.trajectory.len());
    }

    #[test]
    fn start_jitter_is_seeded() {
        let e = env_with(vec![], 0.5);
        let a = episode_start(&e, 1.0, 5).unwrap();
        assert_eq!(a, episode_start(&e, 1.0, 5).unwrap());
        assert_ne!(a, episode_start(&e, 1.0, 6).unwrap());
        assert!((a.px - 1.0).abs() <= 1.0 && (a.py - 1.0).abs() <= 1.0);
        assert_eq!(episode_start(&e, 0.0, 5).unwrap(), e.start());
    }

    #[test]
    fn random_environments() {
        let spec = RandomEnvSpec::default();
        let e = spec.generate(3).unwrap();
        assert_eq!(e.obstacles().len(), 10);
        for o in e.obstacles() {
            assert!(o.center.px >= 2.0 && o.center.px <= 43.0 && o.center.py >= 2.0 && o.center.py <= 43.0);
            assert!(distance(o.center, e.start()) >= 5.0 && distance(o.center, e.goal()) >= 5.0);
        }
        assert_eq!(e, spec.generate(3).unwrap());
        assert_ne!(e, spec.generate(4).unwrap());
        let crowded = RandomEnvSpec {
            n_obstacles: 500,
            max_attempts: 2000,
            ..spec
        };
        assert!(matches!(crowded.generate(0), Err(Error::SamplingExhausted { .. })));
    }

    #[test]
    fn identical_controllers_give_zero_reduction() {
        let spec = RandomEnvSpec {
            n_obstacles: 3,
            ..RandomEnvSpec::default()
        };
        let cfg = SimConfig::default();
        let s = run_monte_carlo(&spec, 2, 11, &cfg, &cfg, |_, _| {
            Ok(ControllerResources::neuro(init_params(1)))
        })
        .unwrap();
        assert_eq!(s.runs.len(), 2);
        assert_eq!(s.rows().len(), 4);
        assert_eq!(s.mean_travel_time_reduction(), 0.0);
        assert_eq!(s.mean_path_length_reduction(), 0.0);
        assert!(s.mean_baseline_resolve_time().is_none());
        assert!(run_monte_carlo(&spec, 0, 11, &cfg, &cfg, |_, _| Ok(ControllerResources::default())).is_err());
    }

    #[test]
    fn ablation_rows_follow_input_order() {
        let e = env_with(vec![], 0.5);
        let res = ControllerResources::neuro(MlpParameters::zeros());
        let cfg = SimConfig::default();
        let rows = run_ablation(&e, &[5.0], &cfg, &res).unwrap();
        assert_eq!(rows.len(), 1);
        let rows = run_ablation(&e, &[7.0, 3.0, 5.0], &cfg, &res).unwrap();
        assert_eq!(rows.iter().map(|r| r.sensor_radius_m).collect::<Vec<_>>(), vec![7.0, 3.0, 5.0]);
        assert!(run_ablation(&e, &[], &cfg, &res).is_err());
    }

    #[test]
    fn reduction_percent() {
        assert_eq!(reduction(100.0, 75.0), 25.0);
        assert_eq!(reduction(100.0, 100.0), 0.0);
        assert_eq!(reduction(0.0, 1.0), 0.0);
    }
}
