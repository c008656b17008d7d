//! Physics-informed training of the two-headed network against the
//! composite reachability field.
//!
//! Collocation points are drawn once per run (uniformly from the safe part
//! of the workspace, plus a band just outside each unsafe disk), labelled
//! with the grid oracle, and fed to minibatch Adam for a fixed number of
//! epochs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    goal_unit_vector, in_unsafe_region, nearest_obstacle, Control, Environment, Position,
};
use crate::gridhjr::{sample_value, ValueField};
use crate::neuralnet::{
    evaluate_loss, forward_batch, init_params, loss_param_gradients, AdamState, InputScaling, LossBatch,
    LossSpec, LossWeights, MlpParameters, ResidualMode,
};

pub use crate::neuralnet::LossBreakdown;

/// Rejections allowed per requested point before sampling gives up.
const REJECTION_BUDGET: usize = 1000;

// RNG streams derived from the run seed.
const STREAM_INTERIOR: u64 = 1;
const STREAM_BOUNDARY: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub weights: LossWeights,
    pub rng_seed: u64,
    pub residual_mode: ResidualMode,
    /// Interior collocation count `N_c`.
    pub n_interior: usize,
    /// Boundary-band collocation count `N_b`.
    pub n_boundary: usize,
    /// Width of the sampling band outside each unsafe disk, meters.
    pub boundary_band: f64,
    /// Draw a fresh collocation set every epoch.
    pub resample_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            learning_rate: 1e-3,
            minibatch_size: 1024,
            weights: LossWeights::default(),
            rng_seed: 0,
            residual_mode: ResidualMode::PredictedControl,
            n_interior: 8000,
            n_boundary: 5000,
            boundary_band: 1.0,
            resample_each_epoch: false,
        }
    }
}

impl TrainConfig {
    /// Reduced run used for quick experiments: `N_c = 800`, `N_b = 500`,
    /// `E = 500`.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 500,
            n_interior: 800,
            n_boundary: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be > 0".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be >= 1".into());
        }
        let w = &self.weights;
        if [w.pde, w.value, w.obstacle, w.goal].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and >= 0".into());
        }
        if self.n_interior + self.n_boundary == 0 {
            return bad("collocation set is empty".into());
        }
        if !(self.boundary_band.is_finite() && self.boundary_band > 0.0) {
            return bad(format!("boundary_band {} must be > 0", self.boundary_band));
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            weights: self.weights,
            residual_mode: self.residual_mode,
        }
    }
}

/// Training points with their oracle labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub interior_points: Vec<Position>,
    pub boundary_points: Vec<Position>,
    /// `V_true` for interior points followed by boundary points.
    pub oracle_values: Vec<f64>,
}

impl CollocationSet {
    pub fn points(&self) -> Vec<Position> {
        let mut all = self.interior_points.clone();
        all.extend_from_slice(&self.boundary_points);
        all
    }

    pub fn len(&self) -> usize {
        self.interior_points.len() + self.boundary_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform rejection sampling of the safe part of the workspace.
pub fn sample_interior(env: &Environment, count: usize, rng_seed: u64) -> Result<Vec<Position>> {
    sample_interior_with(env, count, &mut seeded(rng_seed, STREAM_INTERIOR))
}

fn sample_interior_with(env: &Environment, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Position>> {
    let b = env.bounds();
    let mut out = Vec::with_capacity(count);
    let budget = REJECTION_BUDGET * count;
    let mut rejected = 0;
    while out.len() < count {
        let p = Position::new(rng.gen_range(b.x_min..b.x_max), rng.gen_range(b.y_min..b.y_max));
        if in_unsafe_region(p, env) {
            rejected += 1;
            if rejected >= budget {
                return Err(Error::SamplingExhausted {
                    attempts: rejected + out.len(),
                    accepted: out.len(),
                    requested: count,
                });
            }
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Points in the band `R_d <= r <= R_d + band` around uniformly chosen
/// obstacles. Points inside another unsafe disk or outside the workspace
/// are redrawn.
pub fn sample_boundary(env: &Environment, count: usize, band: f64, rng_seed: u64) -> Result<Vec<Position>> {
    sample_boundary_with(env, count, band, &mut seeded(rng_seed, STREAM_BOUNDARY))
}

fn sample_boundary_with(
    env: &Environment,
    count: usize,
    band: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Position>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let obstacles = env.obstacles();
    if obstacles.is_empty() {
        return Err(Error::InvalidArgument(
            "boundary sampling needs at least one obstacle".into(),
        ));
    }
    let b = env.bounds();
    let mut out = Vec::with_capacity(count);
    let budget = REJECTION_BUDGET * count;
    let mut rejected = 0;
    while out.len() < count {
        let o = &obstacles[rng.gen_range(0..obstacles.len())];
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let rd = env.unsafe_radius(o);
        let r = rng.gen_range(rd..=rd + band);
        let p = Position::new(o.center.px + r * angle.cos(), o.center.py + r * angle.sin());
        if !b.contains(p) || in_unsafe_region(p, env) {
            rejected += 1;
            if rejected >= budget {
                return Err(Error::SamplingExhausted {
                    attempts: rejected + out.len(),
                    accepted: out.len(),
                    requested: count,
                });
            }
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// `V_true` per point by bilinear interpolation of the composite field.
pub fn oracle_targets(points: &[Position], composite: &ValueField) -> Result<Vec<f64>> {
    points.iter().map(|p| sample_value(composite, *p)).collect()
}

/// Draws interior and boundary points and labels them.
pub fn build_collocation(
    env: &Environment,
    composite: &ValueField,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<CollocationSet> {
    // epoch 0 reproduces sample_interior / sample_boundary with the run seed
    let seed = cfg.rng_seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let interior_points = sample_interior(env, cfg.n_interior, seed)?;
    let boundary_points = if env.obstacles().is_empty() {
        Vec::new()
    } else {
        sample_boundary(env, cfg.n_boundary, cfg.boundary_band, seed)?
    };
    let mut oracle_values = oracle_targets(&interior_points, composite)?;
    oracle_values.extend(oracle_targets(&boundary_points, composite)?);
    Ok(CollocationSet {
        interior_points,
        boundary_points,
        oracle_values,
    })
}

/// `max(0, R_d - d)²` with `d` the distance to the nearest obstacle center.
pub fn obstacle_penalty(p: Position, env: &Environment) -> f64 {
    match nearest_obstacle(p, env) {
        Some((o, d)) => {
            let v = (env.unsafe_radius(&o) - d).max(0.0);
            v * v
        }
        None => 0.0,
    }
}

/// Mean squared HJB residual given value gradients and controls.
pub fn pde_residual_loss(grads: &[(f64, f64)], controls: &[Control], mode: ResidualMode) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if grads.len() != controls.len() {
        return Err(Error::ShapeMismatch("gradients and controls differ in length".into()));
    }
    let sum: f64 = grads
        .iter()
        .zip(controls)
        .map(|(&(gx, gy), u)| {
            let r = match mode {
                ResidualMode::PredictedControl => gx * u.ux + gy * u.uy,
                ResidualMode::AnalyticHamiltonian => -(gx.abs() + gy.abs()),
            };
            r * r
        })
        .sum();
    Ok(sum / grads.len() as f64)
}

/// `-(1/N) Σ ⟨u, r_goal⟩`.
pub fn goal_alignment_loss(controls: &[Control], goal_dirs: &[(f64, f64)]) -> Result<f64> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if controls.len() != goal_dirs.len() {
        return Err(Error::ShapeMismatch("controls and directions differ in length".into()));
    }
    let sum: f64 = controls
        .iter()
        .zip(goal_dirs)
        .map(|(u, (rx, ry))| u.ux * rx + u.uy * ry)
        .sum();
    Ok(-sum / controls.len() as f64)
}

/// Controls, values and value gradients of the network at a batch.
type NetworkOutputs = (Vec<Control>, Vec<f64>, Vec<(f64, f64)>);
/// Points, value targets, goal directions and obstacle penalties.
type Minibatch = (Vec<Position>, Vec<f64>, Vec<(f64, f64)>, Vec<f64>);

fn controls_and_grads(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
    with_grads: bool,
) -> Result<NetworkOutputs> {
    let tr = forward_batch(params, scaling, points, with_grads)?;
    let controls = tr
        .control
        .rows()
        .into_iter()
        .map(|r| Control::new(r[0], r[1]))
        .collect();
    let grads = match &tr.value_grad_z {
        Some(g) => {
            let (sx, sy) = scaling.factor();
            g.rows().into_iter().map(|r| (r[0] * sx, r[1] * sy)).collect()
        }
        None => Vec::new(),
    };
    Ok((controls, tr.value.to_vec(), grads))
}

pub fn loss_pde(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
    mode: ResidualMode,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (u, _, g) = controls_and_grads(params, scaling, points, true)?;
    pde_residual_loss(&g, &u, mode)
}

pub fn loss_value(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
    targets: &[f64],
) -> Result<f64> {
    if points.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} targets",
            points.len(),
            targets.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (_, v, _) = controls_and_grads(params, scaling, points, false)?;
    Ok(v.iter().zip(targets).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64)
}

/// Independent of the parameters; kept in the same signature family.
pub fn loss_obstacle(_params: &MlpParameters, points: &[Position], env: &Environment) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(points.iter().map(|p| obstacle_penalty(*p, env)).sum::<f64>() / points.len() as f64)
}

pub fn loss_goal(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
    env: &Environment,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let dirs = points
        .iter()
        .map(|p| goal_unit_vector(*p, env))
        .collect::<Result<Vec<_>>>()?;
    let (u, _, _) = controls_and_grads(params, scaling, points, false)?;
    goal_alignment_loss(&u, &dirs)
}

/// Collocation set with everything the loss needs precomputed.
struct PreparedSet {
    points: Vec<Position>,
    targets: Vec<f64>,
    goal_dirs: Vec<(f64, f64)>,
    penalties: Vec<f64>,
}

impl PreparedSet {
    fn new(env: &Environment, set: &CollocationSet) -> Result<Self> {
        let points = set.points();
        let goal_dirs = points
            .iter()
            .map(|p| goal_unit_vector(*p, env))
            .collect::<Result<Vec<_>>>()?;
        let penalties = points.iter().map(|p| obstacle_penalty(*p, env)).collect();
        Ok(Self {
            points,
            targets: set.oracle_values.clone(),
            goal_dirs,
            penalties,
        })
    }

    fn gather(&self, idx: &[usize]) -> Minibatch {
        (
            idx.iter().map(|&i| self.points[i]).collect(),
            idx.iter().map(|&i| self.targets[i]).collect(),
            idx.iter().map(|&i| self.goal_dirs[i]).collect(),
            idx.iter().map(|&i| self.penalties[i]).collect(),
        )
    }

    fn len(&self) -> usize {
        self.points.len()
    }
}

/// Accumulates per-minibatch breakdowns into a point-weighted mean.
#[derive(Default)]
struct BreakdownSum {
    acc: LossBreakdown,
    count: usize,
}

impl BreakdownSum {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.acc.pde += b.pde * w;
        self.acc.value += b.value * w;
        self.acc.obstacle += b.obstacle * w;
        self.acc.goal += b.goal * w;
        self.acc.total += b.total * w;
        self.count += n;
    }

    fn mean(&self) -> LossBreakdown {
        let w = 1.0 / self.count.max(1) as f64;
        LossBreakdown {
            pde: self.acc.pde * w,
            value: self.acc.value * w,
            obstacle: self.acc.obstacle * w,
            goal: self.acc.goal * w,
            total: self.acc.total * w,
        }
    }
}

fn evaluate_set(
    params: &MlpParameters,
    scaling: &InputScaling,
    set: &PreparedSet,
    spec: &LossSpec,
    chunk: usize,
) -> Result<LossBreakdown> {
    let mut sum = BreakdownSum::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (p, t, d, o) = set.gather(c);
        let batch = LossBatch {
            points: &p,
            targets: &t,
            goal_dirs: &d,
            obstacle_penalty: &o,
        };
        sum.add(&evaluate_loss(params, scaling, &batch, spec)?, c.len());
    }
    Ok(sum.mean())
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParameters,
    pub adam: AdamState,
    /// One point-weighted mean of the minibatch losses per epoch.
    pub history: Vec<LossBreakdown>,
    /// Full-set loss at the initial parameters.
    pub initial: LossBreakdown,
    /// Full-set loss at the final parameters.
    pub final_loss: LossBreakdown,
    pub collocation: CollocationSet,
}

/// Runs the full training procedure; deterministic per `cfg.rng_seed`.
pub fn train(env: &Environment, composite: &ValueField, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(env, composite, cfg, |_, _| {})
}

pub fn train_with_progress(
    env: &Environment,
    composite: &ValueField,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !composite.grid.covers(env.bounds()) {
        return Err(Error::GridMismatch("composite field does not cover the workspace".into()));
    }
    let scaling = InputScaling::from_bounds(env.bounds());
    let spec = cfg.loss_spec();
    let mut params = init_params(cfg.rng_seed);
    let mut adam = AdamState::default();
    let mut collocation = build_collocation(env, composite, cfg, 0)?;
    let mut set = PreparedSet::new(env, &collocation)?;
    let initial = evaluate_set(&params, &scaling, &set, &spec, cfg.minibatch_size)?;
    let mut shuffle_rng = seeded(cfg.rng_seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.resample_each_epoch && epoch > 0 {
            collocation = build_collocation(env, composite, cfg, epoch as u64)?;
            set = PreparedSet::new(env, &collocation)?;
            order = (0..set.len()).collect();
        }
        order.shuffle(&mut shuffle_rng);
        let mut sum = BreakdownSum::default();
        for chunk in order.chunks(cfg.minibatch_size) {
            let (p, t, d, o) = set.gather(chunk);
            let batch = LossBatch {
                points: &p,
                targets: &t,
                goal_dirs: &d,
                obstacle_penalty: &o,
            };
            let (grads, loss) =
                loss_param_gradients(&params, &scaling, &batch, &spec).map_err(|e| Error::Diverged {
                    epoch: epoch + 1,
                    reason: e.to_string(),
                })?;
            adam.apply(&mut params, &grads, cfg.learning_rate)?;
            sum.add(&loss, chunk.len());
        }
        let epoch_loss = sum.mean();
        if !epoch_loss.total.is_finite() || !params.all_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                reason: "non-finite loss".into(),
            });
        }
        progress(epoch + 1, &epoch_loss);
        history.push(epoch_loss);
    }
    let final_loss = evaluate_set(&params, &scaling, &set, &spec, cfg.minibatch_size)?;
    Ok(TrainOutcome {
        params,
        adam,
        history,
        initial,
        final_loss,
        collocation,
    })
}

/// Mean total loss over the first and last `window` epochs.
pub fn loss_trend(history: &[LossBreakdown], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}
