//! Finite-difference validation of the hand-written network gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Bounds, Position};
use crate::neuralnet::{
    evaluate_loss, forward, init_params, input_gradient, loss_param_gradients, InputScaling, LossBatch,
    LossSpec, LossWeights, MlpParameters, ResidualMode,
};

/// Relative-error threshold for parameter gradients.
pub const PARAM_TOLERANCE: f64 = 1e-4;
/// Relative-error threshold for input gradients.
pub const INPUT_TOLERANCE: f64 = 1e-6;
/// Central-difference step on parameters.
pub const PARAM_STEP: f64 = 1e-5;
/// Central-difference step on normalized inputs.
pub const INPUT_STEP: f64 = 1e-4;

/// Denominator floor, so entries that are zero on both sides compare equal.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub batch_size: usize,
    /// Parameter coordinates probed per suite; at least two per tensor.
    pub coords: usize,
    /// Perturb the analytic gradient before comparing (negative control).
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            batch_size: 8,
            coords: 20,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coords: usize,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub lines: Vec<GradCheckLine>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.lines.is_empty() && self.lines.iter().all(GradCheckLine::passed)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "{:<28} max_rel_err={:.3e} threshold={:.0e} coords={} {}",
                l.name,
                l.max_rel_error,
                l.threshold,
                l.coords,
                if l.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

struct RandomBatch {
    points: Vec<Position>,
    targets: Vec<f64>,
    goal_dirs: Vec<(f64, f64)>,
    penalties: Vec<f64>,
}

impl RandomBatch {
    fn new(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Self {
        let points = (0..n)
            .map(|_| Position::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side)))
            .collect();
        let targets = (0..n).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let goal_dirs = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            })
            .collect();
        let penalties = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Self {
            points,
            targets,
            goal_dirs,
            penalties,
        }
    }

    fn view(&self) -> LossBatch<'_> {
        LossBatch {
            points: &self.points,
            targets: &self.targets,
            goal_dirs: &self.goal_dirs,
            obstacle_penalty: &self.penalties,
        }
    }
}

/// Parameter indices to probe: two random entries from each tensor, then
/// uniformly random entries up to `count`.
fn probe_indices(params: &MlpParameters, rng: &mut ChaCha8Rng, count: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        for _ in 0..2 {
            idx.push(offset + rng.gen_range(0..t.len()));
        }
        offset += t.len();
    }
    while idx.len() < count {
        idx.push(rng.gen_range(0..offset));
    }
    idx
}

fn check_params(
    name: &str,
    params: &MlpParameters,
    scaling: &InputScaling,
    batch: &LossBatch,
    spec: &LossSpec,
    indices: &[usize],
    corrupt: bool,
) -> Result<GradCheckLine> {
    let (mut grads, _) = loss_param_gradients(params, scaling, batch, spec)?;
    if corrupt {
        for &i in indices {
            let g = grads.get(i);
            grads.set(i, g * 1.05 + 1e-3);
        }
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &i in indices {
        let orig = params.get(i);
        probe.set(i, orig + PARAM_STEP);
        let lp = evaluate_loss(&probe, scaling, batch, spec)?.total;
        probe.set(i, orig - PARAM_STEP);
        let lm = evaluate_loss(&probe, scaling, batch, spec)?.total;
        probe.set(i, orig);
        let fd = (lp - lm) / (2.0 * PARAM_STEP);
        worst = worst.max(relative_error(grads.get(i), fd));
    }
    Ok(GradCheckLine {
        name: name.to_string(),
        max_rel_error: worst,
        threshold: PARAM_TOLERANCE,
        coords: indices.len(),
    })
}

fn check_inputs(
    params: &MlpParameters,
    scaling: &InputScaling,
    points: &[Position],
    corrupt: bool,
) -> Result<GradCheckLine> {
    let (fx, fy) = scaling.factor();
    let mut worst: f64 = 0.0;
    for q in points {
        let (mut gx, gy) = input_gradient(params, scaling, *q)?;
        if corrupt {
            gx = gx * 1.05 + 1e-3;
        }
        let v = |x: f64, y: f64| forward(params, scaling, Position::new(x, y)).map(|r| r.1);
        let dx = INPUT_STEP / fx;
        let dy = INPUT_STEP / fy;
        let fdx = (v(q.px + dx, q.py)? - v(q.px - dx, q.py)?) / (2.0 * dx);
        let fdy = (v(q.px, q.py + dy)? - v(q.px, q.py - dy)?) / (2.0 * dy);
        worst = worst.max(relative_error(gx, fdx)).max(relative_error(gy, fdy));
    }
    Ok(GradCheckLine {
        name: "input_gradient".into(),
        max_rel_error: worst,
        threshold: INPUT_TOLERANCE,
        coords: points.len() * 2,
    })
}

/// Runs every finite-difference suite on a random network and batch.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let side = 45.0;
    let scaling = InputScaling::from_bounds(Bounds::square(side)?);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = init_params(opts.seed);
    // non-zero biases exercise the bias adjoints
    for t in params.tensors_mut().into_iter().skip(1).step_by(2) {
        t.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let batch = RandomBatch::new(&mut rng, opts.batch_size.max(1), side);
    let indices = probe_indices(&params, &mut rng, opts.coords);

    let mut report = GradCheckReport::default();
    report.lines.push(check_inputs(&params, &scaling, &batch.points, opts.corrupt)?);

    let only = |pde, value, obstacle, goal, residual_mode| LossSpec {
        weights: LossWeights {
            pde,
            value,
            obstacle,
            goal,
        },
        residual_mode,
    };
    let suites = [
        ("loss_pde", only(1.0, 0.0, 0.0, 0.0, ResidualMode::PredictedControl)),
        ("loss_pde_analytic", only(1.0, 0.0, 0.0, 0.0, ResidualMode::AnalyticHamiltonian)),
        ("loss_value", only(0.0, 1.0, 0.0, 0.0, ResidualMode::PredictedControl)),
        ("loss_obstacle", only(0.0, 0.0, 1.0, 0.0, ResidualMode::PredictedControl)),
        ("loss_goal", only(0.0, 0.0, 0.0, 1.0, ResidualMode::PredictedControl)),
        ("loss_total", LossSpec::default()),
    ];
    for (name, spec) in suites {
        report.lines.push(check_params(
            name,
            &params,
            &scaling,
            &batch.view(),
            &spec,
            &indices,
            opts.corrupt,
        )?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let r = run_gradcheck(&GradCheckOptions::default()).unwrap();
        print!("{r}");
        assert!(r.passed());
        assert_eq!(r.lines.len(), 7);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = run_gradcheck(&GradCheckOptions {
            corrupt: true,
            ..GradCheckOptions::default()
        })
        .unwrap();
        assert!(!r.passed());
        assert!(r.lines.iter().filter(|l| l.name != "loss_obstacle").all(|l| !l.passed()));
    }
}
