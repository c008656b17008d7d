//! Grid-based Hamilton-Jacobi reachability for the holonomic model `ẋ = u`,
//! `u ∈ [-1, 1]²`.
//!
//! Value functions live on a uniform node grid and are advanced with an
//! explicit Lax-Friedrichs scheme. Forward and backward fields are
//! initialized from distance functions, marched to a horizon, and combined
//! into the composite field `max(V_F, -V_B)` that serves as the training
//! target for the network. The same machinery produces a minimum arrival-time
//! field to the goal that drives the classical bang-bang controller.
//!
//! Marching convention: [`solve`] integrates in reversed time, so the
//! zero-sublevel set of a field only ever grows with the horizon. For the box
//! control set the exact result is a Chebyshev (square) dilation of the
//! initial sublevel set.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use crate::error::{Error, Result};
use crate::geometry::{distance, Bounds, Control, Environment, Position};

/// Dissipation coefficients used by default; the Hamiltonian is
/// 1-Lipschitz in each momentum component.
pub const DEFAULT_DISSIPATION: (f64, f64) = (1.0, 1.0);
/// Fraction of the CFL limit used as the time step.
pub const DEFAULT_CFL_FACTOR: f64 = 0.4;
/// Gradient components below this magnitude command zero velocity.
pub const GRADIENT_DEAD_BAND: f64 = 1e-9;

const BOUNDS_TOL: f64 = 1e-9;

/// Uniform node grid. Node `(i, j)` sits at `origin + (i·h, j·h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub origin: Position,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(origin: Position, h: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidArgument(format!("grid spacing {h} must be > 0")));
        }
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 3x3 nodes, got {nx}x{ny}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidArgument("non-finite grid origin".into()));
        }
        Ok(Self { origin, h, nx, ny })
    }

    /// Smallest grid with spacing `h` anchored at the lower-left corner of
    /// `bounds` that covers them.
    pub fn covering(bounds: Bounds, h: f64) -> Result<Self> {
        let cells = |len: f64| ((len / h) - 1e-9).ceil().max(2.0) as usize;
        Self::new(
            Position::new(bounds.x_min, bounds.y_min),
            h,
            cells(bounds.width()) + 1,
            cells(bounds.height()) + 1,
        )
    }

    /// Grid with `n × n` nodes spanning a square workspace exactly.
    pub fn square_nodes(bounds: Bounds, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument("need at least 3 nodes".into()));
        }
        let h = bounds.width() / (n - 1) as f64;
        let ny = ((bounds.height() / h) - 1e-9).ceil() as usize + 1;
        Self::new(Position::new(bounds.x_min, bounds.y_min), h, n, ny.max(3))
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, i: usize, j: usize) -> Position {
        Position::new(
            self.origin.px + i as f64 * self.h,
            self.origin.py + j as f64 * self.h,
        )
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Indices of the node closest to `p`, clamped to the grid.
    pub fn nearest_node(&self, p: Position) -> (usize, usize) {
        let k = |x: f64, o: f64, n: usize| (((x - o) / self.h).round().max(0.0) as usize).min(n - 1);
        (k(p.px, self.origin.px, self.nx), k(p.py, self.origin.py, self.ny))
    }

    pub fn x_max(&self) -> f64 {
        self.origin.px + (self.nx - 1) as f64 * self.h
    }

    pub fn y_max(&self) -> f64 {
        self.origin.py + (self.ny - 1) as f64 * self.h
    }

    pub fn contains(&self, p: Position) -> bool {
        p.px >= self.origin.px - BOUNDS_TOL
            && p.px <= self.x_max() + BOUNDS_TOL
            && p.py >= self.origin.py - BOUNDS_TOL
            && p.py <= self.y_max() + BOUNDS_TOL
    }

    pub fn covers(&self, b: Bounds) -> bool {
        self.contains(Position::new(b.x_min, b.y_min)) && self.contains(Position::new(b.x_max, b.y_max))
    }

    /// Largest stable time step for the given dissipation coefficients.
    pub fn cfl_limit(&self, dissipation: (f64, f64)) -> f64 {
        self.h / (dissipation.0 + dissipation.1)
    }

    fn fill(&self, f: impl Fn(Position) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push(f(self.node(i, j)));
            }
        }
        out
    }
}

/// Scalar field sampled at the nodes of a [`Grid2D`], stored row-major
/// (`values[j * nx + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: Grid2D,
    pub values: Vec<f64>,
    pub time_label: f64,
}

impl ValueField {
    pub fn new(grid: Grid2D, values: Vec<f64>, time_label: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.nx,
                grid.ny
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at index {k}")));
        }
        Ok(Self {
            grid,
            values,
            time_label,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// Number of nodes with value `<= 0`.
    pub fn zero_sublevel_count(&self) -> usize {
        self.values.iter().filter(|&&v| v <= 0.0).count()
    }

    /// Write the plain-text matrix format: a header line
    /// `nx ny origin_x origin_y h time_label`, then one line per grid row
    /// (constant `j`), values separated by single spaces.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::with_capacity(self.values.len() * 20);
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            g.nx, g.ny, g.origin.px, g.origin.py, g.h, self.time_label
        );
        for row in self.values.chunks(g.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn read_text<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty field file".into()))??;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 {
            return Err(Error::Parse(format!("line 1: expected 6 header fields, got {}", h.len())));
        }
        let perr = |what: &str| Error::Parse(format!("line 1: bad {what}"));
        let nx: usize = h[0].parse().map_err(|_| perr("nx"))?;
        let ny: usize = h[1].parse().map_err(|_| perr("ny"))?;
        let ox: f64 = h[2].parse().map_err(|_| perr("origin_x"))?;
        let oy: f64 = h[3].parse().map_err(|_| perr("origin_y"))?;
        let spacing: f64 = h[4].parse().map_err(|_| perr("h"))?;
        let time_label: f64 = h[5].parse().map_err(|_| perr("time_label"))?;
        let grid = Grid2D::new(Position::new(ox, oy), spacing, nx, ny)?;
        let mut values = Vec::with_capacity(grid.len());
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| {
                    Error::Parse(format!("line {}: bad value {tok:?}", row + 2))
                })?);
            }
            if values.len() - before != nx {
                return Err(Error::Parse(format!(
                    "line {}: expected {nx} values, got {}",
                    row + 2,
                    values.len() - before
                )));
            }
        }
        Self::new(grid, values, time_label)
    }
}

/// Distance from every node to the start position (initial set `{start}`).
pub fn init_forward(env: &Environment, grid: &Grid2D) -> ValueField {
    let s = env.start();
    ValueField {
        grid: *grid,
        values: grid.fill(|p| distance(p, s)),
        time_label: 0.0,
    }
}

/// Signed distance to the union of unsafe disks: negative inside.
pub fn init_backward(env: &Environment, grid: &Grid2D) -> ValueField {
    ValueField {
        grid: *grid,
        values: grid.fill(|p| signed_distance_to_unsafe(p, env)),
        time_label: 0.0,
    }
}

/// `min_o (|p - c_o| - (R_o + δ))`; `+∞` without obstacles.
pub fn signed_distance_to_unsafe(p: Position, env: &Environment) -> f64 {
    env.obstacles()
        .iter()
        .map(|o| distance(p, o.center) - env.unsafe_radius(o))
        .fold(f64::INFINITY, f64::min)
}

/// `min_{u ∈ [-1,1]²} p·u = -(|p_x| + |p_y|)`.
pub fn hamiltonian(px_grad: f64, py_grad: f64) -> f64 {
    -(px_grad.abs() + py_grad.abs())
}

/// Hamiltonian of the time-reversed problem used by [`solve`].
fn reversed_hamiltonian(px_grad: f64, py_grad: f64) -> f64 {
    -hamiltonian(px_grad, py_grad)
}

/// One explicit step of `V_t + H(∇V) = 0` with the Lax-Friedrichs
/// numerical Hamiltonian and [`hamiltonian`].
pub fn lax_friedrichs_step(v: &ValueField, dt: f64, dissipation: (f64, f64)) -> Result<ValueField> {
    check_step(v, dt, dissipation)?;
    let mut out = v.clone();
    lf_step_into(v, &mut out.values, dt, dissipation, hamiltonian);
    out.time_label = v.time_label + dt;
    Ok(out)
}

fn check_step(v: &ValueField, dt: f64, dissipation: (f64, f64)) -> Result<()> {
    if !(dissipation.0 >= 1.0 && dissipation.1 >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dissipation {dissipation:?} must be >= 1 per axis"
        )));
    }
    let limit = v.grid.cfl_limit(dissipation);
    if dt.is_nan() || dt < 0.0 || dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit });
    }
    Ok(())
}

/// Writes the stepped field into `out`. Boundary nodes use the available
/// one-sided difference for both sides, which switches the dissipation off
/// there.
fn lf_step_into(
    v: &ValueField,
    out: &mut [f64],
    dt: f64,
    (ax, ay): (f64, f64),
    ham: impl Fn(f64, f64) -> f64,
) {
    let g = &v.grid;
    let (nx, ny) = (g.nx, g.ny);
    let inv_h = 1.0 / g.h;
    let vals = &v.values;
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            let c = vals[k];
            let mut dxp = if i + 1 < nx { (vals[k + 1] - c) * inv_h } else { f64::NAN };
            let mut dxm = if i > 0 { (c - vals[k - 1]) * inv_h } else { f64::NAN };
            if i + 1 == nx {
                dxp = dxm;
            }
            if i == 0 {
                dxm = dxp;
            }
            let mut dyp = if j + 1 < ny { (vals[k + nx] - c) * inv_h } else { f64::NAN };
            let mut dym = if j > 0 { (c - vals[k - nx]) * inv_h } else { f64::NAN };
            if j + 1 == ny {
                dyp = dym;
            }
            if j == 0 {
                dym = dyp;
            }
            let num_h = ham(0.5 * (dxp + dxm), 0.5 * (dyp + dym))
                - ax * 0.5 * (dxp - dxm)
                - ay * 0.5 * (dyp - dym);
            out[k] = c - dt * num_h;
        }
    }
}

/// Time step used for a grid: `cfl_factor · h / (αx + αy)`.
pub fn default_dt(grid: &Grid2D, cfl_factor: f64) -> f64 {
    cfl_factor * grid.cfl_limit(DEFAULT_DISSIPATION)
}

/// March `v0` over `horizon` seconds in `ceil(horizon / dt)` equal steps.
///
/// Integrates in reversed time so that the zero-sublevel set grows
/// monotonically with the horizon. `time_label` of the result is `horizon`.
pub fn solve(v0: &ValueField, horizon: f64, dt: f64) -> Result<ValueField> {
    solve_with(v0, horizon, dt, DEFAULT_DISSIPATION, |_, _| {})
}

fn solve_with(
    v0: &ValueField,
    horizon: f64,
    dt: f64,
    dissipation: (f64, f64),
    mut after_step: impl FnMut(&mut [f64], f64),
) -> Result<ValueField> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must be >= 0")));
    }
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt {dt} must be > 0")));
    }
    check_step(v0, dt, dissipation)?;
    let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let mut cur = v0.clone();
    cur.time_label = horizon;
    if steps == 0 {
        return Ok(cur);
    }
    let step_dt = horizon / steps as f64;
    let mut next = cur.values.clone();
    for n in 0..steps {
        lf_step_into(&cur, &mut next, step_dt, dissipation, reversed_hamiltonian);
        std::mem::swap(&mut cur.values, &mut next);
        after_step(&mut cur.values, (n + 1) as f64 * step_dt);
    }
    if let Some(k) = cur.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("solver produced a non-finite value at node {k}")));
    }
    Ok(cur)
}

/// Nodewise `max(vf, -vb)`.
pub fn composite_value(vf: &ValueField, vb: &ValueField) -> Result<ValueField> {
    if vf.grid != vb.grid {
        return Err(Error::GridMismatch("forward and backward fields differ in grid".into()));
    }
    let values = vf
        .values
        .iter()
        .zip(&vb.values)
        .map(|(&f, &b)| f.max(-b))
        .collect();
    Ok(ValueField {
        grid: vf.grid,
        values,
        time_label: vf.time_label.max(vb.time_label),
    })
}

/// Bilinear interpolation; exact at nodes.
pub fn sample_value(v: &ValueField, p: Position) -> Result<f64> {
    let g = &v.grid;
    if !p.is_finite() || !g.contains(p) {
        return Err(Error::OutOfBounds { px: p.px, py: p.py });
    }
    let fx = ((p.px - g.origin.px) / g.h).clamp(0.0, (g.nx - 1) as f64);
    let fy = ((p.py - g.origin.py) / g.h).clamp(0.0, (g.ny - 1) as f64);
    let i = (fx.floor() as usize).min(g.nx - 2);
    let j = (fy.floor() as usize).min(g.ny - 2);
    let tx = fx - i as f64;
    let ty = fy - j as f64;
    let v00 = v.at(i, j);
    let v10 = v.at(i + 1, j);
    let v01 = v.at(i, j + 1);
    let v11 = v.at(i + 1, j + 1);
    Ok((1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11))
}

/// Central-difference gradient of the interpolated field at `p`; the
/// stencil is shortened at the grid edges.
pub fn sample_gradient(v: &ValueField, p: Position) -> Result<(f64, f64)> {
    let g = &v.grid;
    if !p.is_finite() || !g.contains(p) {
        return Err(Error::OutOfBounds { px: p.px, py: p.py });
    }
    let x_lo = (p.px - g.h).max(g.origin.px);
    let x_hi = (p.px + g.h).min(g.x_max());
    let y_lo = (p.py - g.h).max(g.origin.py);
    let y_hi = (p.py + g.h).min(g.y_max());
    let gx = (sample_value(v, Position::new(x_hi, p.py))? - sample_value(v, Position::new(x_lo, p.py))?)
        / (x_hi - x_lo);
    let gy = (sample_value(v, Position::new(p.px, y_hi))? - sample_value(v, Position::new(p.px, y_lo))?)
        / (y_hi - y_lo);
    Ok((gx, gy))
}

/// Box minimizer of `∇V · u`: `u_i = -sign(∂V/∂x_i)` with a dead band.
pub fn bang_bang(gx: f64, gy: f64) -> Control {
    let pick = |g: f64| {
        if g.abs() < GRADIENT_DEAD_BAND {
            0.0
        } else {
            -g.signum()
        }
    };
    Control::new(pick(gx), pick(gy))
}

/// Bang-bang descent control on `v` at `p`.
pub fn classical_control(v: &ValueField, p: Position) -> Result<Control> {
    let (gx, gy) = sample_gradient(v, p)?;
    Ok(bang_bang(gx, gy))
}

/// Bang-bang control with a one-step lookahead: among the nonzero controls
/// in `{-1, 0, 1}²`, the one whose Euler step of length `dt` lands on the
/// lowest interpolated value. The gradient's bang-bang control is tried
/// first and only beaten by a strictly lower value.
pub fn descent_control(v: &ValueField, p: Position, dt: f64) -> Result<Control> {
    let g = &v.grid;
    let land = |u: Control| {
        let q = Position::new(
            (p.px + u.ux * dt).clamp(g.origin.px, g.x_max()),
            (p.py + u.uy * dt).clamp(g.origin.py, g.y_max()),
        );
        sample_value(v, q)
    };
    let mut best = classical_control(v, p)?;
    let mut best_v = land(best)?;
    for ux in [-1.0, 0.0, 1.0] {
        for uy in [-1.0, 0.0, 1.0] {
            let u = Control::new(ux, uy);
            if u == Control::ZERO {
                continue;
            }
            let val = land(u)?;
            if val < best_v {
                best = u;
                best_v = val;
            }
        }
    }
    Ok(best)
}

/// Grid settings shared by the solver entry points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub h: f64,
    pub forward_horizon: f64,
    pub backward_horizon: f64,
    pub reach_horizon: f64,
    pub cfl_factor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            h: 0.25,
            forward_horizon: 90.0,
            backward_horizon: 2.0,
            reach_horizon: 90.0,
            cfl_factor: DEFAULT_CFL_FACTOR,
        }
    }
}

/// Solved forward, backward and composite fields for one environment.
#[derive(Debug, Clone)]
pub struct ReachabilityFields {
    pub forward: ValueField,
    pub backward: ValueField,
    pub composite: ValueField,
}

pub fn solve_fields(env: &Environment, settings: &SolverSettings) -> Result<ReachabilityFields> {
    let grid = Grid2D::covering(env.bounds(), settings.h)?;
    let dt = default_dt(&grid, settings.cfl_factor);
    let forward = solve(&init_forward(env, &grid), settings.forward_horizon, dt)?;
    let backward = if env.obstacles().is_empty() {
        // No target set: the signed distance is +inf; use a large finite
        // constant so the composite reduces to the forward field.
        let far = grid.h * (grid.nx + grid.ny) as f64 * 10.0;
        ValueField::new(grid, vec![far; grid.len()], settings.backward_horizon)?
    } else {
        solve(&init_backward(env, &grid), settings.backward_horizon, dt)?
    };
    let composite = composite_value(&forward, &backward)?;
    Ok(ReachabilityFields {
        forward,
        backward,
        composite,
    })
}

/// Minimum arrival time at the goal disk under the box control set, with
/// the unsafe disks as an avoid set.
///
/// The goal's signed-distance field is marched like [`solve`], clipped from
/// below by the obstacles' negated signed distance after every step. A
/// node's arrival time is the interpolated time its value first reaches
/// zero; reached nodes are then held at `arrival - t`. Nodes never reached
/// keep `horizon`. When no node lies inside the goal disk, the node
/// nearest the goal is seeded with arrival time zero.
pub fn reach_time_field(env: &Environment, grid: &Grid2D, horizon: f64, dt: f64) -> Result<ValueField> {
    let goal = env.goal();
    let r_goal = env.goal_threshold();
    let avoid: Vec<f64> = grid.fill(|p| -signed_distance_to_unsafe(p, env));
    let mut phi0 = grid.fill(|p| distance(p, goal) - r_goal);
    for (v, a) in phi0.iter_mut().zip(&avoid) {
        *v = v.max(*a);
    }
    if phi0.iter().all(|&v| v > 0.0) {
        let (i, j) = grid.nearest_node(goal);
        phi0[grid.index(i, j)] = 0.0;
    }
    // Nodes inside the goal disk arrive "before" t = 0.
    let mut arrival: Vec<f64> = phi0
        .iter()
        .map(|&v| if v <= 0.0 { v } else { f64::INFINITY })
        .collect();
    let mut prev = phi0.clone();
    let v0 = ValueField::new(*grid, phi0, 0.0)?;
    let steps = (horizon / dt - 1e-9).ceil().max(1.0);
    let step_dt = horizon / steps;
    solve_with(&v0, horizon, dt, DEFAULT_DISSIPATION, |vals, t| {
        for k in 0..vals.len() {
            vals[k] = vals[k].max(avoid[k]);
            if arrival[k].is_finite() {
                vals[k] = arrival[k] - t;
            } else if vals[k] <= 0.0 {
                let frac = prev[k] / (prev[k] - vals[k]);
                arrival[k] = t - step_dt + frac * step_dt;
                vals[k] = arrival[k] - t;
            }
        }
        prev.copy_from_slice(vals);
    })?;
    let values = arrival
        .into_iter()
        .map(|a| if a.is_finite() { a.clamp(0.0, horizon) } else { horizon })
        .collect();
    ValueField::new(*grid, values, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Obstacle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env_one(center: Position) -> Environment {
        Environment::new(
            Bounds::square(45.0).unwrap(),
            Position::new(1.0, 1.0),
            Position::new(40.0, 40.0),
            vec![Obstacle::new(center, 2.0)],
            1.0,
            0.5,
        )
        .unwrap()
    }

    fn small_grid() -> Grid2D {
        Grid2D::new(Position::new(0.0, 0.0), 1.0, 46, 46).unwrap()
    }

    #[test]
    fn forward_init_is_distance_to_start() {
        let env = env_one(Position::new(20.0, 20.0));
        let g = small_grid();
        let vf = init_forward(&env, &g);
        assert_eq!(vf.at(1, 1), 0.0);
        assert_eq!(vf.at(4, 5), 5.0);
        let min = vf.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);

        // start between nodes: minimum equals distance to the nearest node
        let env2 = env.with_start(Position::new(1.3, 1.4)).unwrap();
        let vf2 = init_forward(&env2, &g);
        let min = vf2.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((min - 0.3f64.hypot(0.4)).abs() < 1e-12);
    }

    #[test]
    fn backward_init_is_signed_distance() {
        let env = env_one(Position::new(20.0, 20.0));
        let vb = init_backward(&env, &small_grid());
        assert_eq!(vb.at(20, 20), -3.0);
        assert_eq!(vb.at(23, 20), 0.0);
        assert_eq!(vb.at(27, 20), 4.0);
    }

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(hamiltonian(0.0, 0.0), 0.0);
        assert_eq!(hamiltonian(1.0, 0.0), -1.0);
        assert_eq!(hamiltonian(3.0, -4.0), -7.0);
    }

    fn brute_force_min(px: f64, py: f64) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..=200 {
            for b in 0..=200 {
                let ux = -1.0 + a as f64 * 0.01;
                let uy = -1.0 + b as f64 * 0.01;
                best = best.min(px * ux + py * uy);
            }
        }
        best
    }

    #[test]
    fn hamiltonian_matches_brute_force() {
        assert!((hamiltonian(3.0, -4.0) - brute_force_min(3.0, -4.0)).abs() <= 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let px = rng.gen_range(-5.0..5.0);
            let py = rng.gen_range(-5.0..5.0);
            assert!((hamiltonian(px, py) - brute_force_min(px, py)).abs() <= 0.02);
        }
    }

    #[test]
    fn step_leaves_constant_field() {
        let g = small_grid();
        let v = ValueField::new(g, vec![3.5; g.len()], 0.0).unwrap();
        let s = lax_friedrichs_step(&v, 0.4 * g.h, (1.0, 1.0)).unwrap();
        assert_eq!(s.values, v.values);
        let s0 = lax_friedrichs_step(&init_forward(&env_one(Position::new(20.0, 20.0)), &g), 0.0, (1.0, 1.0))
            .unwrap();
        assert_eq!(s0.values, init_forward(&env_one(Position::new(20.0, 20.0)), &g).values);
    }

    #[test]
    fn step_on_linear_ramp() {
        let g = Grid2D::new(Position::new(0.0, 0.0), 0.5, 11, 11).unwrap();
        let v = ValueField::new(g, g.fill(|p| p.px), 0.0).unwrap();
        let dt = 0.4 * g.h;
        let s = lax_friedrichs_step(&v, dt, (1.0, 1.0)).unwrap();
        for j in 1..10 {
            for i in 1..10 {
                assert!((s.at(i, j) - v.at(i, j) - 0.4 * g.h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_rejects_cfl_violation() {
        let g = small_grid();
        let v = ValueField::new(g, vec![0.0; g.len()], 0.0).unwrap();
        assert!(matches!(
            lax_friedrichs_step(&v, 0.6 * g.h, (1.0, 1.0)),
            Err(Error::Cfl { .. })
        ));
        assert!(matches!(
            lax_friedrichs_step(&v, 0.1, (0.5, 1.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn solve_zero_horizon_is_identity() {
        let env = env_one(Position::new(20.0, 20.0));
        let v0 = init_backward(&env, &small_grid());
        let s = solve(&v0, 0.0, 0.2).unwrap();
        assert_eq!(s.values, v0.values);
        assert_eq!(s.time_label, 0.0);
    }

    #[test]
    fn solve_sublevel_set_grows() {
        let env = env_one(Position::new(22.5, 22.5));
        let g = Grid2D::square_nodes(env.bounds(), 101).unwrap();
        let v0 = init_backward(&env, &g);
        let dt = default_dt(&g, DEFAULT_CFL_FACTOR);
        let a = solve(&v0, 1.0, dt).unwrap();
        let b = solve(&v0, 2.5, dt).unwrap();
        assert!(b.zero_sublevel_count() >= a.zero_sublevel_count());
        assert!(a.zero_sublevel_count() > v0.zero_sublevel_count());
        for k in 0..g.len() {
            if a.values[k] <= 0.0 {
                assert!(b.values[k] <= 0.0);
            }
        }
    }

    /// Brute-force reachability: can some piecewise-constant bang-bang
    /// control sequence bring `x` into the disk within `horizon`?
    fn brute_reachable(x: Position, center: Position, radius: f64, horizon: f64) -> bool {
        const DEPTH: usize = 3;
        let step = horizon / DEPTH as f64;
        let controls = [-1.0, 0.0, 1.0];
        let mut frontier = vec![x];
        for _ in 0..DEPTH {
            let mut next = Vec::with_capacity(frontier.len() * 9);
            for p in &frontier {
                if distance(*p, center) <= radius {
                    return true;
                }
                for &ux in &controls {
                    for &uy in &controls {
                        next.push(Position::new(p.px + ux * step, p.py + uy * step));
                    }
                }
            }
            frontier = next;
        }
        frontier.iter().any(|p| distance(*p, center) <= radius)
    }

    #[test]
    fn backward_solve_matches_brute_force_reach_set() {
        let bounds = Bounds::square(20.0).unwrap();
        let center = Position::new(10.0, 10.0);
        let env = Environment::new(
            bounds,
            Position::new(1.0, 1.0),
            Position::new(19.0, 19.0),
            vec![Obstacle::new(center, 2.0)],
            1.0,
            0.5,
        )
        .unwrap();
        let g = Grid2D::square_nodes(bounds, 21).unwrap();
        let horizon = 1.5;
        let v = solve(&init_backward(&env, &g), horizon, default_dt(&g, 0.4)).unwrap();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.node(i, j);
                let oracle = brute_reachable(p, center, 3.0, horizon);
                let solver = v.at(i, j) <= 0.0;
                if oracle != solver {
                    // disagreement only allowed within 2h of the dilated boundary
                    let dx = ((p.px - center.px).abs() - horizon).max(0.0);
                    let dy = ((p.py - center.py).abs() - horizon).max(0.0);
                    let d = dx.hypot(dy);
                    assert!((d - 3.0).abs() <= 2.0 * g.h, "node {p:?} oracle {oracle} solver {solver}");
                }
            }
        }
    }

    #[test]
    fn composite_examples() {
        let g = Grid2D::new(Position::new(0.0, 0.0), 1.0, 3, 3).unwrap();
        let mut fv = vec![0.0; 9];
        let mut bv = vec![0.0; 9];
        fv[0] = 2.0;
        bv[0] = 5.0;
        fv[1] = 0.0;
        bv[1] = 0.0;
        fv[2] = 1.0;
        bv[2] = -3.0;
        let vf = ValueField::new(g, fv, 0.0).unwrap();
        let vb = ValueField::new(g, bv, 0.0).unwrap();
        let c = composite_value(&vf, &vb).unwrap();
        assert_eq!(c.values[0], 2.0);
        assert_eq!(c.values[1], 0.0);
        assert_eq!(c.values[2], 3.0);
        for k in 0..9 {
            assert!(c.values[k] >= vf.values[k] && c.values[k] >= -vb.values[k]);
        }
        assert_eq!(composite_value(&vf, &vb).unwrap(), c);

        let other = Grid2D::new(Position::new(0.0, 0.0), 0.5, 3, 3).unwrap();
        let vo = ValueField::new(other, vec![0.0; 9], 0.0).unwrap();
        assert!(matches!(composite_value(&vf, &vo), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn composite_sign_semantics_on_solved_fields() {
        let env = env_one(Position::new(20.0, 20.0));
        let g = Grid2D::covering(env.bounds(), 0.5).unwrap();
        let f = solve_fields(
            &env,
            &SolverSettings {
                h: 0.5,
                ..SolverSettings::default()
            },
        )
        .unwrap();
        assert_eq!(f.composite.grid, g);
        // Inside the inflated obstacle the backward value is negative and the
        // composite is max(vf, -vb) > 0, dominated by -vb when vf is smaller.
        let k = g.index(40, 40);
        let (vf, vb) = (f.forward.values[k], f.backward.values[k]);
        assert!(vb < 0.0);
        assert_eq!(f.composite.values[k], vf.max(-vb));
        assert!(f.composite.values[k] > 0.0);
        // Far from the obstacle the backward value is positive and the
        // composite reduces to the forward value.
        let k = g.index(80, 10);
        assert!(f.backward.values[k] > 0.0);
        assert_eq!(f.composite.values[k], f.forward.values[k]);
        assert!(f.composite.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sample_value_examples() {
        let g = Grid2D::new(Position::new(0.0, 0.0), 1.0, 3, 3).unwrap();
        let mut vals = vec![0.0; 9];
        vals[g.index(1, 1)] = 4.0;
        let v = ValueField::new(g, vals, 0.0).unwrap();
        assert_eq!(sample_value(&v, Position::new(1.0, 1.0)).unwrap(), 4.0);
        assert_eq!(sample_value(&v, Position::new(0.5, 0.5)).unwrap(), 1.0);
        assert!(matches!(
            sample_value(&v, Position::new(2.5, 0.0)),
            Err(Error::OutOfBounds { .. })
        ));
        // linear along an axis between nodes
        assert_eq!(sample_value(&v, Position::new(1.0, 0.25)).unwrap(), 1.0);
        assert_eq!(sample_value(&v, Position::new(1.0, 0.75)).unwrap(), 3.0);
    }

    fn linear_field(a: f64, b: f64) -> ValueField {
        let g = Grid2D::new(Position::new(0.0, 0.0), 0.5, 21, 21).unwrap();
        ValueField::new(g, g.fill(|p| a * p.px + b * p.py), 0.0).unwrap()
    }

    #[test]
    fn descent_control_matches_bang_bang_on_a_plane_and_leaves_a_ridge() {
        let g = Grid2D::new(Position::new(0.0, 0.0), 0.5, 41, 41).unwrap();
        let plane = ValueField::new(g, g.fill(|p| 0.3 * p.px + p.py), 0.0).unwrap();
        let p = Position::new(7.3, 9.1);
        assert_eq!(descent_control(&plane, p, 0.1).unwrap(), Control::new(-1.0, -1.0));
        assert_eq!(descent_control(&plane, p, 0.1).unwrap(), classical_control(&plane, p).unwrap());
        // ridge along x = y falling toward +x+y: the gradient's bang-bang
        // control runs along the ridge, the lookahead steps off it
        let ridge = ValueField::new(g, g.fill(|p| -(p.px + p.py) * 0.1 - 2.0 * (p.px - p.py).abs()), 0.0).unwrap();
        let q = Position::new(10.0, 10.0);
        let u = descent_control(&ridge, q, 0.1).unwrap();
        assert!(u.ux != u.uy, "{u:?}");
    }

    #[test]
    fn classical_control_examples() {
        let p = Position::new(5.0, 5.0);
        assert_eq!(
            classical_control(&linear_field(0.5, -0.2), p).unwrap(),
            Control::new(-1.0, 1.0)
        );
        assert_eq!(classical_control(&linear_field(0.0, 0.0), p).unwrap(), Control::ZERO);
        assert_eq!(
            classical_control(&linear_field(1e-12, 3.0), p).unwrap(),
            Control::new(0.0, -1.0)
        );
        assert!(classical_control(&linear_field(1.0, 1.0), Position::new(11.0, 0.0)).is_err());
        // edge of the grid uses a shortened stencil
        assert_eq!(
            classical_control(&linear_field(0.5, -0.2), Position::new(0.0, 10.0)).unwrap(),
            Control::new(-1.0, 1.0)
        );
    }

    #[test]
    fn text_round_trip_is_exact() {
        let env = env_one(Position::new(20.0, 20.0));
        let v = init_backward(&env, &small_grid());
        let text = v.to_text();
        let back = ValueField::read_text(text.as_bytes()).unwrap();
        assert_eq!(back, v);
        assert!(ValueField::read_text("3 3 0 0 1\n".as_bytes()).is_err());
    }

    #[test]
    fn reach_time_field_is_consistent() {
        let env = env_one(Position::new(20.0, 20.0));
        let g = Grid2D::covering(env.bounds(), 0.5).unwrap();
        let t = reach_time_field(&env, &g, 90.0, default_dt(&g, 0.4)).unwrap();
        // goal node arrives at t = 0
        assert_eq!(sample_value(&t, env.goal()).unwrap(), 0.0);
        // Chebyshev arrival time away from obstacles: max(|dx|, |dy|) - r
        let p = Position::new(40.0, 30.0);
        let tp = sample_value(&t, p).unwrap();
        assert!((tp - 9.5).abs() < 1.0, "arrival {tp}");
        // obstacle center is never reached
        assert_eq!(sample_value(&t, Position::new(20.0, 20.0)).unwrap(), 90.0);
        // start is reached
        assert!(sample_value(&t, env.start()).unwrap() < 60.0);
    }

    #[test]
    fn reach_time_field_starts_from_off_grid_goal() {
        let env = Environment::new(
            Bounds::square(45.0).unwrap(),
            Position::new(1.0, 1.0),
            Position::new(40.5, 40.5),
            vec![Obstacle::new(Position::new(20.0, 20.0), 2.0)],
            1.0,
            0.5,
        )
        .unwrap();
        let g = Grid2D::covering(env.bounds(), 1.0).unwrap();
        assert_eq!(g.nearest_node(env.goal()), (41, 41));
        let t = reach_time_field(&env, &g, 90.0, default_dt(&g, 0.4)).unwrap();
        let tp = sample_value(&t, Position::new(40.0, 30.0)).unwrap();
        assert!((tp - 11.0).abs() < 1.5, "arrival {tp}");
        assert!(sample_value(&t, env.start()).unwrap() < 60.0);
    }
}
