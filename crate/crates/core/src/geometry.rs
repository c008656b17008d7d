//! Planar domain types shared by the solver, the network trainer and the
//! simulator: positions, box-bounded controls, circular obstacles and the
//! environment that ties them together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default radius of the goal-reached disk, in meters.
pub const DEFAULT_GOAL_THRESHOLD: f64 = 0.5;

/// Position of the vehicle on the ground plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub px: f64,
    pub py: f64,
}

impl Position {
    pub const fn new(px: f64, py: f64) -> Self {
        Self { px, py }
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite()
    }
}

/// Commanded velocity in m/s. Admissible controls live in the box `[-1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub ux: f64,
    pub uy: f64,
}

impl Control {
    pub const ZERO: Control = Control { ux: 0.0, uy: 0.0 };

    pub const fn new(ux: f64, uy: f64) -> Self {
        Self { ux, uy }
    }

    pub fn in_box(&self) -> bool {
        self.ux.abs() <= 1.0 && self.uy.abs() <= 1.0
    }

    pub fn norm(&self) -> f64 {
        self.ux.hypot(self.uy)
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        if ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidEnvironment("non-finite bounds".into()));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::InvalidEnvironment(format!(
                "empty bounds [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(b)
    }

    /// Square workspace `[0, side]²`.
    pub fn square(side: f64) -> Result<Self> {
        Self::new(0.0, side, 0.0, side)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: Position) -> bool {
        p.px >= self.x_min && p.px <= self.x_max && p.py >= self.y_min && p.py <= self.y_max
    }

    pub fn clamp(&self, p: Position) -> Position {
        Position::new(
            p.px.clamp(self.x_min, self.x_max),
            p.py.clamp(self.y_min, self.y_max),
        )
    }
}

/// Circular (cylindrical in 3D) obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Position,
    pub radius: f64,
}

impl Obstacle {
    pub const fn new(center: Position, radius: f64) -> Self {
        Self { center, radius }
    }
}

/// Workspace, mission endpoints and obstacle field.
///
/// Construct through [`Environment::new`], which rejects configurations
/// whose start or goal lies inside an unsafe disk of radius `R + δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    bounds: Bounds,
    start: Position,
    goal: Position,
    obstacles: Vec<Obstacle>,
    safety_margin: f64,
    goal_threshold: f64,
}

impl Environment {
    pub fn new(
        bounds: Bounds,
        start: Position,
        goal: Position,
        obstacles: Vec<Obstacle>,
        safety_margin: f64,
        goal_threshold: f64,
    ) -> Result<Self> {
        let env = Self {
            bounds,
            start,
            goal,
            obstacles,
            safety_margin,
            goal_threshold,
        };
        env.validate()?;
        Ok(env)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEnvironment(m));
        if !(self.safety_margin.is_finite() && self.safety_margin >= 0.0) {
            return bad(format!("safety margin {} must be >= 0", self.safety_margin));
        }
        if !(self.goal_threshold.is_finite() && self.goal_threshold > 0.0) {
            return bad(format!("goal threshold {} must be > 0", self.goal_threshold));
        }
        for (name, p) in [("start", self.start), ("goal", self.goal)] {
            if !p.is_finite() || !self.bounds.contains(p) {
                return bad(format!("{name} ({}, {}) outside workspace", p.px, p.py));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius.is_finite() && o.radius > 0.0) {
                return bad(format!("obstacle {i} radius {} must be > 0", o.radius));
            }
            if !o.center.is_finite() || !self.bounds.contains(o.center) {
                return bad(format!("obstacle {i} center outside workspace"));
            }
            let rd = o.radius + self.safety_margin;
            for (name, p) in [("start", self.start), ("goal", self.goal)] {
                if distance(p, o.center) < rd {
                    return bad(format!("{name} lies inside the unsafe disk of obstacle {i}"));
                }
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn start(&self) -> Position {
        self.start
    }

    pub fn goal(&self) -> Position {
        self.goal
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn safety_margin(&self) -> f64 {
        self.safety_margin
    }

    pub fn goal_threshold(&self) -> f64 {
        self.goal_threshold
    }

    /// Radius `R + δ` of the unsafe disk around an obstacle.
    pub fn unsafe_radius(&self, o: &Obstacle) -> f64 {
        o.radius + self.safety_margin
    }

    /// Same environment with a different start; validated again.
    pub fn with_start(&self, start: Position) -> Result<Self> {
        Self::new(
            self.bounds,
            start,
            self.goal,
            self.obstacles.clone(),
            self.safety_margin,
            self.goal_threshold,
        )
    }
}

/// Euclidean distance between two points.
pub fn distance(p: Position, q: Position) -> f64 {
    (p.px - q.px).hypot(p.py - q.py)
}

/// Obstacle whose center is closest to `p`, with that center distance.
/// Ties resolve to the lowest index.
pub fn nearest_obstacle(p: Position, env: &Environment) -> Option<(Obstacle, f64)> {
    let mut best: Option<(Obstacle, f64)> = None;
    for o in env.obstacles() {
        let d = distance(p, o.center);
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((*o, d)),
        }
    }
    best
}

/// True when `p` is strictly inside some inflated obstacle disk.
pub fn in_unsafe_region(p: Position, env: &Environment) -> bool {
    env.obstacles()
        .iter()
        .any(|o| distance(p, o.center) < env.unsafe_radius(o))
}

/// Unit vector pointing from `p` to the goal.
pub fn goal_unit_vector(p: Position, env: &Environment) -> Result<(f64, f64)> {
    let dx = env.goal().px - p.px;
    let dy = env.goal().py - p.py;
    let n = dx.hypot(dy);
    if n < 1e-9 {
        return Err(Error::Degenerate(format!(
            "point ({}, {}) coincides with the goal",
            p.px, p.py
        )));
    }
    Ok((dx / n, dy / n))
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Position, a: Position, b: Position) -> f64 {
    let (vx, vy) = (b.px - a.px, b.py - a.py);
    let len2 = vx * vx + vy * vy;
    if len2 == 0.0 {
        return distance(p, a);
    }
    let t = (((p.px - a.px) * vx + (p.py - a.py) * vy) / len2).clamp(0.0, 1.0);
    distance(p, Position::new(a.px + t * vx, a.py + t * vy))
}
