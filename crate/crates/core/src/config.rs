//! Experiment configuration files (TOML).
//!
//! Only `[environment]` is required; every other section falls back to
//! defaults. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Bounds, Environment, Obstacle, Position, DEFAULT_GOAL_THRESHOLD};
use crate::gridhjr::SolverSettings;
use crate::simulator::{ControllerKind, RandomEnvSpec, SimConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub simulation: SimConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomObstacles {
    pub count: usize,
    pub radius: f64,
    /// Gap kept between the start/goal and every unsafe disk.
    pub endpoint_clearance: f64,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for RandomObstacles {
    fn default() -> Self {
        Self {
            count: 10,
            radius: 2.0,
            endpoint_clearance: 2.0,
            seed: 0,
            max_attempts: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    /// `[x_min, x_max, y_min, y_max]`
    pub bounds: [f64; 4],
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub safety_margin: f64,
    pub goal_threshold: f64,
    pub obstacles: Vec<ObstacleSpec>,
    /// Generate the obstacles instead of listing them.
    pub random: Option<RandomObstacles>,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        Self {
            bounds: [0.0, 45.0, 0.0, 45.0],
            start: [1.0, 1.0],
            goal: [40.0, 40.0],
            safety_margin: 1.0,
            goal_threshold: DEFAULT_GOAL_THRESHOLD,
            obstacles: Vec::new(),
            random: None,
        }
    }
}

fn pos(p: [f64; 2]) -> Position {
    Position::new(p[0], p[1])
}

impl EnvironmentSection {
    pub fn workspace(&self) -> Result<Bounds> {
        let [x0, x1, y0, y1] = self.bounds;
        Bounds::new(x0, x1, y0, y1)
    }

    /// Generator for random layouts sharing this section's workspace,
    /// endpoints and margins.
    pub fn random_spec(&self) -> Result<RandomEnvSpec> {
        let r = self.random.clone().unwrap_or_default();
        Ok(RandomEnvSpec {
            bounds: self.workspace()?,
            start: pos(self.start),
            goal: pos(self.goal),
            n_obstacles: r.count,
            radius: r.radius,
            safety_margin: self.safety_margin,
            goal_threshold: self.goal_threshold,
            endpoint_clearance: r.endpoint_clearance,
            max_attempts: r.max_attempts,
        })
    }

    pub fn build(&self) -> Result<Environment> {
        if let Some(r) = &self.random {
            if !self.obstacles.is_empty() {
                return Err(Error::Config(
                    "environment: give either `obstacles` or `random`, not both".into(),
                ));
            }
            return self.random_spec()?.generate(r.seed);
        }
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| Obstacle::new(pos(o.center), o.radius))
            .collect();
        Environment::new(
            self.workspace()?,
            pos(self.start),
            pos(self.goal),
            obstacles,
            self.safety_margin,
            self.goal_threshold,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub h: f64,
    pub forward_horizon: f64,
    pub backward_horizon: f64,
    /// Horizon of the baseline's goal arrival-time field.
    pub reach_horizon: f64,
    pub cfl_factor: f64,
    /// Solve the fields when `train` finds none in the output directory.
    pub solve_if_missing: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            h: s.h,
            forward_horizon: s.forward_horizon,
            backward_horizon: s.backward_horizon,
            reach_horizon: s.reach_horizon,
            cfl_factor: s.cfl_factor,
            solve_if_missing: true,
        }
    }
}

impl GridSection {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            h: self.h,
            forward_horizon: self.forward_horizon,
            backward_horizon: self.backward_horizon,
            reach_horizon: self.reach_horizon,
            cfl_factor: self.cfl_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::Config(format!("grid.h {} must be > 0", self.h)));
        }
        for (name, v) in [
            ("forward_horizon", self.forward_horizon),
            ("backward_horizon", self.backward_horizon),
            ("reach_horizon", self.reach_horizon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("grid.{name} {v} must be > 0")));
            }
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 1.0) {
            return Err(Error::Config(format!(
                "grid.cfl_factor {} must be in (0, 1]",
                self.cfl_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Episodes per `simulate` call, seeded `simulation.rng_seed + k`.
    pub episodes: usize,
    pub n_runs: usize,
    /// Seed of the first Monte Carlo environment.
    pub base_seed: u64,
    pub baseline_controller: ControllerKind,
    pub radii: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            episodes: 1,
            n_runs: 10,
            base_seed: 0,
            baseline_controller: ControllerKind::Classical,
            radii: vec![3.0, 5.0, 7.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    /// Parses and validates a configuration; errors carry line numbers.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.build().map_err(|e| match e {
            Error::InvalidEnvironment(m) => Error::Config(format!("environment: {m}")),
            other => other,
        })?;
        self.grid.validate()?;
        self.training.validate()?;
        self.simulation.validate()?;
        if self.experiment.n_runs == 0 {
            return Err(Error::Config("experiment.n_runs must be >= 1".into()));
        }
        if self.experiment.episodes == 0 {
            return Err(Error::Config("experiment.episodes must be >= 1".into()));
        }
        if self.experiment.radii.is_empty() || self.experiment.radii.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return Err(Error::Config("experiment.radii must be nonempty and positive".into()));
        }
        Ok(())
    }

    /// Replaces every seed in the configuration.
    pub fn override_seed(&mut self, seed: u64) {
        self.training.rng_seed = seed;
        self.simulation.rng_seed = seed;
        self.experiment.base_seed = seed;
        if let Some(r) = self.environment.random.as_mut() {
            r.seed = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridhjr::DEFAULT_CFL_FACTOR;

    const ONE_OBSTACLE: &str = r#"
[environment]
bounds = [0.0, 45.0, 0.0, 45.0]
start = [1.0, 1.0]
goal = [40.0, 40.0]
safety_margin = 1.0
goal_threshold = 0.5
obstacles = [{ center = [20.0, 20.0], radius = 2.0 }]

[grid]
h = 0.5

[training]
epochs = 3
n_interior = 50
n_boundary = 20

[simulation]
sensor_radius = 5.0
latency_model = "none"
controller = "neurohjr"

[output]
dir = "run1"
"#;

    #[test]
    fn parses_and_builds() {
        let c = ExperimentConfig::from_toml(ONE_OBSTACLE).unwrap();
        assert_eq!(c.grid.h, 0.5);
        assert_eq!(c.grid.cfl_factor, DEFAULT_CFL_FACTOR);
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.learning_rate, 1e-3);
        assert_eq!(c.output.dir, PathBuf::from("run1"));
        let e = c.environment.build().unwrap();
        assert_eq!(e.obstacles().len(), 1);
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let text = ONE_OBSTACLE.replace("h = 0.5", "h = 0.5\nspacing = 2");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("spacing"), "{err}");
        assert!(err.contains("line 12"), "{err}");
        let text = ONE_OBSTACLE.replace("[output]", "[outputs]");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn malformed_and_invalid_values() {
        let err = ExperimentConfig::from_toml("[environment\nstart = [1, 1]").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(ExperimentConfig::from_toml("[grid]\nh = 0.5\n").is_err());
        let bad_start = ONE_OBSTACLE.replace("start = [1.0, 1.0]", "start = [20.0, 21.0]");
        assert!(matches!(ExperimentConfig::from_toml(&bad_start), Err(Error::Config(_))));
        let bad_h = ONE_OBSTACLE.replace("h = 0.5", "h = -1.0");
        assert!(ExperimentConfig::from_toml(&bad_h).is_err());
        let bad_mode = ONE_OBSTACLE.replace("\"none\"", "\"sometimes\"");
        assert!(ExperimentConfig::from_toml(&bad_mode).is_err());
    }

    #[test]
    fn random_environment_section() {
        let text = r#"
[environment]
random = { count = 4, seed = 9 }
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        let e = c.environment.build().unwrap();
        assert_eq!(e.obstacles().len(), 4);
        assert_eq!(e, c.environment.build().unwrap());
        let both = format!("{text}obstacles = [{{ center = [20.0, 20.0], radius = 2.0 }}]\n");
        assert!(ExperimentConfig::from_toml(&both).is_err());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = ExperimentConfig::from_toml("[environment]\nrandom = { count = 2 }\n").unwrap();
        c.override_seed(77);
        assert_eq!(c.training.rng_seed, 77);
        assert_eq!(c.simulation.rng_seed, 77);
        assert_eq!(c.experiment.base_seed, 77);
        assert_eq!(c.environment.random.unwrap().seed, 77);
    }
}
