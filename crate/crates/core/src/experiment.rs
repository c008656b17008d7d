//! Command implementations behind the CLI: each reads a resolved
//! [`ExperimentConfig`], writes its artifacts atomically into the output
//! directory and records them in a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gridhjr::{solve_fields, ReachabilityFields, ValueField};
use crate::neuralnet::{Checkpoint, MlpParameters};
use crate::simulator::{
    run_ablation, run_episode, run_monte_carlo, AblationRow, ClassicalPlanner, ComparisonSummary,
    ControllerKind, ControllerResources, EpisodeResult, SimConfig, SummaryRow,
};
use crate::trainer::{train_with_progress, LossBreakdown, TrainOutcome};

pub const FORWARD_FIELD: &str = "forward.field";
pub const BACKWARD_FIELD: &str = "backward.field";
pub const COMPOSITE_FIELD: &str = "composite.field";
pub const CHECKPOINT: &str = "checkpoint.nhjr";
pub const LOSS_HISTORY: &str = "loss_history.csv";
pub const SUMMARY: &str = "summary.csv";
pub const COMPARISON_RUNS: &str = "comparison_runs.csv";
pub const COMPARISON_AGGREGATE: &str = "comparison_aggregate.csv";
pub const ABLATION: &str = "ablation.csv";

pub fn trajectory_file(episode: usize) -> String {
    format!("trajectory_{episode:03}.csv")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_s: BTreeMap<String, f64>,
}

impl Manifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(cfg.to_toml().as_bytes()),
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }
}

/// Where a command reads and writes, plus console verbosity.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub quiet: bool,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            checkpoint: None,
            quiet: true,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.path(CHECKPOINT))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

struct Recorder<'a> {
    ctx: &'a RunContext,
    manifest: Manifest,
}

impl<'a> Recorder<'a> {
    fn new(ctx: &'a RunContext, command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            ctx,
            manifest: Manifest::new(command, cfg),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.ctx.path(name), bytes)?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    fn time(&mut self, phase: &str, started: Instant) {
        self.manifest
            .timings_s
            .insert(phase.to_string(), started.elapsed().as_secs_f64());
    }

    fn finish(self) -> Result<Manifest> {
        let name = Manifest::file_name(&self.manifest.command);
        let json = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
        write_atomic(&self.ctx.path(&name), &json)?;
        Ok(self.manifest)
    }
}

fn write_fields(rec: &mut Recorder, f: &ReachabilityFields) -> Result<()> {
    rec.write(FORWARD_FIELD, f.forward.to_text().as_bytes())?;
    rec.write(BACKWARD_FIELD, f.backward.to_text().as_bytes())?;
    rec.write(COMPOSITE_FIELD, f.composite.to_text().as_bytes())
}

/// Solves the forward, backward and composite fields.
pub fn cmd_solve(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(ReachabilityFields, Manifest)> {
    let env = cfg.environment.build()?;
    let mut rec = Recorder::new(ctx, "solve", cfg);
    let t = Instant::now();
    let fields = solve_fields(&env, &cfg.grid.settings())?;
    rec.time("solve", t);
    ctx.log(format!(
        "solved {}x{} grid, h = {}",
        fields.composite.grid.nx, fields.composite.grid.ny, fields.composite.grid.h
    ));
    write_fields(&mut rec, &fields)?;
    Ok((fields, rec.finish()?))
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    epoch: usize,
    pde: f64,
    value: f64,
    obstacle: f64,
    goal: f64,
    total: f64,
}

pub fn loss_history_csv(history: &[LossBreakdown]) -> Result<Vec<u8>> {
    let rows: Vec<HistoryRow> = history
        .iter()
        .enumerate()
        .map(|(i, b)| HistoryRow {
            epoch: i + 1,
            pde: b.pde,
            value: b.value,
            obstacle: b.obstacle,
            goal: b.goal,
            total: b.total,
        })
        .collect();
    csv_bytes(&rows)
}

/// Trains the network against the composite field in the output
/// directory, solving it first if allowed.
pub fn cmd_train(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(TrainOutcome, Manifest)> {
    let env = cfg.environment.build()?;
    let mut rec = Recorder::new(ctx, "train", cfg);
    let field_path = ctx.path(COMPOSITE_FIELD);
    let composite = if field_path.exists() {
        let bytes = fs::read(&field_path)?;
        rec.input(&field_path, &bytes);
        ValueField::read_text(bytes.as_slice())?
    } else if cfg.grid.solve_if_missing {
        let t = Instant::now();
        let fields = solve_fields(&env, &cfg.grid.settings())?;
        rec.time("solve", t);
        write_fields(&mut rec, &fields)?;
        fields.composite
    } else {
        return Err(Error::Config(format!(
            "{} not found and grid.solve_if_missing is false",
            field_path.display()
        )));
    };
    let t = Instant::now();
    let every = (cfg.training.epochs / 10).max(1);
    let outcome = train_with_progress(&env, &composite, &cfg.training, |epoch, l| {
        if epoch % every == 0 || epoch == cfg.training.epochs {
            ctx.log(format!(
                "epoch {epoch:>6}  total {:+.5e}  pde {:.3e}  value {:.3e}  goal {:+.3e}",
                l.total, l.pde, l.value, l.goal
            ));
        }
    })?;
    rec.time("train", t);
    let ck = Checkpoint {
        params: outcome.params.clone(),
        adam: outcome.adam.clone(),
    };
    rec.write(CHECKPOINT, &ck.to_bytes())?;
    rec.write(LOSS_HISTORY, &loss_history_csv(&outcome.history)?)?;
    Ok((outcome, rec.finish()?))
}

fn load_checkpoint(path: &Path, rec: &mut Recorder) -> Result<MlpParameters> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    rec.input(path, &bytes);
    Ok(Checkpoint::read_from(bytes.as_slice())?.params)
}

fn resources_for(
    kind: ControllerKind,
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    rec: &mut Recorder,
) -> Result<ControllerResources> {
    let env = cfg.environment.build()?;
    Ok(match kind {
        ControllerKind::Neurohjr => ControllerResources::neuro(load_checkpoint(&ctx.checkpoint_path(), rec)?),
        ControllerKind::Classical => {
            let t = Instant::now();
            let planner = ClassicalPlanner::solve(&env, &cfg.grid.settings())?;
            rec.time("baseline_solve", t);
            ControllerResources::classical(planner)
        }
    })
}

/// Runs `experiment.episodes` episodes, seeded `rng_seed + k`.
pub fn cmd_simulate(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(Vec<EpisodeResult>, Manifest)> {
    let env = cfg.environment.build()?;
    let mut rec = Recorder::new(ctx, "simulate", cfg);
    let res = resources_for(cfg.simulation.controller, cfg, ctx, &mut rec)?;
    let t = Instant::now();
    let mut results = Vec::with_capacity(cfg.experiment.episodes);
    let mut rows = Vec::with_capacity(cfg.experiment.episodes);
    for k in 0..cfg.experiment.episodes {
        let sim = SimConfig {
            rng_seed: cfg.simulation.rng_seed.wrapping_add(k as u64),
            ..cfg.simulation.clone()
        };
        let r = run_episode(&env, &sim, &res)?;
        ctx.log(format!(
            "episode {k}: reached={} time={:.2}s path={:.2}m clearance={:.2}m",
            r.reached_goal, r.travel_time, r.path_length, r.min_clearance
        ));
        rec.write(&trajectory_file(k), &csv_bytes(&r.trajectory)?)?;
        rows.push(SummaryRow::new(k, sim.controller, &r));
        results.push(r);
    }
    rec.time("simulate", t);
    rec.write(SUMMARY, &csv_bytes(&rows)?)?;
    Ok((results, rec.finish()?))
}

#[derive(Debug, Serialize)]
struct AggregateRow {
    metric: &'static str,
    value: f64,
}

fn aggregate_rows(s: &ComparisonSummary) -> Vec<AggregateRow> {
    let (tc, tb) = s.mean_travel_time();
    let (lc, lb) = s.mean_path_length();
    let (vc, vb) = s.safety_violations();
    let mut rows = vec![
        AggregateRow { metric: "runs", value: s.runs.len() as f64 },
        AggregateRow { metric: "mean_travel_time_candidate_s", value: tc },
        AggregateRow { metric: "mean_travel_time_baseline_s", value: tb },
        AggregateRow { metric: "mean_travel_time_reduction_pct", value: s.mean_travel_time_reduction() },
        AggregateRow { metric: "mean_path_length_candidate_m", value: lc },
        AggregateRow { metric: "mean_path_length_baseline_m", value: lb },
        AggregateRow { metric: "mean_path_length_reduction_pct", value: s.mean_path_length_reduction() },
        AggregateRow { metric: "safety_violations_candidate", value: vc as f64 },
        AggregateRow { metric: "safety_violations_baseline", value: vb as f64 },
        AggregateRow { metric: "mean_candidate_step_time_s", value: s.mean_candidate_step_time() },
    ];
    if let Some(t) = s.mean_baseline_resolve_time() {
        rows.push(AggregateRow { metric: "mean_baseline_resolve_time_s", value: t });
    }
    rows
}

/// Monte Carlo comparison over random layouts; a network is trained per
/// layout when either side uses it.
pub fn cmd_compare(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(ComparisonSummary, Manifest)> {
    let mut rec = Recorder::new(ctx, "compare", cfg);
    let spec = cfg.environment.random_spec()?;
    let candidate = cfg.simulation.clone();
    let baseline = SimConfig {
        controller: cfg.experiment.baseline_controller,
        ..cfg.simulation.clone()
    };
    let kinds = [candidate.controller, baseline.controller];
    let settings = cfg.grid.settings();
    let t = Instant::now();
    let summary = run_monte_carlo(
        &spec,
        cfg.experiment.n_runs,
        cfg.experiment.base_seed,
        &candidate,
        &baseline,
        |run, env| {
            let mut res = ControllerResources::default();
            if kinds.contains(&ControllerKind::Neurohjr) {
                let fields = solve_fields(env, &settings)?;
                let out = train_with_progress(env, &fields.composite, &cfg.training, |_, _| {})?;
                res.params = Some(out.params);
            }
            if kinds.contains(&ControllerKind::Classical) {
                res.planner = Some(ClassicalPlanner::solve(env, &settings)?);
            }
            ctx.log(format!("run {run}: controllers ready"));
            Ok(res)
        },
    )?;
    rec.time("compare", t);
    rec.write(COMPARISON_RUNS, &csv_bytes(&summary.rows())?)?;
    rec.write(COMPARISON_AGGREGATE, &csv_bytes(&aggregate_rows(&summary))?)?;
    for r in aggregate_rows(&summary) {
        ctx.log(format!("{:<34} {:.6}", r.metric, r.value));
    }
    Ok((summary, rec.finish()?))
}

/// One episode per sensor radius with the trained network.
pub fn cmd_ablate(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(Vec<AblationRow>, Manifest)> {
    let env = cfg.environment.build()?;
    let mut rec = Recorder::new(ctx, "ablate", cfg);
    let res = resources_for(cfg.simulation.controller, cfg, ctx, &mut rec)?;
    let t = Instant::now();
    let rows = run_ablation(&env, &cfg.experiment.radii, &cfg.simulation, &res)?;
    rec.time("ablate", t);
    for r in &rows {
        ctx.log(format!(
            "rho={} time={:.2}s path={:.2}m",
            r.sensor_radius_m, r.travel_time_s, r.path_length_m
        ));
    }
    rec.write(ABLATION, &csv_bytes(&rows)?)?;
    Ok((rows, rec.finish()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn loss_history_header_and_rows() {
        let h = vec![LossBreakdown::default(); 2];
        let text = String::from_utf8(loss_history_csv(&h).unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,pde,value,obstacle,goal,total");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));
    }
}
