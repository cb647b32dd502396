//! Experiment configuration, dispatch and artifact emission.
//!
//! A run reads one JSON config, executes a single subcommand and writes its
//! CSV outputs plus `manifest.json` into the output directory. CSV bodies
//! depend only on the config and seed; timings live in the manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calculus::{check_projection_derivatives, BuiltinFunctional};
use crate::chaos::{chaos_experiment, value_convergence_experiment, ChaosParams, ConvergenceParams};
use crate::error::{Error, Result};
use crate::measures::{read_measure, EmpiricalMeasure};
use crate::model::{BuiltinModel, Model};
use crate::policy::{epsilon_optimality, evaluate_policy, EvalRule, StoppingPolicy, DEFAULT_ETA};
use crate::simulate::{
    resample, simulate_replications, write_paths, Noise, StoppingRule, StreamKey, SurvivalLaw, SystemState, TimeGrid,
};
use crate::snell::{solve_cascade_with_spec, Backend, ValueTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Solve,
    PolicyEval,
    Chaos,
    Converge,
    CheckDerivatives,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Solve => "solve",
            Command::PolicyEval => "policy-eval",
            Command::Chaos => "chaos",
            Command::Converge => "converge",
            Command::CheckDerivatives => "check-derivatives",
        }
    }
}

/// Initial law or configuration. Files are resolved against the config's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSpec {
    /// `(x, alive)` per particle, d = 1.
    States(Vec<(f64, bool)>),
    /// `(weight, x, alive)` per atom, d = 1.
    Atoms(Vec<(f64, f64, bool)>),
    /// `count` equally weighted alive atoms spaced evenly on `[lo, hi]`.
    Uniform { lo: f64, hi: f64, count: usize },
    MeasureFile(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    Never,
    /// Every particle stops at `node`.
    AtNode { node: usize },
    /// I.i.d. stopping nodes, uniform over the grid.
    IidUniform,
    /// I.i.d. stopping nodes with explicit probabilities (last entry: never).
    IidSurvival { probs: Vec<f64> },
    /// The optimal policy of the configured backend.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeSpec {
    #[serde(default = "all_functionals")]
    pub functionals: Vec<BuiltinFunctional>,
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    /// Random states per `(functional, N)`.
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default = "default_h_fd")]
    pub h_fd: f64,
    /// Positions are drawn uniformly from `[-range, range]`.
    #[serde(default = "default_range")]
    pub range: f64,
    #[serde(default = "default_derivative_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub t: f64,
}

impl Default for DerivativeSpec {
    fn default() -> Self {
        Self {
            functionals: all_functionals(),
            ns: default_ns(),
            states: default_states(),
            h_fd: default_h_fd(),
            range: default_range(),
            tolerance: default_derivative_tol(),
            t: 0.0,
        }
    }
}

fn all_functionals() -> Vec<BuiltinFunctional> {
    BuiltinFunctional::ALL.to_vec()
}
fn default_ns() -> Vec<usize> {
    vec![1, 2, 5, 20]
}
fn default_states() -> usize {
    20
}
fn default_h_fd() -> f64 {
    1e-4
}
fn default_range() -> f64 {
    2.0
}
fn default_derivative_tol() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: BuiltinModel,
    pub grid: TimeGrid,
    /// Mandatory unless given on the command line.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    /// System size; implied by `initial.states`.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub backend: Option<Backend>,
    #[serde(default)]
    pub rule: Option<RuleSpec>,
    #[serde(default)]
    pub reps: Option<usize>,
    #[serde(default)]
    pub noise: Option<Noise>,
    #[serde(default)]
    pub eta: Option<f64>,
    /// Previously written value table for `policy-eval`.
    #[serde(default)]
    pub table: Option<PathBuf>,
    #[serde(default)]
    pub chaos: Option<ChaosParams>,
    #[serde(default)]
    pub converge: Option<ConvergenceParams>,
    #[serde(default)]
    pub derivatives: Option<DerivativeSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse, reporting the JSON path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".into() } else { field }, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, text))
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        self.model.validate()?;
        self.grid
            .validate()
            .map_err(|e| Error::config("grid", e.to_string()))?;
        if self.seed.is_none() {
            return Err(Error::config("seed", "a seed is required"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be positive"));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::config("eta", "must be finite and nonnegative"));
            }
        }
        let need = |present: bool, field: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::config(field, format!("required by `{}`", command.name())))
            }
        };
        match command {
            Command::Simulate => {
                need(self.initial.is_some(), "initial")?;
                need(self.reps.is_some(), "reps")?;
                if matches!(self.rule, Some(RuleSpec::Policy)) {
                    need(self.backend.is_some(), "backend")?;
                }
            }
            Command::Solve => {
                need(self.backend.is_some(), "backend")?;
                need(self.n.is_some() || matches!(self.initial, Some(InitialSpec::States(_))), "n")?;
            }
            Command::PolicyEval => {
                need(self.backend.is_some() || self.table.is_some(), "backend")?;
                need(self.initial.is_some(), "initial")?;
                need(self.reps.is_some(), "reps")?;
            }
            Command::Chaos => {
                need(self.initial.is_some(), "initial")?;
                need(self.chaos.is_some(), "chaos")?;
            }
            Command::Converge => {
                need(self.initial.is_some(), "initial")?;
                need(self.converge.is_some(), "converge")?;
            }
            Command::CheckDerivatives => {}
        }
        if let (Some(RuleSpec::IidSurvival { probs }), true) = (&self.rule, true) {
            SurvivalLaw::new(&self.grid, probs.clone()).map_err(|e| Error::config("rule.probs", e.to_string()))?;
        }
        if let Some(RuleSpec::AtNode { node }) = self.rule {
            if node > self.grid.n_steps {
                return Err(Error::config("rule.node", format!("beyond the last node {}", self.grid.n_steps)));
            }
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    fn initial_measure(&self) -> Result<EmpiricalMeasure> {
        let spec = self.initial.as_ref().ok_or_else(|| Error::config("initial", "missing"))?;
        let m = match spec {
            InitialSpec::States(s) => EmpiricalMeasure::from_states_1d(s),
            InitialSpec::Atoms(a) => EmpiricalMeasure::weighted_1d(a),
            InitialSpec::Uniform { lo, hi, count } => {
                if *count == 0 || !(hi >= lo) {
                    return Err(Error::config("initial.uniform", "need count > 0 and lo <= hi"));
                }
                let xs = (0..*count)
                    .map(|k| if *count == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (*count - 1) as f64 })
                    .collect();
                EmpiricalMeasure::uniform(1, xs, vec![true; *count])
            }
            InitialSpec::MeasureFile(p) => read_measure(File::open(self.base_dir.join(p))?),
        };
        m.map_err(|e| Error::config("initial", e.to_string()))
    }

    /// The `N`-particle starting configuration.
    fn initial_state(&self) -> Result<SystemState> {
        if let Some(InitialSpec::States(s)) = &self.initial {
            if let Some(n) = self.n {
                if n != s.len() {
                    return Err(Error::config("n", format!("{n} disagrees with {} initial states", s.len())));
                }
            }
            return SystemState::from_states_1d(s).map_err(|e| Error::config("initial.states", e.to_string()));
        }
        let n = self.n.ok_or_else(|| Error::config("n", "required when `initial` is a law"))?;
        resample(&self.initial_measure()?, n, &mut StreamKey::new(self.seed(), u64::MAX).aux_rng(3))
    }

    fn system_size(&self) -> Result<usize> {
        match (&self.initial, self.n) {
            (Some(InitialSpec::States(s)), _) => Ok(s.len()),
            (_, Some(n)) => Ok(n),
            _ => Err(Error::config("n", "missing")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the config text.
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub stages: Vec<StageTiming>,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(name))?;
        self.manifest.stages.push(StageTiming {
            stage: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.out.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.out.join(name), body)?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }
}

/// Text of an optional float; empty when absent.
fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Execute `command`; artifacts and `manifest.json` go to `out`. The manifest
/// is written even when a stage fails.
pub fn run(config: &ExperimentConfig, config_text: &str, command: Command, out: &Path) -> Result<RunManifest> {
    config.validate(command)?;
    fs::create_dir_all(out)?;
    let mut run = Run {
        out,
        manifest: RunManifest {
            command: command.name().into(),
            config_hash: config_hash(config_text),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed(),
            threads: rayon::current_num_threads(),
            stages: Vec::new(),
            warnings: Vec::new(),
            outputs: Vec::new(),
        },
    };
    let result = dispatch(config, command, &mut run);
    if let Err(e) = &result {
        run.manifest.warnings.push(format!("failed: {e}"));
    }
    let file = BufWriter::new(File::create(out.join("manifest.json"))?);
    serde_json::to_writer_pretty(file, &run.manifest)?;
    result.map(|_| run.manifest)
}

fn dispatch(cfg: &ExperimentConfig, command: Command, run: &mut Run<'_>) -> Result<()> {
    let model = cfg.model.build();
    match command {
        Command::Simulate => simulate(cfg, &model, run),
        Command::Solve => solve(cfg, &model, run).map(|_| ()),
        Command::PolicyEval => policy_eval(cfg, &model, run),
        Command::Chaos => chaos(cfg, &model, run),
        Command::Converge => converge(cfg, &model, run),
        Command::CheckDerivatives => check_derivatives(cfg, run),
    }
}

fn noise(cfg: &ExperimentConfig) -> Noise {
    cfg.noise.unwrap_or(Noise::Gaussian)
}

fn solve(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<Arc<ValueTable>> {
    let n = cfg.system_size()?;
    let backend = cfg.backend.as_ref().ok_or_else(|| Error::config("backend", "missing"))?;
    let table = run.stage("solve", || solve_cascade_with_spec(model, Some(&cfg.model), n, &cfg.grid, backend))?;
    run.manifest.warnings.extend(table.warnings.iter().cloned());
    let mut bytes = Vec::new();
    table.write(&mut bytes)?;
    fs::write(run.out.join("value_table.bin"), &bytes)?;
    run.manifest.outputs.push("value_table.bin".into());
    let mut rows = Vec::new();
    if cfg.initial.is_some() {
        let y0 = cfg.initial_state()?;
        let (v, clamped) = table.value_at_clamped(0, &y0)?;
        if clamped {
            run.manifest.warnings.push("initial state clamped to the lattice".into());
        }
        if let Some(leak) = table.boundary_leakage(model, &y0).ok().filter(|l| *l > 1e-6) {
            run.manifest.warnings.push(format!("lattice boundary mass {leak}"));
        }
        rows.push(vec![n.to_string(), table.backend_tag().into(), v.to_string(), table.warnings.len().to_string()]);
    } else {
        rows.push(vec![n.to_string(), table.backend_tag().into(), String::new(), table.warnings.len().to_string()]);
    }
    run.csv("solve.csv", &["N", "backend", "value_at_t0", "warnings"], &rows)?;
    Ok(Arc::new(table))
}

fn load_or_solve(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<Arc<ValueTable>> {
    match &cfg.table {
        Some(p) => {
            let path = cfg.base_dir.join(p);
            run.stage("load_table", || ValueTable::read(File::open(&path)?, Some(model)).map(Arc::new))
        }
        None => solve(cfg, model, run),
    }
}

fn rule(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<StoppingRule> {
    Ok(match cfg.rule.clone().unwrap_or(RuleSpec::Never) {
        RuleSpec::Never => StoppingRule::Never,
        RuleSpec::AtNode { node } => StoppingRule::IidSurvival(SurvivalLaw::at_node(&cfg.grid, node)),
        RuleSpec::IidUniform => StoppingRule::IidSurvival(SurvivalLaw::uniform_nodes(&cfg.grid)),
        RuleSpec::IidSurvival { probs } => StoppingRule::IidSurvival(SurvivalLaw::new(&cfg.grid, probs)?),
        RuleSpec::Policy => {
            let table = load_or_solve(cfg, model, run)?;
            StoppingRule::PolicyDriven(Arc::new(StoppingPolicy::new(table, cfg.eta.unwrap_or(DEFAULT_ETA))?))
        }
    })
}

fn simulate(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<()> {
    let y0 = cfg.initial_state()?;
    let rule = rule(cfg, model, run)?;
    let reps = cfg.reps.unwrap_or(1);
    let paths = run.stage("simulate", || simulate_replications(model, &cfg.grid, &y0, &rule, noise(cfg), cfg.seed(), reps))?;
    let file = BufWriter::new(File::create(run.out.join("paths.csv"))?);
    write_paths(&paths, file)?;
    run.manifest.outputs.push("paths.csv".into());
    Ok(())
}

fn policy_eval(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<()> {
    let table = load_or_solve(cfg, model, run)?;
    let y0 = cfg.initial_state()?;
    let eta = cfg.eta.unwrap_or(DEFAULT_ETA);
    let policy = Arc::new(StoppingPolicy::new(table.clone(), eta)?);
    let reps = cfg.reps.unwrap_or(2);
    let est = run.stage("evaluate", || evaluate_policy(model, &cfg.grid, &y0, EvalRule::Policy(&policy), reps, noise(cfg), cfg.seed()))?;
    if est.clamps > 0 {
        run.manifest.warnings.push(format!("{} lattice clamps during evaluation", est.clamps));
    }
    let value = table.value_at(0, &y0)?;
    let eps = epsilon_optimality(est.j, &table, 0, &y0)?;
    run.csv(
        "policy.csv",
        &["N", "eta", "value_at_t0", "J", "stderr", "epsilon", "reps", "clamps"],
        &[vec![
            table.n.to_string(),
            eta.to_string(),
            value.to_string(),
            est.j.to_string(),
            est.std_error.to_string(),
            eps.to_string(),
            reps.to_string(),
            est.clamps.to_string(),
        ]],
    )
}

fn chaos(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<()> {
    let m0 = cfg.initial_measure()?;
    let params = cfg.chaos.as_ref().ok_or_else(|| Error::config("chaos", "missing"))?;
    let law = match cfg.rule.clone().unwrap_or(RuleSpec::IidUniform) {
        RuleSpec::Never => SurvivalLaw::never(&cfg.grid),
        RuleSpec::AtNode { node } => SurvivalLaw::at_node(&cfg.grid, node),
        RuleSpec::IidUniform => SurvivalLaw::uniform_nodes(&cfg.grid),
        RuleSpec::IidSurvival { probs } => SurvivalLaw::new(&cfg.grid, probs)?,
        RuleSpec::Policy => return Err(Error::config("rule", "chaos needs an i.i.d. rule")),
    };
    let report = run.stage("chaos", || chaos_experiment(model, &m0, &law, &cfg.grid, params, cfg.seed()))?;
    run.manifest.warnings.extend(report.warnings.iter().cloned());
    run.manifest.warnings.push(format!(
        "reference flow: Picard gap {} after {} iterations{}",
        report.picard_gap,
        report.picard_iterations,
        if report.gap_is_bound { " (coupling bound)" } else { "" }
    ));
    let slope = opt(report.slope);
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.estimate.to_string(),
                r.std_error.to_string(),
                r.reps.to_string(),
                slope.clone(),
                opt(r.w2_estimate),
                opt(r.w2_std_error),
            ]
        })
        .collect();
    run.csv("chaos.csv", &["N", "estimate", "stderr", "reps", "slope", "w2_estimate", "w2_stderr"], &rows)?;
    let mut summary = String::new();
    summary.push_str("E[max_t W1^2(m^N_t, m_t)]\n");
    for r in &report.rows {
        summary.push_str(&format!("N = {:>6}  {:.6e} +- {:.2e}\n", r.n, r.estimate, r.std_error));
    }
    summary.push_str(&format!("log-log slope: {slope}\nreference cloud: {}\n", report.cloud));
    if let Some(b) = report.reference_bias {
        summary.push_str(&format!("reference bias (M vs M/2, max_t W1): {b}\n"));
    }
    run.text("chaos_summary.txt", &summary)
}

fn converge(cfg: &ExperimentConfig, model: &Model, run: &mut Run<'_>) -> Result<()> {
    let m0 = cfg.initial_measure()?;
    let params = cfg.converge.as_ref().ok_or_else(|| Error::config("converge", "missing"))?;
    let report = run.stage("converge", || value_convergence_experiment(model, Some(&cfg.model), &m0, &cfg.grid, params, cfg.seed()))?;
    run.manifest.warnings.extend(report.warnings.iter().cloned());
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.n.to_string(),
                r.backend.into(),
                r.table_value.to_string(),
                r.value.to_string(),
                r.std_error.to_string(),
                opt(report.oracle),
                opt(r.oracle_gap),
                opt(r.tolerance),
                opt(report.differences.get(i).map(|d| d.1)),
            ]
        })
        .collect();
    run.csv(
        "converge.csv",
        &["N", "backend", "table_value", "value", "stderr", "oracle", "oracle_gap", "tolerance", "diff_to_next"],
        &rows,
    )
}

fn check_derivatives(cfg: &ExperimentConfig, run: &mut Run<'_>) -> Result<()> {
    let spec = cfg.derivatives.clone().unwrap_or_default();
    let mut rows = Vec::new();
    let mut failures = 0;
    run.stage("check_derivatives", || {
        for (fi, f) in spec.functionals.iter().enumerate() {
            let u = f.build();
            for &n in &spec.ns {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed() ^ ((fi as u64) << 40) ^ n as u64);
                for s in 0..spec.states {
                    let xs = (0..n).map(|_| rng.random_range(-spec.range..=spec.range)).collect();
                    let y = SystemState::new(1, xs, vec![true; n])?;
                    let c = check_projection_derivatives(&u, n, spec.t, &y, spec.h_fd)?;
                    let pass = c.worst() <= spec.tolerance;
                    failures += usize::from(!pass);
                    rows.push(vec![
                        u.name.clone(),
                        n.to_string(),
                        s.to_string(),
                        c.first_order.to_string(),
                        c.second_order.to_string(),
                        c.worst().to_string(),
                        pass.to_string(),
                    ]);
                }
            }
        }
        Ok(())
    })?;
    if failures > 0 {
        run.manifest.warnings.push(format!("{failures} derivative checks above tolerance {}", spec.tolerance));
    }
    run.csv("derivatives.csv", &["functional", "N", "state", "first_order", "second_order", "worst", "pass"], &rows)
}

/// Print a one-line summary of a finished run.
pub fn report_line(manifest: &RunManifest, mut out: impl Write) -> std::io::Result<()> {
    let total: f64 = manifest.stages.iter().map(|s| s.seconds).sum();
    writeln!(
        out,
        "{}: {} outputs, {} warnings, {:.3} s",
        manifest.command,
        manifest.outputs.len(),
        manifest.warnings.len(),
        total
    )
}
