//! The stopping policy read off a value table, and Monte Carlo evaluation of
//! the discrete objective.
//!
//! At each node the policy stops particles one at a time while the current
//! regime's value is within `eta` of the best single-drop value; the dropped
//! index is the smallest one whose drop value is within `eta` of the current
//! value. Survivors stop at `T`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{eval_running, eval_terminal, Model};
use crate::simulate::{
    simulate_system, Noise, ParticlePaths, StoppingDecider, StoppingRule, StreamKey, SystemState,
    TimeGrid,
};
use crate::snell::{Regime, ValueTable};

/// Slack of the stopping test. In the stopping region the stored value of a
/// regime equals the best drop value bit for bit, and interpolating a maximum
/// dominates the maximum of interpolations, so only rounding needs absorbing.
pub const DEFAULT_ETA: f64 = 1e-9;

#[derive(Debug)]
pub struct StoppingPolicy {
    pub table: Arc<ValueTable>,
    pub eta: f64,
    clamps: AtomicUsize,
}

impl StoppingPolicy {
    pub fn new(table: Arc<ValueTable>, eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::config("eta", format!("must be finite and >= 0, got {eta}")));
        }
        Ok(Self {
            table,
            eta,
            clamps: AtomicUsize::new(0),
        })
    }

    /// Value queries that hit the lattice edge so far.
    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    fn value(&self, node: usize, y: &SystemState) -> Result<f64> {
        let (v, clamped) = self.table.value_at_clamped(node, y)?;
        if clamped {
            self.clamps.fetch_add(1, Ordering::Relaxed);
        }
        Ok(v)
    }

    /// Ordered stops at `node` starting from `state`.
    pub fn stops(&self, node: usize, state: &SystemState) -> Result<Vec<usize>> {
        let mut y = state.clone();
        let mut out = Vec::new();
        if node == self.table.grid.n_steps {
            out.extend((0..y.len()).filter(|&k| y.alive[k]));
            return Ok(out);
        }
        loop {
            let alive: Vec<usize> = (0..y.len()).filter(|&k| y.alive[k]).collect();
            if alive.is_empty() {
                return Ok(out);
            }
            let v = self.value(node, &y)?;
            let mut drops = Vec::with_capacity(alive.len());
            for &k in &alive {
                y.alive[k] = false;
                drops.push(self.value(node, &y)?);
                y.alive[k] = true;
            }
            let best = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if v > best + self.eta {
                return Ok(out);
            }
            let q = drops
                .iter()
                .position(|w| *w >= v - self.eta)
                .expect("the best drop is within eta");
            y.alive[alive[q]] = false;
            out.push(alive[q]);
        }
    }
}

impl StoppingDecider for StoppingPolicy {
    fn decide(&self, node: usize, state: &SystemState) -> Result<Vec<usize>> {
        self.stops(node, state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopEvent {
    pub node: usize,
    pub index: usize,
    /// Alive set after this stop.
    pub remaining: Regime,
}

/// Successive stops of one replication.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyTrace {
    pub initial: Regime,
    pub events: Vec<StopEvent>,
    pub clamps: usize,
}

impl PolicyTrace {
    /// Nodes nondecreasing, each stop removes one alive index, all stopped.
    pub fn validate(&self) -> Result<()> {
        let mut alive = self.initial;
        let mut node = 0;
        for (j, e) in self.events.iter().enumerate() {
            if e.node < node || !alive.is_alive(e.index) || e.remaining != alive.drop(e.index) {
                return Err(Error::InvalidRule(format!("trace event {j} is inconsistent: {e:?}")));
            }
            node = e.node;
            alive = e.remaining;
        }
        if alive.count() != 0 {
            return Err(Error::InvalidRule("trace ends with alive particles".into()));
        }
        Ok(())
    }
}

struct Recorder {
    policy: Arc<StoppingPolicy>,
    events: Mutex<Vec<(usize, usize)>>,
    clamps: AtomicUsize,
}

impl StoppingDecider for Recorder {
    fn decide(&self, node: usize, state: &SystemState) -> Result<Vec<usize>> {
        let before = self.policy.clamp_count();
        let stops = self.policy.stops(node, state)?;
        self.clamps
            .fetch_add(self.policy.clamp_count().saturating_sub(before), Ordering::Relaxed);
        self.events
            .lock()
            .expect("recorder lock")
            .extend(stops.iter().map(|&k| (node, k)));
        Ok(stops)
    }
}

/// Simulate one replication under the policy.
pub fn run_policy(
    policy: &Arc<StoppingPolicy>,
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    noise: Noise,
    key: StreamKey,
) -> Result<(ParticlePaths, PolicyTrace)> {
    if *grid != policy.table.grid {
        return Err(Error::GridMismatch);
    }
    let recorder = Arc::new(Recorder {
        policy: policy.clone(),
        events: Mutex::new(Vec::new()),
        clamps: AtomicUsize::new(0),
    });
    let rule = StoppingRule::PolicyDriven(recorder.clone());
    let paths = simulate_system(model, grid, y0, &rule, noise, key)?;
    let mut alive = Regime::from_indicators(&y0.alive);
    let initial = alive;
    let events = recorder
        .events
        .lock()
        .expect("recorder lock")
        .iter()
        .map(|&(node, index)| {
            alive = alive.drop(index);
            StopEvent {
                node,
                index,
                remaining: alive,
            }
        })
        .collect();
    let trace = PolicyTrace {
        initial,
        events,
        clamps: recorder.clamps.load(Ordering::Relaxed),
    };
    Ok((paths, trace))
}

/// `sum_{s < n} F(t_s, m^N(Y_s)) dt + g(m^N(Y_T))`.
pub fn discrete_objective(model: &Model, paths: &ParticlePaths) -> Result<f64> {
    let grid = paths.grid;
    let mut acc = 0.0;
    for s in 0..grid.n_steps {
        acc += eval_running(model, grid.time(s), &paths.measure(s))? * grid.dt();
    }
    Ok(acc + eval_terminal(model, &paths.measure(grid.n_steps))?)
}

pub enum EvalRule<'a> {
    Rule(&'a StoppingRule),
    Policy(&'a Arc<StoppingPolicy>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEstimate {
    pub j: f64,
    pub std_error: f64,
    pub reps: usize,
    /// Slack used, for policy runs.
    pub eta: Option<f64>,
    pub clamps: usize,
}

/// Monte Carlo mean and standard error of the objective over replications
/// `0..reps` keyed by `seed`.
pub fn evaluate_policy(
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    rule: EvalRule<'_>,
    reps: usize,
    noise: Noise,
    seed: u64,
) -> Result<PolicyEstimate> {
    if reps < 2 {
        return Err(Error::config("reps", "need at least 2 replications"));
    }
    let samples: Vec<(f64, usize)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let key = StreamKey::new(seed, r);
            match &rule {
                EvalRule::Rule(rule) => {
                    let paths = simulate_system(model, grid, y0, rule, noise, key)?;
                    Ok((discrete_objective(model, &paths)?, 0))
                }
                EvalRule::Policy(policy) => {
                    let (paths, trace) = run_policy(policy, model, grid, y0, noise, key)?;
                    trace.validate()?;
                    Ok((discrete_objective(model, &paths)?, trace.clamps))
                }
            }
        })
        .collect::<Result<_>>()?;
    let (j, std_error) = mean_and_se(samples.iter().map(|s| s.0));
    Ok(PolicyEstimate {
        j,
        std_error,
        reps,
        eta: match rule {
            EvalRule::Policy(p) => Some(p.eta),
            EvalRule::Rule(_) => None,
        },
        clamps: samples.iter().map(|s| s.1).sum(),
    })
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `value_at(node, y0) - J`.
pub fn epsilon_optimality(j: f64, table: &ValueTable, node: usize, y0: &SystemState) -> Result<f64> {
    Ok(table.value_at(node, y0)? - j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;
    use crate::snell::{solve_cascade, solve_single, Backend, Lattice1d, LatticeSpec};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    fn table(model: &Model, n: usize, g: &TimeGrid, h: f64, half_width: usize) -> Arc<ValueTable> {
        let spec = LatticeSpec { center: 0.0, h: Some(h), half_width };
        Arc::new(solve_cascade(model, n, g, &Backend::Lattice(spec)).unwrap())
    }

    #[test]
    fn negative_reward_stops_everything_at_once() {
        let model = Model::new("neg", 1, false).with_diffusion_1d(|_, _, _| 0.5).with_running_reward_1d(|_, _, _| -1.0);
        let g = grid(4);
        let policy = Arc::new(StoppingPolicy::new(table(&model, 2, &g, 0.25, 8), DEFAULT_ETA).unwrap());
        let y0 = SystemState::from_states_1d(&[(0.0, true), (0.5, true)]).unwrap();
        let (paths, trace) = run_policy(&policy, &model, &g, &y0, Noise::Gaussian, StreamKey::new(0, 0)).unwrap();
        assert_eq!(paths.stop_node, vec![Some(0), Some(0)]);
        assert_eq!(trace.events.iter().map(|e| e.index).collect::<Vec<_>>(), vec![0, 1]);
        trace.validate().unwrap();
        let est = evaluate_policy(&model, &g, &y0, EvalRule::Policy(&policy), 10, Noise::Gaussian, 1).unwrap();
        assert_eq!((est.j, est.std_error), (0.0, 0.0));
        assert_eq!(epsilon_optimality(est.j, &policy.table, 0, &y0).unwrap(), 0.0);

        let never = evaluate_policy(&model, &g, &y0, EvalRule::Rule(&StoppingRule::Never), 10, Noise::Gaussian, 1).unwrap();
        assert_eq!(never.j, -1.0);
        assert_eq!(epsilon_optimality(never.j, &policy.table, 0, &y0).unwrap(), 1.0);
    }

    #[test]
    fn positive_reward_runs_to_the_horizon() {
        let model = Model::new("pos", 1, false).with_diffusion_1d(|_, _, _| 0.5).with_running_reward_1d(|_, _, _| 1.0);
        let g = grid(4);
        let policy = Arc::new(StoppingPolicy::new(table(&model, 2, &g, 0.25, 8), DEFAULT_ETA).unwrap());
        let y0 = SystemState::from_states_1d(&[(0.0, true), (0.5, false)]).unwrap();
        let (paths, trace) = run_policy(&policy, &model, &g, &y0, Noise::Gaussian, StreamKey::new(0, 0)).unwrap();
        assert_eq!(paths.stop_node, vec![Some(4), Some(0)]);
        assert_eq!(trace.events, vec![StopEvent { node: 4, index: 0, remaining: Regime(0) }]);
        let est = evaluate_policy(&model, &g, &y0, EvalRule::Policy(&policy), 10, Noise::Gaussian, 1).unwrap();
        assert!((est.j - 0.5).abs() < 1e-15);
        assert!(epsilon_optimality(est.j, &policy.table, 0, &y0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn never_rule_with_unit_reward_is_exact() {
        let model = Model::new("one", 1, false).with_diffusion_1d(|_, _, _| 1.0).with_running_reward_1d(|_, _, _| 1.0);
        let y0 = SystemState::from_states_1d(&[(0.0, true), (1.0, true)]).unwrap();
        let est = evaluate_policy(&model, &grid(7), &y0, EvalRule::Rule(&StoppingRule::Never), 20, Noise::Gaussian, 0).unwrap();
        assert!((est.j - 1.0).abs() < 1e-12 && est.std_error < 1e-12);
    }

    #[test]
    fn deterministic_model_has_zero_standard_error() {
        let model = BuiltinModel::MeanReverterToMean { a: 1.0, sigma: 0.0, rate: 0.5, slope: 1.0, terminal_weight: 1.0, target: 0.0 }.build();
        let y0 = SystemState::from_states_1d(&[(0.0, true), (1.0, true)]).unwrap();
        let est = evaluate_policy(&model, &grid(5), &y0, EvalRule::Rule(&StoppingRule::Never), 8, Noise::Gaussian, 0).unwrap();
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn decoupled_particles_follow_their_single_rule() {
        let model = BuiltinModel::decoupled_additive().build();
        let g = grid(6);
        let (h, hw) = (0.25, 10);
        let single = solve_single(&model, &g, &Lattice1d::new(0.0, h, hw).unwrap()).unwrap();
        let policy = Arc::new(StoppingPolicy::new(table(&model, 2, &g, h, hw), DEFAULT_ETA).unwrap());
        let y0 = SystemState::from_states_1d(&[(0.0, true), (0.5, true)]).unwrap();
        for r in 0..40 {
            let (paths, trace) = run_policy(&policy, &model, &g, &y0, Noise::Lattice { h }, StreamKey::new(4, r)).unwrap();
            trace.validate().unwrap();
            for k in 0..2 {
                let rule_node = (0..g.n_nodes())
                    .find(|&s| {
                        let j = single.lattice.index_of(paths.x(s, k)[0]).unwrap();
                        s == g.n_steps || single.at_node(s, j, true) <= single.at_node(s, j, false)
                    })
                    .unwrap();
                assert_eq!(paths.stop_node[k], Some(rule_node));
            }
        }
    }

    #[test]
    fn trace_validation_rejects_bad_events() {
        let bad = PolicyTrace {
            initial: Regime(0b11),
            events: vec![
                StopEvent { node: 2, index: 0, remaining: Regime(0b10) },
                StopEvent { node: 1, index: 1, remaining: Regime(0) },
            ],
            clamps: 0,
        };
        assert!(bad.validate().is_err());
    }
}
