//! Euler-Maruyama simulation of the stopped `N`-particle system and of the
//! decoupled McKean-Vlasov cloud.
//!
//! Indicators follow the right-continuous convention: a particle whose
//! stopping node is `s` has `I = 0` at `s` and every later node, and its
//! position is frozen from `s` on. Stopped particles stay in the empirical
//! measure with indicator `0`.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{flow_distance, EmpiricalMeasure, MeasureFlow, Transport};
use crate::model::Model;

/// Uniform grid `t0 < t0 + dt < ... < T` with `n_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        let grid = Self { t0, t_end, n_steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t_end.is_finite() && self.t0 < self.t_end) {
            return Err(Error::InvalidGrid(format!(
                "need finite t0 < T, got [{}, {}]",
                self.t0, self.t_end
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.n_steps {
            self.t_end
        } else {
            self.t0 + node as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|s| self.time(s)).collect()
    }

    /// Same interval, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            n_steps: self.n_steps * factor.max(1),
            ..*self
        }
    }
}

/// Positions and indicators of `N` particles.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub alive: Vec<bool>,
}

impl SystemState {
    pub fn new(dim: usize, xs: Vec<f64>, alive: Vec<bool>) -> Result<Self> {
        if dim == 0 || xs.len() != dim * alive.len() || alive.is_empty() {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates for {} particles in dimension {dim}",
                xs.len(),
                alive.len()
            )));
        }
        if let Some(k) = xs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "initial position",
                atom: k / dim,
            });
        }
        Ok(Self { dim, xs, alive })
    }

    pub fn from_states_1d(states: &[(f64, bool)]) -> Result<Self> {
        Self::new(
            1,
            states.iter().map(|s| s.0).collect(),
            states.iter().map(|s| s.1).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }

    /// `m^N(y)`.
    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.xs.clone(), self.alive.clone())
            .expect("state invariants imply a valid measure")
    }
}

/// Law of a stopping node on `{0, .., n_steps} U {never}`; the last entry is
/// the mass on `never`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLaw {
    pub probs: Vec<f64>,
}

impl SurvivalLaw {
    pub fn new(grid: &TimeGrid, probs: Vec<f64>) -> Result<Self> {
        let law = Self { probs };
        law.validate(grid)?;
        Ok(law)
    }

    pub fn never(grid: &TimeGrid) -> Self {
        let mut probs = vec![0.0; grid.n_nodes() + 1];
        probs[grid.n_nodes()] = 1.0;
        Self { probs }
    }

    pub fn at_node(grid: &TimeGrid, node: usize) -> Self {
        let mut probs = vec![0.0; grid.n_nodes() + 1];
        probs[node.min(grid.n_nodes())] = 1.0;
        Self { probs }
    }

    /// Uniform over the grid nodes, no mass on `never`.
    pub fn uniform_nodes(grid: &TimeGrid) -> Self {
        let n = grid.n_nodes();
        let mut probs = vec![1.0 / n as f64; n + 1];
        probs[n] = 0.0;
        Self { probs }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.probs.len() != grid.n_nodes() + 1 {
            return Err(Error::InvalidRule(format!(
                "survival law has {} entries, grid needs {}",
                self.probs.len(),
                grid.n_nodes() + 1
            )));
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidRule("negative or non-finite probability".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRule(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    /// Inverse CDF at `u` in `[0, 1)`; `None` is `never`.
    pub fn sample(&self, u: f64) -> Option<usize> {
        let never = self.probs.len() - 1;
        let mut acc = 0.0;
        for (s, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc && *p > 0.0 {
                return (s != never).then_some(s);
            }
        }
        let last = self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(never);
        (last != never).then_some(last)
    }
}

/// Closed-loop stopping decisions taken at grid nodes.
pub trait StoppingDecider: Send + Sync {
    /// Particles to stop at `node`, in stopping order, given the state after
    /// all earlier decisions.
    fn decide(&self, node: usize, state: &SystemState) -> Result<Vec<usize>>;
}

#[derive(Clone)]
pub enum StoppingRule {
    Never,
    /// One entry per particle; `None` never stops.
    FixedTimes(Vec<Option<usize>>),
    /// I.i.d. stopping nodes drawn from each particle's own stream.
    IidSurvival(SurvivalLaw),
    PolicyDriven(Arc<dyn StoppingDecider>),
}

impl std::fmt::Debug for StoppingRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Never => f.write_str("Never"),
            Self::FixedTimes(t) => f.debug_tuple("FixedTimes").field(t).finish(),
            Self::IidSurvival(l) => f.debug_tuple("IidSurvival").field(l).finish(),
            Self::PolicyDriven(_) => f.write_str("PolicyDriven(..)"),
        }
    }
}

/// Draw every particle's stopping node from `law`. Initially dead particles
/// get node `0`.
pub fn iid_stopping_rule(
    law: &SurvivalLaw,
    grid: &TimeGrid,
    y0: &SystemState,
    rng: &mut impl Rng,
) -> Result<StoppingRule> {
    law.validate(grid)?;
    Ok(StoppingRule::FixedTimes(
        y0.alive
            .iter()
            .map(|&alive| {
                let node = law.sample(rng.random::<f64>());
                if alive {
                    node
                } else {
                    Some(0)
                }
            })
            .collect(),
    ))
}

/// Driving noise of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    Gaussian,
    /// Symmetric `+-1` increments.
    TwoPoint,
    /// The trinomial chain of the lattice solver on spacing `h` (d = 1).
    Lattice { h: f64 },
}

/// Trinomial probabilities `(down, stay, up)` on spacing `h` matching mean
/// `c h` and variance `a h^2` to first order, with `a = sigma^2 dt / h^2`
/// and `c = b dt / h`. Central when `|c| <= a`, upwind otherwise. When no
/// valid trinomial exists the stay probability is clipped to zero and the
/// flag is set.
pub fn trinomial(a: f64, c: f64) -> Result<([f64; 3], bool)> {
    if !(a.is_finite() && c.is_finite() && a >= 0.0) {
        return Err(Error::NonFiniteValue("lattice transition"));
    }
    let (down, up) = if c.abs() <= a {
        (0.5 * (a - c), 0.5 * (a + c))
    } else {
        (0.5 * a + (-c).max(0.0), 0.5 * a + c.max(0.0))
    };
    if down + up <= 1.0 {
        return Ok(([down, 1.0 - down - up, up], false));
    }
    let c = c.clamp(-1.0, 1.0);
    Ok(([0.5 * (1.0 - c), 0.0, 0.5 * (1.0 + c)], true))
}

/// Identifies the random streams of one replication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub replication: u64,
}

impl StreamKey {
    pub fn new(seed: u64, replication: u64) -> Self {
        Self { seed, replication }
    }

    /// Counter-based stream for `particle`.
    pub fn particle_rng(&self, particle: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replication.to_le_bytes());
        key[16..24].copy_from_slice(&particle.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// Auxiliary stream not tied to a particle (resampling, exploration).
    pub fn aux_rng(&self, tag: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replication.to_le_bytes());
        key[24..].copy_from_slice(&tag.wrapping_add(1).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    pub fn particle_rngs(&self, n: usize) -> Vec<ChaCha8Rng> {
        (0..n as u64).map(|k| self.particle_rng(k)).collect()
    }
}

/// Positions and indicators on every grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePaths {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n: usize,
    /// `[node][particle][coordinate]`.
    xs: Vec<f64>,
    /// `[node][particle]`.
    alive: Vec<bool>,
    /// Node at which the indicator drops to zero; `None` if it never does.
    pub stop_node: Vec<Option<usize>>,
    pub key: StreamKey,
}

impl ParticlePaths {
    pub fn x(&self, node: usize, k: usize) -> &[f64] {
        let at = (node * self.n + k) * self.dim;
        &self.xs[at..at + self.dim]
    }

    pub fn indicator(&self, node: usize, k: usize) -> bool {
        self.alive[node * self.n + k]
    }

    pub fn state(&self, node: usize) -> SystemState {
        let (a, b) = (node * self.n, (node + 1) * self.n);
        SystemState {
            dim: self.dim,
            xs: self.xs[a * self.dim..b * self.dim].to_vec(),
            alive: self.alive[a..b].to_vec(),
        }
    }

    /// `m^N(Y_s)`.
    pub fn measure(&self, node: usize) -> EmpiricalMeasure {
        self.state(node).measure()
    }

    pub fn flow(&self) -> MeasureFlow {
        let measures = (0..self.grid.n_nodes()).map(|s| self.measure(s)).collect();
        MeasureFlow::new(self.grid.times(), measures).expect("grid times increase")
    }

    pub fn terminal_state(&self) -> SystemState {
        self.state(self.grid.n_steps)
    }
}

/// Simulate the interacting system; particle `k` uses `key.particle_rng(k)`.
pub fn simulate_system(
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    rule: &StoppingRule,
    noise: Noise,
    key: StreamKey,
) -> Result<ParticlePaths> {
    let rngs = key.particle_rngs(y0.len());
    simulate_with_streams(model, grid, y0, rule, noise, key, rngs)
}

/// As [`simulate_system`] with explicit per-particle streams.
pub fn simulate_with_streams(
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    rule: &StoppingRule,
    noise: Noise,
    key: StreamKey,
    rngs: Vec<ChaCha8Rng>,
) -> Result<ParticlePaths> {
    run(model, grid, y0, rule, noise, key, rngs, None)
}

/// Particles driven by coefficients evaluated against `frozen` instead of
/// their own empirical measure.
pub fn simulate_decoupled(
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    rule: &StoppingRule,
    noise: Noise,
    key: StreamKey,
    frozen: &MeasureFlow,
) -> Result<ParticlePaths> {
    if frozen.len() != grid.n_nodes() {
        return Err(Error::GridMismatch);
    }
    let rngs = key.particle_rngs(y0.len());
    run(model, grid, y0, rule, noise, key, rngs, Some(frozen))
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    rule: &StoppingRule,
    noise: Noise,
    key: StreamKey,
    mut rngs: Vec<ChaCha8Rng>,
    frozen: Option<&MeasureFlow>,
) -> Result<ParticlePaths> {
    grid.validate()?;
    let (n, d) = (y0.len(), y0.dim);
    if d != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: d,
        });
    }
    if rngs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rngs.len(),
        });
    }
    if let Noise::Lattice { h } = noise {
        if d != 1 || !(h > 0.0) {
            return Err(Error::Unsupported("lattice noise needs d = 1 and h > 0".into()));
        }
    }

    // Stopping uniforms are drawn first so that noise draws line up by step.
    let mut stop_node: Vec<Option<usize>> = match rule {
        StoppingRule::Never | StoppingRule::PolicyDriven(_) => vec![None; n],
        StoppingRule::FixedTimes(times) => {
            if times.len() != n {
                return Err(Error::InvalidRule(format!(
                    "{} stopping times for {n} particles",
                    times.len()
                )));
            }
            if let Some(s) = times.iter().flatten().find(|s| **s > grid.n_steps) {
                return Err(Error::InvalidRule(format!("node {s} is off the grid")));
            }
            times.clone()
        }
        StoppingRule::IidSurvival(law) => {
            law.validate(grid)?;
            rngs.iter_mut()
                .map(|r| law.sample(r.random::<f64>()))
                .collect()
        }
    };
    for (k, &alive) in y0.alive.iter().enumerate() {
        if !alive {
            stop_node[k] = Some(0);
        }
    }
    let decider = match rule {
        StoppingRule::PolicyDriven(p) => Some(p.as_ref()),
        _ => None,
    };

    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut state = y0.clone();
    let mut xs = Vec::with_capacity(grid.n_nodes() * n * d);
    let mut alive = Vec::with_capacity(grid.n_nodes() * n);
    let (mut b, mut sigma, mut xi) = (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]);

    for s in 0..grid.n_nodes() {
        for k in 0..n {
            if stop_node[k].is_some_and(|t| t <= s) {
                state.alive[k] = false;
            }
        }
        if let Some(p) = decider {
            for k in p.decide(s, &state)? {
                if k >= n || !state.alive[k] {
                    return Err(Error::InvalidRule(format!(
                        "policy stopped particle {k}, which is not alive"
                    )));
                }
                state.alive[k] = false;
                stop_node[k] = Some(s);
            }
        }
        xs.extend_from_slice(&state.xs);
        alive.extend_from_slice(&state.alive);
        if s == grid.n_steps {
            break;
        }

        let t = grid.time(s);
        let own;
        let m = match frozen {
            Some(flow) => flow.at(s),
            None => {
                own = state.measure();
                &own
            }
        };
        let mut next = state.xs.clone();
        for k in 0..n {
            let rng = &mut rngs[k];
            match noise {
                Noise::Gaussian => xi.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
                Noise::TwoPoint => xi.iter_mut().for_each(|v| {
                    *v = if rng.random::<bool>() { 1.0 } else { -1.0 }
                }),
                Noise::Lattice { .. } => xi[0] = rng.random::<f64>(),
            }
            if !state.alive[k] {
                continue;
            }
            let x = state.x(k);
            model.drift(t, x, m, &mut b);
            model.diffusion(t, x, m, &mut sigma);
            let out = &mut next[k * d..(k + 1) * d];
            match noise {
                Noise::Lattice { h } => {
                    let (p, _) = trinomial(sigma[0] * sigma[0] * dt / (h * h), b[0] * dt / h)?;
                    let u = xi[0];
                    out[0] += if u < p[0] {
                        -h
                    } else if u < p[0] + p[1] {
                        0.0
                    } else {
                        h
                    };
                }
                _ => {
                    for r in 0..d {
                        let diffusion: f64 = (0..d).map(|c| sigma[r * d + c] * xi[c]).sum();
                        out[r] += b[r] * dt + diffusion * sqrt_dt;
                    }
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Simulation {
                    step: s,
                    particle: k,
                });
            }
        }
        state.xs = next;
    }

    Ok(ParticlePaths {
        grid: *grid,
        dim: d,
        n,
        xs,
        alive,
        stop_node,
        key,
    })
}

/// Independent replications `0..reps` in parallel.
pub fn simulate_replications(
    model: &Model,
    grid: &TimeGrid,
    y0: &SystemState,
    rule: &StoppingRule,
    noise: Noise,
    seed: u64,
    reps: usize,
) -> Result<Vec<ParticlePaths>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|r| simulate_system(model, grid, y0, rule, noise, StreamKey::new(seed, r)))
        .collect()
}

/// Write `replication,particle,node,X,I` rows (`x1..xd` when `d > 1`).
pub fn write_paths<W: Write>(paths: &[ParticlePaths], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = paths.first().map_or(1, |p| p.dim);
    let mut header: Vec<String> = vec!["replication".into(), "particle".into(), "node".into()];
    if dim == 1 {
        header.push("X".into());
    } else {
        header.extend((1..=dim).map(|j| format!("x{j}")));
    }
    header.push("I".into());
    w.write_record(&header)?;
    for p in paths {
        for k in 0..p.n {
            for s in 0..p.grid.n_nodes() {
                let mut row = vec![p.key.replication.to_string(), k.to_string(), s.to_string()];
                row.extend(p.x(s, k).iter().map(|v| v.to_string()));
                row.push(if p.indicator(s, k) { "1" } else { "0" }.into());
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentSummary {
    pub p: u32,
    /// `(1/N) sum_k sup_s |X^k_s|^p`.
    pub sup_moment: f64,
    /// `(window in steps, mean |X_{s+w} - X_s|^p)` over dyadic windows.
    pub increments: Vec<(usize, f64)>,
}

pub fn moment_check(paths: &ParticlePaths, p: u32) -> Result<MomentSummary> {
    if !(p == 1 || p == 2) {
        return Err(Error::Unsupported(format!("moment order {p}, expected 1 or 2")));
    }
    let norm_p = |v: &[f64]| -> f64 {
        let sq: f64 = v.iter().map(|a| a * a).sum();
        if p == 1 {
            sq.sqrt()
        } else {
            sq
        }
    };
    let nodes = paths.grid.n_nodes();
    let sup_moment = (0..paths.n)
        .map(|k| (0..nodes).map(|s| norm_p(paths.x(s, k))).fold(0.0, f64::max))
        .sum::<f64>()
        / paths.n as f64;
    let mut increments = Vec::new();
    let mut w = 1;
    let mut diff = vec![0.0; paths.dim];
    while w <= paths.grid.n_steps {
        let mut acc = 0.0;
        let mut count = 0usize;
        for k in 0..paths.n {
            for s in 0..nodes - w {
                for (j, v) in diff.iter_mut().enumerate() {
                    *v = paths.x(s + w, k)[j] - paths.x(s, k)[j];
                }
                acc += norm_p(&diff);
                count += 1;
            }
        }
        increments.push((w, acc / count as f64));
        w *= 2;
    }
    Ok(MomentSummary {
        p,
        sup_moment,
        increments,
    })
}

/// Inverse-CDF resampling of `m` to `count` equally weighted particles at the
/// stratified quantiles `(j + u) / count`.
pub fn resample(m: &EmpiricalMeasure, count: usize, rng: &mut impl Rng) -> Result<SystemState> {
    if m.is_empty() || count == 0 {
        return Err(Error::InvalidMeasure("cannot resample an empty measure".into()));
    }
    let u: f64 = rng.random();
    let mut xs = Vec::with_capacity(count * m.dim());
    let mut alive = Vec::with_capacity(count);
    let (mut atom, mut acc) = (0usize, m.weight(0));
    for j in 0..count {
        let q = (j as f64 + u) / count as f64;
        while q >= acc && atom + 1 < m.len() {
            atom += 1;
            acc += m.weight(atom);
        }
        xs.extend_from_slice(m.x(atom));
        alive.push(m.is_alive(atom));
    }
    SystemState::new(m.dim(), xs, alive)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardParams {
    /// Cloud size `M`.
    pub cloud: usize,
    pub k_max: usize,
    pub tol: f64,
}

#[derive(Clone, Debug)]
pub struct McKeanVlasovFlow {
    pub flow: MeasureFlow,
    /// The cloud of the last iteration.
    pub cloud: ParticlePaths,
    /// Distance between the last two iterates.
    pub gap: f64,
    pub gaps: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// True when `gap` is the index-coupling bound rather than exact `W2`.
    pub gap_is_bound: bool,
}

/// Clouds up to this size get the exact `W2` flow distance.
const EXACT_GAP_MAX: usize = 256;

/// Picard iteration on the measure flow. Every iterate reuses the same
/// streams, so particle `k` keeps its noise and stopping node; above
/// `EXACT_GAP_MAX` particles the gap is the `W2` cost of pairing equal
/// indices, an upper bound on the exact distance.
pub fn mckean_vlasov_flow(
    model: &Model,
    m0: &EmpiricalMeasure,
    grid: &TimeGrid,
    rule: &StoppingRule,
    noise: Noise,
    params: PicardParams,
    key: StreamKey,
) -> Result<McKeanVlasovFlow> {
    if matches!(rule, StoppingRule::PolicyDriven(_)) {
        return Err(Error::Unsupported(
            "the limit flow needs a rule independent of the paths".into(),
        ));
    }
    if params.k_max == 0 {
        return Err(Error::config("k_max", "must be at least 1"));
    }
    let y0 = resample(m0, params.cloud, &mut key.aux_rng(0))?;
    let mut candidate = MeasureFlow::constant(grid.times(), y0.measure())?;
    let exact = params.cloud <= EXACT_GAP_MAX;
    let mut gaps = Vec::new();
    loop {
        let cloud = simulate_decoupled(model, grid, &y0, rule, noise, key, &candidate)?;
        let flow = cloud.flow();
        let gap = if exact {
            flow_distance(&candidate, &flow, &Transport::default())?
        } else {
            coupled_gap(&candidate, &flow)
        };
        gaps.push(gap);
        let iterations = gaps.len();
        if gap <= params.tol || iterations >= params.k_max {
            return Ok(McKeanVlasovFlow {
                flow,
                cloud,
                gap,
                gaps,
                iterations,
                converged: gap <= params.tol,
                gap_is_bound: !exact,
            });
        }
        candidate = flow;
    }
}

/// `max_s sqrt(sum_k w_k (|dx_k|^2 + |di_k|^2))` pairing atoms by index.
fn coupled_gap(a: &MeasureFlow, b: &MeasureFlow) -> f64 {
    let mut worst: f64 = 0.0;
    for (ma, mb) in a.measures().iter().zip(b.measures()) {
        let mut acc = 0.0;
        for k in 0..ma.len() {
            let mut d: f64 = ma.x(k).iter().zip(mb.x(k)).map(|(u, v)| (u - v) * (u - v)).sum();
            if ma.is_alive(k) != mb.is_alive(k) {
                d += 1.0;
            }
            acc += ma.weight(k) * d;
        }
        worst = worst.max(acc.sqrt());
    }
    worst
}
