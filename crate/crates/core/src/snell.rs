//! Backward induction for the cascade of stopping problems indexed by the
//! regime `i in {0, 1}^N`.
//!
//! Regimes are solved in increasing number of alive particles. In regime `i`
//! the value is the larger of the obstacle `max_k u(., i^{-k})` and the
//! one-step continuation; simultaneous stops at one node are successive
//! single drops.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::model::{eval_running, eval_terminal, BuiltinModel, Model};
use crate::simulate::{
    simulate_system, trinomial, Noise, StoppingRule, StreamKey, SystemState, TimeGrid,
};

pub const MAX_PARTICLES: usize = 16;
/// Largest lattice backend: `N <= 3`.
pub const LATTICE_MAX_PARTICLES: usize = 3;
/// Stored values across all regimes and nodes.
pub const MAX_TABLE_ENTRIES: usize = 1 << 26;
/// Queries further outside the lattice than this fraction of its width fail.
const CLAMP_LIMIT: f64 = 0.25;

/// Set of alive particles as a bit mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Regime(pub u32);

impl Regime {
    pub fn all_alive(n: usize) -> Self {
        Regime(((1u64 << n) - 1) as u32)
    }

    pub fn from_indicators(alive: &[bool]) -> Self {
        Regime(
            alive
                .iter()
                .enumerate()
                .filter(|a| *a.1)
                .fold(0, |m, (k, _)| m | (1 << k)),
        )
    }

    pub fn is_alive(self, k: usize) -> bool {
        self.0 >> k & 1 == 1
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// `i^{-k}`.
    pub fn drop(self, k: usize) -> Self {
        Regime(self.0 & !(1 << k))
    }

    pub fn alive(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |k| self.0 >> k & 1 == 1)
    }

    /// `self < other`: a strict subset of the alive set.
    pub fn is_below(self, other: Self) -> bool {
        self != other && self.0 & !other.0 == 0
    }

    pub fn indicators(self, n: usize) -> Vec<bool> {
        (0..n).map(|k| self.is_alive(k)).collect()
    }
}

/// Points `center + (j - half_width) h` for `j = 0, .., 2 half_width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice1d {
    pub center: f64,
    pub h: f64,
    pub half_width: usize,
}

impl Lattice1d {
    pub fn new(center: f64, h: f64, half_width: usize) -> Result<Self> {
        if !(center.is_finite() && h.is_finite() && h > 0.0) || half_width == 0 {
            return Err(Error::config(
                "lattice",
                format!("need finite center, h > 0, half_width >= 1; got {center}, {h}, {half_width}"),
            ));
        }
        Ok(Self {
            center,
            h,
            half_width,
        })
    }

    /// Spacing `sigma sqrt(dt)`: the trinomial degenerates to two points.
    pub fn tree_matched(sigma: f64, grid: &TimeGrid, center: f64, half_width: usize) -> Result<Self> {
        Self::new(center, sigma * grid.dt().sqrt(), half_width)
    }

    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, j: usize) -> f64 {
        self.center + (j as f64 - self.half_width as f64) * self.h
    }

    pub fn lo(&self) -> f64 {
        self.point(0)
    }

    pub fn hi(&self) -> f64 {
        self.point(self.len() - 1)
    }

    /// Index of the node at `x`, if `x` is one.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let r = (x - self.lo()) / self.h;
        let j = r.round();
        ((r - j).abs() <= 1e-9 && j >= 0.0 && j < self.len() as f64).then_some(j as usize)
    }

    /// `(lower node, upper node, upper weight, clamped)`; nodes are exact.
    fn locate(&self, x: f64) -> Result<(usize, usize, f64, bool)> {
        let last = self.len() - 1;
        let width = self.hi() - self.lo();
        if !x.is_finite() || x < self.lo() - CLAMP_LIMIT * width || x > self.hi() + CLAMP_LIMIT * width {
            return Err(Error::OutOfBounds(format!(
                "x = {x} outside the lattice [{}, {}]",
                self.lo(),
                self.hi()
            )));
        }
        if let Some(j) = self.index_of(x) {
            return Ok((j, j, 0.0, false));
        }
        if x < self.lo() {
            return Ok((0, 0, 0.0, true));
        }
        if x > self.hi() {
            return Ok((last, last, 0.0, true));
        }
        let r = (x - self.lo()) / self.h;
        let j = (r.floor() as usize).min(last - 1);
        Ok((j, j + 1, r - j as f64, false))
    }
}

/// Lattice configuration; `h = None` selects the tree-matched spacing from
/// the diffusion at `(t0, center)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub center: f64,
    #[serde(default)]
    pub h: Option<f64>,
    pub half_width: usize,
}

impl LatticeSpec {
    pub fn resolve(&self, model: &Model, grid: &TimeGrid) -> Result<Lattice1d> {
        match self.h {
            Some(h) => Lattice1d::new(self.center, h, self.half_width),
            None => {
                let mut s = [0.0];
                let m = EmpiricalMeasure::dirac(&[self.center], true);
                model.diffusion(grid.t0, &[self.center], &m, &mut s);
                Lattice1d::tree_matched(s[0].abs(), grid, self.center, self.half_width)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmcParams {
    /// Training systems.
    pub paths: usize,
    pub seed: u64,
    /// Initial configuration `(x, i)` of the training systems.
    pub origin: Vec<(f64, bool)>,
    /// Ridge added when the normal equations are ill-conditioned.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_noise")]
    pub noise: Noise,
    /// Per-node stopping hazard of the exploration rule is `max_hazard u^2`.
    #[serde(default = "default_hazard")]
    pub max_hazard: f64,
}

fn default_ridge() -> f64 {
    1e-8
}

fn default_noise() -> Noise {
    Noise::Gaussian
}

fn default_hazard() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Lattice(LatticeSpec),
    Lsmc(LsmcParams),
}

/// Value of the single-particle problem on a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleValue {
    pub grid: TimeGrid,
    pub lattice: Lattice1d,
    /// `[node][j]`.
    alive: Vec<f64>,
    /// `g(delta_x)` per lattice node.
    stopped: Vec<f64>,
    /// Transitions whose stay probability was clipped to zero.
    pub clipped: usize,
}

impl SingleValue {
    pub fn at_node(&self, node: usize, j: usize, alive: bool) -> f64 {
        if alive {
            self.alive[node * self.lattice.len() + j]
        } else {
            self.stopped[j]
        }
    }

    pub fn alive_values(&self, node: usize) -> &[f64] {
        let p = self.lattice.len();
        &self.alive[node * p..(node + 1) * p]
    }

    /// Linear interpolation in `x`.
    pub fn value(&self, node: usize, x: f64, alive: bool) -> Result<f64> {
        let (j0, j1, w, _) = self.lattice.locate(x)?;
        let v0 = self.at_node(node, j0, alive);
        if w == 0.0 {
            return Ok(v0);
        }
        Ok((1.0 - w) * v0 + w * self.at_node(node, j1, alive))
    }
}

/// Single-particle optimal stopping for a decoupled one-dimensional model.
pub fn solve_single(model: &Model, grid: &TimeGrid, lattice: &Lattice1d) -> Result<SingleValue> {
    grid.validate()?;
    if model.is_coupled() || model.dim() != 1 {
        return Err(Error::Unsupported(
            "the single-particle solver needs a decoupled one-dimensional model".into(),
        ));
    }
    let (p, nodes, dt, h) = (lattice.len(), grid.n_nodes(), grid.dt(), lattice.h);
    let stopped: Vec<f64> = (0..p).map(|j| model.terminal_at_point(&[lattice.point(j)])).collect();
    if stopped.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("terminal reward"));
    }
    let mut alive = vec![0.0; nodes * p];
    alive[grid.n_steps * p..].copy_from_slice(&stopped);
    let (mut b, mut s) = ([0.0], [0.0]);
    let mut clipped = 0;
    for node in (0..grid.n_steps).rev() {
        let t = grid.time(node);
        let (head, tail) = alive.split_at_mut((node + 1) * p);
        let next = &tail[..p];
        let here = &mut head[node * p..];
        for j in 0..p {
            let x = [lattice.point(j)];
            let m = EmpiricalMeasure::dirac(&x, true);
            let run = eval_running(model, t, &m)? * dt;
            model.drift(t, &x, &m, &mut b);
            model.diffusion(t, &x, &m, &mut s);
            let (probs, clip) = trinomial(s[0] * s[0] * dt / (h * h), b[0] * dt / h)?;
            clipped += clip as usize;
            let mut e = 0.0;
            for (q, pq) in probs.iter().enumerate() {
                let jn = (j as isize + q as isize - 1).clamp(0, p as isize - 1) as usize;
                e += 1.0 * pq * next[jn];
            }
            here[j] = stopped[j].max(run + e);
        }
    }
    Ok(SingleValue {
        grid: *grid,
        lattice: *lattice,
        alive,
        stopped,
        clipped,
    })
}

/// Lattice values for every regime of `N` particles.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeTable {
    pub lattice: Lattice1d,
    n: usize,
    states: usize,
    nodes: usize,
    /// Indexed by regime mask; each `[node][state]`, particle 0 varying fastest.
    values: Vec<Vec<f64>>,
}

impl LatticeTable {
    pub fn states(&self) -> usize {
        self.states
    }

    /// Values of `regime` at `node`, one per product state.
    pub fn values(&self, regime: Regime, node: usize) -> &[f64] {
        &self.values[regime.0 as usize][node * self.states..(node + 1) * self.states]
    }

    /// Lattice indices of a product state.
    pub fn coordinates(&self, state: usize) -> Vec<usize> {
        let p = self.lattice.len();
        (0..self.n).map(|k| state / p.pow(k as u32) % p).collect()
    }

    fn interpolate(&self, node: usize, xs: &[f64], regime: Regime) -> Result<(f64, bool)> {
        let p = self.lattice.len();
        let mut corners = Vec::with_capacity(self.n);
        let mut clamped = false;
        for &x in xs {
            let c = self.lattice.locate(x)?;
            clamped |= c.3;
            corners.push(c);
        }
        let vals = self.values(regime, node);
        let mut acc = 0.0;
        for corner in 0..1usize << self.n {
            let mut weight = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            let mut skip = false;
            for (k, &(j0, j1, w, _)) in corners.iter().enumerate() {
                let upper = corner >> k & 1 == 1;
                if upper && w == 0.0 {
                    skip = true;
                    break;
                }
                let (j, wk) = if upper { (j1, w) } else { (j0, 1.0 - w) };
                weight *= wk;
                idx += j * stride;
                stride *= p;
            }
            if !skip {
                acc += weight * vals[idx];
            }
        }
        Ok((acc, clamped))
    }
}

fn masks_by_count(n: usize) -> Vec<Regime> {
    let mut masks: Vec<Regime> = (0..1u32 << n).map(Regime).collect();
    masks.sort_by_key(|m| (m.count(), m.0));
    masks
}

fn cascade_lattice(
    model: &Model,
    n: usize,
    grid: &TimeGrid,
    lattice: Lattice1d,
) -> Result<(LatticeTable, Vec<String>)> {
    if model.dim() != 1 {
        return Err(Error::Unsupported("the lattice backend is one-dimensional".into()));
    }
    if n == 0 || n > LATTICE_MAX_PARTICLES {
        return Err(Error::Capacity(format!(
            "lattice backend supports 1 to {LATTICE_MAX_PARTICLES} particles, got {n}"
        )));
    }
    let p = lattice.len();
    let states = p.pow(n as u32);
    let nodes = grid.n_nodes();
    let entries = (states * nodes) << n;
    if entries > MAX_TABLE_ENTRIES {
        return Err(Error::Capacity(format!(
            "{entries} table entries exceed the budget of {MAX_TABLE_ENTRIES}"
        )));
    }
    let point = |state: usize, k: usize| lattice.point(state / p.pow(k as u32) % p);
    let terminal: Vec<f64> = (0..states)
        .map(|f| {
            let xs: Vec<f64> = (0..n).map(|k| point(f, k)).collect();
            eval_terminal(model, &EmpiricalMeasure::uniform(1, xs, vec![false; n])?)
        })
        .collect::<Result<_>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); 1 << n];
    values[0] = terminal.repeat(nodes);
    let mut clipped = 0;
    for count in 1..=n {
        let layer: Vec<Regime> = masks_by_count(n).into_iter().filter(|m| m.count() == count).collect();
        let solved: Vec<(Vec<f64>, usize)> = layer
            .par_iter()
            .map(|&regime| solve_regime(model, n, grid, &lattice, regime, &terminal, &values))
            .collect::<Result<_>>()?;
        for (regime, (v, c)) in layer.into_iter().zip(solved) {
            values[regime.0 as usize] = v;
            clipped += c;
        }
    }
    let table = LatticeTable {
        lattice,
        n,
        states,
        nodes,
        values,
    };
    let mut warnings = Vec::new();
    if clipped > 0 {
        warnings.push(format!(
            "{clipped} lattice transitions clipped: sigma^2 dt / h^2 + |b| dt / h exceeded 1"
        ));
    }
    Ok((table, warnings))
}

fn solve_regime(
    model: &Model,
    n: usize,
    grid: &TimeGrid,
    lattice: &Lattice1d,
    regime: Regime,
    terminal: &[f64],
    lower: &[Vec<f64>],
) -> Result<(Vec<f64>, usize)> {
    let (p, dt, h) = (lattice.len(), grid.dt(), lattice.h);
    let states = terminal.len();
    let alive_idx: Vec<usize> = regime.alive().collect();
    let strides: Vec<usize> = (0..n).map(|k| p.pow(k as u32)).collect();
    let combos = 3usize.pow(alive_idx.len() as u32);
    let indicators = regime.indicators(n);
    let mut u = vec![0.0; grid.n_nodes() * states];
    u[grid.n_steps * states..].copy_from_slice(terminal);
    let mut probs = vec![[0.0; 3]; alive_idx.len()];
    let (mut j, mut xs) = (vec![0usize; n], vec![0.0; n]);
    let (mut b, mut s) = ([0.0], [0.0]);
    let mut clipped = 0;
    for node in (0..grid.n_steps).rev() {
        let t = grid.time(node);
        let (head, tail) = u.split_at_mut((node + 1) * states);
        let next = &tail[..states];
        let here = &mut head[node * states..];
        for f in 0..states {
            for k in 0..n {
                j[k] = f / strides[k] % p;
                xs[k] = lattice.point(j[k]);
            }
            let m = EmpiricalMeasure::uniform(1, xs.clone(), indicators.clone())?;
            let run = eval_running(model, t, &m)? * dt;
            for (q, &k) in alive_idx.iter().enumerate() {
                let x = [xs[k]];
                model.drift(t, &x, &m, &mut b);
                model.diffusion(t, &x, &m, &mut s);
                let (pr, clip) = trinomial(s[0] * s[0] * dt / (h * h), b[0] * dt / h)?;
                probs[q] = pr;
                clipped += clip as usize;
            }
            let mut e = 0.0;
            for c in 0..combos {
                let (mut prob, mut idx, mut digits) = (1.0, f, c);
                for (q, &k) in alive_idx.iter().enumerate() {
                    let d = digits % 3;
                    digits /= 3;
                    prob *= probs[q][d];
                    let jn = (j[k] as isize + d as isize - 1).clamp(0, p as isize - 1) as usize;
                    idx = idx + jn * strides[k] - j[k] * strides[k];
                }
                e += prob * next[idx];
            }
            let obstacle = alive_idx
                .iter()
                .map(|&k| lower[regime.drop(k).0 as usize][node * states + f])
                .fold(f64::NEG_INFINITY, f64::max);
            here[f] = obstacle.max(run + e);
        }
    }
    Ok((u, clipped))
}

/// Regression representation of the continuation values.
///
/// Values are stored relative to `G(y) = g(m^N(y))`, the reward of stopping
/// everyone now: `v^N = G + w`, `w = 0` once all are stopped, and
/// `w(i) = max(R(i), max_k w(i^{-k}))` with `R` the regressed continuation
/// residual. `G` does not depend on the regime, so every stop-or-continue
/// comparison reads `w` only.
#[derive(Clone, Debug)]
pub struct LsmcTable {
    n: usize,
    /// Node times `t_0..t_{n-1}`.
    times: Vec<f64>,
    /// `[node][knot]`, nodes `0..n_steps`.
    knots: Vec<f64>,
    /// `[node][basis]`.
    coefficients: Vec<f64>,
    model: Model,
    model_spec: Option<BuiltinModel>,
}

/// Hinge knots per node, at quantiles of the alive training positions.
pub const LSMC_KNOTS: usize = 5;

/// Constant, alive sums of `1, x, x^2` and the hinges, stopped sums of
/// `x, x^2`, products of the alive `1, x, x^2` and stopped `x` sums, and the
/// model's running reward `F(t, m)` and terminal reward `G`.
pub const LSMC_BASIS: usize = 1 + 3 + LSMC_KNOTS + 2 + 10 + 2;

/// Every sum is over particles and divided by `N`. `g` is `G(xs)`.
fn lsmc_features(
    model: &Model,
    t: f64,
    xs: &[f64],
    regime: Regime,
    knots: &[f64],
    g: f64,
    out: &mut [f64; LSMC_BASIS],
) -> Result<()> {
    let inv = 1.0 / xs.len() as f64;
    out.fill(0.0);
    out[0] = 1.0;
    for (k, &x) in xs.iter().enumerate() {
        if regime.is_alive(k) {
            out[1] += inv;
            out[2] += x * inv;
            out[3] += x * x * inv;
            for (j, &c) in knots.iter().enumerate() {
                out[4 + j] += (x - c).max(0.0) * inv;
            }
        } else {
            out[4 + LSMC_KNOTS] += x * inv;
            out[5 + LSMC_KNOTS] += x * x * inv;
        }
    }
    let z = [out[1], out[2], out[3], out[4 + LSMC_KNOTS]];
    let mut at = 6 + LSMC_KNOTS;
    for a in 0..4 {
        for b in a..4 {
            out[at] = z[a] * z[b];
            at += 1;
        }
    }
    let m = EmpiricalMeasure::uniform(1, xs.to_vec(), regime.indicators(xs.len()))?;
    out[at] = eval_running(model, t, &m)?;
    out[at + 1] = g;
    Ok(())
}

impl LsmcTable {
    fn nodes(&self) -> usize {
        self.coefficients.len() / LSMC_BASIS
    }

    fn residual(&self, node: usize, xs: &[f64], regime: Regime, g: f64) -> Result<f64> {
        let mut phi = [0.0; LSMC_BASIS];
        let knots = &self.knots[node * LSMC_KNOTS..(node + 1) * LSMC_KNOTS];
        lsmc_features(&self.model, self.times[node], xs, regime, knots, g, &mut phi)?;
        Ok(self.coefficients[node * LSMC_BASIS..(node + 1) * LSMC_BASIS]
            .iter()
            .zip(&phi)
            .map(|(b, f)| b * f)
            .sum())
    }

    fn terminal(&self, xs: &[f64]) -> Result<f64> {
        let m = EmpiricalMeasure::uniform(1, xs.to_vec(), vec![false; xs.len()])?;
        eval_terminal(&self.model, &m)
    }

    /// `w`: exact maximum over drop sequences, memoised over sub-regimes.
    fn excess(&self, node: usize, xs: &[f64], regime: Regime, g: f64) -> Result<f64> {
        if node >= self.nodes() {
            return Ok(0.0);
        }
        let alive: Vec<usize> = regime.alive().collect();
        let mut w = vec![0.0; 1 << alive.len()];
        for sub in 1..w.len() {
            let mask = alive
                .iter()
                .enumerate()
                .filter(|(q, _)| sub >> q & 1 == 1)
                .fold(0u32, |m, (_, &k)| m | 1 << k);
            let mut best = self.residual(node, xs, Regime(mask), g)?;
            for q in 0..alive.len() {
                if sub >> q & 1 == 1 {
                    best = best.max(w[sub ^ 1 << q]);
                }
            }
            w[sub] = best;
        }
        Ok(w[w.len() - 1])
    }

    pub fn value(&self, node: usize, xs: &[f64], regime: Regime) -> Result<f64> {
        if xs.len() != self.n {
            return Err(Error::Capacity(format!("table holds {} particles, got {}", self.n, xs.len())));
        }
        let g = self.terminal(xs)?;
        Ok(g + self.excess(node, xs, regime, g)?)
    }
}

/// `q`-quantiles `(j + 1) / (K + 1)` of `xs`; `fallback` when empty.
fn quantile_knots(mut xs: Vec<f64>, fallback: f64) -> [f64; LSMC_KNOTS] {
    if xs.is_empty() {
        return [fallback; LSMC_KNOTS];
    }
    xs.sort_by(f64::total_cmp);
    std::array::from_fn(|j| xs[((j + 1) * xs.len() / (LSMC_KNOTS + 1)).min(xs.len() - 1)])
}

fn cascade_lsmc(model: &Model, n: usize, grid: &TimeGrid, params: &LsmcParams, spec: Option<&BuiltinModel>) -> Result<(LsmcTable, Vec<String>)> {
    if model.dim() != 1 {
        return Err(Error::Unsupported("the regression backend is one-dimensional".into()));
    }
    if n == 0 || n > MAX_PARTICLES {
        return Err(Error::Capacity(format!("regression backend supports 1 to {MAX_PARTICLES} particles")));
    }
    if params.origin.len() != n {
        return Err(Error::config("backend.origin", format!("expected {n} particles, got {}", params.origin.len())));
    }
    if params.paths < 2 {
        return Err(Error::config("backend.paths", "need at least 2 training paths"));
    }
    let origin = SystemState::from_states_1d(&params.origin)?;
    let paths: Vec<_> = (0..params.paths as u64)
        .into_par_iter()
        .map(|r| {
            let key = StreamKey::new(params.seed, r);
            let mut rng = key.aux_rng(1);
            let hazard = params.max_hazard * rng.random::<f64>().powi(2);
            let times = (0..n)
                .map(|_| (0..grid.n_nodes()).find(|_| rng.random::<f64>() < hazard))
                .collect();
            simulate_system(model, grid, &origin, &StoppingRule::FixedTimes(times), params.noise, key)
        })
        .collect::<Result<_>>()?;
    let terminal = |xs: &[f64]| eval_terminal(model, &EmpiricalMeasure::uniform(1, xs.to_vec(), vec![false; xs.len()])?);
    // G at every (path, node), reused as the next node's baseline
    let baseline: Vec<Vec<f64>> = paths
        .par_iter()
        .map(|p| (0..grid.n_nodes()).map(|s| terminal(&p.state(s).xs)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let mut knots = vec![0.0; grid.n_steps * LSMC_KNOTS];
    for node in 0..grid.n_steps {
        let alive: Vec<f64> = paths
            .iter()
            .flat_map(|p| (0..n).filter(move |&k| p.indicator(node, k)).map(move |k| p.x(node, k)[0]))
            .collect();
        let fallback = origin.xs.iter().sum::<f64>() / n as f64;
        knots[node * LSMC_KNOTS..(node + 1) * LSMC_KNOTS].copy_from_slice(&quantile_knots(alive, fallback));
    }
    let mut table = LsmcTable {
        n,
        times: (0..grid.n_steps).map(|s| grid.time(s)).collect(),
        knots,
        coefficients: vec![0.0; grid.n_steps * LSMC_BASIS],
        model: model.clone(),
        model_spec: spec.cloned(),
    };
    let mut warnings = Vec::new();
    let dt = grid.dt();
    for node in (0..grid.n_steps).rev() {
        let t = grid.time(node);
        let node_knots = table.knots[node * LSMC_KNOTS..(node + 1) * LSMC_KNOTS].to_vec();
        let samples: Vec<([f64; LSMC_BASIS], f64)> = paths
            .par_iter()
            .zip(&baseline)
            .filter_map(|(path, g)| {
                let here = path.state(node);
                let regime = Regime::from_indicators(&here.alive);
                if regime.count() == 0 {
                    return None;
                }
                let next = path.state(node + 1);
                let sample = || {
                    let run = eval_running(model, t, &here.measure())? * dt;
                    let target = run + g[node + 1] + table.excess(node + 1, &next.xs, regime, g[node + 1])? - g[node];
                    let mut phi = [0.0; LSMC_BASIS];
                    lsmc_features(model, t, &here.xs, regime, &node_knots, g[node], &mut phi)?;
                    Ok((phi, target))
                };
                Some(sample())
            })
            .collect::<Result<_>>()?;
        let (beta, note) = regress(&samples, params.ridge);
        if let Some(note) = note {
            warnings.push(format!("node {node}: {note}"));
        }
        table.coefficients[node * LSMC_BASIS..(node + 1) * LSMC_BASIS].copy_from_slice(&beta);
    }
    Ok((table, warnings))
}

/// Least squares with a ridge fallback; the note reports the fallback.
fn regress(rows: &[([f64; LSMC_BASIS], f64)], ridge: f64) -> ([f64; LSMC_BASIS], Option<String>) {
    let mut out = [0.0; LSMC_BASIS];
    if rows.is_empty() {
        return (out, Some("no training samples, continuation set to 0".into()));
    }
    let mut xtx = DMatrix::<f64>::zeros(LSMC_BASIS, LSMC_BASIS);
    let mut xty = DVector::<f64>::zeros(LSMC_BASIS);
    for (phi, y) in rows {
        for a in 0..LSMC_BASIS {
            xty[a] += phi[a] * y;
            for b in a..LSMC_BASIS {
                xtx[(a, b)] += phi[a] * phi[b];
            }
        }
    }
    for a in 0..LSMC_BASIS {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let eig = xtx.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let mut note = None;
    if rows.len() < LSMC_BASIS || lo <= hi * 1e-12 {
        let lambda = ridge.max(1e-10 * hi.max(1.0));
        for a in 0..LSMC_BASIS {
            xtx[(a, a)] += lambda;
        }
        note = Some(format!(
            "ill-conditioned regression ({} samples, eigenvalues {lo:.3e}..{hi:.3e}); ridge {lambda:.3e}",
            rows.len()
        ));
    }
    let beta = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => xtx.svd(true, true).solve(&xty, 1e-14).unwrap_or_else(|_| DVector::zeros(LSMC_BASIS)),
    };
    out.copy_from_slice(beta.as_slice());
    (out, note)
}

#[derive(Clone, Debug)]
pub enum TableData {
    Lattice(LatticeTable),
    Lsmc(LsmcTable),
}

/// Values `v^N(t, y, i)` on every grid node and regime.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub n: usize,
    pub grid: TimeGrid,
    pub data: TableData,
    /// Conditioning and boundary diagnostics.
    pub warnings: Vec<String>,
}

/// Solve the cascade for `n` particles. `spec` is recorded in regression
/// tables so they can be read back.
pub fn solve_cascade(model: &Model, n: usize, grid: &TimeGrid, backend: &Backend) -> Result<ValueTable> {
    solve_cascade_with_spec(model, None, n, grid, backend)
}

pub fn solve_cascade_with_spec(
    model: &Model,
    spec: Option<&BuiltinModel>,
    n: usize,
    grid: &TimeGrid,
    backend: &Backend,
) -> Result<ValueTable> {
    grid.validate()?;
    let (data, warnings) = match backend {
        Backend::Lattice(l) => {
            let (t, w) = cascade_lattice(model, n, grid, l.resolve(model, grid)?)?;
            (TableData::Lattice(t), w)
        }
        Backend::Lsmc(params) => {
            let (t, w) = cascade_lsmc(model, n, grid, params, spec)?;
            (TableData::Lsmc(t), w)
        }
    };
    Ok(ValueTable {
        n,
        grid: *grid,
        data,
        warnings,
    })
}

impl ValueTable {
    pub fn backend_tag(&self) -> &'static str {
        match self.data {
            TableData::Lattice(_) => "lattice",
            TableData::Lsmc(_) => "lsmc",
        }
    }

    pub fn lattice(&self) -> Option<&LatticeTable> {
        match &self.data {
            TableData::Lattice(t) => Some(t),
            TableData::Lsmc(_) => None,
        }
    }

    /// `v^N(t_node, y)`, interpolated multilinearly on the lattice.
    pub fn value_at(&self, node: usize, y: &SystemState) -> Result<f64> {
        Ok(self.value_at_clamped(node, y)?.0)
    }

    /// Also reports whether a coordinate was clamped to the lattice.
    pub fn value_at_clamped(&self, node: usize, y: &SystemState) -> Result<(f64, bool)> {
        if node > self.grid.n_steps {
            return Err(Error::OutOfBounds(format!("node {node} beyond {}", self.grid.n_steps)));
        }
        if y.len() != self.n || y.dim != 1 {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: y.len(),
            });
        }
        let regime = Regime::from_indicators(&y.alive);
        match &self.data {
            TableData::Lattice(t) => t.interpolate(node, &y.xs, regime),
            TableData::Lsmc(t) => Ok((t.value(node, &y.xs, regime)?, false)),
        }
    }

    /// Mass that the chain started at `y0` (no stopping) pushes against the
    /// lattice edges over the horizon.
    pub fn boundary_leakage(&self, model: &Model, y0: &SystemState) -> Result<f64> {
        let TableData::Lattice(t) = &self.data else {
            return Ok(0.0);
        };
        let (p, n, dt, h) = (t.lattice.len(), self.n, self.grid.dt(), t.lattice.h);
        let mut start = 0;
        for k in (0..n).rev() {
            let j = t.lattice.index_of(y0.xs[k]).ok_or_else(|| {
                Error::OutOfBounds(format!("particle {k} at {} is not a lattice node", y0.xs[k]))
            })?;
            start = start * p + j;
        }
        let regime = Regime::from_indicators(&y0.alive);
        let alive: Vec<usize> = regime.alive().collect();
        let strides: Vec<usize> = (0..n).map(|k| p.pow(k as u32)).collect();
        let mut mass = vec![0.0; t.states];
        mass[start] = 1.0;
        let mut leaked = 0.0;
        let (mut b, mut s) = ([0.0], [0.0]);
        for node in 0..self.grid.n_steps {
            let time = self.grid.time(node);
            let mut next = vec![0.0; t.states];
            for f in 0..t.states {
                if mass[f] == 0.0 {
                    continue;
                }
                let j: Vec<usize> = (0..n).map(|k| f / strides[k] % p).collect();
                let xs: Vec<f64> = j.iter().map(|&i| t.lattice.point(i)).collect();
                let m = EmpiricalMeasure::uniform(1, xs.clone(), y0.alive.clone())?;
                let mut probs = Vec::with_capacity(alive.len());
                for &k in &alive {
                    model.drift(time, &[xs[k]], &m, &mut b);
                    model.diffusion(time, &[xs[k]], &m, &mut s);
                    probs.push(trinomial(s[0] * s[0] * dt / (h * h), b[0] * dt / h)?.0);
                }
                for c in 0..3usize.pow(alive.len() as u32) {
                    let (mut prob, mut idx, mut digits, mut out) = (mass[f], f, c, false);
                    for (q, &k) in alive.iter().enumerate() {
                        let d = digits % 3;
                        digits /= 3;
                        prob *= probs[q][d];
                        let target = j[k] as isize + d as isize - 1;
                        out |= target < 0 || target >= p as isize;
                        let jn = target.clamp(0, p as isize - 1) as usize;
                        idx = idx + jn * strides[k] - j[k] * strides[k];
                    }
                    if out {
                        leaked += prob;
                    }
                    next[idx] += prob;
                }
            }
            mass = next;
        }
        Ok(leaked)
    }
}

const MAGIC: &[u8; 8] = b"MFSTVTBL";
const FORMAT_VERSION: u32 = 1;

struct Sink<W: Write>(W);

impl<W: Write> Sink<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.u32(v.len() as u32)?;
        Ok(self.0.write_all(v)?)
    }
}

struct Source<R: Read>(R);

impl<R: Read> Source<R> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::TableFormat(format!("truncated table: {e}")))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn bytes(&mut self, limit: usize) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        if len > limit {
            return Err(Error::TableFormat(format!("field of {len} bytes exceeds {limit}")));
        }
        let mut buf = vec![0u8; len];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::TableFormat(format!("truncated table: {e}")))?;
        Ok(buf)
    }
}

impl ValueTable {
    /// Little-endian blob: magic, version, backend tag, `N`, grid, backend
    /// parameters, regime index map, values, warnings.
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut s = Sink(out);
        s.0.write_all(MAGIC)?;
        s.u32(FORMAT_VERSION)?;
        s.u32(matches!(self.data, TableData::Lsmc(_)) as u32)?;
        s.u32(self.n as u32)?;
        s.f64(self.grid.t0)?;
        s.f64(self.grid.t_end)?;
        s.u64(self.grid.n_steps as u64)?;
        match &self.data {
            TableData::Lattice(t) => {
                s.f64(t.lattice.center)?;
                s.f64(t.lattice.h)?;
                s.u64(t.lattice.half_width as u64)?;
                let order = masks_by_count(self.n);
                s.u32(order.len() as u32)?;
                for r in &order {
                    s.u32(r.0)?;
                }
                for r in &order {
                    for v in &t.values[r.0 as usize] {
                        s.f64(*v)?;
                    }
                }
            }
            TableData::Lsmc(t) => {
                s.u32(LSMC_BASIS as u32)?;
                let spec = match &t.model_spec {
                    Some(m) => serde_json::to_vec(m)?,
                    None => Vec::new(),
                };
                s.bytes(&spec)?;
                s.u32(LSMC_KNOTS as u32)?;
                for v in &t.knots {
                    s.f64(*v)?;
                }
                s.u64(t.coefficients.len() as u64)?;
                for v in &t.coefficients {
                    s.f64(*v)?;
                }
            }
        }
        s.u32(self.warnings.len() as u32)?;
        for w in &self.warnings {
            s.bytes(w.as_bytes())?;
        }
        s.0.flush()?;
        Ok(())
    }

    /// Inverse of [`ValueTable::write`]. Regression tables need the model
    /// spec stored with them, or `model` when none was stored.
    pub fn read<R: Read>(input: R, model: Option<&Model>) -> Result<Self> {
        let mut s = Source(input);
        if &s.take::<8>()? != MAGIC {
            return Err(Error::TableFormat("not a value table".into()));
        }
        let version = s.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::TableFormat(format!("unsupported version {version}")));
        }
        let tag = s.u32()?;
        let n = s.u32()? as usize;
        if n == 0 || n > MAX_PARTICLES {
            return Err(Error::TableFormat(format!("particle count {n}")));
        }
        let grid = TimeGrid::new(s.f64()?, s.f64()?, s.u64()? as usize)
            .map_err(|e| Error::TableFormat(e.to_string()))?;
        let data = match tag {
            0 => {
                let lattice = Lattice1d::new(s.f64()?, s.f64()?, s.u64()? as usize)
                    .map_err(|e| Error::TableFormat(e.to_string()))?;
                if n > LATTICE_MAX_PARTICLES {
                    return Err(Error::TableFormat(format!("lattice table with {n} particles")));
                }
                let states = lattice.len().pow(n as u32);
                let per = states * grid.n_nodes();
                if per << n > MAX_TABLE_ENTRIES {
                    return Err(Error::TableFormat("table exceeds the size budget".into()));
                }
                let count = s.u32()? as usize;
                if count != 1 << n {
                    return Err(Error::TableFormat(format!("{count} regimes for {n} particles")));
                }
                let order: Vec<u32> = (0..count).map(|_| s.u32()).collect::<Result<_>>()?;
                let mut values = vec![Vec::new(); count];
                for r in order {
                    let slot = values
                        .get_mut(r as usize)
                        .filter(|v| v.is_empty())
                        .ok_or_else(|| Error::TableFormat(format!("bad regime index {r}")))?;
                    *slot = (0..per).map(|_| s.f64()).collect::<Result<_>>()?;
                }
                TableData::Lattice(LatticeTable {
                    lattice,
                    n,
                    states,
                    nodes: grid.n_nodes(),
                    values,
                })
            }
            1 => {
                let basis = s.u32()? as usize;
                if basis != LSMC_BASIS {
                    return Err(Error::TableFormat(format!("basis size {basis}")));
                }
                let spec_bytes = s.bytes(1 << 16)?;
                let spec: Option<BuiltinModel> = if spec_bytes.is_empty() {
                    None
                } else {
                    Some(serde_json::from_slice(&spec_bytes)?)
                };
                let model = match (&spec, model) {
                    (_, Some(m)) => m.clone(),
                    (Some(spec), None) => spec.build(),
                    (None, None) => {
                        return Err(Error::TableFormat(
                            "regression table without a stored model needs one supplied".into(),
                        ))
                    }
                };
                if s.u32()? as usize != LSMC_KNOTS {
                    return Err(Error::TableFormat("knot count".into()));
                }
                let knots = (0..grid.n_steps * LSMC_KNOTS).map(|_| s.f64()).collect::<Result<_>>()?;
                let len = s.u64()? as usize;
                if len != grid.n_steps * LSMC_BASIS {
                    return Err(Error::TableFormat(format!("{len} coefficients")));
                }
                let coefficients = (0..len).map(|_| s.f64()).collect::<Result<_>>()?;
                TableData::Lsmc(LsmcTable {
                    n,
                    times: (0..grid.n_steps).map(|s| grid.time(s)).collect(),
                    knots,
                    coefficients,
                    model,
                    model_spec: spec,
                })
            }
            other => return Err(Error::TableFormat(format!("unknown backend tag {other}"))),
        };
        let count = s.u32()? as usize;
        let warnings = (0..count.min(1 << 20))
            .map(|_| Ok(String::from_utf8_lossy(&s.bytes(1 << 16)?).into_owned()))
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            grid,
            data,
            warnings,
        })
    }
}

/// Largest stopped objective over every adapted profile, by enumeration of
/// the lattice chain's scenario tree. Any subset may stop at any node.
pub fn brute_force_value(model: &Model, grid: &TimeGrid, y0: &SystemState, h: f64) -> Result<f64> {
    grid.validate()?;
    if y0.len() > 2 || grid.n_steps > 4 || y0.dim != 1 || model.dim() != 1 {
        return Err(Error::Capacity(
            "enumeration is limited to N <= 2, d = 1 and 4 steps".into(),
        ));
    }
    let start = Regime::from_indicators(&y0.alive);
    best_subset(model, grid, h, 0, &y0.xs, start)
}

fn best_subset(model: &Model, grid: &TimeGrid, h: f64, node: usize, xs: &[f64], regime: Regime) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    let mut sub = regime.0;
    loop {
        best = best.max(continue_from(model, grid, h, node, xs, Regime(sub))?);
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & regime.0;
    }
    Ok(best)
}

fn continue_from(model: &Model, grid: &TimeGrid, h: f64, node: usize, xs: &[f64], regime: Regime) -> Result<f64> {
    let n = xs.len();
    let m = EmpiricalMeasure::uniform(1, xs.to_vec(), regime.indicators(n))?;
    if node == grid.n_steps {
        return eval_terminal(model, &m);
    }
    let (t, dt) = (grid.time(node), grid.dt());
    let run = eval_running(model, t, &m)? * dt;
    let alive: Vec<usize> = regime.alive().collect();
    let mut probs = Vec::new();
    let (mut b, mut s) = ([0.0], [0.0]);
    for &k in &alive {
        model.drift(t, &xs[k..k + 1], &m, &mut b);
        model.diffusion(t, &xs[k..k + 1], &m, &mut s);
        probs.push(trinomial(s[0] * s[0] * dt / (h * h), b[0] * dt / h)?.0);
    }
    let mut e = 0.0;
    let mut next = xs.to_vec();
    for c in 0..3usize.pow(alive.len() as u32) {
        let (mut prob, mut digits) = (1.0, c);
        for (q, &k) in alive.iter().enumerate() {
            let d = digits % 3;
            digits /= 3;
            prob *= probs[q][d];
            next[k] = xs[k] + (d as f64 - 1.0) * h;
        }
        if prob > 0.0 {
            e += prob * best_subset(model, grid, h, node + 1, &next, regime)?;
        }
    }
    Ok(run + e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    fn decoupled() -> Model {
        BuiltinModel::decoupled_additive().build()
    }

    fn interacting() -> Model {
        BuiltinModel::MeanReverterToMean {
            a: 0.5,
            sigma: 0.5,
            rate: 0.3,
            slope: 1.0,
            terminal_weight: 1.0,
            target: 0.2,
        }
        .build()
    }

    #[test]
    fn regime_algebra() {
        let r = Regime::from_indicators(&[true, false, true]);
        assert_eq!(r, Regime(0b101));
        assert_eq!(r.count(), 2);
        assert_eq!(r.drop(0), Regime(0b100));
        assert!(Regime(0b100).is_below(r));
        assert!(!r.is_below(r));
        assert!(!Regime(0b010).is_below(r));
        assert_eq!(r.alive().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn lattice_locates_nodes_exactly() {
        let l = Lattice1d::new(0.1, 0.3, 3).unwrap();
        for j in 0..l.len() {
            assert_eq!(l.index_of(l.point(j)), Some(j));
            assert_eq!(l.locate(l.point(j)).unwrap(), (j, j, 0.0, false));
        }
        let (j0, j1, w, _) = l.locate(0.25).unwrap();
        assert_eq!((j0, j1), (3, 4));
        assert!((w - 0.5).abs() < 1e-12);
        assert!(l.locate(l.hi() + 0.1).unwrap().3);
        assert!(l.locate(100.0).is_err());
    }

    #[test]
    fn negative_running_reward_stops_at_once() {
        let model = Model::new("neg", 1, false)
            .with_diffusion_1d(|_, _, _| 0.4)
            .with_running_reward_1d(|_, _, _| -1.0)
            .with_terminal_reward(|mu| mu.integrate(|x| x[0].sin()));
        let g = grid(6);
        let l = Lattice1d::new(0.0, 0.3, 10).unwrap();
        let v = solve_single(&model, &g, &l).unwrap();
        for s in 0..g.n_nodes() {
            for j in 0..l.len() {
                assert_eq!(v.at_node(s, j, true), v.at_node(s, j, false));
            }
        }
    }

    #[test]
    fn martingale_with_linear_payoff_keeps_x() {
        let model = Model::new("bm", 1, false)
            .with_diffusion_1d(|_, _, _| 1.0)
            .with_terminal_reward(|mu| mu.mean()[0]);
        let g = grid(5);
        let l = Lattice1d::new(0.0, 0.5, 20).unwrap();
        let v = solve_single(&model, &g, &l).unwrap();
        // Away from the clamped edges the value is exactly linear.
        for s in 0..g.n_nodes() {
            for j in 6..l.len() - 6 {
                assert!((v.at_node(s, j, true) - l.point(j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_matches_enumeration_on_a_put() {
        let model = Model::new("put", 1, false)
            .with_diffusion_1d(|_, _, _| 1.0)
            .with_terminal_reward(|mu| mu.integrate(|x| (1.0 - x[0]).max(0.0)));
        let g = grid(2);
        let l = Lattice1d::tree_matched(1.0, &g, 1.0, 4).unwrap();
        let v = solve_single(&model, &g, &l).unwrap();
        let y0 = SystemState::from_states_1d(&[(1.0, true)]).unwrap();
        let brute = brute_force_value(&model, &g, &y0, l.h).unwrap();
        assert!((v.value(0, 1.0, true).unwrap() - brute).abs() < 1e-14);
        assert!(brute > 0.0);
    }

    #[test]
    fn brute_force_trivial_rewards() {
        let g = grid(3);
        let y0 = SystemState::from_states_1d(&[(0.0, true), (0.5, true)]).unwrap();
        let neg = Model::new("neg", 1, false).with_diffusion_1d(|_, _, _| 0.5).with_running_reward_1d(|_, _, _| -1.0);
        assert_eq!(brute_force_value(&neg, &g, &y0, 0.5 * g.dt().sqrt()).unwrap(), 0.0);
        let pos = Model::new("pos", 1, false).with_diffusion_1d(|_, _, _| 0.5).with_running_reward_1d(|_, _, _| 1.0);
        let v = brute_force_value(&pos, &g, &y0, 0.5 * g.dt().sqrt()).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let big = SystemState::from_states_1d(&[(0.0, true); 3]).unwrap();
        assert!(matches!(brute_force_value(&pos, &g, &big, 0.1), Err(Error::Capacity(_))));
    }

    #[test]
    fn one_particle_cascade_is_the_single_problem() {
        let model = decoupled();
        let g = grid(8);
        let l = Lattice1d::new(0.0, 0.25, 12).unwrap();
        let single = solve_single(&model, &g, &l).unwrap();
        let spec = LatticeSpec { center: 0.0, h: Some(0.25), half_width: 12 };
        let table = solve_cascade(&model, 1, &g, &Backend::Lattice(spec)).unwrap();
        let lt = table.lattice().unwrap();
        for s in 0..g.n_nodes() {
            assert_eq!(lt.values(Regime(1), s), single.alive_values(s));
            for j in 0..l.len() {
                assert_eq!(lt.values(Regime(0), s)[j], single.at_node(s, j, false));
            }
        }
    }

    #[test]
    fn decoupled_pair_splits_into_singles() {
        let model = decoupled();
        let g = grid(6);
        let spec = LatticeSpec { center: 0.0, h: Some(0.3), half_width: 8 };
        let l = spec.resolve(&model, &g).unwrap();
        let single = solve_single(&model, &g, &l).unwrap();
        let table = solve_cascade(&model, 2, &g, &Backend::Lattice(spec)).unwrap();
        let lt = table.lattice().unwrap();
        for mask in 0..4u32 {
            let r = Regime(mask);
            for s in 0..g.n_nodes() {
                for (f, v) in lt.values(r, s).iter().enumerate() {
                    let j = lt.coordinates(f);
                    let oracle = 0.5 * (single.at_node(s, j[0], r.is_alive(0)) + single.at_node(s, j[1], r.is_alive(1)));
                    assert!((v - oracle).abs() <= 1e-10, "{v} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn dead_regime_is_constant_in_time() {
        let model = interacting();
        let g = grid(4);
        let spec = LatticeSpec { center: 0.0, h: None, half_width: 6 };
        let table = solve_cascade(&model, 2, &g, &Backend::Lattice(spec)).unwrap();
        let lt = table.lattice().unwrap();
        for s in 0..g.n_nodes() {
            assert_eq!(lt.values(Regime(0), s), lt.values(Regime(0), g.n_steps));
        }
    }

    #[test]
    fn cascade_matches_enumeration_with_interaction() {
        let model = interacting();
        let g = grid(3);
        let spec = LatticeSpec { center: 0.0, h: None, half_width: 6 };
        let table = solve_cascade(&model, 2, &g, &Backend::Lattice(spec.clone())).unwrap();
        let l = spec.resolve(&model, &g).unwrap();
        for y in [[(0.0, true), (l.h, true)], [(-l.h, true), (0.0, false)]] {
            let y0 = SystemState::from_states_1d(&y).unwrap();
            let brute = brute_force_value(&model, &g, &y0, l.h).unwrap();
            let dp = table.value_at(0, &y0).unwrap();
            assert!((dp - brute).abs() <= 1e-12, "{dp} vs {brute}");
        }
    }

    #[test]
    fn obstacle_over_all_lower_regimes_equals_single_drops() {
        let model = interacting();
        let g = grid(3);
        let spec = LatticeSpec { center: 0.0, h: None, half_width: 4 };
        let table = solve_cascade(&model, 3, &g, &Backend::Lattice(spec)).unwrap();
        let lt = table.lattice().unwrap();
        for i in 1..8u32 {
            let r = Regime(i);
            for s in 0..g.n_nodes() {
                for f in 0..lt.states() {
                    let single = r.alive().map(|k| lt.values(r.drop(k), s)[f]).fold(f64::NEG_INFINITY, f64::max);
                    let all = (0..8u32).map(Regime).filter(|q| q.is_below(r)).map(|q| lt.values(q, s)[f]).fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(single, all);
                    assert!(lt.values(r, s)[f] >= all);
                }
            }
        }
    }

    #[test]
    fn interpolation_is_multilinear() {
        let model = Model::new("lin", 1, false).with_terminal_reward(|mu| mu.mean()[0]);
        let g = grid(2);
        let spec = LatticeSpec { center: 0.0, h: Some(0.5), half_width: 4 };
        let table = solve_cascade(&model, 2, &g, &Backend::Lattice(spec)).unwrap();
        let y = SystemState::from_states_1d(&[(0.25, false), (-0.75, false)]).unwrap();
        assert!((table.value_at(1, &y).unwrap() + 0.25).abs() < 1e-15);
        let (_, clamped) = table.value_at_clamped(1, &SystemState::from_states_1d(&[(2.2, false), (0.0, false)]).unwrap()).unwrap();
        assert!(clamped);
    }

    #[test]
    fn capacity_guard() {
        let model = decoupled();
        let spec = LatticeSpec { center: 0.0, h: Some(0.3), half_width: 4 };
        assert!(matches!(solve_cascade(&model, 4, &grid(2), &Backend::Lattice(spec)), Err(Error::Capacity(_))));
    }

    #[test]
    fn lattice_table_round_trips() {
        let model = interacting();
        let g = grid(3);
        let table = solve_cascade(&model, 2, &g, &Backend::Lattice(LatticeSpec { center: 0.0, h: None, half_width: 5 })).unwrap();
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = ValueTable::read(buf.as_slice(), None).unwrap();
        assert_eq!(back.lattice(), table.lattice());
        buf[8] = 9;
        assert!(matches!(ValueTable::read(buf.as_slice(), None), Err(Error::TableFormat(_))));
        assert!(ValueTable::read(&buf[..20], None).is_err());
    }

    #[test]
    fn lsmc_tracks_the_decoupled_lattice() {
        let spec = BuiltinModel::decoupled_additive();
        let model = spec.build();
        let g = grid(8);
        let params = LsmcParams {
            paths: 4000,
            seed: 3,
            origin: vec![(0.0, true), (0.6, true)],
            ridge: 1e-8,
            noise: Noise::Gaussian,
            max_hazard: 0.5,
        };
        let table = solve_cascade_with_spec(&model, Some(&spec), 2, &g, &Backend::Lsmc(params)).unwrap();
        let l = Lattice1d::new(0.0, 0.2, 20).unwrap();
        let single = solve_single(&model, &g, &l).unwrap();
        let y0 = SystemState::from_states_1d(&[(0.0, true), (0.6, true)]).unwrap();
        let oracle = 0.5 * (single.value(0, 0.0, true).unwrap() + single.value(0, 0.6, true).unwrap());
        let v = table.value_at(0, &y0).unwrap();
        assert!((v - oracle).abs() < 0.03, "{v} vs {oracle}");

        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        let back = ValueTable::read(buf.as_slice(), None).unwrap();
        assert_eq!(back.value_at(0, &y0).unwrap(), v);
    }

    #[test]
    fn backend_config_parses() {
        let b: Backend = serde_json::from_str(r#"{"kind": "lattice", "center": 0.0, "half_width": 5}"#).unwrap();
        assert!(matches!(b, Backend::Lattice(LatticeSpec { h: None, .. })));
        let b: Backend = serde_json::from_str(r#"{"kind": "lsmc", "paths": 10, "seed": 1, "origin": [[0.0, true]]}"#).unwrap();
        assert!(matches!(b, Backend::Lsmc(_)));
    }
}
