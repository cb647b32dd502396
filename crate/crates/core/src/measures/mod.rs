//! Atomic probability measures on `S = R^d x {0, 1}`.
//!
//! An atom carries a position `x` and a survival indicator `i`; `i = 1` marks
//! mass that is still running, `i = 0` mass that has been stopped. The stopping
//! order `m' <= m` (obtained from `m` by instantly stopping part of its alive
//! mass) lives here together with the Wasserstein distances used throughout the
//! crate.

mod approx;
mod io;
mod line;
mod transport;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub use approx::{pure_approximation, PureApproximation};
pub use io::{read_measure, write_measure};
pub use line::{line_w1_above, w1_bounds_1d};
pub use transport::{
    assignment_cost, solve_assignment, sorted_matching_cost, transport_cost,
    w1, w2, GroundMetric, Transport,
};

const WEIGHT_TOL: f64 = 1e-12;

/// Weighted atoms on `R^d x {0, 1}`.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    dim: usize,
    xs: Vec<f64>,
    alive: Vec<bool>,
    weights: Vec<f64>,
    alive_first_moment: OnceLock<Vec<f64>>,
}

impl PartialEq for EmpiricalMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.xs == other.xs
            && self.alive == other.alive
            && self.weights == other.weights
    }
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, xs: Vec<f64>, alive: Vec<bool>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if xs.len() != dim * alive.len() || weights.len() != alive.len() {
            return Err(Error::InvalidMeasure(format!(
                "inconsistent lengths: {} coordinates, {} indicators, {} weights (d = {dim})",
                xs.len(),
                alive.len(),
                weights.len()
            )));
        }
        if alive.is_empty() {
            return Err(Error::InvalidMeasure("measure has no atoms".into()));
        }
        if let Some(k) = xs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "position",
                atom: k / dim,
            });
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMeasure(format!(
                "weight {} at atom {k} is not a nonnegative real",
                weights[k]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL.max(4.0 * f64::EPSILON * weights.len() as f64) {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self::from_parts(dim, xs, alive, weights))
    }

    fn from_parts(dim: usize, xs: Vec<f64>, alive: Vec<bool>, weights: Vec<f64>) -> Self {
        Self {
            dim,
            xs,
            alive,
            weights,
            alive_first_moment: OnceLock::new(),
        }
    }

    /// `m^N(y) = (1/N) sum_k delta_{y_k}`.
    pub fn uniform(dim: usize, xs: Vec<f64>, alive: Vec<bool>) -> Result<Self> {
        let n = alive.len();
        if n == 0 {
            return Err(Error::InvalidMeasure("measure has no atoms".into()));
        }
        Self::new(dim, xs, alive, vec![1.0 / n as f64; n])
    }

    /// One-dimensional convenience constructor from `(x, alive)` pairs.
    pub fn from_states_1d(states: &[(f64, bool)]) -> Result<Self> {
        let xs = states.iter().map(|s| s.0).collect();
        let alive = states.iter().map(|s| s.1).collect();
        Self::uniform(1, xs, alive)
    }

    /// One-dimensional weighted constructor from `(weight, x, alive)` triples.
    pub fn weighted_1d(atoms: &[(f64, f64, bool)]) -> Result<Self> {
        Self::new(
            1,
            atoms.iter().map(|a| a.1).collect(),
            atoms.iter().map(|a| a.2).collect(),
            atoms.iter().map(|a| a.0).collect(),
        )
    }

    pub fn dirac(x: &[f64], alive: bool) -> Self {
        Self::from_parts(x.len(), x.to_vec(), vec![alive], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn is_alive(&self, k: usize) -> bool {
        self.alive[k]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn positions(&self) -> &[f64] {
        &self.xs
    }

    pub fn indicators(&self) -> &[bool] {
        &self.alive
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, &[f64], bool)> + '_ {
        (0..self.len()).map(move |k| (self.weights[k], self.x(k), self.alive[k]))
    }

    /// True when every atom carries weight `1/len`.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|v| (v - w).abs() <= 1e-15)
    }

    /// `m({i = 1})`.
    pub fn alive_mass(&self) -> f64 {
        self.atoms().filter(|a| a.2).map(|a| a.0).sum()
    }

    /// `int x m(dx, 1)`; not normalised by the alive mass. Cached.
    pub fn alive_first_moment(&self) -> &[f64] {
        self.alive_first_moment.get_or_init(|| {
            let mut acc = vec![0.0; self.dim];
            for (w, x, alive) in self.atoms() {
                if alive {
                    for (a, v) in acc.iter_mut().zip(x) {
                        *a += w * v;
                    }
                }
            }
            acc
        })
    }

    /// `int phi(x, i) m(dy)`.
    pub fn integrate(&self, mut phi: impl FnMut(&[f64], bool) -> f64) -> f64 {
        self.atoms().map(|(w, x, i)| w * phi(x, i)).sum()
    }

    /// The x-marginal `m(., {0, 1})`.
    pub fn x_marginal(&self) -> XMarginal<'_> {
        XMarginal(self)
    }

    /// `lambda * a + (1 - lambda) * b`, atoms concatenated.
    pub fn mixture(a: &Self, lambda: f64, b: &Self) -> Result<Self> {
        if a.dim != b.dim {
            return Err(Error::DimensionMismatch {
                expected: a.dim,
                got: b.dim,
            });
        }
        let mut xs = a.xs.clone();
        xs.extend_from_slice(&b.xs);
        let mut alive = a.alive.clone();
        alive.extend_from_slice(&b.alive);
        let mut weights: Vec<f64> = a.weights.iter().map(|w| lambda * w).collect();
        weights.extend(b.weights.iter().map(|w| (1.0 - lambda) * w));
        Ok(Self::from_parts(a.dim, xs, alive, weights))
    }

    /// Drop atoms with zero weight.
    pub fn pruned(&self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.weights[k] > 0.0).collect();
        let mut xs = Vec::with_capacity(keep.len() * self.dim);
        for &k in &keep {
            xs.extend_from_slice(self.x(k));
        }
        Self::from_parts(
            self.dim,
            xs,
            keep.iter().map(|&k| self.alive[k]).collect(),
            keep.iter().map(|&k| self.weights[k]).collect(),
        )
    }
}

/// View of a measure on `S` through its x-marginal only.
#[derive(Clone, Copy, Debug)]
pub struct XMarginal<'a>(&'a EmpiricalMeasure);

impl<'a> XMarginal<'a> {
    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, &'a [f64])> + 'a {
        let m = self.0;
        (0..m.len()).map(move |k| (m.weights[k], m.x(k)))
    }

    pub fn integrate(&self, mut phi: impl FnMut(&[f64]) -> f64) -> f64 {
        self.atoms().map(|(w, x)| w * phi(x)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for (w, x) in self.atoms() {
            for (a, v) in acc.iter_mut().zip(x) {
                *a += w * v;
            }
        }
        acc
    }
}

/// Per-atom stopping density `p`: alive mass at an atom survives with
/// probability `p`. Entries for stopped atoms are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDensity(pub Vec<f64>);

impl TransitionDensity {
    pub fn from_fn(m: &EmpiricalMeasure, p: impl Fn(&[f64]) -> f64) -> Self {
        Self((0..m.len()).map(|k| p(m.x(k))).collect())
    }

    pub fn constant(m: &EmpiricalMeasure, p: f64) -> Self {
        Self(vec![p; m.len()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `m'(dx, 1) = p(x) m(dx, 1)`, `m'(dx, 0) = (1 - p(x)) m(dx, 1) + m(dx, 0)`.
///
/// Alive atoms are split rather than resampled; zero-weight atoms are pruned.
pub fn stop_with_density(m: &EmpiricalMeasure, p: &TransitionDensity) -> Result<EmpiricalMeasure> {
    if p.0.len() != m.len() {
        return Err(Error::DimensionMismatch {
            expected: m.len(),
            got: p.0.len(),
        });
    }
    let mut xs = Vec::with_capacity(m.xs.len() * 2);
    let mut alive = Vec::with_capacity(m.len() * 2);
    let mut weights = Vec::with_capacity(m.len() * 2);
    for (k, (w, x, i)) in m.atoms().enumerate() {
        if !i {
            xs.extend_from_slice(x);
            alive.push(false);
            weights.push(w);
            continue;
        }
        let pk = p.0[k];
        if !(0.0..=1.0).contains(&pk) {
            return Err(Error::DensityOutOfRange { atom: k, value: pk });
        }
        xs.extend_from_slice(x);
        alive.push(true);
        weights.push(w * pk);
        xs.extend_from_slice(x);
        alive.push(false);
        weights.push(w * (1.0 - pk));
    }
    Ok(EmpiricalMeasure::from_parts(m.dim, xs, alive, weights).pruned())
}

fn position_key(x: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 are the same location
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

#[derive(Default, Clone, Copy)]
struct LocationMass {
    total: f64,
    alive: f64,
}

fn masses_by_location(m: &EmpiricalMeasure) -> BTreeMap<Vec<u64>, LocationMass> {
    let mut out: BTreeMap<Vec<u64>, LocationMass> = BTreeMap::new();
    for (w, x, i) in m.atoms() {
        let e = out.entry(position_key(x)).or_default();
        e.total += w;
        if i {
            e.alive += w;
        }
    }
    out
}

/// Decide `m_prime <= m` and recover the density.
///
/// Returns the density (one entry per atom of `m`) when `m_prime` has the same
/// x-marginal as `m` and no location gains alive mass; `None` otherwise.
pub fn is_preceq(m_prime: &EmpiricalMeasure, m: &EmpiricalMeasure) -> Option<TransitionDensity> {
    if m_prime.dim != m.dim {
        return None;
    }
    let before = masses_by_location(m);
    let after = masses_by_location(m_prime);
    for (key, a) in &after {
        if a.total <= WEIGHT_TOL {
            continue;
        }
        let b = before.get(key)?;
        if (a.total - b.total).abs() > WEIGHT_TOL || a.alive > b.alive + WEIGHT_TOL {
            return None;
        }
    }
    for (key, b) in &before {
        let a_total = after.get(key).map_or(0.0, |a| a.total);
        if (a_total - b.total).abs() > WEIGHT_TOL {
            return None;
        }
    }
    let p = (0..m.len())
        .map(|k| {
            if !m.alive[k] {
                return 1.0;
            }
            let key = position_key(m.x(k));
            let b = before[&key];
            let a_alive = after.get(&key).map_or(0.0, |a| a.alive);
            if b.alive <= 0.0 {
                1.0
            } else {
                (a_alive / b.alive).clamp(0.0, 1.0)
            }
        })
        .collect();
    Some(TransitionDensity(p))
}

/// A measure per node of a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFlow {
    times: Vec<f64>,
    measures: Vec<EmpiricalMeasure>,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if times.is_empty() || times.len() != measures.len() {
            return Err(Error::InvalidGrid(format!(
                "{} times for {} measures",
                times.len(),
                measures.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("times must increase strictly".into()));
        }
        Ok(Self { times, measures })
    }

    pub fn constant(times: Vec<f64>, m: EmpiricalMeasure) -> Result<Self> {
        let n = times.len();
        Self::new(times, vec![m; n])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn at(&self, node: usize) -> &EmpiricalMeasure {
        &self.measures[node]
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }
}

/// `max_s W2(a_s, b_s)` over the shared grid.
pub fn flow_distance(a: &MeasureFlow, b: &MeasureFlow, transport: &Transport) -> Result<f64> {
    if a.times != b.times {
        return Err(Error::GridMismatch);
    }
    let mut worst: f64 = 0.0;
    for (ma, mb) in a.measures.iter().zip(&b.measures) {
        worst = worst.max(w2(ma, mb, transport)?);
    }
    Ok(worst)
}
