use std::collections::BTreeMap;

use super::{stop_with_density, w1, EmpiricalMeasure, TransitionDensity, Transport};
use crate::error::Result;

/// Outcome of approximating `m'` (stopped with density `p`) by a pure stopping
/// `m^A` (stopped with the indicator of a set `A`).
#[derive(Clone, Debug)]
pub struct PureApproximation {
    /// Alive atoms of `m` kept alive, i.e. `A` restricted to the support.
    pub selected: Vec<usize>,
    /// `m^A`.
    pub measure: EmpiricalMeasure,
    /// `W1(m^A, m')`.
    pub error: f64,
    pub nonempty_cells: usize,
    /// `2 * (m(A, 1) + int p dm(., 1))`: the Lipschitz budget of the cell argument.
    pub lipschitz_budget: f64,
    /// Largest `|m(A_k, 1) - int_{O_k} p dm(., 1)|` over cells.
    pub max_cell_mismatch: f64,
}

impl PureApproximation {
    /// `C / n + 2 * w_max * cells`.
    pub fn bound(&self, resolution: usize, max_atom_weight: f64) -> f64 {
        self.lipschitz_budget / resolution as f64
            + 2.0 * max_atom_weight * self.nonempty_cells as f64
    }
}

/// Approximate `stop_with_density(m, p)` by a pure stopping on axis-aligned
/// cells of side `1 / (n sqrt d)` anchored at the origin.
///
/// Inside a cell, alive atoms are taken in decreasing order of `p` whenever
/// adding one brings the kept mass closer to the cell target
/// `int_cell p dm(., 1)`.
pub fn pure_approximation(
    m: &EmpiricalMeasure,
    p: &TransitionDensity,
    resolution: usize,
    transport: &Transport,
) -> Result<PureApproximation> {
    let resolution = resolution.max(1);
    let side = 1.0 / (resolution as f64 * (m.dim() as f64).sqrt());
    let mixed = stop_with_density(m, p)?;

    let mut cells: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for k in 0..m.len() {
        if m.is_alive(k) && m.weight(k) > 0.0 {
            let key = m.x(k).iter().map(|v| (v / side).floor() as i64).collect();
            cells.entry(key).or_default().push(k);
        }
    }

    let mut keep = vec![false; m.len()];
    let mut selected = Vec::new();
    let mut kept_mass = 0.0;
    let mut target_mass = 0.0;
    let mut max_cell_mismatch: f64 = 0.0;
    for atoms in cells.values() {
        let target: f64 = atoms.iter().map(|&k| m.weight(k) * p.0[k]).sum();
        let mut order = atoms.clone();
        order.sort_by(|&a, &b| p.0[b].total_cmp(&p.0[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        for k in order {
            let w = m.weight(k);
            if (mass + w - target).abs() < (mass - target).abs() {
                mass += w;
                keep[k] = true;
                selected.push(k);
            }
        }
        kept_mass += mass;
        target_mass += target;
        max_cell_mismatch = max_cell_mismatch.max((mass - target).abs());
    }
    selected.sort_unstable();

    let indicator = TransitionDensity(keep.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    let pure = stop_with_density(m, &indicator)?;
    let error = w1(&pure, &mixed, &Transport {
        allow_general: true,
        ..*transport
    })?;
    Ok(PureApproximation {
        selected,
        measure: pure,
        error,
        nonempty_cells: cells.len(),
        lipschitz_budget: 2.0 * (kept_mass + target_mass),
        max_cell_mismatch,
    })
}
