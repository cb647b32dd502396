//! Exact discrete optimal transport between atomic measures on `S`.
//!
//! Uniform measures with the same number of atoms reduce to an assignment
//! problem (an optimal plan is a permutation). Everything else goes through a
//! transportation network simplex over the dense bipartite graph.

use serde::{Deserialize, Serialize};

use super::line::line_w1;
use super::EmpiricalMeasure;
use crate::error::{Error, Result};

/// Euclidean metric on `R^{d+1}`, the indicator scaled by `indicator_weight`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundMetric {
    pub indicator_weight: f64,
}

impl Default for GroundMetric {
    fn default() -> Self {
        Self {
            indicator_weight: 1.0,
        }
    }
}

impl GroundMetric {
    #[inline]
    pub fn squared(&self, x: &[f64], i: bool, y: &[f64], j: bool) -> f64 {
        let mut s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        if i != j {
            s += self.indicator_weight * self.indicator_weight;
        }
        s
    }

    #[inline]
    pub fn cost(&self, order: u32, x: &[f64], i: bool, y: &[f64], j: bool) -> f64 {
        let sq = self.squared(x, i, y, j);
        match order {
            2 => sq,
            1 => sq.sqrt(),
            p => sq.powf(p as f64 / 2.0),
        }
    }
}

/// Options for Wasserstein computations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transport {
    pub metric: GroundMetric,
    /// Allow non-uniform weights or differing atom counts (general LP).
    pub allow_general: bool,
}

impl Transport {
    pub fn general() -> Self {
        Self {
            allow_general: true,
            ..Self::default()
        }
    }
}

pub fn w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure, t: &Transport) -> Result<f64> {
    Ok(transport_cost(a, b, 2, t)?.sqrt())
}

pub fn w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure, t: &Transport) -> Result<f64> {
    transport_cost(a, b, 1, t)
}

// Above this size the O(N^3) assignment loses to the simplex started from a
// sorted staircase.
const ASSIGNMENT_MAX: usize = 256;

/// `min_pi sum pi(y, y~) c(y, y~)` with `c = dist^order`.
pub fn transport_cost(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    order: u32,
    t: &Transport,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let equal_uniform = a.len() == b.len() && a.is_uniform() && b.is_uniform();
    if !equal_uniform && !t.allow_general {
        return Err(Error::CountMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if equal_uniform && a.dim() == 1 && single_layer(a).is_some() && single_layer(b).is_some() {
        return Ok(sorted_matching_cost(a, b, order, &t.metric));
    }
    if order == 1 && a.dim() == 1 {
        return line_w1(a, b, &t.metric);
    }
    if equal_uniform && a.len() <= ASSIGNMENT_MAX {
        return Ok(assignment_cost(a, b, order, &t.metric));
    }
    network_simplex_cost(a, b, order, &t.metric)
}

fn single_layer(m: &EmpiricalMeasure) -> Option<bool> {
    let first = m.is_alive(0);
    m.indicators().iter().all(|&i| i == first).then_some(first)
}

/// Monotone matching for d = 1 uniform measures whose atoms each sit on one
/// layer. Optimal for any convex function of `x - y`.
pub fn sorted_matching_cost(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    order: u32,
    metric: &GroundMetric,
) -> f64 {
    assert_eq!(a.len(), b.len());
    let ia = a.is_alive(0);
    let ib = b.is_alive(0);
    let mut xa: Vec<f64> = a.positions().to_vec();
    let mut xb: Vec<f64> = b.positions().to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let n = xa.len() as f64;
    xa.iter()
        .zip(&xb)
        .map(|(x, y)| metric.cost(order, &[*x], ia, &[*y], ib))
        .sum::<f64>()
        / n
}

/// Exact assignment between two uniform measures of equal size.
pub fn assignment_cost(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    order: u32,
    metric: &GroundMetric,
) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len());
    let mut cost = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            cost[r * n + c] = metric.cost(order, a.x(r), a.is_alive(r), b.x(c), b.is_alive(c));
        }
    }
    let cols = solve_assignment(n, &cost);
    cols.iter()
        .enumerate()
        .map(|(r, &c)| cost[r * n + c])
        .sum::<f64>()
        / n as f64
}

/// Shortest augmenting path (Hungarian) method on a dense `n x n` cost
/// matrix, row-major. Returns the column assigned to each row.
pub fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based internally; index 0 is the virtual column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_v = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut j0 = 0usize;
        min_v.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

/// Stopped atoms by increasing x, then alive atoms by decreasing x. The
/// staircase then pairs each layer monotonically and only the extreme
/// atoms of the source's stopped layer cross to the sink's alive layer.
fn layer_order(m: &EmpiricalMeasure) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.len()).filter(|&k| m.weight(k) > 0.0).collect();
    idx.sort_by(|&p, &q| {
        m.is_alive(p).cmp(&m.is_alive(q)).then_with(|| {
            let o = m
                .x(p)
                .iter()
                .zip(m.x(q))
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal);
            if m.is_alive(p) { o.reverse() } else { o }
        })
    });
    idx
}

pub(crate) fn network_simplex_cost(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    order: u32,
    metric: &GroundMetric,
) -> Result<f64> {
    let ra = layer_order(a);
    let rb = layer_order(b);
    let supply: Vec<f64> = ra.iter().map(|&k| a.weight(k)).collect();
    let demand: Vec<f64> = rb.iter().map(|&k| b.weight(k)).collect();
    let cost = |i: usize, j: usize| {
        let (p, q) = (ra[i], rb[j]);
        metric.cost(order, a.x(p), a.is_alive(p), b.x(q), b.is_alive(q))
    };
    let m = rb.len();
    let simplex = TransportSimplex::new(&supply, &demand, cost);
    let (total, _) = if a.dim() == 1 {
        let pricer = LinePricer::new(a, &ra, b, &rb, order, metric);
        simplex.solve(Pricing::Line(&pricer))?
    } else {
        let split = rb.iter().take_while(|&&q| !b.is_alive(q)).count();
        simplex.solve(Pricing::Dense(&[0..split, split..m]))?
    };
    Ok(total)
}

enum Pricing<'a> {
    /// Scan every arc; candidates start from the nearest sinks per segment.
    Dense(&'a [std::ops::Range<usize>]),
    /// Exact row minima on the line through lower envelopes.
    Line(&'a LinePricer),
}

/// Row pricing for `d = 1`. Sources and sinks are sorted by `(layer, x)`;
/// within a pair of layers the cost is `h(x - y)` with `h` convex, so two
/// translates `h(. - y_j) - pi_j` cross at most once and a Li Chao tree over
/// the source positions yields every row minimum in `O((n + m) log n)`.
struct LinePricer {
    src_x: Vec<f64>,
    sink_x: Vec<f64>,
    src_layers: Vec<(std::ops::Range<usize>, bool)>,
    sink_layers: Vec<(std::ops::Range<usize>, bool)>,
    order: u32,
    cross: f64,
}

fn layer_ranges(m: &EmpiricalMeasure, order: &[usize]) -> Vec<(std::ops::Range<usize>, bool)> {
    let split = order.iter().take_while(|&&k| !m.is_alive(k)).count();
    [(0..split, false), (split..order.len(), true)]
        .into_iter()
        .filter(|(r, _)| !r.is_empty())
        .collect()
}

impl LinePricer {
    fn new(
        a: &EmpiricalMeasure,
        ra: &[usize],
        b: &EmpiricalMeasure,
        rb: &[usize],
        order: u32,
        metric: &GroundMetric,
    ) -> Self {
        Self {
            src_x: ra.iter().map(|&k| a.x(k)[0]).collect(),
            sink_x: rb.iter().map(|&k| b.x(k)[0]).collect(),
            src_layers: layer_ranges(a, ra),
            sink_layers: layer_ranges(b, rb),
            order,
            cross: metric.indicator_weight * metric.indicator_weight,
        }
    }

    fn h(&self, dx: f64, offset: f64) -> f64 {
        let sq = dx * dx + offset;
        if self.order == 2 {
            sq
        } else if offset == 0.0 {
            dx.abs().powi(self.order as i32)
        } else {
            sq.sqrt().powi(self.order as i32)
        }
    }

    /// `out[i] = min_j (c(i, j) + pi_i - pi_j)` with its argmin.
    fn row_minima(&self, potential: &[f64], out: &mut Vec<(f64, usize)>) {
        let n = self.src_x.len();
        out.clear();
        out.resize(n, (f64::INFINITY, NONE));
        let mut tree = Vec::new();
        for (src, s_alive) in &self.src_layers {
            let xs = &self.src_x[src.clone()];
            for (snk, t_alive) in &self.sink_layers {
                let offset = if s_alive == t_alive { 0.0 } else { self.cross };
                let eval = |j: usize, x: f64| self.h(x - self.sink_x[j], offset) - potential[n + j];
                tree.clear();
                tree.resize(4 * xs.len(), NONE);
                for j in snk.clone() {
                    lichao_insert(&mut tree, xs, &eval, j);
                }
                for q in 0..xs.len() {
                    let (v, j) = lichao_query(&tree, xs, &eval, q);
                    let i = src.start + q;
                    let rc = v + potential[i];
                    if rc < out[i].0 {
                        out[i] = (rc, j);
                    }
                }
            }
        }
    }
}

fn lichao_insert(tree: &mut [usize], xs: &[f64], eval: &impl Fn(usize, f64) -> f64, mut f: usize) {
    let (mut node, mut lo, mut hi) = (1usize, 0usize, xs.len());
    loop {
        let cur = tree[node];
        if cur == NONE {
            tree[node] = f;
            return;
        }
        let mid = (lo + hi) / 2;
        if eval(f, xs[mid]) < eval(cur, xs[mid]) {
            tree[node] = f;
            f = cur;
        }
        if hi - lo == 1 {
            return;
        }
        // the loser at mid can only win on one side of it
        if eval(f, xs[lo]) < eval(tree[node], xs[lo]) {
            node *= 2;
            hi = mid;
        } else {
            node = 2 * node + 1;
            lo = mid;
        }
    }
}

fn lichao_query(tree: &[usize], xs: &[f64], eval: &impl Fn(usize, f64) -> f64, q: usize) -> (f64, usize) {
    let (mut node, mut lo, mut hi) = (1usize, 0usize, xs.len());
    let mut best = (f64::INFINITY, NONE);
    loop {
        let f = tree[node];
        if f == NONE {
            return best;
        }
        let v = eval(f, xs[q]);
        if v < best.0 {
            best = (v, f);
        }
        if hi - lo == 1 {
            return best;
        }
        let mid = (lo + hi) / 2;
        if q < mid {
            node *= 2;
            hi = mid;
        } else {
            node = 2 * node + 1;
            lo = mid;
        }
    }
}

const NONE: usize = usize::MAX;

#[derive(Clone, Copy)]
struct BasicArc {
    source: usize,
    sink: usize,
    flow: f64,
}

/// Network simplex for the transportation problem `sources -> sinks` with
/// implicit dense arc costs.
///
/// Starts from the north-west-corner staircase (strongly feasible when ties
/// advance the sink index), prices candidate arcs first and uses the
/// strongly-feasible leaving-arc rule to avoid cycling.
struct TransportSimplex<C: Fn(usize, usize) -> f64> {
    n: usize,
    m: usize,
    cost: C,
    arcs: Vec<BasicArc>,
    adj: Vec<Vec<usize>>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
}

impl<C: Fn(usize, usize) -> f64> TransportSimplex<C> {
    fn new(supply: &[f64], demand: &[f64], cost: C) -> Self {
        let (n, m) = (supply.len(), demand.len());
        let mut ra = supply.to_vec();
        let mut rb = demand.to_vec();
        // absorb rounding in the totals into the last sink
        let imbalance: f64 = ra.iter().sum::<f64>() - rb.iter().sum::<f64>();
        rb[m - 1] = (rb[m - 1] + imbalance).max(0.0);

        let mut arcs = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let f = ra[i].min(rb[j]);
            ra[i] -= f;
            rb[j] -= f;
            arcs.push(BasicArc {
                source: i,
                sink: n + j,
                flow: f,
            });
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && ra[i] <= 0.0 && rb[j] > 0.0) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self::from_basis(n, m, cost, arcs)
    }

    /// `arcs` must form a spanning tree carrying a feasible flow.
    fn from_basis(n: usize, m: usize, cost: C, arcs: Vec<BasicArc>) -> Self {
        let nodes = n + m;
        let mut adj = vec![Vec::new(); nodes];
        for (e, arc) in arcs.iter().enumerate() {
            adj[arc.source].push(e);
            adj[arc.sink].push(e);
        }
        let mut s = Self {
            n,
            m,
            cost,
            arcs,
            adj,
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            depth: vec![0; nodes],
            potential: vec![0.0; nodes],
        };
        s.parent[0] = NONE;
        s.relabel_subtree(0);
        s
    }

    fn arc_cost(&self, e: usize) -> f64 {
        let arc = self.arcs[e];
        (self.cost)(arc.source, arc.sink - self.n)
    }

    /// Recompute depth and potentials below `root` (whose own values are set).
    fn relabel_subtree(&mut self, root: usize) {
        let mut stack = vec![root];
        while let Some(w) = stack.pop() {
            for k in 0..self.adj[w].len() {
                let e = self.adj[w][k];
                if e == self.pred[w] {
                    continue;
                }
                let arc = self.arcs[e];
                let x = if arc.source == w { arc.sink } else { arc.source };
                self.parent[x] = w;
                self.pred[x] = e;
                self.depth[x] = self.depth[w] + 1;
                let c = self.arc_cost(e);
                // basic arcs satisfy pi(sink) - pi(source) = c
                self.potential[x] = if arc.sink == x {
                    self.potential[w] + c
                } else {
                    self.potential[w] - c
                };
                stack.push(x);
            }
        }
    }

    /// Candidate arcs per source: the `k` cheapest sinks within each sink
    /// segment (one segment per indicator layer). The optimal plan is
    /// concentrated near them, so most pivots never touch the dense matrix.
    fn nearest_candidates(&self, k: usize, segments: &[std::ops::Range<usize>]) -> Vec<Vec<u32>> {
        let mut row = Vec::with_capacity(self.m);
        (0..self.n)
            .map(|i| {
                let mut c: Vec<u32> = Vec::new();
                for seg in segments {
                    row.clear();
                    row.extend(seg.clone().map(|j| ((self.cost)(i, j), j as u32)));
                    let k = k.min(row.len());
                    if k == 0 {
                        continue;
                    }
                    if k < row.len() {
                        row.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
                    }
                    c.extend(row[..k].iter().map(|&(_, j)| j));
                }
                c.sort_unstable();
                c
            })
            .collect()
    }

    /// Pricing alternates between candidate lists and full scans. A full scan
    /// that finds no improving arc certifies optimality over all `n * m` arcs.
    fn solve(mut self, pricing: Pricing<'_>) -> Result<(f64, Vec<BasicArc>)> {
        let mut scale = 0.0f64;
        for e in 0..self.arcs.len() {
            scale = scale.max(self.arc_cost(e).abs());
        }
        let eps = 1e-13 * scale.max(1e-300);
        let max_pivots = 200 * (self.n + self.m) + 10_000;
        let per_source = 2 * self.m.div_ceil(self.n) + 8;
        let mut candidates = match pricing {
            Pricing::Dense(segments) => self.nearest_candidates(per_source, segments),
            Pricing::Line(_) => vec![Vec::new(); self.n],
        };
        let mut row_best = Vec::new();
        for arc in &self.arcs {
            let j = (arc.sink - self.n) as u32;
            if let Err(pos) = candidates[arc.source].binary_search(&j) {
                candidates[arc.source].insert(pos, j);
            }
        }
        let block = ((self.n as f64).sqrt() as usize).clamp(1, self.n);
        let mut next = 0usize;
        let mut pivots = 0usize;
        loop {
            let mut best = (-eps, NONE, NONE);
            let mut scanned = 0usize;
            while scanned < self.n && best.1 == NONE {
                let stop = (scanned + block).min(self.n);
                while scanned < stop {
                    let i = next;
                    let pi = self.potential[i];
                    for &j in &candidates[i] {
                        let j = j as usize;
                        let rc = (self.cost)(i, j) + pi - self.potential[self.n + j];
                        if rc < best.0 {
                            best = (rc, i, j);
                        }
                    }
                    next = if next + 1 == self.n { 0 } else { next + 1 };
                    scanned += 1;
                }
            }
            if best.1 == NONE {
                // full scan; remember each source's most violated arc
                match pricing {
                    Pricing::Line(p) => p.row_minima(&self.potential, &mut row_best),
                    Pricing::Dense(_) => {
                        row_best.clear();
                        for i in 0..self.n {
                            let pi = self.potential[i];
                            let mut rb = (f64::INFINITY, NONE);
                            for j in 0..self.m {
                                let rc = (self.cost)(i, j) + pi - self.potential[self.n + j];
                                if rc < rb.0 {
                                    rb = (rc, j);
                                }
                            }
                            row_best.push(rb);
                        }
                    }
                }
                let mut found = false;
                for (i, &(rc, j)) in row_best.iter().enumerate() {
                    if rc < -eps {
                        let j32 = j as u32;
                        if let Err(pos) = candidates[i].binary_search(&j32) {
                            candidates[i].insert(pos, j32);
                        }
                        if rc < best.0 {
                            best = (rc, i, j);
                        }
                        found = true;
                    }
                }
                if !found {
                    break;
                }
            }
            self.pivot(best.1, self.n + best.2);
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::Capacity(format!(
                    "transport simplex did not converge in {max_pivots} pivots"
                )));
            }
        }
        let total = (0..self.arcs.len())
            .map(|e| self.arcs[e].flow * self.arc_cost(e))
            .sum();
        Ok((total, self.arcs))
    }

    fn pivot(&mut self, source: usize, sink: usize) {
        // join node of the cycle
        let (mut u, mut v) = (source, sink);
        while u != v {
            if self.depth[u] >= self.depth[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        let join = u;

        // Flow moves source -> sink on the entering arc, sink up to the join,
        // then down to source. Ties favour the sink side (strong feasibility).
        let mut delta = f64::INFINITY;
        let mut leave_node = NONE;
        let mut leave_on_source_side = true;
        let mut w = source;
        while w != join {
            let arc = self.arcs[self.pred[w]];
            // traversed parent -> w; decreases when the arc points w -> parent
            if arc.source == w && arc.flow < delta {
                delta = arc.flow;
                leave_node = w;
                leave_on_source_side = true;
            }
            w = self.parent[w];
        }
        let mut w = sink;
        while w != join {
            let arc = self.arcs[self.pred[w]];
            // traversed w -> parent; decreases when the arc points parent -> w
            if arc.sink == w && arc.flow <= delta {
                delta = arc.flow;
                leave_node = w;
                leave_on_source_side = false;
            }
            w = self.parent[w];
        }
        debug_assert!(leave_node != NONE);

        // augment
        let mut w = source;
        while w != join {
            let e = self.pred[w];
            if self.arcs[e].source == w {
                self.arcs[e].flow -= delta;
            } else {
                self.arcs[e].flow += delta;
            }
            w = self.parent[w];
        }
        let mut w = sink;
        while w != join {
            let e = self.pred[w];
            if self.arcs[e].sink == w {
                self.arcs[e].flow -= delta;
            } else {
                self.arcs[e].flow += delta;
            }
            w = self.parent[w];
        }

        // swap the leaving arc for the entering one in the same slot
        let leaving = self.pred[leave_node];
        let old = self.arcs[leaving];
        self.adj[old.source].retain(|&e| e != leaving);
        self.adj[old.sink].retain(|&e| e != leaving);
        self.arcs[leaving] = BasicArc {
            source,
            sink,
            flow: delta,
        };
        self.adj[source].push(leaving);
        self.adj[sink].push(leaving);

        // re-hang the cut subtree from the entering endpoint inside it
        let (inner, outer) = if leave_on_source_side {
            (source, sink)
        } else {
            (sink, source)
        };
        let mut child = inner;
        let mut new_parent = outer;
        let mut new_arc = leaving;
        loop {
            let old_parent = self.parent[child];
            let old_arc = self.pred[child];
            self.parent[child] = new_parent;
            self.pred[child] = new_arc;
            if child == leave_node {
                break;
            }
            new_parent = child;
            new_arc = old_arc;
            child = old_parent;
        }
        self.depth[inner] = self.depth[outer] + 1;
        let c = self.arc_cost(leaving);
        self.potential[inner] = if inner == sink {
            self.potential[outer] + c
        } else {
            self.potential[outer] - c
        };
        self.relabel_subtree(inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(states: &[(f64, bool)]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_states_1d(states).unwrap()
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let m = m1(&[(0.3, true), (-1.0, false), (2.0, true)]);
        let t = Transport::default();
        assert_eq!(w2(&m, &m, &t).unwrap(), 0.0);
        assert_eq!(w1(&m, &m, &t).unwrap(), 0.0);
    }

    #[test]
    fn two_atom_example() {
        let m = m1(&[(0.0, true), (1.0, true)]);
        let mt = m1(&[(0.0, true), (2.0, true)]);
        let t = Transport::default();
        assert!((w2(&m, &mt, &t).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        // forced through the assignment path as well
        let c = assignment_cost(&m, &mt, 2, &t.metric);
        assert!((c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn indicator_enters_as_a_coordinate() {
        let m = m1(&[(0.0, true)]);
        let mt = m1(&[(0.0, false)]);
        let t = Transport {
            metric: GroundMetric {
                indicator_weight: 2.0,
            },
            ..Transport::default()
        };
        assert_eq!(w2(&m, &mt, &t).unwrap(), 2.0);
    }

    #[test]
    fn count_mismatch_needs_general_flag() {
        let m = m1(&[(0.0, true), (1.0, true)]);
        let mt = m1(&[(0.0, true)]);
        assert!(matches!(
            w2(&m, &mt, &Transport::default()),
            Err(Error::CountMismatch { left: 2, right: 1 })
        ));
        let v = w2(&m, &mt, &Transport::general()).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn assignment_small_matrix() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let cols = solve_assignment(3, &cost);
        let total: f64 = cols.iter().enumerate().map(|(r, &c)| cost[r * 3 + c]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn simplex_matches_assignment_on_uniform_mixed_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3usize, 7, 20, 40] {
            let a: Vec<(f64, bool)> = (0..n)
                .map(|_| (rng.random_range(-2.0..2.0), rng.random_bool(0.5)))
                .collect();
            let b: Vec<(f64, bool)> = (0..n)
                .map(|_| (rng.random_range(-2.0..2.0), rng.random_bool(0.5)))
                .collect();
            let (ma, mb) = (m1(&a), m1(&b));
            let metric = GroundMetric::default();
            for order in [1, 2] {
                let exact = assignment_cost(&ma, &mb, order, &metric);
                let simplex = network_simplex_cost(&ma, &mb, order, &metric).unwrap();
                assert!((exact - simplex).abs() < 1e-12, "n={n} p={order}: {exact} vs {simplex}");
            }
        }
    }

    #[test]
    fn simplex_handles_replicated_atoms() {
        // a measure with N atoms equals one with each atom repeated r times
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<(f64, bool)> = (0..6)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_bool(0.5)))
            .collect();
        let b: Vec<(f64, bool)> = (0..18)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_bool(0.5)))
            .collect();
        let rep: Vec<(f64, bool)> = a.iter().flat_map(|s| std::iter::repeat_n(*s, 3)).collect();
        let metric = GroundMetric::default();
        let general = network_simplex_cost(&m1(&a), &m1(&b), 1, &metric).unwrap();
        let exact = assignment_cost(&m1(&rep), &m1(&b), 1, &metric);
        assert!((general - exact).abs() < 1e-12, "{general} vs {exact}");
    }
}
