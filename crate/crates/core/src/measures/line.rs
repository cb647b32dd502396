//! Exact W1 for `d = 1` as a transshipment problem.
//!
//! The ground distance restricted to one layer is the path metric of the
//! sorted atoms, so same-layer transport only needs arcs between neighbours.
//! Cross-layer arcs are all present but implicit: with both layers sorted,
//! `h(x - y) - pi(y)` is a Monge matrix for convex `h`, so SMAWK finds the
//! cheapest cross arc out of every node in `O(n + m)` evaluations.

use super::{EmpiricalMeasure, GroundMetric};
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
const EXIT_REACH: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Arc {
    tail: usize,
    head: usize,
    flow: f64,
}

struct Network {
    x: Vec<f64>,
    alive: Vec<bool>,
    /// node ids per layer, sorted by x: `[stopped, alive]`
    layers: [Vec<usize>; 2],
    /// first index in the other layer with position `>= x`
    other_rank: Vec<usize>,
    cross: f64,
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    stack: Vec<usize>,
}

impl Network {
    fn total_cost(&self) -> f64 {
        self.arcs.iter().map(|arc| arc.flow * self.cost(arc.tail, arc.head)).sum()
    }

    fn cost(&self, u: usize, v: usize) -> f64 {
        let dx = self.x[u] - self.x[v];
        if self.alive[u] == self.alive[v] {
            dx.abs()
        } else {
            (dx * dx + self.cross).sqrt()
        }
    }

    fn build(a: &EmpiricalMeasure, b: &EmpiricalMeasure, metric: &GroundMetric) -> (Self, Vec<f64>) {
        let mut x = Vec::with_capacity(a.len() + b.len());
        let mut alive = Vec::with_capacity(x.capacity());
        let mut supply = Vec::with_capacity(x.capacity());
        for (w, xs, i) in a.atoms() {
            x.push(xs[0]);
            alive.push(i);
            supply.push(w);
        }
        for (w, xs, i) in b.atoms() {
            x.push(xs[0]);
            alive.push(i);
            supply.push(-w);
        }
        let nodes = x.len();
        let mut layers = [Vec::new(), Vec::new()];
        for v in 0..nodes {
            layers[alive[v] as usize].push(v);
        }
        for layer in &mut layers {
            layer.sort_by(|&p, &q| x[p].total_cmp(&x[q]).then(p.cmp(&q)));
        }
        let mut other_rank = vec![0; nodes];
        for v in 0..nodes {
            let other = &layers[1 - alive[v] as usize];
            other_rank[v] = other.partition_point(|&u| x[u] < x[v]);
        }
        let net = Network {
            x,
            alive,
            layers,
            other_rank,
            cross: metric.indicator_weight * metric.indicator_weight,
            arcs: Vec::with_capacity(nodes),
            adj: vec![Vec::new(); nodes],
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            depth: vec![0; nodes],
            potential: vec![0.0; nodes],
            stack: Vec::new(),
        };
        (net, supply)
    }

    /// Cost of routing layer `l` along its path when the layer's whole
    /// excess leaves (or enters) at rank `t`, for every `t`.
    fn single_exit_costs(&self, l: usize, supply: &[f64]) -> Vec<f64> {
        let layer = &self.layers[l];
        let k = layer.len();
        let mut carried = vec![0.0; k];
        let mut acc = 0.0;
        for (r, &v) in layer.iter().enumerate() {
            acc += supply[v];
            carried[r] = acc;
        }
        let total = acc;
        // edge r joins ranks r and r + 1; exit at t shifts edges r >= t by -total
        let gap = |r: usize| self.x[layer[r + 1]] - self.x[layer[r]];
        let mut before = vec![0.0; k];
        for r in 1..k {
            before[r] = before[r - 1] + carried[r - 1].abs() * gap(r - 1);
        }
        let mut after = vec![0.0; k];
        for r in (0..k.saturating_sub(1)).rev() {
            after[r] = after[r + 1] + (carried[r] - total).abs() * gap(r);
        }
        (0..k).map(|t| before[t] + after[t]).collect()
    }

    /// Paths along each layer, joined by one cross arc placed where the
    /// single crossing is cheapest; the root is its alive endpoint. Zero-flow
    /// arcs point away from the root, so the tree is strongly feasible.
    fn initial_tree(&mut self, supply: &[f64]) {
        let both = !self.layers[0].is_empty() && !self.layers[1].is_empty();
        let root_layer = if self.layers[1].is_empty() { 0 } else { 1 };
        let mut exits = [self.layers[0].len().saturating_sub(1), self.layers[1].len().saturating_sub(1)];
        let excess1: f64 = self.layers[1].iter().map(|&v| supply[v]).sum();
        if both {
            let f0 = self.single_exit_costs(0, supply);
            let f1 = self.single_exit_costs(1, supply);
            let global0 = (0..f0.len()).min_by(|&p, &q| f0[p].total_cmp(&f0[q])).unwrap();
            let mut best = (f64::INFINITY, 0, 0);
            for (t1, &u) in self.layers[1].iter().enumerate() {
                let r = self.other_rank[u];
                let window = r.saturating_sub(EXIT_REACH)..(r + EXIT_REACH).min(f0.len());
                for t0 in window.chain(std::iter::once(global0)) {
                    let v = self.layers[0][t0];
                    let c = f1[t1] + f0[t0] + excess1.abs() * self.cost(u, v);
                    if c < best.0 {
                        best = (c, t0, t1);
                    }
                }
            }
            exits = [best.1, best.2];
        }
        let root = self.layers[root_layer][exits[root_layer]];
        for l in 0..2 {
            let layer = self.layers[l].clone();
            let exit = exits[l];
            let mut carried = 0.0;
            let total: f64 = layer.iter().map(|&v| supply[v]).sum();
            for (r, pair) in layer.windows(2).enumerate() {
                let (u, v) = (pair[0], pair[1]);
                carried += supply[u];
                let flow = if r < exit { carried } else { carried - total };
                // zero flow points away from the exit
                let forward = flow > 0.0 || (flow == 0.0 && r >= exit);
                let arc = if forward {
                    Arc { tail: u, head: v, flow }
                } else {
                    Arc { tail: v, head: u, flow: -flow }
                };
                self.push_arc(arc);
            }
        }
        if both {
            let (u, v) = (self.layers[1][exits[1]], self.layers[0][exits[0]]);
            let arc = if excess1 < 0.0 {
                Arc { tail: v, head: u, flow: -excess1 }
            } else {
                Arc { tail: u, head: v, flow: excess1 }
            };
            self.push_arc(arc);
        }
        self.parent[root] = NONE;
        self.pred[root] = NONE;
        self.depth[root] = 0;
        self.potential[root] = 0.0;
        self.relabel(root);
    }

    fn push_arc(&mut self, arc: Arc) {
        let e = self.arcs.len();
        self.arcs.push(arc);
        self.adj[arc.tail].push(e);
        self.adj[arc.head].push(e);
    }

    /// Depth, parent and potentials below `root`, whose own values are set.
    /// Basic arcs satisfy `pi(head) - pi(tail) = c`.
    fn relabel(&mut self, root: usize) {
        let mut stack = std::mem::take(&mut self.stack);
        stack.clear();
        stack.push(root);
        while let Some(w) = stack.pop() {
            for k in 0..self.adj[w].len() {
                let e = self.adj[w][k];
                if e == self.pred[w] {
                    continue;
                }
                let arc = self.arcs[e];
                let y = if arc.tail == w { arc.head } else { arc.tail };
                self.parent[y] = w;
                self.pred[y] = e;
                self.depth[y] = self.depth[w] + 1;
                let c = self.cost(arc.tail, arc.head);
                self.potential[y] = if arc.head == y {
                    self.potential[w] + c
                } else {
                    self.potential[w] - c
                };
                stack.push(y);
            }
        }
        self.stack = stack;
    }

    fn reduced_cost(&self, u: usize, v: usize) -> f64 {
        self.cost(u, v) + self.potential[u] - self.potential[v]
    }

    /// Enter `u -> v`. Flow goes u -> v, then up from v to the join and down
    /// to u. Ties for the leaving arc take the last one met when walking the
    /// cycle from the join, which keeps the tree strongly feasible.
    fn pivot(&mut self, u: usize, v: usize) {
        let (mut p, mut q) = (u, v);
        while p != q {
            if self.depth[p] >= self.depth[q] {
                p = self.parent[p];
            } else {
                q = self.parent[q];
            }
        }
        let join = p;

        let mut delta = f64::INFINITY;
        let mut leave = NONE;
        let mut leave_on_u_side = true;
        // join -> u goes parent -> child; arcs pointing child -> parent shrink
        let mut w = u;
        while w != join {
            let arc = self.arcs[self.pred[w]];
            if arc.tail == w && arc.flow < delta {
                delta = arc.flow;
                leave = w;
                leave_on_u_side = true;
            }
            w = self.parent[w];
        }
        // v -> join goes child -> parent; arcs pointing parent -> child shrink
        let mut w = v;
        while w != join {
            let arc = self.arcs[self.pred[w]];
            if arc.head == w && arc.flow <= delta {
                delta = arc.flow;
                leave = w;
                leave_on_u_side = false;
            }
            w = self.parent[w];
        }
        debug_assert!(leave != NONE, "uncapacitated cycle without a blocking arc");

        let mut w = u;
        while w != join {
            let e = self.pred[w];
            if self.arcs[e].tail == w {
                self.arcs[e].flow -= delta;
            } else {
                self.arcs[e].flow += delta;
            }
            w = self.parent[w];
        }
        let mut w = v;
        while w != join {
            let e = self.pred[w];
            if self.arcs[e].head == w {
                self.arcs[e].flow -= delta;
            } else {
                self.arcs[e].flow += delta;
            }
            w = self.parent[w];
        }

        let slot = self.pred[leave];
        let old = self.arcs[slot];
        self.adj[old.tail].retain(|&e| e != slot);
        self.adj[old.head].retain(|&e| e != slot);
        self.arcs[slot] = Arc { tail: u, head: v, flow: delta };
        self.adj[u].push(slot);
        self.adj[v].push(slot);

        // re-hang the cut subtree from its endpoint of the entering arc
        let (inner, outer) = if leave_on_u_side { (u, v) } else { (v, u) };
        let mut child = inner;
        let mut new_parent = outer;
        let mut new_arc = slot;
        loop {
            let old_parent = self.parent[child];
            let old_arc = self.pred[child];
            self.parent[child] = new_parent;
            self.pred[child] = new_arc;
            if child == leave {
                break;
            }
            new_parent = child;
            new_arc = old_arc;
            child = old_parent;
        }
        self.depth[inner] = self.depth[outer] + 1;
        let c = self.cost(u, v);
        self.potential[inner] = if inner == v {
            self.potential[outer] + c
        } else {
            self.potential[outer] - c
        };
        self.relabel(inner);
    }

    fn price_paths(&self, eps: f64, out: &mut Vec<(f64, usize, usize)>) {
        for layer in &self.layers {
            for pair in layer.windows(2) {
                let (p, q) = (pair[0], pair[1]);
                for (u, v) in [(p, q), (q, p)] {
                    let rc = self.reduced_cost(u, v);
                    if rc < -eps {
                        out.push((rc, u, v));
                    }
                }
            }
        }
    }

    /// Every improving arc `(rc, u, v)` among neighbour arcs, plus the best
    /// cross arc out of each node.
    fn price(&self, eps: f64, out: &mut Vec<(f64, usize, usize)>) {
        out.clear();
        self.price_paths(eps, out);
        if self.layers[0].is_empty() || self.layers[1].is_empty() {
            return;
        }
        for from in 0..2 {
            let matrix = CrossMatrix {
                net: self,
                rows: &self.layers[from],
                cols: &self.layers[1 - from],
            };
            for (r, c) in smawk::row_minima(&matrix).into_iter().enumerate() {
                let (u, v) = (matrix.rows[r], matrix.cols[c]);
                let rc = self.reduced_cost(u, v);
                if rc < -eps {
                    out.push((rc, u, v));
                }
            }
        }
    }
}

/// `h(x_u - x_v) - pi_v` over rows of one layer and columns of the other.
struct CrossMatrix<'a> {
    net: &'a Network,
    rows: &'a [usize],
    cols: &'a [usize],
}

impl smawk::Matrix<f64> for CrossMatrix<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }

    fn ncols(&self) -> usize {
        self.cols.len()
    }

    fn index(&self, row: usize, column: usize) -> f64 {
        let (u, v) = (self.rows[row], self.cols[column]);
        let dx = self.net.x[u] - self.net.x[v];
        (dx * dx + self.net.cross).sqrt() - self.net.potential[v]
    }
}

/// `W1(a, b)` for one-dimensional measures with arbitrary weights.
pub(crate) fn line_w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure, metric: &GroundMetric) -> Result<f64> {
    Ok(line_w1_above(a, b, metric, f64::NEG_INFINITY)?.expect("uncapped solve is exact"))
}

/// `Some(W1(a, b))` when it exceeds `floor`, `None` once a feasible flow
/// costing at most `floor` is found. Primal costs only decrease, so the
/// early exit is exact for deciding `W1 <= floor`.
pub fn line_w1_above(a: &EmpiricalMeasure, b: &EmpiricalMeasure, metric: &GroundMetric, floor: f64) -> Result<Option<f64>> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Unsupported("line transport needs d = 1".into()));
    }
    let (mut net, supply) = Network::build(a, b, metric);
    // rounding in the totals is absorbed at the root
    net.initial_tree(&supply);
    let scale = net
        .x
        .iter()
        .fold(0.0f64, |s, v| s.max(v.abs()))
        .max(metric.indicator_weight)
        .max(1e-300);
    let eps = 1e-13 * scale;
    let nodes = net.x.len();
    let max_rounds = 50 * nodes + 1000;
    let mut candidates = Vec::new();
    let mut rounds = 0;
    loop {
        if net.total_cost() <= floor {
            return Ok(None);
        }
        net.price(eps, &mut candidates);
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|p, q| p.0.total_cmp(&q.0));
        for &(_, u, v) in &candidates {
            if net.reduced_cost(u, v) < -eps {
                net.pivot(u, v);
            }
        }
        rounds += 1;
        if rounds > max_rounds {
            return Err(Error::Capacity(format!(
                "line transshipment did not converge in {max_rounds} pricing rounds"
            )));
        }
    }
    let cost = net.total_cost();
    Ok((cost > floor).then_some(cost))
}

/// Cheap bracket `lower <= W1(a, b) <= upper` for one-dimensional measures.
///
/// `lower` is the larger of the W1 distance between x-marginals and the
/// indicator mass gap (both projections are 1-Lipschitz); `upper` is the cost
/// of the single-crossing feasible flow the exact solver starts from.
pub fn w1_bounds_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure, metric: &GroundMetric) -> Result<(f64, f64)> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Unsupported("w1 bounds need d = 1".into()));
    }
    let mut events: Vec<(f64, f64)> = a
        .atoms()
        .map(|(w, x, _)| (x[0], w))
        .chain(b.atoms().map(|(w, x, _)| (x[0], -w)))
        .collect();
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut marginal = 0.0;
    let mut carried = 0.0;
    for pair in events.windows(2) {
        carried += pair[0].1;
        marginal += carried.abs() * (pair[1].0 - pair[0].0);
    }
    let layer_gap = metric.indicator_weight * (a.alive_mass() - b.alive_mass()).abs();
    let (mut net, supply) = Network::build(a, b, metric);
    net.initial_tree(&supply);
    let upper = net.total_cost();
    let lower = marginal.max(layer_gap);
    Ok((lower.min(upper), upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::transport::network_simplex_cost;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut ChaCha8Rng, n: usize, alive_p: f64, uniform: bool) -> EmpiricalMeasure {
        let states: Vec<(f64, f64, bool)> = (0..n)
            .map(|_| {
                let w = if uniform { 1.0 } else { rng.random::<f64>() + 0.05 };
                (w, rng.random::<f64>() * 3.0 - 1.5, rng.random::<f64>() < alive_p)
            })
            .collect();
        let total: f64 = states.iter().map(|s| s.0).sum();
        let states: Vec<_> = states.into_iter().map(|(w, x, i)| (w / total, x, i)).collect();
        EmpiricalMeasure::weighted_1d(&states).unwrap()
    }

    #[test]
    fn matches_the_transport_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let metric = GroundMetric::default();
        for trial in 0..60 {
            let n = 1 + trial % 13;
            let m = 1 + (trial * 7) % 17;
            let p = [0.0, 0.3, 0.7, 1.0][trial % 4];
            let a = random_measure(&mut rng, n, p, trial % 2 == 0);
            let b = random_measure(&mut rng, m, 1.0 - p * 0.5, trial % 3 == 0);
            let exact = network_simplex_cost(&a, &b, 1, &metric).unwrap();
            let fast = line_w1(&a, &b, &metric).unwrap();
            assert!((exact - fast).abs() < 1e-12, "trial {trial}: {exact} vs {fast}");
        }
    }

    #[test]
    fn bounds_bracket_the_exact_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let metric = GroundMetric::default();
        for trial in 0..40 {
            let a = random_measure(&mut rng, 1 + trial % 9, 0.6, trial % 2 == 0);
            let b = random_measure(&mut rng, 2 + trial % 23, 0.4, true);
            let exact = line_w1(&a, &b, &metric).unwrap();
            let (lo, hi) = w1_bounds_1d(&a, &b, &metric).unwrap();
            assert!(lo <= exact + 1e-12 && exact <= hi + 1e-12, "{lo} {exact} {hi}");
        }
    }

    #[test]
    fn indicator_weight_scales_crossing() {
        let a = EmpiricalMeasure::from_states_1d(&[(0.0, true)]).unwrap();
        let b = EmpiricalMeasure::from_states_1d(&[(0.0, false)]).unwrap();
        let metric = GroundMetric { indicator_weight: 3.0 };
        assert!((line_w1(&a, &b, &metric).unwrap() - 3.0).abs() < 1e-15);
    }
}
