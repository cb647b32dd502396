//! Acceptance criteria, run in sequence so wall-clock limits are meaningful
//! on one core. Each criterion renders its numbers as a CSV body; the
//! reproducibility criterion reruns every one with the same seed and compares
//! bodies byte for byte.

use std::fmt::Write as _;
use std::io::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfstop::calculus::{check_projection_derivatives, BuiltinFunctional};
use mfstop::chaos::{chaos_experiment, rate_fit, value_convergence_experiment, ChaosParams, ConvergenceParams};
use mfstop::measures::{
    pure_approximation, sorted_matching_cost, w1, w2, EmpiricalMeasure, GroundMetric, TransitionDensity, Transport,
};
use mfstop::model::{BuiltinModel, Model};
use mfstop::policy::{evaluate_policy, EvalRule, StoppingPolicy, DEFAULT_ETA};
use mfstop::simulate::{Noise, SurvivalLaw, SystemState, TimeGrid};
use mfstop::snell::{
    brute_force_value, solve_cascade, solve_single, Backend, LatticeSpec, Regime, ValueTable,
};

const SEED: u64 = 20_240_917;

const BRUTE_TOL: f64 = 1e-12;
const DECOUPLED_TOL: f64 = 1e-10;
const MONOTONE_TOL: f64 = 1e-12;
const DERIVATIVE_TOL: f64 = 1e-6;
const DERIVATIVE_H: f64 = 1e-4;
const TRANSPORT_TOL: f64 = 1e-12;
const POLICY_REPS: usize = 10_000;
const CHAOS_SLOPE_MAX: f64 = -0.3;

/// Seconds allowed per criterion, in criterion order.
const LIMITS: [f64; 9] = [5.0, 30.0, 120.0, 10.0, 10.0, 10.0, 600.0, 900.0, 5.0];

struct Outcome {
    pass: bool,
    detail: String,
    csv: String,
}

fn report(line: &str) {
    // Straight to the handle so the line survives test output capture.
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, n).unwrap()
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

fn decoupled() -> Model {
    BuiltinModel::decoupled_additive().build()
}

fn lattice(table: &ValueTable) -> &mfstop::snell::LatticeTable {
    table.lattice().expect("lattice backend")
}

/// The tree-matched interacting pair on 3 steps: `sigma^2 dt / h^2 = 1`, so the
/// chain moves by exactly `+-h` (two-point noise).
fn interacting_instance() -> (Model, TimeGrid, LatticeSpec) {
    (interacting(), grid(3), LatticeSpec { center: 0.0, h: None, half_width: 6 })
}

fn decoupled_spec() -> LatticeSpec {
    LatticeSpec { center: 0.0, h: Some(0.3), half_width: 8 }
}

fn decoupled_start(n: usize) -> Vec<(f64, bool)> {
    [(-0.3, true), (0.0, true), (0.6, true)][3 - n..].to_vec()
}

fn criterion_1() -> Outcome {
    let (model, g, spec) = interacting_instance();
    let table = solve_cascade(&model, 2, &g, &Backend::Lattice(spec.clone())).unwrap();
    let h = spec.resolve(&model, &g).unwrap().h;
    let starts = [
        [(0.0, true), (h, true)],
        [(-h, true), (2.0 * h, true)],
        [(-h, true), (0.0, false)],
        [(3.0 * h, true), (3.0 * h, true)],
    ];
    let mut csv = String::from("start,cascade,brute_force,difference\n");
    let mut worst: f64 = 0.0;
    for (i, y) in starts.iter().enumerate() {
        let y0 = SystemState::from_states_1d(y).unwrap();
        let dp = table.value_at(0, &y0).unwrap();
        let brute = brute_force_value(&model, &g, &y0, h).unwrap();
        worst = worst.max((dp - brute).abs());
        writeln!(csv, "{i},{dp},{brute},{}", dp - brute).unwrap();
    }
    Outcome {
        pass: worst <= BRUTE_TOL,
        detail: format!("max |cascade - brute force| = {worst:.3e} over {} starts (tol {BRUTE_TOL:e})", starts.len()),
        csv,
    }
}

fn criterion_2() -> Outcome {
    let model = decoupled();
    let g = grid(6);
    let spec = decoupled_spec();
    let l = spec.resolve(&model, &g).unwrap();
    let single = solve_single(&model, &g, &l).unwrap();
    let mut csv = String::from("N,comparisons,max_abs_error\n");
    let mut worst: f64 = 0.0;
    for n in 1..=3 {
        let table = solve_cascade(&model, n, &g, &Backend::Lattice(spec.clone())).unwrap();
        let lt = lattice(&table);
        let mut count = 0usize;
        let mut err: f64 = 0.0;
        for mask in 0..1u32 << n {
            let r = Regime(mask);
            for s in 0..g.n_nodes() {
                for (f, v) in lt.values(r, s).iter().enumerate() {
                    let j = lt.coordinates(f);
                    let oracle = (0..n).map(|k| single.at_node(s, j[k], r.is_alive(k))).sum::<f64>() / n as f64;
                    err = err.max((v - oracle).abs());
                    count += 1;
                }
            }
        }
        worst = worst.max(err);
        writeln!(csv, "{n},{count},{err}").unwrap();
    }
    Outcome {
        pass: worst <= DECOUPLED_TOL,
        detail: format!("max |v^N - mean of singles| = {worst:.3e} for N in 1..=3 (tol {DECOUPLED_TOL:e})"),
        csv,
    }
}

/// `(epsilon, std_error, C dt)` for the optimal policy from `y0`. `C dt` is
/// twice the change of `value_at` under one refinement (n -> 2n steps,
/// h -> h / sqrt 2), the first-order extrapolation of the bias at `dt`.
fn policy_gap(model: &Model, g: &TimeGrid, spec: &LatticeSpec, n: usize, y0: &[(f64, bool)], seed: u64) -> (f64, f64, f64) {
    let table = Arc::new(solve_cascade(model, n, g, &Backend::Lattice(spec.clone())).unwrap());
    let h = spec.resolve(model, g).unwrap().h;
    let y0 = SystemState::from_states_1d(y0).unwrap();
    let v = table.value_at(0, &y0).unwrap();
    let policy = Arc::new(StoppingPolicy::new(table, DEFAULT_ETA).unwrap());
    let est = evaluate_policy(model, g, &y0, EvalRule::Policy(&policy), POLICY_REPS, Noise::Lattice { h }, seed).unwrap();

    let fine_grid = g.refined(2);
    let fine_spec = LatticeSpec {
        center: spec.center,
        h: spec.h.map(|h| h / 2f64.sqrt()),
        half_width: (spec.half_width as f64 * 2f64.sqrt()).ceil() as usize,
    };
    let fine = solve_cascade(model, n, &fine_grid, &Backend::Lattice(fine_spec)).unwrap();
    let c_dt = 2.0 * (v - fine.value_at(0, &y0).unwrap()).abs();
    (v - est.j, est.std_error, c_dt)
}

fn criterion_3() -> Outcome {
    let mut csv = String::from("instance,N,epsilon,std_error,c_dt,bound\n");
    let mut pass = true;
    let mut worst = f64::NEG_INFINITY;
    let (model, g, spec) = interacting_instance();
    let h = spec.resolve(&model, &g).unwrap().h;
    let mut cases: Vec<(&str, Model, TimeGrid, LatticeSpec, Vec<(f64, bool)>)> =
        vec![("interacting", model, g, spec, vec![(0.0, true), (h, true)])];
    for n in 1..=3 {
        cases.push(("decoupled", decoupled(), grid(6), decoupled_spec(), decoupled_start(n)));
    }
    for (i, (name, model, g, spec, y0)) in cases.iter().enumerate() {
        let (eps, se, c_dt) = policy_gap(model, g, spec, y0.len(), y0, SEED + i as u64);
        let bound = 3.0 * se + c_dt;
        pass &= eps <= bound;
        worst = worst.max(eps - bound);
        writeln!(csv, "{name},{},{eps},{se},{c_dt},{bound}", y0.len()).unwrap();
    }
    Outcome {
        pass,
        detail: format!("max (epsilon - (3 SE + C dt)) = {worst:.3e} over {} instances, M = {POLICY_REPS}", cases.len()),
        csv,
    }
}

fn criterion_4() -> Outcome {
    let mut csv = String::from("model,N,checks,min_margin\n");
    let mut pass = true;
    let mut total = 0usize;
    let (im, ig, ispec) = interacting_instance();
    for (name, model, g, spec) in [("interacting", im, ig, ispec), ("decoupled", decoupled(), grid(6), decoupled_spec())] {
        for n in 1..=3 {
            let table = solve_cascade(&model, n, &g, &Backend::Lattice(spec.clone())).unwrap();
            let lt = lattice(&table);
            let mut checks = 0usize;
            let mut margin = f64::INFINITY;
            for mask in 1..1u32 << n {
                let r = Regime(mask);
                for s in 0..g.n_nodes() {
                    let here = lt.values(r, s);
                    for k in r.alive() {
                        for (a, b) in here.iter().zip(lt.values(r.drop(k), s)) {
                            margin = margin.min(a - b);
                            checks += 1;
                        }
                    }
                }
            }
            pass &= margin >= -MONOTONE_TOL;
            total += checks;
            writeln!(csv, "{name},{n},{checks},{margin}").unwrap();
        }
    }
    Outcome {
        pass,
        detail: format!("{total} pairs value(i) >= value(i^-k) - {MONOTONE_TOL:e}"),
        csv,
    }
}

fn criterion_5() -> Outcome {
    let mut csv = String::from("functional,N,state,first_order,second_order\n");
    let mut worst: f64 = 0.0;
    let functionals = &BuiltinFunctional::ALL[..5];
    for (fi, f) in functionals.iter().enumerate() {
        let u = f.build();
        for n in [1usize, 2, 5, 20] {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ ((fi as u64) << 32) ^ n as u64);
            for s in 0..20 {
                let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
                let t = rng.random_range(0.0..1.0);
                let y = SystemState::new(1, xs, vec![true; n]).unwrap();
                let c = check_projection_derivatives(&u, n, t, &y, DERIVATIVE_H).unwrap();
                worst = worst.max(c.worst());
                writeln!(csv, "{},{n},{s},{},{}", u.name, c.first_order, c.second_order).unwrap();
            }
        }
    }
    Outcome {
        pass: worst <= DERIVATIVE_TOL,
        detail: format!(
            "worst relative error {worst:.3e} over {} functionals x N in {{1,2,5,20}} x 20 states (tol {DERIVATIVE_TOL:e})",
            functionals.len()
        ),
        csv,
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

fn random_measure(rng: &mut ChaCha8Rng, n: usize, dim: usize, alive: impl Fn(&mut ChaCha8Rng) -> bool) -> EmpiricalMeasure {
    let xs = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let flags = (0..n).map(|_| alive(rng)).collect();
    EmpiricalMeasure::uniform(dim, xs, flags).unwrap()
}

fn criterion_6() -> Outcome {
    let mut csv = String::from("kind,pair,N,library,oracle\n");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let metric = GroundMetric::default();
    let transport = Transport::default();
    let mut brute_err: f64 = 0.0;
    for p in 0..100 {
        let n = rng.random_range(1..=6);
        let dim = rng.random_range(1..=2);
        let a = random_measure(&mut rng, n, dim, |r| r.random_bool(0.6));
        let b = random_measure(&mut rng, n, dim, |r| r.random_bool(0.6));
        let brute = permutations(n)
            .iter()
            .map(|perm| (0..n).map(|k| metric.squared(a.x(k), a.is_alive(k), b.x(perm[k]), b.is_alive(perm[k]))).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        let lib = w2(&a, &b, &transport).unwrap();
        brute_err = brute_err.max((lib - brute).abs());
        writeln!(csv, "brute,{p},{n},{lib},{brute}").unwrap();
    }
    let mut sort_err: f64 = 0.0;
    for p in 0..100 {
        let other = p % 3 != 0;
        let a = random_measure(&mut rng, 128, 1, |_| true);
        let b = random_measure(&mut rng, 128, 1, |_| other);
        let (l2, o2) = (w2(&a, &b, &transport).unwrap(), sorted_matching_cost(&a, &b, 2, &metric).sqrt());
        let (l1, o1) = (w1(&a, &b, &transport).unwrap(), sorted_matching_cost(&a, &b, 1, &metric));
        sort_err = sort_err.max((l2 - o2).abs()).max((l1 - o1).abs());
        writeln!(csv, "sort_w2,{p},128,{l2},{o2}").unwrap();
        writeln!(csv, "sort_w1,{p},128,{l1},{o1}").unwrap();
    }
    Outcome {
        pass: brute_err <= TRANSPORT_TOL && sort_err <= TRANSPORT_TOL,
        detail: format!(
            "max |w2 - permutation brute force| = {brute_err:.3e} (100 pairs, N <= 6); max |w - sort oracle| = {sort_err:.3e} (100 pairs, N = 128)"
        ),
        csv,
    }
}

fn criterion_7() -> Outcome {
    let model = BuiltinModel::mean_reverter().build();
    let g = grid(20);
    let xs: Vec<(f64, bool)> = (0..64).map(|k| (-1.5 + 3.0 * (k as f64 + 0.5) / 64.0, true)).collect();
    let m0 = EmpiricalMeasure::from_states_1d(&xs).unwrap();
    let params = ChaosParams {
        ns: vec![8, 32, 128, 512],
        reps: 64,
        cloud: None,
        k_max: 10,
        tol: 1e-3,
        noise: Noise::Gaussian,
        metric: GroundMetric::default(),
        secondary_w2: false,
        bias_check: true,
    };
    let r = chaos_experiment(&model, &m0, &SurvivalLaw::uniform_nodes(&g), &g, &params, SEED).unwrap();
    let slope = rate_fit(&r).unwrap().slope;
    let mut csv = String::from("N,estimate,std_error,reps\n");
    for row in &r.rows {
        writeln!(csv, "{},{},{},{}", row.n, row.estimate, row.std_error, row.reps).unwrap();
    }
    writeln!(csv, "slope,{slope},,").unwrap();
    let (first, last) = (&r.rows[0], &r.rows[r.rows.len() - 1]);
    let separation = 2.0 * first.std_error.hypot(last.std_error);
    let monotone = r.rows.windows(2).all(|w| w[1].estimate < w[0].estimate);
    let pass = monotone && first.estimate - last.estimate > separation && slope <= CHAOS_SLOPE_MAX;
    let estimates: Vec<String> = r.rows.iter().map(|row| format!("{:.4}", row.estimate)).collect();
    Outcome {
        pass,
        detail: format!(
            "E sup W1^2 = [{}], drop {:.4} vs 2 SE {separation:.4}, slope {slope:.3} (max {CHAOS_SLOPE_MAX})",
            estimates.join(", "),
            first.estimate - last.estimate
        ),
        csv,
    }
}

fn criterion_8() -> Outcome {
    let g = grid(10);
    let m0 = EmpiricalMeasure::dirac(&[0.0], true);
    let params = ConvergenceParams {
        ns: vec![2, 4, 8],
        reps: POLICY_REPS,
        lattice: LatticeSpec { center: 0.0, h: Some(1.0 / 6.0), half_width: 24 },
        lattice_max: 3,
        lsmc_paths: 20_000,
        noise: None,
        eta: DEFAULT_ETA,
    };
    let mut csv = String::from("model,N,backend,table_value,value,std_error,oracle_gap,tolerance\n");
    let mut details = Vec::new();
    let mut pass = true;
    for spec in [BuiltinModel::decoupled_additive(), BuiltinModel::mean_reverter()] {
        let model = spec.build();
        let r = value_convergence_experiment(&model, Some(&spec), &m0, &g, &params, SEED).unwrap();
        for row in &r.rows {
            let gap = row.oracle_gap.map_or(String::new(), |v| v.to_string());
            let tol = row.tolerance.map_or(String::new(), |v| v.to_string());
            writeln!(csv, "{},{},{},{},{},{},{gap},{tol}", spec.tag(), row.n, row.backend, row.table_value, row.value, row.std_error).unwrap();
        }
        if model.is_coupled() {
            let diffs: Vec<f64> = r.differences.iter().map(|d| d.1).collect();
            let ok = diffs.windows(2).all(|w| w[1] < w[0]);
            pass &= ok && !diffs.is_empty();
            let shown: Vec<String> = diffs.iter().map(|d| format!("{d:.4}")).collect();
            details.push(format!("{} |V^N - V^2N| = [{}]", spec.tag(), shown.join(", ")));
        } else {
            let ok = r.rows.iter().all(|row| matches!((row.oracle_gap, row.tolerance), (Some(gap), Some(tol)) if gap <= tol));
            pass &= ok;
            let worst = r
                .rows
                .iter()
                .map(|row| row.oracle_gap.unwrap_or(f64::INFINITY) / row.tolerance.unwrap_or(0.0))
                .fold(0.0, f64::max);
            details.push(format!("{} max gap / (3 SE + tol_disc) = {worst:.3}", spec.tag()));
        }
    }
    Outcome {
        pass,
        detail: details.join("; "),
        csv,
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let m = random_measure(&mut rng, 256, 1, |_| true);
    let p = TransitionDensity::from_fn(&m, |x| 1.0 / (1.0 + (-x[0]).exp()));
    let weight = 1.0 / 256.0;
    let mut csv = String::from("n,error,bound,nonempty_cells\n");
    let mut errors = Vec::new();
    let mut bounded = true;
    for n in [1usize, 2, 4, 8, 16] {
        let r = pure_approximation(&m, &p, n, &Transport::general()).unwrap();
        let bound = r.bound(n, weight);
        bounded &= r.error <= bound;
        errors.push(r.error);
        writeln!(csv, "{n},{},{bound},{}", r.error, r.nonempty_cells).unwrap();
    }
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    Outcome {
        pass: decreasing && bounded,
        detail: format!("W1(m^A, m') = [{}], decreasing {decreasing}, within bound {bounded}", shown.join(", ")),
        csv,
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("brute-force equivalence", criterion_1),
        ("decoupled oracle", criterion_2),
        ("policy optimality", criterion_3),
        ("regime monotonicity", criterion_4),
        ("derivative projection", criterion_5),
        ("Wasserstein correctness", criterion_6),
        ("propagation of chaos", criterion_7),
        ("value convergence", criterion_8),
        ("pure approximation", criterion_9),
    ];
    // `MFSTOP_CRITERIA=1,4` restricts the run; the default is all of them.
    let selected: Vec<usize> = std::env::var("MFSTOP_CRITERIA")
        .map(|v| v.split(',').filter_map(|c| c.trim().parse().ok()).collect())
        .unwrap_or_else(|_| (1..=10).collect());
    let mut failed = Vec::new();
    let mut bodies = vec![None; criteria.len()];
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !selected.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < LIMITS[i];
        let pass = outcome.pass && in_time;
        report(&format!(
            "criterion {} {}: {name}: {} ({secs:.2} s, limit {} s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            LIMITS[i]
        ));
        if !pass {
            failed.push(i + 1);
        }
        bodies[i] = Some(outcome.csv);
    }
    if selected.contains(&10) {
        let mut rerun = Vec::new();
        let mut differing = Vec::new();
        for (i, (_, run)) in criteria.iter().enumerate() {
            if let Some(body) = &bodies[i] {
                rerun.push(i + 1);
                if run().csv != *body {
                    differing.push(i + 1);
                }
            }
        }
        let pass = differing.is_empty() && !rerun.is_empty();
        report(&format!(
            "criterion 10 {}: reproducibility: same-seed reruns of criteria {rerun:?} give {} CSV bodies{}",
            if pass { "PASS" } else { "FAIL" },
            if differing.is_empty() { "byte-identical" } else { "different" },
            if differing.is_empty() { String::new() } else { format!(" for {differing:?}") }
        ));
        if !pass {
            failed.push(10);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
