//! Propagation-of-chaos and value-convergence experiments.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{line_w1_above, transport_cost, w1_bounds_1d, EmpiricalMeasure, GroundMetric, MeasureFlow, Transport};
use crate::model::{BuiltinModel, Model};
use crate::policy::{evaluate_policy, mean_and_se, EvalRule, StoppingPolicy, DEFAULT_ETA};
use crate::simulate::{
    mckean_vlasov_flow, resample, simulate_system, Noise, ParticlePaths, PicardParams, StoppingRule, StreamKey, SurvivalLaw,
    SystemState, TimeGrid,
};
use crate::snell::{solve_cascade_with_spec, solve_single, Backend, LatticeSpec, LsmcParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosParams {
    /// Strictly increasing system sizes.
    pub ns: Vec<usize>,
    pub reps: usize,
    /// Reference cloud size; defaults to `10 max(ns)`.
    #[serde(default)]
    pub cloud: Option<usize>,
    pub k_max: usize,
    pub tol: f64,
    #[serde(default = "gaussian")]
    pub noise: Noise,
    #[serde(default)]
    pub metric: GroundMetric,
    /// Also estimate `E[sup_t W2^2]`.
    #[serde(default)]
    pub secondary_w2: bool,
    /// Compare the reference flow with one built on half the cloud.
    #[serde(default)]
    pub bias_check: bool,
}

fn gaussian() -> Noise {
    Noise::Gaussian
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChaosRow {
    pub n: usize,
    /// Mean of `max_s W1^2(m^N(Y_s), m_s)`.
    pub estimate: f64,
    pub std_error: f64,
    pub reps: usize,
    pub w2_estimate: Option<f64>,
    pub w2_std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChaosReport {
    pub rows: Vec<ChaosRow>,
    pub slope: Option<f64>,
    pub cloud: usize,
    pub picard_gap: f64,
    pub picard_iterations: usize,
    pub picard_converged: bool,
    pub gap_is_bound: bool,
    /// `max_s W1` between the reference flow and its half-cloud counterpart.
    pub reference_bias: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares slope of `ln estimate` against `ln N`.
pub fn rate_fit(report: &ChaosReport) -> Result<RateFit> {
    fit_log_log(&report.rows.iter().map(|r| (r.n as f64, r.estimate)).collect::<Vec<_>>())
}

fn fit_log_log(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::Unsupported(format!("rate fit needs 3 sizes, got {}", points.len())));
    }
    if points.iter().any(|p| !(p.1 > 0.0)) {
        return Err(Error::Unsupported("rate fit needs positive estimates".into()));
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.0.ln(), p.1.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Unsupported("degenerate rate fit: all sizes equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// `N` atoms drawn independently from `m0`.
pub fn sample_iid(m0: &EmpiricalMeasure, n: usize, key: StreamKey) -> Result<SystemState> {
    let dist = WeightedIndex::new(m0.weights()).map_err(|e| Error::InvalidMeasure(e.to_string()))?;
    let mut rng = key.aux_rng(1);
    let mut xs = Vec::with_capacity(n * m0.dim());
    let mut alive = Vec::with_capacity(n);
    for _ in 0..n {
        let k = dist.sample(&mut rng);
        xs.extend_from_slice(m0.x(k));
        alive.push(m0.is_alive(k));
    }
    SystemState::new(m0.dim(), xs, alive)
}

/// `max_s W1^2(m^N(Y_s), m_s)`. In d = 1 nodes whose upper bound cannot beat
/// the running maximum are skipped.
pub fn sup_w1_squared(paths: &ParticlePaths, reference: &MeasureFlow, metric: &GroundMetric) -> Result<f64> {
    check_nodes(paths, reference)?;
    let t = Transport {
        metric: *metric,
        allow_general: true,
    };
    let nodes = paths.grid.n_nodes();
    if paths.dim != 1 {
        let mut best: f64 = 0.0;
        for s in 0..nodes {
            best = best.max(transport_cost(&paths.measure(s), reference.at(s), 1, &t)?);
        }
        return Ok(best * best);
    }
    let measures: Vec<EmpiricalMeasure> = (0..nodes).map(|s| paths.measure(s)).collect();
    let mut bounds = Vec::with_capacity(nodes);
    for (s, m) in measures.iter().enumerate() {
        let (lo, hi) = w1_bounds_1d(m, reference.at(s), metric)?;
        bounds.push((s, lo, hi));
    }
    let mut best = bounds.iter().map(|b| b.1).fold(0.0, f64::max);
    bounds.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    for &(s, lo, hi) in &bounds {
        if hi <= best {
            break;
        }
        if lo < hi {
            if let Some(w) = line_w1_above(&measures[s], reference.at(s), metric, best)? {
                best = w;
            }
        }
    }
    Ok(best * best)
}

/// `max_s W2^2(m^N(Y_s), m_s)`.
pub fn sup_w2_squared(paths: &ParticlePaths, reference: &MeasureFlow, metric: &GroundMetric) -> Result<f64> {
    check_nodes(paths, reference)?;
    let t = Transport {
        metric: *metric,
        allow_general: true,
    };
    let mut best: f64 = 0.0;
    for s in 0..paths.grid.n_nodes() {
        best = best.max(transport_cost(&paths.measure(s), reference.at(s), 2, &t)?);
    }
    Ok(best)
}

fn check_nodes(paths: &ParticlePaths, reference: &MeasureFlow) -> Result<()> {
    if reference.len() != paths.grid.n_nodes() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Reference flow from a Picard cloud of `10 max(ns)` particles, then for each
/// `N` and replication an i.i.d. sample of `m0` stopped by `law`.
pub fn chaos_experiment(
    model: &Model,
    m0: &EmpiricalMeasure,
    law: &SurvivalLaw,
    grid: &TimeGrid,
    params: &ChaosParams,
    seed: u64,
) -> Result<ChaosReport> {
    if params.ns.is_empty() || params.ns.windows(2).any(|w| w[0] >= w[1]) || params.ns[0] == 0 {
        return Err(Error::config("ns", "must be nonempty, positive and strictly increasing"));
    }
    if params.reps < 2 {
        return Err(Error::config("reps", "need at least 2 replications"));
    }
    law.validate(grid)?;
    let n_max = *params.ns.last().unwrap();
    let cloud = params.cloud.unwrap_or(10 * n_max);
    if cloud < 10 * n_max {
        return Err(Error::config("cloud", format!("{cloud} is below 10 max(ns) = {}", 10 * n_max)));
    }
    let rule = StoppingRule::IidSurvival(law.clone());
    let picard = PicardParams {
        cloud,
        k_max: params.k_max,
        tol: params.tol,
    };
    let reference = mckean_vlasov_flow(model, m0, grid, &rule, params.noise, picard, StreamKey::new(seed, u64::MAX))?;
    let mut warnings = Vec::new();
    if !reference.converged {
        warnings.push(format!(
            "reference flow: Picard gap {} above tolerance {} after {} iterations",
            reference.gap, params.tol, reference.iterations
        ));
    }
    let reference_bias = if params.bias_check {
        let half = PicardParams {
            cloud: cloud / 2,
            ..picard
        };
        let other = mckean_vlasov_flow(model, m0, grid, &rule, params.noise, half, StreamKey::new(seed, u64::MAX - 1))?;
        let t = Transport {
            metric: params.metric,
            allow_general: true,
        };
        let mut worst: f64 = 0.0;
        for s in 0..grid.n_nodes() {
            worst = worst.max(transport_cost(reference.flow.at(s), other.flow.at(s), 1, &t)?);
        }
        Some(worst)
    } else {
        None
    };

    let jobs: Vec<(usize, usize)> = (0..params.ns.len()).flat_map(|i| (0..params.reps).map(move |r| (i, r))).collect();
    let samples: Vec<(f64, Option<f64>)> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let key = StreamKey::new(seed, ((i as u64) << 32) | r as u64);
            let y0 = sample_iid(m0, params.ns[i], key)?;
            let paths = simulate_system(model, grid, &y0, &rule, params.noise, key)?;
            let w1 = sup_w1_squared(&paths, &reference.flow, &params.metric)?;
            let w2 = if params.secondary_w2 {
                Some(sup_w2_squared(&paths, &reference.flow, &params.metric)?)
            } else {
                None
            };
            Ok((w1, w2))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<ChaosRow> = params
        .ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let block = &samples[i * params.reps..(i + 1) * params.reps];
            let (estimate, std_error) = mean_and_se(block.iter().map(|s| s.0));
            let w2 = params.secondary_w2.then(|| mean_and_se(block.iter().map(|s| s.1.unwrap_or(0.0))));
            ChaosRow {
                n,
                estimate,
                std_error,
                reps: params.reps,
                w2_estimate: w2.map(|w| w.0),
                w2_std_error: w2.map(|w| w.1),
            }
        })
        .collect();
    let mut report = ChaosReport {
        rows,
        slope: None,
        cloud,
        picard_gap: reference.gap,
        picard_iterations: reference.iterations,
        picard_converged: reference.converged,
        gap_is_bound: reference.gap_is_bound,
        reference_bias,
        warnings,
    };
    match rate_fit(&report) {
        Ok(fit) => report.slope = Some(fit.slope),
        Err(e) => report.warnings.push(format!("rate fit: {e}")),
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams {
    /// Doubling ladder of system sizes.
    pub ns: Vec<usize>,
    /// Policy re-simulation replications.
    pub reps: usize,
    pub lattice: LatticeSpec,
    /// Largest `N` solved on the lattice; larger systems use regression.
    #[serde(default = "default_lattice_max")]
    pub lattice_max: usize,
    pub lsmc_paths: usize,
    /// Evaluation and training noise; defaults to the lattice chain.
    #[serde(default)]
    pub noise: Option<Noise>,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_lattice_max() -> usize {
    3
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub backend: &'static str,
    /// `v^N(t0, y^N)` read from the table.
    pub table_value: f64,
    /// Policy re-simulation estimate of `V^N(t0, m^N(y^N))`.
    pub value: f64,
    pub std_error: f64,
    pub clamps: usize,
    pub oracle_gap: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// `(N, |V^N - V^{2N}|)` along the ladder.
    pub differences: Vec<(usize, f64)>,
    /// Mean-field value for decoupled models.
    pub oracle: Option<f64>,
    /// `|oracle - oracle on the twice refined grid|`.
    pub tol_disc: Option<f64>,
    pub warnings: Vec<String>,
}

/// `int v(t0, x, i) m(dy)` with `v` the single-particle value.
fn decoupled_oracle(model: &Model, m0: &EmpiricalMeasure, grid: &TimeGrid, lattice: &LatticeSpec) -> Result<f64> {
    let single = solve_single(model, grid, &lattice.resolve(model, grid)?)?;
    let mut acc = 0.0;
    for (w, x, alive) in m0.atoms() {
        acc += w * single.value(0, x[0], alive)?;
    }
    Ok(acc)
}

pub fn value_convergence_experiment(
    model: &Model,
    spec: Option<&BuiltinModel>,
    m0: &EmpiricalMeasure,
    grid: &TimeGrid,
    params: &ConvergenceParams,
    seed: u64,
) -> Result<ConvergenceReport> {
    if params.ns.is_empty() || params.ns[0] == 0 {
        return Err(Error::config("ns", "must be nonempty and positive"));
    }
    if params.ns.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::config("ns", "must double at every step"));
    }
    if m0.dim() != 1 {
        return Err(Error::Unsupported("value convergence needs d = 1".into()));
    }
    let lattice = params.lattice.resolve(model, grid)?;
    let noise = params.noise.unwrap_or(Noise::Lattice { h: lattice.h });
    let mut warnings = Vec::new();
    let (oracle, tol_disc) = if model.is_coupled() {
        (None, None)
    } else {
        let v = decoupled_oracle(model, m0, grid, &params.lattice)?;
        let fine_spec = LatticeSpec {
            h: params.lattice.h.map(|h| h / 2f64.sqrt()),
            half_width: params.lattice.half_width * 2,
            ..params.lattice.clone()
        };
        let fine = decoupled_oracle(model, m0, &grid.refined(2), &fine_spec)?;
        (Some(v), Some((v - fine).abs()))
    };

    let mut rows = Vec::with_capacity(params.ns.len());
    for (i, &n) in params.ns.iter().enumerate() {
        let key = StreamKey::new(seed, i as u64);
        let y = resample(m0, n, &mut key.aux_rng(2))?;
        let backend = if n <= params.lattice_max {
            Backend::Lattice(params.lattice.clone())
        } else {
            Backend::Lsmc(LsmcParams {
                paths: params.lsmc_paths,
                seed: seed.wrapping_add(1 + i as u64),
                origin: (0..n).map(|k| (y.xs[k], y.alive[k])).collect(),
                ridge: 1e-8,
                noise,
                max_hazard: 0.5,
            })
        };
        let table = Arc::new(solve_cascade_with_spec(model, spec, n, grid, &backend).map_err(|e| e.in_stage("solve"))?);
        warnings.extend(table.warnings.iter().map(|w| format!("N={n}: {w}")));
        let table_value = table.value_at(0, &y)?;
        let policy = Arc::new(StoppingPolicy::new(table.clone(), params.eta)?);
        let est = evaluate_policy(model, grid, &y, EvalRule::Policy(&policy), params.reps, noise, seed.wrapping_add(100 + i as u64))?;
        if est.clamps > 0 {
            warnings.push(format!("N={n}: {} lattice clamps during evaluation", est.clamps));
        }
        let oracle_gap = oracle.map(|v| (est.j - v).abs());
        let tolerance = tol_disc.map(|t| 3.0 * est.std_error + t);
        rows.push(ConvergenceRow {
            n,
            backend: table.backend_tag(),
            table_value,
            value: est.j,
            std_error: est.std_error,
            clamps: est.clamps,
            oracle_gap,
            tolerance,
        });
    }
    let differences = rows.windows(2).map(|w| (w[0].n, (w[0].value - w[1].value).abs())).collect();
    Ok(ConvergenceReport {
        rows,
        differences,
        oracle,
        tol_disc,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::simulate_decoupled;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    fn report(points: &[(usize, f64)]) -> ChaosReport {
        ChaosReport {
            rows: points
                .iter()
                .map(|&(n, estimate)| ChaosRow {
                    n,
                    estimate,
                    std_error: 0.0,
                    reps: 1,
                    w2_estimate: None,
                    w2_std_error: None,
                })
                .collect(),
            slope: None,
            cloud: 0,
            picard_gap: 0.0,
            picard_iterations: 0,
            picard_converged: true,
            gap_is_bound: false,
            reference_bias: None,
            warnings: vec![],
        }
    }

    #[test]
    fn exact_power_law_slope() {
        let r = report(&[(8, 8f64.powf(-2.0 / 3.0)), (32, 32f64.powf(-2.0 / 3.0)), (128, 128f64.powf(-2.0 / 3.0))]);
        assert!((rate_fit(&r).unwrap().slope + 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(rate_fit(&report(&[(8, 0.3), (32, 0.3), (128, 0.3)])).unwrap().slope, 0.0);
        assert!(rate_fit(&report(&[(8, 0.3), (32, 0.3)])).is_err());
        assert!(rate_fit(&report(&[(8, 0.3), (8, 0.2), (8, 0.1)])).is_err());
        assert!(rate_fit(&report(&[(8, 0.3), (16, 0.0), (32, 0.1)])).is_err());
    }

    #[test]
    fn self_comparison_is_zero() {
        let model = BuiltinModel::decoupled_additive().build();
        let g = grid(6);
        let m0 = EmpiricalMeasure::from_states_1d(&[(-0.5, true), (0.0, true), (0.5, true), (1.0, true)]).unwrap();
        let law = SurvivalLaw::uniform_nodes(&g);
        let rule = StoppingRule::IidSurvival(law);
        let key = StreamKey::new(5, 0);
        let y0 = resample(&m0, 40, &mut key.aux_rng(0)).unwrap();
        let flow = MeasureFlow::constant(g.times(), y0.measure()).unwrap();
        let cloud = simulate_decoupled(&model, &g, &y0, &rule, Noise::Gaussian, key, &flow).unwrap();
        let system = simulate_system(&model, &g, &y0, &rule, Noise::Gaussian, key).unwrap();
        assert!(sup_w1_squared(&system, &cloud.flow(), &GroundMetric::default()).unwrap() < 1e-24);
        assert!(sup_w2_squared(&system, &cloud.flow(), &GroundMetric::default()).unwrap() < 1e-24);
    }

    #[test]
    fn pruned_sup_matches_exhaustive_scan() {
        let model = BuiltinModel::mean_reverter().build();
        let g = grid(8);
        let m0 = EmpiricalMeasure::from_states_1d(&[(-1.0, true), (0.0, true), (1.0, true)]).unwrap();
        let law = SurvivalLaw::uniform_nodes(&g);
        let rule = StoppingRule::IidSurvival(law);
        let reference = simulate_system(&model, &g, &resample(&m0, 300, &mut StreamKey::new(1, 9).aux_rng(0)).unwrap(), &rule, Noise::Gaussian, StreamKey::new(1, 9)).unwrap();
        let t = Transport::general();
        for r in 0..5 {
            let key = StreamKey::new(2, r);
            let paths = simulate_system(&model, &g, &sample_iid(&m0, 17, key).unwrap(), &rule, Noise::Gaussian, key).unwrap();
            let fast = sup_w1_squared(&paths, &reference.flow(), &GroundMetric::default()).unwrap();
            let slow = (0..g.n_nodes())
                .map(|s| transport_cost(&paths.measure(s), reference.flow().at(s), 1, &t).unwrap())
                .fold(0.0, f64::max);
            assert!((fast - slow * slow).abs() <= 1e-12, "{fast} vs {}", slow * slow);
        }
    }

    #[test]
    fn deterministic_identical_dynamics_measure_sampling_error() {
        let model = Model::new("still", 1, false);
        let g = grid(3);
        let m0 = EmpiricalMeasure::from_states_1d(&[(0.0, true), (1.0, true)]).unwrap();
        let params = ChaosParams {
            ns: vec![4, 16, 64],
            reps: 64,
            cloud: None,
            k_max: 3,
            tol: 1e-9,
            noise: Noise::Gaussian,
            metric: GroundMetric::default(),
            secondary_w2: false,
            bias_check: false,
        };
        let r = chaos_experiment(&model, &m0, &SurvivalLaw::never(&g), &g, &params, 3).unwrap();
        assert!(r.picard_converged);
        // Sampling a two-atom law: W1 is |p_hat - 1/2|, so E W1^2 = 1 / (4N).
        for row in &r.rows {
            let exact = 0.25 / row.n as f64;
            assert!((row.estimate - exact).abs() <= 4.0 * row.std_error + 1e-12, "{row:?}");
        }
        assert!(r.rows[0].estimate > r.rows[2].estimate);
        let again = chaos_experiment(&model, &m0, &SurvivalLaw::never(&g), &g, &params, 3).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn rejects_small_clouds_and_unsorted_sizes() {
        let model = Model::new("still", 1, false);
        let g = grid(3);
        let m0 = EmpiricalMeasure::dirac(&[0.0], true);
        let mut params = ChaosParams {
            ns: vec![4, 2],
            reps: 4,
            cloud: None,
            k_max: 1,
            tol: 1.0,
            noise: Noise::Gaussian,
            metric: GroundMetric::default(),
            secondary_w2: false,
            bias_check: false,
        };
        assert!(chaos_experiment(&model, &m0, &SurvivalLaw::never(&g), &g, &params, 0).is_err());
        params.ns = vec![2, 4];
        params.cloud = Some(39);
        assert!(chaos_experiment(&model, &m0, &SurvivalLaw::never(&g), &g, &params, 0).is_err());
    }

    #[test]
    fn identical_deterministic_particles_have_equal_values() {
        let model = Model::new("det", 1, false).with_running_reward_1d(|_, x, _| 1.0 - x * x);
        let g = grid(4);
        let m0 = EmpiricalMeasure::dirac(&[0.0], true);
        let params = ConvergenceParams {
            ns: vec![1, 2],
            reps: 4,
            lattice: LatticeSpec {
                center: 0.0,
                h: Some(0.25),
                half_width: 8,
            },
            lattice_max: 3,
            lsmc_paths: 0,
            noise: None,
            eta: DEFAULT_ETA,
        };
        let r = value_convergence_experiment(&model, None, &m0, &g, &params, 1).unwrap();
        assert_eq!(r.rows[0].value, r.rows[1].value);
        assert_eq!(r.differences, vec![(1, 0.0)]);
        assert_eq!(r.oracle, Some(r.rows[0].value));
    }
}
