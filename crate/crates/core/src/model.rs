//! Symmetric coefficient sets `(b, sigma, f, g)` and the built-in examples.
//!
//! Every coefficient receives the full measure of the particle system; no
//! parametric form is assumed. `g` only sees the x-marginal.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{EmpiricalMeasure, XMarginal};

pub type VectorField = Arc<dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(f64, &[f64], &EmpiricalMeasure) -> f64 + Send + Sync>;
pub type TerminalReward = Arc<dyn Fn(XMarginal<'_>) -> f64 + Send + Sync>;

/// Coefficients of the symmetric particle system.
///
/// `diffusion` writes a row-major `d x d` matrix that must be symmetric
/// positive semidefinite.
#[derive(Clone)]
pub struct Model {
    name: String,
    dim: usize,
    coupled: bool,
    drift: VectorField,
    diffusion: VectorField,
    running: ScalarField,
    terminal: TerminalReward,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("coupled", &self.coupled)
            .finish_non_exhaustive()
    }
}

impl Model {
    /// A model with `b = 0`, `sigma = 0`, `f = 0`, `g = 0`.
    pub fn new(name: impl Into<String>, dim: usize, coupled: bool) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            name: name.into(),
            dim,
            coupled,
            drift: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            running: Arc::new(|_, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
        }
    }

    pub fn with_drift(
        mut self,
        b: impl Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Arc::new(b);
        self
    }

    pub fn with_diffusion(
        mut self,
        sigma: impl Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(sigma);
        self
    }

    pub fn with_running_reward(
        mut self,
        f: impl Fn(f64, &[f64], &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running = Arc::new(f);
        self
    }

    pub fn with_terminal_reward(
        mut self,
        g: impl Fn(XMarginal<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Arc::new(g);
        self
    }

    /// Scalar drift for `d = 1`.
    pub fn with_drift_1d(
        self,
        b: impl Fn(f64, f64, &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.with_drift(move |t, x, m, out| out[0] = b(t, x[0], m))
    }

    /// Scalar volatility for `d = 1`.
    pub fn with_diffusion_1d(
        self,
        sigma: impl Fn(f64, f64, &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.with_diffusion(move |t, x, m, out| out[0] = sigma(t, x[0], m))
    }

    pub fn with_running_reward_1d(
        self,
        f: impl Fn(f64, f64, &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.with_running_reward(move |t, x, m| f(t, x[0], m))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when some coefficient reads its measure argument.
    pub fn is_coupled(&self) -> bool {
        self.coupled
    }

    pub fn drift(&self, t: f64, x: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        (self.drift)(t, x, m, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], m: &EmpiricalMeasure, out: &mut [f64]) {
        (self.diffusion)(t, x, m, out)
    }

    pub fn running_reward(&self, t: f64, x: &[f64], m: &EmpiricalMeasure) -> f64 {
        (self.running)(t, x, m)
    }

    pub fn terminal_reward(&self, m: XMarginal<'_>) -> f64 {
        (self.terminal)(m)
    }

    /// `g` at the Dirac mass `delta_x`; the per-particle terminal payoff of a
    /// decoupled model.
    pub fn terminal_at_point(&self, x: &[f64]) -> f64 {
        let m = EmpiricalMeasure::dirac(x, false);
        (self.terminal)(m.x_marginal())
    }
}

/// `F(t, m) = int f(t, x, m) m(dx, 1)`.
pub fn eval_running(model: &Model, t: f64, m: &EmpiricalMeasure) -> Result<f64> {
    let mut acc = 0.0;
    for (k, (w, x, alive)) in m.atoms().enumerate() {
        if !alive {
            continue;
        }
        let v = model.running_reward(t, x, m);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "running reward",
                atom: k,
            });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// `g(m(., {0, 1}))`: stopped and alive atoms both contribute.
pub fn eval_terminal(model: &Model, m: &EmpiricalMeasure) -> Result<f64> {
    let v = model.terminal_reward(m.x_marginal());
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteValue("terminal reward"))
    }
}

/// Largest violation of symmetry or positive semidefiniteness of
/// `sigma(t, x, m)`; zero for a valid matrix.
pub fn diffusion_defect(model: &Model, t: f64, x: &[f64], m: &EmpiricalMeasure) -> f64 {
    let d = model.dim();
    let mut s = vec![0.0; d * d];
    model.diffusion(t, x, m, &mut s);
    let mat = nalgebra::DMatrix::from_row_slice(d, d, &s);
    let asym = (&mat - mat.transpose()).abs().max();
    let sym = (&mat + mat.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    asym.max((-min_eig).max(0.0))
}

/// Built-in models. All are one-dimensional except `ConstantCoefficients`,
/// and all have coefficients that are Lipschitz with linear growth.
///
/// * `DecoupledAdditive`: `b = kappa (center - x)`, `sigma` constant,
///   `f = rate - slope |x - center|`, `g(mu) = int (level - terminal_slope |x - center|) dmu`.
///   Growth constants: `|b| <= kappa (|center| + |x|)`, `|f| <= |rate| + slope (|center| + |x|)`.
/// * `MeanReverterToMean`: `b = a (xbar_m - x)` with `xbar_m = int x m(dx, 1)`,
///   `sigma` constant, `f = rate - slope |x - xbar_m|`,
///   `g(mu) = -terminal_weight |int x dmu - target|`.
///   Growth constants: `|b| <= a (|x| + ||m||_1)`, `|f| <= |rate| + slope (|x| + ||m||_1)`,
///   `|g| <= terminal_weight (||mu||_1 + |target|)`.
/// * `ConstantCoefficients`: `b = drift`, `sigma = sigma I`, `f = running`, `g = terminal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinModel {
    DecoupledAdditive {
        #[serde(default = "defaults::kappa")]
        kappa: f64,
        #[serde(default)]
        center: f64,
        #[serde(default = "defaults::sigma")]
        sigma: f64,
        #[serde(default = "defaults::rate")]
        rate: f64,
        #[serde(default = "defaults::slope")]
        slope: f64,
        #[serde(default)]
        level: f64,
        #[serde(default = "defaults::terminal_slope")]
        terminal_slope: f64,
    },
    MeanReverterToMean {
        #[serde(default = "defaults::kappa")]
        a: f64,
        #[serde(default = "defaults::sigma")]
        sigma: f64,
        #[serde(default = "defaults::rate")]
        rate: f64,
        #[serde(default = "defaults::slope")]
        slope: f64,
        #[serde(default = "defaults::terminal_weight")]
        terminal_weight: f64,
        #[serde(default)]
        target: f64,
    },
    ConstantCoefficients {
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default)]
        drift: f64,
        #[serde(default)]
        sigma: f64,
        #[serde(default)]
        running: f64,
        #[serde(default)]
        terminal: f64,
    },
}

mod defaults {
    pub fn kappa() -> f64 {
        1.0
    }
    pub fn sigma() -> f64 {
        0.5
    }
    pub fn rate() -> f64 {
        0.5
    }
    pub fn slope() -> f64 {
        1.0
    }
    pub fn terminal_slope() -> f64 {
        0.5
    }
    pub fn terminal_weight() -> f64 {
        1.0
    }
    pub fn dim() -> usize {
        1
    }
}

impl BuiltinModel {
    pub fn decoupled_additive() -> Self {
        BuiltinModel::DecoupledAdditive {
            kappa: defaults::kappa(),
            center: 0.0,
            sigma: defaults::sigma(),
            rate: defaults::rate(),
            slope: defaults::slope(),
            level: 0.0,
            terminal_slope: defaults::terminal_slope(),
        }
    }

    pub fn mean_reverter() -> Self {
        BuiltinModel::MeanReverterToMean {
            a: defaults::kappa(),
            sigma: defaults::sigma(),
            rate: defaults::rate(),
            slope: defaults::slope(),
            terminal_weight: defaults::terminal_weight(),
            target: 0.0,
        }
    }

    pub fn constant(drift: f64, sigma: f64, running: f64, terminal: f64) -> Self {
        BuiltinModel::ConstantCoefficients {
            dim: 1,
            drift,
            sigma,
            running,
            terminal,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            BuiltinModel::DecoupledAdditive { .. } => "decoupled_additive",
            BuiltinModel::MeanReverterToMean { .. } => "mean_reverter_to_mean",
            BuiltinModel::ConstantCoefficients { .. } => "constant_coefficients",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, v: f64, nonneg: bool| -> Result<()> {
            if !v.is_finite() || (nonneg && v < 0.0) {
                return Err(Error::config(
                    format!("model.{field}"),
                    format!("expected a finite{} number, got {v}", if nonneg { " nonnegative" } else { "" }),
                ));
            }
            Ok(())
        };
        match *self {
            BuiltinModel::DecoupledAdditive {
                kappa,
                center,
                sigma,
                rate,
                slope,
                level,
                terminal_slope,
            } => {
                check("kappa", kappa, true)?;
                check("center", center, false)?;
                check("sigma", sigma, true)?;
                check("rate", rate, false)?;
                check("slope", slope, false)?;
                check("level", level, false)?;
                check("terminal_slope", terminal_slope, false)
            }
            BuiltinModel::MeanReverterToMean {
                a,
                sigma,
                rate,
                slope,
                terminal_weight,
                target,
            } => {
                check("a", a, true)?;
                check("sigma", sigma, true)?;
                check("rate", rate, false)?;
                check("slope", slope, false)?;
                check("terminal_weight", terminal_weight, false)?;
                check("target", target, false)
            }
            BuiltinModel::ConstantCoefficients {
                dim,
                drift,
                sigma,
                running,
                terminal,
            } => {
                if dim == 0 {
                    return Err(Error::config("model.dim", "must be positive"));
                }
                check("drift", drift, false)?;
                check("sigma", sigma, true)?;
                check("running", running, false)?;
                check("terminal", terminal, false)
            }
        }
    }

    pub fn build(&self) -> Model {
        match *self {
            BuiltinModel::DecoupledAdditive {
                kappa,
                center,
                sigma,
                rate,
                slope,
                level,
                terminal_slope,
            } => Model::new(self.tag(), 1, false)
                .with_drift_1d(move |_, x, _| kappa * (center - x))
                .with_diffusion_1d(move |_, _, _| sigma)
                .with_running_reward_1d(move |_, x, _| rate - slope * (x - center).abs())
                .with_terminal_reward(move |mu| {
                    mu.integrate(|x| level - terminal_slope * (x[0] - center).abs())
                }),
            BuiltinModel::MeanReverterToMean {
                a,
                sigma,
                rate,
                slope,
                terminal_weight,
                target,
            } => Model::new(self.tag(), 1, true)
                .with_drift_1d(move |_, x, m| a * (m.alive_first_moment()[0] - x))
                .with_diffusion_1d(move |_, _, _| sigma)
                .with_running_reward_1d(move |_, x, m| {
                    rate - slope * (x - m.alive_first_moment()[0]).abs()
                })
                .with_terminal_reward(move |mu| -terminal_weight * (mu.mean()[0] - target).abs()),
            BuiltinModel::ConstantCoefficients {
                dim,
                drift,
                sigma,
                running,
                terminal,
            } => Model::new(self.tag(), dim, false)
                .with_drift(move |_, _, _, out| out.fill(drift))
                .with_diffusion(move |_, _, _, out| {
                    out.fill(0.0);
                    for j in 0..dim {
                        out[j * dim + j] = sigma;
                    }
                })
                .with_running_reward(move |_, _, _| running)
                .with_terminal_reward(move |_| terminal),
        }
    }
}
