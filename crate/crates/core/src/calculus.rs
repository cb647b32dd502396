//! Cylinder functionals `U(t, m) = G(t, int h_1 dm, .., int h_p dm)` with
//! closed-form linear derivatives, their projections onto `N`-particle
//! configurations, and the generator and stopping terms built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::model::{eval_running, Model};
use crate::simulate::{resample, simulate_system, Noise, StoppingRule, StreamKey, SystemState, TimeGrid};

/// Shape of an inner test function; `u = scale x_1 + shift`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    /// `u`.
    Linear,
    /// `u^2`.
    Square,
    Sin,
    Cos,
    Tanh,
    /// `|x|^2`, ignoring scale and shift.
    SquaredNorm,
    /// `exp(-|x|^2 / 2)`, ignoring scale and shift.
    Gaussian,
}

/// `h(x, i)`, multiplied by `i` when `alive_only`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inner {
    pub kind: InnerKind,
    pub scale: f64,
    pub shift: f64,
    pub alive_only: bool,
}

impl Inner {
    pub fn new(kind: InnerKind, alive_only: bool) -> Self {
        Self {
            kind,
            scale: 1.0,
            shift: 0.0,
            alive_only,
        }
    }

    pub fn value(&self, x: &[f64], alive: bool) -> f64 {
        if self.alive_only && !alive {
            return 0.0;
        }
        let u = self.scale * x[0] + self.shift;
        match self.kind {
            InnerKind::Linear => u,
            InnerKind::Square => u * u,
            InnerKind::Sin => u.sin(),
            InnerKind::Cos => u.cos(),
            InnerKind::Tanh => u.tanh(),
            InnerKind::SquaredNorm => x.iter().map(|v| v * v).sum(),
            InnerKind::Gaussian => (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp(),
        }
    }

    /// `d_x h` into `grad` and row-major `d^2_xx h` into `hess`.
    pub fn derivatives(&self, x: &[f64], alive: bool, grad: &mut [f64], hess: &mut [f64]) {
        grad.fill(0.0);
        hess.fill(0.0);
        if self.alive_only && !alive {
            return;
        }
        let d = x.len();
        let (a, u) = (self.scale, self.scale * x[0] + self.shift);
        let (d1, d2) = match self.kind {
            InnerKind::Linear => (1.0, 0.0),
            InnerKind::Square => (2.0 * u, 2.0),
            InnerKind::Sin => (u.cos(), -u.sin()),
            InnerKind::Cos => (-u.sin(), -u.cos()),
            InnerKind::Tanh => {
                let th = u.tanh();
                (1.0 - th * th, -2.0 * th * (1.0 - th * th))
            }
            InnerKind::SquaredNorm => {
                for j in 0..d {
                    grad[j] = 2.0 * x[j];
                    hess[j * d + j] = 2.0;
                }
                return;
            }
            InnerKind::Gaussian => {
                let e = (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp();
                for j in 0..d {
                    grad[j] = -x[j] * e;
                    for l in 0..d {
                        hess[j * d + l] = (x[j] * x[l] - if j == l { 1.0 } else { 0.0 }) * e;
                    }
                }
                return;
            }
        };
        grad[0] = a * d1;
        hess[0] = a * a * d2;
    }
}

/// Outer function with its time derivative, gradient and Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outer {
    /// `c0 + a . z + z' B z` with `B` row-major and symmetric.
    Quadratic { c0: f64, a: Vec<f64>, b: Vec<f64> },
    /// `exp(-t) z1 z2 + sin(z1)`.
    TrigProduct,
    /// `ln(1 + z1^2) + t z2 + z1 z2`.
    LogProduct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterEval {
    pub value: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    /// Row-major `p x p`.
    pub hess: Vec<f64>,
}

impl Outer {
    pub fn arity(&self) -> usize {
        match self {
            Outer::Quadratic { a, .. } => a.len(),
            Outer::TrigProduct | Outer::LogProduct => 2,
        }
    }

    pub fn eval(&self, t: f64, z: &[f64]) -> OuterEval {
        match self {
            Outer::Quadratic { c0, a, b } => {
                let p = a.len();
                let mut value = *c0;
                let mut grad = a.clone();
                let mut hess = vec![0.0; p * p];
                for j in 0..p {
                    value += a[j] * z[j];
                    for l in 0..p {
                        value += z[j] * b[j * p + l] * z[l];
                        grad[j] += (b[j * p + l] + b[l * p + j]) * z[l];
                        hess[j * p + l] = b[j * p + l] + b[l * p + j];
                    }
                }
                OuterEval {
                    value,
                    dt: 0.0,
                    grad,
                    hess,
                }
            }
            Outer::TrigProduct => {
                let e = (-t).exp();
                OuterEval {
                    value: e * z[0] * z[1] + z[0].sin(),
                    dt: -e * z[0] * z[1],
                    grad: vec![e * z[1] + z[0].cos(), e * z[0]],
                    hess: vec![-z[0].sin(), e, e, 0.0],
                }
            }
            Outer::LogProduct => {
                let q = 1.0 + z[0] * z[0];
                OuterEval {
                    value: q.ln() + t * z[1] + z[0] * z[1],
                    dt: z[1],
                    grad: vec![2.0 * z[0] / q + z[1], t + z[0]],
                    hess: vec![2.0 * (1.0 - z[0] * z[0]) / (q * q), 1.0, 1.0, 0.0],
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderFunctional {
    pub name: String,
    pub outer: Outer,
    pub inner: Vec<Inner>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinFunctional {
    /// `int x m(dx, 1)`.
    AliveMean,
    /// `(int x m(dx, 1))^2`.
    AliveMeanSquared,
    /// `int |x|^2 m(dx, 1)`.
    AliveSecondMoment,
    TrigProduct,
    LogProduct,
    /// Variance of the x-marginal.
    XVariance,
}

impl BuiltinFunctional {
    pub const ALL: [BuiltinFunctional; 6] = [
        Self::AliveMean,
        Self::AliveMeanSquared,
        Self::AliveSecondMoment,
        Self::TrigProduct,
        Self::LogProduct,
        Self::XVariance,
    ];

    pub fn build(self) -> CylinderFunctional {
        use InnerKind::*;
        let q = |c0: f64, a: Vec<f64>, b: Vec<f64>| Outer::Quadratic { c0, a, b };
        let (name, outer, inner) = match self {
            Self::AliveMean => ("alive_mean", q(0.0, vec![1.0], vec![0.0]), vec![Inner::new(Linear, true)]),
            Self::AliveMeanSquared => ("alive_mean_squared", q(0.0, vec![0.0], vec![1.0]), vec![Inner::new(Linear, true)]),
            Self::AliveSecondMoment => ("alive_second_moment", q(0.0, vec![1.0], vec![0.0]), vec![Inner::new(SquaredNorm, true)]),
            Self::TrigProduct => ("trig_product", Outer::TrigProduct, vec![Inner::new(Sin, true), Inner::new(Gaussian, false)]),
            Self::LogProduct => ("log_product", Outer::LogProduct, vec![Inner::new(Tanh, true), Inner::new(Cos, true)]),
            Self::XVariance => (
                "x_variance",
                q(0.0, vec![0.0, 1.0], vec![-1.0, 0.0, 0.0, 0.0]),
                vec![Inner::new(Linear, false), Inner::new(Square, false)],
            ),
        };
        CylinderFunctional {
            name: name.into(),
            outer,
            inner,
        }
    }
}

impl CylinderFunctional {
    pub fn new(name: impl Into<String>, outer: Outer, inner: Vec<Inner>) -> Result<Self> {
        if outer.arity() != inner.len() {
            return Err(Error::config(
                "functional",
                format!("outer arity {} but {} inner functions", outer.arity(), inner.len()),
            ));
        }
        if let Outer::Quadratic { a, b, .. } = &outer {
            if b.len() != a.len() * a.len() {
                return Err(Error::config("functional.outer.b", "must be p x p"));
            }
        }
        Ok(Self {
            name: name.into(),
            outer,
            inner,
        })
    }

    /// `z_j = int h_j dm`.
    pub fn moments(&self, m: &EmpiricalMeasure) -> Vec<f64> {
        self.inner.iter().map(|h| m.integrate(|x, i| h.value(x, i))).collect()
    }

    pub fn value(&self, t: f64, m: &EmpiricalMeasure) -> f64 {
        self.outer.eval(t, &self.moments(m)).value
    }

    /// `delta_m U(t, m, (x, i))`.
    pub fn linear_derivative(&self, t: f64, m: &EmpiricalMeasure, x: &[f64], alive: bool) -> f64 {
        let g = self.outer.eval(t, &self.moments(m));
        self.inner.iter().zip(&g.grad).map(|(h, dg)| dg * h.value(x, alive)).sum()
    }

    /// `d_x delta_m U` and `d^2_xx delta_m U` at `(x, i)` for a given outer gradient.
    fn dx_linear_derivative(&self, grad_g: &[f64], x: &[f64], alive: bool) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let (mut g, mut h) = (vec![0.0; d], vec![0.0; d * d]);
        let (mut gj, mut hj) = (vec![0.0; d], vec![0.0; d * d]);
        for (inner, dg) in self.inner.iter().zip(grad_g) {
            inner.derivatives(x, alive, &mut gj, &mut hj);
            g.iter_mut().zip(&gj).for_each(|(a, b)| *a += dg * b);
            h.iter_mut().zip(&hj).for_each(|(a, b)| *a += dg * b);
        }
        (g, h)
    }

    /// `d^2_mumu U_{1,1}(t, m, x, x~)`, row-major `d x d`.
    pub fn second_measure_derivative(&self, t: f64, m: &EmpiricalMeasure, x: &[f64], x_tilde: &[f64]) -> Vec<f64> {
        let g = self.outer.eval(t, &self.moments(m));
        self.second_measure_derivative_with(&g, x, x_tilde)
    }

    fn second_measure_derivative_with(&self, g: &OuterEval, x: &[f64], x_tilde: &[f64]) -> Vec<f64> {
        let (d, p) = (x.len(), self.inner.len());
        let (mut ga, mut gb, mut scratch) = (vec![0.0; d], vec![0.0; d], vec![0.0; d * d]);
        let mut out = vec![0.0; d * d];
        for j in 0..p {
            self.inner[j].derivatives(x, true, &mut ga, &mut scratch);
            for l in 0..p {
                let c = g.hess[j * p + l];
                if c == 0.0 {
                    continue;
                }
                self.inner[l].derivatives(x_tilde, true, &mut gb, &mut scratch);
                for a in 0..d {
                    for b in 0..d {
                        out[a * d + b] += c * ga[a] * gb[b];
                    }
                }
            }
        }
        out
    }

    /// `D_I U = delta_m U(., (x, 1)) - delta_m U(., (x, 0))`.
    pub fn d_i(&self, t: f64, m: &EmpiricalMeasure, x: &[f64]) -> f64 {
        self.linear_derivative(t, m, x, true) - self.linear_derivative(t, m, x, false)
    }
}

/// `inf` of `D_I U` over the alive atoms of `m`; `+inf` when none is alive.
/// This is the raw infimum, not its lower semicontinuous envelope.
pub fn evaluate_di(u: &CylinderFunctional, t: f64, m: &EmpiricalMeasure) -> f64 {
    m.atoms()
        .filter(|a| a.2 && a.0 > 0.0)
        .map(|(_, x, _)| u.d_i(t, m, x))
        .fold(f64::INFINITY, f64::min)
}

/// `d_t U + int (b . d_x delta_m U_1 + 1/2 sigma sigma' : d^2_xx delta_m U_1) m(dx, 1) + F`.
pub fn evaluate_generator(u: &CylinderFunctional, model: &Model, t: f64, m: &EmpiricalMeasure) -> Result<f64> {
    let d = m.dim();
    if d != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: d,
        });
    }
    let g = u.outer.eval(t, &u.moments(m));
    let (mut b, mut s) = (vec![0.0; d], vec![0.0; d * d]);
    let mut acc = g.dt;
    for (w, x, alive) in m.atoms() {
        if !alive || w == 0.0 {
            continue;
        }
        let (grad, hess) = u.dx_linear_derivative(&g.grad, x, true);
        model.drift(t, x, m, &mut b);
        model.diffusion(t, x, m, &mut s);
        let mut term: f64 = b.iter().zip(&grad).map(|(p, q)| p * q).sum();
        for r in 0..d {
            for c in 0..d {
                let a_rc: f64 = (0..d).map(|k| s[r * d + k] * s[c * d + k]).sum();
                term += 0.5 * a_rc * hess[r * d + c];
            }
        }
        acc += w * term;
    }
    Ok(acc + eval_running(model, t, m)?)
}

/// `phi(t, y) = U(t, m^N(y))` with the analytic partials in `x_k`.
pub struct Projection<'a> {
    pub u: &'a CylinderFunctional,
    pub n: usize,
}

pub fn project(u: &CylinderFunctional, n: usize) -> Projection<'_> {
    Projection { u, n }
}

impl Projection<'_> {
    pub fn value(&self, t: f64, y: &SystemState) -> Result<f64> {
        self.check(y)?;
        Ok(self.u.value(t, &y.measure()))
    }

    fn check(&self, y: &SystemState) -> Result<()> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// `d_{x_k} phi = (1/N) d_x delta_m U_1(x_k)`.
    pub fn gradient(&self, t: f64, y: &SystemState, k: usize) -> Result<Vec<f64>> {
        self.check(y)?;
        let m = y.measure();
        let g = self.u.outer.eval(t, &self.u.moments(&m));
        let (grad, _) = self.u.dx_linear_derivative(&g.grad, y.x(k), y.alive[k]);
        Ok(grad.into_iter().map(|v| v / self.n as f64).collect())
    }

    /// `d^2_{x_k x_k} phi = (1/N) d^2_xx delta_m U_1(x_k) + (1/N^2) d^2_mumu U_{1,1}(x_k, x_k)`.
    pub fn hessian(&self, t: f64, y: &SystemState, k: usize) -> Result<Vec<f64>> {
        self.check(y)?;
        if !y.alive[k] {
            return Err(Error::Unsupported(format!("particle {k} is stopped")));
        }
        let m = y.measure();
        let g = self.u.outer.eval(t, &self.u.moments(&m));
        let (_, hess) = self.u.dx_linear_derivative(&g.grad, y.x(k), true);
        let cross = self.u.second_measure_derivative_with(&g, y.x(k), y.x(k));
        let n = self.n as f64;
        Ok(hess.iter().zip(&cross).map(|(a, b)| a / n + b / (n * n)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionCheck {
    pub first_order: f64,
    pub second_order: f64,
}

impl ProjectionCheck {
    pub fn worst(&self) -> f64 {
        self.first_order.max(self.second_order)
    }
}

/// `|fd - analytic| / max(|analytic|, 1)`.
pub fn relative_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / analytic.abs().max(1.0)
}

/// Worst relative discrepancy between central differences of the projection
/// and its analytic partials, over alive particles and coordinates.
pub fn check_projection_derivatives(
    u: &CylinderFunctional,
    n: usize,
    t: f64,
    y: &SystemState,
    h_fd: f64,
) -> Result<ProjectionCheck> {
    if !(h_fd > 0.0) {
        return Err(Error::config("h_fd", "must be positive"));
    }
    let phi = project(u, n);
    let d = y.dim;
    let mut out = ProjectionCheck {
        first_order: 0.0,
        second_order: 0.0,
    };
    let base = phi.value(t, y)?;
    let mut shifted = y.clone();
    let mut at = |k: usize, da: (usize, f64), db: (usize, f64)| -> Result<f64> {
        shifted.xs.copy_from_slice(&y.xs);
        shifted.xs[k * d + da.0] += da.1;
        shifted.xs[k * d + db.0] += db.1;
        phi.value(t, &shifted)
    };
    for k in (0..y.len()).filter(|&k| y.alive[k]) {
        let grad = phi.gradient(t, y, k)?;
        let hess = phi.hessian(t, y, k)?;
        for a in 0..d {
            let plus = at(k, (a, h_fd), (a, 0.0))?;
            let minus = at(k, (a, -h_fd), (a, 0.0))?;
            let fd1 = (plus - minus) / (2.0 * h_fd);
            out.first_order = out.first_order.max(relative_error(fd1, grad[a]));
            let fd2 = (plus - 2.0 * base + minus) / (h_fd * h_fd);
            out.second_order = out.second_order.max(relative_error(fd2, hess[a * d + a]));
            for b in a + 1..d {
                let pp = at(k, (a, h_fd), (b, h_fd))?;
                let pm = at(k, (a, h_fd), (b, -h_fd))?;
                let mp = at(k, (a, -h_fd), (b, h_fd))?;
                let mm = at(k, (a, -h_fd), (b, -h_fd))?;
                let fd = (pp - pm - mp + mm) / (4.0 * h_fd * h_fd);
                out.second_order = out.second_order.max(relative_error(fd, hess[a * d + b]));
            }
        }
    }
    Ok(out)
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

/// `U(m~) - U(m) - int_0^1 int delta_m U(l m~ + (1 - l) m, y) (m~ - m)(dy) dl`
/// with 16-point Gauss-Legendre in `l`.
pub fn mixture_identity_gap(u: &CylinderFunctional, t: f64, m: &EmpiricalMeasure, m_tilde: &EmpiricalMeasure) -> Result<f64> {
    let mut integral = 0.0;
    for (l, w) in gauss_legendre_unit(16) {
        let mix = EmpiricalMeasure::mixture(m_tilde, l, m)?;
        let inner = m_tilde.integrate(|x, i| u.linear_derivative(t, &mix, x, i))
            - m.integrate(|x, i| u.linear_derivative(t, &mix, x, i));
        integral += w * inner;
    }
    Ok(u.value(t, m_tilde) - u.value(t, m) - integral)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorCheck {
    /// `(U(t + dt, m_dt) - U(t, m0)) / dt` along one cloud.
    pub finite_difference: f64,
    pub generator: f64,
    pub discrepancy: f64,
}

/// One Euler step of an unstopped cloud of `cloud` particles resampled from
/// `m0`, compared with the generator. The running reward is excluded from
/// both sides.
pub fn check_generator_consistency(
    u: &CylinderFunctional,
    model: &Model,
    t: f64,
    dt: f64,
    m0: &EmpiricalMeasure,
    cloud: usize,
    key: StreamKey,
) -> Result<GeneratorCheck> {
    let grid = TimeGrid::new(t, t + dt, 1)?;
    let y0 = resample(m0, cloud, &mut key.aux_rng(0))?;
    let paths = simulate_system(model, &grid, &y0, &StoppingRule::Never, Noise::Gaussian, key)?;
    let start = y0.measure();
    let finite_difference = (u.value(t + dt, &paths.measure(1)) - u.value(t, &start)) / dt;
    let generator = evaluate_generator(u, model, t, &start)? - eval_running(model, t, &start)?;
    Ok(GeneratorCheck {
        finite_difference,
        generator,
        discrepancy: (finite_difference - generator).abs(),
    })
}
