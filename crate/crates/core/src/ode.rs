//! Fixed-step integrators and adjoint-sensitivity gradients.
//!
//! Multistep methods (AB2, ABM2) bootstrap their first step with RK4. The
//! adjoint pass integrates the augmented state `(p, a, ḡ)` from the end time
//! back to the start with the forward method and step count, re-evaluating
//! the field instead of storing the forward trajectory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GradientField;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Ab2,
    Abm2,
    Rk4,
}

impl SolverMethod {
    pub const ALL: [SolverMethod; 4] = [SolverMethod::Euler, SolverMethod::Ab2, SolverMethod::Abm2, SolverMethod::Rk4];

    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Ab2 => "ab2",
            SolverMethod::Abm2 => "abm2",
            SolverMethod::Rk4 => "rk4",
        }
    }

    /// Global convergence order.
    pub fn order(self) -> u32 {
        match self {
            SolverMethod::Euler => 1,
            SolverMethod::Ab2 | SolverMethod::Abm2 => 2,
            SolverMethod::Rk4 => 4,
        }
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown solver {s:?}; expected euler, ab2, abm2 or rk4")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps: usize,
    pub t0: f64,
    pub t1: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Euler,
            steps: 30,
            t0: 0.0,
            t1: 30.0,
        }
    }
}

impl SolverConfig {
    pub fn new(method: SolverMethod, steps: usize, t0: f64, t1: f64) -> Result<Self> {
        let cfg = Self { method, steps, t0, t1 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("solver needs at least one step".into()));
        }
        if !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(Error::Config(format!(
                "integration interval [{}, {}] must be finite with t1 > t0",
                self.t0, self.t1
            )));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }
}

/// Vector-space operations the integrators need.
pub trait OdeState: Clone {
    /// `self += alpha * other`.
    fn axpy(&mut self, alpha: f64, other: &Self);
    fn is_finite(&self) -> bool;
}

impl OdeState for Matrix {
    fn axpy(&mut self, alpha: f64, other: &Self) {
        Matrix::axpy(self, alpha, other).expect("integrator states share one shape");
    }

    fn is_finite(&self) -> bool {
        Matrix::is_finite(self)
    }
}

fn combine<S: OdeState>(base: &S, terms: &[(f64, &S)]) -> S {
    let mut out = base.clone();
    for (alpha, s) in terms {
        out.axpy(*alpha, s);
    }
    out
}

/// Integrates `y' = rhs(y, t)` for `steps` steps of signed size `h`.
///
/// `observe` sees every state including the initial one.
pub fn solve<S, F>(
    method: SolverMethod,
    rhs: &mut F,
    y0: S,
    t0: f64,
    h: f64,
    steps: usize,
    observe: &mut dyn FnMut(usize, f64, &S),
) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
{
    let mut eval = |y: &S, t: f64, step: usize| -> Result<S> {
        let dy = rhs(y, t)?;
        if !dy.is_finite() {
            return Err(Error::Divergence { stage: "step", index: step });
        }
        Ok(dy)
    };
    let mut y = y0;
    observe(0, t0, &y);
    let mut previous: Option<S> = None;
    for step in 0..steps {
        let t = t0 + h * step as f64;
        let next = match (method, previous.take()) {
            (SolverMethod::Euler, _) => {
                let k = eval(&y, t, step)?;
                combine(&y, &[(h, &k)])
            }
            (SolverMethod::Rk4, _) | (SolverMethod::Ab2 | SolverMethod::Abm2, None) => {
                let k1 = eval(&y, t, step)?;
                let k2 = eval(&combine(&y, &[(0.5 * h, &k1)]), t + 0.5 * h, step)?;
                let k3 = eval(&combine(&y, &[(0.5 * h, &k2)]), t + 0.5 * h, step)?;
                let k4 = eval(&combine(&y, &[(h, &k3)]), t + h, step)?;
                let next = combine(&y, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
                if method != SolverMethod::Rk4 {
                    previous = Some(k1);
                }
                next
            }
            (SolverMethod::Ab2, Some(f_prev)) => {
                let f = eval(&y, t, step)?;
                let next = combine(&y, &[(1.5 * h, &f), (-0.5 * h, &f_prev)]);
                previous = Some(f);
                next
            }
            (SolverMethod::Abm2, Some(f_prev)) => {
                let f = eval(&y, t, step)?;
                let predicted = combine(&y, &[(1.5 * h, &f), (-0.5 * h, &f_prev)]);
                let f_pred = eval(&predicted, t + h, step)?;
                let next = combine(&y, &[(0.5 * h, &f), (0.5 * h, &f_pred)]);
                previous = Some(f);
                next
            }
        };
        if !next.is_finite() {
            return Err(Error::Divergence { stage: "step", index: step });
        }
        y = next;
        observe(step + 1, t + h, &y);
    }
    Ok(y)
}

/// Result of a forward integration.
#[derive(Clone, Debug)]
pub struct Integration {
    pub end: Matrix,
    /// `(t, p(t))` at every step boundary, when requested.
    pub trajectory: Option<Vec<(f64, Matrix)>>,
}

/// Integrates `dp/dt = field(p, t)` over `[cfg.t0, cfg.t1]`.
pub fn integrate<F>(mut field: F, p0: &Matrix, cfg: &SolverConfig, keep_trajectory: bool) -> Result<Integration>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    cfg.validate()?;
    let mut trajectory = keep_trajectory.then(Vec::new);
    let end = solve(
        cfg.method,
        &mut field,
        p0.clone(),
        cfg.t0,
        cfg.step_size(),
        cfg.steps,
        &mut |_, t, p: &Matrix| {
            if let Some(tr) = trajectory.as_mut() {
                tr.push((t, p.clone()));
            }
        },
    )?;
    Ok(Integration { end, trajectory })
}

/// Dynamics that can supply vector-Jacobian products.
pub trait Dynamics {
    fn eval(&self, p: &Matrix, t: f64) -> Result<Matrix>;

    /// `(f(p, t), cᵀ ∂f/∂p, cᵀ ∂f/∂θ)` for cotangent `c`.
    fn value_and_vjp(&self, p: &Matrix, t: f64, cotangent: &Matrix) -> Result<(Matrix, Matrix, Vec<Matrix>)>;

    fn param_shapes(&self) -> Vec<(usize, usize)>;
}

impl Dynamics for GradientField<'_> {
    fn eval(&self, p: &Matrix, t: f64) -> Result<Matrix> {
        self.evaluate(p, t)
    }

    fn value_and_vjp(&self, p: &Matrix, t: f64, cotangent: &Matrix) -> Result<(Matrix, Matrix, Vec<Matrix>)> {
        GradientField::value_and_vjp(self, p, t, cotangent)
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().config().shapes()
    }
}

/// State of the backward pass.
#[derive(Clone, Debug)]
pub struct AdjointState {
    pub p: Matrix,
    /// Sensitivity `∂L/∂p(t)`.
    pub a: Matrix,
    /// Running parameter gradient.
    pub g: Vec<Matrix>,
}

impl OdeState for AdjointState {
    fn axpy(&mut self, alpha: f64, other: &Self) {
        OdeState::axpy(&mut self.p, alpha, &other.p);
        OdeState::axpy(&mut self.a, alpha, &other.a);
        for (x, y) in self.g.iter_mut().zip(&other.g) {
            OdeState::axpy(x, alpha, y);
        }
    }

    fn is_finite(&self) -> bool {
        self.p.is_finite() && self.a.is_finite() && self.g.iter().all(Matrix::is_finite)
    }
}

#[derive(Clone, Debug)]
pub struct AdjointGradients {
    pub dl_dp0: Matrix,
    pub dl_dtheta: Vec<Matrix>,
    /// `p(t0)` as reconstructed by the backward integration.
    pub p0: Matrix,
}

/// Backward pass from a known endpoint `p(t1)`.
pub fn adjoint_from_endpoint<D: Dynamics + ?Sized>(
    dynamics: &D,
    p_end: &Matrix,
    cfg: &SolverConfig,
    dl_dp_end: &Matrix,
) -> Result<AdjointGradients> {
    cfg.validate()?;
    p_end.expect_same_shape(dl_dp_end, "adjoint")?;
    let start = AdjointState {
        p: p_end.clone(),
        a: dl_dp_end.clone(),
        g: dynamics
            .param_shapes()
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect(),
    };
    let mut rhs = |s: &AdjointState, t: f64| -> Result<AdjointState> {
        let (f, vjp_p, vjp_theta) = dynamics.value_and_vjp(&s.p, t, &s.a)?;
        Ok(AdjointState {
            p: f,
            a: vjp_p.scale(-1.0),
            g: vjp_theta.into_iter().map(|g| g.scale(-1.0)).collect(),
        })
    };
    let end = solve(
        cfg.method,
        &mut rhs,
        start,
        cfg.t1,
        -cfg.step_size(),
        cfg.steps,
        &mut |_, _, _| {},
    )?;
    Ok(AdjointGradients {
        dl_dp0: end.a,
        dl_dtheta: end.g,
        p0: end.p,
    })
}

/// Integrates forward from `p0`, then runs the adjoint pass.
pub fn adjoint_gradients<D: Dynamics + ?Sized>(
    dynamics: &D,
    p0: &Matrix,
    cfg: &SolverConfig,
    dl_dp_end: impl FnOnce(&Matrix) -> Result<Matrix>,
) -> Result<(Matrix, AdjointGradients)> {
    let forward = integrate(|p, t| dynamics.eval(p, t), p0, cfg, false)?;
    let seed = dl_dp_end(&forward.end)?;
    let grads = adjoint_from_endpoint(dynamics, &forward.end, cfg, &seed)?;
    Ok((forward.end, grads))
}

/// One row of the solver benchmark CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverBenchRow {
    pub method: SolverMethod,
    pub steps: usize,
    pub h: f64,
    pub global_error: f64,
}

pub const SOLVER_BENCH_HEADER: &str = "method,steps,h,global_error";

/// Global error at `t = 1` for `dp/dt = −p`, `p(0) = 1`.
pub fn decay_problem_error(method: SolverMethod, steps: usize) -> Result<f64> {
    let cfg = SolverConfig::new(method, steps, 0.0, 1.0)?;
    let out = integrate(|p, _| Ok(p.scale(-1.0)), &Matrix::filled(1, 1, 1.0), &cfg, false)?;
    Ok((out.end.as_slice()[0] - (-1.0f64).exp()).abs())
}

pub fn solver_bench(methods: &[SolverMethod], step_counts: &[usize]) -> Result<Vec<SolverBenchRow>> {
    let mut rows = Vec::with_capacity(methods.len() * step_counts.len());
    for &method in methods {
        for &steps in step_counts {
            rows.push(SolverBenchRow {
                method,
                steps,
                h: 1.0 / steps as f64,
                global_error: decay_problem_error(method, steps)?,
            });
        }
    }
    Ok(rows)
}

pub fn solver_bench_csv(rows: &[SolverBenchRow]) -> String {
    let mut out = String::from(SOLVER_BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:e},{:e}\n", r.method, r.steps, r.h, r.global_error));
    }
    out
}

/// `log2(error(h) / error(h/2))` on the decay problem.
pub fn observed_order(method: SolverMethod, steps: usize) -> Result<f64> {
    Ok((decay_problem_error(method, steps)? / decay_problem_error(method, 2 * steps)?).log2())
}
