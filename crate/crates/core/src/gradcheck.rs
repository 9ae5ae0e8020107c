//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Three suites: the recorded tensor operations, the gradient field's
//! vector-Jacobian products, and the full refinement pipeline (fusion,
//! integration, cosine classifier, cross-entropy) differentiated through the
//! adjoint pass. Each check compares an analytic gradient with central
//! differences of the plain forward computation.
//!
//! The reported error of one check is `‖a − f‖∞ / max(‖a‖∞, ‖f‖∞, φ)` over
//! the compared tensor, where `a` is analytic, `f` the finite-difference
//! estimate and `φ` is [`SCALE_FLOOR`] times the largest gradient entry of
//! the same objective. The floor keeps tensors whose exact gradient vanishes
//! (a key bias shifts every attention score of a row equally) from reporting
//! rounding noise as error.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{EmbeddingSet, Modality};
use crate::error::Result;
use crate::field::{FieldConfig, FieldParameters, GradientField, SupportContext, PARAM_NAMES};
use crate::ode::{SolverConfig, SolverMethod};
use crate::prototype::FusionParams;
use crate::tensor::{AttentionLayout, Axis, Context, DiffValue, Matrix};
use crate::train::{Problem, TrainConfig};

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const SCALE_FLOOR: f64 = 1e-3;

/// Sizes of the checked instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub embed_dim: usize,
    pub method: SolverMethod,
    pub steps: usize,
    /// End of the integration interval, which starts at 0.
    pub t1: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 3,
            dim: 4,
            samples: 4,
            embed_dim: 8,
            method: SolverMethod::Rk4,
            steps: 8,
            t1: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub relative_error: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}: {:.3e}", self.suite, self.name, self.relative_error)
    }
}

/// Central differences of `f` at every entry of `x`.
pub fn finite_difference(f: &mut dyn FnMut(&Matrix) -> Result<f64>, x: &Matrix, h: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`, zero when both vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic.max_abs().max(numeric.max_abs()).max(floor);
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Errors of paired `(name, analytic, numeric)` gradients of one objective.
fn compare(suite: &'static str, pairs: Vec<(String, Matrix, Matrix)>) -> Result<Vec<CheckOutcome>> {
    let largest = pairs
        .iter()
        .map(|(_, a, f)| a.max_abs().max(f.max_abs()))
        .fold(0.0, f64::max);
    pairs
        .into_iter()
        .map(|(name, a, f)| {
            Ok(CheckOutcome {
                suite,
                name,
                relative_error: relative_error(&a, &f, SCALE_FLOOR * largest)?,
            })
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

type OpBuilder<'a> = Box<dyn Fn(&Context, &DiffValue) -> Result<DiffValue> + 'a>;

/// Gradient of `⟨w, op(x)⟩` on the tape against central differences.
fn check_op(name: &str, x: &Matrix, rng: &mut ChaCha8Rng, build: &OpBuilder<'_>) -> Result<CheckOutcome> {
    let out_shape = build(&Context::new(), &DiffValue::constant(x.clone()))?.shape();
    let weights = random(rng, out_shape.0, out_shape.1, 1.0);
    let ctx = Context::new();
    let xv = ctx.variable(x.clone());
    let loss = ctx.sum_product(&build(&ctx, &xv)?, &DiffValue::constant(weights.clone()))?;
    let analytic = ctx.grad(&loss, &[&xv])?.remove(0);
    let mut eval = |m: &Matrix| build(&Context::new(), &DiffValue::constant(m.clone()))?.value().dot(&weights);
    let numeric = finite_difference(&mut eval, x, FD_STEP)?;
    Ok(CheckOutcome {
        suite: "tensor",
        name: name.to_owned(),
        relative_error: relative_error(&analytic, &numeric, 0.0)?,
    })
}

/// Every differentiable operation of the tape, each on a random input.
pub fn tensor_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = random(&mut rng, 4, 3, 3.0);
    let right = DiffValue::constant(random(&mut rng, 3, 5, 3.0));
    let col = DiffValue::constant(random(&mut rng, 4, 1, 3.0));
    let bias = DiffValue::constant(random(&mut rng, 1, 3, 3.0));
    let c_other = DiffValue::constant(other.clone());
    let c_left = DiffValue::constant(other.transpose());
    let layout = AttentionLayout { group: 2, heads: 2 };

    let ops: Vec<(&str, (usize, usize), f64, OpBuilder<'_>)> = vec![
        ("matmul_lhs", (4, 3), 3.0, Box::new(|c, x| c.matmul(x, &right))),
        ("matmul_rhs", (4, 3), 3.0, Box::new(|c, x| c.matmul(&c_left, x))),
        ("transpose", (4, 3), 3.0, Box::new(|c, x| c.transpose(x))),
        ("add", (4, 3), 3.0, Box::new(|c, x| c.add(x, &c_other))),
        ("sub", (4, 3), 3.0, Box::new(|c, x| c.sub(&c_other, x))),
        ("mul", (4, 3), 3.0, Box::new(|c, x| c.mul(x, x))),
        ("scale", (4, 3), 3.0, Box::new(|c, x| c.scale(x, -1.7))),
        ("add_row_bias", (4, 3), 3.0, Box::new(|c, x| c.add_row_bias(x, &bias))),
        ("mul_col", (4, 3), 3.0, Box::new(|c, x| c.mul_col(x, &col))),
        ("mul_col_factor", (4, 1), 3.0, Box::new(|c, x| c.mul_col(&c_other, x))),
        ("sigmoid", (4, 3), 3.0, Box::new(|c, x| c.sigmoid(x))),
        ("relu", (4, 3), 3.0, Box::new(|c, x| c.relu(x))),
        (
            "ln_floored",
            (4, 3),
            3.0,
            Box::new(|c, x| {
                let pos = c.add(&c.mul(x, x)?, &DiffValue::constant(Matrix::filled(4, 3, 0.1)))?;
                c.ln_floored(&pos, 1e-30)
            }),
        ),
        ("softmax_cols", (4, 3), 3.0, Box::new(|c, x| c.softmax(x, Axis::Cols))),
        ("softmax_rows", (4, 3), 3.0, Box::new(|c, x| c.softmax(x, Axis::Rows))),
        ("softmax_row_blocks", (4, 3), 3.0, Box::new(|c, x| c.softmax_row_blocks(x, 2))),
        ("repeat_rows", (4, 3), 3.0, Box::new(|c, x| c.repeat_rows(x, 3))),
        ("tile_rows", (4, 3), 3.0, Box::new(|c, x| c.tile_rows(x, 2))),
        ("sum_row_blocks", (4, 3), 3.0, Box::new(|c, x| c.sum_row_blocks(x, 2))),
        ("slice_rows", (4, 3), 3.0, Box::new(|c, x| c.slice_rows(x, 1, 3))),
        ("l2_normalize_rows", (4, 3), 3.0, Box::new(|c, x| c.l2_normalize_rows(x))),
        ("sum", (4, 3), 3.0, Box::new(|c, x| c.sum(x))),
        ("sum_product", (4, 3), 3.0, Box::new(|c, x| c.sum_product(x, &c_other))),
        (
            "attention",
            (4, 6),
            2.0,
            Box::new(|c, x| c.attention(x, &c.scale(x, 0.5)?, x, layout)),
        ),
    ];
    let mut out = Vec::with_capacity(ops.len());
    for (name, (r, cols), scale, build) in &ops {
        let x = random(&mut rng, *r, *cols, *scale);
        out.push(check_op(name, &x, &mut rng, build)?);
    }
    Ok(out)
}

/// Field parameters with every entry random, so no tensor starts at zero.
pub fn random_field(config: FieldConfig, seed: u64) -> Result<FieldParameters> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config.shapes().into_iter().map(|(r, c)| random(&mut rng, r, c, 0.5)).collect();
    FieldParameters::from_tensors(config, tensors)
}

fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Result<Matrix> {
    crate::tensor::l2_normalize_rows(&random(rng, r, c, 1.0))
}

/// Round-robin labels so every class is present when `samples ≥ classes`.
fn labels(samples: usize, classes: usize) -> Vec<usize> {
    (0..samples).map(|i| i % classes).collect()
}

/// `⟨C, f(P, t)⟩` differentiated in `P` and every field tensor.
pub fn field_suite(spec: &GradcheckSpec) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let support = SupportContext::new(
        unit_rows(&mut rng, spec.samples, spec.dim)?,
        &labels(spec.samples, spec.classes),
        spec.classes,
    )?;
    let params = random_field(FieldConfig::new(spec.dim, spec.embed_dim), spec.seed)?;
    let p = random(&mut rng, spec.classes, spec.dim, 1.0);
    let cot = random(&mut rng, spec.classes, spec.dim, 1.0);
    let t = 0.7;

    let field = GradientField::new(&params, &support)?;
    let (_, dp, dtheta) = field.value_and_vjp(&p, t, &cot)?;
    let mut wrt_p = |m: &Matrix| field.evaluate(m, t)?.dot(&cot);
    let mut pairs = vec![("P".to_owned(), dp, finite_difference(&mut wrt_p, &p, FD_STEP)?)];
    for (i, analytic) in dtheta.into_iter().enumerate() {
        let mut wrt_theta = |m: &Matrix| {
            let mut probe = params.clone();
            *probe.tensor_mut(i) = m.clone();
            GradientField::new(&probe, &support)?.evaluate(&p, t)?.dot(&cot)
        };
        let numeric = finite_difference(&mut wrt_theta, params.tensors().nth(i).expect("tensor index"), FD_STEP)?;
        pairs.push((PARAM_NAMES[i].to_owned(), analytic, numeric));
    }
    compare("field", pairs)
}

/// The support loss of a full instance, differentiated through the adjoint
/// pass in every field tensor and through the fusion chain in `u`.
pub fn adjoint_suite(spec: &GradcheckSpec) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xad70);
    let support = EmbeddingSet::new(
        Modality::Visual,
        unit_rows(&mut rng, spec.samples, spec.dim)?,
        labels(spec.samples, spec.classes),
        spec.classes,
        None,
    )?;
    let prompts = EmbeddingSet::new(
        Modality::Textual,
        unit_rows(&mut rng, spec.classes, spec.dim)?,
        labels(spec.classes, spec.classes),
        spec.classes,
        None,
    )?;
    let cfg = TrainConfig {
        embed_dim: spec.embed_dim,
        solver: SolverConfig::new(spec.method, spec.steps, 0.0, spec.t1)?,
        ..TrainConfig::default()
    };
    let field = FieldParameters::init(cfg.field_config(spec.dim), spec.seed)?;
    let fusion = FusionParams {
        u: random(&mut rng, 1, spec.dim, 0.5).into_vec(),
    };
    let problem = Problem::new(&support, &prompts)?;
    let grads = problem.loss_and_gradients(&field, &fusion, &cfg)?;

    let mut pairs = Vec::with_capacity(PARAM_NAMES.len() + 1);
    for (i, analytic) in grads.field.into_iter().enumerate() {
        let mut wrt_theta = |m: &Matrix| {
            let mut probe = field.clone();
            *probe.tensor_mut(i) = m.clone();
            problem.loss(&probe, &fusion, &cfg)
        };
        let numeric = finite_difference(&mut wrt_theta, field.tensors().nth(i).expect("tensor index"), FD_STEP)?;
        pairs.push((PARAM_NAMES[i].to_owned(), analytic, numeric));
    }
    let mut wrt_u = |m: &Matrix| problem.loss(&field, &FusionParams { u: m.as_slice().to_vec() }, &cfg);
    let numeric = finite_difference(&mut wrt_u, &fusion.as_row(), FD_STEP)?;
    pairs.push(("fusion.u".to_owned(), grads.u, numeric));
    compare("adjoint", pairs)
}

/// All three suites.
pub fn run_all(spec: &GradcheckSpec) -> Result<Vec<CheckOutcome>> {
    let mut out = tensor_suite(spec.seed)?;
    out.extend(field_suite(spec)?);
    out.extend(adjoint_suite(spec)?);
    Ok(out)
}

pub fn worst(outcomes: &[CheckOutcome]) -> Option<&CheckOutcome> {
    outcomes
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scaling() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[1.0, 2.2]]);
        assert!((relative_error(&a, &b, 0.0).unwrap() - 0.2 / 2.2).abs() < 1e-15);
        assert!((relative_error(&a, &b, 4.0).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(relative_error(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn finite_difference_of_a_quadratic() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]);
        let mut f = |m: &Matrix| Ok(m.as_slice().iter().map(|v| v * v * v).sum::<f64>());
        let g = finite_difference(&mut f, &x, 1e-5).unwrap();
        for (got, v) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((got - 3.0 * v * v).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_ops_match() {
        for seed in 0..3 {
            for c in tensor_suite(seed).unwrap() {
                assert!(c.relative_error < 1e-6, "{c}");
            }
        }
    }

    #[test]
    fn field_vjp_matches() {
        let spec = GradcheckSpec::default();
        let outcomes = field_suite(&spec).unwrap();
        assert_eq!(outcomes.len(), PARAM_NAMES.len() + 1);
        for c in outcomes {
            assert!(c.relative_error < 1e-5, "{c}");
        }
    }

    #[test]
    fn adjoint_pipeline_matches() {
        let start = std::time::Instant::now();
        for c in adjoint_suite(&GradcheckSpec::default()).unwrap() {
            assert!(c.relative_error < 1e-4, "{c}");
        }
        eprintln!("adjoint suite took {:?}", start.elapsed());
    }
}
