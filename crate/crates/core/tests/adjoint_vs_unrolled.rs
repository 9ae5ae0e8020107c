use node_adapter::classifier::{record_ce_loss, record_class_probabilities};
use node_adapter::field::{FieldConfig, FieldParameters, GradientField, SupportContext};
use node_adapter::gradcheck::{random_field, relative_error};
use node_adapter::ode::{adjoint_from_endpoint, integrate, SolverConfig, SolverMethod};
use node_adapter::tensor::l2_normalize_rows;
use node_adapter::{Context, DiffValue, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAU: f64 = 0.1;

struct Instance {
    params: FieldParameters,
    support: SupportContext,
    features: Matrix,
    labels: Vec<usize>,
    p0: Matrix,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, s) = (3, 4, 6);
    let raw = Matrix::from_fn(s, d, |_, _| rng.gen_range(-1.0..1.0));
    let features = l2_normalize_rows(&raw).unwrap();
    let labels: Vec<usize> = (0..s).map(|i| i % n).collect();
    let support = SupportContext::new(features.clone(), &labels, n).unwrap();
    Instance {
        params: random_field(FieldConfig::new(d, 8), seed).unwrap(),
        support,
        features,
        labels,
        p0: Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)),
    }
}

fn loss_on(ctx: &Context, inst: &Instance, end: &DiffValue) -> DiffValue {
    let probs = record_class_probabilities(ctx, &inst.features, end, TAU).unwrap();
    record_ce_loss(ctx, &probs, &inst.labels).unwrap()
}

/// Gradients from differentiating straight through every RK4 stage on one tape.
fn unrolled(inst: &Instance, cfg: &SolverConfig) -> (Matrix, Vec<Matrix>) {
    let ctx = Context::new();
    let field = GradientField::new(&inst.params, &inst.support).unwrap();
    let theta = inst.params.as_variables(&ctx);
    let p0 = ctx.variable(inst.p0.clone());
    let h = cfg.step_size();
    let f = |p: &DiffValue, t: f64| field.record(&ctx, p, t, &theta).unwrap();
    let step = |p: &DiffValue, k: &DiffValue, c: f64| ctx.add(p, &ctx.scale(k, c).unwrap()).unwrap();
    let mut p = p0.clone();
    for i in 0..cfg.steps {
        let t = cfg.t0 + i as f64 * h;
        let k1 = f(&p, t);
        let k2 = f(&step(&p, &k1, h / 2.0), t + h / 2.0);
        let k3 = f(&step(&p, &k2, h / 2.0), t + h / 2.0);
        let k4 = f(&step(&p, &k3, h), t + h);
        let sum = ctx.add(&ctx.add(&k1, &ctx.scale(&k2, 2.0).unwrap()).unwrap(), &ctx.add(&ctx.scale(&k3, 2.0).unwrap(), &k4).unwrap()).unwrap();
        p = step(&p, &sum, h / 6.0);
    }
    let loss = loss_on(&ctx, inst, &p);
    let mut wrt: Vec<&DiffValue> = vec![&p0];
    wrt.extend(theta.iter());
    let mut grads = ctx.grad(&loss, &wrt).unwrap();
    let dp0 = grads.remove(0);
    (dp0, grads)
}

fn adjoint(inst: &Instance, cfg: &SolverConfig) -> (Matrix, Vec<Matrix>) {
    let field = GradientField::new(&inst.params, &inst.support).unwrap();
    let end = integrate(|p, t| field.evaluate(p, t), &inst.p0, cfg, false).unwrap().end;
    let ctx = Context::new();
    let pm = ctx.variable(end.clone());
    let loss = loss_on(&ctx, inst, &pm);
    let seed = ctx.grad(&loss, &[&pm]).unwrap().remove(0);
    let g = adjoint_from_endpoint(&field, &end, cfg, &seed).unwrap();
    (g.dl_dp0, g.dl_dtheta)
}

#[test]
fn adjoint_agrees_with_unrolled_solver_at_32_steps() {
    let cfg = SolverConfig::new(SolverMethod::Rk4, 32, 0.0, 2.0).unwrap();
    for seed in 0..2 {
        let inst = instance(seed);
        let (tape_p0, tape_theta) = unrolled(&inst, &cfg);
        let (adj_p0, adj_theta) = adjoint(&inst, &cfg);
        let scale = tape_theta.iter().map(Matrix::max_abs).fold(tape_p0.max_abs(), f64::max);
        let floor = 1e-3 * scale;
        let mut worst = relative_error(&adj_p0, &tape_p0, floor).unwrap();
        for (a, t) in adj_theta.iter().zip(&tape_theta) {
            worst = worst.max(relative_error(a, t, floor).unwrap());
        }
        assert!(worst < 1e-3, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn discrepancy_shrinks_with_more_steps() {
    let inst = instance(7);
    let gap = |steps| {
        let cfg = SolverConfig::new(SolverMethod::Rk4, steps, 0.0, 2.0).unwrap();
        let (tape, _) = unrolled(&inst, &cfg);
        let (adj, _) = adjoint(&inst, &cfg);
        adj.max_abs_diff(&tape).unwrap()
    };
    let coarse = gap(4);
    let fine = gap(16);
    assert!(fine < coarse / 8.0, "coarse {coarse}, fine {fine}");
}
