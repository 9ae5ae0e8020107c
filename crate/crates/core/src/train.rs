//! Full-batch training of the field and the fusion vector on the support set.
//!
//! Each epoch builds `P(t0)` from the current `u`, integrates to `P(t_m)`,
//! scores the support set with the cosine classifier, pulls `∂L/∂P(t_m)`
//! back through the adjoint pass and then through the fusion to `u`, and
//! applies one AdamW step with a cosine-annealed learning rate.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, accuracy, record_ce_loss, record_class_probabilities};
use crate::dataset::EmbeddingSet;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParameters, GradientField, SupportContext, DEFAULT_EMBED_DIM};
use crate::ode::{adjoint_from_endpoint, integrate, SolverConfig};
use crate::prototype::{fuse, fusion_coefficients, record_fusion, textual_prototype, visual_prototype, FusionParams};
use crate::tensor::{Context, DiffValue, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    /// Softmax temperature τ of the classifier.
    pub temperature: f64,
    pub decay_rate: f64,
    pub horizon: f64,
    pub embed_dim: usize,
    pub solver: SolverConfig,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr0: 1e-3,
            lr_min: 0.0,
            temperature: 0.01,
            decay_rate: 0.1,
            horizon: 30.0,
            embed_dim: DEFAULT_EMBED_DIM,
            solver: SolverConfig::default(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0 && self.lr0.is_finite() && self.lr_min.is_finite()) {
            return fail(format!("learning rates must be finite and non-negative ({}, {})", self.lr0, self.lr_min));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        self.field_config(1).validate()
    }

    pub fn field_config(&self, dim: usize) -> FieldConfig {
        FieldConfig {
            decay_rate: self.decay_rate,
            horizon: self.horizon,
            ..FieldConfig::new(dim, self.embed_dim)
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs == 0 {
        return cfg.lr0;
    }
    let progress = epoch.min(cfg.epochs) as f64 / cfg.epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Mismatch(format!(
            "adamw_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        p.expect_same_shape(g, "adamw_step")?;
        p.expect_same_shape(m, "adamw_step")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - cfg.beta1.powi(t);
    let correct2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.first[i].as_mut_slice();
        let v = state.second[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub support_acc: f64,
}

/// Loss on the support set and its gradients for one parameter setting.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub loss: f64,
    pub support_acc: f64,
    pub field: Vec<Matrix>,
    pub u: Matrix,
    pub initial: Matrix,
    pub refined: Matrix,
}

/// The fixed inputs of a training run.
pub struct Problem<'a> {
    pub support: &'a EmbeddingSet,
    pub textual: Matrix,
    pub visual: Matrix,
    pub context: SupportContext,
}

impl<'a> Problem<'a> {
    pub fn new(support: &'a EmbeddingSet, prompts: &EmbeddingSet) -> Result<Self> {
        if support.num_classes() != prompts.num_classes() {
            return Err(Error::Mismatch(format!(
                "support has {} classes, prompts have {}",
                support.num_classes(),
                prompts.num_classes()
            )));
        }
        if support.dim() != prompts.dim() {
            return Err(Error::Mismatch(format!(
                "support dimension {} differs from prompt dimension {}",
                support.dim(),
                prompts.dim()
            )));
        }
        support.require_all_classes("support")?;
        prompts.require_all_classes("prompts")?;
        Ok(Self {
            support,
            textual: textual_prototype(prompts)?,
            visual: visual_prototype(support)?,
            context: SupportContext::from_set(support)?,
        })
    }

    /// `(P(t0), P(t_m))` for the given parameters.
    pub fn refine(&self, field: &FieldParameters, fusion: &FusionParams, solver: &SolverConfig) -> Result<(Matrix, Matrix)> {
        let lambda = fusion_coefficients(&self.visual, fusion)?;
        let p0 = fuse(&self.textual, &self.visual, &lambda, solver.t0)?.prototypes;
        let gf = GradientField::new(field, &self.context)?;
        let end = integrate(|p, t| gf.evaluate(p, t), &p0, solver, false)?.end;
        Ok((p0, end))
    }

    /// Support loss only, for finite-difference checks.
    pub fn loss(&self, field: &FieldParameters, fusion: &FusionParams, cfg: &TrainConfig) -> Result<f64> {
        let (_, end) = self.refine(field, fusion, &cfg.solver)?;
        let ctx = Context::new();
        let probs = record_class_probabilities(&ctx, self.support.features(), &DiffValue::constant(end), cfg.temperature)?;
        Ok(record_ce_loss(&ctx, &probs, self.support.labels())?.scalar())
    }

    /// Loss plus gradients for every field tensor and `u`, via the adjoint
    /// pass and the fusion chain rule.
    pub fn loss_and_gradients(&self, field: &FieldParameters, fusion: &FusionParams, cfg: &TrainConfig) -> Result<LossGradients> {
        let fusion_ctx = Context::new();
        let u = fusion_ctx.variable(fusion.as_row());
        let p0 = record_fusion(&fusion_ctx, &self.textual, &self.visual, &u)?;
        let gf = GradientField::new(field, &self.context)?;
        let end = integrate(|p, t| gf.evaluate(p, t), p0.value(), &cfg.solver, false)?.end;

        let loss_ctx = Context::new();
        let pm = loss_ctx.variable(end.clone());
        let probs = record_class_probabilities(&loss_ctx, self.support.features(), &pm, cfg.temperature)?;
        let support_acc = accuracy(&argmax_rows(probs.value()), self.support.labels());
        let loss = record_ce_loss(&loss_ctx, &probs, self.support.labels())?;
        let dl_dpm = loss_ctx.grad(&loss, &[&pm])?.remove(0);

        let adjoint = adjoint_from_endpoint(&gf, &end, &cfg.solver, &dl_dpm)?;
        let chained = fusion_ctx.sum_product(&p0, &DiffValue::constant(adjoint.dl_dp0))?;
        let du = fusion_ctx.grad(&chained, &[&u])?.remove(0);
        Ok(LossGradients {
            loss: loss.scalar(),
            support_acc,
            field: adjoint.dl_dtheta,
            u: du,
            initial: p0.value().clone(),
            refined: end,
        })
    }
}

/// Everything needed to classify with a trained field.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub field: FieldParameters,
    pub fusion: FusionParams,
    /// Mean prompt feature per class.
    pub textual: Matrix,
    /// Mean support feature per class.
    pub visual: Matrix,
    /// `P(t0)` under the trained `u`.
    pub initial: Matrix,
    /// `P(t_m)`, frozen for inference.
    pub refined: Matrix,
    pub config: TrainConfig,
    pub class_names: Option<Vec<String>>,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        self.refined.rows()
    }

    pub fn dim(&self) -> usize {
        self.refined.cols()
    }

    /// Learnable scalars of the field plus `u`; independent of the class
    /// count.
    pub fn parameter_count(&self) -> usize {
        self.field.parameter_count() + self.fusion.u.len()
    }
}

fn as_epoch_error(err: Error, epoch: usize) -> Error {
    match err {
        Error::Divergence { .. } => Error::Divergence { stage: "epoch", index: epoch },
        other => other,
    }
}

pub fn train(support: &EmbeddingSet, prompts: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with(support, prompts, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    support: &EmbeddingSet,
    prompts: &EmbeddingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let problem = Problem::new(support, prompts)?;
    let mut field = FieldParameters::init(cfg.field_config(support.dim()), cfg.seed)?;
    let mut fusion = FusionParams::zeros(support.dim());
    let mut shapes = field.config().shapes();
    shapes.push((1, support.dim()));
    let mut state = AdamState::new(&shapes);
    let optimizer = cfg.adamw();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        let step = problem
            .loss_and_gradients(&field, &fusion, cfg)
            .map_err(|e| as_epoch_error(e, epoch))?;
        let finite = step.loss.is_finite() && step.u.is_finite() && step.field.iter().all(Matrix::is_finite);
        if !finite {
            return Err(Error::Divergence { stage: "epoch", index: epoch });
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: step.loss,
            support_acc: step.support_acc,
        };
        on_epoch(&record);
        history.push(record);

        let mut grads = step.field;
        grads.push(step.u);
        let mut u = fusion.as_row();
        let mut targets = field.tensors_mut();
        targets.push(&mut u);
        adamw_step(&mut targets, &grads, &mut state, lr, &optimizer)?;
        fusion = FusionParams { u: u.into_vec() };
    }

    let (initial, refined) = problem
        .refine(&field, &fusion, &cfg.solver)
        .map_err(|e| as_epoch_error(e, cfg.epochs))?;
    Ok(TrainedModel {
        field,
        fusion,
        textual: problem.textual,
        visual: problem.visual,
        initial,
        refined,
        config: cfg.clone(),
        class_names: support.class_names().map(<[String]>::to_vec),
        history,
    })
}

/// Header line of the metrics file.
pub const METRICS_HEADER: &str = r#"{"metrics":"node-adapter","fields":["epoch","lr","loss","support_acc"]}"#;

/// Writes the header and one JSON object per epoch.
pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
