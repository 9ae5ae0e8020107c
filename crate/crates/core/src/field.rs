//! The learnable prototype dynamics `dP/dt = f_θ(P, t, S)`.
//!
//! For every support sample `i` and class row `n` the field forms a gated
//! distance gradient `D_i[n] = g_i[n] ⊙ v_i − p_n`, weights it with a
//! per-(class, channel) softmax over samples computed from an attention
//! block, sums over samples and scales by `exp(−η t / T)`.
//!
//! Internally all `(n, i)` pairs are stacked into one `N·|S|`-row matrix in
//! class-major order (row `n·|S| + i`), so each class owns a contiguous block
//! of `|S|` rows. Attention runs inside those blocks.

use std::rc::Rc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Context, DiffValue, Matrix};

pub const ATTENTION_HEADS: usize = 8;
pub const HEAD_WIDTH: usize = 16;
pub const DEFAULT_EMBED_DIM: usize = 1024;
pub const DEFAULT_DECAY_RATE: f64 = 0.1;
pub const DEFAULT_HORIZON: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Feature dimension `D`.
    pub dim: usize,
    /// Width `d_e` of the sample embedding.
    pub embed_dim: usize,
    pub heads: usize,
    pub head_width: usize,
    /// η in the time decay.
    pub decay_rate: f64,
    /// T in the time decay.
    pub horizon: f64,
}

impl FieldConfig {
    pub fn new(dim: usize, embed_dim: usize) -> Self {
        Self {
            dim,
            embed_dim,
            heads: ATTENTION_HEADS,
            head_width: HEAD_WIDTH,
            decay_rate: DEFAULT_DECAY_RATE,
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn attention_width(&self) -> usize {
        self.heads * self.head_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.embed_dim == 0 || self.heads == 0 || self.head_width == 0 {
            return Err(Error::Config("field dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0) || !self.decay_rate.is_finite() {
            return Err(Error::Config("horizon must be positive and decay finite".into()));
        }
        Ok(())
    }

    /// `exp(−η t / T)`.
    pub fn decay(&self, t: f64) -> f64 {
        (-self.decay_rate * t / self.horizon).exp()
    }

    /// Shapes of every parameter tensor, in [`ParamId`] order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let (d, e, w) = (self.dim, self.embed_dim, self.attention_width());
        vec![
            (2 * d, d),
            (1, d),
            (2 * d + 1, e),
            (1, e),
            (e, w),
            (1, w),
            (e, w),
            (1, w),
            (e, w),
            (1, w),
            (w, e),
            (1, e),
            (e, d),
            (1, d),
        ]
    }

    /// Total learnable scalars of the field (without the fusion vector).
    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Index of each parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum ParamId {
    GateWeight,
    GateBias,
    EmbedWeight,
    EmbedBias,
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    OutWeight,
    OutBias,
    MixWeight,
    MixBias,
}

pub const PARAM_NAMES: [&str; 14] = [
    "gate.weight",
    "gate.bias",
    "embed.weight",
    "embed.bias",
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.out.weight",
    "attn.out.bias",
    "mix.weight",
    "mix.bias",
];

/// All learnable tensors of the field; affine maps store `in × out` weights
/// and `1 × out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParameters {
    config: FieldConfig,
    tensors: Vec<Rc<Matrix>>,
}

impl FieldParameters {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tensors = config
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (rows, cols))| {
                if i % 2 == 1 {
                    return Rc::new(Matrix::zeros(rows, cols));
                }
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                Rc::new(Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng)))
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: FieldConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Mismatch(format!(
                "expected {} field tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, want), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != *want {
                return Err(Error::Mismatch(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            tensors: tensors.into_iter().map(Rc::new).collect(),
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id as usize]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Mutable access for optimizers; copies a tensor only if it is shared.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Matrix {
        Rc::make_mut(&mut self.tensors[index])
    }

    /// Mutable access to every tensor at once, in [`ParamId`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.tensors.iter_mut().map(Rc::make_mut).collect()
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let want = self.config.shapes()[id as usize];
        if value.shape() != want {
            return Err(Error::Shape {
                op: "FieldParameters::set",
                lhs: want,
                rhs: value.shape(),
            });
        }
        self.tensors[id as usize] = Rc::new(value);
        Ok(())
    }

    pub fn as_constants(&self) -> Vec<DiffValue> {
        self.tensors.iter().cloned().map(DiffValue::constant_shared).collect()
    }

    pub fn as_variables(&self, ctx: &Context) -> Vec<DiffValue> {
        self.tensors.iter().cloned().map(|t| ctx.variable_shared(t)).collect()
    }
}

/// Support features with the per-(class, sample) broadcasts the field needs.
#[derive(Clone, Debug)]
pub struct SupportContext {
    features: Matrix,
    one_hot: Matrix,
    rows: DiffValue,
    tiled: DiffValue,
    indicator: DiffValue,
}

impl SupportContext {
    pub fn new(features: Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != features.rows() || features.rows() == 0 {
            return Err(Error::Capacity(format!(
                "support context needs one label per row and at least one row ({} rows, {} labels)",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Mismatch(format!("label {bad} out of range for {classes} classes")));
        }
        let samples = features.rows();
        let mut one_hot = Matrix::zeros(samples, classes);
        for (i, &l) in labels.iter().enumerate() {
            one_hot.set(i, l, 1.0);
        }
        let indicator = Matrix::from_fn(classes * samples, 1, |r, _| one_hot.get(r % samples, r / samples));
        Ok(Self {
            tiled: DiffValue::constant(features.tile_rows(classes)),
            indicator: DiffValue::constant(indicator),
            rows: DiffValue::constant(features.clone()),
            features,
            one_hot,
        })
    }

    pub fn from_set(set: &EmbeddingSet) -> Result<Self> {
        Self::new(set.features().clone(), set.labels(), set.num_classes())
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn one_hot(&self) -> &Matrix {
        &self.one_hot
    }

    pub fn samples(&self) -> usize {
        self.features.rows()
    }

    pub fn classes(&self) -> usize {
        self.one_hot.cols()
    }
}

/// Splits a stacked `N·|S| × C` matrix into the `|S|` per-sample `N × C` blocks.
pub fn unstack_samples(stacked: &Matrix, classes: usize) -> Vec<Matrix> {
    let samples = stacked.rows() / classes.max(1);
    (0..samples)
        .map(|i| {
            let rows: Vec<usize> = (0..classes).map(|n| n * samples + i).collect();
            stacked.gather_rows(&rows)
        })
        .collect()
}

/// The field bound to one support set.
pub struct GradientField<'a> {
    params: &'a FieldParameters,
    support: &'a SupportContext,
}

/// Intermediate stages of one field evaluation, each stacked class-major.
pub struct FieldStages {
    pub distance: DiffValue,
    pub embedding: DiffValue,
    pub attended: DiffValue,
    pub weights: DiffValue,
    pub output: DiffValue,
}

impl<'a> GradientField<'a> {
    pub fn new(params: &'a FieldParameters, support: &'a SupportContext) -> Result<Self> {
        if support.features.cols() != params.config.dim {
            return Err(Error::Mismatch(format!(
                "support dimension {} differs from field dimension {}",
                support.features.cols(),
                params.config.dim
            )));
        }
        Ok(Self { params, support })
    }

    pub fn params(&self) -> &FieldParameters {
        self.params
    }

    pub fn support(&self) -> &SupportContext {
        self.support
    }

    fn check_state(&self, p: &DiffValue) -> Result<()> {
        let want = (self.support.classes(), self.params.config.dim);
        if p.shape() != want {
            return Err(Error::Shape {
                op: "field",
                lhs: p.shape(),
                rhs: want,
            });
        }
        Ok(())
    }

    /// `D_i = sigmoid([P ‖ V_i] W_s + b_s) ⊙ V_i − P`, stacked.
    pub fn record_distance(&self, ctx: &Context, p: &DiffValue, theta: &[DiffValue]) -> Result<DiffValue> {
        let d = self.params.config.dim;
        let s = self.support.samples();
        let n = self.support.classes();
        let w = &theta[ParamId::GateWeight as usize];
        let from_p = ctx.matmul(p, &ctx.slice_rows(w, 0, d)?)?;
        let v = &self.support.rows;
        let from_v = ctx.matmul(v, &ctx.slice_rows(w, d, 2 * d)?)?;
        let pre = ctx.add(&ctx.repeat_rows(&from_p, s)?, &ctx.tile_rows(&from_v, n)?)?;
        let gate = ctx.sigmoid(&ctx.add_row_bias(&pre, &theta[ParamId::GateBias as usize])?)?;
        let enhanced = ctx.mul(&gate, &self.support.tiled)?;
        ctx.sub(&enhanced, &ctx.repeat_rows(p, s)?)
    }

    /// `E_i[n] = ReLU([p_n ‖ v_i ‖ 1{y_i = n}] W_e + b_e)`, stacked.
    pub fn record_embedding(&self, ctx: &Context, p: &DiffValue, theta: &[DiffValue]) -> Result<DiffValue> {
        let d = self.params.config.dim;
        let s = self.support.samples();
        let n = self.support.classes();
        let w = &theta[ParamId::EmbedWeight as usize];
        let from_p = ctx.matmul(p, &ctx.slice_rows(w, 0, d)?)?;
        let v = &self.support.rows;
        let from_v = ctx.matmul(v, &ctx.slice_rows(w, d, 2 * d)?)?;
        let from_y = ctx.matmul(&self.support.indicator, &ctx.slice_rows(w, 2 * d, 2 * d + 1)?)?;
        let pre = ctx.add(&ctx.repeat_rows(&from_p, s)?, &ctx.tile_rows(&from_v, n)?)?;
        let pre = ctx.add(&pre, &from_y)?;
        ctx.relu(&ctx.add_row_bias(&pre, &theta[ParamId::EmbedBias as usize])?)
    }

    /// Residual multi-head self-attention across samples, per class row.
    pub fn record_attention(&self, ctx: &Context, e: &DiffValue, theta: &[DiffValue]) -> Result<DiffValue> {
        let t = |id: ParamId| &theta[id as usize];
        let q = ctx.affine(e, t(ParamId::QueryWeight), t(ParamId::QueryBias))?;
        let k = ctx.affine(e, t(ParamId::KeyWeight), t(ParamId::KeyBias))?;
        let v = ctx.affine(e, t(ParamId::ValueWeight), t(ParamId::ValueBias))?;
        let layout = AttentionLayout {
            group: self.support.samples(),
            heads: self.params.config.heads,
        };
        let mixed = ctx.attention(&q, &k, &v, layout)?;
        let projected = ctx.affine(&mixed, t(ParamId::OutWeight), t(ParamId::OutBias))?;
        ctx.add(e, &projected)
    }

    /// Softmax over samples of `E'_i W_m + b_m`, per (class, channel).
    pub fn record_weights(&self, ctx: &Context, attended: &DiffValue, theta: &[DiffValue]) -> Result<DiffValue> {
        let raw = ctx.affine(
            attended,
            &theta[ParamId::MixWeight as usize],
            &theta[ParamId::MixBias as usize],
        )?;
        ctx.softmax_row_blocks(&raw, self.support.samples())
    }

    pub fn record_stages(&self, ctx: &Context, p: &DiffValue, t: f64, theta: &[DiffValue]) -> Result<FieldStages> {
        self.check_state(p)?;
        let distance = self.record_distance(ctx, p, theta)?;
        let embedding = self.record_embedding(ctx, p, theta)?;
        let attended = self.record_attention(ctx, &embedding, theta)?;
        let weights = self.record_weights(ctx, &attended, theta)?;
        let weighted = ctx.mul(&weights, &distance)?;
        let summed = ctx.sum_row_blocks(&weighted, self.support.samples())?;
        let output = ctx.scale(&summed, self.params.config.decay(t))?;
        Ok(FieldStages {
            distance,
            embedding,
            attended,
            weights,
            output,
        })
    }

    /// `dP/dt` recorded on `ctx`, with parameters supplied as values.
    pub fn record(&self, ctx: &Context, p: &DiffValue, t: f64, theta: &[DiffValue]) -> Result<DiffValue> {
        Ok(self.record_stages(ctx, p, t, theta)?.output)
    }

    /// Evaluates every stage with constant inputs.
    pub fn stages(&self, p: &Matrix, t: f64) -> Result<FieldStages> {
        let ctx = Context::new();
        self.record_stages(&ctx, &DiffValue::constant(p.clone()), t, &self.params.as_constants())
    }

    /// `dP/dt` at `(p, t)`.
    pub fn evaluate(&self, p: &Matrix, t: f64) -> Result<Matrix> {
        let ctx = Context::new();
        let out = self.record(&ctx, &DiffValue::constant(p.clone()), t, &self.params.as_constants())?;
        Ok(out.value().clone())
    }

    /// Field value plus the vector-Jacobian products `cᵀ ∂f/∂P` and
    /// `cᵀ ∂f/∂θ` for cotangent `c`.
    pub fn value_and_vjp(&self, p: &Matrix, t: f64, cotangent: &Matrix) -> Result<(Matrix, Matrix, Vec<Matrix>)> {
        let ctx = Context::new();
        let pv = ctx.variable(p.clone());
        let theta = self.params.as_variables(&ctx);
        let out = self.record(&ctx, &pv, t, &theta)?;
        let seed = DiffValue::constant(cotangent.clone());
        let loss = ctx.sum_product(&out, &seed)?;
        let mut wrt: Vec<&DiffValue> = Vec::with_capacity(theta.len() + 1);
        wrt.push(&pv);
        wrt.extend(theta.iter());
        let mut grads = ctx.grad(&loss, &wrt)?;
        let dp = grads.remove(0);
        Ok((out.value().clone(), dp, grads))
    }
}
