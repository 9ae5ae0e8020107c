//! Class prototypes from each modality and their gated fusion.

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingSet;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Context, DiffValue, Matrix};

/// Fused rows shorter than this are rejected.
pub const DEGENERATE_PROTOTYPE_NORM: f64 = 1e-9;

/// Prototype matrix `P(t)` at integration time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeState {
    pub prototypes: Matrix,
    pub time: f64,
}

/// The learnable gating vector `u` (stored as `1 × D`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub u: Vec<f64>,
}

impl FusionParams {
    /// Zero vector, so every class starts with an even modality mix.
    pub fn zeros(dim: usize) -> Self {
        Self { u: vec![0.0; dim] }
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(&self.u)
    }
}

/// Per-class arithmetic mean of the rows of `set`.
pub fn class_means(set: &EmbeddingSet) -> Result<Matrix> {
    let groups = set.rows_by_class();
    let mut out = Matrix::zeros(set.num_classes(), set.dim());
    for (class, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Capacity(format!("class {class} has no rows")));
        }
        let dst = out.row_mut(class);
        for &r in rows {
            dst.iter_mut()
                .zip(set.features().row(r))
                .for_each(|(d, s)| *d += s);
        }
        let n = rows.len() as f64;
        dst.iter_mut().for_each(|d| *d /= n);
    }
    Ok(out)
}

/// Mean prompt feature per class.
pub fn textual_prototype(prompts: &EmbeddingSet) -> Result<Matrix> {
    class_means(prompts)
}

/// Mean support feature per class; not re-normalized.
pub fn visual_prototype(support: &EmbeddingSet) -> Result<Matrix> {
    class_means(support)
}

/// `λ_j = sigmoid(v̄_j · u)` for every class row of `visual`.
pub fn fusion_coefficients(visual: &Matrix, fusion: &FusionParams) -> Result<Vec<f64>> {
    if fusion.u.len() != visual.cols() {
        return Err(Error::Shape {
            op: "fusion_coefficients",
            lhs: visual.shape(),
            rhs: (1, fusion.u.len()),
        });
    }
    Ok(visual
        .row_iter()
        .map(|r| sigmoid_scalar(r.iter().zip(&fusion.u).map(|(a, b)| a * b).sum()))
        .collect())
}

fn check_rows(p: &Matrix) -> Result<()> {
    match p
        .row_norms()
        .into_iter()
        .enumerate()
        .find(|(_, n)| !(*n >= DEGENERATE_PROTOTYPE_NORM))
    {
        Some((row, norm)) => Err(Error::Degenerate { row, norm }),
        None => Ok(()),
    }
}

/// Row-wise convex combination `λ_j v̄_j + (1 − λ_j) t̄_j`.
pub fn fuse(textual: &Matrix, visual: &Matrix, lambda: &[f64], t0: f64) -> Result<PrototypeState> {
    textual.expect_same_shape(visual, "fuse")?;
    if lambda.len() != textual.rows() {
        return Err(Error::Shape {
            op: "fuse",
            lhs: textual.shape(),
            rhs: (lambda.len(), 1),
        });
    }
    let mut p = textual.clone();
    for (j, &l) in lambda.iter().enumerate() {
        p.row_mut(j)
            .iter_mut()
            .zip(visual.row(j))
            .for_each(|(t, v)| *t = l * v + (1.0 - l) * *t);
    }
    check_rows(&p)?;
    Ok(PrototypeState { prototypes: p, time: t0 })
}

/// Initial prototypes from both modalities, with `u` applied.
pub fn initial_prototypes(
    support: &EmbeddingSet,
    prompts: &EmbeddingSet,
    fusion: &FusionParams,
    t0: f64,
) -> Result<PrototypeState> {
    let pt = textual_prototype(prompts)?;
    let pv = visual_prototype(support)?;
    let lambda = fusion_coefficients(&pv, fusion)?;
    fuse(&pt, &pv, &lambda, t0)
}

/// Records `fuse(P_t, P_v, sigmoid(P_v u))` on `ctx` with `u` (a `1 × D`
/// value) tracked, for chaining `∂L/∂P(t0)` back to `u`.
pub fn record_fusion(ctx: &Context, textual: &Matrix, visual: &Matrix, u: &DiffValue) -> Result<DiffValue> {
    let pv = DiffValue::constant(visual.clone());
    let pt = DiffValue::constant(textual.clone());
    let ut = ctx.transpose(u)?;
    let lambda = ctx.sigmoid(&ctx.matmul(&pv, &ut)?)?;
    let diff = DiffValue::constant(visual.sub(textual)?);
    let mixed = ctx.mul_col(&diff, &lambda)?;
    let p = ctx.add(&pt, &mixed)?;
    check_rows(p.value())?;
    Ok(p)
}
