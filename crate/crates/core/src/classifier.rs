//! Temperature-scaled cosine classifier over prototypes.

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize_rows, softmax_axis, Axis, Context, DiffValue, Matrix};

/// Probabilities below this are clamped inside the log.
pub const PROBABILITY_FLOOR: f64 = 1e-30;

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Cosine similarities `m × N` between feature rows and prototype rows.
pub fn cosine_similarities(features: &Matrix, prototypes: &Matrix) -> Result<Matrix> {
    let x = l2_normalize_rows(features)?;
    let p = l2_normalize_rows(prototypes)?;
    x.matmul(&p.transpose())
}

/// `softmax(cos(x, p_k) / τ)` over classes, one row per feature.
pub fn class_probabilities(features: &Matrix, prototypes: &Matrix, tau: f64) -> Result<Matrix> {
    check_temperature(tau)?;
    let logits = cosine_similarities(features, prototypes)?.scale(1.0 / tau);
    Ok(softmax_axis(&logits, Axis::Cols))
}

/// [`class_probabilities`] recorded on `ctx`, differentiable in the
/// prototypes.
pub fn record_class_probabilities(ctx: &Context, features: &Matrix, prototypes: &DiffValue, tau: f64) -> Result<DiffValue> {
    check_temperature(tau)?;
    let x = DiffValue::constant(l2_normalize_rows(features)?);
    let p = ctx.l2_normalize_rows(prototypes)?;
    let cos = ctx.matmul(&x, &ctx.transpose(&p)?)?;
    ctx.softmax(&ctx.scale(&cos, 1.0 / tau)?, Axis::Cols)
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape {
            op: "ce_loss",
            lhs: probs.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= probs.cols()) {
        return Err(Error::Mismatch(format!(
            "label {label} at row {row} exceeds class count {}",
            probs.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-probability of the true labels.
pub fn ce_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(PROBABILITY_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// [`ce_loss`] recorded on `ctx`.
pub fn record_ce_loss(ctx: &Context, probs: &DiffValue, labels: &[usize]) -> Result<DiffValue> {
    check_labels(probs.value(), labels)?;
    let mut one_hot = Matrix::zeros(probs.value().rows(), probs.value().cols());
    for (i, &y) in labels.iter().enumerate() {
        one_hot.set(i, y, 1.0);
    }
    let logs = ctx.ln_floored(probs, PROBABILITY_FLOOR)?;
    let picked = ctx.sum_product(&logs, &DiffValue::constant(one_hot))?;
    ctx.scale(&picked, -1.0 / labels.len().max(1) as f64)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Nearest prototype by cosine similarity.
pub fn predict(features: &Matrix, prototypes: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_rows(&cosine_similarities(features, prototypes)?))
}

/// Fraction of rows whose prediction equals the label.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_softmax() {
        let p = Matrix::identity(3);
        let probs = class_probabilities(&Matrix::row_vector(&[0.0, 1.0, 0.0]), &p, 0.01).unwrap();
        assert!(probs.get(0, 1) > 0.999);
    }

    #[test]
    fn identical_prototypes_give_uniform_rows() {
        let p = Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]);
        let probs = class_probabilities(&Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]), &p, 0.01).unwrap();
        for v in probs.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_two_class_case() {
        let tau = 0.01;
        let target = 0.5 + tau * 3f64.ln();
        // unit prototypes whose cosines with e0 are 0.5 and `target`
        let p = Matrix::from_rows(&[[0.5, (1.0 - 0.25f64).sqrt()], [target, (1.0 - target * target).sqrt()]]);
        let probs = class_probabilities(&Matrix::row_vector(&[1.0, 0.0]), &p, tau).unwrap();
        assert!((probs.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((probs.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_are_degenerate() {
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let err = class_probabilities(&Matrix::row_vector(&[1.0, 0.0]), &p, 0.01).unwrap_err();
        assert!(matches!(err, Error::Degenerate { row: 1, .. }));
        assert!(matches!(
            class_probabilities(&Matrix::row_vector(&[1.0, 0.0]), &Matrix::identity(2), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ce_examples() {
        let perfect = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(ce_loss(&perfect, &[0, 1]).unwrap(), 0.0);
        let uniform = Matrix::filled(3, 4, 0.25);
        assert!((ce_loss(&uniform, &[0, 3, 2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let wrong = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!((ce_loss(&wrong, &[1]).unwrap() - 1e30f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
        let probs = softmax_axis(&raw, Axis::Cols);
        let labels = [2, 0, 3];
        let mut want = 0.0;
        for i in 0..3 {
            let mut denom = 0.0;
            for j in 0..4 {
                denom += raw.get(i, j).exp();
            }
            want -= (raw.get(i, labels[i]).exp() / denom).ln();
        }
        want /= 3.0;
        assert!((ce_loss(&probs, &labels).unwrap() - want).abs() < 1e-12);
        let ctx = Context::new();
        let recorded = record_ce_loss(&ctx, &DiffValue::constant(probs.clone()), &labels).unwrap();
        assert!((recorded.scalar() - want).abs() < 1e-12);
    }

    #[test]
    fn recorded_probabilities_match_plain() {
        let x = Matrix::from_rows(&[[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]]);
        let p = Matrix::from_rows(&[[1.0, 0.2, 0.1], [0.3, -0.4, 2.0]]);
        let ctx = Context::new();
        let rec = record_class_probabilities(&ctx, &x, &ctx.variable(p.clone()), 0.05).unwrap();
        assert_eq!(rec.value(), &class_probabilities(&x, &p, 0.05).unwrap());
    }

    #[test]
    fn predict_examples() {
        let p = Matrix::identity(3);
        assert_eq!(predict(&Matrix::row_vector(&[0.0, 0.0, 1.0]), &p).unwrap(), vec![2]);
        let tie = Matrix::row_vector(&[1.0, 1.0, 0.0]);
        assert_eq!(predict(&tie, &p).unwrap(), vec![0]);
    }

    #[test]
    fn predict_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Matrix::from_fn(5, 6, |_, _| rng.gen_range(-1.0..1.0));
        let x = Matrix::from_fn(40, 6, |_, _| rng.gen_range(-1.0..1.0));
        let got = predict(&x, &p).unwrap();
        for (i, &label) in got.iter().enumerate() {
            let cos = |k: usize| {
                let (mut dot, mut nx, mut np) = (0.0, 0.0, 0.0);
                for d in 0..6 {
                    dot += x.get(i, d) * p.get(k, d);
                    nx += x.get(i, d) * x.get(i, d);
                    np += p.get(k, d) * p.get(k, d);
                }
                dot / (nx.sqrt() * np.sqrt())
            };
            let mut best = 0;
            for k in 1..5 {
                if cos(k) > cos(best) {
                    best = k;
                }
            }
            assert_eq!(label, best);
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(
            x in prop::collection::vec(0.1f64..1.0, 8),
            p in prop::collection::vec(-1.0f64..1.0, 12),
            tau in 0.005f64..2.0,
        ) {
            let x = Matrix::new(2, 4, x).unwrap();
            let p = Matrix::new(3, 4, p).unwrap();
            prop_assume!(p.row_norms().iter().all(|n| *n > 1e-3));
            let probs = class_probabilities(&x, &p, tau).unwrap();
            for row in probs.row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn argmax_ignores_positive_row_scaling(
            x in prop::collection::vec(-1.0f64..1.0, 12),
            p in prop::collection::vec(-1.0f64..1.0, 12),
            scales in prop::collection::vec(0.01f64..100.0, 3),
        ) {
            let x = Matrix::new(3, 4, x).unwrap();
            let p = Matrix::new(3, 4, p).unwrap();
            prop_assume!(p.row_norms().iter().all(|n| *n > 1e-3));
            prop_assume!(x.row_norms().iter().all(|n| *n > 1e-3));
            let mut scaled = p.clone();
            for (r, s) in scales.iter().enumerate() {
                scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
            }
            // exclude near-ties, where rounding may legitimately flip the winner
            let cos = cosine_similarities(&x, &p).unwrap();
            for row in cos.row_iter() {
                let mut sorted = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                prop_assume!(sorted[0] - sorted[1] > 1e-9);
            }
            prop_assert_eq!(predict(&x, &p).unwrap(), predict(&x, &scaled).unwrap());
        }
    }
}
