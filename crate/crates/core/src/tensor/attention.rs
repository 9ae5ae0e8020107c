//! Grouped multi-head scaled dot-product attention kernels.
//!
//! Rows of the query/key/value matrices are tokens, split into consecutive
//! groups of `group` rows; tokens only attend inside their own group. Columns
//! are split into `heads` contiguous slices of equal width.

use super::matrix::{dot_lanes, softmax_in_place, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub group: usize,
    pub heads: usize,
}

/// Forward result; `probs` holds the softmax weights for every (group, head),
/// each a row-major `group × group` block, needed by the pullback.
pub struct AttentionForward {
    pub output: Matrix,
    pub probs: Vec<f64>,
}

/// Strided view into a flat buffer for the gemm helper.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: isize,
    cs: isize,
}

#[allow(clippy::too_many_arguments)]
fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    c: &mut [f64],
    cv: View,
) {
    let extent = |rows: usize, cols: usize, v: View| {
        v.offset + (rows - 1) * v.rs as usize + (cols - 1) * v.cs as usize
    };
    assert!(extent(m, k, av) < a.len());
    assert!(extent(k, n, bv) < b.len());
    assert!(extent(m, n, cv) < c.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            0.0,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

fn check(q: &Matrix, k: &Matrix, v: &Matrix, layout: AttentionLayout) -> Result<(usize, usize)> {
    q.expect_same_shape(k, "attention")?;
    q.expect_same_shape(v, "attention")?;
    let (rows, width) = q.shape();
    if layout.group == 0 || layout.heads == 0 || rows % layout.group != 0 || width % layout.heads != 0 {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape(),
            rhs: (layout.group, layout.heads),
        });
    }
    Ok((rows / layout.group, width / layout.heads))
}

pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, layout: AttentionLayout) -> Result<AttentionForward> {
    let (groups, head_dim) = check(q, k, v, layout)?;
    let s = layout.group;
    let width = q.cols();
    let w = width as isize;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut output = Matrix::zeros(q.rows(), width);
    let mut probs = vec![0.0; groups * layout.heads * s * s];
    if q.is_empty() {
        return Ok(AttentionForward { output, probs });
    }
    for g in 0..groups {
        for h in 0..layout.heads {
            let base = g * s * width + h * head_dim;
            let block = (g * layout.heads + h) * s * s;
            let scores = &mut probs[block..block + s * s];
            gemm_view(
                s,
                head_dim,
                s,
                scale,
                q.as_slice(),
                View { offset: base, rs: w, cs: 1 },
                k.as_slice(),
                View { offset: base, rs: 1, cs: w },
                scores,
                View { offset: 0, rs: s as isize, cs: 1 },
            );
            scores.chunks_exact_mut(s).for_each(softmax_in_place);
            gemm_view(
                s,
                s,
                head_dim,
                1.0,
                &probs[block..block + s * s],
                View { offset: 0, rs: s as isize, cs: 1 },
                v.as_slice(),
                View { offset: base, rs: w, cs: 1 },
                output.as_mut_slice(),
                View { offset: base, rs: w, cs: 1 },
            );
        }
    }
    Ok(AttentionForward { output, probs })
}

/// Gradients of the attention output with respect to `(q, k, v)`.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[f64],
    grad_out: &Matrix,
    layout: AttentionLayout,
) -> Result<(Matrix, Matrix, Matrix)> {
    let (groups, head_dim) = check(q, k, v, layout)?;
    q.expect_same_shape(grad_out, "attention backward")?;
    let s = layout.group;
    let width = q.cols();
    let w = width as isize;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), width);
    let mut dk = Matrix::zeros(q.rows(), width);
    let mut dv = Matrix::zeros(q.rows(), width);
    if q.is_empty() {
        return Ok((dq, dk, dv));
    }
    let mut d_probs = vec![0.0; s * s];
    let sq = View { offset: 0, rs: s as isize, cs: 1 };
    let sq_t = View { offset: 0, rs: 1, cs: s as isize };
    for g in 0..groups {
        for h in 0..layout.heads {
            let base = g * s * width + h * head_dim;
            let tokens = View { offset: base, rs: w, cs: 1 };
            let tokens_t = View { offset: base, rs: 1, cs: w };
            let block = (g * layout.heads + h) * s * s;
            let a = &probs[block..block + s * s];
            gemm_view(s, s, head_dim, 1.0, a, sq_t, grad_out.as_slice(), tokens, dv.as_mut_slice(), tokens);
            gemm_view(s, head_dim, s, 1.0, grad_out.as_slice(), tokens, v.as_slice(), tokens_t, &mut d_probs, sq);
            for (dp_row, a_row) in d_probs.chunks_exact_mut(s).zip(a.chunks_exact(s)) {
                let inner = dot_lanes(dp_row, a_row);
                for (d, p) in dp_row.iter_mut().zip(a_row) {
                    *d = p * (*d - inner);
                }
            }
            gemm_view(s, s, head_dim, scale, &d_probs, sq, k.as_slice(), tokens, dq.as_mut_slice(), tokens);
            gemm_view(s, s, head_dim, scale, &d_probs, sq_t, q.as_slice(), tokens, dk.as_mut_slice(), tokens);
        }
    }
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Loop-by-loop reference evaluation.
    fn reference(q: &Matrix, k: &Matrix, v: &Matrix, layout: AttentionLayout) -> Matrix {
        let s = layout.group;
        let hd = q.cols() / layout.heads;
        let mut out = Matrix::zeros(q.rows(), q.cols());
        for g in 0..q.rows() / s {
            for h in 0..layout.heads {
                for i in 0..s {
                    let mut scores = vec![0.0; s];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        for d in 0..hd {
                            *sc += q.get(g * s + i, h * hd + d) * k.get(g * s + j, h * hd + d);
                        }
                        *sc /= (hd as f64).sqrt();
                    }
                    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let total: f64 = scores.iter().map(|x| (x - max).exp()).sum();
                    for d in 0..hd {
                        let mut acc = 0.0;
                        for j in 0..s {
                            acc += (scores[j] - max).exp() / total * v.get(g * s + j, h * hd + d);
                        }
                        out.set(g * s + i, h * hd + d, acc);
                    }
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = AttentionLayout { group: 5, heads: 3 };
        let (q, k, v) = (random(&mut rng, 10, 6), random(&mut rng, 10, 6), random(&mut rng, 10, 6));
        let got = attention_forward(&q, &k, &v, layout).unwrap().output;
        assert!(got.max_abs_diff(&reference(&q, &k, &v, layout)).unwrap() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = AttentionLayout { group: 3, heads: 2 };
        let (q, k, v) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 4));
        let seed = random(&mut rng, 6, 4);
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| reference(q, k, v, layout).dot(&seed).unwrap();
        let fwd = attention_forward(&q, &k, &v, layout).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &fwd.probs, &seed, layout).unwrap();
        let h = 1e-6;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for idx in 0..q.len() {
                let mut inputs = [q.clone(), k.clone(), v.clone()];
                inputs[which].as_mut_slice()[idx] += h;
                let up = loss(&inputs[0], &inputs[1], &inputs[2]);
                inputs[which].as_mut_slice()[idx] -= 2.0 * h;
                let down = loss(&inputs[0], &inputs[1], &inputs[2]);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad.as_slice()[idx]).abs() < 1e-8, "input {which} idx {idx}");
            }
        }
    }
}
