//! Scoped reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Context`] records every operation whose inputs include a tracked
//! value. Operations on constants only are evaluated eagerly and never
//! recorded, so running a model with constant parameters costs nothing beyond
//! the forward arithmetic.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::attention::{attention_backward, attention_forward, AttentionLayout};
use super::matrix::{self, product, Axis, Matrix, Operand};
use crate::error::{Error, Result};

static NEXT_CONTEXT: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    context: u64,
    index: usize,
}

/// A matrix value, optionally tracked by one differentiation context.
#[derive(Clone, Debug)]
pub struct DiffValue {
    value: Rc<Matrix>,
    node: Option<NodeRef>,
}

impl DiffValue {
    pub fn constant(value: Matrix) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn constant_shared(value: Rc<Matrix>) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a `1 × 1` result.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.value.shape(), (1, 1));
        self.value.as_slice()[0]
    }
}

type Pullback = Box<dyn Fn(&Matrix, &[bool]) -> Result<Vec<Option<Matrix>>>>;

struct Node {
    parents: Vec<Option<usize>>,
    pullback: Option<Pullback>,
    shape: (usize, usize),
}

/// One recording of a forward computation.
pub struct Context {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Context {
    fn default() -> Self {
        Self::new()
    }
}

impl Context {
    pub fn new() -> Self {
        Self {
            id: NEXT_CONTEXT.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf whose gradient can be requested.
    pub fn variable(&self, value: Matrix) -> DiffValue {
        self.variable_shared(Rc::new(value))
    }

    pub fn variable_shared(&self, value: Rc<Matrix>) -> DiffValue {
        let shape = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            pullback: None,
            shape,
        });
        DiffValue {
            value,
            node: Some(NodeRef {
                context: self.id,
                index: nodes.len() - 1,
            }),
        }
    }

    fn parent_index(&self, v: &DiffValue) -> Result<Option<usize>> {
        match v.node {
            None => Ok(None),
            Some(n) if n.context == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::Usage(
                "value belongs to a different differentiation context".into(),
            )),
        }
    }

    fn record<F>(&self, value: Matrix, inputs: &[&DiffValue], pullback: F) -> Result<DiffValue>
    where
        F: Fn(&Matrix, &[bool]) -> Result<Vec<Option<Matrix>>> + 'static,
    {
        let parents = inputs
            .iter()
            .map(|v| self.parent_index(v))
            .collect::<Result<Vec<_>>>()?;
        if parents.iter().all(Option::is_none) {
            return Ok(DiffValue::constant(value));
        }
        let shape = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            pullback: Some(Box::new(pullback)),
            shape,
        });
        Ok(DiffValue {
            value: Rc::new(value),
            node: Some(NodeRef {
                context: self.id,
                index: nodes.len() - 1,
            }),
        })
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// Inputs the loss does not depend on receive zero gradients.
    pub fn grad(&self, loss: &DiffValue, wrt: &[&DiffValue]) -> Result<Vec<Matrix>> {
        if loss.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "gradient requires a 1x1 loss, got {:?}",
                loss.shape()
            )));
        }
        let targets = wrt
            .iter()
            .map(|v| {
                self.parent_index(v)?
                    .ok_or_else(|| Error::Usage("gradient requested for an untracked constant".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let Some(root) = self.parent_index(loss)? else {
            return Ok(wrt.iter().map(|v| Matrix::zeros(v.shape().0, v.shape().1)).collect());
        };
        let lowest = targets.iter().copied().min().unwrap_or(root);
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; root + 1];
        grads[root] = Some(Matrix::filled(1, 1, 1.0));
        for index in (lowest..=root).rev() {
            let node = &nodes[index];
            let Some(pullback) = node.pullback.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some_and(|p| p >= lowest)).collect();
            let parent_grads = pullback(&upstream, &needs)?;
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(g)) = (parent, g) {
                    if *p < lowest {
                        continue;
                    }
                    match &mut grads[*p] {
                        Some(acc) => acc.axpy(1.0, &g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(targets
            .iter()
            .map(|&t| {
                grads[t].clone().unwrap_or_else(|| {
                    let (r, c) = nodes[t].shape;
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }

    pub fn matmul(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        let value = matrix::matmul(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(value, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0].then(|| product(Operand::plain(g), Operand::t(&bv))).transpose()?,
                needs[1].then(|| product(Operand::t(&av), Operand::plain(g))).transpose()?,
            ])
        })
    }

    pub fn transpose(&self, a: &DiffValue) -> Result<DiffValue> {
        self.record(a.value.transpose(), &[a], |g, _| Ok(vec![Some(g.transpose())]))
    }

    pub fn add(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        let value = a.value.add(&b.value)?;
        self.record(value, &[a, b], |g, needs| {
            Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
        })
    }

    pub fn sub(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        let value = a.value.sub(&b.value)?;
        self.record(value, &[a, b], |g, needs| {
            Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-1.0))])
        })
    }

    /// Entrywise product.
    pub fn mul(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        let value = a.value.hadamard(&b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(value, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.hadamard(&bv)).transpose()?,
                needs[1].then(|| g.hadamard(&av)).transpose()?,
            ])
        })
    }

    pub fn scale(&self, a: &DiffValue, factor: f64) -> Result<DiffValue> {
        self.record(a.value.scale(factor), &[a], move |g, _| Ok(vec![Some(g.scale(factor))]))
    }

    /// Adds a `1 × cols` bias row to every row of `a`.
    pub fn add_row_bias(&self, a: &DiffValue, bias: &DiffValue) -> Result<DiffValue> {
        let (rows, cols) = a.shape();
        if bias.shape() != (1, cols) {
            return Err(Error::Shape {
                op: "add_row_bias",
                lhs: a.shape(),
                rhs: bias.shape(),
            });
        }
        let mut value = (*a.value).clone();
        let b = bias.value.as_slice();
        for r in 0..rows {
            value.row_mut(r).iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        self.record(value, &[a, bias], |g, needs| {
            Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.column_sums())])
        })
    }

    /// Scales row `r` of `a` by `col[r]`, with `col` an `rows × 1` column.
    pub fn mul_col(&self, a: &DiffValue, col: &DiffValue) -> Result<DiffValue> {
        let (rows, _) = a.shape();
        if col.shape() != (rows, 1) {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: a.shape(),
                rhs: col.shape(),
            });
        }
        let mut value = (*a.value).clone();
        for r in 0..rows {
            let s = col.value.as_slice()[r];
            value.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let (av, cv) = (a.value.clone(), col.value.clone());
        self.record(value, &[a, col], move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let s = cv.as_slice()[r];
                    d.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                d
            });
            let dc = needs[1].then(|| {
                Matrix::from_fn(g.rows(), 1, |r, _| {
                    g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()
                })
            });
            Ok(vec![da, dc])
        })
    }

    pub fn sigmoid(&self, a: &DiffValue) -> Result<DiffValue> {
        let y = Rc::new(matrix::sigmoid(&a.value));
        let yc = y.clone();
        self.record((*y).clone(), &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&yc, "sigmoid", |g, y| g * y * (1.0 - y))?)])
        })
    }

    pub fn relu(&self, a: &DiffValue) -> Result<DiffValue> {
        let av = a.value.clone();
        self.record(a.value.map(|x| x.max(0.0)), &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?)])
        })
    }

    /// `ln(max(a, floor))` entrywise; the floor region has zero derivative.
    pub fn ln_floored(&self, a: &DiffValue, floor: f64) -> Result<DiffValue> {
        let av = a.value.clone();
        self.record(a.value.map(|x| x.max(floor).ln()), &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, "ln", |g, x| if x > floor { g / x } else { 0.0 })?)])
        })
    }

    pub fn softmax(&self, a: &DiffValue, axis: Axis) -> Result<DiffValue> {
        match axis {
            Axis::Cols => {
                let y = Rc::new(matrix::softmax_axis(&a.value, Axis::Cols));
                let yc = y.clone();
                self.record((*y).clone(), &[a], move |g, _| {
                    let mut d = g.hadamard(&yc)?;
                    for r in 0..d.rows() {
                        let inner: f64 = d.row(r).iter().sum();
                        let yr = yc.row(r);
                        d.row_mut(r).iter_mut().zip(yr).for_each(|(v, y)| *v -= y * inner);
                    }
                    Ok(vec![Some(d)])
                })
            }
            Axis::Rows => self.softmax_row_blocks(a, a.shape().0.max(1)),
        }
    }

    /// Column-wise softmax inside consecutive blocks of `block` rows.
    pub fn softmax_row_blocks(&self, a: &DiffValue, block: usize) -> Result<DiffValue> {
        let y = Rc::new(matrix::softmax_row_blocks(&a.value, block)?);
        let yc = y.clone();
        self.record((*y).clone(), &[a], move |g, _| {
            let gy = g.hadamard(&yc)?;
            let inner = gy.sum_row_blocks(block)?.repeat_rows(block);
            let mut d = gy;
            for ((d, y), s) in d.as_mut_slice().iter_mut().zip(yc.as_slice()).zip(inner.as_slice()) {
                *d -= y * s;
            }
            Ok(vec![Some(d)])
        })
    }

    pub fn repeat_rows(&self, a: &DiffValue, times: usize) -> Result<DiffValue> {
        self.record(a.value.repeat_rows(times), &[a], move |g, _| {
            Ok(vec![Some(g.sum_row_blocks(times)?)])
        })
    }

    pub fn tile_rows(&self, a: &DiffValue, times: usize) -> Result<DiffValue> {
        self.record(a.value.tile_rows(times), &[a], move |g, _| Ok(vec![Some(g.sum_tiles(times)?)]))
    }

    pub fn sum_row_blocks(&self, a: &DiffValue, block: usize) -> Result<DiffValue> {
        let value = a.value.sum_row_blocks(block)?;
        self.record(value, &[a], move |g, _| Ok(vec![Some(g.repeat_rows(block))]))
    }

    pub fn slice_rows(&self, a: &DiffValue, start: usize, end: usize) -> Result<DiffValue> {
        if start > end || end > a.shape().0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: a.shape(),
                rhs: (start, end),
            });
        }
        let (rows, cols) = a.shape();
        self.record(a.value.slice_rows(start, end), &[a], move |g, _| {
            let mut d = Matrix::zeros(rows, cols);
            d.as_mut_slice()[start * cols..end * cols].copy_from_slice(g.as_slice());
            Ok(vec![Some(d)])
        })
    }

    pub fn l2_normalize_rows(&self, a: &DiffValue) -> Result<DiffValue> {
        let y = Rc::new(matrix::l2_normalize_rows(&a.value)?);
        let norms = a.value.row_norms();
        let yc = y.clone();
        self.record((*y).clone(), &[a], move |g, _| {
            let mut d = g.clone();
            for (r, norm) in norms.iter().enumerate() {
                let yr = yc.row(r);
                let inner: f64 = g.row(r).iter().zip(yr).map(|(g, y)| g * y).sum();
                d.row_mut(r)
                    .iter_mut()
                    .zip(yr)
                    .for_each(|(v, y)| *v = (*v - y * inner) / norm);
            }
            Ok(vec![Some(d)])
        })
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&self, a: &DiffValue) -> Result<DiffValue> {
        let (rows, cols) = a.shape();
        self.record(Matrix::filled(1, 1, a.value.sum()), &[a], move |g, _| {
            Ok(vec![Some(Matrix::filled(rows, cols, g.as_slice()[0]))])
        })
    }

    /// `Σ a ⊙ b`, as `1 × 1`.
    pub fn sum_product(&self, a: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        let value = Matrix::filled(1, 1, a.value.dot(&b.value)?);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(value, &[a, b], move |g, needs| {
            let s = g.as_slice()[0];
            Ok(vec![needs[0].then(|| bv.scale(s)), needs[1].then(|| av.scale(s))])
        })
    }

    /// Grouped multi-head scaled dot-product attention; see [`AttentionLayout`].
    pub fn attention(
        &self,
        q: &DiffValue,
        k: &DiffValue,
        v: &DiffValue,
        layout: AttentionLayout,
    ) -> Result<DiffValue> {
        let fwd = attention_forward(&q.value, &k.value, &v.value, layout)?;
        let (qv, kv, vv) = (q.value.clone(), k.value.clone(), v.value.clone());
        let probs = fwd.probs;
        self.record(fwd.output, &[q, k, v], move |g, _| {
            let (dq, dk, dv) = attention_backward(&qv, &kv, &vv, &probs, g, layout)?;
            Ok(vec![Some(dq), Some(dk), Some(dv)])
        })
    }

    /// `x · w + b` for a weight `in × out` and bias `1 × out`.
    pub fn affine(&self, x: &DiffValue, w: &DiffValue, b: &DiffValue) -> Result<DiffValue> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(&xw, b)
    }
}
