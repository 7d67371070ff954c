//! Differentiable primitives.
//!
//! Every backward rule is written with the same primitives, so a backward
//! pass recorded on the tape can be differentiated again.
//!
//! Broadcasting is limited to one-element tensors combined with tensors of
//! any shape; all other binary operands must have identical shapes.

use std::rc::Rc;

use super::array::Array;
use super::tape::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Sum,
    SumAxis(usize),
    ExpandAxis(usize),
    Broadcast,
    Gather(Rc<[usize]>),
    Scatter(Rc<[usize]>),
    Concat(Rc<[Vec<usize>]>),
    Sigmoid,
    Tanh,
    Relu,
    Clamp(f64, f64),
    Exp,
    Ln,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::ExpandAxis(_) => "expand_axis",
            Op::Broadcast => "broadcast",
            Op::Gather(_) => "gather",
            Op::Scatter(_) => "scatter",
            Op::Concat(_) => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Clamp(..) => "clamp",
            Op::Exp => "exp",
            Op::Ln => "ln",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() == other.shape() {
            let value = self.value().zip_map(other.value(), f);
            return Tensor::record(op, &[self, other], value);
        }
        if other.numel() == 1 {
            let b = other.broadcast_to(self.shape())?;
            return self.binary(&b, op, f);
        }
        if self.numel() == 1 {
            let a = self.broadcast_to(other.shape())?;
            return a.binary(other, op, f);
        }
        Err(mismatch(op.name(), self, other))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::record(Op::Scale(c), &[self], self.value().map(|x| x * c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::record(Op::AddScalar, &[self], self.value().map(|x| x + c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let value = self.value().matmul(other.value())?;
        Tensor::record(Op::MatMul, &[self, other], value)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        Tensor::record(Op::Transpose, &[self], self.value().transposed()?)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Tensor::record(Op::Reshape, &[self], self.value().reshaped(shape)?)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        Tensor::record(Op::Sum, &[self], Array::scalar(self.value().sum()))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axis` of a matrix, keeping the reduced axis with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.value().dims2("sum_axis")?;
        let d = self.value().data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += d[i * c + j];
                    }
                }
                Array::new(vec![1, c], out)?
            }
            1 => {
                let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
                Array::new(vec![r, 1], out)?
            }
            _ => return Err(axis_error("sum_axis", self)),
        };
        Tensor::record(Op::SumAxis(axis), &[self], value)
    }

    /// Repeats a size-1 axis `n` times.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        let (r, c) = self.value().dims2("expand_axis")?;
        let d = self.value().data();
        let value = match (axis, r, c) {
            (0, 1, _) => {
                let mut out = Vec::with_capacity(n * c);
                for _ in 0..n {
                    out.extend_from_slice(d);
                }
                Array::new(vec![n, c], out)?
            }
            (1, _, 1) => {
                let out = d.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
                Array::new(vec![r, n], out)?
            }
            _ => return Err(axis_error("expand_axis", self)),
        };
        Tensor::record(Op::ExpandAxis(axis), &[self], value)
    }

    /// Fills `shape` with the single value of a one-element tensor.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::record(Op::Broadcast, &[self], Array::full(shape, self.item()))
    }

    /// `out[k] = self[indices[k]]` over the flattened data, reshaped to `shape`.
    pub fn gather(&self, indices: impl Into<Rc<[usize]>>, shape: &[usize]) -> Result<Tensor> {
        let indices = indices.into();
        let src = self.value().data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::IndexOutOfRange {
                what: "gather source",
                index: bad,
                len: src.len(),
            });
        }
        let value = Array::new(shape.to_vec(), indices.iter().map(|&i| src[i]).collect())?;
        Tensor::record(Op::Gather(indices), &[self], value)
    }

    /// `out[indices[k]] += self[k]` into a zero tensor of `shape`.
    pub fn scatter(&self, indices: impl Into<Rc<[usize]>>, shape: &[usize]) -> Result<Tensor> {
        let indices = indices.into();
        if indices.len() != self.numel() {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                len: indices.len(),
            });
        }
        let mut out = Array::zeros(shape);
        let n = out.numel();
        {
            let dst = out.data_mut();
            for (&i, &x) in indices.iter().zip(self.value().data()) {
                if i >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "scatter target",
                        index: i,
                        len: n,
                    });
                }
                dst[i] += x;
            }
        }
        Tensor::record(Op::Scatter(indices), &[self], out)
    }

    /// Maximum over `axis` of a matrix (kept with size 1). Ties resolve to
    /// the lowest index, which also receives the whole gradient.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.value().dims2("max_axis")?;
        let d = self.value().data();
        let argmax = |idx: &mut dyn Iterator<Item = usize>| {
            let mut best = None::<usize>;
            for k in idx {
                if best.is_none_or(|b| d[k] > d[b]) {
                    best = Some(k);
                }
            }
            best.unwrap()
        };
        let (indices, shape): (Vec<usize>, [usize; 2]) = match axis {
            0 if r > 0 => (
                (0..c)
                    .map(|j| argmax(&mut (0..r).map(|i| i * c + j)))
                    .collect(),
                [1, c],
            ),
            1 if c > 0 => (
                (0..r).map(|i| argmax(&mut (i * c..(i + 1) * c))).collect(),
                [r, 1],
            ),
            _ => return Err(axis_error("max_axis", self)),
        };
        self.gather(indices, &shape)
    }

    /// Entry `(r, c)` of a matrix as a rank-0 tensor.
    pub fn at(&self, r: usize, c: usize) -> Result<Tensor> {
        let (rows, cols) = self.value().dims2("at")?;
        if r >= rows || c >= cols {
            return Err(Error::IndexOutOfRange {
                what: "matrix entry",
                index: r * cols + c,
                len: rows * cols,
            });
        }
        self.gather(vec![r * cols + c], &[])
    }

    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.value().dims2("index_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: bad,
                len: r,
            });
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(idx, &[rows.len(), c])
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.index_rows(&[i])
    }

    pub fn column(&self, j: usize) -> Result<Tensor> {
        self.index_columns(&[j])
    }

    pub fn index_columns(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = self.value().dims2("index_columns")?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: bad,
                len: c,
            });
        }
        let idx: Vec<usize> = (0..r)
            .flat_map(|i| cols.iter().map(move |&j| i * c + j))
            .collect();
        self.gather(idx, &[r, cols.len()])
    }

    /// Concatenates matrices along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidShape {
            shape: Vec::new(),
            len: 0,
        })?;
        let (r0, c0) = first.value().dims2("concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.value().dims2("concat")?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(axis_error("concat", p)),
            };
            if !ok {
                return Err(mismatch("concat", first, p));
            }
            dims.push((r, c));
        }
        let (rows, cols) = match axis {
            0 => (dims.iter().map(|d| d.0).sum(), c0),
            _ => (r0, dims.iter().map(|d| d.1).sum()),
        };
        let mut out = vec![0.0; rows * cols];
        let mut maps = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (p, &(r, c)) in parts.iter().zip(&dims) {
            let src = p.value().data();
            let mut map = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let k = match axis {
                        0 => (offset + i) * cols + j,
                        _ => i * cols + offset + j,
                    };
                    out[k] = src[i * c + j];
                    map.push(k);
                }
            }
            maps.push(map);
            offset += if axis == 0 { r } else { c };
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::record(
            Op::Concat(maps.into()),
            &refs,
            Array::new(vec![rows, cols], out)?,
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Tensor::record(Op::Sigmoid, &[self], self.value().map(sigmoid))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        Tensor::record(Op::Tanh, &[self], self.value().map(f64::tanh))
    }

    pub fn relu(&self) -> Result<Tensor> {
        Tensor::record(Op::Relu, &[self], self.value().map(|x| x.max(0.0)))
    }

    /// `max(x, 0)`; identical to [`Tensor::relu`].
    pub fn clamp_min_zero(&self) -> Result<Tensor> {
        self.relu()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        Tensor::record(
            Op::Clamp(lo, hi),
            &[self],
            self.value().map(|x| x.clamp(lo, hi)),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        Tensor::record(Op::Exp, &[self], self.value().map(f64::exp))
    }

    pub fn ln(&self) -> Result<Tensor> {
        Tensor::record(Op::Ln, &[self], self.value().map(f64::ln))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }
}

fn axis_error(op: &'static str, t: &Tensor) -> Error {
    Error::NotAMatrix {
        op,
        shape: t.shape().to_vec(),
    }
}

fn mask(x: &Tensor, keep: impl Fn(f64) -> bool) -> Tensor {
    Tensor::constant(x.value().map(|v| if keep(v) { 1.0 } else { 0.0 }))
}

/// Vector-Jacobian products. `needed[k]` is false for inputs that do not
/// lead to any requested tensor; their entries are left as `None`.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    out: &Tensor,
    g: &Tensor,
    needed: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let need = |k: usize| needed.get(k).copied().unwrap_or(false);
    let one = |f: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(f?)]) };
    let x = &inputs[0];
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![
            Some(g.clone()),
            if need(1) { Some(g.neg()?) } else { None },
        ]),
        Op::Mul => {
            let y = &inputs[1];
            Ok(vec![
                if need(0) { Some(g.mul(y)?) } else { None },
                if need(1) { Some(g.mul(x)?) } else { None },
            ])
        }
        Op::Div => {
            let y = &inputs[1];
            Ok(vec![
                if need(0) { Some(g.div(y)?) } else { None },
                if need(1) {
                    Some(g.mul(out)?.div(y)?.neg()?)
                } else {
                    None
                },
            ])
        }
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar => Ok(vec![Some(g.clone())]),
        Op::MatMul => {
            let y = &inputs[1];
            Ok(vec![
                if need(0) {
                    Some(g.matmul(&y.transpose()?)?)
                } else {
                    None
                },
                if need(1) {
                    Some(x.transpose()?.matmul(g)?)
                } else {
                    None
                },
            ])
        }
        Op::Transpose => one(g.transpose()),
        Op::Reshape => one(g.reshape(x.shape())),
        Op::Sum => one(g.broadcast_to(x.shape())),
        Op::SumAxis(axis) => one(g.expand_axis(*axis, x.shape()[*axis])),
        Op::ExpandAxis(axis) => one(g.sum_axis(*axis)),
        Op::Broadcast => one(g.sum()?.reshape(x.shape())),
        Op::Gather(idx) => one(g.scatter(idx.clone(), x.shape())),
        Op::Scatter(idx) => one(g.gather(idx.clone(), x.shape())),
        Op::Concat(maps) => inputs
            .iter()
            .zip(maps.iter())
            .enumerate()
            .map(|(k, (inp, map))| {
                if need(k) {
                    g.gather(map.clone(), inp.shape()).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect(),
        Op::Sigmoid => one(g.mul(&out.mul(&out.neg()?.add_scalar(1.0)?)?)),
        Op::Tanh => one(g.mul(&out.square()?.neg()?.add_scalar(1.0)?)),
        // Subgradient 0 at the kink.
        Op::Relu => one(g.mul(&mask(x, |v| v > 0.0))),
        Op::Clamp(lo, hi) => one(g.mul(&mask(x, |v| v > *lo && v < *hi))),
        Op::Exp => one(g.mul(out)),
        Op::Ln => one(g.div(x)),
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape::{grad, Tape};
    use super::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Array {
        Array::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn clamp_at_zero() {
        assert_eq!(Tensor::scalar(-2.0).clamp_min_zero().unwrap().item(), 0.0);
        assert_eq!(Tensor::scalar(2.5).clamp_min_zero().unwrap().item(), 2.5);
    }

    #[test]
    fn identity_matmul() {
        let a = m(3, 3, &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0, 7.0, 8.0, 9.0]);
        let i = Tensor::constant(Array::identity(3));
        let out = i.matmul(&Tensor::constant(a.clone())).unwrap();
        assert_eq!(out.value(), &a);
    }

    #[test]
    fn shape_mismatch_names_operands() {
        let a = Tensor::constant(Array::zeros(&[2, 3]));
        let b = Tensor::constant(Array::zeros(&[3, 2]));
        match a.add(&b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let a = Tensor::constant(m(1, 3, &[1.0, 2.0, 3.0]));
        let s = Tensor::scalar(2.0);
        assert_eq!(a.mul(&s).unwrap().value().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(s.sub(&a).unwrap().value().data(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn max_axis_tie_goes_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.var(m(2, 3, &[1.0, 5.0, 5.0, 2.0, 2.0, 0.0]));
        let mx = x.max_axis(1).unwrap();
        assert_eq!(mx.value().data(), &[5.0, 2.0]);
        let g = grad(&mx.sum().unwrap(), &[&x], false).unwrap().remove(0);
        assert_eq!(g.value().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_kink_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Array::row(vec![0.0, 1.0, -1.0]));
        let g = grad(&x.relu().unwrap().sum().unwrap(), &[&x], false)
            .unwrap()
            .remove(0);
        assert_eq!(g.value().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_slices() {
        let a = Tensor::constant(m(2, 1, &[1.0, 2.0]));
        let b = Tensor::constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = Tensor::concat(&[b.row(1).unwrap(), b.row(0).unwrap()], 0).unwrap();
        assert_eq!(r.value().data(), &[5.0, 6.0, 3.0, 4.0]);
        assert!(Tensor::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let x = Tensor::scalar(0.0);
        assert!(matches!(x.ln(), Err(Error::NonFinite("ln"))));
        assert!(matches!(
            Tensor::scalar(1000.0).exp(),
            Err(Error::NonFinite("exp"))
        ));
    }

    #[test]
    fn sum_and_expand_axes() {
        let x = Tensor::constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().value().data(), &[6.0, 15.0]);
        let col = Tensor::constant(m(2, 1, &[1.0, 2.0]));
        assert_eq!(
            col.expand_axis(1, 2).unwrap().value().data(),
            &[1.0, 1.0, 2.0, 2.0]
        );
    }
}
