//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every operation on a [`Tape`] records its operands and produces a new
//! [`Var`]. Calling [`Tape::backward`] on a scalar (`1x1`) variable walks the
//! tape in reverse and returns the gradient of that scalar with respect to
//! every recorded variable, parameters and inputs alike.
//!
//! Binary element-wise operations broadcast a `1xk` row, an `nx1` column or a
//! `1x1` scalar against an `nxk` operand. Gradients are summed back to the
//! operand's own shape.
//!
//! Second derivatives are obtained by writing first derivatives explicitly
//! with recorded operations (see [`crate::nn::Mlp::value_and_input_grad_tape`]);
//! the tape itself is first-order.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Step,
    Dtanh(Var),
    Dsigmoid(Var),
    Sin(Var),
    Cos(Var),
    Recip(Var),
    Powi(Var, i32),
    Abs(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Col(Var, usize),
    Concat(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of a computation.
pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every variable on a tape.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Result<Array2<f64>> {
        if v.tape != self.tape || v.index() >= self.grads.len() {
            return Err(Error::Autodiff("variable was not recorded on this tape".into()));
        }
        Ok(match &self.grads[v.index()] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.index()]),
        })
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

fn expand(a: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if a.dim() == shape {
        a.clone()
    } else {
        a.broadcast(shape)
            .expect("shape checked by broadcast_shape")
            .to_owned()
    }
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary_zip(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array2<f64>> {
    let shape = broadcast_shape(a.dim(), b.dim())?;
    let mut out = Array2::zeros(shape);
    let av = a.broadcast(shape).expect("checked");
    let bv = b.broadcast(shape).expect("checked");
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dtanh(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

pub(crate) fn dsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { value, op });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.len() {
            return Err(Error::Autodiff("variable was not recorded on this tape".into()));
        }
        Ok(())
    }

    /// Record a leaf (parameter, input or constant).
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    /// Value of `v`. Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        Ref::map(self.nodes.borrow(), |n| &n[v.index()].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// New leaf holding the current value of `v`; gradients do not flow through it.
    pub fn detach(&self, v: Var) -> Result<Var> {
        self.check(v)?;
        let value = self.value(v).clone();
        Ok(self.leaf(value))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).mapv(f);
        Ok(self.push(value, op))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            binary_zip(&av, &bv, f)?
        };
        Ok(self.push(value, op))
    }

    /// `a · b`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            if av.ncols() != bv.nrows() {
                return Err(Error::Shape(format!(
                    "matmul {:?} x {:?}",
                    av.dim(),
                    bv.dim()
                )));
            }
            av.dot(&*bv)
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            if av.ncols() != bv.ncols() {
                return Err(Error::Shape(format!(
                    "matmul_t {:?} x {:?}ᵀ",
                    av.dim(),
                    bv.dim()
                )));
            }
            av.dot(&bv.t())
        };
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::min, Op::Min(a, b))
    }

    pub fn max(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::max, Op::Max(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn shift(&self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x + k, Op::Shift(a))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Heaviside step (derivative of relu); its own derivative is zero.
    pub fn step(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { 1.0 } else { 0.0 }, Op::Step)
    }

    pub fn dtanh(&self, a: Var) -> Result<Var> {
        self.unary(a, dtanh, Op::Dtanh(a))
    }

    pub fn dsigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, dsigmoid, Op::Dsigmoid(a))
    }

    pub fn sin(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn powi(&self, a: Var, n: i32) -> Result<Var> {
        self.unary(a, |x| x.powi(n), Op::Powi(a, n))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        Ok(self.push(Array2::from_elem((1, 1), s), Op::Sum(a)))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = {
            let v = self.value(a);
            if v.is_empty() {
                return Err(Error::Shape("mean of empty tensor".into()));
            }
            v.sum() / v.len() as f64
        };
        Ok(self.push(Array2::from_elem((1, 1), s), Op::Mean(a)))
    }

    /// Sum over columns: `[n, k] -> [n, 1]`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(v, Op::RowSum(a)))
    }

    /// Column `j` as an `[n, 1]` tensor.
    pub fn col(&self, a: Var, j: usize) -> Result<Var> {
        self.check(a)?;
        let v = {
            let av = self.value(a);
            if j >= av.ncols() {
                return Err(Error::Shape(format!("column {j} of {:?}", av.dim())));
            }
            av.column(j).to_owned().insert_axis(Axis(1))
        };
        Ok(self.push(v, Op::Col(a, j)))
    }

    /// Concatenate equally tall tensors along columns.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.index()].value.view()).collect();
            ndarray::concatenate(Axis(1), &views)
                .map_err(|e| Error::Shape(format!("concat: {e}")))?
        };
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Gradient of the scalar `out` with respect to everything on the tape.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check(out)?;
        let nodes = self.nodes.borrow();
        if nodes[out.index()].value.dim() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar output, got {:?}",
                nodes[out.index()].value.dim()
            )));
        }
        let n = out.index() + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[out.index()] = Some(Array2::ones((1, 1)));

        let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
            let shape = nodes[v.index()].value.dim();
            let g = reduce_to(g, shape);
            match &mut grads[v.index()] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..n).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.index()].value;
            let shape = node.value.dim();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * &expand(val(*b), shape));
                    acc(&mut grads, *b, &g * &expand(val(*a), shape));
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let av = expand(val(*a), shape);
                    let bv = expand(val(*b), shape);
                    let mut ga = Array2::zeros(shape);
                    let mut gb = Array2::zeros(shape);
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(&av)
                        .and(&bv)
                        .for_each(|ga, gb, &g, &x, &y| {
                            let pick_a = if is_min { x <= y } else { x >= y };
                            if pick_a {
                                *ga = g;
                            } else {
                                *gb = g;
                            }
                        });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|t| 1.0 - t * t);
                    acc(&mut grads, *a, g * d);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::Step => {}
                Op::Dtanh(a) => {
                    // d/dz (1 - tanh²z) = -2 tanh z (1 - tanh²z)
                    let d = val(*a).mapv(|z| {
                        let t = z.tanh();
                        -2.0 * t * (1.0 - t * t)
                    });
                    acc(&mut grads, *a, g * d);
                }
                Op::Dsigmoid(a) => {
                    let d = val(*a).mapv(|z| {
                        let s = sigmoid(z);
                        s * (1.0 - s) * (1.0 - 2.0 * s)
                    });
                    acc(&mut grads, *a, g * d);
                }
                Op::Sin(a) => acc(&mut grads, *a, g * val(*a).mapv(f64::cos)),
                Op::Cos(a) => acc(&mut grads, *a, g * val(*a).mapv(|x| -x.sin())),
                Op::Recip(a) => {
                    let d = node.value.mapv(|r| -r * r);
                    acc(&mut grads, *a, g * d);
                }
                Op::Powi(a, k) => {
                    let k = *k;
                    let d = val(*a).mapv(|x| if k == 0 { 0.0 } else { k as f64 * x.powi(k - 1) });
                    acc(&mut grads, *a, g * d);
                }
                Op::Abs(a) => acc(&mut grads, *a, g * val(*a).mapv(f64::signum)),
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), s));
                }
                Op::Mean(a) => {
                    let shape = val(*a).dim();
                    let s = g[[0, 0]] / (shape.0 * shape.1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(shape, s));
                }
                Op::RowSum(a) => {
                    let shape = val(*a).dim();
                    acc(&mut grads, *a, g.broadcast(shape).expect("column").to_owned());
                }
                Op::Col(a, j) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.column_mut(*j).assign(&g.column(0));
                    acc(&mut grads, *a, full);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        acc(&mut grads, *p, slice);
                        start += w;
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: impl Fn(&Tape, Var) -> Var, x0: Array2<f64>) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&tape, x);
        let g = tape.backward(y).unwrap().wrt(x).unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let eval = |xv: Array2<f64>| {
                let t = Tape::new();
                let v = t.leaf(xv);
                let out = f(&t, v);
                t.scalar_value(out)
            };
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            assert!(
                (fd - g[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry {idx}: fd {fd} vs ad {}",
                g[[r, c]]
            );
        }
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.9, 0.2, -1.4]];
        fd_check(
            |t, x| {
                let w = t.leaf(array![[0.5, -1.0], [0.25, 0.75], [-0.3, 0.1]]);
                let h = t.matmul(x, w).unwrap();
                let a = t.tanh(h).unwrap();
                let b = t.sigmoid(h).unwrap();
                let c = t.mul(a, b).unwrap();
                let d = t.dtanh(c).unwrap();
                let e = t.dsigmoid(h).unwrap();
                let s = t.sin(t.add(d, e).unwrap()).unwrap();
                let q = t.powi(t.cos(s).unwrap(), 3).unwrap();
                let r = t.recip(t.shift(q, 2.0).unwrap()).unwrap();
                let m = t.matmul_t(r, r).unwrap();
                let ex = t.exp(t.scale(m, 0.1).unwrap()).unwrap();
                t.mean(ex).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let x0 = array![[0.3, -0.7], [0.9, 0.2], [0.1, 0.4]];
        fd_check(
            |t, x| {
                let row = t.leaf(array![[2.0, -1.0]]);
                let col = t.row_sum(x).unwrap();
                let a = t.mul(x, row).unwrap();
                let b = t.sub(a, col).unwrap();
                let c = t.add(b, t.scalar(0.5)).unwrap();
                let c0 = t.col(c, 1).unwrap();
                let cc = t.concat(&[c, c0, x]).unwrap();
                t.sum(t.powi(cc, 2).unwrap()).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn parameter_gradient_shape_matches_broadcast_operand() {
        let tape = Tape::new();
        let x = tape.leaf(Array2::ones((4, 3)));
        let b = tape.leaf(array![[1.0, 2.0, 3.0]]);
        let y = tape.sum(tape.add(x, b).unwrap()).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(b).unwrap(), array![[4.0, 4.0, 4.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(array![[2.0]]);
        let d = tape.detach(x).unwrap();
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(array![[1.0]]);
        assert!(b.tanh(x).is_err());
        let y = b.scalar(1.0);
        assert!(a.backward(y).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tape::new();
        let x = t.leaf(Array2::ones((2, 2)));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn min_max_route_gradient() {
        let t = Tape::new();
        let a = t.leaf(array![[1.0, 5.0]]);
        let b = t.leaf(array![[3.0, 2.0]]);
        let m = t.sum(t.min(a, b).unwrap()).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(a).unwrap(), array![[1.0, 0.0]]);
        assert_eq!(g.wrt(b).unwrap(), array![[0.0, 1.0]]);
    }
}
