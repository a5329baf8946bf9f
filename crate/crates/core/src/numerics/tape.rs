//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive records its inputs and output on a [`Tape`]. A backward
//! sweep walks the records in reverse insertion order, which is a reverse
//! topological order because an operation can only consume values that were
//! recorded before it.
//!
//! Model code is written against the [`Ops`] trait so the same forward pass
//! runs either on a tape (training) or on the plain evaluator [`Eval`]
//! (inference, no recording).

use std::sync::atomic::{AtomicU64, Ordering};

use super::special::{digamma_unchecked, lgamma_unchecked, sigmoid, softplus};
use super::{Array, NumericsError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Lgamma,
    Square,
    Abs,
    Sqrt,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Lgamma => lgamma_unchecked(x),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// d(out)/d(in) given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Lgamma => digamma_unchecked(x),
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sqrt => 0.5 / y,
        }
    }
}

/// The primitive operations shared by the tape and the plain evaluator.
///
/// Shapes are checked with `assert!`: a mismatch is a programming error in
/// model code, not a data condition.
pub trait Ops {
    type V: Clone;

    fn constant(&mut self, a: Array) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Array;

    fn matvec(&mut self, w: &Self::V, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn unary(&mut self, op: Unary, a: &Self::V) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Repeats a scalar `n` times.
    fn broadcast(&mut self, s: &Self::V, n: usize) -> Self::V;
    /// Elementwise `mask ? on : off`.
    fn select(&mut self, mask: &[bool], on: &Self::V, off: &Self::V) -> Self::V;
    /// Scalar element `i` of a vector.
    fn index(&mut self, a: &Self::V, i: usize) -> Self::V;

    fn scalar(&mut self, v: f64) -> Self::V {
        self.constant(Array::scalar(v))
    }
    fn vector(&mut self, v: Vec<f64>) -> Self::V {
        self.constant(Array::vector(v))
    }
    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Sigmoid, a)
    }
    fn tanh(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Tanh, a)
    }
    fn exp(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Exp, a)
    }
    fn log(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Log, a)
    }
    fn softplus(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Softplus, a)
    }
    fn lgamma(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Lgamma, a)
    }
    fn square(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Square, a)
    }
    fn abs(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Abs, a)
    }
    fn neg(&mut self, a: &Self::V) -> Self::V {
        self.unary(Unary::Neg, a)
    }
    /// `w x + b`
    fn affine(&mut self, w: &Self::V, b: &Self::V, x: &Self::V) -> Self::V {
        let wx = self.matvec(w, x);
        self.add(&wx, b)
    }
    fn item(&self, v: &Self::V) -> f64 {
        self.value(v).item()
    }
}

fn check_same(a: &Array, b: &Array) {
    assert_eq!(a.len(), b.len(), "elementwise operands differ in length");
}

fn matvec_values(w: &Array, x: &Array) -> Array {
    let shape = w.shape();
    assert_eq!(shape.len(), 2, "matvec expects a matrix");
    let (rows, cols) = (shape[0], shape[1]);
    assert_eq!(cols, x.len(), "matvec inner dimension");
    let wd = w.data();
    let xd = x.data();
    let out = (0..rows)
        .map(|r| {
            let row = &wd[r * cols..(r + 1) * cols];
            row.iter().zip(xd).map(|(a, b)| a * b).sum()
        })
        .collect();
    Array::vector(out)
}

fn zip_values(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    check_same(a, b);
    Array::vector(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn concat_values(a: &Array, b: &Array) -> Array {
    let mut d = Vec::with_capacity(a.len() + b.len());
    d.extend_from_slice(a.data());
    d.extend_from_slice(b.data());
    Array::vector(d)
}

fn select_values(mask: &[bool], on: &Array, off: &Array) -> Array {
    check_same(on, off);
    assert_eq!(mask.len(), on.len(), "mask length");
    Array::vector(
        mask.iter()
            .zip(on.data().iter().zip(off.data()))
            .map(|(&m, (&a, &b))| if m { a } else { b })
            .collect(),
    )
}

/// Evaluates primitives directly, recording nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Ops for Eval {
    type V = Array;

    fn constant(&mut self, a: Array) -> Array {
        a
    }
    fn value<'a>(&'a self, v: &'a Array) -> &'a Array {
        v
    }
    fn matvec(&mut self, w: &Array, x: &Array) -> Array {
        matvec_values(w, x)
    }
    fn add(&mut self, a: &Array, b: &Array) -> Array {
        zip_values(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Array, b: &Array) -> Array {
        zip_values(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Array, b: &Array) -> Array {
        zip_values(a, b, |x, y| x * y)
    }
    fn div(&mut self, a: &Array, b: &Array) -> Array {
        zip_values(a, b, |x, y| x / y)
    }
    fn add_scalar(&mut self, a: &Array, c: f64) -> Array {
        a.map(|x| x + c)
    }
    fn scale(&mut self, a: &Array, c: f64) -> Array {
        a.map(|x| x * c)
    }
    fn unary(&mut self, op: Unary, a: &Array) -> Array {
        a.map(|x| op.apply(x))
    }
    fn sum(&mut self, a: &Array) -> Array {
        Array::scalar(a.data().iter().sum())
    }
    fn concat(&mut self, a: &Array, b: &Array) -> Array {
        concat_values(a, b)
    }
    fn broadcast(&mut self, s: &Array, n: usize) -> Array {
        assert!(s.is_scalar(), "broadcast expects a scalar");
        Array::vector(vec![s.item(); n])
    }
    fn select(&mut self, mask: &[bool], on: &Array, off: &Array) -> Array {
        select_values(mask, on, off)
    }
    fn index(&mut self, a: &Array, i: usize) -> Array {
        Array::scalar(a.data()[i])
    }
}

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    MatVec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Unary(usize, Unary),
    Sum(usize),
    Concat(usize, usize),
    Broadcast(usize),
    Select(Vec<bool>, usize, usize),
    Index(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    /// True when some requires-grad leaf is upstream of this node.
    needs_grad: bool,
}

/// Record of the primitive operations of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `a` as a leaf that gradients flow into.
    pub fn param(&mut self, a: &Array) -> Var {
        self.push(a.detached(), Op::Leaf { requires_grad: true }, true)
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.idx
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Array {
        &self.nodes[i].value
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Returns d(root)/d(leaf) for every requires-grad leaf on this tape.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        if root.tape != self.id || root.idx >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        let root_val = &self.nodes[root.idx].value;
        if !root_val.is_scalar() {
            return Err(NumericsError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                &Op::MatVec(w, x) => {
                    let wv = self.val(w);
                    let xv = self.val(x);
                    let cols = wv.shape()[1];
                    if self.ng(w) {
                        let gw = acc(&mut grads, w, wv.len());
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            for (o, xc) in row.iter_mut().zip(xv.data()) {
                                *o += gr * xc;
                            }
                        }
                    }
                    if self.ng(x) {
                        let wd = wv.data();
                        let gx = acc(&mut grads, x, cols);
                        for (r, gr) in g.iter().enumerate() {
                            let row = &wd[r * cols..(r + 1) * cols];
                            for (o, wc) in gx.iter_mut().zip(row) {
                                *o += gr * wc;
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for (p, sign) in [(a, 1.0), (b, 1.0)] {
                        if self.ng(p) {
                            let gp = acc(&mut grads, p, g.len());
                            gp.iter_mut().zip(&g).for_each(|(o, v)| *o += sign * v);
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    for (p, sign) in [(a, 1.0), (b, -1.0)] {
                        if self.ng(p) {
                            let gp = acc(&mut grads, p, g.len());
                            gp.iter_mut().zip(&g).for_each(|(o, v)| *o += sign * v);
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if self.ng(a) {
                        let other = self.val(b).data();
                        let gp = acc(&mut grads, a, g.len());
                        for ((o, v), w) in gp.iter_mut().zip(&g).zip(other) {
                            *o += v * w;
                        }
                    }
                    if self.ng(b) {
                        let other = self.val(a).data();
                        let gp = acc(&mut grads, b, g.len());
                        for ((o, v), w) in gp.iter_mut().zip(&g).zip(other) {
                            *o += v * w;
                        }
                    }
                }
                &Op::Div(a, b) => {
                    let bv = self.val(b).data();
                    if self.ng(a) {
                        let gp = acc(&mut grads, a, g.len());
                        for ((o, v), d) in gp.iter_mut().zip(&g).zip(bv) {
                            *o += v / d;
                        }
                    }
                    if self.ng(b) {
                        let out = node.value.data();
                        let gp = acc(&mut grads, b, g.len());
                        for (((o, v), d), y) in gp.iter_mut().zip(&g).zip(bv).zip(out) {
                            *o -= v * y / d;
                        }
                    }
                }
                &Op::AddScalar(a) => {
                    let gp = acc(&mut grads, a, g.len());
                    gp.iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                }
                &Op::Scale(a, c) => {
                    let gp = acc(&mut grads, a, g.len());
                    gp.iter_mut().zip(&g).for_each(|(o, v)| *o += c * v);
                }
                &Op::Unary(a, op) => {
                    let xs = self.val(a).data();
                    let ys = node.value.data();
                    let gp = acc(&mut grads, a, g.len());
                    for (((o, v), &x), &y) in gp.iter_mut().zip(&g).zip(xs).zip(ys) {
                        *o += v * op.derivative(x, y);
                    }
                }
                &Op::Sum(a) => {
                    let n = self.val(a).len();
                    let gp = acc(&mut grads, a, n);
                    gp.iter_mut().for_each(|o| *o += g[0]);
                }
                &Op::Concat(a, b) => {
                    let na = self.val(a).len();
                    if self.ng(a) {
                        let gp = acc(&mut grads, a, na);
                        gp.iter_mut().zip(&g[..na]).for_each(|(o, v)| *o += v);
                    }
                    if self.ng(b) {
                        let gp = acc(&mut grads, b, g.len() - na);
                        gp.iter_mut().zip(&g[na..]).for_each(|(o, v)| *o += v);
                    }
                }
                &Op::Broadcast(a) => {
                    let gp = acc(&mut grads, a, 1);
                    gp[0] += g.iter().sum::<f64>();
                }
                Op::Select(mask, a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        let gp = acc(&mut grads, a, g.len());
                        for ((o, v), &m) in gp.iter_mut().zip(&g).zip(mask) {
                            if m {
                                *o += v;
                            }
                        }
                    }
                    if self.ng(b) {
                        let gp = acc(&mut grads, b, g.len());
                        for ((o, v), &m) in gp.iter_mut().zip(&g).zip(mask) {
                            if !m {
                                *o += v;
                            }
                        }
                    }
                }
                &Op::Index(a, k) => {
                    let n = self.val(a).len();
                    let gp = acc(&mut grads, a, n);
                    gp[k] += g[0];
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate().take(root.idx + 1) {
            if !matches!(node.op, Op::Leaf { requires_grad: true }) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&mut self, a: Array) -> Var {
        self.push(a.detached(), Op::Leaf { requires_grad: false }, false)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Array {
        &self.nodes[self.idx(v)].value
    }
    fn matvec(&mut self, w: &Var, x: &Var) -> Var {
        let (w, x) = (self.idx(w), self.idx(x));
        let out = matvec_values(self.val(w), self.val(x));
        let ng = self.ng(w) || self.ng(x);
        self.push(out, Op::MatVec(w, x), ng)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let out = zip_values(self.val(a), self.val(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let out = zip_values(self.val(a), self.val(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let out = zip_values(self.val(a), self.val(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }
    fn div(&mut self, a: &Var, b: &Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let out = zip_values(self.val(a), self.val(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a, b), ng)
    }
    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let a = self.idx(a);
        let out = self.val(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let a = self.idx(a);
        let out = self.val(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }
    fn unary(&mut self, op: Unary, a: &Var) -> Var {
        let a = self.idx(a);
        let out = self.val(a).map(|x| op.apply(x));
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, op), ng)
    }
    fn sum(&mut self, a: &Var) -> Var {
        let a = self.idx(a);
        let out = Array::scalar(self.val(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }
    fn concat(&mut self, a: &Var, b: &Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let out = concat_values(self.val(a), self.val(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat(a, b), ng)
    }
    fn broadcast(&mut self, s: &Var, n: usize) -> Var {
        let s = self.idx(s);
        assert!(self.val(s).is_scalar(), "broadcast expects a scalar");
        let out = Array::vector(vec![self.val(s).item(); n]);
        let ng = self.ng(s);
        self.push(out, Op::Broadcast(s), ng)
    }
    fn select(&mut self, mask: &[bool], on: &Var, off: &Var) -> Var {
        let (a, b) = (self.idx(on), self.idx(off));
        let out = select_values(mask, self.val(a), self.val(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Select(mask.to_vec(), a, b), ng)
    }
    fn index(&mut self, a: &Var, i: usize) -> Var {
        let a = self.idx(a);
        let out = Array::scalar(self.val(a).data()[i]);
        let ng = self.ng(a);
        self.push(out, Op::Index(a, i), ng)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a requires-grad leaf. A leaf the root does not depend on
    /// has a zero gradient and yields `Ok(None)`.
    pub fn wrt(&self, leaf: &Var) -> Result<Option<&[f64]>, NumericsError> {
        if leaf.tape != self.tape {
            return Err(NumericsError::ForeignVar);
        }
        Ok(self.grads.get(leaf.idx).and_then(|g| g.as_deref()))
    }
}

/// Backpropagates from `root` and accumulates d(root)/d(leaf) into each
/// paired array's gradient buffer. Repeated calls keep accumulating until
/// the caller zeroes the buffers.
pub fn autodiff_backward(
    tape: &Tape,
    root: Var,
    leaves: &mut [(Var, &mut Array)],
) -> Result<(), NumericsError> {
    for (var, _) in leaves.iter() {
        let on_tape = var.tape == tape.id
            && matches!(
                tape.nodes.get(var.idx).map(|n| &n.op),
                Some(Op::Leaf { requires_grad: true })
            );
        if !on_tape {
            return Err(NumericsError::ForeignVar);
        }
    }
    let grads = tape.backward(root)?;
    for (var, array) in leaves.iter_mut() {
        if !array.requires_grad() {
            return Err(NumericsError::LeafWithoutGrad);
        }
        match grads.wrt(var)? {
            Some(g) => array.accumulate_grad(g)?,
            None => {}
        }
    }
    Ok(())
}
