//! Scalar tape for reverse-mode differentiation.
//!
//! Every arithmetic operation on a [`Var`] appends a node to its [`Tape`].
//! Two backward passes are available: [`Tape::adjoints`] propagates plain
//! `f64` adjoints, while [`Tape::grad_vars`] records the backward pass on the
//! same tape so that its results can be differentiated again. Hessian-vector
//! products are built from the second one.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    AddConst(u32),
    MulConst(u32, f64),
    Tanh(u32),
    Relu(u32),
    Exp(u32),
    Ln(u32),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) | Op::AddConst(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) | Op::MulConst(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { value, op });
        Var { tape: self, idx }
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(value, Op::Const)
    }

    fn value_at(&self, idx: u32) -> f64 {
        self.nodes.borrow()[idx as usize].value
    }

    fn var_at(&self, idx: u32) -> Var<'_> {
        Var { tape: self, idx }
    }

    /// Fails on the first node, in recording order, whose value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        match nodes.iter().find(|n| !n.value.is_finite()) {
            Some(n) => Err(Error::NumericalFailure { op: n.op.name() }),
            None => Ok(()),
        }
    }

    /// Plain reverse sweep from `output`. Returns the adjoint of every node
    /// recorded up to and including `output`.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let n = output.idx as usize + 1;
        let mut adj = vec![0.0; n];
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += a;
                }
                Op::Sub(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] -= a;
                }
                Op::Mul(x, y) => {
                    adj[x as usize] += a * nodes[y as usize].value;
                    adj[y as usize] += a * nodes[x as usize].value;
                }
                Op::Div(x, y) => {
                    let yv = nodes[y as usize].value;
                    adj[x as usize] += a / yv;
                    adj[y as usize] -= a * node.value / yv;
                }
                Op::Neg(x) => adj[x as usize] -= a,
                Op::AddConst(x) => adj[x as usize] += a,
                Op::MulConst(x, c) => adj[x as usize] += a * c,
                Op::Tanh(x) => adj[x as usize] += a * (1.0 - node.value * node.value),
                Op::Relu(x) => {
                    if nodes[x as usize].value > 0.0 {
                        adj[x as usize] += a;
                    }
                }
                Op::Exp(x) => adj[x as usize] += a * node.value,
                Op::Ln(x) => adj[x as usize] += a / nodes[x as usize].value,
            }
        }
        adj
    }

    /// Reverse sweep recorded on the tape itself. Returns, for each of
    /// `wrt`, a `Var` holding d(output)/d(wrt[i]) that can be differentiated
    /// again; `None` means the derivative is identically zero.
    pub fn grad_vars<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Option<Var<'t>>> {
        let n = output.idx as usize + 1;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        adj[n - 1] = Some(self.constant(1.0));

        fn acc<'t>(slot: &mut Option<Var<'t>>, contrib: Var<'t>) {
            *slot = Some(match *slot {
                Some(prev) => prev + contrib,
                None => contrib,
            });
        }

        for i in (0..n).rev() {
            let Some(a) = adj[i] else { continue };
            let node = self.nodes.borrow()[i];
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(x, y) => {
                    acc(&mut adj[x as usize], a);
                    acc(&mut adj[y as usize], a);
                }
                Op::Sub(x, y) => {
                    acc(&mut adj[x as usize], a);
                    acc(&mut adj[y as usize], -a);
                }
                Op::Mul(x, y) => {
                    let (vx, vy) = (self.var_at(x), self.var_at(y));
                    acc(&mut adj[x as usize], a * vy);
                    acc(&mut adj[y as usize], a * vx);
                }
                Op::Div(x, y) => {
                    let vy = self.var_at(y);
                    let out = self.var_at(i as u32);
                    acc(&mut adj[x as usize], a / vy);
                    acc(&mut adj[y as usize], -(a * out / vy));
                }
                Op::Neg(x) => acc(&mut adj[x as usize], -a),
                Op::AddConst(x) => acc(&mut adj[x as usize], a),
                Op::MulConst(x, c) => acc(&mut adj[x as usize], a * c),
                Op::Tanh(x) => {
                    let out = self.var_at(i as u32);
                    acc(&mut adj[x as usize], a * (-(out * out) + 1.0));
                }
                Op::Relu(x) => {
                    if self.value_at(x) > 0.0 {
                        acc(&mut adj[x as usize], a);
                    }
                }
                Op::Exp(x) => {
                    let out = self.var_at(i as u32);
                    acc(&mut adj[x as usize], a * out);
                }
                Op::Ln(x) => {
                    let vx = self.var_at(x);
                    acc(&mut adj[x as usize], a / vx);
                }
            }
        }
        wrt.iter().map(|v| adj.get(v.idx as usize).copied().flatten()).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.value_at(self.idx)
    }

    pub fn index(&self) -> usize {
        self.idx as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(self.value().tanh(), Op::Tanh(self.idx))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(self.value().max(0.0), Op::Relu(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(self.value().exp(), Op::Exp(self.idx))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value().ln(), Op::Ln(self.idx))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(self.value() + rhs.value(), Op::Add(self.idx, rhs.idx))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(self.value() - rhs.value(), Op::Sub(self.idx, rhs.idx))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(self.value() * rhs.value(), Op::Mul(self.idx, rhs.idx))
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(self.value() / rhs.value(), Op::Div(self.idx, rhs.idx))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push(-self.value(), Op::Neg(self.idx))
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.push(self.value() + rhs, Op::AddConst(self.idx))
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.push(self.value() - rhs, Op::AddConst(self.idx))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.push(self.value() * rhs, Op::MulConst(self.idx, rhs))
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.push(self.value() / rhs, Op::MulConst(self.idx, 1.0 / rhs))
    }
}

/// Numeric type that loss code is written against, so the same expression
/// evaluates either on plain `f64` or on a [`Tape`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living wherever `self` lives.
    fn lift(&self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        Var::value(self)
    }
    fn lift(&self, c: f64) -> Self {
        self.tape.constant(c)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
}
