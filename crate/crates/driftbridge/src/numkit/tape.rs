//! Scalar reverse-mode tape.
//!
//! A Wengert list over `f64` scalars: building an expression records one node
//! per operation, and [`Var::backward`] replays the list once to accumulate
//! adjoints. Parameters that never enter the loss keep a zero adjoint.
//!
//! This is the general-purpose route for small graphs and for cross-checking
//! the structured [`Mlp`](super::Mlp) passes; the training loops use the
//! structured passes directly.

use std::cell::RefCell;

use super::activation::{sigmoid, Activation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
}

/// Records one scalar-valued computation.
#[derive(Default)]
pub struct GradTape {
    nodes: RefCell<Vec<Node>>,
}

/// A value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradTape,
    index: usize,
    pub value: f64,
}

/// Adjoints of every recorded node after a backward pass.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    /// The loss partial with respect to `var`.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adj[var.index]
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record a leaf variable (a parameter or an input).
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.nodes.borrow().len();
        // leaves point at themselves with zero partials
        let index = self.push([idx, idx], [0.0, 0.0]);
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn push(&self, parents: [usize; 2], partials: [f64; 2]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { parents, partials });
        idx
    }
}

impl<'t> Var<'t> {
    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        let index = self.tape.push([self.index, self.index], [partial, 0.0]);
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    fn binary(self, rhs: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        let index = self.tape.push([self.index, rhs.index], [da, db]);
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            self.value / rhs.value,
            1.0 / rhs.value,
            -self.value / (rhs.value * rhs.value),
        )
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }

    pub fn mul_const(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(self.value * self.value, 2.0 * self.value)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn activate(self, a: Activation) -> Var<'t> {
        self.unary(a.f(self.value), a.df(self.value))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    /// Reverse sweep from this node, which must be the scalar loss.
    pub fn backward(self) -> Result<Adjoints> {
        if !self.value.is_finite() {
            return Err(Error::Training("loss is not finite".into()));
        }
        let nodes = self.tape.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[self.index] = 1.0;
        for i in (0..=self.index).rev() {
            let node = nodes[i];
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            adj[node.parents[0]] += node.partials[0] * a;
            adj[node.parents[1]] += node.partials[1] * a;
        }
        Ok(Adjoints { adj })
    }
}
