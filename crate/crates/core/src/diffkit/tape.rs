//! Scalar reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and the local partial
//! derivatives with respect to at most two parents; `gradient` sweeps the
//! tape backwards once.

use super::{check::Objective, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
    arity: u8,
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<f64>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: f64, node: Node) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    fn unary(&mut self, value: f64, a: Var, da: f64) -> Var {
        self.push(
            value,
            Node {
                parents: [a.0, 0],
                partials: [da, 0.0],
                arity: 1,
            },
        )
    }

    fn binary(&mut self, value: f64, a: Var, da: f64, b: Var, db: f64) -> Var {
        self.push(
            value,
            Node {
                parents: [a.0, b.0],
                partials: [da, db],
                arity: 2,
            },
        )
    }

    /// New leaf (an input or a constant).
    pub fn var(&mut self, value: f64) -> Var {
        self.push(
            value,
            Node {
                parents: [0, 0],
                partials: [0.0, 0.0],
                arity: 0,
            },
        )
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(self.value(a) + self.value(b), a, 1.0, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(self.value(a) - self.value(b), a, 1.0, b, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(x * y, a, y, b, x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(x / y, a, 1.0 / y, b, -x / (y * y))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(-self.value(a), a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(c * self.value(a), a, c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(self.value(a) + c, a, 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(x * x, a, 2.0 * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).exp();
        self.unary(y, a, y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(x.ln(), a, 1.0 / x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).tanh();
        self.unary(y, a, 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = super::sigmoid(self.value(a));
        self.unary(y, a, y * (1.0 - y))
    }

    /// Picks the smaller operand; the gradient follows the selected branch.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        if self.value(a) <= self.value(b) {
            self.unary(self.value(a), a, 1.0)
        } else {
            self.unary(self.value(b), b, 1.0)
        }
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        if self.value(a) >= self.value(b) {
            self.unary(self.value(a), a, 1.0)
        } else {
            self.unary(self.value(b), b, 1.0)
        }
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        if x < lo {
            self.unary(lo, a, 0.0)
        } else if x > hi {
            self.unary(hi, a, 0.0)
        } else {
            self.unary(x, a, 1.0)
        }
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = self.var(0.0);
        for &x in xs {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn dot(&mut self, xs: &[Var], ws: &[Var]) -> Var {
        let mut acc = self.var(0.0);
        for (&x, &w) in xs.iter().zip(ws) {
            let p = self.mul(x, w);
            acc = self.add(acc, p);
        }
        acc
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.values.len()];
        adj[output.0] = 1.0;
        for i in (0..=output.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            for k in 0..node.arity as usize {
                adj[node.parents[k]] += a * node.partials[k];
            }
        }
        adj
    }
}

/// Reverse-mode gradient of `loss_fn` at `params`.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter, in order.
/// Returns the loss value and a gradient sharing the parameters' layout.
pub fn grad<F>(loss_fn: F, params: &ParamVector) -> Result<(f64, ParamVector)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.values().iter().map(|&v| tape.var(v)).collect();
    let out = loss_fn(&mut tape, &leaves);
    let loss = tape.value(out);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let adj = tape.gradient(out);
    let g = leaves.iter().map(|v| adj[v.0]).collect();
    Ok((loss, params.with_values(g)?))
}

/// Adapts a tape-built loss to the [`Objective`] interface.
pub struct TapeObjective<F> {
    pub loss_fn: F,
    pub layout: Vec<super::Block>,
}

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    fn value(&self, p: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = p.iter().map(|&v| tape.var(v)).collect();
        let out = (self.loss_fn)(&mut tape, &leaves);
        tape.value(out)
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let params = ParamVector::from_parts(p.to_vec(), self.layout.clone()).expect("layout fits");
        match grad(&self.loss_fn, &params) {
            Ok((_, g)) => g.into_values(),
            Err(_) => vec![f64::NAN; p.len()],
        }
    }
}
