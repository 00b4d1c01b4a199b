//! Reverse-mode automatic differentiation on a flat scalar tape.
//!
//! Every intermediate value of a loss evaluation is recorded as a node
//! holding its parent indices and local partial derivatives. A single
//! backward sweep in reverse index order then yields the gradient of the
//! output with respect to every leaf. The tape is rebuilt on every
//! training iteration because node relocation changes the expression
//! graph; [`Tape::clear`] keeps the allocation.
//!
//! Gradient accumulation is strictly sequential in reverse-topological
//! order, so repeated backward passes over rebuilt tapes are bitwise
//! reproducible.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AutodiffError {
    /// A non-finite value (NaN/Inf) was produced while recording, e.g. a
    /// division by zero. Detected at record time, reported by the first
    /// fallible API touching the tape afterwards.
    #[error("non-finite value recorded on tape at node {0}")]
    NonFiniteValue(usize),
    /// A non-finite adjoint appeared during the backward sweep.
    #[error("non-finite gradient accumulated at tape node {0}")]
    NonFiniteGradient(usize),
}

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Append-only record of scalar operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    nonfinite: Cell<Option<usize>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            nonfinite: Cell::new(None),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all nodes but keep the allocation for the next iteration.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.nonfinite.set(None);
    }

    /// Trainable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf (recorded so expressions stay uniform, but no
    /// gradient is requested for it).
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: f64, requires_grad: bool) -> Var<'_> {
        let index = self.push(value, [0, 0], [0.0, 0.0], true);
        Var {
            tape: self,
            index,
            value,
            requires_grad,
        }
    }

    fn push(&self, value: f64, parents: [u32; 2], partials: [f64; 2], self_parent: bool) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        assert!(index < u32::MAX as usize, "tape overflow");
        let parents = if self_parent {
            [index as u32, index as u32]
        } else {
            parents
        };
        nodes.push(Node { parents, partials });
        if !value.is_finite() && self.nonfinite.get().is_none() {
            self.nonfinite.set(Some(index));
        }
        index as u32
    }

    fn record<'t>(
        &'t self,
        value: f64,
        parents: [u32; 2],
        partials: [f64; 2],
        requires_grad: bool,
    ) -> Var<'t> {
        let index = self.push(value, parents, partials, false);
        Var {
            tape: self,
            index,
            value,
            requires_grad,
        }
    }

    /// Index of the first non-finite recorded value, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.nonfinite.get()
    }

    /// Err if any recorded value was non-finite.
    pub fn ensure_finite(&self) -> Result<(), AutodiffError> {
        match self.nonfinite.get() {
            Some(i) => Err(AutodiffError::NonFiniteValue(i)),
            None => Ok(()),
        }
    }

    /// Choose between two recorded values by a condition evaluated outside
    /// the tape. The gradient flows only into the selected branch.
    pub fn select<'t>(&'t self, cond: bool, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let (value, partials) = if cond {
            (a.value, [1.0, 0.0])
        } else {
            (b.value, [0.0, 1.0])
        };
        self.record(
            value,
            [a.index, b.index],
            partials,
            a.requires_grad || b.requires_grad,
        )
    }

    /// Reverse sweep from `output`, returning the adjoint of every node.
    ///
    /// Nodes recorded after `output` hold zero gradient. Accumulation
    /// order is fixed, so results are deterministic.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        self.ensure_finite()?;
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0f64; nodes.len()];
        adj[output.index as usize] = 1.0;
        for i in (0..=output.index as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            if !a.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(i));
            }
            let node = nodes[i];
            adj[node.parents[0] as usize] += node.partials[0] * a;
            adj[node.parents[1] as usize] += node.partials[1] * a;
        }
        Ok(Gradients { adj })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// d(output)/d(v).
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.index as usize]
    }
}

/// Handle to one recorded scalar. Cheap to copy; all arithmetic on it is
/// recorded on the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
    requires_grad: bool,
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.index as usize
    }

    pub fn requires_grad(self) -> bool {
        self.requires_grad
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        self.tape.record(
            value,
            [self.index, self.index],
            [partial, 0.0],
            self.requires_grad,
        )
    }

    fn binary(self, other: Var<'t>, value: f64, partials: [f64; 2]) -> Var<'t> {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
        self.tape.record(
            value,
            [self.index, other.index],
            partials,
            self.requires_grad || other.requires_grad,
        )
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let v = self.value;
        self.unary(v.powi(n), f64::from(n) * v.powi(n - 1))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.value;
        self.unary(v.powf(p), p * v.powf(p - 1.0))
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    /// max(0, x); subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        let active = self.value > 0.0;
        self.unary(
            if active { self.value } else { 0.0 },
            if active { 1.0 } else { 0.0 },
        )
    }

    /// |x|; subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t> {
        let partial = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.value.abs(), partial)
    }

    pub fn min(self, other: Var<'t>) -> Var<'t> {
        if self.value <= other.value {
            self.binary(other, self.value, [1.0, 0.0])
        } else {
            self.binary(other, other.value, [0.0, 1.0])
        }
    }

    pub fn max(self, other: Var<'t>) -> Var<'t> {
        if self.value >= other.value {
            self.binary(other, self.value, [1.0, 0.0])
        } else {
            self.binary(other, other.value, [0.0, 1.0])
        }
    }

    pub fn recip(self) -> Var<'t> {
        let v = self.value;
        self.unary(1.0 / v, -1.0 / (v * v))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value + o.value, [1.0, 1.0])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value - o.value, [1.0, -1.0])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value * o.value, [o.value, self.value])
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let d = o.value;
        self.binary(o, self.value / d, [1.0 / d, -self.value / (d * d)])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(self.value - c, 1.0)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        v.unary(self - v.value, -1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(self.value / c, 1.0 / c)
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        v.recip() * self
    }
}

/// Scalar abstraction so closed-form fields (body forces, manufactured
/// solutions) are written once and evaluate both as plain `f64` and as
/// tape expressions.
pub trait Real:
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
    fn exp(self) -> Self;
}

impl Real for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

impl<'t> Real for Var<'t> {
    fn exp(self) -> Self {
        Var::exp(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(4.0);
        let z = x * y;
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x), 4.0);
        assert_eq!(g.wrt(y), 3.0);
    }

    #[test]
    fn relu_inactive_and_at_zero() {
        let tape = Tape::new();
        let a = tape.var(-2.0);
        let ra = a.relu();
        assert_eq!(ra.value(), 0.0);
        let g = tape.backward(ra).unwrap();
        assert_eq!(g.wrt(a), 0.0);

        let b = tape.var(0.0);
        let rb = b.relu();
        let g = tape.backward(rb).unwrap();
        assert_eq!(g.wrt(b), 0.0);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let tape = Tape::new();
        let a = tape.var(0.0);
        let g = tape.backward(a.abs()).unwrap();
        assert_eq!(g.wrt(a), 0.0);
        let b = tape.var(-3.0);
        let g = tape.backward(b.abs()).unwrap();
        assert_eq!(g.wrt(b), -1.0);
    }

    #[test]
    fn division_by_zero_poisons_tape() {
        let tape = Tape::new();
        let a = tape.var(1.0);
        let b = tape.var(0.0);
        let q = a / b;
        assert!(tape.ensure_finite().is_err());
        assert!(matches!(
            tape.backward(q),
            Err(AutodiffError::NonFiniteValue(_))
        ));
    }

    #[test]
    fn linear_functional_gradients_exact() {
        let tape = Tape::new();
        let coeffs = [2.0, -0.5, 7.25, 0.0, 1e-3];
        let vars: Vec<_> = coeffs.iter().map(|_| tape.var(0.3)).collect();
        let mut s = tape.constant(0.0);
        for (c, v) in coeffs.iter().zip(&vars) {
            s = s + *v * *c;
        }
        let g = tape.backward(s).unwrap();
        for (c, v) in coeffs.iter().zip(&vars) {
            assert_eq!(g.wrt(*v), *c);
        }
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a f + b g) == a grad(f) + b grad(g), element-wise to 1e-14
        let eval = |combine: bool| -> (f64, f64, f64, f64) {
            let tape = Tape::new();
            let x = tape.var(1.3);
            let y = tape.var(-0.7);
            let f = x * y + x.powi(2);
            let g_expr = (x - y).exp() + y * 2.0;
            if combine {
                let h = f * 2.5 + g_expr * (-1.25);
                let g = tape.backward(h).unwrap();
                (g.wrt(x), g.wrt(y), 0.0, 0.0)
            } else {
                let gf = tape.backward(f).unwrap();
                let gg = tape.backward(g_expr).unwrap();
                (gf.wrt(x), gf.wrt(y), gg.wrt(x), gg.wrt(y))
            }
        };
        let (hx, hy, _, _) = eval(true);
        let (fx, fy, gx, gy) = eval(false);
        assert_relative_eq!(hx, 2.5 * fx - 1.25 * gx, max_relative = 1e-14);
        assert_relative_eq!(hy, 2.5 * fy - 1.25 * gy, max_relative = 1e-14);
    }

    #[test]
    fn rebuilt_tapes_give_identical_gradients() {
        let run = || {
            let tape = Tape::new();
            let x = tape.var(0.4321);
            let y = tape.var(1.777);
            let z = ((x * y).exp() + x / (y + 2.0)).sqrt() * 3.0 - y.abs();
            let g = tape.backward(z).unwrap();
            (g.wrt(x).to_bits(), g.wrt(y).to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn select_routes_gradient() {
        let tape = Tape::new();
        let a = tape.var(2.0);
        let b = tape.var(5.0);
        let s = tape.select(a.value() < b.value(), a, b);
        assert_eq!(s.value(), 2.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a), 1.0);
        assert_eq!(g.wrt(b), 0.0);
    }

    #[test]
    fn min_max_partials() {
        let tape = Tape::new();
        let a = tape.var(1.0);
        let b = tape.var(2.0);
        let m = a.max(b);
        assert_eq!(m.value(), 2.0);
        let g = tape.backward(m).unwrap();
        assert_eq!((g.wrt(a), g.wrt(b)), (0.0, 1.0));
        let n = a.min(b);
        let g = tape.backward(n).unwrap();
        assert_eq!((g.wrt(a), g.wrt(b)), (1.0, 0.0));
    }

    #[test]
    fn elementary_partials_match_finite_differences() {
        let cases: Vec<(fn(Var) -> Var, f64)> = vec![
            (|x| x.exp(), 0.8),
            (|x| x.sqrt(), 2.3),
            (|x| x.powi(3), 1.4),
            (|x| x.powf(2.5), 1.7),
            (|x| 1.0 / x, 0.9),
            (|x| x * 4.0 - 1.0, 0.2),
            (|x| 2.0 - x, 0.6),
        ];
        for (f, x0) in cases {
            let tape = Tape::new();
            let x = tape.var(x0);
            let y = f(x);
            let g = tape.backward(y).unwrap();
            let h = 1e-6 * x0.abs().max(1.0);
            let fd = {
                let tp = Tape::new();
                let fp = f(tp.var(x0 + h)).value();
                let fm = f(tp.var(x0 - h)).value();
                (fp - fm) / (2.0 * h)
            };
            assert_relative_eq!(g.wrt(x), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn clear_reuses_tape() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let _ = x + x;
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
        let y = tape.var(2.0);
        let z = y * y;
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(y), 4.0);
    }

    #[test]
    fn nonfinite_gradient_detected() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        // sqrt at 0 has an infinite partial; with a nonzero adjoint the
        // backward sweep must report it.
        let y = x.sqrt() * 2.0;
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NonFiniteGradient(_))
        ));
    }
}
