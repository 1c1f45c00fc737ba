//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so parents always precede children and
//! a single reverse sweep visits nodes in a valid topological order.
//!
//! Binary elementwise operations accept exactly two broadcast forms: a 1×1
//! operand against any matrix, and a 1×c row against an r×c matrix.

use ndarray::{s, Array2, Axis, Zip};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to `ln` inputs and to `div` denominators.
pub const GUARD_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, if `v` lies on a path to the loss and
    /// requires a gradient.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of `v` into `tensor.grad`. A `v` the loss does not
    /// depend on contributes a zero gradient.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.wrt(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                let (r, c) = tensor.shape();
                tensor.accumulate_grad(&Array2::zeros((r, c)))
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    if a == b {
        Some(a)
    } else if a == (1, 1) {
        Some(b)
    } else if b == (1, 1) {
        Some(a)
    } else if a.0 == 1 && a.1 == b.1 {
        Some(b)
    } else if b.0 == 1 && a.1 == b.1 {
        Some(a)
    } else {
        None
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<T: Scalar>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    if g.dim() == shape {
        g
    } else if shape == (1, 1) {
        Array2::from_elem((1, 1), g.sum())
    } else {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

fn guard_denominator<T: Scalar>(b: T) -> T {
    let eps = T::lit(GUARD_EPS);
    if b.abs() >= eps {
        b
    } else if b < T::zero() {
        -eps
    } else {
        eps
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that is never differentiated.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Records a tensor; differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.value().clone(), Op::Leaf, tensor.requires_grad())
    }

    /// Records a tensor as a constant regardless of its flag (frozen weights).
    pub fn frozen(&mut self, tensor: &Tensor<T>) -> Var {
        self.constant(tensor.value().clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Dimension(format!(
                "matmul of {ar}x{ac} by {br}x{bc}"
            )));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::Dimension(format!("{name} cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let va = self.value(a).broadcast(shape).expect("checked broadcast");
        let vb = self.value(b).broadcast(shape).expect("checked broadcast");
        let value = Zip::from(&va).and(&vb).map_collect(|&x, &y| f(x, y));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Division with the denominator pushed away from zero by [`GUARD_EPS`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / guard_denominator(y), Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, move |x| x * k, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Natural log with inputs clamped to `[GUARD_EPS, ∞)`.
    pub fn ln(&mut self, a: Var) -> Var {
        let eps = T::lit(GUARD_EPS);
        self.unary(a, move |x| x.max(eps).ln(), Op::Ln(a))
    }

    /// Natural log that refuses non-positive inputs instead of clamping.
    pub fn ln_strict(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= T::zero() || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.ln(a))
    }

    /// Square root; the derivative is evaluated at `max(x, GUARD_EPS)`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()).sqrt(), Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Clamps into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, move |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        // Routed through mul so both uses accumulate.
        self.mul(a, a).expect("same shape")
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::count(n))
    }

    /// Column sums: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let rows = self.shape(first).0;
        if let Some(p) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::Dimension(format!(
                "concat_cols row mismatch: {rows} vs {}",
                self.shape(*p).0
            )));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("checked rows");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let cols = self.shape(first).1;
        if let Some(p) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(Error::Dimension(format!(
                "concat_rows column mismatch: {cols} vs {}",
                self.shape(*p).1
            )));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("checked cols");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.shape(a).1;
        if start >= end || end > cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{end} of width {cols}"
            )));
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(a).0;
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension(format!("row {r} out of {n}")));
        }
        let value = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Reverse sweep from a 1×1 `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss does not belong to this tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be 1x1, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contrib: Array2<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let contrib = reduce_to(contrib, self.nodes[v.0].value.dim());
            match &mut grads[v.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        let shape = out.dim();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).broadcast(shape).expect("forward shape");
                let vb = self.value(*b).broadcast(shape).expect("forward shape");
                if self.rg(*a) {
                    send(*a, g * &vb);
                }
                if self.rg(*b) {
                    send(*b, g * &va);
                }
            }
            Op::Div(a, b) => {
                let vb = self
                    .value(*b)
                    .broadcast(shape)
                    .expect("forward shape")
                    .mapv(guard_denominator);
                if self.rg(*a) {
                    send(*a, g / &vb);
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let d = Zip::from(g)
                        .and(out)
                        .and(&vb)
                        .map_collect(|&g, &o, &b| -g * o / b);
                    send(*b, d);
                }
            }
            Op::Neg(a) => send(*a, g.mapv(|x| -x)),
            Op::Scale(a, k) => send(*a, g.mapv(|x| x * *k)),
            Op::Exp(a) => send(*a, g * out),
            Op::Ln(a) => {
                let eps = T::lit(GUARD_EPS);
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g / x.max(eps));
                send(*a, d);
            }
            Op::Sqrt(a) => {
                let eps = T::lit(GUARD_EPS);
                let half = T::lit(0.5);
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * half / x.max(eps).sqrt());
                send(*a, d);
            }
            Op::Relu(a) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                send(*a, d);
            }
            Op::Softplus(a) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * stable_sigmoid(x));
                send(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = Zip::from(g)
                    .and(out)
                    .map_collect(|&g, &s| g * s * (T::one() - s));
                send(*a, d);
            }
            Op::Tanh(a) => {
                let d = Zip::from(g)
                    .and(out)
                    .map_collect(|&g, &t| g * (T::one() - t * t));
                send(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| {
                    if x >= *lo && x <= *hi {
                        g
                    } else {
                        T::zero()
                    }
                });
                send(*a, d);
            }
            Op::Sum(a) => {
                let dim = self.shape(*a);
                send(*a, Array2::from_elem(dim, g[[0, 0]]));
            }
            Op::SumRows(a) => {
                let dim = self.shape(*a);
                send(*a, g.broadcast(dim).expect("row broadcast").to_owned());
            }
            Op::SumCols(a) => {
                let dim = self.shape(*a);
                send(*a, g.broadcast(dim).expect("column broadcast").to_owned());
            }
            Op::Transpose(a) => send(*a, g.t().to_owned()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        send(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        send(p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                send(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                send(*a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Array2::eye(2));
        let m = tape.constant(array![[1.5, -2.0], [0.25, 4.0]]);
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &array![[1.5, -2.0], [0.25, 4.0]]);

        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let ones = tape.constant(array![[1.0], [1.0]]);
        let out = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(out), &array![[3.0], [7.0]]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Array2::zeros((2, 3)));
        let b = tape.constant(Array2::zeros((2, 3)));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations_match_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(array![[-1.0, 0.0, 2.0]]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &array![[0.0, 0.0, 2.0]]);

        let z = tape.scalar_constant(0.0);
        let sp = tape.softplus(z);
        assert_abs_diff_eq!(tape.scalar(sp), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::param(array![[0.0]]));
        let y = tape.sigmoid(x);
        let g = tape.backward(y).unwrap();
        assert_abs_diff_eq!(g.wrt(x).unwrap()[[0, 0]], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::param(array![[1.0, 2.0, 3.0]]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &array![[2.0, 4.0, 6.0]]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let p = Tensor::param(array![[1.0, -1.0]]);
        let x = tape.leaf(&p);
        let zero = tape.scale(x, 0.0);
        let loss = tape.sum(zero);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::param(array![[1.0]]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::param(array![[1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::<f64>::new();
        let m = tape.leaf(&Tensor::param(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let row = tape.leaf(&Tensor::param(array![[10.0, 20.0]]));
        let k = tape.leaf(&Tensor::param(array![[2.0]]));
        let a = tape.add(m, row).unwrap();
        assert_eq!(tape.value(a), &array![[11.0, 22.0], [13.0, 24.0], [15.0, 26.0]]);
        let b = tape.mul(k, a).unwrap();
        let loss = tape.sum(b);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(row).unwrap(), &array![[6.0, 6.0]]);
        assert_eq!(g.wrt(k).unwrap()[[0, 0]], 111.0);

        let mut tape = Tape::<f64>::new();
        let col = tape.constant(array![[1.0], [2.0], [3.0]]);
        let m = tape.constant(Array2::zeros((3, 2)));
        assert!(matches!(tape.add(col, m), Err(Error::Dimension(_))));
    }

    #[test]
    fn guarded_log_and_div() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(array![[0.0, -1.0]]);
        let l = tape.ln(x);
        assert!(tape.value(l).iter().all(|v| v.is_finite()));
        assert!(matches!(tape.ln_strict(x), Err(Error::Domain(_))));
        let one = tape.scalar_constant(1.0);
        let d = tape.div(one, x).unwrap();
        assert!(tape.value(d).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reused_tensor_accumulates() {
        // f(x) = x + x + x, df/dx = 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::param(array![[0.7]]));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 3.0);
    }
}
