//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient
//! of a scalar output with respect to every recorded node.

use std::cell::RefCell;
use std::ops;

use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Matrix<T>),
    MulScalarVar(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Silu(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    PowConst(usize, T),
    Sum(usize),
    MeanRows(usize),
    MaskedCenter(usize, Vec<bool>),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    Patchify {
        input: usize,
        height: usize,
        width: usize,
        stride: usize,
    },
    LogSoftmaxRows(usize),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Recording of one differentiable computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to `var`, or `None` when `var`
    /// does not influence the output.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Matrix<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Matrix<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record a leaf value (parameter, input or constant).
    pub fn leaf(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&self, value: T) -> Var<'_, T> {
        self.leaf(Matrix::scalar(value))
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Matrix<T>> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradient of the 1×1 node `output` with respect to all nodes.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Matrix::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: usize, g: Matrix<T>) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, g.matmul_t(bv));
                    acc(&mut grads, *b, av.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            rg.set(0, c, rg.get(0, c) + g.get(r, c));
                        }
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, rg);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                }
                Op::MulConst(a, k) => {
                    acc(&mut grads, *a, g.zip_map(k, |x, y| x * y));
                }
                Op::MulScalarVar(a, s) => {
                    let av = &nodes[*a].value;
                    let sv = nodes[*s].value.item();
                    let gs = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    acc(&mut grads, *a, g.scale(sv));
                    acc(&mut grads, *s, Matrix::scalar(gs));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, g.zip_map(out, |x, y| x * y * (T::one() - y)));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, g.zip_map(out, |x, y| x * (T::one() - y * y)));
                }
                Op::Silu(a) => {
                    let av = &nodes[*a].value;
                    let d = av.map(|x| {
                        let s = sigmoid(x);
                        s * (T::one() + x * (T::one() - s))
                    });
                    acc(&mut grads, *a, g.zip_map(&d, |x, y| x * y));
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(av, |x, y| if y > T::zero() { x } else { T::zero() }));
                }
                Op::Softplus(a) => {
                    let av = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(av, |x, y| x * sigmoid(y)));
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(out, |x, y| x * y)),
                Op::Log(a) => {
                    let av = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(av, |x, y| x / y));
                }
                Op::PowConst(a, p) => {
                    let av = &nodes[*a].value;
                    let p = *p;
                    acc(&mut grads, *a, g.zip_map(av, |x, y| x * p * y.powf(p - T::one())));
                }
                Op::Sum(a) => {
                    let av = &nodes[*a].value;
                    acc(&mut grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
                }
                Op::MeanRows(a) => {
                    let av = &nodes[*a].value;
                    let n = T::from_usize(av.rows()).expect("rows");
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_fn(av.rows(), av.cols(), |_, c| g.get(0, c) / n),
                    );
                }
                Op::MaskedCenter(a, subtract) => {
                    let gm = g.mean_rows();
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        if subtract[c] {
                            g.get(r, c) - gm.get(0, c)
                        } else {
                            g.get(r, c)
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ac = nodes[*a].value.cols();
                    let bc = nodes[*b].value.cols();
                    acc(&mut grads, *a, Matrix::from_fn(g.rows(), ac, |r, c| g.get(r, c)));
                    acc(
                        &mut grads,
                        *b,
                        Matrix::from_fn(g.rows(), bc, |r, c| g.get(r, ac + c)),
                    );
                }
                Op::SliceCols(a, start) => {
                    let av = &nodes[*a].value;
                    let width = g.cols();
                    let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                        if c >= *start && c < start + width {
                            g.get(r, c - start)
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Patchify {
                    input,
                    height,
                    width,
                    stride,
                } => {
                    let av = &nodes[*input].value;
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    patch_scatter(&g, &mut ga, *height, *width, *stride);
                    acc(&mut grads, *input, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // d/dx log_softmax: g - softmax * sum(g)
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        let gsum = g.row(r).iter().fold(T::zero(), |s, &x| s + x);
                        g.get(r, c) - out.get(r, c).exp() * gsum
                    });
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

/// Output of a patch layout: rows `(h/s)·(w/s)`, columns `s·s·c` ordered by
/// (dy, dx, channel). Trailing rows/columns that do not fill a patch are
/// dropped.
fn patch_gather<T: Scalar>(x: &Matrix<T>, height: usize, width: usize, stride: usize) -> Matrix<T> {
    let c = x.cols();
    let (oh, ow) = (height / stride, width / stride);
    let mut out = Matrix::zeros(oh * ow, stride * stride * c);
    for py in 0..oh {
        for px in 0..ow {
            let orow = py * ow + px;
            for dy in 0..stride {
                for dx in 0..stride {
                    let irow = (py * stride + dy) * width + px * stride + dx;
                    let base = (dy * stride + dx) * c;
                    for ch in 0..c {
                        out.set(orow, base + ch, x.get(irow, ch));
                    }
                }
            }
        }
    }
    out
}

fn patch_scatter<T: Scalar>(
    g: &Matrix<T>,
    ga: &mut Matrix<T>,
    height: usize,
    width: usize,
    stride: usize,
) {
    let c = ga.cols();
    let (oh, ow) = (height / stride, width / stride);
    for py in 0..oh {
        for px in 0..ow {
            let orow = py * ow + px;
            for dy in 0..stride {
                for dx in 0..stride {
                    let irow = (py * stride + dy) * width + px * stride + dx;
                    let base = (dy * stride + dx) * c;
                    for ch in 0..c {
                        ga.set(irow, ch, ga.get(irow, ch) + g.get(orow, base + ch));
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Copy of the node's current value.
    pub fn value(&self) -> Matrix<T> {
        self.tape.value_of(self.id).clone()
    }

    pub fn item(&self) -> T {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_of(self.id).shape()
    }

    fn unary(self, f: impl Fn(&Matrix<T>) -> Matrix<T>, op: Op<T>) -> Self {
        let v = f(&self.tape.value_of(self.id));
        self.tape.push(v, op)
    }

    fn binary(self, other: Self, f: impl Fn(&Matrix<T>, &Matrix<T>) -> Matrix<T>, op: Op<T>) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let v = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            f(&a, &b)
        };
        self.tape.push(v, op)
    }

    pub fn matmul(self, other: Self) -> Self {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    /// Adds a `1 × cols` row to every row of `self`.
    pub fn add_row(self, row: Self) -> Self {
        self.binary(
            row,
            |a, r| {
                assert_eq!(r.rows(), 1);
                assert_eq!(a.cols(), r.cols());
                Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + r.get(0, j))
            },
            Op::AddRow(self.id, row.id),
        )
    }

    pub fn mul_const(self, k: &Matrix<T>) -> Self {
        let kk = k.clone();
        self.unary(move |a| a.zip_map(&kk, |x, y| x * y), Op::MulConst(self.id, k.clone()))
    }

    /// Multiplies every entry by the 1×1 node `s`.
    pub fn mul_scalar_var(self, s: Self) -> Self {
        self.binary(
            s,
            |a, s| {
                let sv = s.item();
                a.scale(sv)
            },
            Op::MulScalarVar(self.id, s.id),
        )
    }

    pub fn scale(self, s: T) -> Self {
        self.unary(|a| a.scale(s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Self {
        self.unary(|a| a.map(|x| x + s), Op::AddScalar(self.id))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(|a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Self {
        self.unary(|a| a.map(|x| x.tanh()), Op::Tanh(self.id))
    }

    pub fn silu(self) -> Self {
        self.unary(|a| a.map(|x| x * sigmoid(x)), Op::Silu(self.id))
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(self) -> Self {
        self.unary(|a| a.map(|x| if x > T::zero() { x } else { T::zero() }), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Self {
        self.unary(|a| a.map(softplus), Op::Softplus(self.id))
    }

    pub fn exp(self) -> Self {
        self.unary(|a| a.map(|x| x.exp()), Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.unary(|a| a.map(|x| x.ln()), Op::Log(self.id))
    }

    /// `x^p` for a constant exponent; intended for `x ≥ 0`.
    pub fn powf(self, p: T) -> Self {
        self.unary(|a| a.map(|x| x.powf(p)), Op::PowConst(self.id, p))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn sum(self) -> Self {
        self.unary(|a| Matrix::scalar(a.sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = T::from_usize(self.shape().0 * self.shape().1).expect("len");
        self.sum().scale(T::one() / n)
    }

    /// Column means, `(1 × cols)`.
    pub fn mean_rows(self) -> Self {
        self.unary(|a| a.mean_rows(), Op::MeanRows(self.id))
    }

    /// Subtracts the column mean from every column flagged in `subtract`;
    /// unflagged columns are copied unchanged.
    pub fn masked_center(self, subtract: &[bool]) -> Self {
        let flags = subtract.to_vec();
        self.unary(
            |a| {
                assert_eq!(a.cols(), flags.len());
                let m = a.mean_rows();
                Matrix::from_fn(a.rows(), a.cols(), |r, c| {
                    if flags[c] {
                        a.get(r, c) - m.get(0, c)
                    } else {
                        a.get(r, c)
                    }
                })
            },
            Op::MaskedCenter(self.id, subtract.to_vec()),
        )
    }

    pub fn concat_cols(self, other: Self) -> Self {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.rows(), b.rows());
                Matrix::from_fn(a.rows(), a.cols() + b.cols(), |r, c| {
                    if c < a.cols() {
                        a.get(r, c)
                    } else {
                        b.get(r, c - a.cols())
                    }
                })
            },
            Op::ConcatCols(self.id, other.id),
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        self.unary(
            |a| {
                assert!(start + len <= a.cols());
                Matrix::from_fn(a.rows(), len, |r, c| a.get(r, start + c))
            },
            Op::SliceCols(self.id, start),
        )
    }

    /// Rearranges an `(height·width) × c` map into non-overlapping
    /// `stride × stride` patches.
    pub fn patchify(self, height: usize, width: usize, stride: usize) -> Self {
        self.unary(
            |a| {
                assert_eq!(a.rows(), height * width);
                patch_gather(a, height, width, stride)
            },
            Op::Patchify {
                input: self.id,
                height,
                width,
                stride,
            },
        )
    }

    pub fn log_softmax_rows(self) -> Self {
        self.unary(
            |a| {
                Matrix::from_fn(a.rows(), a.cols(), |r, c| {
                    let row = a.row(r);
                    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                    let lse = m + row.iter().fold(T::zero(), |s, &x| s + (x - m).exp()).ln();
                    a.get(r, c) - lse
                })
            },
            Op::LogSoftmaxRows(self.id),
        )
    }
}

impl<'t, T: Scalar> ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }
}

impl<'t, T: Scalar> ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }
}

impl<'t, T: Scalar> ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }
}

impl<'t, T: Scalar> ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.scale(-T::one())
    }
}

/// Finite-difference checks for 64-bit tapes.
pub mod gradcheck {
    use super::*;

    /// Maximum relative error between the tape gradient and central
    /// differences of `f` at `x`.
    pub fn max_rel_error(
        x: &Matrix<f64>,
        f: impl for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64> + Copy,
    ) -> f64 {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&tape, xv);
        let grads = tape.backward(y);
        let analytic = grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let eval = |m: &Matrix<f64>| {
            let t = Tape::new();
            let v = t.leaf(m.clone());
            f(&t, v).item()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            worst = worst.max(err);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;

    fn probe(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = probe(3, 4, 1);
        assert!(max_rel_error(&x, |_, v| v.sigmoid().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.tanh().square().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.silu().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.softplus().exp().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.square().add_scalar(1.0).ln().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.sigmoid().powf(2.5).sum()) < 1e-6);
        // probe entries sit well away from the kink
        assert!(max_rel_error(&x, |_, v| v.relu().square().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.log_softmax_rows().slice_cols(1, 2).sum()) < 1e-6);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x = probe(4, 3, 2);
        let w = probe(3, 5, 3);
        assert!(
            max_rel_error(&x, |t, v| v.matmul(t.leaf(w.clone())).tanh().sum()) < 1e-6
        );
        assert!(
            max_rel_error(&w, |t, v| t.leaf(x.clone()).matmul(v).square().mean()) < 1e-6
        );
        assert!(
            max_rel_error(&x, |_, v| v.masked_center(&[true, false, true]).square().sum()) < 1e-6
        );
        assert!(max_rel_error(&x, |_, v| v.mean_rows().square().sum()) < 1e-6);
        assert!(max_rel_error(&x, |_, v| v.concat_cols(v.sigmoid()).square().sum()) < 1e-6);
        let img = probe(16, 3, 4);
        assert!(max_rel_error(&img, |_, v| v.patchify(4, 4, 2).tanh().sum()) < 1e-6);
        let s = probe(1, 1, 5);
        assert!(
            max_rel_error(&s, |t, v| t.leaf(x.clone()).mul_scalar_var(v).square().sum()) < 1e-6
        );
        let bias = probe(1, 3, 6);
        assert!(
            max_rel_error(&bias, |t, v| t.leaf(x.clone()).add_row(v).sigmoid().sum()) < 1e-6
        );
    }

    #[test]
    fn patchify_layout() {
        // 2×2 single-channel image, one 2×2 patch: order (dy, dx).
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = x.patchify(2, 2, 2);
        assert_eq!(p.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.shape(), (1, 4));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Matrix::scalar(2.0));
        let b = tape.leaf(Matrix::scalar(3.0));
        let y = (a * a).sum();
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap().item(), 4.0);
        assert!(g.get(b).is_none());
    }
}
