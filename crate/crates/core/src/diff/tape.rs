//! Recorded computation trace with reverse accumulation.

use std::cell::RefCell;
use std::sync::Arc;

use super::graph::{kernels, Bound, Graph};
use super::mat::Mat;
use super::params::{Layout, ParamVector};
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementary unary ops. Only the smooth ones may be recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Softplus,
    Sigmoid,
    Log,
    Square,
    Abs,
    Relu,
}

impl UnaryOp {
    pub fn is_smooth(self) -> bool {
        !matches!(self, UnaryOp::Abs | UnaryOp::Relu)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    RepeatCols(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Log(usize),
    Square(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

/// A computation trace. Every op applied through the [`Graph`] interface is
/// appended; [`Tape::backward`] then walks the trace in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints of every node with respect to one scalar output.
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of the leaf `v`; zeros when the output does not depend on it.
    /// Interior adjoints are released during the sweep.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }

    /// Gathers the adjoints of bound parameter leaves into a flat vector
    /// sharing the parameters' layout.
    pub fn params(&self, bound: &Bound<Var>) -> ParamVector {
        let layout: Arc<Layout> = bound.layout.clone();
        let mut out = ParamVector::zeros(layout);
        for (i, v) in bound.vars.iter().enumerate() {
            if let Some(m) = &self.adjoints[v.0] {
                out.slice_mut(i).copy_from_slice(m.data());
            }
        }
        out
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

    /// A differentiable leaf (parameters, or inputs such as trajectory states).
    pub fn leaf(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Records an elementary unary op, rejecting non-smooth ones.
    pub fn unary(&self, op: UnaryOp, a: &Var) -> Result<Var, DiffError> {
        Ok(match op {
            UnaryOp::Tanh => self.tanh(a),
            UnaryOp::Softplus => self.softplus(a),
            UnaryOp::Sigmoid => self.sigmoid(a),
            UnaryOp::Log => self.log(a),
            UnaryOp::Square => self.square(a),
            UnaryOp::Abs | UnaryOp::Relu => return Err(DiffError::NonDifferentiable(format!("{op:?}"))),
        })
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn unary_map(&self, a: &Var, f: impl Fn(&Mat) -> Mat, op: Op) -> Var {
        let v = f(&self.nodes.borrow()[a.0].value);
        self.push(v, op)
    }

    fn binary_map(&self, a: &Var, b: &Var, f: impl Fn(&Mat, &Mat) -> Mat, op: Op) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(v, op)
    }

    /// Reverse accumulation from a `1 x 1` output.
    pub fn backward(&self, output: &Var) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(DiffError::NonScalarOutput { rows: out_shape.0, cols: out_shape.1 });
        }
        let mut adj: Vec<Option<Mat>> = vec![None; nodes.len()];
        adj[output.0] = Some(Mat::scalar(1.0));

        fn acc(adj: &mut [Option<Mat>], i: usize, g: Mat) {
            match &mut adj[i] {
                Some(m) => m.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut adj, *a, g.matmul_t(val(*b)));
                    acc(&mut adj, *b, val(*a).t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut adj, *a, g.zip(val(*b), |x, y| x * y));
                    acc(&mut adj, *b, g.zip(val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    acc(&mut adj, *a, g.zip(bv, |x, y| x / y));
                    let gb = g.zip(&node.value, |x, q| x * q).zip(bv, |x, y| -x / y);
                    acc(&mut adj, *b, gb);
                }
                Op::AddCol(a, c) => {
                    acc(&mut adj, *c, kernels::sum_cols(&g));
                    acc(&mut adj, *a, g.clone());
                }
                Op::MulCol(a, c) => {
                    let gc = kernels::sum_cols(&g.zip(val(*a), |x, y| x * y));
                    acc(&mut adj, *a, kernels::mul_col(&g, val(*c)));
                    acc(&mut adj, *c, gc);
                }
                Op::RepeatCols(a, k) => acc(&mut adj, *a, kernels::fold_cols(&g, *k)),
                Op::Scale(a, s) => acc(&mut adj, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut adj, *a, g.clone()),
                Op::Tanh(a) => acc(&mut adj, *a, g.zip(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Softplus(a) => acc(&mut adj, *a, g.zip(val(*a), |x, z| x * kernels::sigmoid(z))),
                Op::Sigmoid(a) => acc(&mut adj, *a, g.zip(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Log(a) => acc(&mut adj, *a, g.zip(val(*a), |x, z| x / z)),
                Op::Square(a) => acc(&mut adj, *a, g.zip(val(*a), |x, z| 2.0 * x * z)),
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut adj, *a, Mat::filled(r, c, g.as_scalar()));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut m = Mat::zeros(r, c);
                    for row in 0..r {
                        m.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                    }
                    acc(&mut adj, *a, m);
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    let mut m = Mat::zeros(r, c);
                    for row in 0..r {
                        let v = g.get(row, 0);
                        m.data_mut()[row * c..(row + 1) * c].fill(v);
                    }
                    acc(&mut adj, *a, m);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut adj, *a, Mat::from_vec(r, c, g.into_data()));
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        acc(&mut adj, p, kernels::slice_rows(&g, start, rows));
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut m = Mat::zeros(r, c);
                    let len = g.rows();
                    m.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    acc(&mut adj, *a, m);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }
}

impl Graph for Tape {
    type V = Var;

    fn constant(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    fn bind(&self, params: &ParamVector) -> Bound<Var> {
        let vars = (0..params.layout().slices().len()).map(|i| self.leaf(params.slice_mat(i))).collect();
        Bound { vars, layout: params.layout().clone() }
    }

    fn value(&self, v: &Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn shape(&self, v: &Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.binary_map(a, b, |x, y| x.matmul(y), Op::MatMul(a.0, b.0))
    }
    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary_map(a, b, |x, y| x.zip(y, |p, q| p + q), Op::Add(a.0, b.0))
    }
    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binary_map(a, b, |x, y| x.zip(y, |p, q| p - q), Op::Sub(a.0, b.0))
    }
    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary_map(a, b, |x, y| x.zip(y, |p, q| p * q), Op::Mul(a.0, b.0))
    }
    fn div(&self, a: &Var, b: &Var) -> Var {
        self.binary_map(a, b, |x, y| x.zip(y, |p, q| p / q), Op::Div(a.0, b.0))
    }
    fn add_col(&self, a: &Var, col: &Var) -> Var {
        self.binary_map(a, col, kernels::add_col, Op::AddCol(a.0, col.0))
    }
    fn mul_col(&self, a: &Var, col: &Var) -> Var {
        self.binary_map(a, col, kernels::mul_col, Op::MulCol(a.0, col.0))
    }
    fn repeat_cols(&self, a: &Var, k: usize) -> Var {
        self.unary_map(a, |x| kernels::repeat_cols(x, k), Op::RepeatCols(a.0, k))
    }
    fn scale(&self, a: &Var, s: f64) -> Var {
        self.unary_map(a, |x| x.map(|v| v * s), Op::Scale(a.0, s))
    }
    fn add_scalar(&self, a: &Var, s: f64) -> Var {
        self.unary_map(a, |x| x.map(|v| v + s), Op::AddScalar(a.0))
    }
    fn tanh(&self, a: &Var) -> Var {
        self.unary_map(a, |x| x.map(f64::tanh), Op::Tanh(a.0))
    }
    fn softplus(&self, a: &Var) -> Var {
        self.unary_map(a, |x| x.map(kernels::softplus), Op::Softplus(a.0))
    }
    fn sigmoid(&self, a: &Var) -> Var {
        self.unary_map(a, |x| x.map(kernels::sigmoid), Op::Sigmoid(a.0))
    }
    fn log(&self, a: &Var) -> Var {
        self.unary_map(a, |x| x.map(f64::ln), Op::Log(a.0))
    }
    fn square(&self, a: &Var) -> Var {
        self.unary_map(a, |x| x.map(|v| v * v), Op::Square(a.0))
    }
    fn sum_all(&self, a: &Var) -> Var {
        self.unary_map(a, |x| Mat::scalar(x.sum()), Op::SumAll(a.0))
    }
    fn sum_rows(&self, a: &Var) -> Var {
        self.unary_map(a, kernels::sum_rows, Op::SumRows(a.0))
    }
    fn sum_cols(&self, a: &Var) -> Var {
        self.unary_map(a, kernels::sum_cols, Op::SumCols(a.0))
    }
    fn reshape(&self, a: &Var, rows: usize, cols: usize) -> Var {
        self.unary_map(a, |x| Mat::from_vec(rows, cols, x.data().to_vec()), Op::Reshape(a.0))
    }
    fn transpose(&self, a: &Var) -> Var {
        self.unary_map(a, Mat::transpose, Op::Transpose(a.0))
    }
    fn concat_rows(&self, parts: &[&Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Mat> = parts.iter().map(|p| &nodes[p.0].value).collect();
            kernels::concat_rows(&mats)
        };
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }
    fn slice_rows(&self, a: &Var, start: usize, len: usize) -> Var {
        self.unary_map(a, |x| kernels::slice_rows(x, start, len), Op::SliceRows(a.0, start))
    }
}
