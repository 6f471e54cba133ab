//! The op vocabulary shared by plain evaluation and the recording tape.
//!
//! Model code is written once against [`Graph`]. Running it on [`Eval`]
//! computes values only; running it on [`Tape`](super::Tape) records every
//! op so that reverse accumulation can later produce parameter gradients.
//! Forward-mode tangents are ordinary values in this vocabulary, so the tape
//! also differentiates through input derivatives.

use std::rc::Rc;

use super::mat::Mat;
use super::params::{Layout, ParamVector};
use std::sync::Arc;

/// Parameter slices bound into a graph, one value per layout slice.
pub struct Bound<V> {
    pub vars: Vec<V>,
    pub layout: Arc<Layout>,
}

impl<V> Bound<V> {
    pub fn get(&self, slice: usize) -> &V {
        &self.vars[slice]
    }
}

pub trait Graph {
    type V: Clone;

    fn constant(&self, m: Mat) -> Self::V;
    fn bind(&self, params: &ParamVector) -> Bound<Self::V>;
    /// Current value of a node (copied out).
    fn value(&self, v: &Self::V) -> Mat;
    fn shape(&self, v: &Self::V) -> (usize, usize);

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `a (r x c) + col (r x 1)` broadcast over columns.
    fn add_col(&self, a: &Self::V, col: &Self::V) -> Self::V;
    /// `a (r x c) * col (r x 1)` broadcast over columns.
    fn mul_col(&self, a: &Self::V, col: &Self::V) -> Self::V;
    /// `(r x c) -> (r x c*k)`, each column repeated `k` times in place.
    fn repeat_cols(&self, a: &Self::V, k: usize) -> Self::V;
    fn scale(&self, a: &Self::V, s: f64) -> Self::V;
    fn add_scalar(&self, a: &Self::V, s: f64) -> Self::V;
    fn tanh(&self, a: &Self::V) -> Self::V;
    fn softplus(&self, a: &Self::V) -> Self::V;
    fn sigmoid(&self, a: &Self::V) -> Self::V;
    fn log(&self, a: &Self::V) -> Self::V;
    fn square(&self, a: &Self::V) -> Self::V;
    fn sum_all(&self, a: &Self::V) -> Self::V;
    /// Column sums, `(r x c) -> (1 x c)`.
    fn sum_rows(&self, a: &Self::V) -> Self::V;
    /// Row sums, `(r x c) -> (r x 1)`.
    fn sum_cols(&self, a: &Self::V) -> Self::V;
    fn reshape(&self, a: &Self::V, rows: usize, cols: usize) -> Self::V;
    fn transpose(&self, a: &Self::V) -> Self::V;
    fn concat_rows(&self, parts: &[&Self::V]) -> Self::V;
    fn slice_rows(&self, a: &Self::V, start: usize, len: usize) -> Self::V;

    fn neg(&self, a: &Self::V) -> Self::V {
        self.scale(a, -1.0)
    }

    fn one_minus_square(&self, a: &Self::V) -> Self::V {
        let sq = self.square(a);
        self.add_scalar(&self.neg(&sq), 1.0)
    }

    /// Per-sample directional derivatives laid out as `(1 x b*k)` turned
    /// into a `(k x b)` matrix whose column `j` holds sample `j`'s gradient.
    fn directions_to_rows(&self, a: &Self::V, batch: usize, k: usize) -> Self::V {
        let r = self.reshape(a, batch, k);
        self.transpose(&r)
    }
}

/// Value-only execution.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

pub(crate) mod kernels {
    use super::Mat;

    pub fn add_col(a: &Mat, col: &Mat) -> Mat {
        assert_eq!(col.shape(), (a.rows(), 1), "add_col shape mismatch");
        let mut out = a.clone();
        let c = a.cols();
        for r in 0..a.rows() {
            let v = col.get(r, 0);
            for x in &mut out.data_mut()[r * c..(r + 1) * c] {
                *x += v;
            }
        }
        out
    }

    pub fn mul_col(a: &Mat, col: &Mat) -> Mat {
        assert_eq!(col.shape(), (a.rows(), 1), "mul_col shape mismatch");
        let mut out = a.clone();
        let c = a.cols();
        for r in 0..a.rows() {
            let v = col.get(r, 0);
            for x in &mut out.data_mut()[r * c..(r + 1) * c] {
                *x *= v;
            }
        }
        out
    }

    pub fn repeat_cols(a: &Mat, k: usize) -> Mat {
        let (rows, cols) = a.shape();
        let mut out = Mat::zeros(rows, cols * k);
        for r in 0..rows {
            for c in 0..cols {
                let v = a.get(r, c);
                for j in 0..k {
                    out.set(r, c * k + j, v);
                }
            }
        }
        out
    }

    /// Adjoint of `repeat_cols`.
    pub fn fold_cols(g: &Mat, k: usize) -> Mat {
        let (rows, wide) = g.shape();
        let cols = wide / k;
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                for j in 0..k {
                    s += g.get(r, c * k + j);
                }
                out.set(r, c, s);
            }
        }
        out
    }

    pub fn softplus(x: f64) -> f64 {
        if x > 30.0 {
            x + (-x).exp()
        } else if x < -30.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn sum_rows(a: &Mat) -> Mat {
        let mut out = Mat::zeros(1, a.cols());
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                out.data_mut()[c] += a.get(r, c);
            }
        }
        out
    }

    pub fn sum_cols(a: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), 1);
        for r in 0..a.rows() {
            out.data_mut()[r] = a.data()[r * a.cols()..(r + 1) * a.cols()].iter().sum();
        }
        out
    }

    pub fn concat_rows(parts: &[&Mat]) -> Mat {
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(p.data());
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn slice_rows(a: &Mat, start: usize, len: usize) -> Mat {
        assert!(start + len <= a.rows(), "slice_rows out of range");
        let c = a.cols();
        Mat::from_vec(len, c, a.data()[start * c..(start + len) * c].to_vec())
    }
}

impl Graph for Eval {
    type V = Rc<Mat>;

    fn constant(&self, m: Mat) -> Self::V {
        Rc::new(m)
    }

    fn bind(&self, params: &ParamVector) -> Bound<Self::V> {
        let vars = (0..params.layout().slices().len()).map(|i| Rc::new(params.slice_mat(i))).collect();
        Bound { vars, layout: params.layout().clone() }
    }

    fn value(&self, v: &Self::V) -> Mat {
        (**v).clone()
    }

    fn shape(&self, v: &Self::V) -> (usize, usize) {
        v.shape()
    }

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.matmul(b))
    }
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |x, y| x + y))
    }
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |x, y| x - y))
    }
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |x, y| x * y))
    }
    fn div(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.zip(b, |x, y| x / y))
    }
    fn add_col(&self, a: &Self::V, col: &Self::V) -> Self::V {
        Rc::new(kernels::add_col(a, col))
    }
    fn mul_col(&self, a: &Self::V, col: &Self::V) -> Self::V {
        Rc::new(kernels::mul_col(a, col))
    }
    fn repeat_cols(&self, a: &Self::V, k: usize) -> Self::V {
        Rc::new(kernels::repeat_cols(a, k))
    }
    fn scale(&self, a: &Self::V, s: f64) -> Self::V {
        Rc::new(a.map(|x| x * s))
    }
    fn add_scalar(&self, a: &Self::V, s: f64) -> Self::V {
        Rc::new(a.map(|x| x + s))
    }
    fn tanh(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(f64::tanh))
    }
    fn softplus(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(kernels::softplus))
    }
    fn sigmoid(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(kernels::sigmoid))
    }
    fn log(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(f64::ln))
    }
    fn square(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(|x| x * x))
    }
    fn sum_all(&self, a: &Self::V) -> Self::V {
        Rc::new(Mat::scalar(a.sum()))
    }
    fn sum_rows(&self, a: &Self::V) -> Self::V {
        Rc::new(kernels::sum_rows(a))
    }
    fn sum_cols(&self, a: &Self::V) -> Self::V {
        Rc::new(kernels::sum_cols(a))
    }
    fn reshape(&self, a: &Self::V, rows: usize, cols: usize) -> Self::V {
        Rc::new(Mat::from_vec(rows, cols, a.data().to_vec()))
    }
    fn transpose(&self, a: &Self::V) -> Self::V {
        Rc::new(a.transpose())
    }
    fn concat_rows(&self, parts: &[&Self::V]) -> Self::V {
        let mats: Vec<&Mat> = parts.iter().map(|p| &***p).collect();
        Rc::new(kernels::concat_rows(&mats))
    }
    fn slice_rows(&self, a: &Self::V, start: usize, len: usize) -> Self::V {
        Rc::new(kernels::slice_rows(a, start, len))
    }
}
