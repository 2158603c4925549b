//! A deliberately small reverse-mode automatic differentiation engine.
//!
//! Values live in an append-only [`Graph`]. Every operation records its
//! inputs and whatever forward intermediates its backward rule needs, and
//! [`Graph::backward`] replays the records in exact reverse insertion order.
//! Only the primitives the recommender models need are provided: dense
//! matrix products, a handful of elementwise maps, masked row softmax,
//! row gathers/scatters and reductions.
//!
//! The engine is generic over [`Real`], which is implemented for `f32`
//! (training) and `f64` (gradient verification). One graph never mixes the
//! two.

mod check;
mod graph;
mod params;

pub use check::{grad_check, numeric_gradient};
pub use graph::{Graph, Var};
pub use params::{Bindings, Param, ParamStore};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision of an engine instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Scalar type the engine computes in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    /// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is
    /// `k x n`, all row-major. With `a_t` set, `a` is stored as its `k x m`
    /// transpose (likewise `b_t` / `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

macro_rules! impl_real {
    ($t:ty, $p:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $p;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_t, b_t);
                // SAFETY: the assertions above guarantee every strided access
                // stays within the three slices, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, Precision::F32, matrixmultiply::sgemm);
impl_real!(f64, Precision::F64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` values, converting to the engine precision.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::matrix(
            rows,
            cols,
            data.iter().map(|&x| F::from_f64_lossy(x)).collect(),
        )
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<F>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a matrix; vectors and scalars are viewed as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts to another precision.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64_lossy(x.as_f64()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid<F: Real>(x: F) -> F {
    x.min(F::zero()) - (F::one() + (-x.abs()).exp()).ln()
}
