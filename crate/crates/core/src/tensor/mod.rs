//! Dense complex tensors with reverse-mode differentiation.
//!
//! A [`ComplexTensor`] stores real and imaginary parts as separate flat
//! `f64` arrays in row-major order. Operations live on a [`Tape`]: when a
//! tape is recording and at least one operand is attached, the result is
//! recorded so a later [`Tape::backward`] pass can accumulate adjoints.
//!
//! Gradient convention: a scalar real loss is differentiated treating the
//! real and imaginary parts of every parameter as independent real
//! variables. Packing the two partials as `∂L/∂re + i·∂L/∂im` (twice the
//! conjugate Wirtinger derivative) gives the usual adjoint algebra, e.g.
//! for `C = A·B` the adjoints are `Ā += C̄·Bᴴ` and `B̄ += Aᴴ·C̄`, and a
//! gradient-descent step is plain complex subtraction.

mod check;
mod kernels;
mod tape;

pub use check::{finite_diff_check, FdReport};
pub use tape::{BnBatchStats, Gradients, NodeId, Tape};

use crate::error::{Error, Result};

/// SELU scale constant.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU alpha constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Dense complex tensor; `re` and `im` are row-major flat arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
    /// `(tape id, node id)` when attached to a live tape.
    node: Option<(u64, NodeId)>,
}

impl ComplexTensor {
    pub fn from_parts(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::shape(
                "from_parts",
                format!("shape {:?} wants {} entries, got re {} / im {}", shape, n, re.len(), im.len()),
            ));
        }
        Ok(ComplexTensor { shape, re, im, node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        ComplexTensor { shape: shape.to_vec(), re: vec![0.0; n], im: vec![0.0; n], node: None }
    }

    /// Real-valued tensor (imaginary part zero).
    pub fn from_re(shape: Vec<usize>, re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::from_parts(shape, re, im)
    }

    pub fn scalar(re: f64, im: f64) -> Self {
        ComplexTensor { shape: vec![1], re: vec![re], im: vec![im], node: None }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.re[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.im
    }

    /// Number of rows / columns of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        ComplexTensor { shape: self.shape.clone(), re: self.re.clone(), im: self.im.clone(), node: None }
    }

    pub(crate) fn node(&self) -> Option<(u64, NodeId)> {
        self.node
    }

    pub(crate) fn with_node(mut self, tape_id: u64, node: NodeId) -> Self {
        self.node = Some((tape_id, node));
        self
    }

    /// Entry `(i, j)` of a 2-D tensor as `(re, im)`.
    pub fn at2(&self, i: usize, j: usize) -> (f64, f64) {
        let idx = i * self.cols() + j;
        (self.re[idx], self.im[idx])
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|v| v.is_finite())
    }

    /// Max elementwise absolute difference over both parts.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        let mut m: f64 = 0.0;
        for i in 0..self.numel() {
            m = m.max((self.re[i] - other.re[i]).abs());
            m = m.max((self.im[i] - other.im[i]).abs());
        }
        m
    }

    /// Frobenius norm (detached evaluation).
    pub fn fro_norm(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            .sqrt()
    }

    /// Permute the rows of a 2-D tensor: row `i` of the result is row
    /// `perm[i]` of the input.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(perm.len(), self.rows());
        let c = self.cols();
        let mut out = Self::zeros(&self.shape);
        for (i, &p) in perm.iter().enumerate() {
            out.re[i * c..(i + 1) * c].copy_from_slice(&self.re[p * c..(p + 1) * c]);
            out.im[i * c..(i + 1) * c].copy_from_slice(&self.im[p * c..(p + 1) * c]);
        }
        out
    }
}
