//! Forward compute kernels shared by taped and detached execution paths.

use super::{ComplexTensor, SELU_ALPHA, SELU_LAMBDA};
use crate::error::{Error, Result};

/// `out += sign * a(m x k) @ b(k x n)`, row-major, ikj loop order.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, sign: f64, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = sign * a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out(m x p) += sign * a(m x n) @ b(p x n)ᵀ`.
pub(crate) fn mm_acc_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, sign: f64, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for c in 0..n {
                s += arow[c] * brow[c];
            }
            orow[j] += sign * s;
        }
    }
}

/// `out(k x n) += sign * a(m x k)ᵀ @ b(m x n)`.
pub(crate) fn mm_acc_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, sign: f64, out: &mut [f64]) {
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let av = sign * a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn matmul(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("matmul", format!("need 2-D operands, got {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = ComplexTensor::zeros(&[m, n]);
    mm_acc(a.re(), b.re(), m, k, n, 1.0, &mut out.re);
    mm_acc(a.im(), b.im(), m, k, n, -1.0, &mut out.re);
    mm_acc(a.re(), b.im(), m, k, n, 1.0, &mut out.im);
    mm_acc(a.im(), b.re(), m, k, n, 1.0, &mut out.im);
    Ok(out)
}

pub(crate) fn hermitian(a: &ComplexTensor) -> Result<ComplexTensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("hermitian", format!("need 2-D operand, got {:?}", a.shape())));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = ComplexTensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.re[j * m + i] = a.re()[i * n + j];
            out.im[j * m + i] = -a.im()[i * n + j];
        }
    }
    Ok(out)
}

fn same_shape(op: &'static str, a: &ComplexTensor, b: &ComplexTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn add(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    same_shape("add", a, b)?;
    let mut out = a.detach();
    for i in 0..out.numel() {
        out.re[i] += b.re()[i];
        out.im[i] += b.im()[i];
    }
    Ok(out)
}

pub(crate) fn sub(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    same_shape("sub", a, b)?;
    let mut out = a.detach();
    for i in 0..out.numel() {
        out.re[i] -= b.re()[i];
        out.im[i] -= b.im()[i];
    }
    Ok(out)
}

pub(crate) fn scale_const(a: &ComplexTensor, c: f64) -> ComplexTensor {
    let mut out = a.detach();
    for v in out.re.iter_mut().chain(out.im.iter_mut()) {
        *v *= c;
    }
    out
}

pub(crate) fn add_const_re(a: &ComplexTensor, c: f64) -> ComplexTensor {
    let mut out = a.detach();
    for v in out.re.iter_mut() {
        *v += c;
    }
    out
}

pub(crate) fn mul_scalar(a: &ComplexTensor, s: f64) -> ComplexTensor {
    scale_const(a, s)
}

pub(crate) fn scalar_div_const(c: f64, a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = c / a.re()[i];
    }
    out
}

pub(crate) fn div_elem(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    same_shape("div_elem", a, b)?;
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = a.re()[i] / b.re()[i];
    }
    Ok(out)
}

pub(crate) fn modulus_sq(a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = a.re()[i] * a.re()[i] + a.im()[i] * a.im()[i];
    }
    out
}

pub(crate) fn modulus(a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = a.re()[i].hypot(a.im()[i]);
    }
    out
}

pub(crate) fn sum_all(a: &ComplexTensor) -> ComplexTensor {
    ComplexTensor::scalar(a.re().iter().sum(), a.im().iter().sum())
}

pub(crate) fn weighted_sum_re(a: &ComplexTensor, w: &[f64]) -> ComplexTensor {
    let re = a.re().iter().zip(w).map(|(x, w)| x * w).sum();
    let im = a.im().iter().zip(w).map(|(x, w)| x * w).sum();
    ComplexTensor::scalar(re, im)
}

pub(crate) fn sqrt_re(a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = a.re()[i].sqrt();
    }
    out
}

pub(crate) fn log2_one_plus(a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = (1.0 + a.re()[i]).log2();
    }
    out
}

pub(crate) fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

pub(crate) fn selu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub(crate) fn cselu(a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = selu(a.re()[i]);
        out.im[i] = selu(a.im()[i]);
    }
    out
}

pub(crate) fn leaky_relu_c(a: &ComplexTensor, slope: f64) -> ComplexTensor {
    let f = |x: f64| if x > 0.0 { x } else { slope * x };
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = f(a.re()[i]);
        out.im[i] = f(a.im()[i]);
    }
    out
}

pub(crate) fn relu_re(a: &ComplexTensor) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(a.shape());
    for i in 0..out.numel() {
        out.re[i] = a.re()[i].max(0.0);
    }
    out
}

/// `[K, F] -> [K, K, F]` with `out[k, j, :] = a[k, :] + a[j, :]`.
pub(crate) fn pairwise_row_sum(a: &ComplexTensor) -> Result<ComplexTensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("pairwise_row_sum", format!("need 2-D, got {:?}", a.shape())));
    }
    let (k, f) = (a.rows(), a.cols());
    let mut out = ComplexTensor::zeros(&[k, k, f]);
    for r in 0..k {
        for j in 0..k {
            let o = (r * k + j) * f;
            for c in 0..f {
                out.re[o + c] = a.re()[r * f + c] + a.re()[j * f + c];
                out.im[o + c] = a.im()[r * f + c] + a.im()[j * f + c];
            }
        }
    }
    Ok(out)
}

/// `[K, K, F] x [F] -> [K, K]` via `out[k, j] = Σ_f a[k, j, f] · v[f]`
/// (plain product, no conjugation).
pub(crate) fn contract_vec(a: &ComplexTensor, v: &ComplexTensor) -> Result<ComplexTensor> {
    if a.shape().len() != 3 {
        return Err(Error::shape("contract_vec", format!("need 3-D, got {:?}", a.shape())));
    }
    let (k1, k2, f) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if v.numel() != f {
        return Err(Error::shape("contract_vec", format!("vector len {} vs feature dim {}", v.numel(), f)));
    }
    let mut out = ComplexTensor::zeros(&[k1, k2]);
    for k in 0..k1 {
        for j in 0..k2 {
            let o = (k * k2 + j) * f;
            let (mut sr, mut si) = (0.0, 0.0);
            for c in 0..f {
                let (ar, ai) = (a.re()[o + c], a.im()[o + c]);
                let (vr, vi) = (v.re()[c], v.im()[c]);
                sr += ar * vr - ai * vi;
                si += ar * vi + ai * vr;
            }
            out.re[k * k2 + j] = sr;
            out.im[k * k2 + j] = si;
        }
    }
    Ok(out)
}

/// Row-wise softmax over off-diagonal entries; the diagonal is forced to
/// zero. Requires at least two rows (a node needs a neighbor).
pub(crate) fn neighbor_softmax(s: &ComplexTensor) -> Result<ComplexTensor> {
    let k = s.rows();
    if s.shape().len() != 2 || s.cols() != k {
        return Err(Error::shape("neighbor_softmax", format!("need square 2-D, got {:?}", s.shape())));
    }
    if k < 2 {
        return Err(Error::contract("neighbor_softmax: a single node has an empty neighborhood".to_string()));
    }
    let mut out = ComplexTensor::zeros(&[k, k]);
    for r in 0..k {
        let row = &s.re()[r * k..(r + 1) * k];
        let mut m = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != r {
                m = m.max(v);
            }
        }
        let mut z = 0.0;
        for j in 0..k {
            if j != r {
                let e = (row[j] - m).exp();
                out.re[r * k + j] = e;
                z += e;
            }
        }
        for j in 0..k {
            if j != r {
                out.re[r * k + j] /= z;
            }
        }
    }
    Ok(out)
}

/// Real matrix times complex matrix: `alpha (K x K, real) @ x (K x F)`.
pub(crate) fn real_matmul_complex(alpha: &ComplexTensor, x: &ComplexTensor) -> Result<ComplexTensor> {
    if alpha.shape().len() != 2 || x.shape().len() != 2 || alpha.cols() != x.rows() {
        return Err(Error::shape(
            "real_matmul_complex",
            format!("{:?} @ {:?}", alpha.shape(), x.shape()),
        ));
    }
    let (m, k, n) = (alpha.rows(), alpha.cols(), x.cols());
    let mut out = ComplexTensor::zeros(&[m, n]);
    mm_acc(alpha.re(), x.re(), m, k, n, 1.0, &mut out.re);
    mm_acc(alpha.re(), x.im(), m, k, n, 1.0, &mut out.im);
    Ok(out)
}

pub(crate) fn concat_cols(parts: &[&ComplexTensor]) -> Result<ComplexTensor> {
    let rows = parts[0].rows();
    for p in parts {
        if p.shape().len() != 2 || p.rows() != rows {
            return Err(Error::shape("concat_cols", format!("row mismatch {:?}", p.shape())));
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = ComplexTensor::zeros(&[rows, total]);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            let c = p.cols();
            out.re[r * total + off..r * total + off + c].copy_from_slice(&p.re()[r * c..(r + 1) * c]);
            out.im[r * total + off..r * total + off + c].copy_from_slice(&p.im()[r * c..(r + 1) * c]);
            off += c;
        }
    }
    Ok(out)
}

pub(crate) fn concat_rows(parts: &[&ComplexTensor]) -> Result<ComplexTensor> {
    let cols = parts[0].cols();
    for p in parts {
        if p.shape().len() != 2 || p.cols() != cols {
            return Err(Error::shape("concat_rows", format!("col mismatch {:?}", p.shape())));
        }
    }
    let total: usize = parts.iter().map(|p| p.rows()).sum();
    let mut out = ComplexTensor::zeros(&[total, cols]);
    let mut off = 0;
    for p in parts {
        let n = p.numel();
        out.re[off..off + n].copy_from_slice(p.re());
        out.im[off..off + n].copy_from_slice(p.im());
        off += n;
    }
    Ok(out)
}

pub(crate) fn slice_rows(a: &ComplexTensor, r0: usize, r1: usize) -> Result<ComplexTensor> {
    if a.shape().len() != 2 || r1 > a.rows() || r0 >= r1 {
        return Err(Error::shape("slice_rows", format!("[{r0}, {r1}) of {:?}", a.shape())));
    }
    let c = a.cols();
    ComplexTensor::from_parts(
        vec![r1 - r0, c],
        a.re()[r0 * c..r1 * c].to_vec(),
        a.im()[r0 * c..r1 * c].to_vec(),
    )
}

pub(crate) fn diag_of(a: &ComplexTensor) -> Result<ComplexTensor> {
    let k = a.rows();
    if a.shape().len() != 2 || a.cols() != k {
        return Err(Error::shape("diag_of", format!("need square, got {:?}", a.shape())));
    }
    let mut out = ComplexTensor::zeros(&[k]);
    for i in 0..k {
        out.re[i] = a.re()[i * k + i];
        out.im[i] = a.im()[i * k + i];
    }
    Ok(out)
}

/// Column sums of a 2-D tensor: `out[j] = Σ_i a[i, j]`.
pub(crate) fn col_sums(a: &ComplexTensor) -> Result<ComplexTensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("col_sums", format!("need 2-D, got {:?}", a.shape())));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = ComplexTensor::zeros(&[n]);
    for i in 0..m {
        for j in 0..n {
            out.re[j] += a.re()[i * n + j];
            out.im[j] += a.im()[i * n + j];
        }
    }
    Ok(out)
}

/// Per-part, per-channel batch normalization over the row axis.
pub(crate) struct BnForward {
    pub out: ComplexTensor,
    pub xhat_re: Vec<f64>,
    pub xhat_im: Vec<f64>,
    pub inv_std_re: Vec<f64>,
    pub inv_std_im: Vec<f64>,
    pub mean_re: Vec<f64>,
    pub mean_im: Vec<f64>,
    pub var_re: Vec<f64>,
    pub var_im: Vec<f64>,
}

fn bn_part(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x[r * cols + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    for r in 0..rows {
        for c in 0..cols {
            let d = x[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            xhat[r * cols + c] = (x[r * cols + c] - mean[c]) * inv_std[c];
        }
    }
    (xhat, inv_std, mean, var)
}

/// Batch statistics path (training). `gamma`/`beta` are `[1, G]` complex
/// tensors whose re/im parts hold the per-part affine parameters.
pub(crate) fn batchnorm_train(
    x: &ComplexTensor,
    gamma: &ComplexTensor,
    beta: &ComplexTensor,
    eps: f64,
) -> Result<BnForward> {
    let (rows, cols) = (x.rows(), x.cols());
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(Error::shape("batchnorm", format!("gamma/beta len vs {cols} channels")));
    }
    let (xhat_re, inv_std_re, mean_re, var_re) = bn_part(x.re(), rows, cols, eps);
    let (xhat_im, inv_std_im, mean_im, var_im) = bn_part(x.im(), rows, cols, eps);
    let mut out = ComplexTensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            out.re[r * cols + c] = gamma.re()[c] * xhat_re[r * cols + c] + beta.re()[c];
            out.im[r * cols + c] = gamma.im()[c] * xhat_im[r * cols + c] + beta.im()[c];
        }
    }
    Ok(BnForward { out, xhat_re, xhat_im, inv_std_re, inv_std_im, mean_re, mean_im, var_re, var_im })
}

/// Running statistics path (inference).
pub(crate) fn batchnorm_eval(
    x: &ComplexTensor,
    gamma: &ComplexTensor,
    beta: &ComplexTensor,
    mean: (&[f64], &[f64]),
    var: (&[f64], &[f64]),
    eps: f64,
) -> Result<ComplexTensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(Error::shape("batchnorm", format!("gamma/beta len vs {cols} channels")));
    }
    let mut out = ComplexTensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            let sr = 1.0 / (var.0[c] + eps).sqrt();
            let si = 1.0 / (var.1[c] + eps).sqrt();
            out.re[r * cols + c] = gamma.re()[c] * (x.re()[r * cols + c] - mean.0[c]) * sr + beta.re()[c];
            out.im[r * cols + c] = gamma.im()[c] * (x.im()[r * cols + c] - mean.1[c]) * si + beta.im()[c];
        }
    }
    Ok(out)
}
