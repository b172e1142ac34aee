//! Reverse-mode differentiation tape.
//!
//! Nodes are recorded in creation order; [`Tape::backward`] traverses them
//! in strict reverse order, accumulating real-part and imaginary-part
//! adjoints per node. A tape lives for one forward/backward pass and is
//! confined to one worker.

use super::kernels;
use super::ComplexTensor;
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

pub type NodeId = usize;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Kink half-width used when collecting signatures for the modulus
/// operation; matches the gradient-check exclusion zone.
const MODULUS_KINK_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Hermitian { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    ScaleConst { a: NodeId, c: f64 },
    AddConstRe { a: NodeId },
    MulScalar { a: NodeId, s: NodeId },
    ScalarDivConst { a: NodeId, c: f64 },
    DivElem { a: NodeId, b: NodeId },
    ModulusSq { a: NodeId },
    Modulus { a: NodeId },
    SumAll { a: NodeId },
    WeightedSumRe { a: NodeId, w: Vec<f64> },
    SqrtRe { a: NodeId },
    Log2OnePlus { a: NodeId },
    CSelu { a: NodeId },
    LeakyReluC { a: NodeId, slope: f64 },
    ReluRe { a: NodeId },
    PairwiseRowSum { a: NodeId },
    ContractVec { a: NodeId, v: NodeId },
    NeighborSoftmax { s: NodeId },
    RealMatmulComplex { alpha: NodeId, x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, r0: usize },
    Reshape { a: NodeId },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, saved: Box<BnSaved> },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean_re: Vec<f64>,
        mean_im: Vec<f64>,
        inv_std_re: Vec<f64>,
        inv_std_im: Vec<f64>,
    },
    DiagOf { a: NodeId },
    ColSums { a: NodeId, rows: usize },
}

#[derive(Debug)]
struct BnSaved {
    xhat_re: Vec<f64>,
    xhat_im: Vec<f64>,
    inv_std_re: Vec<f64>,
    inv_std_im: Vec<f64>,
}

struct Node {
    op: Op,
    value: ComplexTensor,
}

/// Batch statistics produced by the training-mode batch norm, used by the
/// caller to update running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean_re: Vec<f64>,
    pub mean_im: Vec<f64>,
    /// Biased (1/N) variances, as used for normalization.
    pub var_re: Vec<f64>,
    pub var_im: Vec<f64>,
    pub rows: usize,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
    kink_signs: Option<Vec<u8>>,
}

impl Tape {
    /// Recording tape for a forward/backward pass.
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            kink_signs: None,
        }
    }

    /// Non-recording tape: operations compute values but store nothing.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    /// Start collecting a kink signature (one byte per activation site).
    /// Two evaluations whose signatures differ straddle an activation
    /// kink; the finite-difference checker skips such coordinates.
    pub fn collect_kink_signs(&mut self) {
        self.kink_signs = Some(Vec::new());
    }

    pub fn take_kink_signs(&mut self) -> Vec<u8> {
        self.kink_signs.take().unwrap_or_default()
    }

    /// Record a data-dependent branch taken by composite code (e.g. the
    /// power projection) so it participates in kink signatures.
    pub fn note_branch(&mut self, taken: bool) {
        if let Some(sig) = &mut self.kink_signs {
            sig.push(taken as u8);
        }
    }

    /// Attach a value as a differentiable leaf.
    pub fn leaf(&mut self, value: &ComplexTensor) -> ComplexTensor {
        if !self.recording {
            return value.detach();
        }
        let id = self.intern_new(value);
        value.detach().with_node(self.id, id)
    }

    fn intern_new(&mut self, value: &ComplexTensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, value: value.detach() });
        id
    }

    fn on_tape(&self, t: &ComplexTensor) -> bool {
        matches!(t.node(), Some((tid, _)) if tid == self.id)
    }

    fn intern(&mut self, t: &ComplexTensor) -> NodeId {
        match t.node() {
            Some((tid, nid)) if tid == self.id => nid,
            _ => self.intern_new(t),
        }
    }

    fn should_record(&self, inputs: &[&ComplexTensor]) -> bool {
        self.recording && inputs.iter().any(|t| self.on_tape(t))
    }

    fn push(&mut self, op: Op, value: ComplexTensor) -> ComplexTensor {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value: value.detach() });
        value.with_node(self.id, id)
    }

    fn sign_split(&mut self, t: &ComplexTensor) {
        if let Some(sig) = &mut self.kink_signs {
            sig.extend(t.re().iter().map(|&x| (x > 0.0) as u8));
            sig.extend(t.im().iter().map(|&x| (x > 0.0) as u8));
        }
    }

    // ── operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::matmul(a, b)?;
        if self.should_record(&[a, b]) {
            let (na, nb) = (self.intern(a), self.intern(b));
            Ok(self.push(Op::Matmul { a: na, b: nb }, v))
        } else {
            Ok(v)
        }
    }

    pub fn hermitian(&mut self, a: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::hermitian(a)?;
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::Hermitian { a: na }, v))
        } else {
            Ok(v)
        }
    }

    pub fn add(&mut self, a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::add(a, b)?;
        if self.should_record(&[a, b]) {
            let (na, nb) = (self.intern(a), self.intern(b));
            Ok(self.push(Op::Add { a: na, b: nb }, v))
        } else {
            Ok(v)
        }
    }

    pub fn sub(&mut self, a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::sub(a, b)?;
        if self.should_record(&[a, b]) {
            let (na, nb) = (self.intern(a), self.intern(b));
            Ok(self.push(Op::Sub { a: na, b: nb }, v))
        } else {
            Ok(v)
        }
    }

    pub fn scale_const(&mut self, a: &ComplexTensor, c: f64) -> ComplexTensor {
        let v = kernels::scale_const(a, c);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::ScaleConst { a: na, c }, v)
        } else {
            v
        }
    }

    pub fn add_const_re(&mut self, a: &ComplexTensor, c: f64) -> ComplexTensor {
        let v = kernels::add_const_re(a, c);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::AddConstRe { a: na }, v)
        } else {
            v
        }
    }

    /// Multiply by a real-valued scalar node (`s` has one element with
    /// zero imaginary part).
    pub fn mul_scalar(&mut self, a: &ComplexTensor, s: &ComplexTensor) -> Result<ComplexTensor> {
        if s.numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar operand has shape {:?}", s.shape())));
        }
        if s.im()[0] != 0.0 {
            return Err(Error::contract("mul_scalar: scalar operand must be real-valued"));
        }
        let v = kernels::mul_scalar(a, s.re()[0]);
        if self.should_record(&[a, s]) {
            let (na, ns) = (self.intern(a), self.intern(s));
            Ok(self.push(Op::MulScalar { a: na, s: ns }, v))
        } else {
            Ok(v)
        }
    }

    /// `c / x` elementwise on real-valued tensors.
    pub fn scalar_div_const(&mut self, c: f64, a: &ComplexTensor) -> ComplexTensor {
        let v = kernels::scalar_div_const(c, a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::ScalarDivConst { a: na, c }, v)
        } else {
            v
        }
    }

    /// Elementwise division of real-valued tensors.
    pub fn div_elem(&mut self, a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::div_elem(a, b)?;
        if self.should_record(&[a, b]) {
            let (na, nb) = (self.intern(a), self.intern(b));
            Ok(self.push(Op::DivElem { a: na, b: nb }, v))
        } else {
            Ok(v)
        }
    }

    pub fn modulus_sq(&mut self, a: &ComplexTensor) -> ComplexTensor {
        let v = kernels::modulus_sq(a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::ModulusSq { a: na }, v)
        } else {
            v
        }
    }

    pub fn modulus(&mut self, a: &ComplexTensor) -> ComplexTensor {
        let v = kernels::modulus(a);
        if let Some(sig) = &mut self.kink_signs {
            sig.extend(v.re().iter().map(|&x| (x > MODULUS_KINK_EPS) as u8));
        }
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::Modulus { a: na }, v)
        } else {
            v
        }
    }

    pub fn sum_all(&mut self, a: &ComplexTensor) -> ComplexTensor {
        let v = kernels::sum_all(a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::SumAll { a: na }, v)
        } else {
            v
        }
    }

    /// `Σ_i w[i]·a[i]` with fixed real weights (applied to both parts).
    pub fn weighted_sum_re(&mut self, a: &ComplexTensor, w: &[f64]) -> Result<ComplexTensor> {
        if w.len() != a.numel() {
            return Err(Error::shape("weighted_sum_re", format!("{} weights vs {} entries", w.len(), a.numel())));
        }
        let v = kernels::weighted_sum_re(a, w);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::WeightedSumRe { a: na, w: w.to_vec() }, v))
        } else {
            Ok(v)
        }
    }

    /// Elementwise square root of a positive real-valued tensor.
    pub fn sqrt_re(&mut self, a: &ComplexTensor) -> ComplexTensor {
        let v = kernels::sqrt_re(a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::SqrtRe { a: na }, v)
        } else {
            v
        }
    }

    /// `log2(1 + x)` elementwise on real-valued tensors.
    pub fn log2_one_plus(&mut self, a: &ComplexTensor) -> ComplexTensor {
        let v = kernels::log2_one_plus(a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::Log2OnePlus { a: na }, v)
        } else {
            v
        }
    }

    /// SELU applied independently to real and imaginary parts.
    pub fn cselu(&mut self, a: &ComplexTensor) -> ComplexTensor {
        self.sign_split(a);
        let v = kernels::cselu(a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::CSelu { a: na }, v)
        } else {
            v
        }
    }

    /// LeakyReLU applied independently to real and imaginary parts.
    pub fn leaky_relu_c(&mut self, a: &ComplexTensor, slope: f64) -> Result<ComplexTensor> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::contract(format!("leaky_relu_c: slope must be in (0, 1), got {slope}")));
        }
        self.sign_split(a);
        let v = kernels::leaky_relu_c(a, slope);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::LeakyReluC { a: na, slope }, v))
        } else {
            Ok(v)
        }
    }

    /// ReLU on the real part of a real-valued tensor.
    pub fn relu_re(&mut self, a: &ComplexTensor) -> ComplexTensor {
        if let Some(sig) = &mut self.kink_signs {
            sig.extend(a.re().iter().map(|&x| (x > 0.0) as u8));
        }
        let v = kernels::relu_re(a);
        if self.should_record(&[a]) {
            let na = self.intern(a);
            self.push(Op::ReluRe { a: na }, v)
        } else {
            v
        }
    }

    /// `[K, F] -> [K, K, F]` pairwise row sums.
    pub fn pairwise_row_sum(&mut self, a: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::pairwise_row_sum(a)?;
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::PairwiseRowSum { a: na }, v))
        } else {
            Ok(v)
        }
    }

    /// Contract the feature axis of a `[K, K, F]` tensor with a length-F
    /// vector (plain complex product, no conjugation).
    pub fn contract_vec(&mut self, a: &ComplexTensor, v: &ComplexTensor) -> Result<ComplexTensor> {
        let out = kernels::contract_vec(a, v)?;
        if self.should_record(&[a, v]) {
            let (na, nv) = (self.intern(a), self.intern(v));
            Ok(self.push(Op::ContractVec { a: na, v: nv }, out))
        } else {
            Ok(out)
        }
    }

    /// Row-wise softmax over off-diagonal entries of a real square matrix.
    pub fn neighbor_softmax(&mut self, s: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::neighbor_softmax(s)?;
        if self.should_record(&[s]) {
            let ns = self.intern(s);
            Ok(self.push(Op::NeighborSoftmax { s: ns }, v))
        } else {
            Ok(v)
        }
    }

    /// Real matrix times complex matrix.
    pub fn real_matmul_complex(&mut self, alpha: &ComplexTensor, x: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::real_matmul_complex(alpha, x)?;
        if self.should_record(&[alpha, x]) {
            let (na, nx) = (self.intern(alpha), self.intern(x));
            Ok(self.push(Op::RealMatmulComplex { alpha: na, x: nx }, v))
        } else {
            Ok(v)
        }
    }

    pub fn concat_cols(&mut self, parts: &[&ComplexTensor]) -> Result<ComplexTensor> {
        let v = kernels::concat_cols(parts)?;
        if self.should_record(parts) {
            let ids: Vec<NodeId> = parts.iter().map(|p| self.intern(p)).collect();
            Ok(self.push(Op::ConcatCols { parts: ids }, v))
        } else {
            Ok(v)
        }
    }

    pub fn concat_rows(&mut self, parts: &[&ComplexTensor]) -> Result<ComplexTensor> {
        let v = kernels::concat_rows(parts)?;
        if self.should_record(parts) {
            let ids: Vec<NodeId> = parts.iter().map(|p| self.intern(p)).collect();
            Ok(self.push(Op::ConcatRows { parts: ids }, v))
        } else {
            Ok(v)
        }
    }

    pub fn slice_rows(&mut self, a: &ComplexTensor, r0: usize, r1: usize) -> Result<ComplexTensor> {
        let v = kernels::slice_rows(a, r0, r1)?;
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::SliceRows { a: na, r0 }, v))
        } else {
            Ok(v)
        }
    }

    /// Same flat data under a new shape.
    pub fn reshape(&mut self, a: &ComplexTensor, shape: &[usize]) -> Result<ComplexTensor> {
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        let v = ComplexTensor::from_parts(shape.to_vec(), a.re().to_vec(), a.im().to_vec())?;
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::Reshape { a: na }, v))
        } else {
            Ok(v)
        }
    }

    /// Training-mode complex batch norm; returns the output and the batch
    /// statistics for the caller's running-average update.
    pub fn batchnorm_train(
        &mut self,
        x: &ComplexTensor,
        gamma: &ComplexTensor,
        beta: &ComplexTensor,
        eps: f64,
    ) -> Result<(ComplexTensor, BnBatchStats)> {
        let fwd = kernels::batchnorm_train(x, gamma, beta, eps)?;
        let stats = BnBatchStats {
            mean_re: fwd.mean_re,
            mean_im: fwd.mean_im,
            var_re: fwd.var_re,
            var_im: fwd.var_im,
            rows: x.rows(),
        };
        if self.should_record(&[x, gamma, beta]) {
            let (nx, ng, nb) = (self.intern(x), self.intern(gamma), self.intern(beta));
            let saved = Box::new(BnSaved {
                xhat_re: fwd.xhat_re,
                xhat_im: fwd.xhat_im,
                inv_std_re: fwd.inv_std_re,
                inv_std_im: fwd.inv_std_im,
            });
            Ok((self.push(Op::BatchNormTrain { x: nx, gamma: ng, beta: nb, saved }, fwd.out), stats))
        } else {
            Ok((fwd.out, stats))
        }
    }

    /// Inference-mode complex batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: &ComplexTensor,
        gamma: &ComplexTensor,
        beta: &ComplexTensor,
        mean: (&[f64], &[f64]),
        var: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<ComplexTensor> {
        let v = kernels::batchnorm_eval(x, gamma, beta, mean, var, eps)?;
        if self.should_record(&[x, gamma, beta]) {
            let inv_std_re: Vec<f64> = var.0.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let inv_std_im: Vec<f64> = var.1.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (nx, ng, nb) = (self.intern(x), self.intern(gamma), self.intern(beta));
            Ok(self.push(
                Op::BatchNormEval {
                    x: nx,
                    gamma: ng,
                    beta: nb,
                    mean_re: mean.0.to_vec(),
                    mean_im: mean.1.to_vec(),
                    inv_std_re,
                    inv_std_im,
                },
                v,
            ))
        } else {
            Ok(v)
        }
    }

    pub fn diag_of(&mut self, a: &ComplexTensor) -> Result<ComplexTensor> {
        let v = kernels::diag_of(a)?;
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::DiagOf { a: na }, v))
        } else {
            Ok(v)
        }
    }

    pub fn col_sums(&mut self, a: &ComplexTensor) -> Result<ComplexTensor> {
        let rows = a.rows();
        let v = kernels::col_sums(a)?;
        if self.should_record(&[a]) {
            let na = self.intern(a);
            Ok(self.push(Op::ColSums { a: na, rows }, v))
        } else {
            Ok(v)
        }
    }

    /// Frobenius norm as a scalar node: `sqrt(Σ |a_ij|²)`.
    pub fn frobenius_norm(&mut self, a: &ComplexTensor) -> ComplexTensor {
        let sq = self.modulus_sq(a);
        let s = self.sum_all(&sq);
        self.sqrt_re(&s)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar real loss node. Errors on a non-scalar
    /// or complex-valued loss and on repeated invocation.
    pub fn backward(&mut self, loss: &ComplexTensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        let nid = match loss.node() {
            Some((tid, nid)) if tid == self.id => nid,
            _ => return Err(Error::contract("loss is not attached to this tape")),
        };
        if loss.numel() != 1 {
            return Err(Error::contract(format!("loss must be scalar, got shape {:?}", loss.shape())));
        }
        if loss.im()[0] != 0.0 {
            return Err(Error::contract("loss must be real-valued"));
        }
        self.consumed = true;

        let mut adj: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[nid] = Some((vec![1.0], vec![0.0]));

        for i in (0..=nid).rev() {
            let Some(g) = adj[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(Gradients { tape_id: self.id, adj })
    }

    fn propagate(&self, i: NodeId, g: &(Vec<f64>, Vec<f64>), adj: &mut [Option<(Vec<f64>, Vec<f64>)>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| -> &ComplexTensor { &nodes[id].value };
        let numel = |id: NodeId| nodes[id].value.numel();
        fn acc<'a>(
            adj: &'a mut [Option<(Vec<f64>, Vec<f64>)>],
            id: NodeId,
            n: usize,
        ) -> &'a mut (Vec<f64>, Vec<f64>) {
            adj[id].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]))
        }

        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the sweep"),
            Op::Matmul { a, b } => {
                // gA += g · Bᴴ ; gB += Aᴴ · g
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                {
                    let ga = acc(adj, *a, numel(*a));
                    kernels::mm_acc_nt(&g.0, bv.re(), m, n, k, 1.0, &mut ga.0);
                    kernels::mm_acc_nt(&g.1, bv.im(), m, n, k, 1.0, &mut ga.0);
                    kernels::mm_acc_nt(&g.1, bv.re(), m, n, k, 1.0, &mut ga.1);
                    kernels::mm_acc_nt(&g.0, bv.im(), m, n, k, -1.0, &mut ga.1);
                }
                {
                    let gb = acc(adj, *b, numel(*b));
                    kernels::mm_acc_tn(av.re(), &g.0, m, k, n, 1.0, &mut gb.0);
                    kernels::mm_acc_tn(av.im(), &g.1, m, k, n, 1.0, &mut gb.0);
                    kernels::mm_acc_tn(av.re(), &g.1, m, k, n, 1.0, &mut gb.1);
                    kernels::mm_acc_tn(av.im(), &g.0, m, k, n, -1.0, &mut gb.1);
                }
            }
            Op::Hermitian { a } => {
                // gA += gᴴ
                let (n, m) = (nodes[i].value.rows(), nodes[i].value.cols());
                let ga = acc(adj, *a, numel(*a));
                for r in 0..n {
                    for c in 0..m {
                        ga.0[c * n + r] += g.0[r * m + c];
                        ga.1[c * n + r] -= g.1[r * m + c];
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    let gi = acc(adj, *id, numel(*id));
                    for j in 0..g.0.len() {
                        gi.0[j] += g.0[j];
                        gi.1[j] += g.1[j];
                    }
                }
            }
            Op::Sub { a, b } => {
                {
                    let ga = acc(adj, *a, numel(*a));
                    for j in 0..g.0.len() {
                        ga.0[j] += g.0[j];
                        ga.1[j] += g.1[j];
                    }
                }
                let gb = acc(adj, *b, numel(*b));
                for j in 0..g.0.len() {
                    gb.0[j] -= g.0[j];
                    gb.1[j] -= g.1[j];
                }
            }
            Op::ScaleConst { a, c } => {
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += c * g.0[j];
                    ga.1[j] += c * g.1[j];
                }
            }
            Op::AddConstRe { a } => {
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += g.0[j];
                    ga.1[j] += g.1[j];
                }
            }
            Op::MulScalar { a, s } => {
                let sval = val(*s).re()[0];
                let av = val(*a).detach();
                {
                    let ga = acc(adj, *a, numel(*a));
                    for j in 0..g.0.len() {
                        ga.0[j] += sval * g.0[j];
                        ga.1[j] += sval * g.1[j];
                    }
                }
                let gs = acc(adj, *s, 1);
                let mut d = 0.0;
                for j in 0..g.0.len() {
                    d += g.0[j] * av.re()[j] + g.1[j] * av.im()[j];
                }
                gs.0[0] += d;
            }
            Op::ScalarDivConst { a, c } => {
                let av = val(*a).detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    let x = av.re()[j];
                    ga.0[j] += -g.0[j] * c / (x * x);
                }
            }
            Op::DivElem { a, b } => {
                let (av, bv) = (val(*a).detach(), val(*b).detach());
                {
                    let ga = acc(adj, *a, numel(*a));
                    for j in 0..g.0.len() {
                        ga.0[j] += g.0[j] / bv.re()[j];
                    }
                }
                let gb = acc(adj, *b, numel(*b));
                for j in 0..g.0.len() {
                    let bj = bv.re()[j];
                    gb.0[j] += -g.0[j] * av.re()[j] / (bj * bj);
                }
            }
            Op::ModulusSq { a } => {
                let av = val(*a).detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += g.0[j] * 2.0 * av.re()[j];
                    ga.1[j] += g.0[j] * 2.0 * av.im()[j];
                }
            }
            Op::Modulus { a } => {
                let av = val(*a).detach();
                let mv = nodes[i].value.detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    let m = mv.re()[j];
                    if m > 0.0 {
                        ga.0[j] += g.0[j] * av.re()[j] / m;
                        ga.1[j] += g.0[j] * av.im()[j] / m;
                    }
                }
            }
            Op::SumAll { a } => {
                let ga = acc(adj, *a, numel(*a));
                for j in 0..ga.0.len() {
                    ga.0[j] += g.0[0];
                    ga.1[j] += g.1[0];
                }
            }
            Op::WeightedSumRe { a, w } => {
                let ga = acc(adj, *a, numel(*a));
                for j in 0..ga.0.len() {
                    ga.0[j] += g.0[0] * w[j];
                    ga.1[j] += g.1[0] * w[j];
                }
            }
            Op::SqrtRe { a } => {
                let yv = nodes[i].value.detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    if g.0[j] != 0.0 {
                        ga.0[j] += g.0[j] / (2.0 * yv.re()[j]);
                    }
                }
            }
            Op::Log2OnePlus { a } => {
                let av = val(*a).detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += g.0[j] / ((1.0 + av.re()[j]) * std::f64::consts::LN_2);
                }
            }
            Op::CSelu { a } => {
                let av = val(*a).detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += g.0[j] * kernels::selu_deriv(av.re()[j]);
                    ga.1[j] += g.1[j] * kernels::selu_deriv(av.im()[j]);
                }
            }
            Op::LeakyReluC { a, slope } => {
                let av = val(*a).detach();
                let d = |x: f64| if x > 0.0 { 1.0 } else { *slope };
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += g.0[j] * d(av.re()[j]);
                    ga.1[j] += g.1[j] * d(av.im()[j]);
                }
            }
            Op::ReluRe { a } => {
                let av = val(*a).detach();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    if av.re()[j] > 0.0 {
                        ga.0[j] += g.0[j];
                    }
                }
            }
            Op::PairwiseRowSum { a } => {
                let (k, f) = {
                    let s = nodes[i].value.shape();
                    (s[0], s[2])
                };
                let ga = acc(adj, *a, numel(*a));
                for r in 0..k {
                    for j in 0..k {
                        let o = (r * k + j) * f;
                        for c in 0..f {
                            ga.0[r * f + c] += g.0[o + c];
                            ga.1[r * f + c] += g.1[o + c];
                            ga.0[j * f + c] += g.0[o + c];
                            ga.1[j * f + c] += g.1[o + c];
                        }
                    }
                }
            }
            Op::ContractVec { a, v } => {
                let (av, vv) = (val(*a).detach(), val(*v).detach());
                let s = av.shape().to_vec();
                let (k1, k2, f) = (s[0], s[1], s[2]);
                {
                    // gA[k,j,f] += g[k,j] · conj(v[f])
                    let ga = acc(adj, *a, numel(*a));
                    for k in 0..k1 {
                        for j in 0..k2 {
                            let (gr, gi) = (g.0[k * k2 + j], g.1[k * k2 + j]);
                            let o = (k * k2 + j) * f;
                            for c in 0..f {
                                let (vr, vi) = (vv.re()[c], vv.im()[c]);
                                ga.0[o + c] += gr * vr + gi * vi;
                                ga.1[o + c] += gi * vr - gr * vi;
                            }
                        }
                    }
                }
                // gV[f] += Σ g[k,j] · conj(a[k,j,f])
                let gv = acc(adj, *v, numel(*v));
                for k in 0..k1 {
                    for j in 0..k2 {
                        let (gr, gi) = (g.0[k * k2 + j], g.1[k * k2 + j]);
                        let o = (k * k2 + j) * f;
                        for c in 0..f {
                            let (ar, ai) = (av.re()[o + c], av.im()[o + c]);
                            gv.0[c] += gr * ar + gi * ai;
                            gv.1[c] += gi * ar - gr * ai;
                        }
                    }
                }
            }
            Op::NeighborSoftmax { s } => {
                let alpha = nodes[i].value.detach();
                let k = alpha.rows();
                let gs = acc(adj, *s, numel(*s));
                for r in 0..k {
                    let mut dot = 0.0;
                    for j in 0..k {
                        if j != r {
                            dot += g.0[r * k + j] * alpha.re()[r * k + j];
                        }
                    }
                    for j in 0..k {
                        if j != r {
                            gs.0[r * k + j] += alpha.re()[r * k + j] * (g.0[r * k + j] - dot);
                        }
                    }
                }
            }
            Op::RealMatmulComplex { alpha, x } => {
                let (av, xv) = (val(*alpha), val(*x));
                let (m, k) = (av.rows(), av.cols());
                let n = xv.cols();
                {
                    let ga = acc(adj, *alpha, numel(*alpha));
                    kernels::mm_acc_nt(&g.0, xv.re(), m, n, k, 1.0, &mut ga.0);
                    kernels::mm_acc_nt(&g.1, xv.im(), m, n, k, 1.0, &mut ga.0);
                }
                let gx = acc(adj, *x, numel(*x));
                kernels::mm_acc_tn(av.re(), &g.0, m, k, n, 1.0, &mut gx.0);
                kernels::mm_acc_tn(av.re(), &g.1, m, k, n, 1.0, &mut gx.1);
            }
            Op::ConcatCols { parts } => {
                let rows = nodes[i].value.rows();
                let total = nodes[i].value.cols();
                let widths: Vec<usize> = parts.iter().map(|p| nodes[*p].value.cols()).collect();
                let mut off = 0;
                for (pi, p) in parts.iter().enumerate() {
                    let c = widths[pi];
                    let gp = acc(adj, *p, numel(*p));
                    for r in 0..rows {
                        for j in 0..c {
                            gp.0[r * c + j] += g.0[r * total + off + j];
                            gp.1[r * c + j] += g.1[r * total + off + j];
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = numel(*p);
                    let gp = acc(adj, *p, n);
                    for j in 0..n {
                        gp.0[j] += g.0[off + j];
                        gp.1[j] += g.1[off + j];
                    }
                    off += n;
                }
            }
            Op::Reshape { a } => {
                let ga = acc(adj, *a, numel(*a));
                for j in 0..g.0.len() {
                    ga.0[j] += g.0[j];
                    ga.1[j] += g.1[j];
                }
            }
            Op::SliceRows { a, r0 } => {
                let cols = nodes[i].value.cols();
                let n = nodes[i].value.numel();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..n {
                    ga.0[r0 * cols + j] += g.0[j];
                    ga.1[r0 * cols + j] += g.1[j];
                }
            }
            Op::BatchNormTrain { x, gamma, beta, saved } => {
                let (rows, cols) = (nodes[i].value.rows(), nodes[i].value.cols());
                let gm = val(*gamma).detach();
                let nr = rows as f64;
                // Accumulators per channel.
                let mut sum_g_re = vec![0.0; cols];
                let mut sum_g_im = vec![0.0; cols];
                let mut sum_gx_re = vec![0.0; cols];
                let mut sum_gx_im = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let idx = r * cols + c;
                        sum_g_re[c] += g.0[idx];
                        sum_g_im[c] += g.1[idx];
                        sum_gx_re[c] += g.0[idx] * saved.xhat_re[idx];
                        sum_gx_im[c] += g.1[idx] * saved.xhat_im[idx];
                    }
                }
                {
                    let gx = acc(adj, *x, numel(*x));
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gx.0[idx] += gm.re()[c] * saved.inv_std_re[c]
                                * (g.0[idx] - sum_g_re[c] / nr - saved.xhat_re[idx] * sum_gx_re[c] / nr);
                            gx.1[idx] += gm.im()[c] * saved.inv_std_im[c]
                                * (g.1[idx] - sum_g_im[c] / nr - saved.xhat_im[idx] * sum_gx_im[c] / nr);
                        }
                    }
                }
                {
                    let gg = acc(adj, *gamma, cols);
                    for c in 0..cols {
                        gg.0[c] += sum_gx_re[c];
                        gg.1[c] += sum_gx_im[c];
                    }
                }
                let gb = acc(adj, *beta, cols);
                for c in 0..cols {
                    gb.0[c] += sum_g_re[c];
                    gb.1[c] += sum_g_im[c];
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean_re, mean_im, inv_std_re, inv_std_im } => {
                let (rows, cols) = (nodes[i].value.rows(), nodes[i].value.cols());
                let gm = val(*gamma).detach();
                let xv = val(*x).detach();
                {
                    let gx = acc(adj, *x, numel(*x));
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gx.0[idx] += g.0[idx] * gm.re()[c] * inv_std_re[c];
                            gx.1[idx] += g.1[idx] * gm.im()[c] * inv_std_im[c];
                        }
                    }
                }
                {
                    let gg = acc(adj, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gg.0[c] += g.0[idx] * (xv.re()[idx] - mean_re[c]) * inv_std_re[c];
                            gg.1[c] += g.1[idx] * (xv.im()[idx] - mean_im[c]) * inv_std_im[c];
                        }
                    }
                }
                let gb = acc(adj, *beta, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let idx = r * cols + c;
                        gb.0[c] += g.0[idx];
                        gb.1[c] += g.1[idx];
                    }
                }
            }
            Op::DiagOf { a } => {
                let k = nodes[i].value.numel();
                let ga = acc(adj, *a, numel(*a));
                for j in 0..k {
                    ga.0[j * k + j] += g.0[j];
                    ga.1[j * k + j] += g.1[j];
                }
            }
            Op::ColSums { a, rows } => {
                let n = nodes[i].value.numel();
                let ga = acc(adj, *a, numel(*a));
                for r in 0..*rows {
                    for j in 0..n {
                        ga.0[r * n + j] += g.0[j];
                        ga.1[r * n + j] += g.1[j];
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], queryable per leaf tensor.
pub struct Gradients {
    tape_id: u64,
    adj: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Gradients {
    /// Gradient with respect to an attached tensor, as `(re, im)` slices.
    /// `None` when the loss does not depend on it.
    pub fn wrt(&self, t: &ComplexTensor) -> Option<(&[f64], &[f64])> {
        let (tid, nid) = t.node()?;
        if tid != self.tape_id {
            return None;
        }
        self.adj[nid].as_ref().map(|(r, i)| (r.as_slice(), i.as_slice()))
    }

    /// Like [`Gradients::wrt`] but materializes zeros when the loss does
    /// not depend on the tensor.
    pub fn wrt_or_zero(&self, t: &ComplexTensor) -> (Vec<f64>, Vec<f64>) {
        match self.wrt(t) {
            Some((r, i)) => (r.to_vec(), i.to_vec()),
            None => (vec![0.0; t.numel()], vec![0.0; t.numel()]),
        }
    }
}
