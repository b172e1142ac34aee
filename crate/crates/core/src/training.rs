//! Unsupervised training: rate computation, the penalty-method and
//! Lagrangian-duality losses, multiplier updates, and the epoch loops.
//!
//! Both losses fold the per-user rate requirement into the negated sum
//! rate; the sum-power constraint needs no term because the model output
//! projection enforces it. One writer mutates parameters; validation runs
//! on read-only parallel workers against the frozen snapshot between
//! epochs.

use crate::channel::{ChannelSample, Dataset};
use crate::error::{Error, Result};
use crate::model::{Binding, CrgatModel, Mode, Trainable};
use crate::parallel::par_map_indexed;
use crate::report::{fmt_f64, Table};
use crate::rng::DetRng;
use crate::tensor::{ComplexTensor, Gradients, Tape};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Feasibility slack used when counting validation feasibility.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Per-user achievable rates (bit/s/Hz).
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector(pub Vec<f64>);

impl RateVector {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn feasible(&self, r_req: f64, tol: f64) -> bool {
        self.min() >= r_req - tol
    }
}

/// Tape-differentiable per-user rates in matrix form:
/// `R_k = log2(1 + |q_kk|² / (Σ_{i≠k} |q_ik|² + σ²))` with
/// `q_ik = h_k^H w_i`.
pub fn rates_node(tape: &mut Tape, h: &ComplexTensor, w: &ComplexTensor, sigma2: f64) -> Result<ComplexTensor> {
    if h.shape() != w.shape() {
        return Err(Error::shape("rates", format!("h {:?} vs w {:?}", h.shape(), w.shape())));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::contract(format!("rates: sigma2 must be positive, got {sigma2}")));
    }
    let hh = tape.hermitian(h)?;
    let q = tape.matmul(w, &hh)?;
    let s = tape.modulus_sq(&q);
    let signal = tape.diag_of(&s)?;
    let total = tape.col_sums(&s)?;
    let interference = tape.sub(&total, &signal)?;
    let den = tape.add_const_re(&interference, sigma2);
    let sinr = tape.div_elem(&signal, &den)?;
    Ok(tape.log2_one_plus(&sinr))
}

/// Detached rate computation through the matrix-form graph.
pub fn sum_rate(h: &ComplexTensor, w: &ComplexTensor, sigma2: f64) -> Result<RateVector> {
    let mut tape = Tape::inference();
    let r = rates_node(&mut tape, h, w, sigma2)?;
    Ok(RateVector(r.re().to_vec()))
}

/// Independent per-vector rate evaluation (plain scalar products); the
/// cross-check partner of [`rates_node`] and the rate oracle for the
/// convex baselines.
pub fn rates_direct(h: &ComplexTensor, w: &ComplexTensor, sigma2: f64) -> Vec<f64> {
    let (k, nt) = (h.rows(), h.cols());
    let dot = |user: usize, beam: usize| -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for t in 0..nt {
            let (hr, hi) = h.at2(user, t);
            let (wr, wi) = w.at2(beam, t);
            acc += Complex64::new(hr, -hi) * Complex64::new(wr, wi);
        }
        acc
    };
    (0..k)
        .map(|user| {
            let sig = dot(user, user).norm_sqr();
            let interf: f64 = (0..k).filter(|&i| i != user).map(|i| dot(user, i).norm_sqr()).sum();
            (1.0 + sig / (interf + sigma2)).log2()
        })
        .collect()
}

/// Penalty-method loss over a batch of `(H, Ŵ)` pairs:
/// `(1/N) Σ_n [Σ_k −R_k + λ Σ_k ReLU(R_req − R_k)]`.
pub fn pm_loss(
    tape: &mut Tape,
    batch: &[(&ComplexTensor, &ComplexTensor)],
    lambda: f64,
    r_req: f64,
    sigma2: f64,
) -> Result<ComplexTensor> {
    if batch.is_empty() {
        return Err(Error::contract("pm_loss: empty batch"));
    }
    let k = batch[0].0.rows();
    let weights = vec![lambda; k];
    loss_over_batch(tape, batch, &weights, r_req, sigma2)
}

/// Lagrangian-duality loss with per-user multipliers `μ ≥ 0`.
pub fn ldm_loss(
    tape: &mut Tape,
    batch: &[(&ComplexTensor, &ComplexTensor)],
    mu: &[f64],
    r_req: f64,
    sigma2: f64,
) -> Result<ComplexTensor> {
    if batch.is_empty() {
        return Err(Error::contract("ldm_loss: empty batch"));
    }
    if mu.iter().any(|&m| m < 0.0) {
        return Err(Error::contract("ldm_loss: multipliers must be non-negative"));
    }
    if mu.len() != batch[0].0.rows() {
        return Err(Error::contract(format!(
            "ldm_loss: {} multipliers for {} users",
            mu.len(),
            batch[0].0.rows()
        )));
    }
    loss_over_batch(tape, batch, mu, r_req, sigma2)
}

fn loss_over_batch(
    tape: &mut Tape,
    batch: &[(&ComplexTensor, &ComplexTensor)],
    weights: &[f64],
    r_req: f64,
    sigma2: f64,
) -> Result<ComplexTensor> {
    let mut total: Option<ComplexTensor> = None;
    for (h, w) in batch {
        let rates = rates_node(tape, h, w, sigma2)?;
        let term = sample_loss_from_rates(tape, &rates, weights, r_req)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    Ok(tape.scale_const(&total.unwrap(), 1.0 / batch.len() as f64))
}

/// `Σ_k −R_k + Σ_k weight_k · ReLU(R_req − R_k)` for one sample.
fn sample_loss_from_rates(
    tape: &mut Tape,
    rates: &ComplexTensor,
    weights: &[f64],
    r_req: f64,
) -> Result<ComplexTensor> {
    let sumr = tape.sum_all(rates);
    let neg = tape.scale_const(&sumr, -1.0);
    let negr = tape.scale_const(rates, -1.0);
    let shortfall = tape.add_const_re(&negr, r_req);
    let viol = tape.relu_re(&shortfall);
    let pen = tape.weighted_sum_re(&viol, weights)?;
    tape.add(&neg, &pen)
}

/// Lagrangian multiplier state for the duality-method loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LdmState {
    /// Non-negative multipliers, one per user.
    pub mu: Vec<f64>,
    /// Step size applied once at the epoch-end update.
    pub tau: f64,
    /// Raw violation accumulator for the current epoch.
    pub grad_mu: Vec<f64>,
}

impl LdmState {
    pub fn new(k: usize, tau: f64) -> Self {
        LdmState { mu: vec![0.0; k], tau, grad_mu: vec![0.0; k] }
    }

    /// Add one sample's violations `ReLU(R_req − R_k)` to the epoch
    /// accumulator.
    pub fn accumulate(&mut self, rates: &RateVector, r_req: f64) {
        for (g, r) in self.grad_mu.iter_mut().zip(&rates.0) {
            *g += (r_req - r).max(0.0);
        }
    }

    /// Epoch-end update `μ_k += τ · Σ_n ReLU(R_req − R_k(n))`; the
    /// accumulator stores raw violations so τ is applied exactly once.
    pub fn apply_epoch_update(&mut self) {
        for (m, g) in self.mu.iter_mut().zip(&self.grad_mu) {
            *m += self.tau * *g;
        }
        self.grad_mu.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Spec-level operation: fold a whole epoch of per-sample rates into the
/// accumulator and apply the multiplier update.
pub fn update_multipliers(mut state: LdmState, epoch_rates: &[RateVector], r_req: f64) -> LdmState {
    for r in epoch_rates {
        state.accumulate(r, r_req);
    }
    state.apply_epoch_update();
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, the literal update rule.
    Sgd,
    /// Adaptive moments; the default for desk-scale runs.
    Adam,
}

/// Flat-parameter optimizer over the real coordinates.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dims: usize) -> Self {
        Optimizer { kind, lr, m: vec![0.0; dims], v: vec![0.0; dims], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        if self.lr == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    if *g != 0.0 {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// Hyperparameters for penalty-method training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmConfig {
    pub lambda: f64,
    pub r_req: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl PmConfig {
    pub fn new(r_req: f64, epochs: usize) -> Self {
        PmConfig {
            lambda: 10.0,
            r_req,
            epochs,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lambda = 0 is allowed: it degenerates to unconstrained sum-rate
        // ascent, which the overfit probe relies on.
        if !(self.lambda >= 0.0) {
            return Err(Error::contract(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::contract("learning_rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Hyperparameters for Lagrangian-duality training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmConfig {
    pub tau: f64,
    pub r_req: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl LdmConfig {
    pub fn new(r_req: f64, epochs: usize) -> Self {
        LdmConfig {
            tau: 1e-3,
            r_req,
            epochs,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_sum_rate: f64,
    pub val_feas_rate: f64,
    pub mu: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_table(&self) -> Table {
        let k = self.epochs.first().and_then(|e| e.mu.as_ref()).map(|m| m.len()).unwrap_or(0);
        let mut cols = vec!["epoch".to_string(), "train_loss".into(), "val_sum_rate".into(), "val_feas_rate".into()];
        for i in 0..k {
            cols.push(format!("mu{i}"));
        }
        let mut t = Table {
            title: "crgat-train-report".to_string(),
            columns: cols,
            rows: Vec::new(),
        };
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                fmt_f64(e.train_loss),
                fmt_f64(e.val_sum_rate),
                fmt_f64(e.val_feas_rate),
            ];
            if let Some(mu) = &e.mu {
                row.extend(mu.iter().map(|m| fmt_f64(*m)));
            }
            t.push_row(row);
        }
        t
    }
}

enum LossSpec<'a> {
    Pm { lambda: f64 },
    Ldm { state: &'a mut LdmState },
}

/// Train with the penalty-method loss (epoch loop over shuffled
/// minibatches, gradient step per batch).
pub fn train_pm(dataset: &Dataset, model: &mut CrgatModel, cfg: &PmConfig) -> Result<TrainReport> {
    cfg.validate()?;
    run_training(
        dataset,
        model,
        LossSpec::Pm { lambda: cfg.lambda },
        cfg.r_req,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.optimizer,
        cfg.seed,
    )
}

/// Train with the Lagrangian-duality loss; the multiplier accumulator is
/// reset per epoch and μ is updated once at each epoch end.
pub fn train_ldm(
    dataset: &Dataset,
    model: &mut CrgatModel,
    cfg: &LdmConfig,
    state: &mut LdmState,
) -> Result<TrainReport> {
    if state.mu.len() != dataset.config.k_users {
        return Err(Error::contract(format!(
            "multiplier state has {} entries for {} users",
            state.mu.len(),
            dataset.config.k_users
        )));
    }
    run_training(
        dataset,
        model,
        LossSpec::Ldm { state },
        cfg.r_req,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.optimizer,
        cfg.seed,
    )
}

/// Warm-start training from checkpoint parameters. The checkpoint
/// architecture must match the dataset's antenna count; the user count
/// may differ freely.
pub fn fine_tune(
    checkpoint_model: CrgatModel,
    dataset: &Dataset,
    cfg: &PmConfig,
) -> Result<(CrgatModel, TrainReport)> {
    if checkpoint_model.config.n_t() != dataset.config.n_t {
        return Err(Error::contract(format!(
            "checkpoint built for n_t = {}, dataset has n_t = {}",
            checkpoint_model.config.n_t(),
            dataset.config.n_t
        )));
    }
    let mut model = checkpoint_model;
    let report = train_pm(dataset, &mut model, cfg)?;
    Ok((model, report))
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    dataset: &Dataset,
    model: &mut CrgatModel,
    mut loss: LossSpec<'_>,
    r_req: f64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: OptimizerKind,
    seed: u64,
) -> Result<TrainReport> {
    let train = dataset.train_samples();
    if train.is_empty() {
        return Err(Error::contract("training requires a non-empty train split"));
    }
    if dataset.config.n_t != model.config.n_t() {
        return Err(Error::contract(format!(
            "dataset n_t {} does not match model n_t {}",
            dataset.config.n_t,
            model.config.n_t()
        )));
    }
    let sigma2 = 1.0;
    let mut opt = Optimizer::new(optimizer, learning_rate, model.trainable_real_dims());
    let mut report = TrainReport::default();

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        DetRng::new(seed, 1 + epoch as u64).shuffle(&mut order);
        if let LossSpec::Ldm { state } = &mut loss {
            state.grad_mu.iter_mut().for_each(|g| *g = 0.0);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let samples: Vec<&ChannelSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss_val, grads, binding, batch_rates, bn_stats) =
                batch_pass(model, &samples, &mut loss, r_req, sigma2)?;
            let flat = flat_grads(model, &binding, &grads);
            let mut params = model.flatten_trainable();
            opt.step(&mut params, &flat);
            model.load_flat_trainable(&params)?;
            model.update_bn_running(&bn_stats);
            if let LossSpec::Ldm { state } = &mut loss {
                for r in &batch_rates {
                    state.accumulate(r, r_req);
                }
            }
            epoch_loss += loss_val;
            batches += 1;
        }
        if let LossSpec::Ldm { state } = &mut loss {
            state.apply_epoch_update();
        }

        let (val_sum_rate, val_feas_rate) = validate(model, dataset.val_samples(), r_req)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_sum_rate,
            val_feas_rate,
            mu: match &loss {
                LossSpec::Ldm { state } => Some(state.mu.clone()),
                LossSpec::Pm { .. } => None,
            },
        });
    }
    Ok(report)
}

type BatchPass = (
    f64,
    Gradients,
    Binding,
    Vec<RateVector>,
    Vec<crate::tensor::BnBatchStats>,
);

fn batch_pass(
    model: &CrgatModel,
    samples: &[&ChannelSample],
    loss: &mut LossSpec<'_>,
    r_req: f64,
    sigma2: f64,
) -> Result<BatchPass> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let hs: Vec<&ComplexTensor> = samples.iter().map(|s| &s.h).collect();
    let stacked = {
        let mut t = Tape::inference();
        t.concat_rows(&hs)?
    };
    let mut blocks = Vec::with_capacity(samples.len());
    let mut off = 0;
    for s in samples {
        blocks.push(off..off + s.h.rows());
        off += s.h.rows();
    }
    let out = model.forward_blocks(&mut tape, &binding, &stacked, &blocks, Mode::Train)?;

    let mut rate_nodes = Vec::with_capacity(samples.len());
    for (s, wb) in samples.iter().zip(&out.w_blocks) {
        rate_nodes.push(rates_node(&mut tape, &s.h, wb, sigma2)?);
    }
    let batch_rates: Vec<RateVector> = rate_nodes.iter().map(|r| RateVector(r.re().to_vec())).collect();

    let k = samples[0].h.rows();
    let weights = match loss {
        LossSpec::Pm { lambda } => vec![*lambda; k],
        LossSpec::Ldm { state } => {
            if state.mu.iter().any(|&m| m < 0.0) {
                return Err(Error::contract("ldm: multipliers must be non-negative"));
            }
            state.mu.clone()
        }
    };
    let mut total: Option<ComplexTensor> = None;
    for rates in &rate_nodes {
        let term = sample_loss_from_rates(&mut tape, rates, &weights, r_req)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    let loss_node = tape.scale_const(&total.unwrap(), 1.0 / samples.len() as f64);
    let loss_val = loss_node.re()[0];
    let grads = tape.backward(&loss_node)?;
    Ok((loss_val, grads, binding, batch_rates, out.bn_stats))
}

/// Flatten leaf gradients in the trainable visit order; scalars keep only
/// the real part.
fn flat_grads(model: &CrgatModel, binding: &Binding, grads: &Gradients) -> Vec<f64> {
    let leaves = binding.leaves();
    let mut out = Vec::with_capacity(model.trainable_real_dims());
    let mut idx = 0;
    model.visit_trainable(|t| {
        let leaf = leaves[idx];
        idx += 1;
        let (gr, gi) = grads.wrt_or_zero(leaf);
        match t {
            Trainable::Tensor(_) => {
                out.extend(gr);
                out.extend(gi);
            }
            Trainable::Scalar(_) => out.push(gr[0]),
        }
    });
    out
}

/// Mean sum rate and feasibility percentage over a sample set (eval
/// mode, parallel read-only workers).
pub fn validate(model: &CrgatModel, samples: &[ChannelSample], r_req: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let results: Vec<Result<(f64, bool)>> = par_map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let w = model.forward(&s.h, Mode::Eval)?;
        let rates = RateVector(rates_direct(&s.h, &w, s.sigma2));
        Ok((rates.sum(), rates.feasible(r_req, FEASIBILITY_TOL)))
    });
    let mut sum = 0.0;
    let mut feas = 0usize;
    for r in results {
        let (sr, ok) = r?;
        sum += sr;
        if ok {
            feas += 1;
        }
    }
    Ok((sum / samples.len() as f64, 100.0 * feas as f64 / samples.len() as f64))
}

#[cfg(test)]
mod tests;
