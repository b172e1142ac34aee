//! The complex residual graph-attention network.
//!
//! The encoder stacks graph attention layers whose per-head aggregation is
//! attention-weighted over the other users (the graph is fully connected;
//! a node's own feature enters only through the jump and initial residual
//! paths). The decoder stacks complex fully connected layers with complex
//! batch norm, and a final sum-power projection guarantees
//! `‖Ŵ‖_F² ≤ P_max` for every input. No parameter shape depends on the
//! number of users, so one trained model serves any K ≥ 2.

mod checkpoint;
mod forward;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, parameter_byte_size, read_checkpoint, save_checkpoint, write_checkpoint,
                     CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{power_project, ForwardOut};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{BnBatchStats, ComplexTensor, Tape};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// One graph attention layer: `in_dim` features per node in, `heads`
/// attention mechanisms each producing `head_dim` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrgalLayerCfg {
    pub in_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
}

impl CrgalLayerCfg {
    pub fn out_dim(&self) -> usize {
        self.head_dim * self.heads
    }
}

/// One fully connected layer. Intermediate layers apply the split SELU
/// and (optionally) complex batch norm; the final layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfclLayerCfg {
    pub in_dim: usize,
    pub out_dim: usize,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrgatConfig {
    pub crgals: Vec<CrgalLayerCfg>,
    pub cfcls: Vec<CfclLayerCfg>,
    pub leaky_slope: f64,
    /// Power budget enforced by the output projection (linear watts).
    pub p_max: f64,
    /// Disabling freezes the jump/initial residual paths at zero (the
    /// ablation variant).
    pub residual: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl CrgatConfig {
    /// Build a config from `(head_dim, heads)` per attention layer and
    /// hidden widths for the decoder; the final decoder layer maps back
    /// to `n_t` with no activation or batch norm.
    pub fn from_layers(n_t: usize, attention: &[(usize, usize)], hidden: &[usize], p_max: f64) -> Self {
        let mut crgals = Vec::new();
        let mut dim = n_t;
        for &(head_dim, heads) in attention {
            crgals.push(CrgalLayerCfg { in_dim: dim, head_dim, heads });
            dim = head_dim * heads;
        }
        let mut cfcls = Vec::new();
        for &h in hidden {
            cfcls.push(CfclLayerCfg { in_dim: dim, out_dim: h, batch_norm: true });
            dim = h;
        }
        cfcls.push(CfclLayerCfg { in_dim: dim, out_dim: n_t, batch_norm: false });
        CrgatConfig {
            crgals,
            cfcls,
            leaky_slope: 0.2,
            p_max,
            residual: true,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    /// The full-scale architecture: four attention layers of 10 heads
    /// (widths 32/64/128/256) and decoder 2560 -> 1024 -> 512 -> N_T.
    pub fn full_scale(n_t: usize, p_max: f64) -> Self {
        Self::from_layers(n_t, &[(32, 10), (64, 10), (128, 10), (256, 10)], &[1024, 512], p_max)
    }

    /// A small architecture for desk-scale experiments.
    pub fn desk(n_t: usize, p_max: f64) -> Self {
        Self::from_layers(n_t, &[(16, 4), (16, 4)], &[32], p_max)
    }

    pub fn n_t(&self) -> usize {
        self.crgals.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crgals.is_empty() || self.cfcls.is_empty() {
            return Err(Error::contract("architecture needs at least one attention and one decoder layer"));
        }
        let n_t = self.n_t();
        let mut dim = n_t;
        for (i, l) in self.crgals.iter().enumerate() {
            if l.in_dim != dim {
                return Err(Error::contract(format!("attention layer {i}: in_dim {} != {}", l.in_dim, dim)));
            }
            if l.head_dim == 0 || l.heads == 0 {
                return Err(Error::contract(format!("attention layer {i}: zero head_dim or heads")));
            }
            dim = l.out_dim();
        }
        for (i, c) in self.cfcls.iter().enumerate() {
            if c.in_dim != dim {
                return Err(Error::contract(format!("decoder layer {i}: in_dim {} != {}", c.in_dim, dim)));
            }
            dim = c.out_dim;
        }
        if dim != n_t {
            return Err(Error::contract(format!("final decoder width {dim} != n_t {n_t}")));
        }
        if self.cfcls.last().unwrap().batch_norm {
            return Err(Error::contract("the final decoder layer must not carry batch norm"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::contract(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        if !(self.p_max > 0.0) {
            return Err(Error::contract(format!("p_max {} must be positive", self.p_max)));
        }
        Ok(())
    }
}

/// Trainable parameters of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrgalParams {
    /// `heads x head_dim` attention vectors.
    pub attn: ComplexTensor,
    /// `heads x in_dim x head_dim` per-head transforms.
    pub theta: ComplexTensor,
    /// `in_dim x out_dim` jump-residual transform.
    pub theta_jump: ComplexTensor,
    /// `n_t x out_dim` initial-residual transform.
    pub theta_init: ComplexTensor,
    /// Real jump-residual weight.
    pub a_jump: f64,
    /// Real initial-residual weight.
    pub a_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    /// `[1, out_dim]`; re/im parts scale the re/im channels.
    pub gamma: ComplexTensor,
    pub beta: ComplexTensor,
    pub run_mean_re: Vec<f64>,
    pub run_mean_im: Vec<f64>,
    pub run_var_re: Vec<f64>,
    pub run_var_im: Vec<f64>,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfclParams {
    /// `in_dim x out_dim` transform.
    pub theta: ComplexTensor,
    pub bn: Option<BnState>,
}

/// Batch-norm statistics source for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Use batch statistics (training-style normalization).
    Train,
    /// Use running statistics; errors if they were never initialized.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrgatModel {
    pub config: CrgatConfig,
    pub crgals: Vec<CrgalParams>,
    pub cfcls: Vec<CfclParams>,
}

fn gaussian_tensor(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut DetRng) -> ComplexTensor {
    let n: usize = shape.iter().product();
    let std = (1.0 / (2.0 * (fan_in + fan_out) as f64)).sqrt();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for i in 0..n {
        re[i] = std * rng.normal();
        im[i] = std * rng.normal();
    }
    ComplexTensor::from_parts(shape.to_vec(), re, im).unwrap()
}

impl CrgatModel {
    /// Initialize parameters: complex Gaussian entries with per-part
    /// variance `1 / (2 (fan_in + fan_out))`, residual weights at 1,
    /// batch-norm gamma 1 and beta 0.
    pub fn init(config: CrgatConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let n_t = config.n_t();
        let residual = config.residual;
        let mut crgals = Vec::new();
        for l in &config.crgals {
            let (f_in, fd, d) = (l.in_dim, l.head_dim, l.heads);
            let out = l.out_dim();
            let attn = gaussian_tensor(&[d, fd], fd, 1, rng);
            let theta = gaussian_tensor(&[d, f_in, fd], f_in, fd, rng);
            let (theta_jump, theta_init, a_jump, a_init) = if residual {
                (
                    gaussian_tensor(&[f_in, out], f_in, out, rng),
                    gaussian_tensor(&[n_t, out], n_t, out, rng),
                    1.0,
                    1.0,
                )
            } else {
                (
                    ComplexTensor::zeros(&[f_in, out]),
                    ComplexTensor::zeros(&[n_t, out]),
                    0.0,
                    0.0,
                )
            };
            crgals.push(CrgalParams { attn, theta, theta_jump, theta_init, a_jump, a_init });
        }
        let mut cfcls = Vec::new();
        for c in &config.cfcls {
            let theta = gaussian_tensor(&[c.in_dim, c.out_dim], c.in_dim, c.out_dim, rng);
            let bn = c.batch_norm.then(|| BnState {
                gamma: ComplexTensor::from_parts(vec![1, c.out_dim], vec![1.0; c.out_dim], vec![1.0; c.out_dim])
                    .unwrap(),
                beta: ComplexTensor::zeros(&[1, c.out_dim]),
                run_mean_re: vec![0.0; c.out_dim],
                run_mean_im: vec![0.0; c.out_dim],
                run_var_re: vec![1.0; c.out_dim],
                run_var_im: vec![1.0; c.out_dim],
                initialized: false,
            });
            cfcls.push(CfclParams { theta, bn });
        }
        Ok(CrgatModel { config, crgals, cfcls })
    }

    /// Number of trainable real coordinates (complex entries count twice).
    pub fn trainable_real_dims(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(|t| {
            n += match t {
                Trainable::Tensor(ct) => 2 * ct.numel(),
                Trainable::Scalar(_) => 1,
            }
        });
        n
    }

    /// Walk trainable parameters in the documented fixed order.
    pub fn visit_trainable<'a>(&'a self, mut f: impl FnMut(Trainable<'a>)) {
        let residual = self.config.residual;
        for lp in &self.crgals {
            f(Trainable::Tensor(&lp.attn));
            f(Trainable::Tensor(&lp.theta));
            if residual {
                f(Trainable::Tensor(&lp.theta_jump));
                f(Trainable::Tensor(&lp.theta_init));
                f(Trainable::Scalar(&lp.a_jump));
                f(Trainable::Scalar(&lp.a_init));
            }
        }
        for cp in &self.cfcls {
            f(Trainable::Tensor(&cp.theta));
            if let Some(bn) = &cp.bn {
                f(Trainable::Tensor(&bn.gamma));
                f(Trainable::Tensor(&bn.beta));
            }
        }
    }

    /// Mutable walk in the same order as [`CrgatModel::visit_trainable`].
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(TrainableMut<'_>)) {
        let residual = self.config.residual;
        for lp in &mut self.crgals {
            f(TrainableMut::Tensor(&mut lp.attn));
            f(TrainableMut::Tensor(&mut lp.theta));
            if residual {
                f(TrainableMut::Tensor(&mut lp.theta_jump));
                f(TrainableMut::Tensor(&mut lp.theta_init));
                f(TrainableMut::Scalar(&mut lp.a_jump));
                f(TrainableMut::Scalar(&mut lp.a_init));
            }
        }
        for cp in &mut self.cfcls {
            f(TrainableMut::Tensor(&mut cp.theta));
            if let Some(bn) = &mut cp.bn {
                f(TrainableMut::Tensor(&mut bn.gamma));
                f(TrainableMut::Tensor(&mut bn.beta));
            }
        }
    }

    /// Flatten trainable parameters to a real vector (re then im per
    /// tensor), matching the visit order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_real_dims());
        self.visit_trainable(|t| match t {
            Trainable::Tensor(ct) => {
                out.extend_from_slice(ct.re());
                out.extend_from_slice(ct.im());
            }
            Trainable::Scalar(s) => out.push(*s),
        });
        out
    }

    /// Inverse of [`CrgatModel::flatten_trainable`].
    pub fn load_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_real_dims() {
            return Err(Error::contract(format!(
                "flat parameter vector has {} coords, model needs {}",
                flat.len(),
                self.trainable_real_dims()
            )));
        }
        let mut off = 0;
        self.visit_trainable_mut(|t| match t {
            TrainableMut::Tensor(ct) => {
                let n = ct.numel();
                ct.re_mut().copy_from_slice(&flat[off..off + n]);
                ct.im_mut().copy_from_slice(&flat[off + n..off + 2 * n]);
                off += 2 * n;
            }
            TrainableMut::Scalar(s) => {
                *s = flat[off];
                off += 1;
            }
        });
        Ok(())
    }

    /// Attach all trainable parameters to a tape as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let residual = self.config.residual;
        let crgals = self
            .crgals
            .iter()
            .map(|lp| BoundCrgal {
                attn: tape.leaf(&lp.attn),
                theta: tape.leaf(&lp.theta),
                theta_jump: residual.then(|| tape.leaf(&lp.theta_jump)),
                theta_init: residual.then(|| tape.leaf(&lp.theta_init)),
                a_jump: residual.then(|| tape.leaf(&ComplexTensor::scalar(lp.a_jump, 0.0))),
                a_init: residual.then(|| tape.leaf(&ComplexTensor::scalar(lp.a_init, 0.0))),
            })
            .collect();
        let cfcls = self
            .cfcls
            .iter()
            .map(|cp| BoundCfcl {
                theta: tape.leaf(&cp.theta),
                gamma: cp.bn.as_ref().map(|bn| tape.leaf(&bn.gamma)),
                beta: cp.bn.as_ref().map(|bn| tape.leaf(&bn.beta)),
            })
            .collect();
        Binding { crgals, cfcls }
    }

    /// Update running batch-norm statistics from the batch statistics of
    /// one training forward (momentum blend; unbiased variance).
    pub fn update_bn_running(&mut self, stats: &[BnBatchStats]) {
        let momentum = self.config.bn_momentum;
        let mut it = stats.iter();
        for cp in &mut self.cfcls {
            if let Some(bn) = &mut cp.bn {
                let st = it.next().expect("one stats record per batch-norm layer");
                let n = st.rows as f64;
                let unbias = if st.rows > 1 { n / (n - 1.0) } else { 1.0 };
                let blend = |run: &mut [f64], batch: &[f64], scale: f64| {
                    for (r, b) in run.iter_mut().zip(batch) {
                        *r = (1.0 - momentum) * *r + momentum * scale * b;
                    }
                };
                if !bn.initialized {
                    bn.run_mean_re.copy_from_slice(&st.mean_re);
                    bn.run_mean_im.copy_from_slice(&st.mean_im);
                    for (r, b) in bn.run_var_re.iter_mut().zip(&st.var_re) {
                        *r = unbias * b;
                    }
                    for (r, b) in bn.run_var_im.iter_mut().zip(&st.var_im) {
                        *r = unbias * b;
                    }
                    bn.initialized = true;
                } else {
                    blend(&mut bn.run_mean_re, &st.mean_re, 1.0);
                    blend(&mut bn.run_mean_im, &st.mean_im, 1.0);
                    blend(&mut bn.run_var_re, &st.var_re, unbias);
                    blend(&mut bn.run_var_im, &st.var_im, unbias);
                }
            }
        }
    }

    /// Single-sample forward pass (detached).
    pub fn forward(&self, h: &ComplexTensor, mode: Mode) -> Result<ComplexTensor> {
        let mut tape = Tape::inference();
        let binding = self.bind(&mut tape);
        let out = forward::forward_stacked(
            &mut tape,
            &self.config,
            &binding,
            h,
            &[0..h.rows()],
            mode,
            self,
            None,
        )?;
        Ok(out.w)
    }

    /// Single-sample forward that also returns each attention layer's
    /// output feature matrix (for the oversmoothing diagnostic).
    pub fn forward_with_trace(&self, h: &ComplexTensor, mode: Mode) -> Result<(ComplexTensor, Vec<ComplexTensor>)> {
        let mut tape = Tape::inference();
        let binding = self.bind(&mut tape);
        let mut trace = Vec::new();
        let out = forward::forward_stacked(
            &mut tape,
            &self.config,
            &binding,
            h,
            &[0..h.rows()],
            mode,
            self,
            Some(&mut trace),
        )?;
        Ok((out.w, trace))
    }

    /// Batched forward over stacked per-sample blocks (disjoint-union
    /// batching: attention neighborhoods never cross samples, batch norm
    /// sees all rows jointly, the power projection applies per block).
    pub fn forward_blocks(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        stacked: &ComplexTensor,
        blocks: &[Range<usize>],
        mode: Mode,
    ) -> Result<forward::ForwardOut> {
        forward::forward_stacked(tape, &self.config, binding, stacked, blocks, mode, self, None)
    }

    // Spec-level single operations, evaluated detached; the batched
    // forward above goes through the same taped code path.

    /// `K x K` attention coefficients for one layer and head.
    pub fn attention_coefficients(&self, h_layer: &ComplexTensor, layer: usize, head: usize) -> Result<ComplexTensor> {
        let mut tape = Tape::inference();
        let binding = self.bind(&mut tape);
        forward::attention_coefficients(&mut tape, &self.config, &binding.crgals[layer], layer, head, h_layer)
    }

    /// Attention-weighted neighbor aggregation for one head.
    pub fn aggregate_head(&self, h_layer: &ComplexTensor, layer: usize, head: usize) -> Result<ComplexTensor> {
        let mut tape = Tape::inference();
        let binding = self.bind(&mut tape);
        forward::aggregate_head(&mut tape, &self.config, &binding.crgals[layer], layer, head, h_layer)
    }

    /// Full attention layer: aggregation, residuals, split SELU.
    pub fn crgal_forward(
        &self,
        h_layer: &ComplexTensor,
        h_initial: &ComplexTensor,
        layer: usize,
    ) -> Result<ComplexTensor> {
        let mut tape = Tape::inference();
        let binding = self.bind(&mut tape);
        forward::crgal_forward(
            &mut tape,
            &self.config,
            &binding.crgals[layer],
            layer,
            h_layer,
            h_initial,
        )
    }

    /// One decoder layer.
    pub fn cfcl_forward(&self, h: &ComplexTensor, layer: usize, mode: Mode) -> Result<ComplexTensor> {
        let mut tape = Tape::inference();
        let binding = self.bind(&mut tape);
        forward::cfcl_forward(&mut tape, &self.config, self, &binding.cfcls[layer], layer, h, mode)
            .map(|(t, _)| t)
    }
}

/// Read-only view of one trainable parameter.
pub enum Trainable<'a> {
    Tensor(&'a ComplexTensor),
    Scalar(&'a f64),
}

pub enum TrainableMut<'a> {
    Tensor(&'a mut ComplexTensor),
    Scalar(&'a mut f64),
}

/// Tape leaves for all trainable parameters, in visit order.
pub struct Binding {
    pub crgals: Vec<BoundCrgal>,
    pub cfcls: Vec<BoundCfcl>,
}

pub struct BoundCrgal {
    pub attn: ComplexTensor,
    pub theta: ComplexTensor,
    pub theta_jump: Option<ComplexTensor>,
    pub theta_init: Option<ComplexTensor>,
    pub a_jump: Option<ComplexTensor>,
    pub a_init: Option<ComplexTensor>,
}

pub struct BoundCfcl {
    pub theta: ComplexTensor,
    pub gamma: Option<ComplexTensor>,
    pub beta: Option<ComplexTensor>,
}

impl Binding {
    /// Leaves in the same order as [`CrgatModel::visit_trainable`].
    pub fn leaves(&self) -> Vec<&ComplexTensor> {
        let mut out = Vec::new();
        for lp in &self.crgals {
            out.push(&lp.attn);
            out.push(&lp.theta);
            if let Some(t) = &lp.theta_jump {
                out.push(t);
            }
            if let Some(t) = &lp.theta_init {
                out.push(t);
            }
            if let Some(t) = &lp.a_jump {
                out.push(t);
            }
            if let Some(t) = &lp.a_init {
                out.push(t);
            }
        }
        for cp in &self.cfcls {
            out.push(&cp.theta);
            if let Some(t) = &cp.gamma {
                out.push(t);
            }
            if let Some(t) = &cp.beta {
                out.push(t);
            }
        }
        out
    }
}
