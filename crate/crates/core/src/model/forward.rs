//! Forward-pass operations, shared by training (taped) and inference
//! (detached) paths.

use super::{Binding, BoundCfcl, BoundCrgal, CrgatConfig, CrgatModel, Mode};
use crate::error::{Error, Result};
use crate::tensor::{BnBatchStats, ComplexTensor, Tape};
use std::ops::Range;

pub struct ForwardOut {
    /// Stacked beamforming output, one block per sample.
    pub w: ComplexTensor,
    /// Per-sample output nodes (the blocks of `w`).
    pub w_blocks: Vec<ComplexTensor>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<BnBatchStats>,
}

/// Per-head transform `Θ_(d,:,:)` as a 2-D leaf view.
fn head_theta(tape: &mut Tape, lp: &BoundCrgal, cfg: &CrgatConfig, layer: usize, head: usize) -> Result<ComplexTensor> {
    let l = &cfg.crgals[layer];
    let flat = tape.reshape(&lp.theta, &[l.heads, l.in_dim * l.head_dim])?;
    let row = tape.slice_rows(&flat, head, head + 1)?;
    tape.reshape(&row, &[l.in_dim, l.head_dim])
}

/// Raw attention scores for one head: transform both node features, sum
/// pairwise, apply the split LeakyReLU, take the inner product with the
/// attention vector (no conjugation) and the complex modulus.
fn attention_scores(
    tape: &mut Tape,
    cfg: &CrgatConfig,
    lp: &BoundCrgal,
    layer: usize,
    head: usize,
    transformed: &ComplexTensor,
) -> Result<ComplexTensor> {
    let _ = layer;
    let pair = tape.pairwise_row_sum(transformed)?;
    let act = tape.leaky_relu_c(&pair, cfg.leaky_slope)?;
    let a_row = tape.slice_rows(&lp.attn, head, head + 1)?;
    let inner = tape.contract_vec(&act, &a_row)?;
    Ok(tape.modulus(&inner))
}

/// `K x K` attention coefficients; row k sums to one over the other
/// nodes, the diagonal is zero. Errors when K = 1 (empty neighborhood).
pub fn attention_coefficients(
    tape: &mut Tape,
    cfg: &CrgatConfig,
    lp: &BoundCrgal,
    layer: usize,
    head: usize,
    h_layer: &ComplexTensor,
) -> Result<ComplexTensor> {
    if h_layer.rows() < 2 {
        return Err(Error::contract("attention needs at least two users (K >= 2)"));
    }
    let theta_d = head_theta(tape, lp, cfg, layer, head)?;
    let t = tape.matmul(h_layer, &theta_d)?;
    let scores = attention_scores(tape, cfg, lp, layer, head, &t)?;
    tape.neighbor_softmax(&scores)
}

/// Aggregated feature of every node for one head:
/// `β_k = Σ_{j≠k} α_{k,j} · (H_(j,:) Θ_d)`.
pub fn aggregate_head(
    tape: &mut Tape,
    cfg: &CrgatConfig,
    lp: &BoundCrgal,
    layer: usize,
    head: usize,
    h_layer: &ComplexTensor,
) -> Result<ComplexTensor> {
    if h_layer.rows() < 2 {
        return Err(Error::contract("attention needs at least two users (K >= 2)"));
    }
    let theta_d = head_theta(tape, lp, cfg, layer, head)?;
    let t = tape.matmul(h_layer, &theta_d)?;
    let scores = attention_scores(tape, cfg, lp, layer, head, &t)?;
    let alpha = tape.neighbor_softmax(&scores)?;
    tape.real_matmul_complex(&alpha, &t)
}

/// Head concatenation plus the two residual paths, then the split SELU.
pub fn crgal_forward(
    tape: &mut Tape,
    cfg: &CrgatConfig,
    lp: &BoundCrgal,
    layer: usize,
    h_layer: &ComplexTensor,
    h_initial: &ComplexTensor,
) -> Result<ComplexTensor> {
    let lcfg = &cfg.crgals[layer];
    if h_layer.cols() != lcfg.in_dim {
        return Err(Error::shape(
            "crgal_forward",
            format!("input width {} != layer in_dim {}", h_layer.cols(), lcfg.in_dim),
        ));
    }
    let mut heads = Vec::with_capacity(lcfg.heads);
    for d in 0..lcfg.heads {
        heads.push(aggregate_head(tape, cfg, lp, layer, d, h_layer)?);
    }
    let refs: Vec<&ComplexTensor> = heads.iter().collect();
    let mut net = tape.concat_cols(&refs)?;
    if cfg.residual {
        let jump = tape.matmul(h_layer, lp.theta_jump.as_ref().unwrap())?;
        let jump = tape.mul_scalar(&jump, lp.a_jump.as_ref().unwrap())?;
        let init = tape.matmul(h_initial, lp.theta_init.as_ref().unwrap())?;
        let init = tape.mul_scalar(&init, lp.a_init.as_ref().unwrap())?;
        net = tape.add(&net, &jump)?;
        net = tape.add(&net, &init)?;
    }
    Ok(tape.cselu(&net))
}

/// One decoder layer. Intermediate layers apply the split SELU and then
/// batch norm; the final layer returns the raw product.
pub fn cfcl_forward(
    tape: &mut Tape,
    cfg: &CrgatConfig,
    model: &CrgatModel,
    cp: &BoundCfcl,
    layer: usize,
    h: &ComplexTensor,
    mode: Mode,
) -> Result<(ComplexTensor, Option<BnBatchStats>)> {
    let last = layer + 1 == cfg.cfcls.len();
    let mut x = tape.matmul(h, &cp.theta)?;
    if last {
        return Ok((x, None));
    }
    x = tape.cselu(&x);
    if let Some(bn) = &model.cfcls[layer].bn {
        let gamma = cp.gamma.as_ref().unwrap();
        let beta = cp.beta.as_ref().unwrap();
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(&x, gamma, beta, cfg.bn_epsilon)?;
                return Ok((y, Some(stats)));
            }
            Mode::Eval => {
                if !bn.initialized {
                    return Err(Error::contract(format!(
                        "decoder layer {layer}: eval-mode batch norm with uninitialized running statistics"
                    )));
                }
                let y = tape.batchnorm_eval(
                    &x,
                    gamma,
                    beta,
                    (&bn.run_mean_re, &bn.run_mean_im),
                    (&bn.run_var_re, &bn.run_var_im),
                    cfg.bn_epsilon,
                )?;
                return Ok((y, None));
            }
        }
    }
    Ok((x, None))
}

/// Scale the raw decoder output onto the sum-power ball: inputs inside
/// the unit ball are scaled by `sqrt(p_max)`, larger ones are normalized
/// so the output power is exactly `p_max`. The scaling stays on the tape.
pub fn power_project(tape: &mut Tape, h_out: &ComplexTensor, p_max: f64) -> Result<ComplexTensor> {
    if !(p_max > 0.0) {
        return Err(Error::contract(format!("power_project: p_max must be positive, got {p_max}")));
    }
    let msq = tape.modulus_sq(h_out);
    let nsq = tape.sum_all(&msq);
    let saturated = nsq.re()[0] > 1.0;
    tape.note_branch(saturated);
    if !saturated {
        Ok(tape.scale_const(h_out, p_max.sqrt()))
    } else {
        let n = tape.sqrt_re(&nsq);
        let s = tape.scalar_div_const(p_max.sqrt(), &n);
        tape.mul_scalar(h_out, &s)
    }
}

/// Full forward over stacked sample blocks.
#[allow(clippy::too_many_arguments)]
pub fn forward_stacked(
    tape: &mut Tape,
    cfg: &CrgatConfig,
    binding: &Binding,
    stacked: &ComplexTensor,
    blocks: &[Range<usize>],
    mode: Mode,
    model: &CrgatModel,
    mut trace: Option<&mut Vec<ComplexTensor>>,
) -> Result<ForwardOut> {
    if stacked.cols() != cfg.n_t() {
        return Err(Error::shape(
            "forward",
            format!("input width {} != n_t {}", stacked.cols(), cfg.n_t()),
        ));
    }
    if !stacked.all_finite() {
        return Err(Error::contract("forward: input contains non-finite entries"));
    }
    for b in blocks {
        if b.len() < 2 {
            return Err(Error::contract("forward: every sample needs K >= 2 users"));
        }
    }
    let x_init = stacked.clone();
    let mut x = stacked.clone();

    for (layer, lp) in binding.crgals.iter().enumerate() {
        let lcfg = &cfg.crgals[layer];
        // Shared per-head transforms on the stacked features; attention
        // itself is confined to each sample block.
        let mut head_ts = Vec::with_capacity(lcfg.heads);
        for d in 0..lcfg.heads {
            let theta_d = head_theta(tape, lp, cfg, layer, d)?;
            head_ts.push(tape.matmul(&x, &theta_d)?);
        }
        let mut block_outs = Vec::with_capacity(blocks.len());
        for b in blocks {
            let mut heads = Vec::with_capacity(lcfg.heads);
            for (d, t_full) in head_ts.iter().enumerate() {
                let t_b = tape.slice_rows(t_full, b.start, b.end)?;
                let scores = attention_scores(tape, cfg, lp, layer, d, &t_b)?;
                let alpha = tape.neighbor_softmax(&scores)?;
                heads.push(tape.real_matmul_complex(&alpha, &t_b)?);
            }
            let refs: Vec<&ComplexTensor> = heads.iter().collect();
            block_outs.push(tape.concat_cols(&refs)?);
        }
        let refs: Vec<&ComplexTensor> = block_outs.iter().collect();
        let mut net = tape.concat_rows(&refs)?;
        if cfg.residual {
            let jump = tape.matmul(&x, lp.theta_jump.as_ref().unwrap())?;
            let jump = tape.mul_scalar(&jump, lp.a_jump.as_ref().unwrap())?;
            let init = tape.matmul(&x_init, lp.theta_init.as_ref().unwrap())?;
            let init = tape.mul_scalar(&init, lp.a_init.as_ref().unwrap())?;
            net = tape.add(&net, &jump)?;
            net = tape.add(&net, &init)?;
        }
        x = tape.cselu(&net);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(x.detach());
        }
    }

    let mut bn_stats = Vec::new();
    for (layer, cp) in binding.cfcls.iter().enumerate() {
        let (y, stats) = cfcl_forward(tape, cfg, model, cp, layer, &x, mode)?;
        x = y;
        if let Some(s) = stats {
            bn_stats.push(s);
        }
    }

    let mut outs = Vec::with_capacity(blocks.len());
    for b in blocks {
        let xb = tape.slice_rows(&x, b.start, b.end)?;
        outs.push(power_project(tape, &xb, cfg.p_max)?);
    }
    let refs: Vec<&ComplexTensor> = outs.iter().collect();
    let w = tape.concat_rows(&refs)?;
    Ok(ForwardOut { w, w_blocks: outs, bn_stats })
}
