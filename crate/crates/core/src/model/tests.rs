use super::*;
use crate::rng::DetRng;
use crate::tensor::{ComplexTensor, SELU_ALPHA, SELU_LAMBDA};
use num_complex::Complex64;

type C = Complex64;

fn rand_h(rng: &mut DetRng, k: usize, nt: usize) -> ComplexTensor {
    let n = k * nt;
    let re: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let im: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    ComplexTensor::from_parts(vec![k, nt], re, im).unwrap()
}

fn cat(t: &ComplexTensor, i: usize, j: usize) -> C {
    let (r, im) = t.at2(i, j);
    C::new(r, im)
}

fn rows_of(t: &ComplexTensor) -> Vec<Vec<C>> {
    (0..t.rows()).map(|i| (0..t.cols()).map(|j| cat(t, i, j)).collect()).collect()
}

/// Head transform `Θ_(d,:,:)` from the 3-D parameter tensor.
fn theta_head_rows(lp: &CrgalParams, f_in: usize, f_out: usize, d: usize) -> Vec<Vec<C>> {
    let mut out = vec![vec![C::new(0.0, 0.0); f_out]; f_in];
    for f in 0..f_in {
        for c in 0..f_out {
            let idx = (d * f_in + f) * f_out + c;
            out[f][c] = C::new(lp.theta.re()[idx], lp.theta.im()[idx]);
        }
    }
    out
}

fn vecmat(v: &[C], m: &[Vec<C>]) -> Vec<C> {
    let cols = m[0].len();
    let mut out = vec![C::new(0.0, 0.0); cols];
    for (f, vf) in v.iter().enumerate() {
        for c in 0..cols {
            out[c] += vf * m[f][c];
        }
    }
    out
}

fn leaky(z: C, slope: f64) -> C {
    let f = |x: f64| if x > 0.0 { x } else { slope * x };
    C::new(f(z.re), f(z.im))
}

fn selu_c(z: C) -> C {
    let f = |x: f64| {
        if x > 0.0 {
            SELU_LAMBDA * x
        } else {
            SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
        }
    };
    C::new(f(z.re), f(z.im))
}

/// Direct scalar evaluation of the attention coefficients (no tensor ops).
fn oracle_alpha(model: &CrgatModel, h: &ComplexTensor, layer: usize, head: usize) -> Vec<Vec<f64>> {
    let lcfg = &model.config.crgals[layer];
    let lp = &model.crgals[layer];
    let hrows = rows_of(h);
    let th = theta_head_rows(lp, lcfg.in_dim, lcfg.head_dim, head);
    let t: Vec<Vec<C>> = hrows.iter().map(|r| vecmat(r, &th)).collect();
    let a_d: Vec<C> = (0..lcfg.head_dim).map(|c| cat(&lp.attn, head, c)).collect();
    let k = h.rows();
    let mut score = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut inner = C::new(0.0, 0.0);
            for f in 0..lcfg.head_dim {
                inner += leaky(t[i][f] + t[j][f], model.config.leaky_slope) * a_d[f];
            }
            score[i][j] = inner.norm();
        }
    }
    let mut alpha = vec![vec![0.0; k]; k];
    for i in 0..k {
        let z: f64 = (0..k).filter(|&j| j != i).map(|j| score[i][j].exp()).sum();
        for j in 0..k {
            if j != i {
                alpha[i][j] = score[i][j].exp() / z;
            }
        }
    }
    alpha
}

fn oracle_aggregate(model: &CrgatModel, h: &ComplexTensor, layer: usize, head: usize) -> Vec<Vec<C>> {
    let lcfg = &model.config.crgals[layer];
    let lp = &model.crgals[layer];
    let hrows = rows_of(h);
    let th = theta_head_rows(lp, lcfg.in_dim, lcfg.head_dim, head);
    let t: Vec<Vec<C>> = hrows.iter().map(|r| vecmat(r, &th)).collect();
    let alpha = oracle_alpha(model, h, layer, head);
    let k = h.rows();
    let mut out = vec![vec![C::new(0.0, 0.0); lcfg.head_dim]; k];
    for i in 0..k {
        for j in 0..k {
            if j != i {
                for f in 0..lcfg.head_dim {
                    out[i][f] += alpha[i][j] * t[j][f];
                }
            }
        }
    }
    out
}

fn oracle_crgal(model: &CrgatModel, h: &ComplexTensor, h_init: &ComplexTensor, layer: usize) -> Vec<Vec<C>> {
    let lcfg = &model.config.crgals[layer];
    let lp = &model.crgals[layer];
    let k = h.rows();
    let out_dim = lcfg.out_dim();
    let mut net = vec![vec![C::new(0.0, 0.0); out_dim]; k];
    for d in 0..lcfg.heads {
        let beta = oracle_aggregate(model, h, layer, d);
        for i in 0..k {
            for f in 0..lcfg.head_dim {
                net[i][d * lcfg.head_dim + f] = beta[i][f];
            }
        }
    }
    if model.config.residual {
        let jump = rows_of(&lp.theta_jump);
        let init = rows_of(&lp.theta_init);
        let hrows = rows_of(h);
        let irows = rows_of(h_init);
        for i in 0..k {
            let j = vecmat(&hrows[i], &jump);
            let t = vecmat(&irows[i], &init);
            for c in 0..out_dim {
                net[i][c] += lp.a_jump * j[c] + lp.a_init * t[c];
            }
        }
    }
    net.iter().map(|row| row.iter().map(|&z| selu_c(z)).collect()).collect()
}

fn small_model(seed: u64) -> CrgatModel {
    let cfg = CrgatConfig::from_layers(3, &[(4, 2), (3, 2)], &[5], 1.5);
    CrgatModel::init(cfg, &mut DetRng::new(seed, 0)).unwrap()
}

#[test]
fn attention_identical_features_uniform() {
    let model = small_model(1);
    let k = 4;
    let row = [0.3, -0.7, 1.1];
    let mut re = Vec::new();
    for _ in 0..k {
        re.extend_from_slice(&row);
    }
    let h = ComplexTensor::from_re(vec![k, 3], re).unwrap();
    let alpha = model.attention_coefficients(&h, 0, 1).unwrap();
    for i in 0..k {
        for j in 0..k {
            let want = if i == j { 0.0 } else { 1.0 / (k - 1) as f64 };
            assert!((alpha.re()[i * k + j] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_two_users_single_neighbor() {
    let model = small_model(2);
    let mut rng = DetRng::new(3, 0);
    let h = rand_h(&mut rng, 2, 3);
    let alpha = model.attention_coefficients(&h, 0, 0).unwrap();
    assert!((alpha.re()[1] - 1.0).abs() <= 1e-15);
    assert!((alpha.re()[2] - 1.0).abs() <= 1e-15);
    assert_eq!(alpha.re()[0], 0.0);
    assert_eq!(alpha.re()[3], 0.0);
}

#[test]
fn attention_matches_scalar_oracle() {
    let model = small_model(4);
    let mut rng = DetRng::new(5, 0);
    let h = rand_h(&mut rng, 3, 3);
    for head in 0..2 {
        let alpha = model.attention_coefficients(&h, 0, head).unwrap();
        let oracle = oracle_alpha(&model, &h, 0, head);
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (alpha.re()[i * 3 + j] - oracle[i][j]).abs() <= 1e-12,
                    "({i},{j}) head {head}"
                );
            }
        }
    }
}

#[test]
fn attention_single_user_is_contract_error() {
    let model = small_model(6);
    let mut rng = DetRng::new(6, 0);
    let h = rand_h(&mut rng, 1, 3);
    assert!(matches!(
        model.attention_coefficients(&h, 0, 0),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn aggregate_two_users_is_neighbor_transform() {
    let model = small_model(7);
    let mut rng = DetRng::new(8, 0);
    let h = rand_h(&mut rng, 2, 3);
    let beta = model.aggregate_head(&h, 0, 0).unwrap();
    let lcfg = &model.config.crgals[0];
    let th = theta_head_rows(&model.crgals[0], lcfg.in_dim, lcfg.head_dim, 0);
    let t2 = vecmat(&rows_of(&h)[1], &th);
    for f in 0..lcfg.head_dim {
        let got = cat(&beta, 0, f);
        assert!((got - t2[f]).norm() <= 1e-12);
    }
}

#[test]
fn aggregate_zero_features_zero_output() {
    let model = small_model(9);
    let h = ComplexTensor::zeros(&[3, 3]);
    let beta = model.aggregate_head(&h, 0, 1).unwrap();
    assert!(beta.re().iter().chain(beta.im()).all(|&v| v == 0.0));
}

#[test]
fn aggregate_matches_scalar_oracle() {
    let model = small_model(10);
    let mut rng = DetRng::new(11, 0);
    let h = rand_h(&mut rng, 3, 3);
    let beta = model.aggregate_head(&h, 0, 1).unwrap();
    let oracle = oracle_aggregate(&model, &h, 0, 1);
    for i in 0..3 {
        for f in 0..model.config.crgals[0].head_dim {
            assert!((cat(&beta, i, f) - oracle[i][f]).norm() <= 1e-12);
        }
    }
}

#[test]
fn crgal_residuals_off_reduces_to_heads() {
    let mut model = small_model(12);
    model.crgals[0].a_jump = 0.0;
    model.crgals[0].a_init = 0.0;
    let mut rng = DetRng::new(13, 0);
    let h = rand_h(&mut rng, 3, 3);
    let out = model.crgal_forward(&h, &h, 0).unwrap();

    let lcfg = &model.config.crgals[0];
    let mut expect = vec![vec![C::new(0.0, 0.0); lcfg.out_dim()]; 3];
    for d in 0..lcfg.heads {
        let beta = oracle_aggregate(&model, &h, 0, d);
        for i in 0..3 {
            for f in 0..lcfg.head_dim {
                expect[i][d * lcfg.head_dim + f] = selu_c(beta[i][f]);
            }
        }
    }
    for i in 0..3 {
        for c in 0..lcfg.out_dim() {
            assert!((cat(&out, i, c) - expect[i][c]).norm() <= 1e-12);
        }
    }
}

#[test]
fn crgal_pure_jump_path() {
    let mut model = small_model(14);
    let lcfg = model.config.crgals[0].clone();
    let lp = &mut model.crgals[0];
    lp.theta = ComplexTensor::zeros(&[lcfg.heads, lcfg.in_dim, lcfg.head_dim]);
    lp.a_init = 0.0;
    lp.a_jump = 1.0;
    // block identity: copies the input into the first in_dim columns
    let mut jump = ComplexTensor::zeros(&[lcfg.in_dim, lcfg.out_dim()]);
    for i in 0..lcfg.in_dim {
        jump.re_mut()[i * lcfg.out_dim() + i] = 1.0;
    }
    lp.theta_jump = jump;

    let mut rng = DetRng::new(15, 0);
    let h = rand_h(&mut rng, 3, 3);
    let out = model.crgal_forward(&h, &h, 0).unwrap();
    for i in 0..3 {
        for c in 0..lcfg.out_dim() {
            let want = if c < lcfg.in_dim { selu_c(cat(&h, i, c)) } else { C::new(0.0, 0.0) };
            assert!((cat(&out, i, c) - want).norm() <= 1e-12, "({i},{c})");
        }
    }
}

#[test]
fn crgal_matches_scalar_oracle() {
    let model = small_model(16);
    let mut rng = DetRng::new(17, 0);
    let h = rand_h(&mut rng, 3, 3);
    let out = model.crgal_forward(&h, &h, 0).unwrap();
    let oracle = oracle_crgal(&model, &h, &h, 0);
    for i in 0..3 {
        for c in 0..model.config.crgals[0].out_dim() {
            assert!((cat(&out, i, c) - oracle[i][c]).norm() <= 1e-12);
        }
    }
}

#[test]
fn cfcl_eval_identity_bn() {
    let mut model = small_model(18);
    {
        let bn = model.cfcls[0].bn.as_mut().unwrap();
        bn.initialized = true;
        // mean 0, var 1 - eps so (var + eps) = 1 exactly, gamma 1, beta 0
        for v in bn.run_var_re.iter_mut().chain(bn.run_var_im.iter_mut()) {
            *v = 1.0 - model.config.bn_epsilon;
        }
    }
    let mut rng = DetRng::new(19, 0);
    let h = rand_h(&mut rng, 3, model.config.cfcls[0].in_dim);
    let out = model.cfcl_forward(&h, 0, Mode::Eval).unwrap();

    // identity BN leaves SELU(h theta) unchanged
    let theta = rows_of(&model.cfcls[0].theta);
    let hrows = rows_of(&h);
    for i in 0..3 {
        let prod = vecmat(&hrows[i], &theta);
        for c in 0..model.config.cfcls[0].out_dim {
            assert!((cat(&out, i, c) - selu_c(prod[c])).norm() <= 1e-12);
        }
    }
}

#[test]
fn cfcl_train_mode_normalizes_batch() {
    let model = small_model(20);
    let mut rng = DetRng::new(21, 0);
    let rows = 16;
    let h = rand_h(&mut rng, rows, model.config.cfcls[0].in_dim);
    let out = model.cfcl_forward(&h, 0, Mode::Train).unwrap();
    // gamma starts at 1 and beta at 0, so the output is the normalized
    // activation: per-channel mean 0 and variance 1 (up to eps).
    let g = model.config.cfcls[0].out_dim;
    for c in 0..g {
        let mean: f64 = (0..rows).map(|r| out.re()[r * g + c]).sum::<f64>() / rows as f64;
        let var: f64 = (0..rows).map(|r| (out.re()[r * g + c] - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!(mean.abs() <= 1e-6, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "channel {c} var {var}");
        let mean_i: f64 = (0..rows).map(|r| out.im()[r * g + c]).sum::<f64>() / rows as f64;
        assert!(mean_i.abs() <= 1e-6);
    }
}

#[test]
fn cfcl_eval_uninitialized_stats_is_contract_error() {
    let model = small_model(22);
    let mut rng = DetRng::new(23, 0);
    let h = rand_h(&mut rng, 3, model.config.cfcls[0].in_dim);
    assert!(matches!(model.cfcl_forward(&h, 0, Mode::Eval), Err(crate::Error::Contract(_))));
}

#[test]
fn cfcl_matches_composed_scalar_oracle() {
    let model = small_model(24);
    let mut rng = DetRng::new(25, 0);
    let rows = 5;
    let h = rand_h(&mut rng, rows, model.config.cfcls[0].in_dim);
    let out = model.cfcl_forward(&h, 0, Mode::Train).unwrap();

    // scalar evaluation of BN(SELU(h theta)) with batch statistics
    let theta = rows_of(&model.cfcls[0].theta);
    let hrows = rows_of(&h);
    let acts: Vec<Vec<C>> = hrows.iter().map(|r| vecmat(r, &theta).iter().map(|&z| selu_c(z)).collect()).collect();
    let g = model.config.cfcls[0].out_dim;
    let eps = model.config.bn_epsilon;
    for c in 0..g {
        for part in 0..2 {
            let take = |z: &C| if part == 0 { z.re } else { z.im };
            let mean: f64 = acts.iter().map(|r| take(&r[c])).sum::<f64>() / rows as f64;
            let var: f64 = acts.iter().map(|r| (take(&r[c]) - mean).powi(2)).sum::<f64>() / rows as f64;
            for (r, row) in acts.iter().enumerate() {
                let want = (take(&row[c]) - mean) / (var + eps).sqrt();
                let got = if part == 0 { out.re()[r * g + c] } else { out.im()[r * g + c] };
                assert!((got - want).abs() <= 1e-9, "row {r} ch {c} part {part}");
            }
        }
    }
}

#[test]
fn power_project_branches() {
    let mut tape = crate::tensor::Tape::inference();
    // ‖x‖_F = 0.5 -> scaled by sqrt(p_max), power 0.25·p_max
    let x = ComplexTensor::from_re(vec![1, 1], vec![0.5]).unwrap();
    let y = power_project(&mut tape, &x, 1.0).unwrap();
    assert!((y.fro_norm() - 0.5).abs() <= 1e-15);

    // ‖x‖_F = 2 -> output power exactly p_max
    let x2 = ComplexTensor::from_re(vec![1, 1], vec![2.0]).unwrap();
    let y2 = power_project(&mut tape, &x2, 4.0).unwrap();
    assert!((y2.fro_norm() * y2.fro_norm() - 4.0).abs() <= 1e-12);

    assert!(power_project(&mut tape, &x, 0.0).is_err());
}

#[test]
fn power_project_always_feasible_and_scale_invariant() {
    let mut rng = DetRng::new(26, 0);
    let mut tape = crate::tensor::Tape::inference();
    for i in 0..10_000 {
        let p_max = [1.0, 2.0, 3.0][i % 3];
        let scale = 10f64.powf(rng.uniform_in(-2.0, 2.0));
        let mut x = rand_h(&mut rng, 2, 3);
        for v in x.re_mut().iter_mut() {
            *v *= scale;
        }
        for v in x.im_mut().iter_mut() {
            *v *= scale;
        }
        let y = power_project(&mut tape, &x, p_max).unwrap();
        let power = y.fro_norm().powi(2);
        assert!(power <= p_max * (1.0 + 1e-12), "power {power} > {p_max}");

        // direction-only dependence in the saturated branch
        if x.fro_norm() > 1.0 {
            let c = 1.0 + rng.uniform();
            let xc = ComplexTensor::from_parts(
                x.shape().to_vec(),
                x.re().iter().map(|v| c * v).collect(),
                x.im().iter().map(|v| c * v).collect(),
            )
            .unwrap();
            let yc = power_project(&mut tape, &xc, p_max).unwrap();
            assert!(y.max_abs_diff(&yc) <= 1e-12);
        }
    }
}

fn init_bn_stats(model: &mut CrgatModel, k: usize, seed: u64) {
    let mut rng = DetRng::new(seed, 0);
    let h = rand_h(&mut rng, k, model.config.n_t());
    let mut tape = crate::tensor::Tape::inference();
    let binding = model.bind(&mut tape);
    let out = model
        .forward_blocks(&mut tape, &binding, &h, &[0..k], Mode::Train)
        .unwrap();
    model.update_bn_running(&out.bn_stats);
}

#[test]
fn forward_shape_and_power() {
    let mut model = small_model(27);
    init_bn_stats(&mut model, 5, 270);
    let mut rng = DetRng::new(28, 0);
    let h = rand_h(&mut rng, 4, 3);
    let w = model.forward(&h, Mode::Eval).unwrap();
    assert_eq!(w.shape(), h.shape());
    assert!(w.fro_norm().powi(2) <= model.config.p_max * (1.0 + 1e-12));
}

#[test]
fn forward_is_permutation_equivariant() {
    let mut model = small_model(29);
    init_bn_stats(&mut model, 6, 290);
    let mut rng = DetRng::new(30, 0);
    for trial in 0..50 {
        let k = 3 + (trial % 4);
        let h = rand_h(&mut rng, k, 3);
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let w = model.forward(&h, Mode::Eval).unwrap();
        let wp = model.forward(&h.permute_rows(&perm), Mode::Eval).unwrap();
        let diff = wp.max_abs_diff(&w.permute_rows(&perm));
        assert!(diff <= 1e-9, "trial {trial}: deviation {diff}");
    }
}

#[test]
fn forward_handles_different_user_counts_unchanged() {
    let mut model = small_model(31);
    init_bn_stats(&mut model, 4, 310);
    let before = parameter_byte_size(&model);
    let mut rng = DetRng::new(32, 0);
    for k in [2, 7, 9] {
        let h = rand_h(&mut rng, k, 3);
        let w = model.forward(&h, Mode::Eval).unwrap();
        assert_eq!(w.shape(), &[k, 3]);
    }
    assert_eq!(parameter_byte_size(&model), before);
}

#[test]
fn forward_single_user_is_contract_error() {
    let model = small_model(33);
    let mut rng = DetRng::new(34, 0);
    let h = rand_h(&mut rng, 1, 3);
    assert!(matches!(model.forward(&h, Mode::Train), Err(crate::Error::Contract(_))));
}

#[test]
fn init_entry_variance_matches_target() {
    let cfg = CrgatConfig::from_layers(8, &[(32, 4), (64, 4)], &[16], 1.0);
    let model = CrgatModel::init(cfg, &mut DetRng::new(35, 0)).unwrap();
    // second-layer transform: 4 x 128 x 64 entries, fan 128 -> 64
    let t = &model.crgals[1].theta;
    let target = 1.0 / (2.0 * (128 + 64) as f64);
    let n = t.numel() as f64;
    let var_re: f64 = t.re().iter().map(|v| v * v).sum::<f64>() / n;
    let var_im: f64 = t.im().iter().map(|v| v * v).sum::<f64>() / n;
    assert!((var_re - target).abs() <= 0.05 * target, "re {var_re} vs {target}");
    assert!((var_im - target).abs() <= 0.05 * target, "im {var_im} vs {target}");
}

#[test]
fn init_is_deterministic() {
    let a = small_model(36);
    let b = small_model(36);
    assert_eq!(a, b);
    assert_ne!(a, small_model(37));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let mut model = small_model(38);
    init_bn_stats(&mut model, 4, 380);
    let meta = CheckpointMeta {
        loss_kind: Some("ldm".to_string()),
        optimizer_state: true,
        mu: Some(vec![0.0, 0.25, 1.5]),
        epoch: 7,
    };
    let mut buf = Vec::new();
    write_checkpoint(&model, &meta, &mut buf).unwrap();
    let (loaded, meta2) = read_checkpoint(&buf).unwrap();
    assert_eq!(model, loaded);
    assert_eq!(meta, meta2);
}

#[test]
fn checkpoint_truncation_is_format_error() {
    let model = small_model(39);
    let mut buf = Vec::new();
    write_checkpoint(&model, &CheckpointMeta::default(), &mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(matches!(read_checkpoint(&buf), Err(crate::Error::Format { .. })));
}

#[test]
fn no_residual_variant_has_fewer_trainables() {
    let mut cfg = CrgatConfig::from_layers(3, &[(4, 2)], &[5], 1.0);
    let full = CrgatModel::init(cfg.clone(), &mut DetRng::new(40, 0)).unwrap();
    cfg.residual = false;
    let ablated = CrgatModel::init(cfg, &mut DetRng::new(40, 0)).unwrap();
    let lcfg = &full.config.crgals[0];
    let removed = 2 * (lcfg.in_dim * lcfg.out_dim()) * 2  // jump + init transforms (re+im)
        + 2; // the two scalar weights
    assert_eq!(full.trainable_real_dims() - ablated.trainable_real_dims(), removed);
    assert_eq!(ablated.crgals[0].a_jump, 0.0);
    assert_eq!(ablated.crgals[0].a_init, 0.0);
}
