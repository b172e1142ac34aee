use super::*;
use crate::channel::{generate_with_counts, ScenarioConfig};
use crate::model::CrgatConfig;
use crate::tensor::finite_diff_check;

fn rand_mat(rng: &mut DetRng, k: usize, nt: usize) -> ComplexTensor {
    let n = k * nt;
    let re: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let im: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    ComplexTensor::from_parts(vec![k, nt], re, im).unwrap()
}

#[test]
fn single_user_unit_gain_rate_is_one() {
    let h = ComplexTensor::from_re(vec![1, 1], vec![1.0]).unwrap();
    let w = ComplexTensor::from_re(vec![1, 1], vec![1.0]).unwrap();
    let r = sum_rate(&h, &w, 1.0).unwrap();
    assert!((r.0[0] - 1.0).abs() <= 1e-15);
}

#[test]
fn zero_beams_zero_rates() {
    let mut rng = DetRng::new(1, 0);
    let h = rand_mat(&mut rng, 3, 2);
    let w = ComplexTensor::zeros(&[3, 2]);
    let r = sum_rate(&h, &w, 1.0).unwrap();
    assert!(r.0.iter().all(|&v| v == 0.0));
}

#[test]
fn matrix_form_matches_per_vector_form() {
    let mut rng = DetRng::new(2, 0);
    for _ in 0..20 {
        let h = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 3, 4);
        let matrix = sum_rate(&h, &w, 1.0).unwrap().0;
        let direct = rates_direct(&h, &w, 1.0);
        for k in 0..3 {
            assert!((matrix[k] - direct[k]).abs() <= 1e-12, "user {k}");
        }
    }
}

/// Double-loop scalar oracle for the batch losses.
fn loss_oracle(batch: &[(&ComplexTensor, &ComplexTensor)], weights: &[f64], r_req: f64) -> f64 {
    let mut total = 0.0;
    for (h, w) in batch {
        let rates = rates_direct(h, w, 1.0);
        let mut term = 0.0;
        for (k, r) in rates.iter().enumerate() {
            term += -r + weights[k] * (r_req - r).max(0.0);
        }
        total += term;
    }
    total / batch.len() as f64
}

#[test]
fn pm_loss_penalty_inactive_when_feasible() {
    let mut rng = DetRng::new(3, 0);
    let h = rand_mat(&mut rng, 2, 3);
    let w = rand_mat(&mut rng, 2, 3);
    let mut tape = Tape::inference();
    let loss = pm_loss(&mut tape, &[(&h, &w)], 7.0, 0.0, 1.0).unwrap();
    let sum: f64 = rates_direct(&h, &w, 1.0).iter().sum();
    assert!((loss.re()[0] + sum).abs() <= 1e-12);
}

#[test]
fn pm_loss_zero_beams_is_lambda_k_rreq() {
    let mut rng = DetRng::new(4, 0);
    let h = rand_mat(&mut rng, 4, 2);
    let w = ComplexTensor::zeros(&[4, 2]);
    let mut tape = Tape::inference();
    let loss = pm_loss(&mut tape, &[(&h, &w)], 10.0, 1.0, 1.0).unwrap();
    assert!((loss.re()[0] - 40.0).abs() <= 1e-12);
}

#[test]
fn losses_match_scalar_oracle() {
    let mut rng = DetRng::new(5, 0);
    let hs: Vec<ComplexTensor> = (0..4).map(|_| rand_mat(&mut rng, 3, 2)).collect();
    let ws: Vec<ComplexTensor> = (0..4).map(|_| rand_mat(&mut rng, 3, 2)).collect();
    let batch: Vec<(&ComplexTensor, &ComplexTensor)> = hs.iter().zip(&ws).collect();
    let lambda = 3.5;
    let r_req = 1.2;
    let mu = vec![0.5, 0.0, 2.0];

    let mut tape = Tape::inference();
    let pm = pm_loss(&mut tape, &batch, lambda, r_req, 1.0).unwrap().re()[0];
    let ldm = ldm_loss(&mut tape, &batch, &mu, r_req, 1.0).unwrap().re()[0];

    let pm_want = loss_oracle(&batch, &[lambda; 3], r_req);
    let ldm_want = loss_oracle(&batch, &mu, r_req);
    assert!((pm - pm_want).abs() <= 1e-12);
    assert!((ldm - ldm_want).abs() <= 1e-12);

    // algebraic identity: ldm with mu = lambda·1 equals pm
    let mu_flat = vec![lambda; 3];
    let ldm_flat = ldm_loss(&mut tape, &batch, &mu_flat, r_req, 1.0).unwrap().re()[0];
    assert!((ldm_flat - pm).abs() <= 1e-12);
}

#[test]
fn ldm_loss_rejects_negative_multipliers() {
    let mut rng = DetRng::new(6, 0);
    let h = rand_mat(&mut rng, 2, 2);
    let w = rand_mat(&mut rng, 2, 2);
    let mut tape = Tape::inference();
    assert!(matches!(
        ldm_loss(&mut tape, &[(&h, &w)], &[0.1, -0.1], 1.0, 1.0),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn pm_decomposition_invariant() {
    let mut rng = DetRng::new(7, 0);
    let hs: Vec<ComplexTensor> = (0..5).map(|_| rand_mat(&mut rng, 3, 2)).collect();
    let ws: Vec<ComplexTensor> = (0..5).map(|_| rand_mat(&mut rng, 3, 2)).collect();
    let batch: Vec<(&ComplexTensor, &ComplexTensor)> = hs.iter().zip(&ws).collect();
    let lambda = 4.0;
    let r_req = 1.5;
    let mut tape = Tape::inference();
    let pm = pm_loss(&mut tape, &batch, lambda, r_req, 1.0).unwrap().re()[0];
    let mut mean_viol = 0.0;
    let mut mean_sum = 0.0;
    for (h, w) in &batch {
        let rates = rates_direct(h, w, 1.0);
        mean_sum += rates.iter().sum::<f64>();
        mean_viol += rates.iter().map(|r| (r_req - r).max(0.0)).sum::<f64>();
    }
    mean_sum /= batch.len() as f64;
    mean_viol /= batch.len() as f64;
    assert!((pm - lambda * mean_viol + mean_sum).abs() <= 1e-12);
    // the penalty vanishes iff every user is feasible on every sample
    assert_eq!(mean_viol == 0.0, batch.iter().all(|(h, w)| {
        rates_direct(h, w, 1.0).iter().all(|&r| r >= r_req)
    }));
}

#[test]
fn multiplier_update_mechanics() {
    // all users feasible: mu unchanged
    let state = LdmState::new(2, 0.1);
    let rates = vec![RateVector(vec![2.0, 3.0]); 4];
    let updated = update_multipliers(state, &rates, 1.0);
    assert_eq!(updated.mu, vec![0.0, 0.0]);

    // user 1 short by 0.25 on each of 8 samples: mu_1 += tau · 8 · 0.25
    let state = LdmState::new(2, 0.5);
    let rates = vec![RateVector(vec![2.0, 0.75]); 8];
    let updated = update_multipliers(state, &rates, 1.0);
    assert!((updated.mu[0] - 0.0).abs() <= 1e-15);
    assert!((updated.mu[1] - 0.5 * 8.0 * 0.25).abs() <= 1e-12);

    // random epoch vs scalar accumulation
    let mut rng = DetRng::new(8, 0);
    let r_req = 1.3;
    let tau = 0.07;
    let rates: Vec<RateVector> = (0..10)
        .map(|_| RateVector((0..3).map(|_| rng.uniform_in(0.0, 3.0)).collect()))
        .collect();
    let updated = update_multipliers(LdmState::new(3, tau), &rates, r_req);
    for k in 0..3 {
        let want: f64 = rates.iter().map(|r| (r_req - r.0[k]).max(0.0)).sum::<f64>() * tau;
        assert!((updated.mu[k] - want).abs() <= 1e-12);
    }
}

fn desk_dataset(seed: u64, counts: (usize, usize, usize)) -> crate::channel::Dataset {
    let cfg = ScenarioConfig::new(2, 2, 1.0, 0.5, seed);
    generate_with_counts(&cfg, counts).unwrap()
}

fn tiny_model(seed: u64, n_t: usize) -> CrgatModel {
    let cfg = CrgatConfig::from_layers(n_t, &[(3, 2)], &[4], 1.0);
    CrgatModel::init(cfg, &mut DetRng::new(seed, 0)).unwrap()
}

#[test]
fn end_to_end_pm_gradient_matches_finite_differences() {
    let dataset = desk_dataset(10, (2, 0, 0));
    let model = tiny_model(11, 2);
    let samples: Vec<&ChannelSample> = dataset.train_samples().iter().collect();
    let lambda = 10.0;
    let r_req = 0.5;

    // analytic
    let (_, grads, binding, _, _) =
        batch_pass(&model, &samples, &mut LossSpec::Pm { lambda }, r_req, 1.0).unwrap();
    let analytic = flat_grads(&model, &binding, &grads);
    let theta = model.flatten_trainable();

    let eval = |flat: &[f64]| {
        let mut m = model.clone();
        m.load_flat_trainable(flat).unwrap();
        let mut tape = Tape::inference();
        tape.collect_kink_signs();
        let b = m.bind(&mut tape);
        let hs: Vec<&ComplexTensor> = samples.iter().map(|s| &s.h).collect();
        let stacked = {
            let mut t = Tape::inference();
            t.concat_rows(&hs).unwrap()
        };
        let blocks: Vec<std::ops::Range<usize>> = (0..samples.len()).map(|i| 2 * i..2 * i + 2).collect();
        let out = m.forward_blocks(&mut tape, &b, &stacked, &blocks, Mode::Train).unwrap();
        let pairs: Vec<(&ComplexTensor, &ComplexTensor)> =
            samples.iter().map(|s| &s.h).zip(out.w_blocks.iter()).collect();
        let loss = pm_loss(&mut tape, &pairs, lambda, r_req, 1.0).unwrap();
        (loss.re()[0], tape.take_kink_signs())
    };
    let report = finite_diff_check(eval, &theta, 1e-5, &analytic).unwrap();
    assert!(
        report.max_rel_err <= 1e-4,
        "max rel err {} at {} (checked {}, skipped {})",
        report.max_rel_err,
        report.worst_coord,
        report.checked,
        report.skipped
    );
}

#[test]
fn overfit_single_sample_loss_decreases() {
    let dataset = desk_dataset(12, (1, 0, 0));
    let mut model = tiny_model(13, 2);
    let mut cfg = PmConfig::new(0.5, 60);
    cfg.lambda = 0.0;
    cfg.batch_size = 1;
    cfg.learning_rate = 3e-3;
    let report = train_pm(&dataset, &mut model, &cfg).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    let total = losses.len() - 1;
    let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
    assert!(
        non_increasing as f64 >= 0.9 * total as f64,
        "only {non_increasing}/{total} non-increasing steps"
    );
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let dataset = desk_dataset(14, (8, 0, 0));
    let mut model = tiny_model(15, 2);
    let before = model.flatten_trainable();
    let mut cfg = PmConfig::new(0.5, 2);
    cfg.learning_rate = 0.0;
    cfg.batch_size = 4;
    train_pm(&dataset, &mut model, &cfg).unwrap();
    let after = model.flatten_trainable();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn empty_train_split_is_contract_error() {
    let cfg = ScenarioConfig::new(2, 2, 1.0, 0.5, 16);
    let dataset = crate::channel::generate_dataset(&cfg, 10, crate::channel::SplitKind::TestOnly).unwrap();
    let mut model = tiny_model(17, 2);
    assert!(matches!(
        train_pm(&dataset, &mut model, &PmConfig::new(0.5, 1)),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn ldm_multipliers_are_non_decreasing() {
    let dataset = desk_dataset(18, (32, 4, 0));
    let mut model = tiny_model(19, 2);
    let mut cfg = LdmConfig::new(1.5, 5); // demanding requirement: violations expected
    cfg.batch_size = 8;
    cfg.tau = 1e-2;
    let mut state = LdmState::new(2, cfg.tau);
    let report = train_ldm(&dataset, &mut model, &cfg, &mut state).unwrap();
    let mut prev = vec![0.0; 2];
    for e in &report.epochs {
        let mu = e.mu.as_ref().unwrap();
        for k in 0..2 {
            assert!(mu[k] >= prev[k] - 1e-15, "epoch {}: mu[{k}] decreased", e.epoch);
        }
        prev = mu.clone();
    }
    assert!(prev.iter().any(|&m| m > 0.0), "demanding r_req should trigger violations");
}

#[test]
fn ldm_with_feasible_constraints_matches_pm_trajectory() {
    // r_req = 0 means no violations ever: mu stays 0 and both losses are
    // plain negated sum rate, so the parameter trajectories coincide.
    let dataset = desk_dataset(20, (16, 2, 0));
    let mut pm_model = tiny_model(21, 2);
    let mut ldm_model = pm_model.clone();

    let mut pm_cfg = PmConfig::new(0.0, 3);
    pm_cfg.batch_size = 8;
    let mut ldm_cfg = LdmConfig::new(0.0, 3);
    ldm_cfg.batch_size = 8;

    train_pm(&dataset, &mut pm_model, &pm_cfg).unwrap();
    let mut state = LdmState::new(2, ldm_cfg.tau);
    train_ldm(&dataset, &mut ldm_model, &ldm_cfg, &mut state).unwrap();

    assert!(state.mu.iter().all(|&m| m == 0.0));
    let a = pm_model.flatten_trainable();
    let b = ldm_model.flatten_trainable();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn fine_tune_zero_epochs_is_identity() {
    let dataset = desk_dataset(22, (8, 1, 0));
    let model = tiny_model(23, 2);
    let before = model.flatten_trainable();
    let (tuned, report) = fine_tune(model, &dataset, &PmConfig::new(0.5, 0)).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(tuned.flatten_trainable(), before);
}

#[test]
fn fine_tune_accepts_different_user_count() {
    // checkpoint trained at K = 2, fine-tuned on K = 3 without reshaping
    let model = tiny_model(24, 2);
    let cfg3 = ScenarioConfig::new(2, 3, 1.0, 0.5, 25);
    let dataset3 = generate_with_counts(&cfg3, (6, 1, 0)).unwrap();
    let mut cfg = PmConfig::new(0.5, 1);
    cfg.batch_size = 3;
    let (tuned, report) = fine_tune(model, &dataset3, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(tuned.config.n_t(), 2);
}

#[test]
fn fine_tune_rejects_incompatible_dims() {
    let model = tiny_model(26, 2);
    let cfg4 = ScenarioConfig::new(4, 2, 1.0, 0.5, 27);
    let dataset4 = generate_with_counts(&cfg4, (4, 1, 0)).unwrap();
    assert!(matches!(
        fine_tune(model, &dataset4, &PmConfig::new(0.5, 1)),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn warm_start_reaches_threshold_sooner_than_cold_start() {
    // pre-train on K = 2, then compare fine-tuning vs cold start on K = 3
    let pre_dataset = desk_dataset(28, (64, 4, 0));
    let mut warm = tiny_model(29, 2);
    let mut pre_cfg = PmConfig::new(0.5, 8);
    pre_cfg.batch_size = 16;
    pre_cfg.seed = 1;
    train_pm(&pre_dataset, &mut warm, &pre_cfg).unwrap();

    let cfg3 = ScenarioConfig::new(2, 3, 1.0, 0.5, 30);
    let dataset3 = generate_with_counts(&cfg3, (64, 16, 0)).unwrap();
    let mut run_cfg = PmConfig::new(0.5, 6);
    run_cfg.batch_size = 16;
    run_cfg.seed = 2;

    let mut cold = tiny_model(31, 2);
    let cold_report = train_pm(&dataset3, &mut cold, &run_cfg).unwrap();
    let (_, warm_report) = fine_tune(warm, &dataset3, &run_cfg).unwrap();

    let threshold = 0.95 * cold_report.epochs.last().unwrap().val_sum_rate;
    let first_reach = |r: &TrainReport| {
        r.epochs
            .iter()
            .position(|e| e.val_sum_rate >= threshold)
            .unwrap_or(usize::MAX)
    };
    let (w, c) = (first_reach(&warm_report), first_reach(&cold_report));
    assert!(w < c, "warm start reached at epoch {w}, cold at {c}");
}

#[test]
fn report_table_renders_and_parses() {
    let report = TrainReport {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: -1.5,
            val_sum_rate: 3.25,
            val_feas_rate: 87.5,
            mu: Some(vec![0.0, 0.125]),
        }],
    };
    let table = report.to_table();
    let text = table.render();
    let parsed = crate::report::parse_sections(&text).unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed[0].rows[0][1], "-1.5");
    assert_eq!(parsed[0].columns.last().unwrap(), "mu1");
}
