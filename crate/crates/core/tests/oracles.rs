mod common;

use common::checks::*;
use common::{max_abs_diff, rel_diff, rows, tensor_rows, upsample, Rows};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scaleflow::gradcheck::{perturbed_params, random_matrix};
use scaleflow::multiscale::upsample_bicubic;
use scaleflow::train::{data_rng, draw_batch};
use scaleflow::{Model, Schedule, Tape, Tensor};

#[test]
fn attention_matches_two_loop_reference() {
    for (tokens, d, seed) in [(1, 3, 0), (7, 4, 1), (16, 8, 2), (20, 5, 3)] {
        let err = attention_err(tokens, d, seed);
        assert!(err < 1e-10, "tokens {tokens} d {d}: {err:e}");
    }
}

#[test]
fn downsample_matches_dense_matrix() {
    for (h, w, c, r) in [(4, 4, 1, 2), (8, 8, 3, 4), (6, 4, 2, 2), (5, 5, 1, 1)] {
        let err = downsample_err(h, w, c, r, 9);
        assert!(err < 1e-12, "{h}x{w}x{c} r {r}: {err:e}");
    }
}

#[test]
fn bicubic_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (h, w, r) in [(1, 1, 2), (2, 3, 2), (4, 4, 2), (3, 2, 3)] {
        let m = random_matrix(&mut rng, h * w, 2, 1.0);
        let x = Tensor::reshape_to_tensor(m.clone(), h, w).unwrap();
        let got = tensor_rows(&upsample_bicubic(&x, r).unwrap());
        let err = max_abs_diff(&got, &upsample(&rows(&m), h, w, r));
        assert!(err < 1e-12, "{h}x{w} r {r}: {err:e}");
    }
}

#[test]
fn fm_block_matches_reference() {
    for seed in 0..3 {
        let err = fm_block_err(seed);
        assert!(err < 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn condition_and_heads_match_reference() {
    let cfg = oracle_config(Schedule::vp());
    let model = Model::new(cfg.model_config().unwrap()).unwrap();
    let params = perturbed_params(&model, 11);
    let draws = draw_batch(&model, &cfg, &mut data_rng(5));
    let image = &draws[0].image;
    let maps: Vec<Rows> = (0..cfg.scales)
        .map(|i| common::downsample(image, cfg.base.pow((cfg.scales - 1 - i) as u32)))
        .collect();
    for i in 0..cfg.scales {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params, false).unwrap();
        let priors: Vec<_> = maps[..i]
            .iter()
            .map(|m| {
                let flat: Vec<f64> = m.iter().flatten().copied().collect();
                tape.constant(scaleflow::Matrix::new(m.len(), cfg.channels, flat).unwrap()).unwrap()
            })
            .collect();
        let cond = model.condition(&mut tape, &bound, 1, &priors).unwrap();
        let want = common::condition(&model, &params, 1, &maps, i);
        let err = max_abs_diff(&rows(tape.value(cond)), &want);
        assert!(err < 1e-9, "condition at scale {i}: {err:e}");

        let state = tape.constant(random_matrix(&mut ChaCha8Rng::seed_from_u64(i as u64), want.len(), cfg.channels, 1.0)).unwrap();
        let state_rows = rows(tape.value(state));
        let pred = model.predict(&mut tape, &bound, scaleflow::Order::Second, cond, state, 0.6).unwrap();
        let want = common::head(&params, "fm_second", cfg.head_depth, &want, &state_rows, 0.6, cfg.ln_eps);
        let err = max_abs_diff(&rows(tape.value(pred)), &want);
        assert!(err < 1e-9, "second head at scale {i}: {err:e}");
    }
}

#[test]
fn training_loss_matches_reference() {
    for schedule in [Schedule::vp(), Schedule::Linear] {
        for seed in 0..3 {
            let rel = train_loss_rel(schedule, seed);
            assert!(rel < 1e-9, "{} seed {seed}: {rel:e}", schedule.name());
        }
    }
}

#[test]
fn train_step_matches_reference() {
    for schedule in [Schedule::vp(), Schedule::Linear] {
        let (loss_rel, param_err) = train_step_err(schedule, 21);
        assert!(loss_rel < 1e-9, "{} loss: {loss_rel:e}", schedule.name());
        assert!(param_err < 1e-12, "{} params: {param_err:e}", schedule.name());
    }
}

#[test]
fn reference_vp_coefficients_agree_with_library() {
    let s = Schedule::vp();
    for k in 0..=20 {
        let t = k as f64 / 20.0 * 0.99;
        let c = s.coeffs(t).unwrap();
        let r = common::coeffs(&s, t);
        let lib = [c.alpha, c.beta, c.d_alpha, c.d_beta, c.dd_alpha, c.dd_beta];
        for (a, b) in lib.iter().zip(r) {
            assert!(rel_diff(*a, b) < 1e-10 || (a - b).abs() < 1e-14, "t {t}: {a} vs {b}");
        }
    }
}
