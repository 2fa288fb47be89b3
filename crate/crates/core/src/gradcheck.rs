//! Central finite-difference checks of every differentiable op and of a
//! full training step.
//!
//! Each op check draws seeded inputs, reduces the op output to a scalar with
//! a fixed random projection `L = sum(R * op(x))`, and compares the tape
//! gradient of every input entry with `(L(x + h) - L(x - h)) / 2h`.
//! The error for one entry is `|g - g_fd| / max(|g|, |g_fd|, REL_FLOOR)`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::flow_matching::{fm_block, FmBlockVars};
use crate::model::{Model, ModelParams};
use crate::multiscale::SpatialMap;
use crate::tensor::{self, Matrix};
use crate::train::{draw_batch, loss_and_grads, loss_only, TrainConfig};
use crate::transformer::{attention, ffn, AffineVars, AttnVars, FfnVars};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const TRAIN_STEP_TOL: f64 = 1e-3;
/// Denominator floor so entries with a vanishing gradient are judged on
/// absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const TRAIN_STEP_SAMPLES: usize = 200;

/// Builds the op under test from its input leaves.
pub type Build = Rc<dyn Fn(&mut Tape, &[Var]) -> tensor::Result<Var>>;

#[derive(Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub inputs: Vec<Matrix>,
    pub build: Build,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst_rel: f64,
    pub tol: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel < self.tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projected(tape: &mut Tape, build: &Build, vars: &[Var], proj: &Matrix) -> tensor::Result<Var> {
    let out = build(tape, vars)?;
    let r = tape.constant(proj.clone())?;
    let p = tape.hadamard(out, r)?;
    tape.sum(p)
}

fn forward_value(check: &OpCheck, proj: &Matrix, inputs: &[Matrix]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let loss = projected(&mut tape, &check.build, &vars, proj)?;
    Ok(tape.scalar(loss))
}

/// Check every input entry of one op.
pub fn run_op(check: &OpCheck, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let mut tape = Tape::new();
        let vars = check
            .inputs
            .iter()
            .map(|m| tape.constant(m.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = (check.build)(&mut tape, &vars)?;
        tape.shape(out)
    };
    let proj = random_matrix(&mut rng, shape.0, shape.1, 1.0);

    let mut tape = Tape::new();
    let vars = check
        .inputs
        .iter()
        .map(|m| tape.param(m.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let loss = projected(&mut tape, &check.build, &vars, &proj)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut inputs = check.inputs.clone();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get(*var).expect("inputs are trainable leaves").clone();
        for idx in 0..inputs[k].data().len() {
            let x0 = inputs[k].data()[idx];
            inputs[k].data_mut()[idx] = x0 + FD_STEP;
            let up = forward_value(check, &proj, &inputs)?;
            inputs[k].data_mut()[idx] = x0 - FD_STEP;
            let down = forward_value(check, &proj, &inputs)?;
            inputs[k].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[idx], numeric));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: check.name.to_string(),
        worst_rel: worst,
        tol: OP_TOL,
        entries,
    })
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Entries bounded away from zero so the rectifier kink is never straddled.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let m = random_matrix(rng, rows, cols, 1.0);
    Matrix::from_fn(rows, cols, |i, j| {
        let v = m.get(i, j);
        v.signum() * (v.abs() + 0.1)
    })
}

fn op(name: &'static str, inputs: Vec<Matrix>, build: impl Fn(&mut Tape, &[Var]) -> tensor::Result<Var> + 'static) -> OpCheck {
    OpCheck {
        name,
        inputs,
        build: Rc::new(build),
    }
}

/// Every registered op check.
pub fn registry() -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let mut m = |rows, cols| random_matrix(r, rows, cols, 1.0);
    let mut checks = vec![
        op("matmul", vec![m(3, 4), m(4, 2)], |t, v| t.matmul(v[0], v[1])),
        op("matmul_nt", vec![m(3, 4), m(2, 4)], |t, v| t.matmul_nt(v[0], v[1])),
        op("add", vec![m(3, 2), m(3, 2)], |t, v| t.add(v[0], v[1])),
        op("sub", vec![m(3, 2), m(3, 2)], |t, v| t.sub(v[0], v[1])),
        op("hadamard", vec![m(3, 2), m(3, 2)], |t, v| t.hadamard(v[0], v[1])),
        op("exp", vec![m(3, 3)], |t, v| t.exp(v[0])),
        op("scale", vec![m(2, 3)], |t, v| t.scale(v[0], -1.7)),
        op("add_scalar", vec![m(2, 3)], |t, v| t.add_scalar(v[0], 0.4)),
        op("add_bias", vec![m(4, 3), m(1, 3)], |t, v| t.add_bias(v[0], v[1])),
        op("reshape", vec![m(4, 3)], |t, v| t.reshape(v[0], 2, 6)),
        op("softmax_rows", vec![m(3, 5)], |t, v| t.softmax_rows(v[0])),
        op("layer_norm", vec![m(3, 5)], |t, v| t.layer_norm_rows(v[0], 1e-5)),
        op("slice_rows", vec![m(5, 3)], |t, v| t.slice_rows(v[0], 1, 3)),
        op("slice_cols", vec![m(3, 6)], |t, v| t.slice_cols(v[0], 2, 3)),
        op("concat_rows", vec![m(2, 3), m(1, 3), m(3, 3)], |t, v| t.concat_rows(v)),
        op("sum", vec![m(3, 4)], |t, v| t.sum(v[0])),
        op("sum_squares", vec![m(3, 4)], |t, v| t.sum_squares(v[0])),
        op("sse", vec![m(3, 4), m(3, 4)], |t, v| t.sse(v[0], v[1])),
        op("custom", vec![m(3, 3)], |t, v| square_custom(t, v[0], 2.0, "custom")),
    ];

    let down = Rc::new(SpatialMap::block_average(4, 4, 2).expect("valid map"));
    checks.push(op("spatial_block_average", vec![m(16, 2)], move |t, v| t.spatial(v[0], down.clone())));
    let up = Rc::new(SpatialMap::bicubic(2, 2, 2).expect("valid map"));
    checks.push(op("spatial_bicubic", vec![m(4, 2)], move |t, v| t.spatial(v[0], up.clone())));
    checks.push(op("relu", vec![off_kink(&mut rng, 3, 4)], |t, v| t.relu(v[0])));

    let d = 4;
    let mut w = |rows, cols| random_matrix(&mut rng, rows, cols, 0.5);
    checks.push(op("attention", vec![w(3, d), w(d, d), w(d, d), w(d, d)], |t, v| {
        attention(
            t,
            v[0],
            &AttnVars {
                wq: v[1],
                wk: v[2],
                wv: v[3],
            },
        )
    }));
    checks.push(op("ffn", vec![w(3, d), w(d, d), w(1, d), w(d, d), w(1, d)], |t, v| {
        ffn(
            t,
            v[0],
            &FfnVars {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            },
        )
    }));
    checks.push(op(
        "fm_block",
        vec![
            w(3, d),
            w(3, d),
            w(d, 6 * d),
            w(1, 6 * d),
            w(d, d),
            w(d, d),
            w(d, d),
            w(d, d),
            w(1, d),
        ],
        |t, v| {
            let block = FmBlockVars {
                modulation: AffineVars { w: v[2], b: v[3] },
                attn: AttnVars {
                    wq: v[4],
                    wk: v[5],
                    wv: v[6],
                },
                out: AffineVars { w: v[7], b: v[8] },
            };
            fm_block(t, v[0], v[1], 0.3, &block, 1e-5)
        },
    ));
    checks
}

/// `x -> x^2` with backward `g * factor * x`. A factor other than 2 is a
/// deliberately wrong rule.
fn square_custom(tape: &mut Tape, x: Var, factor: f64, name: &'static str) -> tensor::Result<Var> {
    let value = tape.value(x).clone();
    let out = Matrix::from_fn(value.rows(), value.cols(), |i, j| value.get(i, j).powi(2));
    tape.custom(
        name,
        &[x],
        out,
        Rc::new(move |g, ins, _| {
            let x = ins[0];
            vec![Matrix::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) * factor * x.get(i, j))]
        }),
    )
}

/// A custom op whose backward rule is wrong by a factor of 1.5. The checker
/// must flag it by name.
pub fn corrupted_fixture() -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    op("corrupted_square", vec![random_matrix(&mut rng, 2, 3, 1.0)], |t, v| {
        square_custom(t, v[0], 3.0, "corrupted_square")
    })
}

/// Micro-config parameters with every array drawn at random, so no path
/// through the graph is switched off by a zero initialization.
pub fn perturbed_params(model: &Model, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for spec in model.param_specs() {
        let std = 0.5 / (spec.rows as f64).sqrt();
        params.insert(spec.name, random_matrix(&mut rng, spec.rows, spec.cols, std));
    }
    params
}

/// Finite-difference check of the full loss of one micro-config training
/// batch over at most `samples` weights, spread evenly across the
/// parameter arrays.
pub fn run_train_step(cfg: &TrainConfig, samples: usize, seed: u64) -> Result<CheckResult> {
    let model = Model::new(cfg.model_config()?)?;
    let mut params = perturbed_params(&model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let draws = draw_batch(&model, cfg, &mut rng);
    let eval = loss_and_grads(&model, &params, &cfg.schedule, &draws)?;

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let per_array = (samples / names.len()).max(1);
    let mut picks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut budget = samples;
    for name in &names {
        let len = params.get(name).expect("listed").data().len();
        let k = per_array.min(len).min(budget);
        budget -= k;
        picks.insert(name.clone(), sample(&mut rng, len, k).into_vec());
    }

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (name, idxs) in picks {
        let g = eval.grads.get(&name).expect("every parameter has a gradient");
        for idx in idxs {
            let x0 = params.get(&name).expect("listed").data()[idx];
            params.get_mut(&name).expect("listed").data_mut()[idx] = x0 + FD_STEP;
            let up = loss_only(&model, &params, &cfg.schedule, &draws)?;
            params.get_mut(&name).expect("listed").data_mut()[idx] = x0 - FD_STEP;
            let down = loss_only(&model, &params, &cfg.schedule, &draws)?;
            params.get_mut(&name).expect("listed").data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[idx], numeric));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: "train_step".into(),
        worst_rel: worst,
        tol: TRAIN_STEP_TOL,
        entries,
    })
}

/// Every registered op plus the micro-config training step.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = registry()
        .iter()
        .enumerate()
        .map(|(i, c)| run_op(c, 100 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    out.push(run_train_step(&TrainConfig::micro(), TRAIN_STEP_SAMPLES, 3)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let r = run_op(&corrupted_fixture(), 0).unwrap();
        assert!(!r.passed());
        assert_eq!(r.name, "corrupted_square");
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
