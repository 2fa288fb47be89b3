//! Straight-line reference implementations over nested vectors, written
//! independently of the tape so they can serve as oracles.

#![allow(dead_code)]

use scaleflow::model::ModelParams;
use scaleflow::train::ItemDraw;
use scaleflow::{Matrix, Model, Schedule, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn tensor_rows(t: &Tensor) -> Rows {
    rows(&t.reshape_to_matrix())
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

pub fn add_bias(a: &Rows, b: &[f64]) -> Rows {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn zip_with(a: &Rows, b: &Rows, f: impl Fn(f64, f64) -> f64) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect())
        .collect()
}

/// Two loops over query and key tokens, softmax by explicit max shift.
pub fn attention(x: &Rows, wq: &Rows, wk: &Rows, wv: &Rows) -> Rows {
    let q = matmul(x, wq);
    let k = matmul(x, wk);
    let v = matmul(x, wv);
    let n = x.len();
    let d = v[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut s = vec![0.0; n];
        for j in 0..n {
            s[j] = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
        }
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..d {
                out[i][c] += e[j] / z * v[j][c];
            }
        }
    }
    out
}

pub fn layer_norm(x: &Rows, eps: f64) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            r.iter().map(|v| if sd == 0.0 { 0.0 } else { (v - mean) / (sd + eps) }).collect()
        })
        .collect()
}

fn p(params: &ModelParams, name: &str) -> Rows {
    rows(params.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn bias(params: &ModelParams, name: &str) -> Vec<f64> {
    params.get(name).unwrap_or_else(|| panic!("missing {name}")).row(0).to_vec()
}

fn affine(params: &ModelParams, prefix: &str, x: &Rows) -> Rows {
    add_bias(&matmul(x, &p(params, &format!("{prefix}.w"))), &bias(params, &format!("{prefix}.b")))
}

/// One modulated block; `prefix` like `fm_first.0`.
pub fn fm_block(params: &ModelParams, prefix: &str, cond: &Rows, state: &Rows, t: f64, eps: f64) -> Rows {
    let d = state[0].len();
    let shifted: Rows = cond.iter().map(|r| r.iter().map(|v| v + t).collect()).collect();
    let m = affine(params, &format!("{prefix}.mod"), &shifted);
    let chunk = |k: usize| -> Rows { m.iter().map(|r| r[k * d..(k + 1) * d].to_vec()).collect() };
    let (a1, a2, b1, b2, g1, g2) = (chunk(0), chunk(1), chunk(2), chunk(3), chunk(4), chunk(5));
    let h = zip_with(&zip_with(&g1, &layer_norm(state, eps), |g, x| g * x), &b1, |x, b| x + b);
    let h = attention(
        &h,
        &p(params, &format!("{prefix}.attn.wq")),
        &p(params, &format!("{prefix}.attn.wk")),
        &p(params, &format!("{prefix}.attn.wv")),
    );
    let f1 = zip_with(&h, &a1, |x, a| x * a);
    let h = zip_with(&zip_with(&g2, &layer_norm(&f1, eps), |g, x| g * x), &b2, |x, b| x + b);
    let h = affine(params, &format!("{prefix}.out"), &h);
    zip_with(&h, &a2, |x, a| x * a)
}

pub fn head(params: &ModelParams, name: &str, depth: usize, cond: &Rows, state: &Rows, t: f64, eps: f64) -> Rows {
    let mut h = affine(params, &format!("{name}.lift"), state);
    for k in 0..depth {
        h = fm_block(params, &format!("{name}.{k}"), cond, &h, t, eps);
    }
    affine(params, &format!("{name}.proj"), &h)
}

/// Keys cubic kernel, `a = -0.5`, in its expanded polynomial form.
pub fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Bicubic upsampling of a row-major `h x w` token map by `r`.
pub fn upsample(x: &Rows, h: usize, w: usize, r: usize) -> Rows {
    let c = x[0].len();
    let mut out = vec![vec![0.0; c]; h * r * w * r];
    for oi in 0..h * r {
        for oj in 0..w * r {
            let (bi, fi) = ((oi / r) as isize, (oi % r) as f64 / r as f64);
            let (bj, fj) = ((oj / r) as isize, (oj % r) as f64 / r as f64);
            for si in -1isize..=2 {
                for sj in -1isize..=2 {
                    let wgt = keys(si as f64 - fi) * keys(sj as f64 - fj);
                    let ii = (bi + si).clamp(0, h as isize - 1) as usize;
                    let jj = (bj + sj).clamp(0, w as isize - 1) as usize;
                    for l in 0..c {
                        out[oi * w * r + oj][l] += wgt * x[ii * w + jj][l];
                    }
                }
            }
        }
    }
    out
}

/// Block average of an `h x w x c` tensor by `r`, as token rows.
pub fn downsample(x: &Tensor, r: usize) -> Rows {
    let (h, w, c) = x.shape();
    let mut out = Vec::new();
    for i in 0..h / r {
        for j in 0..w / r {
            out.push(
                (0..c)
                    .map(|l| {
                        let mut s = 0.0;
                        for di in 0..r {
                            for dj in 0..r {
                                s += x.get(i * r + di, j * r + dj, l);
                            }
                        }
                        s / (r * r) as f64
                    })
                    .collect(),
            );
        }
    }
    out
}

/// `(alpha, beta, alpha', beta', alpha'', beta'')`.
pub fn coeffs(schedule: &Schedule, t: f64) -> [f64; 6] {
    match *schedule {
        Schedule::Linear => [t, 1.0 - t, 1.0, -1.0, 0.0, 0.0],
        Schedule::Vp { a, b } => {
            let u = 1.0 - t;
            let al = (-a * u * u / 4.0 - b * u / 2.0).exp();
            let dal = al * (a * u / 2.0 + b / 2.0);
            let ddal = al * ((a * u / 2.0 + b / 2.0).powi(2) - a / 2.0);
            let be = (1.0 - al * al).sqrt();
            let dbe = -al * dal / be;
            let ddbe = -(dal * dal + al * ddal) / be - (al * dal).powi(2) / be.powi(3);
            [al, be, dal, dbe, ddal, ddbe]
        }
    }
}

/// Transformer condition for scale `i` given ground-truth maps.
pub fn condition(model: &Model, params: &ModelParams, class: usize, maps: &[Rows], i: usize) -> Rows {
    let cfg = model.config();
    let g = model.grid();
    let d = cfg.width;
    let table = p(params, "ar.class_table");
    let mut seq: Rows = table[class].chunks(d).map(|c| c.to_vec()).collect();
    for (j, m) in maps[..i].iter().enumerate() {
        let e = affine(params, "ar.embed", m);
        let (h, w) = g.dims(j);
        seq.extend(upsample(&e, h, w, cfg.pyramid.base));
    }
    let mut x = seq;
    for l in 0..cfg.layers {
        x = attention(
            &x,
            &p(params, &format!("ar.{l}.attn.wq")),
            &p(params, &format!("ar.{l}.attn.wk")),
            &p(params, &format!("ar.{l}.attn.wv")),
        );
        let h1 = add_bias(&matmul(&x, &p(params, &format!("ar.{l}.ffn.w1"))), &bias(params, &format!("ar.{l}.ffn.b1")));
        let h1: Rows = h1.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        let h2 = add_bias(&matmul(&h1, &p(params, &format!("ar.{l}.ffn.w2"))), &bias(params, &format!("ar.{l}.ffn.b2")));
        x = zip_with(&x, &h2, |a, b| a + b);
    }
    let keep = g.tokens(i);
    x[x.len() - keep..].to_vec()
}

fn sse(a: &Rows, b: &Rows) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2))).sum()
}

/// Batch-mean training loss summed over scales and both heads.
pub fn batch_loss(model: &Model, params: &ModelParams, schedule: &Schedule, draws: &[ItemDraw]) -> f64 {
    let cfg = model.config();
    let eps = cfg.ln_eps.get();
    let k = model.grid().scales();
    let mut total = 0.0;
    for dr in draws {
        let maps: Vec<Rows> = (0..k).map(|i| downsample(&dr.image, cfg.pyramid.factor(i))).collect();
        for (i, sd) in dr.scales.iter().enumerate() {
            let [al, be, dal, dbe, ddal, ddbe] = coeffs(schedule, sd.t);
            let noise = tensor_rows(&sd.noise);
            let mix = |x: f64, y: f64| -> Rows { zip_with(&maps[i], &noise, |a, n| x * a + y * n) };
            let noisy = mix(al, be);
            let cond = condition(model, params, dr.cond_class, &maps, i);
            let v = head(params, "fm_first", cfg.head_depth, &cond, &noisy, sd.t, eps);
            let s = head(params, "fm_second", cfg.head_depth, &cond, &noisy, sd.t, eps);
            total += sse(&v, &mix(dal, dbe)) + sse(&s, &mix(ddal, ddbe));
        }
    }
    total / draws.len() as f64
}

/// Textbook AdamW on flat slices, one step from zero moments.
pub fn adamw_first_step(theta: &[f64], grad: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(grad)
        .map(|(&x, &g)| {
            let m = (1.0 - b1) * g / (1.0 - b1);
            let v = (1.0 - b2) * g * g / (1.0 - b2);
            x - lr * wd * x - lr * m / (v.sqrt() + eps)
        })
        .collect()
}

pub mod checks {
    //! Measured oracle discrepancies shared by the oracle and acceptance
    //! suites.

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use scaleflow::flow_matching::fm_block as lib_fm_block;
    use scaleflow::gradcheck::{perturbed_params, random_matrix};
    use scaleflow::multiscale::downsample as lib_downsample;
    use scaleflow::train::{data_rng, draw_batch, loss_and_grads, loss_only, TrainConfig, Trainer};
    use scaleflow::transformer::{attention as lib_attention, AttnVars};
    use scaleflow::Tape;

    /// Small multi-scale configuration exercising every code path.
    pub fn oracle_config(schedule: Schedule) -> TrainConfig {
        TrainConfig {
            scales: 2,
            base: 2,
            resolution: 4,
            channels: 2,
            width: 4,
            layers: 2,
            head_depth: 2,
            batch: 3,
            num_classes: 3,
            cfg_dropout: 0.5,
            schedule,
            ..TrainConfig::toy()
        }
    }

    pub fn attention_err(tokens: usize, d: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, tokens, d, 1.0);
        let ws: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, d, d, 0.7)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let w = AttnVars {
            wq: tape.constant(ws[0].clone()).unwrap(),
            wk: tape.constant(ws[1].clone()).unwrap(),
            wv: tape.constant(ws[2].clone()).unwrap(),
        };
        let y = lib_attention(&mut tape, xv, &w).unwrap();
        let want = attention(&rows(&x), &rows(&ws[0]), &rows(&ws[1]), &rows(&ws[2]));
        max_abs_diff(&rows(tape.value(y)), &want)
    }

    /// Library block average against a dense `(h/r * w/r) x (h*w)` matrix
    /// built entry by entry.
    pub fn downsample_err(h: usize, w: usize, c: usize, r: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::reshape_to_tensor(random_matrix(&mut rng, h * w, c, 1.0), h, w).unwrap();
        let (oh, ow) = (h / r, w / r);
        let phi: Rows = (0..oh * ow)
            .map(|o| {
                let (oi, oj) = (o / ow, o % ow);
                (0..h * w)
                    .map(|s| {
                        let (si, sj) = (s / w, s % w);
                        if si / r == oi && sj / r == oj {
                            1.0 / (r * r) as f64
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let want = matmul(&phi, &tensor_rows(&x));
        let got = tensor_rows(&lib_downsample(&x, r).unwrap());
        max_abs_diff(&got, &want).max(max_abs_diff(&downsample(&x, r), &want))
    }

    pub fn fm_block_err(seed: u64) -> f64 {
        let cfg = oracle_config(Schedule::vp());
        let model = Model::new(cfg.model_config().unwrap()).unwrap();
        let params = perturbed_params(&model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let tokens = model.grid().tokens(1);
        let cond = random_matrix(&mut rng, tokens, cfg.width, 1.0);
        let state = random_matrix(&mut rng, tokens, cfg.width, 1.0);
        let t = 0.37;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params, false).unwrap();
        let c = tape.constant(cond.clone()).unwrap();
        let s = tape.constant(state.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for (k, block) in bound.first.blocks.iter().enumerate() {
            let y = lib_fm_block(&mut tape, c, s, t, block, cfg.ln_eps).unwrap();
            let want = fm_block(&params, &format!("fm_first.{k}"), &rows(&cond), &rows(&state), t, cfg.ln_eps);
            worst = worst.max(max_abs_diff(&rows(tape.value(y)), &want));
        }
        worst
    }

    /// Relative loss discrepancy on random parameters and draws.
    pub fn train_loss_rel(schedule: Schedule, seed: u64) -> f64 {
        let cfg = oracle_config(schedule);
        let model = Model::new(cfg.model_config().unwrap()).unwrap();
        let params = perturbed_params(&model, seed);
        let draws = draw_batch(&model, &cfg, &mut data_rng(seed));
        let got = loss_only(&model, &params, &cfg.schedule, &draws).unwrap();
        rel_diff(got, batch_loss(&model, &params, &cfg.schedule, &draws))
    }

    /// One full training step against the reference: returns the relative
    /// error of the reported loss and the largest parameter difference after
    /// the update.
    pub fn train_step_err(schedule: Schedule, seed: u64) -> (f64, f64) {
        let cfg = TrainConfig {
            seed,
            ..oracle_config(schedule)
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let before = trainer.params.clone();
        let draws = draw_batch(&trainer.model, &cfg, &mut data_rng(seed));
        let want_loss = batch_loss(&trainer.model, &before, &cfg.schedule, &draws);
        let grads = loss_and_grads(&trainer.model, &before, &cfg.schedule, &draws).unwrap().grads;
        let rec = trainer.train_step().unwrap();
        let mut worst: f64 = 0.0;
        for (name, theta) in before.iter() {
            let want = adamw_first_step(theta.data(), grads[name].data(), cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay);
            let got = trainer.params.get(name).unwrap().data();
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
        (rel_diff(rec.total, want_loss), worst)
    }
}
