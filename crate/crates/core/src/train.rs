//! Training loop.
//!
//! Each step draws a batch of synthetic images, tokenizes each once into the
//! scale pyramid and walks the scales coarse to fine. At scale `i` it samples
//! noise and a time, builds the noisy state with both derivative targets,
//! runs the transformer on the teacher-forced prefix of true token maps and
//! scores both heads with squared error. The per-scale losses are summed,
//! averaged over the batch and fed to one AdamW update.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{standard_normal, synth_sample};
use crate::error::{Error, Result};
use crate::flow_matching::{LnEps, Order};
use crate::model::{Bound, Model, ModelConfig, ModelParams};
use crate::multiscale::{tokenize, PyramidConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::Schedule;
use crate::tensor::{Matrix, Tensor, TensorError};

/// Offset mixed into the seed for the data stream so it is independent of
/// the initialization stream.
const DATA_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Generator for the batch draws of a run seeded with `seed`.
pub fn data_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Number of pyramid scales `K`.
    pub scales: usize,
    /// Pyramid base `a`.
    pub base: usize,
    /// Root resolution `n`.
    pub resolution: usize,
    /// Data channels `c`.
    pub channels: usize,
    pub width: usize,
    /// Transformer layers `m`.
    pub layers: usize,
    pub head_depth: usize,
    pub schedule: Schedule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub num_classes: usize,
    /// Probability of replacing the class with the null embedding.
    pub cfg_dropout: f64,
    pub ln_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale default: three scales up to 8x8x3, width 32, two layers.
    pub fn toy() -> Self {
        Self {
            scales: 3,
            base: 2,
            resolution: 8,
            channels: 3,
            width: 32,
            layers: 2,
            head_depth: 1,
            schedule: Schedule::Linear,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            steps: 2000,
            batch: 4,
            seed: 0,
            num_classes: 8,
            cfg_dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    /// Single-scale 2x2x2 configuration for gradient checks and unit tests.
    pub fn micro() -> Self {
        Self {
            scales: 1,
            base: 2,
            resolution: 2,
            channels: 2,
            width: 8,
            layers: 1,
            head_depth: 1,
            schedule: Schedule::vp(),
            steps: 10,
            batch: 1,
            num_classes: 2,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.scales == 0 || self.base == 0 {
            return fail("K and a must be at least 1".into());
        }
        let coarsest = self.base.pow(self.scales as u32 - 1);
        if self.resolution == 0 || !self.resolution.is_multiple_of(coarsest) {
            return fail(format!("n = {} is not divisible by a^(K-1) = {coarsest}", self.resolution));
        }
        if self.channels == 0 || self.width == 0 || self.num_classes == 0 || self.batch == 0 {
            return fail("c, width, num_classes and batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return fail(format!("cfg_dropout must be in [0, 1], got {}", self.cfg_dropout));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must be in [0, 1)".into());
        }
        LnEps::new(self.ln_eps).map_err(Error::from)?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            resolution: self.resolution,
            channels: self.channels,
            width: self.width,
            layers: self.layers,
            head_depth: self.head_depth,
            num_classes: self.num_classes,
            pyramid: PyramidConfig::new(self.scales, self.base)?,
            ln_eps: LnEps::new(self.ln_eps)?,
        })
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub per_scale: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDraw {
    pub noise: Tensor,
    pub t: f64,
}

/// Random inputs for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDraw {
    pub class_id: usize,
    /// Class row fed to the transformer; the null row when dropped.
    pub cond_class: usize,
    pub image: Tensor,
    pub scales: Vec<ScaleDraw>,
}

pub fn draw_item<R: Rng + ?Sized>(model: &Model, cfg: &TrainConfig, rng: &mut R) -> ItemDraw {
    let mc = model.config();
    let class_id = rng.random_range(0..mc.num_classes);
    let dropped = cfg.cfg_dropout > 0.0 && rng.random::<f64>() < cfg.cfg_dropout;
    let image = synth_sample(rng, class_id, mc.resolution, mc.channels);
    let scales = (0..model.grid().scales())
        .map(|i| {
            let (h, w) = model.grid().dims(i);
            let noise = standard_normal(rng, h, w, mc.channels);
            let t = rng.random::<f64>().min(cfg.schedule.t_max());
            ScaleDraw { noise, t }
        })
        .collect();
    ItemDraw {
        class_id,
        cond_class: if dropped { model.null_class() } else { class_id },
        image,
        scales,
    }
}

pub fn draw_batch<R: Rng + ?Sized>(model: &Model, cfg: &TrainConfig, rng: &mut R) -> Vec<ItemDraw> {
    (0..cfg.batch).map(|_| draw_item(model, cfg, rng)).collect()
}

/// Per-scale loss nodes for one item.
pub fn item_losses(model: &Model, tape: &mut Tape, bound: &Bound, schedule: &Schedule, draw: &ItemDraw) -> Result<Vec<Var>> {
    let pyramid = tokenize(&draw.image, &model.config().pyramid)?;
    let maps = pyramid
        .maps
        .iter()
        .map(|m| tape.constant(m.reshape_to_matrix()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut losses = Vec::with_capacity(maps.len());
    for (i, sd) in draw.scales.iter().enumerate() {
        let point = schedule.make_point(&pyramid.maps[i], &sd.noise, sd.t)?;
        let cond = model.condition(tape, bound, draw.cond_class, &maps[..i])?;
        let noisy = tape.tensor(&point.noisy)?;
        let first_target = tape.tensor(&point.first)?;
        let second_target = tape.tensor(&point.second)?;
        let first = model.predict(tape, bound, Order::First, cond, noisy, sd.t)?;
        let second = model.predict(tape, bound, Order::Second, cond, noisy, sd.t)?;
        let l1 = tape.sse(first, first_target)?;
        let l2 = tape.sse(second, second_target)?;
        losses.push(tape.add(l1, l2)?);
    }
    Ok(losses)
}

/// Batch-averaged per-scale losses and their sum.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    schedule: &Schedule,
    draws: &[ItemDraw],
) -> Result<(Var, Vec<Var>)> {
    let k = model.grid().scales();
    let mut sums: Vec<Option<Var>> = vec![None; k];
    for d in draws {
        for (i, l) in item_losses(model, tape, bound, schedule, d)?.into_iter().enumerate() {
            sums[i] = Some(match sums[i] {
                Some(s) => tape.add(s, l)?,
                None => l,
            });
        }
    }
    let inv = 1.0 / draws.len() as f64;
    let mut per_scale = Vec::with_capacity(k);
    for s in sums {
        let s = s.ok_or_else(|| Error::Config("empty batch".into()))?;
        per_scale.push(tape.scale(s, inv)?);
    }
    let mut total = per_scale[0];
    for &p in &per_scale[1..] {
        total = tape.add(total, p)?;
    }
    Ok((total, per_scale))
}

/// Loss of a fixed batch and the gradient of every parameter.
pub struct LossEval {
    pub per_scale: Vec<f64>,
    pub total: f64,
    pub grads: BTreeMap<String, Matrix>,
}

pub fn loss_and_grads(model: &Model, params: &ModelParams, schedule: &Schedule, draws: &[ItemDraw]) -> Result<LossEval> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params, true)?;
    let (total, per_scale) = batch_loss(model, &mut tape, &bound, schedule, draws)?;
    let per_scale: Vec<f64> = per_scale.iter().map(|v| tape.scalar(*v)).collect();
    let total_value = tape.scalar(total);
    let mut g = tape.backward(total)?;
    let grads = bound
        .vars
        .iter()
        .filter_map(|(name, v)| g.take(*v).map(|m| (name.clone(), m)))
        .collect();
    Ok(LossEval {
        per_scale,
        total: total_value,
        grads,
    })
}

/// Loss of a fixed batch without gradients.
pub fn loss_only(model: &Model, params: &ModelParams, schedule: &Schedule, draws: &[ItemDraw]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params, false)?;
    let (total, _) = batch_loss(model, &mut tape, &bound, schedule, draws)?;
    Ok(tape.scalar(total))
}

/// Stateful training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ModelParams,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config()?)?;
        let params = model.init_params(cfg.seed);
        Ok(Self {
            opt: AdamW::new(cfg.adamw()),
            rng: data_rng(cfg.seed),
            cfg,
            model,
            params,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn train_step(&mut self) -> Result<LossRecord> {
        let draws = draw_batch(&self.model, &self.cfg, &mut self.rng);
        let step = self.step;
        let eval = loss_and_grads(&self.model, &self.params, &self.cfg.schedule, &draws).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !eval.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("per-scale losses {:?}", eval.per_scale),
            });
        }
        self.opt.step(&mut self.params, &eval.grads)?;
        self.step += 1;
        Ok(LossRecord {
            step,
            per_scale: eval.per_scale,
            total: eval.total,
        })
    }

    /// Run the remaining configured steps, handing each record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let rec = self.train_step()?;
            on_step(&rec)?;
        }
        Ok(())
    }
}

/// Train for `cfg.steps` steps from the seeded initialization.
pub fn train(cfg: &TrainConfig) -> Result<(ModelParams, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(*cfg)?;
    let mut curve = Vec::with_capacity(cfg.steps);
    trainer.run(|r| {
        curve.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.params, curve))
}

/// Fit of the second head alone to the analytic second-derivative target.
///
/// The transformer condition is computed once from the initial weights and
/// frozen; only `fm_second.*` parameters are updated. The data point, noise
/// and time grid are fixed, so the target set is finite and exactly
/// learnable in principle.
pub struct SecondHeadFit {
    pub model: Model,
    pub params: ModelParams,
    opt: AdamW,
    schedule: Schedule,
    cond: Matrix,
    /// `(t, noisy state, second-order target)` for each grid time.
    points: Vec<(f64, Matrix, Matrix)>,
    target_energy: f64,
}

impl SecondHeadFit {
    pub fn new(cfg: &TrainConfig, times: &[f64], lr: f64) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config()?)?;
        let params = model.init_params(cfg.seed);
        let mut rng = data_rng(cfg.seed);
        let mc = *model.config();
        let image = synth_sample(&mut rng, 0, mc.resolution, mc.channels);
        let pyramid = tokenize(&image, &mc.pyramid)?;
        let last = model.grid().scales() - 1;
        let (h, w) = model.grid().dims(last);
        let noise = standard_normal(&mut rng, h, w, mc.channels);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params, false)?;
        let priors = pyramid.maps[..last]
            .iter()
            .map(|m| tape.constant(m.reshape_to_matrix()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let cond = model.condition(&mut tape, &bound, 0, &priors)?;
        let cond = tape.value(cond).clone();

        let mut points = Vec::with_capacity(times.len());
        let mut target_energy = 0.0;
        for &t in times {
            let p = cfg.schedule.make_point(&pyramid.maps[last], &noise, t)?;
            target_energy += p.second.sum_squares();
            points.push((t, p.noisy.into_matrix(), p.second.into_matrix()));
        }
        if !(target_energy > 0.0) {
            return Err(Error::Config("second-order target is identically zero on this schedule".into()));
        }
        let opt = AdamW::new(AdamWConfig {
            lr,
            ..cfg.adamw()
        });
        Ok(Self {
            model,
            params,
            opt,
            schedule: cfg.schedule,
            cond,
            points,
            target_energy,
        })
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn loss(&self, tape: &mut Tape, trainable: bool) -> Result<(Var, Bound)> {
        let bound = self.model.bind(tape, &self.params, trainable)?;
        let cond = tape.constant(self.cond.clone())?;
        let mut total: Option<Var> = None;
        for (t, noisy, target) in &self.points {
            let x = tape.constant(noisy.clone())?;
            let y = tape.constant(target.clone())?;
            let pred = self.model.predict(tape, &bound, Order::Second, cond, x, *t)?;
            let l = tape.sse(pred, y)?;
            total = Some(match total {
                Some(s) => tape.add(s, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty time grid".into()))?;
        Ok((total, bound))
    }

    /// `sum_t |prediction - target|^2 / sum_t |target|^2`.
    pub fn relative_sse(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.loss(&mut tape, false)?;
        Ok(tape.scalar(loss) / self.target_energy)
    }

    /// One AdamW update of the second head; returns the relative SSE before
    /// the update.
    pub fn step(&mut self) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, bound) = self.loss(&mut tape, true)?;
        let value = tape.scalar(loss);
        let mut g = tape.backward(loss)?;
        let grads: BTreeMap<String, Matrix> = bound
            .vars
            .iter()
            .filter(|(name, _)| name.starts_with("fm_second."))
            .filter_map(|(name, v)| g.take(*v).map(|m| (name.clone(), m)))
            .collect();
        self.opt.step(&mut self.params, &grads)?;
        Ok(value / self.target_energy)
    }
}

/// CSV header for a loss curve: `step,scale_0,...,scale_{K-1},total`.
pub fn loss_csv_header(scales: usize) -> String {
    let mut h = String::from("step");
    for i in 0..scales {
        h.push_str(&format!(",scale_{i}"));
    }
    h.push_str(",total");
    h
}

pub fn loss_csv_row(r: &LossRecord) -> String {
    let mut row = r.step.to_string();
    for v in &r.per_scale {
        row.push_str(&format!(",{v:e}"));
    }
    row.push_str(&format!(",{:e}", r.total));
    row
}
