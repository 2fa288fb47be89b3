//! Parameter store and the assembled model: transformer condition path plus
//! the two flow-matching heads.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::flow_matching::{head_predict, FmBlockVars, FmHeadVars, LnEps, Order};
use crate::multiscale::PyramidConfig;
use crate::tensor::{Matrix, Result, TensorError};
use crate::transformer::{affine, build_sequence, forward_scale, AffineVars, ArStackVars, AttnVars, FfnVars, ScaleGrid};


#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Root spatial size `n` (images are `n x n x channels`).
    pub resolution: usize,
    pub channels: usize,
    /// Token width of the transformer and the flow-matching blocks.
    pub width: usize,
    /// Transformer layers `m`.
    pub layers: usize,
    pub head_depth: usize,
    pub num_classes: usize,
    pub pyramid: PyramidConfig,
    pub ln_eps: LnEps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `1 / sqrt(rows)`.
    FanIn,
    /// Standard normal.
    Unit,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Named learnable matrices, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Matrix>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    /// Little-endian bytes of every value, in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .values()
            .flat_map(|m| m.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Parameters recorded as leaves on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
    pub class_table: Var,
    pub stack: ArStackVars,
    pub first: FmHeadVars,
    pub second: FmHeadVars,
}

impl Bound {
    pub fn head(&self, order: Order) -> &FmHeadVars {
        match order {
            Order::First => &self.first,
            Order::Second => &self.second,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    grid: ScaleGrid,
}

fn head_prefix(order: Order) -> &'static str {
    match order {
        Order::First => "fm_first",
        Order::Second => "fm_second",
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.width == 0 || cfg.num_classes == 0 {
            return Err(TensorError::Invalid {
                op: "model",
                msg: "channels, width and num_classes must be positive".into(),
            });
        }
        let grid = ScaleGrid::new(cfg.pyramid, cfg.resolution, cfg.resolution)?;
        Ok(Self { cfg, grid })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.grid
    }

    /// Row of the class table used for unconditional (guidance) predictions.
    pub fn null_class(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let ModelConfig {
            channels: c,
            width: d,
            layers,
            head_depth,
            num_classes,
            ..
        } = self.cfg;
        let mut specs = Vec::new();
        let mut add = |name: String, rows, cols, init| specs.push(ParamSpec { name, rows, cols, init });
        add("ar.class_table".into(), num_classes + 1, self.grid.tokens(0) * d, Init::Unit);
        add("ar.embed.w".into(), c, d, Init::FanIn);
        add("ar.embed.b".into(), 1, d, Init::Zero);
        for l in 0..layers {
            for p in ["wq", "wk", "wv"] {
                add(format!("ar.{l}.attn.{p}"), d, d, Init::FanIn);
            }
            add(format!("ar.{l}.ffn.w1"), d, d, Init::FanIn);
            add(format!("ar.{l}.ffn.b1"), 1, d, Init::Zero);
            add(format!("ar.{l}.ffn.w2"), d, d, Init::FanIn);
            add(format!("ar.{l}.ffn.b2"), 1, d, Init::Zero);
        }
        for order in [Order::First, Order::Second] {
            let h = head_prefix(order);
            add(format!("{h}.lift.w"), c, d, Init::FanIn);
            add(format!("{h}.lift.b"), 1, d, Init::Zero);
            for k in 0..head_depth {
                add(format!("{h}.{k}.mod.w"), d, 6 * d, Init::FanIn);
                add(format!("{h}.{k}.mod.b"), 1, 6 * d, Init::Zero);
                for p in ["wq", "wk", "wv"] {
                    add(format!("{h}.{k}.attn.{p}"), d, d, Init::FanIn);
                }
                add(format!("{h}.{k}.out.w"), d, d, Init::FanIn);
                add(format!("{h}.{k}.out.b"), 1, d, Init::Zero);
            }
            // Zero output projection: both heads start by predicting zero.
            add(format!("{h}.proj.w"), d, c, Init::Zero);
            add(format!("{h}.proj.b"), 1, c, Init::Zero);
        }
        specs
    }

    /// Seeded initialization following each spec's [`Init`].
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for spec in self.param_specs() {
            let std = match spec.init {
                Init::FanIn => 1.0 / (spec.rows as f64).sqrt(),
                Init::Unit => 1.0,
                Init::Zero => 0.0,
            };
            let m = if std == 0.0 {
                Matrix::zeros(spec.rows, spec.cols)
            } else {
                let normal = Normal::new(0.0, std).expect("positive std");
                Matrix::from_fn(spec.rows, spec.cols, |_, _| normal.sample(&mut rng))
            };
            params.insert(spec.name, m);
        }
        params
    }

    /// Check that `params` has exactly the expected names and shapes.
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "params",
                msg: format!("expected {} tensors, found {}", specs.len(), params.len()),
            });
        }
        for s in specs {
            match params.get(&s.name) {
                Some(m) if m.shape() == (s.rows, s.cols) => {}
                Some(m) => {
                    return Err(TensorError::ShapeMismatch {
                        op: "params",
                        left: (s.rows, s.cols),
                        right: m.shape(),
                    })
                }
                None => {
                    return Err(TensorError::Invalid {
                        op: "params",
                        msg: format!("missing tensor {}", s.name),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<Bound> {
        self.validate(params)?;
        let mut vars = BTreeMap::new();
        for (name, m) in params.iter() {
            vars.insert(name.clone(), tape.leaf(m.clone(), trainable)?);
        }
        let v = |name: &str| vars[name];
        let affine_of = |p: &str| AffineVars {
            w: v(&format!("{p}.w")),
            b: v(&format!("{p}.b")),
        };
        let attn_of = |p: &str| AttnVars {
            wq: v(&format!("{p}.wq")),
            wk: v(&format!("{p}.wk")),
            wv: v(&format!("{p}.wv")),
        };
        let stack = ArStackVars {
            embed: affine_of("ar.embed"),
            layers: (0..self.cfg.layers)
                .map(|l| {
                    (
                        attn_of(&format!("ar.{l}.attn")),
                        FfnVars {
                            w1: v(&format!("ar.{l}.ffn.w1")),
                            b1: v(&format!("ar.{l}.ffn.b1")),
                            w2: v(&format!("ar.{l}.ffn.w2")),
                            b2: v(&format!("ar.{l}.ffn.b2")),
                        },
                    )
                })
                .collect(),
        };
        let head = |order: Order| {
            let h = head_prefix(order);
            FmHeadVars {
                order,
                lift: affine_of(&format!("{h}.lift")),
                blocks: (0..self.cfg.head_depth)
                    .map(|k| FmBlockVars {
                        modulation: affine_of(&format!("{h}.{k}.mod")),
                        attn: attn_of(&format!("{h}.{k}.attn")),
                        out: affine_of(&format!("{h}.{k}.out")),
                    })
                    .collect(),
                proj: affine_of(&format!("{h}.proj")),
            }
        };
        let (first, second) = (head(Order::First), head(Order::Second));
        let class_table = v("ar.class_table");
        Ok(Bound {
            vars,
            class_table,
            stack,
            first,
            second,
        })
    }

    /// Initial condition embedding for `class` as a `tokens(0) x width` node.
    /// `class == null_class()` selects the unconditional embedding.
    pub fn class_embedding(&self, tape: &mut Tape, bound: &Bound, class: usize) -> Result<Var> {
        if class > self.cfg.num_classes {
            return Err(TensorError::Invalid {
                op: "class_embedding",
                msg: format!("class {class} out of range for {} classes", self.cfg.num_classes),
            });
        }
        let row = tape.slice_rows(bound.class_table, class, 1)?;
        tape.reshape(row, self.grid.tokens(0), self.cfg.width)
    }

    /// Transformer condition for scale `priors.len()`. `priors[j]` holds the
    /// scale-`j` token map as a `tokens(j) x channels` node.
    pub fn condition(&self, tape: &mut Tape, bound: &Bound, class: usize, priors: &[Var]) -> Result<Var> {
        let z = self.class_embedding(tape, bound, class)?;
        let embedded = priors
            .iter()
            .map(|&p| affine(tape, p, &bound.stack.embed))
            .collect::<Result<Vec<_>>>()?;
        let seq = build_sequence(tape, &self.grid, z, &embedded)?;
        forward_scale(tape, &self.grid, &bound.stack, seq, priors.len())
    }

    /// Head prediction for a `tokens x channels` state.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, order: Order, cond: Var, state: Var, t: f64) -> Result<Var> {
        head_predict(tape, bound.head(order), cond, state, t, self.cfg.ln_eps.get())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            resolution: 4,
            channels: 2,
            width: 4,
            layers: 1,
            head_depth: 1,
            num_classes: 3,
            pyramid: PyramidConfig::new(2, 2).unwrap(),
            ln_eps: LnEps::default(),
        }
    }

    #[test]
    fn init_is_seeded_and_complete() {
        let model = Model::new(cfg()).unwrap();
        let a = model.init_params(7);
        let b = model.init_params(7);
        let c = model.init_params(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        model.validate(&a).unwrap();
        assert!(a.get("ar.embed.b").unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(a.get("ar.class_table").unwrap().shape(), (4, 4 * 4));
    }

    #[test]
    fn validate_catches_shape_drift() {
        let model = Model::new(cfg()).unwrap();
        let mut p = model.init_params(1);
        p.insert("ar.embed.w", Matrix::zeros(3, 3));
        assert!(model.validate(&p).is_err());
    }

    #[test]
    fn condition_has_scale_shape() {
        let model = Model::new(cfg()).unwrap();
        let params = model.init_params(3);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params, false).unwrap();
        let y0 = tape.constant(Matrix::filled(4, 2, 0.3)).unwrap();
        let c0 = model.condition(&mut tape, &bound, 1, &[]).unwrap();
        assert_eq!(tape.shape(c0), (4, 4));
        let c1 = model.condition(&mut tape, &bound, 1, &[y0]).unwrap();
        assert_eq!(tape.shape(c1), (16, 4));
        assert!(model.class_embedding(&mut tape, &bound, 4).is_err());
        let state = tape.constant(Matrix::zeros(16, 2)).unwrap();
        let p = model.predict(&mut tape, &bound, Order::Second, c1, state, 0.5).unwrap();
        assert_eq!(tape.shape(p), (16, 2));
    }
}
