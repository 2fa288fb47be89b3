//! Plain `key = value` run configuration.
//!
//! One key per line; `#` starts a comment; blank lines are ignored. Keys not
//! present keep their [`TrainConfig::toy`] value, unknown or repeated keys
//! are errors.
//!
//! | key | field |
//! |---|---|
//! | `K`, `a`, `n`, `c` | scales, pyramid base, resolution, channels |
//! | `width`, `m`, `head_depth` | token width, transformer layers, blocks per head |
//! | `schedule` | `vp` or `linear` |
//! | `vp_a`, `vp_b` | VP coefficients (only with `schedule = vp`) |
//! | `lr`, `beta1`, `beta2`, `weight_decay` | AdamW |
//! | `steps`, `batch`, `seed` | run length and seeding |
//! | `num_classes`, `cfg_dropout`, `ln_eps` | conditioning and normalization |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schedule::{Schedule, VP_DEFAULT_A, VP_DEFAULT_B};
use crate::train::TrainConfig;

pub const KEYS: [&str; 20] = [
    "K",
    "a",
    "n",
    "c",
    "width",
    "m",
    "head_depth",
    "schedule",
    "vp_a",
    "vp_b",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "steps",
    "batch",
    "seed",
    "num_classes",
    "cfg_dropout",
    "ln_eps",
];

fn num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

/// Parse a config file body and validate the result.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::toy();
    let mut seen = BTreeSet::new();
    let mut kind: Option<String> = None;
    let (mut vp_a, mut vp_b) = (None, None);
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
        }
        match key {
            "K" => cfg.scales = num(line, key, value)?,
            "a" => cfg.base = num(line, key, value)?,
            "n" => cfg.resolution = num(line, key, value)?,
            "c" => cfg.channels = num(line, key, value)?,
            "width" => cfg.width = num(line, key, value)?,
            "m" => cfg.layers = num(line, key, value)?,
            "head_depth" => cfg.head_depth = num(line, key, value)?,
            "schedule" => kind = Some(value.to_string()),
            "vp_a" => vp_a = Some(num(line, key, value)?),
            "vp_b" => vp_b = Some(num(line, key, value)?),
            "lr" => cfg.lr = num(line, key, value)?,
            "beta1" => cfg.beta1 = num(line, key, value)?,
            "beta2" => cfg.beta2 = num(line, key, value)?,
            "weight_decay" => cfg.weight_decay = num(line, key, value)?,
            "steps" => cfg.steps = num(line, key, value)?,
            "batch" => cfg.batch = num(line, key, value)?,
            "seed" => cfg.seed = num(line, key, value)?,
            "num_classes" => cfg.num_classes = num(line, key, value)?,
            "cfg_dropout" => cfg.cfg_dropout = num(line, key, value)?,
            "ln_eps" => cfg.ln_eps = num(line, key, value)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    let kind = kind.unwrap_or_else(|| cfg.schedule.name().to_string());
    cfg.schedule = match kind.as_str() {
        "linear" => {
            if vp_a.is_some() || vp_b.is_some() {
                return Err(Error::Config("vp_a / vp_b require schedule = vp".into()));
            }
            Schedule::Linear
        }
        "vp" => {
            let a: f64 = vp_a.unwrap_or(VP_DEFAULT_A);
            let b: f64 = vp_b.unwrap_or(VP_DEFAULT_B);
            if !(a >= 0.0 && b >= 0.0 && a + b > 0.0) {
                return Err(Error::Config(format!("VP coefficients must be non-negative and not both zero, got a = {a}, b = {b}")));
            }
            Schedule::Vp { a, b }
        }
        other => return Err(Error::Config(format!("unknown schedule {other:?}"))),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &std::path::Path) -> Result<TrainConfig> {
    parse(&std::fs::read_to_string(path)?)
}

/// Canonical text form listing every key. `parse(&render(c)) == c`.
pub fn render(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
    kv("K", cfg.scales.to_string());
    kv("a", cfg.base.to_string());
    kv("n", cfg.resolution.to_string());
    kv("c", cfg.channels.to_string());
    kv("width", cfg.width.to_string());
    kv("m", cfg.layers.to_string());
    kv("head_depth", cfg.head_depth.to_string());
    kv("schedule", cfg.schedule.name().to_string());
    if let Schedule::Vp { a, b } = cfg.schedule {
        kv("vp_a", a.to_string());
        kv("vp_b", b.to_string());
    }
    kv("lr", cfg.lr.to_string());
    kv("beta1", cfg.beta1.to_string());
    kv("beta2", cfg.beta2.to_string());
    kv("weight_decay", cfg.weight_decay.to_string());
    kv("steps", cfg.steps.to_string());
    kv("batch", cfg.batch.to_string());
    kv("seed", cfg.seed.to_string());
    kv("num_classes", cfg.num_classes.to_string());
    kv("cfg_dropout", cfg.cfg_dropout.to_string());
    kv("ln_eps", cfg.ln_eps.to_string());
    out
}
