//! Wall-clock scaling benchmark.
//!
//! Each cell `(n, d, m)` is a single-scale model on an `n x n` grid, so the
//! token count is `N = n^2`. Per cell it times one attention layer, the
//! transformer forward (`m` layers), one flow-matching head forward and a
//! full training step. Every timing is the median over `runs` measurements
//! after `warmups` discarded ones; each measurement repeats the workload
//! enough times to last at least `min_run` and reports the mean per call.
//! Measurements of all cells are interleaved round by round.
//!
//! Fits reported:
//! - attention time vs `n` (log-log least squares at each `d`, `m = 1`);
//!   quadratic attention over `n^2` tokens predicts slope 4,
//! - transformer time ratio `m = 2` over `m = 1` at the largest `n`,
//! - head forward time vs `d` at each `n`. Counting multiply-adds of the
//!   head (ten `N x d x d` products against `2 N^2 d` for attention) gives
//!   slope 1.72 at `n = 4`, 1.47 at `n = 8` and 1.2 at `n = 16` over
//!   `d = 16..32`; measured slopes sit lower still, since per-op overheads and
//!   the `N^2` softmax do not grow with `d`.

use std::fmt::Write as _;
use std::hint::black_box;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::flow_matching::Order;
use crate::gradcheck::random_matrix;
use crate::model::Model;
use crate::schedule::Schedule;
use crate::train::{TrainConfig, Trainer};
use crate::transformer::{attention, AttnVars};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchGrid {
    pub ns: Vec<usize>,
    pub ds: Vec<usize>,
    pub ms: Vec<usize>,
    pub warmups: usize,
    pub runs: usize,
    pub min_run: Duration,
    /// Cells whose attention matrix would exceed this many entries are
    /// skipped.
    pub max_scores: usize,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            ns: vec![4, 8, 16],
            ds: vec![16, 32],
            ms: vec![1, 2],
            warmups: 2,
            runs: 9,
            min_run: Duration::from_millis(40),
            max_scores: 1 << 22,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// Seconds per call.
    pub attention: f64,
    pub transformer: f64,
    pub fm_forward: f64,
    pub train_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fits {
    /// `(d, slope)` of log attention time vs log n.
    pub attention_vs_n: Vec<(usize, f64)>,
    /// `(d, ratio)` of transformer time at `m = 2` over `m = 1`.
    pub m_doubling: Vec<(usize, f64)>,
    /// `(n, slope)` of log head-forward time vs log d.
    pub fm_vs_d: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<Cell>,
    pub skipped: Vec<String>,
    pub fits: Fits,
}

/// A timed closure and the number of calls per measurement.
struct Workload<'a> {
    f: Box<dyn FnMut() -> Result<()> + 'a>,
    reps: usize,
}

impl Workload<'_> {
    fn measure(&mut self) -> Result<f64> {
        let t = Instant::now();
        for _ in 0..self.reps {
            (self.f)()?;
        }
        Ok(t.elapsed().as_secs_f64() / self.reps as f64)
    }
}

/// Median seconds per call of every workload. Measurements are taken in
/// rounds that visit each workload once, so slow drift in machine load
/// affects all workloads alike instead of biasing whichever ran last.
fn time_interleaved(fs: Vec<Box<dyn FnMut() -> Result<()> + '_>>, warmups: usize, runs: usize, min_run: Duration) -> Result<Vec<f64>> {
    let mut ws = Vec::with_capacity(fs.len());
    for mut f in fs {
        let start = Instant::now();
        f()?;
        let once = start.elapsed().max(Duration::from_nanos(1));
        let reps = (min_run.as_secs_f64() / once.as_secs_f64()).ceil().max(1.0) as usize;
        ws.push(Workload { f, reps });
    }
    for _ in 0..warmups {
        for w in &mut ws {
            w.measure()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(runs); ws.len()];
    for _ in 0..runs.max(1) {
        for (w, s) in ws.iter_mut().zip(&mut samples) {
            s.push(w.measure()?);
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        })
        .collect())
}

/// Median seconds per call of `f`.
pub fn time_median(mut f: impl FnMut(), warmups: usize, runs: usize, min_run: Duration) -> f64 {
    let timed: Box<dyn FnMut() -> Result<()> + '_> = Box::new(|| {
        f();
        Ok(())
    });
    time_interleaved(vec![timed], warmups, runs, min_run).expect("infallible workload")[0]
}

fn cell_config(n: usize, d: usize, m: usize) -> TrainConfig {
    TrainConfig {
        scales: 1,
        resolution: n,
        width: d,
        layers: m,
        head_depth: 1,
        batch: 1,
        schedule: Schedule::vp(),
        ..TrainConfig::toy()
    }
}

type Job = Box<dyn FnMut() -> Result<()>>;

/// The four timed workloads of one cell: attention, transformer forward,
/// head forward, training step.
fn cell_jobs(n: usize, d: usize, m: usize) -> Result<[Job; 4]> {
    let cfg = cell_config(n, d, m);
    let model = Rc::new(Model::new(cfg.model_config()?)?);
    let params = model.init_params(cfg.seed);
    let tokens = n * n;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_matrix(&mut rng, tokens, d, 1.0);
    let ws: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt())).collect();
    let state = random_matrix(&mut rng, tokens, cfg.channels, 1.0);

    let attention_job: Job = Box::new(move || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let w = AttnVars {
            wq: tape.constant(ws[0].clone())?,
            wk: tape.constant(ws[1].clone())?,
            wv: tape.constant(ws[2].clone())?,
        };
        black_box(attention(&mut tape, xv, &w)?);
        Ok(())
    });

    let transformer_job: Job = {
        let model = Rc::clone(&model);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params, false)?;
        let base = tape.len();
        Box::new(move || {
            tape.truncate(base);
            black_box(model.condition(&mut tape, &bound, 0, &[])?);
            Ok(())
        })
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &params, false)?;
    let cond = model.condition(&mut tape, &bound, 0, &[])?;
    let s = tape.constant(state)?;
    let base = tape.len();
    let fm_job: Job = {
        let model = Rc::clone(&model);
        Box::new(move || {
            tape.truncate(base);
            black_box(model.predict(&mut tape, &bound, Order::First, cond, s, 0.5)?);
            Ok(())
        })
    };

    let mut trainer = Trainer::new(cfg)?;
    let train_job: Job = Box::new(move || {
        black_box(trainer.train_step()?);
        Ok(())
    });
    Ok([attention_job, transformer_job, fm_job, train_job])
}

/// Time a single cell on its own.
pub fn run_cell(n: usize, d: usize, m: usize, grid: &BenchGrid) -> Result<Cell> {
    let jobs = Vec::from(cell_jobs(n, d, m)?);
    let t = time_interleaved(jobs, grid.warmups, grid.runs, grid.min_run)?;
    Ok(Cell {
        n,
        d,
        m,
        attention: t[0],
        transformer: t[1],
        fm_forward: t[2],
        train_step: t[3],
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn fit(cells: &[Cell]) -> Fits {
    let find = |n: usize, d: usize, m: usize| cells.iter().find(|c| (c.n, c.d, c.m) == (n, d, m));
    let mut ds: Vec<usize> = cells.iter().map(|c| c.d).collect();
    ds.sort_unstable();
    ds.dedup();
    let mut ns: Vec<usize> = cells.iter().map(|c| c.n).collect();
    ns.sort_unstable();
    ns.dedup();
    // Cells below n = 4 are dominated by constant overheads.
    let fit_ns: Vec<usize> = ns.iter().copied().filter(|&n| n >= 4).collect();

    let attention_vs_n = ds
        .iter()
        .filter_map(|&d| {
            let pts: Vec<(f64, f64)> = fit_ns
                .iter()
                .filter_map(|&n| find(n, d, 1).map(|c| (n as f64, c.attention)))
                .collect();
            loglog_slope(&pts).map(|s| (d, s))
        })
        .collect();
    let m_doubling = match fit_ns.last() {
        Some(&n) => ds
            .iter()
            .filter_map(|&d| Some((d, find(n, d, 2)?.transformer / find(n, d, 1)?.transformer)))
            .collect(),
        None => Vec::new(),
    };
    let fm_vs_d = fit_ns
        .iter()
        .filter_map(|&n| {
            let pts: Vec<(f64, f64)> = ds
                .iter()
                .filter_map(|&d| find(n, d, 1).map(|c| (d as f64, c.fm_forward)))
                .collect();
            loglog_slope(&pts).map(|s| (n, s))
        })
        .collect();
    Fits {
        attention_vs_n,
        m_doubling,
        fm_vs_d,
    }
}

pub fn run(grid: &BenchGrid) -> Result<BenchReport> {
    let mut keys = Vec::new();
    let mut jobs: Vec<Job> = Vec::new();
    let mut skipped = Vec::new();
    for &n in &grid.ns {
        for &d in &grid.ds {
            for &m in &grid.ms {
                let scores = (n * n) * (n * n);
                if scores > grid.max_scores {
                    skipped.push(format!("n={n} d={d} m={m}: {scores} attention scores exceed the limit"));
                    continue;
                }
                keys.push((n, d, m));
                jobs.extend(cell_jobs(n, d, m)?);
            }
        }
    }
    let t = time_interleaved(jobs, grid.warmups, grid.runs, grid.min_run)?;
    let cells: Vec<Cell> = keys
        .iter()
        .zip(t.chunks_exact(4))
        .map(|(&(n, d, m), t)| Cell {
            n,
            d,
            m,
            attention: t[0],
            transformer: t[1],
            fm_forward: t[2],
            train_step: t[3],
        })
        .collect();
    let fits = fit(&cells);
    Ok(BenchReport { cells, skipped, fits })
}

impl BenchReport {
    /// Per-cell CSV with times in seconds.
    pub fn cells_csv(&self) -> String {
        let mut s = String::from("n,d,m,attention_s,transformer_s,fm_forward_s,train_step_s\n");
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e}",
                c.n, c.d, c.m, c.attention, c.transformer, c.fm_forward, c.train_step
            )
            .expect("string write");
        }
        s
    }

    /// `metric,value` CSV of the fitted exponents and ratios.
    pub fn fits_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (d, v) in &self.fits.attention_vs_n {
            writeln!(s, "attention_slope_vs_n_d{d},{v}").expect("string write");
        }
        for (d, v) in &self.fits.m_doubling {
            writeln!(s, "transformer_m_doubling_ratio_d{d},{v}").expect("string write");
        }
        for (n, v) in &self.fits.fm_vs_d {
            writeln!(s, "fm_forward_slope_vs_d_n{n},{v}").expect("string write");
        }
        s
    }
}
