//! Command implementations behind the `scaleflow` binary.
//!
//! Exit codes: 0 success, 1 gradient check failure or other runtime error,
//! 2 malformed config or arguments, 3 I/O failure, 4 corrupt checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::bench::{self, BenchGrid, BenchReport};
use crate::checkpoint::{latent_container, Checkpoint};
use crate::config;
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckResult};
use crate::model::Model;
use crate::ppm;
use crate::sample::{generate, SampleConfig};
use crate::train::{loss_csv_header, loss_csv_row, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.hofr";
pub const LOSS_FILE: &str = "loss.csv";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: Option<f64>,
}

/// Train from a config file, streaming the loss CSV and writing the final
/// checkpoint into `out`.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<TrainOutput> {
    let cfg = config::load(config_path)?;
    std::fs::create_dir_all(out)?;
    let loss_csv = out.join(LOSS_FILE);
    let mut csv = BufWriter::new(File::create(&loss_csv)?);
    writeln!(csv, "{}", loss_csv_header(cfg.scales))?;
    let mut trainer = Trainer::new(cfg)?;
    let mut final_loss = None;
    trainer.run(|r| {
        writeln!(csv, "{}", loss_csv_row(r))?;
        final_loss = Some(r.total);
        Ok(())
    })?;
    csv.flush()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint {
        config: cfg,
        params: trainer.params,
    }
    .save(&checkpoint)?;
    Ok(TrainOutput {
        checkpoint,
        loss_csv,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub image: PathBuf,
    pub latent: PathBuf,
}

/// Generate one latent and write it as `class{c}_seed{s}.ppm` plus the raw
/// `.latent` container.
pub fn cmd_sample(ckpt: &Path, sc: &SampleConfig, out: &Path) -> Result<SampleOutput> {
    sc.validate()?;
    let ck = Checkpoint::load(ckpt)?;
    let model = Model::new(ck.config.model_config()?)?;
    if sc.class_id >= model.config().num_classes {
        return Err(Error::Config(format!(
            "class {} out of range for {} classes",
            sc.class_id,
            model.config().num_classes
        )));
    }
    let latent = generate(&model, &ck.params, sc)?;
    std::fs::create_dir_all(out)?;
    let stem = format!("class{}_seed{}", sc.class_id, sc.seed);
    let image = out.join(format!("{stem}.ppm"));
    ppm::write(&image, &latent)?;
    let header = format!(
        "class = {}\nseed = {}\nflow_steps = {}\ncfg = {}\norder = {}\n",
        sc.class_id,
        sc.seed,
        sc.flow_steps,
        sc.cfg_scale,
        sc.order.name()
    );
    let latent_path = out.join(format!("{stem}.latent"));
    latent_container(&header, &latent).save(&latent_path)?;
    Ok(SampleOutput {
        image,
        latent: latent_path,
    })
}

/// Run the benchmark grid; cells go to `out`, fits to `<out stem>.fits.csv`.
pub fn cmd_bench(out: &Path, grid: &BenchGrid) -> Result<BenchReport> {
    let report = bench::run(grid)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, report.cells_csv())?;
    std::fs::write(fits_path(out), report.fits_csv())?;
    Ok(report)
}

pub fn fits_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "bench".into());
    out.with_file_name(format!("{stem}.fits.csv"))
}

/// Every registered check, formatted one per line.
pub fn cmd_gradcheck() -> Result<Vec<CheckResult>> {
    gradcheck::run_all()
}

pub fn format_check(r: &CheckResult) -> String {
    format!(
        "{:<24} worst rel err {:.3e} (tol {:.0e}, {} entries) {}",
        r.name,
        r.worst_rel,
        r.tol,
        r.entries,
        if r.passed() { "ok" } else { "FAIL" }
    )
}
