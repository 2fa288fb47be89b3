//! Train briefly, then sample one image per class to PPM files.
//!
//! `cargo run --release --example sample_image -- [out_dir]`

use std::path::PathBuf;

use scaleflow::checkpoint::Checkpoint;
use scaleflow::cli::cmd_sample;
use scaleflow::sample::SampleConfig;
use scaleflow::train::{train, TrainConfig};

fn main() -> scaleflow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/sample_image".into()).into();
    let cfg = TrainConfig { steps: 300, ..TrainConfig::toy() };
    let (params, _) = train(&cfg)?;
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join("toy.hofr");
    Checkpoint { config: cfg, params }.save(&ckpt)?;
    for class_id in 0..cfg.num_classes {
        let sc = SampleConfig { class_id, seed: 7, ..Default::default() };
        let o = cmd_sample(&ckpt, &sc, &out)?;
        println!("{}", o.image.display());
    }
    Ok(())
}
