use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scaleflow::bench::BenchGrid;
use scaleflow::cli;
use scaleflow::sample::SampleConfig;
use scaleflow::Order;

#[derive(Parser)]
#[command(name = "scaleflow", about = "Train, sample and benchmark the multi-scale flow model")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a key = value config; writes checkpoint.hofr and loss.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one image from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 4.3)]
        cfg: f64,
        #[arg(long, default_value = "second")]
        order: Order,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the scaling grid and write a CSV report.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every finite-difference gradient check.
    Gradcheck,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match args.cmd {
        Cmd::Train { config, out } => cli::cmd_train(&config, &out).map(|o| {
            match o.final_loss {
                Some(l) => println!("final loss {l:.6e}"),
                None => println!("no steps run"),
            }
            println!("wrote {} and {}", o.checkpoint.display(), o.loss_csv.display());
            0
        }),
        Cmd::Sample {
            ckpt,
            class,
            seed,
            steps,
            cfg,
            order,
            out,
        } => {
            let sc = SampleConfig {
                class_id: class,
                flow_steps: steps,
                cfg_scale: cfg,
                seed,
                order,
            };
            cli::cmd_sample(&ckpt, &sc, &out).map(|o| {
                println!("wrote {} and {}", o.image.display(), o.latent.display());
                0
            })
        }
        Cmd::Bench { out } => cli::cmd_bench(&out, &BenchGrid::default()).map(|r| {
            for s in &r.skipped {
                println!("skipped {s}");
            }
            print!("{}", r.fits_csv());
            0
        }),
        Cmd::Gradcheck => cli::cmd_gradcheck().map(|results| {
            for r in &results {
                println!("{}", cli::format_check(r));
            }
            if results.iter().all(|r| r.passed()) {
                0
            } else {
                1
            }
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
