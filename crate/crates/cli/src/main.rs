use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsocc_core::pipeline;
use gsocc_core::Error;

#[derive(Parser)]
#[command(name = "gsocc", version, about = "Semantic Gaussian occupancy toolkit")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory from a scene config.
    Synth {
        #[command(flatten)]
        io: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit Gaussian properties to a scene's ground truth by gradient descent.
    Fit {
        #[command(flatten)]
        io: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the per-iteration loss and metric trace.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Run initialization, refinement blocks and splatting.
    Forward {
        #[command(flatten)]
        io: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// IoU / mIoU of a predicted grid against a ground-truth grid.
    Eval {
        #[command(flatten)]
        io: Common,
    },
    /// Splat one set of Gaussians at several resolutions.
    SplatMultires {
        #[command(flatten)]
        io: Common,
    },
    /// Export Gaussians or a grid as ASCII PLY.
    ExportPly {
        #[command(flatten)]
        io: Common,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { io, seed } => {
            for (name, hash) in pipeline::cmd_synth(&io.config, &io.out, seed)? {
                println!("{name} {hash:016x}");
            }
        }
        Command::Fit { io, seed, dump_trace } => {
            let r = pipeline::cmd_fit(&io.config, &io.out, seed, dump_trace)?;
            print_report(&r.report);
        }
        Command::Forward { io, seed } => {
            let r = pipeline::cmd_forward(&io.config, &io.out, seed)?;
            println!("gaussians {}", r.gaussians.len());
        }
        Command::Eval { io } => print_report(&pipeline::cmd_eval(&io.config, &io.out)?),
        Command::SplatMultires { io } => {
            for g in pipeline::cmd_splat_multires(&io.config, &io.out)? {
                let [x, y, z] = g.spec().counts();
                println!("grid {x}x{y}x{z}");
            }
        }
        Command::ExportPly { io } => println!("{}", pipeline::cmd_export_ply(&io.config, &io.out)?.display()),
    }
    Ok(())
}

fn print_report(r: &gsocc_core::metrics::IouReport) {
    let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.4}"));
    println!("IoU {} mIoU {}", f(r.iou), f(r.miou));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
