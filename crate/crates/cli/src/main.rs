use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cassi_refine::experiment::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_refine, cmd_train, ExperimentConfig, Overrides, TrainOptions,
};
use cassi_refine::Result;

#[derive(Parser)]
#[command(
    name = "cassi-refine",
    version,
    about = "Simulate CASSI measurements and train a residual refiner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Training RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config)?.with_overrides(&Overrides {
            steps: self.steps,
            alpha: self.alpha,
            seed: self.seed,
            output_dir: self.out.clone(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, the mask and measurements.
    GenData(Common),
    /// Train the refiner on generated measurements.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Print a loss row every N steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Score initial and refined reconstructions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to the final trained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and compare the ablation variants.
    Ablate(Common),
    /// Reconstruct one measurement file.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let r = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} scenes to {} (system {})",
                r.scenes,
                cfg.output_dir.display(),
                r.system_hash
            );
        }
        Command::Train {
            common,
            resume,
            log_every,
        } => {
            let cfg = common.load()?;
            let r = cmd_train(&cfg, TrainOptions { resume }, &mut |row| {
                if log_every > 0 && row.step % log_every == 0 {
                    eprintln!(
                        "step {:>7}  l_mc {:.6e}  l_ec {:.6e}  l_total {:.6e}",
                        row.step, row.l_mc, row.l_ec, row.l_total
                    );
                }
            })?;
            if let Some(from) = r.resumed_from {
                println!("resumed at step {from}");
            }
            println!(
                "trained {} steps (now at {}), ground-truth reads {}, cache {} predicted / {} loaded",
                r.steps_run, r.final_step, r.truth_reads, r.cache.predicted, r.cache.loaded
            );
            println!("model: {}", r.model_path.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let r = cmd_eval(&cfg, checkpoint.as_deref())?;
            println!("method   psnr_db  ssim");
            println!("initial  {:7.3}  {:.4}", r.mean_initial_psnr, r.mean_initial_ssim);
            println!("refined  {:7.3}  {:.4}", r.mean_refined_psnr, r.mean_refined_ssim);
        }
        Command::Ablate(common) => {
            let cfg = common.load()?;
            let rows = cmd_ablate(&cfg, &|_, _| {})?;
            for r in rows {
                println!("{:<26} {:7.3}  {:.4}", r.variant, r.psnr_db, r.ssim);
            }
        }
        Command::Refine {
            common,
            input,
            output,
            checkpoint,
        } => {
            let cfg = common.load()?;
            let x = cmd_refine(&cfg, &input, checkpoint.as_deref(), &output)?;
            println!(
                "wrote {}x{}x{} cube to {}",
                x.height(),
                x.width(),
                x.bands(),
                output.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
