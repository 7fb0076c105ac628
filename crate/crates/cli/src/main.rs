use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tamperscope_cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_gen_masks, cmd_gen_scenes, cmd_infer, cmd_train,
    exit_code, parse_perturbation, AblateOptions, CliResult, CommandResult, GenDataOptions,
    GenMasksOptions, TrainCmdOptions, EXIT_USAGE,
};

/// Inpainting forgery detection and localisation.
#[derive(Parser)]
#[command(name = "tamperscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedurally generated scene images.
    GenScenes {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Propose, segment and filter object masks and add one random mask per
    /// image.
    GenMasks {
        /// Directory of input images.
        #[arg(long)]
        input: PathBuf,
        /// Manifest to write; masks go to `masks/` next to it.
        #[arg(long)]
        manifest: PathBuf,
        /// Call the proposer and segmenter services instead of the stubs.
        #[arg(long)]
        remote: bool,
        /// TOML with service URLs and timeouts (environment variables
        /// override it).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inpaint one mask per manifest entry with every configured inpainter.
    GenData {
        /// Mask manifest from gen-masks.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for tampered images, the new manifest and
        /// failures.json.
        #[arg(long)]
        out: PathBuf,
        /// TOML inpainter configuration (default: presets pi-smooth and
        /// pi-grain).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reuse tampered images that already exist.
        #[arg(long)]
        skip_existing: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the fusion block and heads; writes checkpoint.json, metrics.csv
    /// and config.toml.
    Train {
        /// Dataset manifest from gen-data.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Localise and detect tampering in one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Tamper map PNG to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the map as JSON probabilities.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Evaluate detection and localisation on a manifest; writes
    /// report.json and report.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Perturbation applied before inference, as kind:level
        /// (jpeg:70, resize:0.5, blur:5).
        #[arg(long)]
        perturb: Option<String>,
        /// Name of the dataset in the report.
        #[arg(long, default_value = "eval")]
        dataset_id: String,
    },
    /// Train and evaluate each row of a sweep file.
    Ablate {
        /// Sweep TOML: a [base] training config and [[row]] overrides.
        #[arg(long)]
        config: PathBuf,
        /// Training manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluation manifest.
        #[arg(long)]
        eval_manifest: PathBuf,
        /// Output directory; one subdirectory per row.
        #[arg(long)]
        out: PathBuf,
        /// Run only this row.
        #[arg(long)]
        ablation_row: Option<String>,
        /// Overrides the seed of every row.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(command: Command) -> CliResult<CommandResult> {
    match command {
        Command::GenScenes {
            out,
            count,
            size,
            seed,
        } => cmd_gen_scenes(&out, count, size, seed),
        Command::GenMasks {
            input,
            manifest,
            remote,
            config,
            seed,
        } => cmd_gen_masks(
            &input,
            &manifest,
            &GenMasksOptions {
                remote,
                service_config: config,
                seed,
            },
        ),
        Command::GenData {
            manifest,
            out,
            config,
            skip_existing,
            seed,
        } => cmd_gen_data(
            &manifest,
            &out,
            &GenDataOptions {
                inpainter_config: config,
                skip_existing,
                seed,
            },
        ),
        Command::Train {
            manifest,
            out,
            config,
            seed,
            resume,
        } => cmd_train(
            &manifest,
            &out,
            &TrainCmdOptions {
                config,
                seed,
                resume,
            },
        ),
        Command::Infer {
            checkpoint,
            image,
            out,
            raw,
        } => cmd_infer(&checkpoint, &image, &out, raw.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            perturb,
            dataset_id,
        } => {
            let perturbation = perturb.as_deref().map(parse_perturbation).transpose()?;
            cmd_eval(&checkpoint, &manifest, &out, perturbation, &dataset_id)
        }
        Command::Ablate {
            config,
            manifest,
            eval_manifest,
            out,
            ablation_row,
            seed,
        } => cmd_ablate(
            &config,
            &manifest,
            &eval_manifest,
            &out,
            &AblateOptions {
                row: ablation_row,
                seed,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(result) => {
            println!("{}", result.summary);
            for path in &result.artifacts_written {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::from(result.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
