//! `canalseg` command line: argument parsing, config resolution and exit
//! codes. The subcommands themselves live in [`commands`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "canalseg", version, about = "Dual-stage mandibular canal segmentation", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset base seed (phantom-gen) or the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for the numeric kernels. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    PhantomGen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Print the dynamic window of a volume as JSON.
    Window { volume: PathBuf },
    /// Train the coarse localization net on the train split.
    TrainCoarse {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the fine segmentation net on the train split.
    TrainFine {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the full pipeline on one volume, writing every stage output.
    Infer {
        volume: PathBuf,
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long)]
        fine: Option<PathBuf>,
    },
    /// Merge and refine the fine-stage outputs of an `infer` directory, or
    /// refine a single mask.
    Postprocess {
        #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
        infer_dir: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Score the test split, from checkpoints or saved predictions.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long)]
        fine: Option<PathBuf>,
        /// Directory of `<case id>/mask_{left,right}.volz` predictions.
        #[arg(long, conflicts_with_all = ["coarse", "fine"])]
        pred_dir: Option<PathBuf>,
        /// Also write per-case metrics as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Compare fine-net variants with and without multi-scale inputs and
    /// residual shortcuts.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Reuse a trained coarse net instead of training one per seed.
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

/// A missing or contradictory argument detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| UsageError(format!("no {name} given: pass --{name} or set it under \"paths\" in the config")).into())
}

fn required_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| UsageError("no output directory: pass --out-dir or set paths.out_dir".into()).into())
}

fn execute(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out_dir = g.out_dir.clone().or_else(|| cfg.paths.out_dir.clone());
    let out = out_dir.as_deref();
    match cli.command {
        Command::PhantomGen { count, test_count } => {
            if let Some(s) = g.seed {
                cfg.dataset.base_seed = s;
            }
            cfg.dataset.count = count.unwrap_or(cfg.dataset.count);
            cfg.dataset.test_count = test_count.unwrap_or(cfg.dataset.test_count);
            cfg.validate()?;
            let out = required_out(out)?;
            let m = commands::phantom_gen(&cfg, out)?;
            println!("wrote {} cases to {}", m.cases.len(), out.display());
        }
        Command::Window { volume } => {
            let w = commands::window(&cfg, &volume, out)?;
            println!("{}", serde_json::to_string(&w)?);
        }
        Command::TrainCoarse { dataset } => {
            apply_seed(&mut cfg, g.seed);
            let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
            let path = commands::cmd_train_coarse(&cfg, &dataset, required_out(out)?)?;
            println!("{}", path.display());
        }
        Command::TrainFine { dataset } => {
            apply_seed(&mut cfg, g.seed);
            let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
            let path = commands::cmd_train_fine(&cfg, &dataset, required_out(out)?)?;
            println!("{}", path.display());
        }
        Command::Infer { volume, coarse, fine } => {
            let coarse = required(coarse, &cfg.paths.coarse_checkpoint, "coarse")?;
            let fine = required(fine, &cfg.paths.fine_checkpoint, "fine")?;
            let o = commands::infer(&cfg, &volume, &coarse, &fine, required_out(out)?)?;
            println!("{} canal voxels ({} left, {} right)", o.full.count(), o.left.count(), o.right.count());
        }
        Command::Postprocess { infer_dir, mask } => {
            let out = required_out(out)?;
            match (infer_dir, mask) {
                (Some(dir), _) => {
                    commands::postprocess_infer_dir(&cfg, &dir, out)?;
                }
                (None, Some(mask)) => {
                    commands::postprocess_mask(&cfg, &mask, out)?;
                }
                (None, None) => unreachable!("clap requires one of --infer-dir and --mask"),
            }
        }
        Command::Eval { dataset, coarse, fine, pred_dir, csv } => {
            let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
            let report = match pred_dir {
                Some(p) => commands::evaluate_predictions(&dataset, &p)?,
                None => {
                    let coarse = required(coarse, &cfg.paths.coarse_checkpoint, "coarse")?;
                    let fine = required(fine, &cfg.paths.fine_checkpoint, "fine")?;
                    let (mut c, mut f) = commands::load_nets(&coarse, &fine)?;
                    commands::evaluate_with_nets(&cfg, &dataset, &mut c, &mut f)?
                }
            };
            if let Some(out) = out {
                commands::prepare_out_dir(out, &cfg)?;
                commands::write_eval(out, &report, csv)?;
            }
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        Command::Ablate { dataset, coarse, seeds } => {
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            cfg.validate()?;
            let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
            let out = required_out(out)?;
            commands::ablate(&cfg, &dataset, coarse.as_deref(), out)?;
            print!("{}", std::fs::read_to_string(out.join(commands::ABLATION_CSV))?);
        }
    }
    Ok(())
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
