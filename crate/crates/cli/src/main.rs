use clap::{Parser, Subcommand};
use natpatch_cli::ablation::{run_ablation, AblationKind};
use natpatch_cli::config::RunConfig;
use natpatch_cli::corpus::generate_toy_corpus;
use natpatch_cli::error::{Result, RunnerError};
use natpatch_cli::experiment::{
    load_artifacts, run_experiment, save_artifacts, summarize_run, train_toy_model, ModelSource,
    TrainingSummary,
};
use natpatch_cli::manifest::ingest_manifest;
use natpatch_cli::report;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Output root override; relative --out paths are resolved against it.
const OUTPUT_ROOT_ENV: &str = "NATPATCH_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "natpatch",
    version,
    about = "Naturalistic adversarial patch attacks on vision-language retrieval, desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct AttackArgs {
    /// Evaluation manifest (line-delimited {id, image, captions}).
    #[arg(long)]
    manifest: PathBuf,
    /// Surrogate model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Denoiser checkpoint.
    #[arg(long)]
    denoiser: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attack only the first N examples.
    #[arg(long)]
    max_examples: Option<usize>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes corpus (train + re-jittered test split).
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Train the toy dual encoder and denoiser; writes checkpoints and
    /// training metrics.
    TrainToy {
        /// Training manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Held-out manifest for the recall floor (defaults to test.jsonl
        /// next to the training manifest).
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the batch attack over an evaluation split.
    Attack(AttackArgs),
    /// Rebuild summary.csv / summary.json from a finished run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Factor sweeps: top-k, patch size, or placement strategy.
    Ablate {
        #[command(subcommand)]
        kind: AblateCommand,
    },
    /// Render a result table; --reference prints the published baseline
    /// fixture, --run renders a finished run.
    Report {
        #[arg(long, conflicts_with = "run")]
        reference: bool,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Sweep the top-k loss cutoff.
    Topk {
        #[command(flatten)]
        common: AttackArgs,
        /// Comma-separated k values, e.g. 5,10,63.
        #[arg(long)]
        grid: String,
    },
    /// Sweep the patch side ratio.
    Size {
        #[command(flatten)]
        common: AttackArgs,
        /// Comma-separated ratios, e.g. 0.05,0.1,0.15,0.2.
        #[arg(long)]
        grid: String,
    },
    /// Compare placement strategies under both optimizer routes.
    Location {
        #[command(flatten)]
        common: AttackArgs,
    },
}

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>, max_examples: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if max_examples.is_some() {
        cfg.max_examples = max_examples;
    }
    Ok(cfg)
}

fn run_attack_command(args: &AttackArgs, grid: Option<(AblationKind, Vec<String>)>) -> Result<()> {
    let cfg = load_config(&args.config, args.seed, args.max_examples)?;
    let manifest = ingest_manifest(&args.manifest)?;
    let out = resolve_out(&args.out);
    let artifacts = load_artifacts(&args.model, &args.denoiser)?;
    match grid {
        None => {
            let summary = run_experiment(
                &manifest,
                ModelSource::Checkpoints {
                    model: args.model.clone(),
                    denoiser: args.denoiser.clone(),
                },
                &cfg,
                &out,
            )?;
            println!(
                "attacked {} examples; criterion success rate {:.3}; mean iterations {:.1}",
                summary.examples_attacked, summary.success_rate_at_criterion, summary.mean_iterations
            );
            println!("summary written to {}", out.join("summary.csv").display());
        }
        Some((kind, grid)) => {
            let table = run_ablation(kind, &grid, &artifacts, &manifest, &cfg, &out)?;
            print!("{}", table.render_csv());
            println!(
                "ablation table written to {}",
                out.join(format!("ablation_{}.csv", kind.name())).display()
            );
        }
    }
    Ok(())
}

fn parse_grid(raw: &str) -> Vec<String> {
    raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { out, count, seed, image_size } => {
            let out = resolve_out(&out);
            let manifest = generate_toy_corpus(&out, count, seed, image_size)?;
            println!(
                "wrote {} train + {} test images under {}",
                manifest.len(),
                manifest.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainToy { manifest, heldout, out, config, seed } => {
            let cfg = load_config(&config, seed, None)?;
            let train = ingest_manifest(&manifest)?;
            let heldout_path = match heldout {
                Some(p) => p,
                None => {
                    let sibling = manifest.with_file_name("test.jsonl");
                    if !sibling.is_file() {
                        return Err(RunnerError::Usage(
                            "no --heldout manifest given and no test.jsonl beside the training manifest"
                                .into(),
                        ));
                    }
                    sibling
                }
            };
            let heldout = ingest_manifest(&heldout_path)?;
            let out = resolve_out(&out);
            let (artifacts, report, denoiser_losses) = train_toy_model(&train, &heldout, &cfg)?;
            save_artifacts(&out, &artifacts)?;
            let summary = TrainingSummary {
                epochs_run: report.epochs_run,
                clean_recall_at_1: report.clean_recall_at_1,
                final_model_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                final_denoiser_loss: denoiser_losses.last().copied().unwrap_or(f64::NAN),
            };
            std::fs::write(out.join("training.json"), serde_json::to_string_pretty(&summary)?)?;
            println!(
                "trained in {} epochs, held-out R@1 {:.3}; checkpoints under {}",
                summary.epochs_run,
                summary.clean_recall_at_1,
                out.display()
            );
            Ok(())
        }
        Command::Attack(args) => run_attack_command(&args, None),
        Command::Eval { run } => {
            let run = resolve_out(&run);
            let summary = summarize_run(&run)?;
            println!(
                "summary rebuilt for {} ({} attacked examples)",
                run.display(),
                summary.examples_attacked
            );
            Ok(())
        }
        Command::Ablate { kind } => match kind {
            AblateCommand::Topk { common, grid } => {
                run_attack_command(&common, Some((AblationKind::TopK, parse_grid(&grid))))
            }
            AblateCommand::Size { common, grid } => {
                run_attack_command(&common, Some((AblationKind::Size, parse_grid(&grid))))
            }
            AblateCommand::Location { common } => {
                run_attack_command(&common, Some((AblationKind::Location, Vec::new())))
            }
        },
        Command::Report { reference, run, out } => {
            let out = resolve_out(&out);
            if reference {
                let (provenance, rows) = report::reference_rows()?;
                report::write_table_csv(&out, &rows)?;
                println!("reference table ({provenance}) written to {}", out.display());
            } else if let Some(run_dir) = run {
                let run_dir = resolve_out(&run_dir);
                let summary = summarize_run(&run_dir)?;
                let row = report::row_from_retrieval_report(
                    &summary.report,
                    "toy-dual-encoder",
                    &summary.dataset,
                    "Ours",
                );
                report::write_table_csv(&out, &[row])?;
                println!("run table written to {}", out.display());
            } else {
                return Err(RunnerError::Usage("report needs --reference or --run DIR".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
