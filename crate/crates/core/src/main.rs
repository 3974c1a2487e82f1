use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use smoothgnn::data::{load_dataset, make_splits_sized, resolve_dataset_dir, Split, SplitSizes};
use smoothgnn::diffusion::{DiffusionConfig, Solver};
use smoothgnn::experiment::{
    export_embeddings, load_training_data, propagate_on_split, run_experiment, train_single, validate_dataset,
    Checkpoint, ExperimentSpec, ResultsTable, DATA_DIR_ENV, RUNS_DIR,
};
use smoothgnn::losses::{LossConfig, Reduction, SmoothnessVariant};
use smoothgnn::models::{ModelConfig, ModelKind};
use smoothgnn::trainer::{StopMetric, TrainConfig};

#[derive(Parser)]
#[command(name = "smoothgnn", version, about = "Graph smoothness-regularized GNN experiments")]
struct Cli {
    /// Directory that dataset names are resolved against.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and print the results table.
    Run {
        spec: PathBuf,
        /// Override the spec's number of splits.
        #[arg(long)]
        n_splits: Option<usize>,
        /// Override the spec's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Rebuild the results table from an output directory's run records.
    Aggregate { output_dir: PathBuf },
    /// Train one model on one split and save a checkpoint.
    Train(TrainArgs),
    /// Label propagation on one split.
    Propagate {
        dataset: PathBuf,
        #[arg(long, default_value_t = 20)]
        ell: usize,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this split file instead of drawing one.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "auto")]
        solver: SolverArg,
    },
    /// Write last-hidden-layer activations of a checkpoint as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset directory and print its statistics.
    ValidateDataset { dataset: PathBuf },
    /// Draw random splits and write them as JSON files.
    MakeSplits {
        dataset: PathBuf,
        #[arg(long, default_value_t = 20)]
        ell: usize,
        #[arg(long, default_value_t = 10)]
        n_splits: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long, default_value_t = smoothgnn::data::VAL_SIZE)]
        val_size: usize,
        #[arg(long, default_value_t = smoothgnn::data::TEST_SIZE)]
        test_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SolverArg {
    Auto,
    Direct,
    Iterative,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    CrossEntropy,
    L2,
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    #[arg(long, default_value = "gcn")]
    model: ModelKind,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Smoothness weight; 0 trains the unregularized model.
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, value_enum, default_value = "cross-entropy")]
    variant: VariantArg,
    #[arg(long, default_value_t = 20)]
    ell: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    /// Stop on validation accuracy instead of validation loss.
    #[arg(long)]
    stop_on_accuracy: bool,
    /// Leave the diagonal of the normalized adjacency out of the smoothness term.
    #[arg(long)]
    no_self_pairs: bool,
    /// Average the loss terms instead of summing them.
    #[arg(long)]
    mean_reduction: bool,
    /// Monitor only the fitness term of the validation loss.
    #[arg(long)]
    val_fit_only: bool,
    /// Keep raw feature values instead of L1-normalizing rows.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the training report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn dataset_dir(arg: &Path, data_dir: Option<&Path>) -> PathBuf {
    resolve_dataset_dir(arg, data_dir)
}

fn one_split(dir: &Path, ell: usize, seed: u64, split: Option<&Path>) -> anyhow::Result<Split> {
    if let Some(path) = split {
        return Ok(Split::load(path)?);
    }
    let ds = load_dataset(dir)?;
    Ok(make_splits_sized(&ds, ell, 1, seed, SplitSizes::default())?.remove(0))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let data_dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Run {
            spec,
            n_splits,
            output_dir,
        } => {
            let mut spec = ExperimentSpec::load(&spec).with_context(|| format!("reading {}", spec.display()))?;
            if let Some(n) = n_splits {
                spec.n_splits = n;
            }
            if let Some(out) = output_dir {
                spec.output_dir = out;
            }
            let table = run_experiment(&spec, data_dir)?;
            print!("{}", table.to_text());
            if table.rows.iter().any(|r| r.failure.is_some()) {
                bail!("some cells failed; see {}", spec.output_dir.display());
            }
        }
        Command::Aggregate { output_dir } => {
            let table = ResultsTable::from_run_dir(&output_dir.join(RUNS_DIR))?;
            table.write(&output_dir)?;
            print!("{}", table.to_text());
        }
        Command::Train(args) => {
            let dir = dataset_dir(&args.dataset, data_dir);
            let split = one_split(&dir, args.ell, args.seed, args.split.as_deref())?;
            let normalize = !args.no_normalize;
            let (_, data) = load_training_data(&dir, normalize)?;
            let variant = match args.variant {
                VariantArg::CrossEntropy => SmoothnessVariant::CrossEntropy,
                VariantArg::L2 => SmoothnessVariant::L2,
            };
            let cfg = TrainConfig {
                max_epochs: args.max_epochs,
                patience: args.patience,
                loss: LossConfig {
                    mu: args.mu,
                    variant,
                    include_self_pairs: !args.no_self_pairs,
                    reduction: if args.mean_reduction { Reduction::Mean } else { Reduction::Sum },
                },
                val_loss_includes_smoothness: !args.val_fit_only,
                stop_metric: if args.stop_on_accuracy {
                    StopMetric::ValAccuracy
                } else {
                    StopMetric::ValLoss
                },
                ..TrainConfig::default()
            };
            let (model, report) = train_single(&data, &split, ModelConfig::new(args.model, args.layers), &cfg)?;
            Checkpoint {
                model,
                normalize_features: normalize,
            }
            .save(&args.checkpoint)?;
            if let Some(path) = &args.report {
                std::fs::write(path, serde_json::to_string(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "best epoch {} of {}, val acc {:.4}, test acc {:.4}",
                report.best_epoch, report.epochs_run, report.val_acc, report.test_acc
            );
        }
        Command::Propagate {
            dataset,
            ell,
            gamma,
            seed,
            split,
            solver,
        } => {
            let dir = dataset_dir(&dataset, data_dir);
            let split = one_split(&dir, ell, seed, split.as_deref())?;
            let ds = load_dataset(&dir)?;
            let cfg = DiffusionConfig {
                solver: match solver {
                    SolverArg::Auto => Solver::Auto,
                    SolverArg::Direct => Solver::Direct,
                    SolverArg::Iterative => Solver::Iterative,
                },
                ..DiffusionConfig::with_gamma(gamma)
            };
            let s = propagate_on_split(&ds, &split, &cfg)?;
            if !s.missing_classes.is_empty() {
                eprintln!("warning: classes without labeled nodes: {:?}", s.missing_classes);
            }
            if let Some(r) = s.unconverged_residual {
                eprintln!("warning: iterative solver stopped with residual {r:e}");
            }
            println!("gamma {} seed {}: accuracy {:.4} on {} test nodes", gamma, split.seed, s.accuracy, s.n_test);
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let (n, d) = export_embeddings(&ckpt, &dataset_dir(&dataset, data_dir), &out)?;
            println!("wrote {n} x {d} embeddings to {}", out.display());
        }
        Command::ValidateDataset { dataset } => {
            let report = validate_dataset(&dataset_dir(&dataset, data_dir))?;
            println!("{}", report.summary_line());
            println!(
                "  {} unique undirected edges, {} self-loops, {} isolated nodes, class sizes {:?}",
                report.unique_edges, report.self_loops, report.isolated_nodes, report.class_sizes
            );
            for m in &report.reference_mismatches {
                println!("  note: {m}");
            }
        }
        Command::MakeSplits {
            dataset,
            ell,
            n_splits,
            base_seed,
            val_size,
            test_size,
            out,
        } => {
            let ds = load_dataset(&dataset_dir(&dataset, data_dir))?;
            let sizes = SplitSizes {
                val: val_size,
                test: test_size,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for split in make_splits_sized(&ds, ell, n_splits, base_seed, sizes)? {
                split.save(&out.join(format!("split_ell{ell}_seed{}.json", split.seed)))?;
            }
            println!("wrote {n_splits} splits to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
