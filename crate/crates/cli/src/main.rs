use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use seqfreq::harness::{
    aggregate_medians, divergence_diagnostics, generate_datasets, histogram, load_store,
    run_experiment, scatter_export, write_aggregate_csv, write_diagnostics_csv, MetricField,
    RunOptions,
};
use seqfreq::{ExperimentConfig, GridPoint};

#[derive(Parser)]
#[command(
    name = "seqfreq",
    version,
    about = "Output-sequence frequency experiments for recurrent networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved experiment configuration as JSON.
    Config(ConfigArgs),
    /// Write every dataset of the sweep as TSV files.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every (dataset, architecture, seed) cell into a record store.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Store directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted store, running only the missing cells.
        #[arg(long)]
        resume: bool,
        /// Keep the per-epoch loss trace in train.jsonl.
        #[arg(long)]
        trace: bool,
        /// Stop after this many cells; the store stays resumable.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Per-dataset medians over seeds.
    Aggregate {
        #[arg(long)]
        store: PathBuf,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write divergence counts per architecture.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Bin counts of median test loss or dominant frequency per architecture.
    Histogram {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum)]
        field: Field,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-seed values ordered by label-change count and median, for scatter plots.
    Scatter {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value = "test-loss")]
        sort_by: Field,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    TestLoss,
    OmegaDom,
}

impl From<Field> for MetricField {
    fn from(f: Field) -> Self {
        match f {
            Field::TestLoss => MetricField::TestLoss,
            Field::OmegaDom => MetricField::OmegaDom,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 500 datasets, 10 seeds, 12 architectures.
    Full,
    /// 50 datasets, 5 seeds, 2-layer width-32 cells.
    Desk,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; flags override its fields.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    n_datasets: Option<usize>,
    #[arg(long)]
    seq_length: Option<usize>,
    #[arg(long)]
    max_changes: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated `kind:layers:hidden`, e.g. `lstm:2:200,gru:2:200`.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<GridPoint>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    log_clamp: Option<f64>,
    #[arg(long)]
    root_seed: Option<u64>,
    #[arg(long, env = "SEQFREQ_WORKERS")]
    workers: Option<usize>,
    /// Draw a separate dataset for every architecture.
    #[arg(long)]
    per_arch_datasets: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                serde_json::from_reader(f).with_context(|| format!("parsing {}", path.display()))?
            }
            None => match self.preset {
                Preset::Full => ExperimentConfig::default(),
                Preset::Desk => ExperimentConfig::desk(),
            },
        };
        macro_rules! set {
            ($flag:expr => $($field:ident).+) => {
                if let Some(v) = $flag.clone() {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(self.n_datasets => n_datasets);
        set!(self.seq_length => seq_length);
        set!(self.max_changes => max_changes);
        set!(self.seeds => seeds_per_dataset);
        set!(self.grid => grid);
        set!(self.lr => train.learning_rate);
        set!(self.epochs => train.epochs);
        set!(self.beta1 => train.adam_beta1);
        set!(self.beta2 => train.adam_beta2);
        set!(self.adam_eps => train.adam_epsilon);
        set!(self.log_clamp => train.log_clamp);
        set!(self.root_seed => root_seed);
        set!(self.workers => worker_count);
        if self.per_arch_datasets {
            cfg.shared_datasets = false;
        }
        Ok(cfg)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Config(args) => {
            let cfg = args.resolve()?;
            for w in cfg.validate()? {
                warn!("{w}");
            }
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Generate { config, out } => {
            let n = generate_datasets(&config.resolve()?, &out)?;
            eprintln!("wrote {n} datasets to {}", out.display());
        }
        Command::Run {
            config,
            out,
            resume,
            trace,
            max_cells,
        } => {
            let cfg = config.resolve()?;
            let opts = RunOptions {
                resume,
                cell_limit: max_cells,
                with_trace: trace,
            };
            let summary = run_experiment::<f64>(&cfg, &out, &opts)?;
            eprintln!(
                "ran {} cells, {} already stored, {} of {} expected; {} diverged",
                summary.executed_cells,
                summary.skipped_cells,
                summary.executed_cells + summary.skipped_cells,
                summary.expected_cells,
                summary.diverged_cells
            );
            if summary.diverged_cells > 0 {
                return Ok(ExitCode::from(2));
            }
            if !summary.complete {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Aggregate {
            store,
            out,
            diagnostics,
        } => {
            let records = load_store(&store)?;
            let rows = aggregate_medians(&records)?;
            write_aggregate_csv(&rows, output(out.as_deref())?)?;
            if let Some(p) = diagnostics {
                write_diagnostics_csv(&divergence_diagnostics(&records), output(Some(&p))?)?;
            }
        }
        Command::Histogram {
            store,
            field,
            bins,
            out,
        } => {
            let rows = aggregate_medians(&load_store(&store)?)?;
            histogram(&rows, field.into(), bins)?.write_csv(output(out.as_deref())?)?;
        }
        Command::Scatter {
            store,
            sort_by,
            out,
        } => {
            let records = load_store(&store)?;
            if records.is_empty() {
                bail!("{} holds no records", store.display());
            }
            scatter_export(&records, sort_by.into(), output(out.as_deref())?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
