use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcfscan::Mode;
use dcfscan_cli::{
    cmd_build_kb, cmd_calibrate, cmd_classify, cmd_evaluate, cmd_export_embeddings, cmd_generate_synthetic,
    cmd_simulate, read_scenarios, CliError, Overrides, PipelineConfig,
};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "knn_only")]
    KnnOnly,
    #[value(name = "zero_shot")]
    ZeroShot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::KnnOnly => Mode::KnnOnly,
            ModeArg::ZeroShot => Mode::ZeroShot,
        }
    }
}

/// Evidence-grounded malware verdicts for lifted binary functions.
///
/// Exit codes: 0 success, 1 unexpected failure, 2 configuration or usage
/// error, 3 input data or index error, 4 transport error.
#[derive(Debug, Parser)]
#[command(name = "dcfscan", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Seed for synthetic agents and the synthetic corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the knowledge-base index from a labelled corpus.
    BuildKb {
        corpus: PathBuf,
        /// Index path; defaults to `paths.kb_index`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify every binary in a corpus.
    Classify { input: PathBuf },
    /// Sweep the configured grid on a validation corpus.
    Calibrate { validation: PathBuf },
    /// Classify a labelled corpus and report metrics and diagnostics.
    Evaluate { input: PathBuf },
    /// Monte-Carlo study of the scoring layer from a scenario file.
    Simulate { scenarios: PathBuf },
    /// Dump composite embeddings as CSV.
    ExportEmbeddings {
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic knowledge-base and test corpora.
    GenerateSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    cfg.apply(
        &Overrides {
            mode: cli.mode.map(Mode::from),
            seed: cli.seed,
            workers: cli.workers,
            report_dir: cli.report_dir,
        },
        |k| std::env::var(k).ok(),
    );
    Ok(match cli.command {
        Command::BuildKb { corpus, out } => cmd_build_kb(&cfg, &corpus, out.as_deref())?.summary(),
        Command::Classify { input } => cmd_classify(&cfg, &input)?.summary(),
        Command::Calibrate { validation } => cmd_calibrate(&cfg, &validation)?.summary(),
        Command::Evaluate { input } => cmd_evaluate(&cfg, &input)?.summary(),
        Command::Simulate { scenarios } => {
            let reports = cmd_simulate(&cfg, &read_scenarios(&scenarios)?)?;
            reports
                .iter()
                .map(|r| {
                    format!(
                        "p={} W={} N={} reps={}: mean FES {:.4}, mean ECS {:.4}, malicious {}, benign {}, uncertain {}",
                        r.p_malicious, r.w, r.n_agents, r.reps, r.mean_fes, r.mean_ecs, r.malicious, r.benign, r.uncertain
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::ExportEmbeddings { corpus, out } => {
            let (path, rows) = cmd_export_embeddings(&cfg, &corpus, out.as_deref())?;
            format!("wrote {rows} rows to {}", path.display())
        }
        Command::GenerateSynthetic { out_dir } => {
            let r = cmd_generate_synthetic(&cfg, &out_dir)?;
            format!(
                "wrote {} knowledge-base and {} test records ({} ambiguous) to {}",
                r.kb_records,
                r.test_records,
                r.ambiguous.len(),
                out_dir.display()
            )
        }
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
