mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loopcheck::backends::BackendKind;
use loopcheck::pipeline::{HelperMode, QuestionStyle};
use loopcheck::Overrides;

#[derive(Parser)]
#[command(name = "loopcheck", version, about = "Detect and remove object hallucinations by attribute loop checks")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Loop-rate threshold in [0, 1]; lower scores are flagged.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    min_attributes: Option<usize>,
    #[arg(long, global = true, value_enum)]
    question_style: Option<StyleArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend_kind: Option<KindArg>,
    #[arg(long, global = true, value_enum)]
    helper_mode: Option<HelperArg>,
    /// Scene file for the simulator backend.
    #[arg(long, global = true)]
    scene_file: Option<PathBuf>,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Full,
    Simple,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Http,
    Simulator,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum HelperArg {
    Model,
    Rules,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            lambda: self.lambda,
            min_attributes: self.min_attributes,
            question_style: self.question_style.map(|s| match s {
                StyleArg::Full => QuestionStyle::FullCoverage,
                StyleArg::Simple => QuestionStyle::Simple,
            }),
            seed: self.seed,
            backend_kind: self.backend_kind.map(|k| match k {
                KindArg::Http => BackendKind::Http,
                KindArg::Simulator => BackendKind::Simulator,
                KindArg::Replay => BackendKind::Replay,
            }),
            helper_mode: self.helper_mode.map(|h| match h {
                HelperArg::Model => HelperMode::Model,
                HelperArg::Rules => HelperMode::RuleBased,
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Answer one instruction, check it and print the revised answer.
    Run(commands::RunArgs),
    /// Run a benchmark record file through the pipeline.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Re-score saved transcripts over a grid of thresholds.
    Sweep(commands::SweepArgs),
    /// Simulator utilities.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Summarize saved transcripts.
    Report(commands::ReportArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Yes/no existence questions: accuracy, precision, recall, F1.
    Pope(commands::EvalArgs),
    /// Paired existence questions: accuracy and accuracy+.
    Mme(commands::EvalArgs),
}

#[derive(Subcommand)]
enum SimCommand {
    /// Generate scenes and balanced benchmark records.
    Generate(commands::GenerateArgs),
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.common.verbose);
    let c = &cli.common;
    let result = match &cli.command {
        Command::Run(a) => commands::run(c, a),
        Command::Eval(EvalCommand::Pope(a)) => commands::eval(c, a, commands::Benchmark::Pope),
        Command::Eval(EvalCommand::Mme(a)) => commands::eval(c, a, commands::Benchmark::Mme),
        Command::Sweep(a) => commands::sweep(c, a),
        Command::Sim(SimCommand::Generate(a)) => commands::generate(a),
        Command::Report(a) => commands::report(c, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
