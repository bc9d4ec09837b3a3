use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "zsmt", version, about = "Multilingual zero-shot translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the run lives and which configuration drives it.
#[derive(Args, Clone)]
pub struct RunArgs {
    /// Experiment configuration (TOML). Defaults to `<out>/config.toml`
    /// when present, else built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed for all randomness.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct DataArgs {
    /// Number of synthetic languages, pivot included.
    #[arg(long)]
    pub languages: Option<usize>,
    /// All directions share the same training sentences.
    #[arg(long, conflicts_with = "disjoint")]
    pub multiway: bool,
    /// Each direction draws its own training sentences.
    #[arg(long)]
    pub disjoint: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DropoutArg {
    Element,
    Variational,
}

#[derive(Args, Clone, Default)]
pub struct ModelArgs {
    /// Encoder layer without the attention residual; 0 disables it.
    #[arg(long)]
    pub removal_layer: Option<usize>,
    /// Take the modified layer's attention queries from sinusoids.
    #[arg(long)]
    pub position_query: bool,
    #[arg(long, value_enum)]
    pub dropout_mode: Option<DropoutArg>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    All,
    Supervised,
    ZeroShot,
    Pivot,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model; generates data first when the run has none.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Translate whitespace-tokenized sentences, one per line.
    Translate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        src_lang: String,
        #[arg(long)]
        tgt_lang: String,
        /// Translate through the pivot language in two steps.
        #[arg(long)]
        pivot: bool,
        /// Input file; standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// BLEU and off-target rates on the test directions.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
    },
    /// Linear probes for token, position and language identity per layer.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of token-id, position-id, language-id.
        #[arg(long, value_delimiter = ',', default_value = "token-id,position-id,language-id")]
        labels: Vec<String>,
    },
    /// SVCCA similarity between languages after each encoder layer.
    Svcca {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Add a new language with a fraction of the data and fine-tune.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        /// Output run directory for the adapted model.
        #[arg(long)]
        to: PathBuf,
        /// Code of the new language.
        #[arg(long)]
        language: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Summarize a run directory.
    Report {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { run, data } => commands::gen_data(&run, &data),
        Command::Train { run, data, model } => commands::train(&run, &data, &model),
        Command::Translate {
            run,
            src_lang,
            tgt_lang,
            pivot,
            input,
        } => commands::translate(&run, &src_lang, &tgt_lang, pivot, input.as_deref()),
        Command::Evaluate { run, mode } => commands::evaluate(&run, mode),
        Command::Probe { run, labels } => commands::probe(&run, &labels),
        Command::Svcca { run } => commands::svcca(&run),
        Command::Adapt {
            run,
            to,
            language,
            epochs,
        } => commands::adapt(&run, &to, language, epochs),
        Command::Report { run } => commands::report(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
