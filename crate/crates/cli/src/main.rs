mod artifacts;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use latentmine::datakit::KEYS;
use latentmine::Error;

#[derive(Parser, Debug)]
#[command(name = "latentmine", version, about = "Mine latent priors of pretrained low-dimensional GANs")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Configuration file (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Output directory; must not exist yet
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Random seed (same as --set seed=N)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Re-execute the run recorded in a manifest.json
    #[arg(long, value_name = "MANIFEST")]
    replay: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Train a source GAN on `source_data`
    Pretrain,
    /// Stage 1: train miners for the checkpoints in `sources`
    Mine,
    /// Stage 2: finetune the stage-1 `checkpoint`
    Finetune,
    /// Draw `samples` points from `checkpoint`
    Sample,
    /// Score `checkpoint` against held-out target data
    Eval,
    /// Selection-rule and miner-depth sweeps
    Ablate,
    /// Collect report.json files into one CSV
    Report {
        /// Run directories or report.json files
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Mine => "mine",
            Command::Finetune => "finetune",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

fn key_table() -> String {
    let mut s = String::from("Configuration keys (default, origin: published setting or artifact tool choice):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        s.push_str(&format!("  {:<20} {:<18} [{}] {}\n", k.key, default, k.origin, k.help));
    }
    s.push_str("\nExit codes: 0 success, 2 config error, 3 numeric divergence, 4 io/format error.");
    s
}

pub(crate) fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Usage(_) | Error::InvalidSpec(_) | Error::Dimension { .. } => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Numeric(_) | Error::GraphConsumed => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Integrity(_) | Error::Version { .. } => 4,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::NonFinite { .. } => "non_finite",
        Error::GraphConsumed => "graph_consumed",
        Error::Divergence { .. } => "divergence",
        Error::Numeric(_) => "numeric",
        Error::Format { .. } => "format",
        Error::Integrity(_) => "integrity",
        Error::Version { .. } => "version",
        Error::Config { .. } => "config",
        Error::Usage(_) => "usage",
        Error::InvalidSpec(_) => "invalid_spec",
        Error::Io { .. } => "io",
    }
}

pub(crate) fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = serde_json::json!({
        "kind": kind(e),
        "exit_code": exit_code(e),
        "message": e.to_string(),
    });
    match e {
        Error::Config { key, .. } => rec["key"] = key.as_str().into(),
        Error::Divergence { stage, iteration, .. } => {
            rec["stage"] = stage.as_str().into();
            rec["iteration"] = (*iteration).into();
        }
        _ => {}
    }
    serde_json::json!({ "error": rec })
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_help(key_table()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    let result = match (&cli.replay, &cli.command) {
        (Some(m), None) => run::replay(m, cli.out.as_deref()),
        (None, Some(cmd)) => run::Invocation::from_cli(&cli, cmd).and_then(|inv| inv.execute()),
        (Some(_), Some(_)) => Err(Error::Usage("--replay takes no subcommand".into())),
        (None, None) => Err(Error::Usage("missing subcommand; see --help".into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
