use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use pmsacl_core::pipeline::{config_help, run, Command, ConfigValues, RunFlags};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Synth,
    Pretrain,
    FitPadim,
    FitIgd,
    Score,
    Eval,
    Gradcheck,
    Report,
    Ablate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::FitPadim => Command::FitPadim,
            Cmd::FitIgd => Command::FitIgd,
            Cmd::Score => Command::Score,
            Cmd::Eval => Command::Eval,
            Cmd::Gradcheck => Command::Gradcheck,
            Cmd::Report => Command::Report,
            Cmd::Ablate => Command::Ablate,
        }
    }
}

/// Multi-centred contrastive pre-training and anomaly detection at desk scale.
///
/// Exit codes: 0 ok, 2 config error, 3 missing or unusable artifact,
/// 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "pmsacl", version, after_long_help = config_help())]
struct Cli {
    command: Cmd,
    /// Config file of `[section]` headers and `key = value` lines; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N", default_value_t = 1)]
    seed: u64,
    /// Artifact directory shared by all commands of one run.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Warn instead of failing when an input artifact carries another config hash.
    #[arg(long)]
    allow_hash_mismatch: bool,
    /// Low-contrast lesions for the synthetic set.
    #[arg(long)]
    hard: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => ConfigValues::load(p),
        None => Ok(ConfigValues::default()),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_text());
        return ExitCode::SUCCESS;
    }
    let flags = RunFlags {
        seed: cli.seed,
        out: cli.out,
        allow_hash_mismatch: cli.allow_hash_mismatch,
        hard: cli.hard,
    };
    let command = Command::from(cli.command);
    log::info!("{command}: config {}", cfg.hash_hex());
    match run(command, &cfg, &flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {command}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
