use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use opera::commands::compare::cmd_compare;
use opera::commands::eval::{cmd_eval, DataSource, EvalOptions, Protocol};
use opera::commands::train::cmd_train;
use opera::commands::verify::{cmd_verify, VerifyOptions};
use opera::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "opera", version, about = "Hierarchical similarity learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Probe,
    Knn,
    Ordering,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical checks; one JSON line per check.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb_gradient: f64,
    },
    /// Pretrain from a config file; writes metrics.jsonl, final.ckpt and config.resolved.
    Train {
        config: PathBuf,
        /// Output directory (overrides OPERA_OUT and the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints one JSON object.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config whose data split to evaluate on.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        config: Option<PathBuf>,
        /// CSV dataset, split 75/25 with --seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "probe")]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate several configs; one CSV row per config.
    Compare {
        configs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Writes to stdout and, when given, to a file as well.
struct Tee {
    file: Option<std::fs::File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Verify {
            trials,
            seed,
            perturb_gradient,
        } => {
            let opts = VerifyOptions {
                trials,
                seed,
                perturb_gradient,
            };
            cmd_verify(&opts, std::io::stdout().lock())
        }
        Command::Train { config, out } => {
            let summary = cmd_train(&config, out.as_deref())?;
            println!("{}", serde_json::to_string(&summary).expect("plain struct serializes"));
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            protocol,
            k,
            samples,
            probe_epochs,
            seed,
        } => {
            let source = match (&config, &data) {
                (Some(c), None) => DataSource::Config(c),
                (None, Some(d)) => DataSource::Csv(d),
                _ => return Err(CliError::Usage("give exactly one of --config or --data".into())),
            };
            let protocol = match protocol {
                ProtocolArg::Probe => Protocol::Probe,
                ProtocolArg::Knn => Protocol::Knn,
                ProtocolArg::Ordering => Protocol::Ordering,
            };
            let opts = EvalOptions {
                k,
                samples,
                probe_epochs,
                seed,
            };
            let value = cmd_eval(&checkpoint, source, protocol, &opts)?;
            println!("{value}");
            Ok(())
        }
        Command::Compare { configs, output } => {
            let file = match &output {
                Some(p) => Some(std::fs::File::create(p).map_err(|e| CliError::Io {
                    path: p.clone(),
                    source: e,
                })?),
                None => None,
            };
            cmd_compare(&configs, Tee { file })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("opera: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
