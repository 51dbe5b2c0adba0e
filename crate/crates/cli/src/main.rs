use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfm_cli::artifacts::Progress;
use pfm_cli::config::RunConfig;
use pfm_cli::run;
use pfm_core::Error;

#[derive(Parser)]
#[command(name = "pfm", version, about = "Preference flow matching toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the reference policy and label preference pairs.
    GenData(Common),
    /// Train a flow field on a preference dataset.
    Train(Common),
    /// Push source samples through a trained flow.
    Infer(Common),
    /// Iteratively collect, train, and compose flows.
    Iterate(Common),
    /// Check the closed-form marginal results on discrete instances.
    Oracle(Common),
    /// Train the reward model, DPO, and RLHF comparators.
    Baseline(Common),
    /// Score sample clouds.
    Eval(Common),
    /// Run the full 2-D toy comparison.
    #[command(name = "repro-8g")]
    Repro8g(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parse { .. } | Error::Io { .. } | Error::RawIo(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (name, common) = match &cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Infer(c) => ("infer", c),
        Command::Iterate(c) => ("iterate", c),
        Command::Oracle(c) => ("oracle", c),
        Command::Baseline(c) => ("baseline", c),
        Command::Eval(c) => ("eval", c),
        Command::Repro8g(c) => ("repro-8g", c),
    };
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    };
    let cfg = match cfg {
        Ok(c) => run::apply_overrides(c, common.seed, common.out.clone()),
        Err(e) => {
            eprintln!("pfm {name}: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let progress = Progress::stdout();
    let result = match &cli.command {
        Command::GenData(_) => run::cmd_gen_data(&cfg, &progress),
        Command::Train(_) => run::cmd_train(&cfg, &progress),
        Command::Infer(_) => run::cmd_infer(&cfg, &progress),
        Command::Iterate(_) => run::cmd_iterate(&cfg, &progress),
        Command::Oracle(_) => run::cmd_oracle(&cfg, &progress).and_then(|s| {
            if s.all_passed {
                Ok(())
            } else {
                Err(Error::Numerical {
                    step: 0,
                    msg: "oracle checks failed, see oracle_summary.json".into(),
                })
            }
        }),
        Command::Baseline(_) => run::cmd_baseline(&cfg, &progress).map(|_| ()),
        Command::Eval(_) => run::cmd_eval(&cfg, &progress).map(|_| ()),
        Command::Repro8g(_) => run::cmd_repro_8g(&cfg, &progress).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pfm {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
