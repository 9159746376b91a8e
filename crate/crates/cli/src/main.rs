use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skipvae_cli::{cmd_compare, cmd_eval, cmd_oracle_check, cmd_probe, cmd_train, CliError, Config};

#[derive(Parser)]
#[command(name = "skipvae", version, about = "Train and diagnose VAEs with skip-connected decoders")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Root seed; replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train,
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate a plain and a skip-connected model side by side.
    Compare,
    /// Check the linear-Gaussian ordering sweep and the MI estimator.
    OracleCheck,
    /// Linear classification accuracy on posterior means.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Train => {
            let t = cmd_train(&cfg, out)?;
            if let Some(r) = t.history.records.last() {
                println!("trained {} epochs, final train elbo {:.4}", r.epoch, r.elbo);
            }
            println!("checkpoint: {}", t.checkpoint_path.display());
        }
        Command::Eval { checkpoint } => {
            let e = cmd_eval(&cfg, &checkpoint, out)?;
            println!("{}", serde_json::to_string(&e.report).expect("report serializes"));
        }
        Command::Compare => {
            let c = cmd_compare(&cfg, out)?;
            for arm in &c.arms {
                println!("{}", serde_json::to_string(&arm.eval.report).expect("report serializes"));
            }
            println!("delta {}", serde_json::to_string(&c.deltas).expect("deltas serialize"));
        }
        Command::OracleCheck => {
            let o = cmd_oracle_check(&cfg, out)?;
            println!(
                "ordering held in {}/{} configurations; estimator within tolerance on {}/{} models",
                o.theorem.len() - o.violations(),
                o.theorem.len(),
                o.mi.len() - o.mi_failures(),
                o.mi.len()
            );
            o.into_result()?;
        }
        Command::Probe { checkpoint } => {
            let p = cmd_probe(&cfg, &checkpoint, out)?;
            println!("probe accuracy {:.4} ({} train, {} test)", p.accuracy, p.n_train, p.n_test);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
