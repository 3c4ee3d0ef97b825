use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use twostage_vae::experiments::{
    cmd_diagnose, cmd_kappa_sweep, cmd_oracle_theorem1, cmd_two_stage, load_config, DiagnoseConfig,
    OracleConfig, RunConfig, SweepConfig,
};
use twostage_vae::Error;

/// Two-stage VAE experiments on synthetic manifolds.
#[derive(Debug, Parser)]
#[command(name = "twostage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train both stages; write report.json, traces.csv and checkpoints.
    TwoStage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the analytic construction; write oracle_report.json.
    #[command(name = "oracle-theorem1")]
    OracleTheorem1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the two-stage run over latent widths; write sweep.csv.
    KappaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a saved model; write diagnose.json.
    Diagnose {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Domain(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::TwoStage { config, out } => {
            let cfg: RunConfig = load_config(&config)?;
            let run = cmd_two_stage(&cfg, &out)?;
            let r = &run.report;
            println!(
                "mmd_stage1={} mmd_stage2={} active_dims={} log_gamma={}",
                r.mmd_stage1,
                r.mmd_stage2.map_or("none".to_string(), |v| v.to_string()),
                r.active_dim_estimate,
                r.log_gamma_final
            );
            if let Some(msg) = &r.stage2_failure {
                eprintln!("error: {msg}");
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
        Command::OracleTheorem1 { config, out } => {
            let cfg: OracleConfig = load_config(&config)?;
            let report = cmd_oracle_theorem1(&cfg, &out)?;
            for row in &report.rows {
                println!("gamma={} tv={} posterior_kl={} ks={}", row.gamma, row.tv, row.posterior_kl, row.ks);
            }
        }
        Command::KappaSweep { config, out } => {
            let cfg: SweepConfig = load_config(&config)?;
            for row in cmd_kappa_sweep(&cfg, &out)? {
                println!("kappa={} recon_mse={} active_dims={}", row.kappa, row.recon_mse, row.active_dim_estimate);
            }
        }
        Command::Diagnose { checkpoint, config, out } => {
            let cfg: DiagnoseConfig = match config {
                Some(p) => load_config(&p)?,
                None => DiagnoseConfig::default(),
            };
            let report = cmd_diagnose(&checkpoint, &cfg, &out)?;
            println!("kappa={} d={} log_gamma={}", report.kappa, report.ambient_dim, report.log_gamma);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
