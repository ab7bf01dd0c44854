use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqcap_core::capability::SignatureAlg;
use seqcap_services::config::Mode;
use seqcap_services::deploy::{init, Deployment, DeploymentOptions};

#[derive(Parser)]
#[command(name = "seqcap-server", about = "Authorization, resource and ESO servers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate keys, certificates, fixtures and a deployment file.
    Init {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "ecdsa")]
        alg: SignatureAlg,
        #[arg(long, default_value = "ecdsa")]
        tls_alg: SignatureAlg,
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long, default_value_t = 3)]
        rs: usize,
        /// AS port; the ESO and resource servers take the following ports.
        #[arg(long, default_value_t = 8443)]
        base_port: u16,
    },
    /// Run every server of a deployment file until interrupted.
    Run {
        #[arg(long, default_value = "deployment.toml")]
        config: PathBuf,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().command {
        Command::Init { dir, alg, tls_alg, mode, rs, base_port } => {
            let opts = DeploymentOptions { alg, tls_alg, mode, rs_count: rs, ..Default::default() };
            match init(&dir, &opts, base_port) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Run { config } => {
            let d = match Deployment::from_file(&config).await {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            tracing::info!(auth = %d.as_url, eso = %d.eso_url, resource = ?d.rs_urls, "serving");
            let _ = tokio::signal::ctrl_c().await;
            d.shutdown().await;
            ExitCode::SUCCESS
        }
    }
}
