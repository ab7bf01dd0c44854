use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqcap_client::bench::{self, BenchConfig, Target};
use seqcap_client::scenario::{self, ScenarioError};
use seqcap_core::capability::SignatureAlg;
use seqcap_services::config::Mode;
use seqcap_services::deploy::Deployment;

#[derive(Parser)]
#[command(name = "client", about = "Drive protocol flows and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a JSON scenario; exits 1 on an outcome mismatch and 2 on environment errors.
    Run {
        scenario: PathBuf,
        /// Use the servers described by this deployment file instead of starting fresh ones.
        #[arg(long)]
        deployment: Option<PathBuf>,
    },
    /// Benchmark one configuration against freshly started servers.
    Bench {
        #[arg(long, default_value = "full")]
        mode: Mode,
        #[arg(long, default_value = "ecdsa")]
        alg: SignatureAlg,
        /// Algorithm of the servers' TLS certificates.
        #[arg(long, default_value = "ecdsa")]
        tls_alg: SignatureAlg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value = "authz")]
        target: Target,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Window over which the users of one run start.
        #[arg(long, default_value_t = 1000)]
        spread_ms: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run full and plain mode with interleaved runs and report the overhead of full mode.
        /// With `--out`, the plain-mode rows go to a sibling `.plain.csv` file.
        #[arg(long)]
        compare: bool,
    },
}

async fn run_scenario(path: PathBuf, deployment: Option<PathBuf>) -> ExitCode {
    let result = async {
        let s = scenario::load(&path)?;
        match deployment {
            None => scenario::run_standalone(&s).await,
            Some(file) => {
                let d = Deployment::from_file(&file).await.map_err(|e| ScenarioError::Environment(e.to_string()))?;
                let r = scenario::run(&d, &s).await;
                d.shutdown().await;
                r
            }
        }
    }
    .await;
    match result {
        Ok(report) => {
            for s in &report.steps {
                println!("ok   step {} {}: {}", s.index, s.op, s.observed);
            }
            println!("PASS {}", report.name);
            ExitCode::SUCCESS
        }
        Err(e @ ScenarioError::Mismatch { .. }) => {
            println!("FAIL {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run { scenario, deployment } => run_scenario(scenario, deployment).await,
        Command::Bench { mode, alg, tls_alg, n, target, runs, spread_ms, out, compare } => {
            let mut cfg = BenchConfig::new(mode, alg, target, n);
            cfg.tls_alg = tls_alg;
            cfg.runs = runs;
            cfg.spread = std::time::Duration::from_millis(spread_ms);
            if compare {
                let c = match bench::compare(&cfg).await {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                };
                println!("{}\n{}", c.full.summary(), c.plain.summary());
                println!("overhead of full mode: {}", c.overhead);
                if let Some(path) = &out {
                    let plain_path = path.with_extension("plain.csv");
                    for (report, p) in [(&c.full, path), (&c.plain, &plain_path)] {
                        if let Err(e) = report.write_csv(p) {
                            eprintln!("error: {}: {e}", p.display());
                            return ExitCode::from(2);
                        }
                    }
                }
                return ExitCode::SUCCESS;
            }
            let report = match bench::bench(&cfg).await {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            println!("{}", report.summary());
            if let Some(path) = &out {
                if let Err(e) = report.write_csv(path) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            ExitCode::SUCCESS
        }
    }
}
