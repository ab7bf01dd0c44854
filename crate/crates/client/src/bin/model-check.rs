use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use seqcap_core::model::{parse_sequence, sweep, Model, Mutation};

/// Exhaustive exploration of the sequencing protocol model. Prints a JSON verdict and
/// exits 1 when a violation is found.
#[derive(Parser)]
#[command(name = "model-check")]
struct Cli {
    /// Number of resource servers.
    #[arg(long, default_value_t = 3)]
    rs: usize,
    /// Permission sequence such as `RS1:p1,RS2:p2,RS3:p3`.
    #[arg(long, required_unless_present = "sweep")]
    seq: Option<String>,
    #[arg(long, default_value_t = 12)]
    depth: usize,
    /// Disable one rule of the monitor: no-state-check, no-perm-check or keep-caps-on-com.
    #[arg(long)]
    mutate: Option<Mutation>,
    /// Check every sequence up to this length over up to `--rs` servers instead of `--seq`.
    #[arg(long, value_name = "MAX_LEN")]
    sweep: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let (ok, json) = if let Some(max_len) = cli.sweep {
        match sweep(cli.rs, max_len, cli.depth, cli.mutate) {
            Ok(report) => {
                let mut v = serde_json::to_value(&report).expect("report serializes");
                v["ok"] = report.failures.is_empty().into();
                v["elapsed_ms"] = (start.elapsed().as_millis() as u64).into();
                (report.failures.is_empty(), v)
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        let spec = cli.seq.expect("clap requires --seq without --sweep");
        let verdict = parse_sequence(&spec)
            .and_then(|seq| Model::new(cli.rs, seq))
            .and_then(|m| m.with_mutation(cli.mutate).explore(cli.depth));
        match verdict {
            Ok(v) => {
                let mut json = serde_json::to_value(&v).expect("verdict serializes");
                json["elapsed_ms"] = (start.elapsed().as_millis() as u64).into();
                (v.ok, json)
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&json).expect("json"));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
