//! Load generation against a deployment, full mode versus plain OAuth.
//!
//! Every simulated user is an independent task with its own HTTPS client, so each pays
//! its own handshake. The `n` users of one run start evenly spread over `spread`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use seqcap_core::capability::{
    sign, MasterCapability, PermissionEntry, PermissionSequence, PrincipalKeys, RootAuthority, SignatureAlg,
};
use seqcap_services::client::ProtocolClient;
use seqcap_services::config::Mode;
use seqcap_services::deploy::{Deployment, DeploymentOptions};
use seqcap_services::fixtures::{HONEST_CLIENT, OWNER};
use seqcap_services::http::parse_timing;
use seqcap_services::tls::ClientOptions;
use seqcap_services::wire::TokenResponse;

use crate::stats::{mean, percentile, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Token requests at the authorization server.
    Authz,
    /// PoP-protected requests at a resource server, tokens obtained beforehand.
    Resource,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: Mode,
    pub alg: SignatureAlg,
    pub tls_alg: SignatureAlg,
    pub target: Target,
    pub n: usize,
    pub runs: usize,
    pub spread: Duration,
}

impl BenchConfig {
    pub fn new(mode: Mode, alg: SignatureAlg, target: Target, n: usize) -> Self {
        BenchConfig { mode, alg, tls_alg: SignatureAlg::EcdsaP256Sha256, target, n, runs: 5, spread: Duration::from_secs(1) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("deployment: {0}")]
    Deploy(String),
    #[error("request failed: {0}")]
    Request(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub latencies_ms: Vec<f64>,
    /// Mean server-reported time per phase, in milliseconds.
    pub phases_ms: BTreeMap<String, f64>,
}

impl RunResult {
    pub fn mean_ms(&self) -> f64 {
        mean(&self.latencies_ms)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub alg: SignatureAlg,
    pub target: Target,
    pub n: usize,
    pub runs: Vec<RunResult>,
    /// Per-run mean latency, across runs.
    pub latency_ms: Estimate,
    pub p99_ms: f64,
    pub phases_ms: BTreeMap<String, Estimate>,
}

impl BenchReport {
    fn from_runs(cfg: &BenchConfig, runs: Vec<RunResult>) -> Self {
        let means: Vec<f64> = runs.iter().map(RunResult::mean_ms).collect();
        let all: Vec<f64> = runs.iter().flat_map(|r| r.latencies_ms.iter().copied()).collect();
        let mut phases: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for (k, v) in &r.phases_ms {
                phases.entry(k.clone()).or_default().push(*v);
            }
        }
        BenchReport {
            mode: cfg.mode,
            alg: cfg.alg,
            target: cfg.target,
            n: cfg.n,
            latency_ms: Estimate::of(&means),
            p99_ms: if all.is_empty() { f64::NAN } else { percentile(&all, 99.0) },
            phases_ms: phases.into_iter().map(|(k, v)| (k, Estimate::of(&v))).collect(),
            runs,
        }
    }

    /// One row per request.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        #[derive(Serialize)]
        struct Row<'a> {
            mode: Mode,
            alg: &'a str,
            target: Target,
            n: usize,
            run: usize,
            request: usize,
            latency_ms: f64,
        }
        let alg = alg_name(self.alg);
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.runs {
            for (i, l) in r.latencies_ms.iter().enumerate() {
                w.serialize(Row { mode: self.mode, alg, target: self.target, n: self.n, run: r.run, request: i, latency_ms: *l })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:?} {} {:?} n={}: mean latency {} ms over {} runs (p99 {:.3} ms)",
            self.mode,
            alg_name(self.alg),
            self.target,
            self.n,
            self.latency_ms,
            self.runs.len(),
            self.p99_ms
        );
        for (phase, e) in &self.phases_ms {
            s.push_str(&format!("\n  {phase}: {e} ms"));
        }
        s
    }
}

pub fn alg_name(alg: SignatureAlg) -> &'static str {
    match alg {
        SignatureAlg::EcdsaP256Sha256 => "ecdsa",
        SignatureAlg::Rsa3072Sha256 => "rsa",
    }
}

/// Relative cost of `full` over `plain`, from run-wise ratios of mean latency.
pub fn overhead(full: &BenchReport, plain: &BenchReport) -> Estimate {
    let ratios: Vec<f64> = full
        .runs
        .iter()
        .zip(&plain.runs)
        .map(|(f, p)| f.mean_ms() / p.mean_ms() - 1.0)
        .collect();
    Estimate::of(&ratios)
}

/// The single-read claim benchmarked at both servers: one context, no frequency limit.
fn inquiry(c: &ProtocolClient) -> seqcap_core::capability::ClientClaim {
    c.claim("Payment", OWNER, "balance", &["read"], &[])
}

struct User {
    client: ProtocolClient,
    token: Option<TokenResponse>,
}

async fn prepare_users(d: &Deployment, cfg: &BenchConfig) -> Result<Vec<User>, BenchError> {
    let keys = d.client(HONEST_CLIENT).clone();
    let shared = d.http(&ClientOptions::default()).map_err(|e| BenchError::Deploy(e.to_string()))?;
    let issuer = ProtocolClient::new(keys.clone(), shared, &d.as_url);
    let mut users = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let http = d.http(&ClientOptions::default()).map_err(|e| BenchError::Deploy(e.to_string()))?;
        let token = match cfg.target {
            Target::Authz => None,
            Target::Resource => {
                let reply = issuer.request_token(&inquiry(&issuer)).await.map_err(|e| BenchError::Request(e.to_string()))?;
                let status = reply.status;
                Some(reply.body.map_err(|e| BenchError::Request(format!("token request: {status} {}", e.error)))?)
            }
        };
        users.push(User { client: ProtocolClient::new(keys.clone(), http, &d.as_url).with_timing(), token });
    }
    Ok(users)
}

async fn one_run(d: &Deployment, cfg: &BenchConfig, run: usize) -> Result<RunResult, BenchError> {
    let users = prepare_users(d, cfg).await?;
    let rs_url = d.rs_urls[0].clone();
    let start = tokio::time::Instant::now();
    let step = cfg.spread / cfg.n.max(1) as u32;
    let tasks: Vec<_> = users
        .into_iter()
        .enumerate()
        .map(|(i, user)| {
            let rs_url = rs_url.clone();
            let target = cfg.target;
            tokio::spawn(async move {
                tokio::time::sleep_until(start + step * i as u32).await;
                let began = Instant::now();
                let (ok, timing) = match target {
                    Target::Authz => {
                        let r = user.client.request_token(&inquiry(&user.client)).await;
                        r.map(|r| (r.is_success().then_some(()).ok_or(r.outcome()), r.timing))
                    }
                    Target::Resource => {
                        let t = user.token.expect("resource users hold a token");
                        let r = user.client.access(&rs_url, OWNER, "balance", "read", &t.access_token, &t.eso_tokens).await;
                        r.map(|r| (r.is_success().then_some(()).ok_or(r.outcome()), r.timing))
                    }
                }
                .map_err(|e| e.to_string())?;
                ok?;
                Ok::<_, String>((began.elapsed(), timing))
            })
        })
        .collect();

    let mut latencies = Vec::with_capacity(cfg.n);
    let mut phases: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in futures::future::join_all(tasks).await {
        let (elapsed, timing) = t.map_err(|e| BenchError::Request(e.to_string()))?.map_err(BenchError::Request)?;
        latencies.push(elapsed.as_secs_f64() * 1e3);
        for (phase, micros) in timing.as_deref().map(parse_timing).unwrap_or_default() {
            phases.entry(phase).or_default().push(micros as f64 / 1e3);
        }
    }
    Ok(RunResult {
        run,
        latencies_ms: latencies,
        phases_ms: phases.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
    })
}

/// Starts a deployment for `cfg` and runs `cfg.runs` independent rounds of `cfg.n` users.
pub async fn bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let opts = DeploymentOptions { alg: cfg.alg, tls_alg: cfg.tls_alg, mode: cfg.mode, rs_count: 1, ..Default::default() };
    let d = Deployment::start(opts).await.map_err(|e| BenchError::Deploy(e.to_string()))?;
    let result = bench_on(&d, cfg).await;
    d.shutdown().await;
    result
}

/// Runs `cfg` against an already running deployment; `cfg.mode` and the algorithms are taken as given.
pub async fn bench_on(d: &Deployment, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    // Warm-up round, not recorded.
    one_run(d, &BenchConfig { n: cfg.n.min(10), runs: 1, spread: Duration::ZERO, ..cfg.clone() }, 0).await?;
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        runs.push(one_run(d, cfg, run).await?);
    }
    Ok(BenchReport::from_runs(cfg, runs))
}

/// Full mode against plain mode with runs interleaved, so drift on the host affects both alike.
pub struct Comparison {
    pub full: BenchReport,
    pub plain: BenchReport,
    pub overhead: Estimate,
}

pub async fn compare(cfg: &BenchConfig) -> Result<Comparison, BenchError> {
    let start = |mode| async move {
        let opts = DeploymentOptions { alg: cfg.alg, tls_alg: cfg.tls_alg, mode, rs_count: 1, ..Default::default() };
        Deployment::start(opts).await.map_err(|e| BenchError::Deploy(e.to_string()))
    };
    let full_d = start(Mode::Full).await?;
    let plain_d = start(Mode::Plain).await?;
    let full_cfg = BenchConfig { mode: Mode::Full, ..cfg.clone() };
    let plain_cfg = BenchConfig { mode: Mode::Plain, ..cfg.clone() };
    let result = async {
        let warm = |c: &BenchConfig| BenchConfig { n: c.n.min(10), runs: 1, spread: Duration::ZERO, ..c.clone() };
        one_run(&full_d, &warm(&full_cfg), 0).await?;
        one_run(&plain_d, &warm(&plain_cfg), 0).await?;
        let (mut full, mut plain) = (Vec::new(), Vec::new());
        for run in 0..cfg.runs {
            full.push(one_run(&full_d, &full_cfg, run).await?);
            plain.push(one_run(&plain_d, &plain_cfg, run).await?);
        }
        let full = BenchReport::from_runs(&full_cfg, full);
        let plain = BenchReport::from_runs(&plain_cfg, plain);
        let overhead = overhead(&full, &plain);
        Ok(Comparison { full, plain, overhead })
    }
    .await;
    full_d.shutdown().await;
    plain_d.shutdown().await;
    result
}

/// Mean time to sign a master capability, per batch of `iters`, over `batches` batches.
pub fn token_signing(alg: SignatureAlg, iters: usize, batches: usize) -> Result<Estimate, BenchError> {
    let err = |e: seqcap_core::capability::CapError| BenchError::Deploy(e.to_string());
    let root = RootAuthority::generate("bench-root", 0, 4_000_000_000).map_err(err)?;
    let keys: PrincipalKeys = root.enroll("AS", alg, 0, 4_000_000_000).map_err(err)?;
    let master = MasterCapability {
        sequence: PermissionSequence::new(vec![PermissionEntry::new("RS1", "charge")]).map_err(err)?,
        client_id: HONEST_CLIENT.into(),
        state: 0,
        session_id: "0123456789abcdef0123456789abcdef".into(),
        issued_at: 1_700_000_000,
        expiry: 1_700_086_400,
        issuer: "https://localhost/authorization".into(),
        audience: "https://localhost/Alice/balance".into(),
        qualifiers: Default::default(),
    };
    sign(&master, &keys, alg).map_err(err)?;
    let mut per_batch = Vec::with_capacity(batches);
    for _ in 0..batches {
        let t = Instant::now();
        for _ in 0..iters {
            std::hint::black_box(sign(std::hint::black_box(&master), &keys, alg).map_err(err)?);
        }
        per_batch.push(t.elapsed().as_secs_f64() * 1e3 / iters as f64);
    }
    Ok(Estimate::of(&per_batch))
}
