//! Adversarial requests against a running deployment; every one must be refused.

use base64::Engine;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use seqcap_core::capability::SignedEnvelope;
use seqcap_services::client::{AccessParts, ClientError, ProtocolClient, Reply};
use seqcap_services::deploy::Deployment;
use seqcap_services::fixtures::{ATTACKER, HONEST_CLIENT, LOGIN_CONTEXT, OWNER};
use seqcap_services::tls::ClientOptions;
use seqcap_services::wire::{eso_query_message, TokenResponse, X_ESO_TOKEN, X_RS_CERT, X_RS_SIGNATURE, X_RS_TIMESTAMP};

#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub name: &'static str,
    pub expected: String,
    pub observed: String,
}

impl AttackOutcome {
    pub fn passed(&self) -> bool {
        self.expected == self.observed
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("setup: {0}")]
    Setup(String),
}

fn setup_err(what: &str, reply: impl std::fmt::Debug) -> AttackError {
    AttackError::Setup(format!("{what}: {reply:?}"))
}

async fn grant(c: &ProtocolClient, resource: &str, actions: &[&str], qualifiers: &[(&str, &str)]) -> Result<TokenResponse, AttackError> {
    let claim = c.claim("Payment", OWNER, resource, actions, qualifiers);
    let reply = c.request_token(&claim).await?;
    match reply.body {
        Ok(t) => Ok(t),
        Err(e) => Err(setup_err("token request", (reply.status, e))),
    }
}

fn outcome<T>(name: &'static str, expected: &str, reply: &Reply<T>) -> AttackOutcome {
    AttackOutcome { name, expected: expected.to_string(), observed: reply.outcome() }
}

/// A byte of the signed payload changed, signature kept.
fn tampered(token: &str) -> Result<String, AttackError> {
    let env = SignedEnvelope::parse(token).map_err(|e| AttackError::Setup(e.to_string()))?;
    let text = String::from_utf8(env.payload().to_vec()).map_err(|e| AttackError::Setup(e.to_string()))?;
    let forged = text.replacen("\"$10\"", "\"$99\"", 1);
    if forged == text {
        return Err(AttackError::Setup("nothing to tamper".into()));
    }
    Ok(SignedEnvelope::from_parts(env.header().clone(), forged.into_bytes(), env.signature().to_vec()).to_token())
}

/// The six attacks, each against fresh sessions of `d`. Needs three resource servers.
pub async fn run_suite(d: &Deployment) -> Result<Vec<AttackOutcome>, AttackError> {
    if d.rs_urls.len() < 3 {
        return Err(AttackError::Setup("the attack suite needs three resource servers".into()));
    }
    let http = d.http(&ClientOptions::default()).map_err(|e| AttackError::Setup(e.to_string()))?;
    let b = ProtocolClient::new(d.client(HONEST_CLIENT).clone(), http.clone(), &d.as_url);
    let m = ProtocolClient::new(d.client(ATTACKER).clone(), http.clone(), &d.as_url);
    let rs1 = &d.rs_urls[0];
    let mut out = Vec::new();

    let charge = grant(&b, "balance", &["charge"], &[("amount", "$10")]).await?;

    // Tamper: raise the charged amount inside the signed master.
    let forged = tampered(&charge.access_token)?;
    let r = b.access(rs1, OWNER, "balance", "charge", &forged, &charge.eso_tokens).await?;
    out.push(outcome("tamper", "401 BadSignature", &r));

    // Theft: Mallory presents B's capability with her own proof of possession.
    let r = m.access(rs1, OWNER, "balance", "charge", &charge.access_token, &charge.eso_tokens).await?;
    out.push(outcome("theft", "401 PopFailure", &r));

    // Impersonation at the AS: Mallory signs a claim in B's name.
    let claim = b.claim("Payment", OWNER, "balance", &["charge"], &[("amount", "$10")]);
    let r = m.send_assertion(&m.assertion(&claim)?).await?;
    out.push(outcome("impersonation", "401 invalid_client", &r));

    // Cross-session binding: the charge master with the transfer session's ESO token for RS1.
    let transfer = grant(&b, "savings", &["read", "charge", "credit", "read"], &[("amount", "$5")]).await?;
    let r = b.access(rs1, OWNER, "balance", "charge", &charge.access_token, &transfer.eso_tokens).await?;
    out.push(outcome("cross_session_eso", "403 BindingFailure", &r));

    // Client as RS: B queries the ESO directly, signing with its own key.
    let token = &charge.eso_tokens[0];
    let ts = d.clock.now();
    let b64 = |bytes: &[u8]| base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes);
    let sig = b.keys().signing_key().sign(&eso_query_message(token, ts));
    let resp = http
        .post(format!("{}/{LOGIN_CONTEXT}", d.eso_url))
        .header(X_ESO_TOKEN, token)
        .header(X_RS_SIGNATURE, b64(&sig))
        .header(X_RS_TIMESTAMP, ts.to_string())
        .header(X_RS_CERT, b64(b.keys().certificate().der()))
        .send()
        .await
        .map_err(ClientError::from)?;
    let status = resp.status().as_u16();
    let body: serde_json::Value = resp.json().await.unwrap_or_default();
    out.push(AttackOutcome {
        name: "client_queries_eso",
        expected: "401 unauthenticated".into(),
        observed: format!("{status} {}", body["error"].as_str().unwrap_or("")),
    });

    // Replay: the charge runs once, then the same master again.
    let r = b.access(rs1, OWNER, "balance", "charge", &charge.access_token, &charge.eso_tokens).await?;
    if !r.is_success() {
        return Err(setup_err("honest charge", r.outcome()));
    }
    let r = b.access(rs1, OWNER, "balance", "charge", &charge.access_token, &charge.eso_tokens).await?;
    out.push(outcome("replay_completed", "403 Revoked", &r));
    let r = b.access(rs1, OWNER, "savings", "read", &transfer.access_token, &transfer.eso_tokens).await?;
    if !r.is_success() {
        return Err(setup_err("first transfer step", r.outcome()));
    }
    let r = b.access(rs1, OWNER, "savings", "read", &transfer.access_token, &transfer.eso_tokens).await?;
    out.push(outcome("replay_in_session", "403 OutOfOrder", &r));
    Ok(out)
}

/// A capability that was already presented once.
#[derive(Debug, Clone)]
struct Spent {
    token: String,
    eso_tokens: Vec<String>,
    /// Every (server, resource, action) its session names.
    targets: Vec<(usize, &'static str, &'static str)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub attempts: usize,
    pub false_accepts: usize,
    /// Deny code -> count.
    pub denials: std::collections::BTreeMap<String, usize>,
    pub accepted: Vec<String>,
}

/// Walks `steps` of a session, returning every capability it presented.
async fn walk(
    b: &ProtocolClient,
    d: &Deployment,
    grant: &TokenResponse,
    resource: &'static str,
    steps: &[(usize, &'static str)],
    session: &[(usize, &'static str)],
) -> Result<(Vec<Spent>, Option<String>), AttackError> {
    let targets: Vec<_> = session.iter().map(|(rs, action)| (*rs, resource, *action)).collect();
    let mut spent = Vec::new();
    let mut token = grant.access_token.clone();
    for (rs, action) in steps {
        let r = b.access(&d.rs_urls[*rs], OWNER, resource, action, &token, &grant.eso_tokens).await?;
        let Ok(body) = r.body else {
            return Err(setup_err("session step", r.status));
        };
        spent.push(Spent { token: token.clone(), eso_tokens: grant.eso_tokens.clone(), targets: targets.clone() });
        match body.state_token {
            Some(next) => token = next,
            None => return Ok((spent, None)),
        }
    }
    Ok((spent, Some(token)))
}

/// Replays capabilities that were already used, at random servers, objects and actions.
///
/// Completed and half-finished sessions are both in the pool. Each attempt carries a valid
/// proof of possession from the legitimate client, so only the sequence and revocation checks stand
/// in the way.
pub async fn randomized_replays(d: &Deployment, attempts: usize, seed: u64) -> Result<ReplayReport, AttackError> {
    if d.rs_urls.len() < 3 {
        return Err(AttackError::Setup("replays need three resource servers".into()));
    }
    let http = d.http(&ClientOptions::default()).map_err(|e| AttackError::Setup(e.to_string()))?;
    let b = ProtocolClient::new(d.client(HONEST_CLIENT).clone(), http, &d.as_url);

    let transfer_steps = [(0, "read"), (1, "charge"), (2, "credit"), (0, "read")];
    let mut pool = Vec::new();
    let done = grant(&b, "savings", &["read", "charge", "credit", "read"], &[("amount", "$5")]).await?;
    pool.extend(walk(&b, d, &done, "savings", &transfer_steps, &transfer_steps).await?.0);
    let half = grant(&b, "savings", &["read", "charge", "credit", "read"], &[("amount", "$5")]).await?;
    let (spent, _) = walk(&b, d, &half, "savings", &transfer_steps[..2], &transfer_steps).await?;
    pool.extend(spent);
    let statement = grant(&b, "statement", &["read", "read", "read", "charge"], &[("amount", "$1")]).await?;
    let statement_steps = [(0, "read"), (0, "read"), (0, "read"), (0, "charge")];
    let (spent, _) = walk(&b, d, &statement, "statement", &statement_steps[..2], &statement_steps).await?;
    pool.extend(spent);
    let eso_sets: Vec<Vec<String>> = vec![done.eso_tokens.clone(), half.eso_tokens.clone(), Vec::new()];

    let resources = ["balance", "savings", "statement"];
    let actions = ["read", "charge", "credit"];
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = ReplayReport { attempts, false_accepts: 0, denials: Default::default(), accepted: Vec::new() };
    for _ in 0..attempts {
        let cap = pool.choose(&mut rng).expect("pool is not empty");
        // Half the attempts aim at a step the session really contains.
        let (rs, resource, action) = if rng.gen_bool(0.5) {
            *cap.targets.choose(&mut rng).expect("sessions have steps")
        } else {
            (
                rng.gen_range(0..d.rs_urls.len()),
                *resources.choose(&mut rng).expect("non-empty"),
                *actions.choose(&mut rng).expect("non-empty"),
            )
        };
        let eso_tokens = if rng.gen_bool(0.75) { cap.eso_tokens.clone() } else { eso_sets.choose(&mut rng).expect("non-empty").clone() };
        let url = &d.rs_urls[rs];
        let nonce = b.challenge(url).await?;
        let parts = AccessParts { pop: Some(b.pop(&nonce, &cap.token)?), token: Some(cap.token.clone()), eso_tokens };
        let r = b.send_access(url, OWNER, resource, action, &parts).await?;
        if r.is_success() {
            report.false_accepts += 1;
            report.accepted.push(format!("RS{} {resource} {action}", rs + 1));
        } else {
            *report.denials.entry(r.outcome()).or_default() += 1;
        }
    }
    Ok(report)
}
