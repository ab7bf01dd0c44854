//! Scripted protocol flows with an expected outcome per step.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use seqcap_core::capability::SignedEnvelope;
use seqcap_services::auth_server::RecordStatus;
use seqcap_services::client::{AccessParts, ProtocolClient};
use seqcap_services::config::Mode;
use seqcap_services::deploy::{Deployment, DeploymentOptions};
use seqcap_services::eso_server::DAY;
use seqcap_services::fixtures::LOGIN_CONTEXT;
use seqcap_services::resource_server::{format_amount, parse_amount};
use seqcap_services::tls::ClientOptions;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub setup: Setup,
    pub steps: Vec<Step>,
}

/// Deployment used when the scenario starts its own servers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup {
    pub mode: Mode,
    pub rs_count: usize,
}

impl Default for Setup {
    fn default() -> Self {
        Setup { mode: Mode::Full, rs_count: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimSpec {
    #[serde(default = "default_application")]
    pub application: String,
    pub owner: String,
    pub resource: String,
    pub actions: Vec<String>,
    #[serde(default)]
    pub qualifiers: BTreeMap<String, String>,
}

fn default_application() -> String {
    "Payment".into()
}

/// Changes applied to an otherwise well-formed resource request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Flip a payload byte, keeping the signature.
    Tamper,
    NoPop,
    NoEso,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Token {
        client: String,
        claim: ClaimSpec,
        expect: String,
        #[serde(default)]
        save: Option<String>,
    },
    Access {
        client: String,
        rs: usize,
        owner: String,
        resource: String,
        action: String,
        token: String,
        /// Take the ESO tokens from this saved capability instead.
        #[serde(default)]
        eso_from: Option<String>,
        #[serde(default)]
        mutate: Option<Mutation>,
        expect: String,
        #[serde(default)]
        save: Option<String>,
    },
    /// Record the user's last login `days_ago` days before now.
    SetLogin { user: String, days_ago: i64 },
    Advance { secs: i64 },
    Balance { rs: usize, owner: String, resource: String, expect: String },
    Session { token: String, expect: RecordStatus },
}

impl Step {
    pub fn op(&self) -> &'static str {
        match self {
            Step::Token { .. } => "token",
            Step::Access { .. } => "access",
            Step::SetLogin { .. } => "set_login",
            Step::Advance { .. } => "advance",
            Step::Balance { .. } => "balance",
            Step::Session { .. } => "session",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("environment: {0}")]
    Environment(String),
    #[error("step {index} ({op}): expected {expected}, observed {observed}")]
    Mismatch {
        index: usize,
        op: &'static str,
        expected: String,
        observed: String,
    },
}

impl ScenarioError {
    fn env(e: impl std::fmt::Display) -> Self {
        ScenarioError::Environment(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub op: &'static str,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: Vec<StepReport>,
}

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::env(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::env(format!("{}: {e}", path.display())))
}

/// `"2xx"` matches any success; otherwise the full outcome string must match.
fn matches(expected: &str, observed: &str) -> bool {
    expected == observed || (expected == "2xx" && observed.starts_with('2') && observed.len() == 3)
}

#[derive(Clone)]
struct Saved {
    token: String,
    eso_tokens: Vec<String>,
    session_id: String,
}

fn tamper(token: &str) -> Result<String, ScenarioError> {
    let env = SignedEnvelope::parse(token).map_err(ScenarioError::env)?;
    let mut payload = env.payload().to_vec();
    // Raise a digit so the payload stays valid JSON.
    let at = payload.iter().rposition(u8::is_ascii_digit).ok_or_else(|| ScenarioError::env("no digit to tamper"))?;
    payload[at] = if payload[at] == b'9' { b'8' } else { payload[at] + 1 };
    Ok(SignedEnvelope::from_parts(env.header().clone(), payload, env.signature().to_vec()).to_token())
}

/// Runs the steps in order against `d`, stopping at the first mismatch.
pub async fn run(d: &Deployment, scenario: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let http = d.http(&ClientOptions::default()).map_err(ScenarioError::env)?;
    let mut clients: HashMap<String, ProtocolClient> = HashMap::new();
    let mut client = |id: &str| -> Result<ProtocolClient, ScenarioError> {
        if let Some(c) = clients.get(id) {
            return Ok(c.clone());
        }
        let keys = d.clients.get(id).ok_or_else(|| ScenarioError::env(format!("unknown client '{id}'")))?;
        let c = ProtocolClient::new(keys.clone(), http.clone(), &d.as_url);
        clients.insert(id.to_string(), c.clone());
        Ok(c)
    };
    let rs_url = |i: usize| d.rs_urls.get(i).ok_or_else(|| ScenarioError::env(format!("no resource server {i}")));
    let mut saved: HashMap<String, Saved> = HashMap::new();
    let lookup = |saved: &HashMap<String, Saved>, name: &str| {
        saved.get(name).cloned().ok_or_else(|| ScenarioError::env(format!("no saved capability '{name}'")))
    };
    let mut report = ScenarioReport { name: scenario.name.clone(), steps: Vec::new() };

    for (index, step) in scenario.steps.iter().enumerate() {
        let (expected, observed) = match step {
            Step::Token { client: id, claim, expect, save } => {
                let c = client(id)?;
                let actions: Vec<&str> = claim.actions.iter().map(String::as_str).collect();
                let qualifiers: Vec<(&str, &str)> =
                    claim.qualifiers.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
                let claim = c.claim(&claim.application, &claim.owner, &claim.resource, &actions, &qualifiers);
                let reply = c.request_token(&claim).await.map_err(ScenarioError::env)?;
                if let (Some(name), Some(t)) = (save, reply.ok()) {
                    saved.insert(
                        name.clone(),
                        Saved { token: t.access_token.clone(), eso_tokens: t.eso_tokens.clone(), session_id: t.session_id.clone() },
                    );
                }
                (expect.clone(), reply.outcome())
            }
            Step::Access { client: id, rs, owner, resource, action, token, eso_from, mutate, expect, save } => {
                let c = client(id)?;
                let url = rs_url(*rs)?;
                let cap = lookup(&saved, token)?;
                let eso_tokens = match eso_from {
                    Some(other) => lookup(&saved, other)?.eso_tokens,
                    None => cap.eso_tokens.clone(),
                };
                let presented = match mutate {
                    Some(Mutation::Tamper) => tamper(&cap.token)?,
                    _ => cap.token.clone(),
                };
                let nonce = c.challenge(url).await.map_err(ScenarioError::env)?;
                let parts = AccessParts {
                    pop: (*mutate != Some(Mutation::NoPop))
                        .then(|| c.pop(&nonce, &presented))
                        .transpose()
                        .map_err(ScenarioError::env)?,
                    eso_tokens: if *mutate == Some(Mutation::NoEso) { Vec::new() } else { eso_tokens },
                    token: Some(presented),
                };
                let reply = c.send_access(url, owner, resource, action, &parts).await.map_err(ScenarioError::env)?;
                let next = reply.ok().and_then(|r| r.state_token.clone());
                if let (Some(name), Some(next)) = (save, next) {
                    saved.insert(name.clone(), Saved { token: next, ..cap });
                }
                (expect.clone(), reply.outcome())
            }
            Step::SetLogin { user, days_ago } => {
                let eso = d.eso.evaluator(LOGIN_CONTEXT).ok_or_else(|| ScenarioError::env("no login context"))?;
                eso.record_login(user, d.clock.now() - days_ago * DAY);
                continue;
            }
            Step::Advance { secs } => {
                d.clock.advance(*secs);
                continue;
            }
            Step::Balance { rs, owner, resource, expect } => {
                let server = d.resource_servers.get(*rs).ok_or_else(|| ScenarioError::env(format!("no resource server {rs}")))?;
                let observed = server.objects().get(owner, resource).map_or("missing".to_string(), format_amount);
                let expected = parse_amount(expect).map_or(expect.clone(), format_amount);
                (expected, observed)
            }
            Step::Session { token, expect } => {
                let cap = lookup(&saved, token)?;
                let observed = d.auth.session(&cap.session_id).map(|r| r.status);
                (format!("{expect:?}"), observed.map_or("unknown".into(), |s| format!("{s:?}")))
            }
        };
        let ok = matches(&expected, &observed);
        report.steps.push(StepReport { index, op: step.op(), expected: expected.clone(), observed: observed.clone() });
        if !ok {
            return Err(ScenarioError::Mismatch { index, op: step.op(), expected, observed });
        }
    }
    Ok(report)
}

/// Starts a deployment from the scenario's setup, runs it and shuts down.
pub async fn run_standalone(scenario: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let opts = DeploymentOptions { mode: scenario.setup.mode, rs_count: scenario.setup.rs_count, ..Default::default() };
    let d = Deployment::start(opts).await.map_err(ScenarioError::env)?;
    let result = run(&d, scenario).await;
    d.shutdown().await;
    result
}
