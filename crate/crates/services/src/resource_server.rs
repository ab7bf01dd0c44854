//! Resource server: runs the sequence monitor in front of an object store.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::OwnedMutexGuard;

use seqcap_core::capability::{
    verify, AttributeMap, Certificate, EsoCapability, PrincipalKeys, SignedEnvelope, TokenKind, TrustAnchor,
    UnixSeconds,
};
use seqcap_core::monitor::{
    master_of, verify_pop, AccessRequest, ChallengeStore, ContextOracle, ContextState, Decision, DenyReason, Monitor,
    OracleError, PopProof, RevocationOracle, SessionCounter, SessionStatus,
};

use crate::clock::Clock;
use crate::config::Mode;
use crate::http::{header, ApiError, Timings};
use crate::wire::{
    eso_query_message, parse_context_body, parse_kind, split_tokens, ActionRequest, ActionResponse,
    ChallengeResponse, CompletionNotice, IntrospectionQuery, IntrospectionResponse, SessionState, SignedRequest,
    X_ESO_TOKEN, X_OAUTH_TOKEN, X_POP_SIGNATURE, X_RS_CERT, X_RS_SIGNATURE, X_RS_TIMESTAMP,
};

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes)
}

/// Parses `"$10"`, `"$10.5"` or `"10.25"` into cents.
pub fn parse_amount(s: &str) -> Option<i64> {
    let s = s.trim().trim_start_matches('$');
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    if whole.is_empty() || frac.len() > 2 || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let cents = if frac.is_empty() { 0 } else { format!("{frac:0<2}").parse::<i64>().ok()? };
    whole.parse::<i64>().ok()?.checked_mul(100)?.checked_add(cents)
}

pub fn format_amount(cents: i64) -> String {
    let sign = if cents < 0 { "-" } else { "" };
    format!("{sign}${}.{:02}", cents.abs() / 100, cents.abs() % 100)
}

/// Account-like objects addressed as `owner/resource`, valued in cents.
#[derive(Debug, Default)]
pub struct ObjectStore {
    objects: Mutex<BTreeMap<String, i64>>,
}

impl ObjectStore {
    pub fn new(objects: BTreeMap<String, i64>) -> Self {
        ObjectStore {
            objects: Mutex::new(objects),
        }
    }

    pub fn key(owner: &str, resource: &str) -> String {
        format!("{owner}/{resource}")
    }

    pub fn get(&self, owner: &str, resource: &str) -> Option<i64> {
        self.objects.lock().expect("objects poisoned").get(&Self::key(owner, resource)).copied()
    }

    pub fn set(&self, owner: &str, resource: &str, cents: i64) {
        self.objects.lock().expect("objects poisoned").insert(Self::key(owner, resource), cents);
    }

    /// Runs the handler for `permission`. `charge` and `credit` move the `amount` qualifier.
    pub fn perform(
        &self,
        permission: &str,
        owner: &str,
        resource: &str,
        qualifiers: &AttributeMap,
    ) -> Result<Value, ApiError> {
        let mut objects = self.objects.lock().expect("objects poisoned");
        let value = objects
            .get_mut(&Self::key(owner, resource))
            .ok_or_else(|| ApiError::not_found("unknown_object"))?;
        let amount = || {
            qualifiers
                .get("amount")
                .and_then(Value::as_str)
                .and_then(parse_amount)
                .ok_or_else(|| ApiError::bad_request("invalid_amount"))
        };
        Ok(match permission {
            "charge" => {
                let cents = amount()?;
                *value -= cents;
                json!({"charged": format_amount(cents), "balance": format_amount(*value)})
            }
            "credit" => {
                let cents = amount()?;
                *value += cents;
                json!({"credited": format_amount(cents), "balance": format_amount(*value)})
            }
            "read" => json!({"balance": format_amount(*value)}),
            other => json!({"performed": other}),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    session: String,
    /// New counter value; `None` deletes the session.
    rs: Option<u32>,
}

/// Per-session counters with an append-only log that is written before a
/// new value becomes visible.
pub struct CounterStore {
    slots: Mutex<HashMap<String, Arc<tokio::sync::Mutex<SessionCounter>>>>,
    log: Option<Mutex<File>>,
    sync: bool,
}

impl CounterStore {
    pub fn in_memory() -> Self {
        CounterStore {
            slots: Mutex::new(HashMap::new()),
            log: None,
            sync: false,
        }
    }

    /// Opens (or creates) the log at `path` and replays it. With `sync` every
    /// write is flushed to disk before returning.
    pub fn open(path: &FsPath, sync: bool) -> std::io::Result<Self> {
        let mut values: HashMap<String, u32> = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                // A torn final line from a crash mid-write is ignored.
                let Ok(rec) = serde_json::from_str::<LogRecord>(&line) else {
                    continue;
                };
                match rec.rs {
                    Some(v) => values.insert(rec.session, v),
                    None => values.remove(&rec.session),
                };
            }
        }
        let slots = values
            .into_iter()
            .map(|(session, rs_value)| {
                let counter = SessionCounter {
                    session_id: session.clone(),
                    rs_value,
                };
                (session, Arc::new(tokio::sync::Mutex::new(counter)))
            })
            .collect();
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let text = std::fs::read(path)?;
        if text.last().is_some_and(|b| *b != b'\n') {
            file.write_all(b"\n")?;
        }
        Ok(CounterStore {
            slots: Mutex::new(slots),
            log: Some(Mutex::new(file)),
            sync,
        })
    }

    /// Exclusive access to a session's counter; absent sessions start at 0.
    pub async fn lock(&self, session_id: &str) -> OwnedMutexGuard<SessionCounter> {
        let slot = self
            .slots
            .lock()
            .expect("counter slots poisoned")
            .entry(session_id.to_string())
            .or_insert_with(|| Arc::new(tokio::sync::Mutex::new(SessionCounter::new(session_id))))
            .clone();
        slot.lock_owned().await
    }

    pub fn peek(&self, session_id: &str) -> u32 {
        let slot = self.slots.lock().expect("counter slots poisoned").get(session_id).cloned();
        slot.and_then(|s| s.try_lock().ok().map(|c| c.rs_value)).unwrap_or(0)
    }

    fn append(&self, rec: &LogRecord) -> std::io::Result<()> {
        if let Some(log) = &self.log {
            let mut file = log.lock().expect("counter log poisoned");
            let mut line = serde_json::to_vec(rec).expect("log record serializes");
            line.push(b'\n');
            file.write_all(&line)?;
            if self.sync {
                file.sync_data()?;
            }
        }
        Ok(())
    }

    /// Logs and then publishes a new counter value.
    pub fn commit(&self, guard: &mut OwnedMutexGuard<SessionCounter>, rs_value: u32) -> std::io::Result<()> {
        self.append(&LogRecord {
            session: guard.session_id.clone(),
            rs: Some(rs_value),
        })?;
        guard.rs_value = rs_value;
        Ok(())
    }

    /// Forgets a session whose completion the AS acknowledged.
    pub fn remove(&self, guard: OwnedMutexGuard<SessionCounter>) -> std::io::Result<()> {
        self.append(&LogRecord {
            session: guard.session_id.clone(),
            rs: None,
        })?;
        self.slots.lock().expect("counter slots poisoned").remove(&guard.session_id);
        Ok(())
    }

    /// Unlocks without a write, dropping the slot if it was never committed and nobody else waits on it.
    pub fn release(&self, guard: OwnedMutexGuard<SessionCounter>) {
        if guard.rs_value == 0 {
            let mut slots = self.slots.lock().expect("counter slots poisoned");
            // The map and `guard` hold the only references.
            if slots.get(&guard.session_id).is_some_and(|slot| Arc::strong_count(slot) == 2) {
                slots.remove(&guard.session_id);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("counter slots poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type StatusCache = Mutex<HashMap<String, (Instant, SessionStatus)>>;

/// Signed calls from this RS to the authorization server.
pub struct AsClient {
    http: reqwest::Client,
    as_url: String,
    keys: PrincipalKeys,
    clock: Clock,
    cache: Option<(Duration, StatusCache)>,
}

impl AsClient {
    pub fn new(http: reqwest::Client, as_url: &str, keys: PrincipalKeys, clock: Clock) -> Self {
        AsClient {
            http,
            as_url: as_url.trim_end_matches('/').to_string(),
            keys,
            clock,
            cache: None,
        }
    }

    /// Reuses introspection answers for `ttl`. Weakens revocation; benchmarks only.
    pub fn with_cache(mut self, ttl: Duration) -> Self {
        self.cache = Some((ttl, Mutex::new(HashMap::new())));
        self
    }

    async fn post_signed(&self, path: &str, token: SignedEnvelope) -> Result<reqwest::Response, OracleError> {
        self.http
            .post(format!("{}{path}", self.as_url))
            .json(&SignedRequest {
                token: token.to_token(),
            })
            .send()
            .await
            .map_err(|e| OracleError(e.to_string()))
    }

    pub async fn complete(&self, session_id: &str) -> Result<(), OracleError> {
        let notice = CompletionNotice {
            session_id: session_id.to_string(),
            rs_id: self.keys.principal_id().to_string(),
            issued_at: self.clock.now(),
        };
        let token = SignedEnvelope::sign_with_cert(&notice, &self.keys).map_err(|e| OracleError(e.to_string()))?;
        let resp = self.post_signed("/complete", token).await?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(OracleError(format!("completion rejected with {}", resp.status())))
        }
    }
}

#[async_trait]
impl RevocationOracle for AsClient {
    async fn status(&self, session_id: &str) -> Result<SessionStatus, OracleError> {
        if let Some((ttl, cache)) = &self.cache {
            if let Some((at, status)) = cache.lock().expect("cache poisoned").get(session_id) {
                if at.elapsed() < *ttl {
                    return Ok(*status);
                }
            }
        }
        let query = IntrospectionQuery {
            session_id: session_id.to_string(),
            rs_id: self.keys.principal_id().to_string(),
            issued_at: self.clock.now(),
        };
        let token = SignedEnvelope::sign_with_cert(&query, &self.keys).map_err(|e| OracleError(e.to_string()))?;
        let resp = self.post_signed("/introspect", token).await?;
        let status = match resp.status() {
            StatusCode::NOT_FOUND => SessionStatus::RevokedOrCompleted,
            s if s.is_success() => {
                let body: IntrospectionResponse = resp.json().await.map_err(|e| OracleError(e.to_string()))?;
                match body.status {
                    SessionState::Active => SessionStatus::Active,
                    SessionState::RevokedOrCompleted => SessionStatus::RevokedOrCompleted,
                }
            }
            s => return Err(OracleError(format!("introspection failed with {s}"))),
        };
        if let Some((_, cache)) = &self.cache {
            cache.lock().expect("cache poisoned").insert(session_id.to_string(), (Instant::now(), status));
        }
        Ok(status)
    }
}

/// Queries oracles with the ESO token plus this server's detached signature over it.
pub struct EsoClient {
    http: reqwest::Client,
    keys: PrincipalKeys,
    clock: Clock,
    timeout: Duration,
}

impl EsoClient {
    pub fn new(http: reqwest::Client, keys: PrincipalKeys, clock: Clock, timeout: Duration) -> Self {
        EsoClient {
            http,
            keys,
            clock,
            timeout,
        }
    }
}

#[async_trait]
impl ContextOracle for EsoClient {
    async fn query(&self, token: &SignedEnvelope, claims: &EsoCapability) -> Result<ContextState, OracleError> {
        let token = token.to_token();
        let ts = self.clock.now();
        let signature = self.keys.signing_key().sign(&eso_query_message(&token, ts));
        let resp = self
            .http
            .post(&claims.scope.eso_id)
            .timeout(self.timeout)
            .header(crate::wire::X_ESO_TOKEN, &token)
            .header(X_RS_SIGNATURE, b64(&signature))
            .header(X_RS_TIMESTAMP, ts.to_string())
            .header(X_RS_CERT, b64(self.keys.certificate().der()))
            .send()
            .await
            .map_err(|e| OracleError(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(OracleError(format!("oracle rejected the query with {}", resp.status())));
        }
        let body: Value = resp.json().await.map_err(|e| OracleError(e.to_string()))?;
        match parse_context_body(&body) {
            Some(true) => Ok(ContextState::Active),
            Some(false) => Ok(ContextState::Inactive),
            None => Err(OracleError("unreadable oracle answer".into())),
        }
    }
}

/// Accumulates time spent inside an oracle during one request.
struct Timed<'a, O: ?Sized> {
    inner: &'a O,
    spent: Mutex<Duration>,
}

impl<'a, O: ?Sized> Timed<'a, O> {
    fn new(inner: &'a O) -> Self {
        Timed {
            inner,
            spent: Mutex::new(Duration::ZERO),
        }
    }

    fn add(&self, d: Duration) {
        *self.spent.lock().expect("timer poisoned") += d;
    }

    fn spent(&self) -> Duration {
        *self.spent.lock().expect("timer poisoned")
    }
}

#[async_trait]
impl<O: RevocationOracle + ?Sized> RevocationOracle for Timed<'_, O> {
    async fn status(&self, session_id: &str) -> Result<SessionStatus, OracleError> {
        let start = Instant::now();
        let r = self.inner.status(session_id).await;
        self.add(start.elapsed());
        r
    }
}

#[async_trait]
impl<O: ContextOracle + ?Sized> ContextOracle for Timed<'_, O> {
    async fn query(&self, token: &SignedEnvelope, claims: &EsoCapability) -> Result<ContextState, OracleError> {
        let start = Instant::now();
        let r = self.inner.query(token, claims).await;
        self.add(start.elapsed());
        r
    }
}

pub struct RsSettings {
    pub keys: PrincipalKeys,
    pub trust: TrustAnchor,
    /// Certificate of the AS whose capabilities this server accepts.
    pub authority: Certificate,
    pub as_url: String,
    pub mode: Mode,
    pub objects: BTreeMap<String, i64>,
    pub counter_log: Option<PathBuf>,
    pub introspect_cache: Option<Duration>,
    pub eso_timeout: Duration,
    pub http: reqwest::Client,
}

struct RsState {
    monitor: Monitor,
    mode: Mode,
    objects: ObjectStore,
    counters: CounterStore,
    challenges: ChallengeStore,
    as_client: AsClient,
    eso: EsoClient,
    clock: Clock,
}

#[derive(Clone)]
pub struct ResourceServer {
    state: Arc<RsState>,
}

fn deny(reason: DenyReason) -> ApiError {
    ApiError::new(
        StatusCode::from_u16(reason.http_status()).unwrap_or(StatusCode::FORBIDDEN),
        reason.code(),
    )
}

/// Path component of a URL (`https://host:port/a/b` -> `/a/b`).
fn url_path(url: &str) -> &str {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    rest.find('/').map_or("/", |i| &rest[i..])
}

impl ResourceServer {
    pub fn new(settings: RsSettings, clock: Clock) -> std::io::Result<Self> {
        let counters = match &settings.counter_log {
            Some(path) => CounterStore::open(path, false)?,
            None => CounterStore::in_memory(),
        };
        let mut as_client =
            AsClient::new(settings.http.clone(), &settings.as_url, settings.keys.clone(), clock.clone());
        if let Some(ttl) = settings.introspect_cache {
            as_client = as_client.with_cache(ttl);
        }
        let state = RsState {
            eso: EsoClient::new(settings.http, settings.keys.clone(), clock.clone(), settings.eso_timeout),
            monitor: Monitor::new(settings.keys, settings.trust, settings.authority),
            mode: settings.mode,
            objects: ObjectStore::new(settings.objects),
            counters,
            challenges: ChallengeStore::default(),
            as_client,
            clock,
        };
        Ok(ResourceServer { state: Arc::new(state) })
    }

    pub fn id(&self) -> &str {
        self.state.monitor.rs_id()
    }

    pub fn keys(&self) -> &PrincipalKeys {
        self.state.monitor.keys()
    }

    pub fn objects(&self) -> &ObjectStore {
        &self.state.objects
    }

    pub fn counters(&self) -> &CounterStore {
        &self.state.counters
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/challenge", get(challenge))
            .route("/{owner}/{resource}", post(access))
            .with_state(self.state.clone())
    }
}

async fn challenge(State(s): State<Arc<RsState>>) -> Json<ChallengeResponse> {
    let nonce = s.challenges.issue(s.clock.now());
    Json(ChallengeResponse { nonce: b64(&nonce) })
}

async fn access(
    State(s): State<Arc<RsState>>,
    Path((owner, resource)): Path<(String, String)>,
    headers: HeaderMap,
    Json(body): Json<ActionRequest>,
) -> Response {
    let mut timings = Timings::from_headers(&headers);
    let result = s.handle(&owner, &resource, &headers, &body.action, &mut timings).await;
    let response = match result {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    };
    timings.attach(response)
}

/// What the pre-monitor checks established about a request.
struct Checked {
    request: AccessRequest,
    master: seqcap_core::capability::MasterCapability,
}

impl RsState {
    /// Token parsing, the master's signature, proof of possession and the audience.
    fn precheck(
        &self,
        owner: &str,
        resource: &str,
        headers: &HeaderMap,
        action: &str,
        now: UnixSeconds,
    ) -> Result<Checked, ApiError> {
        let token = header(headers, X_OAUTH_TOKEN).ok_or_else(|| deny(DenyReason::NoCapability))?;
        let presented = SignedEnvelope::parse(token).map_err(|_| deny(DenyReason::BadSignature))?;
        let (master_env, master) = master_of(&presented).map_err(|_| deny(DenyReason::BadSignature))?;
        if !verify(&master_env, self.monitor.authority()) {
            return Err(deny(DenyReason::BadSignature));
        }
        let eso_capabilities = match header(headers, X_ESO_TOKEN) {
            None => Vec::new(),
            Some(h) => split_tokens(h)
                .into_iter()
                .map(|t| parse_kind(t, TokenKind::Eso))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| deny(DenyReason::BadSignature))?,
        };
        let pop = header(headers, X_POP_SIGNATURE)
            .and_then(|p| parse_kind(p, TokenKind::PopProof).ok())
            .ok_or_else(|| deny(DenyReason::PopFailure))?;
        let request = AccessRequest {
            client_id: master.client_id.clone(),
            permission: action.to_string(),
            presented: Some(presented),
            eso_capabilities,
            pop_proof: Some(pop.clone()),
        };
        let cert = pop.attached_cert().ok_or_else(|| deny(DenyReason::PopFailure))?;
        let proof = pop.decode::<PopProof>().map_err(|_| deny(DenyReason::PopFailure))?;
        let fresh = self.challenges.consume(&proof.nonce, now);
        if !fresh || self.monitor.trust().validate(cert, now).is_err() || !verify_pop(&request, cert, &proof.nonce) {
            return Err(deny(DenyReason::PopFailure));
        }
        if url_path(&master.audience) != format!("/{owner}/{resource}") {
            return Err(deny(DenyReason::WrongRS));
        }
        if self.objects.get(owner, resource).is_none() {
            return Err(ApiError::not_found("unknown_object"));
        }
        Ok(Checked { request, master })
    }

    async fn handle(
        &self,
        owner: &str,
        resource: &str,
        headers: &HeaderMap,
        action: &str,
        timings: &mut Timings,
    ) -> Result<ActionResponse, ApiError> {
        let now = self.clock.now();
        let checked = timings.time("token_validation", || self.precheck(owner, resource, headers, action, now))?;
        if self.mode == Mode::Plain {
            return self.handle_plain(owner, resource, action, &checked, now, timings);
        }

        let mut counter = self.counters.lock(&checked.master.session_id).await;
        let revocation = Timed::new(&self.as_client);
        let context = Timed::new(&self.eso);
        let start = Instant::now();
        let (decision, next) = self
            .monitor
            .authorize(&checked.request, &counter, now, &revocation, &context)
            .await;
        timings.record("introspect", revocation.spent());
        timings.record("context", context.spent());
        timings.record("monitor", start.elapsed().saturating_sub(revocation.spent() + context.spent()));

        match decision {
            Decision::Deny(reason) => {
                self.counters.release(counter);
                Err(deny(reason))
            }
            Decision::Invoke { successor, invoked } => {
                self.counters
                    .commit(&mut counter, next.rs_value)
                    .map_err(|e| ApiError::internal("counter_store").with_detail(e))?;
                drop(counter);
                let result = timings.time("action", || {
                    self.objects.perform(&invoked.entry.permission, owner, resource, &invoked.master.qualifiers)
                })?;
                Ok(ActionResponse {
                    result,
                    state_token: Some(successor.to_token()),
                })
            }
            Decision::InvokeLast { invoked } => {
                // Past the last index: any further capability of this session is out of order here.
                let tombstone = invoked.master.sequence.len() as u32;
                self.counters
                    .commit(&mut counter, tombstone)
                    .map_err(|e| ApiError::internal("counter_store").with_detail(e))?;
                let result = timings.time("action", || {
                    self.objects.perform(&invoked.entry.permission, owner, resource, &invoked.master.qualifiers)
                })?;
                let start = Instant::now();
                match self.as_client.complete(&invoked.master.session_id).await {
                    Ok(()) => {
                        if let Err(e) = self.counters.remove(counter) {
                            tracing::warn!(error = %e, "could not log session removal");
                        }
                    }
                    Err(e) => tracing::warn!(error = %e, session = %invoked.master.session_id, "completion not acknowledged"),
                }
                timings.record("complete", start.elapsed());
                Ok(ActionResponse {
                    result,
                    state_token: None,
                })
            }
        }
    }

    /// OAuth with PoP only: signature, client, expiry and scope.
    fn handle_plain(
        &self,
        owner: &str,
        resource: &str,
        action: &str,
        checked: &Checked,
        now: UnixSeconds,
        timings: &mut Timings,
    ) -> Result<ActionResponse, ApiError> {
        let master = &checked.master;
        if now >= master.expiry {
            return Err(deny(DenyReason::Expired));
        }
        if !master.sequence.mentions(self.monitor.rs_id(), action) {
            return Err(deny(DenyReason::WrongRS));
        }
        let result = timings.time("action", || self.objects.perform(action, owner, resource, &master.qualifiers))?;
        Ok(ActionResponse {
            result,
            state_token: None,
        })
    }
}
