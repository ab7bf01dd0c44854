//! Authorization server: client-credential token endpoint, introspection,
//! completion notices and the ESO registry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use seqcap_core::capability::{
    self, bind_hash, check_binding, verify, Certificate, ClientClaim, EsoCapability, EsoScope, MasterCapability,
    PrincipalKeys, SignedEnvelope, TokenKind, TokenPayload, TrustAnchor, UnixSeconds,
};
use seqcap_core::policy::{
    check_frequency, evaluate, resolve_eso, EsoRegistry, EsoRegistryEntry, FrequencyHistory, GrantDecision,
    PolicyError, PolicyStore, ResourceDirectory, SubjectAttributes,
};

use crate::clock::Clock;
use crate::config::{Mode, RsRoute};
use crate::http::{check_admin, require_header, ApiError, Timings};
use crate::wire::{
    parse_kind, CompletionNotice, IntrospectionQuery, IntrospectionResponse, RevokeRequest, SessionState,
    SignedRequest, TokenResponse, CLIENT_ASSERTION, CLIENT_ASSERTION_TYPE, CLIENT_CREDENTIALS, FRESHNESS_SECS,
    GRANT_TYPE, JWT_BEARER,
};

/// Permission an RS holds on an oracle.
pub const ESO_PERMISSION: &str = "read";

pub struct AsSettings {
    pub keys: PrincipalKeys,
    pub trust: TrustAnchor,
    /// Base URL; tokens name `{public_url}/authorization` as issuer.
    pub public_url: String,
    pub mode: Mode,
    pub master_ttl_secs: i64,
    pub eso_ttl_secs: i64,
    pub admin_token: String,
    pub resource_servers: Vec<RsRoute>,
    pub policies: PolicyStore,
    pub subjects: Vec<SubjectAttributes>,
    pub registry: EsoRegistry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Active,
    Completed,
    Revoked,
}

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: String,
    pub client_id: String,
    pub rule: String,
    pub master: SignedEnvelope,
    pub eso_caps: Vec<SignedEnvelope>,
    pub status: RecordStatus,
    pub issued_at: UnixSeconds,
}

#[derive(Default)]
struct Sessions {
    records: HashMap<String, SessionRecord>,
    /// (client, rule) -> active session, for rules with a frequency window.
    active: HashMap<(String, String), String>,
    history: FrequencyHistory,
}

impl Sessions {
    /// Moves an active session to `to`. Returns false if the session is unknown.
    fn close(&mut self, session_id: &str, to: RecordStatus, now: UnixSeconds) -> bool {
        let Some(rec) = self.records.get_mut(session_id) else {
            return false;
        };
        if rec.status == RecordStatus::Active {
            rec.status = to;
            self.active.remove(&(rec.client_id.clone(), rec.rule.clone()));
            if to == RecordStatus::Completed {
                self.history.record_completion(&rec.client_id, &rec.rule, now);
            }
        }
        true
    }
}

struct AsState {
    keys: PrincipalKeys,
    trust: TrustAnchor,
    issuer: String,
    mode: Mode,
    master_ttl: i64,
    eso_ttl: i64,
    admin_token: String,
    rs_urls: HashMap<String, String>,
    directory: ResourceDirectory,
    policies: PolicyStore,
    subjects: HashMap<String, SubjectAttributes>,
    registry: RwLock<EsoRegistry>,
    sessions: Mutex<Sessions>,
    clock: Clock,
}

/// Handle to a configured authorization server.
#[derive(Clone)]
pub struct AuthServer {
    state: Arc<AsState>,
}

fn random_session_id() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn first_str(v: Option<&Value>) -> Option<&str> {
    match v? {
        Value::String(s) => Some(s),
        Value::Array(items) => items.first()?.as_str(),
        _ => None,
    }
}

fn policy_error(e: PolicyError) -> ApiError {
    match e {
        PolicyError::Ambiguous(_) => ApiError::forbidden("ambiguous_policy").with_detail(e),
        PolicyError::NotRegistered(_) => ApiError::internal("dangling_context").with_detail(e),
        other => ApiError::internal("policy_error").with_detail(other),
    }
}

impl AuthServer {
    pub fn new(settings: AsSettings, clock: Clock) -> Self {
        let directory = settings
            .resource_servers
            .iter()
            .fold(ResourceDirectory::default(), |d, r| d.with(&r.application, &r.id));
        let state = AsState {
            issuer: format!("{}/authorization", settings.public_url.trim_end_matches('/')),
            rs_urls: settings
                .resource_servers
                .iter()
                .map(|r| (r.id.clone(), r.url.trim_end_matches('/').to_string()))
                .collect(),
            subjects: settings
                .subjects
                .into_iter()
                .map(|s| (s.subject_id.clone(), s))
                .collect(),
            keys: settings.keys,
            trust: settings.trust,
            mode: settings.mode,
            master_ttl: settings.master_ttl_secs,
            eso_ttl: settings.eso_ttl_secs,
            admin_token: settings.admin_token,
            directory,
            policies: settings.policies,
            registry: RwLock::new(settings.registry),
            sessions: Mutex::new(Sessions::default()),
            clock,
        };
        AuthServer { state: Arc::new(state) }
    }

    pub fn certificate(&self) -> &Certificate {
        self.state.keys.certificate()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/authorization", post(authorization))
            .route("/introspect", post(introspect))
            .route("/complete", post(complete))
            .route("/revoke", post(revoke))
            .route("/eso-registry", post(register_eso).get(list_eso))
            .route("/sessions/{id}", get(session_status))
            .with_state(self.state.clone())
    }

    pub fn session(&self, session_id: &str) -> Option<SessionRecord> {
        self.state.sessions.lock().expect("sessions poisoned").records.get(session_id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.state.sessions.lock().expect("sessions poisoned").records.len()
    }
}

impl AsState {
    fn sessions(&self) -> std::sync::MutexGuard<'_, Sessions> {
        self.sessions.lock().expect("sessions poisoned")
    }

    fn authenticate_client(&self, assertion: &str, now: UnixSeconds) -> Result<ClientClaim, ApiError> {
        let invalid = |d: &dyn ToString| ApiError::unauthorized("invalid_client").with_detail(d.to_string());
        let env = parse_kind(assertion, TokenKind::Claim).map_err(|e| invalid(&e))?;
        let cert = env.attached_cert().ok_or_else(|| invalid(&"client assertion carries no certificate"))?;
        self.trust.validate(cert, now).map_err(|e| invalid(&e))?;
        if !verify(&env, cert) {
            return Err(invalid(&"bad client assertion signature"));
        }
        let claim = env.decode::<ClientClaim>().map_err(|e| invalid(&e))?;
        if claim.client_id != cert.subject_id() {
            return Err(invalid(&"client_id does not match the signing certificate"));
        }
        Ok(claim)
    }

    fn token(&self, headers: &HeaderMap, timings: &mut Timings) -> Result<TokenResponse, ApiError> {
        let grant = require_header(headers, GRANT_TYPE, "invalid_request")?;
        if grant != CLIENT_CREDENTIALS {
            return Err(ApiError::bad_request("unsupported_grant_type"));
        }
        if require_header(headers, CLIENT_ASSERTION_TYPE, "invalid_request")? != JWT_BEARER {
            return Err(ApiError::bad_request("invalid_request").with_detail("unsupported client-assertion-type"));
        }
        let assertion = require_header(headers, CLIENT_ASSERTION, "invalid_request")?;
        let now = self.clock.now();

        let claim = timings.time("client_auth", || self.authenticate_client(assertion, now))?;

        let (rule, rule_name, sequence) = timings.time("check_permissions", || {
            let attrs = self
                .subjects
                .get(&claim.client_id)
                .ok_or_else(|| ApiError::forbidden("access_denied").with_detail("no attributes registered"))?;
            let grant = evaluate(&claim, attrs, self.policies.rules_for(&claim.application), &self.directory)
                .map_err(policy_error)?;
            let (GrantDecision::Permit { sequence, .. }, Some(rule_name)) = (&grant.decision, &grant.matched_rule)
            else {
                return Err(ApiError::forbidden("access_denied"));
            };
            let rule = self.policies.find(rule_name).expect("matched rule is in the store");
            if self.mode == Mode::Full {
                let sessions = self.sessions();
                if !check_frequency(&claim.client_id, rule, &sessions.history, now) {
                    return Err(ApiError::forbidden("frequency_window")
                        .with_detail(format!("rule '{rule_name}' allows one session per window")));
                }
                let windowed = rule.frequency().is_some();
                if windowed && sessions.active.contains_key(&(claim.client_id.clone(), rule_name.clone())) {
                    return Err(ApiError::forbidden("session_active"));
                }
            }
            Ok((rule.clone(), rule_name.clone(), sequence.clone()))
        })?;

        let owner = first_str(claim.object_attributes.get("resourceID"));
        let resource = first_str(claim.object_attributes.get("resourceType"));
        let (Some(owner), Some(resource)) = (owner, resource) else {
            return Err(ApiError::bad_request("invalid_request").with_detail("objectAttribute needs resourceID and resourceType"));
        };
        let first_rs = &sequence.entries()[0].rs_id;
        let rs_url = self
            .rs_urls
            .get(first_rs)
            .ok_or_else(|| ApiError::internal("unknown_resource_server").with_detail(first_rs))?;

        let session_id = random_session_id();
        let master = MasterCapability {
            sequence: sequence.clone(),
            client_id: claim.client_id.clone(),
            state: 0,
            session_id: session_id.clone(),
            issued_at: now,
            expiry: now + self.master_ttl,
            issuer: self.issuer.clone(),
            audience: format!("{rs_url}/{owner}/{resource}"),
            qualifiers: rule.qualifiers(),
        };
        let master_env = timings.time("master_token", || capability::sign(&master, &self.keys, self.keys.alg()))
            .map_err(|e| ApiError::internal("token_error").with_detail(e))?;

        let mut eso_caps = Vec::new();
        if self.mode == Mode::Full {
            let start = std::time::Instant::now();
            eso_caps = self.eso_tokens(&master, &master_env, owner, now)?;
            timings.record("eso_token", start.elapsed());
            let mut sessions = self.sessions();
            if rule.frequency().is_some() {
                let key = (claim.client_id.clone(), rule_name.clone());
                if sessions.active.contains_key(&key) {
                    return Err(ApiError::forbidden("session_active"));
                }
                sessions.active.insert(key, session_id.clone());
            }
            sessions.records.insert(
                session_id.clone(),
                SessionRecord {
                    session_id: session_id.clone(),
                    client_id: claim.client_id.clone(),
                    rule: rule_name,
                    master: master_env.clone(),
                    eso_caps: eso_caps.clone(),
                    status: RecordStatus::Active,
                    issued_at: now,
                },
            );
        }

        Ok(TokenResponse {
            access_token: master_env.to_token(),
            token_type: "pop".into(),
            expires_in: self.master_ttl,
            session_id,
            eso_tokens: eso_caps.iter().map(SignedEnvelope::to_token).collect(),
        })
    }

    /// One ESO capability per distinct (resource server, context) of the sequence.
    fn eso_tokens(
        &self,
        master: &MasterCapability,
        master_env: &SignedEnvelope,
        user_id: &str,
        now: UnixSeconds,
    ) -> Result<Vec<SignedEnvelope>, ApiError> {
        let registry = self.registry.read().expect("registry poisoned");
        let mut scopes: Vec<(String, String)> = Vec::new();
        for entry in master.sequence.entries() {
            for ctx in &entry.contexts {
                let key = (entry.rs_id.clone(), ctx.property.clone());
                if !scopes.contains(&key) {
                    scopes.push(key);
                }
            }
        }
        let hash = bind_hash(master_env);
        scopes
            .into_iter()
            .map(|(rs_id, context)| {
                let reg = resolve_eso(&context, &registry).map_err(policy_error)?;
                let cap = EsoCapability {
                    master_hash: hash,
                    scope: EsoScope {
                        rs_id,
                        eso_id: reg.eso_url.clone(),
                        permission: ESO_PERMISSION.into(),
                        context,
                    },
                    user_id: user_id.to_string(),
                    issuer: self.issuer.clone(),
                    issued_at: now,
                    expiry: (now + self.eso_ttl).min(master.expiry),
                };
                if !check_binding(&cap, master_env) {
                    return Err(ApiError::internal("binding_error"));
                }
                capability::sign(&cap, &self.keys, self.keys.alg())
                    .map_err(|e| ApiError::internal("token_error").with_detail(e))
            })
            .collect()
    }

    /// Verifies a token signed by a configured resource server; returns it with the signer id.
    fn verify_rs_token<C: TokenPayload>(&self, token: &str, now: UnixSeconds) -> Result<(C, String), ApiError> {
        let invalid = |d: &dyn ToString| ApiError::unauthorized("invalid_signature").with_detail(d.to_string());
        let env = parse_kind(token, C::KIND).map_err(|e| invalid(&e))?;
        let cert = env.attached_cert().ok_or_else(|| invalid(&"no signer certificate"))?;
        self.trust.validate(cert, now).map_err(|e| invalid(&e))?;
        if !verify(&env, cert) {
            return Err(invalid(&"bad signature"));
        }
        let payload = env.decode::<C>().map_err(|e| invalid(&e))?;
        let signer = cert.subject_id().to_string();
        if !self.rs_urls.contains_key(&signer) {
            return Err(ApiError::forbidden("unknown_resource_server").with_detail(signer));
        }
        Ok((payload, signer))
    }

    fn fresh(&self, iat: UnixSeconds, now: UnixSeconds) -> Result<(), ApiError> {
        if (now - iat).abs() > FRESHNESS_SECS {
            return Err(ApiError::unauthorized("stale_request"));
        }
        Ok(())
    }

    fn status_of(&self, session_id: &str) -> Option<SessionState> {
        self.sessions().records.get(session_id).map(|r| match r.status {
            RecordStatus::Active => SessionState::Active,
            RecordStatus::Completed | RecordStatus::Revoked => SessionState::RevokedOrCompleted,
        })
    }
}

async fn authorization(State(s): State<Arc<AsState>>, headers: HeaderMap) -> Response {
    let mut timings = Timings::from_headers(&headers);
    let result = s.token(&headers, &mut timings);
    let response = match result {
        Ok(tokens) => Json(tokens).into_response(),
        Err(e) => e.into_response(),
    };
    timings.attach(response)
}

async fn introspect(
    State(s): State<Arc<AsState>>,
    Json(req): Json<SignedRequest>,
) -> Result<Json<IntrospectionResponse>, ApiError> {
    let now = s.clock.now();
    let (query, signer) = s.verify_rs_token::<IntrospectionQuery>(&req.token, now)?;
    if query.rs_id != signer {
        return Err(ApiError::unauthorized("invalid_signature").with_detail("rs_id differs from signer"));
    }
    s.fresh(query.issued_at, now)?;
    let status = s.status_of(&query.session_id).ok_or_else(|| ApiError::not_found("unknown_session"))?;
    Ok(Json(IntrospectionResponse { status }))
}

async fn complete(
    State(s): State<Arc<AsState>>,
    Json(req): Json<SignedRequest>,
) -> Result<Json<IntrospectionResponse>, ApiError> {
    let now = s.clock.now();
    let (notice, signer) = s.verify_rs_token::<CompletionNotice>(&req.token, now)?;
    if notice.rs_id != signer {
        return Err(ApiError::unauthorized("invalid_signature").with_detail("rs_id differs from signer"));
    }
    s.fresh(notice.issued_at, now)?;
    let mut sessions = s.sessions();
    let rec = sessions
        .records
        .get(&notice.session_id)
        .ok_or_else(|| ApiError::not_found("unknown_session"))?;
    let named = rec
        .master
        .decode::<MasterCapability>()
        .map(|m| m.sequence.entries().iter().any(|e| e.rs_id == signer))
        .unwrap_or(false);
    if !named {
        return Err(ApiError::forbidden("unauthorized_resource_server").with_detail(signer));
    }
    sessions.close(&notice.session_id, RecordStatus::Completed, now);
    Ok(Json(IntrospectionResponse {
        status: SessionState::RevokedOrCompleted,
    }))
}

async fn revoke(
    State(s): State<Arc<AsState>>,
    headers: HeaderMap,
    Json(req): Json<RevokeRequest>,
) -> Result<Json<IntrospectionResponse>, ApiError> {
    check_admin(&headers, &s.admin_token)?;
    let now = s.clock.now();
    if !s.sessions().close(&req.session_id, RecordStatus::Revoked, now) {
        return Err(ApiError::not_found("unknown_session"));
    }
    Ok(Json(IntrospectionResponse {
        status: SessionState::RevokedOrCompleted,
    }))
}

async fn register_eso(
    State(s): State<Arc<AsState>>,
    headers: HeaderMap,
    Json(entry): Json<EsoRegistryEntry>,
) -> Result<StatusCode, ApiError> {
    check_admin(&headers, &s.admin_token)?;
    if entry.context_name.is_empty() || entry.eso_url.is_empty() {
        return Err(ApiError::bad_request("invalid_request").with_detail("context_name and eso_url are required"));
    }
    match s.registry.write().expect("registry poisoned").register(entry) {
        Ok(()) => Ok(StatusCode::CREATED),
        Err(e @ PolicyError::DuplicateRegistration(_)) => {
            Err(ApiError::new(StatusCode::CONFLICT, "duplicate_context").with_detail(e))
        }
        Err(e) => Err(ApiError::bad_request("invalid_request").with_detail(e)),
    }
}

async fn list_eso(State(s): State<Arc<AsState>>) -> Json<Vec<EsoRegistryEntry>> {
    Json(s.registry.read().expect("registry poisoned").entries().cloned().collect())
}

#[derive(Serialize)]
struct SessionView {
    session_id: String,
    client_id: String,
    rule: String,
    status: RecordStatus,
    issued_at: UnixSeconds,
}

async fn session_status(
    State(s): State<Arc<AsState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    check_admin(&headers, &s.admin_token)?;
    let sessions = s.sessions();
    let r = sessions.records.get(&id).ok_or_else(|| ApiError::not_found("unknown_session"))?;
    Ok(Json(SessionView {
        session_id: r.session_id.clone(),
        client_id: r.client_id.clone(),
        rule: r.rule.clone(),
        status: r.status,
        issued_at: r.issued_at,
    }))
}
