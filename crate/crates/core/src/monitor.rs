//! Resource-server side enforcement of permission sequences.
//!
//! [`Monitor::authorize`] decides a single access request against the
//! per-session counter `rs` kept by this resource server. A request presenting
//! a capability with `state` is admitted only when `state >= rs` and entry
//! `state` of the sequence names this server and the requested permission; on
//! success the counter advances to `state + 1` and a successor capability with
//! that state is minted, unless the entry was the last one.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};
use sha2::{Digest as _, Sha256};

use crate::capability::{
    self, b64, bind_hash, check_binding, verify, CapError, Certificate, Digest, EsoCapability, MasterCapability,
    PermissionEntry, PrincipalKeys, SignedEnvelope, StateCapability, TokenKind, TokenPayload, TrustAnchor,
    UnixSeconds,
};

/// Per-session value of the local variable `rs` at one resource server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionCounter {
    pub session_id: String,
    pub rs_value: u32,
}

impl SessionCounter {
    pub fn new(session_id: impl Into<String>) -> Self {
        SessionCounter {
            session_id: session_id.into(),
            rs_value: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AccessRequest {
    pub client_id: String,
    pub permission: String,
    /// Master or state capability.
    pub presented: Option<SignedEnvelope>,
    /// ESO capabilities, one per context the session's permissions require.
    pub eso_capabilities: Vec<SignedEnvelope>,
    pub pop_proof: Option<SignedEnvelope>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DenyReason {
    NoCapability,
    BadSignature,
    WrongClient,
    Expired,
    Revoked,
    WrongRS,
    OutOfOrder,
    ContextInactive,
    BindingFailure,
    PopFailure,
}

impl DenyReason {
    pub const ALL: [DenyReason; 10] = [
        DenyReason::NoCapability,
        DenyReason::BadSignature,
        DenyReason::WrongClient,
        DenyReason::Expired,
        DenyReason::Revoked,
        DenyReason::WrongRS,
        DenyReason::OutOfOrder,
        DenyReason::ContextInactive,
        DenyReason::BindingFailure,
        DenyReason::PopFailure,
    ];

    /// Machine-readable code used on the wire.
    pub fn code(self) -> &'static str {
        match self {
            DenyReason::NoCapability => "NoCapability",
            DenyReason::BadSignature => "BadSignature",
            DenyReason::WrongClient => "WrongClient",
            DenyReason::Expired => "Expired",
            DenyReason::Revoked => "Revoked",
            DenyReason::WrongRS => "WrongRS",
            DenyReason::OutOfOrder => "OutOfOrder",
            DenyReason::ContextInactive => "ContextInactive",
            DenyReason::BindingFailure => "BindingFailure",
            DenyReason::PopFailure => "PopFailure",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }

    /// 401 for authentication failures, 403 for authorization failures.
    pub fn http_status(self) -> u16 {
        match self {
            DenyReason::NoCapability | DenyReason::BadSignature | DenyReason::PopFailure => 401,
            _ => 403,
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// The sequence slot a successful request consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub index: usize,
    pub entry: PermissionEntry,
    pub master: MasterCapability,
}

// Short-lived; boxing the successor buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// Permission granted; `successor` carries state equal to the new counter.
    Invoke {
        successor: SignedEnvelope,
        invoked: Invocation,
    },
    /// The last permission of the sequence was granted; the AS must be told.
    InvokeLast { invoked: Invocation },
    Deny(DenyReason),
}

impl Decision {
    pub fn deny_reason(&self) -> Option<DenyReason> {
        match self {
            Decision::Deny(r) => Some(*r),
            _ => None,
        }
    }

    pub fn is_granted(&self) -> bool {
        !matches!(self, Decision::Deny(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Active,
    RevokedOrCompleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextState {
    Active,
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("oracle unavailable: {0}")]
pub struct OracleError(pub String);

/// Answers whether a session has been revoked or completed at the AS.
#[async_trait]
pub trait RevocationOracle: Send + Sync {
    async fn status(&self, session_id: &str) -> Result<SessionStatus, OracleError>;
}

/// Evaluates a context through its oracle, presenting the ESO capability.
#[async_trait]
pub trait ContextOracle: Send + Sync {
    async fn query(&self, token: &SignedEnvelope, claims: &EsoCapability) -> Result<ContextState, OracleError>;
}

/// Holder of one resource server's identity and trust configuration.
#[derive(Clone, Debug)]
pub struct Monitor {
    rs_id: String,
    keys: PrincipalKeys,
    trust: TrustAnchor,
    authority: Certificate,
}

/// Verified view of the presented capability.
struct Presented {
    master_env: SignedEnvelope,
    master: MasterCapability,
    state: u32,
    expiry: UnixSeconds,
}

impl Monitor {
    /// `authority` is the certificate of the AS whose masters this server accepts.
    pub fn new(keys: PrincipalKeys, trust: TrustAnchor, authority: Certificate) -> Self {
        Monitor {
            rs_id: keys.principal_id().to_string(),
            keys,
            trust,
            authority,
        }
    }

    pub fn rs_id(&self) -> &str {
        &self.rs_id
    }

    pub fn keys(&self) -> &PrincipalKeys {
        &self.keys
    }

    pub fn trust(&self) -> &TrustAnchor {
        &self.trust
    }

    pub fn authority(&self) -> &Certificate {
        &self.authority
    }

    fn check_presented(&self, env: &SignedEnvelope, now: UnixSeconds) -> Result<Presented, DenyReason> {
        match env.kind() {
            TokenKind::Master => {
                if !verify(env, &self.authority) {
                    return Err(DenyReason::BadSignature);
                }
                let master = env.decode::<MasterCapability>().map_err(|_| DenyReason::BadSignature)?;
                Ok(Presented {
                    master_env: env.clone(),
                    expiry: master.expiry,
                    state: master.state,
                    master,
                })
            }
            TokenKind::State => {
                let cap = env.decode::<StateCapability>().map_err(|_| DenyReason::BadSignature)?;
                self.trust
                    .validate(&cap.issuer_cert, now)
                    .map_err(|_| DenyReason::BadSignature)?;
                if !verify(env, &cap.issuer_cert) || !verify(&cap.master, &self.authority) {
                    return Err(DenyReason::BadSignature);
                }
                let master = cap.master_claims().map_err(|_| DenyReason::BadSignature)?;
                // Only the server that granted the previous slot may mint this state.
                let minted_by = master.sequence.get(cap.state as usize - 1).map(|e| e.rs_id.as_str());
                if minted_by != Some(cap.issuer_id()) {
                    return Err(DenyReason::BadSignature);
                }
                Ok(Presented {
                    master_env: cap.master,
                    master,
                    state: cap.state,
                    expiry: cap.expiry,
                })
            }
            _ => Err(DenyReason::BadSignature),
        }
    }

    /// Decides `req` against `counter`. Returns the decision and the counter
    /// value to store; the caller must hold the session's counter exclusively
    /// for the whole call.
    pub async fn authorize(
        &self,
        req: &AccessRequest,
        counter: &SessionCounter,
        now: UnixSeconds,
        revocation: &dyn RevocationOracle,
        context: &dyn ContextOracle,
    ) -> (Decision, SessionCounter) {
        match self.decide(req, counter, now, revocation, context).await {
            Ok((decision, next)) => (decision, next),
            Err(reason) => (Decision::Deny(reason), counter.clone()),
        }
    }

    async fn decide(
        &self,
        req: &AccessRequest,
        counter: &SessionCounter,
        now: UnixSeconds,
        revocation: &dyn RevocationOracle,
        context: &dyn ContextOracle,
    ) -> Result<(Decision, SessionCounter), DenyReason> {
        let env = req.presented.as_ref().ok_or(DenyReason::NoCapability)?;
        let presented = self.check_presented(env, now)?;
        let master = &presented.master;
        if master.session_id != counter.session_id {
            debug_assert!(false, "counter for session {} used with {}", counter.session_id, master.session_id);
            return Err(DenyReason::OutOfOrder);
        }
        if req.client_id != master.client_id {
            return Err(DenyReason::WrongClient);
        }
        if now >= presented.expiry || now >= master.expiry {
            return Err(DenyReason::Expired);
        }
        match revocation.status(&master.session_id).await {
            Ok(SessionStatus::Active) => {}
            Ok(SessionStatus::RevokedOrCompleted) | Err(_) => return Err(DenyReason::Revoked),
        }
        if !master.sequence.mentions(&self.rs_id, &req.permission) {
            return Err(DenyReason::WrongRS);
        }

        let mut eso_caps = Vec::with_capacity(req.eso_capabilities.len());
        for eso_env in &req.eso_capabilities {
            if eso_env.kind() != TokenKind::Eso || !verify(eso_env, &self.authority) {
                return Err(DenyReason::BadSignature);
            }
            let eso = eso_env.decode::<EsoCapability>().map_err(|_| DenyReason::BadSignature)?;
            if !check_binding(&eso, &presented.master_env) {
                return Err(DenyReason::BindingFailure);
            }
            if now >= eso.expiry {
                return Err(DenyReason::Expired);
            }
            eso_caps.push((eso_env, eso));
        }

        let index = presented.state as usize;
        let entry = match master.sequence.get(index) {
            Some(entry) if presented.state >= counter.rs_value && entry.names(&self.rs_id, &req.permission) => entry,
            _ => return Err(DenyReason::OutOfOrder),
        };

        for required in &entry.contexts {
            let Some((eso_env, eso)) = eso_caps
                .iter()
                .find(|(_, c)| c.scope.context == required.property && c.scope.rs_id == self.rs_id)
            else {
                return Err(DenyReason::ContextInactive);
            };
            match context.query(eso_env, eso).await {
                Ok(ContextState::Active) => {}
                Ok(ContextState::Inactive) | Err(_) => return Err(DenyReason::ContextInactive),
            }
        }

        let invoked = Invocation {
            index,
            entry: entry.clone(),
            master: master.clone(),
        };
        if index == master.sequence.last_index() {
            return Ok((Decision::InvokeLast { invoked }, counter.clone()));
        }
        let next_state = presented.state + 1;
        let successor = StateCapability {
            expiry: master.expiry,
            master: presented.master_env,
            state: next_state,
            issuer_cert: self.keys.certificate().clone(),
        };
        let successor =
            capability::sign(&successor, &self.keys, self.keys.alg()).map_err(|_| DenyReason::BadSignature)?;
        let next = SessionCounter {
            session_id: counter.session_id.clone(),
            rs_value: next_state,
        };
        Ok((Decision::Invoke { successor, invoked }, next))
    }
}

/// Extracts the master envelope from a master or state capability without
/// checking any signature.
pub fn master_of(env: &SignedEnvelope) -> Result<(SignedEnvelope, MasterCapability), CapError> {
    match env.kind() {
        TokenKind::Master => Ok((env.clone(), env.decode::<MasterCapability>()?)),
        TokenKind::State => {
            let cap = env.decode::<StateCapability>()?;
            let master = cap.master_claims()?;
            Ok((cap.master, master))
        }
        other => Err(CapError::MalformedEnvelope(format!("{} is not a capability", other.as_str()))),
    }
}

/// Client's proof of possession: a signature over a server nonce and the
/// hash of the capability being presented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopProof {
    pub client_id: String,
    pub nonce: Vec<u8>,
    pub token_hash: Digest,
}

impl PopProof {
    pub fn for_token(client_id: &str, nonce: &[u8], presented: &SignedEnvelope) -> Self {
        PopProof {
            client_id: client_id.to_string(),
            nonce: nonce.to_vec(),
            token_hash: bind_hash(presented),
        }
    }

    /// Signs a proof for `presented` with the client's key, attaching its certificate.
    pub fn create(keys: &PrincipalKeys, nonce: &[u8], presented: &SignedEnvelope) -> Result<SignedEnvelope, CapError> {
        SignedEnvelope::sign_with_cert(&Self::for_token(keys.principal_id(), nonce, presented), keys)
    }
}

impl TokenPayload for PopProof {
    const KIND: TokenKind = TokenKind::PopProof;

    fn validate(&self) -> Result<(), CapError> {
        if self.client_id.is_empty() || self.nonce.is_empty() {
            return Err(CapError::InvariantViolation("PoP proof needs a client id and nonce".into()));
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        json!({"client_id": self.client_id, "nonce": b64(&self.nonce), "token_hash": self.token_hash.to_b64()})
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let field = |k: &str| {
            value
                .get(k)
                .and_then(Value::as_str)
                .ok_or_else(|| CapError::InvariantViolation(format!("PoP proof: missing '{k}'")))
        };
        if value.as_object().is_none_or(|o| o.len() != 3) {
            return Err(CapError::InvariantViolation("PoP proof: unexpected fields".into()));
        }
        Ok(PopProof {
            client_id: field("client_id")?.to_string(),
            nonce: capability::unb64(field("nonce")?)?,
            token_hash: Digest::from_b64(field("token_hash")?)?,
        })
    }
}

/// True iff the request's proof is a signature by `client_cert`, whose subject is
/// the requesting client, over `challenge` and the presented capability.
/// The caller validates `client_cert` against the trust anchor and consumes the
/// challenge.
pub fn verify_pop(req: &AccessRequest, client_cert: &Certificate, challenge: &[u8]) -> bool {
    let (Some(proof_env), Some(presented)) = (&req.pop_proof, &req.presented) else {
        return false;
    };
    if client_cert.subject_id() != req.client_id || !verify(proof_env, client_cert) {
        return false;
    }
    match proof_env.decode::<PopProof>() {
        Ok(proof) => {
            proof.client_id == req.client_id && proof.nonce == challenge && proof.token_hash == bind_hash(presented)
        }
        Err(_) => false,
    }
}

/// Single-use, time-limited PoP nonces.
#[derive(Debug)]
pub struct ChallengeStore {
    ttl: Duration,
    issued: Mutex<HashMap<[u8; 16], UnixSeconds>>,
}

impl Default for ChallengeStore {
    fn default() -> Self {
        ChallengeStore::new(Duration::from_secs(60))
    }
}

impl ChallengeStore {
    pub fn new(ttl: Duration) -> Self {
        ChallengeStore {
            ttl,
            issued: Mutex::new(HashMap::new()),
        }
    }

    pub fn issue(&self, now: UnixSeconds) -> [u8; 16] {
        let nonce: [u8; 16] = rand::random();
        let mut issued = self.issued.lock().expect("challenge store poisoned");
        let ttl = self.ttl.as_secs() as i64;
        issued.retain(|_, t| now - *t <= ttl);
        issued.insert(nonce, now);
        nonce
    }

    /// Removes the nonce; true iff it was outstanding and still fresh.
    pub fn consume(&self, nonce: &[u8], now: UnixSeconds) -> bool {
        let Ok(key) = <[u8; 16]>::try_from(nonce) else {
            return false;
        };
        let issued_at = self.issued.lock().expect("challenge store poisoned").remove(&key);
        matches!(issued_at, Some(t) if now - t <= self.ttl.as_secs() as i64)
    }

    pub fn outstanding(&self) -> usize {
        self.issued.lock().expect("challenge store poisoned").len()
    }
}

/// SHA-256 of arbitrary bytes.
pub fn sha256(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}
