//! Capability types, their canonical serialization, signatures and the
//! ESO-to-master hash binding.

mod binding;
mod codec;
mod envelope;
mod keys;

use std::collections::BTreeMap;
use std::fmt;

use base64::Engine;
use serde_json::Value;
use thiserror::Error;

pub use binding::{bind_hash, check_binding};
pub use codec::{canonical_serialize, deserialize, human_duration, TokenPayload};
pub use envelope::{sign, verify, EnvelopeHeader, SignedEnvelope, TokenKind};
pub use keys::{
    Certificate, PrincipalKeys, PublicKey, RootAuthority, SignatureAlg, SigningKey, TrustAnchor, RSA_BITS,
};

/// Seconds since the Unix epoch, read from the verifier's local clock.
pub type UnixSeconds = i64;

/// Structured attribute values as they appear in policies and claims.
pub type AttributeMap = BTreeMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CapError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("signing key does not match the requested algorithm or certificate")]
    KeyMismatch,
    #[error("unsupported signature algorithm '{0}'")]
    UnsupportedAlg(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("certificate error: {0}")]
    Certificate(String),
}

pub(crate) fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes)
}

pub(crate) fn unb64(s: &str) -> Result<Vec<u8>, CapError> {
    base64::engine::general_purpose::URL_SAFE_NO_PAD
        .decode(s)
        .map_err(|e| CapError::MalformedEnvelope(format!("bad base64url: {e}")))
}

fn require_non_empty(what: &str, value: &str) -> Result<(), CapError> {
    if value.is_empty() {
        Err(CapError::InvariantViolation(format!("{what} must be non-empty")))
    } else {
        Ok(())
    }
}

/// SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_b64(&self) -> String {
        b64(&self.0)
    }

    pub fn from_b64(s: &str) -> Result<Self, CapError> {
        let raw = unb64(s)?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| CapError::InvariantViolation("digest must be exactly 32 bytes".into()))?;
        Ok(Digest(bytes))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_b64())
    }
}

/// A condition that must hold in the environment before a permission is invoked.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextRequirement {
    /// Context name, e.g. `used_within_two_months`.
    pub property: String,
    pub subject_id: String,
    pub rs_id: String,
}

impl ContextRequirement {
    pub fn validate(&self) -> Result<(), CapError> {
        require_non_empty("context property", &self.property)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermissionEntry {
    pub rs_id: String,
    pub permission: String,
    pub contexts: Vec<ContextRequirement>,
}

impl PermissionEntry {
    pub fn new(rs_id: impl Into<String>, permission: impl Into<String>) -> Self {
        PermissionEntry {
            rs_id: rs_id.into(),
            permission: permission.into(),
            contexts: Vec::new(),
        }
    }

    pub fn with_context(mut self, ctx: ContextRequirement) -> Self {
        self.contexts.push(ctx);
        self
    }

    pub fn names(&self, rs_id: &str, permission: &str) -> bool {
        self.rs_id == rs_id && self.permission == permission
    }

    pub fn validate(&self) -> Result<(), CapError> {
        require_non_empty("rs_id", &self.rs_id)?;
        require_non_empty("permission", &self.permission)?;
        for (i, ctx) in self.contexts.iter().enumerate() {
            ctx.validate()?;
            if self.contexts[..i].iter().any(|c| c.property == ctx.property) {
                return Err(CapError::InvariantViolation(format!(
                    "duplicate context '{}' on one permission",
                    ctx.property
                )));
            }
        }
        Ok(())
    }
}

/// Ordered, non-empty list of permissions that must be invoked in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermissionSequence(Vec<PermissionEntry>);

impl PermissionSequence {
    pub fn new(entries: Vec<PermissionEntry>) -> Result<Self, CapError> {
        let seq = PermissionSequence(entries);
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<(), CapError> {
        if self.0.is_empty() {
            return Err(CapError::InvariantViolation("permission sequence must be non-empty".into()));
        }
        self.0.iter().try_for_each(PermissionEntry::validate)
    }

    pub fn entries(&self) -> &[PermissionEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&PermissionEntry> {
        self.0.get(index)
    }

    pub fn last_index(&self) -> usize {
        self.0.len() - 1
    }

    /// True when some entry names `(rs_id, permission)`.
    pub fn mentions(&self, rs_id: &str, permission: &str) -> bool {
        self.0.iter().any(|e| e.names(rs_id, permission))
    }

    /// Distinct context names in order of first appearance.
    pub fn context_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ctx in self.0.iter().flat_map(|e| e.contexts.iter()) {
            if !out.contains(&ctx.property) {
                out.push(ctx.property.clone());
            }
        }
        out
    }
}

/// Session-root capability issued by the authorization server.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterCapability {
    pub sequence: PermissionSequence,
    pub client_id: String,
    pub state: u32,
    pub session_id: String,
    pub issued_at: UnixSeconds,
    pub expiry: UnixSeconds,
    /// Authorization server endpoint.
    pub issuer: String,
    /// Resource URL the session acts on.
    pub audience: String,
    /// Action qualifiers copied from the matched rule (amount, frequency, ...).
    pub qualifiers: AttributeMap,
}

impl MasterCapability {
    pub fn validate(&self) -> Result<(), CapError> {
        self.sequence.validate()?;
        require_non_empty("client_id", &self.client_id)?;
        require_non_empty("session_id", &self.session_id)?;
        if self.state != 0 {
            return Err(CapError::InvariantViolation("master capability must carry state 0".into()));
        }
        if self.expiry <= self.issued_at {
            return Err(CapError::InvariantViolation("expiry must be after issued_at".into()));
        }
        if self.qualifiers.contains_key("permission_sequences") {
            return Err(CapError::InvariantViolation("qualifier key 'permission_sequences' is reserved".into()));
        }
        Ok(())
    }
}

/// Successor capability minted by a resource server after a successful invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCapability {
    /// The master envelope, embedded byte-for-byte.
    pub master: SignedEnvelope,
    pub state: u32,
    pub issuer_cert: Certificate,
    pub expiry: UnixSeconds,
}

impl StateCapability {
    /// Decodes the embedded master's claims.
    pub fn master_claims(&self) -> Result<MasterCapability, CapError> {
        self.master.decode::<MasterCapability>()
    }

    pub fn issuer_id(&self) -> &str {
        self.issuer_cert.subject_id()
    }

    pub fn validate(&self) -> Result<(), CapError> {
        let master = self.master_claims()?;
        if self.state < 1 || self.state as usize > master.sequence.last_index() {
            return Err(CapError::InvariantViolation(format!(
                "state {} outside 1..={}",
                self.state,
                master.sequence.last_index()
            )));
        }
        if self.expiry > master.expiry {
            return Err(CapError::InvariantViolation("state capability outlives its master".into()));
        }
        Ok(())
    }
}

/// What an ESO capability lets its holder ask of an oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EsoScope {
    pub rs_id: String,
    /// Oracle identity; a URL is permitted.
    pub eso_id: String,
    pub permission: String,
    pub context: String,
}

impl EsoScope {
    pub fn validate(&self) -> Result<(), CapError> {
        require_non_empty("scope rs_id", &self.rs_id)?;
        require_non_empty("scope eso_id", &self.eso_id)?;
        require_non_empty("scope permission", &self.permission)?;
        require_non_empty("scope context", &self.context)
    }
}

/// Capability for querying an environmental situation oracle, hash-bound to a master.
#[derive(Debug, Clone, PartialEq)]
pub struct EsoCapability {
    pub master_hash: Digest,
    pub scope: EsoScope,
    /// User whose situation is evaluated.
    pub user_id: String,
    pub issuer: String,
    pub issued_at: UnixSeconds,
    pub expiry: UnixSeconds,
}

impl EsoCapability {
    pub fn validate(&self) -> Result<(), CapError> {
        self.scope.validate()?;
        require_non_empty("userID", &self.user_id)?;
        if self.expiry <= self.issued_at {
            return Err(CapError::InvariantViolation("expiry must be after issued_at".into()));
        }
        Ok(())
    }
}

/// Signed authorization request a client sends to the authorization server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientClaim {
    pub client_id: String,
    pub issuer: String,
    pub application: String,
    pub target_rs: Option<String>,
    pub object_attributes: AttributeMap,
    /// Requested actions plus qualifiers such as `amount`.
    pub structured_scope: AttributeMap,
}

impl ClientClaim {
    /// Requested action names from `structured_scope.actions`.
    pub fn actions(&self) -> Vec<String> {
        match self.structured_scope.get("actions") {
            Some(Value::Array(items)) => items.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
            Some(Value::String(s)) => vec![s.clone()],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), CapError> {
        require_non_empty("client_id", &self.client_id)?;
        if self.structured_scope.is_empty() || self.actions().is_empty() {
            return Err(CapError::InvariantViolation("requested scope must name at least one action".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
