//! HTTP header names, JSON bodies and the signed server-to-server payloads.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use seqcap_core::capability::{CapError, SignedEnvelope, TokenKind, TokenPayload, UnixSeconds};

pub const GRANT_TYPE: &str = "grant-type";
pub const CLIENT_ASSERTION_TYPE: &str = "client-assertion-type";
pub const CLIENT_ASSERTION: &str = "client-assertion";
pub const CLIENT_CREDENTIALS: &str = "client_credentials";
pub const JWT_BEARER: &str = "urn:ietf:params:oauth:client-assertion-type:jwt-bearer";

pub const X_OAUTH_TOKEN: &str = "x-oauth-token";
pub const X_ESO_TOKEN: &str = "x-eso-token";
pub const X_POP_SIGNATURE: &str = "x-pop-signature";
pub const X_RS_SIGNATURE: &str = "x-rs-signature";
pub const X_RS_TIMESTAMP: &str = "x-rs-timestamp";
pub const X_RS_CERT: &str = "x-rs-cert";
pub const X_ADMIN_TOKEN: &str = "x-admin-token";
/// Request header asking for a per-phase breakdown; the response carries the same header.
pub const X_TIMING: &str = "x-timing";

/// Maximum clock difference accepted on signed server-to-server messages.
pub const FRESHNESS_SECS: i64 = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub access_token: String,
    pub token_type: String,
    pub expires_in: i64,
    pub session_id: String,
    #[serde(default)]
    pub eso_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResponse {
    pub result: Value,
    /// Successor capability, absent after the last permission of the sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeResponse {
    pub nonce: String,
}

/// Body of `/introspect` and `/complete`: one signed token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub token: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    RevokedOrCompleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrospectionResponse {
    pub status: SessionState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevokeRequest {
    pub session_id: String,
}

/// Oracle answer, `{"Context":"True"}` or `{"Context":"False"}`.
pub fn context_body(active: bool) -> Value {
    json!({ "Context": if active { "True" } else { "False" } })
}

/// Reads an oracle answer; the misspelled `Contex` key is accepted too.
pub fn parse_context_body(body: &Value) -> Option<bool> {
    let v = body.get("Context").or_else(|| body.get("Contex"))?;
    match v {
        Value::String(s) if s.eq_ignore_ascii_case("true") => Some(true),
        Value::String(s) if s.eq_ignore_ascii_case("false") => Some(false),
        Value::Bool(b) => Some(*b),
        _ => None,
    }
}

/// Bytes an RS signs when querying an oracle: the ESO token followed by the decimal timestamp.
pub fn eso_query_message(eso_token: &str, timestamp: UnixSeconds) -> Vec<u8> {
    let mut msg = eso_token.as_bytes().to_vec();
    msg.extend_from_slice(timestamp.to_string().as_bytes());
    msg
}

/// Splits a comma-separated `x-eso-token` header.
pub fn split_tokens(header: &str) -> Vec<&str> {
    header.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
}

/// Notice from an RS that the last permission of a session was invoked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionNotice {
    pub session_id: String,
    pub rs_id: String,
    pub issued_at: UnixSeconds,
}

/// Revocation-status query from an RS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntrospectionQuery {
    pub session_id: String,
    pub rs_id: String,
    pub issued_at: UnixSeconds,
}

fn session_payload_json(session_id: &str, rs_id: &str, iat: UnixSeconds) -> Value {
    json!({ "iat": iat, "rs_id": rs_id, "session_id": session_id })
}

fn session_payload_from(value: &Value, what: &str) -> Result<(String, String, UnixSeconds), CapError> {
    let bad = |m: &str| CapError::InvariantViolation(format!("{what}: {m}"));
    let obj = value.as_object().ok_or_else(|| bad("not an object"))?;
    if obj.len() != 3 {
        return Err(bad("unexpected fields"));
    }
    let text = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_string).ok_or_else(|| bad(k));
    let iat = obj.get("iat").and_then(Value::as_i64).ok_or_else(|| bad("iat"))?;
    Ok((text("session_id")?, text("rs_id")?, iat))
}

fn require(what: &str, session_id: &str, rs_id: &str) -> Result<(), CapError> {
    if session_id.is_empty() || rs_id.is_empty() {
        return Err(CapError::InvariantViolation(format!("{what}: empty session or rs id")));
    }
    Ok(())
}

impl TokenPayload for CompletionNotice {
    const KIND: TokenKind = TokenKind::Completion;

    fn validate(&self) -> Result<(), CapError> {
        require("completion", &self.session_id, &self.rs_id)
    }

    fn to_json(&self) -> Value {
        session_payload_json(&self.session_id, &self.rs_id, self.issued_at)
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let (session_id, rs_id, issued_at) = session_payload_from(value, "completion")?;
        Ok(CompletionNotice {
            session_id,
            rs_id,
            issued_at,
        })
    }
}

impl TokenPayload for IntrospectionQuery {
    const KIND: TokenKind = TokenKind::Introspection;

    fn validate(&self) -> Result<(), CapError> {
        require("introspection", &self.session_id, &self.rs_id)
    }

    fn to_json(&self) -> Value {
        session_payload_json(&self.session_id, &self.rs_id, self.issued_at)
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let (session_id, rs_id, issued_at) = session_payload_from(value, "introspection")?;
        Ok(IntrospectionQuery {
            session_id,
            rs_id,
            issued_at,
        })
    }
}

/// Parses a token and checks its type tag.
pub fn parse_kind(token: &str, kind: TokenKind) -> Result<SignedEnvelope, CapError> {
    let env = SignedEnvelope::parse(token)?;
    if env.kind() != kind {
        return Err(CapError::MalformedEnvelope(format!(
            "expected {} token, found {}",
            kind.as_str(),
            env.kind().as_str()
        )));
    }
    Ok(env)
}
