//! Canonical JSON encoding of capability payloads.
//!
//! Objects are emitted with keys in lexicographic order and no insignificant
//! whitespace, so equal capabilities always produce identical bytes. Decoding
//! rejects any input that does not re-encode to exactly the same bytes.

use serde_json::{json, Map, Value};

use super::envelope::{SignedEnvelope, TokenKind};
use super::keys::Certificate;
use super::{
    b64, unb64, AttributeMap, CapError, ClientClaim, ContextRequirement, Digest, EsoCapability, EsoScope,
    MasterCapability, PermissionEntry, PermissionSequence, StateCapability,
};

/// A payload type that can be carried in a [`SignedEnvelope`].
pub trait TokenPayload: Sized {
    const KIND: TokenKind;

    fn validate(&self) -> Result<(), CapError>;
    fn to_json(&self) -> Value;
    fn from_json(value: &Value) -> Result<Self, CapError>;
}

pub fn canonical_serialize<C: TokenPayload>(cap: &C) -> Result<Vec<u8>, CapError> {
    cap.validate()?;
    Ok(serde_json::to_vec(&cap.to_json()).expect("JSON values always serialize"))
}

pub fn deserialize<C: TokenPayload>(bytes: &[u8]) -> Result<C, CapError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| CapError::MalformedEnvelope(e.to_string()))?;
    let cap = C::from_json(&value)?;
    if canonical_serialize(&cap)? != bytes {
        return Err(CapError::MalformedEnvelope("payload is not canonically encoded".into()));
    }
    Ok(cap)
}

/// Renders a lifetime the way tokens display it, e.g. `"1 day"` or `"90 minutes"`.
pub fn human_duration(secs: i64) -> String {
    let (n, unit) = if secs != 0 && secs % 86_400 == 0 {
        (secs / 86_400, "day")
    } else if secs != 0 && secs % 3_600 == 0 {
        (secs / 3_600, "hour")
    } else if secs != 0 && secs % 60 == 0 {
        (secs / 60, "minute")
    } else {
        (secs, "second")
    };
    if n == 1 {
        format!("1 {unit}")
    } else {
        format!("{n} {unit}s")
    }
}

fn malformed(msg: impl Into<String>) -> CapError {
    CapError::InvariantViolation(msg.into())
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
    what: &'static str,
}

impl<'a> Fields<'a> {
    fn new(value: &'a Value, what: &'static str, allowed: &[&str]) -> Result<Self, CapError> {
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(format!("{what} must be a JSON object")))?;
        if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(malformed(format!("{what}: unexpected field '{extra}'")));
        }
        Ok(Fields { obj, what })
    }

    fn get(&self, key: &str) -> Result<&'a Value, CapError> {
        self.obj
            .get(key)
            .ok_or_else(|| malformed(format!("{}: missing field '{key}'", self.what)))
    }

    fn str(&self, key: &str) -> Result<String, CapError> {
        self.get(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed(format!("{}: '{key}' must be a string", self.what)))
    }

    fn int(&self, key: &str) -> Result<i64, CapError> {
        self.get(key)?
            .as_i64()
            .ok_or_else(|| malformed(format!("{}: '{key}' must be an integer", self.what)))
    }

    fn str_list(&self, key: &str) -> Result<Vec<String>, CapError> {
        self.get(key)?
            .as_array()
            .and_then(|items| items.iter().map(|v| v.as_str().map(str::to_string)).collect())
            .ok_or_else(|| malformed(format!("{}: '{key}' must be a list of strings", self.what)))
    }

    fn map(&self, key: &str) -> Result<AttributeMap, CapError> {
        self.get(key)?
            .as_object()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .ok_or_else(|| malformed(format!("{}: '{key}' must be an object", self.what)))
    }
}

fn attr_map_json(map: &AttributeMap) -> Value {
    Value::Object(map.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
}

fn entry_json(entry: &PermissionEntry) -> Value {
    let contexts: Vec<Value> = entry
        .contexts
        .iter()
        .map(|c| json!({"property": c.property, "rs_id": c.rs_id, "subject_id": c.subject_id}))
        .collect();
    json!({"contexts": contexts, "permission": entry.permission, "rs_id": entry.rs_id})
}

fn entry_from_json(value: &Value) -> Result<PermissionEntry, CapError> {
    let f = Fields::new(value, "sequence entry", &["contexts", "permission", "rs_id"])?;
    let contexts = f
        .get("contexts")?
        .as_array()
        .ok_or_else(|| malformed("sequence entry: 'contexts' must be a list"))?
        .iter()
        .map(|c| {
            let cf = Fields::new(c, "context", &["property", "rs_id", "subject_id"])?;
            Ok(ContextRequirement {
                property: cf.str("property")?,
                subject_id: cf.str("subject_id")?,
                rs_id: cf.str("rs_id")?,
            })
        })
        .collect::<Result<Vec<_>, CapError>>()?;
    Ok(PermissionEntry {
        rs_id: f.str("rs_id")?,
        permission: f.str("permission")?,
        contexts,
    })
}

impl TokenPayload for MasterCapability {
    const KIND: TokenKind = TokenKind::Master;

    fn validate(&self) -> Result<(), CapError> {
        MasterCapability::validate(self)
    }

    fn to_json(&self) -> Value {
        let mut action = Map::new();
        let perms: Vec<Value> = self
            .sequence
            .entries()
            .iter()
            .map(|e| json!(e.permission))
            .collect();
        action.insert("permission_sequences".into(), Value::Array(perms));
        for (k, v) in &self.qualifiers {
            action.insert(k.clone(), v.clone());
        }
        let sequence: Vec<Value> = self.sequence.entries().iter().map(entry_json).collect();
        json!({
            "actionAttribute": Value::Object(action),
            "audience": self.audience,
            "environmentcontext": self.sequence.context_names(),
            "exp": self.expiry,
            "expireIn": human_duration(self.expiry - self.issued_at),
            "iat": self.issued_at,
            "issuer": self.issuer,
            "sequence": sequence,
            "session_id": self.session_id,
            "state": self.state.to_string(),
            "subject_id": self.client_id,
        })
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let f = Fields::new(
            value,
            "master capability",
            &[
                "actionAttribute",
                "audience",
                "environmentcontext",
                "exp",
                "expireIn",
                "iat",
                "issuer",
                "sequence",
                "session_id",
                "state",
                "subject_id",
            ],
        )?;
        let entries = f
            .get("sequence")?
            .as_array()
            .ok_or_else(|| malformed("master capability: 'sequence' must be a list"))?
            .iter()
            .map(entry_from_json)
            .collect::<Result<Vec<_>, _>>()?;
        let sequence = PermissionSequence::new(entries)?;
        let state = f
            .str("state")?
            .parse::<u32>()
            .map_err(|_| malformed("master capability: 'state' must be a decimal string"))?;
        let mut qualifiers = f.map("actionAttribute")?;
        let listed = qualifiers
            .remove("permission_sequences")
            .ok_or_else(|| malformed("master capability: missing permission_sequences"))?;
        let cap = MasterCapability {
            sequence,
            client_id: f.str("subject_id")?,
            state,
            session_id: f.str("session_id")?,
            issued_at: f.int("iat")?,
            expiry: f.int("exp")?,
            issuer: f.str("issuer")?,
            audience: f.str("audience")?,
            qualifiers,
        };
        let expected: Vec<Value> = cap.sequence.entries().iter().map(|e| json!(e.permission)).collect();
        if listed != Value::Array(expected) {
            return Err(malformed("master capability: permission_sequences disagrees with sequence"));
        }
        if f.str_list("environmentcontext")? != cap.sequence.context_names() {
            return Err(malformed("master capability: environmentcontext disagrees with sequence"));
        }
        if f.str("expireIn")? != human_duration(cap.expiry - cap.issued_at) {
            return Err(malformed("master capability: expireIn disagrees with exp"));
        }
        Ok(cap)
    }
}

impl TokenPayload for StateCapability {
    const KIND: TokenKind = TokenKind::State;

    fn validate(&self) -> Result<(), CapError> {
        StateCapability::validate(self)
    }

    fn to_json(&self) -> Value {
        json!({
            "cert": b64(self.issuer_cert.der()),
            "exp": self.expiry,
            "issuer": self.issuer_cert.subject_id(),
            "master": self.master.to_token(),
            "state": self.state,
        })
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let f = Fields::new(value, "state capability", &["cert", "exp", "issuer", "master", "state"])?;
        let issuer_cert = Certificate::from_der(&unb64(&f.str("cert")?)?)?;
        if issuer_cert.subject_id() != f.str("issuer")? {
            return Err(malformed("state capability: issuer disagrees with certificate"));
        }
        let master = SignedEnvelope::parse(&f.str("master")?)?;
        if master.kind() != TokenKind::Master {
            return Err(malformed("state capability must embed a master capability"));
        }
        let state = u32::try_from(f.int("state")?).map_err(|_| malformed("state capability: bad state"))?;
        Ok(StateCapability {
            master,
            state,
            issuer_cert,
            expiry: f.int("exp")?,
        })
    }
}

impl TokenPayload for EsoCapability {
    const KIND: TokenKind = TokenKind::Eso;

    fn validate(&self) -> Result<(), CapError> {
        EsoCapability::validate(self)
    }

    fn to_json(&self) -> Value {
        json!({
            "action": [self.scope.permission],
            "audience": self.scope.eso_id,
            "environmentContext": [self.scope.context],
            "exp": self.expiry,
            "expireIn": human_duration(self.expiry - self.issued_at),
            "hashAT": self.master_hash.to_b64(),
            "iat": self.issued_at,
            "issuer": self.issuer,
            "subject": self.scope.rs_id,
            "userID": self.user_id,
        })
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let f = Fields::new(
            value,
            "ESO capability",
            &[
                "action",
                "audience",
                "environmentContext",
                "exp",
                "expireIn",
                "hashAT",
                "iat",
                "issuer",
                "subject",
                "userID",
            ],
        )?;
        let single = |key: &str| -> Result<String, CapError> {
            let mut items = f.str_list(key)?;
            if items.len() != 1 {
                return Err(malformed(format!("ESO capability: '{key}' must hold exactly one value")));
            }
            Ok(items.remove(0))
        };
        let cap = EsoCapability {
            master_hash: Digest::from_b64(&f.str("hashAT")?)?,
            scope: EsoScope {
                rs_id: f.str("subject")?,
                eso_id: f.str("audience")?,
                permission: single("action")?,
                context: single("environmentContext")?,
            },
            user_id: f.str("userID")?,
            issuer: f.str("issuer")?,
            issued_at: f.int("iat")?,
            expiry: f.int("exp")?,
        };
        if f.str("expireIn")? != human_duration(cap.expiry - cap.issued_at) {
            return Err(malformed("ESO capability: expireIn disagrees with exp"));
        }
        Ok(cap)
    }
}

impl TokenPayload for ClientClaim {
    const KIND: TokenKind = TokenKind::Claim;

    fn validate(&self) -> Result<(), CapError> {
        ClientClaim::validate(self)
    }

    fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("application".into(), json!(self.application));
        obj.insert("client_id".into(), json!(self.client_id));
        obj.insert("issuer".into(), json!(self.issuer));
        obj.insert("objectAttribute".into(), attr_map_json(&self.object_attributes));
        obj.insert("structured_scope".into(), attr_map_json(&self.structured_scope));
        if let Some(rs) = &self.target_rs {
            obj.insert("target_rs".into(), json!(rs));
        }
        Value::Object(obj)
    }

    fn from_json(value: &Value) -> Result<Self, CapError> {
        let f = Fields::new(
            value,
            "client claim",
            &["application", "client_id", "issuer", "objectAttribute", "structured_scope", "target_rs"],
        )?;
        Ok(ClientClaim {
            client_id: f.str("client_id")?,
            issuer: f.str("issuer")?,
            application: f.str("application")?,
            target_rs: f.obj.get("target_rs").is_some().then(|| f.str("target_rs")).transpose()?,
            object_attributes: f.map("objectAttribute")?,
            structured_scope: f.map("structured_scope")?,
        })
    }
}
