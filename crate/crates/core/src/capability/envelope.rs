use std::fmt;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use super::codec::{canonical_serialize, deserialize, TokenPayload};
use super::keys::{Certificate, PrincipalKeys, SignatureAlg};
use super::{b64, unb64, CapError};

/// Payload type tag carried in the envelope header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Master,
    State,
    Eso,
    Claim,
    PopProof,
    Completion,
    Introspection,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Master => "master+cap",
            TokenKind::State => "state+cap",
            TokenKind::Eso => "eso+cap",
            TokenKind::Claim => "claim+jwt",
            TokenKind::PopProof => "pop+jwt",
            TokenKind::Completion => "complete+jwt",
            TokenKind::Introspection => "introspect+jwt",
        }
    }
}

impl FromStr for TokenKind {
    type Err = CapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "master+cap" => TokenKind::Master,
            "state+cap" => TokenKind::State,
            "eso+cap" => TokenKind::Eso,
            "claim+jwt" => TokenKind::Claim,
            "pop+jwt" => TokenKind::PopProof,
            "complete+jwt" => TokenKind::Completion,
            "introspect+jwt" => TokenKind::Introspection,
            other => return Err(CapError::MalformedEnvelope(format!("unknown token type '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeHeader {
    pub alg: SignatureAlg,
    /// Principal id of the signer.
    pub kid: String,
    pub typ: TokenKind,
    /// Signer certificate, attached when the verifier may not know it in advance.
    pub x5c: Option<Certificate>,
}

impl EnvelopeHeader {
    fn to_canonical_json(&self) -> Vec<u8> {
        let mut map = Map::new();
        map.insert("alg".into(), json!(self.alg.jws_name()));
        map.insert("kid".into(), json!(self.kid));
        map.insert("typ".into(), json!(self.typ.as_str()));
        if let Some(cert) = &self.x5c {
            map.insert("x5c".into(), json!(b64(cert.der())));
        }
        serde_json::to_vec(&Value::Object(map)).expect("header serializes")
    }

    fn from_json(bytes: &[u8]) -> Result<Self, CapError> {
        let bad = |m: &str| CapError::MalformedEnvelope(format!("header: {m}"));
        let v: Value = serde_json::from_slice(bytes).map_err(|e| bad(&e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| bad("not an object"))?;
        let field = |k: &str| obj.get(k).and_then(Value::as_str).ok_or_else(|| bad(&format!("missing '{k}'")));
        let alg = SignatureAlg::from_str(field("alg")?).map_err(|_| bad("unsupported alg"))?;
        let kid = field("kid")?.to_string();
        let typ = TokenKind::from_str(field("typ")?)?;
        let x5c = match obj.get("x5c") {
            None => None,
            Some(Value::String(s)) => Some(Certificate::from_der(&unb64(s)?).map_err(|e| bad(&e.to_string()))?),
            Some(_) => return Err(bad("x5c must be a string")),
        };
        if obj.len() != 3 + usize::from(x5c.is_some()) {
            return Err(bad("unexpected header fields"));
        }
        let header = EnvelopeHeader { alg, kid, typ, x5c };
        if header.to_canonical_json() != bytes {
            return Err(bad("header is not canonically encoded"));
        }
        Ok(header)
    }
}

/// A signed token: `base64url(header).base64url(payload).base64url(signature)`,
/// the signature covering the first two segments.
#[derive(Clone)]
pub struct SignedEnvelope {
    header: EnvelopeHeader,
    header_b64: String,
    payload: Vec<u8>,
    signature: Vec<u8>,
}

impl PartialEq for SignedEnvelope {
    fn eq(&self, other: &Self) -> bool {
        self.header_b64 == other.header_b64 && self.payload == other.payload && self.signature == other.signature
    }
}

impl fmt::Debug for SignedEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignedEnvelope")
            .field("typ", &self.header.typ)
            .field("alg", &self.header.alg)
            .field("kid", &self.header.kid)
            .field("payload", &String::from_utf8_lossy(&self.payload))
            .finish()
    }
}

impl SignedEnvelope {
    pub fn from_parts(header: EnvelopeHeader, payload: Vec<u8>, signature: Vec<u8>) -> Self {
        let header_b64 = b64(&header.to_canonical_json());
        SignedEnvelope {
            header,
            header_b64,
            payload,
            signature,
        }
    }

    pub fn parse(token: &str) -> Result<Self, CapError> {
        let mut parts = token.split('.');
        let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(CapError::MalformedEnvelope("expected three dot-separated segments".into()));
        };
        let header = EnvelopeHeader::from_json(&unb64(h)?)?;
        let payload = unb64(p)?;
        let signature = unb64(s)?;
        Ok(SignedEnvelope {
            header,
            header_b64: h.to_string(),
            payload,
            signature,
        })
    }

    pub fn to_token(&self) -> String {
        format!("{}.{}", self.signing_input(), b64(&self.signature))
    }

    pub fn signing_input(&self) -> String {
        format!("{}.{}", self.header_b64, b64(&self.payload))
    }

    pub fn header(&self) -> &EnvelopeHeader {
        &self.header
    }

    pub fn kind(&self) -> TokenKind {
        self.header.typ
    }

    pub fn alg(&self) -> SignatureAlg {
        self.header.alg
    }

    pub fn signer_id(&self) -> &str {
        &self.header.kid
    }

    pub fn attached_cert(&self) -> Option<&Certificate> {
        self.header.x5c.as_ref()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn signature(&self) -> &[u8] {
        &self.signature
    }

    /// Copy with the payload replaced and the signature left as is.
    pub fn with_payload(&self, payload: Vec<u8>) -> Self {
        SignedEnvelope {
            payload,
            ..self.clone()
        }
    }

    /// Copy with the signature replaced.
    pub fn with_signature(&self, signature: Vec<u8>) -> Self {
        SignedEnvelope {
            signature,
            ..self.clone()
        }
    }

    /// Decodes the payload as `C`, checking the header type tag first.
    pub fn decode<C: TokenPayload>(&self) -> Result<C, CapError> {
        if self.header.typ != C::KIND {
            return Err(CapError::MalformedEnvelope(format!(
                "expected {} token, found {}",
                C::KIND.as_str(),
                self.header.typ.as_str()
            )));
        }
        deserialize::<C>(&self.payload)
    }
}

fn sign_inner<C: TokenPayload>(
    cap: &C,
    keys: &PrincipalKeys,
    alg: SignatureAlg,
    attach_cert: bool,
) -> Result<SignedEnvelope, CapError> {
    if keys.alg() != alg {
        return Err(CapError::KeyMismatch);
    }
    let payload = canonical_serialize(cap)?;
    let header = EnvelopeHeader {
        alg,
        kid: keys.principal_id().to_string(),
        typ: C::KIND,
        x5c: attach_cert.then(|| keys.certificate().clone()),
    };
    let mut env = SignedEnvelope::from_parts(header, payload, Vec::new());
    env.signature = keys.signing_key().sign(env.signing_input().as_bytes());
    Ok(env)
}

/// Signs `cap` with the principal's key. Fails with `KeyMismatch` when the key
/// is not of scheme `alg`.
pub fn sign<C: TokenPayload>(cap: &C, keys: &PrincipalKeys, alg: SignatureAlg) -> Result<SignedEnvelope, CapError> {
    sign_inner(cap, keys, alg, false)
}

impl SignedEnvelope {
    /// Like [`sign`], but also carries the signer's certificate in the header.
    pub fn sign_with_cert<C: TokenPayload>(cap: &C, keys: &PrincipalKeys) -> Result<SignedEnvelope, CapError> {
        sign_inner(cap, keys, keys.alg(), true)
    }
}

/// True iff the envelope was signed by the subject of `cert` under the stated algorithm.
pub fn verify(env: &SignedEnvelope, cert: &Certificate) -> bool {
    env.signer_id() == cert.subject_id()
        && cert
            .public_key()
            .verify(env.alg(), env.signing_input().as_bytes(), &env.signature)
}
