//! Client side of the protocol: token requests and PoP-protected resource requests.

use base64::Engine;
use serde::de::DeserializeOwned;
use serde_json::Value;

use seqcap_core::capability::{AttributeMap, CapError, ClientClaim, PrincipalKeys, SignedEnvelope};
use seqcap_core::monitor::PopProof;

use crate::wire::{
    ActionRequest, ActionResponse, ChallengeResponse, ErrorBody, TokenResponse, CLIENT_ASSERTION,
    CLIENT_ASSERTION_TYPE, CLIENT_CREDENTIALS, GRANT_TYPE, JWT_BEARER, X_ESO_TOKEN, X_OAUTH_TOKEN, X_POP_SIGNATURE,
    X_TIMING,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("token: {0}")]
    Token(#[from] CapError),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

/// A server answer: the decoded body on 2xx, the error body otherwise.
#[derive(Debug, Clone)]
pub struct Reply<T> {
    pub status: u16,
    pub body: Result<T, ErrorBody>,
    pub timing: Option<String>,
}

impl<T> Reply<T> {
    pub fn ok(&self) -> Option<&T> {
        self.body.as_ref().ok()
    }

    pub fn error_code(&self) -> Option<&str> {
        self.body.as_ref().err().map(|e| e.error.as_str())
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// `"200"` on success, otherwise `"<status> <error code>"`.
    pub fn outcome(&self) -> String {
        match &self.body {
            Ok(_) => self.status.to_string(),
            Err(e) => format!("{} {}", self.status, e.error),
        }
    }
}

async fn read_reply<T: DeserializeOwned>(resp: reqwest::Response) -> Result<Reply<T>, ClientError> {
    let status = resp.status().as_u16();
    let timing = resp
        .headers()
        .get(X_TIMING)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let bytes = resp.bytes().await?;
    let body = if (200..300).contains(&status) {
        Ok(serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(e.to_string()))?)
    } else {
        Err(serde_json::from_slice::<ErrorBody>(&bytes).unwrap_or(ErrorBody {
            error: String::from_utf8_lossy(&bytes).into_owned(),
            detail: None,
        }))
    };
    Ok(Reply { status, body, timing })
}

/// Headers of one resource request, each optional so callers can omit or forge them.
#[derive(Debug, Clone, Default)]
pub struct AccessParts {
    pub token: Option<String>,
    pub eso_tokens: Vec<String>,
    pub pop: Option<String>,
}

/// A principal talking to the authorization and resource servers.
#[derive(Clone)]
pub struct ProtocolClient {
    keys: PrincipalKeys,
    http: reqwest::Client,
    as_url: String,
    timing: bool,
}

impl ProtocolClient {
    pub fn new(keys: PrincipalKeys, http: reqwest::Client, as_url: &str) -> Self {
        ProtocolClient {
            keys,
            http,
            as_url: as_url.trim_end_matches('/').to_string(),
            timing: false,
        }
    }

    /// Ask servers for a per-phase breakdown on every request.
    pub fn with_timing(mut self) -> Self {
        self.timing = true;
        self
    }

    pub fn keys(&self) -> &PrincipalKeys {
        &self.keys
    }

    pub fn http(&self) -> &reqwest::Client {
        &self.http
    }

    /// A claim for `actions` on `owner`'s `resource`, with extra scope qualifiers such as `amount`.
    pub fn claim(
        &self,
        application: &str,
        owner: &str,
        resource: &str,
        actions: &[&str],
        qualifiers: &[(&str, &str)],
    ) -> ClientClaim {
        let mut scope = AttributeMap::new();
        scope.insert("actions".into(), Value::from(actions.to_vec()));
        for (k, v) in qualifiers {
            scope.insert((*k).to_string(), Value::from(*v));
        }
        let mut object = AttributeMap::new();
        object.insert("resourceType".into(), Value::from(vec![resource]));
        object.insert("resourceID".into(), Value::from(owner));
        ClientClaim {
            client_id: self.keys.principal_id().to_string(),
            issuer: format!("Application{}", self.keys.principal_id()),
            application: application.to_string(),
            target_rs: None,
            object_attributes: object,
            structured_scope: scope,
        }
    }

    /// The claim signed with this client's key, carrying its certificate.
    pub fn assertion(&self, claim: &ClientClaim) -> Result<String, ClientError> {
        Ok(SignedEnvelope::sign_with_cert(claim, &self.keys)?.to_token())
    }

    pub async fn request_token(&self, claim: &ClientClaim) -> Result<Reply<TokenResponse>, ClientError> {
        self.send_assertion(&self.assertion(claim)?).await
    }

    pub async fn send_assertion(&self, assertion: &str) -> Result<Reply<TokenResponse>, ClientError> {
        self.send_token_request(&[
            (GRANT_TYPE, CLIENT_CREDENTIALS),
            (CLIENT_ASSERTION_TYPE, JWT_BEARER),
            (CLIENT_ASSERTION, assertion),
        ])
        .await
    }

    /// Token endpoint call with exactly the given headers.
    pub async fn send_token_request(&self, headers: &[(&str, &str)]) -> Result<Reply<TokenResponse>, ClientError> {
        let mut req = self.http.post(format!("{}/authorization", self.as_url));
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        if self.timing {
            req = req.header(X_TIMING, "1");
        }
        read_reply(req.send().await?).await
    }

    pub async fn challenge(&self, rs_url: &str) -> Result<Vec<u8>, ClientError> {
        let resp = self.http.get(format!("{}/challenge", rs_url.trim_end_matches('/'))).send().await?;
        if !resp.status().is_success() {
            return Err(ClientError::Protocol(format!("challenge failed with {}", resp.status())));
        }
        let body: ChallengeResponse = resp.json().await?;
        base64::engine::general_purpose::URL_SAFE_NO_PAD
            .decode(body.nonce)
            .map_err(|e| ClientError::Protocol(e.to_string()))
    }

    /// Proof of possession of this client's key for `token` under `nonce`.
    pub fn pop(&self, nonce: &[u8], token: &str) -> Result<String, ClientError> {
        let presented = SignedEnvelope::parse(token)?;
        Ok(PopProof::create(&self.keys, nonce, &presented)?.to_token())
    }

    /// Fetches a challenge, proves possession and invokes `action` with `token`.
    pub async fn access(
        &self,
        rs_url: &str,
        owner: &str,
        resource: &str,
        action: &str,
        token: &str,
        eso_tokens: &[String],
    ) -> Result<Reply<ActionResponse>, ClientError> {
        let nonce = self.challenge(rs_url).await?;
        let parts = AccessParts {
            token: Some(token.to_string()),
            eso_tokens: eso_tokens.to_vec(),
            pop: Some(self.pop(&nonce, token)?),
        };
        self.send_access(rs_url, owner, resource, action, &parts).await
    }

    pub async fn send_access(
        &self,
        rs_url: &str,
        owner: &str,
        resource: &str,
        action: &str,
        parts: &AccessParts,
    ) -> Result<Reply<ActionResponse>, ClientError> {
        let mut req = self
            .http
            .post(format!("{}/{owner}/{resource}", rs_url.trim_end_matches('/')))
            .json(&ActionRequest {
                action: action.to_string(),
            });
        if let Some(t) = &parts.token {
            req = req.header(X_OAUTH_TOKEN, t);
        }
        if !parts.eso_tokens.is_empty() {
            req = req.header(X_ESO_TOKEN, parts.eso_tokens.join(","));
        }
        if let Some(p) = &parts.pop {
            req = req.header(X_POP_SIGNATURE, p);
        }
        if self.timing {
            req = req.header(X_TIMING, "1");
        }
        read_reply(req.send().await?).await
    }
}
