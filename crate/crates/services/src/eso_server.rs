//! Environmental situation oracle: answers whether a named context holds for a user.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::Value;

use seqcap_core::capability::{verify, Certificate, EsoCapability, TokenKind, TrustAnchor, UnixSeconds};

use crate::auth_server::ESO_PERMISSION;
use crate::clock::Clock;
use crate::http::{check_admin, header, ApiError};
use crate::wire::{
    context_body, eso_query_message, parse_kind, FRESHNESS_SECS, X_ESO_TOKEN, X_RS_CERT, X_RS_SIGNATURE,
    X_RS_TIMESTAMP,
};

pub const DAY: i64 = 86_400;

/// Predicate behind one context name.
#[derive(Debug)]
pub enum SituationEvaluator {
    /// True iff the user's last login is at most `window_secs` old.
    LoginHistory {
        window_secs: i64,
        last_login: RwLock<HashMap<String, UnixSeconds>>,
    },
    /// A switch flipped by an operator.
    Static(AtomicBool),
}

impl SituationEvaluator {
    pub fn login_history(window_secs: i64, logins: impl IntoIterator<Item = (String, UnixSeconds)>) -> Self {
        SituationEvaluator::LoginHistory {
            window_secs,
            last_login: RwLock::new(logins.into_iter().collect()),
        }
    }

    pub fn fixed(active: bool) -> Self {
        SituationEvaluator::Static(AtomicBool::new(active))
    }

    pub fn evaluate(&self, user_id: &str, now: UnixSeconds) -> bool {
        match self {
            SituationEvaluator::LoginHistory {
                window_secs,
                last_login,
            } => last_login
                .read()
                .expect("login history poisoned")
                .get(user_id)
                .is_some_and(|at| *at <= now && now - at <= *window_secs),
            SituationEvaluator::Static(flag) => flag.load(Ordering::SeqCst),
        }
    }

    pub fn record_login(&self, user_id: &str, at: UnixSeconds) -> bool {
        match self {
            SituationEvaluator::LoginHistory { last_login, .. } => {
                last_login.write().expect("login history poisoned").insert(user_id.to_string(), at);
                true
            }
            SituationEvaluator::Static(_) => false,
        }
    }

    pub fn set(&self, active: bool) -> bool {
        match self {
            SituationEvaluator::Static(flag) => {
                flag.store(active, Ordering::SeqCst);
                true
            }
            SituationEvaluator::LoginHistory { .. } => false,
        }
    }
}

pub struct EsoSettings {
    pub trust: TrustAnchor,
    /// Certificate of the AS that issues ESO capabilities.
    pub authority: Certificate,
    /// Base URL; a context `c` is served at `{public_url}/c` and that URL is its ESO id.
    pub public_url: String,
    pub admin_token: String,
    pub evaluators: BTreeMap<String, SituationEvaluator>,
}

struct EsoState {
    trust: TrustAnchor,
    authority: Certificate,
    base: String,
    admin_token: String,
    evaluators: BTreeMap<String, SituationEvaluator>,
    clock: Clock,
}

#[derive(Clone)]
pub struct EsoServer {
    state: Arc<EsoState>,
}

impl EsoServer {
    pub fn new(settings: EsoSettings, clock: Clock) -> Self {
        EsoServer {
            state: Arc::new(EsoState {
                trust: settings.trust,
                authority: settings.authority,
                base: settings.public_url.trim_end_matches('/').to_string(),
                admin_token: settings.admin_token,
                evaluators: settings.evaluators,
                clock,
            }),
        }
    }

    /// The ESO id of `context` at this server.
    pub fn context_url(&self, context: &str) -> String {
        format!("{}/{context}", self.state.base)
    }

    pub fn evaluator(&self, context: &str) -> Option<&SituationEvaluator> {
        self.state.evaluators.get(context)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/{context}", post(get_state))
            .route("/admin/{context}", post(admin_update))
            .with_state(self.state.clone())
    }
}

fn unb64(s: &str) -> Option<Vec<u8>> {
    base64::engine::general_purpose::URL_SAFE_NO_PAD.decode(s).ok()
}

impl EsoState {
    fn check(&self, context: &str, headers: &HeaderMap, now: UnixSeconds) -> Result<EsoCapability, ApiError> {
        let unauthorized = |d: &str| ApiError::unauthorized("unauthenticated").with_detail(d);
        let token = header(headers, X_ESO_TOKEN).ok_or_else(|| unauthorized("missing ESO token"))?;
        let env = parse_kind(token, TokenKind::Eso).map_err(|_| unauthorized("unreadable ESO token"))?;
        if !verify(&env, &self.authority) {
            return Err(unauthorized("ESO token not signed by the authorization server"));
        }
        let cap = env.decode::<EsoCapability>().map_err(|_| unauthorized("unreadable ESO token"))?;

        let cert = header(headers, X_RS_CERT)
            .and_then(unb64)
            .and_then(|der| Certificate::from_der(&der).ok())
            .ok_or_else(|| unauthorized("missing resource server certificate"))?;
        let sig = header(headers, X_RS_SIGNATURE)
            .and_then(unb64)
            .ok_or_else(|| unauthorized("missing resource server signature"))?;
        let ts: UnixSeconds = header(headers, X_RS_TIMESTAMP)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| unauthorized("missing timestamp"))?;
        if self.trust.validate(&cert, now).is_err() {
            return Err(unauthorized("untrusted resource server certificate"));
        }
        let key = cert.public_key();
        if !key.verify(key.alg(), &eso_query_message(token, ts), &sig) {
            return Err(unauthorized("bad resource server signature"));
        }
        if (now - ts).abs() > FRESHNESS_SECS {
            return Err(unauthorized("stale query"));
        }
        if cert.subject_id() != cap.scope.rs_id {
            return Err(unauthorized("querying server is not the token's subject"));
        }

        if now >= cap.expiry {
            return Err(ApiError::forbidden("expired"));
        }
        let in_scope = cap.scope.context == context
            && cap.scope.eso_id == format!("{}/{context}", self.base)
            && cap.scope.permission == ESO_PERMISSION;
        if !in_scope {
            return Err(ApiError::forbidden("out_of_scope"));
        }
        Ok(cap)
    }
}

async fn get_state(
    State(s): State<Arc<EsoState>>,
    Path(context): Path<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    let now = s.clock.now();
    let cap = s.check(&context, &headers, now)?;
    let evaluator = s
        .evaluators
        .get(&context)
        .ok_or_else(|| ApiError::not_found("unknown_context"))?;
    Ok(Json(context_body(evaluator.evaluate(&cap.user_id, now))))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AdminUpdate {
    Switch { active: bool },
    Login { user_id: String, last_login: UnixSeconds },
}

async fn admin_update(
    State(s): State<Arc<EsoState>>,
    Path(context): Path<String>,
    headers: HeaderMap,
    Json(update): Json<AdminUpdate>,
) -> Result<StatusCode, ApiError> {
    check_admin(&headers, &s.admin_token)?;
    let evaluator = s
        .evaluators
        .get(&context)
        .ok_or_else(|| ApiError::not_found("unknown_context"))?;
    let applied = match update {
        AdminUpdate::Switch { active } => evaluator.set(active),
        AdminUpdate::Login { user_id, last_login } => evaluator.record_login(&user_id, last_login),
    };
    if applied {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::bad_request("unsupported_update"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn login_window() {
        let now = 1_000 * DAY;
        let e = SituationEvaluator::login_history(
            60 * DAY,
            [("Alice".to_string(), now - 5 * DAY), ("Bob".to_string(), now - 90 * DAY)],
        );
        assert!(e.evaluate("Alice", now));
        assert!(!e.evaluate("Bob", now));
        assert!(!e.evaluate("Carol", now));
        assert!(e.evaluate("Bob", now - 30 * DAY));
        assert!(e.record_login("Bob", now));
        assert!(e.evaluate("Bob", now));
        assert!(!e.set(false));
    }

    #[test]
    fn static_switch() {
        let e = SituationEvaluator::fixed(true);
        assert!(e.evaluate("anyone", 0));
        assert!(e.set(false));
        assert!(!e.evaluate("anyone", 0));
        assert!(!e.record_login("x", 0));
    }
}
