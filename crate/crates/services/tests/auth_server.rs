mod common;

use common::*;
use seqcap_core::capability::{bind_hash, ClientClaim, EsoCapability, MasterCapability, SignedEnvelope};
use seqcap_core::policy::EsoRegistryEntry;
use seqcap_services::auth_server::RecordStatus;
use seqcap_services::fixtures::LOGIN_CONTEXT;
use seqcap_services::resource_server::AsClient;
use seqcap_services::tls::ClientOptions;
use seqcap_services::wire::{CLIENT_ASSERTION, CLIENT_ASSERTION_TYPE, GRANT_TYPE, JWT_BEARER, X_ADMIN_TOKEN};
use seqcap_core::monitor::{RevocationOracle, SessionStatus};

fn as_client_for(d: &seqcap_services::deploy::Deployment, i: usize) -> AsClient {
    let http = d.http(&ClientOptions::default()).unwrap();
    let keys = d.rs(i).keys().clone();
    AsClient::new(http, &d.as_url, keys, d.clock.clone())
}

#[tokio::test]
async fn issues_master_and_bound_eso_token() {
    let d = deployment().await;
    let c = honest(&d);
    let t = tokens(&c, &charge_claim(&c)).await;
    assert_eq!(t.token_type, "pop");
    assert_eq!(t.expires_in, 86_400);

    let master_env = SignedEnvelope::parse(&t.access_token).unwrap();
    let m: MasterCapability = master_env.decode().unwrap();
    assert_eq!(m.client_id, "B");
    assert_eq!(m.state, 0);
    assert_eq!(m.session_id, t.session_id);
    assert_eq!(m.session_id.len(), 32);
    assert_eq!(m.expiry - m.issued_at, 86_400);
    assert_eq!(m.audience, format!("{}/Alice/balance", d.rs_urls[0]));
    assert_eq!(m.issuer, format!("{}/authorization", d.as_url));
    assert_eq!(m.qualifiers["amount"], "$10");
    assert_eq!(m.qualifiers["frequency"], "monthly");
    assert_eq!(m.sequence.len(), 1);
    assert_eq!(m.sequence.context_names(), vec![LOGIN_CONTEXT.to_string()]);

    assert_eq!(t.eso_tokens.len(), 1);
    let eso: EsoCapability = SignedEnvelope::parse(&t.eso_tokens[0]).unwrap().decode().unwrap();
    assert_eq!(eso.master_hash, bind_hash(&master_env));
    assert_eq!(eso.user_id, "Alice");
    assert_eq!(eso.scope.rs_id, "RS1");
    assert_eq!(eso.scope.permission, "read");
    assert_eq!(eso.scope.context, LOGIN_CONTEXT);
    assert_eq!(eso.scope.eso_id, format!("{}/{LOGIN_CONTEXT}", d.eso_url));
    assert_eq!(eso.issued_at, m.issued_at);

    let rec = d.auth.session(&t.session_id).unwrap();
    assert_eq!(rec.status, RecordStatus::Active);
    assert_eq!(rec.rule, "ApplicationServiceCharge");
    d.shutdown().await;
}

#[tokio::test]
async fn client_authentication_failures() {
    let d = deployment().await;
    let b = honest(&d);
    let m = mallory(&d);

    // Mallory signs a claim naming B.
    let forged = m.assertion(&charge_claim(&b)).unwrap();
    let r = b.send_assertion(&forged).await.unwrap();
    assert_eq!((r.status, r.error_code()), (401, Some("invalid_client")));

    // B's claim with its signature bytes corrupted.
    let good = b.assertion(&charge_claim(&b)).unwrap();
    let env = SignedEnvelope::parse(&good).unwrap();
    let mut sig = env.signature().to_vec();
    sig[5] ^= 1;
    let r = b.send_assertion(&env.with_signature(sig).to_token()).await.unwrap();
    assert_eq!(r.status, 401);

    let r = b.send_assertion("not-a-token").await.unwrap();
    assert_eq!(r.status, 401);

    // Authenticated but not permitted.
    let r = m.request_token(&charge_claim(&m)).await.unwrap();
    assert_eq!((r.status, r.error_code()), (403, Some("access_denied")));
    let r = b.request_token(&b.claim("Payment", "Alice", "balance", &["charge"], &[("amount", "$20")])).await.unwrap();
    assert_eq!((r.status, r.error_code()), (403, Some("access_denied")));
    assert_eq!(d.auth.session_count(), 0);
    d.shutdown().await;
}

#[tokio::test]
async fn token_endpoint_headers() {
    let d = deployment().await;
    let b = honest(&d);
    let a = b.assertion(&charge_claim(&b)).unwrap();
    let r = b
        .send_token_request(&[(GRANT_TYPE, "authorization_code"), (CLIENT_ASSERTION_TYPE, JWT_BEARER), (CLIENT_ASSERTION, &a)])
        .await
        .unwrap();
    assert_eq!((r.status, r.error_code()), (400, Some("unsupported_grant_type")));
    let r = b
        .send_token_request(&[(GRANT_TYPE, "client_credentials"), (CLIENT_ASSERTION_TYPE, "basic"), (CLIENT_ASSERTION, &a)])
        .await
        .unwrap();
    assert_eq!(r.status, 400);
    let r = b
        .send_token_request(&[(GRANT_TYPE, "client_credentials"), (CLIENT_ASSERTION_TYPE, JWT_BEARER)])
        .await
        .unwrap();
    assert_eq!(r.status, 400);
    d.shutdown().await;
}

#[tokio::test]
async fn introspection_and_completion() {
    let d = deployment().await;
    let b = honest(&d);
    let t = tokens(&b, &charge_claim(&b)).await;
    let rs1 = as_client_for(&d, 0);

    assert_eq!(rs1.status(&t.session_id).await.unwrap(), SessionStatus::Active);
    // Unknown sessions read as 404, which the RS treats as not active.
    assert_eq!(rs1.status("feedface").await.unwrap(), SessionStatus::RevokedOrCompleted);

    // RS2 is not in this session's sequence.
    let rs2 = as_client_for(&d, 1);
    assert!(rs2.complete(&t.session_id).await.is_err());
    assert_eq!(d.auth.session(&t.session_id).unwrap().status, RecordStatus::Active);

    rs1.complete(&t.session_id).await.unwrap();
    assert_eq!(rs1.status(&t.session_id).await.unwrap(), SessionStatus::RevokedOrCompleted);
    rs1.complete(&t.session_id).await.unwrap();
    assert_eq!(d.auth.session(&t.session_id).unwrap().status, RecordStatus::Completed);

    // Next month's charge has to wait for the next billing window.
    let r = b.request_token(&charge_claim(&b)).await.unwrap();
    assert_eq!((r.status, r.error_code()), (403, Some("frequency_window")));
    d.clock.advance(31 * 86_400);
    let t2 = tokens(&b, &charge_claim(&b)).await;
    assert_ne!(t2.session_id, t.session_id);
    d.shutdown().await;
}

#[tokio::test]
async fn completion_must_come_from_a_resource_server() {
    let d = deployment().await;
    let b = honest(&d);
    let t = tokens(&b, &charge_claim(&b)).await;
    // A client-signed completion notice: valid chain, but the signer is not an RS.
    let as_b = AsClient::new(d.http(&ClientOptions::default()).unwrap(), &d.as_url, d.client("B").clone(), d.clock.clone());
    let err = as_b.complete(&t.session_id).await.unwrap_err();
    assert!(err.0.contains("403"), "{err}");
    assert!(as_b.status(&t.session_id).await.is_err());
    assert_eq!(d.auth.session(&t.session_id).unwrap().status, RecordStatus::Active);
    d.shutdown().await;
}

#[tokio::test]
async fn one_active_session_per_window() {
    let d = deployment().await;
    let b = honest(&d);
    let charge = charge_claim(&b);
    tokens(&b, &charge).await;
    let r = b.request_token(&charge).await.unwrap();
    assert_eq!((r.status, r.error_code()), (403, Some("session_active")));
    // Rules without a frequency limit allow concurrent sessions.
    let s1 = tokens(&b, &statement_claim(&b)).await;
    let s2 = tokens(&b, &statement_claim(&b)).await;
    assert_ne!(s1.session_id, s2.session_id);
    d.shutdown().await;
}

#[tokio::test]
async fn revocation_by_owner() {
    let d = deployment().await;
    let b = honest(&d);
    let t = tokens(&b, &charge_claim(&b)).await;
    let http = d.http(&ClientOptions::default()).unwrap();
    let url = format!("{}/revoke", d.as_url);
    let body = serde_json::json!({"session_id": t.session_id});
    let r = http.post(&url).json(&body).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = http.post(&url).header(X_ADMIN_TOKEN, &d.admin_token).json(&body).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(d.auth.session(&t.session_id).unwrap().status, RecordStatus::Revoked);
    // Revocation is final; completion does not reopen or change it.
    as_client_for(&d, 0).complete(&t.session_id).await.unwrap();
    assert_eq!(d.auth.session(&t.session_id).unwrap().status, RecordStatus::Revoked);
    d.shutdown().await;
}

#[tokio::test]
async fn eso_registry_admin() {
    let d = deployment().await;
    let http = d.http(&ClientOptions::default()).unwrap();
    let url = format!("{}/eso-registry", d.as_url);
    let entry = EsoRegistryEntry {
        context_name: "at_home".into(),
        eso_url: format!("{}/at_home", d.eso_url),
        description: "user is at home".into(),
    };
    let r = http.post(&url).json(&entry).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = http.post(&url).header(X_ADMIN_TOKEN, &d.admin_token).json(&entry).send().await.unwrap();
    assert_eq!(r.status(), 201);
    let r = http.post(&url).header(X_ADMIN_TOKEN, &d.admin_token).json(&entry).send().await.unwrap();
    assert_eq!(r.status(), 409);
    let listed: Vec<EsoRegistryEntry> = http.get(&url).send().await.unwrap().json().await.unwrap();
    assert!(listed.contains(&entry));
    assert_eq!(listed.len(), 2);
    d.shutdown().await;
}

#[tokio::test]
async fn dangling_context_is_a_server_error() {
    let mut rules = seqcap_services::fixtures::policies(1);
    rules[0].environment_context.push("never_registered".into());
    let opts = seqcap_services::deploy::DeploymentOptions {
        rs_count: 1,
        policies: Some(rules),
        ..Default::default()
    };
    let d = seqcap_services::deploy::Deployment::start(opts).await.unwrap();
    let b = honest(&d);
    let r = b.request_token(&charge_claim(&b)).await.unwrap();
    assert_eq!((r.status, r.error_code()), (500, Some("dangling_context")));
    assert_eq!(d.auth.session_count(), 0);
    d.shutdown().await;
}

#[tokio::test]
async fn plain_mode_issues_master_only() {
    let opts = seqcap_services::deploy::DeploymentOptions {
        mode: seqcap_services::config::Mode::Plain,
        ..Default::default()
    };
    let d = seqcap_services::deploy::Deployment::start(opts).await.unwrap();
    let b = honest(&d);
    let claim: ClientClaim = charge_claim(&b);
    let t = tokens(&b, &claim).await;
    assert!(t.eso_tokens.is_empty());
    assert_eq!(d.auth.session_count(), 0);
    tokens(&b, &claim).await;
    d.shutdown().await;
}
