mod common;

use common::*;
use seqcap_core::capability::{
    bind_hash, sign, EsoCapability, EsoScope, SignatureAlg, SignedEnvelope, StateCapability,
};
use seqcap_core::monitor::{
    verify_pop, AccessRequest, ChallengeStore, ContextState, Decision, DenyReason, OracleError, PopProof,
    SessionCounter,
};

fn request(perm: &str, presented: &SignedEnvelope) -> AccessRequest {
    AccessRequest {
        client_id: "B".into(),
        permission: perm.into(),
        presented: Some(presented.clone()),
        eso_capabilities: Vec::new(),
        pop_proof: None,
    }
}

async fn run(rs: usize, req: &AccessRequest, counter: &SessionCounter) -> (Decision, SessionCounter) {
    monitor(rs)
        .authorize(req, counter, NOW, &Revocations::default(), &FixedContext::active())
        .await
}

fn successor(d: &Decision) -> SignedEnvelope {
    match d {
        Decision::Invoke { successor, .. } => successor.clone(),
        other => panic!("expected Invoke, got {other:?}"),
    }
}

fn eso(master: &SignedEnvelope, rs_id: &str, context: &str) -> SignedEnvelope {
    let cap = EsoCapability {
        master_hash: bind_hash(master),
        scope: EsoScope {
            rs_id: rs_id.into(),
            eso_id: format!("https://eso.example/{context}"),
            permission: "read".into(),
            context: context.into(),
        },
        user_id: "Alice".into(),
        issuer: "https://as.example/authorization".into(),
        issued_at: NOW - 60,
        expiry: NOW + DAY,
    };
    sign(&cap, &world().auth, SignatureAlg::EcdsaP256Sha256).unwrap()
}

#[tokio::test]
async fn three_server_first_step_then_replay() {
    let t0 = issue(three_servers(), "s1");
    let c0 = SessionCounter::new("s1");
    let (d, c1) = run(0, &request("p1", &t0), &c0).await;
    let t1 = successor(&d);
    assert_eq!(c1.rs_value, 1);
    let cap = t1.decode::<StateCapability>().unwrap();
    assert_eq!(cap.state, 1);
    assert_eq!(cap.master.to_token(), t0.to_token(), "master embedded verbatim");
    assert_eq!(cap.issuer_id(), "RS1");

    let (d, c2) = run(0, &request("p1", &t0), &c1).await;
    assert_eq!(d, Decision::Deny(DenyReason::OutOfOrder));
    assert_eq!(c2, c1);
}

#[tokio::test]
async fn three_server_full_run() {
    let t0 = issue(three_servers(), "s2");
    let (d, _) = run(0, &request("p1", &t0), &SessionCounter::new("s2")).await;
    let t1 = successor(&d);
    let (d, c) = run(1, &request("p2", &t1), &SessionCounter::new("s2")).await;
    let t2 = successor(&d);
    assert_eq!(c.rs_value, 2);
    let start = SessionCounter::new("s2");
    let (d, c) = run(2, &request("p3", &t2), &start).await;
    let Decision::InvokeLast { invoked } = d else {
        panic!("expected InvokeLast, got {d:?}");
    };
    assert_eq!(invoked.index, 2);
    assert_eq!(c, start, "counter unchanged on the last step");
}

#[tokio::test]
async fn wrong_server_or_slot() {
    let t0 = issue(three_servers(), "s3");
    let (d, _) = run(0, &request("p1", &t0), &SessionCounter::new("s3")).await;
    let t1 = successor(&d);
    // RS2 never hosts p3.
    let (d, _) = run(1, &request("p3", &t1), &SessionCounter::new("s3")).await;
    assert_eq!(d, Decision::Deny(DenyReason::WrongRS));
    // RS3 hosts p3, but slot 1 belongs to RS2.
    let (d, _) = run(2, &request("p3", &t1), &SessionCounter::new("s3")).await;
    assert_eq!(d, Decision::Deny(DenyReason::OutOfOrder));
    // Skipping ahead with the master.
    let (d, _) = run(1, &request("p2", &t0), &SessionCounter::new("s3")).await;
    assert_eq!(d, Decision::Deny(DenyReason::OutOfOrder));
}

#[tokio::test]
async fn single_entry_is_last() {
    let t0 = issue(sequence(&[("RS1", "p1")]), "s4");
    let c = SessionCounter::new("s4");
    let (d, after) = run(0, &request("p1", &t0), &c).await;
    assert!(matches!(d, Decision::InvokeLast { .. }), "{d:?}");
    assert_eq!(after, c);
}

#[tokio::test]
async fn token_level_denials() {
    let w = world();
    let t0 = issue(three_servers(), "s5");
    let c = SessionCounter::new("s5");

    let mut none = request("p1", &t0);
    none.presented = None;
    assert_eq!(run(0, &none, &c).await.0, Decision::Deny(DenyReason::NoCapability));

    let mut payload = t0.payload().to_vec();
    let last = payload.len() - 3;
    payload[last] ^= 1;
    assert_eq!(
        run(0, &request("p1", &t0.with_payload(payload)), &c).await.0,
        Decision::Deny(DenyReason::BadSignature)
    );

    let self_issued = sign(&master(three_servers(), "s5"), &w.client, SignatureAlg::EcdsaP256Sha256).unwrap();
    assert_eq!(
        run(0, &request("p1", &self_issued), &c).await.0,
        Decision::Deny(DenyReason::BadSignature)
    );

    let mut stolen = request("p1", &t0);
    stolen.client_id = "M".into();
    assert_eq!(run(0, &stolen, &c).await.0, Decision::Deny(DenyReason::WrongClient));

    let mut old = master(three_servers(), "s5");
    old.expiry = NOW - 1;
    old.issued_at = NOW - DAY;
    let expired = sign(&old, &w.auth, SignatureAlg::EcdsaP256Sha256).unwrap();
    assert_eq!(run(0, &request("p1", &expired), &c).await.0, Decision::Deny(DenyReason::Expired));

    let revoked = Revocations::default();
    revoked.end("s5");
    let d = monitor(0)
        .authorize(&request("p1", &t0), &c, NOW, &revoked, &FixedContext::active())
        .await
        .0;
    assert_eq!(d, Decision::Deny(DenyReason::Revoked));
    let down = Revocations {
        unavailable: true,
        ..Default::default()
    };
    let d = monitor(0)
        .authorize(&request("p1", &t0), &c, NOW, &down, &FixedContext::active())
        .await
        .0;
    assert_eq!(d, Decision::Deny(DenyReason::Revoked));
}

#[tokio::test]
async fn state_capability_must_come_from_the_previous_server() {
    let w = world();
    let t0 = issue(three_servers(), "s6");
    // RS3 mints a state-1 capability it had no right to mint.
    let cap = StateCapability {
        master: t0.clone(),
        state: 1,
        issuer_cert: w.servers[2].certificate().clone(),
        expiry: NOW + DAY,
    };
    let forged = sign(&cap, &w.servers[2], SignatureAlg::EcdsaP256Sha256).unwrap();
    let (d, _) = run(1, &request("p2", &forged), &SessionCounter::new("s6")).await;
    assert_eq!(d, Decision::Deny(DenyReason::BadSignature));
}

#[tokio::test]
async fn contexts_are_checked_through_bound_eso_tokens() {
    let seq = with_context(&three_servers(), 0, "used_within_two_months");
    let t0 = issue(seq.clone(), "s7");
    let c = SessionCounter::new("s7");
    let rev = Revocations::default();

    let missing = request("p1", &t0);
    let d = monitor(0).authorize(&missing, &c, NOW, &rev, &FixedContext::active()).await.0;
    assert_eq!(d, Decision::Deny(DenyReason::ContextInactive));

    let mut ok = request("p1", &t0);
    ok.eso_capabilities = vec![eso(&t0, "RS1", "used_within_two_months")];
    let inactive = FixedContext::new(Ok(ContextState::Inactive));
    let (d, after) = monitor(0).authorize(&ok, &c, NOW, &rev, &inactive).await;
    assert_eq!(d, Decision::Deny(DenyReason::ContextInactive));
    assert_eq!(after, c);
    let down = FixedContext::new(Err(OracleError("timeout".into())));
    assert_eq!(monitor(0).authorize(&ok, &c, NOW, &rev, &down).await.0, Decision::Deny(DenyReason::ContextInactive));

    let active = FixedContext::active();
    let (d, _) = monitor(0).authorize(&ok, &c, NOW, &rev, &active).await;
    assert!(matches!(d, Decision::Invoke { .. }), "{d:?}");
    assert_eq!(*active.queries.lock().unwrap(), 1);

    // ESO token bound to another session's master.
    let other = issue(seq, "s7-other");
    let mut swapped = request("p1", &t0);
    swapped.eso_capabilities = vec![eso(&other, "RS1", "used_within_two_months")];
    let d = monitor(0).authorize(&swapped, &c, NOW, &rev, &FixedContext::active()).await.0;
    assert_eq!(d, Decision::Deny(DenyReason::BindingFailure));

    // Contexts are not queried when the token checks already fail.
    let counting = FixedContext::active();
    let mut wrong_client = ok.clone();
    wrong_client.client_id = "M".into();
    monitor(0).authorize(&wrong_client, &c, NOW, &rev, &counting).await;
    assert_eq!(*counting.queries.lock().unwrap(), 0);
}

#[test]
fn pop_binds_client_nonce_and_token() {
    let w = world();
    let t0 = issue(three_servers(), "s8");
    let store = ChallengeStore::default();
    let nonce = store.issue(NOW);

    let mut req = request("p1", &t0);
    req.pop_proof = Some(PopProof::create(&w.client, &nonce, &t0).unwrap());
    assert!(verify_pop(&req, w.client.certificate(), &nonce));
    assert!(store.consume(&nonce, NOW + 1));
    assert!(!store.consume(&nonce, NOW + 2), "challenge is single-use");

    // Thief proves possession of their own key only.
    let mut stolen = req.clone();
    stolen.pop_proof = Some(PopProof::create(&w.mallory, &nonce, &t0).unwrap());
    assert!(!verify_pop(&stolen, w.mallory.certificate(), &nonce));
    assert!(!verify_pop(&stolen, w.client.certificate(), &nonce));

    let other_nonce = store.issue(NOW);
    assert!(!verify_pop(&req, w.client.certificate(), &other_nonce));

    let other_token = issue(three_servers(), "s8-other");
    let mut moved = req.clone();
    moved.presented = Some(other_token);
    assert!(!verify_pop(&moved, w.client.certificate(), &nonce));

    let mut missing = req.clone();
    missing.pop_proof = None;
    assert!(!verify_pop(&missing, w.client.certificate(), &nonce));
}

#[test]
fn challenges_expire() {
    let store = ChallengeStore::default();
    let nonce = store.issue(NOW);
    assert!(!store.consume(&nonce, NOW + 61));
    assert!(!store.consume(&[0u8; 16], NOW));
    assert!(!store.consume(&[0u8; 3], NOW));
    store.issue(NOW);
    store.issue(NOW + 120);
    assert_eq!(store.outstanding(), 1, "stale nonces are swept on issue");
}

#[test]
fn deny_codes_round_trip() {
    for r in DenyReason::ALL {
        assert_eq!(DenyReason::from_code(r.code()), Some(r));
        assert!(matches!(r.http_status(), 401 | 403));
    }
    assert_eq!(DenyReason::PopFailure.http_status(), 401);
    assert_eq!(DenyReason::OutOfOrder.http_status(), 403);
}
