#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::{Mutex, OnceLock};

use async_trait::async_trait;
use seqcap_core::capability::{
    sign, ContextRequirement, EsoCapability, MasterCapability, PermissionEntry, PermissionSequence, PrincipalKeys,
    RootAuthority, SignatureAlg, SignedEnvelope, UnixSeconds,
};
use seqcap_core::monitor::{
    ContextOracle, ContextState, Monitor, OracleError, RevocationOracle, SessionStatus,
};

pub const NOW: UnixSeconds = 1_700_000_000;
pub const DAY: UnixSeconds = 86_400;

pub struct World {
    pub root: RootAuthority,
    pub auth: PrincipalKeys,
    pub auth_rsa: PrincipalKeys,
    pub client: PrincipalKeys,
    pub mallory: PrincipalKeys,
    pub servers: Vec<PrincipalKeys>,
}

/// One root, an AS, two clients and three resource servers `RS1..RS3`.
pub fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let root = RootAuthority::generate("owner-root", NOW - DAY, NOW + 365 * DAY).unwrap();
        let enroll = |id: &str, alg| root.enroll(id, alg, NOW - DAY, NOW + 365 * DAY).unwrap();
        World {
            auth: enroll("auth-server", SignatureAlg::EcdsaP256Sha256),
            auth_rsa: enroll("auth-server", SignatureAlg::Rsa3072Sha256),
            client: enroll("B", SignatureAlg::EcdsaP256Sha256),
            mallory: enroll("M", SignatureAlg::EcdsaP256Sha256),
            servers: (1..=3).map(|i| enroll(&format!("RS{i}"), SignatureAlg::EcdsaP256Sha256)).collect(),
            root,
        }
    })
}

pub fn monitor(i: usize) -> Monitor {
    let w = world();
    Monitor::new(w.servers[i].clone(), w.root.trust_anchor(), w.auth.certificate().clone())
}

pub fn sequence(spec: &[(&str, &str)]) -> PermissionSequence {
    PermissionSequence::new(spec.iter().map(|(rs, p)| PermissionEntry::new(*rs, *p)).collect()).unwrap()
}

pub fn three_servers() -> PermissionSequence {
    sequence(&[("RS1", "p1"), ("RS2", "p2"), ("RS3", "p3")])
}

pub fn with_context(seq: &PermissionSequence, index: usize, property: &str) -> PermissionSequence {
    let mut entries = seq.entries().to_vec();
    let rs_id = entries[index].rs_id.clone();
    entries[index] = entries[index].clone().with_context(ContextRequirement {
        property: property.into(),
        subject_id: "B".into(),
        rs_id,
    });
    PermissionSequence::new(entries).unwrap()
}

pub fn master(seq: PermissionSequence, session_id: &str) -> MasterCapability {
    MasterCapability {
        sequence: seq,
        client_id: "B".into(),
        state: 0,
        session_id: session_id.into(),
        issued_at: NOW - 60,
        expiry: NOW + DAY,
        issuer: "https://as.example/authorization".into(),
        audience: "https://rs.example/Alice/balance".into(),
        qualifiers: Default::default(),
    }
}

pub fn issue(seq: PermissionSequence, session_id: &str) -> SignedEnvelope {
    sign(&master(seq, session_id), &world().auth, SignatureAlg::EcdsaP256Sha256).unwrap()
}

/// Revocation oracle backed by a set of ended sessions.
#[derive(Default)]
pub struct Revocations {
    pub ended: Mutex<HashSet<String>>,
    pub unavailable: bool,
}

impl Revocations {
    pub fn end(&self, session_id: &str) {
        self.ended.lock().unwrap().insert(session_id.into());
    }
}

#[async_trait]
impl RevocationOracle for Revocations {
    async fn status(&self, session_id: &str) -> Result<SessionStatus, OracleError> {
        if self.unavailable {
            return Err(OracleError("down".into()));
        }
        Ok(if self.ended.lock().unwrap().contains(session_id) {
            SessionStatus::RevokedOrCompleted
        } else {
            SessionStatus::Active
        })
    }
}

/// Context oracle answering a fixed value and counting queries.
pub struct FixedContext {
    pub answer: Result<ContextState, OracleError>,
    pub queries: Mutex<usize>,
}

impl FixedContext {
    pub fn new(answer: Result<ContextState, OracleError>) -> Self {
        FixedContext {
            answer,
            queries: Mutex::new(0),
        }
    }

    pub fn active() -> Self {
        Self::new(Ok(ContextState::Active))
    }
}

#[async_trait]
impl ContextOracle for FixedContext {
    async fn query(&self, _token: &SignedEnvelope, _claims: &EsoCapability) -> Result<ContextState, OracleError> {
        *self.queries.lock().unwrap() += 1;
        self.answer.clone()
    }
}
