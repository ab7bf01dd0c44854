//! Capability properties shared by the core tests and the acceptance suite.

use std::sync::OnceLock;

use proptest::prelude::*;
use seqcap_core::capability::{
    bind_hash, canonical_serialize, check_binding, deserialize, sign, verify, AttributeMap, ContextRequirement,
    Digest, EsoCapability, EsoScope, MasterCapability, PermissionEntry, PermissionSequence, PrincipalKeys,
    RootAuthority, SignatureAlg, SignedEnvelope, StateCapability,
};
use serde_json::json;

const T0: i64 = 1_700_000_000;

pub struct Keys {
    pub ecdsa: PrincipalKeys,
    pub rsa: PrincipalKeys,
    pub rs: PrincipalKeys,
}

pub fn keys() -> &'static Keys {
    static K: OnceLock<Keys> = OnceLock::new();
    K.get_or_init(|| {
        let root = RootAuthority::generate("prop-root", T0 - 86_400, T0 + 86_400 * 365).unwrap();
        let enroll = |id: &str, alg| root.enroll(id, alg, T0 - 86_400, T0 + 86_400 * 365).unwrap();
        Keys {
            ecdsa: enroll("auth-server", SignatureAlg::EcdsaP256Sha256),
            rsa: enroll("auth-server", SignatureAlg::Rsa3072Sha256),
            rs: enroll("RS1", SignatureAlg::EcdsaP256Sha256),
        }
    })
}

fn ident() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_./:-]{1,12}"
}

fn entry() -> impl Strategy<Value = PermissionEntry> {
    (ident(), ident(), prop::collection::btree_set("[a-z_]{1,8}", 0..3), ident()).prop_map(
        |(rs_id, permission, contexts, subject)| PermissionEntry {
            contexts: contexts
                .into_iter()
                .map(|property| ContextRequirement {
                    property,
                    subject_id: subject.clone(),
                    rs_id: rs_id.clone(),
                })
                .collect(),
            rs_id,
            permission,
        },
    )
}

fn qualifiers() -> impl Strategy<Value = AttributeMap> {
    prop::collection::btree_map(
        "[a-z]{1,6}",
        prop_oneof![
            "[ -~]{0,8}".prop_map(|s| json!(s)),
            any::<i32>().prop_map(|n| json!(n)),
            prop::collection::vec("[a-z]{0,4}", 0..3).prop_map(|v| json!(v)),
        ],
        0..3,
    )
}

pub fn master() -> impl Strategy<Value = MasterCapability> {
    (
        prop::collection::vec(entry(), 1..5),
        ident(),
        "[0-9a-f]{8,32}",
        0i64..1_000_000,
        1i64..10_000_000,
        ident(),
        ident(),
        qualifiers(),
    )
        .prop_map(|(entries, client_id, session_id, iat, ttl, issuer, audience, qualifiers)| MasterCapability {
            sequence: PermissionSequence::new(entries).unwrap(),
            client_id,
            state: 0,
            session_id,
            issued_at: T0 + iat,
            expiry: T0 + iat + ttl,
            issuer,
            audience,
            qualifiers,
        })
}

/// A signing scheme, RSA in roughly one case of ten.
pub fn alg() -> impl Strategy<Value = SignatureAlg> {
    prop_oneof![9 => Just(SignatureAlg::EcdsaP256Sha256), 1 => Just(SignatureAlg::Rsa3072Sha256)]
}

pub fn signer(alg: SignatureAlg) -> &'static PrincipalKeys {
    match alg {
        SignatureAlg::EcdsaP256Sha256 => &keys().ecdsa,
        SignatureAlg::Rsa3072Sha256 => &keys().rsa,
    }
}

fn eso_for(master_env: &SignedEnvelope) -> EsoCapability {
    EsoCapability {
        master_hash: bind_hash(master_env),
        scope: EsoScope {
            rs_id: "RS1".into(),
            eso_id: "https://eso.example/ctx".into(),
            permission: "read".into(),
            context: "ctx".into(),
        },
        user_id: "Alice".into(),
        issuer: "auth-server".into(),
        issued_at: T0,
        expiry: T0 + 60,
    }
}

/// Serialization and envelope round trips for a master and a derived state capability.
pub fn round_trip(m: &MasterCapability, alg: SignatureAlg) -> Result<(), TestCaseError> {
    let bytes = canonical_serialize(m).unwrap();
    prop_assert_eq!(&canonical_serialize(&m.clone()).unwrap(), &bytes);
    prop_assert_eq!(&deserialize::<MasterCapability>(&bytes).unwrap(), m);

    let env = sign(m, signer(alg), alg).unwrap();
    let parsed = SignedEnvelope::parse(&env.to_token()).unwrap();
    prop_assert_eq!(&parsed, &env);
    prop_assert!(verify(&parsed, signer(alg).certificate()));
    prop_assert_eq!(&parsed.decode::<MasterCapability>().unwrap(), m);

    if m.sequence.len() > 1 {
        let cap = StateCapability {
            master: env.clone(),
            state: m.sequence.last_index() as u32,
            issuer_cert: keys().rs.certificate().clone(),
            expiry: m.expiry,
        };
        let state_env = sign(&cap, &keys().rs, SignatureAlg::EcdsaP256Sha256).unwrap();
        let back = SignedEnvelope::parse(&state_env.to_token()).unwrap().decode::<StateCapability>().unwrap();
        prop_assert_eq!(back, cap);
    }
    Ok(())
}

/// Any single-byte change to payload or signature, or any character change in
/// the token string, is detected.
pub fn tamper(
    m: &MasterCapability,
    alg: SignatureAlg,
    in_signature: bool,
    pos: prop::sample::Index,
    xor: u8,
) -> Result<(), TestCaseError> {
    let keys = signer(alg);
    let env = sign(m, keys, alg).unwrap();
    let tampered = if in_signature {
        let mut sig = env.signature().to_vec();
        let i = pos.index(sig.len());
        sig[i] ^= xor;
        env.with_signature(sig)
    } else {
        let mut payload = env.payload().to_vec();
        let i = pos.index(payload.len());
        payload[i] ^= xor;
        env.with_payload(payload)
    };
    prop_assert!(!verify(&tampered, keys.certificate()));

    let token = env.to_token();
    let mut chars: Vec<char> = token.chars().collect();
    let i = pos.index(chars.len());
    let replacement = if chars[i] == 'A' { 'B' } else { 'A' };
    chars[i] = replacement;
    let edited: String = chars.into_iter().collect();
    if let Ok(reparsed) = SignedEnvelope::parse(&edited) {
        prop_assert!(!verify(&reparsed, keys.certificate()), "edited token still verifies");
    }
    Ok(())
}

/// An ESO capability binds to its own master only.
pub fn binding(m1: &MasterCapability, m2: &MasterCapability, alg: SignatureAlg) -> Result<(), TestCaseError> {
    let e1 = sign(m1, signer(alg), alg).unwrap();
    let e2 = sign(m2, signer(alg), alg).unwrap();
    let eso = eso_for(&e1);
    prop_assert!(check_binding(&eso, &e1));
    let eso_env = sign(&eso, signer(alg), alg).unwrap();
    let decoded = SignedEnvelope::parse(&eso_env.to_token()).unwrap().decode::<EsoCapability>().unwrap();
    prop_assert_eq!(decoded.master_hash, bind_hash(&e1));
    if e1 != e2 {
        prop_assert!(!check_binding(&eso, &e2));
    }
    prop_assert_ne!(bind_hash(&e1), Digest([0; 32]));
    Ok(())
}
