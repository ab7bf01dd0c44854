//! Signing keys, certificates issued by the resource-owner root, and the two
//! supported signature schemes.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use p256::ecdsa::signature::Signer;
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};

use aws_lc_rs::encoding::{AsDer, Pkcs8V1Der, PublicKeyX509Der};
use aws_lc_rs::rsa::{KeyPair as RsaKeyPair, KeySize};
use aws_lc_rs::signature::{
    EcdsaVerificationAlgorithm, KeyPair as _, UnparsedPublicKey, ECDSA_P256_SHA256_ASN1, ECDSA_P256_SHA256_FIXED,
    RSA_PKCS1_2048_8192_SHA256, RSA_PKCS1_SHA256,
};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use x509_cert::der::pem::{self as der_pem, PemLabel};
use x509_cert::builder::{Builder, CertificateBuilder, Profile};
use x509_cert::der::asn1::{SetOfVec, Utf8StringRef};
use x509_cert::der::{Decode, DecodePem, Encode, EncodePem};
use x509_cert::name::{Name, RdnSequence, RelativeDistinguishedName};
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::SubjectPublicKeyInfoOwned;
use x509_cert::time::{Time, Validity};
use x509_cert::attr::AttributeTypeAndValue;
use x509_cert::der::asn1::{Ia5String, OctetString};
use x509_cert::der::oid::db::rfc5280::ID_KP_SERVER_AUTH;
use x509_cert::ext::pkix::name::GeneralName;
use x509_cert::ext::pkix::{ExtendedKeyUsage, SubjectAltName};

use super::{CapError, UnixSeconds};

/// RSA modulus size used for RS256 keys.
pub const RSA_BITS: usize = 3072;

const OID_COMMON_NAME: x509_cert::der::oid::ObjectIdentifier =
    x509_cert::der::oid::ObjectIdentifier::new_unwrap("2.5.4.3");
const OID_ECDSA_WITH_SHA256: x509_cert::der::oid::ObjectIdentifier =
    x509_cert::der::oid::ObjectIdentifier::new_unwrap("1.2.840.10045.4.3.2");

/// Token signature scheme.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignatureAlg {
    /// ECDSA over P-256 with SHA-256.
    #[default]
    #[serde(rename = "ES256")]
    EcdsaP256Sha256,
    /// RSASSA-PKCS1-v1_5 with a 3072-bit modulus and SHA-256.
    #[serde(rename = "RS256")]
    Rsa3072Sha256,
}

impl SignatureAlg {
    pub fn jws_name(self) -> &'static str {
        match self {
            SignatureAlg::EcdsaP256Sha256 => "ES256",
            SignatureAlg::Rsa3072Sha256 => "RS256",
        }
    }
}

impl fmt::Display for SignatureAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.jws_name())
    }
}

impl FromStr for SignatureAlg {
    type Err = CapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "es256" | "ecdsa" | "ecdsa-p256" | "ecdsa-p256-sha256" => Ok(SignatureAlg::EcdsaP256Sha256),
            "rs256" | "rsa" | "rsa3072" | "rsa3072-sha256" => Ok(SignatureAlg::Rsa3072Sha256),
            other => Err(CapError::UnsupportedAlg(other.to_string())),
        }
    }
}

/// Private signing key for one principal.
#[derive(Clone)]
pub enum SigningKey {
    Ecdsa(p256::ecdsa::SigningKey),
    Rsa(Arc<RsaKeyPair>),
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({})", self.alg())
    }
}

fn key_err(e: impl fmt::Display) -> CapError {
    CapError::Key(e.to_string())
}

impl SigningKey {
    pub fn generate(alg: SignatureAlg) -> Result<Self, CapError> {
        match alg {
            SignatureAlg::EcdsaP256Sha256 => Ok(SigningKey::Ecdsa(p256::ecdsa::SigningKey::random(&mut OsRng))),
            SignatureAlg::Rsa3072Sha256 => {
                debug_assert_eq!(RSA_BITS, 3072);
                let pair = RsaKeyPair::generate(KeySize::Rsa3072).map_err(key_err)?;
                Ok(SigningKey::Rsa(Arc::new(pair)))
            }
        }
    }

    pub fn alg(&self) -> SignatureAlg {
        match self {
            SigningKey::Ecdsa(_) => SignatureAlg::EcdsaP256Sha256,
            SigningKey::Rsa(_) => SignatureAlg::Rsa3072Sha256,
        }
    }

    pub fn public_key(&self) -> PublicKey {
        match self {
            SigningKey::Ecdsa(k) => PublicKey::Ecdsa(*k.verifying_key()),
            SigningKey::Rsa(k) => {
                let spki: PublicKeyX509Der = k.public_key().as_der().expect("RSA public key encodes");
                PublicKey::Rsa(RsaPublicKey { spki: spki.as_ref().to_vec() })
            }
        }
    }

    /// Raw signature bytes: fixed-width `r || s` for ECDSA, PKCS#1 v1.5 for RSA.
    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        match self {
            SigningKey::Ecdsa(k) => {
                let sig: p256::ecdsa::Signature = k.sign(msg);
                sig.to_bytes().to_vec()
            }
            SigningKey::Rsa(k) => {
                let mut sig = vec![0; k.public_modulus_len()];
                k.sign(&RSA_PKCS1_SHA256, &aws_lc_rs::rand::SystemRandom::new(), msg, &mut sig)
                    .expect("RSA signing with a valid key");
                sig
            }
        }
    }

    pub fn to_pkcs8_pem(&self) -> Result<String, CapError> {
        match self {
            SigningKey::Ecdsa(k) => Ok(k.to_pkcs8_pem(LineEnding::LF).map_err(key_err)?.to_string()),
            SigningKey::Rsa(k) => {
                let der: Pkcs8V1Der = k.as_der().map_err(key_err)?;
                der_pem::encode_string(p256::pkcs8::PrivateKeyInfo::PEM_LABEL, LineEnding::LF, der.as_ref())
                    .map_err(key_err)
            }
        }
    }

    pub fn from_pkcs8_pem(pem: &str) -> Result<Self, CapError> {
        if let Ok(k) = p256::ecdsa::SigningKey::from_pkcs8_pem(pem) {
            return Ok(SigningKey::Ecdsa(k));
        }
        let (label, der) = der_pem::decode_vec(pem.as_bytes()).map_err(key_err)?;
        if label != p256::pkcs8::PrivateKeyInfo::PEM_LABEL {
            return Err(CapError::Key(format!("unexpected PEM label {label}")));
        }
        RsaKeyPair::from_pkcs8(&der).map(|k| SigningKey::Rsa(Arc::new(k))).map_err(key_err)
    }
}

/// An RSA public key as its X.509 SubjectPublicKeyInfo encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RsaPublicKey {
    spki: Vec<u8>,
}

/// Public verification key extracted from a certificate.
/// P-256 verification through aws-lc, several times faster than the pure-Rust verifier.
fn ecdsa_verify(scheme: &'static EcdsaVerificationAlgorithm, key: &p256::ecdsa::VerifyingKey, msg: &[u8], sig: &[u8]) -> bool {
    let point = key.to_encoded_point(false);
    UnparsedPublicKey::new(scheme, point.as_bytes()).verify(msg, sig).is_ok()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PublicKey {
    Ecdsa(p256::ecdsa::VerifyingKey),
    Rsa(RsaPublicKey),
}

impl PublicKey {
    pub fn alg(&self) -> SignatureAlg {
        match self {
            PublicKey::Ecdsa(_) => SignatureAlg::EcdsaP256Sha256,
            PublicKey::Rsa(_) => SignatureAlg::Rsa3072Sha256,
        }
    }

    /// Checks `sig` over `msg` under `alg`; a key of the other scheme never verifies.
    pub fn verify(&self, alg: SignatureAlg, msg: &[u8], sig: &[u8]) -> bool {
        match (self, alg) {
            (PublicKey::Ecdsa(k), SignatureAlg::EcdsaP256Sha256) => ecdsa_verify(&ECDSA_P256_SHA256_FIXED, k, msg, sig),
            (PublicKey::Rsa(k), SignatureAlg::Rsa3072Sha256) => {
                UnparsedPublicKey::new(&RSA_PKCS1_2048_8192_SHA256, &k.spki).verify(msg, sig).is_ok()
            }
            _ => false,
        }
    }

    fn to_spki_der(&self) -> Result<Vec<u8>, CapError> {
        match self {
            PublicKey::Ecdsa(k) => Ok(k.to_public_key_der().map_err(key_err)?.as_bytes().to_vec()),
            PublicKey::Rsa(k) => Ok(k.spki.clone()),
        }
    }

    fn from_spki_der(der: &[u8]) -> Result<Self, CapError> {
        if let Ok(k) = p256::ecdsa::VerifyingKey::from_public_key_der(der) {
            return Ok(PublicKey::Ecdsa(k));
        }
        aws_lc_rs::rsa::PublicKey::from_der(der)
            .map(|_| PublicKey::Rsa(RsaPublicKey { spki: der.to_vec() }))
            .map_err(|e| CapError::Certificate(format!("unsupported public key: {e}")))
    }
}

/// An X.509 certificate binding a principal id (subject CN) to a public key.
#[derive(Clone, Debug)]
pub struct Certificate {
    der: Vec<u8>,
    inner: x509_cert::Certificate,
    subject: String,
    key: PublicKey,
}

impl PartialEq for Certificate {
    fn eq(&self, other: &Self) -> bool {
        self.der == other.der
    }
}

impl Eq for Certificate {}

impl Certificate {
    pub fn from_der(der: &[u8]) -> Result<Self, CapError> {
        let inner = x509_cert::Certificate::from_der(der).map_err(|e| CapError::Certificate(e.to_string()))?;
        Self::from_parsed(inner)
    }

    pub fn from_pem(pem: &str) -> Result<Self, CapError> {
        let inner = x509_cert::Certificate::from_pem(pem).map_err(|e| CapError::Certificate(e.to_string()))?;
        Self::from_parsed(inner)
    }

    fn from_parsed(inner: x509_cert::Certificate) -> Result<Self, CapError> {
        let der = inner.to_der().map_err(|e| CapError::Certificate(e.to_string()))?;
        let subject = common_name(&inner.tbs_certificate.subject)
            .ok_or_else(|| CapError::Certificate("certificate subject has no CN".into()))?;
        let spki = inner
            .tbs_certificate
            .subject_public_key_info
            .to_der()
            .map_err(|e| CapError::Certificate(e.to_string()))?;
        let key = PublicKey::from_spki_der(&spki)?;
        Ok(Certificate { der, inner, subject, key })
    }

    pub fn der(&self) -> &[u8] {
        &self.der
    }

    pub fn to_pem(&self) -> String {
        self.inner
            .to_pem(LineEnding::LF)
            .expect("a parsed certificate always re-encodes")
    }

    /// Principal id carried in the subject common name.
    pub fn subject_id(&self) -> &str {
        &self.subject
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.key
    }

    fn validity_window(&self) -> (u64, u64) {
        let v = &self.inner.tbs_certificate.validity;
        (v.not_before.to_unix_duration().as_secs(), v.not_after.to_unix_duration().as_secs())
    }
}

fn cn_name(cn: &str) -> Result<Name, CapError> {
    let value = Utf8StringRef::new(cn).map_err(|e| CapError::Certificate(e.to_string()))?;
    let atv = AttributeTypeAndValue {
        oid: OID_COMMON_NAME,
        value: x509_cert::der::Any::from(value),
    };
    let rdn = RelativeDistinguishedName(SetOfVec::try_from(vec![atv]).map_err(|e| CapError::Certificate(e.to_string()))?);
    Ok(RdnSequence(vec![rdn]))
}

fn common_name(name: &Name) -> Option<String> {
    name.0
        .iter()
        .flat_map(|rdn| rdn.0.iter())
        .find(|atv| atv.oid == OID_COMMON_NAME)
        .and_then(|atv| {
            atv.value
                .decode_as::<Utf8StringRef<'_>>()
                .map(|s| s.as_str().to_string())
                .or_else(|_| {
                    atv.value
                        .decode_as::<x509_cert::der::asn1::PrintableStringRef<'_>>()
                        .map(|s| s.as_str().to_string())
                })
                .ok()
        })
}

fn validity(not_before: UnixSeconds, not_after: UnixSeconds) -> Result<Validity, CapError> {
    let to_time = |t: UnixSeconds| {
        Time::try_from(std::time::UNIX_EPOCH + Duration::from_secs(t.max(0) as u64))
            .map_err(|e| CapError::Certificate(e.to_string()))
    };
    Ok(Validity {
        not_before: to_time(not_before)?,
        not_after: to_time(not_after)?,
    })
}

/// The resource owner's root: the only certificate issuer in a deployment.
pub struct RootAuthority {
    key: p256::ecdsa::SigningKey,
    cert: Certificate,
}

impl RootAuthority {
    pub fn generate(name: &str, not_before: UnixSeconds, not_after: UnixSeconds) -> Result<Self, CapError> {
        let key = p256::ecdsa::SigningKey::random(&mut OsRng);
        let subject = cn_name(name)?;
        let spki = spki_of(&PublicKey::Ecdsa(*key.verifying_key()))?;
        let builder = CertificateBuilder::new(
            Profile::Root,
            SerialNumber::from(1u32),
            validity(not_before, not_after)?,
            subject,
            spki,
            &key,
        )
        .map_err(|e| CapError::Certificate(e.to_string()))?;
        let cert = builder
            .build::<p256::ecdsa::DerSignature>()
            .map_err(|e| CapError::Certificate(e.to_string()))?;
        Ok(RootAuthority { key, cert: Certificate::from_parsed(cert)? })
    }

    pub fn from_parts(key_pem: &str, cert_pem: &str) -> Result<Self, CapError> {
        let key = p256::ecdsa::SigningKey::from_pkcs8_pem(key_pem).map_err(|e| CapError::Key(e.to_string()))?;
        let cert = Certificate::from_pem(cert_pem)?;
        if cert.public_key() != &PublicKey::Ecdsa(*key.verifying_key()) {
            return Err(CapError::KeyMismatch);
        }
        Ok(RootAuthority { key, cert })
    }

    pub fn key_pem(&self) -> Result<String, CapError> {
        SigningKey::Ecdsa(self.key.clone()).to_pkcs8_pem()
    }

    pub fn certificate(&self) -> &Certificate {
        &self.cert
    }

    pub fn trust_anchor(&self) -> TrustAnchor {
        TrustAnchor::new(self.cert.clone())
    }

    /// Issues a leaf certificate for `principal_id` over `key`.
    pub fn issue(
        &self,
        principal_id: &str,
        key: &PublicKey,
        not_before: UnixSeconds,
        not_after: UnixSeconds,
    ) -> Result<Certificate, CapError> {
        self.issue_leaf(principal_id, key, not_before, not_after, &[])
    }

    /// Issues a TLS server certificate naming `hosts` (DNS names or IP literals).
    pub fn issue_server(
        &self,
        principal_id: &str,
        key: &PublicKey,
        not_before: UnixSeconds,
        not_after: UnixSeconds,
        hosts: &[&str],
    ) -> Result<Certificate, CapError> {
        if hosts.is_empty() {
            return Err(CapError::Certificate("a server certificate needs at least one host".into()));
        }
        self.issue_leaf(principal_id, key, not_before, not_after, hosts)
    }

    fn issue_leaf(
        &self,
        principal_id: &str,
        key: &PublicKey,
        not_before: UnixSeconds,
        not_after: UnixSeconds,
        hosts: &[&str],
    ) -> Result<Certificate, CapError> {
        if principal_id.is_empty() {
            return Err(CapError::InvariantViolation("principal id must be non-empty".into()));
        }
        let bad = |e: &dyn fmt::Display| CapError::Certificate(e.to_string());
        let serial: [u8; 16] = rand::random();
        let mut serial = serial.to_vec();
        serial[0] &= 0x7f;
        serial[0] |= 0x01;
        let profile = Profile::Leaf {
            issuer: self.cert.inner.tbs_certificate.subject.clone(),
            enable_key_agreement: false,
            enable_key_encipherment: false,
        };
        let mut builder = CertificateBuilder::new(
            profile,
            SerialNumber::new(&serial).map_err(|e| bad(&e))?,
            validity(not_before, not_after)?,
            cn_name(principal_id)?,
            spki_of(key)?,
            &self.key,
        )
        .map_err(|e| bad(&e))?;
        if !hosts.is_empty() {
            let names = hosts
                .iter()
                .map(|h| match h.parse::<std::net::IpAddr>() {
                    Ok(std::net::IpAddr::V4(ip)) => OctetString::new(ip.octets().to_vec()).map(GeneralName::IpAddress),
                    Ok(std::net::IpAddr::V6(ip)) => OctetString::new(ip.octets().to_vec()).map(GeneralName::IpAddress),
                    Err(_) => Ia5String::new(h).map(GeneralName::DnsName),
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(&e))?;
            builder.add_extension(&SubjectAltName(names)).map_err(|e| bad(&e))?;
            builder
                .add_extension(&ExtendedKeyUsage(vec![ID_KP_SERVER_AUTH]))
                .map_err(|e| bad(&e))?;
        }
        let cert = builder.build::<p256::ecdsa::DerSignature>().map_err(|e| bad(&e))?;
        Certificate::from_parsed(cert)
    }

    /// Generates a key pair for `principal_id` and certifies it.
    pub fn enroll(
        &self,
        principal_id: &str,
        alg: SignatureAlg,
        not_before: UnixSeconds,
        not_after: UnixSeconds,
    ) -> Result<PrincipalKeys, CapError> {
        let key = SigningKey::generate(alg)?;
        let cert = self.issue(principal_id, &key.public_key(), not_before, not_after)?;
        PrincipalKeys::new(key, cert)
    }
}

fn spki_of(key: &PublicKey) -> Result<SubjectPublicKeyInfoOwned, CapError> {
    SubjectPublicKeyInfoOwned::from_der(&key.to_spki_der()?).map_err(|e| CapError::Certificate(e.to_string()))
}

/// Verifies that certificates chain to the configured root.
#[derive(Clone, Debug)]
pub struct TrustAnchor {
    root: Certificate,
}

impl TrustAnchor {
    pub fn new(root: Certificate) -> Self {
        TrustAnchor { root }
    }

    pub fn root(&self) -> &Certificate {
        &self.root
    }

    /// Checks issuer name, root signature and validity window at `now`.
    pub fn validate(&self, cert: &Certificate, now: UnixSeconds) -> Result<(), CapError> {
        let tbs = &cert.inner.tbs_certificate;
        if tbs.issuer != self.root.inner.tbs_certificate.subject {
            return Err(CapError::Certificate("issuer is not the trusted root".into()));
        }
        if cert.inner.signature_algorithm.oid != OID_ECDSA_WITH_SHA256 {
            return Err(CapError::Certificate("unexpected certificate signature algorithm".into()));
        }
        let PublicKey::Ecdsa(root_key) = &self.root.key else {
            return Err(CapError::Certificate("root key must be ECDSA P-256".into()));
        };
        let msg = tbs.to_der().map_err(|e| CapError::Certificate(e.to_string()))?;
        let sig_bytes = cert
            .inner
            .signature
            .as_bytes()
            .ok_or_else(|| CapError::Certificate("signature has unused bits".into()))?;
        if !ecdsa_verify(&ECDSA_P256_SHA256_ASN1, root_key, &msg, sig_bytes) {
            return Err(CapError::Certificate("bad root signature on certificate".into()));
        }
        let (nb, na) = cert.validity_window();
        let now = now.max(0) as u64;
        if now < nb || now > na {
            return Err(CapError::Certificate("certificate outside its validity window".into()));
        }
        Ok(())
    }
}

/// A principal's signing key together with its root-issued certificate.
#[derive(Clone, Debug)]
pub struct PrincipalKeys {
    key: SigningKey,
    cert: Certificate,
}

impl PrincipalKeys {
    pub fn new(key: SigningKey, cert: Certificate) -> Result<Self, CapError> {
        if &key.public_key() != cert.public_key() {
            return Err(CapError::KeyMismatch);
        }
        Ok(PrincipalKeys { key, cert })
    }

    pub fn principal_id(&self) -> &str {
        self.cert.subject_id()
    }

    pub fn alg(&self) -> SignatureAlg {
        self.key.alg()
    }

    pub fn certificate(&self) -> &Certificate {
        &self.cert
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.key
    }
}
