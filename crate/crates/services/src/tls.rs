//! Server certificates for HTTPS and HTTP clients that trust only the deployment root.

use std::time::Duration;

use axum_server::tls_rustls::RustlsConfig;

use seqcap_core::capability::{Certificate, RootAuthority, SignatureAlg, SigningKey, UnixSeconds};

/// Hosts every server certificate names; clients connect to 127.0.0.1 or localhost.
pub const LOCAL_HOSTS: [&str; 2] = ["localhost", "127.0.0.1"];

#[derive(Debug, Clone)]
pub struct TlsIdentity {
    pub cert_pem: String,
    pub key_pem: String,
}

impl TlsIdentity {
    /// Generates a key of scheme `alg` and a server certificate for `hosts` signed by `root`.
    pub fn issue(
        root: &RootAuthority,
        name: &str,
        alg: SignatureAlg,
        hosts: &[&str],
        not_before: UnixSeconds,
        not_after: UnixSeconds,
    ) -> Result<Self, seqcap_core::capability::CapError> {
        let key = SigningKey::generate(alg)?;
        let cert = root.issue_server(name, &key.public_key(), not_before, not_after, hosts)?;
        Ok(TlsIdentity {
            cert_pem: cert.to_pem(),
            key_pem: key.to_pkcs8_pem()?,
        })
    }

    pub async fn rustls_config(&self) -> std::io::Result<RustlsConfig> {
        RustlsConfig::from_pem(self.cert_pem.clone().into_bytes(), self.key_pem.clone().into_bytes()).await
    }
}

/// Client options for talking to the servers of one deployment.
#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub timeout: Duration,
    /// Keep connections alive between requests. Disabled, every request pays a fresh handshake.
    pub reuse_connections: bool,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            timeout: Duration::from_secs(10),
            reuse_connections: true,
        }
    }
}

/// An HTTPS client trusting `root` and nothing else.
pub fn https_client(root: &Certificate, opts: &ClientOptions) -> reqwest::Result<reqwest::Client> {
    let mut builder = reqwest::Client::builder()
        .tls_certs_only([reqwest::Certificate::from_der(root.der())?])
        .timeout(opts.timeout);
    if !opts.reuse_connections {
        builder = builder.pool_max_idle_per_host(0);
    }
    builder.build()
}
