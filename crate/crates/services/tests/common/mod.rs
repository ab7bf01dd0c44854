#![allow(dead_code)]

use seqcap_core::capability::ClientClaim;
use seqcap_services::client::ProtocolClient;
use seqcap_services::deploy::{Deployment, DeploymentOptions};
use seqcap_services::fixtures::{ATTACKER, HONEST_CLIENT, OWNER};
use seqcap_services::tls::ClientOptions;
use seqcap_services::wire::TokenResponse;

pub async fn deployment() -> Deployment {
    Deployment::start(DeploymentOptions::default()).await.expect("deployment starts")
}

pub fn client_for(d: &Deployment, id: &str) -> ProtocolClient {
    let http = d.http(&ClientOptions::default()).unwrap();
    ProtocolClient::new(d.client(id).clone(), http, &d.as_url)
}

pub fn honest(d: &Deployment) -> ProtocolClient {
    client_for(d, HONEST_CLIENT)
}

pub fn mallory(d: &Deployment) -> ProtocolClient {
    client_for(d, ATTACKER)
}

/// The $10 balance charge.
pub fn charge_claim(c: &ProtocolClient) -> ClientClaim {
    c.claim("Payment", OWNER, "balance", &["charge"], &[("amount", "$10")])
}

pub fn statement_claim(c: &ProtocolClient) -> ClientClaim {
    c.claim("Payment", OWNER, "statement", &["read", "charge"], &[("amount", "$1")])
}

pub async fn tokens(c: &ProtocolClient, claim: &ClientClaim) -> TokenResponse {
    let reply = c.request_token(claim).await.unwrap();
    assert_eq!(reply.status, 200, "{:?}", reply.body);
    reply.body.unwrap()
}
