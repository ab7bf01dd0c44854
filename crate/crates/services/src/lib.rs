//! HTTPS services: authorization server, resource servers and context oracle.

pub mod auth_server;
pub mod client;
pub mod clock;
pub mod config;
pub mod deploy;
pub mod eso_server;
pub mod fixtures;
pub mod http;
pub mod resource_server;
pub mod tls;
pub mod wire;
