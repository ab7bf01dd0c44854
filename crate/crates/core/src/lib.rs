//! Core of a capability-based authorization system that enforces ordered,
//! context-aware permission sequences across independent resource servers.
//!
//! - [`capability`]: token types, canonical encoding, signatures, hash binding.
//! - [`monitor`]: the per-request decision procedure run by a resource server.
//! - [`policy`]: ABAC evaluation at the authorization server.
//! - [`model`]: an executable state-transition model of one session and a
//!   bounded explorer that checks its safety properties.

pub mod capability;
pub mod model;
pub mod monitor;
pub mod policy;
