//! Protocol client tooling: scripted scenarios, the attack suite and the load generator.

pub mod attacks;
pub mod bench;
pub mod scenario;
pub mod stats;
