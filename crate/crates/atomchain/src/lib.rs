//! Atomic skill-chain verification of scientific table claims.
//!
//! The library decomposes claim verification into a six-stage chain
//! (interpretation, planning, then grounding / reasoning / recap per plan
//! step, and a conclusion), runs it over a pluggable text-generation
//! backend, and checks the result against a deterministic expression
//! oracle. A claim factory produces balanced positive/negative claim
//! pairs from tables, and the metrics module scores chain quality.

pub mod chain;
pub mod claimgen;
pub mod client;
pub mod metrics;
pub mod oracle;
pub mod orchestrator;
pub mod outputs;
pub mod prompt;
pub mod table;

#[cfg(test)]
pub(crate) mod testdata;
