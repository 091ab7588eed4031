//! Core engine for a multi-agent exposure-therapy chat service: scale
//! scoring, paired-sample statistics, the six-day session protocol, prompt
//! assembly, model providers, persistence and the service layer.

pub mod agents;
pub mod clock;
pub mod instruments;
pub mod presence;
pub mod protocol;
pub mod provider;
pub mod service;
pub mod sim;
pub mod stats;
pub mod store;
