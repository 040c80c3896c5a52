pub mod client;
pub mod environment;
pub mod experiment;
pub mod orchestrator;
pub mod server;
pub mod stats;
