//! The hub's outer shell: the agent wire server, the HTTP and WebSocket API
//! used by the console, the interaction event log, configuration and the
//! `infohub` command line.

pub mod agent;
pub mod api;
pub mod cli;
pub mod config;
pub mod events;
pub mod hub;
pub mod server;

pub use config::HubConfig;
pub use hub::Hub;
