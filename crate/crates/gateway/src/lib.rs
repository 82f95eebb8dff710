//! Persistence, the interactive session service and the `bcomm` CLI.

pub mod api;
pub mod cli;
pub mod error;
pub mod registry;
pub mod session;
pub mod store;

pub use error::GatewayError;
