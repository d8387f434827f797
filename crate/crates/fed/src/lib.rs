//! Runs a federation of organizations sharing Asset Administration Shells
//! under the copy-on-write protocol, with workflow engines for clone
//! approval and cross-organization service requests.

pub mod api;
pub mod client;
pub mod config;
pub mod demo;
pub mod invokers;
pub mod runtime;
pub mod server;
pub mod smc;

pub use api::{Api, ApiRequest, ApiResponse, Caller};
pub use config::{ConfigError, FederationConfig};
pub use runtime::{Runtime, RuntimeOptions};
