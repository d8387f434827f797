//! Data plane of an asset administration shell federation: the model,
//! per-organization repositories, registries, the event bus, snapshots
//! and copy-on-write cloning.

pub mod bus;
pub mod clock;
pub mod clone;
pub mod federation;
pub mod model;
pub mod registry;
pub mod repository;
pub mod snapshot;
