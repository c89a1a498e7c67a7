//! Wire protocol, adversary hop, transports and experiment drivers.

pub mod adversary;
pub mod config;
pub mod dataset;
pub mod frame;
pub mod session;
pub mod sweep;
