//! Battery-entropy challenge/reply authentication for DER outstations.
//!
//! A master station and an outstation share a table of challenge/reply pairs
//! that is stirred every round by fuel-gauge readings from the outstation's
//! battery pack. The gauge readings are first checked against a per-cell
//! discharge model so that a swapped or spoofed cell is caught locally.

pub mod battery_sim;
pub mod crseq;
pub mod ducm;
pub mod endpoints;
pub mod fuel_gauge;
pub mod net;
pub mod plant;

/// Index of a cell within a pack.
pub type CellId = u8;

/// Seconds between fuel-gauge measurement cycles.
pub const MEASUREMENT_PERIOD_S: f64 = 2.0;

pub use battery_sim::{create_pack, Bess, PackConfig};
pub use crseq::{AuthReply, BessState, CellReplyTable, Challenge, TempReply, TransformSpec};
pub use ducm::{Ducm, DucmConfig, Tolerance};
pub use fuel_gauge::{GaugeConfig, GaugeState, Measurement};
