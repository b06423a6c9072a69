//! Event-camera digital twin: simulation, relaxed gradients, filtering,
//! representations, detection analysis and file formats.

pub mod analysis;
pub mod diff;
pub mod error;
pub mod events;
pub mod filters;
pub mod io;
pub mod repr;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use events::{EventFrameVolume, EventRecord, EventStream, FluxSequence, FrameMode};
pub use sim::{simulate, SensorConfig};
