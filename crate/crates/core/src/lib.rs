//! Bi-static OFDM sensing toolkit: scene synthesis, clutter suppression, and
//! joint spatial / delay-Doppler parameter estimation.

pub mod clam;
pub mod error;
pub mod estimate;
pub mod joint;
pub mod metrics;
pub mod scene;
pub mod suppress;
pub mod synth;

pub use error::{Error, Result};

/// Propagation speed used for all delay/Doppler/geometry conversions, in m/s.
///
/// The nominal 3e8 value keeps derived Dopplers and delays consistent with the
/// bundled scene tables (e.g. 40 m/s at 28 GHz -> 3733.3 Hz).
pub const SPEED_OF_LIGHT_M_S: f64 = 3.0e8;
