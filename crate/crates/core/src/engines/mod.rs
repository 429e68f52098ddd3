//! Time-evolution backends: exact (ED), bosonized covariance (Gaussian) and
//! semiclassical trajectories (DTWA).

pub mod dtwa;
pub mod ed;
pub mod gauss;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Ed,
    Gauss,
    Dtwa,
}
