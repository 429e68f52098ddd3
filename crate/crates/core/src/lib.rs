pub mod algebra;
pub mod engines;
pub mod error;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod states;
