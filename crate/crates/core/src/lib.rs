//! Bit-flip fault injection and mitigation for deep recommendation models.

pub mod datagen;
pub mod inject;
pub mod metrics;
pub mod mitigate;
pub mod model;
pub mod tensor;
pub mod campaign;
