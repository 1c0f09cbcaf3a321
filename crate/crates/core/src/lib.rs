pub mod config;
pub mod datagen;
pub mod dsp;
mod fsutil;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use fsutil::write_atomic;
