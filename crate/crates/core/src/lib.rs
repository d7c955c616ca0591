pub mod cost;
pub mod early_exit;
pub mod encoder;
pub mod grid;
pub mod merge;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod pixel_io;
pub mod rng;
pub mod supertoken;
pub mod tensor;
