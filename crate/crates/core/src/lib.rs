//! Continual object-goal navigation on a desk-scale grid world.

pub mod bench;
pub mod encoder;
pub mod env;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod trainer;
