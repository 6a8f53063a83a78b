//! Imitation learning of second-order grasping policies built on geometric
//! fabrics, at desk scale on a planar arm.

pub mod datagen;
pub mod encoder;
pub mod env;
pub mod error;
pub mod fabric;
pub mod integrator;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{Accel, EncodingMode, JointState, ObjectEncoding, RunSeed};
