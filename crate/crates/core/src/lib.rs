pub mod config;
pub mod context;
pub mod data;
pub mod decoder;
pub mod error;
pub mod features;
pub mod gdat;
pub mod generative;
pub mod geom;
pub mod graph;
pub mod kinematics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod predict;
pub mod tracker;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
