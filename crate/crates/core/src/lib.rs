//! Crop-row navigation lab: procedural plantations, a simulated multi-channel
//! LiDAR, voxel row-map downsampling, a PPO-trained steering policy and an
//! evaluation harness.

pub mod bench;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod rowmap;
pub mod sensor;
pub mod world;

pub use error::{Error, Result};
