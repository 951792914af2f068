//! Desk-scale offline RL laboratory built around action-sequence (option)
//! value learning: SMDP option transitions with dual discount factors,
//! detached expectile value learning with scalar or categorical
//! (HL-Gaussian) critics, pluggable policy extraction, and exact brute-force
//! oracles on small tasks to test all of it against.

pub mod binio;
pub mod dataset;
pub mod distributional;
pub mod envs;
pub mod error;
pub mod nn;

pub use error::{Error, Result};
