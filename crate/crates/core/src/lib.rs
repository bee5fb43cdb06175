//! Semantic 3D Gaussians for LiDAR-camera occupancy prediction.

mod binio;

pub mod attention;
pub mod config;
pub mod convert;
pub mod error;
pub mod export;
pub mod gaussians;
pub mod grid;
pub mod init;
pub mod lidar;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod splat;

pub use error::{Error, Result};
