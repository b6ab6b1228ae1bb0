//! Physically based LiDAR sensor modeling and resimulation.
//!
//! The crate is `no_std` compatible (with `alloc`); disable the default
//! `std` feature for embedded or kernel targets. All math falls back to
//! `libm` in that configuration.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod calib;
pub mod field;
pub mod fit;
pub mod geometry;
pub mod image;
pub mod math;
pub mod normals;
pub mod optim;
pub mod pose;
pub mod sensor;

pub use geometry::{SensorIntrinsics, UnitIntrinsics};
pub use image::{PointCloud, RangeImage};
pub use pose::Pose;
pub use sensor::{DistanceParams, IntensityParams, MaskSet};
