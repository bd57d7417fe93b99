//! Visuo-tactile voxel shape reconstruction.

pub mod camera;
pub mod frames;
pub mod policy;
pub mod prior;
pub mod raycast;
pub mod refine;
pub mod shapes;
pub mod sim;
pub mod tactile;
pub mod voxel;
