//! Polyrigid deformable 2D/3D registration.
//!
//! A moving voxel volume is aligned to a handful of X-ray projections by
//! estimating one rigid transform per articulated structure and blending
//! those transforms in the tangent space of SE(3).

pub mod geometry;
pub mod grid;
pub mod io;
pub mod liealg;
pub mod phantom;
pub mod registration;
pub mod render;
pub mod similarity;
pub mod warpfield;
