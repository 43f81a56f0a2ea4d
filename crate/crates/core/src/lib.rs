//! Message-passing and E(n)-equivariant graph networks for node-level
//! segmentation of 3D meshes, with rigid point-cloud registration, a
//! synthetic cortical-mesh generator and a cross-validated experiment
//! driver.

pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod geometry;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod train;
