//! Continual learning with quasi-Newton curvature penalties.
//!
//! A network is trained on a sequence of tasks. After each task the loss
//! curvature at the solution is summarised by a diagonal Fisher term plus a
//! low-rank BFGS or SR1 correction built from sampled curvature pairs, and the
//! resulting quadratic penalty anchors later training.

pub mod data;
pub mod linalg;
pub mod nn;
pub mod curvature;
pub mod regularizer;
pub mod trainer;
pub mod report;
