//! Goal-conditioned rearranging of deformable objects.
//!
//! A convolutional keypoint detector turns images into ordered keypoints,
//! a graph network with local self and cross attention scores every
//! (pick keypoint, place keypoint) pair, and a DQN trainer learns those
//! scores in a 2D position-based simulator of ropes, rings and cloth.

pub mod agent;
pub mod error;
pub mod graphnet;
pub mod keypoint;
pub mod keypoints;
pub mod simenv;

pub use error::{Error, Result};
pub use keypoints::{Frame, KeypointSet, Point};
