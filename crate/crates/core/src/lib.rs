//! Frequency-guided gaussian splatting RGB-D SLAM.
//!
//! A dense gaussian map is grown where a frame's Fourier high-pass response
//! and a missing-region check call for it, a sparse gaussian map serves
//! GICP tracking, and both are refined together by differentiable
//! splatting against selected keyframes.

pub mod densify;
pub mod error;
pub mod frequency;
pub mod gicp;
pub mod image;
pub mod model;
pub mod optimize;
pub mod pipeline;
pub mod render;
pub mod spatial;

pub use error::{Error, Result};
