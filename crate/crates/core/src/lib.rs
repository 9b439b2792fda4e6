//! Dense motion-blur field estimation from a single blurry image and
//! non-uniform deconvolution with a Gaussian-mixture patch prior.

mod codec;
pub mod deconv;
pub mod extend;
pub mod fuse;
pub mod metrics;
pub mod predict;
pub mod synth;
pub mod error;
pub mod image;
pub mod motion;
pub mod pipeline;

pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use motion::{
    base_candidate_set, canonicalize, extended_candidate_set, rasterize, to_cartesian,
    BlurKernel, CandidateSet, MotionField, MotionVector, SetKind,
};
