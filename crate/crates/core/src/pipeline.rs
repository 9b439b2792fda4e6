//! Patch predictions to a dense motion field in one call.

use log::info;

use crate::error::Result;
use crate::extend::predict_extended;
use crate::fuse::{confidence_volume, shortlist, solve_mrf, ConfidenceVolume, MrfParams, DEFAULT_SAMPLED, DEFAULT_SIGMA, DEFAULT_TOP_K};
use crate::image::ImageBuffer;
use crate::motion::MotionField;
use crate::predict::{predict_image, PatchPredictor, DEFAULT_STRIDE};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateParams {
    pub stride: usize,
    /// Predict on rotated copies and merge into the 361-vector set.
    pub extend: bool,
    pub sigma: f64,
    pub top_k: usize,
    pub sampled: usize,
    pub mrf: MrfParams,
}

impl Default for EstimateParams {
    fn default() -> Self {
        EstimateParams {
            stride: DEFAULT_STRIDE,
            extend: true,
            sigma: DEFAULT_SIGMA,
            top_k: DEFAULT_TOP_K,
            sampled: DEFAULT_SAMPLED,
            mrf: MrfParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub field: MotionField,
    pub volume: ConfidenceVolume,
}

impl Estimate {
    /// Per-pixel best candidate, ignoring smoothness.
    pub fn unary_field(&self) -> MotionField {
        self.volume.argmax_field()
    }
}

pub fn estimate_field(image: &ImageBuffer, predictor: &dyn PatchPredictor, params: &EstimateParams) -> Result<Estimate> {
    params.mrf.validate()?;
    let (w, h) = image.dims();
    let preds = if params.extend {
        predict_extended(image, predictor, params.stride)?
    } else {
        predict_image(image, predictor, params.stride)?
    };
    info!("{} patch predictions", preds.len());
    let volume = confidence_volume(&preds, w, h, params.sigma)?;
    let list = shortlist(&volume, params.top_k, params.sampled, params.mrf.seed)?;
    let field = solve_mrf(&volume, &list, &params.mrf)?;
    Ok(Estimate { field, volume })
}
