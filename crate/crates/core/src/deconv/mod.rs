//! Non-uniform non-blind deconvolution with a Gaussian-mixture patch prior.

mod cg;
mod gmm;
mod hqs;
mod operator;

pub use cg::{pcg, CgResult};
pub use gmm::{
    fit_gmm, fit_gmm_with, sample_patches, solve_z, GmmComponent, GmmFitOptions, GmmFitReport, GmmPrior, ZStep,
    COV_JITTER, PATCH_DIM, PATCH_SIDE,
};
pub use hqs::{
    deblur, deblur_with_report, solve_x, surrogate_objective, DeblurOutput, HqsSchedule, PatchGrid, StageReport,
};
pub use operator::{apply, apply_adjoint, NonUniformOperator, KERNEL_QUANTUM};
