use log::info;
use rayon::prelude::*;

use super::cg::{pcg, CgResult};
use super::gmm::{GmmPrior, ZStep, PATCH_DIM, PATCH_SIDE};
use super::operator::NonUniformOperator;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::motion::MotionField;

/// Parameters of the half-quadratic splitting solver.
#[derive(Debug, Clone, PartialEq)]
pub struct HqsSchedule {
    /// Weight of the data term.
    pub lambda: f64,
    /// Coupling penalties, one outer iteration each.
    pub betas: Vec<f64>,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub patch_size: usize,
}

impl Default for HqsSchedule {
    fn default() -> Self {
        HqsSchedule {
            lambda: 2e5,
            betas: (0..7).map(|i| 50.0 * f64::powi(2.0, i)).collect(),
            cg_tol: 1e-5,
            cg_max_iter: 200,
            patch_size: PATCH_SIDE,
        }
    }
}

impl HqsSchedule {
    /// The default schedule truncated (or extended by doubling) to `n` stages.
    pub fn with_iterations(n: usize) -> Self {
        let mut s = HqsSchedule::default();
        s.betas = (0..n).map(|i| 50.0 * f64::powi(2.0, i as i32)).collect();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("betas must be positive".into());
        }
        if self.betas.windows(2).any(|w| w[1] <= w[0]) {
            return bad("betas must be strictly increasing".into());
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return bad("CG tolerance and iteration cap must be positive".into());
        }
        if self.patch_size != PATCH_SIDE {
            return bad(format!("patch size must be {PATCH_SIDE}"));
        }
        Ok(())
    }
}

/// All overlapping 8x8 windows of a `width x height` plane at stride 1, in
/// row-major order of their top-left corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    width: usize,
    height: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < PATCH_SIDE || height < PATCH_SIDE {
            return Err(Error::InvalidParameter(format!(
                "image {width}x{height} is smaller than one {PATCH_SIDE}x{PATCH_SIDE} patch"
            )));
        }
        Ok(PatchGrid { width, height })
    }

    fn cols(&self) -> usize {
        self.width - PATCH_SIDE + 1
    }

    pub fn len(&self) -> usize {
        self.cols() * (self.height - PATCH_SIDE + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `R_i x` for every patch, as `len() x 64` row-major.
    pub fn extract(&self, plane: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut out = vec![0.0; self.len() * PATCH_DIM];
        out.par_chunks_mut(PATCH_DIM).enumerate().for_each(|(i, p)| {
            let (x0, y0) = (i % cols, i / cols);
            for dy in 0..PATCH_SIDE {
                let src = (y0 + dy) * self.width + x0;
                p[dy * PATCH_SIDE..(dy + 1) * PATCH_SIDE].copy_from_slice(&plane[src..src + PATCH_SIDE]);
            }
        });
        out
    }

    /// `Σ R_i^T z_i`.
    pub fn accumulate(&self, patches: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut out = vec![0.0; self.width * self.height];
        for (i, p) in patches.chunks(PATCH_DIM).enumerate() {
            let (x0, y0) = (i % cols, i / cols);
            for dy in 0..PATCH_SIDE {
                let dst = (y0 + dy) * self.width + x0;
                for (o, v) in out[dst..dst + PATCH_SIDE].iter_mut().zip(&p[dy * PATCH_SIDE..]) {
                    *o += v;
                }
            }
        }
        out
    }

    /// Diagonal of `Σ R_i^T R_i`: how many patches cover each pixel.
    pub fn coverage(&self) -> Vec<f64> {
        let span = |p: usize, n: usize| {
            let lo = p.saturating_sub(PATCH_SIDE - 1);
            let hi = p.min(n - PATCH_SIDE);
            (hi + 1 - lo) as f64
        };
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(span(x, self.width) * span(y, self.height));
            }
        }
        out
    }
}

/// `(λ/2)‖Kx − O‖² + (β/2) Σ ‖R_i x − z_i‖²`.
pub fn surrogate_objective(
    op: &NonUniformOperator,
    observed: &[f64],
    x: &[f64],
    patches: &[f64],
    lambda: f64,
    beta: f64,
) -> Result<f64> {
    let grid = PatchGrid::new(op.width(), op.height())?;
    let kx = op.apply_plane(x)?;
    let data: f64 = kx.iter().zip(observed).map(|(a, b)| (a - b) * (a - b)).sum();
    let rx = grid.extract(x);
    let coupling: f64 = rx.iter().zip(patches).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * lambda * data + 0.5 * beta * coupling)
}

/// Minimizes [`surrogate_objective`] over `x` by solving
/// `(λK^TK + βΣR_i^TR_i) x = λK^TO + βΣR_i^Tz_i` with Jacobi-preconditioned
/// CG, warm-started from `x`.
#[allow(clippy::too_many_arguments)]
pub fn solve_x(
    op: &NonUniformOperator,
    observed: &[f64],
    patches: &[f64],
    lambda: f64,
    beta: f64,
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgResult> {
    let grid = PatchGrid::new(op.width(), op.height())?;
    let n = op.width() * op.height();
    if observed.len() != n || x.len() != n {
        return Err(Error::dims(n, observed.len().min(x.len())));
    }
    if patches.len() != grid.len() * PATCH_DIM {
        return Err(Error::dims(grid.len() * PATCH_DIM, patches.len()));
    }
    let coverage = grid.coverage();
    let kto = op.apply_adjoint_plane(observed)?;
    let rtz = grid.accumulate(patches);
    let b: Vec<f64> = (0..n).map(|i| lambda * kto[i] + beta * rtz[i]).collect();
    let gram = op.gram_diagonal();
    let inv_diag: Vec<f64> = (0..n).map(|i| 1.0 / (lambda * gram[i] + beta * coverage[i])).collect();
    let apply_a = |v: &[f64], out: &mut [f64]| {
        let kv = op.apply_plane(v).expect("dims checked");
        let ktkv = op.apply_adjoint_plane(&kv).expect("dims checked");
        for i in 0..n {
            out[i] = lambda * ktkv[i] + beta * coverage[i] * v[i];
        }
    };
    Ok(pcg(apply_a, &b, &inv_diag, x, tol, max_iter))
}

/// Bookkeeping for one β stage of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub channel: usize,
    pub beta: f64,
    /// Surrogate objective after the patch update.
    pub after_z: f64,
    /// Surrogate objective after the image update.
    pub after_x: f64,
    pub cg: CgResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeblurOutput {
    pub image: ImageBuffer,
    pub stages: Vec<StageReport>,
}

/// Non-blind deconvolution of `observed` under the blur field `field`.
pub fn deblur(
    observed: &ImageBuffer,
    field: &MotionField,
    prior: &GmmPrior,
    schedule: &HqsSchedule,
) -> Result<ImageBuffer> {
    Ok(deblur_with_report(observed, field, prior, schedule)?.image)
}

pub fn deblur_with_report(
    observed: &ImageBuffer,
    field: &MotionField,
    prior: &GmmPrior,
    schedule: &HqsSchedule,
) -> Result<DeblurOutput> {
    schedule.validate()?;
    if observed.dims() != field.dims() {
        return Err(Error::dims(
            format!("{}x{} field", observed.width(), observed.height()),
            format!("{}x{}", field.width(), field.height()),
        ));
    }
    if schedule.betas.is_empty() {
        return Ok(DeblurOutput { image: observed.clone(), stages: Vec::new() });
    }
    let grid = PatchGrid::new(observed.width(), observed.height())?;
    let op = NonUniformOperator::new(field)?;
    let zsteps = schedule
        .betas
        .iter()
        .map(|&b| ZStep::new(prior, b))
        .collect::<Result<Vec<_>>>()?;
    let mut planes = Vec::new();
    let mut stages = Vec::new();
    for c in 0..observed.channels() {
        let obs = observed.channel(c).into_vec();
        let mut x = obs.clone();
        for zstep in &zsteps {
            let beta = zstep.beta();
            let mut z = grid.extract(&x);
            zstep.apply(&mut z);
            let after_z = surrogate_objective(&op, &obs, &x, &z, schedule.lambda, beta)?;
            let cg = solve_x(&op, &obs, &z, schedule.lambda, beta, &mut x, schedule.cg_tol, schedule.cg_max_iter)?;
            let after_x = surrogate_objective(&op, &obs, &x, &z, schedule.lambda, beta)?;
            info!(
                "channel {c} beta {beta}: objective {after_z:.6e} -> {after_x:.6e}, CG {} iterations, residual {:.2e}",
                cg.iterations, cg.relative_residual
            );
            stages.push(StageReport { channel: c, beta, after_z, after_x, cg });
        }
        planes.push(ImageBuffer::from_vec(observed.width(), observed.height(), 1, x)?);
    }
    let mut image = ImageBuffer::from_channels(&planes)?;
    image.clamp01();
    Ok(DeblurOutput { image, stages })
}
