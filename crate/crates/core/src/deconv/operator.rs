use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::motion::{rasterize, MotionField, MotionVector, DEFAULT_SUPPORT};

/// Cache resolution for kernels, in pixels of (u, v).
pub const KERNEL_QUANTUM: f64 = 0.25;

/// Rows per band when scattering the adjoint.
const BAND_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    dx: isize,
    dy: isize,
    w: f64,
}

/// The spatially varying blur `K_M` of a motion field, as a matrix-free
/// operator on single-channel planes.
///
/// `(K x)(p) = sum_o k_p(o) x(clamp(p - o))`: each pixel is blurred with its
/// own kernel, out-of-range reads replicate the nearest edge pixel, and
/// `apply_adjoint` is the exact transpose of that, including the clamping.
#[derive(Debug, Clone)]
pub struct NonUniformOperator {
    width: usize,
    height: usize,
    kernel_ids: Vec<u32>,
    kernels: Vec<Vec<Tap>>,
}

impl NonUniformOperator {
    pub fn new(field: &MotionField) -> Result<Self> {
        Self::with_support(field, DEFAULT_SUPPORT)
    }

    pub fn with_support(field: &MotionField, support: usize) -> Result<Self> {
        Self::build(field, support, Some(KERNEL_QUANTUM))
    }

    /// Rasterizes every distinct vector exactly instead of snapping (u, v)
    /// to the cache grid.
    pub fn exact(field: &MotionField) -> Result<Self> {
        Self::build(field, DEFAULT_SUPPORT, None)
    }

    fn build(field: &MotionField, support: usize, quantum: Option<f64>) -> Result<Self> {
        let mut cache: HashMap<(u64, u64), u32> = HashMap::new();
        let mut kernels = Vec::new();
        let mut kernel_ids = Vec::with_capacity(field.vectors().len());
        for m in field.vectors() {
            let q = match quantum {
                Some(step) => {
                    let (u, v) = m.to_cartesian();
                    MotionVector::from_cartesian((u / step).round() * step, (v / step).round() * step)?
                }
                None => *m,
            };
            let key = (q.length().to_bits(), q.orientation().to_bits());
            let id = match cache.get(&key) {
                Some(&id) => id,
                None => {
                    let k = rasterize(&q, support)?;
                    kernels.push(
                        k.taps()
                            .into_iter()
                            .map(|(dx, dy, w)| Tap { dx, dy, w })
                            .collect(),
                    );
                    let id = (kernels.len() - 1) as u32;
                    cache.insert(key, id);
                    id
                }
            };
            kernel_ids.push(id);
        }
        Ok(NonUniformOperator {
            width: field.width(),
            height: field.height(),
            kernel_ids,
            kernels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Number of distinct kernels after quantization.
    pub fn cached_kernels(&self) -> usize {
        self.kernels.len()
    }

    fn check_plane(&self, plane: &[f64]) -> Result<()> {
        if plane.len() != self.width * self.height {
            return Err(Error::dims(
                format!("{}x{} plane", self.width, self.height),
                format!("{} samples", plane.len()),
            ));
        }
        Ok(())
    }

    fn check_image(&self, image: &ImageBuffer) -> Result<()> {
        if image.dims() != self.dims() {
            return Err(Error::dims(
                format!("{}x{} image", self.width, self.height),
                format!("{}x{}", image.width(), image.height()),
            ));
        }
        Ok(())
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> usize {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        y * self.width + x
    }

    pub fn apply_plane(&self, plane: &[f64]) -> Result<Vec<f64>> {
        self.check_plane(plane)?;
        let w = self.width;
        let mut out = vec![0.0; plane.len()];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let taps = &self.kernels[self.kernel_ids[y * w + x] as usize];
                let mut acc = 0.0;
                for t in taps {
                    acc += t.w * plane[self.clamped(x as isize - t.dx, y as isize - t.dy)];
                }
                *o = acc;
            }
        });
        Ok(out)
    }

    pub fn apply_adjoint_plane(&self, plane: &[f64]) -> Result<Vec<f64>> {
        self.check_plane(plane)?;
        let (w, h) = (self.width, self.height);
        // Rows scattered from band [y0, y1) land in [y0 - r, y1 + r) after
        // clamping, r being the largest tap offset.
        let r = self
            .kernels
            .iter()
            .flatten()
            .map(|t| t.dy.unsigned_abs())
            .max()
            .unwrap_or(0);
        let bands: Vec<(usize, Vec<f64>)> = (0..h.div_ceil(BAND_ROWS))
            .into_par_iter()
            .map(|b| {
                let y0 = b * BAND_ROWS;
                let y1 = (y0 + BAND_ROWS).min(h);
                let lo = y0.saturating_sub(r);
                let hi = (y1 + r).min(h);
                let mut local = vec![0.0; (hi - lo) * w];
                for y in y0..y1 {
                    for x in 0..w {
                        let val = plane[y * w + x];
                        if val == 0.0 {
                            continue;
                        }
                        let taps = &self.kernels[self.kernel_ids[y * w + x] as usize];
                        for t in taps {
                            let j = self.clamped(x as isize - t.dx, y as isize - t.dy);
                            local[j - lo * w] += t.w * val;
                        }
                    }
                }
                (lo, local)
            })
            .collect();
        let mut out = vec![0.0; w * h];
        for (lo, local) in bands {
            for (o, v) in out[lo * w..lo * w + local.len()].iter_mut().zip(&local) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Diagonal of `K^T K`, used to precondition the normal equations.
    pub fn gram_diagonal(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut diag = vec![0.0; w * h];
        let mut row: Vec<(usize, f64)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                row.clear();
                for t in &self.kernels[self.kernel_ids[y * w + x] as usize] {
                    let j = self.clamped(x as isize - t.dx, y as isize - t.dy);
                    match row.iter_mut().find(|(c, _)| *c == j) {
                        Some(e) => e.1 += t.w,
                        None => row.push((j, t.w)),
                    }
                }
                for &(j, v) in &row {
                    diag[j] += v * v;
                }
            }
        }
        diag
    }

    pub fn apply(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        self.check_image(image)?;
        self.per_channel(image, |p| self.apply_plane(p))
    }

    pub fn apply_adjoint(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        self.check_image(image)?;
        self.per_channel(image, |p| self.apply_adjoint_plane(p))
    }

    fn per_channel(
        &self,
        image: &ImageBuffer,
        f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<ImageBuffer> {
        let planes = (0..image.channels())
            .map(|c| {
                let out = f(image.channel(c).data())?;
                ImageBuffer::from_vec(self.width, self.height, 1, out)
            })
            .collect::<Result<Vec<_>>>()?;
        ImageBuffer::from_channels(&planes)
    }
}

/// Blurs `image` with the spatially varying kernels of `field`.
pub fn apply(field: &MotionField, image: &ImageBuffer) -> Result<ImageBuffer> {
    NonUniformOperator::new(field)?.apply(image)
}

/// Transpose of [`apply`].
pub fn apply_adjoint(field: &MotionField, image: &ImageBuffer) -> Result<ImageBuffer> {
    NonUniformOperator::new(field)?.apply_adjoint(image)
}
