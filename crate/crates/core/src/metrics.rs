//! Scores for estimated motion fields and restored images.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::motion::{rasterize, BlurKernel, MotionField, MotionVector, D_MAX};

fn check_fields(a: &MotionField, b: &MotionField) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(
            format!("{}x{}", b.width(), b.height()),
            format!("{}x{}", a.width(), a.height()),
        ));
    }
    Ok(())
}

/// Half the mean squared `(u, v)` error per pixel.
pub fn mse_motion(est: &MotionField, gt: &MotionField) -> Result<f64> {
    check_fields(est, gt)?;
    let sum: f64 = est
        .vectors()
        .iter()
        .zip(gt.vectors())
        .map(|(a, b)| {
            let ((ua, va), (ub, vb)) = (a.to_cartesian(), b.to_cartesian());
            (ua - ub).powi(2) + (va - vb).powi(2)
        })
        .sum();
    Ok(sum / (2.0 * est.vectors().len() as f64))
}

/// PSNR of a motion MSE with peak `D_MAX`; infinite for a perfect match.
pub fn psnr_from_mse_motion(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (mse / (D_MAX * D_MAX)).log10()
    }
}

pub fn psnr_motion(est: &MotionField, gt: &MotionField) -> Result<f64> {
    mse_motion(est, gt).map(psnr_from_mse_motion)
}

/// Mean over pixels of the per-element squared difference between the two
/// centred `support x support` kernels.
pub fn mse_ker(est: &MotionField, gt: &MotionField, support: usize) -> Result<f64> {
    check_fields(est, gt)?;
    let mut cache: HashMap<(u64, u64), BlurKernel> = HashMap::new();
    let mut kernel = |m: &MotionVector| -> Result<BlurKernel> {
        let key = (m.length().to_bits(), m.orientation().to_bits());
        if let Some(k) = cache.get(&key) {
            return Ok(k.clone());
        }
        let k = rasterize(m, support)?;
        cache.insert(key, k.clone());
        Ok(k)
    };
    let mut total = 0.0;
    for (a, b) in est.vectors().iter().zip(gt.vectors()) {
        if a == b {
            continue;
        }
        let (ka, kb) = (kernel(a)?, kernel(b)?);
        let s: f64 = ka.weights().iter().zip(kb.weights()).map(|(x, y)| (x - y).powi(2)).sum();
        total += s / (support * support) as f64;
    }
    Ok(total / est.vectors().len() as f64)
}

/// PSNR with peak 1 over every sample of every channel.
pub fn psnr_image(image: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    if image.dims() != reference.dims() || image.channels() != reference.channels() {
        return Err(Error::dims(
            format!("{}x{}x{}", reference.width(), reference.height(), reference.channels()),
            format!("{}x{}x{}", image.width(), image.height(), image.channels()),
        ));
    }
    let n = image.data().len() as f64;
    let mse = image.data().iter().zip(reference.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Formats a metric for `key=value` reports; infinity prints as `inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::canonicalize;

    fn field_uv(w: usize, h: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> MotionField {
        MotionField::from_fn(w, h, |x, y| {
            let (u, v) = f(x, y);
            MotionVector::from_cartesian(u, v).unwrap()
        })
    }

    #[test]
    fn mse_motion_examples() {
        let gt = field_uv(4, 5, |_, _| (5.0, 2.0));
        assert_eq!(mse_motion(&gt, &gt).unwrap(), 0.0);
        let off = field_uv(4, 5, |_, _| (8.0, 6.0));
        assert!((mse_motion(&off, &gt).unwrap() - 12.5).abs() < 1e-12);
        assert!((mse_motion(&gt, &off).unwrap() - 12.5).abs() < 1e-12);
        let a = field_uv(4, 5, |x, y| if (x, y) == (2, 3) { (10.0, 0.0) } else { (5.0, 0.0) });
        let b = field_uv(4, 5, |_, _| (5.0, 0.0));
        assert!((mse_motion(&a, &b).unwrap() - 12.5 / 20.0).abs() < 1e-12);
        assert!(mse_motion(&a, &field_uv(5, 4, |_, _| (5.0, 0.0))).is_err());
    }

    #[test]
    fn psnr_motion_examples() {
        assert!((psnr_from_mse_motion(6.25) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse_motion(625.0), 0.0);
        let f = field_uv(3, 3, |x, _| (x as f64 + 2.0, 1.0));
        assert_eq!(psnr_motion(&f, &f).unwrap(), f64::INFINITY);
        let ps: Vec<f64> = [0.1, 1.0, 10.0, 100.0].iter().map(|&m| psnr_from_mse_motion(m)).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn mse_ker_examples() {
        let id = MotionField::uniform(3, 2, MotionVector::IDENTITY);
        assert_eq!(mse_ker(&id, &id, 25).unwrap(), 0.0);
        let line = MotionField::uniform(3, 2, canonicalize(5.0, 0.0).unwrap());
        // Delta at the centre against five taps of 0.2 in the centre row.
        let expected = ((1.0f64 - 0.2).powi(2) + 4.0 * 0.04) / 625.0;
        assert!((mse_ker(&id, &line, 25).unwrap() - expected).abs() < 1e-15);
        let expected9 = ((1.0f64 - 0.2).powi(2) + 4.0 * 0.04) / 81.0;
        assert!((mse_ker(&id, &line, 9).unwrap() - expected9).abs() < 1e-15);
    }

    #[test]
    fn psnr_image_examples() {
        let a = ImageBuffer::filled(4, 4, 3, 0.5);
        assert_eq!(psnr_image(&a, &a).unwrap(), f64::INFINITY);
        let b = ImageBuffer::filled(4, 4, 3, 0.6);
        assert!((psnr_image(&b, &a).unwrap() - 20.0).abs() < 1e-9);
        let c = ImageBuffer::from_fn(4, 4, 1, |x, y, _| ((x + y) % 2) as f64);
        let d = ImageBuffer::from_fn(4, 4, 1, |x, y, _| ((x + y + 1) % 2) as f64);
        assert_eq!(psnr_image(&c, &d).unwrap(), 0.0);
        assert!(psnr_image(&a, &ImageBuffer::filled(4, 4, 1, 0.5)).is_err());
    }

    #[test]
    fn formatting() {
        assert_eq!(format_value(f64::INFINITY), "inf");
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(12.5), "12.5");
    }
}
