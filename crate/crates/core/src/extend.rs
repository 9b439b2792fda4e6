//! Extension of base-set predictions to the 361-vector set by predicting on
//! rotated copies of the image.
//!
//! Rotating an image by `theta` turns a blur at orientation `o` into one at
//! `o + theta`. A classifier that only knows multiples of 30 degrees therefore
//! sees `(l, o)` in the image rotated by `-6k` exactly when the original blur
//! is `(l, o + 6k)`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::motion::{base_candidate_set, extended_candidate_set, SetKind};
use crate::predict::{patch_centers, MotionDistribution, Patch, PatchPredictor, PATCH_SIZE};

/// Rotations, in degrees, whose predictions make up the extended set.
pub const BRANCH_ANGLES: [i32; 5] = [0, -6, -12, -18, -24];

/// A rotated image together with the map from source to canvas coordinates.
#[derive(Debug, Clone)]
pub struct RotatedImage {
    pub image: ImageBuffer,
    pub theta_deg: f64,
    src_center: (f64, f64),
    dst_center: (f64, f64),
    cos: f64,
    sin: f64,
}

impl RotatedImage {
    /// Position in the rotated canvas of source point `(x, y)`.
    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.src_center.0, y - self.src_center.1);
        (
            self.dst_center.0 + self.cos * dx - self.sin * dy,
            self.dst_center.1 + self.sin * dx + self.cos * dy,
        )
    }

    /// Source position of canvas point `(x, y)`.
    pub fn unmap_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.dst_center.0, y - self.dst_center.1);
        (
            self.src_center.0 + self.cos * dx + self.sin * dy,
            self.src_center.1 - self.sin * dx + self.cos * dy,
        )
    }

    pub fn src_center(&self) -> (f64, f64) {
        self.src_center
    }

    pub fn dst_center(&self) -> (f64, f64) {
        self.dst_center
    }
}

/// Rotates about the image centre by `theta_deg` (positive turns +x towards
/// +y). The canvas grows to hold the rotated bounds, keeping the parity of
/// each side so the centre stays on the same sub-pixel phase; samples are
/// bilinear with edge replication.
pub fn rotate_image(image: &ImageBuffer, theta_deg: f64) -> Result<RotatedImage> {
    if !(theta_deg.abs() < 90.0) {
        return Err(Error::InvalidParameter(format!(
            "rotation {theta_deg} outside (-90, 90)"
        )));
    }
    let (w, h) = image.dims();
    let (sin, cos) = theta_deg.to_radians().sin_cos();
    let grow = |a: f64, orig: usize| {
        let mut n = (a - 1e-9).ceil().max(orig as f64) as usize;
        if (n - orig) % 2 == 1 {
            n += 1;
        }
        n
    };
    let (wf, hf) = (w as f64, h as f64);
    let new_w = grow(wf * cos.abs() + hf * sin.abs(), w);
    let new_h = grow(wf * sin.abs() + hf * cos.abs(), h);
    let mut rotated = RotatedImage {
        image: ImageBuffer::new(new_w, new_h, image.channels()),
        theta_deg,
        src_center: ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0),
        dst_center: ((new_w as f64 - 1.0) / 2.0, (new_h as f64 - 1.0) / 2.0),
        cos,
        sin,
    };
    if theta_deg == 0.0 {
        rotated.image = image.clone();
        return Ok(rotated);
    }
    let channels = image.channels();
    let rows: Vec<Vec<f64>> = (0..new_h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(new_w * channels);
            for x in 0..new_w {
                let (sx, sy) = rotated.unmap_point(x as f64, y as f64);
                for c in 0..channels {
                    row.push(image.sample_bilinear(sx, sy, c));
                }
            }
            row
        })
        .collect();
    rotated.image = ImageBuffer::from_vec(new_w, new_h, channels, rows.concat())?;
    Ok(rotated)
}

/// Merges the five branch predictions into one extended-set distribution.
///
/// Branch `-6k` contributes its `(l, o)` entries to `(l, o + 6k)`. The five
/// identity entries are averaged and the result is renormalized.
pub fn extend_distribution(preds: &BTreeMap<i32, MotionDistribution>) -> Result<MotionDistribution> {
    let base = base_candidate_set();
    let ext = extended_candidate_set();
    let mut probs = vec![0.0; ext.len()];
    for (k, theta) in BRANCH_ANGLES.iter().enumerate() {
        let d = preds
            .get(theta)
            .ok_or_else(|| Error::IncompleteInput(format!("no prediction for rotation {theta}")))?;
        if d.set() != SetKind::Base {
            return Err(Error::InvalidParameter(format!(
                "rotation {theta}: expected a base-set distribution"
            )));
        }
        probs[0] += d.probs()[0] / BRANCH_ANGLES.len() as f64;
        for li in 1..base.lengths().len() {
            for oi in 0..base.orientations().len() {
                // Base orientations are 30 apart, extended ones 6 apart.
                let target = ext.grid_index(li, 5 * oi + k);
                probs[target] = d.probs()[base.grid_index(li, oi)];
            }
        }
    }
    MotionDistribution::from_weights(SetKind::Extended, probs)
}

fn clamp_center(c: f64, size: usize) -> usize {
    let half = (PATCH_SIZE / 2) as f64;
    c.round().clamp(half, (size - PATCH_SIZE / 2) as f64) as usize
}

/// Predicts extended-set distributions at every stride-`stride` patch centre
/// of `image`, cropping each branch's patch at the rotated centre.
pub fn predict_extended(
    image: &ImageBuffer,
    predictor: &dyn PatchPredictor,
    stride: usize,
) -> Result<Vec<((usize, usize), MotionDistribution)>> {
    let centers = patch_centers(image.width(), image.height(), stride)?;
    let rgb = image.to_rgb();
    let branches: Vec<Vec<MotionDistribution>> = BRANCH_ANGLES
        .par_iter()
        .map(|&theta| {
            let rot = rotate_image(&rgb, theta as f64)?;
            let (cw, ch) = rot.image.dims();
            centers
                .par_iter()
                .map(|&(x, y)| {
                    let (mx, my) = rot.map_point(x as f64, y as f64);
                    let (mx, my) = (clamp_center(mx, cw), clamp_center(my, ch));
                    let half = PATCH_SIZE / 2;
                    let pixels = rot.image.crop(mx - half, my - half, PATCH_SIZE, PATCH_SIZE)?;
                    predictor.predict(&Patch {
                        center: (x, y),
                        rotation_deg: theta as f64,
                        pixels,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    centers
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let map: BTreeMap<i32, MotionDistribution> = BRANCH_ANGLES
                .iter()
                .zip(&branches)
                .map(|(&t, b)| (t, b[i].clone()))
                .collect();
            Ok((c, extend_distribution(&map)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{canonicalize, MotionField, MotionVector};
    use crate::predict::OraclePredictor;

    fn mv(l: f64, o: f64) -> MotionVector {
        canonicalize(l, o).unwrap()
    }

    fn uniform_branches() -> BTreeMap<i32, MotionDistribution> {
        BRANCH_ANGLES
            .iter()
            .map(|&t| (t, MotionDistribution::uniform(SetKind::Base)))
            .collect()
    }

    fn smooth_image(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |x, y, _| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.25 * (x / 9.0).sin() * (y / 11.0).cos() + 0.1 * ((x + y) / 15.0).cos()
        })
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = smooth_image(33, 20);
        let r = rotate_image(&img, 0.0).unwrap();
        assert_eq!(r.image, img);
        assert_eq!(r.map_point(4.0, 7.0), (4.0, 7.0));
    }

    #[test]
    fn centre_is_fixed() {
        for (w, h) in [(31, 31), (40, 26), (65, 90)] {
            let img = smooth_image(w, h);
            for theta in [-24.0, -6.0, 13.0, 45.0] {
                let r = rotate_image(&img, theta).unwrap();
                let (cx, cy) = r.map_point((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
                assert!((cx - r.dst_center().0).abs() < 1e-12);
                assert!((cy - r.dst_center().1).abs() < 1e-12);
                // Same half-pixel phase as the source centre.
                assert_eq!(cx.fract(), ((w as f64 - 1.0) / 2.0).fract());
            }
        }
    }

    #[test]
    fn rotation_round_trip_error_is_small() {
        let img = smooth_image(64, 64);
        let a = rotate_image(&img, -6.0).unwrap();
        let b = rotate_image(&a.image, 6.0).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        for y in 12..52 {
            for x in 12..52 {
                let (ax, ay) = a.map_point(x as f64, y as f64);
                let (bx, by) = b.map_point(ax, ay);
                let back = b.image.sample_bilinear(bx, by, 0);
                sq += (back - img.get(x, y, 0)).powi(2);
                n += 1;
            }
        }
        let rms = (sq / n as f64).sqrt();
        assert!(rms < 0.02, "rms {rms}");
    }

    #[test]
    fn rotation_turns_orientation() {
        // A bright horizontal line turns into one at theta degrees.
        let img = ImageBuffer::from_fn(61, 61, 1, |_, y, _| if y == 30 { 1.0 } else { 0.0 });
        let r = rotate_image(&img, 30.0).unwrap();
        let (cx, cy) = r.dst_center();
        let (s, c) = 30f64.to_radians().sin_cos();
        let on = r.image.sample_bilinear(cx + 20.0 * c, cy + 20.0 * s, 0);
        let off = r.image.sample_bilinear(cx + 20.0 * c, cy - 20.0 * s, 0);
        assert!(on > 0.5 && off < 1e-9, "{on} {off}");
    }

    #[test]
    fn rejects_steep_rotation() {
        assert!(rotate_image(&smooth_image(8, 8), 90.0).is_err());
    }

    #[test]
    fn concatenation_places_branch_peak() {
        let base = base_candidate_set();
        let ext = extended_candidate_set();
        let mut preds = uniform_branches();
        preds.insert(-24, MotionDistribution::one_hot(SetKind::Base, base.index_of(&mv(9.0, 60.0)).unwrap()));
        let e = extend_distribution(&preds).unwrap();
        assert_eq!(ext.vector(e.argmax()), mv(9.0, 84.0));
    }

    #[test]
    fn uniform_in_uniform_out() {
        let e = extend_distribution(&uniform_branches()).unwrap();
        assert_eq!(e.len(), 361);
        for p in e.probs() {
            assert!((p - 1.0 / 361.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_entries_are_averaged() {
        let mut preds = uniform_branches();
        preds.insert(0, MotionDistribution::one_hot(SetKind::Base, 0));
        let e = extend_distribution(&preds).unwrap();
        assert_eq!(e.argmax(), 0);
        // (1 + 4/73) / 5 before renormalization.
        let raw_identity = (1.0 + 4.0 / 73.0) / 5.0;
        let raw_total = raw_identity + 4.0 * 72.0 / 73.0;
        assert!((e.probs()[0] - raw_identity / raw_total).abs() < 1e-12);
    }

    #[test]
    fn missing_branch_is_incomplete() {
        let mut preds = uniform_branches();
        preds.remove(&-18);
        assert!(matches!(extend_distribution(&preds), Err(Error::IncompleteInput(_))));
    }

    #[test]
    fn wrap_to_174() {
        let base = base_candidate_set();
        let ext = extended_candidate_set();
        let mut preds = uniform_branches();
        let src = base.index_of(&mv(13.0, 150.0)).unwrap();
        let mut p = vec![0.0; 73];
        p[src] = 0.5;
        p[0] = 0.5;
        preds.insert(-24, MotionDistribution::new(SetKind::Base, p).unwrap());
        let e = extend_distribution(&preds).unwrap();
        let target = ext.index_of(&mv(13.0, 174.0)).unwrap();
        let others: f64 = (1..361).filter(|&i| i != target).map(|i| e.probs()[i]).fold(0.0, f64::max);
        assert!(e.probs()[target] > others);
    }

    #[test]
    fn restriction_to_base_orientations_is_proportional() {
        let base = base_candidate_set();
        let ext = extended_candidate_set();
        let mut preds = BTreeMap::new();
        for (k, &t) in BRANCH_ANGLES.iter().enumerate() {
            let w: Vec<f64> = (0..73).map(|i| 1.0 + ((i * 7 + k * 13) % 11) as f64).collect();
            preds.insert(t, MotionDistribution::from_weights(SetKind::Base, w).unwrap());
        }
        let e = extend_distribution(&preds).unwrap();
        let zero = &preds[&0];
        let ratios: Vec<f64> = (1..73)
            .map(|i| e.probs()[ext.index_of(&base.vector(i)).unwrap()] / zero.probs()[i])
            .collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-12);
        }
        assert!((e.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_recovers_off_grid_orientation() {
        let gt = mv(9.0, 66.0);
        let img = ImageBuffer::filled(48, 48, 3, 0.5);
        let oracle = OraclePredictor::new(MotionField::uniform(48, 48, gt), 0.1)
            .unwrap()
            .with_falloff(0.5)
            .unwrap();
        let ext = extended_candidate_set();
        for (_, d) in predict_extended(&img, &oracle, 6).unwrap() {
            assert_eq!(ext.vector(d.argmax()), gt);
        }
    }

    #[test]
    fn base_members_survive_extension() {
        let img = ImageBuffer::filled(36, 36, 3, 0.5);
        let ext = extended_candidate_set();
        for gt in [mv(9.0, 30.0), MotionVector::IDENTITY] {
            let oracle = OraclePredictor::new(MotionField::uniform(36, 36, gt), 0.0)
                .unwrap()
                .with_falloff(0.5)
                .unwrap();
            for (_, d) in predict_extended(&img, &oracle, 6).unwrap() {
                assert_eq!(ext.vector(d.argmax()), gt);
            }
        }
    }
}
