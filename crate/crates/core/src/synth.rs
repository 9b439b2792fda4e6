//! Ground-truth blur fields, synthetic blurring and training-patch export.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{self, Reader};
use crate::deconv::NonUniformOperator;
use crate::error::{Error, Result};
use crate::image::{quantize_u8, ImageBuffer};
use crate::motion::{base_candidate_set, canonicalize, MotionField, MotionVector, D_MAX};
use crate::predict::{Patch, PATCH_SIZE};

/// Border kept clear of crops so that blur never reads replicated edges.
pub const CROP_MARGIN: usize = 13;

const MAGIC: &[u8; 4] = b"PTCH";
const RECORD_SAMPLES: usize = PATCH_SIZE * PATCH_SIZE * 3;

/// A field with the same motion `(u, v)` at every pixel.
pub fn field_translation(width: usize, height: usize, u: f64, v: f64) -> Result<MotionField> {
    let m = MotionVector::from_cartesian(u, v)?;
    if m.length() > D_MAX {
        return Err(Error::InvalidMotion(format!("translation length {} exceeds {D_MAX}", m.length())));
    }
    Ok(MotionField::uniform(width, height, m))
}

/// In-plane camera rotation by `omega` radians about `center`: every pixel
/// moves tangentially with length `1 + r|omega|`.
pub fn field_rotation(width: usize, height: usize, center: (f64, f64), omega: f64) -> Result<MotionField> {
    if !omega.is_finite() || !center.0.is_finite() || !center.1.is_finite() {
        return Err(Error::InvalidParameter("rotation parameters must be finite".into()));
    }
    let r_max = [(0.0, 0.0), (width as f64 - 1.0, 0.0), (0.0, height as f64 - 1.0), (width as f64 - 1.0, height as f64 - 1.0)]
        .iter()
        .map(|&(x, y): &(f64, f64)| (x - center.0).hypot(y - center.1))
        .fold(0.0, f64::max);
    if r_max * omega.abs() > D_MAX - 1.0 {
        return Err(Error::InvalidMotion(format!(
            "rotation {omega} gives length {:.2} at radius {r_max:.1}, above {D_MAX}",
            1.0 + r_max * omega.abs()
        )));
    }
    let mut err = None;
    let field = MotionField::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
        let r = dx.hypot(dy);
        let length = (1.0 + r * omega.abs()).clamp(1.0, D_MAX);
        let orientation = dy.atan2(dx).to_degrees() + 90.0;
        canonicalize(length, orientation).unwrap_or_else(|e| {
            err.get_or_insert(e);
            MotionVector::IDENTITY
        })
    });
    match err {
        Some(e) => Err(e),
        None => Ok(field),
    }
}

/// Applies the spatially varying blur of `field` to `sharp`.
pub fn blur_with_field(sharp: &ImageBuffer, field: &MotionField) -> Result<ImageBuffer> {
    NonUniformOperator::new(field)?.apply(sharp)
}

/// Where one training record comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlan {
    /// Index into the base candidate set.
    pub label: u8,
    pub image: usize,
    /// Top-left corner of the 30x30 crop.
    pub x0: usize,
    pub y0: usize,
}

/// Chooses labels (cycling through the base set, so counts differ by at most
/// one) and crop positions for `count` records.
pub fn plan_training_patches(images: &[ImageBuffer], count: usize, seed: u64) -> Result<Vec<PatchPlan>> {
    let min_side = PATCH_SIZE + 2 * CROP_MARGIN;
    let usable: Vec<usize> = (0..images.len())
        .filter(|&i| images[i].width() >= min_side && images[i].height() >= min_side)
        .collect();
    if usable.is_empty() {
        return Err(Error::IncompleteInput(format!("need at least one source image of {min_side}x{min_side} or larger")));
    }
    let n_labels = base_candidate_set().len();
    Ok((0..count)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let image = usable[rng.gen_range(0..usable.len())];
            let im = &images[image];
            PatchPlan {
                label: (r % n_labels) as u8,
                image,
                x0: rng.gen_range(CROP_MARGIN..=im.width() - CROP_MARGIN - PATCH_SIZE),
                y0: rng.gen_range(CROP_MARGIN..=im.height() - CROP_MARGIN - PATCH_SIZE),
            }
        })
        .collect())
}

/// Blurs the neighbourhood of one planned crop with its label's kernel and
/// returns the 30x30 RGB crop.
pub fn render_plan(images: &[ImageBuffer], plan: &PatchPlan) -> Result<ImageBuffer> {
    let m = CROP_MARGIN;
    let src = images
        .get(plan.image)
        .ok_or_else(|| Error::InvalidParameter(format!("plan refers to image {}", plan.image)))?;
    let region = src.to_rgb().crop(plan.x0 - m, plan.y0 - m, PATCH_SIZE + 2 * m, PATCH_SIZE + 2 * m)?;
    let vector = base_candidate_set().vector(plan.label as usize);
    let field = MotionField::uniform(region.width(), region.height(), vector);
    NonUniformOperator::exact(&field)?.apply(&region)?.crop(m, m, PATCH_SIZE, PATCH_SIZE)
}

/// Labelled 30x30 RGB patches, the classifier's training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchDataset {
    labels: Vec<u8>,
    samples: Vec<u8>,
}

impl PatchDataset {
    pub fn new(labels: Vec<u8>, samples: Vec<u8>) -> Result<Self> {
        if samples.len() != labels.len() * RECORD_SAMPLES {
            return Err(Error::dims(labels.len() * RECORD_SAMPLES, samples.len()));
        }
        let n_labels = base_candidate_set().len();
        if let Some(l) = labels.iter().find(|&&l| l as usize >= n_labels) {
            return Err(Error::InvalidParameter(format!("label {l} is outside the base set")));
        }
        Ok(PatchDataset { labels, samples })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Interleaved RGB samples of record `index`.
    pub fn samples(&self, index: usize) -> &[u8] {
        &self.samples[index * RECORD_SAMPLES..(index + 1) * RECORD_SAMPLES]
    }

    pub fn patch(&self, index: usize) -> Result<Patch> {
        if index >= self.len() {
            return Err(Error::InvalidParameter(format!("record {index} of {}", self.len())));
        }
        let half = PATCH_SIZE / 2;
        Ok(Patch {
            center: (half, half),
            rotation_deg: 0.0,
            pixels: ImageBuffer::from_u8(PATCH_SIZE, PATCH_SIZE, 3, self.samples(index))?,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * (1 + RECORD_SAMPLES));
        out.extend_from_slice(MAGIC);
        codec::put_u32(&mut out, self.len() as u32);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.samples(i));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<PatchDataset> {
        let mut r = Reader::new("PTCH", bytes);
        r.magic(MAGIC)?;
        let count = r.u32()? as usize;
        let need = count.checked_mul(1 + RECORD_SAMPLES);
        if need != Some(r.remaining()) {
            return Err(r.error(format!("{count} records do not match {} payload bytes", r.remaining())));
        }
        let n_labels = base_candidate_set().len();
        let mut labels = Vec::with_capacity(count);
        let mut samples = Vec::with_capacity(count * RECORD_SAMPLES);
        for _ in 0..count {
            let at = r.offset();
            let label = r.u8()?;
            if label as usize >= n_labels {
                return Err(Error::format("PTCH", at, format!("label {label} is outside [0, {n_labels})")));
            }
            labels.push(label);
            samples.extend_from_slice(r.take(RECORD_SAMPLES)?);
        }
        r.finish()?;
        Ok(PatchDataset { labels, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<PatchDataset> {
        PatchDataset::decode(&codec::read_file(path)?)
    }
}

/// Renders `count` labelled patches from `images`; deterministic in `seed`.
pub fn export_training_patches(images: &[ImageBuffer], count: usize, seed: u64) -> Result<PatchDataset> {
    let plans = plan_training_patches(images, count, seed)?;
    let crops = plans
        .par_iter()
        .map(|p| render_plan(images, p))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(count * RECORD_SAMPLES);
    for c in &crops {
        samples.extend(c.data().iter().map(|&v| quantize_u8(v)));
    }
    PatchDataset::new(plans.iter().map(|p| p.label).collect(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rasterize;

    fn texture(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn translation_fields() {
        let f = field_translation(4, 3, 1.0, 0.0).unwrap();
        assert!(f.vectors().iter().all(|m| m.is_identity()));
        let f = field_translation(4, 3, 7.79, 4.5).unwrap();
        for m in f.vectors() {
            assert!((m.length() - 9.0).abs() < 1e-2);
            assert!((m.orientation() - 30.0).abs() < 0.05);
        }
        assert_eq!(f, field_translation(4, 3, 7.79, 4.5).unwrap());
        assert!(field_translation(4, 3, 30.0, 0.0).is_err());
    }

    #[test]
    fn rotation_field_geometry() {
        let f = field_rotation(41, 41, (20.0, 20.0), 0.05).unwrap();
        assert!(f.get(20, 20).is_identity());
        let m = f.get(30, 20);
        assert!((m.orientation() - 90.0).abs() < 1e-9);
        assert!((m.length() - 1.5).abs() < 1e-12);
        assert!(f.get(20, 30).orientation().abs() < 1e-9);
        let lengths: Vec<f64> = (20..41).map(|x| f.get(x, 20).length()).collect();
        assert!(lengths.windows(2).all(|w| w[1] > w[0]));
        for y in 0..41 {
            for x in 0..41 {
                let (a, b) = (f.get(x, y), f.get(40 - x, 40 - y));
                assert!((a.length() - b.length()).abs() < 1e-9);
                let d = (a.orientation() - b.orientation()).abs();
                assert!(d < 1e-6 || (d - 180.0).abs() < 1e-6, "({x},{y}) {a:?} {b:?}");
            }
        }
        assert!(f.max_length() <= D_MAX);
        assert!(field_rotation(41, 41, (20.0, 20.0), 1.0).is_err());
        assert!(field_rotation(41, 41, (20.0, 20.0), f64::NAN).is_err());
    }

    #[test]
    fn one_record_per_label() {
        let imgs = vec![texture(64, 60, 1), texture(70, 70, 2)];
        let ds = export_training_patches(&imgs, 73, 5).unwrap();
        let mut labels = ds.labels().to_vec();
        labels.sort();
        assert_eq!(labels, (0..73).collect::<Vec<u8>>());
    }

    #[test]
    fn labels_are_balanced() {
        let imgs = vec![texture(60, 60, 1)];
        let ds = export_training_patches(&imgs, 100, 0).unwrap();
        let mut counts = [0usize; 73];
        for &l in ds.labels() {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn export_is_deterministic() {
        let imgs = vec![texture(60, 64, 3)];
        let a = export_training_patches(&imgs, 20, 9).unwrap().encode();
        let b = export_training_patches(&imgs, 20, 9).unwrap().encode();
        assert_eq!(a, b);
        assert_ne!(a, export_training_patches(&imgs, 20, 10).unwrap().encode());
    }

    #[test]
    fn labels_match_the_blur_used() {
        let imgs = vec![texture(80, 72, 4), texture(60, 60, 6)];
        let plans = plan_training_patches(&imgs, 30, 2).unwrap();
        let ds = export_training_patches(&imgs, 30, 2).unwrap();
        for (i, p) in plans.iter().enumerate() {
            assert_eq!(ds.labels()[i], p.label);
            // Direct convolution of the source with the label's kernel.
            let k = rasterize(&base_candidate_set().vector(p.label as usize), 25).unwrap();
            let src = &imgs[p.image];
            for (j, &got) in ds.samples(i).iter().enumerate() {
                let (c, px) = (j % 3, j / 3);
                let (x, y) = (p.x0 + px % PATCH_SIZE, p.y0 + px / PATCH_SIZE);
                let mut acc = 0.0;
                for (dx, dy, w) in k.taps() {
                    acc += w * src.get((x as isize - dx) as usize, (y as isize - dy) as usize, c);
                }
                assert_eq!(got, quantize_u8(acc));
            }
        }
    }

    #[test]
    fn small_images_are_rejected() {
        assert!(matches!(
            export_training_patches(&[texture(40, 80, 1)], 5, 0),
            Err(Error::IncompleteInput(_))
        ));
    }

    #[test]
    fn dataset_codec() {
        let ds = export_training_patches(&[texture(56, 56, 7)], 4, 1).unwrap();
        let bytes = ds.encode();
        assert_eq!(bytes.len(), 8 + 4 * 2701);
        assert_eq!(PatchDataset::decode(&bytes).unwrap(), ds);
        assert!(PatchDataset::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 73;
        assert!(matches!(PatchDataset::decode(&bad), Err(Error::Format { offset: 8, .. })));
        let mut bad = bytes;
        bad[4] = 0xff;
        assert!(PatchDataset::decode(&bad).is_err());
        let p = ds.patch(2).unwrap();
        assert_eq!(p.pixels.to_u8(), ds.samples(2));
        assert!(ds.patch(4).is_err());
    }
}
