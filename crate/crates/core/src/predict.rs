//! Patch-level motion distributions: the ground-truth oracle, the CNN
//! forward pass and the `CNNW` weight-file format.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::motion::{base_candidate_set, canonicalize, candidate_set, MotionField, SetKind};

/// Side length of the square patches fed to the predictor.
pub const PATCH_SIZE: usize = 30;

/// Spacing of patch centres when scanning an image.
pub const DEFAULT_STRIDE: usize = 6;

/// Probability vector over one of the candidate sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDistribution {
    set: SetKind,
    probs: Vec<f64>,
}

impl MotionDistribution {
    /// Validates length, sign and normalization (to 1e-6).
    pub fn new(set: SetKind, probs: Vec<f64>) -> Result<Self> {
        let n = candidate_set(set).len();
        if probs.len() != n {
            return Err(Error::dims(format!("{n} probabilities"), probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(MotionDistribution { set, probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(set: SetKind, mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cannot normalize weights summing to {sum}"
            )));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(set, weights)
    }

    pub fn uniform(set: SetKind) -> Self {
        let n = candidate_set(set).len();
        MotionDistribution {
            set,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(set: SetKind, index: usize) -> Self {
        let mut probs = vec![0.0; candidate_set(set).len()];
        probs[index] = 1.0;
        MotionDistribution { set, probs }
    }

    pub fn set(&self) -> SetKind {
        self.set
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable candidate; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// A 30x30 RGB crop plus where it came from.
#[derive(Debug, Clone)]
pub struct Patch {
    /// Centre in the coordinates of the unrotated source image.
    pub center: (usize, usize),
    /// Rotation applied to the source image before cropping, in degrees.
    pub rotation_deg: f64,
    pub pixels: ImageBuffer,
}

/// Anything that maps a patch to a distribution over the base set.
pub trait PatchPredictor: Sync {
    fn predict(&self, patch: &Patch) -> Result<MotionDistribution>;
}

/// Test stand-in for the classifier that reads the answer off a known field.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    field: MotionField,
    softness: f64,
    falloff: Option<f64>,
}

impl OraclePredictor {
    pub fn new(field: MotionField, softness: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&softness) {
            return Err(Error::InvalidParameter(format!(
                "softness {softness} outside [0, 1]"
            )));
        }
        Ok(OraclePredictor {
            field,
            softness,
            falloff: None,
        })
    }

    /// Scales the peak by `exp(-d^2 / (2 s^2))`, `d` being the (u, v)
    /// distance between the true vector and the nearest candidate. The
    /// removed mass joins the uniform floor. Without a falloff every patch is
    /// equally sure of its nearest candidate, however far away it is.
    pub fn with_falloff(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "falloff scale must be positive, got {scale}"
            )));
        }
        self.falloff = Some(scale);
        Ok(self)
    }

    pub fn field(&self) -> &MotionField {
        &self.field
    }

    fn distribution(&self, center: (usize, usize), rotation_deg: f64) -> Result<MotionDistribution> {
        let gt = self.field.try_get(center.0, center.1)?;
        let rotated = canonicalize(gt.length(), gt.orientation() + rotation_deg)?;
        let set = base_candidate_set();
        let nearest = set.nearest(&rotated);
        let mut peak = 1.0 - self.softness;
        if let Some(s) = self.falloff {
            let d2 = set.vector(nearest).dist2(&rotated);
            peak *= (-d2 / (2.0 * s * s)).exp();
        }
        let rest = (1.0 - peak) / (set.len() - 1) as f64;
        let mut probs = vec![rest; set.len()];
        probs[nearest] = peak;
        Ok(MotionDistribution {
            set: SetKind::Base,
            probs,
        })
    }
}

impl PatchPredictor for OraclePredictor {
    fn predict(&self, patch: &Patch) -> Result<MotionDistribution> {
        self.distribution(patch.center, patch.rotation_deg)
    }
}

/// Oracle distribution at `center`: `1 - softness` on the candidate nearest
/// to the true vector, the rest spread evenly.
pub fn oracle_predict(
    center: (usize, usize),
    gt_field: &MotionField,
    softness: f64,
) -> Result<MotionDistribution> {
    OraclePredictor::new(gt_field.clone(), softness)?.distribution(center, 0.0)
}

/// Patch centres for a scan at `stride`, row-major. Centres start at 15 and
/// the last one in each direction is clamped to `size - 15` so that the
/// patches cover the whole image.
pub fn patch_centers(width: usize, height: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if width < PATCH_SIZE || height < PATCH_SIZE {
        return Err(Error::dims(
            format!("at least {PATCH_SIZE}x{PATCH_SIZE}"),
            format!("{width}x{height}"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be positive".into()));
    }
    let axis = |size: usize| {
        let half = PATCH_SIZE / 2;
        let last = size - half;
        let mut v: Vec<usize> = (half..=last).step_by(stride).collect();
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let xs = axis(width);
    let ys = axis(height);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

/// Crops the patch whose top-left corner is `center - 15`.
pub fn extract_patch(image: &ImageBuffer, center: (usize, usize)) -> Result<Patch> {
    let half = PATCH_SIZE / 2;
    if center.0 < half || center.1 < half {
        return Err(Error::OutOfBounds {
            x: center.0,
            y: center.1,
            width: image.width(),
            height: image.height(),
        });
    }
    let pixels = image
        .to_rgb()
        .crop(center.0 - half, center.1 - half, PATCH_SIZE, PATCH_SIZE)?;
    Ok(Patch {
        center,
        rotation_deg: 0.0,
        pixels,
    })
}

/// Predicts a base-set distribution for every patch of a stride scan.
/// Patches are evaluated in parallel; results stay in row-major centre order.
pub fn predict_image(
    image: &ImageBuffer,
    predictor: &dyn PatchPredictor,
    stride: usize,
) -> Result<Vec<((usize, usize), MotionDistribution)>> {
    let centers = patch_centers(image.width(), image.height(), stride)?;
    let rgb = image.to_rgb();
    centers
        .par_iter()
        .map(|&c| {
            let patch = extract_patch(&rgb, c)?;
            Ok((c, predictor.predict(&patch)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CNN

const CNNW_MAGIC: &[u8; 4] = b"CNNW";
const TAG_CONV: u8 = 0;
const TAG_POOL: u8 = 1;
const TAG_FC: u8 = 2;
const TAG_SOFTMAX: u8 = 3;

/// One network layer. Convolutions and fully connected layers are followed by
/// a ReLU; the softmax layer is a linear map followed by the softmax.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Valid (unpadded) cross-correlation, stride 1. Weights are laid out
    /// `[out][in][kh][kw]`.
    Conv {
        out: usize,
        inp: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    /// Max pooling over `size` x `size` cells with stride `size`.
    MaxPool { size: usize },
    /// Weights `[out][in]`; the input is the previous activation flattened
    /// channel-major (`[c][y][x]`).
    Dense {
        out: usize,
        inp: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Softmax {
        out: usize,
        inp: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
}

impl Layer {
    fn tag(&self) -> u8 {
        match self {
            Layer::Conv { .. } => TAG_CONV,
            Layer::MaxPool { .. } => TAG_POOL,
            Layer::Dense { .. } => TAG_FC,
            Layer::Softmax { .. } => TAG_SOFTMAX,
        }
    }

    fn dims(&self) -> [usize; 4] {
        match *self {
            Layer::Conv { out, inp, kh, kw, .. } => [out, inp, kh, kw],
            Layer::MaxPool { size } => [0, 0, size, size],
            Layer::Dense { out, inp, .. } | Layer::Softmax { out, inp, .. } => [out, inp, 0, 0],
        }
    }

    fn params(&self) -> Option<(&[f32], &[f32])> {
        match self {
            Layer::Conv { weights, bias, .. }
            | Layer::Dense { weights, bias, .. }
            | Layer::Softmax { weights, bias, .. } => Some((weights, bias)),
            Layer::MaxPool { .. } => None,
        }
    }
}

/// Activation shape: channels, height, width.
type Shape = (usize, usize, usize);

fn output_shape(layer: &Layer, (c, h, w): Shape) -> std::result::Result<Shape, String> {
    match *layer {
        Layer::Conv { out, inp, kh, kw, .. } => {
            if inp != c {
                return Err(format!("conv expects {inp} input channels, gets {c}"));
            }
            if kh == 0 || kw == 0 || kh > h || kw > w {
                return Err(format!("conv kernel {kh}x{kw} does not fit {h}x{w}"));
            }
            Ok((out, h - kh + 1, w - kw + 1))
        }
        Layer::MaxPool { size } => {
            if size == 0 || size > h || size > w {
                return Err(format!("pool {size} does not fit {h}x{w}"));
            }
            Ok((c, h / size, w / size))
        }
        Layer::Dense { out, inp, .. } | Layer::Softmax { out, inp, .. } => {
            if inp != c * h * w {
                return Err(format!("fully connected layer expects {inp} inputs, gets {}", c * h * w));
            }
            Ok((out, 1, 1))
        }
    }
}

/// A validated patch classifier mapping 30x30x3 patches to 73 probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    layers: Vec<Layer>,
    channel_mean: Option<[f32; 3]>,
}

impl CnnModel {
    /// Checks that the layers chain from a 30x30x3 input to a 73-way softmax.
    pub fn new(layers: Vec<Layer>, channel_mean: Option<[f32; 3]>) -> Result<Self> {
        Self::validate(&layers).map_err(|(i, reason)| Error::ModelFormat {
            offset: 0,
            reason: format!("layer {i}: {reason}"),
        })?;
        Ok(CnnModel {
            layers,
            channel_mean,
        })
    }

    fn validate(layers: &[Layer]) -> std::result::Result<(), (usize, String)> {
        let mut shape = (3, PATCH_SIZE, PATCH_SIZE);
        for (i, layer) in layers.iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                let [out, inp, kh, kw] = layer.dims();
                let expected = out * inp * kh.max(1) * kw.max(1);
                if w.len() != expected || b.len() != out {
                    return Err((i, format!(
                        "holds {}+{} parameters, shape needs {expected}+{out}",
                        w.len(),
                        b.len()
                    )));
                }
            }
            let is_last = i + 1 == layers.len();
            if matches!(layer, Layer::Softmax { .. }) != is_last {
                return Err((i, "the softmax layer must come last, exactly once".into()));
            }
            shape = output_shape(layer, shape).map_err(|e| (i, e))?;
        }
        let classes = base_candidate_set().len();
        if layers.is_empty() || shape != (classes, 1, 1) {
            return Err((layers.len(), format!(
                "network must end in {classes} outputs, ends in {shape:?}"
            )));
        }
        Ok(())
    }

    /// The six-layer network with every weight zero: 96 7x7 filters, 2x2
    /// pooling, 256 5x5 filters, 2x2 pooling, 1024 hidden units, 73 outputs.
    pub fn zeros() -> Self {
        let conv = |out, inp, k| Layer::Conv {
            out,
            inp,
            kh: k,
            kw: k,
            weights: vec![0.0; out * inp * k * k],
            bias: vec![0.0; out],
        };
        let layers = vec![
            conv(96, 3, 7),
            Layer::MaxPool { size: 2 },
            conv(256, 96, 5),
            Layer::MaxPool { size: 2 },
            Layer::Dense {
                out: 1024,
                inp: 256 * 4 * 4,
                weights: vec![0.0; 1024 * 4096],
                bias: vec![0.0; 1024],
            },
            Layer::Softmax {
                out: 73,
                inp: 1024,
                weights: vec![0.0; 73 * 1024],
                bias: vec![0.0; 73],
            },
        ];
        CnnModel::new(layers, None).expect("reference shapes chain")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn channel_mean(&self) -> Option<[f32; 3]> {
        self.channel_mean
    }

    /// True for the C1-M2-C3-M4-F5-S6 layer sizes; smaller networks with the
    /// same chaining are accepted for testing.
    pub fn is_reference_architecture(&self) -> bool {
        let dims: Vec<(u8, [usize; 4])> = self.layers.iter().map(|l| (l.tag(), l.dims())).collect();
        dims == vec![
            (TAG_CONV, [96, 3, 7, 7]),
            (TAG_POOL, [0, 0, 2, 2]),
            (TAG_CONV, [256, 96, 5, 5]),
            (TAG_POOL, [0, 0, 2, 2]),
            (TAG_FC, [1024, 4096, 0, 0]),
            (TAG_SOFTMAX, [73, 1024, 0, 0]),
        ]
    }

    /// `CNNW` encoding. Version 2 is written only when a channel mean is set.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CNNW_MAGIC);
        codec::put_u32(&mut out, if self.channel_mean.is_some() { 2 } else { 1 });
        codec::put_u32(&mut out, self.layers.len() as u32);
        if let Some(mean) = self.channel_mean {
            for m in mean {
                codec::put_f32(&mut out, m);
            }
        }
        for layer in &self.layers {
            out.push(layer.tag());
            for d in layer.dims() {
                codec::put_u32(&mut out, d as u32);
            }
            if let Some((w, b)) = layer.params() {
                for &v in w.iter().chain(b) {
                    codec::put_f32(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<CnnModel> {
        Self::decode_inner(bytes).map_err(|e| match e {
            Error::Format { offset, reason, .. } => Error::ModelFormat { offset, reason },
            other => other,
        })
    }

    fn decode_inner(bytes: &[u8]) -> Result<CnnModel> {
        let mut r = Reader::new("CNNW", bytes);
        r.magic(CNNW_MAGIC)?;
        let version = r.u32()?;
        if version != 1 && version != 2 {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        // Smallest possible layer record is 17 bytes.
        if count == 0 || count > r.remaining() / 17 {
            return Err(r.error(format!("implausible layer count {count}")));
        }
        let channel_mean = if version >= 2 {
            Some([r.f32()?, r.f32()?, r.f32()?])
        } else {
            None
        };
        let mut layers = Vec::with_capacity(count);
        let mut shape = (3, PATCH_SIZE, PATCH_SIZE);
        for i in 0..count {
            let start = r.offset();
            let tag = r.u8()?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let [out, inp, kh, kw] = dims;
            let mut params = |n_weights: Option<usize>| -> Result<(Vec<f32>, Vec<f32>)> {
                let n = n_weights.ok_or_else(|| r.error("parameter count overflows"))?;
                let w = r.f32_vec(n)?;
                let b = r.f32_vec(out)?;
                Ok((w, b))
            };
            let layer = match tag {
                TAG_CONV => {
                    let n = out.checked_mul(inp).and_then(|n| n.checked_mul(kh)).and_then(|n| n.checked_mul(kw));
                    let (weights, bias) = params(n)?;
                    Layer::Conv { out, inp, kh, kw, weights, bias }
                }
                TAG_POOL => {
                    if kh != kw || out != 0 || inp != 0 {
                        return Err(Error::format("CNNW", start, format!("bad pool dims {dims:?}")));
                    }
                    Layer::MaxPool { size: kh }
                }
                TAG_FC | TAG_SOFTMAX => {
                    if kh != 0 || kw != 0 {
                        return Err(Error::format("CNNW", start, format!("bad dense dims {dims:?}")));
                    }
                    let (weights, bias) = params(out.checked_mul(inp))?;
                    if tag == TAG_FC {
                        Layer::Dense { out, inp, weights, bias }
                    } else {
                        Layer::Softmax { out, inp, weights, bias }
                    }
                }
                t => return Err(Error::format("CNNW", start, format!("unknown layer tag {t}"))),
            };
            if matches!(layer, Layer::Softmax { .. }) != (i + 1 == count) {
                return Err(Error::format("CNNW", start, "the softmax layer must come last, exactly once"));
            }
            shape = output_shape(&layer, shape)
                .map_err(|e| Error::format("CNNW", start, format!("layer {i}: {e}")))?;
            layers.push(layer);
        }
        r.finish()?;
        let classes = base_candidate_set().len();
        if shape != (classes, 1, 1) {
            return Err(r.error(format!("network ends in {shape:?}, expected {classes} outputs")));
        }
        Ok(CnnModel { layers, channel_mean })
    }

    pub fn load(path: &Path) -> Result<CnnModel> {
        Self::decode(&codec::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.encode())
    }
}

/// Runs the network on one patch and returns the 73-way softmax.
pub fn cnn_forward(model: &CnnModel, patch: &Patch) -> Result<MotionDistribution> {
    let px = &patch.pixels;
    if px.dims() != (PATCH_SIZE, PATCH_SIZE) || px.channels() != 3 {
        return Err(Error::ModelFormat {
            offset: 0,
            reason: format!(
                "patch is {}x{}x{}, network expects {PATCH_SIZE}x{PATCH_SIZE}x3",
                px.width(),
                px.height(),
                px.channels()
            ),
        });
    }
    let mean = model.channel_mean.unwrap_or([0.0; 3]);
    let mut act = vec![0f32; 3 * PATCH_SIZE * PATCH_SIZE];
    for c in 0..3 {
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                act[(c * PATCH_SIZE + y) * PATCH_SIZE + x] = px.get(x, y, c) as f32 - mean[c];
            }
        }
    }
    let mut shape: Shape = (3, PATCH_SIZE, PATCH_SIZE);
    for layer in &model.layers {
        let next = output_shape(layer, shape).map_err(|reason| Error::ModelFormat { offset: 0, reason })?;
        act = match layer {
            Layer::Conv { out, inp, kh, kw, weights, bias } => conv_relu(&act, shape, *out, *inp, *kh, *kw, weights, bias),
            Layer::MaxPool { size } => max_pool(&act, shape, *size),
            Layer::Dense { out, inp, weights, bias } => {
                let mut y = dense(&act, *out, *inp, weights, bias);
                y.iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            Layer::Softmax { out, inp, weights, bias } => dense(&act, *out, *inp, weights, bias),
        };
        shape = next;
    }
    Ok(MotionDistribution {
        set: SetKind::Base,
        probs: softmax(&act),
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_relu(
    input: &[f32],
    (c, h, w): Shape,
    out: usize,
    inp: usize,
    kh: usize,
    kw: usize,
    weights: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    debug_assert_eq!(c, inp);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut result = vec![0f32; out * oh * ow];
    for o in 0..out {
        let filt = &weights[o * inp * kh * kw..(o + 1) * inp * kh * kw];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o] as f64;
                for i in 0..inp {
                    for ky in 0..kh {
                        let row = &input[(i * h + y + ky) * w + x..(i * h + y + ky) * w + x + kw];
                        let frow = &filt[(i * kh + ky) * kw..(i * kh + ky + 1) * kw];
                        for (a, b) in row.iter().zip(frow) {
                            acc += (*a as f64) * (*b as f64);
                        }
                    }
                }
                result[(o * oh + y) * ow + x] = (acc as f32).max(0.0);
            }
        }
    }
    result
}

fn max_pool(input: &[f32], (c, h, w): Shape, size: usize) -> Vec<f32> {
    let (oh, ow) = (h / size, w / size);
    let mut result = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(input[(ch * h + y * size + dy) * w + x * size + dx]);
                    }
                }
                result[(ch * oh + y) * ow + x] = m;
            }
        }
    }
    result
}

fn dense(input: &[f32], out: usize, inp: usize, weights: &[f32], bias: &[f32]) -> Vec<f32> {
    (0..out)
        .map(|o| {
            let row = &weights[o * inp..(o + 1) * inp];
            let acc: f64 = row.iter().zip(input).map(|(a, b)| *a as f64 * *b as f64).sum();
            (acc + bias[o] as f64) as f32
        })
        .collect()
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Wraps a model so it can drive [`predict_image`].
#[derive(Debug, Clone)]
pub struct CnnPredictor {
    model: CnnModel,
}

impl CnnPredictor {
    pub fn new(model: CnnModel) -> Self {
        CnnPredictor { model }
    }

    pub fn model(&self) -> &CnnModel {
        &self.model
    }
}

impl PatchPredictor for CnnPredictor {
    fn predict(&self, patch: &Patch) -> Result<MotionDistribution> {
        cnn_forward(&self.model, patch)
    }
}

/// One entry of the trainer's reference-output sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParityRecord {
    pub patch_index: usize,
    pub label: u8,
    pub probs: Vec<f64>,
}

pub fn load_parity_sidecar(path: &Path) -> Result<Vec<ParityRecord>> {
    let bytes = codec::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("parity sidecar", e.column(), e.to_string()))
}

/// Largest absolute difference between this crate's forward pass and the
/// reference probabilities, over every sidecar record.
pub fn parity_max_abs_diff(
    model: &CnnModel,
    dataset: &crate::synth::PatchDataset,
    sidecar: &[ParityRecord],
) -> Result<f64> {
    let diffs: Vec<f64> = sidecar
        .par_iter()
        .map(|rec| {
            let patch = dataset.patch(rec.patch_index)?;
            let ours = cnn_forward(model, &patch)?;
            if rec.probs.len() != ours.len() {
                return Err(Error::dims(ours.len(), rec.probs.len()));
            }
            Ok(ours
                .probs()
                .iter()
                .zip(&rec.probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(diffs.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MotionVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_with(m: MotionVector) -> MotionField {
        MotionField::uniform(40, 40, m)
    }

    fn mv(l: f64, o: f64) -> MotionVector {
        canonicalize(l, o).unwrap()
    }

    #[test]
    fn oracle_exact_candidate_is_one_hot() {
        let d = oracle_predict((20, 20), &field_with(mv(9.0, 30.0)), 0.0).unwrap();
        let set = base_candidate_set();
        let idx = set.index_of(&mv(9.0, 30.0)).unwrap();
        assert_eq!(d, MotionDistribution::one_hot(SetKind::Base, idx));
    }

    #[test]
    fn oracle_picks_brute_force_nearest() {
        let gt = mv(9.0, 33.0);
        let (u, v) = gt.to_cartesian();
        let set = base_candidate_set();
        // Brute force over the 73 candidates, distances computed from scratch.
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, m) in set.vectors().iter().enumerate() {
            let a = m.orientation().to_radians();
            let d = (m.length() * a.cos() - u).powi(2) + (m.length() * a.sin() - v).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        assert_eq!(set.vector(best.1), mv(9.0, 30.0));
        let d = oracle_predict((3, 3), &field_with(gt), 0.0).unwrap();
        assert_eq!(d.argmax(), best.1);
        assert_eq!(d.probs()[best.1], 1.0);
    }

    #[test]
    fn oracle_softness_spreads_evenly() {
        let d = oracle_predict((0, 0), &field_with(mv(9.0, 30.0)), 0.072).unwrap();
        let idx = base_candidate_set().index_of(&mv(9.0, 30.0)).unwrap();
        for (i, &p) in d.probs().iter().enumerate() {
            let expected = if i == idx { 0.928 } else { 0.001 };
            assert!((p - expected).abs() < 1e-12, "{i}: {p}");
        }
    }

    #[test]
    fn oracle_bounds_error() {
        assert!(matches!(
            oracle_predict((40, 0), &field_with(MotionVector::IDENTITY), 0.0),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn oracle_follows_rotation() {
        let oracle = OraclePredictor::new(field_with(mv(9.0, 66.0)), 0.0).unwrap();
        let patch = Patch {
            center: (5, 5),
            rotation_deg: -6.0,
            pixels: ImageBuffer::new(30, 30, 3),
        };
        let d = oracle.predict(&patch).unwrap();
        assert_eq!(base_candidate_set().vector(d.argmax()), mv(9.0, 60.0));
    }

    #[test]
    fn falloff_lowers_inexact_peaks() {
        let exact = OraclePredictor::new(field_with(mv(9.0, 60.0)), 0.1).unwrap().with_falloff(0.5).unwrap();
        let off = OraclePredictor::new(field_with(mv(9.0, 66.0)), 0.1).unwrap().with_falloff(0.5).unwrap();
        let a = exact.distribution((0, 0), 0.0).unwrap();
        let b = off.distribution((0, 0), 0.0).unwrap();
        assert!((a.probs()[a.argmax()] - 0.9).abs() < 1e-12);
        assert_eq!(a.argmax(), b.argmax());
        assert!(b.probs()[b.argmax()] < 0.5);
        assert!((b.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_center_enumeration() {
        // Brute force: every window position whose centre lies on the
        // stride grid from 15, plus the clamped final one.
        fn brute(w: usize, h: usize, s: usize) -> usize {
            let count = |n: usize| {
                let mut c = 0;
                let mut last = 0;
                for x in 15..=n - 15 {
                    if (x - 15) % s == 0 {
                        c += 1;
                        last = x;
                    }
                }
                if last != n - 15 {
                    c += 1;
                }
                c
            };
            count(w) * count(h)
        }
        assert_eq!(patch_centers(60, 60, 6).unwrap().len(), 36);
        assert_eq!(brute(60, 60, 6), 36);
        assert_eq!(patch_centers(30, 30, 6).unwrap(), vec![(15, 15)]);
        assert_eq!(patch_centers(31, 31, 1).unwrap().len(), 4);
        assert_eq!(brute(31, 31, 1), 4);
        assert_eq!(patch_centers(64, 47, 6).unwrap().len(), brute(64, 47, 6));
        assert!(patch_centers(29, 40, 6).is_err());
        let c = patch_centers(50, 40, 6).unwrap();
        assert_eq!(c.first(), Some(&(15, 15)));
        assert_eq!(c.last(), Some(&(35, 25)));
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = CnnModel::zeros();
        assert!(model.is_reference_architecture());
        let patch = extract_patch(&ImageBuffer::filled(30, 30, 3, 0.3), (15, 15)).unwrap();
        let d = cnn_forward(&model, &patch).unwrap();
        assert_eq!(d.len(), 73);
        for p in d.probs() {
            assert!((p - 1.0 / 73.0).abs() < 1e-15);
        }
    }

    fn small_model(seed: u64) -> CnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_vec = |n: usize, s: f32| (0..n).map(|_| rng.gen_range(-s..s)).collect::<Vec<f32>>();
        let layers = vec![
            Layer::Conv { out: 4, inp: 3, kh: 7, kw: 7, weights: rand_vec(4 * 3 * 49, 0.3), bias: rand_vec(4, 0.1) },
            Layer::MaxPool { size: 2 },
            Layer::Conv { out: 6, inp: 4, kh: 5, kw: 5, weights: rand_vec(6 * 4 * 25, 0.3), bias: rand_vec(6, 0.1) },
            Layer::MaxPool { size: 2 },
            Layer::Dense { out: 10, inp: 96, weights: rand_vec(960, 0.3), bias: rand_vec(10, 0.1) },
            Layer::Softmax { out: 73, inp: 10, weights: rand_vec(730, 1.0), bias: rand_vec(73, 0.1) },
        ];
        CnnModel::new(layers, Some([0.5, 0.4, 0.3])).unwrap()
    }

    #[test]
    fn forward_is_normalized_and_deterministic() {
        let model = small_model(1);
        let img = ImageBuffer::from_fn(30, 30, 3, |x, y, c| ((x * 7 + y * 3 + c * 11) % 17) as f64 / 16.0);
        let p = extract_patch(&img, (15, 15)).unwrap();
        let a = cnn_forward(&model, &p).unwrap();
        let b = cnn_forward(&model, &p).unwrap();
        assert_eq!(a, b);
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // Only pixel content matters.
        let moved = Patch { center: (400, 9), rotation_deg: -12.0, ..p };
        assert_eq!(cnn_forward(&model, &moved).unwrap(), a);
    }

    #[test]
    fn cnnw_round_trip() {
        let model = small_model(2);
        let bytes = model.encode();
        assert_eq!(&bytes[..4], b"CNNW");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(CnnModel::decode(&bytes).unwrap(), model);
        let v1 = CnnModel::new(model.layers().to_vec(), None).unwrap();
        let bytes = v1.encode();
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(CnnModel::decode(&bytes).unwrap(), v1);
    }

    #[test]
    fn truncated_weights_report_offset() {
        let bytes = small_model(3).encode();
        let cut = bytes.len() - 10;
        match CnnModel::decode(&bytes[..cut]) {
            Err(Error::ModelFormat { offset, .. }) => assert!(offset > 12 && offset <= cut, "{offset}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(CnnModel::decode(b"CNNX"), Err(Error::ModelFormat { offset: 0, .. })));
    }

    #[test]
    fn rejects_bad_chains() {
        let mut layers = small_model(4).layers().to_vec();
        layers.swap(0, 1);
        assert!(matches!(CnnModel::new(layers, None), Err(Error::ModelFormat { .. })));
        let mut layers = small_model(4).layers().to_vec();
        layers.pop();
        assert!(CnnModel::new(layers, None).is_err());
    }

    #[test]
    fn wrong_patch_shape_is_model_error() {
        let p = Patch { center: (0, 0), rotation_deg: 0.0, pixels: ImageBuffer::new(20, 30, 3) };
        assert!(matches!(cnn_forward(&small_model(5), &p), Err(Error::ModelFormat { .. })));
    }

    #[test]
    fn predict_image_order_is_row_major() {
        let img = ImageBuffer::filled(60, 45, 3, 0.5);
        let oracle = OraclePredictor::new(MotionField::uniform(60, 45, mv(5.0, 0.0)), 0.0).unwrap();
        let preds = predict_image(&img, &oracle, 6).unwrap();
        let centers: Vec<_> = preds.iter().map(|(c, _)| *c).collect();
        assert_eq!(centers, patch_centers(60, 45, 6).unwrap());
    }
}
