//! Motion vectors, the discrete candidate sets, kernel rasterization and
//! dense motion fields.
//!
//! A motion vector `(l, o)` describes linear motion of length `l` pixels at
//! orientation `o` degrees. The Cartesian view is `u = l cos o` along +x
//! (columns) and `v = l sin o` along +y (rows, downwards). Orientations live
//! in `[0, 180)` because `(l, o)` and `(l, o + 180)` blur identically, and
//! every vector of length 1 is the identity kernel, stored as `(1, 0)`.

use std::path::Path;
use std::sync::OnceLock;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};

/// Largest motion length handled anywhere in the pipeline.
pub const D_MAX: f64 = 25.0;

/// Default kernel support, one pixel per unit of the maximum length.
pub const DEFAULT_SUPPORT: usize = 25;

/// Samples per pixel of trace length used when splatting a kernel.
const SAMPLES_PER_PIXEL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector {
    length: f64,
    orientation: f64,
}

impl MotionVector {
    pub const IDENTITY: MotionVector = MotionVector {
        length: 1.0,
        orientation: 0.0,
    };

    /// Builds the canonical representative of `(length, orientation_deg)`.
    pub fn new(length: f64, orientation_deg: f64) -> Result<Self> {
        canonicalize(length, orientation_deg)
    }

    /// Inverse of [`MotionVector::to_cartesian`]. Vectors shorter than one
    /// pixel snap to the identity.
    pub fn from_cartesian(u: f64, v: f64) -> Result<Self> {
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::InvalidMotion(format!("non-finite ({u}, {v})")));
        }
        let length = u.hypot(v);
        if length <= 1.0 {
            return Ok(Self::IDENTITY);
        }
        canonicalize(length, v.atan2(u).to_degrees())
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }

    pub fn is_identity(&self) -> bool {
        self.length == 1.0
    }

    pub fn to_cartesian(&self) -> (f64, f64) {
        to_cartesian(*self)
    }

    /// Squared Euclidean distance between the Cartesian forms.
    pub fn dist2(&self, other: &MotionVector) -> f64 {
        let (u0, v0) = self.to_cartesian();
        let (u1, v1) = other.to_cartesian();
        (u0 - u1).powi(2) + (v0 - v1).powi(2)
    }
}

pub fn to_cartesian(m: MotionVector) -> (f64, f64) {
    let (s, c) = m.orientation.to_radians().sin_cos();
    (m.length * c, m.length * s)
}

pub fn canonicalize(length: f64, orientation_deg: f64) -> Result<MotionVector> {
    if !length.is_finite() || !orientation_deg.is_finite() {
        return Err(Error::InvalidMotion(format!(
            "non-finite ({length}, {orientation_deg})"
        )));
    }
    if length < 1.0 {
        return Err(Error::InvalidMotion(format!(
            "length {length} is below one pixel"
        )));
    }
    if length == 1.0 {
        return Ok(MotionVector::IDENTITY);
    }
    let mut o = orientation_deg.rem_euclid(180.0);
    if o >= 180.0 {
        o = 0.0;
    }
    Ok(MotionVector {
        length,
        orientation: o,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetKind {
    /// 13 lengths x 6 orientations, 73 vectors.
    Base,
    /// 13 lengths x 30 orientations, 361 vectors.
    Extended,
}

/// Ordered discrete set of candidate motion vectors.
///
/// Index 0 is the identity `(1, 0)`. The remaining entries run row-major over
/// lengths `3, 5, .., 25` and then orientations, so for length index `li >= 1`
/// and orientation index `oi` the index is `1 + (li - 1) * n_orient + oi`.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    kind: SetKind,
    lengths: Vec<f64>,
    orientations: Vec<f64>,
    vectors: Vec<MotionVector>,
    cartesian: Vec<(f64, f64)>,
}

impl CandidateSet {
    fn build(kind: SetKind, orientation_step: f64) -> Self {
        let lengths: Vec<f64> = (0..13).map(|i| (1 + 2 * i) as f64).collect();
        let n_orient = (180.0 / orientation_step).round() as usize;
        let orientations: Vec<f64> = (0..n_orient).map(|i| i as f64 * orientation_step).collect();
        let mut vectors = vec![MotionVector::IDENTITY];
        for &l in &lengths[1..] {
            for &o in &orientations {
                vectors.push(MotionVector {
                    length: l,
                    orientation: o,
                });
            }
        }
        let cartesian = vectors.iter().map(|m| m.to_cartesian()).collect();
        CandidateSet {
            kind,
            lengths,
            orientations,
            vectors,
            cartesian,
        }
    }

    pub fn kind(&self) -> SetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn orientations(&self) -> &[f64] {
        &self.orientations
    }

    pub fn vectors(&self) -> &[MotionVector] {
        &self.vectors
    }

    pub fn vector(&self, index: usize) -> MotionVector {
        self.vectors[index]
    }

    pub fn cartesian(&self, index: usize) -> (f64, f64) {
        self.cartesian[index]
    }

    /// Index of the entry at grid position (length index, orientation index).
    pub fn grid_index(&self, length_index: usize, orientation_index: usize) -> usize {
        if length_index == 0 {
            0
        } else {
            1 + (length_index - 1) * self.orientations.len() + orientation_index
        }
    }

    /// Exact lookup (to 1e-9) of a canonical vector.
    pub fn index_of(&self, m: &MotionVector) -> Option<usize> {
        let li = self
            .lengths
            .iter()
            .position(|&l| (l - m.length).abs() < 1e-9)?;
        if li == 0 {
            return Some(0);
        }
        let oi = self
            .orientations
            .iter()
            .position(|&o| (o - m.orientation).abs() < 1e-9)?;
        Some(self.grid_index(li, oi))
    }

    /// Candidate nearest in (u, v); the lowest index wins ties.
    pub fn nearest(&self, m: &MotionVector) -> usize {
        let (u, v) = m.to_cartesian();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &(cu, cv)) in self.cartesian.iter().enumerate() {
            let d = (cu - u).powi(2) + (cv - v).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// The 73-vector set predicted directly by the patch classifier.
pub fn base_candidate_set() -> &'static CandidateSet {
    static SET: OnceLock<CandidateSet> = OnceLock::new();
    SET.get_or_init(|| CandidateSet::build(SetKind::Base, 30.0))
}

/// The 361-vector set reachable through rotated predictions.
pub fn extended_candidate_set() -> &'static CandidateSet {
    static SET: OnceLock<CandidateSet> = OnceLock::new();
    SET.get_or_init(|| CandidateSet::build(SetKind::Extended, 6.0))
}

pub fn candidate_set(kind: SetKind) -> &'static CandidateSet {
    match kind {
        SetKind::Base => base_candidate_set(),
        SetKind::Extended => extended_candidate_set(),
    }
}

/// Square, odd-sized, non-negative kernel summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    /// Weight at (column, row) of the support.
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// Weight at an offset from the anchor, zero outside the support.
    pub fn at_offset(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius() as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.at((dx + r) as usize, (dy + r) as usize)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nonzero entries as `(dx, dy, weight)` offsets from the anchor.
    pub fn taps(&self) -> Vec<(isize, isize, f64)> {
        let r = self.radius() as isize;
        let mut taps = Vec::new();
        for row in 0..self.size {
            for col in 0..self.size {
                let w = self.at(col, row);
                if w != 0.0 {
                    taps.push((col as isize - r, row as isize - r, w));
                }
            }
        }
        taps
    }

    pub fn transpose(&self) -> BlurKernel {
        let n = self.size;
        let mut weights = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..n {
                weights[col * n + row] = self.weights[row * n + col];
            }
        }
        BlurKernel { size: n, weights }
    }
}

/// Rasterizes `m` as an anti-aliased line through the anchor.
///
/// The trace runs from `-(l-1)/2` to `+(l-1)/2` along the orientation. It is
/// sampled at the centres of `8 l` equal cells of `[-l/2, l/2]`; samples past
/// either end are clamped onto the endpoint so that each unit of trace carries
/// equal mass. Every sample is splatted bilinearly and the result normalized.
/// Samples falling outside a too-small support are dropped.
pub fn rasterize(m: &MotionVector, support: usize) -> Result<BlurKernel> {
    if support % 2 == 0 || support == 0 {
        return Err(Error::format(
            "kernel",
            0,
            format!("support must be odd, got {support}"),
        ));
    }
    let n = support;
    let c = (n / 2) as f64;
    let mut weights = vec![0.0; n * n];
    if m.is_identity() {
        weights[(n / 2) * n + n / 2] = 1.0;
        return Ok(BlurKernel { size: n, weights });
    }

    let (mut s, mut co) = m.orientation.to_radians().sin_cos();
    if s.abs() < 1e-12 {
        s = 0.0;
    }
    if co.abs() < 1e-12 {
        co = 0.0;
    }
    let half = (m.length - 1.0) / 2.0;
    let samples = (SAMPLES_PER_PIXEL as f64 * m.length).ceil() as usize;
    let step = m.length / samples as f64;
    for i in 0..samples {
        let t = (-m.length / 2.0 + (i as f64 + 0.5) * step).clamp(-half, half);
        let x = c + t * co;
        let y = c + t * s;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dx, dy, w) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if w == 0.0 {
                continue;
            }
            let (px, py) = (x0 as isize + dx, y0 as isize + dy);
            if px < 0 || py < 0 || px >= n as isize || py >= n as isize {
                continue;
            }
            weights[py as usize * n + px as usize] += w;
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        // Everything fell outside the support; degrade to the identity.
        weights[(n / 2) * n + n / 2] = 1.0;
    } else {
        for w in &mut weights {
            *w /= total;
        }
    }
    Ok(BlurKernel { size: n, weights })
}

/// Per-pixel motion vectors over a `width` x `height` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    width: usize,
    height: usize,
    data: Vec<MotionVector>,
}

const MFLD_MAGIC: &[u8; 4] = b"MFLD";

impl MotionField {
    pub fn uniform(width: usize, height: usize, m: MotionVector) -> Self {
        MotionField {
            width,
            height,
            data: vec![m; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> MotionVector,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        MotionField {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<MotionVector>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(
                format!("{} vectors", width * height),
                format!("{} vectors", data.len()),
            ));
        }
        Ok(MotionField {
            width,
            height,
            data,
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

    pub fn vectors(&self) -> &[MotionVector] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> MotionVector {
        self.data[y * self.width + x]
    }

    pub fn try_get(&self, x: usize, y: usize) -> Result<MotionVector> {
        if x >= self.width || y >= self.height {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.get(x, y))
    }

    pub fn set(&mut self, x: usize, y: usize, m: MotionVector) {
        self.data[y * self.width + x] = m;
    }

    pub fn max_length(&self) -> f64 {
        self.data.iter().map(|m| m.length).fold(1.0, f64::max)
    }

    /// Fails if any vector is longer than `d_max`.
    pub fn check_max_length(&self, d_max: f64) -> Result<()> {
        match self.data.iter().position(|m| m.length > d_max + 1e-9) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidMotion(format!(
                "length {} at ({}, {}) exceeds d_max {d_max}",
                self.data[i].length,
                i % self.width,
                i / self.width
            ))),
        }
    }

    /// Replaces every vector by its nearest member of `set`.
    pub fn quantize(&self, set: &CandidateSet) -> MotionField {
        MotionField {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|m| set.vector(set.nearest(m)))
                .collect(),
        }
    }

    /// `MFLD` encoding: magic, u32 width, u32 height, then (u, v) as f32 pairs.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.data.len());
        out.extend_from_slice(MFLD_MAGIC);
        codec::put_u32(&mut out, self.width as u32);
        codec::put_u32(&mut out, self.height as u32);
        for m in &self.data {
            let (u, v) = m.to_cartesian();
            codec::put_f32(&mut out, u as f32);
            codec::put_f32(&mut out, v as f32);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<MotionField> {
        let mut r = Reader::new("MFLD", bytes);
        r.magic(MFLD_MAGIC)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let count = width
            .checked_mul(height)
            .filter(|n| n.checked_mul(8) == Some(r.remaining()))
            .ok_or_else(|| {
                r.error(format!(
                    "{width}x{height} field needs {} payload bytes, found {}",
                    (width as u128) * (height as u128) * 8,
                    r.remaining()
                ))
            })?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let u = r.f32()? as f64;
            let v = r.f32()? as f64;
            let m = MotionVector::from_cartesian(u, v)
                .map_err(|e| Error::format("MFLD", at, e.to_string()))?;
            data.push(m);
        }
        r.finish()?;
        Ok(MotionField {
            width,
            height,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<MotionField> {
        Self::decode(&codec::read_file(path)?)
    }
}
