//! Fusion of patch distributions into per-pixel confidences and MRF
//! smoothing of the resulting labels.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::motion::{candidate_set, CandidateSet, MotionField, SetKind};
use crate::predict::{MotionDistribution, PATCH_SIZE};

/// Gaussian width, in pixels, of the patch-centre weighting.
pub const DEFAULT_SIGMA: f64 = 10.0;
pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_SAMPLED: usize = 30;

const CONF_MAGIC: &[u8; 4] = b"CONF";

/// Per-pixel confidence of every candidate, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVolume {
    width: usize,
    height: usize,
    set: SetKind,
    data: Vec<f32>,
}

impl ConfidenceVolume {
    /// Builds a volume from raw per-pixel vectors (row-major pixels, each
    /// holding one value per candidate).
    pub fn from_vec(width: usize, height: usize, set: SetKind, data: Vec<f32>) -> Result<Self> {
        let n = candidate_set(set).len();
        if data.len() != width * height * n {
            return Err(Error::dims(width * height * n, data.len()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("confidences must be finite and non-negative".into()));
        }
        Ok(ConfidenceVolume { width, height, set, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&self) -> SetKind {
        self.set
    }

    pub fn candidates(&self) -> &'static CandidateSet {
        candidate_set(self.set)
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates().len()
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let n = self.n_candidates();
        let i = (y * self.width + x) * n;
        &self.data[i..i + n]
    }

    pub fn at(&self, x: usize, y: usize, candidate: usize) -> f64 {
        self.pixel(x, y)[candidate] as f64
    }

    /// Highest-confidence candidate at every pixel (lowest index on ties).
    pub fn argmax_field(&self) -> MotionField {
        let set = self.candidates();
        MotionField::from_fn(self.width, self.height, |x, y| {
            let px = self.pixel(x, y);
            let mut best = 0;
            for (i, &c) in px.iter().enumerate() {
                if c > px[best] {
                    best = i;
                }
            }
            set.vector(best)
        })
    }

    /// `CONF` dump: magic, u32 width, u32 height, u32 candidate count, then
    /// the volume as f32, pixel-major.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(CONF_MAGIC);
        codec::put_u32(&mut out, self.width as u32);
        codec::put_u32(&mut out, self.height as u32);
        codec::put_u32(&mut out, self.n_candidates() as u32);
        for &v in &self.data {
            codec::put_f32(&mut out, v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("CONF", bytes);
        r.magic(CONF_MAGIC)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let at = r.offset();
        let n = r.u32()? as usize;
        let set = match n {
            73 => SetKind::Base,
            361 => SetKind::Extended,
            other => return Err(Error::format("CONF", at, format!("unknown candidate count {other}"))),
        };
        let count = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(n))
            .filter(|c| c.checked_mul(4) == Some(r.remaining()))
            .ok_or_else(|| r.error("payload size does not match the header"))?;
        let data = r.f32_vec(count)?;
        Self::from_vec(width, height, set, data).map_err(|e| Error::format("CONF", 16, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.encode())
    }
}

/// Weighted average of the distributions of every patch covering each pixel,
/// weights `exp(-d^2 / (2 sigma^2))` in the distance `d` to the patch centre.
/// A patch centred at `c` covers `[c - 15, c + 15)` on both axes.
pub fn confidence_volume(
    preds: &[((usize, usize), MotionDistribution)],
    width: usize,
    height: usize,
    sigma: f64,
) -> Result<ConfidenceVolume> {
    let set = match preds.first() {
        Some((_, d)) => d.set(),
        None => return Err(Error::Uncovered { x: 0, y: 0 }),
    };
    if preds.iter().any(|(_, d)| d.set() != set) {
        return Err(Error::InvalidParameter("distributions over mixed candidate sets".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let n = candidate_set(set).len();
    let half = (PATCH_SIZE / 2) as isize;
    let covers = |c: usize, p: usize| {
        let d = p as isize - c as isize;
        (-half..half).contains(&d)
    };
    let two_s2 = 2.0 * sigma * sigma;
    let rows: Vec<Result<Vec<f32>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let row_preds: Vec<&((usize, usize), MotionDistribution)> =
                preds.iter().filter(|((_, cy), _)| covers(*cy, y)).collect();
            let mut out = vec![0f32; width * n];
            let mut acc = vec![0f64; n];
            for x in 0..width {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut z = 0.0;
                for ((cx, cy), d) in &row_preds {
                    if !covers(*cx, x) {
                        continue;
                    }
                    let dx = x as f64 - *cx as f64;
                    let dy = y as f64 - *cy as f64;
                    let g = (-(dx * dx + dy * dy) / two_s2).exp();
                    z += g;
                    for (a, p) in acc.iter_mut().zip(d.probs()) {
                        *a += g * p;
                    }
                }
                if z == 0.0 {
                    return Err(Error::Uncovered { x, y });
                }
                for (o, a) in out[x * n..(x + 1) * n].iter_mut().zip(&acc) {
                    *o = (a / z) as f32;
                }
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(width * height * n);
    for row in rows {
        data.extend(row?);
    }
    Ok(ConfidenceVolume { width, height, set, data })
}

/// Per-pixel candidate lists: the most confident entries first, then a
/// random sample of the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateShortlist {
    width: usize,
    height: usize,
    per_pixel: usize,
    indices: Vec<u16>,
}

impl CandidateShortlist {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn per_pixel(&self) -> usize {
        self.per_pixel
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u16] {
        let i = (y * self.width + x) * self.per_pixel;
        &self.indices[i..i + self.per_pixel]
    }

    /// Shortlist built from explicit per-pixel lists of equal length.
    pub fn from_lists(width: usize, height: usize, lists: Vec<Vec<u16>>) -> Result<Self> {
        if lists.len() != width * height {
            return Err(Error::dims(width * height, lists.len()));
        }
        let per_pixel = lists.first().map_or(0, Vec::len);
        if per_pixel == 0 || lists.iter().any(|l| l.len() != per_pixel) {
            return Err(Error::InvalidParameter("lists must be non-empty and equally long".into()));
        }
        for l in &lists {
            let mut s = l.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != l.len() {
                return Err(Error::InvalidParameter("duplicate candidate in a shortlist".into()));
            }
        }
        Ok(CandidateShortlist { width, height, per_pixel, indices: lists.concat() })
    }
}

/// Picks `top_k` most confident candidates per pixel (ties to the lower index)
/// and `sampled` more uniformly without replacement from the remainder. Each
/// pixel draws from its own stream of the seeded generator.
pub fn shortlist(volume: &ConfidenceVolume, top_k: usize, sampled: usize, seed: u64) -> Result<CandidateShortlist> {
    let n = volume.n_candidates();
    if top_k + sampled > n || top_k + sampled == 0 {
        return Err(Error::InvalidParameter(format!(
            "top_k + sampled = {} must lie in 1..={n}",
            top_k + sampled
        )));
    }
    let per_pixel = top_k + sampled;
    let (w, h) = (volume.width, volume.height);
    let indices: Vec<u16> = (0..w * h)
        .into_par_iter()
        .flat_map_iter(|p| {
            let conf = volume.pixel(p % w, p / w);
            let mut order: Vec<u16> = (0..n as u16).collect();
            order.sort_by(|&a, &b| {
                conf[b as usize]
                    .partial_cmp(&conf[a as usize])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut picked: Vec<u16> = order[..top_k].to_vec();
            let mut rest: Vec<u16> = order[top_k..].to_vec();
            rest.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            picked.extend(sample(&mut rng, rest.len(), sampled).into_iter().map(|i| rest[i]));
            picked
        })
        .collect();
    Ok(CandidateShortlist { width: w, height: h, per_pixel, indices })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrfParams {
    /// Weight of the squared (u, v) difference between 4-neighbours.
    pub lambda_smooth: f64,
    pub bp_iterations: usize,
    /// Fraction of the previous message kept at each update.
    pub damping: f64,
    pub seed: u64,
    /// Solve on every `grid_stride`-th pixel and upsample by nearest neighbour.
    pub grid_stride: usize,
}

impl Default for MrfParams {
    fn default() -> Self {
        MrfParams {
            lambda_smooth: 0.01,
            bp_iterations: 30,
            damping: 0.5,
            seed: 0,
            grid_stride: 1,
        }
    }
}

impl MrfParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_smooth.is_finite() || self.lambda_smooth < 0.0 {
            return Err(Error::InvalidParameter(format!("lambda_smooth {}", self.lambda_smooth)));
        }
        if self.bp_iterations == 0 {
            return Err(Error::InvalidParameter("bp_iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidParameter(format!("damping {} outside [0, 1)", self.damping)));
        }
        if self.grid_stride == 0 {
            return Err(Error::InvalidParameter("grid_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Labelling problem over per-pixel candidate lists.
struct Problem {
    width: usize,
    height: usize,
    k: usize,
    /// Candidate index per (pixel, slot).
    labels: Vec<u16>,
    unary: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    lambda: f64,
}

impl Problem {
    fn new(volume: &ConfidenceVolume, list: &CandidateShortlist, stride: usize, lambda: f64) -> Self {
        let set = volume.candidates();
        let width = volume.width.div_ceil(stride);
        let height = volume.height.div_ceil(stride);
        let k = list.per_pixel;
        let mut labels = Vec::with_capacity(width * height * k);
        let mut unary = Vec::with_capacity(width * height * k);
        let mut u = Vec::with_capacity(width * height * k);
        let mut v = Vec::with_capacity(width * height * k);
        for gy in 0..height {
            for gx in 0..width {
                let (x, y) = (gx * stride, gy * stride);
                for &c in list.pixel(x, y) {
                    let (cu, cv) = set.cartesian(c as usize);
                    labels.push(c);
                    unary.push(-volume.at(x, y, c as usize));
                    u.push(cu);
                    v.push(cv);
                }
            }
        }
        Problem { width, height, k, labels, unary, u, v, lambda }
    }

    fn neighbors(&self, p: usize) -> [Option<usize>; 4] {
        let (x, y) = (p % self.width, p / self.width);
        [
            (x > 0).then(|| p - 1),
            (x + 1 < self.width).then(|| p + 1),
            (y > 0).then(|| p - self.width),
            (y + 1 < self.height).then(|| p + self.width),
        ]
    }

    fn pair_cost(&self, a: usize, b: usize) -> f64 {
        self.lambda * ((self.u[a] - self.u[b]).powi(2) + (self.v[a] - self.v[b]).powi(2))
    }

    /// Energy of a slot assignment, each undirected edge counted once.
    fn energy(&self, slots: &[usize]) -> f64 {
        let mut e = 0.0;
        for p in 0..slots.len() {
            let a = p * self.k + slots[p];
            e += self.unary[a];
            let [_, right, _, down] = self.neighbors(p);
            for q in [right, down].into_iter().flatten() {
                e += self.pair_cost(a, q * self.k + slots[q]);
            }
        }
        e
    }

    fn unary_argmin(&self) -> Vec<usize> {
        (0..self.width * self.height)
            .map(|p| self.best_slot(p, |i| self.unary[p * self.k + i]))
            .collect()
    }

    /// Slot with the lowest cost, ties broken by lowest candidate index.
    fn best_slot(&self, p: usize, cost: impl Fn(usize) -> f64) -> usize {
        let mut best = 0;
        let mut best_cost = cost(0);
        for i in 1..self.k {
            let c = cost(i);
            let base = p * self.k;
            if c < best_cost || (c == best_cost && self.labels[base + i] < self.labels[base + best]) {
                best = i;
                best_cost = c;
            }
        }
        best
    }

    /// Synchronous damped min-sum BP. `msgs[d][p * k + i]` is the message
    /// into `p` from its neighbour in direction `d` (left, right, up, down).
    fn belief_propagation(&self, iterations: usize, damping: f64) -> Vec<usize> {
        let n = self.width * self.height;
        let k = self.k;
        let mut msgs = vec![vec![0.0f64; n * k]; 4];
        let opposite = [1usize, 0, 3, 2];
        for _ in 0..iterations {
            let next: Vec<[Vec<f64>; 4]> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let nb = self.neighbors(p);
                    let mut out: [Vec<f64>; 4] = Default::default();
                    let mut h = vec![0.0; k];
                    let mut c = vec![0.0; k];
                    for d in 0..4 {
                        let Some(q) = nb[d] else {
                            out[d] = vec![0.0; k];
                            continue;
                        };
                        // q sees p in the opposite direction; leave that message out.
                        let skip = opposite[d];
                        for j in 0..k {
                            let mut s = self.unary[q * k + j];
                            for (d2, m) in msgs.iter().enumerate() {
                                if d2 != skip {
                                    s += m[q * k + j];
                                }
                            }
                            h[j] = s;
                            let (bu, bv) = (self.u[q * k + j], self.v[q * k + j]);
                            c[j] = s + self.lambda * (bu * bu + bv * bv);
                        }
                        let mut m = vec![0.0; k];
                        let mut lo = f64::INFINITY;
                        for (i, mi) in m.iter_mut().enumerate() {
                            let (au, av) = (self.u[p * k + i], self.v[p * k + i]);
                            let (tu, tv) = (2.0 * self.lambda * au, 2.0 * self.lambda * av);
                            let mut best = f64::INFINITY;
                            for j in 0..k {
                                let val = c[j] - tu * self.u[q * k + j] - tv * self.v[q * k + j];
                                if val < best {
                                    best = val;
                                }
                            }
                            *mi = best + self.lambda * (au * au + av * av);
                            lo = lo.min(*mi);
                        }
                        let old = &msgs[d][p * k..(p + 1) * k];
                        for (mi, o) in m.iter_mut().zip(old) {
                            *mi = damping * o + (1.0 - damping) * (*mi - lo);
                        }
                        out[d] = m;
                    }
                    out
                })
                .collect();
            for (p, dirs) in next.into_iter().enumerate() {
                for (d, m) in dirs.into_iter().enumerate() {
                    msgs[d][p * k..(p + 1) * k].copy_from_slice(&m);
                }
            }
        }
        (0..n)
            .map(|p| {
                self.best_slot(p, |i| {
                    self.unary[p * k + i] + msgs.iter().map(|m| m[p * k + i]).sum::<f64>()
                })
            })
            .collect()
    }
}

/// Approximate minimizer of the smoothness-regularized labelling energy by
/// damped min-sum belief propagation on the 4-connected grid.
///
/// If BP ends above the energy of the per-pixel best labelling (possible on
/// loopy grids), that labelling is returned instead.
pub fn solve_mrf(volume: &ConfidenceVolume, list: &CandidateShortlist, params: &MrfParams) -> Result<MotionField> {
    params.validate()?;
    if (list.width, list.height) != (volume.width, volume.height) {
        return Err(Error::dims(
            format!("{}x{} shortlist", volume.width, volume.height),
            format!("{}x{}", list.width, list.height),
        ));
    }
    let stride = params.grid_stride;
    let problem = Problem::new(volume, list, stride, params.lambda_smooth);
    let unary_only = problem.unary_argmin();
    let slots = if params.lambda_smooth == 0.0 {
        unary_only
    } else {
        let bp = problem.belief_propagation(params.bp_iterations, params.damping);
        if problem.energy(&bp) <= problem.energy(&unary_only) {
            bp
        } else {
            log::debug!("belief propagation ended above the unary labelling; keeping the latter");
            unary_only
        }
    };
    let set = volume.candidates();
    let gw = problem.width;
    Ok(MotionField::from_fn(volume.width, volume.height, |x, y| {
        let p = (y / stride) * gw + x / stride;
        set.vector(problem.labels[p * problem.k + slots[p]] as usize)
    }))
}

/// `sum_p -C(m_p) + lambda * sum_edges |(u_p, v_p) - (u_q, v_q)|^2`, each
/// 4-neighbour edge once. Vectors outside the candidate set take the
/// confidence of their nearest candidate.
pub fn energy(field: &MotionField, volume: &ConfidenceVolume, params: &MrfParams) -> Result<f64> {
    let (unary, smooth) = energy_terms(field, volume, params)?;
    Ok(unary + params.lambda_smooth * smooth)
}

/// The unary sum and the unweighted smoothness sum, separately.
pub fn energy_terms(field: &MotionField, volume: &ConfidenceVolume, _params: &MrfParams) -> Result<(f64, f64)> {
    if field.dims() != (volume.width, volume.height) {
        return Err(Error::dims(
            format!("{}x{}", volume.width, volume.height),
            format!("{}x{}", field.width(), field.height()),
        ));
    }
    let set = volume.candidates();
    let (w, h) = field.dims();
    let mut unary = 0.0;
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            let m = field.get(x, y);
            let idx = set.index_of(&m).unwrap_or_else(|| set.nearest(&m));
            unary -= volume.at(x, y, idx);
            if x + 1 < w {
                smooth += m.dist2(&field.get(x + 1, y));
            }
            if y + 1 < h {
                smooth += m.dist2(&field.get(x, y + 1));
            }
        }
    }
    Ok((unary, smooth))
}
