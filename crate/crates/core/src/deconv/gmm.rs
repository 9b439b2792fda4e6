use std::f64::consts::PI;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Side of the square patches the prior models.
pub const PATCH_SIDE: usize = 8;
/// Dimension of a vectorized patch.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;
/// Diagonal loading added to covariances.
pub const COV_JITTER: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"GMMP";
const CHUNK: usize = 512;

/// One Gaussian of the mixture. Patches are row-major 8x8.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major 64x64.
    pub covariance: Vec<f64>,
}

/// Gaussian mixture over DC-removed 8x8 grayscale patches.
///
/// Parameters are held at `f32` precision so that the on-disk form is
/// lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

fn cholesky(cov: &[f64], extra: f64) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let m = DMatrix::from_row_slice(PATCH_DIM, PATCH_DIM, cov) + DMatrix::identity(PATCH_DIM, PATCH_DIM) * extra;
    m.cholesky()
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if components.is_empty() {
            return bad("mixture has no components".into());
        }
        let mut components = components;
        for (k, c) in components.iter_mut().enumerate() {
            if c.mean.len() != PATCH_DIM || c.covariance.len() != PATCH_DIM * PATCH_DIM {
                return bad(format!("component {k} does not describe 8x8 patches"));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return bad(format!("component {k} has weight {}", c.weight));
            }
            if c.mean.iter().chain(&c.covariance).any(|v| !v.is_finite()) {
                return bad(format!("component {k} has non-finite parameters"));
            }
            for i in 0..PATCH_DIM {
                for j in 0..i {
                    let (a, b) = (c.covariance[i * PATCH_DIM + j], c.covariance[j * PATCH_DIM + i]);
                    if (a - b).abs() > 1e-6 * (1.0 + a.abs().max(b.abs())) {
                        return bad(format!("component {k} covariance is not symmetric"));
                    }
                }
            }
            c.weight = to_f32_precision(c.weight);
            c.mean.iter_mut().for_each(|v| *v = to_f32_precision(*v));
            c.covariance.iter_mut().for_each(|v| *v = to_f32_precision(*v));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-4 {
            return bad(format!("weights sum to {total}"));
        }
        for (k, c) in components.iter().enumerate() {
            if cholesky(&c.covariance, 0.0).is_none() && cholesky(&c.covariance, COV_JITTER).is_none() {
                return bad(format!("component {k} covariance is not positive definite"));
            }
        }
        Ok(GmmPrior { components })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Log-density of each DC-removed patch in `patches` (n x 64, row-major).
    pub fn log_density(&self, patches: &[f64]) -> Vec<f64> {
        let model = ScoringModel::new(self, 0.0).expect("validated covariances factor");
        let n = patches.len() / PATCH_DIM;
        let mut out = vec![0.0; n];
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, o)| {
            let start = ci * CHUNK;
            let scores = model.scores(&patches[start * PATCH_DIM..(start + o.len()) * PATCH_DIM]);
            for (j, v) in o.iter_mut().enumerate() {
                *v = log_sum_exp(&scores.column(j).iter().copied().collect::<Vec<_>>());
            }
        });
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.components.len() * (1 + PATCH_DIM + PATCH_DIM * PATCH_DIM) * 4);
        out.extend_from_slice(MAGIC);
        codec::put_u32(&mut out, self.components.len() as u32);
        codec::put_u32(&mut out, PATCH_DIM as u32);
        for c in &self.components {
            codec::put_f32(&mut out, c.weight as f32);
            for v in c.mean.iter().chain(&c.covariance) {
                codec::put_f32(&mut out, *v as f32);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<GmmPrior> {
        let mut r = Reader::new("GMMP", bytes);
        r.magic(MAGIC)?;
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(r.error("zero components"));
        }
        let dim_at = r.offset();
        let dim = r.u32()? as usize;
        if dim != PATCH_DIM {
            return Err(Error::format("GMMP", dim_at, format!("dimension {dim}, expected {PATCH_DIM}")));
        }
        let per = 1 + PATCH_DIM + PATCH_DIM * PATCH_DIM;
        if r.remaining() != n * per * 4 {
            return Err(r.error(format!("expected {} payload bytes, found {}", n * per * 4, r.remaining())));
        }
        let mut components = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.f32_vec(per)?;
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            components.push(GmmComponent {
                weight: v[0],
                mean: v[1..1 + PATCH_DIM].to_vec(),
                covariance: v[1 + PATCH_DIM..].to_vec(),
            });
        }
        r.finish()?;
        GmmPrior::new(components).map_err(|e| match e {
            Error::InvalidParameter(reason) => Error::format("GMMP", 12, reason),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<GmmPrior> {
        GmmPrior::decode(&codec::read_file(path)?)
    }

    /// The pretrained prior shipped with the crate.
    pub fn bundled() -> GmmPrior {
        static BYTES: &[u8] = include_bytes!("../../assets/prior.gmmp");
        GmmPrior::decode(BYTES).expect("bundled prior is valid")
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-component whitening `L^{-1}` of `Σ_k + s I`, with the constant part of
/// the Gaussian log-density folded into `offset`.
struct ScoringModel {
    whiten: Vec<DMatrix<f64>>,
    means: Vec<DVector<f64>>,
    offset: Vec<f64>,
}

impl ScoringModel {
    fn new(prior: &GmmPrior, extra_var: f64) -> Result<Self> {
        let mut whiten = Vec::new();
        let mut means = Vec::new();
        let mut offset = Vec::new();
        for c in &prior.components {
            let ch = cholesky(&c.covariance, extra_var)
                .or_else(|| cholesky(&c.covariance, extra_var + COV_JITTER))
                .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?;
            let l = ch.l();
            let logdet: f64 = 2.0 * (0..PATCH_DIM).map(|i| l[(i, i)].ln()).sum::<f64>();
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(PATCH_DIM, PATCH_DIM))
                .ok_or_else(|| Error::InvalidParameter("singular covariance factor".into()))?;
            whiten.push(linv);
            means.push(DVector::from_column_slice(&c.mean));
            offset.push(c.weight.ln() - 0.5 * logdet - 0.5 * PATCH_DIM as f64 * (2.0 * PI).ln());
        }
        Ok(ScoringModel { whiten, means, offset })
    }

    /// Joint log-densities `log w_k + log N(x; μ_k, Σ_k + sI)`, one column
    /// per patch.
    fn scores(&self, patches: &[f64]) -> DMatrix<f64> {
        let n = patches.len() / PATCH_DIM;
        let x = DMatrix::from_column_slice(PATCH_DIM, n, patches);
        let mut out = DMatrix::zeros(self.whiten.len(), n);
        let mut d = DMatrix::zeros(PATCH_DIM, n);
        let mut s = DMatrix::zeros(PATCH_DIM, n);
        for k in 0..self.whiten.len() {
            d.copy_from(&x);
            for mut col in d.column_iter_mut() {
                col -= &self.means[k];
            }
            s.gemm(1.0, &self.whiten[k], &d, 0.0);
            for j in 0..n {
                out[(k, j)] = self.offset[k] - 0.5 * s.column(j).norm_squared();
            }
        }
        out
    }
}

/// Patch update of the splitting scheme at one penalty `β`.
///
/// For the DC-removed patch `y` the component maximizing
/// `w_k N(y; μ_k, Σ_k + I/β)` is chosen and `y` is replaced by its Wiener
/// estimate `μ_k + Σ_k (Σ_k + I/β)^{-1} (y − μ_k)`, then the DC is restored.
pub struct ZStep {
    beta: f64,
    scoring: ScoringModel,
    /// `(Σ_k + I/β)^{-1}`, row-major.
    precision: Vec<Vec<f64>>,
}

impl ZStep {
    pub fn new(prior: &GmmPrior, beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        let scoring = ScoringModel::new(prior, 1.0 / beta)?;
        let precision = scoring
            .whiten
            .iter()
            .map(|linv| {
                let p = linv.transpose() * linv;
                p.transpose().as_slice().to_vec()
            })
            .collect();
        Ok(ZStep { beta, scoring, precision })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Updates every patch of `patches` (n x 64, row-major) in place.
    pub fn apply(&self, patches: &mut [f64]) {
        patches.par_chunks_mut(CHUNK * PATCH_DIM).for_each(|chunk| {
            let mut dc = Vec::with_capacity(chunk.len() / PATCH_DIM);
            for p in chunk.chunks_mut(PATCH_DIM) {
                let m = p.iter().sum::<f64>() / PATCH_DIM as f64;
                p.iter_mut().for_each(|v| *v -= m);
                dc.push(m);
            }
            let scores = self.scoring.scores(chunk);
            let mut resid = [0.0; PATCH_DIM];
            for (j, p) in chunk.chunks_mut(PATCH_DIM).enumerate() {
                let col = scores.column(j);
                let mut best = 0;
                for k in 1..col.len() {
                    if col[k] > col[best] {
                        best = k;
                    }
                }
                let mean = &self.scoring.means[best];
                for i in 0..PATCH_DIM {
                    resid[i] = p[i] - mean[i];
                }
                // Σ (Σ + I/β)^{-1} r = r − (1/β)(Σ + I/β)^{-1} r
                let prec = &self.precision[best];
                for i in 0..PATCH_DIM {
                    let row = &prec[i * PATCH_DIM..(i + 1) * PATCH_DIM];
                    let pr: f64 = row.iter().zip(&resid).map(|(a, b)| a * b).sum();
                    p[i] += dc[j] - pr / self.beta;
                }
            }
        });
    }
}

/// Single-patch form of [`ZStep::apply`].
pub fn solve_z(patch: &[f64], prior: &GmmPrior, beta: f64) -> Result<Vec<f64>> {
    if patch.len() != PATCH_DIM {
        return Err(Error::dims(PATCH_DIM, patch.len()));
    }
    let mut out = patch.to_vec();
    ZStep::new(prior, beta)?.apply(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFitOptions {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop once the relative change of the mean log-likelihood drops below this.
    pub tol: f64,
    pub seed: u64,
    pub kmeans_iter: usize,
}

impl Default for GmmFitOptions {
    fn default() -> Self {
        GmmFitOptions { n_components: 20, max_iter: 200, tol: 1e-5, seed: 0, kmeans_iter: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFitReport {
    /// Mean log-likelihood per patch after each EM iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub pruned: usize,
}

/// Fits a mixture to DC-removed patches (n x 64, row-major) with default
/// options.
pub fn fit_gmm(patches: &[f64], n_components: usize, seed: u64) -> Result<(GmmPrior, GmmFitReport)> {
    fit_gmm_with(patches, &GmmFitOptions { n_components, seed, ..Default::default() })
}

pub fn fit_gmm_with(patches: &[f64], opts: &GmmFitOptions) -> Result<(GmmPrior, GmmFitReport)> {
    if patches.len() % PATCH_DIM != 0 {
        return Err(Error::dims("a multiple of 64 samples", patches.len()));
    }
    let n = patches.len() / PATCH_DIM;
    if opts.n_components == 0 || n < 100 * opts.n_components {
        return Err(Error::InvalidParameter(format!(
            "{} components need at least {} patches, got {n}",
            opts.n_components,
            100 * opts.n_components
        )));
    }
    if patches.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite patch sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let labels = kmeans(patches, opts.n_components, opts.kmeans_iter, &mut rng);
    let mut resp = DMatrix::zeros(opts.n_components, n);
    for (j, &l) in labels.iter().enumerate() {
        resp[(l, j)] = 1.0;
    }
    let mut report = GmmFitReport { log_likelihood: Vec::new(), converged: false, pruned: 0 };
    let mut prior = m_step(patches, &resp, &mut report.pruned)?;
    for it in 0..opts.max_iter {
        let (ll, r) = e_step(&prior, patches)?;
        let prev = report.log_likelihood.last().copied();
        report.log_likelihood.push(ll);
        debug!("EM iteration {it}: mean log-likelihood {ll:.6}");
        if let Some(prev) = prev {
            if ((ll - prev) / prev.abs().max(1e-12)).abs() < opts.tol {
                report.converged = true;
                break;
            }
        }
        resp = r;
        prior = m_step(patches, &resp, &mut report.pruned)?;
    }
    Ok((prior, report))
}

fn e_step(prior: &GmmPrior, patches: &[f64]) -> Result<(f64, DMatrix<f64>)> {
    let model = ScoringModel::new(prior, 0.0)?;
    let n = patches.len() / PATCH_DIM;
    let k = prior.n_components();
    let parts: Vec<(f64, DMatrix<f64>)> = patches
        .par_chunks(CHUNK * PATCH_DIM)
        .map(|chunk| {
            let mut s = model.scores(chunk);
            let mut ll = 0.0;
            for mut col in s.column_iter_mut() {
                let lse = log_sum_exp(&col.iter().copied().collect::<Vec<_>>());
                ll += lse;
                col.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            (ll, s)
        })
        .collect();
    let mut resp = DMatrix::zeros(k, n);
    let mut total = 0.0;
    let mut col = 0;
    for (ll, s) in parts {
        total += ll;
        resp.columns_mut(col, s.ncols()).copy_from(&s);
        col += s.ncols();
    }
    Ok((total / n as f64, resp))
}

fn m_step(patches: &[f64], resp: &DMatrix<f64>, pruned: &mut usize) -> Result<GmmPrior> {
    let n = patches.len() / PATCH_DIM;
    let x = DMatrix::from_column_slice(PATCH_DIM, n, patches);
    let mut components = Vec::new();
    let mut xw = DMatrix::zeros(PATCH_DIM, n);
    for k in 0..resp.nrows() {
        let r = resp.row(k);
        let nk: f64 = r.iter().sum();
        if nk / (n as f64) < 1e-8 {
            warn!("pruning degenerate mixture component {k} (weight {:.3e})", nk / n as f64);
            *pruned += 1;
            continue;
        }
        let mean = (&x * r.transpose()) / nk;
        xw.copy_from(&x);
        for (j, mut col) in xw.column_iter_mut().enumerate() {
            col -= &mean;
            col *= r[j].sqrt();
        }
        let mut cov = DMatrix::zeros(PATCH_DIM, PATCH_DIM);
        cov.gemm(1.0 / nk, &xw, &xw.transpose(), 0.0);
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..PATCH_DIM {
            cov[(i, i)] += COV_JITTER;
        }
        components.push(GmmComponent {
            weight: nk / n as f64,
            mean: mean.as_slice().to_vec(),
            covariance: cov.transpose().as_slice().to_vec(),
        });
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    components.iter_mut().for_each(|c| c.weight /= total);
    GmmPrior::new(components)
}

/// k-means++ seeding followed by Lloyd iterations on at most 20k patches;
/// returns a label for every patch.
fn kmeans(patches: &[f64], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = patches.len() / PATCH_DIM;
    let row = |i: usize| &patches[i * PATCH_DIM..(i + 1) * PATCH_DIM];
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let sample: Vec<usize> = if n > 20_000 {
        rand::seq::index::sample(rng, n, 20_000).into_vec()
    } else {
        (0..n).collect()
    };
    let mut centers: Vec<Vec<f64>> = vec![row(sample[rng.gen_range(0..sample.len())]).to_vec()];
    let mut dist: Vec<f64> = sample.iter().map(|&i| d2(row(i), &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => sample[w.sample(rng)],
            Err(_) => sample[rng.gen_range(0..sample.len())],
        };
        let c = row(next).to_vec();
        for (d, &i) in dist.iter_mut().zip(&sample) {
            *d = d.min(d2(row(i), &c));
        }
        centers.push(c);
    }
    let assign = |centers: &[Vec<f64>], i: usize| {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = d2(row(i), center);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };
    for _ in 0..iters {
        let labels: Vec<usize> = sample.iter().map(|&i| assign(&centers, i)).collect();
        let mut sums = vec![vec![0.0; PATCH_DIM]; k];
        let mut counts = vec![0usize; k];
        for (&i, &l) in sample.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    (0..n).into_par_iter().map(|i| assign(&centers, i)).collect()
}

/// Extracts `count` random DC-removed 8x8 patches from grayscale versions of
/// `images`, as an n x 64 row-major buffer.
pub fn sample_patches(images: &[ImageBuffer], count: usize, seed: u64) -> Result<Vec<f64>> {
    let usable: Vec<ImageBuffer> = images
        .iter()
        .filter(|im| im.width() >= PATCH_SIDE && im.height() >= PATCH_SIDE)
        .map(|im| im.to_gray())
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidParameter("no image is at least 8x8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count * PATCH_DIM);
    for _ in 0..count {
        let im = &usable[rng.gen_range(0..usable.len())];
        let x0 = rng.gen_range(0..=im.width() - PATCH_SIDE);
        let y0 = rng.gen_range(0..=im.height() - PATCH_SIDE);
        let start = out.len();
        for y in 0..PATCH_SIDE {
            for x in 0..PATCH_SIDE {
                out.push(im.get(x0 + x, y0 + y, 0));
            }
        }
        let m = out[start..].iter().sum::<f64>() / PATCH_DIM as f64;
        out[start..].iter_mut().for_each(|v| *v -= m);
    }
    Ok(out)
}
