//! Diagonal-covariance Gaussian mixtures over differential vectors:
//! feature subsampling, k-means++ initialization, EM, and log-domain
//! density / posterior evaluation.

use std::borrow::Borrow;
use std::f64::consts::PI;
use std::path::Path;

use log::{debug, info};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{check_version, read_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::raster::{diff_at, interior_count, DiffVector, GrayImage, SamplingMode};

pub const DIM: usize = DiffVector::DIM;

/// Lower bound on every stored variance component (intensity^2).
pub const VARIANCE_FLOOR: f64 = 1e-4;

const CHUNK: usize = 4096;
const MODEL_MAGIC: &[u8; 8] = b"LHSGMM\0\0";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub components: usize,
    pub max_em_iters: usize,
    /// Stop once the relative mean log-likelihood gain falls below this.
    pub tolerance: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub max_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            components: 16,
            max_em_iters: 200,
            tolerance: 1e-6,
            kmeans_iters: 50,
            seed: 0,
            max_samples: 1_000_000,
        }
    }
}

/// Mixture weights, means and diagonal variances, plus the neighborhood
/// sampling mode the model was trained for.
#[derive(Clone, Debug)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<[f64; DIM]>,
    variances: Vec<[f64; DIM]>,
    mode: SamplingMode,
    // log(alpha_k) - 0.5 * (d log 2pi + sum log var)
    log_norm: Vec<f64>,
    inv_var: Vec<[f64; DIM]>,
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.variances == other.variances
            && self.mode == other.mode
    }
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<[f64; DIM]>,
        variances: Vec<[f64; DIM]>,
        mode: SamplingMode,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: if means.len() != k { means.len() } else { variances.len() },
            });
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("variances must be positive and finite"));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means must be finite"));
        }
        let half_log_2pi = 0.5 * DIM as f64 * (2.0 * PI).ln();
        let log_norm = weights
            .iter()
            .zip(&variances)
            .map(|(w, var)| w.ln() - half_log_2pi - 0.5 * var.iter().map(|v| v.ln()).sum::<f64>())
            .collect();
        let inv_var = variances.iter().map(|var| var.map(|v| 1.0 / v)).collect();
        Ok(GmmModel {
            weights,
            means,
            variances,
            mode,
            log_norm,
            inv_var,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[[f64; DIM]] {
        &self.means
    }

    pub fn variances(&self) -> &[[f64; DIM]] {
        &self.variances
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: SamplingMode) -> Self {
        self.mode = mode;
        self
    }

    /// `log(alpha_k N(v | mu_k, Sigma_k))` for every component.
    pub fn component_log_joint(&self, v: &DiffVector, out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate().take(self.components()) {
            let mu = &self.means[k];
            let iv = &self.inv_var[k];
            let mut maha = 0.0;
            for j in 0..DIM {
                let d = v.0[j] - mu[j];
                maha += d * d * iv[j];
            }
            *slot = self.log_norm[k] - 0.5 * maha;
        }
    }

    /// `log p(v | model)`.
    pub fn log_density(&self, v: &DiffVector) -> f64 {
        let mut buf = vec![0.0; self.components()];
        self.component_log_joint(v, &mut buf);
        log_sum_exp(&buf)
    }

    /// Component responsibilities for `v`; returns `log p(v)` and fills `out`.
    pub fn posteriors_into(&self, v: &DiffVector, out: &mut [f64]) -> f64 {
        self.component_log_joint(v, out);
        let lse = log_sum_exp(out);
        for g in out.iter_mut() {
            *g = (*g - lse).exp();
        }
        lse
    }

    pub fn posteriors(&self, v: &DiffVector) -> Vec<f64> {
        let mut out = vec![0.0; self.components()];
        self.posteriors_into(v, &mut out);
        out
    }

    /// Mean log-likelihood over `samples`.
    pub fn mean_log_likelihood(&self, samples: &[DiffVector]) -> f64 {
        let partial: Vec<f64> = samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut buf = vec![0.0; self.components()];
                chunk
                    .iter()
                    .map(|v| {
                        self.component_log_joint(v, &mut buf);
                        log_sum_exp(&buf)
                    })
                    .sum::<f64>()
            })
            .collect();
        partial.iter().sum::<f64>() / samples.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(MODEL_MAGIC, MODEL_VERSION);
        enc.u32(self.components() as u32);
        enc.u32(DIM as u32);
        enc.u8(self.mode.code());
        enc.f64s(&self.weights);
        for m in &self.means {
            enc.f64s(m);
        }
        for v in &self.variances {
            enc.f64s(v);
        }
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut dec, version) = Decoder::new(bytes, MODEL_MAGIC)?;
        check_version(version, MODEL_VERSION)?;
        let k = dec.u32()? as usize;
        let d = dec.u32()? as usize;
        if d != DIM {
            return Err(Error::InvalidFile(format!("model dimension {d}, expected {DIM}")));
        }
        let mode = SamplingMode::from_code(dec.u8()?)?;
        let weights = dec.f64s(k)?;
        let mut rows = |n: usize| -> Result<Vec<[f64; DIM]>> {
            let flat = dec.f64s(n * DIM)?;
            Ok(flat.chunks_exact(DIM).map(|c| c.try_into().unwrap()).collect())
        };
        let means = rows(k)?;
        let variances = rows(k)?;
        dec.finish()?;
        GmmModel::new(weights, means, variances, mode)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?).map_err(|e| e.in_file(path))
    }
}

/// Uniformly samples at most `cfg.max_samples` differential vectors, without
/// replacement, across all interior pixels of `images`.
pub fn subsample_features<I: Borrow<GrayImage>>(
    images: &[I],
    mode: SamplingMode,
    cfg: &TrainConfig,
) -> Result<Vec<DiffVector>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("image set"));
    }
    let mut offsets = Vec::with_capacity(images.len() + 1);
    let mut total = 0usize;
    offsets.push(0);
    for img in images {
        let img = img.borrow();
        if img.width() < 3 || img.height() < 3 {
            return Err(Error::ImageTooSmall {
                width: img.width(),
                height: img.height(),
                min: 3,
            });
        }
        total += interior_count(img);
        offsets.push(total);
    }
    let locate = |global: usize| -> DiffVector {
        let img_idx = offsets.partition_point(|&o| o <= global) - 1;
        let img = images[img_idx].borrow();
        let local = global - offsets[img_idx];
        let inner_w = img.width() - 2;
        diff_at(img, 1 + local / inner_w, 1 + local % inner_w, mode)
    };
    let picked: Vec<usize> = if total <= cfg.max_samples {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = index::sample(&mut rng, total, cfg.max_samples).into_vec();
        idx.sort_unstable();
        idx
    };
    info!("sampled {} of {} differential vectors from {} images", picked.len(), total, images.len());
    Ok(picked.into_iter().map(locate).collect())
}

fn sq_dist(a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
    let mut s = 0.0;
    for j in 0..DIM {
        let d = a[j] - b[j];
        s += d * d;
    }
    s
}

fn nearest(centers: &[[f64; DIM]], v: &[f64; DIM]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_plus_plus(samples: &[DiffVector], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; DIM]> {
    let n = samples.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![samples[first].0];
    let mut dist: Vec<f64> = samples.iter().map(|v| sq_dist(&v.0, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the accumulated sum
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every remaining point coincides with a center
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        let c = samples[pick].0;
        for (d, v) in dist.iter_mut().zip(samples) {
            *d = d.min(sq_dist(&v.0, &c));
        }
        centers.push(c);
    }
    centers
}

/// Assigns every sample to its nearest center. Returns assignments,
/// squared distances and whether anything changed.
fn assign(samples: &[DiffVector], centers: &[[f64; DIM]], labels: &mut [usize], dists: &mut [f64]) -> bool {
    samples
        .par_chunks(CHUNK)
        .zip(labels.par_chunks_mut(CHUNK))
        .zip(dists.par_chunks_mut(CHUNK))
        .map(|((vs, ls), ds)| {
            let mut changed = false;
            for ((v, l), d) in vs.iter().zip(ls.iter_mut()).zip(ds.iter_mut()) {
                let (k, dist) = nearest(centers, &v.0);
                changed |= *l != k;
                *l = k;
                *d = dist;
            }
            changed
        })
        .reduce(|| false, |a, b| a || b)
}

/// Moves the farthest point of a multi-member cluster into every empty
/// cluster.
fn fill_empty(samples: &[DiffVector], centers: &mut [[f64; DIM]], labels: &mut [usize], dists: &mut [f64]) {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..samples.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        counts[labels[i]] -= 1;
        counts[empty] = 1;
        labels[i] = empty;
        dists[i] = 0.0;
        centers[empty] = samples[i].0;
        debug!("k-means: reseeded empty cluster {empty} from sample {i}");
    }
}

fn centroids(samples: &[DiffVector], labels: &[usize], k: usize) -> Vec<[f64; DIM]> {
    let mut sums = vec![[0.0; DIM]; k];
    let mut counts = vec![0usize; k];
    for (v, &l) in samples.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(&v.0) {
            *s += x;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| s.map(|x| x / c.max(1) as f64))
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations; the resulting partition
/// defines the initial mixture.
pub fn kmeans_init(samples: &[DiffVector], k: usize, max_iters: usize, seed: u64) -> Result<GmmModel> {
    if k == 0 {
        return Err(Error::invalid("component count must be positive"));
    }
    if samples.len() < k {
        return Err(Error::NotEnoughSamples {
            needed: k,
            got: samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(samples, k, &mut rng);
    let n = samples.len();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    assign(samples, &centers, &mut labels, &mut dists);
    fill_empty(samples, &mut centers, &mut labels, &mut dists);
    for it in 0..max_iters {
        centers = centroids(samples, &labels, k);
        let changed = assign(samples, &centers, &mut labels, &mut dists);
        fill_empty(samples, &mut centers, &mut labels, &mut dists);
        if !changed {
            debug!("k-means converged after {} iterations", it + 1);
            break;
        }
    }
    let means = centroids(samples, &labels, k);
    let mut counts = vec![0usize; k];
    let mut sq = vec![[0.0; DIM]; k];
    for (v, &l) in samples.iter().zip(&labels) {
        counts[l] += 1;
        for j in 0..DIM {
            let d = v.0[j] - means[l][j];
            sq[l][j] += d * d;
        }
    }
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let variances = sq
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.map(|x| (x / c as f64).max(VARIANCE_FLOOR)))
        .collect();
    GmmModel::new(weights, means, variances, SamplingMode::default())
}

struct SuffStats {
    log_lik: f64,
    mass: Vec<f64>,
    first: Vec<[f64; DIM]>,
    second: Vec<[f64; DIM]>,
}

impl SuffStats {
    fn zeros(k: usize) -> Self {
        SuffStats {
            log_lik: 0.0,
            mass: vec![0.0; k],
            first: vec![[0.0; DIM]; k],
            second: vec![[0.0; DIM]; k],
        }
    }

    fn merge(&mut self, other: &SuffStats) {
        self.log_lik += other.log_lik;
        for k in 0..self.mass.len() {
            self.mass[k] += other.mass[k];
            for j in 0..DIM {
                self.first[k][j] += other.first[k][j];
                self.second[k][j] += other.second[k][j];
            }
        }
    }
}

fn e_step(model: &GmmModel, samples: &[DiffVector]) -> SuffStats {
    let k = model.components();
    let partial: Vec<SuffStats> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = SuffStats::zeros(k);
            let mut gamma = vec![0.0; k];
            for v in chunk {
                st.log_lik += model.posteriors_into(v, &mut gamma);
                for (c, &g) in gamma.iter().enumerate() {
                    st.mass[c] += g;
                    for j in 0..DIM {
                        let x = v.0[j];
                        st.first[c][j] += g * x;
                        st.second[c][j] += g * x * x;
                    }
                }
            }
            st
        })
        .collect();
    // fixed-order reduction keeps results independent of thread count
    let mut total = SuffStats::zeros(k);
    for p in &partial {
        total.merge(p);
    }
    total
}

fn m_step(prev: &GmmModel, st: &SuffStats) -> Result<GmmModel> {
    const MIN_MASS: f64 = 1e-10;
    let k = prev.components();
    let eff: Vec<f64> = st.mass.iter().map(|&m| m.max(MIN_MASS)).collect();
    let total: f64 = eff.iter().sum();
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        if st.mass[c] < MIN_MASS {
            means.push(prev.means[c]);
            variances.push(prev.variances[c]);
            continue;
        }
        let mu = st.first[c].map(|s| s / st.mass[c]);
        let mut var = [0.0; DIM];
        for j in 0..DIM {
            var[j] = (st.second[c][j] / st.mass[c] - mu[j] * mu[j]).max(VARIANCE_FLOOR);
        }
        means.push(mu);
        variances.push(var);
    }
    let weights = eff.iter().map(|m| m / total).collect();
    GmmModel::new(weights, means, variances, prev.mode)
}

/// Result of an EM run.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the samples under each successive model.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Expectation-maximization for a diagonal mixture starting from `init`.
pub fn em_fit(samples: &[DiffVector], init: GmmModel, cfg: &TrainConfig) -> Result<EmFit> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    let n = samples.len() as f64;
    let mut model = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for it in 0..cfg.max_em_iters {
        let st = e_step(&model, samples);
        let ll = st.log_lik / n;
        if !ll.is_finite() || st.mass.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite responsibilities at EM iteration {it} (mean log-likelihood {ll})"
            )));
        }
        if let Some(&prev) = trace.last() {
            if ll - prev < cfg.tolerance * prev.abs() {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        model = m_step(&model, &st)?;
    }
    if !converged {
        trace.push(model.mean_log_likelihood(samples));
    }
    info!(
        "EM: {} iterations, mean log-likelihood {:.6}{}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        if converged { "" } else { " (iteration cap)" }
    );
    Ok(EmFit {
        model,
        trace,
        converged,
    })
}

/// k-means initialization followed by EM on already sampled features.
pub fn train_gmm_on_samples(samples: &[DiffVector], mode: SamplingMode, cfg: &TrainConfig) -> Result<EmFit> {
    let init = kmeans_init(samples, cfg.components, cfg.kmeans_iters, cfg.seed)?.with_mode(mode);
    em_fit(samples, init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_model(k: usize) -> GmmModel {
        GmmModel::new(vec![1.0 / k as f64; k], vec![[0.0; DIM]; k], vec![[1.0; DIM]; k], SamplingMode::Rectangular)
            .unwrap()
    }

    fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, center: f64, sigma: f64) -> Vec<DiffVector> {
        (0..n)
            .map(|_| {
                let mut v = [0.0; DIM];
                for x in v.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x = center + sigma * z;
                }
                DiffVector(v)
            })
            .collect()
    }

    #[test]
    fn standard_normal_at_origin() {
        let expected = -4.0 * (2.0 * PI).ln();
        assert!((unit_model(1).log_density(&DiffVector::default()) - expected).abs() < 1e-12);
        assert!((expected + 7.35149).abs() < 1e-4);
    }

    #[test]
    fn density_translation_equivariant() {
        let m = GmmModel::new(
            vec![0.3, 0.7],
            vec![[1.0; DIM], [-2.0, 0., 1., 3., 0., 0., 1., 2.]],
            vec![[0.5; DIM], [2.0; DIM]],
            SamplingMode::Rectangular,
        )
        .unwrap();
        let shift = [0.3, -1.2, 4.0, 0.0, 2.5, -0.7, 1.1, 9.0];
        let add = |a: [f64; DIM]| std::array::from_fn(|j| a[j] + shift[j]);
        let moved = GmmModel::new(
            m.weights().to_vec(),
            m.means().iter().map(|&mu| add(mu)).collect(),
            m.variances().to_vec(),
            SamplingMode::Rectangular,
        )
        .unwrap();
        let v = DiffVector([0.1, 0.2, -0.3, 1.0, 2.0, -1.0, 0.0, 0.5]);
        let a = m.log_density(&v);
        let b = moved.log_density(&DiffVector(add(v.0)));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        // Uniform Monte Carlo over a box reaching 4 sigma past every mean.
        let m = GmmModel::new(
            vec![0.4, 0.6],
            vec![[0.3; DIM], [-0.2; DIM]],
            vec![[0.5, 1.0, 2.0, 0.8, 1.5, 0.6, 1.2, 0.9], [1.0; DIM]],
            SamplingMode::Rectangular,
        )
        .unwrap();
        let bounds: Vec<(f64, f64)> = (0..DIM)
            .map(|j| {
                let sd = m.variances()[0][j].max(m.variances()[1][j]).sqrt();
                (-0.2 - 4.0 * sd, 0.3 + 4.0 * sd)
            })
            .collect();
        let volume: f64 = bounds.iter().map(|(lo, hi)| hi - lo).product();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = DiffVector(std::array::from_fn(|j| rng.random_range(bounds[j].0..bounds[j].1)));
            sum += m.log_density(&v).exp();
        }
        let estimate = sum / n as f64 * volume;
        assert!((estimate - 1.0).abs() < 0.05, "integral estimate {estimate}");
    }

    #[test]
    fn posterior_examples() {
        let v = DiffVector([3.0; DIM]);
        assert_eq!(unit_model(1).posteriors(&v), vec![1.0]);
        for g in unit_model(2).posteriors(&v) {
            assert!((g - 0.5).abs() < 1e-12);
        }
        let sep = GmmModel::new(
            vec![0.5, 0.5],
            vec![[0.0; DIM], [20.0, 0., 0., 0., 0., 0., 0., 0.]],
            vec![[1.0; DIM]; 2],
            SamplingMode::Rectangular,
        )
        .unwrap();
        assert!(sep.posteriors(&DiffVector::default())[0] > 0.999);
    }

    #[test]
    fn posteriors_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.random_range(1..10);
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let m = GmmModel::new(
                raw.iter().map(|w| w / s).collect(),
                (0..k).map(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0))).collect(),
                (0..k).map(|_| std::array::from_fn(|_| rng.random_range(0.01..100.0))).collect(),
                SamplingMode::Rectangular,
            )
            .unwrap();
            let v = DiffVector(std::array::from_fn(|_| rng.random_range(-255.0..255.0)));
            let g = m.posteriors(&v);
            assert!(g.iter().all(|&x| x >= 0.0));
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_single_component_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = gaussian_cloud(&mut rng, 500, 3.0, 2.0);
        let m = kmeans_init(&xs, 1, 50, 0).unwrap();
        let mean0 = xs.iter().map(|v| v.0[0]).sum::<f64>() / 500.0;
        assert_eq!(m.weights(), &[1.0]);
        assert!((m.means()[0][0] - mean0).abs() < 1e-9);
    }

    #[test]
    fn kmeans_separates_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut xs = gaussian_cloud(&mut rng, 300, 10.0, 1.0);
        xs.extend(gaussian_cloud(&mut rng, 300, -10.0, 1.0));
        let m = kmeans_init(&xs, 2, 50, 9).unwrap();
        let mut signs: Vec<bool> = m.means().iter().map(|mu| mu.iter().all(|&x| x > 0.0)).collect();
        signs.sort();
        assert_eq!(signs, vec![false, true]);
        assert!(m.means().iter().all(|mu| mu.iter().all(|&x| x.abs() > 8.0)));
    }

    #[test]
    fn kmeans_degenerate_k_equals_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = gaussian_cloud(&mut rng, 12, 0.0, 5.0);
        let m = kmeans_init(&xs, 12, 50, 1).unwrap();
        for mu in m.means() {
            assert!(xs.iter().any(|v| &v.0 == mu));
        }
        assert!(m.variances().iter().flatten().all(|&v| v == VARIANCE_FLOOR));
        assert!(matches!(kmeans_init(&xs, 13, 50, 1), Err(Error::NotEnoughSamples { .. })));
    }

    #[test]
    fn kmeans_handles_duplicates() {
        let xs = vec![DiffVector([1.0; DIM]); 10];
        let m = kmeans_init(&xs, 3, 10, 0).unwrap();
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.weights().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn em_recovers_single_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let xs = gaussian_cloud(&mut rng, n, 4.0, 3.0);
        let cfg = TrainConfig {
            components: 1,
            ..TrainConfig::default()
        };
        let fit = train_gmm_on_samples(&xs, SamplingMode::Rectangular, &cfg).unwrap();
        let se_mean = 3.0 / (n as f64).sqrt();
        let se_var = 9.0 * (2.0 / n as f64).sqrt();
        for j in 0..DIM {
            assert!((fit.model.means()[0][j] - 4.0).abs() < 3.0 * se_mean);
            assert!((fit.model.variances()[0][j] - 9.0).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn em_trace_is_monotone_and_floor_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut xs = gaussian_cloud(&mut rng, 2000, 0.0, 1.0);
        xs.extend(gaussian_cloud(&mut rng, 1000, 5.0, 0.5));
        // a collapsed cluster of identical vectors exercises the variance floor
        xs.extend(std::iter::repeat_n(DiffVector::default(), 500));
        let cfg = TrainConfig {
            components: 4,
            ..TrainConfig::default()
        };
        let fit = train_gmm_on_samples(&xs, SamplingMode::Rectangular, &cfg).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {w:?}");
        }
        assert!(fit.model.variances().iter().flatten().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn model_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = gaussian_cloud(&mut rng, 400, 1.0, 2.0);
        let cfg = TrainConfig {
            components: 3,
            max_em_iters: 5,
            ..TrainConfig::default()
        };
        let m = train_gmm_on_samples(&xs, SamplingMode::Circular, &cfg).unwrap().model;
        let bytes = m.to_bytes();
        let back = GmmModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(GmmModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn subsample_cap_and_determinism() {
        let imgs: Vec<GrayImage> = (0..4)
            .map(|s| GrayImage::from_fn(12, 10, |r, c| ((r * 7 + c * 13 + s * 5) % 29) as f64))
            .collect();
        let total = 4 * 10 * 8;
        let all = subsample_features(&imgs, SamplingMode::Rectangular, &TrainConfig::default()).unwrap();
        assert_eq!(all.len(), total);
        let cfg = TrainConfig {
            max_samples: 100,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = subsample_features(&imgs, SamplingMode::Circular, &cfg).unwrap();
        let b = subsample_features(&imgs, SamplingMode::Circular, &cfg).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert!(subsample_features::<GrayImage>(&[], SamplingMode::Circular, &cfg).is_err());
    }
}
