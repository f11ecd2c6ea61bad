//! Joint Euclidean / dot-product metric for pair matching, trained with a
//! margin hinge loss by SGD from a whitened-PCA initialization.
//!
//! The learned score is
//!
//! ```text
//! D(xi, xj) = |L xi - L xj|^2 - (V xi)^T (V xj)
//! ```
//!
//! and a pair with label `y` (+1 same, -1 different) costs
//! `max(0, m - y (b - D))`.

use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector, DVectorView, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{check_version, read_file, Decoder, Encoder};
use crate::error::{Error, Result};

const METRIC_MAGIC: &[u8; 8] = b"LHSMETR\0";
const METRIC_VERSION: u32 = 1;

/// Upper bound on descriptors fed to the whitened PCA.
pub const WPCA_MAX_SAMPLES: usize = 5000;

/// Relative eigenvalue floor used by the whitened PCA.
pub const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    /// +1 for same, -1 for different.
    pub fn sign(self) -> f64 {
        match self {
            PairLabel::Same => 1.0,
            PairLabel::Different => -1.0,
        }
    }

    pub fn from_sign(y: i64) -> Result<Self> {
        match y {
            1 => Ok(PairLabel::Same),
            -1 => Ok(PairLabel::Different),
            other => Err(Error::invalid(format!("pair label must be 1 or -1, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricModel {
    /// `d x d0` Euclidean projection.
    pub l: DMatrix<f64>,
    /// `d x d0` dot-product projection.
    pub v: DMatrix<f64>,
    pub bias: f64,
    pub margin: f64,
}

fn view(x: &[f64]) -> DVectorView<'_, f64> {
    DVectorView::from_slice(x, x.len())
}

impl MetricModel {
    pub fn new(l: DMatrix<f64>, v: DMatrix<f64>, bias: f64, margin: f64) -> Result<Self> {
        if l.shape() != v.shape() {
            return Err(Error::invalid(format!(
                "L is {:?} but V is {:?}",
                l.shape(),
                v.shape()
            )));
        }
        if l.nrows() > l.ncols() {
            return Err(Error::invalid(format!(
                "projection dimension {} exceeds input dimension {}",
                l.nrows(),
                l.ncols()
            )));
        }
        Ok(MetricModel { l, v, bias, margin })
    }

    /// Projection dimension `d`.
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Input descriptor dimension `d0`.
    pub fn input_dim(&self) -> usize {
        self.l.ncols()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Squared joint distance `|L(xi - xj)|^2 - (V xi).(V xj)`.
    pub fn distance(&self, xi: &[f64], xj: &[f64]) -> Result<f64> {
        self.check(xi)?;
        self.check(xj)?;
        Ok(self.terms(xi, xj).distance())
    }

    fn terms(&self, xi: &[f64], xj: &[f64]) -> PairTerms {
        let diff = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, b)| a - b));
        let l_diff = &self.l * &diff;
        let v_xi = &self.v * view(xi);
        let v_xj = &self.v * view(xj);
        PairTerms {
            diff,
            l_diff,
            v_xi,
            v_xj,
        }
    }

    pub fn hinge_loss(&self, xi: &[f64], xj: &[f64], label: PairLabel) -> Result<f64> {
        let d = self.distance(xi, xj)?;
        Ok(hinge(self.margin, self.bias, label, d))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(METRIC_MAGIC, METRIC_VERSION);
        enc.u32(self.dim() as u32);
        enc.u32(self.input_dim() as u32);
        enc.f64(self.bias);
        enc.f64(self.margin);
        for m in [&self.l, &self.v] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    enc.f64(m[(r, c)]);
                }
            }
        }
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut dec, version) = Decoder::new(bytes, METRIC_MAGIC)?;
        check_version(version, METRIC_VERSION)?;
        let d = dec.u32()? as usize;
        let d0 = dec.u32()? as usize;
        let bias = dec.f64()?;
        let margin = dec.f64()?;
        let l = DMatrix::from_row_slice(d, d0, &dec.f64s(d * d0)?);
        let v = DMatrix::from_row_slice(d, d0, &dec.f64s(d * d0)?);
        dec.finish()?;
        MetricModel::new(l, v, bias, margin)
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

struct PairTerms {
    diff: DVector<f64>,
    l_diff: DVector<f64>,
    v_xi: DVector<f64>,
    v_xj: DVector<f64>,
}

impl PairTerms {
    fn distance(&self) -> f64 {
        self.l_diff.norm_squared() - self.v_xi.dot(&self.v_xj)
    }
}

#[inline]
fn hinge(margin: f64, bias: f64, label: PairLabel, distance: f64) -> f64 {
    (margin - label.sign() * (bias - distance)).max(0.0)
}

/// Mean of the distances over the four flipped / unflipped combinations.
pub fn score_pair_flipped(
    model: &MetricModel,
    xi: &[f64],
    xi_flip: &[f64],
    xj: &[f64],
    xj_flip: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for a in [xi, xi_flip] {
        for b in [xj, xj_flip] {
            total += model.distance(a, b)?;
        }
    }
    Ok(total / 4.0)
}

/// Whitened PCA projection: the top `d` covariance eigenvectors as rows,
/// each divided by the square root of its (floored) eigenvalue. At most
/// [`WPCA_MAX_SAMPLES`] descriptors, picked with `seed`, are used.
pub fn wpca_init(descriptors: &[Vec<f64>], d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::invalid("projection dimension must be positive"));
    }
    if descriptors.len() < d || descriptors.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: d.max(2),
            got: descriptors.len(),
        });
    }
    let d0 = descriptors[0].len();
    if d > d0 {
        return Err(Error::invalid(format!("projection dimension {d} exceeds input dimension {d0}")));
    }
    if let Some(bad) = descriptors.iter().find(|x| x.len() != d0) {
        return Err(Error::DimensionMismatch {
            expected: d0,
            got: bad.len(),
        });
    }
    let picked: Vec<usize> = if descriptors.len() > WPCA_MAX_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, descriptors.len(), WPCA_MAX_SAMPLES).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..descriptors.len()).collect()
    };
    let n = picked.len();
    let mut x = DMatrix::from_fn(n, d0, |r, c| descriptors[picked[r]][c]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let denom = (n - 1) as f64;

    // (eigenvalue, unit eigenvector of the covariance)
    let mut pairs: Vec<(f64, DVector<f64>)> = if n >= d0 {
        let cov = (x.transpose() * &x) / denom;
        let eig = SymmetricEigen::new(cov);
        (0..d0).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned())).collect()
    } else {
        // Gram-matrix route: same nonzero spectrum, n x n instead of d0 x d0.
        let gram = (&x * x.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|i| {
                let u = x.transpose() * eig.eigenvectors.column(i);
                let norm = u.norm();
                let u = if norm > 0.0 { u / norm } else { u };
                (eig.eigenvalues[i], u)
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map(|p| p.0).unwrap_or(0.0).max(0.0);
    let floor = (EIGEN_FLOOR * top).max(f64::MIN_POSITIVE);

    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(d);
    let mut scales = Vec::with_capacity(d);
    for (lambda, u) in pairs.into_iter() {
        if rows.len() == d {
            break;
        }
        // Gram eigenvectors with no spread map to noise; complete those below.
        if n < d0 && (lambda <= floor || (u.norm() - 1.0).abs() > 1e-6) {
            break;
        }
        rows.push(canonical_sign(u));
        scales.push(1.0 / lambda.max(floor).sqrt());
    }
    // Rank-deficient input: extend with orthonormal directions at the floor.
    let mut basis = 0;
    while rows.len() < d && basis < d0 {
        let mut e = DVector::zeros(d0);
        e[basis] = 1.0;
        basis += 1;
        for r in &rows {
            let proj = r.dot(&e);
            e -= r * proj;
        }
        let norm = e.norm();
        if norm > 1e-8 {
            rows.push(canonical_sign(e / norm));
            scales.push(1.0 / floor.sqrt());
        }
    }
    Ok(DMatrix::from_fn(d, d0, |r, c| rows[r][c] * scales[r]))
}

fn canonical_sign(u: DVector<f64>) -> DVector<f64> {
    let pivot = u.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        -u
    } else {
        u
    }
}

/// Which rule updates `V` on a margin violation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VUpdate {
    /// `V += r y V xi xj^T`
    #[default]
    Verbatim,
    /// `V += (r/2) y V (xi xj^T + xj xi^T)`, the symmetric gradient step.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub bias: f64,
    pub margin: f64,
    /// Projection dimension `d`.
    pub dim: usize,
    pub log_every: usize,
    pub v_update: VUpdate,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            rate: 0.002,
            iterations: 1_000_000,
            seed: 0,
            bias: 1.0,
            margin: 0.2,
            dim: 128,
            log_every: 10_000,
            v_update: VUpdate::Verbatim,
        }
    }
}

/// Faces (descriptors), optional mirrored descriptors aligned with
/// `faces`, and labeled index pairs into them.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub faces: Vec<Vec<f64>>,
    pub flipped: Option<Vec<Vec<f64>>>,
    pub pairs: Vec<(usize, usize, PairLabel)>,
}

impl PairSet {
    fn validate(&self) -> Result<usize> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyInput("training pairs"));
        }
        let d0 = self.faces.first().map(Vec::len).ok_or(Error::EmptyInput("faces"))?;
        let all = self.faces.iter().chain(self.flipped.iter().flatten());
        if let Some(bad) = all.clone().find(|x| x.len() != d0) {
            return Err(Error::DimensionMismatch {
                expected: d0,
                got: bad.len(),
            });
        }
        if let Some(f) = &self.flipped {
            if f.len() != self.faces.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.faces.len(),
                    got: f.len(),
                });
            }
        }
        if let Some(&(i, j, _)) = self.pairs.iter().find(|(i, j, _)| *i >= self.faces.len() || *j >= self.faces.len()) {
            return Err(Error::invalid(format!("pair ({i}, {j}) references a missing face")));
        }
        Ok(d0)
    }

    /// Mean hinge loss over all pairs, unflipped.
    pub fn mean_hinge_loss(&self, model: &MetricModel) -> Result<f64> {
        self.validate()?;
        let mut total = 0.0;
        for &(i, j, y) in &self.pairs {
            total += model.hinge_loss(&self.faces[i], &self.faces[j], y)?;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct SgdOutcome {
    pub model: MetricModel,
    /// `(iteration, mean hinge loss of the sampled pairs since the last entry)`.
    pub loss_log: Vec<(usize, f64)>,
    pub updates: usize,
}

/// Runs the SGD loop from `init`. Pairs are drawn uniformly with
/// replacement; with mirrored faces one of the four flip combinations is
/// drawn per step. An update fires only when `y (b - D) < m`.
pub fn sgd_train(init: MetricModel, set: &PairSet, cfg: &SgdConfig) -> Result<SgdOutcome> {
    let d0 = set.validate()?;
    init.check(&set.faces[0])?;
    debug_assert_eq!(d0, init.input_dim());
    let mut model = init;
    model.bias = cfg.bias;
    model.margin = cfg.margin;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_log = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;
    let mut updates = 0usize;
    for it in 0..cfg.iterations {
        let (i, j, y) = set.pairs[rng.random_range(0..set.pairs.len())];
        let (xi, xj) = match &set.flipped {
            Some(flipped) => {
                let combo = rng.random_range(0..4u8);
                let a = if combo & 1 == 0 { &set.faces[i] } else { &flipped[i] };
                let b = if combo & 2 == 0 { &set.faces[j] } else { &flipped[j] };
                (a, b)
            }
            None => (&set.faces[i], &set.faces[j]),
        };
        let terms = model.terms(xi, xj);
        let dist = terms.distance();
        let sign = y.sign();
        window += hinge(model.margin, model.bias, y, dist);
        window_len += 1;
        if sign * (model.bias - dist) < model.margin {
            updates += 1;
            let step = cfg.rate * sign;
            // L <- L - r y (L delta) delta^T
            model.l.ger(-step, &terms.l_diff, &terms.diff, 1.0);
            match cfg.v_update {
                VUpdate::Verbatim => model.v.ger(step, &terms.v_xi, &view(xj), 1.0),
                VUpdate::Symmetric => {
                    model.v.ger(0.5 * step, &terms.v_xi, &view(xj), 1.0);
                    model.v.ger(0.5 * step, &terms.v_xj, &view(xi), 1.0);
                }
            }
        }
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            let mean = window / window_len as f64;
            if !mean.is_finite() {
                return Err(Error::Numerical(format!("SGD loss diverged at iteration {}", it + 1)));
            }
            info!("sgd iter {}: mean hinge loss {:.5}, {} updates", it + 1, mean, updates);
            loss_log.push((it + 1, mean));
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(SgdOutcome {
        model,
        loss_log,
        updates,
    })
}

/// Whitened-PCA initialization of both projections followed by SGD.
pub fn train_metric(set: &PairSet, cfg: &SgdConfig) -> Result<SgdOutcome> {
    set.validate()?;
    let proj = wpca_init(&set.faces, cfg.dim, cfg.seed)?;
    let init = MetricModel::new(proj.clone(), proj, cfg.bias, cfg.margin)?;
    sgd_train(init, set, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, d0: usize) -> MetricModel {
        MetricModel::new(random_matrix(rng, d, d0, 0.5), random_matrix(rng, d, d0, 0.5), 1.0, 0.2).unwrap()
    }

    #[test]
    fn distance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 3, 6);
        let x = random_vec(&mut rng, 6);
        let vx = &m.v * view(&x);
        assert!((m.distance(&x, &x).unwrap() + vx.norm_squared()).abs() < 1e-12);

        let mut zero_v = m.clone();
        zero_v.v.fill(0.0);
        for _ in 0..50 {
            let a = random_vec(&mut rng, 6);
            let b = random_vec(&mut rng, 6);
            assert!(zero_v.distance(&a, &b).unwrap() >= 0.0);
            assert_eq!(zero_v.distance(&a, &a).unwrap(), 0.0);
            assert_eq!(m.distance(&a, &b).unwrap(), m.distance(&b, &a).unwrap());
        }
        assert!(matches!(m.distance(&x, &x[..5]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.2, 1.0, PairLabel::Same, 0.0), 0.0);
        assert!((hinge(0.2, 1.0, PairLabel::Different, 0.9) - 0.3).abs() < 1e-15);
        // exactly at the margin: y (b - D) = m
        assert_eq!(hinge(0.5, 1.0, PairLabel::Same, 0.5), 0.0);
    }

    #[test]
    fn pair_at_margin_never_updates() {
        // D = |x - 0|^2 with L = I, V = 0; pick |x|^2 = 0.5 so y (b - D) = 0.5.
        let l = DMatrix::identity(2, 2);
        let m = MetricModel::new(l, DMatrix::zeros(2, 2), 1.0, 0.5).unwrap();
        let set = PairSet {
            faces: vec![vec![0.5, 0.5], vec![0.0, 0.0]],
            flipped: None,
            pairs: vec![(0, 1, PairLabel::Same)],
        };
        let cfg = SgdConfig {
            margin: 0.5,
            iterations: 100,
            ..SgdConfig::default()
        };
        let out = sgd_train(m.clone(), &set, &cfg).unwrap();
        assert_eq!(out.updates, 0);
        assert_eq!(out.model, m);
    }

    #[test]
    fn satisfied_pairs_leave_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 2, 4);
        let faces: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 4)).collect();
        // label every pair by the side it already sits on, with a wide bias gap
        let mut pairs = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let d = m.distance(&faces[i], &faces[j]).unwrap();
                pairs.push((i, j, if d < 0.0 { PairLabel::Same } else { PairLabel::Different }));
            }
        }
        let set = PairSet {
            faces,
            flipped: None,
            pairs,
        };
        let cfg = SgdConfig {
            iterations: 500,
            bias: 0.0,
            margin: 0.0,
            ..SgdConfig::default()
        };
        let out = sgd_train(m.clone(), &set, &cfg).unwrap();
        assert_eq!(out.updates, 0);
        assert_eq!(out.model.l, m.l);
        assert_eq!(out.model.v, m.v);
    }

    #[test]
    fn violating_same_pair_moves_closer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_model(&mut rng, 3, 5);
            let set = PairSet {
                faces: vec![random_vec(&mut rng, 5), random_vec(&mut rng, 5)],
                flipped: None,
                pairs: vec![(0, 1, PairLabel::Same)],
            };
            let before = m.distance(&set.faces[0], &set.faces[1]).unwrap();
            let cfg = SgdConfig {
                iterations: 1,
                rate: 1e-3,
                bias: before - 10.0,
                ..SgdConfig::default()
            };
            let out = sgd_train(m, &set, &cfg).unwrap();
            assert_eq!(out.updates, 1);
            let after = out.model.distance(&set.faces[0], &set.faces[1]).unwrap();
            assert!(after < before, "{after} >= {before}");
        }
    }

    fn loss_of(l: &DMatrix<f64>, v: &DMatrix<f64>, xi: &[f64], xj: &[f64], y: PairLabel) -> f64 {
        let m = MetricModel::new(l.clone(), v.clone(), 1.0, 0.2).unwrap();
        m.hinge_loss(xi, xj, y).unwrap()
    }

    #[test]
    fn updates_follow_the_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let rate = 0.01;
        let mut checked = 0;
        while checked < 20 {
            let m = random_model(&mut rng, 2, 4);
            let xi = random_vec(&mut rng, 4);
            let xj = random_vec(&mut rng, 4);
            let y = if checked % 2 == 0 { PairLabel::Same } else { PairLabel::Different };
            if m.hinge_loss(&xi, &xj, y).unwrap() < 1e-3 {
                continue;
            }
            checked += 1;
            let set = PairSet {
                faces: vec![xi.clone(), xj.clone()],
                flipped: None,
                pairs: vec![(0, 1, y)],
            };
            let run = |v_update| {
                let cfg = SgdConfig {
                    iterations: 1,
                    rate,
                    v_update,
                    ..SgdConfig::default()
                };
                sgd_train(m.clone(), &set, &cfg).unwrap().model
            };
            let sym = run(VUpdate::Symmetric);
            let verb = run(VUpdate::Verbatim);
            for r in 0..2 {
                for c in 0..4 {
                    let fd = |mat: &DMatrix<f64>, is_l: bool| {
                        let mut plus = mat.clone();
                        plus[(r, c)] += h;
                        let mut minus = mat.clone();
                        minus[(r, c)] -= h;
                        let (lp, lm) = if is_l {
                            (loss_of(&plus, &m.v, &xi, &xj, y), loss_of(&minus, &m.v, &xi, &xj, y))
                        } else {
                            (loss_of(&m.l, &plus, &xi, &xj, y), loss_of(&m.l, &minus, &xi, &xj, y))
                        };
                        (lp - lm) / (2.0 * h)
                    };
                    // both steps are -(r/2) times the loss gradient
                    let grad_l = fd(&m.l, true);
                    let step_l = sym.l[(r, c)] - m.l[(r, c)];
                    assert!((step_l + 0.5 * rate * grad_l).abs() <= 1e-3 * (0.5 * rate * grad_l).abs().max(1e-9));
                    let grad_v = fd(&m.v, false);
                    let step_v = sym.v[(r, c)] - m.v[(r, c)];
                    assert!((step_v + 0.5 * rate * grad_v).abs() <= 1e-3 * (0.5 * rate * grad_v).abs().max(1e-9));
                }
            }
            // verbatim V rule: V + r y (V xi) xj^T
            let vxi = &m.v * view(&xi);
            for r in 0..2 {
                for (c, &xjc) in xj.iter().enumerate() {
                    let expected = m.v[(r, c)] + rate * y.sign() * vxi[r] * xjc;
                    assert!((verb.v[(r, c)] - expected).abs() < 1e-15);
                }
            }
            assert_eq!(verb.l, sym.l);
        }
    }

    #[test]
    fn flipped_scores_average_four_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 3, 5);
        let x = random_vec(&mut rng, 5);
        let vx = &m.v * view(&x);
        assert!((score_pair_flipped(&m, &x, &x, &x, &x).unwrap() + vx.norm_squared()).abs() < 1e-12);
        let y = random_vec(&mut rng, 5);
        assert_eq!(score_pair_flipped(&m, &x, &x, &y, &y).unwrap(), m.distance(&x, &y).unwrap());
        let (xf, yf) = (random_vec(&mut rng, 5), random_vec(&mut rng, 5));
        let by_hand = (m.distance(&x, &y).unwrap()
            + m.distance(&x, &yf).unwrap()
            + m.distance(&xf, &y).unwrap()
            + m.distance(&xf, &yf).unwrap())
            / 4.0;
        assert!((score_pair_flipped(&m, &x, &xf, &y, &yf).unwrap() - by_hand).abs() < 1e-12);
        assert!(score_pair_flipped(&m, &x, &xf[..4], &y, &yf).is_err());
    }

    fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d0: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d0).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    #[test]
    fn wpca_isotropic_rows_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = normal_rows(&mut rng, 4000, 10);
        let l = wpca_init(&data, 6, 0).unwrap();
        let gram = &l * l.transpose();
        for r in 0..6 {
            for c in 0..6 {
                let target = if r == c { 1.0 } else { 0.0 };
                assert!((gram[(r, c)] - target).abs() < 0.1, "LL^T[{r},{c}] = {}", gram[(r, c)]);
            }
        }
    }

    #[test]
    fn wpca_single_direction_and_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dir = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let t: f64 = StandardNormal.sample(&mut rng);
                (&dir * (3.0 * t) + DVector::from_element(3, 1.0)).iter().copied().collect()
            })
            .collect();
        let l = wpca_init(&data, 1, 0).unwrap();
        let row = l.row(0).transpose();
        let cos = row.dot(&dir) / row.norm();
        assert!((cos.abs() - 1.0).abs() < 1e-9);

        let data = normal_rows(&mut rng, 300, 20);
        // covariance route (n >= d0) and Gram route (n < d0)
        for used in [&data[..], &data[..12]] {
            let proj = wpca_init(used, 5, 0).unwrap();
            let projected: Vec<DVector<f64>> = used.iter().map(|x| &proj * view(x)).collect();
            for k in 0..5 {
                let col: Vec<f64> = projected.iter().map(|p| p[k]).collect();
                let (_, sd) = crate::math::mean_std(&col);
                assert!((sd - 1.0).abs() < 1e-6, "coordinate {k} sd {sd}");
            }
        }
        assert!(matches!(wpca_init(&data[..3], 5, 0), Err(Error::NotEnoughSamples { .. })));
    }

    #[test]
    fn wpca_rank_deficient_completes_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = normal_rows(&mut rng, 4, 8);
        let l = wpca_init(&data, 4, 0).unwrap();
        assert_eq!(l.shape(), (4, 8));
        assert!(l.iter().all(|x| x.is_finite()));
        // rows stay mutually orthogonal
        let gram = &l * l.transpose();
        for r in 0..4 {
            for c in 0..4 {
                if r != c {
                    assert!(gram[(r, c)].abs() < 1e-6 * (gram[(r, r)] * gram[(c, c)]).sqrt());
                }
            }
        }
    }

    #[test]
    fn metric_bytes_round_trip_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let faces: Vec<Vec<f64>> = (0..20).map(|_| random_vec(&mut rng, 6)).collect();
        let pairs = (0..19).map(|i| (i, i + 1, if i % 2 == 0 { PairLabel::Same } else { PairLabel::Different })).collect();
        let flipped = Some(faces.iter().map(|f| f.iter().rev().copied().collect()).collect());
        let set = PairSet { faces, flipped, pairs };
        let cfg = SgdConfig {
            dim: 3,
            iterations: 2000,
            log_every: 500,
            ..SgdConfig::default()
        };
        let a = train_metric(&set, &cfg).unwrap();
        let b = train_metric(&set, &cfg).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.loss_log.len(), 4);
        let back = MetricModel::from_bytes(&a.model.to_bytes()).unwrap();
        assert_eq!(back, a.model);
    }
}
