//! Linear SVM (one-vs-rest), cost selection by stratified cross-validation,
//! verification thresholds and evaluation reports.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{check_version, read_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::math::dot;

const SVM_MAGIC: &[u8; 8] = b"LHSSVM\0\0";
const SVM_VERSION: u32 = 1;

/// Default cost grid for cross-validation.
pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Default number of cross-validation folds.
pub const DEFAULT_FOLDS: usize = 5;

/// Dual coordinate descent stopping rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Bound on the spread of projected gradients over one epoch.
    pub tolerance: f64,
    pub max_epochs: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-4,
            max_epochs: 1000,
        }
    }
}

/// Weights and bias of a binary classifier `sign(w.x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// `0.5 (|w|^2 + b^2) + C sum max(0, 1 - y (w.x + b))`, the primal
    /// objective with the bias treated as a constant feature.
    pub fn objective(&self, x: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
        let reg = 0.5 * (dot(&self.weights, &self.weights) + self.bias * self.bias);
        let loss: f64 = x.iter().zip(y).map(|(xi, &yi)| (1.0 - yi * self.decision(xi)).max(0.0)).sum();
        reg + c * loss
    }
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or(Error::EmptyInput("training descriptors"))?;
    if let Some(bad) = x.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(d)
}

/// L1-loss, L2-regularized binary SVM by dual coordinate descent.
/// `y` holds +1 / -1. The visiting order is reshuffled with `seed` each epoch.
pub fn train_binary(x: &[Vec<f64>], y: &[f64], c: f64, seed: u64, cfg: &SolverConfig) -> Result<BinarySvm> {
    let d = check_rows(x)?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("cost C must be positive, got {c}")));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("binary labels must be +1 or -1"));
    }
    let n = x.len();
    let diag: Vec<f64> = x.iter().map(|xi| dot(xi, xi) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let g = y[i] * (dot(&w, &x[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / diag[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y[i];
                if step != 0.0 {
                    for (wk, xk) in w.iter_mut().zip(&x[i]) {
                        *wk += step * xk;
                    }
                    b += step;
                }
            }
        }
        if pg_max - pg_min <= cfg.tolerance {
            break;
        }
    }
    Ok(BinarySvm {
        weights: w,
        bias: b,
        epochs,
    })
}

/// One-vs-rest linear SVM. Classes are kept in sorted label order.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvmModel {
    pub labels: Vec<String>,
    pub classifiers: Vec<BinarySvm>,
    pub c: f64,
}

fn sorted_labels(labels: &[String]) -> Vec<String> {
    labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn svm_train(x: &[Vec<f64>], labels: &[String], c: f64, seed: u64) -> Result<LinearSvmModel> {
    svm_train_with(x, labels, c, seed, &SolverConfig::default())
}

pub fn svm_train_with(
    x: &[Vec<f64>],
    labels: &[String],
    c: f64,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<LinearSvmModel> {
    check_rows(x)?;
    if x.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: labels.len(),
        });
    }
    let classes = sorted_labels(labels);
    if classes.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", classes.len())));
    }
    let classifiers = classes
        .par_iter()
        .map(|class| {
            let y: Vec<f64> = labels.iter().map(|l| if l == class { 1.0 } else { -1.0 }).collect();
            train_binary(x, &y, c, seed, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearSvmModel {
        labels: classes,
        classifiers,
        c,
    })
}

impl LinearSvmModel {
    pub fn dim(&self) -> usize {
        self.classifiers[0].weights.len()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.classifiers.iter().map(|c| c.decision(x)).collect())
    }

    /// Index of the winning class; ties go to the earlier class.
    pub fn predict_index(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        Ok(&self.labels[self.predict_index(x)?])
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<String>> {
        xs.par_iter().map(|x| self.predict(x).map(str::to_owned)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encoder().into_bytes()
    }

    fn encoder(&self) -> Encoder {
        let mut enc = Encoder::new(SVM_MAGIC, SVM_VERSION);
        enc.u32(self.labels.len() as u32);
        enc.u32(self.dim() as u32);
        enc.f64(self.c);
        for (label, clf) in self.labels.iter().zip(&self.classifiers) {
            enc.str(label);
            enc.f64(clf.bias);
            enc.f64s(&clf.weights);
        }
        enc
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut dec, version) = Decoder::new(bytes, SVM_MAGIC)?;
        check_version(version, SVM_VERSION)?;
        let k = dec.u32()? as usize;
        let d = dec.u32()? as usize;
        let c = dec.f64()?;
        if k < 2 || d == 0 {
            return Err(Error::InvalidFile(format!("SVM with {k} classes of dimension {d}")));
        }
        let mut labels = Vec::with_capacity(k);
        let mut classifiers = Vec::with_capacity(k);
        for _ in 0..k {
            labels.push(dec.str()?);
            let bias = dec.f64()?;
            classifiers.push(BinarySvm {
                weights: dec.f64s(d)?,
                bias,
                epochs: 0,
            });
        }
        dec.finish()?;
        Ok(LinearSvmModel { labels, classifiers, c })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encoder().write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?).map_err(|e| e.in_file(path))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Stratified fold assignment: each class is shuffled with `seed` and dealt
/// round-robin, continuing where the previous class stopped.
pub fn stratified_folds(labels: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if labels.len() < folds {
        return Err(Error::NotEnoughSamples {
            needed: folds,
            got: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for class in sorted_labels(labels) {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOutcome {
    pub best_c: f64,
    /// `(C, mean validation accuracy)` in grid order.
    pub accuracies: Vec<(f64, f64)>,
}

/// Picks the grid cost with the best mean fold accuracy; ties go to the
/// smaller C.
pub fn svm_cv_select_c(x: &[Vec<f64>], labels: &[String], grid: &[f64], folds: usize, seed: u64) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("C grid"));
    }
    check_rows(x)?;
    if x.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: labels.len(),
        });
    }
    let assignment = stratified_folds(labels, folds, seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds).map(move |f| (g, f))).collect();
    let fold_acc = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..x.len() {
                if assignment[i] == f {
                    vx.push(x[i].clone());
                    vy.push(labels[i].clone());
                } else {
                    tx.push(x[i].clone());
                    ty.push(labels[i].clone());
                }
            }
            let model = svm_train(&tx, &ty, grid[g], seed)?;
            let pred = model.predict_batch(&vx)?;
            let hits = pred.iter().zip(&vy).filter(|(p, t)| p == t).count();
            Ok(hits as f64 / vy.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let mean_acc = |g: usize| fold_acc[g * folds..(g + 1) * folds].iter().sum::<f64>() / folds as f64;
    let mut best = order[0];
    for &g in &order[1..] {
        if mean_acc(g) > mean_acc(best) {
            best = g;
        }
    }
    Ok(CvOutcome {
        best_c: grid[best],
        accuracies: (0..grid.len()).map(|g| (grid[g], mean_acc(g))).collect(),
    })
}

/// Threshold chosen on training scores and its training accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub accuracy: f64,
}

/// A pair is declared "same" when its score is strictly below the threshold.
pub fn predict_same(score: f64, threshold: f64) -> bool {
    score < threshold
}

fn check_scores(scores: &[f64], same: &[bool]) -> Result<()> {
    if scores.len() != same.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: same.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("verification scores must be finite"));
    }
    Ok(())
}

/// Scans the threshold below every score, the midpoints between distinct
/// sorted scores, and the threshold above every score. Returns the most
/// accurate one, preferring the lowest on ties.
pub fn verify_threshold(scores: &[f64], same: &[bool]) -> Result<ThresholdChoice> {
    check_scores(scores, same)?;
    let n_same = same.iter().filter(|&&s| s).count();
    if n_same == 0 || n_same == same.len() {
        return Err(Error::invalid("verification training needs both same and different pairs"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len() as f64;
    // threshold below everything: all pairs called "different"
    let mut correct = (scores.len() - n_same) as f64;
    let mut best = ThresholdChoice {
        threshold: scores[idx[0]] - 1.0,
        accuracy: correct / n,
    };
    let mut k = 0;
    while k < idx.len() {
        let value = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == value {
            correct += if same[idx[k]] { 1.0 } else { -1.0 };
            k += 1;
        }
        let threshold = if k < idx.len() {
            0.5 * (value + scores[idx[k]])
        } else {
            value + 1.0
        };
        if correct / n > best.accuracy {
            best = ThresholdChoice {
                threshold,
                accuracy: correct / n,
            };
        }
    }
    Ok(best)
}

/// Equal error rate of the ROC traced by sweeping the threshold over the
/// scores, interpolated linearly where false-accept and false-reject cross.
pub fn roc_eer(scores: &[f64], same: &[bool]) -> Result<f64> {
    check_scores(scores, same)?;
    let n_same = same.iter().filter(|&&s| s).count() as f64;
    let n_diff = scores.len() as f64 - n_same;
    if n_same == 0.0 || n_diff == 0.0 {
        return Err(Error::invalid("EER needs both same and different pairs"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // start with everything rejected: FAR = 0, FRR = 1
    let (mut far, mut frr) = (0.0f64, 1.0f64);
    let mut k = 0;
    while k < idx.len() {
        let value = scores[idx[k]];
        let (prev_far, prev_frr) = (far, frr);
        while k < idx.len() && scores[idx[k]] == value {
            if same[idx[k]] {
                frr -= 1.0 / n_same;
            } else {
                far += 1.0 / n_diff;
            }
            k += 1;
        }
        if far >= frr {
            let d0 = prev_far - prev_frr;
            let d1 = far - frr;
            let t = if d1 == d0 { 0.0 } else { -d0 / (d1 - d0) };
            return Ok(prev_far + t * (far - prev_far));
        }
    }
    Ok(far.min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationStats {
    pub threshold: f64,
    pub eer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Row / column label order of the confusion matrix.
    pub labels: Vec<String>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Per-class recall; `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub verification: Option<VerificationStats>,
}

pub fn eval_report(predicted: &[String], truth: &[String]) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let labels: Vec<String> = truth.iter().chain(predicted).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let pos = |l: &String| labels.binary_search(l).unwrap();
    let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
    for (p, t) in predicted.iter().zip(truth) {
        confusion[pos(t)][pos(p)] += 1;
    }
    let hits: usize = (0..labels.len()).map(|i| confusion[i][i]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: hits as f64 / truth.len() as f64,
        labels,
        confusion,
        per_class,
        verification: None,
    })
}

pub const SAME_LABEL: &str = "same";
pub const DIFFERENT_LABEL: &str = "different";

fn pair_label(same: bool) -> String {
    if same { SAME_LABEL } else { DIFFERENT_LABEL }.to_owned()
}

/// Report for pair scores judged against a fixed threshold, with ROC-EER.
pub fn eval_verification(scores: &[f64], same: &[bool], threshold: f64) -> Result<EvalReport> {
    check_scores(scores, same)?;
    let predicted: Vec<String> = scores.iter().map(|&s| pair_label(predict_same(s, threshold))).collect();
    let truth: Vec<String> = same.iter().map(|&s| pair_label(s)).collect();
    let mut report = eval_report(&predicted, &truth)?;
    report.verification = Some(VerificationStats {
        threshold,
        eer: roc_eer(scores, same)?,
    });
    Ok(report)
}

impl EvalReport {
    /// Machine-readable `key=value` lines.
    pub fn records(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}accuracy={:.6}", self.accuracy)];
        for (label, acc) in self.labels.iter().zip(&self.per_class) {
            if let Some(acc) = acc {
                out.push(format!("{prefix}class.{label}.accuracy={acc:.6}"));
            }
        }
        if let Some(v) = &self.verification {
            out.push(format!("{prefix}threshold={:.6}", v.threshold));
            out.push(format!("{prefix}eer={:.6}", v.eer));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(8);
        writeln!(f, "accuracy: {:.4}", self.accuracy)?;
        if let Some(v) = &self.verification {
            writeln!(f, "threshold: {:.6}", v.threshold)?;
            writeln!(f, "eer: {:.4}", v.eer)?;
        }
        write!(f, "{:>width$} |", "truth")?;
        for l in &self.labels {
            write!(f, " {l:>width$}")?;
        }
        writeln!(f, " | {:>8}", "recall")?;
        for (i, row) in self.confusion.iter().enumerate() {
            write!(f, "{:>width$} |", self.labels[i])?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            match self.per_class[i] {
                Some(acc) => writeln!(f, " | {acc:>8.4}")?,
                None => writeln!(f, " | {:>8}", "-")?,
            }
        }
        Ok(())
    }
}
