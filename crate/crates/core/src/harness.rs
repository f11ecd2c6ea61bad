//! Dataset manifests, evaluation protocols and the train/encode/evaluate
//! pipeline run per fold.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classify::{
    eval_report, eval_verification, svm_cv_select_c, svm_train, verify_threshold, EvalReport, DEFAULT_C_GRID,
    DEFAULT_FOLDS,
};
use crate::encoder::{compute_whitening, encode_image, pattern_descriptor, Descriptor, DescriptorKind, Grid, WhiteningStats};
use crate::error::{Error, Result};
use crate::gmm::{subsample_features, train_gmm_on_samples, GmmModel, TrainConfig};
use crate::math::mean_std;
use crate::metric::{score_pair_flipped, train_metric, MetricModel, PairLabel, PairSet, SgdConfig};
use crate::patterns::PatternKind;
use crate::raster::{hflip, load_image, GrayImage, Preprocess, SamplingMode};

/// One labeled image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub group: Option<String>,
}

/// Labeled image list, one `path<TAB>label[<TAB>group]` line per entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("manifest"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.label.is_empty() {
                return Err(Error::invalid(format!("{} has an empty label", e.path.display())));
            }
            if !seen.insert(&e.path) {
                return Err(Error::invalid(format!("{} is listed twice", e.path.display())));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Parses manifest text; relative paths are taken relative to `base`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected path<TAB>label[<TAB>group], got {} fields", fields.len()),
                });
            }
            entries.push(ManifestEntry {
                path: resolve(base, fields[0]),
                label: fields[1].to_string(),
                group: fields.get(2).map(|g| g.to_string()),
            });
        }
        Manifest::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        Manifest::parse(&read_text(path)?, base).map_err(|e| e.in_file(path))
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            out.push_str(&format!("{}\t{}", p.display(), e.label));
            if let Some(g) = &e.group {
                out.push_str(&format!("\t{g}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        std::fs::write(path, self.to_text(base)).map_err(|e| Error::from(e).in_file(path))
    }
}

/// A labeled image pair, optionally tagged with a cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub a: PathBuf,
    pub b: PathBuf,
    pub label: PairLabel,
    pub fold: Option<usize>,
}

/// Parses `path_a<TAB>path_b<TAB>label[<TAB>fold]` lines, where `label` is
/// `1`/`same` or `-1`/`different`.
pub fn parse_pairs(text: &str, base: &Path) -> Result<Vec<PairEntry>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err(format!("expected a<TAB>b<TAB>label[<TAB>fold], got {} fields", fields.len())));
        }
        let label = match fields[2].trim() {
            "1" | "+1" | "same" => PairLabel::Same,
            "-1" | "0" | "different" => PairLabel::Different,
            other => return Err(err(format!("bad pair label {other:?}"))),
        };
        let fold = match fields.get(3) {
            Some(f) => Some(f.trim().parse().map_err(|_| err(format!("bad fold {f:?}")))?),
            None => None,
        };
        pairs.push(PairEntry {
            a: resolve(base, fields[0]),
            b: resolve(base, fields[1]),
            label,
            fold,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pair list"));
    }
    Ok(pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PairEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    parse_pairs(&read_text(path)?, base).map_err(|e| e.in_file(path))
}

/// Pair of image indices into a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexedPair {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
    pub fold: Option<usize>,
}

/// Images held in memory with their labels, groups and pairs.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<String>,
    pub groups: Vec<Option<String>>,
    pub pairs: Vec<IndexedPair>,
}

fn load_all(paths: &[&Path], preprocess: &Preprocess) -> Result<Vec<GrayImage>> {
    let start = Instant::now();
    let images = paths
        .par_iter()
        .map(|p| load_image(p).and_then(|img| preprocess.apply(&img).map_err(|e| e.in_file(p))))
        .collect::<Result<Vec<_>>>()?;
    info!("loaded {} images in {:.2?}", images.len(), start.elapsed());
    Ok(images)
}

impl Dataset {
    pub fn from_images(items: Vec<(GrayImage, String)>) -> Self {
        let n = items.len();
        let (images, labels) = items.into_iter().unzip();
        Dataset {
            images,
            labels,
            groups: vec![None; n],
            pairs: Vec::new(),
        }
    }

    pub fn from_manifest(manifest: &Manifest, preprocess: &Preprocess) -> Result<Self> {
        let paths: Vec<&Path> = manifest.entries.iter().map(|e| e.path.as_path()).collect();
        Ok(Dataset {
            images: load_all(&paths, preprocess)?,
            labels: manifest.entries.iter().map(|e| e.label.clone()).collect(),
            groups: manifest.entries.iter().map(|e| e.group.clone()).collect(),
            pairs: Vec::new(),
        })
    }

    /// Loads every image referenced by `pairs` once, in order of first use.
    pub fn from_pairs(pairs: &[PairEntry], preprocess: &Preprocess) -> Result<Self> {
        let mut index: HashMap<&Path, usize> = HashMap::new();
        let mut paths: Vec<&Path> = Vec::new();
        let mut indexed = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut ids = [0; 2];
            for (k, path) in [&p.a, &p.b].into_iter().enumerate() {
                ids[k] = *index.entry(path.as_path()).or_insert_with(|| {
                    paths.push(path.as_path());
                    paths.len() - 1
                });
            }
            indexed.push(IndexedPair {
                a: ids[0],
                b: ids[1],
                label: p.label,
                fold: p.fold,
            });
        }
        let n = paths.len();
        Ok(Dataset {
            images: load_all(&paths, preprocess)?,
            labels: paths.iter().map(|p| p.display().to_string()).collect(),
            groups: vec![None; n],
            pairs: indexed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// How a dataset is split into training and test portions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Protocol {
    /// `runs` independent splits, stratified per class, with `fraction` of
    /// each class used for training.
    RandomSplit { fraction: f64, runs: usize },
    /// One fold per group, holding out all of its images.
    LeaveOneGroupOut,
    /// One fold per pair fold id, training on the pairs of all other folds.
    PairVerification,
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if let Protocol::RandomSplit { fraction, runs } = *self {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::invalid(format!("split fraction must be in (0, 1), got {fraction}")));
            }
            if runs == 0 {
                return Err(Error::invalid("need at least one run"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::RandomSplit { fraction, runs } => write!(f, "split:{fraction}:{runs}"),
            Protocol::LeaveOneGroupOut => f.write_str("logo"),
            Protocol::PairVerification => f.write_str("pairs"),
        }
    }
}

/// Parses `split:FRACTION:RUNS`, `logo` or `pairs`.
impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let protocol = match parts.as_slice() {
            ["split" | "random-split", fraction, runs] => Protocol::RandomSplit {
                fraction: fraction.parse().map_err(|_| Error::invalid(format!("bad fraction in {s:?}")))?,
                runs: runs.parse().map_err(|_| Error::invalid(format!("bad run count in {s:?}")))?,
            },
            ["logo" | "leave-one-group-out"] => Protocol::LeaveOneGroupOut,
            ["pairs" | "pair-verification"] => Protocol::PairVerification,
            _ => return Err(Error::invalid(format!("unknown protocol {s:?}"))),
        };
        protocol.validate()?;
        Ok(protocol)
    }
}

/// How verification pairs are scored.
#[derive(Clone, Debug, PartialEq)]
pub enum VerificationMode {
    /// Mean per-cell l2 distance between descriptors.
    Unsupervised,
    /// Learned metric trained on the training pairs.
    Metric(SgdConfig),
}

/// Everything that shapes one protocol run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub descriptor: DescriptorKind,
    pub mode: SamplingMode,
    pub grid: Grid,
    /// Mixture training; `components` sets K.
    pub gmm: TrainConfig,
    pub c_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
    pub preprocess: Preprocess,
    pub verification: VerificationMode,
    /// Also score mirrored images in verification.
    pub flips: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            descriptor: DescriptorKind::Lhs,
            mode: SamplingMode::default(),
            grid: Grid::WHOLE,
            gmm: TrainConfig::default(),
            c_grid: DEFAULT_C_GRID.to_vec(),
            cv_folds: DEFAULT_FOLDS,
            seed: 0,
            preprocess: Preprocess::default(),
            verification: VerificationMode::Unsupervised,
            flips: false,
        }
    }
}

/// Descriptor extractor, fitted on training images when it needs a mixture.
#[derive(Clone, Debug)]
pub struct FittedEncoder {
    pub kind: DescriptorKind,
    pub mode: SamplingMode,
    pub grid: Grid,
    pub lhs: Option<(GmmModel, WhiteningStats)>,
}

/// Trains the mixture and whitening statistics on `images` for LHS; pattern
/// descriptors need no fitting.
pub fn fit_encoder(images: &[&GrayImage], cfg: &PipelineConfig, seed: u64) -> Result<FittedEncoder> {
    let lhs = match cfg.descriptor {
        DescriptorKind::Lhs => {
            let gmm_cfg = TrainConfig {
                seed,
                ..cfg.gmm.clone()
            };
            let start = Instant::now();
            let samples = subsample_features(images, cfg.mode, &gmm_cfg)?;
            let fit = train_gmm_on_samples(&samples, cfg.mode, &gmm_cfg)?;
            let stats = compute_whitening(&fit.model, &samples)?;
            info!(
                "fitted K={} mixture on {} vectors from {} images in {:.2?} ({} EM steps)",
                fit.model.components(),
                samples.len(),
                images.len(),
                start.elapsed(),
                fit.trace.len()
            );
            Some((fit.model, stats))
        }
        _ => None,
    };
    Ok(FittedEncoder {
        kind: cfg.descriptor,
        mode: cfg.mode,
        grid: cfg.grid,
        lhs,
    })
}

impl FittedEncoder {
    pub fn encode(&self, img: &GrayImage) -> Result<Descriptor> {
        match (self.kind, &self.lhs) {
            (DescriptorKind::Lhs, Some((model, stats))) => encode_image(model, stats, img, self.grid),
            (DescriptorKind::Lhs, None) => Err(Error::invalid("LHS encoder has no fitted mixture")),
            (DescriptorKind::Lbp, _) => pattern_descriptor(img, self.mode, PatternKind::Lbp, self.grid),
            (DescriptorKind::Ltp { tolerance }, _) => {
                pattern_descriptor(img, self.mode, PatternKind::Ltp { tolerance }, self.grid)
            }
        }
    }

    /// Encodes the listed images in parallel; output follows `indices`.
    pub fn encode_indices(&self, images: &[GrayImage], indices: &[usize], flip: bool) -> Result<Vec<Descriptor>> {
        indices
            .par_iter()
            .map(|&i| {
                if flip {
                    self.encode(&hflip(&images[i]))
                } else {
                    self.encode(&images[i])
                }
            })
            .collect()
    }
}

/// Mean over cells of the l2 distance between corresponding cell blocks.
pub fn cell_l2_score(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    if a.dim() != b.dim() || a.grid != b.grid {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let total: f64 = a
        .cell_blocks()
        .zip(b.cell_blocks())
        .map(|(x, y)| crate::math::squared_distance(x, y).sqrt())
        .sum();
    Ok(total / a.grid.cells() as f64)
}

/// Verification score of a pair, lower meaning more alike: the learned
/// distance when `metric` is given, else the mean per-cell l2 distance.
/// With mirrored descriptors for both sides the four combinations are
/// averaged.
pub fn pair_score(
    a: &Descriptor,
    a_flip: Option<&Descriptor>,
    b: &Descriptor,
    b_flip: Option<&Descriptor>,
    metric: Option<&MetricModel>,
) -> Result<f64> {
    match (metric, a_flip.zip(b_flip)) {
        (Some(m), Some((af, bf))) => score_pair_flipped(m, &a.values, &af.values, &b.values, &bf.values),
        (Some(m), None) => m.distance(&a.values, &b.values),
        (None, Some((af, bf))) => {
            let mut total = 0.0;
            for x in [a, af] {
                for y in [b, bf] {
                    total += cell_l2_score(x, y)?;
                }
            }
            Ok(total / 4.0)
        }
        (None, None) => cell_l2_score(a, b),
    }
}

/// Image indices that fed each fitted stage of a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FitLog {
    /// Mixture and whitening statistics.
    pub features: Vec<usize>,
    /// SVM or metric.
    pub classifier: Vec<usize>,
    /// Verification threshold.
    pub threshold: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub report: EvalReport,
    /// Training and test image indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub fits: FitLog,
    /// Cost picked by cross-validation, for classification runs.
    pub chosen_c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub protocol: Protocol,
    pub runs: Vec<RunReport>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over runs (0 for a single run).
    pub std_accuracy: f64,
    pub mean_eer: Option<f64>,
}

impl AggregateReport {
    fn new(protocol: Protocol, runs: Vec<RunReport>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.report.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let eers: Option<Vec<f64>> = runs.iter().map(|r| r.report.verification.map(|v| v.eer)).collect();
        let mean_eer = eers.filter(|e| !e.is_empty()).map(|e| e.iter().sum::<f64>() / e.len() as f64);
        AggregateReport {
            protocol,
            runs,
            mean_accuracy,
            std_accuracy,
            mean_eer,
        }
    }

    /// Machine-readable `key=value` lines.
    pub fn records(&self) -> Vec<String> {
        let mut out = vec![
            format!("protocol={}", self.protocol),
            format!("runs={}", self.runs.len()),
            format!("mean_accuracy={:.6}", self.mean_accuracy),
            format!("std_accuracy={:.6}", self.std_accuracy),
        ];
        if let Some(eer) = self.mean_eer {
            out.push(format!("mean_eer={eer:.6}"));
        }
        for (i, run) in self.runs.iter().enumerate() {
            out.extend(run.report.records(&format!("run.{i}.")));
            if let Some(c) = run.chosen_c {
                out.push(format!("run.{i}.c={c}"));
            }
        }
        out
    }
}

impl fmt::Display for AggregateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "protocol: {}", self.protocol)?;
        writeln!(f, "{:>4}  {:>6}  {:>6}  {:>9}  {:>8}", "run", "train", "test", "accuracy", "eer")?;
        for (i, run) in self.runs.iter().enumerate() {
            let eer = run.report.verification.map_or("-".to_string(), |v| format!("{:.4}", v.eer));
            writeln!(
                f,
                "{:>4}  {:>6}  {:>6}  {:>9.4}  {:>8}",
                i,
                run.train.len(),
                run.test.len(),
                run.report.accuracy,
                eer
            )?;
        }
        write!(f, "mean accuracy: {:.4} +/- {:.4}", self.mean_accuracy, self.std_accuracy)?;
        if let Some(eer) = self.mean_eer {
            write!(f, "\nmean eer: {eer:.4}")?;
        }
        Ok(())
    }
}

/// Stratified random split: each class is shuffled and `round(fraction *
/// n_class)` members, clamped to `1..n_class`, go to training.
pub fn random_split(labels: &[String], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(rng);
        let n = members.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1));
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// `(train, test)` index sets for each leave-one-group-out fold.
pub fn group_folds(groups: &[Option<String>]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let names: Vec<&String> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| g.as_ref().ok_or_else(|| Error::invalid(format!("entry {i} has no group id"))))
        .collect::<Result<_>>()?;
    let distinct: BTreeSet<&String> = names.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid(format!("leave-one-group-out needs 2+ groups, found {}", distinct.len())));
    }
    Ok(distinct
        .into_iter()
        .map(|g| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..names.len()).partition(|&i| names[i] == g);
            (train, test)
        })
        .collect())
}

fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

/// Fits the encoder and SVM on `train` images and evaluates on `test`.
pub fn run_classification(
    data: &Dataset,
    train: Vec<usize>,
    test: Vec<usize>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<RunReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("training or test split"));
    }
    let train_imgs: Vec<&GrayImage> = train.iter().map(|&i| &data.images[i]).collect();
    let encoder = fit_encoder(&train_imgs, cfg, seed)?;
    let start = Instant::now();
    let to_values = |d: Vec<Descriptor>| d.into_iter().map(|d| d.values).collect::<Vec<_>>();
    let train_x = to_values(encoder.encode_indices(&data.images, &train, false)?);
    let test_x = to_values(encoder.encode_indices(&data.images, &test, false)?);
    info!("encoded {} images in {:.2?}", train.len() + test.len(), start.elapsed());
    let train_y: Vec<String> = train.iter().map(|&i| data.labels[i].clone()).collect();
    let test_y: Vec<String> = test.iter().map(|&i| data.labels[i].clone()).collect();
    let c = match cfg.c_grid.as_slice() {
        [] => return Err(Error::EmptyInput("C grid")),
        [c] => *c,
        grid => svm_cv_select_c(&train_x, &train_y, grid, cfg.cv_folds, seed)?.best_c,
    };
    let model = svm_train(&train_x, &train_y, c, seed)?;
    let report = eval_report(&model.predict_batch(&test_x)?, &test_y)?;
    Ok(RunReport {
        report,
        fits: FitLog {
            features: train.clone(),
            classifier: train.clone(),
            threshold: Vec::new(),
        },
        train,
        test,
        chosen_c: Some(c),
    })
}

fn pair_images(pairs: &[IndexedPair]) -> Vec<usize> {
    pairs.iter().flat_map(|p| [p.a, p.b]).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Fits on the images and pairs of `train_pairs`, scores `test_pairs`.
fn verification_run(
    data: &Dataset,
    train_pairs: &[IndexedPair],
    test_pairs: &[IndexedPair],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<RunReport> {
    let train = pair_images(train_pairs);
    let test = pair_images(test_pairs);
    let train_imgs: Vec<&GrayImage> = train.iter().map(|&i| &data.images[i]).collect();
    let encoder = fit_encoder(&train_imgs, cfg, seed)?;

    let used: Vec<usize> = train.iter().chain(&test).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let slot: HashMap<usize, usize> = used.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let plain = encoder.encode_indices(&data.images, &used, false)?;
    let mirrored = if cfg.flips {
        Some(encoder.encode_indices(&data.images, &used, true)?)
    } else {
        None
    };

    let metric: Option<MetricModel> = match &cfg.verification {
        VerificationMode::Unsupervised => None,
        VerificationMode::Metric(sgd) => {
            let local: HashMap<usize, usize> = train.iter().enumerate().map(|(k, &i)| (i, k)).collect();
            let faces = train.iter().map(|i| plain[slot[i]].values.clone()).collect();
            let flipped = mirrored
                .as_ref()
                .map(|m| train.iter().map(|i| m[slot[i]].values.clone()).collect());
            let set = PairSet {
                faces,
                flipped,
                pairs: train_pairs.iter().map(|p| (local[&p.a], local[&p.b], p.label)).collect(),
            };
            let sgd = SgdConfig { seed, ..sgd.clone() };
            let start = Instant::now();
            let out = train_metric(&set, &sgd)?;
            info!("trained metric on {} pairs in {:.2?} ({} updates)", set.pairs.len(), start.elapsed(), out.updates);
            Some(out.model)
        }
    };

    let score = |p: &IndexedPair| -> Result<f64> {
        let (a, b) = (slot[&p.a], slot[&p.b]);
        let flip = |k: usize| mirrored.as_ref().map(|m| &m[k]);
        pair_score(&plain[a], flip(a), &plain[b], flip(b), metric.as_ref())
    };
    let scores_of = |pairs: &[IndexedPair]| -> Result<(Vec<f64>, Vec<bool>)> {
        let scores = pairs.iter().map(&score).collect::<Result<Vec<_>>>()?;
        Ok((scores, pairs.iter().map(|p| p.label == PairLabel::Same).collect()))
    };
    let (train_scores, train_same) = scores_of(train_pairs)?;
    let choice = verify_threshold(&train_scores, &train_same)?;
    let (test_scores, test_same) = scores_of(test_pairs)?;
    let report = eval_verification(&test_scores, &test_same, choice.threshold)?;
    Ok(RunReport {
        report,
        fits: FitLog {
            features: train.clone(),
            classifier: if metric.is_some() { train.clone() } else { Vec::new() },
            threshold: train.clone(),
        },
        train,
        test,
        chosen_c: None,
    })
}

/// Runs every fold or split of `protocol` and aggregates the reports.
/// All fitted state is rebuilt from each fold's training portion.
pub fn run_protocol_on(data: &Dataset, protocol: Protocol, cfg: &PipelineConfig) -> Result<AggregateReport> {
    protocol.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut runs = Vec::new();
    match protocol {
        Protocol::RandomSplit { fraction, runs: n } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for run in 0..n {
                let (train, test) = random_split(&data.labels, fraction, &mut rng);
                if test.is_empty() {
                    return Err(Error::invalid("split leaves no test images"));
                }
                let start = Instant::now();
                runs.push(run_classification(data, train, test, cfg, run_seed(cfg.seed, run))?);
                info!("run {run}: accuracy {:.4} in {:.2?}", runs[run].report.accuracy, start.elapsed());
            }
        }
        Protocol::LeaveOneGroupOut => {
            for (run, (train, test)) in group_folds(&data.groups)?.into_iter().enumerate() {
                runs.push(run_classification(data, train, test, cfg, run_seed(cfg.seed, run))?);
                info!("fold {run}: accuracy {:.4}", runs[run].report.accuracy);
            }
        }
        Protocol::PairVerification => {
            let folds: BTreeSet<usize> = data
                .pairs
                .iter()
                .map(|p| p.fold.ok_or_else(|| Error::invalid("pair verification needs a fold id on every pair")))
                .collect::<Result<_>>()?;
            if folds.len() < 2 {
                return Err(Error::invalid(format!("pair verification needs 2+ folds, found {}", folds.len())));
            }
            for (run, &fold) in folds.iter().enumerate() {
                let (test, train): (Vec<IndexedPair>, Vec<IndexedPair>) =
                    data.pairs.iter().partition(|p| p.fold == Some(fold));
                runs.push(verification_run(data, &train, &test, cfg, run_seed(cfg.seed, run))?);
                info!("fold {fold}: accuracy {:.4}", runs[run].report.accuracy);
            }
        }
    }
    Ok(AggregateReport::new(protocol, runs))
}

/// Loads the manifest images (after preprocessing) and runs `protocol`.
pub fn run_protocol(manifest: &Manifest, protocol: Protocol, cfg: &PipelineConfig) -> Result<AggregateReport> {
    if protocol == Protocol::PairVerification {
        return Err(Error::invalid("pair verification runs on a pair list, not a manifest"));
    }
    let data = Dataset::from_manifest(manifest, &cfg.preprocess)?;
    run_protocol_on(&data, protocol, cfg)
}

/// Loads the images named by `pairs` and runs pair verification.
pub fn run_pair_protocol(pairs: &[PairEntry], cfg: &PipelineConfig) -> Result<AggregateReport> {
    let data = Dataset::from_pairs(pairs, &cfg.preprocess)?;
    run_protocol_on(&data, Protocol::PairVerification, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_classes, synth_images};

    fn small_cfg(kind: DescriptorKind) -> PipelineConfig {
        PipelineConfig {
            descriptor: kind,
            gmm: TrainConfig {
                components: 2,
                max_samples: 5_000,
                max_em_iters: 20,
                ..TrainConfig::default()
            },
            c_grid: vec![1.0],
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn manifest_parse_and_validate() {
        let base = Path::new("/data");
        let m = Manifest::parse("# comment\na.pgm\tcat\n\n/abs/b.pgm\tdog\tg1\n", base).unwrap();
        assert_eq!(m.entries()[0].path, PathBuf::from("/data/a.pgm"));
        assert_eq!(m.entries()[1].path, PathBuf::from("/abs/b.pgm"));
        assert_eq!(m.entries()[1].group.as_deref(), Some("g1"));
        assert_eq!(Manifest::parse(&m.to_text(base), base).unwrap(), m);
        assert!(matches!(Manifest::parse("a.pgm\n", base), Err(Error::Parse { line: 1, .. })));
        assert!(Manifest::parse("a.pgm\tx\na.pgm\ty\n", base).is_err());
        assert!(Manifest::parse("a.pgm\t\n", base).is_err());
        assert!(Manifest::parse("", base).is_err());
    }

    #[test]
    fn pairs_parse() {
        let p = parse_pairs("a\tb\t1\t0\nc\td\tdifferent\t1\ne\tf\tsame\n", Path::new("/r")).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].label, PairLabel::Same);
        assert_eq!(p[1].label, PairLabel::Different);
        assert_eq!(p[1].fold, Some(1));
        assert_eq!(p[2].fold, None);
        assert_eq!(p[0].a, PathBuf::from("/r/a"));
        assert!(parse_pairs("a\tb\tmaybe\n", Path::new("")).is_err());
    }

    #[test]
    fn protocol_strings() {
        assert_eq!("split:0.5:10".parse::<Protocol>().unwrap(), Protocol::RandomSplit { fraction: 0.5, runs: 10 });
        assert_eq!("logo".parse::<Protocol>().unwrap(), Protocol::LeaveOneGroupOut);
        assert!("split:1.0:3".parse::<Protocol>().is_err());
        assert!("split:0.5:0".parse::<Protocol>().is_err());
        for p in ["split:0.25:3", "logo", "pairs"] {
            assert_eq!(p.parse::<Protocol>().unwrap().to_string(), p);
        }
    }

    #[test]
    fn random_split_halves_each_class() {
        let labels: Vec<String> = (0..512).map(|i| format!("c{}", i % 32)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, test) = random_split(&labels, 0.5, &mut rng);
        assert_eq!(train.len(), 256);
        assert_eq!(test.len(), 256);
        let all: BTreeSet<usize> = train.iter().chain(&test).copied().collect();
        assert_eq!(all.len(), 512);
    }

    #[test]
    fn group_folds_hold_out_each_group() {
        let groups: Vec<Option<String>> = (0..12).map(|i| Some(format!("s{}", i % 4))).collect();
        let folds = group_folds(&groups).unwrap();
        assert_eq!(folds.len(), 4);
        for (train, test) in &folds {
            assert_eq!(test.len(), 3);
            assert_eq!(train.len(), 9);
            assert!(test.iter().all(|&i| groups[i] == groups[test[0]]));
        }
        let mut missing = groups.clone();
        missing[3] = None;
        assert!(group_folds(&missing).is_err());
    }

    fn small_dataset() -> Dataset {
        Dataset::from_images(synth_images(&default_classes(2), 8, 24, 3).unwrap())
    }

    #[test]
    fn split_runs_fit_only_on_training_images() {
        let data = small_dataset();
        let cfg = small_cfg(DescriptorKind::Lhs);
        let agg = run_protocol_on(&data, Protocol::RandomSplit { fraction: 0.5, runs: 2 }, &cfg).unwrap();
        assert_eq!(agg.runs.len(), 2);
        for run in &agg.runs {
            assert_eq!(run.train.len(), 8);
            let test: HashSet<usize> = run.test.iter().copied().collect();
            assert!(run.fits.features.iter().chain(&run.fits.classifier).all(|i| !test.contains(i)));
        }
        let accs: Vec<f64> = agg.runs.iter().map(|r| r.report.accuracy).collect();
        let (m, s) = mean_std(&accs);
        assert_eq!((agg.mean_accuracy, agg.std_accuracy), (m, s));
        let again = run_protocol_on(&data, Protocol::RandomSplit { fraction: 0.5, runs: 2 }, &cfg).unwrap();
        assert_eq!(again, agg);
    }

    #[test]
    fn logo_and_pairs_protocols() {
        let mut data = small_dataset();
        data.groups = (0..data.len()).map(|i| Some(format!("g{}", i % 4))).collect();
        let agg = run_protocol_on(&data, Protocol::LeaveOneGroupOut, &small_cfg(DescriptorKind::Lbp)).unwrap();
        assert_eq!(agg.runs.len(), 4);
        assert!(agg.mean_eer.is_none());

        // pairs within the first 8 images are same-class, across halves different
        let mut pairs = Vec::new();
        for i in 0..8 {
            pairs.push(IndexedPair { a: i, b: (i + 1) % 8, label: PairLabel::Same, fold: Some(i % 2) });
            pairs.push(IndexedPair { a: i, b: 8 + i, label: PairLabel::Different, fold: Some(i % 2) });
        }
        data.pairs = pairs;
        for verification in [VerificationMode::Unsupervised, VerificationMode::Metric(SgdConfig { dim: 4, iterations: 500, ..SgdConfig::default() })] {
            let cfg = PipelineConfig {
                verification,
                flips: true,
                ..small_cfg(DescriptorKind::Lbp)
            };
            let agg = run_protocol_on(&data, Protocol::PairVerification, &cfg).unwrap();
            assert_eq!(agg.runs.len(), 2);
            assert!(agg.mean_eer.is_some());
            for run in &agg.runs {
                let train: HashSet<usize> = run.train.iter().copied().collect();
                assert!(run.fits.threshold.iter().all(|i| train.contains(i)));
            }
        }
        data.pairs[0].fold = None;
        assert!(run_protocol_on(&data, Protocol::PairVerification, &small_cfg(DescriptorKind::Lbp)).is_err());
    }

    #[test]
    fn cell_l2_examples() {
        let mk = |values: Vec<f64>| Descriptor {
            kind: DescriptorKind::Lbp,
            mode: SamplingMode::Rectangular,
            grid: Grid::new(1, 2).unwrap(),
            components: 0,
            values,
        };
        let a = mk(vec![0.0, 0.0, 0.0, 0.0]);
        let b = mk(vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(cell_l2_score(&a, &b).unwrap(), 2.5);
        assert_eq!(cell_l2_score(&a, &a).unwrap(), 0.0);
        assert!(cell_l2_score(&a, &mk(vec![0.0; 6])).is_err());
    }
}
