//! Fisher-score encoding of differential vectors and the normalized,
//! optionally gridded image descriptor built from them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::codec::{check_version, read_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::gmm::{GmmModel, DIM};
use crate::patterns::{code_where as lbp_bits, normalize_hist, PatternHistogram, PatternKind, UniformTable, UNIFORM_BINS};
use crate::raster::{center_crop, for_each_diff, DiffVector, GrayImage, SamplingMode};

/// Floor on whitening standard deviations.
pub const STATS_FLOOR: f64 = 1e-8;

/// Score coordinates per mixture component: 8 mean + 8 precision derivatives.
pub const SCORE_DIM_PER_COMPONENT: usize = 2 * DIM;

const CHUNK: usize = 4096;
const STATS_MAGIC: &[u8; 8] = b"LHSSTAT\0";
const STATS_VERSION: u32 = 1;
const DESC_MAGIC: &[u8; 8] = b"LHSDESC\0";
const DESC_VERSION: u32 = 1;

pub fn score_dim(components: usize) -> usize {
    SCORE_DIM_PER_COMPONENT * components
}

/// Descriptor length for `components` mixture components over `cells` cells.
pub fn descriptor_dim(components: usize, cells: usize) -> usize {
    score_dim(components) * cells
}

/// Adds the Fisher score of `v` to `out`; `gamma` is scratch of length K.
#[inline]
fn add_score(model: &GmmModel, v: &DiffVector, gamma: &mut [f64], out: &mut [f64]) {
    model.posteriors_into(v, gamma);
    let means = model.means();
    let vars = model.variances();
    for (k, block) in out.chunks_exact_mut(SCORE_DIM_PER_COMPONENT).enumerate() {
        let g = gamma[k];
        if g == 0.0 {
            continue;
        }
        let (d_mean, d_prec) = block.split_at_mut(DIM);
        for j in 0..DIM {
            let diff = v.0[j] - means[k][j];
            d_mean[j] += g * diff / vars[k][j];
            d_prec[j] += 0.5 * g * (vars[k][j] - diff * diff);
        }
    }
}

/// Gradient of `log p(v)` with respect to each component's mean and
/// diagonal precision, laid out `[d/dmu_1, d/dprec_1, d/dmu_2, ...]`.
pub fn fisher_score(model: &GmmModel, v: &DiffVector) -> Vec<f64> {
    let mut out = vec![0.0; score_dim(model.components())];
    let mut gamma = vec![0.0; model.components()];
    add_score(model, v, &mut gamma, &mut out);
    out
}

/// Mean Fisher score of a set of vectors.
pub fn average_scores(model: &GmmModel, vectors: &[DiffVector]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("differential vectors"));
    }
    let mut acc = vec![0.0; score_dim(model.components())];
    let mut gamma = vec![0.0; model.components()];
    for v in vectors {
        add_score(model, v, &mut gamma, &mut acc);
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    Ok(acc)
}

/// Per-coordinate mean and standard deviation of training Fisher scores.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl WhiteningStats {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((xi, m), s) in x.iter_mut().zip(&self.means).zip(&self.stds) {
            *xi = (*xi - m) / s;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(STATS_MAGIC, STATS_VERSION);
        enc.u32(self.dim() as u32);
        enc.f64s(&self.means);
        enc.f64s(&self.stds);
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut dec, version) = Decoder::new(bytes, STATS_MAGIC)?;
        check_version(version, STATS_VERSION)?;
        let n = dec.u32()? as usize;
        let means = dec.f64s(n)?;
        let stds = dec.f64s(n)?;
        dec.finish()?;
        if stds.iter().any(|&s| !(s >= STATS_FLOOR)) {
            return Err(Error::InvalidFile("whitening deviation below floor".into()));
        }
        Ok(WhiteningStats { means, stds })
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

struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / total;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / total;
        }
        self.count = total;
    }
}

/// Whitening statistics from the Fisher scores of individual training
/// vectors (sample standard deviation, floored).
pub fn compute_whitening(model: &GmmModel, samples: &[DiffVector]) -> Result<WhiteningStats> {
    if samples.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = score_dim(model.components());
    let partial: Vec<Moments> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut gamma = vec![0.0; model.components()];
            let mut score = vec![0.0; dim];
            let mut m = Moments {
                count: 0.0,
                mean: vec![0.0; dim],
                m2: vec![0.0; dim],
            };
            for v in chunk {
                score.iter_mut().for_each(|s| *s = 0.0);
                add_score(model, v, &mut gamma, &mut score);
                m.count += 1.0;
                for ((&s, mean), m2) in score.iter().zip(&mut m.mean).zip(&mut m.m2) {
                    let delta = s - *mean;
                    *mean += delta / m.count;
                    *m2 += delta * (s - *mean);
                }
            }
            m
        })
        .collect();
    let mut total = Moments {
        count: 0.0,
        mean: vec![0.0; dim],
        m2: vec![0.0; dim],
    };
    for p in &partial {
        total.merge(p);
    }
    let stds = total
        .m2
        .iter()
        .map(|&m2| (m2 / (total.count - 1.0)).sqrt().max(STATS_FLOOR))
        .collect();
    Ok(WhiteningStats {
        means: total.mean,
        stds,
    })
}

/// Elementwise signed square root.
pub fn power_normalize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.signum() * v.abs().sqrt()).map(|v| if v == 0.0 { 0.0 } else { v }).collect()
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numerical(format!("cannot l2-normalize vector with norm {norm}")));
    }
    Ok(x.iter().map(|v| v / norm).collect())
}

/// Non-overlapping cell layout, `rows x cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub const WHOLE: Grid = Grid { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("grid {rows}x{cols} has no cells")));
        }
        Ok(Grid { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Center-crops `img` to the largest extent the grid divides, checks
    /// that every cell is at least 3x3, and returns `(image, cell_h, cell_w)`.
    fn fit(&self, img: &GrayImage) -> Result<(GrayImage, usize, usize)> {
        let cell_h = img.height() / self.rows;
        let cell_w = img.width() / self.cols;
        if cell_h < 3 || cell_w < 3 {
            return Err(Error::invalid(format!(
                "{}x{} grid on a {}x{} image leaves cells smaller than 3x3",
                self.rows,
                self.cols,
                img.width(),
                img.height()
            )));
        }
        let (w, h) = (cell_w * self.cols, cell_h * self.rows);
        let img = if (w, h) == (img.width(), img.height()) {
            img.clone()
        } else {
            center_crop(img, w, h)?
        };
        Ok((img, cell_h, cell_w))
    }

    /// Cell index of an interior pixel.
    #[inline]
    fn cell_of(&self, row: usize, col: usize, cell_h: usize, cell_w: usize) -> usize {
        (row / cell_h) * self.cols + col / cell_w
    }
}

impl Default for Grid {
    fn default() -> Self {
        Grid::WHOLE
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for Grid {
    type Err = Error;

    /// Parses `ROWSxCOLS`, e.g. `7x4`.
    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::invalid(format!("grid '{s}' is not ROWSxCOLS")))?;
        let parse = |p: &str| p.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad grid '{s}'")));
        Grid::new(parse(r)?, parse(c)?)
    }
}

/// Which representation a descriptor holds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DescriptorKind {
    Lhs,
    Lbp,
    Ltp { tolerance: f64 },
}

impl DescriptorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DescriptorKind::Lhs => "lhs",
            DescriptorKind::Lbp => "lbp",
            DescriptorKind::Ltp { .. } => "ltp",
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A normalized image descriptor plus the layout it was built with.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub mode: SamplingMode,
    pub grid: Grid,
    /// Mixture components (0 for pattern histograms).
    pub components: usize,
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Per-cell slices of the descriptor.
    pub fn cell_blocks(&self) -> impl Iterator<Item = &[f64]> {
        let block = self.values.len() / self.grid.cells();
        self.values.chunks_exact(block.max(1))
    }

    /// Serialized form; values are stored as 32-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DESC_MAGIC, DESC_VERSION);
        let (kind, tol) = match self.kind {
            DescriptorKind::Lhs => (0u8, 0.0),
            DescriptorKind::Lbp => (1, 0.0),
            DescriptorKind::Ltp { tolerance } => (2, tolerance),
        };
        enc.u8(kind);
        enc.f64(tol);
        enc.u8(self.mode.code());
        enc.u32(self.grid.rows as u32);
        enc.u32(self.grid.cols as u32);
        enc.u32(self.components as u32);
        enc.u32(self.values.len() as u32);
        for &v in &self.values {
            enc.f32(v as f32);
        }
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut dec, version) = Decoder::new(bytes, DESC_MAGIC)?;
        check_version(version, DESC_VERSION)?;
        let kind_code = dec.u8()?;
        let tol = dec.f64()?;
        let kind = match kind_code {
            0 => DescriptorKind::Lhs,
            1 => DescriptorKind::Lbp,
            2 => DescriptorKind::Ltp { tolerance: tol },
            other => return Err(Error::InvalidFile(format!("unknown descriptor kind {other}"))),
        };
        let mode = SamplingMode::from_code(dec.u8()?)?;
        let grid = Grid::new(dec.u32()? as usize, dec.u32()? as usize)?;
        let components = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(dec.f32()? as f64);
        }
        dec.finish()?;
        Ok(Descriptor {
            kind,
            mode,
            grid,
            components,
            values,
        })
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

/// Full LHS pipeline for one image: per-cell average Fisher score,
/// whitening with shared statistics, concatenation, then power and l2
/// normalization of the whole vector.
pub fn encode_image(model: &GmmModel, stats: &WhiteningStats, img: &GrayImage, grid: Grid) -> Result<Descriptor> {
    let k = model.components();
    let block = score_dim(k);
    if stats.dim() != block {
        return Err(Error::DimensionMismatch {
            expected: block,
            got: stats.dim(),
        });
    }
    let (img, cell_h, cell_w) = grid.fit(img)?;
    let cells = grid.cells();
    let mut sums = vec![0.0; block * cells];
    let mut counts = vec![0usize; cells];
    let mut gamma = vec![0.0; k];
    for_each_diff(&img, model.mode(), |row, col, v| {
        let cell = grid.cell_of(row, col, cell_h, cell_w);
        counts[cell] += 1;
        add_score(model, &v, &mut gamma, &mut sums[cell * block..(cell + 1) * block]);
    })?;
    for (cell, chunk) in sums.chunks_exact_mut(block).enumerate() {
        let n = counts[cell] as f64;
        chunk.iter_mut().for_each(|x| *x /= n);
        stats.apply(chunk);
    }
    let values = l2_normalize(&power_normalize(&sums))?;
    Ok(Descriptor {
        kind: DescriptorKind::Lhs,
        mode: model.mode(),
        grid,
        components: k,
        values,
    })
}

/// LBP/LTP baseline descriptor: square-rooted L1-normalized histograms per
/// cell, concatenated and scaled to unit l2 norm.
pub fn pattern_descriptor(img: &GrayImage, mode: SamplingMode, kind: PatternKind, grid: Grid) -> Result<Descriptor> {
    let (img, cell_h, cell_w) = grid.fit(img)?;
    let bins = kind.bins();
    let table = UniformTable::shared();
    let mut hists = vec![0.0; bins * grid.cells()];
    let tol = match kind {
        PatternKind::Ltp { tolerance } if !(tolerance >= 0.0) => {
            return Err(Error::invalid(format!("LTP tolerance must be non-negative, got {tolerance}")))
        }
        PatternKind::Ltp { tolerance } => Some(tolerance),
        PatternKind::Lbp => None,
    };
    for_each_diff(&img, mode, |row, col, v| {
        let base = grid.cell_of(row, col, cell_h, cell_w) * bins;
        match tol {
            None => hists[base + table.bucket(lbp_bits(&v, |x| x >= 0.0))] += 1.0,
            Some(t) => {
                hists[base + table.bucket(lbp_bits(&v, |x| x > t))] += 1.0;
                hists[base + UNIFORM_BINS + table.bucket(lbp_bits(&v, |x| x < -t))] += 1.0;
            }
        }
    })?;
    let scale = 1.0 / (grid.cells() as f64).sqrt();
    let mut values = Vec::with_capacity(hists.len());
    for cell in hists.chunks_exact(bins) {
        let n = normalize_hist(&PatternHistogram { bins: cell.to_vec() })?;
        values.extend(n.bins.iter().map(|b| b * scale));
    }
    let kind = match kind {
        PatternKind::Lbp => DescriptorKind::Lbp,
        PatternKind::Ltp { tolerance } => DescriptorKind::Ltp { tolerance },
    };
    Ok(Descriptor {
        kind,
        mode,
        grid,
        components: 0,
        values,
    })
}
