//! Optional TOML configuration file. Command-line flags take precedence
//! over file values, which take precedence over built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use lhs_core::classify::{DEFAULT_C_GRID, DEFAULT_FOLDS};
use lhs_core::harness::{PipelineConfig, VerificationMode};
use lhs_core::metric::{SgdConfig, VUpdate};
use lhs_core::patterns::DEFAULT_LTP_TOLERANCE;
use lhs_core::{DescriptorKind, Grid, Preprocess, Roi, SamplingMode, TrainConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub pipeline: PipelineSection,
    pub metric: MetricSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub kind: Option<String>,
    pub ltp_tolerance: Option<f64>,
    pub components: Option<usize>,
    pub sampling: Option<String>,
    pub grid: Option<String>,
    pub max_samples: Option<usize>,
    pub em_iters: Option<usize>,
    pub em_tolerance: Option<f64>,
    pub c_grid: Option<Vec<f64>>,
    pub folds: Option<usize>,
    pub crop: Option<String>,
    pub center_crop: Option<String>,
    pub resize: Option<String>,
    pub flips: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub dim: Option<usize>,
    pub iterations: Option<usize>,
    pub rate: Option<f64>,
    pub bias: Option<f64>,
    pub margin: Option<f64>,
    pub v_update: Option<String>,
    pub log_every: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Descriptor, mixture and classifier settings shared by several commands.
#[derive(Debug, Default, Clone, Args)]
pub struct PipelineArgs {
    /// Descriptor kind: lhs, lbp or ltp.
    #[arg(long)]
    pub kind: Option<String>,
    /// LTP tolerance in intensity units.
    #[arg(long)]
    pub ltp_tolerance: Option<f64>,
    /// Mixture components K.
    #[arg(long, short = 'k')]
    pub components: Option<usize>,
    /// Neighborhood sampling: rectangular or circular.
    #[arg(long)]
    pub sampling: Option<String>,
    /// Cell grid as ROWSxCOLS.
    #[arg(long)]
    pub grid: Option<String>,
    /// Cap on differential vectors used for mixture training.
    #[arg(long)]
    pub max_samples: Option<usize>,
    /// Maximum EM iterations.
    #[arg(long)]
    pub em_iters: Option<usize>,
    /// Relative log-likelihood gain that stops EM.
    #[arg(long)]
    pub em_tolerance: Option<f64>,
    /// SVM cost grid searched by cross-validation, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub c_grid: Option<Vec<f64>>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Crop box applied first, as left,top,right,bottom.
    #[arg(long)]
    pub crop: Option<String>,
    /// Center crop to WIDTHxHEIGHT.
    #[arg(long)]
    pub center_crop: Option<String>,
    /// Resize to WIDTHxHEIGHT after cropping.
    #[arg(long)]
    pub resize: Option<String>,
    /// Also use horizontally mirrored images in verification.
    #[arg(long)]
    pub flips: bool,
}

/// Metric learning settings.
#[derive(Debug, Default, Clone, Args)]
pub struct MetricArgs {
    /// Projection dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// SGD iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// V update rule: verbatim or symmetric.
    #[arg(long)]
    pub v_update: Option<String>,
    /// Iterations between loss log lines.
    #[arg(long)]
    pub log_every: Option<usize>,
}

/// Parses `WIDTHxHEIGHT`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).with_context(|| format!("size {s:?} is not WIDTHxHEIGHT"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

pub fn parse_kind(name: &str, tolerance: f64) -> Result<DescriptorKind> {
    Ok(match name {
        "lhs" => DescriptorKind::Lhs,
        "lbp" => DescriptorKind::Lbp,
        "ltp" => DescriptorKind::Ltp { tolerance },
        other => bail!("unknown descriptor kind {other:?} (expected lhs, lbp or ltp)"),
    })
}

pub fn parse_v_update(name: &str) -> Result<VUpdate> {
    Ok(match name {
        "verbatim" => VUpdate::Verbatim,
        "symmetric" => VUpdate::Symmetric,
        other => bail!("unknown V update {other:?} (expected verbatim or symmetric)"),
    })
}

pub fn preprocess(args: &PipelineArgs, file: &PipelineSection) -> Result<Preprocess> {
    let crop = args.crop.as_ref().or(file.crop.as_ref()).map(|s| s.parse::<Roi>()).transpose()?;
    let center_crop = args.center_crop.as_ref().or(file.center_crop.as_ref()).map(|s| parse_size(s)).transpose()?;
    let resize = args.resize.as_ref().or(file.resize.as_ref()).map(|s| parse_size(s)).transpose()?;
    Ok(Preprocess {
        crop,
        center_crop,
        resize,
    })
}

pub fn sampling(args: &PipelineArgs, file: &PipelineSection) -> Result<SamplingMode> {
    Ok(match args.sampling.as_ref().or(file.sampling.as_ref()) {
        Some(s) => s.parse()?,
        None => SamplingMode::default(),
    })
}

pub fn grid(args: &PipelineArgs, file: &PipelineSection) -> Result<Grid> {
    Ok(match args.grid.as_ref().or(file.grid.as_ref()) {
        Some(s) => s.parse()?,
        None => Grid::WHOLE,
    })
}

pub fn train_config(args: &PipelineArgs, file: &PipelineSection, seed: u64) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        components: args.components.or(file.components).unwrap_or(d.components),
        max_em_iters: args.em_iters.or(file.em_iters).unwrap_or(d.max_em_iters),
        tolerance: args.em_tolerance.or(file.em_tolerance).unwrap_or(d.tolerance),
        max_samples: args.max_samples.or(file.max_samples).unwrap_or(d.max_samples),
        seed,
        ..d
    }
}

pub fn sgd_config(args: &MetricArgs, file: &MetricSection, seed: u64) -> Result<SgdConfig> {
    let d = SgdConfig::default();
    Ok(SgdConfig {
        rate: args.rate.or(file.rate).unwrap_or(d.rate),
        iterations: args.iters.or(file.iterations).unwrap_or(d.iterations),
        seed,
        bias: args.bias.or(file.bias).unwrap_or(d.bias),
        margin: args.margin.or(file.margin).unwrap_or(d.margin),
        dim: args.dim.or(file.dim).unwrap_or(d.dim),
        log_every: args.log_every.or(file.log_every).unwrap_or(d.log_every),
        v_update: match args.v_update.as_ref().or(file.v_update.as_ref()) {
            Some(s) => parse_v_update(s)?,
            None => d.v_update,
        },
    })
}

pub fn pipeline_config(args: &PipelineArgs, file: &FileConfig, seed: u64) -> Result<PipelineConfig> {
    let p = &file.pipeline;
    let tolerance = args.ltp_tolerance.or(p.ltp_tolerance).unwrap_or(DEFAULT_LTP_TOLERANCE);
    let kind = parse_kind(args.kind.as_deref().or(p.kind.as_deref()).unwrap_or("lhs"), tolerance)?;
    Ok(PipelineConfig {
        descriptor: kind,
        mode: sampling(args, p)?,
        grid: grid(args, p)?,
        gmm: train_config(args, p, seed),
        c_grid: args.c_grid.clone().or(p.c_grid.clone()).unwrap_or(DEFAULT_C_GRID.to_vec()),
        cv_folds: args.folds.or(p.folds).unwrap_or(DEFAULT_FOLDS),
        seed,
        preprocess: preprocess(args, p)?,
        verification: VerificationMode::Unsupervised,
        flips: args.flips || p.flips.unwrap_or(false),
    })
}
