//! Subcommand implementations. Results go to stdout as a readable table
//! followed by `key=value` records; progress is logged to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;

use lhs_core::classify::{eval_verification, svm_cv_select_c, svm_train, verify_threshold, EvalReport};
use lhs_core::encoder::compute_whitening;
use lhs_core::gmm::{subsample_features, train_gmm_on_samples};
use lhs_core::harness::{
    load_pairs, pair_score, run_classification, run_pair_protocol, run_protocol, Dataset, FittedEncoder, Manifest,
    ManifestEntry, PairEntry, VerificationMode,
};
use lhs_core::metric::{train_metric as fit_metric, PairSet};
use lhs_core::raster::{hflip, load_image};
use lhs_core::synth::{default_classes, generate_synthetic_textures, TextureSpec};
use lhs_core::{AggregateReport, DescriptorKind, GmmModel, MetricModel, Protocol, WhiteningStats};

use crate::config::{self, FileConfig, PipelineArgs};
use crate::index::{flip_name, write_index, DescriptorSet, IndexEntry};
use crate::{BenchArgs, ClassifyArgs, EncodeArgs, Inputs, SynthArgs, TrainMetricArgs, VerifyArgs};

const UNLABELED: &str = "-";

fn entries(inputs: &Inputs) -> Result<Vec<ManifestEntry>> {
    match &inputs.manifest {
        Some(path) => Ok(Manifest::load(path)?.entries().to_vec()),
        None if inputs.images.is_empty() => bail!("no input images: pass --manifest or image paths"),
        None => Ok(inputs
            .images
            .iter()
            .map(|p| ManifestEntry {
                path: p.clone(),
                label: UNLABELED.into(),
                group: None,
            })
            .collect()),
    }
}

fn print_report(table: &dyn std::fmt::Display, records: &[String]) {
    println!("{table}");
    println!();
    for r in records {
        println!("{r}");
    }
}

fn stats_path(model: &Path) -> PathBuf {
    model.with_extension("stats")
}

pub fn train_gmm(
    inputs: &Inputs,
    args: &PipelineArgs,
    file: &FileConfig,
    seed: u64,
    out: &Path,
    stats_out: Option<&Path>,
) -> Result<()> {
    let cfg = config::pipeline_config(args, file, seed)?;
    let data = Dataset::from_manifest(&Manifest::new(entries(inputs)?)?, &cfg.preprocess)?;
    let start = Instant::now();
    let samples = subsample_features(&data.images, cfg.mode, &cfg.gmm)?;
    let fit = train_gmm_on_samples(&samples, cfg.mode, &cfg.gmm)?;
    let stats = compute_whitening(&fit.model, &samples)?;
    fit.model.save(out)?;
    let stats_file = stats_out.map(Path::to_path_buf).unwrap_or_else(|| stats_path(out));
    stats.save(&stats_file)?;
    info!("trained in {:.2?}", start.elapsed());
    println!("components={}", fit.model.components());
    println!("sampling={}", fit.model.mode());
    println!("samples={}", samples.len());
    println!("em_iterations={}", fit.trace.len());
    println!("converged={}", fit.converged);
    println!("mean_log_likelihood={:.6}", fit.trace.last().copied().unwrap_or(f64::NAN));
    println!("model={}", out.display());
    println!("stats={}", stats_file.display());
    Ok(())
}

pub fn encode(a: &EncodeArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let mut cfg = config::pipeline_config(&a.pipeline, file, seed)?;
    let lhs = match &a.model {
        Some(model) => {
            let gmm = GmmModel::load(model)?;
            let stats = WhiteningStats::load(a.stats.clone().unwrap_or_else(|| stats_path(model)))?;
            cfg.descriptor = DescriptorKind::Lhs;
            cfg.mode = gmm.mode();
            Some((gmm, stats))
        }
        None if cfg.descriptor == DescriptorKind::Lhs => bail!("LHS encoding needs --model (or pass --kind lbp|ltp)"),
        None => None,
    };
    let encoder = FittedEncoder {
        kind: cfg.descriptor,
        mode: cfg.mode,
        grid: cfg.grid,
        lhs,
    };
    let items = entries(&a.inputs)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let start = Instant::now();
    let index = items
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<IndexEntry> {
            let img = cfg.preprocess.apply(&load_image(&e.path)?)?;
            let name = format!("{i:06}.desc");
            encoder.encode(&img)?.save(a.out.join(&name))?;
            if a.with_flips {
                encoder.encode(&hflip(&img))?.save(a.out.join(flip_name(&name)))?;
            }
            Ok(IndexEntry {
                image: e.path.clone(),
                file: name,
                label: e.label.clone(),
                group: e.group.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_index(&a.out, &index)?;
    info!("encoded {} images in {:.2?}", index.len(), start.elapsed());
    println!("kind={}", cfg.descriptor);
    println!("grid={}", cfg.grid);
    println!("images={}", index.len());
    println!("out={}", a.out.display());
    Ok(())
}

pub fn train_svm(desc: &Path, args: &PipelineArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<()> {
    let cfg = config::pipeline_config(args, file, seed)?;
    let set = DescriptorSet::load(desc, false)?;
    let (x, y) = (set.values(), set.labels());
    let c = match cfg.c_grid.as_slice() {
        [] => bail!("empty C grid"),
        [c] => *c,
        grid => {
            let cv = svm_cv_select_c(&x, &y, grid, cfg.cv_folds, seed)?;
            for (c, acc) in &cv.accuracies {
                println!("cv.c.{c}={acc:.6}");
            }
            cv.best_c
        }
    };
    let model = svm_train(&x, &y, c, seed)?;
    model.save(out)?;
    println!("classes={}", model.labels.len());
    println!("c={c}");
    println!("model={}", out.display());
    Ok(())
}

/// Resolves pair image paths against the descriptor index.
fn indexed_pairs(pairs: &[PairEntry], set: &DescriptorSet) -> Result<Vec<(usize, usize, bool)>> {
    pairs
        .iter()
        .map(|p| Ok((set.position(&p.a)?, set.position(&p.b)?, p.label == lhs_core::PairLabel::Same)))
        .collect()
}

pub fn train_metric(a: &TrainMetricArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let sgd = config::sgd_config(&a.metric, &file.metric, seed)?;
    let set = DescriptorSet::load(&a.desc, a.flips)?;
    let pairs = load_pairs(&a.pairs)?;
    // only descriptors referenced by the pairs feed the initialization
    let mut local: BTreeMap<usize, usize> = BTreeMap::new();
    let mut indexed = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let mut slot = |path: &Path| -> Result<usize> {
            let global = set.position(path)?;
            let next = local.len();
            Ok(*local.entry(global).or_insert(next))
        };
        indexed.push((slot(&p.a)?, slot(&p.b)?, p.label));
    }
    let mut order: Vec<(usize, usize)> = local.iter().map(|(&g, &l)| (l, g)).collect();
    order.sort_unstable();
    let pair_set = PairSet {
        faces: order.iter().map(|&(_, g)| set.plain[g].values.clone()).collect(),
        flipped: set
            .flipped
            .as_ref()
            .map(|f| order.iter().map(|&(_, g)| f[g].values.clone()).collect()),
        pairs: indexed,
    };
    let start = Instant::now();
    let out = fit_metric(&pair_set, &sgd)?;
    out.model.save(&a.out)?;
    info!("trained metric in {:.2?}", start.elapsed());
    for (it, loss) in &out.loss_log {
        println!("loss.{it}={loss:.6}");
    }
    println!("updates={}", out.updates);
    println!("mean_hinge_loss={:.6}", pair_set.mean_hinge_loss(&out.model)?);
    println!("dim={}", out.model.dim());
    println!("metric={}", a.out.display());
    Ok(())
}

pub fn classify(a: &ClassifyArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let cfg = config::pipeline_config(&a.pipeline, file, seed)?;
    let train = Manifest::load(&a.train)?;
    let test = Manifest::load(&a.test)?;
    let n_train = train.entries().len();
    let all: Vec<ManifestEntry> = train.entries().iter().chain(test.entries()).cloned().collect();
    let data = Dataset::from_manifest(&Manifest::new(all)?, &cfg.preprocess)?;
    let run = run_classification(&data, (0..n_train).collect(), (n_train..data.len()).collect(), &cfg, seed)?;
    let mut records = run.report.records("");
    if let Some(c) = run.chosen_c {
        records.push(format!("c={c}"));
    }
    print_report(&run.report, &records);
    Ok(())
}

fn score_all(set: &DescriptorSet, pairs: &[(usize, usize, bool)], metric: Option<&MetricModel>) -> Result<(Vec<f64>, Vec<bool>)> {
    let scores = pairs
        .iter()
        .map(|&(i, j, _)| pair_score(&set.plain[i], set.flip(i), &set.plain[j], set.flip(j), metric))
        .collect::<lhs_core::Result<Vec<_>>>()?;
    Ok((scores, pairs.iter().map(|p| p.2).collect()))
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let set = DescriptorSet::load(&a.desc, a.flips)?;
    let metric = a.metric.as_ref().map(MetricModel::load).transpose()?;
    let train = indexed_pairs(&load_pairs(&a.pairs)?, &set)?;
    let test = indexed_pairs(&load_pairs(&a.test_pairs)?, &set)?;
    let (train_scores, train_same) = score_all(&set, &train, metric.as_ref())?;
    let choice = verify_threshold(&train_scores, &train_same)?;
    let (test_scores, test_same) = score_all(&set, &test, metric.as_ref())?;
    let report: EvalReport = eval_verification(&test_scores, &test_same, choice.threshold)?;
    let mut records = vec![format!("train_accuracy={:.6}", choice.accuracy)];
    records.extend(report.records(""));
    print_report(&report, &records);
    Ok(())
}

pub fn bench(a: &BenchArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let mut cfg = config::pipeline_config(&a.pipeline, file, seed)?;
    if a.supervised {
        cfg.verification = VerificationMode::Metric(config::sgd_config(&a.metric, &file.metric, seed)?);
    }
    let protocol: Protocol = a.protocol.parse()?;
    let start = Instant::now();
    let report: AggregateReport = match (&a.manifest, &a.pairs, protocol) {
        (_, Some(pairs), Protocol::PairVerification) => run_pair_protocol(&load_pairs(pairs)?, &cfg)?,
        (_, Some(_), _) => bail!("--pairs needs --protocol pairs"),
        (Some(_), None, Protocol::PairVerification) => bail!("--protocol pairs needs --pairs"),
        (Some(manifest), None, _) => run_protocol(&Manifest::load(manifest)?, protocol, &cfg)?,
        (None, None, _) => bail!("pass --manifest or --pairs"),
    };
    info!("protocol finished in {:.2?}", start.elapsed());
    print_report(&report, &report.records());
    Ok(())
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let classes: Vec<(String, TextureSpec)> = if a.class.is_empty() {
        default_classes(a.classes)
    } else {
        a.class
            .iter()
            .map(|c| {
                let (label, spec) = c.split_once('=').with_context(|| format!("class {c:?} is not LABEL=SPEC"))?;
                Ok((label.to_string(), spec.parse()?))
            })
            .collect::<Result<_>>()?
    };
    let manifest = generate_synthetic_textures(&classes, a.count, a.size, seed, &a.out)?;
    for (label, spec) in &classes {
        println!("class.{label}={spec}");
    }
    println!("images={}", manifest.entries().len());
    println!("manifest={}", a.out.join("manifest.tsv").display());
    Ok(())
}
