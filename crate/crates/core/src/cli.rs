//! Command-line entry point and the end-to-end `run-all` pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::make_views;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, DomainAggregate};
use crate::data::{self, generate_synthetic_two_domain, synthetic_class_names, ClassMap, DatasetManifest, SyntheticSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{
    classification_report, export_features, read_features, read_predictions, table4_protocol, write_json,
    write_predictions, MetricsReport, PredictionRow, SilhouetteReport,
};
use crate::model::ModelBundle;
use crate::pretrain::{run_pretraining, PretrainState, RunOptions};
use crate::probe::{accuracy, extract_features, predict, train_probe, FeatureSet, SavedHead};

#[derive(Debug, Parser)]
#[command(name = "impash", version, about = "Contrastive pretraining and linear-probe evaluation for histology tiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a manifest from a class-per-directory corpus, or synthesise one.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Render the original and its four training views side by side, plus the shuffle records.
    AugmentPreview(AugmentPreviewArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Train a linear classifier on frozen features.
    Probe(ProbeArgs),
    /// Apply a trained classifier to a manifest.
    Predict(PredictArgs),
    /// Classification report from a predictions file.
    Evaluate(EvaluateArgs),
    /// Class-level and domain-level silhouette scores from exported features.
    Silhouette(SilhouetteArgs),
    /// Write frozen features of a manifest as CSV.
    ExportFeatures(ExportFeaturesArgs),
    /// Synthetic data, pretraining, probing and evaluation in one go.
    RunAll(RunAllArgs),
    /// Print or write a preset configuration.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MapKind {
    /// Directory names are the class names, sorted.
    Identity,
    /// Nine-class source corpus grouped onto the seven shared classes.
    K19,
    /// Eight-class target corpus; complex stroma is dropped.
    K16,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Generate the synthetic two-domain set (`source/`, `target/`, manifests).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long, default_value_t = 64)]
        n_per_class: usize,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scan `root/<class>/<image>` into a manifest.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum, default_value = "identity")]
        map: MapKind,
        /// Domain id stored with every entry (0 = source, 1 = target).
        #[arg(long, default_value_t = 0)]
        domain: u8,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct AugmentPreviewArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config whose `[augment]` section is used; the desk preset otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Manifest of the (unlabelled) pretraining images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled manifest to train on.
    #[arg(long)]
    pub train: PathBuf,
    /// Output head file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Take `[probe]` and `[eval]` from this config instead of the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CSV of `path,true_label,pred_label`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes; inferred from the largest label if omitted.
    #[arg(long)]
    pub n_classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SilhouetteArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// How the per-class domain scores are summarised.
    #[arg(long, value_enum, default_value = "mean")]
    pub aggregate: AggregateArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregateArg {
    Mean,
    Pooled,
}

impl From<AggregateArg> for DomainAggregate {
    fn from(a: AggregateArg) -> Self {
        match a {
            AggregateArg::Mean => DomainAggregate::Mean,
            AggregateArg::Pooled => DomainAggregate::Pooled,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportFeaturesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunAllArgs {
    /// Config file; defaults to the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Probe results for one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub source_val_acc: f64,
    pub target: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub pretrained: ProbeSummary,
    pub silhouette: SilhouetteReport,
    /// Same probe on the encoder as initialised, before pretraining.
    pub random_baseline: Option<ProbeSummary>,
}

fn load_bundle(checkpoint: &Path) -> Result<(Config, ModelBundle)> {
    let ck = Checkpoint::load(checkpoint)?;
    let state = PretrainState::from_checkpoint(ck)?;
    Ok((state.config, state.query))
}

/// Train on the source training split, report on the source validation
/// split and the target set.
fn probe_encoder(
    config: &Config,
    bundle: &ModelBundle,
    source: &DatasetManifest,
    target: &DatasetManifest,
) -> Result<(ProbeSummary, SavedHead, FeatureSet, FeatureSet)> {
    let (train, val) = source.split_train_val(config.data.val_fraction);
    let bs = config.probe.batch_size;
    let train_f = extract_features(bundle, &train, &config.eval, bs)?;
    let val_f = extract_features(bundle, &val, &config.eval, bs)?;
    let target_f = extract_features(bundle, target, &config.eval, bs)?;
    let n_classes = source.n_classes();
    let seeds = crate::seed::SeedTree::new(config.seed);
    let head = train_probe(train_f.features.view(), &train_f.labels, n_classes, &config.probe, seeds.probe)?;
    let val_pred = predict(&head, val_f.features.view())?;
    let target_pred = predict(&head, target_f.features.view())?;
    let summary = ProbeSummary {
        source_val_acc: accuracy(&val_pred.labels, &val_f.labels),
        target: classification_report(&target_f.labels, &target_pred.labels, n_classes)?,
    };
    let saved = SavedHead {
        checkpoint: PathBuf::new(),
        class_names: source.class_names.clone(),
        eval: config.eval.clone(),
        head,
    };
    let source_f = FeatureSet {
        features: ndarray::concatenate(ndarray::Axis(0), &[train_f.features.view(), val_f.features.view()])
            .map_err(|e| Error::Shape(e.to_string()))?,
        labels: [train_f.labels, val_f.labels].concat(),
        domains: [train_f.domains, val_f.domains].concat(),
        paths: [train_f.paths, val_f.paths].concat(),
        missing: [train_f.missing, val_f.missing].concat(),
    };
    Ok((summary, saved, source_f, target_f))
}

fn prediction_rows(head: &SavedHead, set: &FeatureSet) -> Result<Vec<PredictionRow>> {
    let pred = predict(&head.head, set.features.view())?;
    Ok(set
        .paths
        .iter()
        .zip(&set.labels)
        .zip(&pred.labels)
        .map(|((path, &t), &p)| PredictionRow {
            path: path.clone(),
            true_label: t,
            pred_label: p,
        })
        .collect())
}

/// Synthetic data, pretraining on the source domain, probing on source
/// labels, and evaluation on the target domain, all under `out_dir`:
///
/// ```text
/// config.toml        resolved configuration
/// data/              synthetic tiles and manifests
/// pretrain/          metrics.tsv and checkpoints
/// head.json          trained probe
/// predictions.csv    target-domain predictions
/// features.csv       source and target features
/// summary.json       metrics and silhouettes
/// ```
pub fn run_all(config: &Config, out_dir: &Path) -> Result<RunSummary> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e).in_stage("config"))?;
    config.save(&out_dir.join("config.toml")).map_err(|e| e.in_stage("config"))?;
    let seeds = crate::seed::SeedTree::new(config.seed);

    let t = Instant::now();
    let spec = SyntheticSpec {
        seed: seeds.data,
        n_per_class: config.data.n_per_class,
        n_classes: config.data.n_classes,
        image_size: config.data.image_size,
    };
    let (source, target) = generate_synthetic_two_domain(&out_dir.join("data"), &spec).map_err(|e| e.in_stage("dataset"))?;
    info!("dataset: {} + {} tiles in {:.1?}", source.len(), target.len(), t.elapsed());

    let t = Instant::now();
    let ckpt = run_pretraining(config, &source, &out_dir.join("pretrain"), &RunOptions::default())
        .map_err(|e| e.in_stage("pretrain"))?;
    info!("pretrain: {:.1?}", t.elapsed());

    let t = Instant::now();
    let (_, bundle) = load_bundle(&ckpt).map_err(|e| e.in_stage("probe"))?;
    let (pretrained, mut head, source_f, target_f) =
        probe_encoder(config, &bundle, &source, &target).map_err(|e| e.in_stage("probe"))?;
    head.checkpoint = ckpt;
    head.save(&out_dir.join("head.json")).map_err(|e| e.in_stage("probe"))?;
    info!(
        "probe: source-val acc {:.3}, target acc {:.3} ({:.1?})",
        pretrained.source_val_acc,
        pretrained.target.acc,
        t.elapsed()
    );

    let rows = prediction_rows(&head, &target_f).map_err(|e| e.in_stage("predict"))?;
    write_predictions(&rows, &out_dir.join("predictions.csv")).map_err(|e| e.in_stage("predict"))?;

    let all = ndarray::concatenate(ndarray::Axis(0), &[source_f.features.view(), target_f.features.view()])
        .map_err(|e| Error::Shape(e.to_string()).in_stage("evaluate"))?;
    let labels = [source_f.labels.clone(), target_f.labels.clone()].concat();
    let domains = [source_f.domains.clone(), target_f.domains.clone()].concat();
    let silhouette = table4_protocol(all.view(), &labels, &domains, config.eval.domain_aggregate)
        .map_err(|e| e.in_stage("evaluate"))?;
    export_features(all.view(), &labels, &domains, &out_dir.join("features.csv")).map_err(|e| e.in_stage("evaluate"))?;

    let random_baseline = if config.eval.random_baseline {
        let t = Instant::now();
        let init = PretrainState::new(config).map_err(|e| e.in_stage("baseline"))?;
        let (summary, ..) = probe_encoder(config, &init.query, &source, &target).map_err(|e| e.in_stage("baseline"))?;
        info!("baseline: target acc {:.3} ({:.1?})", summary.target.acc, t.elapsed());
        Some(summary)
    } else {
        None
    };

    let summary = RunSummary {
        seed: config.seed,
        class_names: source.class_names.clone(),
        pretrained,
        silhouette,
        random_baseline,
    };
    write_json(&summary, &out_dir.join("summary.json")).map_err(|e| e.in_stage("evaluate"))?;
    Ok(summary)
}

fn class_map(kind: MapKind, root: &Path) -> Result<ClassMap> {
    Ok(match kind {
        MapKind::K19 => data::k19_to_unified(),
        MapKind::K16 => data::k16_to_unified(),
        MapKind::Identity => {
            let mut names = Vec::new();
            if root.is_dir() {
                for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
                    let entry = entry.map_err(|e| Error::io(root, e))?;
                    if entry.path().is_dir() {
                        names.push(entry.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            names.sort();
            ClassMap::identity(&names)
        }
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Synth {
            out,
            n_classes,
            n_per_class,
            image_size,
            seed,
        }) => {
            let spec = SyntheticSpec {
                seed,
                n_per_class,
                n_classes,
                image_size,
            };
            let (s, t) = generate_synthetic_two_domain(&out, &spec)?;
            println!(
                "wrote {} source and {} target tiles ({} classes: {})",
                s.len(),
                t.len(),
                n_classes,
                synthetic_class_names(n_classes).join(", ")
            );
        }
        Command::Dataset(DatasetCommand::Scan { root, map, domain, out }) => {
            let manifest = data::build_manifest(&root, &class_map(map, &root)?, domain)?;
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            manifest.save(&out)?;
            println!("{} entries, per-class counts {:?}", manifest.len(), manifest.counts());
        }
        Command::AugmentPreview(a) => {
            let cfg = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::desk(),
            };
            let img = Image::load(&a.image)?;
            let views = make_views(&img, a.seed, &cfg.augment)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let panels = [&img, &views.v1, &views.v2, &views.v3, &views.v4];
            for (name, v) in ["v1", "v2", "v3", "v4"].iter().zip(&panels[1..]) {
                v.save_png(&a.out.join(format!("{name}.png")))?;
            }
            preview_grid(&panels, cfg.augment.patch_shuffle.output_size())?.save_png(&a.out.join("grid.png"))?;
            let text = format!("v3\t{}\nv4\t{}\n", views.records[0], views.records[1]);
            let rec = a.out.join("records.txt");
            fs::write(&rec, text).map_err(|e| Error::io(&rec, e))?;
            println!("wrote grid.png, v1..v4 and records.txt to {}", a.out.display());
        }
        Command::Pretrain(a) => {
            let cfg = Config::load(&a.config)?;
            let manifest = DatasetManifest::load(&a.data)?;
            let opts = RunOptions {
                resume: a.resume,
                stop_after: a.stop_after,
            };
            let ckpt = run_pretraining(&cfg, &manifest, &a.out, &opts)?;
            println!("{}", ckpt.display());
        }
        Command::Probe(a) => {
            let (mut cfg, bundle) = load_bundle(&a.checkpoint)?;
            if let Some(p) = &a.config {
                let over = Config::load(p)?;
                cfg.probe = over.probe;
                cfg.eval = over.eval;
            }
            let manifest = DatasetManifest::load(&a.train)?;
            let f = extract_features(&bundle, &manifest, &cfg.eval, cfg.probe.batch_size)?;
            report_missing(&f);
            let seeds = crate::seed::SeedTree::new(cfg.seed);
            let head = train_probe(f.features.view(), &f.labels, manifest.n_classes(), &cfg.probe, seeds.probe)?;
            let train_acc = accuracy(&predict(&head, f.features.view())?.labels, &f.labels);
            SavedHead {
                checkpoint: a.checkpoint.clone(),
                class_names: manifest.class_names.clone(),
                eval: cfg.eval.clone(),
                head,
            }
            .save(&a.out)?;
            println!("training accuracy {train_acc:.4}; head written to {}", a.out.display());
        }
        Command::Predict(a) => {
            let head = SavedHead::load(&a.head)?;
            let (cfg, bundle) = load_bundle(&head.checkpoint)?;
            let manifest = DatasetManifest::load(&a.data)?;
            let f = extract_features(&bundle, &manifest, &head.eval, cfg.probe.batch_size)?;
            report_missing(&f);
            let rows = prediction_rows(&head, &f)?;
            write_predictions(&rows, &a.out)?;
            println!("{} predictions written to {}", rows.len(), a.out.display());
        }
        Command::Evaluate(a) => {
            let rows = read_predictions(&a.pred)?;
            let truth: Vec<usize> = rows.iter().map(|r| r.true_label).collect();
            let pred: Vec<usize> = rows.iter().map(|r| r.pred_label).collect();
            let n_classes = a
                .n_classes
                .unwrap_or_else(|| truth.iter().chain(&pred).max().map_or(0, |&m| m + 1));
            let report = classification_report(&truth, &pred, n_classes)?;
            write_json(&report, &a.out)?;
            println!(
                "acc {:.4}  macro re {:.4}  pre {:.4}  f1 {:.4}",
                report.acc, report.macro_re, report.macro_pre, report.macro_f1
            );
        }
        Command::Silhouette(a) => {
            let (f, classes, domains) = read_features(&a.features)?;
            let report = table4_protocol(f.view(), &classes, &domains, a.aggregate.into())?;
            write_json(&report, &a.out)?;
            println!(
                "class-level target {:?} all {:?}; domain-level all {:?}",
                report.class_target, report.class_all, report.domain_all
            );
        }
        Command::ExportFeatures(a) => {
            let (cfg, bundle) = load_bundle(&a.checkpoint)?;
            let manifest = DatasetManifest::load(&a.data)?;
            let f = extract_features(&bundle, &manifest, &cfg.eval, cfg.probe.batch_size)?;
            report_missing(&f);
            export_features(f.features.view(), &f.labels, &f.domains, &a.out)?;
            println!("{} rows written to {}", f.len(), a.out.display());
        }
        Command::RunAll(a) => {
            let mut cfg = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::desk(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let s = run_all(&cfg, &a.out)?;
            println!(
                "target acc {:.4} (f1 {:.4}), source-val acc {:.4}",
                s.pretrained.target.acc, s.pretrained.target.macro_f1, s.pretrained.source_val_acc
            );
            if let Some(b) = &s.random_baseline {
                println!("random-encoder baseline target acc {:.4}", b.target.acc);
            }
            println!("summary written to {}", a.out.join("summary.json").display());
        }
        Command::Config(a) => {
            let text = Config::preset(&a.preset)?.to_toml();
            match &a.out {
                Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Panels resized to `side` x `side` and laid out left to right on white,
/// 4 px apart.
fn preview_grid(panels: &[&Image], side: usize) -> Result<Image> {
    const GAP: usize = 4;
    let width = panels.len() * side + (panels.len() + 1) * GAP;
    let mut grid = Image::from_fn(side + 2 * GAP, width, |_, _| [1.0; 3]);
    for (i, p) in panels.iter().enumerate() {
        grid.paste(&p.resize(side, side), GAP + i * (side + GAP), GAP)?;
    }
    Ok(grid)
}

fn report_missing(f: &FeatureSet) {
    if !f.missing.is_empty() {
        eprintln!("{} file(s) could not be read:", f.missing.len());
        for (p, why) in &f.missing {
            eprintln!("  {}: {why}", p.display());
        }
    }
}
