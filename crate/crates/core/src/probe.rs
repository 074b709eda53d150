//! Linear probe on frozen `p1` embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::evaluation_view;
use crate::config::{DecayMode, EvalConfig, ProbeConfig};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::cross_entropy_and_grad;
use crate::model::{ClassifierHead, Head, ModelBundle};
use crate::seed;

/// Frozen embeddings of a manifest, row-aligned with its entries (minus any
/// files that could not be read).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<u8>,
    pub paths: Vec<PathBuf>,
    /// Files that failed to load, with the reason.
    pub missing: Vec<(PathBuf, String)>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Embed every entry through `g` then `p1`, unit-normalised. The only
/// preprocessing is the deterministic evaluation resize and centre crop.
pub fn extract_features(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    eval: &EvalConfig,
    batch_size: usize,
) -> Result<FeatureSet> {
    let dim = bundle.arch.projection_dim();
    let mut set = FeatureSet {
        features: Array2::zeros((0, dim)),
        labels: Vec::new(),
        domains: Vec::new(),
        paths: Vec::new(),
        missing: Vec::new(),
    };
    let mut rows: Vec<f64> = Vec::new();
    for chunk in manifest.entries.chunks(batch_size.max(1)) {
        let mut views = Vec::with_capacity(chunk.len());
        for e in chunk {
            match Image::load(&e.path).and_then(|img| evaluation_view(&img, eval.resize, eval.crop)) {
                Ok(v) => {
                    views.push(v);
                    set.labels.push(e.class_label);
                    set.domains.push(e.domain_id);
                    set.paths.push(e.path.clone());
                }
                Err(err) => {
                    warn!("skipping {}: {err}", e.path.display());
                    set.missing.push((e.path.clone(), err.to_string()));
                }
            }
        }
        if views.is_empty() {
            continue;
        }
        let refs: Vec<&Image> = views.iter().collect();
        let x = bundle.arch.images_to_tensor(&refs)?;
        let q = bundle.arch.embed(&bundle.params, Head::InfoMin, &x)?;
        rows.extend(q.iter());
    }
    set.features = Array2::from_shape_vec((set.labels.len(), dim), rows).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(set)
}

/// Step-decay schedule: `lr` before `decay_epoch`, then `lr / factor` or
/// `lr - factor` depending on the mode.
pub fn probe_lr_at(epoch: f64, cfg: &ProbeConfig) -> f64 {
    if epoch < cfg.decay_epoch as f64 {
        cfg.lr
    } else {
        match cfg.decay_mode {
            DecayMode::Divide => cfg.lr / cfg.decay_factor,
            DecayMode::Subtract => cfg.lr - cfg.decay_factor,
        }
    }
}

/// Train a linear head with mini-batch SGD and cross-entropy. The features
/// are only read; the encoder that produced them is not touched.
pub fn train_probe(
    features: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    rng_seed: u64,
) -> Result<ClassifierHead> {
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside {n_classes} classes")));
    }
    let first = labels.first().copied();
    if first.is_none() || labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::InvalidInput(
            "probe training needs at least two distinct classes".into(),
        ));
    }
    let n = labels.len();
    let bs = cfg.batch_size.max(1);
    let mut head = ClassifierHead::zeros(n_classes, features.ncols());
    let mut vel_w = Array2::<f64>::zeros(head.weight.raw_dim());
    let mut vel_b = ndarray::Array1::<f64>::zeros(n_classes);
    let mut order: Vec<usize> = (0..n).collect();
    let n_batches = n.div_ceil(bs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_index(rng_seed, epoch)));
        for (b, idx) in order.chunks(bs).enumerate() {
            let lr = probe_lr_at(epoch as f64 + b as f64 / n_batches as f64, cfg);
            let x = features.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = head.logits(x.view())?;
            let (_, dlogits) = cross_entropy_and_grad(logits.view(), &y)?;
            let gw = dlogits.t().dot(&x) + &head.weight * cfg.weight_decay;
            let gb = dlogits.sum_axis(Axis(0));
            vel_w = &vel_w * cfg.momentum + gw;
            vel_b = &vel_b * cfg.momentum + gb;
            head.weight.scaled_add(-lr, &vel_w);
            head.bias.scaled_add(-lr, &vel_b);
        }
    }
    Ok(head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Softmax probabilities, `N x C`.
    pub scores: Array2<f64>,
}

/// Argmax of the logits; ties go to the lower class index.
pub fn predict(head: &ClassifierHead, features: ArrayView2<f64>) -> Result<Prediction> {
    let logits = head.logits(features)?;
    let mut scores = logits.clone();
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    for mut row in scores.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    Ok(Prediction { labels, scores })
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// A trained head plus what is needed to apply it to new images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedHead {
    pub checkpoint: PathBuf,
    pub class_names: Vec<String>,
    pub eval: EvalConfig,
    pub head: ClassifierHead,
}

impl SavedHead {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Rows of `features` for which `keep` is true, with matching labels.
pub fn subset(set: &FeatureSet, keep: impl Fn(usize) -> bool) -> FeatureSet {
    let idx: Vec<usize> = (0..set.len()).filter(|&i| keep(i)).collect();
    FeatureSet {
        features: set.features.select(Axis(0), &idx),
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
        domains: idx.iter().map(|&i| set.domains[i]).collect(),
        paths: idx.iter().map(|&i| set.paths[i].clone()).collect(),
        missing: Vec::new(),
    }
}
