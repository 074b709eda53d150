//! Classification metrics, silhouette scores and feature export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::DomainAggregate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub acc: f64,
    pub macro_re: f64,
    pub macro_pre: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
    /// Quantities that were 0/0 and set to 0, e.g. `precision[2]`.
    pub zero_division: Vec<String>,
}

fn ratio(num: usize, den: usize, name: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of the fractions `num / den` (`0/0` counts as 0), summed as an exact
/// rational and divided once, so results such as 11/18 are correctly
/// rounded. Falls back to a float sum if the common denominator overflows.
fn exact_mean(terms: &[(u128, u128)]) -> f64 {
    let float = || terms.iter().map(|&(n, d)| if d == 0 { 0.0 } else { n as f64 / d as f64 }).sum::<f64>() / terms.len() as f64;
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in terms.iter().filter(|t| t.1 != 0) {
        let g = gcd(den, d);
        let Some(lcm) = (den / g).checked_mul(d) else { return float() };
        let (Some(a), Some(b)) = (num.checked_mul(lcm / den), n.checked_mul(lcm / d)) else {
            return float();
        };
        let Some(sum) = a.checked_add(b) else { return float() };
        let g = gcd(sum, lcm).max(1);
        (num, den) = (sum / g, lcm / g);
    }
    let Some(den) = den.checked_mul(terms.len() as u128) else { return float() };
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    if num < 1 << 53 && den < 1 << 53 {
        num as f64 / den as f64
    } else {
        float()
    }
}

pub fn classification_report(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::InvalidInput("classification report of zero samples".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels, {} predictions", truth.len(), pred.len())));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside {n_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }
    let mut flags = Vec::new();
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let recall = ratio(tp, support, format!("recall[{c}]"), &mut flags);
            let precision = ratio(tp, predicted, format!("precision[{c}]"), &mut flags);
            // Precision + recall is 0 exactly when tp is 0.
            let f1 = if tp == 0 {
                flags.push(format!("f1[{c}]"));
                0.0
            } else {
                (2 * tp) as f64 / (support + predicted) as f64
            };
            ClassMetrics {
                support,
                recall,
                precision,
                f1,
            }
        })
        .collect();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let predicted = |c: usize| confusion.iter().map(|row| row[c]).sum::<usize>();
    let recall_terms: Vec<(u128, u128)> = per_class
        .iter()
        .enumerate()
        .map(|(c, m)| (confusion[c][c] as u128, m.support as u128))
        .collect();
    let precision_terms: Vec<(u128, u128)> = (0..n_classes)
        .map(|c| (confusion[c][c] as u128, predicted(c) as u128))
        .collect();
    // F1 = 2 tp / (support + predicted).
    let f1_terms: Vec<(u128, u128)> = per_class
        .iter()
        .enumerate()
        .map(|(c, m)| (2 * confusion[c][c] as u128, (m.support + predicted(c)) as u128))
        .collect();
    Ok(MetricsReport {
        n: truth.len(),
        acc: correct as f64 / truth.len() as f64,
        macro_re: exact_mean(&recall_terms),
        macro_pre: exact_mean(&precision_terms),
        macro_f1: exact_mean(&f1_terms),
        per_class,
        confusion,
        zero_division: flags,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Silhouette in which the "nearest other cluster" of a point is searched
/// only among clusters sharing its group. Points whose group holds a single
/// cluster are skipped. Returns `None` when no point qualifies.
pub fn grouped_silhouette(points: ArrayView2<f64>, clusters: &[usize], groups: &[usize]) -> Result<Option<f64>> {
    let n = points.nrows();
    if clusters.len() != n || groups.len() != n {
        return Err(Error::Shape(format!(
            "{n} points, {} cluster ids, {} group ids",
            clusters.len(),
            groups.len()
        )));
    }
    // Compact (group, cluster) keys.
    let mut keys: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for i in 0..n {
        let next = keys.len();
        keys.entry((groups[i], clusters[i])).or_insert(next);
    }
    let key_of: Vec<usize> = (0..n).map(|i| keys[&(groups[i], clusters[i])]).collect();
    let mut size = vec![0usize; keys.len()];
    for &k in &key_of {
        size[k] += 1;
    }
    let key_group: Vec<usize> = {
        let mut v = vec![0; keys.len()];
        for (&(g, _), &k) in &keys {
            v[k] = g;
        }
        v
    };
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut sums = vec![0.0; keys.len()];
    for i in 0..n {
        let own = key_of[i];
        let g = groups[i];
        if !(0..keys.len()).any(|k| k != own && key_group[k] == g) {
            continue;
        }
        counted += 1;
        if size[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i && groups[j] == g {
                sums[key_of[j]] += dist(&rows[i], &rows[j]);
            }
        }
        let a = sums[own] / (size[own] - 1) as f64;
        let b = (0..keys.len())
            .filter(|&k| k != own && key_group[k] == g)
            .map(|k| sums[k] / size[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

/// Mean silhouette with Euclidean distance. Singleton clusters contribute 0,
/// as do points with `a = b = 0`.
pub fn silhouette(points: ArrayView2<f64>, cluster_ids: &[usize]) -> Result<f64> {
    let groups = vec![0; cluster_ids.len()];
    grouped_silhouette(points, cluster_ids, &groups)?
        .ok_or_else(|| Error::InvalidInput("silhouette needs at least two clusters".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteReport {
    /// Class clusters over target-domain points only.
    pub class_target: Option<f64>,
    /// Class clusters over all points.
    pub class_all: Option<f64>,
    /// Domain clusters within each class; `None` if a class lacks a domain.
    pub domain_per_class: Vec<Option<f64>>,
    /// Summary over the classes that have both domains.
    pub domain_all: Option<f64>,
    pub domain_aggregate: DomainAggregate,
}

/// Class-level separation (higher is better) and domain separation inside
/// each class (lower is better). Target points are those with domain id 1.
pub fn table4_protocol(
    features: ArrayView2<f64>,
    class_labels: &[usize],
    domain_ids: &[u8],
    aggregate: DomainAggregate,
) -> Result<SilhouetteReport> {
    let n = features.nrows();
    if class_labels.len() != n || domain_ids.len() != n {
        return Err(Error::Shape("features, class labels and domains differ in length".into()));
    }
    let n_classes = class_labels.iter().max().map_or(0, |&m| m + 1);
    let domains: Vec<usize> = domain_ids.iter().map(|&d| usize::from(d)).collect();
    let class_score = |idx: &[usize]| -> Result<Option<f64>> {
        let pts = features.select(ndarray::Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| class_labels[i]).collect();
        grouped_silhouette(pts.view(), &labels, &vec![0; idx.len()])
    };
    let target: Vec<usize> = (0..n).filter(|&i| domain_ids[i] == 1).collect();
    let all: Vec<usize> = (0..n).collect();
    let class_target = class_score(&target)?;
    let class_all = class_score(&all)?;

    let mut domain_per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let idx: Vec<usize> = (0..n).filter(|&i| class_labels[i] == c).collect();
        let pts = features.select(ndarray::Axis(0), &idx);
        let d: Vec<usize> = idx.iter().map(|&i| domains[i]).collect();
        domain_per_class.push(grouped_silhouette(pts.view(), &d, &vec![0; idx.len()])?);
    }
    let domain_all = match aggregate {
        DomainAggregate::Mean => {
            let defined: Vec<f64> = domain_per_class.iter().flatten().copied().collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        }
        DomainAggregate::Pooled => grouped_silhouette(features, &domains, class_labels)?,
    };
    Ok(SilhouetteReport {
        class_target,
        class_all,
        domain_per_class,
        domain_all,
        domain_aggregate: aggregate,
    })
}

/// Write `f0..f{D-1},class,domain` rows with 9 significant digits.
pub fn export_features(features: ArrayView2<f64>, class_labels: &[usize], domain_ids: &[u8], path: &Path) -> Result<()> {
    if class_labels.len() != features.nrows() || domain_ids.len() != features.nrows() {
        return Err(Error::Shape("features, class labels and domains differ in length".into()));
    }
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..features.ncols()).map(|j| format!("f{j}")).collect();
    header.push("class".into());
    header.push("domain".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in features.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        rec.push(class_labels[i].to_string());
        rec.push(domain_ids[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Exported features read back: matrix, class labels, domain ids.
pub type FeatureTable = (Array2<f64>, Vec<usize>, Vec<u8>);

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(1, e.to_string()))?;
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 2 || &header[header.len() - 2] != "class" || &header[header.len() - 1] != "domain" {
        return Err(parse_err(1, "header must end with class,domain".into()));
    }
    let dim = header.len() - 2;
    let (mut data, mut classes, mut domains) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        for j in 0..dim {
            data.push(rec[j].parse::<f64>().map_err(|e| parse_err(line, format!("column {j}: {e}")))?);
        }
        classes.push(rec[dim].parse().map_err(|e| parse_err(line, format!("class: {e}")))?);
        domains.push(rec[dim + 1].parse().map_err(|e| parse_err(line, format!("domain: {e}")))?);
    }
    let m = Array2::from_shape_vec((classes.len(), dim), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((m, classes, domains))
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub path: PathBuf,
    pub true_label: usize,
    pub pred_label: usize,
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["path", "true_label", "pred_label"]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Pretty JSON, the on-disk form of every report.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
