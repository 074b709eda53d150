//! InfoNCE against a queue of negatives, the four-term objective that pairs
//! both queries with both key sets, and softmax cross-entropy for the probe.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{FeatureQueue, NORM_TOLERANCE};

/// InfoNCE with a per-sample positive and batch-shared negatives:
///
/// `mean_i -log( exp(q_i.k_i/t) / (exp(q_i.k_i/t) + sum_j exp(q_i.n_j/t)) )`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNce {
    pub temperature: f64,
    /// Reject rows whose norm is further than this from 1. `None` skips the
    /// check, which gradient checks need when perturbing `q`.
    pub norm_tolerance: Option<f64>,
}

impl InfoNce {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            norm_tolerance: Some(NORM_TOLERANCE),
        }
    }

    pub fn unchecked(temperature: f64) -> Self {
        Self {
            temperature,
            norm_tolerance: None,
        }
    }

    fn validate(&self, q: &ArrayView2<f64>, k_pos: &ArrayView2<f64>, negatives: &ArrayView2<f64>) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidInput(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if q.nrows() == 0 || q.dim() != k_pos.dim() || negatives.ncols() != q.ncols() || negatives.nrows() == 0 {
            return Err(Error::Shape(format!(
                "q {:?}, positives {:?}, negatives {:?}",
                q.dim(),
                k_pos.dim(),
                negatives.dim()
            )));
        }
        if let Some(tol) = self.norm_tolerance {
            for (name, m) in [("q", q), ("positives", k_pos), ("negatives", negatives)] {
                for (i, row) in m.rows().into_iter().enumerate() {
                    let n = row.dot(&row).sqrt();
                    if (n - 1.0).abs() > tol {
                        return Err(Error::InvalidInput(format!("{name} row {i} has norm {n}, expected 1")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn loss(&self, q: ArrayView2<f64>, k_pos: ArrayView2<f64>, negatives: ArrayView2<f64>) -> Result<f64> {
        self.forward(q, k_pos, negatives, false).map(|(l, _)| l)
    }

    /// Loss and its gradient with respect to `q`. Positives and negatives are
    /// constants here; no gradient is produced for them.
    pub fn loss_and_grad(
        &self,
        q: ArrayView2<f64>,
        k_pos: ArrayView2<f64>,
        negatives: ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>)> {
        self.forward(q, k_pos, negatives, true)
            .map(|(l, g)| (l, g.expect("gradient requested")))
    }

    fn forward(
        &self,
        q: ArrayView2<f64>,
        k_pos: ArrayView2<f64>,
        negatives: ArrayView2<f64>,
        want_grad: bool,
    ) -> Result<(f64, Option<Array2<f64>>)> {
        self.validate(&q, &k_pos, &negatives)?;
        let b = q.nrows();
        let inv_t = 1.0 / self.temperature;
        let mut neg_logits = q.dot(&negatives.t());
        neg_logits.mapv_inplace(|v| v * inv_t);
        let pos_logits: Array1<f64> = (&q * &k_pos).sum_axis(ndarray::Axis(1)) * inv_t;

        let mut total = 0.0;
        let mut pos_weight = Array1::<f64>::zeros(b);
        for i in 0..b {
            let mut row = neg_logits.row_mut(i);
            let lp = pos_logits[i];
            let m = row.iter().copied().fold(lp, f64::max);
            let sum = (lp - m).exp() + row.iter().map(|&v| (v - m).exp()).sum::<f64>();
            let lse = m + sum.ln();
            total += lse - lp;
            if want_grad {
                row.mapv_inplace(|v| (v - lse).exp());
                pos_weight[i] = (lp - lse).exp() - 1.0;
            }
        }
        let loss = total / b as f64;
        if !want_grad {
            return Ok((loss, None));
        }
        // neg_logits now holds the negatives' softmax probabilities.
        let scale = inv_t / b as f64;
        let mut grad = neg_logits.dot(&negatives);
        for i in 0..b {
            let w = pos_weight[i];
            grad.row_mut(i)
                .iter_mut()
                .zip(k_pos.row(i))
                .for_each(|(g, k)| *g = (*g + w * k) * scale);
        }
        Ok((loss, Some(grad)))
    }
}

/// Batch-mean InfoNCE with unit-norm checks.
pub fn info_nce(q: ArrayView2<f64>, k_pos: ArrayView2<f64>, negatives: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    InfoNce::new(temperature).loss(q, k_pos, negatives)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub q1k1: f64,
    pub q1k2: f64,
    pub q2k1: f64,
    pub q2k2: f64,
    pub total: f64,
}

impl LossValue {
    pub fn from_terms(q1k1: f64, q1k2: f64, q2k1: f64, q2k2: f64) -> Self {
        Self {
            q1k1,
            q1k2,
            q2k1,
            q2k2,
            total: q1k1 + q1k2 + q2k1 + q2k2,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.q1k1, self.q1k2, self.q2k1, self.q2k2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Inputs of the four-term objective.
#[derive(Clone, Copy)]
pub struct ImpashBatch<'a> {
    pub q1: ArrayView2<'a, f64>,
    pub q2: ArrayView2<'a, f64>,
    /// Momentum keys of the InfoMin views.
    pub k1_pos: ArrayView2<'a, f64>,
    /// Momentum keys of the PatchShuffling views.
    pub k2_pos: ArrayView2<'a, f64>,
    /// Negatives for the `k1` terms.
    pub negatives1: ArrayView2<'a, f64>,
    /// Negatives for the `k2` terms.
    pub negatives2: ArrayView2<'a, f64>,
}

/// Sum of the four equally weighted terms, with gradients for `q1` and `q2`.
pub fn impash_loss_and_grad(nce: &InfoNce, batch: ImpashBatch) -> Result<(LossValue, Array2<f64>, Array2<f64>)> {
    let (l11, g11) = nce.loss_and_grad(batch.q1, batch.k1_pos, batch.negatives1)?;
    let (l12, g12) = nce.loss_and_grad(batch.q1, batch.k2_pos, batch.negatives2)?;
    let (l21, g21) = nce.loss_and_grad(batch.q2, batch.k1_pos, batch.negatives1)?;
    let (l22, g22) = nce.loss_and_grad(batch.q2, batch.k2_pos, batch.negatives2)?;
    Ok((LossValue::from_terms(l11, l12, l21, l22), g11 + g12, g21 + g22))
}

pub fn impash_loss_with(nce: &InfoNce, batch: ImpashBatch) -> Result<LossValue> {
    let l11 = nce.loss(batch.q1, batch.k1_pos, batch.negatives1)?;
    let l12 = nce.loss(batch.q1, batch.k2_pos, batch.negatives2)?;
    let l21 = nce.loss(batch.q2, batch.k1_pos, batch.negatives1)?;
    let l22 = nce.loss(batch.q2, batch.k2_pos, batch.negatives2)?;
    Ok(LossValue::from_terms(l11, l12, l21, l22))
}

/// Four-term objective with negatives read from the two queues.
pub fn impash_loss(
    q1: ArrayView2<f64>,
    q2: ArrayView2<f64>,
    k1_pos: ArrayView2<f64>,
    k2_pos: ArrayView2<f64>,
    queue1: &FeatureQueue,
    queue2: &FeatureQueue,
    temperature: f64,
) -> Result<LossValue> {
    impash_loss_with(
        &InfoNce::new(temperature),
        ImpashBatch {
            q1,
            q2,
            k1_pos,
            k2_pos,
            negatives1: queue1.view(),
            negatives2: queue2.view(),
        },
    )
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside {} classes",
            logits.ncols()
        )));
    }
    Ok(())
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy_and_grad(logits, labels).map(|(l, _)| l)
}

pub fn cross_entropy_and_grad(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(&logits, labels)?;
    let b = labels.len() as f64;
    let mut grad = logits.to_owned();
    let mut total = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp() / b);
        row[y] -= 1.0 / b;
    }
    Ok((total / b, grad))
}
