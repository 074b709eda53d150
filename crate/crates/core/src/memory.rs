//! Fixed-capacity FIFO of unit-norm negative keys.

use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Rows must have unit L2 norm within this tolerance to be enqueued.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    buffer: Array2<f64>,
    write_ptr: usize,
    fill_count: usize,
}

impl FeatureQueue {
    /// Queue of `capacity` random unit vectors of width `dim`.
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "queue needs capacity >= 1 and dim >= 1 (got {capacity}, {dim})"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut buffer: Array2<f64> = Array2::from_shape_simple_fn((capacity, dim), || StandardNormal.sample(&mut rng));
        for mut row in buffer.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        Ok(Self {
            buffer,
            write_ptr: 0,
            fill_count: 0,
        })
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(buffer: Array2<f64>, write_ptr: usize, fill_count: usize) -> Result<Self> {
        let k = buffer.nrows();
        if k == 0 || write_ptr >= k || fill_count > k {
            return Err(Error::InvalidInput(format!(
                "inconsistent queue state: capacity {k}, write_ptr {write_ptr}, fill_count {fill_count}"
            )));
        }
        Ok(Self {
            buffer,
            write_ptr,
            fill_count,
        })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    /// Rows written by `enqueue` so far, saturating at capacity.
    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    /// Overwrite the oldest `B` rows with `batch`, wrapping around the end.
    pub fn enqueue(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        let (b, d) = batch.dim();
        let k = self.capacity();
        if d != self.dim() {
            return Err(Error::Shape(format!("queue width {} but batch width {d}", self.dim())));
        }
        if b > k {
            return Err(Error::InvalidInput(format!("batch of {b} rows exceeds queue capacity {k}")));
        }
        for (i, row) in batch.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidInput(format!("batch row {i} has norm {n}, expected 1")));
            }
        }
        let first = (k - self.write_ptr).min(b);
        self.buffer
            .slice_mut(s![self.write_ptr..self.write_ptr + first, ..])
            .assign(&batch.slice(s![..first, ..]));
        if first < b {
            self.buffer.slice_mut(s![..b - first, ..]).assign(&batch.slice(s![first.., ..]));
        }
        self.write_ptr = (self.write_ptr + b) % k;
        self.fill_count = (self.fill_count + b).min(k);
        Ok(())
    }

    /// Borrowed read view of the whole buffer.
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.buffer.view()
    }

    /// Owned copy of the buffer, unaffected by later enqueues.
    pub fn snapshot(&self) -> Array2<f64> {
        self.buffer.clone()
    }

    /// Row indices from oldest to newest.
    pub fn age_order(&self) -> Vec<usize> {
        let k = self.capacity();
        (0..k).map(|i| (self.write_ptr + i) % k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn unit_rows(n: usize, d: usize, salt: f64) -> Array2<f64> {
        let mut a = Array2::from_shape_fn((n, d), |(i, j)| ((i * d + j) as f64 + salt).sin() + 0.01);
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        a
    }

    #[test]
    fn new_queue_rows_are_unit_norm_and_seeded() {
        let q = FeatureQueue::new(64, 128, 9).unwrap();
        assert_eq!(q.snapshot().dim(), (64, 128));
        for r in q.view().rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(q, FeatureQueue::new(64, 128, 9).unwrap());
        assert_eq!(FeatureQueue::new(1, 128, 0).unwrap().capacity(), 1);
        assert!(FeatureQueue::new(0, 128, 0).is_err());
    }

    #[test]
    fn wraparound_evicts_oldest() {
        let mut q = FeatureQueue::new(8, 4, 0).unwrap();
        let batches: Vec<_> = (0..3).map(|i| unit_rows(4, 4, i as f64 * 10.0)).collect();
        for b in &batches {
            q.enqueue(b.view()).unwrap();
        }
        assert_eq!(q.view().slice(s![0..4, ..]), batches[2]);
        assert_eq!(q.view().slice(s![4..8, ..]), batches[1]);
        assert_eq!(q.write_ptr(), 4);
        assert_eq!(q.fill_count(), 8);
    }

    #[test]
    fn full_rotation_restores_pointer() {
        let mut q = FeatureQueue::new(5, 3, 0).unwrap();
        q.enqueue(unit_rows(2, 3, 1.0).view()).unwrap();
        let b = unit_rows(5, 3, 2.0);
        q.enqueue(b.view()).unwrap();
        assert_eq!(q.write_ptr(), 2);
        let order = q.age_order();
        let ordered = Array2::from_shape_fn((5, 3), |(i, j)| q.view()[(order[i], j)]);
        assert_eq!(ordered, b);
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut q = FeatureQueue::new(4, 3, 0).unwrap();
        let before = q.snapshot();
        q.enqueue(unit_rows(2, 3, 5.0).view()).unwrap();
        assert_ne!(before, q.snapshot());
        assert_eq!(before, FeatureQueue::new(4, 3, 0).unwrap().snapshot());
    }

    #[test]
    fn rejects_oversized_and_non_unit_batches() {
        let mut q = FeatureQueue::new(3, 2, 0).unwrap();
        assert!(q.enqueue(unit_rows(4, 2, 0.0).view()).is_err());
        assert!(q.enqueue(Array2::from_elem((1, 2), 1.0).view()).is_err());
        assert!(q.enqueue(unit_rows(1, 3, 0.0).view()).is_err());
    }
}
