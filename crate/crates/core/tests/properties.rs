mod common;

use std::sync::OnceLock;

use common::*;
use impash::augment::{patch_shuffle, sample_shuffle_record, PatchShuffleConfig, CELLS};
use impash::image::Image;
use impash::loss::{info_nce, InfoNce};
use impash::memory::FeatureQueue;
use impash::metrics::{classification_report, silhouette};
use impash::model::{init_momentum, momentum_update, ClassifierHead, ModelBundle};
use impash::probe::predict;
use impash::seed;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

fn unit_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
    unit_rows(&mut rng(seed), n, d)
}

fn tiny_bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| ModelBundle::new(&tiny_config().model, 3).unwrap())
}

fn perturbed(bundle: &ModelBundle, seed: u64, scale: f64) -> ModelBundle {
    let mut r = rng(seed);
    let mut out = bundle.clone();
    for p in out.params.params_mut() {
        p.data.iter_mut().for_each(|v| *v += scale * gaussian(&mut r));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queue_newest_rows_are_the_last_batch(k in 1usize..24, d in 1usize..6, b_frac in 0.0f64..1.0, pre in 0usize..5, s in any::<u64>()) {
        let b = 1 + ((k - 1) as f64 * b_frac) as usize;
        let mut q = FeatureQueue::new(k, d, s).unwrap();
        for i in 0..pre {
            q.enqueue(unit_matrix(b, d, s ^ i as u64).view()).unwrap();
        }
        let batch = unit_matrix(b, d, s.wrapping_add(99));
        q.enqueue(batch.view()).unwrap();
        let age = q.age_order();
        let newest = &age[k - b..];
        for (row, &slot) in newest.iter().enumerate() {
            prop_assert_eq!(q.view().row(slot).to_vec(), batch.row(row).to_vec());
        }
        prop_assert_eq!(q.fill_count(), ((pre + 1) * b).min(k));
    }

    #[test]
    fn info_nce_is_positive_and_permutation_equivariant(b in 1usize..6, k in 1usize..10, d in 2usize..12, t in 0.05f64..2.0, s in any::<u64>()) {
        let q = unit_matrix(b, d, s);
        let kp = unit_matrix(b, d, s ^ 1);
        let neg = unit_matrix(k, d, s ^ 2);
        let l = info_nce(q.view(), kp.view(), neg.view(), t).unwrap();
        prop_assert!(l > 0.0);
        let rev_b: Vec<usize> = (0..b).rev().collect();
        let rev_k: Vec<usize> = (0..k).rev().collect();
        let l2 = info_nce(
            q.select(Axis(0), &rev_b).view(),
            kp.select(Axis(0), &rev_b).view(),
            neg.select(Axis(0), &rev_k).view(),
            t,
        ).unwrap();
        prop_assert!((l - l2).abs() < 1e-12 * l.max(1.0));
    }

    #[test]
    fn info_nce_rejects_non_unit_rows(b in 1usize..4, d in 2usize..8, s in any::<u64>()) {
        let q = unit_matrix(b, d, s) * 1.5;
        let kp = unit_matrix(b, d, s ^ 1);
        prop_assert!(info_nce(q.view(), kp.view(), kp.view(), 0.07).is_err());
        prop_assert!(InfoNce::unchecked(0.07).loss(q.view(), kp.view(), kp.view()).is_ok());
    }

    #[test]
    fn silhouette_lies_in_unit_interval(n in 4usize..60, c in 2usize..5, d in 1usize..8, s in any::<u64>()) {
        let mut r = rng(s);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let x = Array2::from_shape_fn((n, d), |_| gaussian(&mut r));
        let v = silhouette(x.view(), &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        let scaled = silhouette((&x * 3.5).view(), &labels).unwrap();
        prop_assert!((v - scaled).abs() < 1e-9);
    }

    #[test]
    fn momentum_step_obeys_the_drift_bound(alpha in 0.0f64..=1.0, s in any::<u64>()) {
        let query = perturbed(tiny_bundle(), s, 0.1);
        let mut m = init_momentum(&perturbed(tiny_bundle(), s ^ 7, 0.1), alpha);
        let before = m.params.clone();
        momentum_update(&mut m, &query).unwrap();
        let moved = m.params.max_abs_diff(&before);
        let gap = query.params.max_abs_diff(&before);
        prop_assert!(moved <= (1.0 - alpha) * gap * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn shuffle_record_is_well_formed(resize_cells in 6usize..40, sub_frac in 0.3f64..1.0, h in 16usize..120, w in 16usize..120, s in any::<u64>()) {
        let resize = 3 * resize_cells;
        let sub = ((resize_cells as f64 * sub_frac) as usize).max(1);
        let cfg = PatchShuffleConfig { resize, sub_crop: sub, vertical_flip: true, ..PatchShuffleConfig::full() };
        let rec = sample_shuffle_record(&mut seed::rng(s), h, w, &cfg);
        let mut sorted = rec.permutation;
        sorted.sort_unstable();
        prop_assert_eq!(sorted, [0, 1, 2, 3, 4, 5, 6, 7, 8]);
        prop_assert!(rec.cell_crops.iter().all(|&(x, y)| x + sub <= resize_cells && y + sub <= resize_cells));
        let (x, y, cw, ch) = rec.crop_box;
        prop_assert!(x + cw <= w && y + ch <= h);
        let ratio = rec.crop_area_ratio(h, w);
        prop_assert!((0.6..=1.0).contains(&ratio), "area ratio {}", ratio);
        let img = Image::from_fn(h, w, |y, x| [(x % 7) as f32 / 7.0, (y % 5) as f32 / 5.0, 0.5]);
        let (view, rec2) = patch_shuffle(&img, s, &cfg).unwrap();
        prop_assert_eq!(rec2, rec);
        prop_assert_eq!((view.height(), view.width()), (3 * sub, 3 * sub));
    }

    #[test]
    fn argmax_ignores_positive_rescaling(c in 2usize..6, d in 1usize..6, scale in 0.01f64..100.0, s in any::<u64>()) {
        let mut r = rng(s);
        let head = ClassifierHead {
            weight: Array2::from_shape_fn((c, d), |_| gaussian(&mut r)),
            bias: Array1::from_shape_fn(c, |_| gaussian(&mut r)),
        };
        let x = Array2::from_shape_fn((8, d), |_| gaussian(&mut r));
        let scaled = ClassifierHead { weight: &head.weight * scale, bias: &head.bias * scale };
        prop_assert_eq!(predict(&head, x.view()).unwrap().labels, predict(&scaled, x.view()).unwrap().labels);
    }

    #[test]
    fn report_counts_are_consistent(truth in proptest::collection::vec(0usize..4, 1..80), s in any::<u64>()) {
        let mut r = rng(s);
        let pred: Vec<usize> = truth.iter().map(|_| rand::Rng::random_range(&mut r, 0..4)).collect();
        let rep = classification_report(&truth, &pred, 4).unwrap();
        let total: usize = rep.confusion.iter().flatten().sum();
        prop_assert_eq!(total, truth.len());
        prop_assert!((0.0..=1.0).contains(&rep.acc));
        prop_assert!((0.0..=1.0).contains(&rep.macro_f1));
    }
}

#[test]
fn permutations_are_uniform_over_positions() {
    let cfg = PatchShuffleConfig::full();
    let draws = 10_000usize;
    let mut counts = [[0usize; CELLS]; CELLS];
    for i in 0..draws {
        let rec = sample_shuffle_record(&mut seed::rng(seed::derive_index(42, i as u64)), 255, 255, &cfg);
        for (pos, &cell) in rec.permutation.iter().enumerate() {
            counts[pos][cell] += 1;
        }
    }
    let p = 1.0 / CELLS as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (pos, row) in counts.iter().enumerate() {
        for (cell, &n) in row.iter().enumerate() {
            assert!((n as f64 - mean).abs() <= 3.0 * sd, "position {pos} cell {cell}: {n}");
        }
    }
}
