//! Acceptance suite. Runs without the libtest harness so that the verdict
//! lines are always printed; exits non-zero if any criterion fails.
//!
//! Criterion 6 runs the desk preset end to end three times and dominates the
//! runtime (a few minutes per seed on one core).

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use impash::augment::{apply_shuffle_record, make_views, patch_shuffle, shuffle_canvas, PatchShuffleConfig};
use impash::cli::RunSummary;
use impash::config::DomainAggregate;
use impash::data::{generate_synthetic_two_domain, SyntheticSpec};
use impash::image::Image;
use impash::loss::{impash_loss, impash_loss_and_grad, info_nce, ImpashBatch, InfoNce};
use impash::memory::FeatureQueue;
use impash::metrics::{classification_report, silhouette, table4_protocol};
use impash::model::{forward_momentum, forward_query, init_momentum, momentum_update, ModelBundle};
use impash::pretrain::{read_metrics, run_pretraining, PretrainState, RunOptions, METRICS_FILE};
use impash::seed;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn augmentation_geometry() -> Verdict {
    let t0 = Instant::now();
    let cfg = PatchShuffleConfig::full();
    let mut r = rng(101);
    let inputs = [random_image(&mut r, 224, 224), random_image(&mut r, 300, 260), random_image(&mut r, 150, 180)];
    let mut min_ratio = f64::INFINITY;
    for draw in 0..1000u64 {
        let img = &inputs[draw as usize % inputs.len()];
        let (view, rec) = patch_shuffle(img, seed::derive_index(7, draw), &cfg).map_err(|e| e.to_string())?;
        ensure((view.height(), view.width()) == (192, 192), || format!("draw {draw}: size {}", view.height()))?;
        let ratio = rec.crop_area_ratio(img.height(), img.width());
        min_ratio = min_ratio.min(ratio);
        ensure((0.6..=1.0).contains(&ratio), || format!("draw {draw}: crop scale {ratio}"))?;
        let canvas = shuffle_canvas(img, &rec, &cfg).map_err(|e| e.to_string())?;
        let reference = reference_mosaic(&canvas, &rec.cell_crops, &rec.permutation, &cfg);
        ensure(view == reference, || format!("draw {draw}: mosaic differs from the tiling reference"))?;
        let replay = apply_shuffle_record(img, &rec, &cfg).map_err(|e| e.to_string())?;
        let same_bits = view.data().iter().zip(replay.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits, || format!("draw {draw}: replay is not bit-exact"))?;
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 draws in {:.1}s, min crop scale {min_ratio:.3}", elapsed.as_secs_f64()))
}

fn perturbed(bundle: &ModelBundle, seed: u64) -> ModelBundle {
    let mut r = rng(seed);
    let mut out = bundle.clone();
    for p in out.params.params_mut() {
        p.data.iter_mut().for_each(|v| *v += 0.1 * gaussian(&mut r));
    }
    out
}

fn momentum_update_criterion() -> Verdict {
    let cfg = tiny_config();
    let base = ModelBundle::new(&cfg.model, 1).map_err(|e| e.to_string())?;
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let query = perturbed(&base, 2 * trial);
        let start = perturbed(&base, 2 * trial + 1);
        let alpha = match trial {
            0 => 0.0,
            1 => 1.0,
            2 => 0.9999,
            _ => r.random_range(0.0..1.0),
        };
        let mut m = init_momentum(&start, alpha);
        momentum_update(&mut m, &query).map_err(|e| e.to_string())?;
        for ((got, old), q) in m.params.params().iter().zip(start.params.params()).zip(query.params.params()) {
            for ((&g, &o), &qv) in got.data.iter().zip(&old.data).zip(&q.data) {
                let want = alpha * o + (1.0 - alpha) * qv;
                if alpha == 0.0 {
                    ensure(g.to_bits() == qv.to_bits(), || format!("alpha=0: {} not copied", got.name))?;
                } else if alpha == 1.0 {
                    ensure(g.to_bits() == o.to_bits(), || format!("alpha=1: {} moved", got.name))?;
                } else {
                    worst = worst.max((g - want).abs() / want.abs().max(1e-300));
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("replay relative error {worst:e}"))?;

    // A forward and backward pass with an optimiser step on the query
    // branch must leave the momentum branch bit for bit unchanged.
    let state = PretrainState::new(&cfg).map_err(|e| e.to_string())?;
    let mut query = state.query.clone();
    let mut opt = state.optimizer.clone();
    let before: Vec<u64> = state.momentum.params.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect();
    let images: Vec<Image> = (0..4).map(|_| random_image(&mut r, 48, 48)).collect();
    let views: Vec<_> = images
        .iter()
        .enumerate()
        .map(|(i, img)| make_views(img, i as u64, &cfg.augment).unwrap())
        .collect();
    let arch = query.arch.clone();
    let t = |f: fn(&impash::augment::ViewQuadruple) -> &Image| {
        arch.images_to_tensor(&views.iter().map(f).collect::<Vec<_>>()).unwrap()
    };
    let pass = forward_query(&query, t(|v| &v.v1), t(|v| &v.v3)).map_err(|e| e.to_string())?;
    let (k1, k2) = forward_momentum(&state.momentum, &t(|v| &v.v2), &t(|v| &v.v4)).map_err(|e| e.to_string())?;
    let (_, dq1, dq2) = impash_loss_and_grad(
        &InfoNce::new(cfg.pretrain.temperature),
        ImpashBatch {
            q1: pass.q1.view(),
            q2: pass.q2.view(),
            k1_pos: k1.view(),
            k2_pos: k2.view(),
            negatives1: state.queue1.view(),
            negatives2: state.queue2.view(),
        },
    )
    .map_err(|e| e.to_string())?;
    let grads = pass.backward(&query, &dq1, &dq2).map_err(|e| e.to_string())?;
    opt.step(&mut query.params, &grads, 0.1).map_err(|e| e.to_string())?;
    let after: Vec<u64> = state.momentum.params.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect();
    ensure(before == after, || "momentum parameters changed during backward".into())?;
    ensure(query.params.max_abs_diff(&state.query.params) > 0.0, || "query did not move".into())?;
    Ok(format!("max replay rel err {worst:.1e}; alpha 0 and 1 exact; momentum bit-identical across backward"))
}

fn loss_criterion() -> Verdict {
    let mut r = rng(103);
    let mut worst_fwd: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let b = r.random_range(1..=4);
        let k = r.random_range(1..=8);
        let d = r.random_range(2..=16);
        let t = r.random_range(0.05..1.0);
        let q = unit_rows(&mut r, b, d);
        let kp = unit_rows(&mut r, b, d);
        let neg = unit_rows(&mut r, k, d);
        let got = info_nce(q.view(), kp.view(), neg.view(), t).map_err(|e| e.to_string())?;
        let want = loop_info_nce(&q, &kp, &neg, t);
        worst_fwd = worst_fwd.max((got - want).abs());

        let nce = InfoNce::unchecked(t.max(0.1));
        let (_, g) = nce.loss_and_grad(q.view(), kp.view(), neg.view()).unwrap();
        let num = numeric_grad(&q, 1e-4, |x| nce.loss(x.view(), kp.view(), neg.view()).unwrap());
        worst_grad = worst_grad.max(max_rel_err(&g, &num));

        if k >= b {
            let q2 = unit_rows(&mut r, b, d);
            let k2 = unit_rows(&mut r, b, d);
            let mut queue1 = FeatureQueue::new(k, d, r.random()).unwrap();
            let mut queue2 = FeatureQueue::new(k, d, r.random()).unwrap();
            queue1.enqueue(kp.view()).unwrap();
            queue2.enqueue(k2.view()).unwrap();
            let v = impash_loss(q.view(), q2.view(), kp.view(), k2.view(), &queue1, &queue2, t).unwrap();
            let (n1, n2) = (queue1.snapshot(), queue2.snapshot());
            let parts = info_nce(q.view(), kp.view(), n1.view(), t).unwrap()
                + info_nce(q.view(), k2.view(), n2.view(), t).unwrap()
                + info_nce(q2.view(), kp.view(), n1.view(), t).unwrap()
                + info_nce(q2.view(), k2.view(), n2.view(), t).unwrap();
            worst_sum = worst_sum.max((v.total - parts).abs());
        }
    }
    ensure(worst_fwd <= 1e-6, || format!("oracle error {worst_fwd:e}"))?;
    ensure(worst_grad < 1e-3, || format!("finite-difference rel error {worst_grad:e}"))?;
    ensure(worst_sum <= 1e-9, || format!("four-term sum error {worst_sum:e}"))?;

    for k in [1usize, 4, 8, 65_536] {
        let mut q = Array2::zeros((2, 3));
        q.column_mut(0).fill(1.0);
        let mut other = Array2::zeros((k.max(2), 3));
        other.column_mut(1).fill(1.0);
        let kp = other.slice(ndarray::s![..2, ..]).to_owned();
        let neg = other.slice(ndarray::s![..k, ..]).to_owned();
        let l = info_nce(q.view(), kp.view(), neg.view(), 0.07).map_err(|e| e.to_string())?;
        ensure(l == ((k + 1) as f64).ln(), || format!("uniform logits with K={k}: {l} vs ln(K+1)"))?;
    }
    Ok(format!(
        "oracle err {worst_fwd:.1e}, grad rel err {worst_grad:.1e}, four-term err {worst_sum:.1e}, log(K+1) exact"
    ))
}

fn queue_criterion() -> Verdict {
    let mut r = rng(104);
    let (mut full_batches, mut ragged) = (0, 0);
    for case in 0..1000u64 {
        let k = r.random_range(1..=16);
        let d = r.random_range(1..=5);
        let mut q = FeatureQueue::new(k, d, case).map_err(|e| e.to_string())?;
        let mut sim = RingSim::new(&q.snapshot());
        for p in 0..r.random_range(1..=20) {
            let b = if case % 5 == 0 && p % 3 == 0 { k } else { r.random_range(1..=k) };
            if b == k {
                full_batches += 1;
            } else if k % b != 0 {
                ragged += 1;
            }
            let batch = unit_rows(&mut r, b, d);
            q.enqueue(batch.view()).map_err(|e| e.to_string())?;
            sim.push(&batch);
            ensure(q.write_ptr() == sim.ptr && q.fill_count() == sim.filled, || {
                format!("case {case}: pointer {} / {} vs {} / {}", q.write_ptr(), q.fill_count(), sim.ptr, sim.filled)
            })?;
        }
        for (i, row) in q.view().axis_iter(Axis(0)).enumerate() {
            ensure(row.to_vec() == sim.rows[i], || format!("case {case}: slot {i} differs"))?;
        }
        let oldest_first: Vec<usize> = (0..k).map(|i| (sim.ptr + i) % k).collect();
        ensure(q.age_order() == oldest_first, || format!("case {case}: age order"))?;
    }
    ensure(full_batches > 0 && ragged > 0, || "sequences missed B=K or non-divisible B".into())?;
    Ok(format!("1000 sequences, {full_batches} batches with B=K, {ragged} with K mod B != 0"))
}

fn silhouette_fixture(classes_apart: bool) -> (Array2<f64>, Vec<usize>, Vec<u8>) {
    let mut r = rng(105);
    let (m, d) = (40, 6);
    let jitter: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| 0.05 * gaussian(&mut r)).collect()).collect();
    let (mut rows, mut cls, mut dom) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..3 {
        for domain in 0..2u8 {
            for j in &jitter {
                let mut p = j.clone();
                p[if classes_apart { c } else { 3 + domain as usize }] += 10.0;
                rows.extend(p);
                cls.push(c);
                dom.push(domain);
            }
        }
    }
    (Array2::from_shape_vec((cls.len(), d), rows).unwrap(), cls, dom)
}

fn silhouette_criterion() -> Verdict {
    let mut r = rng(106);
    let (mut worst, mut worst_rot): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let c = r.random_range(2..=5);
        let n = r.random_range(c.max(4)..=100);
        let d = r.random_range(2..=16);
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(&mut r);
        let x = Array2::from_shape_fn((n, d), |(i, _)| gaussian(&mut r) + 0.5 * labels[i] as f64);
        let s = silhouette(x.view(), &labels).map_err(|e| e.to_string())?;
        worst = worst.max((s - loop_silhouette(&x, &labels)).abs());
        let rot = random_orthogonal(&mut r, d);
        worst_rot = worst_rot.max((s - silhouette(x.dot(&rot).view(), &labels).unwrap()).abs());
    }
    ensure(worst <= 1e-9, || format!("oracle error {worst:e}"))?;
    ensure(worst_rot <= 1e-9, || format!("rotation error {worst_rot:e}"))?;

    let (x, c, d) = silhouette_fixture(true);
    let ideal = table4_protocol(x.view(), &c, &d, DomainAggregate::Mean).map_err(|e| e.to_string())?;
    let (x, c, d) = silhouette_fixture(false);
    let anti = table4_protocol(x.view(), &c, &d, DomainAggregate::Mean).map_err(|e| e.to_string())?;
    let (ic, id) = (ideal.class_target.unwrap_or(f64::NAN), ideal.domain_all.unwrap_or(f64::NAN));
    let (ac, ad) = (anti.class_target.unwrap_or(f64::NAN), anti.domain_all.unwrap_or(f64::NAN));
    ensure(ic > 0.95 && id.abs() < 0.05, || format!("ideal fixture: class {ic}, domain {id}"))?;
    ensure(ac.abs() < 0.05 && ad > 0.95, || format!("anti-ideal fixture: class {ac}, domain {ad}"))?;
    Ok(format!(
        "oracle err {worst:.1e}, rotation err {worst_rot:.1e}; ideal (class {ic:.3}, domain {id:.3}), anti-ideal (class {ac:.3}, domain {ad:.3})"
    ))
}

fn run_all_cli(out: &Path, seed: u64, config: Option<&Path>) -> Result<(RunSummary, Duration), String> {
    let t0 = Instant::now();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_impash"));
    cmd.arg("run-all").arg("--out").arg(out).arg("--seed").arg(seed.to_string());
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let output = cmd.env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("run-all seed {seed} failed: {}", String::from_utf8_lossy(&output.stderr)));
    }
    let text = fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?;
    let summary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((summary, t0.elapsed()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn end_to_end_criterion() -> Verdict {
    let dir = work_dir("desk");
    let mut accs = Vec::new();
    let mut baselines = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..3 {
        let (s, took) = run_all_cli(&dir.join(format!("seed{seed}")), seed, None)?;
        let base = s.random_baseline.as_ref().ok_or("desk preset produced no random baseline")?;
        println!(
            "    seed {seed}: target acc {:.4}, random-encoder acc {:.4}, {:.0}s",
            s.pretrained.target.acc,
            base.target.acc,
            took.as_secs_f64()
        );
        accs.push(s.pretrained.target.acc);
        baselines.push(base.target.acc);
        slowest = slowest.max(took);
    }
    let (acc, base) = (median(accs), median(baselines));
    let detail = format!(
        "median target acc {acc:.4} (chance 0.25, need >= 0.45), median random-encoder acc {base:.4} (need <= {:.4}), slowest run {:.0}s",
        acc - 0.10,
        slowest.as_secs_f64()
    );
    ensure(slowest < Duration::from_secs(30 * 60), || format!("too slow: {detail}"))?;
    ensure(acc - 0.25 >= 0.20 && acc - base >= 0.10, || detail.clone())?;
    Ok(detail)
}

fn reproducibility_criterion() -> Verdict {
    let dir = work_dir("repro");
    let (a, _) = run_all_cli(&dir.join("first"), 0, None)?;
    let (b, _) = run_all_cli(&dir.join("second"), 0, None)?;
    ensure(a == b, || "two runs with seed 0 produced different summaries".into())?;
    for file in ["summary.json", "features.csv", "pretrain/metrics.tsv", "pretrain/final.ckpt"] {
        let same = fs::read(dir.join("first").join(file)).ok() == fs::read(dir.join("second").join(file)).ok();
        ensure(same, || format!("{file} differs between identical runs"))?;
    }
    // Prediction rows carry tile paths, which differ only by the run directory.
    let read = |run: &str| fs::read_to_string(dir.join(run).join("predictions.csv")).unwrap_or_default();
    let first = read("first").replace(&dir.join("first").display().to_string(), "RUN");
    let second = read("second").replace(&dir.join("second").display().to_string(), "RUN");
    ensure(!first.is_empty() && first == second, || "predictions.csv differs between identical runs".into())?;

    let cfg = tiny_config();
    let spec = SyntheticSpec {
        seed: 3,
        n_per_class: cfg.data.n_per_class,
        n_classes: cfg.data.n_classes,
        image_size: cfg.data.image_size,
    };
    let (manifest, _) = generate_synthetic_two_domain(&dir.join("tiny"), &spec).map_err(|e| e.to_string())?;
    let straight = dir.join("straight");
    run_pretraining(&cfg, &manifest, &straight, &RunOptions::default()).map_err(|e| e.to_string())?;
    let pause = RunOptions {
        stop_after: Some(1),
        ..Default::default()
    };
    let ck = run_pretraining(&cfg, &manifest, &dir.join("resumed"), &pause).map_err(|e| e.to_string())?;
    let resume = RunOptions {
        resume: Some(ck),
        ..Default::default()
    };
    run_pretraining(&cfg, &manifest, &dir.join("resumed"), &resume).map_err(|e| e.to_string())?;
    let x = read_metrics(&straight.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let y = read_metrics(&dir.join("resumed").join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(!x.is_empty() && x == y, || "resumed loss trace differs from the uninterrupted one".into())?;
    Ok(format!("identical reports and artifacts for seed 0; resumed trace matches over {} steps", x.len()))
}

fn metrics_criterion() -> Verdict {
    let mut r = rng(108);
    for trial in 0..1000 {
        let c = r.random_range(2..=7);
        let per = r.random_range(1..=50);
        let truth: Vec<usize> = (0..c * per).map(|i| i / per).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if r.random_bool(0.5) { t } else { r.random_range(0..c) }).collect();
        let rep = classification_report(&truth, &pred, c).map_err(|e| e.to_string())?;
        ensure(rep.acc == rep.macro_re, || format!("trial {trial}: acc {} vs macro recall {}", rep.acc, rep.macro_re))?;
    }
    let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
    let pred = [0, 0, 1, 2, 1, 1, 0, 2, 2, 1];
    let rep = classification_report(&truth, &pred, 3).map_err(|e| e.to_string())?;
    ensure(rep.confusion == vec![vec![2, 1, 1], vec![1, 2, 0], vec![0, 1, 2]], || "confusion".into())?;
    ensure(rep.acc == 0.6, || format!("acc {}", rep.acc))?;
    ensure(rep.macro_re == 11.0 / 18.0, || format!("macro recall {}", rep.macro_re))?;
    ensure(rep.macro_pre == 11.0 / 18.0, || format!("macro precision {}", rep.macro_pre))?;
    ensure(rep.macro_f1 == 38.0 / 63.0, || format!("macro F1 {}", rep.macro_f1))?;
    Ok("acc == macro recall on 1000 balanced fixtures; 10-sample fixture: acc 0.6, Re 11/18, Pre 11/18, F1 38/63".into())
}

fn main() {
    let criteria: [(u8, &str, fn() -> Verdict); 8] = [
        (1, "augmentation geometry", augmentation_geometry),
        (2, "momentum update", momentum_update_criterion),
        (3, "loss oracles", loss_criterion),
        (4, "queue semantics", queue_criterion),
        (5, "silhouette", silhouette_criterion),
        (6, "end-to-end desk scale", end_to_end_criterion),
        (7, "reproducibility", reproducibility_criterion),
        (8, "classification metrics", metrics_criterion),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let t0 = Instant::now();
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
