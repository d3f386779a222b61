//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing the harness capture) before asserting.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use geolink::autodiff::Graph;
use geolink::features::{FeatureBatch, ViewTag};
use geolink::image_encoder::ImageBatch;
use geolink::nn::Parameterized;
use geolink::objectives::{affinity, info_nce, relation_distill_loss, vclub_mi_upper, VClubEstimator};
use geolink::pointcloud::{farthest_point_sampling, knn_group};
use geolink::retrieval::{average_precision, evaluate, recall_at_k, Direction};
use geolink::synthetic::{Dataset, DatasetConfig};
use geolink::trainer::{
    ablation_matrix, build_losses, forward_views, lr_at, validate_report, Checkpoint, History, Model, TrainConfig,
    Trainer, TripletBatch,
};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} | {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn unit_rows(m: Array2<f64>) -> Array2<f64> {
    let mut m = m;
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn batch(values: Array2<f64>) -> FeatureBatch {
    FeatureBatch::unlabelled(values, ViewTag::Drone).unwrap()
}

// ---------- 1: brute-force oracles ----------

fn sq(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[[i, c]] - b[[j, c]]).powi(2)).sum()
}

fn fps_oracle(p: &Array2<f64>, m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..p.nrows() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| sq(p, i, p, c)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

fn knn_oracle(q: &Array2<f64>, r: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    (0..q.nrows())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..r.nrows()).map(|j| (sq(q, i, r, j), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all[..k].iter().map(|x| x.1).collect()
        })
        .collect()
}

/// 1-based rank of gallery item `g` for query row `q`, by counting.
fn rank_of(s: &Array2<f64>, q: usize, g: usize) -> usize {
    1 + (0..s.ncols()).filter(|&j| s[[q, j]] > s[[q, g]] || (s[[q, j]] == s[[q, g]] && j < g)).count()
}

fn recall_oracle(s: &Array2<f64>, gt: &[Vec<usize>], k: usize) -> f64 {
    let hits = gt
        .iter()
        .enumerate()
        .filter(|(q, rel)| rel.iter().map(|&g| rank_of(s, *q, g)).min().unwrap() <= k)
        .count();
    hits as f64 / gt.len() as f64
}

fn ap_oracle(s: &Array2<f64>, gt: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (q, rel) in gt.iter().enumerate() {
        let ranks: Vec<usize> = rel.iter().map(|&g| rank_of(s, q, g)).collect();
        let ap: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / rel.len() as f64;
        total += ap;
    }
    total / gt.len() as f64
}

#[test]
fn criterion_01_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut fps, mut knn, mut aff, mut rk, mut ap) = (0, 0, 0, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=64);
        // coarse grid coordinates so distance ties actually occur
        let pts = Array2::from_shape_fn((n, 3), |_| rng.random_range(0..6) as f64 * 0.5);
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        fps += (farthest_point_sampling(&pts, m, start).unwrap() == fps_oracle(&pts, m, start)) as usize;

        let nq = rng.random_range(1..=16);
        let q = Array2::from_shape_fn((nq, 3), |_| rng.random_range(0..6) as f64 * 0.5);
        let k = rng.random_range(1..=n);
        let got = knn_group(&q, &pts, k).unwrap();
        let want = knn_oracle(&q, &pts, k);
        knn += (0..nq).all(|i| got.row(i).to_vec() == want[i]) as usize;

        let b = rng.random_range(2..=8);
        let width = rng.random_range(1..=8);
        let f = gaussian(&mut rng, b, width);
        let a = affinity(&batch(f.clone())).unwrap().values;
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    total += sq(&f, i, &f, j).sqrt();
                }
            }
        }
        let mut ok = true;
        for i in 0..b {
            for j in 0..b {
                let want = if i == j { 0.0 } else { sq(&f, i, &f, j).sqrt() / total };
                worst = worst.max((a[[i, j]] - want).abs());
                ok &= (a[[i, j]] - want).abs() <= 1e-9;
            }
        }
        aff += ok as usize;

        let nq = rng.random_range(1..=8);
        let ng = rng.random_range(1..=12);
        // quantized scores give ties in the ranking
        let s = Array2::from_shape_fn((nq, ng), |_| rng.random_range(-4..=4) as f64 / 4.0);
        let gt: Vec<Vec<usize>> = (0..nq)
            .map(|_| {
                let mut rel: Vec<usize> = (0..ng).filter(|_| rng.random_bool(0.3)).collect();
                if rel.is_empty() {
                    rel.push(rng.random_range(0..ng));
                }
                rel
            })
            .collect();
        let kk = rng.random_range(1..=ng);
        let d = (recall_at_k(&s, &gt, kk).unwrap() - recall_oracle(&s, &gt, kk)).abs();
        worst = worst.max(d);
        rk += (d <= 1e-9) as usize;
        let d = (average_precision(&s, &gt).unwrap() - ap_oracle(&s, &gt)).abs();
        worst = worst.max(d);
        ap += (d <= 1e-9) as usize;
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = [fps, knn, aff, rk, ap].iter().all(|&c| c == 200) && secs < 30.0;
    report(
        1,
        ok,
        &format!("fps {fps}/200 knn {knn}/200 affinity {aff}/200 R@K {rk}/200 AP {ap}/200, max dev {worst:.1e}, {secs:.1}s"),
    );
    assert!(ok);
}

// ---------- 2: finite differences on the full objective ----------

fn grad_check_setup() -> (Model, TripletBatch, TrainConfig) {
    let cfg = TrainConfig {
        feature_dim: 8,
        expert_count: 3,
        vclub_hidden: 5,
        image_side: 8,
        patch_size: 4,
        mixer_width: 6,
        mixer_blocks: 1,
        // the stop-gradient on the distillation teacher makes the analytic
        // gradient differ from the derivative of the loss value on purpose
        teacher_grad: true,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pc_dim = 6;
    let mean = gaussian(&mut rng, 1, pc_dim) * 0.1;
    let scale = Array2::from_shape_fn((1, pc_dim), |_| rng.random_range(0.5..2.0));
    let mut model = Model::new(&cfg, mean, scale).unwrap();
    // move off the symmetric initial point (zero gate, τ at its init)
    model.visit_mut("", &mut |_, m| m.mapv_inplace(|v| v + 0.05 * (v * 37.0).sin()));
    let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let pixels = |rng: &mut ChaCha8Rng| Array4::from_shape_fn((3, 3, 8, 8), |_| rng.random::<f64>());
    let b = TripletBatch {
        scene_ids: ids.clone(),
        drone: ImageBatch::new(pixels(&mut rng), ViewTag::Drone, ids.clone()).unwrap(),
        drone_views: 1,
        satellite: ImageBatch::new(pixels(&mut rng), ViewTag::Satellite, ids).unwrap(),
        pc_features: gaussian(&mut rng, 3, pc_dim),
    };
    (model, b, cfg)
}

fn total_loss(model: &Model, b: &TripletBatch, cfg: &TrainConfig) -> (f64, std::collections::BTreeMap<String, Array2<f64>>) {
    let mut g = Graph::new();
    let v = forward_views(&mut g, model, b).unwrap();
    let l = build_losses(&mut g, model, v, &cfg.loss_config());
    g.backward(l.total);
    (g.scalar(l.total), g.param_grads())
}

fn perturb(model: &mut Model, name: &str, idx: usize, delta: f64) {
    model.visit_mut("", &mut |n, m| {
        if n == name {
            let v = m.as_slice_mut().unwrap();
            v[idx] += delta;
        }
    });
}

#[test]
fn criterion_02_gradient_check() {
    let t0 = Instant::now();
    let (mut model, b, cfg) = grad_check_setup();
    let (_, grads) = total_loss(&model, &b, &cfg);
    let mut names = Vec::new();
    model.visit("", &mut |n, m| names.push((n, m.len())));
    let h = 1e-5;
    let (mut checked, mut worst, mut worst_name) = (0usize, 0.0f64, String::new());
    let mut missing = Vec::new();
    for (name, len) in &names {
        let Some(g) = grads.get(name) else {
            missing.push(name.clone());
            continue;
        };
        let g = g.as_standard_layout().to_owned();
        let gs = g.as_slice().unwrap();
        for i in 0..*len {
            perturb(&mut model, name, i, h);
            let up = total_loss(&model, &b, &cfg).0;
            perturb(&mut model, name, i, -2.0 * h);
            let down = total_loss(&model, &b, &cfg).0;
            perturb(&mut model, name, i, h);
            let num = (up - down) / (2.0 * h);
            let scale = num.abs().max(gs[i].abs());
            let err = if scale < 1e-6 { (num - gs[i]).abs() / 1e-6 } else { (num - gs[i]).abs() / scale };
            if err > worst {
                worst = err;
                worst_name = format!("{name}[{i}]");
            }
            checked += 1;
        }
    }
    let paths = ["image", "mme", "proj", "vclub_drone", "vclub_satellite", "log_tau"];
    let covered = paths.iter().all(|p| names.iter().any(|(n, _)| n.starts_with(p) && grads.contains_key(n)));
    let secs = t0.elapsed().as_secs_f64();
    let ok = missing.is_empty() && covered && worst <= 1e-3 && secs < 60.0;
    report(
        2,
        ok,
        &format!("{checked} entries in {} tensors, max rel err {worst:.2e} at {worst_name}, no-grad {missing:?}, {secs:.1}s", names.len()),
    );
    assert!(ok);
}

// ---------- 3: vCLUB against the analytic Gaussian MI ----------

/// Estimate and its standard error from per-anchor terms.
fn vclub_with_se(est: &VClubEstimator, x: &Array2<f64>, y: &Array2<f64>) -> (f64, f64) {
    let mu = est.predict(x);
    let (n, yv, mv) = (x.nrows() as f64, y.column(0), mu.column(0));
    let y_mean = yv.mean().unwrap();
    let y_sq = yv.mapv(|v| v * v).mean().unwrap();
    let terms: Vec<f64> = (0..x.nrows())
        .map(|i| -0.5 * (yv[i] - mv[i]).powi(2) + 0.5 * (y_sq - 2.0 * mv[i] * y_mean + mv[i] * mv[i]))
        .collect();
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let lib = vclub_mi_upper(est, &batch(x.clone()), &batch(y.clone())).unwrap();
    assert!((lib - mean).abs() < 1e-9, "library {lib} vs per-anchor mean {mean}");
    (lib, (var / n).sqrt())
}

#[test]
fn criterion_03_vclub_gaussian_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let rho: f64 = 0.8;
    let x = gaussian(&mut rng, n, 1);
    let noise = gaussian(&mut rng, n, 1);
    let y = &x * rho + &noise * (1.0 - rho * rho).sqrt();
    let mut est = VClubEstimator::new(1, 1, 16, 3).unwrap();
    est.fit(&x, &y, 600, 0.02);
    let (mi, se) = vclub_with_se(&est, &x, &y);
    let truth = -0.5 * (1.0 - rho * rho).ln();

    let z = gaussian(&mut rng, n, 1);
    let mut indep = VClubEstimator::new(1, 1, 16, 4).unwrap();
    indep.fit(&x, &z, 600, 0.02);
    let (mi0, _) = vclub_with_se(&indep, &x, &z);

    let ok = mi + 2.0 * se >= truth && mi0.abs() <= 0.05;
    report(
        3,
        ok,
        &format!("ρ=0.8: estimate {mi:.4} ± {se:.4} vs analytic {truth:.4}; independent: {mi0:+.4}"),
    );
    assert!(ok);
}

// ---------- 4: relational distillation invariance ----------

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    // Gram-Schmidt on a Gaussian matrix
    let a = gaussian(rng, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        for k in 0..j {
            let u = q.column(k).to_owned();
            v = &v - &(&u * u.dot(&v));
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

#[test]
fn criterion_04_relational_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(1..=8);
        let teacher = gaussian(&mut rng, b, d);
        let make_student = |rng: &mut ChaCha8Rng| {
            let r = random_rotation(rng, d);
            let s = rng.random_range(0.01..100.0);
            let t: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-5.0..5.0));
            teacher.dot(&r) * s + &t
        };
        let dro = make_student(&mut rng);
        let sat = make_student(&mut rng);
        let l = relation_distill_loss(&batch(dro), &batch(sat), &batch(teacher.clone())).unwrap();
        worst = worst.max(l.abs());
    }
    let ok = worst <= 1e-10;
    report(4, ok, &format!("max loss over 200 rotated/scaled/shifted students {worst:.2e}"));
    assert!(ok);
}

// ---------- 5: closed-form values ----------

#[test]
fn criterion_05_closed_forms() {
    let eye = batch(Array2::eye(2));
    let nce = info_nce(&eye, &eye, 1.0).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut uniform_dev = 0.0f64;
    for b in 2..=8 {
        let q = unit_rows(gaussian(&mut rng, b, 4));
        let same = unit_rows(gaussian(&mut rng, 1, 4));
        let refs = Array2::from_shape_fn((b, 4), |(_, j)| same[[0, j]]);
        let l = info_nce(&batch(q), &batch(refs), 0.3).unwrap();
        uniform_dev = uniform_dev.max((l - (b as f64).ln()).abs());
    }
    let a = affinity(&batch(gaussian(&mut rng, 2, 5))).unwrap().values;
    let aff_ok = a[[0, 1]] == 0.5 && a[[1, 0]] == 0.5;
    let ok = (nce - want).abs() <= 1e-9 && uniform_dev <= 1e-9 && aff_ok;
    report(
        5,
        ok,
        &format!(
            "orthonormal B=2 {nce:.12} vs {want:.12}; uniform-logit max dev {uniform_dev:.1e}; affinity off-diagonal {} {}",
            a[[0, 1]],
            a[[1, 0]]
        ),
    );
    assert!(ok);
}

// ---------- 6: schedule endpoints ----------

#[test]
fn criterion_06_schedule_endpoints() {
    let cfg = TrainConfig::default();
    let spe = cfg.steps_per_epoch(400);
    let total = spe * cfg.epochs;
    let w = cfg.warmup_steps(spe);
    let peak = lr_at(w, total, &cfg);
    let end = lr_at(total, total, &cfg);
    let ok = (peak - 6e-4).abs() <= 1e-9 && (end - 1e-4).abs() <= 1e-9;
    report(6, ok, &format!("warmup end (step {w}) {peak:e}, final step {total} {end:e}"));
    assert!(ok);
}

// ---------- 7 and 8: desk-scale ablation and loss curves ----------

const SEEDS: u64 = 5;

struct SeedRuns {
    baseline: f64,
    cc: f64,
    full: f64,
    full_history: History,
    no_ga_history: History,
}

struct DeskRuns {
    seeds: Vec<SeedRuns>,
    ablation_time: Duration,
}

fn trained(cfg: &TrainConfig, data: &Dataset) -> (f64, History) {
    let mut t = Trainer::new(cfg.clone(), data).unwrap();
    let h = t.run(None).unwrap();
    let r = evaluate(&t.model.image, data, Direction::DroneToSatellite, &[1]).unwrap();
    (r.recall_at[&1] * 100.0, h)
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let matrix = ablation_matrix();
        let pick = |label: &str| matrix.iter().find(|v| v.label == label).unwrap().clone();
        let (baseline, cc, full) = (pick("baseline"), pick("cc"), pick("cc+sc+ga+rd"));
        let mut ablation_time = Duration::ZERO;
        let seeds = (0..SEEDS)
            .map(|seed| {
                let t0 = Instant::now();
                let data = Dataset::generate(&DatasetConfig { seed, ..DatasetConfig::default() }).unwrap();
                let base = TrainConfig { seed, ..TrainConfig::default() };
                let (b, _) = trained(&baseline.apply(&base).unwrap(), &data);
                let (c, _) = trained(&cc.apply(&base).unwrap(), &data);
                let full_cfg = full.apply(&base).unwrap();
                let (f, full_history) = trained(&full_cfg, &data);
                ablation_time += t0.elapsed();
                let (_, no_ga_history) = trained(&TrainConfig { ga: false, ..full_cfg }, &data);
                SeedRuns { baseline: b, cc: c, full: f, full_history, no_ga_history }
            })
            .collect();
        DeskRuns { seeds, ablation_time }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_07_desk_ablation_trend() {
    let runs = desk_runs();
    let col = |f: fn(&SeedRuns) -> f64| runs.seeds.iter().map(f).collect::<Vec<_>>();
    let (b, c, f) = (col(|s| s.baseline), col(|s| s.cc), col(|s| s.full));
    let (mb, mc, mf) = (median(b.clone()), median(c.clone()), median(f.clone()));
    let secs = runs.ablation_time.as_secs_f64();
    let ok = mc >= mb && mf >= mc + 5.0 && secs < 20.0 * 60.0;
    report(
        7,
        ok,
        &format!(
            "median d2s R@1: baseline {mb:.1}, cc {mc:.1}, full {mf:.1} (need cc ≥ baseline and full ≥ cc + 5); per seed baseline {b:.1?} cc {c:.1?} full {f:.1?}; {secs:.0}s"
        ),
    );
    assert!(ok);
}

fn tail_variance(h: &History, pick: fn(&geolink::objectives::LossReport) -> f64) -> f64 {
    let n = h.steps.len();
    let tail: Vec<f64> = h.steps[n - n / 4..].iter().map(|s| pick(&s.loss)).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64
}

#[test]
fn criterion_08_loss_curve_variance() {
    let runs = desk_runs();
    let mut passing = 0;
    let mut ratios = Vec::new();
    for s in &runs.seeds {
        let dro = tail_variance(&s.full_history, |l| l.nce_drone_pointcloud)
            / tail_variance(&s.no_ga_history, |l| l.nce_drone_pointcloud);
        let sat = tail_variance(&s.full_history, |l| l.nce_satellite_pointcloud)
            / tail_variance(&s.no_ga_history, |l| l.nce_satellite_pointcloud);
        if dro <= 1.0 && sat <= 1.0 {
            passing += 1;
        }
        ratios.push((dro, sat));
    }
    let med_dro = median(ratios.iter().map(|r| r.0).collect());
    let med_sat = median(ratios.iter().map(|r| r.1).collect());
    let ok = passing >= 3;
    report(
        8,
        ok,
        &format!(
            "final-quarter variance ratio (with/without geometric term), median 3D↔drone {med_dro:.3}, 3D↔satellite {med_sat:.3}; both ≤ 1 in {passing}/5 seeds; per seed {ratios:.3?}"
        ),
    );
    assert!(ok);
}

// ---------- 9: inference never touches the 3D branch ----------

fn geolink(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_geolink")).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "geolink {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY_CONFIG: &str = "epochs = 2\nbatch_size = 4\nfeature_dim = 8\nvclub_hidden = 8\nimage_side = 16\n\
    patch_size = 4\nmixer_width = 16\nmixer_blocks = 1\npc_points = 64\npc_stages = 2\npc_neighbors = 8\npc_initial_dim = 12\n";

#[test]
fn criterion_09_two_dimensional_inference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.toml"), TINY_CONFIG).unwrap();
    geolink(&["generate-data", "--seed", "3", "--scenes", "8", "--target-scenes", "6", "--views", "2", "--image-side", "16", "--points", "64", "--out", "data"], d);
    geolink(&["train", "--config", "cfg.toml", "--data", "data", "--out", "run"], d);
    let full = Checkpoint::load(&d.join("run/checkpoint.json")).unwrap();
    assert!(full.model.anchor.is_some());
    full.stripped().save(&d.join("stripped.json")).unwrap();

    let mut counters_zero = true;
    let mut identical = true;
    for dir_flag in ["d2s", "s2d"] {
        let a = geolink(&["eval", "--ckpt", "run/checkpoint.json", "--data", "data", "--direction", dir_flag, "--k", "1,5,10"], d);
        let b = geolink(&["eval", "--ckpt", "stripped.json", "--data", "data", "--direction", dir_flag, "--k", "1,5,10"], d);
        counters_zero &= a.contains("pointcloud_encodes 0 mme_forwards 0") && b.contains("pointcloud_encodes 0 mme_forwards 0");
        identical &= a == b;
    }

    // in-process: the counters do move during training, and not during evaluation
    let data = Dataset::load(&d.join("data")).unwrap();
    let before = geolink::instrument::snapshot();
    let mut t = Trainer::new(TrainConfig::from_toml(TINY_CONFIG).unwrap(), &data).unwrap();
    t.run(None).unwrap();
    let during_training = geolink::instrument::snapshot().since(before);
    let before = geolink::instrument::snapshot();
    let r_full = evaluate(&t.model.image, &data, Direction::DroneToSatellite, &[1, 5]).unwrap();
    let during_eval = geolink::instrument::snapshot().since(before);
    let stripped = t.checkpoint().stripped();
    let r_stripped = evaluate(&stripped.model.image, &data, Direction::DroneToSatellite, &[1, 5]).unwrap();

    let ok = counters_zero
        && identical
        && during_eval.is_zero()
        && during_training.pointcloud_encodes > 0
        && during_training.mme_forwards > 0
        && r_full == r_stripped;
    report(
        9,
        ok,
        &format!(
            "CLI eval counters zero: {counters_zero}; stripped == full output: {identical}; training used {} encodes / {} fusions, evaluation {} / {}",
            during_training.pointcloud_encodes, during_training.mme_forwards, during_eval.pointcloud_encodes, during_eval.mme_forwards
        ),
    );
    assert!(ok);
}

// ---------- 10: determinism and persistence ----------

#[test]
fn criterion_10_determinism_and_persistence() {
    let data = common::tiny_dataset(21, 12, 4);
    let cfg = TrainConfig { epochs: 4, ..common::tiny_config(9) };
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        let h = t.run(None).unwrap();
        (h, t.checkpoint())
    };
    let (h1, ck1) = run();
    let (h2, ck2) = run();
    let same_trace = h1.steps == h2.steps && ck1 == ck2;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck1.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let t_orig = Trainer::resume(&ck1, &data).unwrap();
    let t_load = Trainer::resume(&loaded, &data).unwrap();
    let forward_same = (0..3).all(|s| t_orig.evaluate_loss(s).unwrap() == t_load.evaluate_loss(s).unwrap())
        && evaluate(&ck1.model.image, &data, Direction::SatelliteToDrone, &[1, 5]).unwrap()
            == evaluate(&loaded.model.image, &data, Direction::SatelliteToDrone, &[1, 5]).unwrap();

    let mut first = Trainer::new(cfg.clone(), &data).unwrap();
    let head = first.run(Some(7)).unwrap();
    first.checkpoint().save(&path).unwrap();
    let mut rest = Trainer::resume(&Checkpoint::load(&path).unwrap(), &data).unwrap();
    let tail = rest.run(None).unwrap();
    let joined: Vec<_> = head.steps.iter().chain(&tail.steps).cloned().collect();
    let resume_same = joined == h1.steps && rest.model == ck1.model;

    let ok = same_trace && forward_same && resume_same;
    report(
        10,
        ok,
        &format!("{} steps: identical traces {same_trace}, save/load forward identical {forward_same}, resume at step 7 identical {resume_same}", h1.steps.len()),
    );
    assert!(ok);
}

// ---------- 11: sensitivity sweep through the CLI ----------

#[test]
fn criterion_11_sensitivity_harness() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // the widest expert sweep point (15 experts) needs a width divisible by 16
    let cfg = TINY_CONFIG.replace("epochs = 2", "epochs = 1").replace("feature_dim = 8", "feature_dim = 16");
    std::fs::write(d.join("cfg.toml"), cfg).unwrap();
    geolink(&["generate-data", "--seed", "5", "--scenes", "8", "--target-scenes", "4", "--views", "2", "--image-side", "16", "--points", "64", "--out", "data"], d);
    let stdout = geolink(&["ablate", "--config", "cfg.toml", "--grid", "sensitivity", "--data", "data", "--out", "sweep"], d);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sweep/report.json")).unwrap()).unwrap();
    let parsed = validate_report(&json);
    let labels: Vec<String> = parsed.as_ref().map(|r| r.rows.iter().map(|x| x.label.clone()).collect()).unwrap_or_default();
    let axes_covered = ["expert_count", "lambda_sc", "vclub_hidden"].iter().all(|a| labels.iter().any(|l| l.starts_with(a)));
    let values_covered = [1, 3, 7, 15].iter().all(|e| labels.contains(&format!("expert_count={e}")))
        && ["0.0", "1.0", "2.0", "4.0", "8.0"].iter().all(|l| labels.contains(&format!("lambda_sc={l}")))
        && [16, 64, 256].iter().all(|h| labels.contains(&format!("vclub_hidden={h}")));
    let files = ["report.md", "results.json", "aggregate.csv"].iter().all(|f| d.join("sweep").join(f).exists());
    let ok = parsed.is_ok() && labels.len() == 12 && axes_covered && values_covered && files;
    report(
        11,
        ok,
        &format!(
            "{} variants ranked, schema valid: {}, files written: {files}, {:.1}s; top: {}",
            labels.len(),
            parsed.is_ok(),
            t0.elapsed().as_secs_f64(),
            stdout.lines().nth(1).unwrap_or("").trim()
        ),
    );
    assert!(ok);
}
