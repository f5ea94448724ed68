//! The acceptance criteria, run in order inside one test so the memory-heavy
//! training of criterion 4 never overlaps anything else. Each criterion
//! prints one `PASS`/`FAIL` line straight to stdout (visible without
//! `--nocapture`); the test fails if any criterion does.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use laminet_core::config::ExperimentConfig;
use laminet_core::gradcheck::{check_all, GradCheckConfig, TOLERANCE};
use laminet_core::metrics::{aggregate, signed_errors, wilcoxon_signed, wilcoxon_signed_with, BoundaryReport, ErrorSample, WilcoxonMode};
use laminet_core::nets::{build_rnet, build_snet, DenseInit, NetConfig, Network, TrunkInit};
use laminet_core::phantom::{generate_item, Phantom, PhantomConfig};
use laminet_core::pipeline::{dataset_samples, infer_scan, train_rnet, train_snet, InferOptions, Sample};
use laminet_core::tensor::Tensor;
use laminet_core::topology::{boundaries_to_mask, mask_to_thickness, thickness_to_boundaries, LabelMask, ThicknessMap};

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Networks trained for criterion 4 and reused by criterion 5.
struct Trained {
    snet: Network<f32>,
    rnet: Network<f32>,
}

fn criterion(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    say(&format!(
        "criterion {id} [{name}]: {} ({:.1}s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64(),
        v.detail
    ));
    v.pass
}

fn random_thickness(rng: &mut ChaCha8Rng, b: usize, w: usize) -> ThicknessMap {
    let zero_rate = rng.gen_range(0.0..0.9);
    let data = (0..b * w)
        .map(|_| if rng.gen_bool(zero_rate) { 0.0 } else { rng.gen_range(0.0..30.0) })
        .collect();
    ThicknessMap::new(b, w, data).unwrap()
}

fn topology_guarantee() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0usize;
    let mut columns = 0usize;
    for _ in 0..10_000 {
        let t = random_thickness(&mut rng, 9, 128);
        let b = thickness_to_boundaries(&t).unwrap();
        violations += (0..128).filter(|&j| (0..8).any(|k| b.get(k, j) > b.get(k + 1, j))).count();
        columns += 128;
    }
    // end to end with random weights: reduced widths keep 1000 runs short,
    // the ordering argument does not depend on width
    let mut cfg = NetConfig {
        patch_width: 16,
        base_channels: 2,
        levels: 2,
        rnet_head_channels: 2,
        rnet_trunk_init: TrunkInit::He,
        dense_init: DenseInit::He,
        ..Default::default()
    };
    let mut e2e_columns = 0usize;
    let mut e2e_violations = 0usize;
    let mut zero_columns = 0usize;
    for draw in 0..20u64 {
        cfg.dense_bias_init = rng.gen_range(-2.0..4.0);
        let snet = build_snet::<f32>(&cfg, draw).unwrap();
        let rnet = build_rnet::<f32>(&cfg, 1000 + draw).unwrap();
        for trial in 0..50 {
            let (h, w) = (rng.gen_range(120..200), rng.gen_range(16..96));
            let scale = [1.0f32, 50.0, 1e-3][trial % 3];
            let image = Tensor::from_fn(&[1, h, w], |_| scale * rng.gen_range(0.0..1.0f32));
            let opts = InferOptions { patch_count: w.div_ceil(16) + 1, ..Default::default() };
            let (pred, _) = infer_scan(&image, &snet, &rnet, &opts).unwrap();
            for b in [&pred.crop_boundaries, &pred.boundaries] {
                e2e_violations += (0..w).filter(|&j| (0..8).any(|k| b.get(k, j) > b.get(k + 1, j))).count();
            }
            zero_columns += (0..w).filter(|&j| (0..9).any(|k| pred.thickness.get(k, j) == 0.0)).count();
            e2e_columns += w;
        }
    }
    verdict(
        violations == 0 && e2e_violations == 0,
        format!(
            "10000 thickness maps ({columns} columns): {violations} violations; 1000 random-weight inferences \
             ({e2e_columns} columns, {zero_columns} with a zero thickness): {e2e_violations} violations"
        ),
    )
}

fn gradient_audit() -> Verdict {
    let results = check_all(&GradCheckConfig { instances: 100, ..Default::default() }).unwrap();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let checked: usize = results.iter().map(|r| r.checked).sum();
    verdict(
        failed.is_empty(),
        format!(
            "{} subjects x 100 instances, {checked} entries, worst {} at {:.2e} (tolerance {TOLERANCE:.0e}){}",
            results.len(),
            worst.name,
            worst.max_rel_error,
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
        ),
    )
}

fn round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatched = 0usize;
    let mut pixels = 0usize;
    let pinchy = PhantomConfig { pinch_probability: 0.7, ..Default::default() };
    for i in 0..1000u64 {
        let mask = if i % 2 == 0 {
            generate_item(&pinchy, 33, i).unwrap().mask
        } else {
            // sorted random labels per column: stacked by construction
            let (h, w, c) = (rng.gen_range(1..160), rng.gen_range(1..64), rng.gen_range(2..11));
            let mut cols: Vec<Vec<u8>> = (0..w).map(|_| (0..h).map(|_| rng.gen_range(0..c as u8)).collect()).collect();
            cols.iter_mut().for_each(|col| col.sort_unstable());
            LabelMask::new(h, w, c, (0..h * w).map(|p| cols[p % w][p / w]).collect()).unwrap()
        };
        let back = boundaries_to_mask(&thickness_to_boundaries(&mask_to_thickness(&mask).unwrap()).unwrap(), mask.height()).unwrap();
        mismatched += mask.labels().iter().zip(back.labels()).filter(|(a, b)| a != b).count();
        pixels += mask.labels().len();
    }
    verdict(mismatched == 0, format!("1000 masks, {pixels} pixels, {mismatched} mismatched"))
}

fn patches(cfg: &ExperimentConfig, items: &[Phantom]) -> Vec<Sample> {
    let pairs: Vec<_> = items.iter().map(|p| (p.image.clone(), p.mask.clone())).collect();
    dataset_samples(&pairs, cfg.net.patch_width, cfg.infer.patch_count, cfg.infer.target_row).unwrap()
}

fn errors(items: &[Phantom], snet: &Network<f32>, rnet: &Network<f32>, opts: &InferOptions) -> (Vec<ErrorSample>, usize) {
    let mut out = Vec::new();
    let mut violations = 0;
    for (i, p) in items.iter().enumerate() {
        let (pred, _) = infer_scan(&p.image, snet, rnet, opts).unwrap();
        violations += pred.boundaries.first_violation().is_some() as usize;
        let truth = thickness_to_boundaries(&mask_to_thickness(&p.mask).unwrap()).unwrap();
        out.extend(signed_errors(&pred.boundaries, &truth, i, 1.0).unwrap());
    }
    (out, violations)
}

fn table_one(trained: &mut Option<Trained>) -> Verdict {
    let cfg = ExperimentConfig::default();
    let phantoms = |seed: u64, n: u64| (0..n).map(|i| generate_item(&cfg.phantom, seed, i).unwrap()).collect::<Vec<_>>();
    let (train, val, test) = (phantoms(1, 200), phantoms(3, 20), phantoms(2, 50));
    let (train, val) = (patches(&cfg, &train), patches(&cfg, &val));
    assert_eq!(train.len(), 200);

    let s = train_snet(&train, &val, &cfg.net, &cfg.snet.optimizer, &cfg.snet.schedule, 11).unwrap();
    let masks: Vec<_> = train.iter().map(|s| s.mask.clone()).collect();
    let vmasks: Vec<_> = val.iter().map(|s| s.mask.clone()).collect();
    let r = train_rnet(&masks, &vmasks, &cfg.net, &cfg.defects, &cfg.rnet.optimizer, &cfg.rnet.schedule, 12).unwrap();
    let accuracy = s.curve.iter().filter_map(|e| e.validation).fold(0.0, f64::max);
    let (snet, rnet) = (s.store.into_network().unwrap(), r.store.into_network().unwrap());

    let fresh = build_rnet::<f32>(&cfg.net, 12).unwrap();
    let (ours, violations) = errors(&test, &snet, &rnet, &cfg.infer);
    let (before, _) = errors(&test, &snet, &fresh, &cfg.infer);
    let report = BoundaryReport::from_samples(&ours, cfg.net.num_boundaries, 1.0, Some(&before)).unwrap();
    let initial = BoundaryReport::from_samples(&before, cfg.net.num_boundaries, 1.0, None).unwrap();
    for line in report.to_table().lines() {
        say(&format!("    {line}"));
    }
    let o = &report.overall().stats;
    let i = &initial.overall().stats;
    *trained = Some(Trained { snet, rnet });
    verdict(
        o.mad <= 1.0 && o.msd.abs() <= 0.3 && violations == 0,
        format!(
            "S-Net best val pixel accuracy {accuracy:.4}; R-Net best epoch {} of {}; 50 held-out phantoms: \
             MAD {:.3} px, RMSE {:.3}, MSD {:+.3}, 95% [{:+.2}, {:+.2}] (untrained R-Net: MAD {:.3}, MSD {:+.3}; \
             Wilcoxon p {:.3}); {violations} scans with ordering violations",
            r.best_epoch,
            r.curve.len(),
            o.mad,
            o.rmse,
            o.msd,
            o.q025,
            o.q975,
            i.mad,
            i.msd,
            report.overall().p_mad.unwrap_or(f64::NAN)
        ),
    )
}

fn fovea(trained: &Option<Trained>) -> Verdict {
    let Some(nets) = trained else {
        return verdict(false, "needs the networks from criterion 4");
    };
    let cfg = ExperimentConfig::default();
    let pinched = PhantomConfig { pinch_probability: 1.0, ..cfg.phantom.clone() };
    let mut gaps = Vec::new();
    let mut violations = 0usize;
    let mut columns = 0usize;
    for i in 0..30u64 {
        let p = generate_item(&pinched, 5, i).unwrap();
        let (pred, _) = infer_scan(&p.image, &nets.snet, &nets.rnet, &cfg.infer).unwrap();
        let t = mask_to_thickness(&p.mask).unwrap();
        let b = &pred.boundaries;
        violations += (0..b.width()).filter(|&j| (0..b.layers() - 1).any(|k| b.get(k, j) > b.get(k + 1, j))).count();
        columns += b.width();
        for &j in &p.pinch_columns {
            for k in 1..t.layers() {
                if t.get(k, j) == 0.0 {
                    gaps.push(b.get(k, j) - b.get(k - 1, j));
                }
            }
        }
    }
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    let mean = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
    let within = gaps.iter().filter(|&&g| g < 1.0).count();
    verdict(
        !gaps.is_empty() && violations == 0 && worst < 1.0,
        format!(
            "30 pinched phantoms, {} zero-thickness boundary pairs at pinch centres: gap mean {mean:.3} px, \
             max {worst:.3} px, {within} below 1 px; {violations} ordering violations in {columns} columns",
            gaps.len()
        ),
    )
}

/// All 2^n sign assignments of the non-zero differences, ranks from a
/// pairwise count, doubled so ties stay integral.
fn enumerated_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().cloned().filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let rank: Vec<u64> = d
        .iter()
        .map(|a| {
            let below = d.iter().filter(|b| b.abs() < a.abs()).count() as u64;
            let equal = d.iter().filter(|b| b.abs() == a.abs()).count() as u64;
            2 * below + equal + 1
        })
        .collect();
    let observed: u64 = d.iter().zip(&rank).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut low, mut high) = (0u64, 0u64);
    for signs in 0u64..1 << n {
        let w: u64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| rank[i]).sum();
        low += (w <= observed) as u64;
        high += (w >= observed) as u64;
    }
    (2.0 * low.min(high) as f64 / (1u64 << n) as f64).min(1.0)
}

fn statistics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut per_n = [0usize; 11];
    for i in 0..100 {
        let n = 1 + i % 10;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-4i32..5) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(-4i32..5) as f64 } else { rng.gen_range(-3.0..3.0) }).collect();
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        mismatches += (wilcoxon_signed_with(&x, &y, WilcoxonMode::Exact).unwrap() != enumerated_p(&d)) as usize;
        per_n[n] += 1;
    }
    let mut order_failures = 0;
    for i in 0..1000 {
        let n = 1 + i % 300;
        let shift = rng.gen_range(-2.0..2.0);
        let v: Vec<f64> = (0..n).map(|_| shift + rng.gen_range(-5.0..5.0f64).powi(3)).collect();
        let a = aggregate(&v).unwrap();
        let eps = 1e-12 * (1.0 + a.rmse);
        order_failures += !(a.rmse + eps >= a.mad && a.mad + eps >= a.msd.abs()) as usize;
    }
    let quarter = wilcoxon_signed(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
    verdict(
        mismatches == 0 && order_failures == 0 && quarter == 0.25,
        format!(
            "exact vs enumeration: {mismatches} mismatches in 100 instances (n = 1..10); RMSE >= MAD >= |MSD|: \
             {order_failures} failures in 1000 sets; [1, 2, 3] -> p = {quarter}"
        ),
    )
}

const SMALL: &str = r#"
seed = 17

[phantom]
height = 160
width = 64

[net]
patch_width = 32
base_channels = 4
levels = 2

[snet.schedule]
epochs = 2

[infer]
patch_count = 3
"#;

fn laminet(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_laminet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "laminet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn determinism() -> Verdict {
    // the same commands in two fresh directories, so recorded paths agree too
    let dir = tempfile::tempdir().unwrap();
    for tag in ["first", "second"] {
        let d = dir.path().join(tag);
        fs::create_dir(&d).unwrap();
        fs::write(d.join("small.toml"), SMALL).unwrap();
        let run = |rest: &[&str]| laminet(&d, &[&["--config", "small.toml", "--deterministic"][..], rest].concat());
        run(&["--seed", "17", "gen-data", "--count", "6", "--out", "train"]);
        run(&["--seed", "18", "gen-data", "--count", "3", "--out", "test"]);
        run(&["--seed", "17", "train-snet", "--data", "train", "--val", "test", "--out", "snet.lmn"]);
        run(&["--seed", "17", "infer", "--data", "test", "--snet", "snet.lmn", "--out", "pred"]);
        run(&["eval", "--pred", "pred", "--truth", "test", "--out", "report"]);
    }
    let files = ["report/report.csv", "report/report.txt", "report/run.json", "pred/manifest.json", "snet.lmn", "snet.lmn.json"];
    let d = dir.path();
    let differing: Vec<_> = files
        .iter()
        .filter(|f| fs::read(d.join("first").join(f)).unwrap() != fs::read(d.join("second").join(f)).unwrap())
        .collect();
    let csv = fs::read_to_string(d.join("first/report/report.csv")).unwrap();
    verdict(
        differing.is_empty(),
        format!(
            "two seeded gen-data + train-snet + infer + eval runs (tiny network); {} of {} outputs byte-identical{}; \
             overall row: {}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") },
            csv.lines().last().unwrap_or("")
        ),
    )
}

fn timing() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let text = laminet(dir.path(), &["bench", "--scans", "8", "--runs", "3", "--out", "bench.txt"]);
    for line in text.lines() {
        say(&format!("    {line}"));
    }
    let value = |stage: &str| {
        text.lines()
            .find(|l| l.starts_with(stage))
            .and_then(|l| l[stage.len()..].split_whitespace().next())
            .and_then(|v| v.parse::<f64>().ok())
    };
    let stages = ["preprocessing", "inference", "reconstruction", "total"].map(value);
    let ok = stages.iter().all(|s| s.is_some_and(|v| v.is_finite() && v >= 0.0)) && dir.path().join("bench.txt.json").is_file();
    verdict(ok, "per-stage medians recorded above (report only, no threshold)")
}

#[test]
fn acceptance_criteria() {
    let mut trained = None;
    let results = [
        criterion(1, "topology guarantee", topology_guarantee),
        criterion(2, "gradient audit", gradient_audit),
        criterion(3, "round trip", round_trip),
        criterion(4, "desk-scale boundary accuracy", || table_one(&mut trained)),
        criterion(5, "fovea degeneracy", || fovea(&trained)),
        criterion(6, "statistics", statistics),
        criterion(7, "determinism", determinism),
        criterion(8, "timing report", timing),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
