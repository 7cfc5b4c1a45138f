//! Acceptance run: one PASS/FAIL line per criterion at pinned tolerances.
//!
//! Criterion failures are reported, not raised; the process only fails when
//! something cannot be run at all. `SCV2_ACCEPT=1,4,13` runs a subset.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scv2_cli::config::RunConfig;
use scv2_cli::stages::{self, Ctx, QuantInfo};
use scv2_core::compression::encode_model;
use scv2_core::contribution::{single_view_contribution, DEFAULT_GAMMA};
use scv2_core::dataset::Dataset;
use scv2_core::density::{densify_gradient, DensifyConfig, GradAccum, GradientSource};
use scv2_core::geo::{self, EvalConfig, EvalReport, Similarity};
use scv2_core::io::{read_json, read_ply_points};
use scv2_core::mesh::{TriangleMesh, TsdfVolume};
use scv2_core::raster::{render_surfels, RenderOptions};
use scv2_core::scenegen::{self, SceneSpec};
use scv2_core::train::{init_from_points, mean_psnr, TrainConfig, Trainer};
use scv2_core::{pipeline, Camera, Camera32, SceneModel32, Vec3};

// Pinned tolerances and limits.
const GRAD_REL: f64 = 1e-3;
const GRAD_ABS: f64 = 1e-6;
const GRAD_STEP: f64 = 1e-4;
const GRAD_SECS: f64 = 60.0;
const CONSERVATION_TOL: f64 = 1e-6;
const FILTER_MAX_GROWTH: f64 = 2.0;
const NOFILTER_MIN_GROWTH: f64 = 5.0;
const ELONGATION_SECS: f64 = 120.0;
const DGD_MIN_GAIN_DB: f64 = 0.3;
const DGD_SECS: f64 = 600.0;
const DEPTH_MIN_F1_GAIN: f64 = 0.01;
const TRIM_MIN_REMOVED: f64 = 0.1;
const MAX_PSNR_DROP: f64 = 0.5;
const QUANT_MAX_SIZE: f64 = 0.3;
const CONTRIBUTION_TOL: f64 = 1e-9;
const CROP_STD_RATIO: f64 = 0.25;
const CUBE_MIN_F1: f64 = 0.95;
const PIPELINE_SECS: f64 = 900.0;
const PIPELINE_MIN_F1: f64 = 0.6;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let line = format!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((id, pass, line));
    }
}

fn selected() -> BTreeSet<usize> {
    match std::env::var("SCV2_ACCEPT") {
        Ok(s) if !s.trim().is_empty() => s.split(',').map(|v| v.trim().parse().expect("SCV2_ACCEPT: criterion numbers")).collect(),
        _ => (1..=14).collect(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn scv2(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_scv2"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run scv2");
    assert!(out.status.success(), "scv2 {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Desk-scale training settings shared with the CLI defaults.
fn train_config(ds: &Dataset<f32>, seed: u64) -> TrainConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.train_config(ds.scene_extent())
}

fn train(ds: &Dataset<f32>, cfg: TrainConfig) -> SceneModel32 {
    let model = init_from_points(&ds.points.points, &ds.colors(), Vec3::zero()).unwrap();
    let mut t = Trainer::new(model, &[], ds.train_refs(), cfg).unwrap();
    t.run(|_| {}).unwrap();
    t.into_model()
}

// --- 1 ----------------------------------------------------------------------

fn gradient_correctness(r: &mut Report) {
    let t = Instant::now();
    let opts = RenderOptions::exact();
    let (mut checked, mut bad, mut worst) = (0, 0, 0.0f64);
    for s in 0..50u64 {
        let (model, cam) = oracles::random_scene(1000 + s, 1 + (s as usize % 20), 32);
        let loss = oracles::LinearLoss::random(s, &model, &cam, &opts);
        let analytic = loss.analytic(&model, &cam, &opts);
        let (c, b) = oracles::finite_difference_check(&model.surfels, &analytic, GRAD_STEP, GRAD_REL, GRAD_ABS, |x| {
            loss.value(x, model.background, &cam, &opts)
        });
        checked += c;
        bad += b.len();
        for m in &b {
            worst = worst.max((m.analytic - m.numeric).abs() / m.numeric.abs().max(GRAD_ABS));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    r.record(
        1,
        "gradient correctness",
        bad == 0 && secs < GRAD_SECS,
        format!("50 scenes, {bad} of {checked} gradients outside {GRAD_REL} rel (worst rel err {worst:.2e}), {secs:.1}s (limit {GRAD_SECS}s)"),
    );
}

// --- 2 ----------------------------------------------------------------------

fn compositing_conservation(r: &mut Report) {
    let opts = RenderOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut n, mut worst) = (0, 0.0f64);
    for s in 0..10 {
        let (model, cam) = oracles::random_scene(2000 + s, 20, 32);
        let out = render_surfels(&model.surfels, model.background, &cam, &opts).unwrap();
        for _ in 0..1000 {
            let (x, y) = (rng.gen_range(0..32), rng.gen_range(0..32));
            let e = (out.alpha.get(x, y, 0) + out.final_transmittance.get(x, y, 0) - 1.0).abs();
            worst = worst.max(e);
            n += 1;
        }
    }
    r.record(
        2,
        "compositing conservation",
        worst <= CONSERVATION_TOL,
        format!("{n} pixels, max |sum(alpha*T) + T_final - 1| = {worst:.2e} (tol {CONSERVATION_TOL:.0e})"),
    );
}

// --- 3 ----------------------------------------------------------------------

fn rescale_unit_suite(r: &mut Report) {
    let mut failures = Vec::new();
    let omega = DensifyConfig::default().omega;
    if omega != 0.9 {
        failures.push(format!("default omega {omega}"));
    }
    let acc = |total: [f64; 3], aux: [f64; 3], count: [u32; 3]| GradAccum {
        total: total.to_vec(),
        aux: aux.to_vec(),
        count: count.to_vec(),
        direction: vec![Vec3::zero(); 3],
    };
    // Scaling: means total (4, 4, -), aux (1, 0.5, -); the unseen third
    // surfel stays out of the averages.
    let a = acc([4.0, 8.0, 100.0], [1.0, 1.0, 100.0], [1, 2, 0]);
    let (norms, f) = densify_gradient(&a, 0.9, GradientSource::SsimOnly);
    let expect = 0.9 * 4.0 / 0.75;
    if f != expect || norms != vec![expect, 0.5 * expect, 0.0] {
        failures.push(format!("scaling: factor {f}, norms {norms:?}"));
    }
    // Clamp at 1 once the auxiliary channel dominates.
    let b = acc([1.0, 1.0, 0.0], [4.0, 2.0, 0.0], [1, 1, 0]);
    let (norms, f) = densify_gradient(&b, 0.9, GradientSource::SsimOnly);
    if f != 1.0 || norms != vec![4.0, 2.0, 0.0] {
        failures.push(format!("clamp: factor {f}, norms {norms:?}"));
    }
    // TOTAL ignores the auxiliary channel.
    let (norms, f) = densify_gradient(&a, 0.9, GradientSource::Total);
    if f != 1.0 || norms != vec![4.0, 4.0, 0.0] {
        failures.push(format!("total: factor {f}, norms {norms:?}"));
    }
    // Every rescaled source goes through the same arithmetic.
    for src in [GradientSource::RgbOnly, GradientSource::SsimPlusDepth] {
        if densify_gradient(&a, 0.9, src) != densify_gradient(&a, 0.9, GradientSource::SsimOnly) {
            failures.push(format!("{} differs from SSIM_ONLY", src.name()));
        }
    }
    r.record(
        3,
        "gradient rescale unit suite",
        failures.is_empty(),
        if failures.is_empty() {
            "clamp, omega=0.9 scaling and TOTAL reduction exact".into()
        } else {
            failures.join("; ")
        },
    );
}

// --- 4 and 13: small town ---------------------------------------------------

fn small_spec() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        cameras: 12,
        test_every: 4,
        init_points: 1500,
        gt_points: 10_000,
        ..SceneSpec::default()
    }
}

fn short_pretrain(ds: &Dataset<f32>, iters: u64) -> SceneModel32 {
    let mut cfg = train_config(ds, 7);
    cfg.iterations = iters;
    cfg.loss.total_iters = iters;
    cfg.loss.normal_from_iter = iters / 3;
    cfg.densify.start_iter = iters / 3;
    cfg.densify.end_iter = 2 * iters / 3;
    cfg.densify.interval = iters / 6;
    train(ds, cfg)
}

fn elongation_filter(r: &mut Report, ds: &Dataset<f32>) {
    let t = Instant::now();
    let pre = short_pretrain(ds, 1000);
    // Most of the scene degenerates into needles; block 0 is tuned through
    // ten densification rounds at the tuning cadence.
    let adv = scenegen::make_adversarial_elongated(&pre, 0.9, 1).unwrap();
    let fg = pipeline::default_foreground(&adv).unwrap();
    let mut part = pipeline::partition(&adv, [2, 2], &fg).unwrap();
    pipeline::assign_views(&adv, &mut part, &ds.cameras(), 0.05, &RenderOptions::default()).unwrap();
    let n0 = part.blocks[0].len();
    let base = train_config(ds, 7);
    let run = |filter: bool| {
        let mut tc = pipeline::tuning_config(&base, 1000, 0.1);
        tc.trim = None;
        tc.densify.start_iter = 100;
        tc.densify.interval = 100;
        tc.densify.end_iter = 1000;
        tc.elongation_filter = filter;
        tc.max_surfels = 5 * n0;
        let mut last = n0;
        let res = pipeline::tune_block(&adv, &part, 0, &ds.train, &tc, |s| {
            if s.densify_factor.is_some() {
                last = s.count;
            }
        });
        match res {
            Ok(v) => (v.len() as f64 / n0 as f64, false, format!("{n0} -> {}", v.len())),
            Err(scv2_core::Error::CountExplosion { count, round, .. }) => {
                (count as f64 / n0 as f64, true, format!("{n0} -> {count} (cap hit in round {round}, last ok {last})"))
            }
            Err(e) => panic!("tuning failed: {e}"),
        }
    };
    let (g_on, cap_on, d_on) = run(true);
    let (g_off, cap_off, d_off) = run(false);
    let secs = t.elapsed().as_secs_f64();
    r.record(
        4,
        "elongation filter regression",
        g_on < FILTER_MAX_GROWTH && !cap_on && g_off > NOFILTER_MIN_GROWTH && cap_off && secs < ELONGATION_SECS,
        format!("with filter {g_on:.2}x ({d_on}), without {g_off:.2}x ({d_off}), {secs:.1}s (limit {ELONGATION_SECS}s)"),
    );
}

fn parallel_determinism(r: &mut Report, ds: &Dataset<f32>, small_cfg: &Path, tmp: &Path) {
    let pre = short_pretrain(ds, 300);
    let fg = pipeline::default_foreground(&pre).unwrap();
    let mut part = pipeline::partition(&pre, [2, 2], &fg).unwrap();
    pipeline::assign_views(&pre, &mut part, &ds.cameras(), 0.05, &RenderOptions::default()).unwrap();
    let tc = pipeline::tuning_config(&train_config(ds, 7), 100, 0.1);
    let seq = encode_model(&pipeline::tune_all(&pre, &part, &ds.train, &tc, 1).unwrap());
    let par = encode_model(&pipeline::tune_all(&pre, &part, &ds.train, &tc, 4).unwrap());
    let merged_same = seq == par;

    let cfg = small_cfg.to_str().unwrap();
    let mut files = Vec::new();
    for threads in ["1", "8"] {
        let work = tmp.join(format!("threads{threads}"));
        scv2(&["--config", cfg, "--threads", threads, "--work", work.to_str().unwrap(), "pipeline"]);
        files.push(
            ["metrics.csv", "merged.scv2", "quantized.scv2", "mesh.ply", "report.json"]
                .map(|f| fs::read(work.join(f)).unwrap()),
        );
    }
    let diff: Vec<&str> = ["metrics.csv", "merged.scv2", "quantized.scv2", "mesh.ply", "report.json"]
        .iter()
        .zip(files[0].iter().zip(&files[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| *n)
        .collect();
    r.record(
        13,
        "parallel determinism",
        merged_same && diff.is_empty(),
        format!(
            "merged checkpoint 1 vs 4 workers {} ({} bytes); --threads 1 vs 8: {}",
            if merged_same { "bit-identical" } else { "DIFFERS" },
            seq.len(),
            if diff.is_empty() { "metrics.csv and all artifacts identical".to_string() } else { format!("differs in {diff:?}") }
        ),
    );
}

// --- town -------------------------------------------------------------------

struct Town {
    work: PathBuf,
    data: PathBuf,
    secs: f64,
}

fn metric_rows(work: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(work.join(stages::METRICS))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn last_row(rows: &[Vec<String>], stage: &str) -> (f64, usize) {
    let r = rows.iter().rev().find(|r| r[0] == stage).unwrap_or_else(|| panic!("no {stage} row"));
    (r[2].parse().unwrap(), r[5].parse().unwrap())
}

fn town_pipeline(r: &mut Report, tmp: &Path, report_it: bool) -> Town {
    let work = tmp.join("town");
    let t = Instant::now();
    scv2(&["--threads", "4", "--work", work.to_str().unwrap(), "pipeline"]);
    let secs = t.elapsed().as_secs_f64();
    let rep: EvalReport = read_json(&work.join(stages::REPORT)).unwrap();
    if report_it {
        r.record(
            14,
            "end-to-end town pipeline",
            rep.f1 >= PIPELINE_MIN_F1 && secs < PIPELINE_SECS,
            format!(
                "F1 {:.4} (P {:.4}, R {:.4}, tau {:.4}; floor {PIPELINE_MIN_F1}), {secs:.0}s (limit {PIPELINE_SECS}s, {} core(s) available)",
                rep.f1,
                rep.precision,
                rep.recall,
                rep.tau,
                std::thread::available_parallelism().map_or(1, |n| n.get())
            ),
        );
    }
    let data = work.join("data");
    Town { work, data, secs }
}

fn trim_analog(r: &mut Report, town: &Town) {
    let rows = metric_rows(&town.work);
    let (p_merge, n_merge) = last_row(&rows, "merge");
    let (p_trim, n_trim) = last_row(&rows, "trim");
    let removed = (n_merge - n_trim) as f64 / n_merge as f64;
    let drop = p_merge - p_trim;
    r.record(
        7,
        "trim analog",
        removed >= TRIM_MIN_REMOVED && drop < MAX_PSNR_DROP,
        format!("{n_merge} -> {n_trim} surfels ({:.2}% removed), test PSNR {p_merge:.3} -> {p_trim:.3} (drop {drop:.3} dB)", 100.0 * removed),
    );
}

fn quantization_analog(r: &mut Report, town: &Town) {
    let rows = metric_rows(&town.work);
    let (p_trim, _) = last_row(&rows, "trim");
    let (p_q, _) = last_row(&rows, "quantize");
    let info: QuantInfo = read_json(&town.work.join(stages::QUANT_INFO)).unwrap();
    let drop = p_trim - p_q;
    r.record(
        8,
        "quantization analog",
        info.size_ratio <= QUANT_MAX_SIZE && drop < MAX_PSNR_DROP,
        format!(
            "size {} / {} bytes = {:.3}x raw (limit {QUANT_MAX_SIZE}x; K {} of requested {} for {} tail surfels), PSNR {p_trim:.3} -> {p_q:.3} (drop {drop:.3} dB)",
            info.quantized_bytes, info.raw_bytes, info.size_ratio, info.k, info.requested_k, info.tail
        ),
    );
}

fn dgd_convergence(r: &mut Report, town: &Town) {
    let t = Instant::now();
    let ds: Dataset<f32> = Dataset::load(&town.data).unwrap();
    let opts = RenderOptions::default();
    let mut psnr = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        for (k, src) in [GradientSource::SsimOnly, GradientSource::Total].into_iter().enumerate() {
            let mut cfg = train_config(&ds, seed);
            cfg.densify.gradient_source = src;
            let m = train(&ds, cfg);
            psnr[k].push(mean_psnr(&m, &ds.test_refs(), &opts).unwrap());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let gain = mean(&psnr[0]) - mean(&psnr[1]);
    r.record(
        5,
        "decomposed-gradient convergence",
        gain >= DGD_MIN_GAIN_DB && secs < DGD_SECS,
        format!(
            "mean test PSNR SSIM_ONLY {:.3} vs TOTAL {:.3} (gain {gain:+.3} dB, need {DGD_MIN_GAIN_DB}); per seed {:?} vs {:?}; {secs:.0}s (limit {DGD_SECS}s)",
            mean(&psnr[0]),
            mean(&psnr[1]),
            psnr[0].iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
            psnr[1].iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
        ),
    );
}

fn depth_prior_benefit(r: &mut Report, town: &Town) {
    let mut ds: Dataset<f32> = Dataset::load(&town.data).unwrap();
    // 20 % view sparsity: every fifth training view is dropped.
    let before = ds.train.len();
    ds.train = ds.train.into_iter().enumerate().filter(|(i, _)| i % 5 != 4).map(|(_, v)| v).collect();
    let gt = read_ply_points(&town.data.join("gt_points.ply")).unwrap().points;
    let all: Vec<&Camera32> = ds.train.iter().chain(&ds.test).map(|v| &v.camera).collect();
    let ctx = Ctx::new(RunConfig::default(), town.work.join("depth_ablation"), town.data.clone(), false).unwrap();
    let mut f1 = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        for (k, depth) in [true, false].into_iter().enumerate() {
            let mut cfg = train_config(&ds, seed);
            cfg.loss.depth_enabled = depth;
            let m = train(&ds, cfg);
            let mesh = stages::mesh_model(&ctx, &m, &ds.cameras()).unwrap();
            let rep = geo::evaluate(&mesh, &gt, &all, &Similarity::default(), &EvalConfig { seed, ..EvalConfig::default() }, &ctx.opts).unwrap();
            f1[k].push(rep.f1);
        }
    }
    let gain = mean(&f1[0]) - mean(&f1[1]);
    r.record(
        6,
        "depth-prior benefit",
        gain >= DEPTH_MIN_F1_GAIN,
        format!(
            "{} of {before} training views, mean F1 with depth {:.4} vs without {:.4} (gain {gain:+.4}, need {DEPTH_MIN_F1_GAIN}); per seed {:?} vs {:?}",
            ds.train.len(),
            mean(&f1[0]),
            mean(&f1[1]),
            f1[0].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            f1[1].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
        ),
    );
}

fn crop_stability(r: &mut Report, town: &Town) {
    let gt = read_ply_points(&town.data.join("gt_points.ply")).unwrap().points;
    let ds: Dataset<f32> = Dataset::load(&town.data).unwrap();
    let all: Vec<&Camera32> = ds.train.iter().chain(&ds.test).map(|v| &v.camera).collect();
    let cfg = EvalConfig::default();
    let vol = geo::estimate_crop_volume(&gt, &all, &Similarity::default(), &cfg.crop_cfg, &RenderOptions::default()).unwrap();
    let spec = SceneSpec::default();
    let h = spec.ground_half;
    let zmax = gt.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(11 + seed);
        // Faithful interior: jittered gt.
        let mut recon: Vec<Vec3<f64>> = gt
            .iter()
            .map(|p| *p + Vec3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)))
            .collect();
        // Boundary noise: a seed-dependent amount of extrapolated ground
        // beyond the captured area and floaters above it.
        let junk = (rng.gen_range(0.0..0.6) * gt.len() as f64) as usize;
        while recon.len() < gt.len() + junk {
            let x = rng.gen_range(-h - 2.5..h + 2.5);
            let y = rng.gen_range(-h - 2.5..h + 2.5);
            if rng.gen_bool(0.5) {
                if x.abs().max(y.abs()) > h + 0.3 {
                    recon.push(Vec3::new(x, y, rng.gen_range(-0.05..0.05)));
                }
            } else {
                recon.push(Vec3::new(x, y, zmax + rng.gen_range(0.5..2.0)));
            }
        }
        with.push(geo::score_clouds(&recon, &gt, Some(&vol), &cfg).unwrap().f1);
        without.push(geo::score_clouds(&recon, &gt, None, &cfg).unwrap().f1);
    }
    let (sw, so) = (std_dev(&with), std_dev(&without));
    r.record(
        11,
        "crop-volume stability",
        sw <= CROP_STD_RATIO * so,
        format!("5 seeds, std(F1) with crop {sw:.4} vs without {so:.4} (ratio {:.3}, limit {CROP_STD_RATIO}); mean {:.3} vs {:.3}", sw / so, mean(&with), mean(&without)),
    );
}

// --- 9, 10, 12 --------------------------------------------------------------

fn contribution_oracle(r: &mut Report) {
    let opts = RenderOptions {
        extent_sigma: 40.0,
        min_transmittance: 0.0,
        ..RenderOptions::default()
    };
    let (mut n, mut worst) = (0, 0.0f64);
    for s in 0..20u64 {
        let (model, cam) = oracles::random_scene(3000 + s, 1 + (s as usize % 10), 16);
        let fast = single_view_contribution(&model.surfels, &cam, &opts, DEFAULT_GAMMA).unwrap();
        let slow = oracles::brute_force_contribution(&model.surfels, &cam, DEFAULT_GAMMA, opts.contribution_cutoff);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
            n += 1;
        }
    }
    r.record(
        9,
        "contribution oracle",
        worst <= CONTRIBUTION_TOL,
        format!("20 scenes, {n} surfels, max |fast - direct| = {worst:.2e} (tol {CONTRIBUTION_TOL:.0e})"),
    );
}

fn f1_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt: Vec<Vec3<f64>> = (0..2000).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    let recon: Vec<Vec3<f64>> = (0..2000)
        .map(|i| if i % 5 == 0 { Vec3::new(rng.gen_range(1.0..2.0), rng.gen(), rng.gen()) } else { gt[i] + Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0) })
        .collect();
    let mut mismatches = Vec::new();
    for tau in [0.01, 0.03, 0.05, 0.1] {
        let fast = geo::f1_score(&recon, &gt, tau, false).unwrap();
        let slow = geo::f1_score(&recon, &gt, tau, true).unwrap();
        let (p, rc) = oracles::exhaustive_precision_recall(&recon, &gt, tau);
        if fast.precision != slow.precision || fast.recall != slow.recall || fast.f1 != slow.f1 || fast.precision != p || fast.recall != rc {
            mismatches.push(format!("tau {tau}: kd ({}, {}) exhaustive ({p}, {rc})", fast.precision, fast.recall));
        }
    }
    let ident = geo::f1_score(&gt, &gt, 0.01, false).unwrap().f1;
    r.record(
        10,
        "F1 oracle",
        mismatches.is_empty() && ident == 1.0,
        if mismatches.is_empty() {
            format!("2k-point clouds, kd-tree equals exhaustive exactly at 4 thresholds; identity F1 = {ident}")
        } else {
            format!("{}; identity F1 = {ident}", mismatches.join("; "))
        },
    );
}

/// Exact z-depth of an axis-aligned box along every pixel ray.
fn box_depth(cam: &Camera<f64>, lo: Vec3<f64>, hi: Vec3<f64>) -> scv2_core::image::Image<f64> {
    let mut img = scv2_core::image::Image::filled(cam.width, cam.height, 1, f64::INFINITY);
    let rt = cam.rotation.transpose();
    let o = cam.center();
    for y in 0..cam.height {
        for x in 0..cam.width {
            // Camera-space direction has unit z, so the ray parameter is the depth.
            let d = rt.mul_vec(cam.ray_dir(x as f64 + 0.5, y as f64 + 0.5));
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        t1 = -1.0;
                    }
                    continue;
                }
                let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            if t1 >= t0 && t0 > 0.0 {
                img.set(x, y, 0, t0);
            }
        }
    }
    img
}

fn cube_surface_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3<f64>> {
    (0..n)
        .map(|_| {
            let face = rng.gen_range(0..6);
            let (u, v) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let s = if face % 2 == 0 { -0.5 } else { 0.5 };
            match face / 2 {
                0 => Vec3::new(s, u, v),
                1 => Vec3::new(u, s, v),
                _ => Vec3::new(u, v, s),
            }
        })
        .collect()
}

fn tsdf_meshing(r: &mut Report) {
    let (lo, hi) = (Vec3::splat(-0.5), Vec3::splat(0.5));
    let voxel = 0.02;
    let mut vol = TsdfVolume::new(Vec3::splat(-1.0), Vec3::splat(1.0), voxel, 4.0 * voxel).unwrap();
    let mut n_cams = 0;
    for x in [-1.0, 0.0, 1.0] {
        for y in [-1.0, 0.0, 1.0] {
            for z in [-1.0, 0.0, 1.0] {
                let dir = Vec3::new(x, y, z);
                if dir.norm() == 0.0 {
                    continue;
                }
                let eye = dir.normalized() * 3.0;
                let up = if x == 0.0 && y == 0.0 { Vec3::new(0.0, 1.0, 0.0) } else { Vec3::new(0.0, 0.0, 1.0) };
                let cam = Camera::look_at(n_cams, eye, Vec3::zero(), up, 0.8, 96, 96).unwrap();
                vol.integrate(&box_depth(&cam, lo, hi), &cam, 100.0).unwrap();
                n_cams += 1;
            }
        }
    }
    let mesh = vol.extract_mesh();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples = geo::sample_surface(&mesh, 20_000, 12).unwrap();
    let gt = cube_surface_points(20_000, &mut rng);
    let cube = geo::f1_score(&samples, &gt, 2.0 * voxel, false).unwrap();

    let mut sphere = TsdfVolume::new(Vec3::splat(-1.0), Vec3::splat(1.0), 0.05, 0.2).unwrap();
    sphere.fill_sdf(|p| p.norm() - 0.7);
    let sm: TriangleMesh = sphere.extract_mesh();
    let chi = sm.euler_characteristic();
    r.record(
        12,
        "TSDF meshing",
        cube.f1 >= CUBE_MIN_F1 && chi == 2,
        format!(
            "unit cube from {n_cams} analytic depth maps: F1 {:.4} (P {:.4}, R {:.4}) at tau {:.2} (need {CUBE_MIN_F1}); sphere Euler characteristic {chi}",
            cube.f1,
            cube.precision,
            cube.recall,
            2.0 * voxel
        ),
    );
}

fn main() {
    let which = selected();
    let tmp = tempfile::tempdir().unwrap();
    let mut r = Report { lines: Vec::new() };
    let t = Instant::now();

    if which.contains(&1) {
        gradient_correctness(&mut r);
    }
    if which.contains(&2) {
        compositing_conservation(&mut r);
    }
    if which.contains(&3) {
        rescale_unit_suite(&mut r);
    }
    if which.contains(&9) {
        contribution_oracle(&mut r);
    }
    if which.contains(&10) {
        f1_oracle(&mut r);
    }
    if which.contains(&12) {
        tsdf_meshing(&mut r);
    }
    if which.contains(&4) || which.contains(&13) {
        let data = tmp.path().join("small");
        let spec = small_spec();
        scenegen::generate(&spec, &data).unwrap();
        let ds: Dataset<f32> = Dataset::load(&data).unwrap();
        if which.contains(&4) {
            elongation_filter(&mut r, &ds);
        }
        if which.contains(&13) {
            let cfg_path = tmp.path().join("small.cfg");
            let mut cfg = RunConfig::default();
            cfg.scene = spec;
            cfg.train.iterations = 200;
            cfg.train.log_every = 100;
            cfg.loss.total_iters = 200;
            cfg.loss.normal_from_iter = 50;
            cfg.densify.start_iter = 50;
            cfg.densify.end_iter = 150;
            cfg.densify.interval = 50;
            cfg.blocks.tune_iterations = 60;
            cfg.eval.samples = 20_000;
            cfg.compress.codebook_size = 256;
            fs::write(&cfg_path, cfg.to_text()).unwrap();
            parallel_determinism(&mut r, &ds, &cfg_path, tmp.path());
        }
    }
    if [5, 6, 7, 8, 11, 14].iter().any(|c| which.contains(c)) {
        let town = town_pipeline(&mut r, tmp.path(), which.contains(&14));
        eprintln!("town pipeline finished in {:.0}s", town.secs);
        if which.contains(&7) {
            trim_analog(&mut r, &town);
        }
        if which.contains(&8) {
            quantization_analog(&mut r, &town);
        }
        if which.contains(&11) {
            crop_stability(&mut r, &town);
        }
        if which.contains(&5) {
            dgd_convergence(&mut r, &town);
        }
        if which.contains(&6) {
            depth_prior_benefit(&mut r, &town);
        }
    }

    r.lines.sort_by_key(|l| l.0);
    let passed = r.lines.iter().filter(|l| l.1).count();
    println!("\nacceptance summary ({:.0}s):", t.elapsed().as_secs_f64());
    for (_, _, line) in &r.lines {
        println!("{line}");
    }
    println!("{passed}/{} criteria passed", r.lines.len());
}
