//! One function per subcommand. Each reads its documented inputs from the
//! work or data directory, writes its artifacts, and returns metric rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scv2_core::compression::{self, QuantizeConfig};
use scv2_core::contribution::{accumulate_contribution, average_contribution, trim};
use scv2_core::dataset::Dataset;
use scv2_core::density::GradientSource;
use scv2_core::geo::{self, EvalReport, Similarity};
use scv2_core::io::{read_json, read_ply_mesh, read_ply_points, write_json, write_png, write_ply_mesh, CamerasFile};
use scv2_core::mesh::{fuse_model, TriangleMesh};
use scv2_core::objective::ssim;
use scv2_core::pipeline::{self, Aabb, BlockPartition};
use scv2_core::raster::{render_surfels, RenderOptions};
use scv2_core::scenegen;
use scv2_core::train::{init_from_points, TrainView, Trainer};
use scv2_core::{Camera32, SceneModel32, Vec3};

use crate::config::RunConfig;
use crate::metrics::{self, Row};
use crate::{CliError, CliResult};

pub const PRETRAIN: &str = "pretrain.scv2";
pub const PARTITION: &str = "partition.json";
pub const BLOCKS: &str = "blocks";
pub const MERGED: &str = "merged.scv2";
pub const TRIMMED: &str = "trimmed.scv2";
pub const QUANTIZED: &str = "quantized.scv2";
pub const QUANT_INFO: &str = "quantize.json";
pub const MESH: &str = "mesh.ply";
pub const REPORT: &str = "report.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const STAGES: &str = "stages.json";
pub const ABLATION: &str = "ablation.csv";

/// Shared state of one invocation.
pub struct Ctx {
    pub cfg: RunConfig,
    pub work: PathBuf,
    pub data: PathBuf,
    /// Record real wall times; off by default so outputs are reproducible.
    pub timing: bool,
    pub opts: RenderOptions<f32>,
}

impl Ctx {
    pub fn new(cfg: RunConfig, work: PathBuf, data: PathBuf, timing: bool) -> CliResult<Self> {
        fs::create_dir_all(&work)?;
        Ok(Self {
            cfg,
            work,
            data,
            timing,
            opts: RenderOptions::default(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    fn block_path(&self, m: usize) -> PathBuf {
        self.work.join(BLOCKS).join(format!("block_{m:02}.scv2"))
    }

    fn ms(&self, t: Instant) -> u64 {
        if self.timing {
            t.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn dataset(&self) -> CliResult<Dataset<f32>> {
        require(&self.data.join("cameras.json"), "gen")?;
        Ok(Dataset::load(&self.data)?)
    }

    fn load(&self, name: &str, producer: &str) -> CliResult<SceneModel32> {
        let p = self.path(name);
        require(&p, producer)?;
        Ok(compression::load_any(&p)?)
    }

    /// Appends rows to `metrics.csv`.
    pub fn emit(&self, rows: &[Row]) -> CliResult<()> {
        metrics::append(&self.path(METRICS), rows)
    }
}

fn require(p: &Path, producer: &str) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing artifact {}; run `scv2 {producer}` first", p.display())))
    }
}

/// Views metrics are reported on: the test split, or training views if
/// there is none.
fn eval_views(ds: &Dataset<f32>) -> Vec<&TrainView<f32>> {
    if ds.test.is_empty() {
        ds.train_refs()
    } else {
        ds.test_refs()
    }
}

/// Mean PSNR and SSIM over `views`.
pub fn view_metrics(model: &SceneModel32, views: &[&TrainView<f32>], opts: &RenderOptions<f32>) -> CliResult<(f64, f64)> {
    if views.is_empty() {
        return Err(CliError::Config("metrics need at least one view".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for v in views {
        let out = render_surfels(&model.surfels, model.background, &v.camera, opts)?;
        p += scv2_core::image::psnr(&out.color, &v.image)?;
        s += ssim(&out.color, &v.image)?;
    }
    let n = views.len() as f64;
    Ok((p / n, s / n))
}

fn quality_row(stage: &str, iter: u64, model: &SceneModel32, ds: &Dataset<f32>, opts: &RenderOptions<f32>) -> CliResult<Row> {
    let (p, s) = view_metrics(model, &eval_views(ds), opts)?;
    let mut r = Row::new(stage, iter);
    r.psnr = Some(p);
    r.ssim = Some(s);
    r.count = Some(model.len());
    Ok(r)
}

/// Contributions over every training view.
fn global_contributions(model: &SceneModel32, ds: &Dataset<f32>, gamma: f64, opts: &RenderOptions<f32>) -> CliResult<Vec<f64>> {
    let stats = accumulate_contribution(&model.surfels, &ds.cameras(), opts, gamma)?;
    Ok(average_contribution(&stats)?)
}

// --- stages ----------------------------------------------------------------

pub fn gen(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    fs::create_dir_all(&ctx.data)?;
    let scene = scenegen::generate(&ctx.cfg.scene, &ctx.data)?;
    let mut r = Row::new("gen", 0);
    r.count = Some(scene.cameras.len());
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

/// Trains from the initial cloud; `source` overrides the densification
/// gradient source.
fn train_from_points(ctx: &Ctx, ds: &Dataset<f32>, stage: &str, source: Option<GradientSource>) -> CliResult<(SceneModel32, Vec<Row>)> {
    let t = Instant::now();
    let mut tc = ctx.cfg.train_config(ds.scene_extent());
    if let Some(s) = source {
        tc.densify.gradient_source = s;
    }
    let model = init_from_points(&ds.points.points, &ds.colors(), Vec3::zero())?;
    let mut trainer = Trainer::new(model, &[], ds.train_refs(), tc)?;
    let mut rows = vec![quality_row(stage, 0, &trainer.model, ds, &ctx.opts)?];
    let every = ctx.cfg.train.log_every;
    for it in 1..=tc.iterations {
        trainer.step()?;
        if it == tc.iterations || (every > 0 && it % every == 0) {
            let mut r = quality_row(stage, it, &trainer.model, ds, &ctx.opts)?;
            r.wall_ms = ctx.ms(t);
            rows.push(r);
        }
    }
    Ok((trainer.into_model(), rows))
}

pub fn pretrain(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let ds = ctx.dataset()?;
    let (model, rows) = train_from_points(ctx, &ds, "pretrain", None)?;
    compression::save_model(&model, &ctx.path(PRETRAIN))?;
    Ok(rows)
}

pub fn partition(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    let ds = ctx.dataset()?;
    let model = ctx.load(PRETRAIN, "pretrain")?;
    let fg = match ctx.cfg.blocks.foreground {
        Some(f) => Aabb {
            min: Vec3::new(f[0], f[1], f[2]),
            max: Vec3::new(f[3], f[4], f[5]),
        },
        None => pipeline::default_foreground(&model)?,
    };
    let mut part = pipeline::partition(&model, ctx.cfg.blocks.grid, &fg)?;
    pipeline::assign_views(&model, &mut part, &ds.cameras(), ctx.cfg.blocks.epsilon, &ctx.opts)?;
    for (m, d) in part.degenerate.iter().enumerate() {
        if *d {
            log::warn!("block {m} received no views and will keep its pretrained surfels");
        }
    }
    write_json(&ctx.path(PARTITION), &part)?;
    let mut r = Row::new("partition", model.iteration);
    r.count = Some(part.len());
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

fn load_partition(ctx: &Ctx) -> CliResult<BlockPartition> {
    let p = ctx.path(PARTITION);
    require(&p, "partition")?;
    Ok(read_json(&p)?)
}

/// Tunes one block, or all of them on the bounded worker pool.
pub fn tune(ctx: &Ctx, block: Option<usize>) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    let ds = ctx.dataset()?;
    let model = ctx.load(PRETRAIN, "pretrain")?;
    let part = load_partition(ctx)?;
    let base = ctx.cfg.train_config(ds.scene_extent());
    let tc = pipeline::tuning_config(&base, ctx.cfg.blocks.tune_iterations, ctx.cfg.trim.tune_ratio);
    let which: Vec<usize> = match block {
        Some(m) if m >= part.len() => return Err(CliError::Config(format!("block {m} does not exist ({} blocks)", part.len()))),
        Some(m) => vec![m],
        None => (0..part.len()).collect(),
    };
    fs::create_dir_all(ctx.path(BLOCKS))?;
    let tuned = if block.is_none() {
        let workers = rayon::current_num_threads().min(part.len()).max(1);
        pipeline::tune_blocks(&model, &part, &ds.train, &tc, workers)?
    } else {
        let m = which[0];
        let mut c = tc;
        c.seed = pipeline::block_seed(tc.seed, m);
        let surfels = if part.views[m].is_empty() {
            part.blocks[m].iter().map(|&i| model.surfels[i]).collect()
        } else {
            pipeline::tune_block(&model, &part, m, &ds.train, &c, |_| {})?
        };
        vec![surfels]
    };
    let mut rows = Vec::new();
    for (&m, surfels) in which.iter().zip(tuned) {
        let n = surfels.len();
        let mut bm = SceneModel32::new(surfels, model.background);
        bm.iteration = model.iteration + tc.iterations;
        compression::save_model(&bm, &ctx.block_path(m))?;
        let mut r = Row::new(format!("tune/b{m}"), tc.iterations);
        r.count = Some(n);
        r.wall_ms = ctx.ms(t);
        rows.push(r);
    }
    Ok(rows)
}

pub fn merge(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    let ds = ctx.dataset()?;
    let part = load_partition(ctx)?;
    let mut tuned = Vec::with_capacity(part.len());
    let mut iteration = 0;
    let mut background = Vec3::zero();
    for m in 0..part.len() {
        let p = ctx.block_path(m);
        require(&p, "tune")?;
        let b = compression::load_model(&p)?;
        iteration = iteration.max(b.iteration);
        background = b.background;
        tuned.push(Some(b.surfels));
    }
    let merged = pipeline::merge(&part, tuned, background, iteration)?;
    compression::save_model(&merged, &ctx.path(MERGED))?;
    let mut r = quality_row("merge", merged.iteration, &merged, &ds, &ctx.opts)?;
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

pub fn trim_stage(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    let ds = ctx.dataset()?;
    let mut model = ctx.load(MERGED, "merge")?;
    let c = global_contributions(&model, &ds, ctx.cfg.trim.gamma, &ctx.opts)?;
    trim(&mut model, &c, ctx.cfg.trim.post_ratio)?;
    compression::save_model(&model, &ctx.path(TRIMMED))?;
    let mut r = quality_row("trim", model.iteration, &model, &ds, &ctx.opts)?;
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

/// Size accounting written next to the quantized checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantInfo {
    pub count: usize,
    pub head: usize,
    pub tail: usize,
    pub requested_k: usize,
    pub k: usize,
    pub raw_bytes: usize,
    pub quantized_bytes: usize,
    pub size_ratio: f64,
}

pub fn quantize(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    let ds = ctx.dataset()?;
    let model = ctx.load(TRIMMED, "trim")?;
    let c = global_contributions(&model, &ds, ctx.cfg.trim.gamma, &ctx.opts)?;
    let qc = QuantizeConfig {
        ratio: ctx.cfg.compress.ratio,
        codebook_size: ctx.cfg.compress.codebook_size,
        seed: ctx.cfg.seed,
    };
    let q = compression::quantize(&model, &c, &qc)?;
    let bytes = compression::encode_quantized(&q);
    let raw = compression::encode_model(&model).len();
    fs::write(ctx.path(QUANTIZED), &bytes)?;
    write_json(
        &ctx.path(QUANT_INFO),
        &QuantInfo {
            count: q.len(),
            head: q.head_count(),
            tail: q.tail_count(),
            requested_k: q.requested_k,
            k: q.k(),
            raw_bytes: raw,
            quantized_bytes: bytes.len(),
            size_ratio: bytes.len() as f64 / raw as f64,
        },
    )?;
    let deq = compression::dequantize(&q)?;
    let mut r = quality_row("quantize", deq.iteration, &deq, &ds, &ctx.opts)?;
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

/// Per-axis 2–98 % quantiles of the surfel centers, padded by 10 %.
pub fn robust_bounds(model: &SceneModel32) -> CliResult<(Vec3<f64>, Vec3<f64>)> {
    if model.is_empty() {
        return Err(CliError::Config("cannot mesh an empty model".into()));
    }
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        let mut v: Vec<f64> = model.surfels.iter().map(|s| s.center.cast::<f64>().to_array()[a]).collect();
        v.sort_by(f64::total_cmp);
        let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
        let (l, h) = (q(0.02), q(0.98));
        let pad = 0.1 * (h - l).max(1e-3);
        lo[a] = l - pad;
        hi[a] = h + pad;
    }
    Ok((Vec3::from_array(lo), Vec3::from_array(hi)))
}

pub fn mesh_model(ctx: &Ctx, model: &SceneModel32, cameras: &[&Camera32]) -> CliResult<TriangleMesh> {
    let (lo, hi) = match ctx.cfg.mesh.bounds {
        Some(b) => (Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5])),
        None => robust_bounds(model)?,
    };
    let vol = fuse_model(model, cameras, lo, hi, &ctx.cfg.mesh_config(), &ctx.opts)?;
    Ok(vol.extract_mesh())
}

pub fn mesh(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    let ds = ctx.dataset()?;
    let model = ctx.load(QUANTIZED, "quantize")?;
    let m = mesh_model(ctx, &model, &ds.cameras())?;
    if m.is_empty() {
        return Err(CliError::Data("TSDF fusion produced an empty mesh".into()));
    }
    write_ply_mesh(&ctx.path(MESH), &m)?;
    let mut r = Row::new("mesh", model.iteration);
    r.count = Some(m.triangles.len());
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

/// Inputs of the `eval` subcommand; `None` fields fall back to the work and
/// data directories and the run configuration.
#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub mesh: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub transform: Option<PathBuf>,
    pub tau: Option<f64>,
    pub vis_threshold: Option<usize>,
    pub alpha: Option<f64>,
    pub samples: Option<usize>,
    pub oracle: bool,
    pub no_crop: bool,
    pub report: Option<PathBuf>,
}

/// Reads 16 numbers (row-major), separated by whitespace, commas or
/// brackets.
pub fn read_transform(path: &Path) -> CliResult<Similarity> {
    let text = fs::read_to_string(path)?;
    let vals: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| CliError::Data(format!("transform {}: `{s}`: {e}", path.display()))))
        .collect::<CliResult<_>>()?;
    let arr: [f64; 16] = vals
        .try_into()
        .map_err(|v: Vec<f64>| CliError::Data(format!("transform {} has {} numbers, expected 16", path.display(), v.len())))?;
    let t = Similarity(arr);
    t.validate()?;
    Ok(t)
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> CliResult<(EvalReport, Vec<Row>)> {
    let t = Instant::now();
    let mesh_path = a.mesh.clone().unwrap_or_else(|| ctx.path(MESH));
    let gt_path = a.gt.clone().unwrap_or_else(|| ctx.data.join("gt_points.ply"));
    let cam_path = a.cameras.clone().unwrap_or_else(|| ctx.data.join("cameras.json"));
    require(&mesh_path, "mesh")?;
    require(&gt_path, "gen")?;
    require(&cam_path, "gen")?;
    let recon = read_ply_mesh(&mesh_path)?;
    if recon.is_empty() {
        return Err(CliError::Data(format!("{} has no triangles", mesh_path.display())));
    }
    let gt = read_ply_points(&gt_path)?.points;
    let cams: CamerasFile = read_json(&cam_path)?;
    let cameras: Vec<Camera32> = cams.cameras.iter().map(|c| c.camera()).collect::<Result<_, _>>()?;
    let cam_refs: Vec<&Camera32> = cameras.iter().collect();
    let transform = match &a.transform {
        Some(p) => read_transform(p)?,
        None => Similarity::default(),
    };
    let mut ec = ctx.cfg.eval;
    ec.tau = a.tau.or(ec.tau);
    if let Some(v) = a.vis_threshold {
        ec.crop_cfg.vis_threshold = v;
    }
    ec.crop_cfg.alpha = a.alpha.or(ec.crop_cfg.alpha);
    ec.samples = a.samples.unwrap_or(ec.samples);
    ec.oracle |= a.oracle;
    ec.crop &= !a.no_crop;
    ec.seed = ctx.cfg.seed;
    let report = geo::evaluate(&recon, &gt, &cam_refs, &transform, &ec, &ctx.opts)?;
    write_json(&a.report.clone().unwrap_or_else(|| ctx.path(REPORT)), &report)?;
    let mut r = Row::new("eval", 0);
    r.f1 = Some(report.f1);
    r.count = Some(report.n_recon);
    r.wall_ms = ctx.ms(t);
    Ok((report, vec![r]))
}

/// Renders every view of `split` ("train", "test" or "all") to PNG.
pub fn render(ctx: &Ctx, checkpoint: &Path, out: &Path, split: &str) -> CliResult<Vec<Row>> {
    let t = Instant::now();
    require(checkpoint, "pretrain")?;
    let model = compression::load_any(checkpoint)?;
    let ds = ctx.dataset()?;
    let views: Vec<&TrainView<f32>> = match split {
        "train" => ds.train_refs(),
        "test" => ds.test_refs(),
        "all" => ds.train.iter().chain(&ds.test).collect(),
        other => return Err(CliError::Config(format!("unknown split `{other}` (train, test, all)"))),
    };
    fs::create_dir_all(out)?;
    for v in &views {
        let o = render_surfels(&model.surfels, model.background, &v.camera, &ctx.opts)?;
        write_png(&out.join(format!("{:04}.png", v.camera.id)), &o.color)?;
    }
    let mut r = Row::new(format!("render/{split}"), model.iteration);
    if !views.is_empty() {
        let (p, s) = view_metrics(&model, &views, &ctx.opts)?;
        r.psnr = Some(p);
        r.ssim = Some(s);
    }
    r.count = Some(model.len());
    r.wall_ms = ctx.ms(t);
    Ok(vec![r])
}

pub const ABLATION_HEADER: &str = "gradient_source,ssim,rgb,norm,depth,psnr,ssim_metric,precision,recall,f1,count,wall_ms";

/// One pretraining run per gradient source, scored on rendering and mesh
/// quality; rows mirror the appendix ablation table.
pub fn ablate(ctx: &Ctx) -> CliResult<Vec<Row>> {
    let ds = ctx.dataset()?;
    let gt = read_ply_points(&ctx.data.join("gt_points.ply"))?.points;
    let all: Vec<&Camera32> = ds.train.iter().chain(&ds.test).map(|v| &v.camera).collect();
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut rows = Vec::new();
    let sources = [
        (GradientSource::SsimOnly, "SSIM_ONLY", [1, 0, 0, 0]),
        (GradientSource::Total, "TOTAL", [1, 1, 1, 1]),
        (GradientSource::RgbOnly, "RGB_ONLY", [0, 1, 0, 0]),
        (GradientSource::SsimPlusDepth, "SSIM_PLUS_DEPTH", [1, 0, 0, 1]),
    ];
    for (src, name, flags) in sources {
        let t = Instant::now();
        let stage = format!("ablate/{name}");
        let (model, _) = train_from_points(ctx, &ds, &stage, Some(src))?;
        let mut row = quality_row(&stage, model.iteration, &model, &ds, &ctx.opts)?;
        let m = mesh_model(ctx, &model, &ds.cameras())?;
        let mut ec = ctx.cfg.eval;
        ec.seed = ctx.cfg.seed;
        let rep = if m.is_empty() {
            None
        } else {
            Some(geo::evaluate(&m, &gt, &all, &Similarity::default(), &ec, &ctx.opts)?)
        };
        row.f1 = rep.as_ref().map(|r| r.f1);
        row.wall_ms = ctx.ms(t);
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{},{},{}\n",
            flags[0],
            flags[1],
            flags[2],
            flags[3],
            f(row.psnr),
            f(row.ssim),
            f(rep.as_ref().map(|r| r.precision)),
            f(rep.as_ref().map(|r| r.recall)),
            f(row.f1),
            model.len(),
            row.wall_ms
        ));
        rows.push(row);
    }
    fs::write(ctx.path(ABLATION), csv)?;
    Ok(rows)
}

// --- resumable pipeline ------------------------------------------------------

/// What the pipeline remembers about a finished stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage name, configuration and input artifacts.
    pub key: String,
    /// Hash of every output artifact.
    pub outputs: BTreeMap<String, String>,
    pub rows: Vec<Row>,
}

/// SHA-256 of a file, or of every file below a directory (sorted paths).
pub fn hash_path(p: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    hash_into(&mut h, p, p)?;
    Ok(hex::encode(h.finalize()))
}

fn hash_into(h: &mut Sha256, root: &Path, p: &Path) -> CliResult<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            hash_into(h, root, &e)?;
        }
    } else {
        let rel = p.strip_prefix(root).unwrap_or(p);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(p)?);
    }
    Ok(())
}

struct StageSpec {
    name: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn stage_key(cfg_text: &str, spec: &StageSpec) -> CliResult<String> {
    let mut h = Sha256::new();
    h.update(spec.name.as_bytes());
    h.update(cfg_text.as_bytes());
    for p in &spec.inputs {
        h.update(hash_path(p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn outputs_match(spec: &StageSpec, rec: &StageRecord) -> CliResult<bool> {
    for p in &spec.outputs {
        if !p.exists() {
            return Ok(false);
        }
        if rec.outputs.get(&p.to_string_lossy().to_string()) != Some(&hash_path(p)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Runs every stage in order, skipping those whose recorded key and output
/// hashes still match. `metrics.csv` is rewritten from the stage records so
/// resumed and fresh runs produce the same file.
pub fn run_pipeline(ctx: &Ctx) -> CliResult<EvalReport> {
    let stages_path = ctx.path(STAGES);
    let mut records: BTreeMap<String, StageRecord> = if stages_path.exists() {
        read_json(&stages_path).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let mut cfg = ctx.cfg.clone();
    cfg.threads = 0;
    let cfg_text = cfg.to_text();
    let _ = fs::remove_file(ctx.path(METRICS));

    // An externally supplied dataset (no generation record) is used as is.
    let external = ctx.data.join("cameras.json").exists() && !records.contains_key("gen");
    let d = ctx.data.clone();
    let w = |n: &str| ctx.path(n);
    let specs = vec![
        StageSpec { name: "gen", inputs: vec![], outputs: vec![d.clone()] },
        StageSpec { name: "pretrain", inputs: vec![d.clone()], outputs: vec![w(PRETRAIN)] },
        StageSpec { name: "partition", inputs: vec![d.clone(), w(PRETRAIN)], outputs: vec![w(PARTITION)] },
        StageSpec { name: "tune", inputs: vec![d.clone(), w(PRETRAIN), w(PARTITION)], outputs: vec![w(BLOCKS)] },
        StageSpec { name: "merge", inputs: vec![d.clone(), w(BLOCKS), w(PARTITION)], outputs: vec![w(MERGED)] },
        StageSpec { name: "trim", inputs: vec![d.clone(), w(MERGED)], outputs: vec![w(TRIMMED)] },
        StageSpec { name: "quantize", inputs: vec![d.clone(), w(TRIMMED)], outputs: vec![w(QUANTIZED), w(QUANT_INFO)] },
        StageSpec { name: "mesh", inputs: vec![d.clone(), w(QUANTIZED)], outputs: vec![w(MESH)] },
        StageSpec { name: "eval", inputs: vec![d.clone(), w(MESH)], outputs: vec![w(REPORT)] },
    ];
    for spec in &specs {
        if spec.name == "gen" && external {
            log::info!("using existing dataset {}", ctx.data.display());
            continue;
        }
        let key = stage_key(&cfg_text, spec)?;
        if let Some(rec) = records.get(spec.name) {
            if rec.key == key && outputs_match(spec, rec)? {
                log::info!("stage {}: up to date, skipped", spec.name);
                ctx.emit(&rec.rows)?;
                continue;
            }
        }
        log::info!("stage {}: running", spec.name);
        if spec.name == "tune" {
            let _ = fs::remove_dir_all(w(BLOCKS));
        }
        let rows = match spec.name {
            "gen" => gen(ctx)?,
            "pretrain" => pretrain(ctx)?,
            "partition" => partition(ctx)?,
            "tune" => tune(ctx, None)?,
            "merge" => merge(ctx)?,
            "trim" => trim_stage(ctx)?,
            "quantize" => quantize(ctx)?,
            "mesh" => mesh(ctx)?,
            _ => eval(ctx, &EvalArgs::default())?.1,
        };
        ctx.emit(&rows)?;
        let mut outputs = BTreeMap::new();
        for p in &spec.outputs {
            outputs.insert(p.to_string_lossy().to_string(), hash_path(p)?);
        }
        records.insert(spec.name.to_owned(), StageRecord { key, outputs, rows });
        write_json(&stages_path, &records)?;
    }
    let report: EvalReport = read_json(&ctx.path(REPORT))?;
    let summary = Summary {
        stages: records.iter().map(|(k, r)| (k.clone(), r.rows.last().cloned().unwrap_or_default())).collect(),
        quantize: read_json(&ctx.path(QUANT_INFO))?,
        eval: report.clone(),
    };
    write_json(&ctx.path(SUMMARY), &summary)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    /// Last metric row of every stage.
    pub stages: BTreeMap<String, Row>,
    pub quantize: QuantInfo,
    pub eval: EvalReport,
}
