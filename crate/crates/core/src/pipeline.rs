//! Pretraining, contraction-based block partition, view assignment,
//! per-block tuning against frozen context, and merge.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{contract, Result};
use crate::math::Vec3;
use crate::objective::ssim;
use crate::raster::{render_surfels, RenderOptions};
use crate::scalar::Real;
use crate::splat::{Camera, SceneModel, Surfel};
use crate::train::{init_from_points, StepStats, TrainConfig, TrainView, Trainer, TrimSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

impl Aabb {
    pub fn of_points(points: impl IntoIterator<Item = Vec3<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = lo.min_elem(p);
            hi = hi.max_elem(p);
        }
        Some(Self { min: lo, max: hi })
    }

    pub fn center(&self) -> Vec3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn half(&self) -> Vec3<f64> {
        (self.max - self.min) * 0.5
    }
}

/// Default foreground: the central third (per ground axis) of the surfel
/// centers' bounding box; the full height range.
pub fn default_foreground<T: Real>(model: &SceneModel<T>) -> Result<Aabb> {
    let Some(b) = Aabb::of_points(model.surfels.iter().map(|s| s.center.cast())) else {
        return contract("cannot derive a foreground box from an empty model");
    };
    let (c, h) = (b.center(), b.half());
    let half = Vec3::new(h.x / 3.0, h.y / 3.0, h.z).max_elem(Vec3::splat(1e-6));
    Ok(Aabb {
        min: c - half,
        max: c + half,
    })
}

/// Maps the foreground box linearly onto [−1,1]³ and squeezes everything
/// outside per axis by `m ↦ sign(m)(2 − 1/|m|)`.
pub fn contract_point(p: Vec3<f64>, fg: &Aabb) -> Vec3<f64> {
    let (p, c, h) = (p.to_array(), fg.center().to_array(), fg.half().to_array());
    Vec3::from_array(std::array::from_fn(|a| {
        let m = (p[a] - c[a]) / h[a];
        if m.abs() <= 1.0 {
            m
        } else {
            m.signum() * (2.0 - 1.0 / m.abs())
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub grid: [usize; 2],
    pub foreground: Aabb,
    /// Surfel indices per block, ascending.
    pub blocks: Vec<Vec<usize>>,
    /// Assigned view ids per block.
    pub views: Vec<Vec<u32>>,
    /// Blocks left without any view.
    pub degenerate: Vec<bool>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Block index (row-major over `grid`) of a contracted ground position.
pub fn block_of(c: Vec3<f64>, grid: [usize; 2]) -> usize {
    let bin = |v: f64, n: usize| (((v + 2.0) / 4.0 * n as f64).floor().max(0.0) as usize).min(n - 1);
    bin(c.y, grid[1]) * grid[0] + bin(c.x, grid[0])
}

pub fn partition<T: Real>(model: &SceneModel<T>, grid: [usize; 2], fg: &Aabb) -> Result<BlockPartition> {
    if grid[0] < 1 || grid[1] < 1 {
        return contract(format!("grid dims must be ≥ 1×1, got {}×{}", grid[0], grid[1]));
    }
    let (lo, hi) = (fg.min.to_array(), fg.max.to_array());
    if (0..3).any(|a| !(hi[a] > lo[a])) {
        return contract("foreground box is degenerate");
    }
    let n = grid[0] * grid[1];
    let mut blocks = vec![Vec::new(); n];
    for (i, s) in model.surfels.iter().enumerate() {
        blocks[block_of(contract_point(s.center.cast(), fg), grid)].push(i);
    }
    Ok(BlockPartition {
        grid,
        foreground: *fg,
        blocks,
        views: vec![Vec::new(); n],
        degenerate: vec![true; n],
    })
}

fn without_block<T: Real>(model: &SceneModel<T>, block: &[usize]) -> Vec<Surfel<T>> {
    let mut drop = vec![false; model.len()];
    for &i in block {
        drop[i] = true;
    }
    model.surfels.iter().zip(&drop).filter(|(_, d)| !**d).map(|(s, _)| *s).collect()
}

/// SSIM between the full render and the render without each block, per
/// `(view, block)`; empty blocks score exactly 1.
pub fn removal_ssim<T: Real>(model: &SceneModel<T>, part: &BlockPartition, cameras: &[&Camera<T>], opts: &RenderOptions<T>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let full = render_surfels(&model.surfels, model.background, cam, opts)?.color;
        let mut row = Vec::with_capacity(part.len());
        for b in &part.blocks {
            if b.is_empty() {
                row.push(1.0);
                continue;
            }
            let rest = without_block(model, b);
            let r = render_surfels(&rest, model.background, cam, opts)?.color;
            row.push(ssim(&full, &r)?);
        }
        out.push(row);
    }
    Ok(out)
}

/// View k goes to block m iff removing m drops SSIM below 1 − ε. Views that
/// land nowhere go to the block whose removal changes them most.
pub fn assign_views<T: Real>(
    model: &SceneModel<T>,
    part: &mut BlockPartition,
    cameras: &[&Camera<T>],
    epsilon: f64,
    opts: &RenderOptions<T>,
) -> Result<()> {
    if cameras.is_empty() {
        return contract("view assignment needs at least one camera");
    }
    let scores = removal_ssim(model, part, cameras, opts)?;
    assign_from_scores(part, cameras, &scores, epsilon);
    Ok(())
}

pub fn assign_from_scores<T: Real>(part: &mut BlockPartition, cameras: &[&Camera<T>], scores: &[Vec<f64>], epsilon: f64) {
    for v in &mut part.views {
        v.clear();
    }
    for (cam, row) in cameras.iter().zip(scores) {
        let mut any = false;
        for (m, &s) in row.iter().enumerate() {
            if s < 1.0 - epsilon {
                part.views[m].push(cam.id);
                any = true;
            }
        }
        if !any {
            let m = (0..row.len()).min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b))).expect("≥ 1 block");
            part.views[m].push(cam.id);
        }
    }
    for (d, v) in part.degenerate.iter_mut().zip(&part.views) {
        *d = v.is_empty();
    }
}

/// Tuning configuration derived from a pretraining one: reduced position and
/// scale rates, normal loss from the start, densification early in the run
/// and trimming at the start and halfway.
pub fn tuning_config(base: &TrainConfig, iterations: u64, trim_ratio: f64) -> TrainConfig {
    let mut cfg = *base;
    cfg.iterations = iterations;
    cfg.lr = base.lr.tuning();
    cfg.loss.normal_from_iter = 0;
    cfg.loss.total_iters = iterations;
    cfg.densify.start_iter = (iterations / 5).max(1);
    cfg.densify.end_iter = iterations * 3 / 5;
    cfg.densify.interval = (iterations / 5).max(1);
    cfg.densify.opacity_reset_interval = u64::MAX;
    cfg.trim = (trim_ratio > 0.0).then_some(TrimSchedule {
        ratio: trim_ratio,
        at_start: true,
        every: (iterations / 2).max(1),
    });
    cfg
}

/// Tunes one block's surfels, rendering against the rest of `model` frozen.
/// Returns only the block's (possibly densified or trimmed) surfels.
pub fn tune_block<T: Real>(
    model: &SceneModel<T>,
    part: &BlockPartition,
    block: usize,
    views: &[TrainView<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Vec<Surfel<T>>> {
    let Some(ids) = part.blocks.get(block) else {
        return contract(format!("block {block} does not exist"));
    };
    if ids.is_empty() || cfg.iterations == 0 {
        return Ok(ids.iter().map(|&i| model.surfels[i]).collect());
    }
    let assigned: Vec<&TrainView<T>> = views.iter().filter(|v| part.views[block].contains(&v.camera.id)).collect();
    if assigned.is_empty() {
        return contract(format!("block {block} has no assigned views"));
    }
    let context = without_block(model, ids);
    let mine = SceneModel {
        surfels: ids.iter().map(|&i| model.surfels[i]).collect(),
        background: model.background,
        iteration: model.iteration,
    };
    let mut t = Trainer::new(mine, &context, assigned, *cfg)?;
    t.run(&mut on_step)?;
    Ok(t.into_model().surfels)
}

/// Concatenates tuned blocks in block order.
pub fn merge<T: Real>(part: &BlockPartition, tuned: Vec<Option<Vec<Surfel<T>>>>, background: Vec3<T>, iteration: u64) -> Result<SceneModel<T>> {
    if tuned.len() != part.len() {
        return contract(format!("{} tuned blocks for a {}-block partition", tuned.len(), part.len()));
    }
    let mut surfels = Vec::new();
    for (m, b) in tuned.into_iter().enumerate() {
        match b {
            Some(b) => surfels.extend(b),
            None => return contract(format!("block {m} is missing")),
        }
    }
    if surfels.is_empty() {
        return contract("merged model is empty");
    }
    let mut out = SceneModel::new(surfels, background);
    out.advance_to(iteration);
    Ok(out)
}

/// Per-block seeds derived from the run seed.
pub fn block_seed(seed: u64, block: usize) -> u64 {
    seed ^ (block as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f)
}

/// Tunes every block on `workers` threads (1 = sequential); returns the
/// tuned surfels per block. Degenerate blocks keep their pretrained surfels.
pub fn tune_blocks<T: Real>(
    model: &SceneModel<T>,
    part: &BlockPartition,
    views: &[TrainView<T>],
    cfg: &TrainConfig,
    workers: usize,
) -> Result<Vec<Vec<Surfel<T>>>> {
    let run = |m: usize| -> Result<Vec<Surfel<T>>> {
        let mut c = *cfg;
        c.seed = block_seed(cfg.seed, m);
        if part.views[m].is_empty() {
            return Ok(part.blocks[m].iter().map(|&i| model.surfels[i]).collect());
        }
        tune_block(model, part, m, views, &c, |_| {})
    };
    if workers <= 1 {
        return (0..part.len()).map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::error::Error::Contract(format!("cannot build worker pool: {e}")))?;
    pool.install(|| (0..part.len()).into_par_iter().map(run).collect())
}

/// [`tune_blocks`] followed by [`merge`].
pub fn tune_all<T: Real>(
    model: &SceneModel<T>,
    part: &BlockPartition,
    views: &[TrainView<T>],
    cfg: &TrainConfig,
    workers: usize,
) -> Result<SceneModel<T>> {
    let tuned = tune_blocks(model, part, views, cfg, workers)?;
    merge(part, tuned.into_iter().map(Some).collect(), model.background, model.iteration + cfg.iterations)
}

/// Initializes from the dataset's points and trains on all training views.
pub fn pretrain<T: Real>(ds: &Dataset<T>, cfg: &TrainConfig, on_step: impl FnMut(&StepStats)) -> Result<SceneModel<T>> {
    let model = init_from_points(&ds.points.points, &ds.colors(), Vec3::zero())?;
    let mut t = Trainer::new(model, &[], ds.train_refs(), *cfg)?;
    t.run(on_step)?;
    Ok(t.into_model())
}
