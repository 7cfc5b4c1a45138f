//! Geometric evaluation: downsampling, crop-volume estimation, surface
//! sampling, cropping and precision/recall/F1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math::{Mat3, Vec3};
use crate::mesh::TriangleMesh;
use crate::raster::{render_visibility, RenderOptions};
use crate::scalar::Real;
use crate::spatial::KdTree;
use crate::splat::Camera;

/// One representative per occupied voxel: the centroid of its members.
/// Output is ordered by voxel key and independent of input order.
pub fn voxel_downsample(points: &[Vec3<f64>], voxel: f64) -> Result<Vec<Vec3<f64>>> {
    if !(voxel > 0.0) {
        return contract(format!("voxel size must be positive, got {voxel}"));
    }
    let mut keyed: Vec<([i64; 3], Vec3<f64>)> = points
        .iter()
        .map(|p| ([(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64], *p))
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.x.total_cmp(&b.1.x))
            .then(a.1.y.total_cmp(&b.1.y))
            .then(a.1.z.total_cmp(&b.1.z))
    });
    let mut out = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let mut j = i;
        let mut sum = Vec3::zero();
        while j < keyed.len() && keyed[j].0 == keyed[i].0 {
            sum += keyed[j].1;
            j += 1;
        }
        out.push(sum * (1.0 / (j - i) as f64));
        i = j;
    }
    Ok(out)
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_distance(points: &[Vec3<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let tree = KdTree::new(points);
    let mut d: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| tree.knn(points[i], 1, Some(i))[0].1.sqrt())
        .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*m)
}

/// A 4×4 similarity transform `x ↦ s·R·x + t`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity(pub [f64; 16]);

impl Default for Similarity {
    fn default() -> Self {
        let mut m = [0.0; 16];
        for i in 0..4 {
            m[i * 5] = 1.0;
        }
        Self(m)
    }
}

impl Similarity {
    fn linear(&self) -> Mat3<f64> {
        let m = &self.0;
        Mat3 {
            m: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
        }
    }

    /// The uniform scale, or an error if the matrix is not a proper
    /// similarity with an affine last row.
    pub fn validate(&self) -> Result<f64> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return contract("transform has non-finite entries");
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return contract("transform's last row must be (0, 0, 0, 1)");
        }
        let a = self.linear();
        let det = a.determinant();
        if !(det > 1e-12) {
            return contract(format!("transform is singular or reflecting (det {det})"));
        }
        let s = det.cbrt();
        let ata = a.transpose().mul_mat(&a);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { s * s } else { 0.0 };
                if (ata.m[i][j] - want).abs() > 1e-6 * s * s {
                    return contract("transform is not a similarity (non-uniform scale or shear)");
                }
            }
        }
        Ok(s)
    }

    #[inline]
    pub fn apply(&self, p: Vec3<f64>) -> Vec3<f64> {
        let m = &self.0;
        self.linear().mul_vec(p) + Vec3::new(m[3], m[7], m[11])
    }
}

/// Applies a similarity transform to every point.
pub fn align(points: &[Vec3<f64>], t: &Similarity) -> Result<Vec<Vec3<f64>>> {
    t.validate()?;
    Ok(points.iter().map(|p| t.apply(*p)).collect())
}

/// Ground-plane alpha shape (as its triangles) times a height interval, in the
/// frame given by `transform`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropVolume {
    pub transform: Similarity,
    pub triangles: Vec<[[f64; 2]; 3]>,
    pub z_min: f64,
    pub z_max: f64,
    pub alpha: f64,
    #[serde(skip)]
    grid: Option<TriGrid>,
}

#[derive(Clone, Debug, PartialEq)]
struct TriGrid {
    lo: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

fn tri_area(t: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1])).abs()
}

/// Boundary-inclusive point-in-triangle test.
fn in_triangle(t: &[[f64; 2]; 3], p: [f64; 2]) -> bool {
    let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let (d0, d1, d2) = (cross(t[0], t[1]), cross(t[1], t[2]), cross(t[2], t[0]));
    let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
    let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
    !(neg && pos)
}

impl CropVolume {
    pub fn new(transform: Similarity, triangles: Vec<[[f64; 2]; 3]>, z_min: f64, z_max: f64, alpha: f64) -> Result<Self> {
        transform.validate()?;
        if !(z_min <= z_max) {
            return contract(format!("crop volume needs z_min ≤ z_max, got {z_min} > {z_max}"));
        }
        let mut v = Self {
            transform,
            triangles,
            z_min,
            z_max,
            alpha,
            grid: None,
        };
        v.build_grid();
        Ok(v)
    }

    fn build_grid(&mut self) {
        if self.triangles.is_empty() {
            return;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for t in &self.triangles {
            for p in t {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        let side = (self.triangles.len() as f64).sqrt().ceil().max(1.0);
        let cell = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / side).max(1e-12);
        let dims = [((hi[0] - lo[0]) / cell) as usize + 1, ((hi[1] - lo[1]) / cell) as usize + 1];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for (ti, t) in self.triangles.iter().enumerate() {
            let bx = |a: usize, f: fn(f64, f64) -> f64| t.iter().map(|p| p[a]).fold(t[0][a], f);
            let (x0, x1) = (((bx(0, f64::min) - lo[0]) / cell) as usize, ((bx(0, f64::max) - lo[0]) / cell) as usize);
            let (y0, y1) = (((bx(1, f64::min) - lo[1]) / cell) as usize, ((bx(1, f64::max) - lo[1]) / cell) as usize);
            for y in y0..=y1.min(dims[1] - 1) {
                for x in x0..=x1.min(dims[0] - 1) {
                    buckets[y * dims[0] + x].push(ti as u32);
                }
            }
        }
        self.grid = Some(TriGrid { lo, cell, dims, buckets });
    }

    /// Area of the ground polygon.
    pub fn area(&self) -> f64 {
        self.triangles.iter().map(tri_area).sum()
    }

    /// Whether a point lies in the polygon (boundary-inclusive) with its
    /// height in `[z_min, z_max]`, both in the transformed frame.
    pub fn contains(&self, p: Vec3<f64>) -> bool {
        let q = self.transform.apply(p);
        if !(q.z >= self.z_min && q.z <= self.z_max) {
            return false;
        }
        let pt = [q.x, q.y];
        match &self.grid {
            Some(g) => {
                let (fx, fy) = ((pt[0] - g.lo[0]) / g.cell, (pt[1] - g.lo[1]) / g.cell);
                if fx < 0.0 || fy < 0.0 {
                    return false;
                }
                let (x, y) = (fx as usize, fy as usize);
                if x >= g.dims[0] || y >= g.dims[1] {
                    return false;
                }
                g.buckets[y * g.dims[0] + x].iter().any(|&t| in_triangle(&self.triangles[t as usize], pt))
            }
            None => self.triangles.iter().any(|t| in_triangle(t, pt)),
        }
    }

    /// The grid index is rebuilt after deserialization.
    pub fn reindex(&mut self) {
        self.build_grid();
    }
}

/// Delaunay triangles of `pts` whose circumradius is below `alpha`.
pub fn alpha_shape(pts: &[[f64; 2]], alpha: f64) -> Vec<[[f64; 2]; 3]> {
    let dp: Vec<delaunator::Point> = pts.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
    let tri = delaunator::triangulate(&dp);
    let mut out = Vec::new();
    for t in tri.triangles.chunks_exact(3) {
        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
        let tr = [a, b, c];
        let area = tri_area(&tr);
        if area <= 0.0 {
            continue;
        }
        let len = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        let r = len(a, b) * len(b, c) * len(c, a) / (4.0 * area);
        if r < alpha {
            out.push(tr);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Minimum number of views a point must be visible in.
    pub vis_threshold: usize,
    /// Alpha-shape radius; `None` = 3 × median NN distance of the projection.
    pub alpha: Option<f64>,
    /// Radius of the opaque disk each point is rendered as.
    pub point_radius: f64,
    /// Padding added below and above the surviving height range, so surfaces
    /// lying exactly on the extremes (the ground) are not cut in half.
    pub z_margin: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            vis_threshold: 3,
            alpha: None,
            point_radius: 0.05,
            z_margin: 0.1,
        }
    }
}

/// Visible frequency of every point: the number of views whose visibility
/// render marks it visible.
pub fn visible_frequency<T: Real>(points: &[Vec3<f64>], cameras: &[&Camera<T>], radius: f64, opts: &RenderOptions<T>) -> Result<Vec<usize>> {
    let pts: Vec<Vec3<T>> = points.iter().map(|p| p.cast()).collect();
    let flags = cameras
        .par_iter()
        .map(|c| render_visibility(&pts, c, T::of(radius), opts))
        .collect::<Result<Vec<_>>>()?;
    let mut freq = vec![0usize; points.len()];
    for f in flags {
        for (n, v) in freq.iter_mut().zip(f) {
            *n += v as usize;
        }
    }
    Ok(freq)
}

/// Crop volume from the points seen in at least `vis_threshold` views.
pub fn estimate_crop_volume<T: Real>(
    gt: &[Vec3<f64>],
    cameras: &[&Camera<T>],
    transform: &Similarity,
    cfg: &CropConfig,
    opts: &RenderOptions<T>,
) -> Result<CropVolume> {
    if cameras.is_empty() {
        return contract("crop-volume estimation needs at least one camera");
    }
    if cfg.vis_threshold < 1 {
        return contract("vis_threshold must be at least 1");
    }
    transform.validate()?;
    let freq = visible_frequency(gt, cameras, cfg.point_radius, opts)?;
    let survivors: Vec<Vec3<f64>> = gt
        .iter()
        .zip(&freq)
        .filter(|(_, &f)| f >= cfg.vis_threshold)
        .map(|(p, _)| transform.apply(*p))
        .collect();
    if survivors.len() < 3 {
        return contract(format!(
            "only {} points are visible in ≥ {} views; cannot estimate a crop volume",
            survivors.len(),
            cfg.vis_threshold
        ));
    }
    let z_min = survivors.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let z_max = survivors.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    let flat: Vec<[f64; 2]> = survivors.iter().map(|p| [p.x, p.y]).collect();
    let alpha = match cfg.alpha {
        Some(a) => a,
        None => {
            let proj: Vec<Vec3<f64>> = flat.iter().map(|p| Vec3::new(p[0], p[1], 0.0)).collect();
            3.0 * median_nn_distance(&proj).unwrap_or(0.0)
        }
    };
    let triangles = alpha_shape(&flat, alpha);
    if triangles.is_empty() {
        return contract(format!("alpha shape with alpha {alpha} is empty"));
    }
    CropVolume::new(*transform, triangles, z_min - cfg.z_margin, z_max + cfg.z_margin, alpha)
}

pub fn crop(points: &[Vec3<f64>], vol: &CropVolume) -> Vec<Vec3<f64>> {
    points.iter().copied().filter(|p| vol.contains(*p)).collect()
}

/// Area-weighted uniform samples on a mesh.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<Vec3<f64>>> {
    if mesh.is_empty() || count == 0 {
        return contract("surface sampling needs a non-empty mesh and count ≥ 1");
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return contract("mesh has zero total area");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.gen::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        out.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CropSummary {
    pub area: f64,
    pub zmin: f64,
    pub zmax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau: f64,
    pub n_recon: usize,
    pub n_gt_cropped: usize,
    pub crop: Option<CropSummary>,
    /// Which clouds the crop volume was applied to.
    pub cropped: String,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Fraction of `queries` within `tau` of some point of `targets`.
fn within_fraction(queries: &[Vec3<f64>], targets: &[Vec3<f64>], tau: f64, oracle: bool) -> f64 {
    let tau2 = tau * tau;
    let hits = if oracle {
        queries
            .par_iter()
            .filter(|q| targets.iter().map(|t| (*t - **q).norm_sq()).fold(f64::INFINITY, f64::min) <= tau2)
            .count()
    } else {
        let tree = KdTree::new(targets);
        queries.par_iter().filter(|q| tree.nearest(**q).is_some_and(|(_, d)| d <= tau2)).count()
    };
    hits as f64 / queries.len() as f64
}

/// Precision (recon → gt), recall (gt → recon) and F1 at distance `tau`.
/// `oracle` pairs points exhaustively instead of using the kd-tree.
pub fn f1_score(recon: &[Vec3<f64>], gt: &[Vec3<f64>], tau: f64, oracle: bool) -> Result<EvalReport> {
    if recon.is_empty() || gt.is_empty() {
        return contract(format!("F1 needs non-empty clouds (recon {}, gt {})", recon.len(), gt.len()));
    }
    if !(tau > 0.0) {
        return contract(format!("tau must be positive, got {tau}"));
    }
    let precision = within_fraction(recon, gt, tau, oracle);
    let recall = within_fraction(gt, recon, tau, oracle);
    Ok(EvalReport {
        precision,
        recall,
        f1: f1_of(precision, recall),
        tau,
        n_recon: recon.len(),
        n_gt_cropped: gt.len(),
        crop: None,
        cropped: "none".into(),
    })
}

/// Settings of the full evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Fixed τ; `None` derives it from the downsampled gt cloud.
    pub tau: Option<f64>,
    pub tau_range: [f64; 2],
    /// Points sampled from the reconstructed mesh.
    pub samples: usize,
    /// Voxel size both clouds are downsampled to; 0 disables.
    pub downsample: f64,
    pub crop: bool,
    pub crop_cfg: CropConfig,
    pub oracle: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: None,
            tau_range: [0.05, 1.0],
            samples: 200_000,
            downsample: 0.1,
            crop: true,
            crop_cfg: CropConfig::default(),
            oracle: false,
            seed: 0,
        }
    }
}

/// Samples the mesh, aligns it with `transform`, downsamples both clouds,
/// crops both with the volume estimated from `gt`, then scores F1.
pub fn evaluate<T: Real>(
    recon: &TriangleMesh,
    gt: &[Vec3<f64>],
    cameras: &[&Camera<T>],
    transform: &Similarity,
    cfg: &EvalConfig,
    opts: &RenderOptions<T>,
) -> Result<EvalReport> {
    let samples = align(&sample_surface(recon, cfg.samples, cfg.seed)?, transform)?;
    let volume = if cfg.crop {
        Some(estimate_crop_volume(gt, cameras, &Similarity::default(), &cfg.crop_cfg, opts)?)
    } else {
        None
    };
    score_clouds(&samples, gt, volume.as_ref(), cfg)
}

/// Downsampling, τ selection, cropping and F1 on two aligned clouds.
pub fn score_clouds(recon: &[Vec3<f64>], gt: &[Vec3<f64>], volume: Option<&CropVolume>, cfg: &EvalConfig) -> Result<EvalReport> {
    let down = |c: &[Vec3<f64>]| if cfg.downsample > 0.0 { voxel_downsample(c, cfg.downsample) } else { Ok(c.to_vec()) };
    let (mut r, mut g) = (down(recon)?, down(gt)?);
    let tau = cfg.tau.unwrap_or_else(|| default_tau(&g, cfg.tau_range[0], cfg.tau_range[1]));
    if let Some(v) = volume {
        r = crop(&r, v);
        g = crop(&g, v);
    }
    let mut rep = f1_score(&r, &g, tau, cfg.oracle)?;
    if let Some(v) = volume {
        rep.crop = Some(CropSummary {
            area: v.area(),
            zmin: v.z_min,
            zmax: v.z_max,
        });
        rep.cropped = "both".into();
    }
    Ok(rep)
}

/// Default τ: 1.5 × the median NN distance of the (downsampled) gt cloud,
/// clamped to `[lo, hi]`.
pub fn default_tau(gt: &[Vec3<f64>], lo: f64, hi: f64) -> f64 {
    median_nn_distance(gt).map_or(lo, |d| (1.5 * d).clamp(lo, hi))
}
