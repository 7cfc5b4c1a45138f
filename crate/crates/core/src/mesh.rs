//! TSDF fusion of median-depth maps and marching-cubes extraction.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::Image;
use crate::math::Vec3;
use crate::raster::{render_surfels, RenderOptions};
use crate::scalar::Real;
use crate::splat::{Camera, SceneModel};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3<f64>>,
    pub normals: Vec<Vec3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Edges used by exactly one triangle.
    pub fn boundary_edges(&self) -> usize {
        self.edge_counts().values().filter(|&&c| c == 1).count()
    }
}

/// Dense truncated signed distance volume. Positive values lie in front of
/// the surface (camera side).
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3<f64>,
    pub voxel: f64,
    pub truncation: f64,
    pub dims: [usize; 3],
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    /// A volume covering `[lo, hi]` with voxel centers on a regular grid.
    pub fn new(lo: Vec3<f64>, hi: Vec3<f64>, voxel: f64, truncation: f64) -> Result<Self> {
        if !(voxel > 0.0) || !(truncation >= voxel) {
            return contract(format!("TSDF needs voxel > 0 and truncation ≥ voxel, got {voxel} / {truncation}"));
        }
        if !(lo.is_finite() && hi.is_finite()) || (0..3).any(|a| !(hi[a] > lo[a])) {
            return contract("TSDF bounds must be finite and non-empty");
        }
        let mut dims = [0; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / voxel).ceil() as usize + 1;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .filter(|&n| n <= 1 << 28);
        let Some(n) = n else {
            return contract(format!("TSDF grid {dims:?} is too large"));
        };
        Ok(Self {
            origin: lo,
            voxel,
            truncation,
            dims,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    /// Desk defaults: voxel = extent / 128 and truncation = 4 voxels.
    pub fn with_defaults(lo: Vec3<f64>, hi: Vec3<f64>) -> Result<Self> {
        let extent = (hi - lo).to_array().into_iter().fold(0.0, f64::max);
        let voxel = extent / 128.0;
        Self::new(lo, hi, voxel, 4.0 * voxel)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3<f64> {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    pub fn upper(&self) -> Vec3<f64> {
        self.position(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Fills the volume from an analytic signed distance (weight 1 everywhere).
    pub fn fill_sdf(&mut self, sdf: impl Fn(Vec3<f64>) -> f64) {
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let idx = self.index(i, j, k);
                    self.tsdf[idx] = (sdf(self.position(i, j, k)) / self.truncation).clamp(-1.0, 1.0);
                    self.weight[idx] = 1.0;
                }
            }
        }
    }

    /// Projective TSDF update from one depth map (camera-space z per pixel;
    /// non-finite or non-positive pixels are skipped). Voxels further than
    /// `truncation` behind the observed surface are left untouched.
    pub fn integrate<T: Real>(&mut self, depth: &Image<T>, cam: &Camera<T>, depth_truncation: f64) -> Result<()> {
        if !(depth_truncation > 0.0) {
            return contract(format!("depth truncation must be positive, got {depth_truncation}"));
        }
        if depth.width != cam.width || depth.height != cam.height || depth.channels != 1 {
            return contract("depth map does not match the camera");
        }
        let cam = cam.cast::<f64>();
        if !cam.center().is_finite() || cam.center().norm() > 1e12 {
            return contract(format!("camera {} is outside the representable range", cam.id));
        }
        let depth: Vec<f64> = depth.data.iter().map(|d| d.f64()).collect();
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let (trunc, origin, voxel) = (self.truncation, self.origin, self.voxel);
        let slab = nx * ny;
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, (tsdf, weight))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + Vec3::new(i as f64, j as f64, k as f64) * voxel;
                        let pc = cam.to_camera(p);
                        if pc.z <= 1e-9 {
                            continue;
                        }
                        let (u, v) = cam.project(pc);
                        if !(u >= 0.0 && v >= 0.0) {
                            continue;
                        }
                        let (px, py) = (u as usize, v as usize);
                        if px >= cam.width || py >= cam.height {
                            continue;
                        }
                        let d = depth[py * cam.width + px];
                        if !(d.is_finite() && d > 0.0 && d <= depth_truncation) {
                            continue;
                        }
                        let sdf = d - pc.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let s = (sdf / trunc).min(1.0);
                        let idx = j * nx + i;
                        let w = weight[idx];
                        tsdf[idx] = (w * tsdf[idx] + s) / (w + 1.0);
                        weight[idx] = w + 1.0;
                    }
                }
            });
        Ok(())
    }

    /// Central-difference gradient of the tsdf at a voxel.
    fn gradient(&self, i: usize, j: usize, k: usize) -> Vec3<f64> {
        let c = [i, j, k];
        let mut g = Vec3::zero();
        for a in 0..3 {
            let (mut lo, mut hi) = (c, c);
            lo[a] = c[a].saturating_sub(1);
            hi[a] = (c[a] + 1).min(self.dims[a] - 1);
            let span = (hi[a] - lo[a]) as f64;
            if span > 0.0 {
                g[a] = (self.tsdf[self.index(hi[0], hi[1], hi[2])] - self.tsdf[self.index(lo[0], lo[1], lo[2])]) / (span * self.voxel);
            }
        }
        g
    }

    /// Marching cubes on the zero level set. Cells need all eight corners
    /// observed. Faces with two diagonal inside corners are resolved from the
    /// face alone, so neighboring cells always agree and the mesh has no cracks.
    pub fn extract_mesh(&self) -> TriangleMesh {
        let [nx, ny, nz] = self.dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return TriangleMesh::default();
        }
        let slabs: Vec<Vec<[EdgeKey; 3]>> = (0..nz - 1)
            .into_par_iter()
            .map(|k| {
                let mut tris = Vec::new();
                for j in 0..ny - 1 {
                    for i in 0..nx - 1 {
                        self.polygonize_cell(i, j, k, &mut tris);
                    }
                }
                tris
            })
            .collect();
        let mut ids: HashMap<EdgeKey, u32> = HashMap::new();
        let mut mesh = TriangleMesh::default();
        for tri in slabs.into_iter().flatten() {
            let mut t = [0u32; 3];
            for (slot, key) in t.iter_mut().zip(tri) {
                *slot = *ids.entry(key).or_insert_with(|| {
                    let (p, n) = self.edge_vertex(key);
                    mesh.vertices.push(p);
                    mesh.normals.push(n);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                mesh.triangles.push(t);
            }
        }
        mesh
    }

    fn edge_vertex(&self, (i, j, k, axis): EdgeKey) -> (Vec3<f64>, Vec3<f64>) {
        let (i, j, k) = (i as usize, j as usize, k as usize);
        let mut b = [i, j, k];
        b[axis as usize] += 1;
        let (v0, v1) = (self.tsdf[self.index(i, j, k)], self.tsdf[self.index(b[0], b[1], b[2])]);
        let t = if v0 != v1 { (v0 / (v0 - v1)).clamp(0.0, 1.0) } else { 0.5 };
        let p = self.position(i, j, k) * (1.0 - t) + self.position(b[0], b[1], b[2]) * t;
        let g = self.gradient(i, j, k) * (1.0 - t) + self.gradient(b[0], b[1], b[2]) * t;
        let n = if g.norm() > 0.0 { g.normalized() } else { Vec3::zero() };
        (p, n)
    }

    fn polygonize_cell(&self, i: usize, j: usize, k: usize, out: &mut Vec<[EdgeKey; 3]>) {
        let mut vals = [0.0; 8];
        let mut inside = 0u8;
        for (c, off) in CORNERS.iter().enumerate() {
            let idx = self.index(i + off[0], j + off[1], k + off[2]);
            if self.weight[idx] <= 0.0 {
                return;
            }
            vals[c] = self.tsdf[idx];
            if vals[c] < 0.0 {
                inside |= 1 << c;
            }
        }
        if inside == 0 || inside == 0xff {
            return;
        }
        // Oriented segments on each face, keyed by their starting cube edge.
        let mut next = [u8::MAX; 12];
        for face in &FACES {
            let neg = |c: usize| inside & (1 << face[c]) != 0;
            let mut enter = Vec::with_capacity(2);
            let mut leave = Vec::with_capacity(2);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                match (neg(a), neg(b)) {
                    (false, true) => enter.push(e),
                    (true, false) => leave.push(e),
                    _ => {}
                }
            }
            let edge = |e: usize| cube_edge(face[e], face[(e + 1) % 4]);
            match enter.len() {
                1 => next[edge(enter[0]) as usize] = edge(leave[0]),
                2 => {
                    let mean: f64 = face.iter().map(|&c| vals[c]).sum::<f64>() / 4.0;
                    for &en in &enter {
                        // Separate inside corners: leave right after entering;
                        // joined: leave through the edge before entering.
                        let le = if mean >= 0.0 { (en + 1) % 4 } else { (en + 3) % 4 };
                        debug_assert!(leave.contains(&le));
                        next[edge(en) as usize] = edge(le);
                    }
                }
                _ => {}
            }
        }
        let mut used = [false; 12];
        for start in 0..12 {
            if next[start] == u8::MAX || used[start] {
                continue;
            }
            let mut ring = Vec::with_capacity(6);
            let mut e = start;
            while !used[e] {
                used[e] = true;
                ring.push(e);
                e = next[e] as usize;
                if e == u8::MAX as usize {
                    break;
                }
            }
            let key = |e: usize| {
                let (c, axis) = EDGE_BASE[e];
                let o = CORNERS[c];
                ((i + o[0]) as u32, (j + o[1]) as u32, (k + o[2]) as u32, axis)
            };
            for t in 1..ring.len().saturating_sub(1) {
                out.push([key(ring[0]), key(ring[t]), key(ring[t + 1])]);
            }
        }
    }
}

/// Lower corner voxel and axis of a grid edge.
type EdgeKey = (u32, u32, u32, u8);

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Cube faces with corners counter-clockwise seen from outside.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 4, 7, 3], // x = 0
    [1, 2, 6, 5], // x = 1
];

/// The 12 cube edges as (lower corner, axis).
const EDGE_BASE: [(usize, u8); 12] = [
    (0, 0),
    (3, 0),
    (4, 0),
    (7, 0),
    (0, 1),
    (1, 1),
    (4, 1),
    (5, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

fn cube_edge(a: usize, b: usize) -> u8 {
    let (pa, pb) = (CORNERS[a], CORNERS[b]);
    let lo = if pa <= pb { a } else { b };
    let axis = (0..3).find(|&x| pa[x] != pb[x]).expect("distinct corners") as u8;
    EDGE_BASE.iter().position(|&(c, ax)| c == lo && ax == axis).expect("cube edge") as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    /// Voxel size; `None` = longest bound / 128.
    pub voxel: Option<f64>,
    /// Truncation in voxels.
    pub truncation_voxels: f64,
    pub depth_truncation: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            voxel: None,
            truncation_voxels: 4.0,
            depth_truncation: 250.0,
        }
    }
}

/// Renders median depth from every camera and fuses it over `[lo, hi]`.
pub fn fuse_model<T: Real>(
    model: &SceneModel<T>,
    cameras: &[&Camera<T>],
    lo: Vec3<f64>,
    hi: Vec3<f64>,
    cfg: &MeshConfig,
    opts: &RenderOptions<T>,
) -> Result<TsdfVolume> {
    let extent = (hi - lo).to_array().into_iter().fold(0.0, f64::max);
    let voxel = cfg.voxel.unwrap_or(extent / 128.0);
    let mut vol = TsdfVolume::new(lo, hi, voxel, cfg.truncation_voxels * voxel)?;
    for cam in cameras {
        let out = render_surfels(&model.surfels, model.background, cam, opts)?;
        vol.integrate(&out.median_depth, cam, cfg.depth_truncation)?;
    }
    Ok(vol)
}
