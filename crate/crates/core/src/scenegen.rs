//! Deterministic synthetic "town": boxes on a textured ground plane, seen by
//! a ring of cameras. Images are analytic ray casts, so training fits a
//! genuinely external target.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geo::sample_surface;
use crate::image::Image;
use crate::io::{write_json, write_pfm, write_ply_mesh, write_ply_points, write_png, CameraRecord, CamerasFile, PointCloud};
use crate::math::Vec3;
use crate::mesh::TriangleMesh;
use crate::scalar::Real;
use crate::splat::{Camera, SceneModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Ground plane covers `[-ground_half, ground_half]²` at z = 0.
    pub ground_half: f64,
    pub boxes: usize,
    pub box_footprint: [f64; 2],
    pub box_height: [f64; 2],
    pub cameras: usize,
    pub ring_radius: f64,
    pub camera_heights: [f64; 2],
    pub fov_deg: f64,
    pub image_size: usize,
    /// Every n-th camera is held out for testing (0 = none).
    pub test_every: usize,
    pub supersample: usize,
    pub gt_points: usize,
    pub init_points: usize,
    pub init_jitter: f64,
    /// Perturb priors by a random affine map of inverse depth.
    pub prior_affine: bool,
    /// Sparse alignment samples stored per depth prior.
    pub prior_samples: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            ground_half: 4.0,
            boxes: 6,
            box_footprint: [0.6, 1.4],
            box_height: [0.4, 1.8],
            cameras: 24,
            ring_radius: 6.5,
            camera_heights: [3.0, 4.5],
            fov_deg: 60.0,
            image_size: 64,
            test_every: 8,
            supersample: 2,
            gt_points: 30_000,
            init_points: 3_000,
            init_jitter: 0.02,
            prior_affine: true,
            prior_samples: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras < 8 {
            return contract(format!("a scene needs at least 8 cameras, got {}", self.cameras));
        }
        if !(self.ground_half > 0.0 && self.ring_radius > 0.0 && self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return contract("ground_half, ring_radius and fov_deg must be positive (fov < 170°)");
        }
        if self.image_size < 8 || self.supersample < 1 {
            return contract("image_size must be ≥ 8 and supersample ≥ 1");
        }
        if !(self.box_footprint[0] > 0.0 && self.box_footprint[0] <= self.box_footprint[1])
            || !(self.box_height[0] > 0.0 && self.box_height[0] <= self.box_height[1])
        {
            return contract("box size ranges must be positive and ordered");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
}

const GROUND_ALBEDO: [f64; 3] = [0.55, 0.5, 0.42];
const AMBIENT: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub boxes: Vec<AaBox>,
    pub cameras: Vec<Camera<f64>>,
    pub light: Vec3<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3<f64>,
    pub normal: Vec3<f64>,
    pub albedo: Vec3<f64>,
}

impl SyntheticScene {
    pub fn build(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut boxes: Vec<AaBox> = Vec::new();
        let margin = 0.3;
        let lim = spec.ground_half - 0.5;
        let mut attempts = 0;
        while boxes.len() < spec.boxes && attempts < 1000 {
            attempts += 1;
            let w = rng.gen_range(spec.box_footprint[0]..=spec.box_footprint[1]);
            let d = rng.gen_range(spec.box_footprint[0]..=spec.box_footprint[1]);
            let h = rng.gen_range(spec.box_height[0]..=spec.box_height[1]);
            if w >= 2.0 * lim || d >= 2.0 * lim {
                continue;
            }
            let x = rng.gen_range(-lim..lim - w);
            let y = rng.gen_range(-lim..lim - d);
            let b = AaBox {
                min: [x, y, 0.0],
                max: [x + w, y + d, h],
                albedo: [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)],
            };
            let clear = boxes.iter().all(|o| {
                b.min[0] > o.max[0] + margin || o.min[0] > b.max[0] + margin || b.min[1] > o.max[1] + margin || o.min[1] > b.max[1] + margin
            });
            if clear {
                boxes.push(b);
            }
        }
        let fov = spec.fov_deg.to_radians();
        let mut cameras = Vec::with_capacity(spec.cameras);
        for i in 0..spec.cameras {
            let a = std::f64::consts::TAU * i as f64 / spec.cameras as f64;
            let h = spec.camera_heights[i % 2];
            let r = spec.ring_radius * rng.gen_range(0.9..1.1);
            let eye = Vec3::new(r * a.cos(), r * a.sin(), h);
            let target = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.3);
            let cam = Camera::look_at(i as u32, eye, target, Vec3::new(0.0, 0.0, 1.0), fov, spec.image_size, spec.image_size)?;
            cameras.push(cam);
        }
        Ok(Self {
            spec: spec.clone(),
            boxes,
            cameras,
            light: Vec3::new(0.4, 0.3, 0.85).normalized(),
        })
    }

    pub fn is_test(&self, view: usize) -> bool {
        self.spec.test_every > 0 && view % self.spec.test_every == self.spec.test_every - 1
    }

    fn ground_albedo(&self, p: Vec3<f64>) -> Vec3<f64> {
        let k = std::f64::consts::TAU / 1.6;
        let tex = 0.8 + 0.2 * (k * p.x).sin() * (k * p.y).sin();
        Vec3::from_array(GROUND_ALBEDO) * tex
    }

    /// Closest intersection of the ray `o + t·d` (t > 0).
    pub fn cast(&self, o: Vec3<f64>, d: Vec3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d.z < 0.0 && o.z > 0.0 {
            let t = -o.z / d.z;
            let p = o + d * t;
            let g = self.spec.ground_half;
            if p.x.abs() <= g && p.y.abs() <= g {
                best = Some(Hit {
                    t,
                    point: Vec3::new(p.x, p.y, 0.0),
                    normal: Vec3::new(0.0, 0.0, 1.0),
                    albedo: self.ground_albedo(p),
                });
            }
        }
        for b in &self.boxes {
            let (mut t0, mut t1, mut axis, mut sign) = (0.0f64, f64::INFINITY, 3usize, 0.0);
            let mut miss = false;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < b.min[a] || o[a] > b.max[a] {
                        miss = true;
                        break;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
                let mut s = -1.0;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                    s = 1.0;
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                    sign = s;
                }
                t1 = t1.min(tb);
            }
            if miss || t0 > t1 || axis == 3 || best.is_some_and(|h| h.t <= t0) {
                continue;
            }
            let mut n = Vec3::zero();
            n[axis] = sign;
            best = Some(Hit {
                t: t0,
                point: o + d * t0,
                normal: n,
                albedo: Vec3::from_array(b.albedo),
            });
        }
        best
    }

    fn shade(&self, h: &Hit) -> Vec3<f64> {
        h.albedo * (AMBIENT + (1.0 - AMBIENT) * h.normal.dot(self.light).max(0.0))
    }

    /// Lambertian color of a surface point with a known normal.
    pub fn surface_color(&self, p: Vec3<f64>, n: Vec3<f64>) -> Vec3<f64> {
        let albedo = if p.z.abs() < 1e-9 && n.z > 0.5 {
            self.ground_albedo(p)
        } else {
            self.boxes
                .iter()
                .find(|b| (0..3).all(|a| p[a] >= b.min[a] - 1e-9 && p[a] <= b.max[a] + 1e-9))
                .map_or_else(|| Vec3::from_array(GROUND_ALBEDO), |b| Vec3::from_array(b.albedo))
        };
        self.shade(&Hit {
            t: 0.0,
            point: p,
            normal: n,
            albedo,
        })
    }

    /// Supersampled color and center-ray camera-space depth (∞ on a miss).
    pub fn render_view(&self, cam: &Camera<f64>) -> (Image<f64>, Image<f64>) {
        let (w, h, s) = (cam.width, cam.height, self.spec.supersample);
        let origin = cam.center();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut color = vec![0.0; w * 3];
                let mut depth = vec![f64::INFINITY; w];
                for x in 0..w {
                    let mut acc = Vec3::zero();
                    for sy in 0..s {
                        for sx in 0..s {
                            let px = x as f64 + (sx as f64 + 0.5) / s as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / s as f64;
                            let d = cam.rotation.tmul_vec(cam.ray_dir(px, py));
                            if let Some(hit) = self.cast(origin, d) {
                                acc += self.shade(&hit);
                            }
                        }
                    }
                    let acc = acc * (1.0 / (s * s) as f64);
                    color[x * 3..x * 3 + 3].copy_from_slice(&acc.to_array());
                    // Unit-z camera rays: the ray parameter is the camera depth.
                    let d = cam.rotation.tmul_vec(cam.ray_dir(x as f64 + 0.5, y as f64 + 0.5));
                    if let Some(hit) = self.cast(origin, d) {
                        depth[x] = hit.t;
                    }
                }
                (color, depth)
            })
            .collect();
        let mut color = Image::new(w, h, 3);
        let mut depth = Image::new(w, h, 1);
        for (y, (c, d)) in rows.into_iter().enumerate() {
            color.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&c);
            depth.data[y * w..(y + 1) * w].copy_from_slice(&d);
        }
        (color, depth)
    }

    /// Visible surfaces as a mesh: the ground with box footprints cut out and
    /// the top and four sides of every box, all facing outward.
    pub fn gt_mesh(&self) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        let quad = |m: &mut TriangleMesh, c: [Vec3<f64>; 4], n: Vec3<f64>| {
            let base = m.vertices.len() as u32;
            m.vertices.extend_from_slice(&c);
            m.normals.extend_from_slice(&[n; 4]);
            let e = (c[1] - c[0]).cross(c[2] - c[0]);
            if e.dot(n) >= 0.0 {
                m.triangles.push([base, base + 1, base + 2]);
                m.triangles.push([base, base + 2, base + 3]);
            } else {
                m.triangles.push([base, base + 2, base + 1]);
                m.triangles.push([base, base + 3, base + 2]);
            }
        };
        let g = self.spec.ground_half;
        let mut xs = vec![-g, g];
        let mut ys = vec![-g, g];
        for b in &self.boxes {
            xs.extend([b.min[0], b.max[0]]);
            ys.extend([b.min[1], b.max[1]]);
        }
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        xs.dedup();
        ys.dedup();
        let up = Vec3::new(0.0, 0.0, 1.0);
        for xi in 0..xs.len() - 1 {
            for yi in 0..ys.len() - 1 {
                let (cx, cy) = (0.5 * (xs[xi] + xs[xi + 1]), 0.5 * (ys[yi] + ys[yi + 1]));
                let covered = self.boxes.iter().any(|b| cx > b.min[0] && cx < b.max[0] && cy > b.min[1] && cy < b.max[1]);
                if !covered {
                    let c = [
                        Vec3::new(xs[xi], ys[yi], 0.0),
                        Vec3::new(xs[xi + 1], ys[yi], 0.0),
                        Vec3::new(xs[xi + 1], ys[yi + 1], 0.0),
                        Vec3::new(xs[xi], ys[yi + 1], 0.0),
                    ];
                    quad(&mut m, c, up);
                }
            }
        }
        for b in &self.boxes {
            let (x0, y0, x1, y1, h) = (b.min[0], b.min[1], b.max[0], b.max[1], b.max[2]);
            let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
            quad(&mut m, [p(x0, y0, h), p(x1, y0, h), p(x1, y1, h), p(x0, y1, h)], up);
            quad(&mut m, [p(x0, y0, 0.0), p(x1, y0, 0.0), p(x1, y0, h), p(x0, y0, h)], Vec3::new(0.0, -1.0, 0.0));
            quad(&mut m, [p(x1, y1, 0.0), p(x0, y1, 0.0), p(x0, y1, h), p(x1, y1, h)], Vec3::new(0.0, 1.0, 0.0));
            quad(&mut m, [p(x0, y1, 0.0), p(x0, y0, 0.0), p(x0, y0, h), p(x0, y1, h)], Vec3::new(-1.0, 0.0, 0.0));
            quad(&mut m, [p(x1, y0, 0.0), p(x1, y1, 0.0), p(x1, y1, h), p(x1, y0, h)], Vec3::new(1.0, 0.0, 0.0));
        }
        m
    }

    /// Outward normal of the gt surface at a point sampled from [`Self::gt_mesh`].
    fn normal_at(&self, p: Vec3<f64>) -> Vec3<f64> {
        for b in &self.boxes {
            let inside = (0..3).all(|a| p[a] >= b.min[a] - 1e-9 && p[a] <= b.max[a] + 1e-9);
            if inside {
                if (p.z - b.max[2]).abs() < 1e-9 {
                    return Vec3::new(0.0, 0.0, 1.0);
                }
                for a in 0..2 {
                    let mut n = Vec3::zero();
                    if (p[a] - b.min[a]).abs() < 1e-9 {
                        n[a] = -1.0;
                        return n;
                    }
                    if (p[a] - b.max[a]).abs() < 1e-9 {
                        n[a] = 1.0;
                        return n;
                    }
                }
            }
        }
        Vec3::new(0.0, 0.0, 1.0)
    }
}

/// Sidecar of a depth prior: sparse reference samples for alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSidecar {
    pub view_id: u32,
    pub kind: String,
    /// `(x, y, reference inverse depth)` at pixel indices.
    pub samples: Vec<(usize, usize, f64)>,
    /// The affine map applied to exact inverse depth (informational).
    pub affine: [f64; 2],
}

/// Writes the dataset layout into `root`.
pub fn generate(spec: &SceneSpec, root: &Path) -> Result<SyntheticScene> {
    let scene = SyntheticScene::build(spec)?;
    for d in ["images", "depth", "depth_priors"] {
        fs::create_dir_all(root.join(d))?;
    }
    let mesh = scene.gt_mesh();
    write_ply_mesh(&root.join("gt_mesh.ply"), &mesh)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let gt = sample_surface(&mesh, spec.gt_points.max(1), seeds.gen())?;
    let gt_normals: Vec<Vec3<f64>> = gt.iter().map(|p| scene.normal_at(*p)).collect();
    write_ply_points(
        &root.join("gt_points.ply"),
        &PointCloud {
            points: gt.clone(),
            colors: None,
            normals: Some(gt_normals),
        },
    )?;

    let views: Vec<(Image<f64>, Image<f64>)> = scene.cameras.iter().map(|c| scene.render_view(c)).collect();

    // Initial cloud: surface samples seen by at least one training view
    // (the stand-in for structure from motion), jittered, with their color.
    let candidates = sample_surface(&mesh, spec.init_points.max(1) * 3, seeds.gen())?;
    let mut jit = ChaCha8Rng::seed_from_u64(seeds.gen());
    let noise = Normal::new(0.0, spec.init_jitter.max(0.0)).expect("finite std");
    let mut init = PointCloud {
        points: Vec::new(),
        colors: Some(Vec::new()),
        normals: None,
    };
    for p in candidates {
        if init.points.len() >= spec.init_points {
            break;
        }
        let seen = scene
            .cameras
            .iter()
            .enumerate()
            .any(|(v, c)| !scene.is_test(v) && depth_visible(c, &views[v].1, p));
        if !seen {
            continue;
        }
        let color = scene.surface_color(p, scene.normal_at(p));
        let j = Vec3::new(noise.sample(&mut jit), noise.sample(&mut jit), noise.sample(&mut jit));
        init.points.push(p + j);
        init.colors.as_mut().expect("colors").push(color);
    }
    if init.points.is_empty() {
        return contract("no surface point is visible from any training view");
    }
    write_ply_points(&root.join("points3d.ply"), &init)?;

    let mut records = Vec::with_capacity(scene.cameras.len());
    for (v, (cam, (color, depth))) in scene.cameras.iter().zip(&views).enumerate() {
        let name = format!("{v:04}");
        let img_rel = format!("images/{name}.png");
        write_png(&root.join(&img_rel), color)?;
        write_pfm(&root.join(format!("depth/{name}.pfm")), depth)?;
        let (a, b) = if spec.prior_affine {
            (seeds.gen_range(0.7..1.4), seeds.gen_range(-0.05..0.05))
        } else {
            (1.0, 0.0)
        };
        let raw = depth.map(|d| if d.is_finite() { a * (1.0 / d) + b } else { f64::NAN });
        write_pfm(&root.join(format!("depth_priors/{name}.pfm")), &raw)?;
        let mut samples: Vec<(usize, usize, f64)> = init
            .points
            .iter()
            .filter_map(|p| {
                let pc = cam.to_camera(*p);
                if pc.z <= 1e-6 {
                    return None;
                }
                let (u, w) = cam.project(pc);
                if !(u >= 0.0 && w >= 0.0) || u as usize >= cam.width || w as usize >= cam.height {
                    return None;
                }
                let d = depth.get(u as usize, w as usize, 0);
                ((d - pc.z).abs() < 0.05 * pc.z).then(|| (u as usize, w as usize, 1.0 / pc.z))
            })
            .collect();
        samples.shuffle(&mut seeds);
        samples.truncate(spec.prior_samples);
        samples.sort_by(|p, q| (p.1, p.0).cmp(&(q.1, q.0)));
        write_json(
            &root.join(format!("depth_priors/{name}.json")),
            &PriorSidecar {
                view_id: cam.id,
                kind: "inverse_depth".into(),
                samples,
                affine: [a, b],
            },
        )?;
        let split = if scene.is_test(v) { "test" } else { "train" };
        records.push(CameraRecord::from_camera(cam, img_rel, split));
    }
    write_json(&root.join("cameras.json"), &CamerasFile { cameras: records })?;
    write_json(&root.join("scene.json"), &SceneRecord { spec: spec.clone(), boxes: scene.boxes.clone() })?;
    Ok(scene)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub boxes: Vec<AaBox>,
}

fn depth_visible(cam: &Camera<f64>, depth: &Image<f64>, p: Vec3<f64>) -> bool {
    let pc = cam.to_camera(p);
    if pc.z <= 1e-6 {
        return false;
    }
    let (u, v) = cam.project(pc);
    if !(u >= 0.0 && v >= 0.0) || u as usize >= cam.width || v as usize >= cam.height {
        return false;
    }
    (depth.get(u as usize, v as usize, 0) - pc.z).abs() < 0.05 * pc.z
}

/// Replaces `fraction` of the surfels with high-opacity needles of
/// elongation 1e-3 (long axis kept).
pub fn make_adversarial_elongated<T: Real>(model: &SceneModel<T>, fraction: f64, seed: u64) -> Result<SceneModel<T>> {
    if !(0.0..1.0).contains(&fraction) {
        return contract(format!("fraction must lie in [0,1), got {fraction}"));
    }
    let mut out = model.clone();
    let k = (fraction * model.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..model.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &idx[..k] {
        let s = &mut out.surfels[i];
        let long = s.log_scales[0].max(s.log_scales[1]);
        s.log_scales = [long, long + T::of(1e-3f64.ln())];
        s.set_opacity(T::of(0.9));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Surfel;
    use crate::math::Quat;

    fn small() -> SceneSpec {
        SceneSpec {
            boxes: 1,
            cameras: 8,
            image_size: 32,
            gt_points: 2000,
            init_points: 200,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn nadir_camera_sees_ground_at_its_height() {
        let mut spec = small();
        spec.boxes = 0;
        let scene = SyntheticScene::build(&spec).unwrap();
        let cam = Camera::look_at(0, Vec3::new(0.3, -0.2, 2.5), Vec3::new(0.3, -0.2, 0.0), Vec3::new(0.0, 0.0, 1.0), 0.8, 16, 16).unwrap();
        let (_, depth) = scene.render_view(&cam);
        for d in &depth.data {
            assert!((d - 2.5).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn one_box_dataset_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let scene = generate(&small(), a.path()).unwrap();
        generate(&small(), b.path()).unwrap();
        assert_eq!(scene.boxes.len(), 1);
        let mut files = 0;
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
            files += 1;
        }
        assert_eq!(fs::read_dir(a.path().join("images")).unwrap().count(), 8);
        assert!(files > 20);
        // Box pixels have finite depth.
        let bx = scene.boxes[0];
        let top = Vec3::new(0.5 * (bx.min[0] + bx.max[0]), 0.5 * (bx.min[1] + bx.max[1]), bx.max[2]);
        for cam in &scene.cameras {
            let (_, depth) = scene.render_view(cam);
            let (u, v) = cam.project(cam.to_camera(top));
            if u >= 0.0 && v >= 0.0 && (u as usize) < 32 && (v as usize) < 32 {
                assert!(depth.get(u as usize, v as usize, 0).is_finite());
            }
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn gt_mesh_is_consistent() {
        let scene = SyntheticScene::build(&SceneSpec::default()).unwrap();
        let m = scene.gt_mesh();
        let g = scene.spec.ground_half;
        let footprint: f64 = scene.boxes.iter().map(|b| (b.max[0] - b.min[0]) * (b.max[1] - b.min[1])).sum();
        let sides: f64 = scene
            .boxes
            .iter()
            .map(|b| 2.0 * ((b.max[0] - b.min[0]) + (b.max[1] - b.min[1])) * b.max[2])
            .sum();
        assert!((m.area() - (4.0 * g * g + sides)).abs() < 1e-9);
        assert!(footprint > 0.0);
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.triangle(t);
            let n = (b - a).cross(c - a).normalized();
            assert!((n - m.normals[m.triangles[t][0] as usize]).norm() < 1e-9);
        }
    }

    #[test]
    fn adversarial_needles() {
        let surfels: Vec<Surfel<f64>> = (0..100)
            .map(|i| Surfel::with_color(Vec3::new(i as f64, 0.0, 1.0), Quat::identity(), [0.1, 0.2], 0.5, Vec3::splat(0.5)).unwrap())
            .collect();
        let m = SceneModel::new(surfels, Vec3::zero());
        let a = make_adversarial_elongated(&m, 0.05, 1).unwrap();
        assert_eq!(a.surfels.iter().filter(|s| s.elongation() < 0.01).count(), 5);
        assert_eq!(a.surfels, make_adversarial_elongated(&m, 0.05, 1).unwrap().surfels);
        assert_eq!(make_adversarial_elongated(&m, 0.0, 1).unwrap().surfels, m.surfels);
    }
}
