//! Independent reference implementations used by the test suites. Nothing in
//! here calls into the code paths it is used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scv2_core::image::Image;
use scv2_core::raster::{render_backward, render_surfels, PixelGrads, RenderOptions, SurfelGrad};
use scv2_core::{Camera, Mat3, Quat, SceneModel, Surfel, Vec3};

/// Camera at the origin looking down +z with the principal point on a pixel center.
pub fn test_camera(size: usize) -> Camera<f64> {
    let c = size as f64 / 2.0 + 0.5;
    Camera::new(0, [40.0, 40.0, c, c], Mat3::identity(), Vec3::zero(), size, size).unwrap()
}

/// Random surfels spread in front of [`test_camera`], tilted but never edge-on,
/// at least a pixel wide on screen, with colors kept away from the zero clamp.
pub fn random_scene(seed: u64, count: usize, size: usize) -> (SceneModel<f64>, Camera<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = test_camera(size);
    let half_fov = size as f64 / 2.0 / 40.0;
    let mut surfels = Vec::with_capacity(count);
    while surfels.len() < count {
        let z = rng.gen_range(3.0..6.0);
        let x = rng.gen_range(-0.7..0.7) * half_fov * z;
        let y = rng.gen_range(-0.7..0.7) * half_fov * z;
        let q = Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if q.norm() < 0.2 {
            continue;
        }
        let r = q.to_matrix();
        let n = r.col(0).cross(r.col(1));
        let view = Vec3::new(x, y, z).normalized();
        if n.dot(view).abs() < 0.4 {
            continue;
        }
        let su: f64 = rng.gen_range(0.12..0.45);
        let sv = rng.gen_range(0.12..0.45);
        // Keep the projected footprint wider than the low-pass floor so the
        // max() branch switch (a kink, not differentiable) stays out of view.
        if su.min(sv) * 40.0 / z * n.dot(view).abs() < 1.2 {
            continue;
        }
        let mut sh = [0.0; 27];
        for c in 0..3 {
            sh[c] = (rng.gen_range(0.25..0.8) - 0.5) / 0.282_094_791_773_878_14;
        }
        for v in sh.iter_mut().skip(3) {
            *v = rng.gen_range(-0.08..0.08);
        }
        let mut s = Surfel::new(Vec3::new(x, y, z), q, [su, sv], rng.gen_range(0.2..0.85), sh).unwrap();
        // Keep the raw (non-unit) quaternion so its normalization is exercised.
        s.rotation = q;
        surfels.push(s);
    }
    let bg = Vec3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    (SceneModel::new(surfels, bg), cam)
}

/// Random per-pixel loss weights on color, depth and normal. Depth and normal
/// weights are zeroed where the base render is nearly transparent so the
/// normalized outputs stay well conditioned.
pub struct LinearLoss {
    pub color: Image<f64>,
    pub depth: Image<f64>,
    pub normal: Image<f64>,
}

impl LinearLoss {
    pub fn random(seed: u64, model: &SceneModel<f64>, cam: &Camera<f64>, opts: &RenderOptions<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let base = render_surfels(&model.surfels, model.background, cam, opts).unwrap();
        let (w, h) = (cam.width, cam.height);
        let mut color = Image::new(w, h, 3);
        let mut depth = Image::new(w, h, 1);
        let mut normal = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    color.set(x, y, c, rng.gen_range(-1.0..1.0));
                }
                if base.alpha.get(x, y, 0) > 0.2 {
                    depth.set(x, y, 0, rng.gen_range(-0.2..0.2));
                    for c in 0..3 {
                        normal.set(x, y, c, rng.gen_range(-0.5..0.5));
                    }
                }
            }
        }
        Self { color, depth, normal }
    }

    pub fn value(&self, surfels: &[Surfel<f64>], bg: Vec3<f64>, cam: &Camera<f64>, opts: &RenderOptions<f64>) -> f64 {
        let out = render_surfels(surfels, bg, cam, opts).unwrap();
        let dot = |a: &Image<f64>, b: &Image<f64>| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.color, &out.color) + dot(&self.depth, &out.expected_depth) + dot(&self.normal, &out.normal)
    }

    pub fn pixel_grads(&self) -> PixelGrads<f64> {
        PixelGrads {
            color: self.color.clone(),
            depth: Some(self.depth.clone()),
            normal: Some(self.normal.clone()),
        }
    }

    pub fn analytic(&self, model: &SceneModel<f64>, cam: &Camera<f64>, opts: &RenderOptions<f64>) -> Vec<SurfelGrad<f64>> {
        let out = render_surfels(&model.surfels, model.background, cam, opts).unwrap();
        render_backward(&model.surfels, model.background, cam, opts, &out, &self.pixel_grads(), None)
            .unwrap()
            .params
    }
}

/// Flat views of every stored surfel parameter, in a fixed order.
pub const PARAMS_PER_SURFEL: usize = 3 + 4 + 2 + 1 + 27;

pub fn param_mut(s: &mut Surfel<f64>, k: usize) -> &mut f64 {
    match k {
        0 => &mut s.center.x,
        1 => &mut s.center.y,
        2 => &mut s.center.z,
        3 => &mut s.rotation.w,
        4 => &mut s.rotation.x,
        5 => &mut s.rotation.y,
        6 => &mut s.rotation.z,
        7 | 8 => &mut s.log_scales[k - 7],
        9 => &mut s.opacity_logit,
        _ => &mut s.sh[k - 10],
    }
}

pub fn grad_component(g: &SurfelGrad<f64>, k: usize) -> f64 {
    match k {
        0 => g.center.x,
        1 => g.center.y,
        2 => g.center.z,
        3..=6 => g.rotation[k - 3],
        7 | 8 => g.log_scales[k - 7],
        9 => g.opacity_logit,
        _ => g.sh[k - 10],
    }
}

pub fn param_name(k: usize) -> String {
    match k {
        0..=2 => format!("center[{k}]"),
        3..=6 => format!("rotation[{}]", k - 3),
        7 | 8 => format!("log_scale[{}]", k - 7),
        9 => "opacity_logit".into(),
        _ => format!("sh[{}]", k - 10),
    }
}

pub struct GradMismatch {
    pub surfel: usize,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central finite differences of `f` around every parameter of every surfel;
/// returns the entries outside `rel` relative tolerance with an `abs` floor.
pub fn finite_difference_check(
    surfels: &[Surfel<f64>],
    analytic: &[SurfelGrad<f64>],
    step: f64,
    rel: f64,
    abs: f64,
    f: impl Fn(&[Surfel<f64>]) -> f64,
) -> (usize, Vec<GradMismatch>) {
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut work = surfels.to_vec();
    for i in 0..surfels.len() {
        for k in 0..PARAMS_PER_SURFEL {
            let orig = *param_mut(&mut work[i], k);
            *param_mut(&mut work[i], k) = orig + step;
            let fp = f(&work);
            *param_mut(&mut work[i], k) = orig - step;
            let fm = f(&work);
            *param_mut(&mut work[i], k) = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad_component(&analytic[i], k);
            checked += 1;
            let tol = (rel * a.abs().max(numeric.abs())).max(abs);
            if (a - numeric).abs() > tol {
                bad.push(GradMismatch {
                    surfel: i,
                    param: param_name(k),
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}

/// Direct evaluation of a surfel's alpha at a pixel, solving the ray/disk
/// intersection as a 3×3 linear system by Cramer's rule.
pub fn direct_alpha(s: &Surfel<f64>, cam: &Camera<f64>, px: f64, py: f64, lowpass_std: f64) -> Option<(f64, f64)> {
    let mu = cam.rotation.mul_vec(s.center) + cam.translation;
    if mu.z <= 0.01 {
        return None;
    }
    let r = s.rotation.normalized().to_matrix();
    let tu = cam.rotation.mul_vec(r.col(0));
    let tv = cam.rotation.mul_vec(r.col(1));
    let d = Vec3::new((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
    // Solve  lambda*d - a*tu - b*tv = mu.
    let cols = [d, -tu, -tv];
    let det3 = |a: Vec3<f64>, b: Vec3<f64>, c: Vec3<f64>| a.dot(b.cross(c));
    let det = det3(cols[0], cols[1], cols[2]);
    let mut g = 0.0;
    let mut depth = mu.z;
    if det.abs() > 1e-12 {
        let lambda = det3(mu, cols[1], cols[2]) / det;
        let a = det3(cols[0], mu, cols[2]) / det;
        let b = det3(cols[0], cols[1], mu) / det;
        if lambda > 0.01 {
            let su = s.log_scales[0].exp();
            let sv = s.log_scales[1].exp();
            g = (-0.5 * ((a / su).powi(2) + (b / sv).powi(2))).exp();
            if lambda < 4.0 * mu.z {
                depth = lambda;
            }
        }
    }
    let u = cam.fx * mu.x / mu.z + cam.cx;
    let v = cam.fy * mu.y / mu.z + cam.cy;
    let lp = (-((px - u).powi(2) + (py - v).powi(2)) / (2.0 * lowpass_std * lowpass_std)).exp();
    let ghat = if g >= lp && g > 0.0 { g } else { lp };
    let opacity = 1.0 / (1.0 + (-s.opacity_logit).exp());
    Some((opacity * ghat, depth))
}

/// Single-view contribution computed pixel by pixel over every
/// surfel, without footprint culling.
pub fn brute_force_contribution(surfels: &[Surfel<f64>], cam: &Camera<f64>, gamma: f64, cutoff: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..surfels.len()).collect();
    let depth = |i: usize| (cam.rotation.mul_vec(surfels[i].center) + cam.translation).z;
    order.sort_by(|&a, &b| depth(a).partial_cmp(&depth(b)).unwrap());
    let mut sums = vec![0.0; surfels.len()];
    let mut counts = vec![0usize; surfels.len()];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            for &i in &order {
                let Some((alpha, _)) = direct_alpha(&surfels[i], cam, px, py, 0.7) else {
                    continue;
                };
                if alpha * trans > cutoff {
                    sums[i] += alpha.powf(gamma) * trans.powf(1.0 - gamma);
                    counts[i] += 1;
                }
                trans *= 1.0 - alpha;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Precision/recall by exhaustive pairing.
pub fn exhaustive_precision_recall(recon: &[Vec3<f64>], gt: &[Vec3<f64>], tau: f64) -> (f64, f64) {
    let within = |p: &Vec3<f64>, set: &[Vec3<f64>]| set.iter().any(|q| (*p - *q).norm_sq() <= tau * tau);
    let p = recon.iter().filter(|p| within(p, gt)).count() as f64 / recon.len() as f64;
    let r = gt.iter().filter(|g| within(g, recon)).count() as f64 / gt.len() as f64;
    (p, r)
}
