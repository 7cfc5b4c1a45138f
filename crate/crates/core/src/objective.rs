//! Training losses: L1 + D-SSIM photometric term, inverse-depth prior
//! regression with an exponentially decaying weight, and depth/normal
//! consistency. Every loss returns pixel-space gradients ready for
//! [`crate::raster::render_backward`].

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::image::Image;
use crate::math::Vec3;
use crate::scalar::Real;
use crate::splat::Camera;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

/// Rendered inverse depth is `1 / max(depth, INV_DEPTH_EPS)`.
pub const INV_DEPTH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub depth_start: f64,
    pub depth_end: f64,
    /// Switches the depth term off entirely.
    pub depth_enabled: bool,
    pub normal: f64,
    /// First iteration at which the normal term is active.
    pub normal_from_iter: u64,
    pub total_iters: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            depth_start: 0.5,
            depth_end: 0.0025,
            depth_enabled: true,
            normal: 0.0125,
            normal_from_iter: 7000,
            total_iters: 30_000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ssim, self.depth_start, self.depth_end, self.normal];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return contract("loss weights must be finite and non-negative");
        }
        if self.lambda_ssim > 1.0 {
            return contract(format!("lambda_ssim must lie in [0,1], got {}", self.lambda_ssim));
        }
        if self.depth_enabled && !(self.depth_start >= self.depth_end && self.depth_end > 0.0) {
            return contract(format!(
                "depth weights need start >= end > 0, got {} -> {}",
                self.depth_start, self.depth_end
            ));
        }
        Ok(())
    }

    /// `start · (end/start)^(iter/total)`, clamped to the schedule's ends.
    pub fn depth_weight(&self, iter: u64) -> f64 {
        if !self.depth_enabled {
            return 0.0;
        }
        let t = if self.total_iters == 0 {
            1.0
        } else {
            (iter as f64 / self.total_iters as f64).min(1.0)
        };
        self.depth_start * (self.depth_end / self.depth_start).powf(t)
    }

    pub fn normal_weight(&self, iter: u64) -> f64 {
        if iter >= self.normal_from_iter {
            self.normal
        } else {
            0.0
        }
    }
}

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian blur of a planar image with zero padding. The kernel is
/// symmetric, so this operator is its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = 0.0;
            for (xx, v) in row.iter().enumerate().take(hi + 1).skip(lo) {
                acc += k[xx + r - x] * v;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for yy in lo..=hi {
            let kw = k[yy + r - y];
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kw * s;
            }
        }
    }
    out
}

fn planar<T: Real>(img: &Image<T>, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).map(|v| v.f64()).collect()
}

/// Per-channel SSIM statistics at every pixel.
struct SsimStats {
    s: Vec<f64>,
    // Partials of the per-pixel SSIM with respect to mu_x, E[x²] and E[xy].
    d_mx: Vec<f64>,
    d_exx: Vec<f64>,
    d_exy: Vec<f64>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64], want_grad: bool) -> SsimStats {
    let mx = blur(x, w, h, k);
    let my = blur(y, w, h, k);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = blur(&xx, w, h, k);
    let eyy = blur(&yy, w, h, k);
    let exy = blur(&xy, w, h, k);
    let n = w * h;
    let mut st = SsimStats {
        s: vec![0.0; n],
        d_mx: if want_grad { vec![0.0; n] } else { Vec::new() },
        d_exx: if want_grad { vec![0.0; n] } else { Vec::new() },
        d_exy: if want_grad { vec![0.0; n] } else { Vec::new() },
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        st.s[i] = s;
        if want_grad {
            let bb = b1 * b2;
            st.d_mx[i] = (2.0 * uy * a2 - 2.0 * uy * a1) / bb - s * (2.0 * ux / b1 - 2.0 * ux / b2);
            st.d_exx[i] = -s / b2;
            st.d_exy[i] = 2.0 * a1 / bb;
        }
    }
    st
}

/// Per-pixel SSIM map (averaged over channels), 11×11 Gaussian window with
/// σ = 1.5 and zero padding.
pub fn ssim_map<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<Image<f64>> {
    a.check_same_shape(b, "ssim")?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let k = gaussian_window();
    let mut out = Image::new(w, h, 1);
    for c in 0..ch {
        let st = ssim_channel(&planar(a, c), &planar(b, c), w, h, &k, false);
        for (o, s) in out.data.iter_mut().zip(&st.s) {
            *o += s / ch as f64;
        }
    }
    Ok(out)
}

/// Mean SSIM over pixels and channels.
pub fn ssim<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.data.iter().sum::<f64>() / m.data.len().max(1) as f64)
}

/// Output of [`photometric_loss`].
#[derive(Clone, Debug)]
pub struct Photometric<T> {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// dL/dcolor of the full photometric loss.
    pub grad: Image<T>,
    /// The D-SSIM part of `grad` alone (already scaled by λ_ssim).
    pub ssim_grad: Image<T>,
}

/// `(1-λ)·L1 + λ·(1-SSIM)/2` and its gradients with respect to `render`.
pub fn photometric_loss<T: Real>(render: &Image<T>, gt: &Image<T>, lambda_ssim: f64) -> Result<Photometric<T>> {
    render.check_same_shape(gt, "photometric_loss")?;
    if render.data.is_empty() {
        return contract("photometric_loss on an empty image");
    }
    let (w, h, ch) = (render.width, render.height, render.channels);
    let n = render.data.len() as f64;
    let k = gaussian_window();

    let mut l1 = 0.0;
    let mut grad = Image::new(w, h, ch);
    for (g, (x, y)) in grad.data.iter_mut().zip(render.data.iter().zip(&gt.data)) {
        let d = x.f64() - y.f64();
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = T::of((1.0 - lambda_ssim) * sign / n);
    }
    l1 /= n;

    // dL/dS at every pixel and channel is -λ/(2n).
    let g_s = -lambda_ssim / (2.0 * n);
    let mut ssim_sum = 0.0;
    let mut ssim_grad = Image::new(w, h, ch);
    for c in 0..ch {
        let x = planar(render, c);
        let y = planar(gt, c);
        let st = ssim_channel(&x, &y, w, h, &k, true);
        ssim_sum += st.s.iter().sum::<f64>();
        let scaled = |v: &[f64]| v.iter().map(|d| d * g_s).collect::<Vec<_>>();
        let t1 = blur(&scaled(&st.d_mx), w, h, &k);
        let t2 = blur(&scaled(&st.d_exx), w, h, &k);
        let t3 = blur(&scaled(&st.d_exy), w, h, &k);
        for i in 0..w * h {
            let g = t1[i] + 2.0 * x[i] * t2[i] + y[i] * t3[i];
            ssim_grad.data[i * ch + c] = T::of(g);
        }
    }
    let ssim = ssim_sum / n;
    for (g, s) in grad.data.iter_mut().zip(&ssim_grad.data) {
        *g += *s;
    }
    Ok(Photometric {
        loss: (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim) / 2.0,
        l1,
        ssim,
        grad,
        ssim_grad,
    })
}

/// A per-view inverse-depth prior with its affine alignment `a·raw + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrior<T> {
    pub view_id: u32,
    pub inv_depth: Image<T>,
    pub mask: Vec<bool>,
    pub scale: T,
    pub shift: T,
    /// The fit was degenerate (constant raw values) and fell back to a = 1.
    pub degenerate: bool,
}

impl<T: Real> DepthPrior<T> {
    /// An already-aligned prior; non-finite or negative pixels are masked out.
    pub fn aligned(view_id: u32, inv_depth: Image<T>) -> Self {
        let mask = inv_depth.data.iter().map(|v| v.is_finite() && *v >= T::zero()).collect();
        Self {
            view_id,
            inv_depth,
            mask,
            scale: T::one(),
            shift: T::zero(),
            degenerate: false,
        }
    }

    #[inline]
    pub fn target(&self, i: usize) -> T {
        self.scale * self.inv_depth.data[i] + self.shift
    }
}

/// Least-squares fit of `ref ≈ a·raw + b` over sparse `(x, y, ref)` samples.
pub fn align_depth_prior<T: Real>(view_id: u32, raw: Image<T>, samples: &[(usize, usize, T)]) -> Result<DepthPrior<T>> {
    if raw.channels != 1 {
        return contract("depth prior must be single-channel");
    }
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(x, y, r)| *x < raw.width && *y < raw.height && r.is_finite() && raw.get(*x, *y, 0).is_finite())
        .map(|(x, y, r)| (raw.get(*x, *y, 0).f64(), r.f64()))
        .collect();
    if pts.len() < 2 {
        return contract(format!("depth alignment needs at least 2 valid samples, got {}", pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let mut prior = DepthPrior::aligned(view_id, raw);
    if sxx <= 1e-12 * (1.0 + mx * mx) * n {
        prior.shift = T::of(my - mx);
        prior.degenerate = true;
    } else {
        let a = sxy / sxx;
        prior.scale = T::of(a);
        prior.shift = T::of(my - a * mx);
    }
    Ok(prior)
}

/// Rendered inverse depth `1 / max(depth, ε)`; zero where nothing was hit.
pub fn inverse_depth<T: Real>(expected_depth: &Image<T>, alpha: &Image<T>) -> Image<T> {
    let mut out = Image::new(expected_depth.width, expected_depth.height, 1);
    let eps = T::of(INV_DEPTH_EPS);
    for (o, (d, a)) in out.data.iter_mut().zip(expected_depth.data.iter().zip(&alpha.data)) {
        if *a > T::zero() {
            *o = T::one() / d.max(eps);
        }
    }
    out
}

/// Chains a gradient on inverse depth back to expected depth.
pub fn inverse_depth_grad<T: Real>(expected_depth: &Image<T>, g_inv: &Image<T>) -> Image<T> {
    let eps = T::of(INV_DEPTH_EPS);
    let mut out = Image::new(expected_depth.width, expected_depth.height, 1);
    for (o, (d, g)) in out.data.iter_mut().zip(expected_depth.data.iter().zip(&g_inv.data)) {
        if *d > eps {
            *o = -*g / (*d * *d);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct DepthLoss<T> {
    pub loss: f64,
    /// dL/d(rendered inverse depth).
    pub grad: Image<T>,
    pub weight: f64,
    /// No valid pixel: the loss is zero and a warning is due.
    pub empty_mask: bool,
}

/// `w(iter) · mean |D̂ − (a·D + b)|` over the prior's mask (restricted to
/// rendered pixels when `coverage` is given).
pub fn depth_loss<T: Real>(
    pred_inv_depth: &Image<T>,
    prior: &DepthPrior<T>,
    coverage: Option<&Image<T>>,
    iter: u64,
    weights: &LossWeights,
) -> Result<DepthLoss<T>> {
    pred_inv_depth.check_same_shape(&prior.inv_depth, "depth_loss")?;
    let weight = weights.depth_weight(iter);
    let valid = |i: usize| prior.mask[i] && coverage.map_or(true, |c| c.data[i] > T::zero());
    let count = (0..prior.mask.len()).filter(|&i| valid(i)).count();
    let mut grad = Image::new(pred_inv_depth.width, pred_inv_depth.height, 1);
    if count == 0 {
        return Ok(DepthLoss {
            loss: 0.0,
            grad,
            weight,
            empty_mask: true,
        });
    }
    let mut sum = 0.0;
    let scale = weight / count as f64;
    for i in 0..prior.mask.len() {
        if !valid(i) {
            continue;
        }
        let d = pred_inv_depth.data[i].f64() - prior.target(i).f64();
        sum += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.data[i] = T::of(scale * sign);
    }
    Ok(DepthLoss {
        loss: weight * sum / count as f64,
        grad,
        weight,
        empty_mask: false,
    })
}

/// Camera-space normals of the surface described by a depth map, from
/// central differences of the back-projected points. Normals face the camera;
/// border pixels and pixels next to empty ones are zero.
pub fn depth_normals<T: Real>(depth: &Image<T>, cam: &Camera<T>) -> Image<T> {
    let (w, h) = (depth.width, depth.height);
    let mut out = Image::new(w, h, 3);
    if w < 3 || h < 3 {
        return out;
    }
    let half = T::of(0.5);
    let point = |x: usize, y: usize| -> Option<Vec3<T>> {
        let z = depth.get(x, y, 0);
        if !(z > T::zero() && z.is_finite()) {
            return None;
        }
        let d = cam.ray_dir(T::of_usize(x) + half, T::of_usize(y) + half);
        Some(d * z)
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (Some(l), Some(r), Some(u), Some(d)) = (point(x - 1, y), point(x + 1, y), point(x, y - 1), point(x, y + 1)) else {
                continue;
            };
            let n = (d - u).cross(r - l);
            let len = n.norm();
            if len > T::zero() {
                let n = n * (T::one() / len);
                for c in 0..3 {
                    out.set(x, y, c, n[c]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct NormalLoss<T> {
    pub loss: f64,
    /// dL/d(rendered normal map); the depth-normal branch is held constant.
    pub grad: Image<T>,
    pub pixels: usize,
}

/// `weight · mean(1 − n_render·n_depth)` over pixels with alpha > 0.5 and a
/// defined depth normal.
pub fn normal_loss<T: Real>(
    render_normal: &Image<T>,
    depth_normal: &Image<T>,
    alpha: &Image<T>,
    weight: f64,
) -> Result<NormalLoss<T>> {
    render_normal.check_same_shape(depth_normal, "normal_loss")?;
    if alpha.width != render_normal.width || alpha.height != render_normal.height {
        return contract("normal_loss: alpha image has a different size");
    }
    let (w, h) = (alpha.width, alpha.height);
    let mut grad = Image::new(w, h, 3);
    let half = T::of(0.5);
    let px: Vec<usize> = (0..w * h)
        .filter(|&i| alpha.data[i] > half && (0..3).any(|c| depth_normal.data[i * 3 + c] != T::zero()))
        .collect();
    if px.is_empty() || weight == 0.0 {
        return Ok(NormalLoss {
            loss: 0.0,
            grad,
            pixels: px.len(),
        });
    }
    let scale = weight / px.len() as f64;
    let mut sum = 0.0;
    for &i in &px {
        let mut dot = 0.0;
        for c in 0..3 {
            let nd = depth_normal.data[i * 3 + c].f64();
            dot += render_normal.data[i * 3 + c].f64() * nd;
            grad.data[i * 3 + c] = T::of(-scale * nd);
        }
        sum += 1.0 - dot;
    }
    Ok(NormalLoss {
        loss: scale * sum,
        grad,
        pixels: px.len(),
    })
}
