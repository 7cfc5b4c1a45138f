//! Tile-binned CPU rasterizer for surfels.
//!
//! Each pixel ray is intersected with the surfel plane and the disk Gaussian
//! is evaluated in the surfel's own tangent frame. A screen-space low-pass
//! floor keeps sub-pixel surfels visible. Surfels are globally sorted by
//! camera-space center depth and composited front to back.
//!
//! The backward pass recomputes each pixel's contributor list and runs a
//! back-to-front adjoint sweep, so no division by `1 - alpha` is needed and
//! fully opaque surfels are handled exactly.

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::image::Image;
use crate::math::{quat_tangent_vjp, Quat, Vec3};
use crate::scalar::Real;
use crate::splat::{opacity_to_logit, sh_basis, sh_basis_jacobian, sh_raw, Camera, SceneModel, Surfel, SH_COEFFS, SH_LEN};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions<T> {
    /// Half-width of the screen footprint in surfel standard deviations.
    pub extent_sigma: T,
    /// Standard deviation, in pixels, of the screen-space low-pass floor.
    pub lowpass_std: T,
    /// Compositing stops once transmittance falls below this value.
    pub min_transmittance: T,
    /// Blend weight above which a surfel counts as visible at a pixel.
    pub contribution_cutoff: T,
    /// Surfels with camera-space center depth below this are culled.
    pub near: T,
    pub tile_size: usize,
}

impl<T: Real> Default for RenderOptions<T> {
    fn default() -> Self {
        Self {
            extent_sigma: T::of(3.0),
            lowpass_std: T::of(0.7),
            min_transmittance: T::of(1e-4),
            contribution_cutoff: T::of(1.0 / 255.0),
            near: T::of(0.01),
            tile_size: 16,
        }
    }
}

impl<T: Real> RenderOptions<T> {
    /// Footprint wide enough that truncation is below double-precision noise
    /// and no early termination: the forward pass is then a smooth function of
    /// the parameters, which finite-difference checks rely on.
    pub fn exact() -> Self {
        Self {
            extent_sigma: T::of(7.0),
            min_transmittance: T::zero(),
            ..Self::default()
        }
    }
}

/// Per-view images produced by [`render`].
#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    pub color: Image<T>,
    pub alpha: Image<T>,
    /// Blend-weighted camera-space depth; 0 where nothing was hit.
    pub expected_depth: Image<T>,
    /// Depth where accumulated opacity first reaches 0.5; `+inf` elsewhere.
    pub median_depth: Image<T>,
    /// Camera-space unit normal map; zero where nothing was hit.
    pub normal: Image<T>,
    pub final_transmittance: Image<T>,
    /// Surfel contributed a blend weight above the cutoff at some pixel.
    pub visible: Vec<bool>,
    /// Largest per-pixel blend weight of each surfel.
    pub max_contribution: Vec<T>,
}

/// Pixel-space gradients of a scalar loss with respect to render outputs.
#[derive(Clone, Debug)]
pub struct PixelGrads<T> {
    /// dL/dcolor, 3 channels.
    pub color: Image<T>,
    /// dL/d(expected depth), 1 channel.
    pub depth: Option<Image<T>>,
    /// dL/d(normalized normal map), 3 channels.
    pub normal: Option<Image<T>>,
}

impl<T: Real> PixelGrads<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::new(width, height, 3),
            depth: None,
            normal: None,
        }
    }
}

/// Gradient of a scalar loss with respect to every stored surfel parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelGrad<T> {
    pub center: Vec3<T>,
    pub rotation: [T; 4],
    pub log_scales: [T; 2],
    pub opacity_logit: T,
    pub sh: [T; SH_LEN],
}

impl<T: Real> Default for SurfelGrad<T> {
    fn default() -> Self {
        Self {
            center: Vec3::zero(),
            rotation: [T::zero(); 4],
            log_scales: [T::zero(); 2],
            opacity_logit: T::zero(),
            sh: [T::zero(); SH_LEN],
        }
    }
}

impl<T: Real> SurfelGrad<T> {
    pub fn is_finite(&self) -> bool {
        self.center.is_finite()
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|v| v.is_finite())
    }
}

/// Output of [`render_backward`].
///
/// `screen_total` and `screen_aux` are per-surfel norms of the gradient with
/// respect to the projected center, in normalized device units, for the full
/// loss and for the auxiliary (SSIM-only by default) loss respectively.
#[derive(Clone, Debug)]
pub struct SurfelGradients<T> {
    pub params: Vec<SurfelGrad<T>>,
    pub screen_total: Vec<T>,
    pub screen_aux: Vec<T>,
    pub visible: Vec<bool>,
}

/// View-dependent per-surfel quantities shared by all pixels.
#[derive(Clone, Copy, Debug)]
struct Projected<T> {
    mu: Vec3<T>,
    tu: Vec3<T>,
    tv: Vec3<T>,
    n: Vec3<T>,
    /// +1 or -1 so that `flip * n` faces the camera.
    flip: T,
    su: T,
    sv: T,
    opacity: T,
    color: Vec3<T>,
    /// Channel was clamped at zero.
    clamped: [bool; 3],
    u: T,
    v: T,
    bbox: [usize; 4],
}

#[derive(Clone, Copy, Debug)]
struct Hit<T> {
    ghat: T,
    alpha: T,
    depth: T,
    plane: bool,
    lambda_valid: bool,
    a: T,
    b: T,
    ndd: T,
    r: Vec3<T>,
    d: Vec3<T>,
    px: T,
    py: T,
}

fn project_surfel<T: Real>(
    s: &Surfel<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    cam_center: Vec3<T>,
) -> Option<Projected<T>> {
    let mu = cam.to_camera(s.center);
    if mu.z <= opts.near {
        return None;
    }
    let (tu_w, tv_w) = s.tangents();
    let tu = cam.rotation.mul_vec(tu_w);
    let tv = cam.rotation.mul_vec(tv_w);
    let n = tu.cross(tv);
    let flip = if n.dot(mu) > T::zero() { -T::one() } else { T::one() };
    let [su, sv] = s.scales();
    let dir = (s.center - cam_center).normalized();
    let raw = sh_raw(&s.sh, dir);
    let clamped = [raw.x < T::zero(), raw.y < T::zero(), raw.z < T::zero()];
    let color = raw.max_elem(Vec3::zero());
    let (u, v) = cam.project(mu);

    let (w, h) = (T::of_usize(cam.width), T::of_usize(cam.height));
    let k = opts.extent_sigma;
    let lp = k * opts.lowpass_std;
    let (mut umin, mut umax, mut vmin, mut vmax) = (u - lp, u + lp, v - lp, v + lp);
    let mut full = false;
    for (da, db) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let p = mu + tu * (T::of(da) * k * su) + tv * (T::of(db) * k * sv);
        if p.z <= opts.near {
            full = true;
            break;
        }
        let (pu, pv) = cam.project(p);
        umin = umin.min(pu);
        umax = umax.max(pu);
        vmin = vmin.min(pv);
        vmax = vmax.max(pv);
    }
    if full {
        umin = T::zero();
        vmin = T::zero();
        umax = w;
        vmax = h;
    }
    // Pixel i is centered at i + 0.5.
    let half = T::of(0.5);
    let x0 = (umin - half).ceil().max(T::zero());
    let x1 = (umax - half).floor().min(w - T::one());
    let y0 = (vmin - half).ceil().max(T::zero());
    let y1 = (vmax - half).floor().min(h - T::one());
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let bbox = [
        x0.to_usize()?,
        x1.to_usize()?,
        y0.to_usize()?,
        y1.to_usize()?,
    ];
    Some(Projected {
        mu,
        tu,
        tv,
        n,
        flip,
        su,
        sv,
        opacity: s.opacity(),
        color,
        clamped,
        u,
        v,
        bbox,
    })
}

impl<T: Real> Projected<T> {
    #[inline]
    fn eval(&self, cam: &Camera<T>, opts: &RenderOptions<T>, px: T, py: T) -> Hit<T> {
        let d = cam.ray_dir(px, py);
        let ndd = self.n.dot(d);
        let mut g = T::zero();
        let (mut a, mut b, mut lambda) = (T::zero(), T::zero(), T::zero());
        let mut r = Vec3::zero();
        if ndd.abs() > T::of(1e-12) {
            lambda = self.n.dot(self.mu) / ndd;
            if lambda > opts.near {
                r = d * lambda - self.mu;
                a = self.tu.dot(r);
                b = self.tv.dot(r);
                let q = (a / self.su) * (a / self.su) + (b / self.sv) * (b / self.sv);
                g = (-T::of(0.5) * q).exp();
            }
        }
        let du = px - self.u;
        let dv = py - self.v;
        let var = opts.lowpass_std * opts.lowpass_std;
        let lp = (-(du * du + dv * dv) / (T::of(2.0) * var)).exp();
        let plane = g >= lp && g > T::zero();
        // Near edge-on planes the intersection runs off to infinity; fall back
        // to the center depth there.
        let lambda_valid = lambda > opts.near && lambda < T::of(4.0) * self.mu.z;
        let ghat = if plane { g } else { lp };
        // Plane depth whenever the ray meets the plane in front of the camera,
        // so depth stays continuous where the low-pass floor takes over.
        let depth = if lambda_valid { lambda } else { self.mu.z };
        Hit {
            ghat,
            alpha: self.opacity * ghat,
            depth,
            plane,
            lambda_valid,
            a,
            b,
            ndd,
            r,
            d,
            px,
            py,
        }
    }

    #[inline]
    fn normal_out(&self) -> Vec3<T> {
        self.n * self.flip
    }
}

struct Binned<T> {
    projected: Vec<Option<Projected<T>>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn bin<T: Real>(surfels: &[Surfel<T>], cam: &Camera<T>, opts: &RenderOptions<T>) -> Binned<T> {
    let cam_center = cam.center();
    let projected: Vec<Option<Projected<T>>> = surfels
        .par_iter()
        .map(|s| project_surfel(s, cam, opts, cam_center))
        .collect();
    let mut order: Vec<u32> = (0..surfels.len() as u32)
        .filter(|&i| projected[i as usize].is_some())
        .collect();
    // Ties broken by the surfel's own parameters, not its index, so that the
    // image does not depend on input order.
    order.sort_by(|&i, &j| {
        let (pi, pj) = (projected[i as usize].unwrap(), projected[j as usize].unwrap());
        pi.mu
            .z
            .partial_cmp(&pj.mu.z)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| tie_key(&surfels[i as usize]).partial_cmp(&tie_key(&surfels[j as usize])).unwrap_or(std::cmp::Ordering::Equal))
    });
    let ts = opts.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let p = projected[i as usize].as_ref().unwrap();
        let [x0, x1, y0, y1] = p.bbox;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    Binned {
        projected,
        tiles,
        tiles_x,
    }
}

fn tie_key<T: Real>(s: &Surfel<T>) -> [f64; 4] {
    [s.center.x.f64(), s.center.y.f64(), s.opacity_logit.f64(), s.log_scales[0].f64()]
}

fn tile_pixels(tile: usize, tiles_x: usize, ts: usize, cam_w: usize, cam_h: usize) -> impl Iterator<Item = (usize, usize)> {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let xs = tx * ts..((tx + 1) * ts).min(cam_w);
    let ys = ty * ts..((ty + 1) * ts).min(cam_h);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

fn check_camera<T: Real>(cam: &Camera<T>) -> Result<()> {
    if cam.width == 0 || cam.height == 0 {
        return contract(format!("camera {} has zero-size image", cam.id));
    }
    cam.validate()
}

struct TileForward<T> {
    pixels: Vec<(usize, usize, [T; 10])>,
    visible: Vec<(u32, T)>,
}

/// Renders a model from one camera.
pub fn render<T: Real>(model: &SceneModel<T>, cam: &Camera<T>, opts: &RenderOptions<T>) -> Result<RenderOutput<T>> {
    render_surfels(&model.surfels, model.background, cam, opts)
}

/// Renders an arbitrary surfel slice against a background color.
pub fn render_surfels<T: Real>(
    surfels: &[Surfel<T>],
    background: Vec3<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
) -> Result<RenderOutput<T>> {
    check_camera(cam)?;
    let binned = bin(surfels, cam, opts);
    let ts = opts.tile_size.max(1);
    let half = T::of(0.5);
    let tiles: Vec<TileForward<T>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &binned.tiles[t];
            let mut max_w = vec![T::zero(); list.len()];
            let mut pixels = Vec::new();
            for (x, y) in tile_pixels(t, binned.tiles_x, ts, cam.width, cam.height) {
                let px = T::of_usize(x) + half;
                let py = T::of_usize(y) + half;
                let mut trans = T::one();
                let mut color = Vec3::zero();
                let mut wsum = T::zero();
                let mut dnum = T::zero();
                let mut normal = Vec3::zero();
                let mut median = T::infinity();
                for (slot, &i) in list.iter().enumerate() {
                    let p = binned.projected[i as usize].as_ref().unwrap();
                    let [x0, x1, y0, y1] = p.bbox;
                    if x < x0 || x > x1 || y < y0 || y > y1 {
                        continue;
                    }
                    let hit = p.eval(cam, opts, px, py);
                    if hit.alpha <= T::zero() {
                        continue;
                    }
                    let w = hit.alpha * trans;
                    color += p.color * w;
                    wsum += w;
                    dnum += hit.depth * w;
                    normal += p.normal_out() * w;
                    if w > max_w[slot] {
                        max_w[slot] = w;
                    }
                    let next = trans * (T::one() - hit.alpha);
                    if median.is_infinite() && T::one() - next >= half {
                        median = hit.depth;
                    }
                    trans = next;
                    if trans < opts.min_transmittance {
                        break;
                    }
                }
                let c = color + background * trans;
                let depth = if wsum > T::zero() { dnum / wsum } else { T::zero() };
                let nn = normal.normalized();
                pixels.push((x, y, [c.x, c.y, c.z, wsum, depth, median, nn.x, nn.y, nn.z, trans]));
            }
            let visible = list.iter().zip(max_w).map(|(&i, w)| (i, w)).collect();
            TileForward { pixels, visible }
        })
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: Image::new(w, h, 3),
        alpha: Image::new(w, h, 1),
        expected_depth: Image::new(w, h, 1),
        median_depth: Image::filled(w, h, 1, T::infinity()),
        normal: Image::new(w, h, 3),
        final_transmittance: Image::new(w, h, 1),
        visible: vec![false; surfels.len()],
        max_contribution: vec![T::zero(); surfels.len()],
    };
    for tile in tiles {
        for (x, y, v) in tile.pixels {
            for c in 0..3 {
                out.color.set(x, y, c, v[c]);
                out.normal.set(x, y, c, v[6 + c]);
            }
            out.alpha.set(x, y, 0, v[3]);
            out.expected_depth.set(x, y, 0, v[4]);
            out.median_depth.set(x, y, 0, v[5]);
            out.final_transmittance.set(x, y, 0, v[9]);
        }
        for (i, wmax) in tile.visible {
            let i = i as usize;
            if wmax > out.max_contribution[i] {
                out.max_contribution[i] = wmax;
            }
        }
    }
    for (vis, &m) in out.visible.iter_mut().zip(&out.max_contribution) {
        *vis = m > opts.contribution_cutoff;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
struct Accum<T> {
    g_mu: Vec3<T>,
    g_tu: Vec3<T>,
    g_tv: Vec3<T>,
    g_logs: [T; 2],
    g_opacity: T,
    g_color: Vec3<T>,
    g_mu_aux: Vec3<T>,
}

impl<T: Real> Accum<T> {
    fn zero() -> Self {
        Self {
            g_mu: Vec3::zero(),
            g_tu: Vec3::zero(),
            g_tv: Vec3::zero(),
            g_logs: [T::zero(); 2],
            g_opacity: T::zero(),
            g_color: Vec3::zero(),
            g_mu_aux: Vec3::zero(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.g_mu += o.g_mu;
        self.g_tu += o.g_tu;
        self.g_tv += o.g_tv;
        self.g_logs[0] += o.g_logs[0];
        self.g_logs[1] += o.g_logs[1];
        self.g_opacity += o.g_opacity;
        self.g_color += o.g_color;
        self.g_mu_aux += o.g_mu_aux;
    }
}

/// Output-space gradients at one pixel, already pushed through the
/// depth and normal normalizations.
#[derive(Clone, Copy)]
struct OutGrad<T> {
    color: Vec3<T>,
    dnum: T,
    wsum: T,
    normal: Vec3<T>,
}

impl<T: Real> OutGrad<T> {
    fn at(
        grads: &PixelGrads<T>,
        x: usize,
        y: usize,
        wsum: T,
        dnum: T,
        normal_raw: Vec3<T>,
    ) -> Self {
        let color = Vec3::new(grads.color.get(x, y, 0), grads.color.get(x, y, 1), grads.color.get(x, y, 2));
        let (mut gdnum, mut gwsum) = (T::zero(), T::zero());
        if let Some(dg) = &grads.depth {
            let gd = dg.get(x, y, 0);
            if wsum > T::zero() && gd != T::zero() {
                let depth = dnum / wsum;
                gdnum = gd / wsum;
                gwsum = -gd * depth / wsum;
            }
        }
        let mut gn = Vec3::zero();
        if let Some(ng) = &grads.normal {
            let g = Vec3::new(ng.get(x, y, 0), ng.get(x, y, 1), ng.get(x, y, 2));
            let len = normal_raw.norm();
            if len > T::zero() && g.norm_sq() > T::zero() {
                let nhat = normal_raw * (T::one() / len);
                gn = (g - nhat * nhat.dot(g)) * (T::one() / len);
            }
        }
        Self {
            color,
            dnum: gdnum,
            wsum: gwsum,
            normal: gn,
        }
    }

    #[inline]
    fn feature_dot(&self, color: Vec3<T>, depth: T, normal: Vec3<T>) -> T {
        self.color.dot(color) + self.dnum * depth + self.wsum + self.normal.dot(normal)
    }
}

/// Pulls the gradients on one hit's alpha and depth back to the
/// camera-space center, tangents, log-scales and plane normal.
#[inline]
fn hit_geometry_grad<T: Real>(
    p: &Projected<T>,
    hit: &Hit<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    g_alpha: T,
    g_depth: T,
) -> (Vec3<T>, Vec3<T>, Vec3<T>, [T; 2], Vec3<T>) {
    let g_ghat = g_alpha * p.opacity;
    let g = hit.ghat;
    let mut g_tu = Vec3::zero();
    let mut g_tv = Vec3::zero();
    let mut g_logs = [T::zero(); 2];
    let mut g_lambda = T::zero();
    let mut g_mu = if hit.plane {
        let (su2, sv2) = (p.su * p.su, p.sv * p.sv);
        let ga = -g_ghat * g * hit.a / su2;
        let gb = -g_ghat * g * hit.b / sv2;
        g_logs = [g_ghat * g * hit.a * hit.a / su2, g_ghat * g * hit.b * hit.b / sv2];
        g_lambda = ga * p.tu.dot(hit.d) + gb * p.tv.dot(hit.d);
        g_tu = hit.r * ga;
        g_tv = hit.r * gb;
        -(p.tu * ga) - p.tv * gb
    } else {
        let var = opts.lowpass_std * opts.lowpass_std;
        let gu = g_ghat * g * (hit.px - p.u) / var;
        let gv = g_ghat * g * (hit.py - p.v) / var;
        let z = p.mu.z;
        Vec3::new(
            gu * cam.fx / z,
            gv * cam.fy / z,
            -(gu * cam.fx * p.mu.x + gv * cam.fy * p.mu.y) / (z * z),
        )
    };
    let mut g_n = Vec3::zero();
    if hit.lambda_valid {
        g_lambda += g_depth;
        g_mu += p.n * (g_lambda / hit.ndd);
        g_n = hit.r * (-g_lambda / hit.ndd);
    } else {
        g_mu.z += g_depth;
    }
    (g_mu, g_tu, g_tv, g_logs, g_n)
}

/// Analytic adjoint of [`render_surfels`].
///
/// `aux` holds the pixel gradients of the auxiliary loss whose screen-space
/// center gradient is tracked separately (the SSIM term during training).
pub fn render_backward<T: Real>(
    surfels: &[Surfel<T>],
    background: Vec3<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    output: &RenderOutput<T>,
    grads: &PixelGrads<T>,
    aux: Option<&PixelGrads<T>>,
) -> Result<SurfelGradients<T>> {
    check_camera(cam)?;
    let (w, h) = (cam.width, cam.height);
    if output.width != w || output.height != h || output.visible.len() != surfels.len() {
        return contract("render_backward: render output does not match camera or surfel count");
    }
    let check = |g: &PixelGrads<T>, what: &str| -> Result<()> {
        if g.color.width != w || g.color.height != h || g.color.channels != 3 {
            return contract(format!("render_backward: {what} color gradient has wrong shape"));
        }
        if let Some(d) = &g.depth {
            if d.width != w || d.height != h || d.channels != 1 {
                return contract(format!("render_backward: {what} depth gradient has wrong shape"));
            }
        }
        if let Some(n) = &g.normal {
            if n.width != w || n.height != h || n.channels != 3 {
                return contract(format!("render_backward: {what} normal gradient has wrong shape"));
            }
        }
        Ok(())
    };
    check(grads, "loss")?;
    if let Some(a) = aux {
        check(a, "auxiliary")?;
    }

    let binned = bin(surfels, cam, opts);
    let ts = opts.tile_size.max(1);
    let half = T::of(0.5);
    let tile_accums: Vec<Vec<(u32, Accum<T>)>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &binned.tiles[t];
            let mut acc = vec![Accum::zero(); list.len()];
            let mut hits: Vec<(usize, Hit<T>, T)> = Vec::new();
            for (x, y) in tile_pixels(t, binned.tiles_x, ts, w, h) {
                let px = T::of_usize(x) + half;
                let py = T::of_usize(y) + half;
                hits.clear();
                let mut trans = T::one();
                let mut wsum = T::zero();
                let mut dnum = T::zero();
                let mut normal = Vec3::zero();
                for (slot, &i) in list.iter().enumerate() {
                    let p = binned.projected[i as usize].as_ref().unwrap();
                    let [x0, x1, y0, y1] = p.bbox;
                    if x < x0 || x > x1 || y < y0 || y > y1 {
                        continue;
                    }
                    let hit = p.eval(cam, opts, px, py);
                    if hit.alpha <= T::zero() {
                        continue;
                    }
                    let wgt = hit.alpha * trans;
                    wsum += wgt;
                    dnum += hit.depth * wgt;
                    normal += p.normal_out() * wgt;
                    hits.push((slot, hit, trans));
                    trans = trans * (T::one() - hit.alpha);
                    if trans < opts.min_transmittance {
                        break;
                    }
                }
                if hits.is_empty() {
                    continue;
                }
                let main = OutGrad::at(grads, x, y, wsum, dnum, normal);
                let mut rest = main.color.dot(background);
                for &(slot, ref hit, t_i) in hits.iter().rev() {
                    let p = binned.projected[list[slot] as usize].as_ref().unwrap();
                    let n_out = p.normal_out();
                    let s = main.feature_dot(p.color, hit.depth, n_out);
                    let g_alpha = t_i * (s - rest);
                    rest = s * hit.alpha + (T::one() - hit.alpha) * rest;
                    let wgt = hit.alpha * t_i;
                    let g_depth = main.dnum * wgt;
                    let (g_mu, g_tu, g_tv, g_logs, g_n) = hit_geometry_grad(p, hit, cam, opts, g_alpha, g_depth);
                    let g_nout = main.normal * wgt;
                    let g_n_total = g_n + g_nout * p.flip;
                    let a = &mut acc[slot];
                    a.g_mu += g_mu;
                    a.g_tu += g_tu + p.tv.cross(g_n_total);
                    a.g_tv += g_tv + g_n_total.cross(p.tu);
                    a.g_logs[0] += g_logs[0];
                    a.g_logs[1] += g_logs[1];
                    a.g_opacity += g_alpha * hit.ghat;
                    a.g_color += main.color * wgt;
                }
                if let Some(aux) = aux {
                    let ag = OutGrad::at(aux, x, y, wsum, dnum, normal);
                    let mut rest = ag.color.dot(background);
                    for &(slot, ref hit, t_i) in hits.iter().rev() {
                        let p = binned.projected[list[slot] as usize].as_ref().unwrap();
                        let s = ag.feature_dot(p.color, hit.depth, p.normal_out());
                        let g_alpha = t_i * (s - rest);
                        rest = s * hit.alpha + (T::one() - hit.alpha) * rest;
                        let g_depth = ag.dnum * hit.alpha * t_i;
                        let (g_mu, ..) = hit_geometry_grad(p, hit, cam, opts, g_alpha, g_depth);
                        acc[slot].g_mu_aux += g_mu;
                    }
                }
            }
            list.iter().copied().zip(acc).collect()
        })
        .collect();

    // Ordered reduction over tiles keeps results independent of thread count.
    let mut total = vec![Accum::zero(); surfels.len()];
    for tile in &tile_accums {
        for (i, a) in tile {
            total[*i as usize].add(a);
        }
    }

    let cam_center = cam.center();
    let (half_w, half_h) = (T::of_usize(w) * half, T::of_usize(h) * half);
    let mut params = Vec::with_capacity(surfels.len());
    let mut screen_total = vec![T::zero(); surfels.len()];
    let mut screen_aux = vec![T::zero(); surfels.len()];
    for (i, s) in surfels.iter().enumerate() {
        let Some(p) = binned.projected[i].as_ref() else {
            params.push(SurfelGrad::default());
            continue;
        };
        let a = &total[i];
        let mut g = SurfelGrad::default();
        // Color: SH coefficients and view direction.
        let offset = s.center - cam_center;
        let dist = offset.norm();
        let dir = offset * (T::one() / dist);
        let basis = sh_basis(dir);
        let jac = sh_basis_jacobian(dir);
        let mut g_dir = Vec3::zero();
        for c in 0..3 {
            if p.clamped[c] {
                continue;
            }
            let gc = a.g_color[c];
            for k in 0..SH_COEFFS {
                g.sh[k * 3 + c] = gc * basis[k];
                g_dir += jac[k] * (gc * s.sh[k * 3 + c]);
            }
        }
        let g_center_dir = (g_dir - dir * dir.dot(g_dir)) * (T::one() / dist);
        g.center = cam.rotation.tmul_vec(a.g_mu) + g_center_dir;
        let g_tu_w = cam.rotation.tmul_vec(a.g_tu);
        let g_tv_w = cam.rotation.tmul_vec(a.g_tv);
        g.rotation = quat_tangent_vjp(s.rotation, g_tu_w, g_tv_w);
        g.log_scales = a.g_logs;
        let op = p.opacity;
        g.opacity_logit = a.g_opacity * op * (T::one() - op);
        params.push(g);

        let z = p.mu.z;
        let screen = |gm: Vec3<T>| {
            let gx = gm.x * z / cam.fx * half_w;
            let gy = gm.y * z / cam.fy * half_h;
            (gx * gx + gy * gy).sqrt()
        };
        screen_total[i] = screen(a.g_mu);
        screen_aux[i] = screen(a.g_mu_aux);
    }
    Ok(SurfelGradients {
        params,
        screen_total,
        screen_aux,
        visible: output.visible.clone(),
    })
}

/// Visibility of each point when rendered as an opaque camera-facing disk of
/// the given radius, with depth-sorted occlusion against the other points.
pub fn render_visibility<T: Real>(
    points: &[Vec3<T>],
    cam: &Camera<T>,
    radius: T,
    opts: &RenderOptions<T>,
) -> Result<Vec<bool>> {
    if !(radius > T::zero()) {
        return contract(format!("render_visibility radius must be positive, got {radius}"));
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let center = cam.center();
    let log_r = radius.ln();
    let logit = opacity_to_logit(T::one());
    let surfels: Vec<Surfel<T>> = points
        .iter()
        .map(|&p| {
            let n = (p - center).normalized();
            let helper = if n.x.abs() < T::of(0.9) {
                Vec3::new(T::one(), T::zero(), T::zero())
            } else {
                Vec3::new(T::zero(), T::one(), T::zero())
            };
            let tu = helper.cross(n).normalized();
            let tv = n.cross(tu);
            let rot = crate::math::Mat3::from_cols(tu, tv, n);
            Surfel {
                center: p,
                rotation: Quat::from_matrix(&rot),
                log_scales: [log_r, log_r],
                opacity_logit: logit,
                sh: [T::zero(); SH_LEN],
            }
        })
        .collect();
    let out = render_surfels(&surfels, Vec3::zero(), cam, opts)?;
    Ok(out.visible)
}

/// Single-view contribution of every surfel: the mean over pixels where its
/// blend weight exceeds the cutoff of `alpha^gamma · T^(1-gamma)`, with `T`
/// the transmittance in front of it. Surfels covering no such pixel get 0.
pub fn contribution_pass<T: Real>(
    surfels: &[Surfel<T>],
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    gamma: T,
) -> Result<Vec<T>> {
    check_camera(cam)?;
    if !(gamma >= T::zero() && gamma <= T::one()) {
        return contract(format!("contribution gamma must lie in [0,1], got {gamma}"));
    }
    let binned = bin(surfels, cam, opts);
    let ts = opts.tile_size.max(1);
    let half = T::of(0.5);
    let one_minus = T::one() - gamma;
    let tiles: Vec<Vec<(u32, T, usize)>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &binned.tiles[t];
            let mut sums = vec![T::zero(); list.len()];
            let mut counts = vec![0usize; list.len()];
            for (x, y) in tile_pixels(t, binned.tiles_x, ts, cam.width, cam.height) {
                let px = T::of_usize(x) + half;
                let py = T::of_usize(y) + half;
                let mut trans = T::one();
                for (slot, &i) in list.iter().enumerate() {
                    let p = binned.projected[i as usize].as_ref().unwrap();
                    let [x0, x1, y0, y1] = p.bbox;
                    if x < x0 || x > x1 || y < y0 || y > y1 {
                        continue;
                    }
                    let hit = p.eval(cam, opts, px, py);
                    if hit.alpha <= T::zero() {
                        continue;
                    }
                    if hit.alpha * trans > opts.contribution_cutoff {
                        sums[slot] += hit.alpha.powf(gamma) * trans.powf(one_minus);
                        counts[slot] += 1;
                    }
                    trans = trans * (T::one() - hit.alpha);
                    if trans < opts.min_transmittance {
                        break;
                    }
                }
            }
            list.iter()
                .zip(sums.into_iter().zip(counts))
                .filter(|(_, (_, c))| *c > 0)
                .map(|(&i, (s, c))| (i, s, c))
                .collect()
        })
        .collect();
    let mut sums = vec![T::zero(); surfels.len()];
    let mut counts = vec![0usize; surfels.len()];
    for tile in tiles {
        for (i, s, c) in tile {
            sums[i as usize] += s;
            counts[i as usize] += c;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { T::zero() } else { s / T::of_usize(c) })
        .collect())
}
