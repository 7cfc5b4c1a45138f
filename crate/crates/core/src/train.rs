//! The optimization loop shared by pretraining and block tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contribution::{average_contribution, ContributionStats, DEFAULT_GAMMA};
use crate::density::{apply_densify, cull, densify_gradient, reset_opacity, select_densify, DensifyConfig, GradAccum, GradientSource};
use crate::error::{contract, Error, Result};
use crate::image::{psnr, Image};
use crate::math::{Quat, Vec3};
use crate::objective::{depth_loss, depth_normals, inverse_depth, inverse_depth_grad, normal_loss, photometric_loss, DepthPrior, LossWeights};
use crate::raster::{contribution_pass, render_backward, render_surfels, PixelGrads, RenderOptions, SurfelGrad};
use crate::scalar::Real;
use crate::spatial::KdTree;
use crate::splat::{sh_from_rgb, Camera, SceneModel, Surfel, SH_LEN};

/// Number of scalar parameters per surfel.
pub const PARAMS: usize = 3 + 4 + 2 + 1 + SH_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Position rate as a fraction of the scene extent.
    pub position: f64,
    /// Position rate multiplier reached at the last iteration.
    pub position_final: f64,
    /// Rate of the DC color coefficients; higher bands use `sh / 20`.
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 0.01,
            sh: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    /// Rates for block tuning: position reduced by 60 %, scale by 20 %.
    pub fn tuning(&self) -> Self {
        Self {
            position: self.position * 0.4,
            scale: self.scale * 0.8,
            ..*self
        }
    }

    fn per_param(&self, extent: f64, progress: f64) -> [f64; PARAMS] {
        let mut lr = [0.0; PARAMS];
        let pos = self.position * extent * self.position_final.powf(progress.clamp(0.0, 1.0));
        lr[..3].fill(pos);
        lr[3..7].fill(self.rotation);
        lr[7..9].fill(self.scale);
        lr[9] = self.opacity;
        lr[10..13].fill(self.sh);
        lr[13..].fill(self.sh / 20.0);
        lr
    }
}

/// When and how hard to trim during a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimSchedule {
    pub ratio: f64,
    /// Trim before the first iteration.
    pub at_start: bool,
    /// Also trim every this many iterations (0 = never).
    pub every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    pub elongation_filter: bool,
    /// Hard surfel cap; exceeding it aborts with [`Error::CountExplosion`].
    pub max_surfels: usize,
    pub trim: Option<TrimSchedule>,
    pub scene_extent: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            densify: DensifyConfig::default(),
            elongation_filter: true,
            max_surfels: 200_000,
            trim: None,
            scene_extent: 1.0,
            seed: 0,
        }
    }
}

/// One training image with its camera and optional depth prior.
#[derive(Clone, Debug)]
pub struct TrainView<T> {
    pub camera: Camera<T>,
    pub image: Image<T>,
    pub depth_prior: Option<DepthPrior<T>>,
}

/// First and second moment estimates for every surfel parameter.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<[f32; PARAMS]>,
    v: Vec<[f32; PARAMS]>,
    pub step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; PARAMS]; n],
            v: vec![[0.0; PARAMS]; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |src: &[[f32; PARAMS]]| -> Vec<[f32; PARAMS]> {
            origin.iter().map(|o| o.map_or([0.0; PARAMS], |i| src[i])).collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    pub fn update<T: Real>(&mut self, surfels: &mut [Surfel<T>], grads: &[SurfelGrad<T>], lr: &[f64; PARAMS]) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - BETA2.powi(self.step.min(i32::MAX as u64) as i32);
        for ((s, g), (m, v)) in surfels.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let gv = flatten_grad(g);
            let mut p = flatten(s);
            for k in 0..PARAMS {
                let gk = gv[k];
                let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * gk;
                let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                p[k] -= lr[k] * (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
            }
            unflatten(s, &p);
        }
    }
}

fn flatten<T: Real>(s: &Surfel<T>) -> [f64; PARAMS] {
    let mut p = [0.0; PARAMS];
    p[0] = s.center.x.f64();
    p[1] = s.center.y.f64();
    p[2] = s.center.z.f64();
    let q = s.rotation.to_array();
    for k in 0..4 {
        p[3 + k] = q[k].f64();
    }
    p[7] = s.log_scales[0].f64();
    p[8] = s.log_scales[1].f64();
    p[9] = s.opacity_logit.f64();
    for k in 0..SH_LEN {
        p[10 + k] = s.sh[k].f64();
    }
    p
}

fn unflatten<T: Real>(s: &mut Surfel<T>, p: &[f64; PARAMS]) {
    s.center = Vec3::new(T::of(p[0]), T::of(p[1]), T::of(p[2]));
    s.rotation = Quat::from_array([T::of(p[3]), T::of(p[4]), T::of(p[5]), T::of(p[6])]);
    s.log_scales = [T::of(p[7]), T::of(p[8])];
    s.opacity_logit = T::of(p[9]);
    for k in 0..SH_LEN {
        s.sh[k] = T::of(p[10 + k]);
    }
}

fn flatten_grad<T: Real>(g: &SurfelGrad<T>) -> [f64; PARAMS] {
    let mut p = [0.0; PARAMS];
    p[0] = g.center.x.f64();
    p[1] = g.center.y.f64();
    p[2] = g.center.z.f64();
    for k in 0..4 {
        p[3 + k] = g.rotation[k].f64();
    }
    p[7] = g.log_scales[0].f64();
    p[8] = g.log_scales[1].f64();
    p[9] = g.opacity_logit.f64();
    for k in 0..SH_LEN {
        p[10 + k] = g.sh[k].f64();
    }
    p
}

/// Initial surfels from a colored point cloud: isotropic scale equal to the
/// mean distance to the three nearest neighbors, opacity 0.1, DC color only.
pub fn init_from_points<T: Real>(points: &[Vec3<f64>], colors: &[Vec3<f64>], background: Vec3<T>) -> Result<SceneModel<T>> {
    if points.is_empty() {
        return contract("cannot initialize from an empty point cloud");
    }
    if colors.len() != points.len() {
        return contract(format!("{} colors for {} points", colors.len(), points.len()));
    }
    let tree = KdTree::new(points);
    let mut surfels = Vec::with_capacity(points.len());
    for (i, (p, c)) in points.iter().zip(colors).enumerate() {
        let nn = tree.knn(*p, 3, Some(i));
        let mut d = if nn.is_empty() {
            0.01
        } else {
            nn.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / nn.len() as f64
        };
        if !(d > 1e-7) {
            d = 1e-7;
        }
        let s = Surfel::new(p.cast(), Quat::identity(), [T::of(d), T::of(d)], T::of(0.1), sh_from_rgb(c.cast()))?;
        surfels.push(s);
    }
    Ok(SceneModel::new(surfels, background))
}

/// Per-iteration record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global (model) iteration after this step.
    pub iteration: u64,
    pub view: usize,
    pub loss: f64,
    pub psnr: f64,
    pub count: usize,
    pub densify_factor: Option<f64>,
}

/// Optimizes `model` (the trainable surfels) against `views`, rendering in
/// front of an optional frozen `context`.
pub struct Trainer<'a, T: Real> {
    pub model: SceneModel<T>,
    context: &'a [Surfel<T>],
    views: Vec<&'a TrainView<T>>,
    pub cfg: TrainConfig,
    pub opts: RenderOptions<T>,
    adam: Adam,
    acc: GradAccum,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    local_iter: u64,
    densify_rounds: u64,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: SceneModel<T>, context: &'a [Surfel<T>], views: Vec<&'a TrainView<T>>, cfg: TrainConfig) -> Result<Self> {
        cfg.loss.validate()?;
        cfg.densify.validate()?;
        if views.is_empty() && cfg.iterations > 0 {
            return contract("training needs at least one view");
        }
        if model.is_empty() {
            return contract("training needs at least one surfel");
        }
        let n = model.len();
        Ok(Self {
            model,
            context,
            views,
            cfg,
            opts: RenderOptions::default(),
            adam: Adam::new(n),
            acc: GradAccum::new(n),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: Vec::new(),
            cursor: 0,
            local_iter: 0,
            densify_rounds: 0,
        })
    }

    pub fn local_iteration(&self) -> u64 {
        self.local_iter
    }

    pub fn densify_rounds(&self) -> u64 {
        self.densify_rounds
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn scene(&self) -> Vec<Surfel<T>> {
        let mut all = Vec::with_capacity(self.model.len() + self.context.len());
        all.extend_from_slice(&self.model.surfels);
        all.extend_from_slice(self.context);
        all
    }

    fn apply_origin(&mut self, origin: &[Option<usize>]) {
        self.adam.remap(origin);
        self.acc = self.acc.remap(origin);
    }

    /// Contribution-based trimming of the trainable surfels over all views.
    pub fn trim_now(&mut self, ratio: f64) -> Result<usize> {
        let all = self.scene();
        let n = self.model.len();
        let mut stats = ContributionStats::new(n, DEFAULT_GAMMA);
        for v in &self.views {
            let c = contribution_pass(&all, &v.camera, &self.opts, T::of(DEFAULT_GAMMA))?;
            stats.add_view(&c[..n])?;
        }
        let avg = average_contribution(&stats)?;
        let before = n;
        let origin = crate::contribution::trim(&mut self.model, &avg, ratio)?;
        self.apply_origin(&origin);
        Ok(before - self.model.len())
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.local_iter == 0 {
            if let Some(t) = self.cfg.trim {
                if t.at_start {
                    self.trim_now(t.ratio)?;
                }
            }
        }
        self.local_iter += 1;
        let it = self.local_iter;
        let progress = it as f64 / self.cfg.iterations.max(1) as f64;
        let vi = self.next_view();
        let view = self.views[vi];
        let all = self.scene();
        let out = render_surfels(&all, self.model.background, &view.camera, &self.opts)?;
        let photo = photometric_loss(&out.color, &view.image, self.cfg.loss.lambda_ssim)?;
        let mut loss = photo.loss;
        let (w, h) = (view.camera.width, view.camera.height);

        let mut depth_grad: Option<Image<T>> = None;
        let dw = self.cfg.loss.depth_weight(it);
        if let (Some(prior), true) = (&view.depth_prior, dw > 0.0) {
            let inv = inverse_depth(&out.expected_depth, &out.alpha);
            let dl = depth_loss(&inv, prior, Some(&out.alpha), it, &self.cfg.loss)?;
            loss += dl.loss;
            if !dl.empty_mask {
                depth_grad = Some(inverse_depth_grad(&out.expected_depth, &dl.grad));
            }
        }
        let mut normal_grad = None;
        let nw = self.cfg.loss.normal_weight(it);
        if nw > 0.0 {
            let dn = depth_normals(&out.expected_depth, &view.camera);
            let nl = normal_loss(&out.normal, &dn, &out.alpha, nw)?;
            loss += nl.loss;
            normal_grad = Some(nl.grad);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at iteration {it}")));
        }

        let total = PixelGrads {
            color: photo.grad.clone(),
            depth: depth_grad.clone(),
            normal: normal_grad,
        };
        let source = self.cfg.densify.gradient_source;
        let densifying = it <= self.cfg.densify.end_iter;
        let aux = match (densifying, source) {
            (false, _) | (_, GradientSource::Total) => None,
            (_, GradientSource::SsimOnly) => Some(PixelGrads {
                color: photo.ssim_grad.clone(),
                depth: None,
                normal: None,
            }),
            (_, GradientSource::RgbOnly) => {
                let mut c = photo.grad.clone();
                for (g, s) in c.data.iter_mut().zip(&photo.ssim_grad.data) {
                    *g -= *s;
                }
                Some(PixelGrads {
                    color: c,
                    depth: None,
                    normal: None,
                })
            }
            (_, GradientSource::SsimPlusDepth) => Some(PixelGrads {
                color: photo.ssim_grad.clone(),
                depth: depth_grad.or_else(|| Some(Image::new(w, h, 1))),
                normal: None,
            }),
        };
        let grads = render_backward(&all, self.model.background, &view.camera, &self.opts, &out, &total, aux.as_ref())?;
        let n = self.model.len();
        if grads.params[..n].iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient at iteration {it}")));
        }
        if densifying {
            self.acc.add(&grads);
        }
        let lr = self.cfg.lr.per_param(self.cfg.scene_extent, progress);
        self.adam.update(&mut self.model.surfels, &grads.params[..n], &lr);

        let mut factor = None;
        if self.cfg.densify.densify_at(it) {
            factor = Some(self.densify(it)?);
        }
        if self.cfg.densify.reset_at(it) {
            reset_opacity(&mut self.model, self.cfg.densify.min_opacity);
        }
        if let Some(t) = self.cfg.trim {
            if t.every > 0 && it % t.every == 0 && it < self.cfg.iterations {
                self.trim_now(t.ratio)?;
            }
        }
        self.model.advance_to(self.model.iteration + 1);
        Ok(StepStats {
            iteration: self.model.iteration,
            view: vi,
            loss,
            psnr: psnr(&out.color, &view.image)?,
            count: self.model.len(),
            densify_factor: factor,
        })
    }

    fn densify(&mut self, it: u64) -> Result<f64> {
        let d = self.cfg.densify;
        let (norms, factor) = densify_gradient(&self.acc, d.omega, d.gradient_source);
        let filter = self.cfg.elongation_filter;
        let sel = select_densify(&self.model.surfels, &norms, &d, filter);
        let seed = self.cfg.seed ^ it.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let origin = apply_densify(&mut self.model, &sel, &self.acc, filter.then_some(d.elongation_min), seed)?;
        self.adam.remap(&origin);
        let origin = cull(&mut self.model, d.min_opacity)?;
        self.adam.remap(&origin);
        self.acc = GradAccum::new(self.model.len());
        self.densify_rounds += 1;
        if self.model.len() > self.cfg.max_surfels {
            return Err(Error::CountExplosion {
                count: self.model.len(),
                cap: self.cfg.max_surfels,
                round: self.densify_rounds as usize,
            });
        }
        Ok(factor)
    }

    /// Runs the remaining iterations, reporting every step to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        while self.local_iter < self.cfg.iterations {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }

    pub fn into_model(self) -> SceneModel<T> {
        self.model
    }
}

/// Mean PSNR of `model` over `views`.
pub fn mean_psnr<T: Real>(model: &SceneModel<T>, views: &[&TrainView<T>], opts: &RenderOptions<T>) -> Result<f64> {
    if views.is_empty() {
        return contract("mean_psnr needs at least one view");
    }
    let mut sum = 0.0;
    for v in views {
        let out = render_surfels(&model.surfels, model.background, &v.camera, opts)?;
        sum += psnr(&out.color, &v.image)?;
    }
    Ok(sum / views.len() as f64)
}
