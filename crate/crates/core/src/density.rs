//! Adaptive density control: decomposed-gradient densification, the
//! elongation filter, clone/split mechanics, culling and opacity reset.
//!
//! Every operation that changes the surfel list returns an origin map — for
//! each output surfel, `Some(i)` if it is input surfel `i` carried over
//! unchanged and `None` if it is new — so optimizer state can follow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math::Vec3;
use crate::raster::SurfelGradients;
use crate::scalar::Real;
use crate::splat::{opacity_to_logit, SceneModel, Surfel};

/// Which loss gradient drives densification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GradientSource {
    /// D-SSIM gradient rescaled by the total-loss average (the default).
    SsimOnly,
    /// Plain total-loss gradient, no rescaling.
    Total,
    /// L1 color gradient, rescaled.
    RgbOnly,
    /// D-SSIM plus depth-prior gradient, rescaled.
    SsimPlusDepth,
}

impl GradientSource {
    pub const ALL: [GradientSource; 4] = [Self::SsimOnly, Self::Total, Self::RgbOnly, Self::SsimPlusDepth];

    pub fn name(self) -> &'static str {
        match self {
            Self::SsimOnly => "SSIM_ONLY",
            Self::Total => "TOTAL",
            Self::RgbOnly => "RGB_ONLY",
            Self::SsimPlusDepth => "SSIM_PLUS_DEPTH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Densification threshold on the screen-space gradient norm (NDC units).
    pub grad_threshold: f64,
    pub omega: f64,
    pub elongation_min: f64,
    pub start_iter: u64,
    pub end_iter: u64,
    pub interval: u64,
    pub opacity_reset_interval: u64,
    pub min_opacity: f64,
    /// Candidates with max scale above this are split, else cloned.
    pub split_scale_threshold: f64,
    pub gradient_source: GradientSource,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            omega: 0.9,
            elongation_min: 0.01,
            start_iter: 500,
            end_iter: 1000,
            interval: 100,
            opacity_reset_interval: 3000,
            min_opacity: 0.005,
            split_scale_threshold: 0.05,
            gradient_source: GradientSource::SsimOnly,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return contract(format!("densify.omega must lie in (0,1], got {}", self.omega));
        }
        if !(0.0..1.0).contains(&self.elongation_min) {
            return contract(format!("densify.elongation_min must lie in [0,1), got {}", self.elongation_min));
        }
        if self.interval == 0 || self.opacity_reset_interval == 0 {
            return contract("densify intervals must be positive");
        }
        if !(self.grad_threshold >= 0.0 && self.min_opacity >= 0.0 && self.split_scale_threshold > 0.0) {
            return contract("densify thresholds must be non-negative");
        }
        Ok(())
    }

    /// Densification runs at this (1-based) iteration.
    pub fn densify_at(&self, iter: u64) -> bool {
        iter >= self.start_iter && iter <= self.end_iter && iter % self.interval == 0
    }

    pub fn reset_at(&self, iter: u64) -> bool {
        iter > 0 && iter <= self.end_iter && iter % self.opacity_reset_interval == 0
    }
}

/// Per-surfel accumulated screen-space gradient norms for both channels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAccum {
    pub total: Vec<f64>,
    pub aux: Vec<f64>,
    pub count: Vec<u32>,
    /// Summed world-space center gradient, used to orient clones.
    pub direction: Vec<Vec3<f64>>,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        Self {
            total: vec![0.0; n],
            aux: vec![0.0; n],
            count: vec![0; n],
            direction: vec![Vec3::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Adds one view's statistics for the surfels visible in it.
    pub fn add<T: Real>(&mut self, g: &SurfelGradients<T>) {
        for i in 0..self.len().min(g.visible.len()) {
            if g.visible[i] {
                self.total[i] += g.screen_total[i].f64();
                self.aux[i] += g.screen_aux[i].f64();
                self.count[i] += 1;
                self.direction[i] += g.params[i].center.cast();
            }
        }
    }

    /// Rebuilds the accumulator for a remapped surfel list; new surfels
    /// start from zero.
    pub fn remap(&self, origin: &[Option<usize>]) -> Self {
        let mut out = Self::new(origin.len());
        for (k, o) in origin.iter().enumerate() {
            if let Some(i) = *o {
                out.total[k] = self.total[i];
                out.aux[k] = self.aux[i];
                out.count[k] = self.count[i];
                out.direction[k] = self.direction[i];
            }
        }
        out
    }
}

/// Per-surfel densification norms. The rescale factor
/// `max(ω·avg_total/avg_aux, 1)` is one global scalar per round; averages run
/// over surfels observed at least once. With [`GradientSource::Total`] the
/// total channel is returned as is.
pub fn densify_gradient(acc: &GradAccum, omega: f64, source: GradientSource) -> (Vec<f64>, f64) {
    let mean = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(&acc.count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    };
    if source == GradientSource::Total {
        return (mean(&acc.total), 1.0);
    }
    let total = mean(&acc.total);
    let aux = mean(&acc.aux);
    let seen = acc.count.iter().filter(|&&c| c > 0).count();
    let factor = if seen == 0 {
        1.0
    } else {
        let at = total.iter().zip(&acc.count).filter(|(_, &c)| c > 0).map(|(v, _)| v).sum::<f64>() / seen as f64;
        let aa = aux.iter().zip(&acc.count).filter(|(_, &c)| c > 0).map(|(v, _)| v).sum::<f64>() / seen as f64;
        if aa > 0.0 {
            (omega * at / aa).max(1.0)
        } else {
            1.0
        }
    };
    (aux.into_iter().map(|v| v * factor).collect(), factor)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DensifySelection {
    pub clone: Vec<usize>,
    pub split: Vec<usize>,
}

/// Candidates exceed the gradient threshold and pass the elongation filter;
/// small ones are cloned and large ones split. `filter = false` disables the
/// elongation filter (ablation and regression runs only).
pub fn select_densify<T: Real>(surfels: &[Surfel<T>], norms: &[f64], cfg: &DensifyConfig, filter: bool) -> DensifySelection {
    let mut sel = DensifySelection::default();
    for (i, (s, &g)) in surfels.iter().zip(norms).enumerate() {
        if !(g > cfg.grad_threshold) {
            continue;
        }
        if filter && s.elongation().f64() < cfg.elongation_min {
            continue;
        }
        if s.max_scale().f64() <= cfg.split_scale_threshold {
            sel.clone.push(i);
        } else {
            sel.split.push(i);
        }
    }
    sel
}

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Applies clones and splits. Clones keep the parent and append a copy moved
/// by `0.01·max scale` against the accumulated gradient; splits replace the
/// parent by two children drawn from its disk Gaussian (truncated at 3σ) with
/// scales divided by 1.6. New surfels are appended after all survivors.
///
/// When `elongation_min` is given, any selected surfel below it is a contract
/// violation: the elongation filter must have run.
pub fn apply_densify<T: Real>(
    model: &mut SceneModel<T>,
    sel: &DensifySelection,
    acc: &GradAccum,
    elongation_min: Option<f64>,
    seed: u64,
) -> Result<Vec<Option<usize>>> {
    let n = model.len();
    let mut is_split = vec![false; n];
    let mut touched = vec![false; n];
    for &i in sel.clone.iter().chain(&sel.split) {
        if i >= n {
            return contract(format!("densify index {i} out of range for {n} surfels"));
        }
        if touched[i] {
            return contract(format!("surfel {i} selected for both clone and split"));
        }
        touched[i] = true;
        if let Some(m) = elongation_min {
            if model.surfels[i].elongation().f64() < m {
                return contract(format!("surfel {i} is below the elongation cutoff but was selected"));
            }
        }
    }
    for &i in &sel.split {
        is_split[i] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n + sel.clone.len() + sel.split.len());
    let mut origin = Vec::with_capacity(out.capacity());
    for (i, s) in model.surfels.iter().enumerate() {
        if !is_split[i] {
            out.push(*s);
            origin.push(Some(i));
        }
    }
    for &i in &sel.clone {
        let mut c = model.surfels[i];
        let dir = acc.direction.get(i).copied().unwrap_or_else(Vec3::zero);
        let len = dir.norm();
        if len > 0.0 {
            let step = T::of(0.01) * c.max_scale();
            c.center = c.center - dir.cast::<T>() * (step / T::of(len));
        }
        out.push(c);
        origin.push(None);
    }
    let ln_div = T::of(SPLIT_SCALE_DIVISOR.ln());
    for &i in &sel.split {
        let p = model.surfels[i];
        let (tu, tv) = p.tangents();
        let [su, sv] = p.scales();
        for _ in 0..2 {
            let a = truncated_normal(&mut rng);
            let b = truncated_normal(&mut rng);
            let mut c = p;
            c.center = p.center + tu * (su * T::of(a)) + tv * (sv * T::of(b));
            c.log_scales = [p.log_scales[0] - ln_div, p.log_scales[1] - ln_div];
            out.push(c);
            origin.push(None);
        }
    }
    model.surfels = out;
    Ok(origin)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Removes surfels below the opacity floor. Fails rather than empty the model.
pub fn cull<T: Real>(model: &mut SceneModel<T>, min_opacity: f64) -> Result<Vec<Option<usize>>> {
    let keep: Vec<usize> = (0..model.len())
        .filter(|&i| model.surfels[i].opacity().f64() >= min_opacity)
        .collect();
    if keep.is_empty() && !model.is_empty() {
        return contract(format!("culling at opacity {min_opacity} would remove every surfel"));
    }
    model.surfels = keep.iter().map(|&i| model.surfels[i]).collect();
    Ok(keep.into_iter().map(Some).collect())
}

/// Clamps every opacity to at most `2·min_opacity`.
pub fn reset_opacity<T: Real>(model: &mut SceneModel<T>, min_opacity: f64) {
    let cap = T::of(2.0 * min_opacity);
    let cap_logit = opacity_to_logit(cap);
    for s in &mut model.surfels {
        if s.opacity_logit > cap_logit {
            s.opacity_logit = cap_logit;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;

    fn acc_with(total: &[f64], aux: &[f64], count: &[u32]) -> GradAccum {
        GradAccum {
            total: total.to_vec(),
            aux: aux.to_vec(),
            count: count.to_vec(),
            direction: vec![Vec3::zero(); count.len()],
        }
    }

    fn surfel(scales: [f64; 2], opacity: f64) -> Surfel<f64> {
        Surfel::with_color(Vec3::new(0.1, 0.2, 0.3), Quat::identity(), scales, opacity, Vec3::splat(0.4)).unwrap()
    }

    #[test]
    fn factor_clamps_at_one() {
        // ω·avg_total/avg_aux = 0.9·(0.5/0.9) = 0.5 → factor 1.
        let acc = acc_with(&[0.5, 0.5], &[0.9, 0.9], &[1, 1]);
        let (norms, f) = densify_gradient(&acc, 0.9, GradientSource::SsimOnly);
        assert_eq!(f, 1.0);
        assert_eq!(norms, vec![0.9, 0.9]);
    }

    #[test]
    fn factor_scales_by_omega_ratio() {
        let acc = acc_with(&[2.0, 4.0], &[1.0, 2.0], &[1, 1]);
        let (norms, f) = densify_gradient(&acc, 0.9, GradientSource::SsimOnly);
        assert!((f - 1.8).abs() < 1e-15);
        assert!((norms[0] - 1.8).abs() < 1e-15 && (norms[1] - 3.6).abs() < 1e-15);
    }

    #[test]
    fn single_surfel_hand_set_accumulators() {
        let acc = acc_with(&[4.0], &[1.0], &[2]);
        let (norms, f) = densify_gradient(&acc, 0.9, GradientSource::SsimOnly);
        assert!((f - 3.6).abs() < 1e-15);
        assert!((norms[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn total_source_is_plain_total_mean() {
        let acc = acc_with(&[4.0, 3.0, 0.0], &[1.0, 0.1, 0.0], &[2, 3, 0]);
        let (norms, f) = densify_gradient(&acc, 0.9, GradientSource::Total);
        assert_eq!(f, 1.0);
        assert_eq!(norms, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_aux_average_gives_unit_factor() {
        let acc = acc_with(&[4.0], &[0.0], &[2]);
        assert_eq!(densify_gradient(&acc, 0.9, GradientSource::SsimOnly).1, 1.0);
    }

    #[test]
    fn selection_rules() {
        let cfg = DensifyConfig::default();
        let needle = surfel([0.001, 1.0], 0.9);
        let big = surfel([0.2, 0.2], 0.9);
        let small = surfel([0.01, 0.01], 0.9);
        let s = [needle, big, small, big];
        let sel = select_densify(&s, &[1.0, 1.0, 1.0, 1e-5], &cfg, true);
        assert_eq!(sel.clone, vec![2]);
        assert_eq!(sel.split, vec![1]);
        let unfiltered = select_densify(&s, &[1.0, 1.0, 1.0, 1e-5], &cfg, false);
        assert_eq!(unfiltered.split, vec![0, 1]);
    }

    #[test]
    fn apply_rejects_filtered_surfels() {
        let mut m = SceneModel::new(vec![surfel([0.001, 1.0], 0.9)], Vec3::zero());
        let sel = DensifySelection {
            clone: vec![],
            split: vec![0],
        };
        assert!(apply_densify(&mut m, &sel, &GradAccum::new(1), Some(0.01), 0).is_err());
    }

    #[test]
    fn clone_and_split_mechanics() {
        let parent = surfel([0.3, 0.2], 0.7);
        let mut m = SceneModel::new(vec![parent, surfel([0.01, 0.01], 0.5)], Vec3::zero());
        let unchanged = apply_densify(&mut m.clone(), &DensifySelection::default(), &GradAccum::new(2), None, 0).unwrap();
        assert_eq!(unchanged, vec![Some(0), Some(1)]);

        let mut acc = GradAccum::new(2);
        acc.direction[1] = Vec3::new(1.0, 0.0, 0.0);
        let sel = DensifySelection {
            clone: vec![1],
            split: vec![0],
        };
        let origin = apply_densify(&mut m, &sel, &acc, Some(0.01), 11).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(origin, vec![Some(1), None, None, None]);
        assert_eq!(m.surfels[1].sh, m.surfels[0].sh);
        assert!((m.surfels[1].center.x - (0.1 - 0.0001)).abs() < 1e-12);
        for c in &m.surfels[2..] {
            let [su, sv] = c.scales();
            assert!((su - 0.3 / 1.6).abs() < 1e-12 && (sv - 0.2 / 1.6).abs() < 1e-12);
            assert!((c.opacity() - 0.7).abs() < 1e-12);
            let d = c.center - parent.center;
            assert!(d.z.abs() < 1e-12, "children stay on the disk plane");
            assert!(d.x.abs() <= 3.0 * 0.3 + 1e-12 && d.y.abs() <= 3.0 * 0.2 + 1e-12);
        }
    }

    #[test]
    fn cull_and_reset() {
        let mut m = SceneModel::new(vec![surfel([0.1, 0.1], 0.9); 3], Vec3::zero());
        assert_eq!(cull(&mut m, 0.005).unwrap().len(), 3);
        m.surfels[1].set_opacity(0.001);
        let origin = cull(&mut m, 0.005).unwrap();
        assert_eq!(origin, vec![Some(0), Some(2)]);
        reset_opacity(&mut m, 0.005);
        assert!(m.surfels.iter().all(|s| s.opacity() <= 0.01 + 1e-12));
        m.surfels.iter_mut().for_each(|s| s.set_opacity(0.001));
        assert!(cull(&mut m, 0.005).is_err());
    }

    #[test]
    fn remap_follows_origin() {
        let mut acc = GradAccum::new(3);
        acc.total = vec![1.0, 2.0, 3.0];
        acc.count = vec![1, 1, 1];
        let r = acc.remap(&[Some(2), None, Some(0)]);
        assert_eq!(r.total, vec![3.0, 0.0, 1.0]);
        assert_eq!(r.count, vec![1, 0, 1]);
    }

    proptest::proptest! {
        #[test]
        fn rescaled_norms_never_fall_below_raw(
            vals in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0u32..5), 1..40),
            omega in 0.01f64..=1.0,
        ) {
            let total: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let aux: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let count: Vec<u32> = vals.iter().map(|v| v.2).collect();
            let acc = acc_with(&total, &aux, &count);
            let (norms, f) = densify_gradient(&acc, omega, GradientSource::SsimOnly);
            proptest::prop_assert!(f >= 1.0);
            for i in 0..norms.len() {
                let raw = if count[i] == 0 { 0.0 } else { aux[i] / count[i] as f64 };
                proptest::prop_assert!(norms[i] >= raw);
            }
        }
    }
}
