//! Per-surfel contribution scores and percentile trimming.

use crate::error::{contract, Result};
use crate::raster::{contribution_pass, RenderOptions};
use crate::scalar::Real;
use crate::splat::{Camera, SceneModel, Surfel};

pub const DEFAULT_GAMMA: f64 = 0.5;

/// Running sums of single-view contributions over a set of views.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionStats {
    pub sums: Vec<f64>,
    pub views: usize,
    pub gamma: f64,
}

impl ContributionStats {
    pub fn new(count: usize, gamma: f64) -> Self {
        Self {
            sums: vec![0.0; count],
            views: 0,
            gamma,
        }
    }

    pub fn add_view<T: Real>(&mut self, single: &[T]) -> Result<()> {
        if single.len() != self.sums.len() {
            return contract(format!(
                "contribution vector has {} entries, expected {}",
                single.len(),
                self.sums.len()
            ));
        }
        for (s, v) in self.sums.iter_mut().zip(single) {
            *s += v.f64();
        }
        self.views += 1;
        Ok(())
    }
}

/// Contribution of every surfel in `surfels` to one view.
pub fn single_view_contribution<T: Real>(
    surfels: &[Surfel<T>],
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    gamma: f64,
) -> Result<Vec<T>> {
    contribution_pass(surfels, cam, opts, T::of(gamma))
}

/// Mean of the accumulated single-view contributions.
pub fn average_contribution(stats: &ContributionStats) -> Result<Vec<f64>> {
    if stats.views == 0 {
        return contract("average_contribution needs at least one view");
    }
    let n = stats.views as f64;
    Ok(stats.sums.iter().map(|s| s / n).collect())
}

/// Accumulates contributions over `cameras`, views in order.
pub fn accumulate_contribution<T: Real>(
    surfels: &[Surfel<T>],
    cameras: &[&Camera<T>],
    opts: &RenderOptions<T>,
    gamma: f64,
) -> Result<ContributionStats> {
    let mut stats = ContributionStats::new(surfels.len(), gamma);
    for cam in cameras {
        stats.add_view(&single_view_contribution(surfels, cam, opts, gamma)?)?;
    }
    Ok(stats)
}

/// Nearest-rank `ratio` quantile: the `ceil(ratio·n)`-th smallest value, or
/// zero for `ratio = 0`.
pub fn nearest_rank_threshold(values: &[f64], ratio: f64) -> f64 {
    let k = (ratio * values.len() as f64).ceil() as usize;
    if k == 0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k.min(sorted.len()) - 1]
}

/// Indices of the surfels kept by trimming at `ratio`: everything strictly
/// above the threshold.
pub fn trim_keep(contributions: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&ratio) {
        return contract(format!("trim ratio must lie in [0,1), got {ratio}"));
    }
    let t = nearest_rank_threshold(contributions, ratio);
    let keep: Vec<usize> = (0..contributions.len()).filter(|&i| contributions[i] > t).collect();
    if keep.is_empty() && !contributions.is_empty() {
        return contract(format!("trimming at ratio {ratio} (threshold {t}) would remove every surfel"));
    }
    Ok(keep)
}

/// Removes every surfel whose contribution is at or below the nearest-rank
/// quantile; returns the origin map of the survivors.
pub fn trim<T: Real>(model: &mut SceneModel<T>, contributions: &[f64], ratio: f64) -> Result<Vec<Option<usize>>> {
    if contributions.len() != model.len() {
        return contract(format!(
            "{} contributions for {} surfels",
            contributions.len(),
            model.len()
        ));
    }
    let keep = trim_keep(contributions, ratio)?;
    model.surfels = keep.iter().map(|&i| model.surfels[i]).collect();
    Ok(keep.into_iter().map(Some).collect())
}
