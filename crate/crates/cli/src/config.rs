//! Run configuration: flat `section.key = value` text or a JSON mirror,
//! layered over built-in defaults. Unknown keys and out-of-range values are
//! rejected with the exact field name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use scv2_core::density::DensifyConfig;
use scv2_core::geo::EvalConfig;
use scv2_core::mesh::MeshConfig;
use scv2_core::objective::LossWeights;
use scv2_core::scenegen::SceneSpec;
use scv2_core::train::{LearningRates, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub iterations: u64,
    pub elongation_filter: bool,
    pub max_surfels: usize,
    /// Test-view metrics every this many iterations (0 = end only).
    pub log_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimSection {
    /// Ratio used at the start and midway through block tuning.
    pub tune_ratio: f64,
    /// Ratio of the standalone post-merge trim.
    pub post_ratio: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlocksSection {
    pub grid: [usize; 2],
    pub epsilon: f64,
    pub tune_iterations: u64,
    /// Foreground box `[xmin, ymin, zmin, xmax, ymax, zmax]`; `null` = central third.
    pub foreground: Option<[f64; 6]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressSection {
    pub ratio: f64,
    pub codebook_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSection {
    pub voxel: Option<f64>,
    pub truncation_voxels: f64,
    pub depth_truncation: f64,
    /// Fusion bounds `[xmin, ymin, zmin, xmax, ymax, zmax]`; `null` = robust
    /// bounds of the surfel centers.
    pub bounds: Option<[f64; 6]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 = all cores.
    pub threads: usize,
    pub scene: SceneSpec,
    pub train: TrainSection,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    pub trim: TrimSection,
    pub blocks: BlocksSection,
    pub compress: CompressSection,
    pub mesh: MeshSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        // Desk-scale schedule: the splatting defaults compressed from 30k to
        // 2k iterations.
        let loss = LossWeights {
            normal_from_iter: 500,
            total_iters: 2000,
            ..LossWeights::default()
        };
        Self {
            seed: 7,
            threads: 0,
            scene: SceneSpec::default(),
            train: TrainSection {
                iterations: 2000,
                elongation_filter: true,
                max_surfels: 200_000,
                log_every: 500,
            },
            lr: LearningRates::default(),
            loss,
            densify: DensifyConfig::default(),
            trim: TrimSection {
                tune_ratio: 0.1,
                post_ratio: 0.1,
                gamma: scv2_core::contribution::DEFAULT_GAMMA,
            },
            blocks: BlocksSection {
                grid: [2, 2],
                epsilon: 0.05,
                tune_iterations: 500,
                foreground: None,
            },
            compress: CompressSection {
                ratio: 0.4,
                codebook_size: 8192,
            },
            mesh: MeshSection {
                voxel: None,
                truncation_voxels: 4.0,
                depth_truncation: 250.0,
                bounds: None,
            },
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Overwrites `path` inside `root`; every segment must already exist.
fn set_path(root: &mut Value, path: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("config key `{path}`: `{}` is not a section", parts[..i].join("."))))?;
        cur = obj.get_mut(*p).ok_or_else(|| config_err(format!("unknown config key `{path}`")))?;
    }
    *cur = v;
    Ok(())
}

/// Recursively overlays `src` onto `dst`, rejecting unknown keys.
fn overlay(dst: &mut Value, src: &Value, prefix: &str) -> Result<(), CliError> {
    match src {
        Value::Object(m) => {
            for (k, v) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = dst
                    .as_object_mut()
                    .and_then(|o| o.get_mut(k))
                    .ok_or_else(|| config_err(format!("unknown config key `{path}`")))?;
                if v.is_object() && slot.is_object() {
                    overlay(slot, v, &path)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        _ => Err(config_err("JSON config must be an object")),
    }
}

/// Parses a right-hand side: any JSON literal, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl RunConfig {
    /// Parses text in either format (JSON if it starts with `{`).
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut v = serde_json::to_value(Self::default()).expect("defaults serialize");
        if text.trim_start().starts_with('{') {
            let src: Value = serde_json::from_str(text).map_err(|e| config_err(format!("config JSON: {e}")))?;
            overlay(&mut v, &src, "")?;
        } else {
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, val) = line
                    .split_once('=')
                    .ok_or_else(|| config_err(format!("config line {}: expected `key = value`", n + 1)))?;
                set_path(&mut v, k.trim(), parse_value(val.trim()))?;
            }
        }
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, val) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{assignment}`: expected `key=value`")))?;
        let mut v = serde_json::to_value(&*self).expect("config serializes");
        set_path(&mut v, k.trim(), parse_value(val.trim()))?;
        *self = Self::from_value(v)?;
        Ok(())
    }

    fn from_value(v: Value) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key = value` rendering, one line per leaf, keys sorted.
    pub fn to_text(&self) -> String {
        fn walk(v: &Value, prefix: &str, out: &mut String) {
            match v {
                Value::Object(m) => {
                    for (k, v) in m {
                        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(v, &p, out);
                    }
                }
                Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
                _ => out.push_str(&format!("{prefix} = {v}\n")),
            }
        }
        let mut out = String::new();
        walk(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }

    /// Field-exact range checks.
    pub fn validate(&self) -> Result<(), CliError> {
        fn check(ok: bool, field: &str, value: impl std::fmt::Display, rule: &str) -> Result<(), CliError> {
            if ok {
                Ok(())
            } else {
                Err(config_err(format!("config field `{field}` = {value} is out of range: must be {rule}")))
            }
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();

        self.scene.validate().map_err(|e| config_err(format!("config section `scene`: {e}")))?;
        check(self.train.max_surfels >= 1, "train.max_surfels", self.train.max_surfels, "≥ 1")?;
        for (f, v) in [
            ("lr.position", self.lr.position),
            ("lr.position_final", self.lr.position_final),
            ("lr.sh", self.lr.sh),
            ("lr.opacity", self.lr.opacity),
            ("lr.scale", self.lr.scale),
            ("lr.rotation", self.lr.rotation),
        ] {
            check(pos(v), f, v, "> 0")?;
        }
        let l = &self.loss;
        check((0.0..=1.0).contains(&l.lambda_ssim), "loss.lambda_ssim", l.lambda_ssim, "in [0, 1]")?;
        check(nonneg(l.depth_start), "loss.depth_start", l.depth_start, "≥ 0")?;
        check(nonneg(l.depth_end), "loss.depth_end", l.depth_end, "≥ 0")?;
        check(nonneg(l.normal), "loss.normal", l.normal, "≥ 0")?;
        l.validate().map_err(|e| config_err(format!("config section `loss`: {e}")))?;
        let d = &self.densify;
        check(pos(d.grad_threshold), "densify.grad_threshold", d.grad_threshold, "> 0")?;
        check(d.omega > 0.0 && d.omega <= 1.0, "densify.omega", d.omega, "in (0, 1]")?;
        check(unit(d.elongation_min), "densify.elongation_min", d.elongation_min, "in [0, 1)")?;
        check(d.interval >= 1, "densify.interval", d.interval, "≥ 1")?;
        check(d.opacity_reset_interval >= 1, "densify.opacity_reset_interval", d.opacity_reset_interval, "≥ 1")?;
        check(unit(d.min_opacity), "densify.min_opacity", d.min_opacity, "in [0, 1)")?;
        check(pos(d.split_scale_threshold), "densify.split_scale_threshold", d.split_scale_threshold, "> 0")?;
        check(unit(self.trim.tune_ratio), "trim.tune_ratio", self.trim.tune_ratio, "in [0, 1)")?;
        check(unit(self.trim.post_ratio), "trim.post_ratio", self.trim.post_ratio, "in [0, 1)")?;
        check(pos(self.trim.gamma), "trim.gamma", self.trim.gamma, "> 0")?;
        let b = &self.blocks;
        check(b.grid[0] >= 1 && b.grid[1] >= 1, "blocks.grid", format!("{:?}", b.grid), "≥ 1 in both dimensions")?;
        check(b.epsilon > 0.0 && b.epsilon < 1.0, "blocks.epsilon", b.epsilon, "in (0, 1)")?;
        if let Some(f) = b.foreground {
            check((0..3).all(|a| f[a] < f[a + 3]), "blocks.foreground", format!("{f:?}"), "a box with min < max per axis")?;
        }
        check(unit(self.compress.ratio), "compress.ratio", self.compress.ratio, "in [0, 1)")?;
        check(self.compress.codebook_size >= 1, "compress.codebook_size", self.compress.codebook_size, "≥ 1")?;
        let m = &self.mesh;
        if let Some(v) = m.voxel {
            check(pos(v), "mesh.voxel", v, "> 0")?;
        }
        check(pos(m.truncation_voxels), "mesh.truncation_voxels", m.truncation_voxels, "> 0")?;
        check(pos(m.depth_truncation), "mesh.depth_truncation", m.depth_truncation, "> 0")?;
        if let Some(f) = m.bounds {
            check((0..3).all(|a| f[a] < f[a + 3]), "mesh.bounds", format!("{f:?}"), "a box with min < max per axis")?;
        }
        let e = &self.eval;
        if let Some(t) = e.tau {
            check(pos(t), "eval.tau", t, "> 0")?;
        }
        check(pos(e.tau_range[0]) && e.tau_range[0] <= e.tau_range[1], "eval.tau_range", format!("{:?}", e.tau_range), "0 < lo ≤ hi")?;
        check(e.samples >= 1, "eval.samples", e.samples, "≥ 1")?;
        check(nonneg(e.downsample), "eval.downsample", e.downsample, "≥ 0")?;
        check(e.crop_cfg.vis_threshold >= 1, "eval.crop_cfg.vis_threshold", e.crop_cfg.vis_threshold, "≥ 1")?;
        if let Some(a) = e.crop_cfg.alpha {
            check(pos(a), "eval.crop_cfg.alpha", a, "> 0")?;
        }
        check(pos(e.crop_cfg.point_radius), "eval.crop_cfg.point_radius", e.crop_cfg.point_radius, "> 0")?;
        check(nonneg(e.crop_cfg.z_margin), "eval.crop_cfg.z_margin", e.crop_cfg.z_margin, "≥ 0")?;
        Ok(())
    }

    /// Pretraining configuration.
    pub fn train_config(&self, scene_extent: f64) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            lr: self.lr,
            loss: self.loss,
            densify: self.densify,
            elongation_filter: self.train.elongation_filter,
            max_surfels: self.train.max_surfels,
            trim: None,
            scene_extent,
            seed: self.seed,
        }
    }

    pub fn mesh_config(&self) -> MeshConfig {
        MeshConfig {
            voxel: self.mesh.voxel,
            truncation_voxels: self.mesh.truncation_voxels,
            depth_truncation: self.mesh.depth_truncation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
        let c = RunConfig::parse("# comment\ndensify.omega = 0.5\ndensify.gradient_source = TOTAL\nblocks.grid = [3, 1]\n").unwrap();
        assert_eq!(c.densify.omega, 0.5);
        assert_eq!(c.blocks.grid, [3, 1]);
        assert_eq!(format!("{:?}", c.densify.gradient_source), "Total");
        let j = RunConfig::parse(r#"{"densify": {"omega": 0.25}, "seed": 3}"#).unwrap();
        assert_eq!((j.densify.omega, j.seed), (0.25, 3));
    }

    #[test]
    fn field_exact_errors() {
        let msg = |t: &str| RunConfig::parse(t).unwrap_err().to_string();
        assert!(msg("densify.omega = -1").contains("`densify.omega`"));
        assert!(msg("densify.bogus = 1").contains("unknown config key `densify.bogus`"));
        assert!(msg(r#"{"trim": {"post_ratio": 1.5}}"#).contains("`trim.post_ratio`"));
        assert!(msg(r#"{"nope": 1}"#).contains("`nope`"));
        assert!(msg("compress.ratio").contains("line 1"));
        assert!(matches!(RunConfig::parse("blocks.grid = [0, 2]"), Err(CliError::Config(_))));
    }
}
