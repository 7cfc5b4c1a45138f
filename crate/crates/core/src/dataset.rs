//! Loading a dataset directory: `images/`, `cameras.json`, `points3d.ply`
//! and `depth_priors/` (PFM + JSON sidecar).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{read_json, read_pfm, read_ply_points, read_png, CamerasFile, PointCloud};
use crate::math::Vec3;
use crate::objective::{align_depth_prior, DepthPrior};
use crate::scalar::Real;
use crate::scenegen::PriorSidecar;
use crate::splat::Camera;
use crate::train::TrainView;

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub root: PathBuf,
    pub train: Vec<TrainView<T>>,
    pub test: Vec<TrainView<T>>,
    pub points: PointCloud,
}

fn missing(path: &Path) -> Error {
    Error::Format(format!("missing artifact {}", path.display()))
}

impl<T: Real> Dataset<T> {
    /// Loads every view; depth priors are optional per view and aligned to
    /// their sidecar samples.
    pub fn load(root: &Path) -> Result<Self> {
        let cams_path = root.join("cameras.json");
        if !cams_path.exists() {
            return Err(missing(&cams_path));
        }
        let cams: CamerasFile = read_json(&cams_path)?;
        let pts_path = root.join("points3d.ply");
        if !pts_path.exists() {
            return Err(missing(&pts_path));
        }
        let points = read_ply_points(&pts_path)?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for rec in &cams.cameras {
            let camera: Camera<T> = rec.camera()?;
            let image = read_png(&root.join(&rec.image))?;
            if image.width != camera.width || image.height != camera.height {
                return Err(Error::Format(format!(
                    "image {} is {}×{}, camera {} expects {}×{}",
                    rec.image, image.width, image.height, rec.id, camera.width, camera.height
                )));
            }
            let stem = Path::new(&rec.image).file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let prior = load_prior(root, &stem, rec.id)?;
            let view = TrainView {
                camera,
                image,
                depth_prior: prior,
            };
            match rec.split.as_str() {
                "test" => test.push(view),
                _ => train.push(view),
            }
        }
        if train.is_empty() {
            return Err(Error::Format(format!("{} has no training views", cams_path.display())));
        }
        Ok(Self {
            root: root.to_owned(),
            train,
            test,
            points,
        })
    }

    pub fn train_refs(&self) -> Vec<&TrainView<T>> {
        self.train.iter().collect()
    }

    pub fn test_refs(&self) -> Vec<&TrainView<T>> {
        self.test.iter().collect()
    }

    pub fn cameras(&self) -> Vec<&Camera<T>> {
        self.train.iter().map(|v| &v.camera).collect()
    }

    pub fn colors(&self) -> Vec<Vec3<f64>> {
        self.points.colors.clone().unwrap_or_else(|| vec![Vec3::splat(0.5); self.points.len()])
    }

    /// 1.1 × the largest camera distance from the camera centroid.
    pub fn scene_extent(&self) -> f64 {
        let centers: Vec<Vec3<f64>> = self.train.iter().chain(&self.test).map(|v| v.camera.center().cast()).collect();
        let mean = centers.iter().fold(Vec3::zero(), |a, c| a + *c) * (1.0 / centers.len() as f64);
        1.1 * centers.iter().map(|c| (*c - mean).norm()).fold(0.0, f64::max).max(1e-6)
    }

    /// Drops depth priors entirely.
    pub fn without_priors(mut self) -> Self {
        for v in &mut self.train {
            v.depth_prior = None;
        }
        self
    }
}

fn load_prior<T: Real>(root: &Path, stem: &str, view_id: u32) -> Result<Option<DepthPrior<T>>> {
    let pfm = root.join("depth_priors").join(format!("{stem}.pfm"));
    if !pfm.exists() {
        return Ok(None);
    }
    let raw = read_pfm::<T>(&pfm)?;
    let side = root.join("depth_priors").join(format!("{stem}.json"));
    if !side.exists() {
        return Ok(Some(DepthPrior::aligned(view_id, raw)));
    }
    let sc: PriorSidecar = read_json(&side)?;
    let samples: Vec<(usize, usize, T)> = sc.samples.iter().map(|&(x, y, r)| (x, y, T::of(r))).collect();
    match align_depth_prior(view_id, raw.clone(), &samples) {
        Ok(p) => Ok(Some(p)),
        // Too few samples to align: use the raw values as they are.
        Err(Error::Contract(_)) => Ok(Some(DepthPrior::aligned(view_id, raw))),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate, SceneSpec};

    #[test]
    fn generated_priors_align_to_exact_inverse_depth() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            cameras: 8,
            image_size: 32,
            gt_points: 2000,
            init_points: 400,
            ..SceneSpec::default()
        };
        generate(&spec, dir.path()).unwrap();
        let ds: Dataset<f64> = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 8);
        assert_eq!(ds.test.len(), 1);
        for (k, v) in ds.train.iter().enumerate() {
            let stem = format!("{:04}", v.camera.id);
            let exact = read_pfm::<f64>(&dir.path().join("depth").join(format!("{stem}.pfm"))).unwrap();
            let p = v.depth_prior.as_ref().unwrap();
            for i in 0..exact.data.len() {
                if exact.data[i].is_finite() {
                    // Sample depths carry the initial cloud's jitter.
                    let rel = (p.target(i) - 1.0 / exact.data[i]).abs() * exact.data[i];
                    assert!(rel < 0.05, "view {k} pixel {i}: {rel}");
                } else {
                    assert!(!p.mask[i]);
                }
            }
        }
        assert!(Dataset::<f64>::load(&dir.path().join("nope")).is_err());
    }
}
