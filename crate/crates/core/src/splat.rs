//! Surfels, pinhole cameras and degree-2 spherical-harmonics color.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math::{Mat3, Quat, Vec3};
use crate::scalar::Real;

/// Number of SH coefficients per channel at degree 2.
pub const SH_COEFFS: usize = 9;
/// Total SH scalars per surfel (9 coefficients × RGB).
pub const SH_LEN: usize = SH_COEFFS * 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// One 2D oriented Gaussian disk.
///
/// Scales are stored as logs and opacity as a logit so that every field is
/// unconstrained for the optimizer. `sh` is coefficient-major: entry
/// `k * 3 + c` is coefficient `k` of channel `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel<T> {
    pub center: Vec3<T>,
    pub rotation: Quat<T>,
    pub log_scales: [T; 2],
    pub opacity_logit: T,
    pub sh: [T; SH_LEN],
}

impl<T: Real> Surfel<T> {
    pub fn new(
        center: Vec3<T>,
        rotation: Quat<T>,
        scales: [T; 2],
        opacity: T,
        sh: [T; SH_LEN],
    ) -> Result<Self> {
        if !(scales[0] > T::zero() && scales[1] > T::zero()) {
            return contract(format!(
                "surfel scales must be positive, got ({}, {})",
                scales[0], scales[1]
            ));
        }
        if !(opacity >= T::zero() && opacity <= T::one()) {
            return contract(format!("surfel opacity must lie in [0,1], got {opacity}"));
        }
        let n = rotation.norm();
        if !(n > T::zero()) || !center.is_finite() {
            return contract("surfel rotation must be non-zero and center finite");
        }
        Ok(Self {
            center,
            rotation: rotation.normalized(),
            log_scales: [scales[0].ln(), scales[1].ln()],
            opacity_logit: opacity_to_logit(opacity),
            sh,
        })
    }

    /// Surfel whose SH holds only a DC term reproducing `rgb`.
    pub fn with_color(
        center: Vec3<T>,
        rotation: Quat<T>,
        scales: [T; 2],
        opacity: T,
        rgb: Vec3<T>,
    ) -> Result<Self> {
        Self::new(center, rotation, scales, opacity, sh_from_rgb(rgb))
    }

    #[inline]
    pub fn scales(&self) -> [T; 2] {
        [self.log_scales[0].exp(), self.log_scales[1].exp()]
    }

    #[inline]
    pub fn opacity(&self) -> T {
        self.opacity_logit.sigmoid()
    }

    pub fn set_opacity(&mut self, opacity: T) {
        self.opacity_logit = opacity_to_logit(opacity);
    }

    /// World-space tangent vectors `(t_u, t_v)`.
    #[inline]
    pub fn tangents(&self) -> (Vec3<T>, Vec3<T>) {
        let r = self.rotation.to_matrix();
        (r.col(0), r.col(1))
    }

    /// Unoriented world normal `t_u × t_v`.
    pub fn raw_normal(&self) -> Vec3<T> {
        let (tu, tv) = self.tangents();
        tu.cross(tv)
    }

    pub fn max_scale(&self) -> T {
        let s = self.scales();
        s[0].max(s[1])
    }

    pub fn elongation(&self) -> T {
        let s = self.scales();
        s[0].min(s[1]) / s[0].max(s[1])
    }

    pub fn is_finite(&self) -> bool {
        self.center.is_finite()
            && self.rotation.to_array().iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Surfel<U> {
        let mut sh = [U::zero(); SH_LEN];
        for (d, s) in sh.iter_mut().zip(self.sh.iter()) {
            *d = U::of(s.f64());
        }
        Surfel {
            center: self.center.cast(),
            rotation: self.rotation.cast(),
            log_scales: [U::of(self.log_scales[0].f64()), U::of(self.log_scales[1].f64())],
            opacity_logit: U::of(self.opacity_logit.f64()),
            sh,
        }
    }
}

/// Logit of an opacity, saturating so that 0 and 1 stay finite.
pub fn opacity_to_logit<T: Real>(opacity: T) -> T {
    let eps = T::epsilon();
    if opacity >= T::one() - eps {
        T::of(40.0)
    } else if opacity <= eps {
        T::of(-40.0)
    } else {
        opacity.logit()
    }
}

pub fn sh_from_rgb<T: Real>(rgb: Vec3<T>) -> [T; SH_LEN] {
    let mut sh = [T::zero(); SH_LEN];
    let c0 = T::of(SH_C0);
    for c in 0..3 {
        sh[c] = (rgb[c] - T::of(0.5)) / c0;
    }
    sh
}

/// Pinhole camera with a rigid world-to-camera transform. Camera space is
/// x right, y down, z forward; pixel `(i, j)` has its center at `(i+0.5, j+0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub id: u32,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    pub fn new(
        id: u32,
        intrinsics: [T; 4],
        rotation: Mat3<T>,
        translation: Vec3<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            id,
            fx: intrinsics[0],
            fy: intrinsics[1],
            cx: intrinsics[2],
            cy: intrinsics[3],
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll.
    pub fn look_at(
        id: u32,
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        fov_x: T,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalized();
        let mut right = forward.cross(up);
        if right.norm() < T::of(1e-9) {
            right = forward.cross(Vec3::new(T::one(), T::zero(), T::zero()));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = -rotation.mul_vec(eye);
        let fx = T::of_usize(width) * T::of(0.5) / (fov_x * T::of(0.5)).tan();
        Self::new(
            id,
            [
                fx,
                fx,
                T::of_usize(width) * T::of(0.5),
                T::of_usize(height) * T::of(0.5),
            ],
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return contract(format!(
                "camera {} focal lengths must be positive, got ({}, {})",
                self.id, self.fx, self.fy
            ));
        }
        if self.rotation.orthonormality_error() > T::of(1e-6)
            || (self.rotation.determinant() - T::one()).abs() > T::of(1e-6)
        {
            return contract(format!("camera {} rotation is not a proper rotation", self.id));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        -self.rotation.tmul_vec(self.translation)
    }

    /// Pixel coordinates of a camera-space point (no visibility check).
    #[inline]
    pub fn project(&self, pc: Vec3<T>) -> (T, T) {
        (
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Camera-space ray direction with unit z through a pixel position.
    #[inline]
    pub fn ray_dir(&self, px: T, py: T) -> Vec3<T> {
        Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, T::one())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            id: self.id,
            fx: U::of(self.fx.f64()),
            fy: U::of(self.fy.f64()),
            cx: U::of(self.cx.f64()),
            cy: U::of(self.cy.f64()),
            rotation: self.rotation.cast(),
            translation: self.translation.cast(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel<T> {
    pub surfels: Vec<Surfel<T>>,
    pub background: Vec3<T>,
    pub iteration: u64,
}

impl<T: Real> SceneModel<T> {
    pub fn new(surfels: Vec<Surfel<T>>, background: Vec3<T>) -> Self {
        Self {
            surfels,
            background,
            iteration: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    /// Advances the iteration counter; it never moves backwards.
    pub fn advance_to(&mut self, iteration: u64) {
        self.iteration = self.iteration.max(iteration);
    }

    pub fn cast<U: Real>(&self) -> SceneModel<U> {
        SceneModel {
            surfels: self.surfels.iter().map(Surfel::cast).collect(),
            background: self.background.cast(),
            iteration: self.iteration,
        }
    }
}

/// Degree-2 real SH basis values in the splatting sign convention.
pub fn sh_basis<T: Real>(d: Vec3<T>) -> [T; SH_COEFFS] {
    let c1 = T::of(SH_C1);
    let c2 = SH_C2.map(T::of);
    let (x, y, z) = (d.x, d.y, d.z);
    [
        T::of(SH_C0),
        -c1 * y,
        c1 * z,
        -c1 * x,
        c2[0] * x * y,
        c2[1] * y * z,
        c2[2] * (T::of(2.0) * z * z - x * x - y * y),
        c2[3] * x * z,
        c2[4] * (x * x - y * y),
    ]
}

/// Jacobian of [`sh_basis`] with respect to the direction components.
pub fn sh_basis_jacobian<T: Real>(d: Vec3<T>) -> [Vec3<T>; SH_COEFFS] {
    let c1 = T::of(SH_C1);
    let c2 = SH_C2.map(T::of);
    let (x, y, z) = (d.x, d.y, d.z);
    let two = T::of(2.0);
    let zero = T::zero();
    [
        Vec3::zero(),
        Vec3::new(zero, -c1, zero),
        Vec3::new(zero, zero, c1),
        Vec3::new(-c1, zero, zero),
        Vec3::new(y, x, zero) * c2[0],
        Vec3::new(zero, z, y) * c2[1],
        Vec3::new(-two * x, -two * y, T::of(4.0) * z) * c2[2],
        Vec3::new(z, zero, x) * c2[3],
        Vec3::new(two * x, -two * y, zero) * c2[4],
    ]
}

/// Unclamped SH color (before the +0.5 offset is clamped at zero).
pub(crate) fn sh_raw<T: Real>(sh: &[T; SH_LEN], dir: Vec3<T>) -> Vec3<T> {
    let b = sh_basis(dir);
    let mut out = Vec3::zero();
    for (k, bk) in b.iter().enumerate() {
        for c in 0..3 {
            out[c] += *bk * sh[k * 3 + c];
        }
    }
    out + Vec3::splat(T::of(0.5))
}

/// RGB color of SH coefficients seen along `view_dir`, clamped below at zero.
pub fn eval_sh<T: Real>(sh: &[T; SH_LEN], view_dir: Vec3<T>) -> Result<Vec3<T>> {
    if (view_dir.norm() - T::one()).abs() > T::of(1e-6) {
        return contract(format!(
            "eval_sh requires a unit view direction, got norm {}",
            view_dir.norm()
        ));
    }
    let raw = sh_raw(sh, view_dir);
    Ok(raw.max_elem(Vec3::zero()))
}

/// World-space surfel normal oriented towards the camera.
pub fn surfel_normal<T: Real>(s: &Surfel<T>, camera: &Camera<T>) -> Vec3<T> {
    let n = s.raw_normal().normalized();
    let view = s.center - camera.center();
    if n.dot(view) > T::zero() {
        -n
    } else {
        n
    }
}

/// `min(s_u, s_v) / max(s_u, s_v)`.
pub fn elongation_rate<T: Real>(su: T, sv: T) -> Result<T> {
    if !(su > T::zero() && sv > T::zero()) {
        return contract(format!("elongation rate needs positive scales, got ({su}, {sv})"));
    }
    Ok(su.min(sv) / su.max(sv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat<f64> {
        Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalized()
    }

    /// Textbook real spherical harmonics, l ≤ 2, written from the Legendre
    /// definitions with the Condon-Shortley phase.
    fn textbook_real_sh(d: Vec3<f64>) -> [f64; 9] {
        use std::f64::consts::PI;
        let (x, y, z) = (d.x, d.y, d.z);
        let k1 = (3.0 / (4.0 * PI)).sqrt();
        let k2 = (15.0 / (4.0 * PI)).sqrt();
        let k20 = (5.0 / (16.0 * PI)).sqrt();
        let k22 = (15.0 / (16.0 * PI)).sqrt();
        [
            0.5 * (1.0 / PI).sqrt(),
            -k1 * y,
            k1 * z,
            -k1 * x,
            k2 * x * y,
            -k2 * y * z,
            k20 * (3.0 * z * z - 1.0),
            -k2 * x * z,
            k22 * (x * x - y * y),
        ]
    }

    #[test]
    fn dc_only_white() {
        let mut sh = [0.0f64; SH_LEN];
        for c in 0..3 {
            sh[c] = 0.5 / 0.282_094_79;
        }
        let rgb = eval_sh(&sh, Vec3::new(0.0, 0.6, 0.8)).unwrap();
        for c in 0..3 {
            assert!((rgb[c] - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_sh_is_half_grey() {
        let rgb = eval_sh(&[0.0f64; SH_LEN], Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(rgb, Vec3::splat(0.5));
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        assert!(eval_sh(&[0.0f64; SH_LEN], Vec3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn matches_textbook_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dir in [
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.3, -0.4, 0.5).normalized(),
            Vec3::new(-0.9, 0.1, -0.2).normalized(),
        ] {
            let sh: [f64; SH_LEN] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
            let basis = textbook_real_sh(dir);
            let rgb = sh_raw(&sh, dir);
            for c in 0..3 {
                let oracle: f64 = (0..9).map(|k| basis[k] * sh[k * 3 + c]).sum::<f64>() + 0.5;
                assert!((rgb[c] - oracle).abs() < 1e-12, "{} vs {oracle}", rgb[c]);
            }
        }
    }

    #[test]
    fn basis_jacobian_matches_finite_differences() {
        let d = Vec3::<f64>::new(0.3, -0.5, 0.8);
        let jac = sh_basis_jacobian(d);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (sh_basis(p), sh_basis(m));
            for k in 0..9 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - jac[k][axis]).abs() < 1e-8);
            }
        }
    }

    fn axis_camera(z: f64, look: f64) -> Camera<f64> {
        Camera::look_at(
            0,
            Vec3::new(0.0, 0.0, z),
            Vec3::new(0.0, 0.0, z + look),
            Vec3::new(0.0, 1.0, 0.0),
            1.0,
            8,
            8,
        )
        .unwrap()
    }

    #[test]
    fn normal_faces_camera() {
        let s = Surfel::with_color(
            Vec3::zero(),
            Quat::identity(),
            [1.0, 1.0],
            0.5,
            Vec3::splat(0.5),
        )
        .unwrap();
        assert_eq!(surfel_normal(&s, &axis_camera(5.0, -1.0)), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(surfel_normal(&s, &axis_camera(-5.0, 1.0)), Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn normal_orthogonal_to_tangents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = axis_camera(5.0, -1.0);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let s = Surfel::with_color(Vec3::zero(), q, [0.3, 0.7], 0.5, Vec3::splat(0.2)).unwrap();
            let n = surfel_normal(&s, &cam);
            let r = q.to_matrix();
            assert!(n.dot(r.col(0)).abs() < 1e-9);
            assert!(n.dot(r.col(1)).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn elongation_examples() {
        assert_eq!(elongation_rate(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(elongation_rate(0.01, 1.0).unwrap(), 0.01);
        let a: f64 = elongation_rate(3.0, 0.5).unwrap();
        assert!((a - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(a, elongation_rate(0.5, 3.0).unwrap());
        assert!(elongation_rate(0.0, 1.0).is_err());
        assert!(elongation_rate(-1.0, 1.0).is_err());
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        let r = Mat3::<f64>::identity();
        assert!(Camera::new(0, [0.0, 1.0, 0.0, 0.0], r, Vec3::zero(), 4, 4).is_err());
        let mut skew = r;
        skew.m[0][1] = 0.1;
        assert!(Camera::new(0, [1.0, 1.0, 0.0, 0.0], skew, Vec3::zero(), 4, 4).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            1,
            Vec3::new(3.0, -2.0, 4.0),
            Vec3::new(0.5, 0.5, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            0.9,
            32,
            24,
        )
        .unwrap();
        let pc = cam.to_camera(Vec3::new(0.5, 0.5, 0.0));
        let (u, v): (f64, f64) = cam.project(pc);
        assert!((u - 16.0).abs() < 1e-9 && (v - 12.0).abs() < 1e-9);
        assert!((cam.center() - Vec3::new(3.0, -2.0, 4.0)).norm() < 1e-12, "{:?}", cam.center());
    }

    proptest::proptest! {
        #[test]
        fn sh_is_linear_before_clamp(
            a in -2.0f64..2.0, b in -2.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s1: [f64; SH_LEN] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let s2: [f64; SH_LEN] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5).normalized();
            let mix: [f64; SH_LEN] = std::array::from_fn(|i| a * s1[i] + b * s2[i]);
            let half = Vec3::splat(0.5);
            let lhs = sh_raw(&mix, dir) - half;
            let rhs = (sh_raw(&s1, dir) - half) * a + (sh_raw(&s2, dir) - half) * b;
            proptest::prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn elongation_is_symmetric(su in 1e-4f64..1e3, sv in 1e-4f64..1e3) {
            let a = elongation_rate(su, sv).unwrap();
            proptest::prop_assert_eq!(a, elongation_rate(sv, su).unwrap());
            proptest::prop_assert!(a > 0.0 && a <= 1.0);
        }
    }
}
