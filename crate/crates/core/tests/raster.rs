mod oracles;

use oracles::{random_scene, test_camera};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scv2_core::raster::{render, render_surfels, render_visibility, RenderOptions};
use scv2_core::splat::sh_from_rgb;
use scv2_core::{Quat, SceneModel, Surfel, Vec3};

fn flat_surfel(z: f64, scale: f64, opacity: f64, rgb: Vec3<f64>) -> Surfel<f64> {
    Surfel::new(Vec3::new(0.0, 0.0, z), Quat::identity(), [scale, scale], opacity, sh_from_rgb(rgb)).unwrap()
}

#[test]
fn empty_scene_renders_background_only() {
    let cam = test_camera(16);
    let model = SceneModel::new(Vec::new(), Vec3::zero());
    let out = render(&model, &cam, &RenderOptions::default()).unwrap();
    assert!(out.color.data.iter().all(|v| *v == 0.0));
    assert!(out.alpha.data.iter().all(|v| *v == 0.0));
    assert!(out.median_depth.data.iter().all(|v| v.is_infinite()));
}

#[test]
fn zero_size_camera_is_rejected() {
    let mut cam = test_camera(16);
    cam.width = 0;
    let model = SceneModel::new(Vec::new(), Vec3::zero());
    assert!(render(&model, &cam, &RenderOptions::default()).is_err());
}

#[test]
fn opaque_white_surfel_on_the_central_ray() {
    let cam = test_camera(32);
    let s = flat_surfel(2.0, 0.2, 1.0, Vec3::splat(1.0));
    let out = render_surfels(&[s], Vec3::zero(), &cam, &RenderOptions::default()).unwrap();
    for c in 0..3 {
        assert!((out.color.get(16, 16, c) - 1.0).abs() < 1e-9);
    }
    assert!((out.alpha.get(16, 16, 0) - 1.0).abs() < 1e-9);
    assert!((out.median_depth.get(16, 16, 0) - 2.0).abs() < 1e-9);
    assert!((out.expected_depth.get(16, 16, 0) - 2.0).abs() < 1e-9);
    assert!((out.normal.get(16, 16, 2) + 1.0).abs() < 1e-12, "normal faces the camera");
    assert!(out.visible[0]);
}

#[test]
fn two_surfels_composite_front_to_back() {
    let cam = test_camera(32);
    let red = flat_surfel(1.0, 0.1, 0.6, Vec3::new(1.0, 0.0, 0.0));
    let blue = flat_surfel(2.0, 0.2, 0.8, Vec3::new(0.0, 0.0, 1.0));
    let expected = [0.6, 0.0, 0.4 * 0.8];
    // Input order must not matter.
    for surfels in [vec![red, blue], vec![blue, red]] {
        let out = render_surfels(&surfels, Vec3::zero(), &cam, &RenderOptions::default()).unwrap();
        for (c, e) in expected.iter().enumerate() {
            assert!((out.color.get(16, 16, c) - e).abs() < 1e-9, "channel {c}");
        }
        assert!((out.alpha.get(16, 16, 0) - 0.92).abs() < 1e-12);
        let depth = (0.6 * 1.0 + 0.32 * 2.0) / 0.92;
        assert!((out.expected_depth.get(16, 16, 0) - depth).abs() < 1e-9);
        assert_eq!(out.median_depth.get(16, 16, 0), 1.0);
    }
}

#[test]
fn blend_weights_and_final_transmittance_sum_to_one() {
    let opts = RenderOptions::default();
    let mut pixels = 0;
    for seed in 0..10 {
        let (model, cam) = random_scene(seed, 20, 32);
        let out = render(&model, &cam, &opts).unwrap();
        for (a, t) in out.alpha.data.iter().zip(&out.final_transmittance.data) {
            assert!((a + t - 1.0).abs() <= 1e-6);
            assert!((0.0..=1.0).contains(a));
            pixels += 1;
        }
    }
    assert!(pixels >= 10_000);
}

#[test]
fn render_is_invariant_to_surfel_order() {
    let opts = RenderOptions::default();
    let (model, cam) = random_scene(42, 20, 32);
    let base = render(&model, &cam, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..model.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = SceneModel::new(perm.iter().map(|&i| model.surfels[i]).collect(), model.background);
        let out = render(&shuffled, &cam, &opts).unwrap();
        assert_eq!(out.color, base.color);
        assert_eq!(out.expected_depth, base.expected_depth);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out.visible[k], base.visible[i]);
        }
    }
}

#[test]
fn tilted_surfel_depth_follows_the_plane() {
    let cam = test_camera(32);
    // Rotated 45° about y: depth varies across the disk.
    let q = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), std::f64::consts::FRAC_PI_4);
    let s = Surfel::new(Vec3::new(0.0, 0.0, 3.0), q, [0.5, 0.5], 0.99, sh_from_rgb(Vec3::splat(0.5))).unwrap();
    let out = render_surfels(&[s], Vec3::zero(), &cam, &RenderOptions::default()).unwrap();
    let left = out.expected_depth.get(12, 16, 0);
    let right = out.expected_depth.get(20, 16, 0);
    assert!((left - right).abs() > 0.1, "{left} vs {right}");
    assert!((out.median_depth.get(16, 16, 0) - 3.0).abs() < 1e-9);
}

#[test]
fn visibility_of_points() {
    let cam = test_camera(32);
    let opts = RenderOptions::default();
    let front = render_visibility(&[Vec3::new(0.0, 0.0, 3.0)], &cam, 0.05, &opts).unwrap();
    assert_eq!(front, vec![true]);
    let behind = render_visibility(&[Vec3::new(0.0, 0.0, -3.0)], &cam, 0.05, &opts).unwrap();
    assert_eq!(behind, vec![false]);
    // The near disk spans many pixels; the far one sits well inside its opaque core.
    let stacked = render_visibility(&[Vec3::new(0.0, 0.0, 20.0), Vec3::new(0.0, 0.0, 1.0)], &cam, 0.3, &opts).unwrap();
    assert_eq!(stacked, vec![false, true]);
    assert!(render_visibility::<f64>(&[], &cam, 0.1, &opts).unwrap().is_empty());
    assert!(render_visibility(&[Vec3::zero()], &cam, 0.0, &opts).is_err());
}

#[test]
fn f32_and_f64_renders_agree() {
    let (model, cam) = random_scene(5, 15, 32);
    let opts = RenderOptions::default();
    let a = render(&model, &cam, &opts).unwrap();
    let b = render(&model.cast::<f32>(), &cam.cast::<f32>(), &RenderOptions::default()).unwrap();
    for (x, y) in a.color.data.iter().zip(&b.color.data) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}
