use nalgebra::{Matrix4, Vector3};
use sqs_core::autodiff::Array;
use sqs_core::geometry::{project_gaussian, Camera, GaussianPrimitive, ProjectionSettings, IDENTITY_QUAT};
use sqs_core::scene::*;

fn axis_scene(gaussians: Vec<GaussianPrimitive>) -> Scene {
    let mut pose = Matrix4::identity();
    pose[(2, 3)] = -5.0;
    Scene {
        gaussians,
        cameras: vec![Camera::new(40.0, 40.0, 31.5, 31.5, pose, 64, 64).unwrap()],
        bounds: Bounds::cube(2.0).unwrap(),
        seed: 0,
    }
}

#[test]
fn generation_is_deterministic_bytewise() {
    let spec = SceneSpec::default();
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_scene(&mut a, &generate_scene(&spec, 42).unwrap()).unwrap();
    write_scene(&mut b, &generate_scene(&spec, 42).unwrap()).unwrap();
    assert_eq!(a, b);
    let mut c = Vec::new();
    write_scene(&mut c, &generate_scene(&spec, 43).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_means_stay_in_bounds() {
    let spec = SceneSpec {
        gaussians_per_object: 24,
        ..SceneSpec::default()
    };
    for seed in 0..1000 {
        let s = generate_scene(&spec, seed).unwrap();
        assert!(s.gaussians.iter().all(|g| s.bounds.contains(&g.mu)), "seed {seed}");
        assert!(s.gaussians.iter().all(|g| (0.6..=1.0).contains(&g.opacity)));
    }
}

#[test]
fn empty_scene_bakes_to_background() {
    let sample = bake_ground_truth(&axis_scene(vec![])).unwrap();
    assert!(sample.rgb[0].data().iter().all(|&v| v == 0.0));
    assert!(sample.valid_mask[0].iter().all(|&m| !m));
}

#[test]
fn opaque_center_gaussian_is_valid_near_center() {
    let g = GaussianPrimitive::new(
        Vector3::zeros(),
        IDENTITY_QUAT,
        Vector3::repeat(0.3),
        1.0,
        Vector3::repeat(0.5),
    )
    .unwrap();
    let sample = bake_ground_truth(&axis_scene(vec![g])).unwrap();
    let m = &sample.valid_mask[0];
    for (x, y) in [(31, 31), (32, 32), (31, 33)] {
        assert!(m[y * 64 + x]);
    }
    assert!(!m[0]);
    for (i, &v) in m.iter().enumerate() {
        if v {
            assert!(sample.depth[0].data()[i] > 0.0);
        }
    }
}

#[test]
fn opaque_surface_depth_equals_cam_distance() {
    // the front splat leaves transmittance just above the stop threshold and
    // the co-located second splat drives it to ~1.5e-8
    let g = GaussianPrimitive::new(
        Vector3::new(0.0, 0.0, 0.4),
        IDENTITY_QUAT,
        Vector3::repeat(0.3),
        0.99985,
        Vector3::repeat(0.5),
    )
    .unwrap();
    let back = GaussianPrimitive {
        opacity: 1.0,
        ..g.clone()
    };
    let mut scene = axis_scene(vec![g.clone(), back]);
    scene.cameras[0].cx = 32.0;
    scene.cameras[0].cy = 32.0;
    let sample = bake_ground_truth(&scene).unwrap();
    let pg = project_gaussian(&g, &scene.cameras[0], &ProjectionSettings::default()).unwrap();
    let (px, py) = (pg.mean2d[0].round() as usize, pg.mean2d[1].round() as usize);
    let d = sample.depth[0].data()[py * 64 + px];
    assert!((d - pg.cam_distance).abs() < 1e-6, "{d} vs {}", pg.cam_distance);
}

#[test]
fn dominant_stacks_bake_their_distance() {
    let mut gs = Vec::new();
    let centers = [(-1.0, -1.0, 0.0), (1.0, -0.5, 0.8), (0.2, 1.1, -0.6), (-0.9, 0.7, 0.5)];
    for &(x, y, z) in &centers {
        let g = GaussianPrimitive::new(
            Vector3::new(x, y, z),
            IDENTITY_QUAT,
            Vector3::repeat(0.3),
            1.0,
            Vector3::repeat(0.3),
        )
        .unwrap();
        gs.extend(std::iter::repeat_n(g, 4));
    }
    let scene = axis_scene(gs.clone());
    let sample = bake_ground_truth(&scene).unwrap();
    let cam = &scene.cameras[0];
    for g in gs.iter().step_by(4) {
        let pg = project_gaussian(g, cam, &ProjectionSettings::default()).unwrap();
        let p = pg.mean2d[1].round() as usize * 64 + pg.mean2d[0].round() as usize;
        let d = sample.depth[0].data()[p];
        assert!(sample.valid_mask[0][p]);
        assert!((d - pg.cam_distance).abs() < 1e-3, "{d} vs {}", pg.cam_distance);
    }
}

fn full_mask_sample(n: usize) -> SceneSample {
    let mut pose = Matrix4::identity();
    pose[(2, 3)] = -5.0;
    let cam = Camera::new(40.0, 40.0, 49.5, 49.5, pose, n, n).unwrap();
    SceneSample {
        rgb: vec![Array::zeros(&[n, n, 3])],
        depth: vec![Array::full(&[n, n], 3.0)],
        valid_mask: vec![vec![true; n * n]],
        cameras: vec![cam],
        bounds: Bounds::cube(2.0).unwrap(),
    }
}

#[test]
fn sparsify_count_is_binomial() {
    let s = full_mask_sample(100);
    let out = sparsify_depth(&s, 0.25, 17).unwrap();
    let kept = out.valid_mask[0].iter().filter(|&&m| m).count() as f64;
    let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
    assert!((kept - 2500.0).abs() < 3.0 * sigma, "{kept}");
    assert_eq!(out.depth, s.depth);
}

#[test]
fn sparsify_never_adds_pixels() {
    let scene = generate_scene(&SceneSpec::default(), 4).unwrap();
    let sample = bake_ground_truth(&scene).unwrap();
    let out = sparsify_depth(&sample, 0.3, 1).unwrap();
    for (a, b) in sample.valid_mask.iter().zip(&out.valid_mask) {
        assert!(a.iter().zip(b).all(|(&before, &after)| before || !after));
    }
    assert_eq!(sparsify_depth(&sample, 0.3, 1).unwrap(), out);
}

#[test]
fn scene_round_trip_and_truncation() {
    let scene = generate_scene(&SceneSpec::default(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.bin");
    save_scene(&path, &scene).unwrap();
    assert_eq!(load_scene(&path).unwrap(), scene);
    let bytes = std::fs::read(&path).unwrap();
    let cut = &bytes[..bytes.len() - 100];
    let err = read_scene(cut).unwrap_err().to_string();
    assert!(err.contains("camera 3"), "{err}");
    let err = read_scene(&bytes[..300]).unwrap_err().to_string();
    assert!(err.contains("gaussian"), "{err}");
    assert!(load_scene(&dir.path().join("absent.bin")).is_err());
}

#[test]
fn scene_dir_round_trip() {
    let scene = generate_scene(&SceneSpec::default(), 2).unwrap();
    let sample = sparsify_depth(&bake_ground_truth(&scene).unwrap(), 0.3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene_dir(dir.path(), &scene, &sample).unwrap();
    let (s2, sample2) = read_scene_dir(dir.path()).unwrap();
    assert_eq!(s2, scene);
    assert_eq!(sample2.valid_mask, sample.valid_mask);
    assert!(sample2.rgb[0].max_abs_diff(&sample.rgb[0]) <= 0.5 / 255.0 + 1e-12);
    assert!(sample2.depth[1].max_abs_diff(&sample.depth[1]) < 1e-5);
}
