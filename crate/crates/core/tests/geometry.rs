mod common;

use nalgebra::{Matrix2, Matrix4, Rotation3, SymmetricEigen, Vector2, Vector3, Vector4};
use proptest::prelude::*;
use rand::Rng;
use sqs_core::geometry::{
    covariance_from_scale_rotation, project_gaussian, project_gaussian_vjp, quat_mul, rotation_to_quaternion,
    GaussianPrimitive, ProjectedGrad, ProjectionSettings,
};
use sqs_core::render::{render, RenderSettings};

fn quat_strategy() -> impl Strategy<Value = Vector4<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("norm", |(w, x, y, z)| {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            (0.5..=1.0).contains(&n)
        })
        .prop_map(|(w, x, y, z)| Vector4::new(w, x, y, z))
}

fn rigid(rng: &mut impl Rng) -> Matrix4<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let r = Rotation3::from_scaled_axis(axis * 2.0);
    let t = Vector3::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    );
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

fn transform_gaussian(g: &GaussianPrimitive, m: &Matrix4<f64>) -> GaussianPrimitive {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
    let q = quat_mul(&rotation_to_quaternion(&r), &g.quat);
    GaussianPrimitive {
        mu: r * g.mu + t,
        quat: q,
        ..g.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn covariance_eigenvalues_are_squared_scales(
        s in (0.01..3.0f64, 0.01..3.0f64, 0.01..3.0f64),
        q in quat_strategy(),
    ) {
        let scale = Vector3::new(s.0, s.1, s.2);
        let cov = covariance_from_scale_rotation(&scale, &q).unwrap();
        prop_assert_eq!(cov, cov.transpose());
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let mut want = vec![s.0 * s.0, s.1 * s.1, s.2 * s.2];
        want.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_rigid_invariant(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let g = common::random_gaussian(&mut r, 1.0, (0.05, 0.5));
        let cam = &common::ring_cameras(5, 5.0, 60.0, 64)[seed as usize % 5];
        let m = rigid(&mut r);
        let s = ProjectionSettings::default();
        let a = project_gaussian(&g, cam, &s).unwrap();
        let b = project_gaussian(&transform_gaussian(&g, &m), &cam.transformed(&m), &s).unwrap();
        prop_assert!((a.mean2d - b.mean2d).abs().max() < 1e-9);
        prop_assert!((a.cov2d - b.cov2d).abs().max() < 1e-9);
        prop_assert!((a.cam_distance - b.cam_distance).abs() < 1e-9);
        prop_assert_eq!(b.cov2d[(0, 1)], b.cov2d[(1, 0)]);
    }
}

#[test]
fn rendered_scene_is_rigid_invariant() {
    let mut r = common::rng(77);
    let gs = common::random_gaussians(&mut r, 150, 1.5, (0.05, 0.4));
    let m = rigid(&mut r);
    let moved: Vec<_> = gs.iter().map(|g| transform_gaussian(g, &m)).collect();
    for cam in common::ring_cameras(3, 5.0, 60.0, 64) {
        let s = RenderSettings::default();
        let (a, _) = render(&gs, &cam, &s).unwrap();
        let (b, _) = render(&moved, &cam.transformed(&m), &s).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
    }
}

fn scalar(g: &GaussianPrimitive, cam: &sqs_core::geometry::Camera, up: &ProjectedGrad) -> f64 {
    let p = project_gaussian(g, cam, &ProjectionSettings::default()).unwrap();
    p.mean2d.dot(&up.mean2d) + p.cov2d.component_mul(&up.cov2d).sum() + p.cam_distance * up.cam_distance
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let mut r = common::rng(3);
    let cams = common::ring_cameras(4, 4.0, 50.0, 64);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let g = common::random_gaussian(&mut r, 1.0, (0.1, 0.6));
        let cam = &cams[trial % 4];
        let up = ProjectedGrad {
            mean2d: Vector2::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
            cov2d: Matrix2::new(
                r.random_range(-1e-2..1e-2),
                r.random_range(-1e-2..1e-2),
                r.random_range(-1e-2..1e-2),
                r.random_range(-1e-2..1e-2),
            ),
            cam_distance: r.random_range(-1.0..1.0),
        };
        let grad = project_gaussian_vjp(&g, cam, &ProjectionSettings::default(), &up).unwrap();
        let analytic: Vec<f64> = grad
            .mu
            .iter()
            .chain(grad.quat.iter())
            .chain(grad.scale.iter())
            .copied()
            .collect();
        let eps = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let bump = |d: f64| {
                let mut h = g.clone();
                match i {
                    0..=2 => h.mu[i] += d,
                    3..=6 => h.quat[i - 3] += d,
                    _ => h.scale[i - 7] += d,
                }
                scalar(&h, cam, &up)
            };
            let n = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "{worst}");
}
