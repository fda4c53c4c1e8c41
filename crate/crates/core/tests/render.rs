mod common;

use common::{random_gaussians, ring_cameras, rng};
use nalgebra::{Matrix4, Vector3};
use rand::Rng;
use sqs_core::autodiff::{check_gradient, Array, GradCheck, Graph};
use sqs_core::geometry::{Camera, GaussianPrimitive, IDENTITY_QUAT};
use sqs_core::render::{render, render_backward, render_node, render_reference, RenderSettings, Renderer, SplatParams};

fn param_arrays(gs: &[GaussianPrimitive]) -> [Array; 5] {
    let k = gs.len();
    let mut m = Vec::new();
    let mut q = Vec::new();
    let mut s = Vec::new();
    let mut o = Vec::new();
    let mut c = Vec::new();
    for g in gs {
        m.extend(g.mu.iter());
        q.extend(g.quat.iter());
        s.extend(g.scale.iter());
        o.push(g.opacity);
        c.extend(g.color.iter());
    }
    [
        Array::matrix(k, 3, m),
        Array::matrix(k, 4, q),
        Array::matrix(k, 3, s),
        Array::matrix(k, 1, o),
        Array::matrix(k, 3, c),
    ]
}

#[test]
fn empty_scene_is_background() {
    let cam = &ring_cameras(1, 4.0, 40.0, 32)[0];
    let (out, _) = render(&[], cam, &RenderSettings::default()).unwrap();
    assert!(out.rgb.data().iter().all(|&v| v == 0.0));
    assert!(out.depth.data().iter().all(|&v| v == 0.0));
    assert!(out.alpha_acc.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_size_rejected() {
    let mut cam = ring_cameras(1, 4.0, 40.0, 32)[0].clone();
    cam.width = 0;
    assert!(render(&[], &cam, &RenderSettings::default()).is_err());
}

#[test]
fn single_opaque_on_axis_matches_reference_exactly() {
    let cam = Camera::new(30.0, 30.0, 15.5, 15.5, Matrix4::identity(), 32, 32).unwrap();
    let g = GaussianPrimitive::new(
        Vector3::new(0.0, 0.0, 3.0),
        IDENTITY_QUAT,
        Vector3::new(0.3, 0.3, 0.3),
        1.0,
        Vector3::new(0.2, 0.7, 0.1),
    )
    .unwrap();
    let s = RenderSettings::default();
    let (tiled, _) = render(std::slice::from_ref(&g), &cam, &s).unwrap();
    let reference = render_reference(&[g], &cam, &s).unwrap();
    assert_eq!(tiled, reference);
}

#[test]
fn tiled_matches_reference_on_random_scenes() {
    let mut r = rng(11);
    let s = RenderSettings::default();
    for trial in 0..6 {
        let n = r.random_range(50..300);
        let gs = random_gaussians(&mut r, n, 1.5, (0.02, 0.4));
        for cam in ring_cameras(4, 5.0, 60.0, 64) {
            let (tiled, _) = render(&gs, &cam, &s).unwrap();
            let reference = render_reference(&gs, &cam, &s).unwrap();
            let diff = tiled.max_abs_diff(&reference);
            assert!(diff < 1e-6, "trial {trial}: {diff}");
        }
    }
}

#[test]
fn weights_sum_to_alpha_acc() {
    let mut r = rng(5);
    let mut gs = random_gaussians(&mut r, 200, 1.5, (0.05, 0.4));
    for g in &mut gs {
        g.color = Vector3::new(1.0, 1.0, 1.0);
    }
    for cam in ring_cameras(2, 5.0, 60.0, 64) {
        let (out, _) = render(&gs, &cam, &RenderSettings::default()).unwrap();
        for p in 0..64 * 64 {
            let wsum = out.rgb.data()[p * 3];
            let acc = out.alpha_acc.data()[p];
            assert!((wsum - acc).abs() < 1e-12, "{wsum} vs {acc}");
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn tile_lists_are_sorted_and_cover_three_sigma() {
    let mut r = rng(8);
    let gs = random_gaussians(&mut r, 150, 1.5, (0.05, 0.3));
    let cam = &ring_cameras(1, 5.0, 60.0, 64)[0];
    let (_, cache) = render(&gs, cam, &RenderSettings::default()).unwrap();
    let tiles = cache.tiles();
    for list in &tiles.lists {
        assert!(list.windows(2).all(|w| w[0] < w[1]));
    }
    // every splat whose 3σ box touches a tile is listed there
    let settings = RenderSettings::default();
    for (pos, &gi) in tiles.sorted_indices.iter().enumerate() {
        let g = &gs[gi];
        if g.opacity < settings.alpha_min {
            continue;
        }
        let p = sqs_core::geometry::project_gaussian(g, cam, &settings.projection).unwrap();
        let ex = 3.0 * p.cov2d[(0, 0)].sqrt();
        let ey = 3.0 * p.cov2d[(1, 1)].sqrt();
        let (x0, x1) = ((p.mean2d[0] - ex).ceil(), (p.mean2d[0] + ex).floor());
        let (y0, y1) = ((p.mean2d[1] - ey).ceil(), (p.mean2d[1] + ey).floor());
        for ty in 0..tiles.tiles_y {
            for tx in 0..tiles.tiles_x {
                let (tx0, tx1) = ((tx * 16) as f64, (tx * 16 + 15) as f64);
                let (ty0, ty1) = ((ty * 16) as f64, (ty * 16 + 15) as f64);
                let overlaps = x0 <= tx1 && x1 >= tx0 && y0 <= ty1 && y1 >= ty0 && x0 <= x1 && y0 <= y1;
                let listed = tiles.lists[ty * tiles.tiles_x + tx]
                    .iter()
                    .filter(|&&q| q as usize == pos)
                    .count();
                if overlaps {
                    assert_eq!(listed, 1);
                }
                assert!(listed <= 1);
            }
        }
    }
}

#[test]
fn equal_distances_break_ties_by_index() {
    let cam = Camera::new(30.0, 30.0, 15.5, 15.5, Matrix4::identity(), 32, 32).unwrap();
    let mk = |c: Vector3<f64>| {
        GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 3.0),
            IDENTITY_QUAT,
            Vector3::new(0.3, 0.3, 0.3),
            0.6,
            c,
        )
        .unwrap()
    };
    let a = mk(Vector3::new(1.0, 0.0, 0.0));
    let b = mk(Vector3::new(0.0, 0.0, 1.0));
    let s = RenderSettings::default();
    let (ab, _) = render(&[a.clone(), b.clone()], &cam, &s).unwrap();
    let p = 15 * 32 + 15;
    // index 0 (red) is in front
    assert!(ab.rgb.data()[p * 3] > ab.rgb.data()[p * 3 + 2]);
    let (ba, _) = render(&[b, a], &cam, &s).unwrap();
    assert!(ba.rgb.data()[p * 3 + 2] > ba.rgb.data()[p * 3]);
}

#[test]
fn backward_zero_seed_gives_zero_gradients() {
    let mut r = rng(2);
    let gs = random_gaussians(&mut r, 20, 1.0, (0.1, 0.4));
    let cam = &ring_cameras(1, 4.0, 40.0, 32)[0];
    let (_, cache) = render(&gs, cam, &RenderSettings::default()).unwrap();
    let grads = render_backward(&cache, &Array::zeros(&[32, 32, 3]), &Array::zeros(&[32, 32])).unwrap();
    for g in grads {
        assert_eq!(g, Default::default());
    }
}

#[test]
fn backward_before_forward_is_rejected() {
    let r = Renderer::new(RenderSettings::default());
    assert!(r.backward(&Array::zeros(&[1, 1, 3]), &Array::zeros(&[1, 1])).is_err());
}

#[test]
fn opaque_color_gradient_equals_pixel_gradient() {
    let cam = Camera::new(30.0, 30.0, 15.5, 15.5, Matrix4::identity(), 32, 32).unwrap();
    let g = GaussianPrimitive::new(
        Vector3::new(0.0, 0.0, 3.0),
        IDENTITY_QUAT,
        Vector3::new(0.5, 0.5, 0.5),
        1.0,
        Vector3::new(0.2, 0.7, 0.1),
    )
    .unwrap();
    let settings = RenderSettings::check_mode();
    let mut renderer = Renderer::new(settings);
    renderer.forward(&[g], &cam).unwrap();
    // pixel at the projected center has α = 1
    let mut grgb = Array::zeros(&[32, 32, 3]);
    let p = 15 * 32 + 15;
    grgb.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&[0.3, -0.5, 2.0]);
    let mut cam2 = cam.clone();
    cam2.cx = 15.0;
    cam2.cy = 15.0;
    let mut renderer2 = Renderer::new(settings);
    let g = GaussianPrimitive::new(
        Vector3::new(0.0, 0.0, 3.0),
        IDENTITY_QUAT,
        Vector3::new(0.5, 0.5, 0.5),
        1.0,
        Vector3::new(0.2, 0.7, 0.1),
    )
    .unwrap();
    renderer2.forward(&[g], &cam2).unwrap();
    let grads = renderer2.backward(&grgb, &Array::zeros(&[32, 32])).unwrap();
    let c = grads[0].color;
    assert!(
        (c[0] - 0.3).abs() < 1e-12 && (c[1] + 0.5).abs() < 1e-12 && (c[2] - 2.0).abs() < 1e-12,
        "{c:?}"
    );
}

fn gradcheck_class(class: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let gs = random_gaussians(&mut r, 12, 0.8, (0.15, 0.45));
    let cams = ring_cameras(3, 4.0, 30.0, 24);
    let cam = cams[seed as usize % 3].clone();
    let arrays = param_arrays(&gs);
    let weights = Array::matrix(
        24 * 24,
        4,
        (0..24 * 24 * 4).map(|_| r.random_range(-1e-3..1e-3)).collect(),
    );
    let settings = RenderSettings::check_mode();
    let point = arrays[class].clone();
    let report = check_gradient(
        &point,
        &GradCheck {
            epsilon: 1e-5,
            ..Default::default()
        },
        |g: &mut Graph, x| {
            let mut ids = Vec::new();
            for (i, a) in arrays.iter().enumerate() {
                ids.push(if i == class { x } else { g.constant(a.clone())? });
            }
            let params = SplatParams {
                means: ids[0],
                quats: ids[1],
                scales: ids[2],
                opacities: ids[3],
                colors: ids[4],
            };
            let node = render_node(g, &params, &cam, &settings)?.node;
            let w = g.constant(weights.clone())?;
            let prod = g.mul(node, w)?;
            g.sum(prod)
        },
    )
    .unwrap();
    report.max_relative_error
}

#[test]
fn render_gradcheck_every_parameter_class() {
    for class in 0..5 {
        for seed in [1, 2] {
            let err = gradcheck_class(class, seed);
            assert!(err < 1e-4, "class {class} seed {seed}: {err}");
        }
    }
}

#[test]
fn rendering_is_bit_identical_across_thread_counts() {
    let mut r = rng(21);
    let gs = random_gaussians(&mut r, 300, 1.5, (0.05, 0.4));
    let cam = &ring_cameras(1, 5.0, 60.0, 64)[0];
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (out, cache) = render(&gs, cam, &RenderSettings::default()).unwrap();
            let g = render_backward(&cache, &out.rgb, &out.depth).unwrap();
            (out, g)
        })
    };
    let (a, ga) = run(1);
    let (b, gb) = run(3);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
