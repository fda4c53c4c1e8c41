#![allow(dead_code)]

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqs_core::geometry::{Camera, GaussianPrimitive};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, extent: f64, scale: (f64, f64)) -> GaussianPrimitive {
    let mu = Vector3::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
    );
    let quat = Vector4::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) + Vector4::new(0.2, 0.0, 0.0, 0.0);
    let s = Vector3::new(
        rng.random_range(scale.0..scale.1),
        rng.random_range(scale.0..scale.1),
        rng.random_range(scale.0..scale.1),
    );
    let color = Vector3::new(rng.random(), rng.random(), rng.random());
    GaussianPrimitive::new(mu, quat, s, rng.random_range(0.1..1.0), color).unwrap()
}

pub fn random_gaussians(rng: &mut ChaCha8Rng, n: usize, extent: f64, scale: (f64, f64)) -> Vec<GaussianPrimitive> {
    (0..n).map(|_| random_gaussian(rng, extent, scale)).collect()
}

/// `n` cameras on a horizontal ring of `radius` looking at the origin.
pub fn ring_cameras(n: usize, radius: f64, focal: f64, size: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Vector3::new(radius * a.cos(), radius * a.sin(), 0.35 * radius);
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), focal, size, size).unwrap()
        })
        .collect()
}
