//! Fixtures shared by the benchmarks in `benches/`.

use sqs_core::scene::{bake_ground_truth, generate_scene, Scene, SceneSample, SceneSpec};

/// Default-sized scene (4 views of 64 × 64) with its baked views.
pub fn default_scene(seed: u64) -> (Scene, SceneSample) {
    let scene = generate_scene(&SceneSpec::default(), seed).expect("default spec is valid");
    let sample = bake_ground_truth(&scene).expect("generated scenes bake");
    (scene, sample)
}
