//! Finite-difference verification of the differentiable pipeline: the
//! renderer, the full decode → render → loss path and the query interaction
//! block. Every discontinuous render threshold is disabled while checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradient, Array, GradCheck, Graph, NodeId};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::finetune::{FilteredAnchors, TaskConfig, TaskModel, ANCHOR_VEC_DIM};
use crate::model::{ModelConfig, SqsModel};
use crate::nn::cross_entropy;
use crate::pretrain::{views_loss, LossWeights};
use crate::render::{render_node, RenderSettings, SplatParams};
use crate::scene::{bake_ground_truth, generate_scene, Bounds, SceneSpec};

pub const TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-5;
/// Objectives are scaled so that the relative-error floor of 1e-8 only
/// hides gradients that are negligible against the objective.
const OBJECTIVE_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub component: &'static str,
    pub group: String,
    pub max_relative_error: f64,
    pub checked: usize,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negates every analytic gradient; the suite must then fail.
    pub negate_analytic: bool,
    /// Elements checked per parameter group (all when the group is smaller).
    pub per_group: usize,
}

fn pick(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Option<Vec<usize>> {
    if n == 0 || n >= len {
        return None;
    }
    let mut ix: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
    ix.sort_unstable();
    ix.dedup();
    Some(ix)
}

fn opts(rng: &mut ChaCha8Rng, len: usize, o: &SuiteOptions) -> GradCheck {
    GradCheck {
        epsilon: EPSILON,
        indices: pick(rng, len, o.per_group),
        negate_analytic: o.negate_analytic,
    }
}

/// Small scene used by the decoder and renderer checks: 2 views of 32 × 32.
fn small_spec() -> Result<SceneSpec> {
    Ok(SceneSpec {
        n_objects: 2,
        bounds: Bounds::cube(1.0)?,
        n_views: 2,
        image_size: (32, 32),
        gaussians_per_object: 6,
        focal: 30.0,
        ..SceneSpec::default()
    })
}

/// Central differences of a weighted sum of one rendered view against every
/// parameter class of up to 12 Gaussians.
pub fn check_renderer(o: &SuiteOptions) -> Result<Vec<GroupReport>> {
    let spec = small_spec()?;
    let scene = generate_scene(&spec, o.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0xc0ffee);
    let gs = &scene.gaussians[..scene.gaussians.len().min(12)];
    let k = gs.len();
    let mut arrays = vec![
        Array::matrix(
            k,
            3,
            gs.iter()
                .flat_map(|g| g.mu.iter().copied().collect::<Vec<_>>())
                .collect(),
        ),
        Array::matrix(
            k,
            4,
            gs.iter()
                .flat_map(|g| g.quat.iter().copied().collect::<Vec<_>>())
                .collect(),
        ),
        Array::matrix(
            k,
            3,
            gs.iter()
                .flat_map(|g| g.scale.iter().map(|s| s * 2.0).collect::<Vec<_>>())
                .collect(),
        ),
        Array::matrix(k, 1, gs.iter().map(|g| g.opacity * 0.8).collect()),
        Array::matrix(
            k,
            3,
            gs.iter()
                .flat_map(|g| g.color.iter().copied().collect::<Vec<_>>())
                .collect(),
        ),
    ];
    // a perturbed rotation exercises the quaternion normalization path
    for v in arrays[1].data_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    let cam = scene.cameras[0].clone();
    let n = cam.width * cam.height;
    let weights = Array::matrix(n, 4, (0..n * 4).map(|_| rng.random_range(-1e-3..1e-3)).collect());
    let settings = RenderSettings::check_mode();
    let names = ["means", "quats", "scales", "opacities", "colors"];
    let mut out = Vec::new();
    for (class, name) in names.iter().enumerate() {
        let go = opts(&mut rng, arrays[class].len(), o);
        let r = check_gradient(&arrays[class], &go, |g: &mut Graph, x| {
            let mut ids = Vec::with_capacity(5);
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
        })?;
        out.push(GroupReport {
            component: "renderer",
            group: name.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
        });
    }
    Ok(out)
}

/// A deliberately tiny model for finite differences.
pub fn tiny_model_config() -> Result<ModelConfig> {
    Ok(ModelConfig {
        encoder: EncoderConfig {
            stem_width: 4,
            stage_widths: [4, 4, 4, 4],
            fpn_width: 4,
        },
        decoder: DecoderConfig {
            n_layers: 2,
            n_offsets: 2,
            n_heads: 2,
            voxel_size: None,
            k: 8,
            feature_dim: 8,
            ffn_dim: 8,
        },
        bounds: Bounds::cube(1.0)?,
        n_views: 2,
    })
}

pub const DECODER_GROUPS: [&str; 6] = [
    "queries.anchors",
    "encoder.stem.w",
    "encoder.stage1.w",
    "encoder.stage3.w",
    "encoder.lateral2.w",
    "encoder.smooth0.w",
];

/// Gradient of the view-averaged reconstruction loss with respect to the
/// query anchors and encoder weights.
pub fn check_decoder(o: &SuiteOptions) -> Result<Vec<GroupReport>> {
    let spec = small_spec()?;
    let sample = bake_ground_truth(&generate_scene(&spec, o.seed)?)?;
    let model = SqsModel::init(tiny_model_config()?, o.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0xdec0de);
    let settings = RenderSettings::check_mode();
    let w = LossWeights::default();
    let mut out = Vec::new();
    for name in DECODER_GROUPS {
        let point = model.params.get(name)?.clone();
        let go = opts(&mut rng, point.len(), o);
        let r = check_gradient(&point, &go, |g: &mut Graph, x| {
            g.param_from(name, x);
            let f = model.forward(g, &sample.rgb, &sample.cameras, true)?;
            let (loss, _) = views_loss(g, &f.splats, &sample, &w, &settings)?;
            g.scale(loss, OBJECTIVE_SCALE)
        })?;
        out.push(GroupReport {
            component: "decoder",
            group: name.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
        });
    }
    Ok(out)
}

pub const INTERACTION_GROUPS: [&str; 7] = [
    "task.queries",
    "interact.q.w",
    "interact.k.w",
    "interact.v.w",
    "interact.out.w",
    "interact.pe_task.fc1.w",
    "interact.pe_anchor.fc1.w",
];

/// Cross-entropy of the occupancy head after interaction, with respect to the
/// task queries and every interaction projection. The image branch is left
/// out by checking on a graph without it.
pub fn check_interaction(o: &SuiteOptions) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x1a7e);
    let model = SqsModel::init(tiny_model_config()?, o.seed)?;
    let cfg = TaskConfig {
        grid: 3,
        d_task: 8,
        hidden: 8,
        d_pretrained: 8,
        interaction: true,
        inter: crate::finetune::InteractionConfig {
            k: 4,
            alpha_thresh: 0.05,
            pe_hidden: 8,
        },
    };
    let mut task = TaskModel::init(cfg.clone(), &model, o.seed)?;
    let m = cfg.grid.pow(3);
    let q = Array::matrix(
        m,
        cfg.d_task,
        (0..m * cfg.d_task).map(|_| rng.random_range(-0.5..0.5)).collect(),
    );
    task.params.insert("task.queries", q);
    let n = 10;
    let mut params = Vec::with_capacity(n * ANCHOR_VEC_DIM);
    for _ in 0..n {
        params.extend((0..3).map(|_| rng.random_range(-1.0..1.0)));
        params.extend((0..3).map(|_| rng.random_range(0.02..0.2)));
        params.extend((0..4).map(|_| rng.random_range(-1.0..1.0)));
        params.push(rng.random_range(0.1..1.0));
    }
    let gq = FilteredAnchors {
        params: Array::matrix(n, ANCHOR_VEC_DIM, params),
        features: Array::matrix(
            n,
            cfg.d_pretrained,
            (0..n * cfg.d_pretrained).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ),
        indices: (0..n).collect(),
        neighbors: None,
    };
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
    let positions = task.positions();
    let mut out = Vec::new();
    for name in INTERACTION_GROUPS {
        let point = task.params.get(name)?.clone();
        let go = opts(&mut rng, point.len(), o);
        let r = check_gradient(&point, &go, |g: &mut Graph, x| {
            g.param_from(name, x);
            let logits = interaction_logits(g, &task, &positions, &gq)?;
            let l = cross_entropy(g, logits, &labels)?;
            g.scale(l, OBJECTIVE_SCALE)
        })?;
        out.push(GroupReport {
            component: "interaction",
            group: name.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.checked,
        });
    }
    Ok(out)
}

fn interaction_logits(g: &mut Graph, task: &TaskModel, positions: &Array, gq: &FilteredAnchors) -> Result<NodeId> {
    let mut ctx = crate::nn::Ctx::new(g, &task.params, true);
    let q = ctx.p("task.queries")?;
    let f = crate::finetune::local_query_interaction(&mut ctx, q, positions, gq, &task.cfg)?;
    crate::finetune::occupancy_head(&mut ctx, f)
}

/// Renderer, decoder and interaction checks in that order.
pub fn run_suite(o: &SuiteOptions) -> Result<Vec<GroupReport>> {
    let mut out = check_renderer(o)?;
    out.extend(check_decoder(o)?);
    out.extend(check_interaction(o)?);
    Ok(out)
}
