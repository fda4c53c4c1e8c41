use nalgebra::{Vector3, Vector4};

use super::{render, render_backward, RenderCache, RenderOutput, RenderSettings};
use crate::autodiff::{Array, CustomOp, Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianPrimitive};

/// Graph nodes holding per-Gaussian parameters, one row per Gaussian:
/// means `[K, 3]`, raw quaternions `[K, 4]`, scales `[K, 3]`, opacities
/// `[K, 1]`, colors `[K, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct SplatParams {
    pub means: NodeId,
    pub quats: NodeId,
    pub scales: NodeId,
    pub opacities: NodeId,
    pub colors: NodeId,
}

/// A rendered view inside a graph: `node` is `[H·W, 4]` with columns
/// `(r, g, b, depth)`; `output` carries the same images plus `alpha_acc`.
pub struct RenderNode {
    pub node: NodeId,
    pub output: RenderOutput,
}

pub(crate) fn primitives_from_arrays(
    means: &Array,
    quats: &Array,
    scales: &Array,
    opacities: &Array,
    colors: &Array,
) -> Result<Vec<GaussianPrimitive>> {
    let k = means.rows();
    if [quats.rows(), scales.rows(), opacities.rows(), colors.rows()]
        .iter()
        .any(|&r| r != k)
        || means.cols() != 3
        || quats.cols() != 4
        || scales.cols() != 3
        || opacities.cols() != 1
        || colors.cols() != 3
    {
        return Err(Error::invalid("splat parameter arrays have inconsistent shapes"));
    }
    Ok((0..k)
        .map(|i| {
            let m = means.row(i);
            let q = quats.row(i);
            let s = scales.row(i);
            let c = colors.row(i);
            GaussianPrimitive {
                mu: Vector3::new(m[0], m[1], m[2]),
                quat: Vector4::new(q[0], q[1], q[2], q[3]),
                scale: Vector3::new(s[0], s[1], s[2]),
                opacity: opacities.row(i)[0],
                color: Vector3::new(c[0], c[1], c[2]),
            }
        })
        .collect())
}

struct RenderOp {
    cache: RenderCache,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let n = grad.rows();
        let mut g_rgb = Vec::with_capacity(n * 3);
        let mut g_depth = Vec::with_capacity(n);
        for r in 0..n {
            let row = grad.row(r);
            g_rgb.extend_from_slice(&row[..3]);
            g_depth.push(row[3]);
        }
        let grads = render_backward(&self.cache, &Array::matrix(n, 3, g_rgb), &Array::matrix(n, 1, g_depth))?;
        let k = grads.len();
        let mut mu = Vec::with_capacity(k * 3);
        let mut quat = Vec::with_capacity(k * 4);
        let mut scale = Vec::with_capacity(k * 3);
        let mut opacity = Vec::with_capacity(k);
        let mut color = Vec::with_capacity(k * 3);
        for g in &grads {
            mu.extend(g.mu.iter());
            quat.extend(g.quat.iter());
            scale.extend(g.scale.iter());
            opacity.push(g.opacity);
            color.extend(g.color.iter());
        }
        debug_assert_eq!(inputs.len(), 5);
        Ok(vec![
            Some(Array::matrix(k, 3, mu)),
            Some(Array::matrix(k, 4, quat)),
            Some(Array::matrix(k, 3, scale)),
            Some(Array::matrix(k, 1, opacity)),
            Some(Array::matrix(k, 3, color)),
        ])
    }
}

/// Renders one camera from splat parameters held in `graph`.
pub fn render_node(
    graph: &mut Graph,
    params: &SplatParams,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RenderNode> {
    let prims = primitives_from_arrays(
        graph.value(params.means),
        graph.value(params.quats),
        graph.value(params.scales),
        graph.value(params.opacities),
        graph.value(params.colors),
    )?;
    let (output, cache) = render(&prims, cam, settings)?;
    let n = cam.width * cam.height;
    let mut v = Vec::with_capacity(n * 4);
    for p in 0..n {
        v.extend_from_slice(&output.rgb.data()[p * 3..p * 3 + 3]);
        v.push(output.depth.data()[p]);
    }
    let node = graph.custom(
        &[
            params.means,
            params.quats,
            params.scales,
            params.opacities,
            params.colors,
        ],
        Array::matrix(n, 4, v),
        Box::new(RenderOp { cache }),
    )?;
    Ok(RenderNode { node, output })
}

/// Stateful wrapper pairing a forward render with its backward pass.
#[derive(Debug, Default)]
pub struct Renderer {
    pub settings: RenderSettings,
    cache: Option<RenderCache>,
}

impl Renderer {
    pub fn new(settings: RenderSettings) -> Self {
        Self { settings, cache: None }
    }

    pub fn forward(&mut self, gaussians: &[GaussianPrimitive], cam: &Camera) -> Result<RenderOutput> {
        let (out, cache) = render(gaussians, cam, &self.settings)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, grad_rgb: &Array, grad_depth: &Array) -> Result<Vec<super::GaussianGrad>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("render backward called before a forward pass"))?;
        render_backward(cache, grad_rgb, grad_depth)
    }
}
