//! Gaussian query decoder.
//!
//! Each query pairs an 11-wide raw anchor `(position 3, scale 3, quat 4,
//! opacity 1)` with a feature vector. A refinement layer adds an anchor
//! embedding to the feature, runs a voxelized 3×3×3 sparse convolution,
//! deformable cross-attention into the image pyramid and a feed-forward
//! block, then a head that adds a delta to the raw position and replaces the
//! raw scale, rotation and opacity.

use std::collections::HashMap;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{logit, sigmoid, Array, CustomOp, NodeId};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianPrimitive};
use crate::nn::{Ctx, ParamStore};
use crate::render::SplatParams;
use crate::sampling::{head_weighted_sum, sample_pyramid};
use crate::scene::Bounds;

pub const ANCHOR_DIM: usize = 11;
/// Fraction of the bounds extent for the smallest and largest decoded scale.
pub const SCALE_RANGE: (f64, f64) = (0.001, 0.25);
pub const INIT_SCALE: f64 = 0.02;
pub const INIT_OPACITY: f64 = 0.1;
const SAMPLE_NEAR: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_offsets: usize,
    pub n_heads: usize,
    /// Metres; `None` means bounds extent / 32.
    pub voxel_size: Option<f64>,
    pub k: usize,
    pub feature_dim: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_offsets: 4,
            n_heads: 4,
            voxel_size: None,
            k: 512,
            feature_dim: 64,
            ffn_dim: 128,
        }
    }
}

impl DecoderConfig {
    pub fn voxel_size(&self, bounds: &Bounds) -> f64 {
        self.voxel_size.unwrap_or(bounds.extent() / 32.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_offsets == 0 || self.n_heads == 0 || self.k == 0 || self.feature_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if matches!(self.voxel_size, Some(v) if !(v > 0.0)) {
            return Err(Error::Config("decoder.voxel_size must be positive".into()));
        }
        Ok(())
    }
}

/// Anchors `[K, 11]` and features `[K, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianQuerySet {
    pub anchors: Array,
    pub features: Array,
    pub bounds: Bounds,
}

/// Raw-space values that decode to the initial scale and opacity.
pub fn init_raw_scale() -> f64 {
    logit((INIT_SCALE - SCALE_RANGE.0) / (SCALE_RANGE.1 - SCALE_RANGE.0))
}

pub fn init_raw_opacity() -> f64 {
    logit(INIT_OPACITY)
}

/// Positions uniform in the bounds (sampled in logit space), identity
/// rotation, scale at 2% of the extent, opacity 0.1, zero features.
pub fn init_queries(k: usize, feature_dim: usize, bounds: &Bounds, seed: u64) -> Result<GaussianQuerySet> {
    if k == 0 {
        return Err(Error::invalid("query count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rs = init_raw_scale();
    let ro = init_raw_opacity();
    let mut a = Vec::with_capacity(k * ANCHOR_DIM);
    for _ in 0..k {
        for _ in 0..3 {
            a.push(logit(rng.random_range(0.001..0.999)));
        }
        a.extend_from_slice(&[rs, rs, rs, 1.0, 0.0, 0.0, 0.0, ro]);
    }
    Ok(GaussianQuerySet {
        anchors: Array::matrix(k, ANCHOR_DIM, a),
        features: Array::zeros(&[k, feature_dim]),
        bounds: *bounds,
    })
}

/// Adds query and decoder parameters. `n_views` and `n_levels` fix the width
/// of the attention-weight projection.
pub fn init_decoder(
    store: &mut ParamStore,
    cfg: &DecoderConfig,
    bounds: &Bounds,
    pyramid: (usize, usize),
    n_views: usize,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let (n_levels, pyramid_width) = pyramid;
    if pyramid_width % cfg.n_heads != 0 {
        return Err(Error::Config(format!(
            "pyramid width {pyramid_width} is not divisible by decoder.n_heads {}",
            cfg.n_heads
        )));
    }
    let q = init_queries(cfg.k, cfg.feature_dim, bounds, seed)?;
    store.insert("queries.anchors", q.anchors);
    store.insert("queries.features", q.features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_dec0);
    let d = cfg.feature_dim;
    let m = cfg.n_offsets * n_views * n_levels;
    for l in 0..cfg.n_layers {
        let p = format!("decoder.{l}");
        store.add_mlp2(&mut rng, &format!("{p}.anchor_embed"), (ANCHOR_DIM, d, d), 1.0);
        let bound = (6.0 / (28.0 * d as f64)).sqrt();
        let w = (0..d * 27 * d).map(|_| rng.random_range(-bound..bound)).collect();
        store.insert(format!("{p}.sparse_conv.w"), Array::matrix(27 * d, d, w));
        store.insert(format!("{p}.sparse_conv.b"), Array::zeros(&[1, d]));
        store.add_linear(&mut rng, &format!("{p}.attn.offsets"), d, 3 * cfg.n_offsets, 0.1);
        store.add_linear(&mut rng, &format!("{p}.attn.weights"), d, cfg.n_heads * m, 0.1);
        store.add_linear(&mut rng, &format!("{p}.attn.out"), pyramid_width, d, 1.0);
        store.add_linear(&mut rng, &format!("{p}.ffn.fc1"), d, cfg.ffn_dim, 1.0);
        store.add_linear(&mut rng, &format!("{p}.ffn.fc2"), cfg.ffn_dim, d, 1.0);
        for (name, width, bias) in [
            ("pos", 3, vec![0.0; 3]),
            ("scale", 3, vec![init_raw_scale(); 3]),
            ("quat", 4, vec![1.0, 0.0, 0.0, 0.0]),
            ("opacity", 1, vec![init_raw_opacity()]),
        ] {
            let h = format!("{p}.head.{name}");
            store.add_mlp2(&mut rng, &h, (d, d, width), 0.1);
            store.insert(format!("{h}.fc2.b"), Array::matrix(1, width, bias));
        }
    }
    store.add_mlp2(&mut rng, "decoder.color", (d, d, 3), 0.1);
    Ok(())
}

/// Graph handles for a query set.
#[derive(Debug, Clone, Copy)]
pub struct QueryNodes {
    pub anchors: NodeId,
    pub features: NodeId,
}

fn row_const(ctx: &mut Ctx, v: &[f64]) -> Result<NodeId> {
    ctx.g.constant(Array::matrix(1, v.len(), v.to_vec()))
}

/// `μ = min + sigmoid(raw_pos) · size`, `[K, 3]`.
pub fn decode_means(ctx: &mut Ctx, anchors: NodeId, bounds: &Bounds) -> Result<NodeId> {
    let raw = ctx.g.slice_cols(anchors, 0, 3)?;
    let s = ctx.g.sigmoid(raw)?;
    let size = row_const(ctx, bounds.size().as_slice())?;
    let min = row_const(ctx, bounds.min.as_slice())?;
    let m = ctx.g.mul(s, size)?;
    ctx.g.add(m, min)
}

/// Integer voxel coordinates `⌊(μ − origin) / voxel_size⌋` per row of `means`.
pub fn voxel_keys(means: &Array, origin: &Vector3<f64>, voxel_size: f64) -> Vec<[i64; 3]> {
    (0..means.rows())
        .map(|r| {
            let m = means.row(r);
            [0, 1, 2].map(|i| ((m[i] - origin[i]) / voxel_size).floor() as i64)
        })
        .collect()
}

/// Mean-pools query features per occupied voxel, applies one 3×3×3 sparse
/// convolution (absent neighbours contribute zero) and adds the result of each
/// query's voxel back onto its feature.
///
/// The weight `{prefix}.w` is `[27·D, D]`, one `D × D` block per offset in
/// `(dz, dy, dx)` order; `{prefix}.b` is `[1, D]`.
pub fn voxelize_and_sparse_conv(
    ctx: &mut Ctx,
    features: NodeId,
    means: &Array,
    origin: &Vector3<f64>,
    voxel_size: f64,
    prefix: &str,
) -> Result<NodeId> {
    if !(voxel_size > 0.0) {
        return Err(Error::invalid("voxel_size must be positive"));
    }
    let keys = voxel_keys(means, origin, voxel_size);
    let mut ids: HashMap<[i64; 3], usize> = HashMap::new();
    let mut voxel_of = Vec::with_capacity(keys.len());
    let mut voxels = Vec::new();
    for k in &keys {
        let next = voxels.len();
        let id = *ids.entry(*k).or_insert(next);
        if id == next {
            voxels.push(*k);
        }
        voxel_of.push(id);
    }
    let nvox = voxels.len();
    let mut counts = vec![0.0; nvox];
    for &v in &voxel_of {
        counts[v] += 1.0;
    }
    let summed = ctx.g.scatter_add(features, voxel_of.clone(), nvox)?;
    let inv = ctx
        .g
        .constant(Array::matrix(nvox, 1, counts.iter().map(|c| 1.0 / c).collect()))?;
    let pooled = ctx.g.mul(summed, inv)?;

    let mut pairs = Vec::new();
    for (dst, key) in voxels.iter().enumerate() {
        let mut o = 0;
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if let Some(&src) = ids.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                        pairs.push((src, dst, o));
                    }
                    o += 1;
                }
            }
        }
    }
    let w = ctx.p(&format!("{prefix}.w"))?;
    let conv = sparse_conv(ctx, pooled, w, pairs, nvox)?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let conv = ctx.g.add(conv, b)?;
    let back = ctx.g.gather_rows(conv, &voxel_of)?;
    ctx.g.add(features, back)
}

/// `out[dst] += x[src] · W_o` over `(src, dst, o)` neighbour pairs, with
/// `W_o` the `o`-th `D × D` row block of `w`.
fn sparse_conv(ctx: &mut Ctx, x: NodeId, w: NodeId, pairs: Vec<(usize, usize, usize)>, nvox: usize) -> Result<NodeId> {
    let (xv, wv) = (ctx.g.value(x), ctx.g.value(w));
    let d = xv.cols();
    if wv.rows() != 27 * d || wv.cols() != d {
        return Err(Error::invalid(format!(
            "sparse conv weight {:?}, expected [{}, {d}]",
            wv.shape(),
            27 * d
        )));
    }
    let mut out = vec![0.0; nvox * d];
    for &(src, dst, o) in &pairs {
        let xr = xv.row(src);
        let acc = &mut out[dst * d..(dst + 1) * d];
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                for (a, &wij) in acc.iter_mut().zip(wv.row(o * d + i)) {
                    *a += xi * wij;
                }
            }
        }
    }
    ctx.g
        .custom(&[x, w], Array::matrix(nvox, d, out), Box::new(SparseConvOp { pairs }))
}

struct SparseConvOp {
    pairs: Vec<(usize, usize, usize)>,
}

impl CustomOp for SparseConvOp {
    fn name(&self) -> &'static str {
        "sparse_conv"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let (xv, wv) = (inputs[0], inputs[1]);
        let d = xv.cols();
        let mut dx = vec![0.0; xv.len()];
        let mut dw = vec![0.0; wv.len()];
        for &(src, dst, o) in &self.pairs {
            let gr = grad.row(dst);
            let xr = xv.row(src);
            for i in 0..d {
                let wr = wv.row(o * d + i);
                let mut acc = 0.0;
                for j in 0..d {
                    acc += gr[j] * wr[j];
                }
                dx[src * d + i] += acc;
                let xi = xr[i];
                if xi != 0.0 {
                    let row = &mut dw[(o * d + i) * d..(o * d + i + 1) * d];
                    for (r, &gj) in row.iter_mut().zip(gr) {
                        *r += xi * gj;
                    }
                }
            }
        }
        Ok(vec![
            Some(Array::matrix(xv.rows(), d, dx)),
            Some(Array::matrix(wv.rows(), d, dw)),
        ])
    }
}

/// Deformable cross-attention with learned per-head weights over
/// `(offset, view, level)` samples. Returns `features + out_proj(aggregate)`.
#[allow(clippy::too_many_arguments)]
pub fn deformable_cross_attention(
    ctx: &mut Ctx,
    features: NodeId,
    means: NodeId,
    pyramid: &FeaturePyramid,
    cameras: &[Camera],
    cfg: &DecoderConfig,
    voxel_size: f64,
    prefix: &str,
) -> Result<NodeId> {
    let nv = cameras.len();
    if nv == 0 {
        return Err(Error::invalid("deformable attention needs at least one view"));
    }
    let k = ctx.g.value(features).rows();
    let o = cfg.n_offsets;
    let nl = pyramid.levels.len();
    let m = o * nv * nl;

    let off = ctx.linear(features, &format!("{prefix}.offsets"))?;
    let off = ctx.g.tanh(off)?;
    let off = ctx.g.scale(off, voxel_size)?;
    let off = ctx.g.reshape(off, k * o, 3)?;
    let rep: Vec<usize> = (0..k).flat_map(|q| std::iter::repeat_n(q, o)).collect();
    let base = ctx.g.gather_rows(means, &rep)?;
    let points = ctx.g.add(base, off)?;
    let samples = sample_pyramid(ctx.g, points, &pyramid.levels, &pyramid.layout, cameras, SAMPLE_NEAR)?;

    let cols = cfg.n_heads * m;
    let logits = ctx.linear(features, &format!("{prefix}.weights"))?;
    if ctx.g.value(logits).cols() != cols {
        return Err(Error::Config(format!(
            "attention weights were built for a different view count (expected {cols} logits per query)"
        )));
    }
    let logits = ctx.g.reshape(logits, k * cfg.n_heads, m)?;
    let weights = ctx.g.softmax(logits)?;
    let weights = ctx.g.reshape(weights, k, cols)?;
    let agg = head_weighted_sum(ctx.g, weights, samples, cfg.n_heads)?;
    let out = ctx.linear(agg, &format!("{prefix}.out"))?;
    ctx.g.add(features, out)
}

/// One refinement layer; returns the updated anchors and features.
pub fn refine_layer(
    ctx: &mut Ctx,
    q: QueryNodes,
    pyramid: &FeaturePyramid,
    cameras: &[Camera],
    cfg: &DecoderConfig,
    bounds: &Bounds,
    layer: usize,
) -> Result<QueryNodes> {
    let p = format!("decoder.{layer}");
    let vs = cfg.voxel_size(bounds);
    let means = decode_means(ctx, q.anchors, bounds)?;
    let e = ctx.mlp2(q.anchors, &format!("{p}.anchor_embed"))?;
    let mut f = ctx.g.add(q.features, e)?;
    let mv = ctx.g.value(means).clone();
    f = voxelize_and_sparse_conv(ctx, f, &mv, &bounds.min, vs, &format!("{p}.sparse_conv"))?;
    f = ctx.g.layer_norm(f, LN_EPS)?;
    f = deformable_cross_attention(ctx, f, means, pyramid, cameras, cfg, vs, &format!("{p}.attn"))?;
    f = ctx.g.layer_norm(f, LN_EPS)?;
    let h = ctx.linear(f, &format!("{p}.ffn.fc1"))?;
    let h = ctx.g.relu(h)?;
    let h = ctx.linear(h, &format!("{p}.ffn.fc2"))?;
    f = ctx.g.add(f, h)?;
    f = ctx.g.layer_norm(f, LN_EPS)?;

    let dpos = ctx.mlp2(f, &format!("{p}.head.pos"))?;
    let scale = ctx.mlp2(f, &format!("{p}.head.scale"))?;
    let quat = ctx.mlp2(f, &format!("{p}.head.quat"))?;
    let opacity = ctx.mlp2(f, &format!("{p}.head.opacity"))?;
    let raw_pos = ctx.g.slice_cols(q.anchors, 0, 3)?;
    let pos = ctx.g.add(raw_pos, dpos)?;
    let anchors = ctx.g.concat_cols(&[pos, scale, quat, opacity])?;
    Ok(QueryNodes { anchors, features: f })
}

/// Graph outputs of [`gaussian_head`]: splat parameters ready for rendering.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub splats: SplatParams,
}

/// Activations: position and scale through sigmoid into their ranges,
/// opacity through sigmoid, color from the color MLP. Quaternions stay raw;
/// normalization happens at projection.
pub fn gaussian_head(ctx: &mut Ctx, q: QueryNodes, bounds: &Bounds) -> Result<HeadOutput> {
    let means = decode_means(ctx, q.anchors, bounds)?;
    let e = bounds.extent();
    let (lo, hi) = (SCALE_RANGE.0 * e, SCALE_RANGE.1 * e);
    let rs = ctx.g.slice_cols(q.anchors, 3, 6)?;
    let s = ctx.g.sigmoid(rs)?;
    let s = ctx.g.scale(s, hi - lo)?;
    let scales = ctx.g.add_scalar(s, lo)?;
    let quats = ctx.g.slice_cols(q.anchors, 6, 10)?;
    let ro = ctx.g.slice_cols(q.anchors, 10, 11)?;
    let opacities = ctx.g.sigmoid(ro)?;
    let c = ctx.mlp2(q.features, "decoder.color")?;
    let colors = ctx.g.sigmoid(c)?;
    Ok(HeadOutput {
        splats: SplatParams {
            means,
            quats,
            scales,
            opacities,
            colors,
        },
    })
}

/// Decoder result: renderable splats and the final query state.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOutput {
    pub splats: SplatParams,
    pub queries: QueryNodes,
}

pub fn decode(
    ctx: &mut Ctx,
    cfg: &DecoderConfig,
    bounds: &Bounds,
    pyramid: &FeaturePyramid,
    cameras: &[Camera],
) -> Result<DecodeOutput> {
    let mut q = QueryNodes {
        anchors: ctx.p("queries.anchors")?,
        features: ctx.p("queries.features")?,
    };
    for l in 0..cfg.n_layers {
        q = refine_layer(ctx, q, pyramid, cameras, cfg, bounds, l)?;
    }
    let head = gaussian_head(ctx, q, bounds)?;
    Ok(DecodeOutput {
        splats: head.splats,
        queries: q,
    })
}

/// Decoded primitives with normalized quaternions. Raw quaternions with norm
/// below 1e-8 become the identity and are counted in the second value.
pub fn primitives_from_splats(
    means: &Array,
    quats: &Array,
    scales: &Array,
    opacities: &Array,
    colors: &Array,
) -> (Vec<GaussianPrimitive>, usize) {
    let mut degenerate = 0;
    let out = (0..means.rows())
        .map(|i| {
            let q = quats.row(i);
            let q = Vector4::new(q[0], q[1], q[2], q[3]);
            let n = q.norm();
            let quat = if n < 1e-8 {
                degenerate += 1;
                Vector4::new(1.0, 0.0, 0.0, 0.0)
            } else {
                q / n
            };
            let m = means.row(i);
            let s = scales.row(i);
            let c = colors.row(i);
            GaussianPrimitive {
                mu: Vector3::new(m[0], m[1], m[2]),
                quat,
                scale: Vector3::new(s[0], s[1], s[2]),
                opacity: opacities.row(i)[0],
                color: Vector3::new(c[0], c[1], c[2]),
            }
        })
        .collect();
    (out, degenerate)
}

/// Decodes one raw anchor row directly (no graph), for inspection and tests.
pub fn decode_anchor(raw: &[f64], bounds: &Bounds) -> (Vector3<f64>, Vector3<f64>, Vector4<f64>, f64) {
    let e = bounds.extent();
    let (lo, hi) = (SCALE_RANGE.0 * e, SCALE_RANGE.1 * e);
    let size = bounds.size();
    let mu = Vector3::from_fn(|i, _| bounds.min[i] + sigmoid(raw[i]) * size[i]);
    let scale = Vector3::from_fn(|i, _| lo + sigmoid(raw[3 + i]) * (hi - lo));
    let q = Vector4::new(raw[6], raw[7], raw[8], raw[9]);
    let n = q.norm();
    let quat = if n < 1e-8 {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    } else {
        q / n
    };
    (mu, scale, quat, sigmoid(raw[10]))
}
