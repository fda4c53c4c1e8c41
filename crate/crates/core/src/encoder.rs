//! Toy convolutional backbone and feature-pyramid neck.
//!
//! A stride-2 stem is followed by four stride-2 stages (3×3 conv, layer norm
//! over channels, relu), giving backbone maps at strides 4, 8, 16 and 32.
//! The neck applies 1×1 laterals to a common width, adds nearest-upsampled
//! coarser levels top-down, and smooths each level with a 3×3 conv.
//!
//! Feature maps are stored as `[N·h·w, C]` row matrices, one row per pixel.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, NodeId};
use crate::error::{Error, Result};
use crate::nn::{conv3x3, Ctx, ParamStore};
use crate::sampling::PyramidLayout;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub fpn_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            stage_widths: [16, 32, 64, 128],
            fpn_width: 32,
        }
    }
}

/// Per-level feature nodes for all views of one sample.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<NodeId>,
    pub layout: PyramidLayout,
}

pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let gain = 2f64.sqrt();
    store.add_linear(rng, "encoder.stem", 27, cfg.stem_width, gain);
    let mut cin = cfg.stem_width;
    for (i, &w) in cfg.stage_widths.iter().enumerate() {
        store.add_linear(rng, &format!("encoder.stage{i}"), 9 * cin, w, gain);
        cin = w;
    }
    for (i, &w) in cfg.stage_widths.iter().enumerate() {
        store.add_linear(rng, &format!("encoder.lateral{i}"), w, cfg.fpn_width, 1.0);
        store.add_linear(
            rng,
            &format!("encoder.smooth{i}"),
            9 * cfg.fpn_width,
            cfg.fpn_width,
            1.0,
        );
    }
}

/// Stacks `[H, W, 3]` images into one `[N·H·W, 3]` matrix.
pub fn stack_images(images: &[Array]) -> Result<(Array, usize, usize)> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to encode"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for im in images {
        if im.shape() != [h, w, 3] {
            return Err(Error::invalid(format!(
                "image shape {:?}, expected [{h}, {w}, 3]",
                im.shape()
            )));
        }
        data.extend_from_slice(im.data());
    }
    Ok((Array::matrix(images.len() * h * w, 3, data), h, w))
}

/// Nearest 2× upsampling indices from `(hc, wc)` to `(hf, wf)`.
fn upsample_indices(n: usize, (hc, wc): (usize, usize), (hf, wf): (usize, usize)) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * hf * wf);
    for b in 0..n {
        for y in 0..hf {
            for x in 0..wf {
                idx.push(b * hc * wc + (y / 2).min(hc - 1) * wc + (x / 2).min(wc - 1));
            }
        }
    }
    idx
}

pub fn encode(ctx: &mut Ctx, cfg: &EncoderConfig, images: &[Array]) -> Result<FeaturePyramid> {
    let (stacked, h, w) = stack_images(images)?;
    let x = ctx.g.constant(stacked)?;
    encode_stacked(ctx, cfg, x, (images.len(), h, w))
}

/// [`encode`] on an already stacked `[N·H·W, 3]` node, so that gradients can
/// reach the pixels.
pub fn encode_stacked(
    ctx: &mut Ctx,
    cfg: &EncoderConfig,
    x: NodeId,
    dims: (usize, usize, usize),
) -> Result<FeaturePyramid> {
    let (n, h, w) = dims;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid(format!("image size {w}x{h} is not divisible by 32")));
    }
    if ctx.g.value(x).shape() != [n * h * w, 3] {
        return Err(Error::invalid(format!(
            "stacked images {:?}, expected [{}, 3]",
            ctx.g.value(x).shape(),
            n * h * w
        )));
    }
    let (mut x, mut ch, mut cw) = conv3x3(ctx, x, (n, h, w), 2, "encoder.stem")?;
    x = ctx.g.relu(x)?;
    let mut feats = Vec::with_capacity(4);
    for i in 0..4 {
        let (y, hh, ww) = conv3x3(ctx, x, (n, ch, cw), 2, &format!("encoder.stage{i}"))?;
        let y = ctx.g.layer_norm(y, 1e-5)?;
        x = ctx.g.relu(y)?;
        ch = hh;
        cw = ww;
        feats.push((x, hh, ww));
    }
    let mut levels = vec![None; 4];
    let mut sizes = vec![(0, 0); 4];
    let mut above: Option<(NodeId, usize, usize)> = None;
    for i in (0..4).rev() {
        let (f, hh, ww) = feats[i];
        let mut p = ctx.linear(f, &format!("encoder.lateral{i}"))?;
        if let Some((up, uh, uw)) = above {
            let u = ctx.g.gather_rows(up, &upsample_indices(n, (uh, uw), (hh, ww)))?;
            p = ctx.g.add(p, u)?;
        }
        above = Some((p, hh, ww));
        let (s, _, _) = conv3x3(ctx, p, (n, hh, ww), 1, &format!("encoder.smooth{i}"))?;
        levels[i] = Some(s);
        sizes[i] = (hh, ww);
    }
    Ok(FeaturePyramid {
        levels: levels.into_iter().map(|l| l.expect("every level built")).collect(),
        layout: PyramidLayout {
            sizes,
            strides: STRIDES.to_vec(),
            n_views: n,
            channels: cfg.fpn_width,
        },
    })
}
