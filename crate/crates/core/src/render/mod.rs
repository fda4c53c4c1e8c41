//! Splat rasterization of RGB and depth, the brute-force reference renderer
//! and the analytic backward pass.
//!
//! Pixel `(x, y)` is evaluated at image-plane coordinate `(x, y)`, so the
//! principal point of a `W`-wide image centered on the optical axis is
//! `(W - 1) / 2`.

pub mod image_io;
mod op;
mod raster;

use nalgebra::{Matrix2, Vector2, Vector3};

pub use op::{render_node, RenderNode, Renderer, SplatParams};
pub use raster::{render, render_backward, render_reference, GaussianGrad, RenderCache, TileIndex};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::geometry::{ProjectedGaussian, ProjectionSettings};

/// Rasterizer thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Upper clamp on a single splat's alpha.
    pub alpha_clamp: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this.
    pub t_min: f64,
    pub projection: ProjectionSettings,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_clamp: 0.9999,
            alpha_min: 1.0 / 255.0,
            t_min: 1e-4,
            projection: ProjectionSettings::default(),
        }
    }
}

impl RenderSettings {
    /// All discontinuous thresholds disabled; used for finite-difference checks.
    pub fn check_mode() -> Self {
        Self {
            alpha_clamp: 1.0,
            alpha_min: 0.0,
            t_min: 0.0,
            ..Self::default()
        }
    }
}

/// Rendered images: `rgb` is `[H, W, 3]`, `depth` and `alpha_acc` are `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Array,
    pub depth: Array,
    pub alpha_acc: Array,
}

impl RenderOutput {
    pub fn background(width: usize, height: usize) -> Self {
        Self {
            rgb: Array::zeros(&[height, width, 3]),
            depth: Array::zeros(&[height, width]),
            alpha_acc: Array::zeros(&[height, width]),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    /// Largest absolute difference over every channel.
    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        self.rgb
            .max_abs_diff(&other.rgb)
            .max(self.depth.max_abs_diff(&other.depth))
            .max(self.alpha_acc.max_abs_diff(&other.alpha_acc))
    }
}

/// Alpha of a projected splat at `pixel`, before the drop threshold.
///
/// Returns `(alpha, gauss, clamped)`.
#[inline]
pub(crate) fn raw_alpha(
    mean: &Vector2<f64>,
    conic: &Matrix2<f64>,
    opacity: f64,
    pixel: (f64, f64),
    clamp: f64,
) -> (f64, f64, bool) {
    let dx = pixel.0 - mean[0];
    let dy = pixel.1 - mean[1];
    let q = conic[(0, 0)] * dx * dx + 2.0 * conic[(0, 1)] * dx * dy + conic[(1, 1)] * dy * dy;
    let gauss = (-0.5 * q).exp();
    let a = opacity * gauss;
    if a > clamp {
        (clamp, gauss, true)
    } else {
        (a, gauss, false)
    }
}

/// `α = opacity · exp(−½ Δᵀ Σ′⁻¹ Δ)` with the clamp and drop threshold applied.
pub fn pixel_alpha(pg: &ProjectedGaussian, pixel: Vector2<f64>, settings: &RenderSettings) -> f64 {
    let (a, _, _) = raw_alpha(
        &pg.mean2d,
        &pg.conic(),
        pg.opacity,
        (pixel[0], pixel[1]),
        settings.alpha_clamp,
    );
    if a < settings.alpha_min {
        0.0
    } else {
        a
    }
}

/// One front-to-back compositing input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub alpha: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub color: Vector3<f64>,
    pub depth: f64,
    pub alpha_acc: f64,
}

/// Front-to-back blending: `C = Σ cᵢ αᵢ Πⱼ₍ⱼ<ᵢ₎(1 − αⱼ)`, and the same weights
/// for depth. Stops once transmittance drops below `t_min`.
///
/// Debug builds reject input that is not sorted by depth.
pub fn alpha_composite(contributions: &[Contribution], t_min: f64) -> Result<Composite> {
    if cfg!(debug_assertions) && contributions.windows(2).any(|w| w[1].depth < w[0].depth) {
        return Err(Error::invalid("contributions are not sorted front to back"));
    }
    let mut out = Composite {
        color: Vector3::zeros(),
        depth: 0.0,
        alpha_acc: 0.0,
    };
    let mut t = 1.0;
    for c in contributions {
        let w = c.alpha * t;
        out.color += c.color * w;
        out.depth += c.depth * w;
        t *= 1.0 - c.alpha;
        if t < t_min {
            break;
        }
    }
    out.alpha_acc = 1.0 - t;
    Ok(out)
}
