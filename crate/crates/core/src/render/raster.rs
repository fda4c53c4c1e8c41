use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::{raw_alpha, RenderOutput, RenderSettings};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::geometry::{
    project_backward, project_with_cache, Camera, GaussianPrimitive, ProjectedGaussian, ProjectedGrad, ProjectionCache,
    Quat,
};

/// A projected splat in global front-to-back order.
#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    dist: f64,
    proj: ProjectedGaussian,
    cache: ProjectionCache,
}

fn prepare(gaussians: &[GaussianPrimitive], cam: &Camera, settings: &RenderSettings) -> Vec<Splat> {
    let mut splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let (proj, cache) = project_with_cache(g, cam, &settings.projection)?;
            Some(Splat {
                index,
                mean: proj.mean2d,
                conic: proj.conic(),
                opacity: proj.opacity,
                color: proj.color,
                dist: proj.cam_distance,
                proj,
                cache,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.index.cmp(&b.index)));
    splats
}

/// Per-tile lists of splats (positions in the global sorted order).
#[derive(Debug, Clone, PartialEq)]
pub struct TileIndex {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Row-major over tiles; each list is ascending, hence ordered by
    /// `(cam_distance, index)`.
    pub lists: Vec<Vec<u32>>,
    /// Original Gaussian index of each sorted position.
    pub sorted_indices: Vec<usize>,
}

impl TileIndex {
    fn build(splats: &[Splat], width: usize, height: usize, settings: &RenderSettings) -> Self {
        let ts = settings.tile_size.max(1);
        let tiles_x = width.div_ceil(ts);
        let tiles_y = height.div_ceil(ts);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let Some((tx0, tx1, ty0, ty1)) = tile_range(s, width, height, ts, settings) else {
                continue;
            };
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Self {
            tile_size: ts,
            tiles_x,
            tiles_y,
            lists,
            sorted_indices: splats.iter().map(|s| s.index).collect(),
        }
    }
}

/// Inclusive tile range covered by the splat's cutoff ellipse.
///
/// The ellipse radius (in standard deviations) is the larger of 3 and the
/// radius at which `opacity · exp(−r²/2)` reaches `alpha_min`, so any pixel
/// where the splat survives the drop threshold lies inside it.
fn tile_range(
    s: &Splat,
    width: usize,
    height: usize,
    ts: usize,
    settings: &RenderSettings,
) -> Option<(usize, usize, usize, usize)> {
    if settings.alpha_min <= 0.0 {
        return Some((0, (width - 1) / ts, 0, (height - 1) / ts));
    }
    let peak = s.opacity.min(settings.alpha_clamp);
    if peak < settings.alpha_min {
        return None;
    }
    let r2 = 2.0 * (peak / settings.alpha_min).ln();
    let r = r2.max(9.0).sqrt() * 1.0001 + 1e-9;
    let ex = r * s.proj.cov2d[(0, 0)].sqrt();
    let ey = r * s.proj.cov2d[(1, 1)].sqrt();
    let x0 = (s.mean[0] - ex).ceil();
    let x1 = (s.mean[0] + ex).floor();
    let y0 = (s.mean[1] - ey).ceil();
    let y1 = (s.mean[1] + ey).floor();
    if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 || x0 > x1 || y0 > y1 {
        return None;
    }
    let clampx = |v: f64| v.clamp(0.0, (width - 1) as f64) as usize;
    let clampy = |v: f64| v.clamp(0.0, (height - 1) as f64) as usize;
    Some((clampx(x0) / ts, clampx(x1) / ts, clampy(y0) / ts, clampy(y1) / ts))
}

/// Composites one pixel from splats in front-to-back order.
#[inline]
fn shade<'a>(
    splats: impl Iterator<Item = &'a Splat>,
    px: (f64, f64),
    settings: &RenderSettings,
) -> ([f64; 3], f64, f64) {
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut t = 1.0;
    for s in splats {
        let (a, _, _) = raw_alpha(&s.mean, &s.conic, s.opacity, px, settings.alpha_clamp);
        if a < settings.alpha_min || a <= 0.0 {
            continue;
        }
        let w = a * t;
        rgb[0] += s.color[0] * w;
        rgb[1] += s.color[1] * w;
        rgb[2] += s.color[2] * w;
        depth += s.dist * w;
        t *= 1.0 - a;
        if t < settings.t_min {
            break;
        }
    }
    (rgb, depth, 1.0 - t)
}

fn check_size(cam: &Camera) -> Result<()> {
    if cam.width == 0 || cam.height == 0 {
        return Err(Error::invalid("image size must be non-zero"));
    }
    Ok(())
}

/// Forward state kept for [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderCache {
    splats: Vec<Splat>,
    tiles: TileIndex,
    camera: Camera,
    gaussians: Vec<GaussianPrimitive>,
    settings: RenderSettings,
}

impl RenderCache {
    pub fn tiles(&self) -> &TileIndex {
        &self.tiles
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn num_gaussians(&self) -> usize {
        self.gaussians.len()
    }
}

/// Tile-binned rasterization. Tiles are shaded in parallel; each pixel
/// composites the same global order as [`render_reference`].
pub fn render(
    gaussians: &[GaussianPrimitive],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<(RenderOutput, RenderCache)> {
    check_size(cam)?;
    let (w, h) = (cam.width, cam.height);
    let splats = prepare(gaussians, cam, settings);
    let tiles = TileIndex::build(&splats, w, h, settings);
    let ts = tiles.tile_size;

    let tile_pixels: Vec<Vec<(usize, [f64; 3], f64, f64)>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tid| {
            let (tx, ty) = (tid % tiles.tiles_x, tid / tiles.tiles_x);
            let list = &tiles.lists[tid];
            let mut out = Vec::with_capacity(ts * ts);
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let (rgb, d, a) = shade(
                        list.iter().map(|&p| &splats[p as usize]),
                        (x as f64, y as f64),
                        settings,
                    );
                    out.push((y * w + x, rgb, d, a));
                }
            }
            out
        })
        .collect();

    let mut output = RenderOutput::background(w, h);
    for tile in tile_pixels {
        for (p, rgb, d, a) in tile {
            output.rgb.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            output.depth.data_mut()[p] = d;
            output.alpha_acc.data_mut()[p] = a;
        }
    }
    let cache = RenderCache {
        splats,
        tiles,
        camera: cam.clone(),
        gaussians: gaussians.to_vec(),
        settings: *settings,
    };
    Ok((output, cache))
}

/// Brute-force oracle: every pixel loops over all splats in global order.
pub fn render_reference(
    gaussians: &[GaussianPrimitive],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    check_size(cam)?;
    let (w, h) = (cam.width, cam.height);
    let splats = prepare(gaussians, cam, settings);
    let mut output = RenderOutput::background(w, h);
    for y in 0..h {
        for x in 0..w {
            let (rgb, d, a) = shade(splats.iter(), (x as f64, y as f64), settings);
            let p = y * w + x;
            output.rgb.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            output.depth.data_mut()[p] = d;
            output.alpha_acc.data_mut()[p] = a;
        }
    }
    Ok(output)
}

/// Gradient of a scalar loss w.r.t. one Gaussian's parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vector3<f64>,
    pub quat: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

const ACC: usize = 10; // color 3, opacity, mean 2, conic (a, b, c), distance

struct Hit {
    local: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    t: f64,
}

/// Analytic vector-Jacobian product of [`render`]. `grad_rgb` is `[H, W, 3]`
/// and `grad_depth` `[H, W]` (any shape with the same element counts works).
///
/// Per-tile partial sums are reduced in tile order, so the result does not
/// depend on the number of worker threads.
pub fn render_backward(cache: &RenderCache, grad_rgb: &Array, grad_depth: &Array) -> Result<Vec<GaussianGrad>> {
    let (w, h) = (cache.camera.width, cache.camera.height);
    if grad_rgb.len() != w * h * 3 || grad_depth.len() != w * h {
        return Err(Error::invalid(format!(
            "render_backward: gradient sizes {} / {} do not match a {w}x{h} image",
            grad_rgb.len(),
            grad_depth.len()
        )));
    }
    let tiles = &cache.tiles;
    let ts = tiles.tile_size;
    let settings = &cache.settings;
    let splats = &cache.splats;
    let grgb = grad_rgb.data();
    let gdep = grad_depth.data();

    let partials: Vec<Vec<[f64; ACC]>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tid| {
            let list = &tiles.lists[tid];
            let mut acc = vec![[0.0; ACC]; list.len()];
            if list.is_empty() {
                return acc;
            }
            let (tx, ty) = (tid % tiles.tiles_x, tid / tiles.tiles_x);
            let mut hits: Vec<Hit> = Vec::with_capacity(list.len());
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let p = y * w + x;
                    let g = [grgb[p * 3], grgb[p * 3 + 1], grgb[p * 3 + 2], gdep[p]];
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let px = (x as f64, y as f64);
                    hits.clear();
                    let mut t = 1.0;
                    for (local, &pos) in list.iter().enumerate() {
                        let s = &splats[pos as usize];
                        let (a, gauss, clamped) = raw_alpha(&s.mean, &s.conic, s.opacity, px, settings.alpha_clamp);
                        if a < settings.alpha_min || a <= 0.0 {
                            continue;
                        }
                        hits.push(Hit {
                            local,
                            alpha: a,
                            gauss,
                            clamped,
                            t,
                        });
                        t *= 1.0 - a;
                        if t < settings.t_min {
                            break;
                        }
                    }
                    // behind[i] = Σ_{k>i} f_k α_k Π_{i<j<k}(1 − α_j)
                    let mut behind = [0.0; 4];
                    for hit in hits.iter().rev() {
                        let s = &splats[list[hit.local] as usize];
                        let f = [s.color[0], s.color[1], s.color[2], s.dist];
                        let wgt = hit.alpha * hit.t;
                        let mut d_alpha = 0.0;
                        for c in 0..4 {
                            d_alpha += g[c] * hit.t * (f[c] - behind[c]);
                        }
                        let a = &mut acc[hit.local];
                        a[0] += g[0] * wgt;
                        a[1] += g[1] * wgt;
                        a[2] += g[2] * wgt;
                        a[9] += g[3] * wgt;
                        if !hit.clamped {
                            let dx = px.0 - s.mean[0];
                            let dy = px.1 - s.mean[1];
                            let (ca, cb, cc) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
                            a[3] += d_alpha * hit.gauss;
                            // dα/dmean = α A Δ
                            a[4] += d_alpha * hit.alpha * (ca * dx + cb * dy);
                            a[5] += d_alpha * hit.alpha * (cb * dx + cc * dy);
                            a[6] += d_alpha * (-0.5 * hit.alpha * dx * dx);
                            a[7] += d_alpha * (-hit.alpha * dx * dy);
                            a[8] += d_alpha * (-0.5 * hit.alpha * dy * dy);
                        }
                        for c in 0..4 {
                            behind[c] = f[c] * hit.alpha + (1.0 - hit.alpha) * behind[c];
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut per_splat = vec![[0.0; ACC]; splats.len()];
    for (tid, part) in partials.into_iter().enumerate() {
        for (local, v) in part.into_iter().enumerate() {
            let dst = &mut per_splat[tiles.lists[tid][local] as usize];
            for c in 0..ACC {
                dst[c] += v[c];
            }
        }
    }

    let mut out = vec![GaussianGrad::default(); cache.gaussians.len()];
    for (s, a) in splats.iter().zip(per_splat) {
        let g = &cache.gaussians[s.index];
        // conic = cov⁻¹; symmetric matrix gradient of the conic
        let g_conic = Matrix2::new(a[6], 0.5 * a[7], 0.5 * a[7], a[8]);
        let g_cov = -(s.conic * g_conic * s.conic);
        let up = ProjectedGrad {
            mean2d: Vector2::new(a[4], a[5]),
            cov2d: g_cov,
            cam_distance: a[9],
        };
        let geo = project_backward(g, &cache.camera, &s.cache, &up);
        out[s.index] = GaussianGrad {
            mu: geo.mu,
            quat: geo.quat,
            scale: geo.scale,
            opacity: a[3],
            color: Vector3::new(a[0], a[1], a[2]),
        };
    }
    Ok(out)
}
