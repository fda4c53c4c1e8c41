//! Bilinear feature sampling and the multi-view, multi-level sampling node
//! used by deformable cross-attention.
//!
//! Level coordinates are `pixel / stride`. A point is in bounds when its level
//! coordinates lie in `[0, w − 1] × [0, h − 1]`; anything else samples a zero
//! vector with zero gradient.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::autodiff::{Array, CustomOp, Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Corner weights and rows for one bilinear lookup.
#[derive(Debug, Clone, Copy)]
struct Taps {
    rows: [Option<usize>; 4],
    weights: [f64; 4],
    fx: f64,
    fy: f64,
}

/// Corners ordered (x0,y0), (x1,y0), (x0,y1), (x1,y1).
fn taps(u: f64, v: f64, h: usize, w: usize, base: usize) -> Option<Taps> {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            None
        } else {
            Some(base + y as usize * w + x as usize)
        }
    };
    Some(Taps {
        rows: [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
        weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        fx,
        fy,
    })
}

/// Samples a `[h, w, C]` (or `[h·w, C]` with explicit `h, w`) feature map at a
/// continuous pixel position.
pub fn bilinear_sample(map: &Array, h: usize, w: usize, stride: usize, pixel: Vector2<f64>) -> Vec<f64> {
    let c = map.cols();
    let mut out = vec![0.0; c];
    if let Some(t) = taps(pixel[0] / stride as f64, pixel[1] / stride as f64, h, w, 0) {
        for (r, wt) in t.rows.iter().zip(t.weights) {
            if let Some(r) = r {
                for (o, v) in out.iter_mut().zip(map.row(*r)) {
                    *o += wt * v;
                }
            }
        }
    }
    out
}

/// Geometry of a feature pyramid laid out as `[N·h_l·w_l, C]` per level.
#[derive(Debug, Clone)]
pub struct PyramidLayout {
    pub sizes: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
    pub n_views: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    /// Camera-frame point, used by the backward pass.
    pc: Vector3<f64>,
    u: f64,
    v: f64,
}

struct PyramidSampleOp {
    layout: PyramidLayout,
    cameras: Vec<Camera>,
    rotations: Vec<Matrix3<f64>>,
    /// Per (point, view); `None` when behind the near plane.
    hits: Vec<Option<Hit>>,
}

/// Samples every point in every view at every level.
///
/// `points` is `[P, 3]` (world metres). The result is `[P·V·L, C]` with rows
/// ordered `(point, view, level)`. Points behind a camera sample zero there.
pub fn sample_pyramid(
    g: &mut Graph,
    points: NodeId,
    levels: &[NodeId],
    layout: &PyramidLayout,
    cameras: &[Camera],
    near: f64,
) -> Result<NodeId> {
    let nv = layout.n_views;
    let nl = layout.sizes.len();
    if cameras.len() != nv || levels.len() != nl || nv == 0 {
        return Err(Error::invalid(format!(
            "pyramid sampling: {} cameras / {} levels for a layout of {nv} views and {nl} levels",
            cameras.len(),
            levels.len()
        )));
    }
    let c = layout.channels;
    let pv = g.value(points);
    if pv.cols() != 3 {
        return Err(Error::invalid("pyramid sampling expects [P, 3] points"));
    }
    let np = pv.rows();
    let mut hits = Vec::with_capacity(np * nv);
    let mut rotations = Vec::with_capacity(nv);
    let wtc: Vec<_> = cameras.iter().map(Camera::world_to_camera).collect();
    for (r, _) in &wtc {
        rotations.push(*r);
    }
    for p in 0..np {
        let row = pv.row(p);
        let x = Vector3::new(row[0], row[1], row[2]);
        for (cam, (r, t)) in cameras.iter().zip(&wtc) {
            let pc = r * x + t;
            if pc[2] <= near {
                hits.push(None);
            } else {
                hits.push(Some(Hit {
                    pc,
                    u: cam.fx * pc[0] / pc[2] + cam.cx,
                    v: cam.fy * pc[1] / pc[2] + cam.cy,
                }));
            }
        }
    }
    let mut out = vec![0.0; np * nv * nl * c];
    for (l, &lid) in levels.iter().enumerate() {
        let map = g.value(lid);
        let (h, w) = layout.sizes[l];
        if map.rows() != nv * h * w || map.cols() != c {
            return Err(Error::invalid(format!("level {l} has shape {:?}", map.shape())));
        }
        let s = layout.strides[l] as f64;
        for (pvi, hit) in hits.iter().enumerate() {
            let Some(hit) = hit else { continue };
            let v = pvi % nv;
            let Some(t) = taps(hit.u / s, hit.v / s, h, w, v * h * w) else {
                continue;
            };
            let o = (pvi * nl + l) * c;
            let dst = &mut out[o..o + c];
            for (r, wt) in t.rows.iter().zip(t.weights) {
                if let Some(r) = r {
                    for (d, x) in dst.iter_mut().zip(map.row(*r)) {
                        *d += wt * x;
                    }
                }
            }
        }
    }
    let mut inputs = vec![points];
    inputs.extend_from_slice(levels);
    g.custom(
        &inputs,
        Array::matrix(np * nv * nl, c, out),
        Box::new(PyramidSampleOp {
            layout: layout.clone(),
            cameras: cameras.to_vec(),
            rotations,
            hits,
        }),
    )
}

impl CustomOp for PyramidSampleOp {
    fn name(&self) -> &'static str {
        "sample_pyramid"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let nv = self.layout.n_views;
        let nl = self.layout.sizes.len();
        let c = self.layout.channels;
        let np = inputs[0].rows();
        let mut d_points = vec![0.0; np * 3];
        let mut d_levels: Vec<Vec<f64>> = inputs[1..].iter().map(|a| vec![0.0; a.len()]).collect();
        for (pvi, hit) in self.hits.iter().enumerate() {
            let Some(hit) = hit else { continue };
            let v = pvi % nv;
            let p = pvi / nv;
            let mut du = 0.0;
            let mut dv = 0.0;
            for l in 0..nl {
                let (h, w) = self.layout.sizes[l];
                let s = self.layout.strides[l] as f64;
                let Some(t) = taps(hit.u / s, hit.v / s, h, w, v * h * w) else {
                    continue;
                };
                let o = (pvi * nl + l) * c;
                let gr = &grad.data()[o..o + c];
                let map = inputs[1 + l];
                let dl = &mut d_levels[l];
                let mut gdot = [0.0; 4];
                for (k, (r, wt)) in t.rows.iter().zip(t.weights).enumerate() {
                    if let Some(r) = r {
                        let row = map.row(*r);
                        let mut acc = 0.0;
                        for j in 0..c {
                            dl[r * c + j] += wt * gr[j];
                            acc += gr[j] * row[j];
                        }
                        gdot[k] = acc;
                    }
                }
                // d/du and d/dv of the interpolant, in level units
                let dfx = (1.0 - t.fy) * (gdot[1] - gdot[0]) + t.fy * (gdot[3] - gdot[2]);
                let dfy = (1.0 - t.fx) * (gdot[2] - gdot[0]) + t.fx * (gdot[3] - gdot[1]);
                du += dfx / s;
                dv += dfy / s;
            }
            let cam = &self.cameras[v];
            let (x, y, z) = (hit.pc[0], hit.pc[1], hit.pc[2]);
            let dpc = Vector3::new(
                cam.fx / z * du,
                cam.fy / z * dv,
                -cam.fx * x / (z * z) * du - cam.fy * y / (z * z) * dv,
            );
            let dw = self.rotations[v].transpose() * dpc;
            for k in 0..3 {
                d_points[p * 3 + k] += dw[k];
            }
        }
        let mut out = vec![Some(Array::matrix(np, 3, d_points))];
        for (l, d) in d_levels.into_iter().enumerate() {
            out.push(Some(Array::new(inputs[1 + l].shape().to_vec(), d)?));
        }
        Ok(out)
    }
}

struct HeadWeightedSumOp {
    heads: usize,
    m: usize,
}

/// Per-head weighted sum: `out[k, c] = Σ_m w[k, h(c)·M + m] · values[k·M + m, c]`
/// where channel `c` belongs to head `h(c) = c / (C / H)`.
///
/// `weights` is `[K, H·M]`, `values` is `[K·M, C]`.
pub fn head_weighted_sum(g: &mut Graph, weights: NodeId, values: NodeId, heads: usize) -> Result<NodeId> {
    let wv = g.value(weights);
    let vv = g.value(values);
    let k = wv.rows();
    if heads == 0 || !wv.cols().is_multiple_of(heads) {
        return Err(Error::invalid("weights width must be a multiple of the head count"));
    }
    let m = wv.cols() / heads;
    let c = vv.cols();
    if vv.rows() != k * m || !c.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "head_weighted_sum: weights {:?}, values {:?}, {heads} heads",
            wv.shape(),
            vv.shape()
        )));
    }
    let ch = c / heads;
    let mut out = vec![0.0; k * c];
    for q in 0..k {
        let wr = wv.row(q);
        let o = &mut out[q * c..(q + 1) * c];
        for mi in 0..m {
            let vr = vv.row(q * m + mi);
            for h in 0..heads {
                let wt = wr[h * m + mi];
                for j in h * ch..(h + 1) * ch {
                    o[j] += wt * vr[j];
                }
            }
        }
    }
    g.custom(
        &[weights, values],
        Array::matrix(k, c, out),
        Box::new(HeadWeightedSumOp { heads, m }),
    )
}

impl CustomOp for HeadWeightedSumOp {
    fn name(&self) -> &'static str {
        "head_weighted_sum"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let (wv, vv) = (inputs[0], inputs[1]);
        let (k, c, m, heads) = (wv.rows(), vv.cols(), self.m, self.heads);
        let ch = c / heads;
        let mut dw = vec![0.0; wv.len()];
        let mut dv = vec![0.0; vv.len()];
        for q in 0..k {
            let gr = grad.row(q);
            let wr = wv.row(q);
            for mi in 0..m {
                let r = q * m + mi;
                let vr = vv.row(r);
                for h in 0..heads {
                    let wt = wr[h * m + mi];
                    let mut acc = 0.0;
                    for j in h * ch..(h + 1) * ch {
                        acc += gr[j] * vr[j];
                        dv[r * c + j] += wt * gr[j];
                    }
                    dw[q * heads * m + h * m + mi] = acc;
                }
            }
        }
        Ok(vec![
            Some(Array::matrix(k, heads * m, dw)),
            Some(Array::matrix(k * m, c, dv)),
        ])
    }
}
