//! Synthetic multi-view scenes: Gaussian objects inside an axis-aligned box,
//! a ring of pinhole cameras, baked RGB/depth and sparse depth masks.
//!
//! Scene file layout (`SQSSCN1`, little-endian):
//!
//! ```text
//! magic        7 bytes  "SQSSCN1"
//! version      u8       currently 1
//! seed         u64
//! bounds       f64 × 6  min xyz, max xyz
//! n_gaussians  u32
//! gaussian*    f64 × 14 mu xyz, quat wxyz, scale xyz, opacity, color rgb
//! n_cameras    u32
//! camera*      f64 × 4  fx fy cx cy
//!              f64 × 16 camera-to-world, row-major
//!              u32 × 2  width, height
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianPrimitive};
use crate::render::image_io::{read_mask, read_pfm, read_ppm, write_mask, write_pfm, write_ppm};
use crate::render::{render_reference, RenderSettings};

pub const SCENE_MAGIC: &[u8; 7] = b"SQSSCN1";
pub const SCENE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(Error::invalid("bounds have zero or negative volume"));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Result<Self> {
        Self::new(Vector3::repeat(-half), Vector3::repeat(half))
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    /// Largest side length.
    pub fn extent(&self) -> f64 {
        self.size().max()
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub bounds: Bounds,
    pub n_views: usize,
    pub image_size: (usize, usize),
    pub gaussians_per_object: usize,
    /// Ring radius as a multiple of the bounds extent.
    pub ring_radius: f64,
    /// Camera height above the bounds center, as a multiple of the extent.
    pub ring_height: f64,
    pub focal: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 3,
            bounds: Bounds::cube(2.0).expect("valid cube"),
            n_views: 4,
            image_size: (64, 64),
            gaussians_per_object: 96,
            ring_radius: 2.0,
            ring_height: 0.75,
            focal: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub cameras: Vec<Camera>,
    pub bounds: Bounds,
    pub seed: u64,
}

/// Per-view supervision for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[H, W, 3]` per view.
    pub rgb: Vec<Array>,
    /// `[H, W]` per view.
    pub depth: Vec<Array>,
    /// Row-major `H·W` flags per view.
    pub valid_mask: Vec<Vec<bool>>,
    pub cameras: Vec<Camera>,
    pub bounds: Bounds,
}

impl SceneSample {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }
}

/// Cameras on a horizontal ring around the bounds center, equally spaced in
/// azimuth, all looking at the center.
pub fn ring_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let c = spec.bounds.center();
    let e = spec.bounds.extent();
    let (w, h) = spec.image_size;
    (0..spec.n_views)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / spec.n_views as f64;
            let eye = c
                + Vector3::new(a.cos(), a.sin(), 0.0) * (spec.ring_radius * e)
                + Vector3::z() * (spec.ring_height * e);
            Camera::look_at(eye, c, Vector3::z(), spec.focal, w, h)
        })
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random(), rng.random(), rng.random())
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-3 {
            return q;
        }
    }
}

/// Objects are clouds of Gaussians on the surface of a sphere or a box, each
/// object with one random base color and per-splat opacity in `[0.6, 1]`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    if spec.n_objects == 0 || spec.n_views == 0 {
        return Err(Error::invalid("scene needs at least one object and one view"));
    }
    if spec.gaussians_per_object == 0 {
        return Err(Error::invalid("gaussians_per_object must be positive"));
    }
    let b = spec.bounds;
    let b = Bounds::new(b.min, b.max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = b.extent();
    let mut gaussians = Vec::with_capacity(spec.n_objects * spec.gaussians_per_object);
    for _ in 0..spec.n_objects {
        let radius = e * rng.random_range(0.1..0.2);
        let size = b.size();
        let center = Vector3::from_fn(|i, _| {
            let lo = b.min[i] + radius.min(0.5 * size[i]);
            let hi = b.max[i] - radius.min(0.5 * size[i]);
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                b.center()[i]
            }
        });
        let base = random_color(&mut rng);
        let is_box = rng.random_bool(0.5);
        let half = Vector3::from_fn(|_, _| radius * rng.random_range(0.6..1.0));
        let splat = radius * 0.35;
        for _ in 0..spec.gaussians_per_object {
            let offset = if is_box {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                Vector3::from_fn(|i, _| {
                    if i == axis {
                        sign * half[i]
                    } else {
                        rng.random_range(-half[i]..half[i])
                    }
                })
            } else {
                unit_direction(&mut rng) * radius
            };
            let mu = Vector3::from_fn(|i, _| (center[i] + offset[i]).clamp(b.min[i], b.max[i]));
            let scale = Vector3::from_fn(|_, _| splat * rng.random_range(0.5..1.0));
            let tint = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let opacity = rng.random_range(0.6..=1.0);
            gaussians.push(GaussianPrimitive::new(
                mu,
                random_quat(&mut rng),
                scale,
                opacity,
                base + tint,
            )?);
        }
    }
    Ok(Scene {
        gaussians,
        cameras: ring_cameras(spec)?,
        bounds: b,
        seed,
    })
}

/// Renders every view with the reference renderer; the depth mask marks
/// pixels with `alpha_acc > 0.5`.
pub fn bake_ground_truth(scene: &Scene) -> Result<SceneSample> {
    let settings = RenderSettings::default();
    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    let mut valid_mask = Vec::new();
    for cam in &scene.cameras {
        let out = render_reference(&scene.gaussians, cam, &settings)?;
        valid_mask.push(out.alpha_acc.data().iter().map(|&a| a > 0.5).collect());
        rgb.push(out.rgb);
        depth.push(out.depth);
    }
    Ok(SceneSample {
        rgb,
        depth,
        valid_mask,
        cameras: scene.cameras.clone(),
        bounds: scene.bounds,
    })
}

/// Keeps each valid pixel independently with probability `keep_rate`.
pub fn sparsify_depth(sample: &SceneSample, keep_rate: f64, seed: u64) -> Result<SceneSample> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::invalid(format!("keep_rate must be in (0, 1], got {keep_rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if keep_rate == 1.0 {
        return Ok(out);
    }
    for mask in &mut out.valid_mask {
        for m in mask.iter_mut() {
            // one draw per pixel keeps the stream independent of mask content
            let keep = rng.random::<f64>() < keep_rate;
            *m = *m && keep;
        }
    }
    Ok(out)
}

pub fn write_scene<W: Write>(mut w: W, scene: &Scene) -> Result<()> {
    w.write_all(SCENE_MAGIC)?;
    w.write_u8(SCENE_VERSION)?;
    w.write_u64::<LittleEndian>(scene.seed)?;
    for v in scene.bounds.min.iter().chain(scene.bounds.max.iter()) {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.write_u32::<LittleEndian>(scene.gaussians.len() as u32)?;
    for g in &scene.gaussians {
        let vals =
            g.mu.iter()
                .chain(g.quat.iter())
                .chain(g.scale.iter())
                .chain(std::iter::once(&g.opacity))
                .chain(g.color.iter());
        for v in vals {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.write_u32::<LittleEndian>(scene.cameras.len() as u32)?;
    for c in &scene.cameras {
        for v in [c.fx, c.fy, c.cx, c.cy] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for r in 0..4 {
            for col in 0..4 {
                w.write_f64::<LittleEndian>(c.cam_to_world[(r, col)])?;
            }
        }
        w.write_u32::<LittleEndian>(c.width as u32)?;
        w.write_u32::<LittleEndian>(c.height as u32)?;
    }
    Ok(())
}

fn corrupt(position: u64, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "scene",
        position,
        detail: detail.into(),
    }
}

struct SceneReader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl SceneReader<'_> {
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.cur.position();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(
                self.cur
                    .read_f64::<LittleEndian>()
                    .map_err(|_| corrupt(at, format!("truncated {what}")))?,
            );
        }
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let at = self.cur.position();
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| corrupt(at, format!("truncated {what}")))
    }
}

pub fn read_scene(bytes: &[u8]) -> Result<Scene> {
    let mut r = SceneReader {
        cur: Cursor::new(bytes),
    };
    let mut magic = [0u8; 7];
    r.cur
        .read_exact(&mut magic)
        .map_err(|_| corrupt(0, "truncated header"))?;
    if &magic != SCENE_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = r.cur.read_u8().map_err(|_| corrupt(7, "truncated version byte"))?;
    if version != SCENE_VERSION {
        return Err(corrupt(
            7,
            format!("unsupported version {version}, expected {SCENE_VERSION}"),
        ));
    }
    let seed = r
        .cur
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt(8, "truncated seed"))?;
    let b = r.f64s(6, "bounds")?;
    let bounds = Bounds::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]))
        .map_err(|e| corrupt(16, e.to_string()))?;
    let n = r.u32("gaussian count")? as usize;
    let mut gaussians = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let at = r.cur.position();
        let v = r.f64s(14, &format!("gaussian {i}"))?;
        gaussians.push(GaussianPrimitive {
            mu: Vector3::new(v[0], v[1], v[2]),
            quat: Vector4::new(v[3], v[4], v[5], v[6]),
            scale: Vector3::new(v[7], v[8], v[9]),
            opacity: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
        if gaussians[i].scale.iter().any(|&s| !(s > 0.0)) {
            return Err(corrupt(at, format!("gaussian {i}: non-positive scale")));
        }
    }
    let nc = r.u32("camera count")? as usize;
    let mut cameras = Vec::with_capacity(nc.min(1 << 16));
    for i in 0..nc {
        let at = r.cur.position();
        let what = format!("camera {i}");
        let k = r.f64s(4, &what)?;
        let m = r.f64s(16, &what)?;
        let w = r.u32(&what)? as usize;
        let h = r.u32(&what)? as usize;
        let cam = Camera::new(k[0], k[1], k[2], k[3], Matrix4::from_row_slice(&m), w, h)
            .map_err(|e| corrupt(at, format!("{what}: {e}")))?;
        cameras.push(cam);
    }
    if r.cur.position() != bytes.len() as u64 {
        return Err(corrupt(r.cur.position(), "trailing bytes"));
    }
    Ok(Scene {
        gaussians,
        cameras,
        bounds,
        seed,
    })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut buf = Vec::new();
    write_scene(&mut buf, scene)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_scene(&std::fs::read(path)?)
}

/// Writes `scene.bin`, `view<k>.ppm`, `view<k>.pfm` and `mask<k>.bin` into `dir`.
pub fn write_scene_dir(dir: &Path, scene: &Scene, sample: &SceneSample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_scene(&dir.join("scene.bin"), scene)?;
    for (k, cam) in sample.cameras.iter().enumerate() {
        let (w, h) = (cam.width, cam.height);
        write_ppm(&dir.join(format!("view{k}.ppm")), &sample.rgb[k], w, h)?;
        write_pfm(&dir.join(format!("view{k}.pfm")), &sample.depth[k], w, h)?;
        write_mask(&dir.join(format!("mask{k}.bin")), &sample.valid_mask[k], w, h)?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

/// Loads a scene directory written by [`write_scene_dir`]. Images come back
/// at file precision (8-bit RGB, 32-bit depth).
pub fn read_scene_dir(dir: &Path) -> Result<(Scene, SceneSample)> {
    let scene = load_scene(&dir.join("scene.bin"))?;
    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    let mut valid_mask = Vec::new();
    for (k, cam) in scene.cameras.iter().enumerate() {
        let im = read_ppm(&read_file(&dir.join(format!("view{k}.ppm")))?)?;
        let d = read_pfm(&read_file(&dir.join(format!("view{k}.pfm")))?)?;
        let (m, w, h) = read_mask(&read_file(&dir.join(format!("mask{k}.bin")))?)?;
        if im.shape() != [cam.height, cam.width, 3]
            || d.shape() != [cam.height, cam.width]
            || (w, h) != (cam.width, cam.height)
        {
            return Err(Error::invalid(format!(
                "view {k} in {} does not match its camera size",
                dir.display()
            )));
        }
        rgb.push(im);
        depth.push(d);
        valid_mask.push(m);
    }
    let sample = SceneSample {
        rgb,
        depth,
        valid_mask,
        cameras: scene.cameras.clone(),
        bounds: scene.bounds,
    };
    Ok((scene, sample))
}

/// Sorted scene directories under `root/scenes`.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let scenes = root.join("scenes");
    if !scenes.is_dir() {
        return Err(Error::MissingFile(scenes));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(&scenes)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_spacing() {
        let spec = SceneSpec::default();
        let cams = ring_cameras(&spec).unwrap();
        assert_eq!(cams.len(), 4);
        for k in 0..4 {
            let a = cams[k].center();
            let b = cams[(k + 1) % 4].center();
            let cos = a.xy().dot(&b.xy()) / (a.xy().norm() * b.xy().norm());
            assert!(cos.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let mut spec = SceneSpec::default();
        spec.bounds.max[2] = spec.bounds.min[2];
        assert!(generate_scene(&spec, 0).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let scene = generate_scene(&SceneSpec::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_scene(&mut buf, &scene).unwrap();
        buf[7] = 9;
        let err = read_scene(&buf).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn keep_rate_one_is_identity() {
        let scene = generate_scene(&SceneSpec::default(), 1).unwrap();
        let s = bake_ground_truth(&scene).unwrap();
        assert_eq!(sparsify_depth(&s, 1.0, 5).unwrap(), s);
        assert!(sparsify_depth(&s, 0.0, 5).is_err());
    }
}
