//! Self-supervised pre-training: render decoded splats into every view and
//! fit them to RGB and sparse depth with an L1 objective, optimized by AdamW
//! under linear warmup and cosine decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{Array, Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{quaternion_to_rotation, rotation_to_quaternion, Camera, GaussianPrimitive};
use crate::model::SqsModel;
use crate::render::image_io::{write_pfm, write_ppm};
use crate::render::{render_node, RenderSettings};
use crate::scene::{Bounds, SceneSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_rgb: f64,
    pub w_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_rgb: 1.0,
            w_depth: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_rgb >= 0.0 && self.w_depth >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (w_rgb {}, w_depth {})",
                self.w_rgb, self.w_depth
            )));
        }
        Ok(())
    }
}

/// `w_rgb · mean |Δrgb|` over all pixels and channels plus
/// `w_depth · mean |Δdepth|` over valid pixels (zero when none is valid).
pub fn reconstruction_loss(
    pred_rgb: &Array,
    pred_depth: &Array,
    gt_rgb: &Array,
    gt_depth: &Array,
    valid_mask: &[bool],
    w: &LossWeights,
) -> Result<f64> {
    if pred_rgb.len() != gt_rgb.len() || pred_depth.len() != gt_depth.len() || gt_depth.len() != valid_mask.len() {
        return Err(Error::invalid(format!(
            "loss inputs disagree: rgb {:?} vs {:?}, depth {:?} vs {:?}, mask {}",
            pred_rgb.shape(),
            gt_rgb.shape(),
            pred_depth.shape(),
            gt_depth.shape(),
            valid_mask.len()
        )));
    }
    if gt_rgb.len() != 3 * gt_depth.len() {
        return Err(Error::invalid("rgb must hold three channels per depth pixel"));
    }
    let rgb: f64 = pred_rgb
        .data()
        .iter()
        .zip(gt_rgb.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let rgb = rgb / gt_rgb.len().max(1) as f64;
    let mut depth = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in pred_depth.data().iter().zip(gt_depth.data()).zip(valid_mask) {
        if m {
            depth += (a - b).abs();
            n += 1;
        }
    }
    let depth = if n == 0 { 0.0 } else { depth / n as f64 };
    Ok(w.w_rgb * rgb + w.w_depth * depth)
}

/// Graph form of [`reconstruction_loss`] on a rendered `[H·W, 4]` node.
pub fn reconstruction_loss_node(
    g: &mut Graph,
    pred: NodeId,
    gt_rgb: &Array,
    gt_depth: &Array,
    valid_mask: &[bool],
    w: &LossWeights,
) -> Result<NodeId> {
    let n = g.value(pred).rows();
    if g.value(pred).cols() != 4 || gt_rgb.len() != 3 * n || gt_depth.len() != n || valid_mask.len() != n {
        return Err(Error::invalid(format!(
            "rendered {:?} does not match targets with {} pixels",
            g.value(pred).shape(),
            gt_depth.len()
        )));
    }
    let rgb = g.slice_cols(pred, 0, 3)?;
    let target = g.constant(Array::matrix(n, 3, gt_rgb.data().to_vec()))?;
    let l_rgb = g.l1(rgb, target)?;
    let mut loss = g.scale(l_rgb, w.w_rgb / (3 * n) as f64)?;

    let valid = valid_mask.iter().filter(|&&m| m).count();
    if valid > 0 {
        let depth = g.slice_cols(pred, 3, 4)?;
        let m: Vec<f64> = valid_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let masked_gt = gt_depth.data().iter().zip(&m).map(|(d, m)| d * m).collect();
        let m = g.constant(Array::matrix(n, 1, m))?;
        let depth = g.mul(depth, m)?;
        let target = g.constant(Array::matrix(n, 1, masked_gt))?;
        let l_depth = g.l1(depth, target)?;
        let l_depth = g.scale(l_depth, w.w_depth / valid as f64)?;
        loss = g.add(loss, l_depth)?;
    }
    Ok(loss)
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup: u64,
    pub peak: f64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(total: u64, warmup: u64, peak: f64) -> Result<Self> {
        if total <= warmup {
            return Err(Error::Config(format!(
                "train.steps ({total}) must exceed opt.warmup_steps ({warmup})"
            )));
        }
        if !(peak >= 0.0 && peak.is_finite()) {
            return Err(Error::Config(format!(
                "opt.lr_peak must be a non-negative number, got {peak}"
            )));
        }
        Ok(Self { warmup, peak, total })
    }

    pub fn at(&self, step: u64) -> Result<f64> {
        if step > self.total {
            return Err(Error::invalid(format!(
                "step {step} beyond schedule end {}",
                self.total
            )));
        }
        if step < self.warmup {
            return Ok(self.peak * step as f64 / self.warmup as f64);
        }
        let t = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

pub fn lr_schedule(step: u64, total: u64, warmup: u64, peak: f64) -> Result<f64> {
    LrSchedule::new(total, warmup, peak)?.at(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checkpoint entries `opt.m/<name>`, `opt.v/<name>` and `opt.step`.
    pub fn to_tensors(&self) -> BTreeMap<String, Array> {
        let mut out = BTreeMap::new();
        for (k, a) in &self.m {
            out.insert(format!("opt.m/{k}"), a.clone());
        }
        for (k, a) in &self.v {
            out.insert(format!("opt.v/{k}"), a.clone());
        }
        out.insert("opt.step".into(), Array::scalar(self.step as f64));
        out
    }

    /// Splits optimizer entries out of a checkpoint map, leaving the rest.
    pub fn take_from(tensors: &mut BTreeMap<String, Array>) -> Option<Self> {
        let step = tensors.remove("opt.step")?.item() as u64;
        let mut st = Self {
            step,
            ..Self::default()
        };
        let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with("opt.")).cloned().collect();
        for k in keys {
            let a = tensors.remove(&k).expect("key listed above");
            if let Some(name) = k.strip_prefix("opt.m/") {
                st.m.insert(name.to_string(), a);
            } else if let Some(name) = k.strip_prefix("opt.v/") {
                st.v.insert(name.to_string(), a);
            }
        }
        Some(st)
    }
}

/// One AdamW update of every parameter in `params`. A parameter without a
/// gradient is treated as having a zero gradient. Decay is applied first as
/// `w ← w·(1 − lr·wd)`.
pub fn adamw_step(
    params: &mut BTreeMap<String, Array>,
    grads: &BTreeMap<String, Array>,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::invalid(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::invalid(format!("gradient for unknown parameter {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (name, p) in params.iter_mut() {
        let m = state.m.entry(name.clone()).or_insert_with(|| Array::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array::zeros(p.shape()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::invalid(format!(
                "optimizer moments for {name} do not match the parameter"
            )));
        }
        let g = grads.get(name);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gi;
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gi * gi;
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            pd[i] = pd[i] * decay - lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// World reflection across the plane `y = center.y` of `bounds`.
pub fn flip_reflection(bounds: &Bounds) -> Matrix4<f64> {
    let c = bounds.center();
    let mut g = Matrix4::identity();
    g[(1, 1)] = -1.0;
    g[(1, 3)] = 2.0 * c.y;
    g
}

/// Camera that sees the reflected world as the mirror image of `cam`:
/// `T' = G·T·F` with `F = diag(-1, 1, 1)` in camera space and `cx' = W − 1 − cx`.
pub fn flip_camera(cam: &Camera, bounds: &Bounds) -> Result<Camera> {
    let mut f = Matrix4::identity();
    f[(0, 0)] = -1.0;
    let t = flip_reflection(bounds) * cam.cam_to_world * f;
    Camera::new(
        cam.fx,
        cam.fy,
        cam.width as f64 - 1.0 - cam.cx,
        cam.cy,
        t,
        cam.width,
        cam.height,
    )
}

/// Mirror of a primitive under [`flip_reflection`].
pub fn reflect_gaussian(gs: &GaussianPrimitive, bounds: &Bounds) -> Result<GaussianPrimitive> {
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
    let r = d * quaternion_to_rotation(&gs.quat)? * d;
    let c = bounds.center();
    Ok(GaussianPrimitive {
        mu: Vector3::new(gs.mu.x, 2.0 * c.y - gs.mu.y, gs.mu.z),
        quat: rotation_to_quaternion(&r),
        ..*gs
    })
}

fn mirror_rows<T: Copy>(data: &[T], w: usize, ch: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(w * ch) {
        for x in (0..w).rev() {
            out.extend_from_slice(&row[x * ch..(x + 1) * ch]);
        }
    }
    out
}

/// Mirrors every view along the width and adjusts cameras with
/// [`flip_camera`]. Returns the sample unchanged when `apply` is false.
pub fn horizontal_flip_augment(sample: &SceneSample, apply: bool) -> Result<SceneSample> {
    if !apply {
        return Ok(sample.clone());
    }
    let mut out = sample.clone();
    for v in 0..sample.n_views() {
        let cam = &sample.cameras[v];
        let (w, h) = (cam.width, cam.height);
        out.rgb[v] = Array::new(vec![h, w, 3], mirror_rows(sample.rgb[v].data(), w, 3))?;
        out.depth[v] = Array::new(vec![h, w], mirror_rows(sample.depth[v].data(), w, 1))?;
        out.valid_mask[v] = mirror_rows(&sample.valid_mask[v], w, 1);
        out.cameras[v] = flip_camera(cam, &sample.bounds)?;
    }
    Ok(out)
}

/// Builds the view-averaged loss for `sample`. Returns the graph, the loss
/// node and the rendered `[H·W, 4]` node per view.
pub fn build_loss(
    model: &SqsModel,
    sample: &SceneSample,
    w: &LossWeights,
    settings: &RenderSettings,
    trainable: bool,
) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.rgb, &sample.cameras, trainable)?;
    let (loss, views) = views_loss(&mut g, &out.splats, sample, w, settings)?;
    Ok((g, loss, views))
}

pub(crate) fn views_loss(
    g: &mut Graph,
    splats: &crate::render::SplatParams,
    sample: &SceneSample,
    w: &LossWeights,
    settings: &RenderSettings,
) -> Result<(NodeId, Vec<NodeId>)> {
    let nv = sample.n_views();
    if nv == 0 {
        return Err(Error::invalid("sample has no views"));
    }
    let mut total: Option<NodeId> = None;
    let mut views = Vec::with_capacity(nv);
    for v in 0..nv {
        let r = render_node(g, splats, &sample.cameras[v], settings)?;
        let l = reconstruction_loss_node(g, r.node, &sample.rgb[v], &sample.depth[v], &sample.valid_mask[v], w)?;
        views.push(r.node);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let loss = g.scale(total.expect("at least one view"), 1.0 / nv as f64)?;
    Ok((loss, views))
}

/// Loss of a frozen forward pass.
pub fn evaluate_loss(model: &SqsModel, sample: &SceneSample, w: &LossWeights) -> Result<f64> {
    let (g, loss, _) = build_loss(model, sample, w, &RenderSettings::default(), false)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn divergence_report(lr: f64, loss: f64, norms: &[(String, f64)]) -> String {
    let mut s = format!("loss {loss}, lr {lr}");
    for (name, n) in norms {
        let _ = write!(s, "; |grad {name}| = {n}");
    }
    s
}

/// Forward, backward and one AdamW update with learning rate `lr`.
pub fn pretrain_step(
    model: &mut SqsModel,
    sample: &SceneSample,
    state: &mut OptimizerState,
    w: &LossWeights,
    hp: &AdamWConfig,
    lr: f64,
) -> Result<StepStats> {
    let built = build_loss(model, sample, w, &RenderSettings::default(), true);
    let (g, loss) = match built {
        Ok((g, loss, _)) => (g, loss),
        Err(Error::NonFinite { node, op }) => {
            return Err(Error::Diverged(format!(
                "non-finite value at node {node} ({op}); lr {lr}"
            )))
        }
        Err(e) => return Err(e),
    };
    let loss_v = g.value(loss).item();
    let grads = g.backward(loss, &Array::scalar(1.0))?;
    let mut map = BTreeMap::new();
    let mut norms = Vec::new();
    for name in grads.param_names() {
        let a = grads.param(name).expect("listed parameter").clone();
        norms.push((name.to_string(), a.norm()));
        map.insert(name.to_string(), a);
    }
    let grad_norm = norms.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    if !loss_v.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged(divergence_report(lr, loss_v, &norms)));
    }
    let mut params = model.params.as_map().clone();
    adamw_step(&mut params, &map, state, lr, hp)?;
    model.params = crate::nn::ParamStore::from_map(params);
    Ok(StepStats {
        loss: loss_v,
        lr,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub adamw: AdamWConfig,
    pub loss: LossWeights,
    pub hflip_prob: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Snapshot period in steps; 0 disables snapshots.
    pub snapshot_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_peak: 2e-4,
            warmup_steps: 500,
            adamw: AdamWConfig::default(),
            loss: LossWeights::default(),
            hflip_prob: 0.5,
            seed: 0,
            checkpoint_every: 500,
            snapshot_every: 500,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        LrSchedule::new(self.steps, self.warmup_steps, self.lr_peak)?;
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "aug.hflip_prob must be in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        if !(self.adamw.weight_decay >= 0.0) {
            return Err(Error::Config("opt.weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step generator; depends only on `(seed, step)` so resumed runs draw
/// the same values.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.ckpt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

/// Saves parameters, optimizer moments and the step counter.
pub fn save_training_checkpoint(path: &Path, model: &SqsModel, state: &OptimizerState) -> Result<()> {
    let mut t = model.params.as_map().clone();
    t.extend(state.to_tensors());
    save_checkpoint(path, &t)
}

/// Loads a checkpoint into a model built from `model.cfg`, returning the
/// optimizer state when present.
pub fn load_training_checkpoint(path: &Path, model: &mut SqsModel) -> Result<Option<OptimizerState>> {
    let mut t = load_checkpoint(path)?;
    let state = OptimizerState::take_from(&mut t);
    *model = SqsModel::with_params(model.cfg.clone(), crate::nn::ParamStore::from_map(t))?;
    Ok(state)
}

fn write_snapshots(dir: &Path, step: u64, model: &SqsModel, sample: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (g, _, views) = build_loss(
        model,
        sample,
        &LossWeights::default(),
        &RenderSettings::default(),
        false,
    )?;
    for (v, &node) in views.iter().enumerate() {
        let cam = &sample.cameras[v];
        let (w, h) = (cam.width, cam.height);
        let px = g.value(node);
        let rgb: Vec<f64> = (0..w * h).flat_map(|p| px.row(p)[..3].to_vec()).collect();
        let depth: Vec<f64> = (0..w * h).map(|p| px.row(p)[3]).collect();
        write_ppm(
            &dir.join(format!("step{step:06}_view{v}.ppm")),
            &Array::new(vec![h, w, 3], rgb)?,
            w,
            h,
        )?;
        write_pfm(
            &dir.join(format!("step{step:06}_view{v}.pfm")),
            &Array::new(vec![h, w], depth)?,
            w,
            h,
        )?;
    }
    Ok(())
}

fn read_log_prefix(path: &Path, upto: u64) -> Result<String> {
    let mut out = String::from("step,loss,lr\n");
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().skip(1) {
        let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if step <= upto {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Runs pre-training over `dataset` (scene `(s − 1) mod n` at step `s`),
/// writing `loss.csv`, periodic checkpoints, snapshots and `final.ckpt` into
/// `out_dir`. With `resume`, training continues after the checkpoint's step
/// and the loss log is truncated to that step first.
pub fn run_pretrain(
    model: &mut SqsModel,
    dataset: &[SceneSample],
    cfg: &PretrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("pre-training needs at least one scene"));
    }
    fs::create_dir_all(out_dir)?;
    let schedule = LrSchedule::new(cfg.steps, cfg.warmup_steps, cfg.lr_peak)?;
    let mut state = OptimizerState::new();
    if let Some(path) = resume {
        state = load_training_checkpoint(path, model)?
            .ok_or_else(|| Error::Config(format!("{} holds no optimizer state", path.display())))?;
    }
    let start = state.step;
    if start > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint step {start} exceeds train.steps {}",
            cfg.steps
        )));
    }
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = read_log_prefix(&log_path, start)?;
    let mut losses = Vec::new();
    for step in start + 1..=cfg.steps {
        let lr = schedule.at(step)?;
        let mut rng = step_rng(cfg.seed, step);
        let flip = cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob;
        let sample = horizontal_flip_augment(&dataset[((step - 1) % dataset.len() as u64) as usize], flip)?;
        let stats = match pretrain_step(model, &sample, &mut state, &cfg.loss, &cfg.adamw, lr) {
            Ok(s) => s,
            Err(Error::Diverged(msg)) => {
                let report = format!("step {step}: {msg}\n");
                fs::write(out_dir.join("diverged.txt"), &report)?;
                fs::write(&log_path, &log)?;
                return Err(Error::Diverged(format!("step {step}: {msg}")));
            }
            Err(e) => return Err(e),
        };
        log::debug!("step {step} loss {} lr {lr}", stats.loss);
        let _ = writeln!(log, "{step},{},{lr}", stats.loss);
        losses.push(stats.loss);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_training_checkpoint(&checkpoint_path(out_dir, step), model, &state)?;
            fs::write(&log_path, &log)?;
        }
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            write_snapshots(&out_dir.join("snapshots"), step, model, &dataset[0])?;
        }
    }
    fs::write(&log_path, &log)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_training_checkpoint(&final_checkpoint, model, &state)?;
    Ok(PretrainSummary {
        losses,
        final_checkpoint,
    })
}
