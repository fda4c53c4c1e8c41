//! Transfer of pre-trained Gaussian queries into a downstream occupancy task.
//!
//! The pre-trained model runs frozen and yields decoded Gaussians plus their
//! final query features. Gaussians below an opacity threshold are dropped, and
//! each task query (one per voxel center) attends over its k nearest
//! survivors. A small per-voxel classifier predicts empty or occupied.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{Array, CustomOp, Graph, NodeId};
use crate::decoder::primitives_from_splats;
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::GaussianPrimitive;
use crate::model::SqsModel;
use crate::nn::{cross_entropy, Ctx, ParamStore};
use crate::pretrain::{adamw_step, AdamWConfig, OptimizerState};
use crate::sampling::{head_weighted_sum, sample_pyramid};
use crate::scene::{Bounds, Scene, SceneSample};

/// Width of a decoded anchor vector: position, scale, unit quaternion, opacity.
pub const ANCHOR_VEC_DIM: usize = 11;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionConfig {
    pub k: usize,
    pub alpha_thresh: f64,
    /// Hidden width of the positional perceptrons.
    pub pe_hidden: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            k: 8,
            alpha_thresh: 0.05,
            pe_hidden: 64,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("interaction k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_thresh) {
            return Err(Error::Config(format!(
                "alpha_thresh must be in [0, 1], got {}",
                self.alpha_thresh
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Voxels per side of the occupancy grid.
    pub grid: usize,
    pub d_task: usize,
    pub hidden: usize,
    /// Width of the pre-trained query features.
    pub d_pretrained: usize,
    pub interaction: bool,
    pub inter: InteractionConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            d_task: 64,
            hidden: 64,
            d_pretrained: 64,
            interaction: true,
            inter: InteractionConfig::default(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.d_task == 0 || self.hidden == 0 || self.d_pretrained == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        self.inter.validate()
    }
}

/// Task query positions `[M, 3]` and features `[M, D_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskQuerySet {
    pub positions: Array,
    pub features: Array,
}

/// Anchors that survived opacity filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredAnchors {
    /// `[N, 11]` decoded parameter vectors.
    pub params: Array,
    /// `[N, D]` query features.
    pub features: Array,
    /// Row of each survivor in the unfiltered set.
    pub indices: Vec<usize>,
    /// Cached `knn_neighbors` result for a fixed set of task positions.
    pub neighbors: Option<Vec<usize>>,
}

impl FilteredAnchors {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Precomputes the neighbor lists of `positions`.
    pub fn with_neighbors(mut self, positions: &Array, k: usize) -> Result<Self> {
        if !self.is_empty() {
            self.neighbors = Some(knn_neighbors(positions, &self.positions(), k)?);
        }
        Ok(self)
    }

    pub fn positions(&self) -> Array {
        let n = self.len();
        Array::matrix(n, 3, (0..n).flat_map(|i| self.params.row(i)[..3].to_vec()).collect())
    }
}

/// `[N, 11]` rows `(μ, scale, quaternion, opacity)`.
pub fn anchor_vectors(gaussians: &[GaussianPrimitive]) -> Array {
    let mut d = Vec::with_capacity(gaussians.len() * ANCHOR_VEC_DIM);
    for g in gaussians {
        d.extend(g.mu.iter());
        d.extend(g.scale.iter());
        d.extend(g.quat.iter());
        d.push(g.opacity);
    }
    Array::matrix(gaussians.len(), ANCHOR_VEC_DIM, d)
}

/// Keeps rows whose opacity (last column) is at least `alpha_thresh`, in order.
pub fn filter_by_opacity(params: &Array, features: &Array, alpha_thresh: f64) -> Result<FilteredAnchors> {
    if params.rows() != features.rows() || params.cols() != ANCHOR_VEC_DIM {
        return Err(Error::invalid(format!(
            "anchor params {:?} and features {:?} disagree",
            params.shape(),
            features.shape()
        )));
    }
    let indices: Vec<usize> = (0..params.rows())
        .filter(|&i| params.row(i)[ANCHOR_VEC_DIM - 1] >= alpha_thresh)
        .collect();
    let d = features.cols();
    let mut p = Vec::with_capacity(indices.len() * ANCHOR_VEC_DIM);
    let mut f = Vec::with_capacity(indices.len() * d);
    for &i in &indices {
        p.extend_from_slice(params.row(i));
        f.extend_from_slice(features.row(i));
    }
    if indices.is_empty() {
        log::warn!("no anchor reaches opacity {alpha_thresh}; interaction is skipped");
    }
    Ok(FilteredAnchors {
        params: Array::matrix(indices.len(), ANCHOR_VEC_DIM, p),
        features: Array::matrix(indices.len(), d, f),
        indices,
        neighbors: None,
    })
}

/// Row-major `M × k` indices of the nearest anchors per task position. Ties
/// go to the lower anchor index; with fewer than `k` anchors the nearest one
/// fills the remaining columns.
pub fn knn_neighbors(task: &Array, anchors: &Array, k: usize) -> Result<Vec<usize>> {
    if anchors.rows() == 0 {
        return Err(Error::invalid("knn needs at least one anchor"));
    }
    if k == 0 || task.cols() != 3 || anchors.cols() != 3 {
        return Err(Error::invalid("knn needs k ≥ 1 and 3-column positions"));
    }
    let n = anchors.rows();
    let mut out = Vec::with_capacity(task.rows() * k);
    let mut d: Vec<(f64, usize)> = Vec::with_capacity(n);
    for t in 0..task.rows() {
        let p = task.row(t);
        d.clear();
        for a in 0..n {
            let q = anchors.row(a);
            let dist = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            d.push((dist, a));
        }
        let take = k.min(n);
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if take < n {
            d.select_nth_unstable_by(take - 1, cmp);
        }
        d[..take].sort_unstable_by(cmp);
        out.extend(d[..take].iter().map(|e| e.1));
        out.extend(std::iter::repeat_n(d[0].1, k - take));
    }
    Ok(out)
}

/// Voxel centers of a `g³` grid over `bounds`, x fastest.
pub fn grid_centers(bounds: &Bounds, g: usize) -> Array {
    let size = bounds.size();
    let mut d = Vec::with_capacity(g * g * g * 3);
    for iz in 0..g {
        for iy in 0..g {
            for ix in 0..g {
                for (a, i) in [ix, iy, iz].into_iter().enumerate() {
                    d.push(bounds.min[a] + (i as f64 + 0.5) / g as f64 * size[a]);
                }
            }
        }
    }
    Array::matrix(g * g * g, 3, d)
}

/// Class per voxel: 1 when a Gaussian with opacity above 0.5 has its mean
/// inside, else 0.
pub fn occupancy_labels(scene: &Scene, g: usize) -> Vec<usize> {
    let b = &scene.bounds;
    let size = b.size();
    let mut labels = vec![0; g * g * g];
    for gs in scene.gaussians.iter().filter(|gs| gs.opacity > 0.5) {
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let t = (gs.mu[a] - b.min[a]) / size[a];
            if !(0.0..=1.0).contains(&t) {
                inside = false;
            }
            idx[a] = ((t * g as f64).floor() as usize).min(g - 1);
        }
        if inside {
            labels[(idx[2] * g + idx[1]) * g + idx[0]] = 1;
        }
    }
    labels
}

/// Per-class IoU (`None` for classes absent from both grids) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouReport {
    pub fn occupied(&self) -> f64 {
        self.per_class.get(1).copied().flatten().unwrap_or(0.0)
    }
}

/// IoU from accumulated `(intersection, union)` counts per class.
pub fn iou_from_counts(counts: &[(usize, usize)]) -> IouReport {
    let per_class: Vec<Option<f64>> = counts
        .iter()
        .map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouReport { per_class, miou }
}

pub fn iou_counts(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<Vec<(usize, usize)>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut counts = vec![(0, 0); n_classes];
    for (&p, &t) in pred.iter().zip(gt) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::invalid(format!("class id out of range for {n_classes} classes")));
        }
        if p == t {
            counts[p].0 += 1;
            counts[p].1 += 1;
        } else {
            counts[p].1 += 1;
            counts[t].1 += 1;
        }
    }
    Ok(counts)
}

pub fn evaluate_iou(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<IouReport> {
    Ok(iou_from_counts(&iou_counts(pred, gt, n_classes)?))
}

/// Adds the interaction block: positional perceptrons for task positions and
/// anchor vectors, and query/key/value/output projections.
pub fn init_interaction(store: &mut ParamStore, cfg: &TaskConfig, rng: &mut ChaCha8Rng) {
    let (dt, d, h) = (cfg.d_task, cfg.d_pretrained, cfg.inter.pe_hidden);
    store.add_mlp2(rng, "interact.pe_task", (3, h, dt), 1.0);
    store.add_mlp2(rng, "interact.pe_anchor", (ANCHOR_VEC_DIM, h, d), 1.0);
    store.add_linear(rng, "interact.q", dt, dt, 1.0);
    store.add_linear(rng, "interact.k", d, dt, 1.0);
    store.add_linear(rng, "interact.v", d, dt, 1.0);
    store.add_linear(rng, "interact.out", dt, dt, 1.0);
}

/// `q_t + out(Σ_j softmax_j(⟨Q_i, K_j⟩/√D_t) V_j)` over each query's `k`
/// neighbors, with `Q = q(q_t + pe_task(μ_t))` and `K, V` projections of
/// `q_k + pe_anchor(g_k)`. Returns `features` unchanged when `gq` is empty.
pub fn local_query_interaction(
    ctx: &mut Ctx,
    features: NodeId,
    positions: &Array,
    gq: &FilteredAnchors,
    cfg: &TaskConfig,
) -> Result<NodeId> {
    if gq.is_empty() {
        return Ok(features);
    }
    if gq.features.cols() != cfg.d_pretrained {
        return Err(Error::invalid(format!(
            "pre-trained features have width {}, the interaction block expects {}",
            gq.features.cols(),
            cfg.d_pretrained
        )));
    }
    let k = cfg.inter.k;
    let nbr = match &gq.neighbors {
        Some(n) if n.len() == positions.rows() * k => n.clone(),
        _ => knn_neighbors(positions, &gq.positions(), k)?,
    };

    let pos = ctx.g.constant(positions.clone())?;
    let pe = ctx.mlp2(pos, "interact.pe_task")?;
    let qin = ctx.g.add(features, pe)?;
    let q = ctx.linear(qin, "interact.q")?;

    let gk = ctx.g.constant(gq.params.clone())?;
    let qk = ctx.g.constant(gq.features.clone())?;
    let pe = ctx.mlp2(gk, "interact.pe_anchor")?;
    let kv = ctx.g.add(qk, pe)?;
    let keys = ctx.linear(kv, "interact.k")?;
    let vals = ctx.linear(kv, "interact.v")?;
    let agg = local_attention(ctx.g, q, keys, vals, nbr, k)?;
    let out = ctx.linear(agg, "interact.out")?;
    ctx.g.add(features, out)
}

/// Single-head scaled dot-product attention of each query row over its `k`
/// neighbor rows of `keys` / `values` (row-major `M × k` indices).
pub fn local_attention(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    neighbors: Vec<usize>,
    k: usize,
) -> Result<NodeId> {
    let (qv, kv, vv) = (g.value(queries), g.value(keys), g.value(values));
    let (m, d) = (qv.rows(), qv.cols());
    if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || neighbors.len() != m * k {
        return Err(Error::invalid(format!(
            "local attention: queries {:?}, keys {:?}, values {:?}, {} neighbor indices for k = {k}",
            qv.shape(),
            kv.shape(),
            vv.shape(),
            neighbors.len()
        )));
    }
    if neighbors.iter().any(|&j| j >= kv.rows()) {
        return Err(Error::invalid("neighbor index out of range"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut att = vec![0.0; m * k];
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let q = qv.row(i);
        let a = &mut att[i * k..(i + 1) * k];
        for (j, &n) in neighbors[i * k..(i + 1) * k].iter().enumerate() {
            a[j] = q.iter().zip(kv.row(n)).map(|(x, y)| x * y).sum::<f64>() * scale;
        }
        let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in a.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        let o = &mut out[i * d..(i + 1) * d];
        for (j, &n) in neighbors[i * k..(i + 1) * k].iter().enumerate() {
            a[j] /= z;
            for (oo, v) in o.iter_mut().zip(vv.row(n)) {
                *oo += a[j] * v;
            }
        }
    }
    let op = LocalAttentionOp {
        att,
        neighbors,
        k,
        scale,
    };
    g.custom(&[queries, keys, values], Array::matrix(m, d, out), Box::new(op))
}

struct LocalAttentionOp {
    att: Vec<f64>,
    neighbors: Vec<usize>,
    k: usize,
    scale: f64,
}

impl CustomOp for LocalAttentionOp {
    fn name(&self) -> &'static str {
        "local_attention"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let (qv, kv, vv) = (inputs[0], inputs[1], inputs[2]);
        let (m, d, k) = (qv.rows(), qv.cols(), self.k);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut da = vec![0.0; k];
        for i in 0..m {
            let go = grad.row(i);
            let a = &self.att[i * k..(i + 1) * k];
            let nb = &self.neighbors[i * k..(i + 1) * k];
            let mut dot = 0.0;
            for j in 0..k {
                let n = nb[j];
                da[j] = go.iter().zip(vv.row(n)).map(|(x, y)| x * y).sum();
                dot += a[j] * da[j];
                for (t, g) in dv[n * d..(n + 1) * d].iter_mut().zip(go) {
                    *t += a[j] * g;
                }
            }
            let q = qv.row(i);
            for j in 0..k {
                let n = nb[j];
                let ds = a[j] * (da[j] - dot) * self.scale;
                for (t, x) in dq[i * d..(i + 1) * d].iter_mut().zip(kv.row(n)) {
                    *t += ds * x;
                }
                for (t, x) in dk[n * d..(n + 1) * d].iter_mut().zip(q) {
                    *t += ds * x;
                }
            }
        }
        Ok(vec![
            Some(Array::matrix(m, d, dq)),
            Some(Array::matrix(kv.rows(), d, dk)),
            Some(Array::matrix(vv.rows(), d, dv)),
        ])
    }
}

pub fn init_occupancy_head(store: &mut ParamStore, cfg: &TaskConfig, rng: &mut ChaCha8Rng) {
    store.add_mlp2(rng, "task.head", (cfg.d_task, cfg.hidden, N_CLASSES), 1.0);
}

/// Two-layer perceptron from task features to `[M, 2]` logits.
pub fn occupancy_head(ctx: &mut Ctx, features: NodeId) -> Result<NodeId> {
    ctx.mlp2(features, "task.head")
}

/// Downstream model: its own copy of the image encoder (initialized from the
/// pre-trained one and trained further), learned per-voxel queries, an image
/// feature read-out at voxel centers, the optional interaction block and the
/// occupancy head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub cfg: TaskConfig,
    pub encoder: EncoderConfig,
    pub bounds: Bounds,
    pub params: ParamStore,
}

impl TaskModel {
    pub fn init(cfg: TaskConfig, pretrained: &SqsModel, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg;
        cfg.d_pretrained = pretrained.cfg.decoder.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = pretrained.params.with_prefix("encoder.");
        let m = cfg.grid.pow(3);
        params.insert("task.queries", Array::zeros(&[m, cfg.d_task]));
        params.add_linear(&mut rng, "task.img", pretrained.cfg.encoder.fpn_width, cfg.d_task, 1.0);
        if cfg.interaction {
            init_interaction(&mut params, &cfg, &mut rng);
        }
        init_occupancy_head(&mut params, &cfg, &mut rng);
        Ok(Self {
            cfg,
            encoder: pretrained.cfg.encoder.clone(),
            bounds: pretrained.cfg.bounds,
            params,
        })
    }

    pub fn positions(&self) -> Array {
        grid_centers(&self.bounds, self.cfg.grid)
    }

    /// Logits `[G³, 2]` for one scene sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        sample: &SceneSample,
        gq: Option<&FilteredAnchors>,
        trainable: bool,
    ) -> Result<NodeId> {
        let mut ctx = Ctx::new(g, &self.params, trainable);
        let positions = self.positions();
        let m = positions.rows();
        let pyramid = encode(&mut ctx, &self.encoder, &sample.rgb)?;
        let pts = ctx.g.constant(positions.clone())?;
        let samples = sample_pyramid(ctx.g, pts, &pyramid.levels, &pyramid.layout, &sample.cameras, 0.01)?;
        let s = pyramid.layout.n_views * pyramid.levels.len();
        let uniform = ctx.g.constant(Array::full(&[m, s], 1.0 / s as f64))?;
        let img = head_weighted_sum(ctx.g, uniform, samples, 1)?;
        let img = ctx.linear(img, "task.img")?;
        let q = ctx.p("task.queries")?;
        let mut f = ctx.g.add(q, img)?;
        if self.cfg.interaction {
            if let Some(gq) = gq {
                f = local_query_interaction(&mut ctx, f, &positions, gq, &self.cfg)?;
            }
        }
        occupancy_head(&mut ctx, f)
    }
}

/// Decoded Gaussians and final query features of the frozen model, filtered
/// by opacity.
pub fn infer_pretrained(model: &SqsModel, sample: &SceneSample, alpha_thresh: f64) -> Result<FilteredAnchors> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.rgb, &sample.cameras, false)?;
    let s = out.splats;
    let (prims, _) = primitives_from_splats(
        g.value(s.means),
        g.value(s.quats),
        g.value(s.scales),
        g.value(s.opacities),
        g.value(s.colors),
    );
    filter_by_opacity(&anchor_vectors(&prims), g.value(out.queries.features), alpha_thresh)
}

fn argmax_rows(a: &Array) -> Vec<usize> {
    (0..a.rows())
        .map(|r| {
            let row = a.row(r);
            (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStats {
    pub loss: f64,
    pub iou: IouReport,
}

/// Cross-entropy step on the task parameters only.
pub fn finetune_step(
    task: &mut TaskModel,
    sample: &SceneSample,
    gq: Option<&FilteredAnchors>,
    labels: &[usize],
    state: &mut OptimizerState,
    hp: &AdamWConfig,
    lr: f64,
) -> Result<FinetuneStats> {
    let mut g = Graph::new();
    let logits = task.forward(&mut g, sample, gq, true)?;
    let loss = cross_entropy(&mut g, logits, labels)?;
    let loss_v = g.value(loss).item();
    let iou = evaluate_iou(&argmax_rows(g.value(logits)), labels, N_CLASSES)?;
    let grads = g.backward(loss, &Array::scalar(1.0))?;
    let map: BTreeMap<String, Array> = grads
        .param_names()
        .map(|n| (n.to_string(), grads.param(n).expect("listed parameter").clone()))
        .collect();
    if !loss_v.is_finite() || map.values().any(|a| !a.is_finite()) {
        return Err(Error::Diverged(format!("fine-tune loss {loss_v} at lr {lr}")));
    }
    let mut params = task.params.as_map().clone();
    adamw_step(&mut params, &map, state, lr, hp)?;
    task.params = ParamStore::from_map(params);
    Ok(FinetuneStats { loss: loss_v, iou })
}

/// Frozen-task prediction of per-voxel classes.
pub fn predict(task: &TaskModel, sample: &SceneSample, gq: Option<&FilteredAnchors>) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let logits = task.forward(&mut g, sample, gq, false)?;
    Ok(argmax_rows(g.value(logits)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Number of training scenes used for a fraction `f` of `n`: `⌈f·n⌉`.
pub fn train_subset_len(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize)
}

/// One fine-tuning scene: supervision, labels and (optionally) the frozen
/// model's filtered anchors.
#[derive(Debug, Clone)]
pub struct TaskExample {
    pub sample: SceneSample,
    pub labels: Vec<usize>,
    pub anchors: Option<FilteredAnchors>,
}

pub fn prepare_examples(
    pretrained: &SqsModel,
    scenes: &[(Scene, SceneSample)],
    cfg: &TaskConfig,
) -> Result<Vec<TaskExample>> {
    scenes
        .iter()
        .map(|(scene, sample)| {
            let anchors = if cfg.interaction {
                let positions = grid_centers(&pretrained.cfg.bounds, cfg.grid);
                Some(
                    infer_pretrained(pretrained, sample, cfg.inter.alpha_thresh)?
                        .with_neighbors(&positions, cfg.inter.k)?,
                )
            } else {
                None
            };
            Ok(TaskExample {
                sample: sample.clone(),
                labels: occupancy_labels(scene, cfg.grid),
                anchors,
            })
        })
        .collect()
}

pub const METRICS_LOG: &str = "metrics.csv";
pub const TASK_CHECKPOINT: &str = "task.ckpt";

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub stats: Vec<FinetuneStats>,
    pub checkpoint: PathBuf,
}

/// Fine-tunes on `examples` (example `(s − 1) mod n` at step `s`), writing
/// `metrics.csv` and `task.ckpt` into `out_dir`.
pub fn run_finetune(
    task: &mut TaskModel,
    examples: &[TaskExample],
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<FinetuneSummary> {
    if examples.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one scene"));
    }
    fs::create_dir_all(out_dir)?;
    let mut state = OptimizerState::new();
    let mut log = String::from("step,loss,iou_occupied,miou\n");
    let mut stats = Vec::new();
    for step in 1..=cfg.steps {
        let ex = &examples[((step - 1) % examples.len() as u64) as usize];
        let s = finetune_step(
            task,
            &ex.sample,
            ex.anchors.as_ref(),
            &ex.labels,
            &mut state,
            &cfg.adamw,
            cfg.lr,
        )?;
        let _ = writeln!(log, "{step},{},{},{}", s.loss, s.iou.occupied(), s.iou.miou);
        stats.push(s);
    }
    fs::write(out_dir.join(METRICS_LOG), &log)?;
    let checkpoint = out_dir.join(TASK_CHECKPOINT);
    save_checkpoint(&checkpoint, task.params.as_map())?;
    Ok(FinetuneSummary { stats, checkpoint })
}

/// Loads task parameters saved by [`run_finetune`].
pub fn load_task(path: &Path, cfg: TaskConfig, pretrained: &SqsModel) -> Result<TaskModel> {
    let fresh = TaskModel::init(cfg, pretrained, 0)?;
    let params = ParamStore::from_map(load_checkpoint(path)?);
    fresh.params.check_compatible(&params)?;
    Ok(TaskModel { params, ..fresh })
}

/// IoU accumulated over all voxels of all `examples`.
pub fn evaluate_task(task: &TaskModel, examples: &[TaskExample]) -> Result<IouReport> {
    let mut counts = vec![(0, 0); N_CLASSES];
    for ex in examples {
        let pred = predict(task, &ex.sample, ex.anchors.as_ref())?;
        for (c, (i, u)) in counts.iter_mut().zip(iou_counts(&pred, &ex.labels, N_CLASSES)?) {
            c.0 += i;
            c.1 += u;
        }
    }
    Ok(iou_from_counts(&counts))
}
