//! Named parameter storage and the small layer helpers shared by the encoder,
//! decoder and task heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, CustomOp, Graph, NodeId};
use crate::error::{Error, Result};

/// Trainable arrays keyed by dotted names such as `decoder.0.ffn.fc1.w`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Array> {
        &self.map
    }

    pub fn from_map(map: BTreeMap<String, Array>) -> Self {
        Self { map }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, a) in &self.map {
            match other.map.get(name) {
                None => return Err(Error::Config(format!("checkpoint is missing parameter {name}"))),
                Some(b) if b.shape() != a.shape() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?} in the checkpoint but {:?} in the config",
                        b.shape(),
                        a.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.map.keys().find(|k| !self.map.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Glorot-uniform weight `[fan_in, fan_out]` scaled by `gain`, and a zero bias `[1, fan_out]`.
    pub fn add_linear(&mut self, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(format!("{prefix}.w"), Array::matrix(fan_in, fan_out, w));
        self.insert(format!("{prefix}.b"), Array::zeros(&[1, fan_out]));
    }

    /// Two linear layers with a relu in between.
    pub fn add_mlp2(&mut self, rng: &mut ChaCha8Rng, prefix: &str, dims: (usize, usize, usize), out_gain: f64) {
        self.add_linear(rng, &format!("{prefix}.fc1"), dims.0, dims.1, 1.0);
        self.add_linear(rng, &format!("{prefix}.fc2"), dims.1, dims.2, out_gain);
    }
}

/// Binds parameters from a store into a graph, either as trainable leaves or
/// as constants (frozen inference).
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    trainable: bool,
    frozen: BTreeMap<String, NodeId>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g,
            store,
            trainable,
            frozen: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        let value = self.store.get(name)?;
        if self.trainable {
            return self.g.param(name, value);
        }
        if let Some(&id) = self.frozen.get(name) {
            return Ok(id);
        }
        let id = self.g.constant(value.clone())?;
        self.frozen.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    pub fn mlp2(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.g.relu(h)?;
        self.linear(h, &format!("{prefix}.fc2"))
    }
}

/// Row indices for a 3×3, padding-1 convolution over `n` stacked `h × w`
/// maps: one entry per (output pixel, tap), `None` for padding.
pub(crate) fn im2col_indices(n: usize, h: usize, w: usize, stride: usize) -> (Vec<Option<usize>>, usize, usize) {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let mut idx = Vec::with_capacity(n * ho * wo * 9);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            idx.push(None);
                        } else {
                            idx.push(Some(b * h * w + iy as usize * w + ix as usize));
                        }
                    }
                }
            }
        }
    }
    (idx, ho, wo)
}

/// 3×3 convolution with padding 1 on `[n·h·w, c_in]` rows. Returns the output
/// node and its spatial size.
pub(crate) fn conv3x3(
    ctx: &mut Ctx,
    x: NodeId,
    (n, h, w): (usize, usize, usize),
    stride: usize,
    prefix: &str,
) -> Result<(NodeId, usize, usize)> {
    let cin = ctx.g.value(x).cols();
    let (idx, ho, wo) = im2col_indices(n, h, w, stride);
    let cols = ctx.g.gather(x, idx)?;
    let cols = ctx.g.reshape(cols, n * ho * wo, 9 * cin)?;
    Ok((ctx.linear(cols, prefix)?, ho, wo))
}

/// Mean softmax cross-entropy of `[N, C]` logits against class labels.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lv = g.value(logits);
    let (n, c) = (lv.rows(), lv.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = lv.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        loss += z.ln() + mx - row[y];
        probs.extend(row.iter().map(|v| (v - mx).exp() / z));
    }
    let op = CrossEntropyOp {
        probs: Array::matrix(n, c, probs),
        labels: labels.to_vec(),
    };
    g.custom(&[logits], Array::scalar(loss / n as f64), Box::new(op))
}

struct CrossEntropyOp {
    probs: Array,
    labels: Vec<usize>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _inputs: &[&Array], _output: &Array, grad: &Array) -> Result<Vec<Option<Array>>> {
        let n = self.labels.len();
        let s = grad.item() / n as f64;
        let mut d = self.probs.clone();
        for (r, &y) in self.labels.iter().enumerate() {
            d.row_mut(r)[y] -= 1.0;
        }
        Ok(vec![Some(d.map(|v| v * s))])
    }
}
