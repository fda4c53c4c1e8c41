//! Run configuration: one TOML document with strict keys, flag overrides
//! through `--set key=value`, and an echo of the resolved values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sqs_core::decoder::DecoderConfig;
use sqs_core::encoder::EncoderConfig;
use sqs_core::finetune::{FinetuneConfig, InteractionConfig, TaskConfig};
use sqs_core::pretrain::{AdamWConfig, LossWeights, PretrainConfig};
use sqs_core::{Bounds, ModelConfig, SceneSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Falls back to `SQS_SEED`, then 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Dataset root holding `scenes/`.
    pub data_dir: PathBuf,
    pub scene: SceneSection,
    pub encoder: EncoderSection,
    pub decoder: DecoderSection,
    pub loss: LossSection,
    pub opt: OptSection,
    pub train: TrainSection,
    pub aug: AugSection,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("data"),
            scene: SceneSection::default(),
            encoder: EncoderSection::default(),
            decoder: DecoderSection::default(),
            loss: LossSection::default(),
            opt: OptSection::default(),
            train: TrainSection::default(),
            aug: AugSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub n_scenes: usize,
    pub n_objects: usize,
    pub gaussians_per_object: usize,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Half side of the cubic scene bounds, metres.
    pub bounds_half: f64,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub depth_keep_rate: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            n_scenes: 8,
            n_objects: s.n_objects,
            gaussians_per_object: s.gaussians_per_object,
            n_views: s.n_views,
            width: s.image_size.0,
            height: s.image_size.1,
            focal: s.focal,
            bounds_half: 2.0,
            ring_radius: s.ring_radius,
            ring_height: s.ring_height,
            depth_keep_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub fpn_width: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            stem_width: e.stem_width,
            stage_widths: e.stage_widths,
            fpn_width: e.fpn_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub n_layers: usize,
    pub k: usize,
    pub n_offsets: usize,
    pub n_heads: usize,
    pub feature_dim: usize,
    pub ffn_dim: usize,
    /// Metres; bounds extent / 32 when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_size: Option<f64>,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let d = DecoderConfig::default();
        Self {
            n_layers: d.n_layers,
            k: d.k,
            n_offsets: d.n_offsets,
            n_heads: d.n_heads,
            feature_dim: d.feature_dim,
            ffn_dim: d.ffn_dim,
            voxel_size: d.voxel_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub w_rgb: f64,
    pub w_depth: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            w_rgb: w.w_rgb,
            w_depth: w.w_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptSection {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
}

impl Default for OptSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            lr_peak: p.lr_peak,
            warmup_steps: p.warmup_steps,
            weight_decay: p.adamw.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    /// Defaults to the top-level seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checkpoint_every: u64,
    pub snapshot_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            seed: None,
            checkpoint_every: p.checkpoint_every,
            snapshot_every: p.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSection {
    pub hflip_prob: f64,
}

impl Default for AugSection {
    fn default() -> Self {
        Self { hflip_prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub k: usize,
    pub alpha_thresh: f64,
    pub grid: usize,
    pub d_task: usize,
    pub hidden: usize,
    pub pe_hidden: usize,
    pub interaction: bool,
    pub train_fraction: f64,
    /// Trailing scenes of the dataset held out for `eval`.
    pub eval_scenes: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let t = TaskConfig::default();
        let f = FinetuneConfig::default();
        Self {
            steps: f.steps,
            lr: f.lr,
            weight_decay: f.adamw.weight_decay,
            k: t.inter.k,
            alpha_thresh: t.inter.alpha_thresh,
            grid: t.grid,
            d_task: t.d_task,
            hidden: t.hidden,
            pe_hidden: t.inter.pe_hidden,
            interaction: t.interaction,
            train_fraction: 1.0,
            eval_scenes: 2,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Sets `a.b.c = value` in a TOML table; `value` is parsed as TOML and kept
/// as a string when that fails.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("--set expects key=value, got '{assignment}'")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed config key '{key}'")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("config key '{key}': '{p}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Unknown-field errors from serde name the field; this adds the section.
fn describe(err: toml::de::Error) -> CliError {
    config_err(format!("invalid config: {}", err.message().trim()))
}

impl RunConfig {
    /// Reads `path` (defaults when absent) and applies `--set` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| {
                    config_err(format!(
                        "config {} is not valid TOML: {}",
                        p.display(),
                        e.message().trim()
                    ))
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(describe)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit seed, then `SQS_SEED`, then 0.
    pub fn resolve_seed(&mut self) -> Result<u64, CliError> {
        if self.seed.is_none() {
            if let Ok(s) = std::env::var("SQS_SEED") {
                let v = s
                    .trim()
                    .parse()
                    .map_err(|_| config_err(format!("SQS_SEED must be an unsigned integer, got '{s}'")))?;
                self.seed = Some(v);
            }
        }
        let seed = self.seed.unwrap_or(0);
        self.seed = Some(seed);
        if self.train.seed.is_none() {
            self.train.seed = Some(seed);
        }
        Ok(seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.scene;
        if s.n_scenes == 0 || s.n_views == 0 || s.n_objects == 0 || s.gaussians_per_object == 0 {
            return Err(config_err("scene counts must be at least 1"));
        }
        if !s.width.is_multiple_of(32) || !s.height.is_multiple_of(32) || s.width == 0 || s.height == 0 {
            return Err(config_err(format!(
                "scene.width and scene.height must be positive multiples of 32, got {}x{}",
                s.width, s.height
            )));
        }
        if !(s.depth_keep_rate > 0.0 && s.depth_keep_rate <= 1.0) {
            return Err(config_err("scene.depth_keep_rate must be in (0, 1]"));
        }
        if !(s.bounds_half > 0.0 && s.focal > 0.0 && s.ring_radius > 0.0) {
            return Err(config_err(
                "scene.bounds_half, scene.focal and scene.ring_radius must be positive",
            ));
        }
        self.model_config()?
            .decoder
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        self.pretrain_config()?
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        self.task_config(self.finetune.interaction)
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        let f = &self.finetune;
        if !(f.train_fraction > 0.0 && f.train_fraction <= 1.0) {
            return Err(config_err("finetune.train_fraction must be in (0, 1]"));
        }
        if !(f.lr >= 0.0 && f.weight_decay >= 0.0) {
            return Err(config_err("finetune.lr and finetune.weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<Bounds, CliError> {
        Bounds::cube(self.scene.bounds_half).map_err(|e| config_err(e.to_string()))
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, CliError> {
        let s = &self.scene;
        Ok(SceneSpec {
            n_objects: s.n_objects,
            bounds: self.bounds()?,
            n_views: s.n_views,
            image_size: (s.width, s.height),
            gaussians_per_object: s.gaussians_per_object,
            ring_radius: s.ring_radius,
            ring_height: s.ring_height,
            focal: s.focal,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let d = &self.decoder;
        let e = &self.encoder;
        Ok(ModelConfig {
            encoder: EncoderConfig {
                stem_width: e.stem_width,
                stage_widths: e.stage_widths,
                fpn_width: e.fpn_width,
            },
            decoder: DecoderConfig {
                n_layers: d.n_layers,
                n_offsets: d.n_offsets,
                n_heads: d.n_heads,
                voxel_size: d.voxel_size,
                k: d.k,
                feature_dim: d.feature_dim,
                ffn_dim: d.ffn_dim,
            },
            bounds: self.bounds()?,
            n_views: self.scene.n_views,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, CliError> {
        Ok(PretrainConfig {
            steps: self.train.steps,
            lr_peak: self.opt.lr_peak,
            warmup_steps: self.opt.warmup_steps,
            adamw: AdamWConfig {
                weight_decay: self.opt.weight_decay,
                ..AdamWConfig::default()
            },
            loss: LossWeights {
                w_rgb: self.loss.w_rgb,
                w_depth: self.loss.w_depth,
            },
            hflip_prob: self.aug.hflip_prob,
            seed: self.train.seed.or(self.seed).unwrap_or(0),
            checkpoint_every: self.train.checkpoint_every,
            snapshot_every: self.train.snapshot_every,
        })
    }

    pub fn task_config(&self, interaction: bool) -> TaskConfig {
        let f = &self.finetune;
        TaskConfig {
            grid: f.grid,
            d_task: f.d_task,
            hidden: f.hidden,
            d_pretrained: self.decoder.feature_dim,
            interaction,
            inter: InteractionConfig {
                k: f.k,
                alpha_thresh: f.alpha_thresh,
                pe_hidden: f.pe_hidden,
            },
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune.steps,
            lr: self.finetune.lr,
            adamw: AdamWConfig {
                weight_decay: self.finetune.weight_decay,
                ..AdamWConfig::default()
            },
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `out_dir/config.resolved`.
    pub fn echo(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join("config.resolved"), self.to_toml())
    }
}
