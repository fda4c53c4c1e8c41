//! Encoder plus query decoder as one parameterized model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph};
use crate::decoder::{decode, init_decoder, DecoderConfig, QueryNodes};
use crate::encoder::{encode, init_encoder, EncoderConfig, FeaturePyramid, STRIDES};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::nn::{Ctx, ParamStore};
use crate::render::SplatParams;
use crate::scene::Bounds;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub bounds: Bounds,
    pub n_views: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            bounds: Bounds::cube(2.0).expect("valid cube"),
            n_views: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqsModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub splats: SplatParams,
    pub queries: QueryNodes,
    pub pyramid: FeaturePyramid,
}

impl SqsModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.n_views == 0 {
            return Err(Error::Config("model needs at least one view".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder(&mut params, &cfg.encoder, &mut rng);
        init_decoder(
            &mut params,
            &cfg.decoder,
            &cfg.bounds,
            (STRIDES.len(), cfg.encoder.fpn_width),
            cfg.n_views,
            seed.wrapping_add(1),
        )?;
        Ok(Self { cfg, params })
    }

    /// Replaces the parameters after checking names and shapes against `cfg`.
    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::init(cfg, 0)?;
        fresh.params.check_compatible(&params)?;
        Ok(Self { cfg: fresh.cfg, params })
    }

    /// Encodes the views and decodes splats. With `trainable` false every
    /// parameter enters the graph as a constant.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &[Array],
        cameras: &[Camera],
        trainable: bool,
    ) -> Result<ForwardOutput> {
        if images.len() != cameras.len() {
            return Err(Error::invalid(format!(
                "{} images for {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        let mut ctx = Ctx::new(g, &self.params, trainable);
        let pyramid = encode(&mut ctx, &self.cfg.encoder, images)?;
        let out = decode(&mut ctx, &self.cfg.decoder, &self.cfg.bounds, &pyramid, cameras)?;
        Ok(ForwardOutput {
            splats: out.splats,
            queries: out.queries,
            pyramid,
        })
    }
}
