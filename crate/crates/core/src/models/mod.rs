//! Learnable networks: three modality encoders, the attention fusion block,
//! the T1ce decoder, the patch discriminator, the PatchNCE projection heads
//! and the segmentation UNet.
//!
//! Parameters live in one [`ParamStore`] under
//! `component/layer/param` keys whose top-level component selects the
//! optimizer group: `gen/…` (encoders, fusion, decoder), `head/…`,
//! `disc/…`, `seg/…`.

mod encoder;
mod fusion;
pub mod layers;
mod networks;

use mafnet_autograd::{Graph, ParamStore, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{Encoder, FeaturePyramid};
pub use fusion::{Fused, MafBlock};
pub use networks::{Decoder, Discriminator, ProjectionHead, UNet};

pub const N_MODALITIES: usize = 3;
pub const EMBED_DIM: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, found {found:?}")]
    ShapeMismatch { expected: String, found: Vec<usize> },
    #[error("cannot sample {requested} patches from {available} positions")]
    TooManyPatches { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_modalities: usize,
    pub base_width: usize,
    pub n_res_blocks: usize,
    /// Encoder layer indices tapped for PatchNCE, strictly increasing.
    pub nce_layers: Vec<usize>,
    /// Sampled positions per layer.
    pub num_patches: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub disc_width: usize,
}

impl GeneratorConfig {
    pub fn full_scale() -> Self {
        Self {
            n_modalities: N_MODALITIES,
            base_width: 64,
            n_res_blocks: 9,
            nce_layers: vec![0, 4, 8, 12, 16],
            num_patches: 256,
            head_hidden: EMBED_DIM,
            embed_dim: EMBED_DIM,
            disc_width: 64,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            base_width: 16,
            num_patches: 64,
            disc_width: 16,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modalities != N_MODALITIES {
            return Err(ModelError::BadConfig(format!(
                "n_modalities must be {N_MODALITIES}, got {}",
                self.n_modalities
            )));
        }
        if self.base_width == 0 || self.disc_width == 0 || self.embed_dim == 0 || self.head_hidden == 0 {
            return Err(ModelError::BadConfig("widths must be positive".into()));
        }
        if self.nce_layers.is_empty() || self.nce_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::BadConfig("nce_layers must be non-empty and strictly increasing".into()));
        }
        let n_layers = Encoder::num_layers(self.n_res_blocks);
        if let Some(&bad) = self.nce_layers.iter().find(|&&l| l >= n_layers) {
            return Err(ModelError::BadConfig(format!(
                "nce layer {bad} outside encoder layers 0..{n_layers}"
            )));
        }
        if self.num_patches < 2 {
            return Err(ModelError::BadConfig("num_patches must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl UNetConfig {
    pub fn full_scale() -> Self {
        Self {
            in_channels: 4,
            out_classes: 4,
            base_width: 64,
            depth: 4,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            base_width: 16,
            depth: 3,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 4 || self.out_classes != 4 {
            return Err(ModelError::BadConfig(
                "UNet takes 4 input channels and predicts 4 classes".into(),
            ));
        }
        if self.base_width == 0 {
            return Err(ModelError::BadConfig("UNet width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self {
            generator: GeneratorConfig::full_scale(),
            unet: UNetConfig::full_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.unet.validate()
    }

    /// Spatial sizes must survive the encoder's two and the UNet's `depth`
    /// halvings exactly.
    pub fn spatial_multiple(&self) -> usize {
        4usize.max(1 << self.unet.depth)
    }

    /// Smallest image side every network accepts.
    pub fn min_image_side(&self) -> usize {
        let m = self.spatial_multiple();
        Discriminator::MIN_INPUT.div_ceil(m) * m
    }

    pub fn desk_scale() -> Self {
        Self {
            generator: GeneratorConfig::desk_scale(),
            unet: UNetConfig::desk_scale(),
        }
    }
}

/// Synthesis output with the intermediates the losses need.
#[derive(Clone, Debug)]
pub struct Synthesis<'g> {
    /// `B×1×H×W` in [-1, 1].
    pub image: Var<'g>,
    pub pyramids: Vec<FeaturePyramid<'g>>,
    /// `B×N×H/4×W/4`.
    pub attention: Var<'g>,
}

/// Positions for one NCE layer, shared by the real and synthesized streams.
pub type PatchPositions = Vec<usize>;

/// The complete model: architecture descriptions, no parameter values.
#[derive(Clone, Debug)]
pub struct Mafnet {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub fusion: MafBlock,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    /// `heads[n][i]` projects encoder `n`'s tap `nce_layers[i]`.
    pub heads: Vec<Vec<ProjectionHead>>,
    pub unet: UNet,
}

impl Mafnet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let gcfg = &config.generator;
        let encoders = (0..gcfg.n_modalities)
            .map(|n| Encoder::new(&format!("gen/enc{n}"), gcfg))
            .collect();
        let heads = (0..gcfg.n_modalities)
            .map(|n| {
                gcfg.nce_layers
                    .iter()
                    .map(|&l| {
                        ProjectionHead::new(
                            &format!("head/enc{n}/layer{l}"),
                            Encoder::layer_channels(gcfg, l),
                            gcfg.head_hidden,
                            gcfg.embed_dim,
                        )
                    })
                    .collect()
            })
            .collect();
        let u = &config.unet;
        Ok(Self {
            encoders,
            fusion: MafBlock::new("gen/maf", 4 * gcfg.base_width, gcfg.n_modalities),
            decoder: Decoder::new("gen/dec", gcfg.base_width),
            discriminator: Discriminator::new("disc", gcfg.disc_width),
            heads,
            unet: UNet::new("seg/unet", u.in_channels, u.out_classes, u.base_width, u.depth),
            config,
        })
    }

    /// Fresh parameters: normal(0, 0.02) weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for e in &self.encoders {
            e.init(&mut store, &mut rng);
        }
        self.fusion.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        for h in self.heads.iter().flatten() {
            h.init(&mut store, &mut rng);
        }
        self.discriminator.init(&mut store, &mut rng);
        self.unet.init(&mut store, &mut rng);
        store
    }

    fn spatial_multiple(&self) -> usize {
        self.config.spatial_multiple()
    }

    fn check_image(&self, x: &Var<'_>, channels: usize) -> Result<()> {
        let shape = x.shape();
        let m = self.spatial_multiple();
        let ok = shape.len() == 4
            && shape[0] > 0
            && shape[1] == channels
            && shape[2] >= m
            && shape[3] >= m
            && shape[2] % m == 0
            && shape[3] % m == 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch {
                expected: format!("B×{channels}×H×W with H, W positive multiples of {m}"),
                found: shape,
            })
        }
    }

    /// Encoder `n` (0-based) on a `B×1×H×W` image.
    pub fn encode<'g>(&self, g: &'g Graph<'g>, x: Var<'g>, n: usize) -> Result<FeaturePyramid<'g>> {
        if n >= self.encoders.len() {
            return Err(ModelError::BadConfig(format!("no encoder {n}")));
        }
        self.check_image(&x, 1)?;
        Ok(self.encoders[n].forward(g, x))
    }

    pub fn maf_fuse<'g>(&self, g: &'g Graph<'g>, features: &[Var<'g>]) -> Result<Fused<'g>> {
        let first = features
            .first()
            .map(|f| f.shape())
            .ok_or_else(|| ModelError::BadConfig("no features to fuse".into()))?;
        let expected_c = 4 * self.config.generator.base_width;
        if features.len() != self.config.generator.n_modalities
            || first.len() != 4
            || first[1] != expected_c
            || features.iter().any(|f| f.shape() != first)
        {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} maps of B×{expected_c}×h×w", self.config.generator.n_modalities),
                found: first,
            });
        }
        Ok(self.fusion.forward(g, features))
    }

    pub fn decode<'g>(&self, g: &'g Graph<'g>, fused: Var<'g>) -> Result<Var<'g>> {
        let shape = fused.shape();
        if shape.len() != 4 || shape[1] != 4 * self.config.generator.base_width {
            return Err(ModelError::ShapeMismatch {
                expected: format!("B×{}×h×w", 4 * self.config.generator.base_width),
                found: shape,
            });
        }
        Ok(self.decoder.forward(g, fused))
    }

    /// `x` is `B×3×H×W` (T1, T2, FLAIR); returns ŷ with all intermediates.
    pub fn synthesize<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Synthesis<'g>> {
        self.check_image(&x, self.config.generator.n_modalities)?;
        let pyramids: Vec<FeaturePyramid<'g>> = (0..self.encoders.len())
            .map(|n| self.encoders[n].forward(g, x.narrow(1, n, 1)))
            .collect();
        let bottlenecks: Vec<Var<'g>> = pyramids.iter().map(|p| p.bottleneck).collect();
        let fused = self.maf_fuse(g, &bottlenecks)?;
        let image = self.decode(g, fused.features)?;
        Ok(Synthesis {
            image,
            pyramids,
            attention: fused.attention,
        })
    }

    /// Patch logits for a `B×1×H×W` image.
    pub fn discriminate<'g>(&self, g: &'g Graph<'g>, img: Var<'g>) -> Result<Var<'g>> {
        self.check_image(&img, 1)?;
        let shape = img.shape();
        if shape[2].min(shape[3]) < Discriminator::MIN_INPUT {
            return Err(ModelError::ShapeMismatch {
                expected: format!("discriminator input of at least {0}×{0}", Discriminator::MIN_INPUT),
                found: shape,
            });
        }
        Ok(self.discriminator.forward(g, img))
    }

    /// Embeds the features of encoder `n`'s `i`-th NCE tap at `positions`
    /// for every sample in the batch; rows are ordered `(b, position)`.
    pub fn project<'g>(
        &self,
        g: &'g Graph<'g>,
        n: usize,
        i: usize,
        features: Var<'g>,
        positions: &[usize],
    ) -> Result<Var<'g>> {
        let shape = features.shape();
        let layer = self.config.generator.nce_layers[i];
        let c = Encoder::layer_channels(&self.config.generator, layer);
        if shape.len() != 4 || shape[1] != c {
            return Err(ModelError::ShapeMismatch {
                expected: format!("B×{c}×h×w for layer {layer}"),
                found: shape,
            });
        }
        let hw = shape[2] * shape[3];
        if let Some(&bad) = positions.iter().find(|&&p| p >= hw) {
            return Err(ModelError::ShapeMismatch {
                expected: format!("positions below {hw}"),
                found: vec![bad],
            });
        }
        let rows: Vec<Var<'g>> = (0..shape[0])
            .map(|b| features.gather_positions(b, positions))
            .collect();
        let rows = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
        Ok(self.heads[n][i].forward(g, rows))
    }

    /// `B×4×H×W` → per-pixel logits over 4 classes.
    pub fn unet_forward<'g>(&self, g: &'g Graph<'g>, x4: Var<'g>) -> Result<Var<'g>> {
        self.check_image(&x4, self.config.unet.in_channels)?;
        Ok(self.unet.forward(g, x4))
    }
}

/// Uniform sample of `num_patches` distinct flattened positions.
pub fn sample_patch_positions<R: Rng>(
    layer_shape: (usize, usize),
    num_patches: usize,
    rng: &mut R,
) -> Result<PatchPositions> {
    let available = layer_shape.0 * layer_shape.1;
    if num_patches > available {
        return Err(ModelError::TooManyPatches {
            requested: num_patches,
            available,
        });
    }
    Ok(index::sample(rng, available, num_patches).into_vec())
}

#[cfg(test)]
mod tests;
