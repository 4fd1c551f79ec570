//! Modality-level attention fusion.
//!
//! The concatenated bottlenecks go through a 3×3 convolution that emits one
//! logit map per modality; a softmax across the modality axis turns these
//! into spatial weights that sum to one at every location. Each modality's
//! features are scaled by its map (shared across channels), concatenated
//! again, and reduced back to the single-encoder width by a 1×1 convolution
//! followed by LeakyReLU.

use mafnet_autograd::{Graph, ParamStore, Var};
use rand::Rng;

use super::layers::{Conv, LEAKY_SLOPE};

#[derive(Clone, Debug)]
pub struct MafBlock {
    pub attention: Conv,
    pub fuse: Conv,
    n_modalities: usize,
}

/// Output of [`MafBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Fused<'g> {
    pub features: Var<'g>,
    /// `B×N×H×W`, softmax-normalized across N.
    pub attention: Var<'g>,
}

impl MafBlock {
    pub fn new(prefix: &str, channels: usize, n_modalities: usize) -> Self {
        Self {
            attention: Conv::same3(format!("{prefix}/attention"), n_modalities * channels, n_modalities),
            fuse: Conv::new(format!("{prefix}/fuse"), n_modalities * channels, channels, 1, 1, 0),
            n_modalities,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.attention.init(store, rng);
        self.fuse.init(store, rng);
    }

    /// All `features` must share one `B×C×H×W` shape.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, features: &[Var<'g>]) -> Fused<'g> {
        assert_eq!(features.len(), self.n_modalities);
        let stacked = g.concat(features, 1);
        let attention = self.attention.forward(g, stacked).softmax_channels();
        let weighted: Vec<Var<'g>> = features
            .iter()
            .enumerate()
            .map(|(n, f)| attention.narrow(1, n, 1).mul_channels(*f))
            .collect();
        let fused = self
            .fuse
            .forward(g, g.concat(&weighted, 1))
            .leaky_relu(LEAKY_SLOPE);
        Fused {
            features: fused,
            attention,
        }
    }
}
