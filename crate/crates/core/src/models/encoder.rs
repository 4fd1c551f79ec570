//! Per-modality residual encoder.
//!
//! The layer list, indexed the way NCE taps refer to it:
//!
//! ```text
//!  0      input (identity tap)
//!  1-3    7×7 conv, norm, ReLU          width w,  H×W
//!  4-6    3×3/2 conv, norm, ReLU        width 2w, H/2
//!  7-9    3×3/2 conv, norm, ReLU        width 4w, H/4
//! 10-18   residual blocks               width 4w, H/4
//! ```

use mafnet_autograd::{Graph, ParamStore, Var};
use rand::Rng;

use super::layers::{Conv, NORM_EPS};
use super::GeneratorConfig;

/// Taps at the configured NCE layers plus the bottleneck output.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g> {
    /// `(layer index, feature map)` in increasing layer order.
    pub taps: Vec<(usize, Var<'g>)>,
    pub bottleneck: Var<'g>,
}

impl<'g> FeaturePyramid<'g> {
    pub fn tap(&self, layer: usize) -> Option<Var<'g>> {
        self.taps.iter().find(|(l, _)| *l == layer).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    down: [Conv; 2],
    res: Vec<[Conv; 2]>,
    nce_layers: Vec<usize>,
}

impl Encoder {
    /// Number of addressable layers (taps 0..num_layers).
    pub fn num_layers(n_res_blocks: usize) -> usize {
        10 + n_res_blocks
    }

    pub fn new(prefix: &str, cfg: &GeneratorConfig) -> Self {
        let w = cfg.base_width;
        Self {
            stem: Conv::new(format!("{prefix}/stem"), 1, w, 7, 1, 3),
            down: [
                Conv::new(format!("{prefix}/down1"), w, 2 * w, 3, 2, 1),
                Conv::new(format!("{prefix}/down2"), 2 * w, 4 * w, 3, 2, 1),
            ],
            res: (0..cfg.n_res_blocks)
                .map(|i| {
                    [
                        Conv::same3(format!("{prefix}/res{i}/conv_a"), 4 * w, 4 * w),
                        Conv::same3(format!("{prefix}/res{i}/conv_b"), 4 * w, 4 * w),
                    ]
                })
                .collect(),
            nce_layers: cfg.nce_layers.clone(),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stem.init(store, rng);
        for c in &self.down {
            c.init(store, rng);
        }
        for [a, b] in &self.res {
            a.init(store, rng);
            b.init(store, rng);
        }
    }

    /// Channel count of each layer's output, by layer index.
    pub fn layer_channels(cfg: &GeneratorConfig, layer: usize) -> usize {
        let w = cfg.base_width;
        match layer {
            0 => 1,
            1..=3 => w,
            4..=6 => 2 * w,
            _ => 4 * w,
        }
    }

    /// Spatial downsampling factor of a layer's output.
    pub fn layer_stride(layer: usize) -> usize {
        match layer {
            0..=3 => 1,
            4..=6 => 2,
            _ => 4,
        }
    }

    /// `x` is `B×1×H×W`.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> FeaturePyramid<'g> {
        let mut taps = Vec::with_capacity(self.nce_layers.len());
        let mut record = |layer: usize, v: Var<'g>| {
            if self.nce_layers.contains(&layer) {
                taps.push((layer, v));
            }
        };
        record(0, x);
        let mut h = self.stem.forward(g, x);
        record(1, h);
        h = h.instance_norm(NORM_EPS);
        record(2, h);
        h = h.relu();
        record(3, h);
        for (i, conv) in self.down.iter().enumerate() {
            let base = 4 + 3 * i;
            h = conv.forward(g, h);
            record(base, h);
            h = h.instance_norm(NORM_EPS);
            record(base + 1, h);
            h = h.relu();
            record(base + 2, h);
        }
        for (i, [a, b]) in self.res.iter().enumerate() {
            let r = a.forward(g, h).instance_norm(NORM_EPS).relu();
            let r = b.forward(g, r).instance_norm(NORM_EPS);
            h = h.add(r);
            record(10 + i, h);
        }
        FeaturePyramid { taps, bottleneck: h }
    }
}
