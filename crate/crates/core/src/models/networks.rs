//! Decoder, patch discriminator, projection heads and segmentation UNet.

use mafnet_autograd::{Graph, ParamStore, Var};
use rand::Rng;

use super::layers::{conv_norm_relu, Conv, Linear, LEAKY_SLOPE, NORM_EPS};

/// Two nearest-upsample + 3×3 conv stages, then a 7×7 conv and tanh.
#[derive(Clone, Debug)]
pub struct Decoder {
    up: [Conv; 2],
    out: Conv,
}

impl Decoder {
    pub fn new(prefix: &str, base_width: usize) -> Self {
        let w = base_width;
        Self {
            up: [
                Conv::same3(format!("{prefix}/up1"), 4 * w, 2 * w),
                Conv::same3(format!("{prefix}/up2"), 2 * w, w),
            ],
            out: Conv::new(format!("{prefix}/out"), w, 1, 7, 1, 3),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in &self.up {
            c.init(store, rng);
        }
        self.out.init(store, rng);
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, fused: Var<'g>) -> Var<'g> {
        let mut h = fused;
        for conv in &self.up {
            h = conv_norm_relu(g, conv, h.upsample2x());
        }
        self.out.forward(g, h).tanh()
    }
}

/// PatchGAN discriminator: three stride-2 4×4 convs, one stride-1, then a
/// one-channel stride-1 head. Each logit sees a 70×70 input window.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Conv>,
    head: Conv,
}

impl Discriminator {
    pub fn new(prefix: &str, base_width: usize) -> Self {
        let w = base_width;
        let widths = [(1, w, 2), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 8 * w, 1)];
        Self {
            layers: widths
                .iter()
                .enumerate()
                .map(|(i, &(ci, co, s))| Conv::new(format!("{prefix}/conv{i}"), ci, co, 4, s, 1))
                .collect(),
            head: Conv::new(format!("{prefix}/head"), 8 * w, 1, 4, 1, 1),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in &self.layers {
            c.init(store, rng);
        }
        self.head.init(store, rng);
    }

    /// Smallest side that leaves a logit map after three stride-2 layers
    /// and two 4×4 valid-size layers.
    pub const MIN_INPUT: usize = 24;

    /// Logit map, `B×1×h×w`.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, img: Var<'g>) -> Var<'g> {
        let mut h = img;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(g, h);
            if i > 0 {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.leaky_relu(LEAKY_SLOPE);
        }
        self.head.forward(g, h)
    }

    /// Receptive field of one output logit, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = self.head.k;
        for conv in self.layers.iter().rev() {
            rf = (rf - 1) * conv.stride + conv.k;
        }
        rf
    }
}

/// Two-layer MLP with unit-norm output: `C_l → hidden → out`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(prefix: &str, d_in: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{prefix}/fc1"), d_in, hidden),
            fc2: Linear::new(format!("{prefix}/fc2"), hidden, out),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    /// Rows of `x` (`P×C_l`) to unit-norm embeddings (`P×out`).
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.fc1.forward(g, x).relu();
        self.fc2.forward(g, h).normalize_rows(1e-12)
    }
}

/// Encoder–decoder with skip connections; per-pixel class logits.
#[derive(Clone, Debug)]
pub struct UNet {
    down: Vec<[Conv; 2]>,
    bottom: [Conv; 2],
    /// (channel-reducing conv after upsampling, double conv after concat)
    up: Vec<(Conv, [Conv; 2])>,
    head: Conv,
}

impl UNet {
    pub fn new(prefix: &str, in_channels: usize, classes: usize, base_width: usize, depth: usize) -> Self {
        let width = |level: usize| base_width << level;
        let double = |name: String, ci: usize, co: usize| {
            [
                Conv::same3(format!("{name}/conv_a"), ci, co),
                Conv::same3(format!("{name}/conv_b"), co, co),
            ]
        };
        let down = (0..depth)
            .map(|l| {
                let ci = if l == 0 { in_channels } else { width(l - 1) };
                double(format!("{prefix}/down{l}"), ci, width(l))
            })
            .collect();
        let bottom_in = if depth == 0 { in_channels } else { width(depth - 1) };
        let bottom = double(format!("{prefix}/bottom"), bottom_in, width(depth));
        let up = (0..depth)
            .rev()
            .map(|l| {
                (
                    Conv::same3(format!("{prefix}/up{l}/reduce"), width(l + 1), width(l)),
                    double(format!("{prefix}/up{l}"), 2 * width(l), width(l)),
                )
            })
            .collect();
        Self {
            down,
            bottom,
            up,
            head: Conv::new(format!("{prefix}/head"), base_width, classes, 1, 1, 0),
        }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for [a, b] in &self.down {
            a.init(store, rng);
            b.init(store, rng);
        }
        self.bottom[0].init(store, rng);
        self.bottom[1].init(store, rng);
        for (r, [a, b]) in &self.up {
            r.init(store, rng);
            a.init(store, rng);
            b.init(store, rng);
        }
        self.head.init(store, rng);
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let double = |convs: &[Conv; 2], h: Var<'g>| {
            let h = conv_norm_relu(g, &convs[0], h);
            conv_norm_relu(g, &convs[1], h)
        };
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for convs in &self.down {
            h = double(convs, h);
            skips.push(h);
            h = h.max_pool2();
        }
        h = double(&self.bottom, h);
        for ((reduce, convs), skip) in self.up.iter().zip(skips.iter().rev()) {
            let u = conv_norm_relu(g, reduce, h.upsample2x());
            h = double(convs, g.concat(&[*skip, u], 1));
        }
        self.head.forward(g, h)
    }
}
