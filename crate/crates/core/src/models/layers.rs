use mafnet_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// A square 2D convolution with bias, stored as `<name>/weight`, `<name>/bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    /// Same-size 3×3.
    pub fn same3(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(name, c_in, c_out, 3, 1, 1)
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.weight_name(),
            normal_tensor(vec![self.c_out, self.c_in, self.k, self.k], rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(vec![self.c_out]));
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let w = g.param(&self.weight_name());
        let b = g.param(&self.bias_name());
        x.conv2d(w, Some(b), self.stride, self.pad)
    }
}

/// Fully connected layer on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(format!("{}/weight", self.name), normal_tensor(vec![self.d_in, self.d_out], rng));
        store.insert(format!("{}/bias", self.name), Tensor::zeros(vec![self.d_out]));
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let w = g.param(&format!("{}/weight", self.name));
        let b = g.param(&format!("{}/bias", self.name));
        x.matmul(w).add_row_bias(b)
    }
}

pub fn normal_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// conv → instance norm → ReLU
pub fn conv_norm_relu<'g>(g: &'g Graph<'g>, conv: &Conv, x: Var<'g>) -> Var<'g> {
    conv.forward(g, x).instance_norm(NORM_EPS).relu()
}
