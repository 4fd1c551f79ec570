use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::{ParamStore, Tensor};

/// How a node was produced, with whatever the backward pass needs.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulChannel {
        att: usize,
        feat: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        c_out: usize,
    },
    Upsample2x(usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    SoftmaxChannels(usize),
    GatherPositions {
        x: usize,
        batch: usize,
        positions: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    AddRowBias {
        x: usize,
        bias: usize,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
        spatial: usize,
    },
    BceWithLogits {
        x: usize,
        target: f64,
    },
    Mean(usize),
    Sum(usize),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A recording of tensor operations that can be differentiated in reverse.
pub struct Graph<'s> {
    params: Option<&'s ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_ids: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph<'g>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_ids: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn with_params(params: &'s ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tensor that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Leaf, false);
        self.var(id)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Leaf, true);
        self.var(id)
    }

    /// The named parameter as a tracked leaf; repeated calls share one node.
    ///
    /// Panics if the graph has no store or the name is unknown, both of which
    /// indicate a model wiring bug.
    pub fn param(&self, name: &str) -> Var<'_> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return self.var(id);
        }
        let store = self.params.expect("graph was built without a parameter store");
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let id = self.push(value, Op::Leaf, true);
        self.param_ids.borrow_mut().insert(name.to_string(), id);
        self.var(id)
    }

    /// Registers every tensor in `store` under its name, shadowing the
    /// graph's own store. Untracked bindings act as constants: gradients
    /// still flow through them to other inputs but are not collected for
    /// the bound tensors themselves.
    pub fn bind_params(&self, store: &ParamStore, tracked: bool) {
        for (name, value) in store.iter() {
            let id = self.push(value.clone(), Op::Leaf, tracked);
            self.param_ids.borrow_mut().insert(name.to_string(), id);
        }
    }

    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.id].value)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backward_node(&nodes, node, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        let params = self
            .param_ids
            .borrow()
            .iter()
            .filter_map(|(name, &id)| {
                grads
                    .get(id)
                    .and_then(|g| g.clone())
                    .map(|g| (name.clone(), g))
            })
            .collect();
        Gradients { by_id: grads, params }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_id: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backward_node(nodes: &[Node], node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].needs_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, dy.clone());
            accumulate(grads, nodes, *b, dy.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, dy.clone());
            accumulate(grads, nodes, *b, dy.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let g = zip_map(dy, val(*b), |d, bv| d * bv);
                accumulate(grads, nodes, *a, g);
            }
            if needs(*b) {
                let g = zip_map(dy, val(*a), |d, av| d * av);
                accumulate(grads, nodes, *b, g);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, dy.map(|v| v * s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, dy.clone()),
        Op::MulChannel { att, feat } => {
            let (bsz, c, h, w) = val(*feat).nchw();
            let hw = h * w;
            let a = val(*att).data();
            let f = val(*feat).data();
            let d = dy.data();
            if needs(*feat) {
                let mut g = vec![0.0; d.len()];
                for b in 0..bsz {
                    let ab = &a[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in 0..hw {
                            g[off + i] = d[off + i] * ab[i];
                        }
                    }
                }
                accumulate(grads, nodes, *feat, Tensor::new(vec![bsz, c, h, w], g).unwrap());
            }
            if needs(*att) {
                let mut g = vec![0.0; bsz * hw];
                for b in 0..bsz {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in 0..hw {
                            g[b * hw + i] += d[off + i] * f[off + i];
                        }
                    }
                }
                accumulate(grads, nodes, *att, Tensor::new(vec![bsz, 1, h, w], g).unwrap());
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            c_out,
        } => {
            let xv = val(*x);
            let wv = val(*w);
            let batch = xv.dim(0);
            let mut dx = needs(*x).then(|| Tensor::zeros(xv.shape().to_vec()));
            let mut dw = needs(*w).then(|| Tensor::zeros(wv.shape().to_vec()));
            let mut db = b
                .filter(|&bid| needs(bid))
                .map(|bid| Tensor::zeros(val(bid).shape().to_vec()));
            kernels::conv2d_backward(
                xv.data(),
                batch,
                geom,
                wv.data(),
                *c_out,
                dy.data(),
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            if let Some(g) = dx {
                accumulate(grads, nodes, *x, g);
            }
            if let Some(g) = dw {
                accumulate(grads, nodes, *w, g);
            }
            if let (Some(g), Some(bid)) = (db, b) {
                accumulate(grads, nodes, *bid, g);
            }
        }
        Op::Upsample2x(x) => {
            let (bsz, c, h, w) = val(*x).nchw();
            let d = dy.data();
            let mut g = vec![0.0; bsz * c * h * w];
            let w2 = 2 * w;
            for p in 0..bsz * c {
                for i in 0..h {
                    for j in 0..w {
                        let base = p * 4 * h * w;
                        g[(p * h + i) * w + j] = d[base + (2 * i) * w2 + 2 * j]
                            + d[base + (2 * i) * w2 + 2 * j + 1]
                            + d[base + (2 * i + 1) * w2 + 2 * j]
                            + d[base + (2 * i + 1) * w2 + 2 * j + 1];
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![bsz, c, h, w], g).unwrap());
        }
        Op::MaxPool2 { x, argmax } => {
            let mut g = Tensor::zeros(val(*x).shape().to_vec());
            let gd = g.data_mut();
            for (o, &src) in argmax.iter().enumerate() {
                gd[src] += dy.data()[o];
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::InstanceNorm { x, xhat, inv_std } => {
            let (bsz, c, h, w) = val(*x).nchw();
            let n = h * w;
            let nf = n as f64;
            let d = dy.data();
            let mut g = vec![0.0; d.len()];
            for p in 0..bsz * c {
                let range = p * n..(p + 1) * n;
                let dp = &d[range.clone()];
                let xh = &xhat[range.clone()];
                let sum_d: f64 = dp.iter().sum();
                let sum_dx: f64 = dp.iter().zip(xh).map(|(a, b)| a * b).sum();
                let k = inv_std[p] / nf;
                for (i, gi) in g[range].iter_mut().enumerate() {
                    *gi = k * (nf * dp[i] - sum_d - xh[i] * sum_dx);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![bsz, c, h, w], g).unwrap());
        }
        Op::Relu(x) => {
            let g = zip_map(dy, y, |d, o| if o > 0.0 { d } else { 0.0 });
            accumulate(grads, nodes, *x, g);
        }
        Op::LeakyRelu(x, slope) => {
            let g = zip_map(dy, val(*x), |d, i| if i > 0.0 { d } else { d * slope });
            accumulate(grads, nodes, *x, g);
        }
        Op::Tanh(x) => {
            let g = zip_map(dy, y, |d, o| d * (1.0 - o * o));
            accumulate(grads, nodes, *x, g);
        }
        Op::Sigmoid(x) => {
            let g = zip_map(dy, y, |d, o| d * o * (1.0 - o));
            accumulate(grads, nodes, *x, g);
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let total = y.dim(*axis);
            let mut offset = 0;
            for &id in inputs {
                let len = val(id).dim(*axis);
                if needs(id) {
                    let mut g = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&dy.data()[start..start + len * inner]);
                    }
                    accumulate(grads, nodes, id, Tensor::new(val(id).shape().to_vec(), g).unwrap());
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let (outer, total, inner) = split_axis(&xs, *axis);
            let len = y.dim(*axis);
            let mut g = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
            }
            accumulate(grads, nodes, *x, Tensor::new(xs, g).unwrap());
        }
        Op::SoftmaxChannels(x) => {
            let (bsz, c, h, w) = y.nchw();
            let hw = h * w;
            let (yd, d) = (y.data(), dy.data());
            let mut g = vec![0.0; yd.len()];
            for b in 0..bsz {
                for i in 0..hw {
                    let dot: f64 = (0..c)
                        .map(|ch| {
                            let k = (b * c + ch) * hw + i;
                            yd[k] * d[k]
                        })
                        .sum();
                    for ch in 0..c {
                        let k = (b * c + ch) * hw + i;
                        g[k] = yd[k] * (d[k] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![bsz, c, h, w], g).unwrap());
        }
        Op::GatherPositions {
            x,
            batch,
            positions,
        } => {
            let (bsz, c, h, w) = val(*x).nchw();
            let hw = h * w;
            let mut g = vec![0.0; bsz * c * hw];
            let d = dy.data();
            for (r, &pos) in positions.iter().enumerate() {
                for ch in 0..c {
                    g[(batch * c + ch) * hw + pos] += d[r * c + ch];
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![bsz, c, h, w], g).unwrap());
        }
        Op::MatMul { a, b, trans_b } => {
            let av = val(*a);
            let bv = val(*b);
            let (m, k) = (av.dim(0), av.dim(1));
            let n = y.dim(1);
            if needs(*a) {
                // dA = dY · op(B)ᵀ
                let mut g = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, dy.data(), false, bv.data(), !*trans_b, 0.0, &mut g);
                accumulate(grads, nodes, *a, Tensor::new(vec![m, k], g).unwrap());
            }
            if needs(*b) {
                let mut g = vec![0.0; k * n];
                if *trans_b {
                    // B is n×k: dB = dYᵀ · A
                    kernels::gemm(n, m, k, 1.0, dy.data(), true, av.data(), false, 0.0, &mut g);
                    accumulate(grads, nodes, *b, Tensor::new(vec![n, k], g).unwrap());
                } else {
                    kernels::gemm(k, m, n, 1.0, av.data(), true, dy.data(), false, 0.0, &mut g);
                    accumulate(grads, nodes, *b, Tensor::new(vec![k, n], g).unwrap());
                }
            }
        }
        Op::AddRowBias { x, bias } => {
            accumulate(grads, nodes, *x, dy.clone());
            if needs(*bias) {
                let d = dy.dim(1);
                let mut g = vec![0.0; d];
                for row in dy.data().chunks(d) {
                    for (gi, v) in g.iter_mut().zip(row) {
                        *gi += v;
                    }
                }
                accumulate(grads, nodes, *bias, Tensor::new(vec![d], g).unwrap());
            }
        }
        Op::NormalizeRows { x, norms } => {
            let d = y.dim(1);
            let mut g = vec![0.0; y.numel()];
            for (r, norm) in norms.iter().enumerate() {
                let yr = &y.data()[r * d..(r + 1) * d];
                let dr = &dy.data()[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    g[r * d + i] = (dr[i] - yr[i] * dot) / norm;
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(y.shape().to_vec(), g).unwrap());
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            classes,
            spatial,
        } => {
            let scale = dy.item() / targets.len() as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (j, &t) in targets.iter().enumerate() {
                let (n, s) = (j / spatial, j % spatial);
                g[(n * classes + t) * spatial + s] -= scale;
            }
            accumulate(grads, nodes, *logits, Tensor::new(val(*logits).shape().to_vec(), g).unwrap());
        }
        Op::BceWithLogits { x, target } => {
            let xv = val(*x);
            let scale = dy.item() / xv.numel() as f64;
            let g = xv.map(|v| (sigmoid(v) - target) * scale);
            accumulate(grads, nodes, *x, g);
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let v = dy.item() / xv.numel() as f64;
            accumulate(grads, nodes, *x, Tensor::full(xv.shape().to_vec(), v));
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accumulate(grads, nodes, *x, Tensor::full(xv.shape().to_vec(), dy.item()));
        }
        Op::Reshape(x) => {
            let g = dy.clone().reshape(val(*x).shape().to_vec()).unwrap();
            accumulate(grads, nodes, *x, g);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(v)) without overflow.
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value; panics unless the node holds exactly one element.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(self.id);
        let id = self.graph.push(value, op, needs);
        self.graph.var(id)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        let id = self.graph.push(value, op, needs);
        self.graph.var(id)
    }

    /// Same values, no gradient path.
    pub fn detach(&self) -> Var<'g> {
        let v = (*self.value()).clone();
        let id = self.graph.push(v, Op::Leaf, false);
        self.graph.var(id)
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let v = zip_map(&self.value(), &other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let v = zip_map(&self.value(), &other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let v = zip_map(&self.value(), &other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|a| a + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `self` is `B×1×H×W`, broadcast across the channels of `feat` (`B×C×H×W`).
    pub fn mul_channels(&self, feat: Var<'g>) -> Var<'g> {
        let att = self.value();
        let f = feat.value();
        let (bsz, c, h, w) = f.nchw();
        assert_eq!(att.shape(), [bsz, 1, h, w], "attention map shape");
        let hw = h * w;
        let mut out = vec![0.0; f.numel()];
        for b in 0..bsz {
            let ab = &att.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    out[off + i] = f.data()[off + i] * ab[i];
                }
            }
        }
        let v = Tensor::new(f.shape().to_vec(), out).unwrap();
        self.binary(
            feat,
            v,
            Op::MulChannel {
                att: self.id,
                feat: feat.id,
            },
        )
    }

    /// 2D convolution with zero padding. `weight` is `C_out×C_in×k×k`.
    pub fn conv2d(&self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (bsz, c_in, h, wd) = x.nchw();
        let (c_out, wc_in, k, k2) = w.nchw();
        assert_eq!(c_in, wc_in, "conv2d input channels {c_in} vs weight {wc_in}");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad)
            .unwrap_or_else(|| panic!("conv2d kernel {k} does not fit {h}x{wd} with pad {pad}"));
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(
            x.data(),
            bsz,
            &geom,
            w.data(),
            bias_val.as_ref().map(|b| b.data()),
            c_out,
        );
        let v = Tensor::new(vec![bsz, c_out, geom.h_out, geom.w_out], out).unwrap();
        let g = self.graph;
        let needs = g.needs(self.id) || g.needs(weight.id) || bias.is_some_and(|b| g.needs(b.id));
        let id = g.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                c_out,
            },
            needs,
        );
        g.var(id)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&self) -> Var<'g> {
        let x = self.value();
        let (bsz, c, h, w) = x.nchw();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; bsz * c * h2 * w2];
        for p in 0..bsz * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[(p * h2 + i) * w2 + j] = x.data()[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, h2, w2], out).unwrap();
        self.unary(v, Op::Upsample2x(self.id))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn max_pool2(&self) -> Var<'g> {
        let x = self.value();
        let (bsz, c, h, w) = x.nchw();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(bsz * c * ho * wo);
        let mut argmax = Vec::with_capacity(bsz * c * ho * wo);
        let d = x.data();
        for p in 0..bsz * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = (p * h + 2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = (p * h + 2 * i + di) * w + 2 * j + dj;
                        if d[k] > d[best] {
                            best = k;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, ho, wo], out).unwrap();
        self.unary(v, Op::MaxPool2 { x: self.id, argmax })
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&self, eps: f64) -> Var<'g> {
        let x = self.value();
        let (bsz, c, h, w) = x.nchw();
        let n = h * w;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(bsz * c);
        for (p, plane) in x.data().chunks(n).enumerate() {
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (i, v) in plane.iter().enumerate() {
                xhat[p * n + i] = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(vec![bsz, c, h, w], xhat.clone()).unwrap();
        self.unary(
            v,
            Op::InstanceNorm {
                x: self.id,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value().map(|a| a.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let v = self.value().map(|a| if a > 0.0 { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape element count");
        self.unary(v, Op::Reshape(self.id))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let (outer, total, inner) = split_axis(x.shape(), axis);
        assert!(start + len <= total, "narrow {start}+{len} exceeds axis length {total}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out).unwrap();
        self.unary(
            v,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Softmax across axis 1 of an NCHW tensor, independently per (n, h, w).
    pub fn softmax_channels(&self) -> Var<'g> {
        let x = self.value();
        let (bsz, c, h, w) = x.nchw();
        let hw = h * w;
        let d = x.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..bsz {
            for i in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + i;
                let max = (0..c).map(|ch| d[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (d[idx(ch)] - max).exp();
                    out[idx(ch)] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[idx(ch)] /= total;
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, h, w], out).unwrap();
        self.unary(v, Op::SoftmaxChannels(self.id))
    }

    /// Feature vectors of sample `batch` at flattened spatial `positions`,
    /// as a `P×C` matrix.
    pub fn gather_positions(&self, batch: usize, positions: &[usize]) -> Var<'g> {
        let x = self.value();
        let (bsz, c, h, w) = x.nchw();
        assert!(batch < bsz);
        let hw = h * w;
        let mut out = Vec::with_capacity(positions.len() * c);
        for &pos in positions {
            assert!(pos < hw, "position {pos} outside {h}x{w}");
            for ch in 0..c {
                out.push(x.data()[(batch * c + ch) * hw + pos]);
            }
        }
        let v = Tensor::new(vec![positions.len(), c], out).unwrap();
        self.unary(
            v,
            Op::GatherPositions {
                x: self.id,
                batch,
                positions: positions.to_vec(),
            },
        )
    }

    /// `self · other` for 2D operands.
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` for 2D operands.
    pub fn matmul_t(&self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: Var<'g>, trans_b: bool) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.rank(), 2);
        assert_eq!(b.rank(), 2);
        let (m, k) = (a.dim(0), a.dim(1));
        let (bk, n) = if trans_b { (b.dim(1), b.dim(0)) } else { (b.dim(0), b.dim(1)) };
        assert_eq!(k, bk, "matmul inner dimensions {k} vs {bk}");
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, a.data(), false, b.data(), trans_b, 0.0, &mut out);
        let v = Tensor::new(vec![m, n], out).unwrap();
        self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
        )
    }

    /// Adds a length-`D` bias to every row of an `N×D` matrix.
    pub fn add_row_bias(&self, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let d = x.dim(1);
        assert_eq!(b.shape(), [d]);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.binary(
            bias,
            v,
            Op::AddRowBias {
                x: self.id,
                bias: bias.id,
            },
        )
    }

    /// Scales each row of an `N×D` matrix to unit Euclidean norm.
    ///
    /// Rows with norm below `floor` are divided by `floor` instead.
    pub fn normalize_rows(&self, floor: f64) -> Var<'g> {
        let x = self.value();
        let d = x.dim(1);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.dim(0));
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.unary(v, Op::NormalizeRows { x: self.id, norms })
    }

    /// Mean softmax cross-entropy.
    ///
    /// `self` is either `N×C` (one row per sample) or `B×C×H×W` (one
    /// distribution per pixel); `targets` holds one class index per row or
    /// per pixel in row-major `(b, h, w)` order.
    pub fn cross_entropy(&self, targets: &[usize]) -> Var<'g> {
        let x = self.value();
        let (n, classes, spatial) = match x.rank() {
            2 => (x.dim(0), x.dim(1), 1),
            4 => {
                let (b, c, h, w) = x.nchw();
                (b, c, h * w)
            }
            r => panic!("cross_entropy expects rank 2 or 4, got {r}"),
        };
        assert_eq!(targets.len(), n * spatial, "one target per distribution");
        let d = x.data();
        let mut probs = vec![0.0; d.len()];
        let mut total = 0.0;
        for (j, &t) in targets.iter().enumerate() {
            assert!(t < classes, "class {t} out of range {classes}");
            let (b, s) = (j / spatial, j % spatial);
            let idx = |c: usize| (b * classes + c) * spatial + s;
            let max = (0..classes).map(|c| d[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|c| (d[idx(c)] - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..classes {
                probs[idx(c)] = (d[idx(c)] - lse).exp();
            }
            total += lse - d[idx(t)];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                classes,
                spatial,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against a constant target.
    pub fn bce_with_logits(&self, target: f64) -> Var<'g> {
        let x = self.value();
        let total: f64 = x.data().iter().map(|&v| softplus(v) - v * target).sum();
        let v = Tensor::scalar(total / x.numel() as f64);
        self.unary(
            v,
            Op::BceWithLogits {
                x: self.id,
                target,
            },
        )
    }

    pub fn mean(&self) -> Var<'g> {
        let x = self.value();
        let v = Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum(self.id))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    let g = parts[0].graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let mut shape = values[0].shape().to_vec();
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut total = 0;
    for v in &values {
        let mut s = v.shape().to_vec();
        total += s[axis];
        s[axis] = shape[axis];
        assert_eq!(s, shape, "concat shapes disagree off-axis");
    }
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.dim(axis) * inner;
            out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let needs = parts.iter().any(|p| g.needs(p.id));
    let id = g.push(
        Tensor::new(shape, out).unwrap(),
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        needs,
    );
    g.var(id)
}

impl<'s> Graph<'s> {
    /// See [`concat`].
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        concat(parts, axis)
    }
}
