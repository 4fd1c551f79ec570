//! Central finite-difference checks for graph gradients.
//!
//! The numeric side only evaluates the forward pass, so it shares no code
//! with the backward implementations it verifies.

use crate::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation half-width.
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so components
    /// whose true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Worst `|a - n| / max(|a|, |n|, floor)` over all components.
    pub max_rel_error: f64,
}

impl GradCheck {
    /// Compares `backward()` gradients of `f` against central differences
    /// with respect to every tensor in `inputs`.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> GradReport
    where
        F: for<'g> Fn(&'g Graph<'g>, &[Var<'g>]) -> Var<'g>,
    {
        let analytic: Vec<Tensor> = {
            let g = Graph::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let loss = f(&g, &vars);
            let grads = g.backward(loss);
            vars.iter()
                .zip(inputs)
                .map(|(v, t)| {
                    grads
                        .get(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                })
                .collect()
        };

        let eval = |perturbed: &[Tensor]| -> f64 {
            let g = Graph::new();
            let vars: Vec<Var<'_>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).item()
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut numeric = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
            for j in 0..inputs[i].numel() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + self.eps;
                let plus = eval(&work);
                work[i].data_mut()[j] = orig - self.eps;
                let minus = eval(&work);
                work[i].data_mut()[j] = orig;
                grad.data_mut()[j] = (plus - minus) / (2.0 * self.eps);
            }
            numeric.push(grad);
        }

        let max_rel_error = analytic
            .iter()
            .zip(&numeric)
            .flat_map(|(a, n)| a.data().iter().zip(n.data()))
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(self.floor))
            .fold(0.0, f64::max);

        GradReport {
            analytic,
            numeric,
            max_rel_error,
        }
    }
}
