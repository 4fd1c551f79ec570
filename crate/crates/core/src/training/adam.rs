//! Adam with one learning rate per parameter group.

use std::collections::BTreeMap;

use mafnet_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

/// Optimizer group, chosen by the first component of a parameter name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Generator,
    Head,
    Discriminator,
    Segmentor,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Generator, Self::Head, Self::Discriminator, Self::Segmentor];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Generator => "gen",
            Self::Head => "head",
            Self::Discriminator => "disc",
            Self::Segmentor => "seg",
        }
    }

    pub fn of(name: &str) -> Option<Self> {
        let top = name.split('/').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == top)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub generator: f64,
    pub head: f64,
    pub discriminator: f64,
    pub segmentor: f64,
}

impl GroupRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Generator => self.generator,
            ParamGroup::Head => self.head,
            ParamGroup::Discriminator => self.discriminator,
            ParamGroup::Segmentor => self.segmentor,
        }
    }
}

/// First and second moments plus the per-tensor update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub rates: GroupRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(rates: GroupRates, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            rates,
            beta1,
            beta2,
            eps,
            moments: BTreeMap::new(),
        }
    }

    /// Learning rate applied to `name`; panics on names outside the four groups.
    pub fn lr_for(&self, name: &str) -> f64 {
        let group = ParamGroup::of(name).unwrap_or_else(|| panic!("`{name}` belongs to no optimizer group"));
        self.rates.get(group)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let lr = self.lr_for(name);
            let slot = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape().to_vec()),
                v: Tensor::zeros(grad.shape().to_vec()),
                t: 0,
            });
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powi(slot.t as i32);
            let c2 = 1.0 - self.beta2.powi(slot.t as i32);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_from_names() {
        assert_eq!(ParamGroup::of("gen/enc0/stem/weight"), Some(ParamGroup::Generator));
        assert_eq!(ParamGroup::of("head/enc1/layer4/fc1/bias"), Some(ParamGroup::Head));
        assert_eq!(ParamGroup::of("disc/conv0/weight"), Some(ParamGroup::Discriminator));
        assert_eq!(ParamGroup::of("seg/unet/head/weight"), Some(ParamGroup::Segmentor));
        assert_eq!(ParamGroup::of("generator/x"), None);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr·sign(g) up to eps.
        let rates = GroupRates {
            generator: 0.1,
            head: 0.2,
            discriminator: 0.3,
            segmentor: 0.4,
        };
        let mut adam = Adam::new(rates, 0.5, 0.999, 1e-12);
        let mut params: ParamStore = ParamGroup::ALL
            .iter()
            .map(|g| (format!("{}/w", g.prefix()), Tensor::zeros(vec![2])))
            .collect();
        let grads: BTreeMap<String, Tensor> = params
            .names()
            .map(|n| (n.to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()))
            .collect();
        adam.step(&mut params, &grads);
        for g in ParamGroup::ALL {
            let p = params.get(&format!("{}/w", g.prefix())).unwrap();
            let lr = rates.get(g);
            assert!((p.data()[0] + lr).abs() < 1e-9);
            assert!((p.data()[1] - lr).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_reference_recurrence() {
        let rates = GroupRates {
            generator: 0.01,
            head: 0.01,
            discriminator: 0.01,
            segmentor: 0.01,
        };
        let mut adam = Adam::new(rates, 0.5, 0.999, 1e-8);
        let mut params: ParamStore = [("gen/w".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * p;
            let grads = BTreeMap::from([("gen/w".to_string(), Tensor::scalar(g))]);
            adam.step(&mut params, &grads);
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(params.get("gen/w").unwrap().item(), p);
        }
    }
}
