//! AdamW with decoupled weight decay, two learning-rate groups and the
//! warmup-then-linear-decay schedule.

use kvlp_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, Group, ParamStore};

/// Piecewise-linear multiplier: 0 at step 0, 1 at the end of warmup, 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Self {
        Schedule {
            total_steps,
            warmup_fraction,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn factor(&self, step: usize) -> f64 {
        let (total, warm) = (self.total_steps, self.warmup_steps());
        if step >= total {
            0.0
        } else if step < warm {
            step as f64 / warm as f64
        } else {
            (total - step) as f64 / (total - warm) as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_encoder: 1e-3,
            lr_rest: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn peak_lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.lr_encoder,
            Group::Rest => self.lr_rest,
        }
    }
}

/// Moment estimates for every parameter (zero-sized for frozen ones).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = |trainable: bool, shape: &[usize]| {
            if trainable {
                Tensor::zeros(shape.to_vec())
            } else {
                Tensor::zeros([0])
            }
        };
        let m: Vec<Tensor<T>> = store.iter().map(|(_, p)| zeros(p.trainable, p.value.shape())).collect();
        AdamW {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update with `lr = peak(group) · factor`. Missing gradients count as
    /// zero. Parameters in `frozen` groups are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, factor: f64, frozen: &[Group]) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Argument("optimizer state does not match the parameter store".into()));
        }
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable || frozen.contains(&p.group) {
                continue;
            }
            let lr = T::lit(c.peak_lr(p.group) * factor);
            let shrink = if p.decay {
                T::one() - lr * T::lit(c.weight_decay)
            } else {
                T::one()
            };
            let g = grads.get(id);
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.value_mut(id).data_mut();
            for k in 0..theta.len() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let upd = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                theta[k] = theta[k] * shrink - lr * upd;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(100, 0.1);
        assert_eq!(s.factor(0), 0.0);
        assert_eq!(s.factor(5), 0.5);
        assert_eq!(s.factor(10), 1.0);
        assert_eq!(s.factor(55), 0.5);
        assert_eq!(s.factor(100), 0.0);
        assert!((0..100).all(|i| s.factor(i) <= 1.0));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full([2, 2], 0.5), Group::Rest, true);
        let before = store.value(id).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut g = Grads::new(store.len());
        g.accumulate(id, &Tensor::full([2, 2], 1.0));
        opt.step(&mut store, &g, 0.0, &[]).unwrap();
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn decay_is_decoupled_and_multiplicative() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full([3], 2.0), Group::Rest, true);
        let b = store.add("b", Tensor::full([3], 2.0), Group::Rest, false);
        let cfg = AdamWConfig {
            lr_rest: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let g = Grads::new(store.len());
        for k in 1..=3 {
            opt.step(&mut store, &g, 1.0, &[]).unwrap();
            let expect = 2.0 * (1.0f64 - 0.1 * 0.5).powi(k);
            assert!(store.value(w).data().iter().all(|&x| (x - expect).abs() < 1e-15));
            assert_eq!(store.value(b).data(), &[2.0; 3]);
        }
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut store = ParamStore::<f64>::new();
        let e = store.add("e", Tensor::zeros([1]), Group::Encoder, false);
        let r = store.add("r", Tensor::zeros([1]), Group::Rest, false);
        let cfg = AdamWConfig {
            lr_encoder: 0.01,
            lr_rest: 0.05,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = Grads::new(store.len());
        g.accumulate(e, &Tensor::full([1], 1.0));
        g.accumulate(r, &Tensor::full([1], 1.0));
        opt.step(&mut store, &g, 1.0, &[]).unwrap();
        // First Adam step moves by lr · g/(|g| + eps).
        assert!((store.value(e).item() + 0.01).abs() < 1e-9);
        assert!((store.value(r).item() + 0.05).abs() < 1e-9);
        opt.step(&mut store, &g, 1.0, &[Group::Encoder]).unwrap();
        assert!((store.value(e).item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros([2]), Group::Rest, false);
        let mut g = Grads::new(store.len());
        g.accumulate(a, &Tensor::from_vec([2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0f64).abs() < 1e-12);
    }
}
