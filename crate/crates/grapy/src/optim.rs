use std::collections::BTreeMap;

use crate::params::{ParamError, ParamStore};
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
///
/// With a clip norm set, the gradients of one step are first rescaled so
/// their joint L2 norm is at most that value.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    clip_norm: Option<f64>,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            clip_norm: None,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm.filter(|c| *c > 0.0);
        self
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn clip_norm(&self) -> Option<f64> {
        self.clip_norm
    }

    /// Factor applied to `grads` before the update.
    pub fn clip_factor(&self, grads: &BTreeMap<String, Tensor>) -> f64 {
        let Some(max) = self.clip_norm else { return 1.0 };
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max {
            max / norm
        } else {
            1.0
        }
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient are left untouched, momentum included.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), ParamError> {
        let factor = self.clip_factor(grads);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + factor * gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Constant learning rate with a single multiplicative step decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            decay_epoch: usize::MAX,
            decay_factor: 1.0,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.base * self.decay_factor
        } else {
            self.base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = one("w", 0.3);
        let before = p.clone();
        Sgd::new(0.9).step(&mut p, &grad("w", 5.0), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn plain_step() {
        let mut p = one("w", 1.0);
        Sgd::new(0.0).step(&mut p, &grad("w", 2.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        // p0 = 1, g1 = 2, g2 = -1, lr = 0.1, mu = 0.9
        // v1 = 2,            p1 = 1 - 0.2 = 0.8
        // v2 = 0.9*2 - 1 = 0.8, p2 = 0.8 - 0.08 = 0.72
        let mut p = one("w", 1.0);
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut p, &grad("w", 2.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
        sgd.step(&mut p, &grad("w", -1.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_joint_norm() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(0.0)).unwrap();
        p.insert("b", Tensor::scalar(0.0)).unwrap();
        let g = BTreeMap::from([
            ("a".to_string(), Tensor::scalar(3.0)),
            ("b".to_string(), Tensor::scalar(4.0)),
        ]);
        Sgd::new(0.0).with_clip_norm(Some(1.0)).step(&mut p, &g, 1.0).unwrap();
        assert!((p.get("a").unwrap().item() + 0.6).abs() < 1e-15);
        assert!((p.get("b").unwrap().item() + 0.8).abs() < 1e-15);
        let mut q = one("w", 0.0);
        Sgd::new(0.0).with_clip_norm(Some(10.0)).step(&mut q, &grad("w", 2.0), 1.0).unwrap();
        assert_eq!(q.get("w").unwrap().item(), -2.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = one("w", 1.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(
            Sgd::new(0.0).step(&mut p, &g, 0.1),
            Err(ParamError::Shape { .. })
        ));
    }

    #[test]
    fn schedule_decays_once() {
        let s = LrSchedule {
            base: 0.1,
            decay_epoch: 3,
            decay_factor: 0.1,
        };
        assert_eq!(s.at(2), 0.1);
        assert!((s.at(3) - 0.01).abs() < 1e-15);
        assert!((s.at(100) - 0.01).abs() < 1e-15);
    }
}
