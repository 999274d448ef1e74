use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

fn check_store<T: Real>(params: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    if grads.store() != params.id() {
        return Err(Error::ForeignGradients {
            expected: params.id().0,
            found: grads.store().0,
        });
    }
    grads.check_finite(&format!("store {}", params.id().0))
}

fn zeros_like<T: Real>(params: &ParamStore<T>) -> Vec<Tensor<T>> {
    params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
}

/// Heavy-ball momentum SGD: `v = μ·v + g; p -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>, lr: T, momentum: T) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: zeros_like(params),
        }
    }

    /// Applies one update. Errors (and leaves `params` untouched) on foreign
    /// or non-finite gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        check_store(params, grads)?;
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let vel = self.velocity[i].data_mut();
            match grads.get(id) {
                Some(g) => {
                    for (v, &gv) in vel.iter_mut().zip(g.data()) {
                        *v = self.momentum * *v + gv;
                    }
                }
                None => {
                    for v in vel.iter_mut() {
                        *v = self.momentum * *v;
                    }
                }
            }
            let p = params.get_mut(id).data_mut();
            for (pv, &v) in p.iter_mut().zip(vel.iter()) {
                *pv = *pv - self.lr * v;
            }
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Tensor<T>>) -> Result<()> {
        if v.len() != self.velocity.len()
            || v.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("momentum buffer layout mismatch".into()));
        }
        self.velocity = v;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.00035,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        check_store(params, grads)?;
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// `(step, m, v)` for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn set_state(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let ok = |x: &[Tensor<T>]| {
            x.len() == self.m.len() && x.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Checkpoint("adam moment layout mismatch".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
