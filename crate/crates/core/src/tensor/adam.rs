//! Adam with bias correction and an optional cosine learning-rate decay.

use crate::error::{Result, StptError};
use crate::scalar::Scalar;
use crate::tensor::tape::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero disables it.
    pub weight_decay: f64,
    /// Steps until the cosine schedule reaches zero. `None` keeps `lr` flat.
    pub horizon: Option<usize>,
    step: usize,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, horizon: Option<usize>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            horizon,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        match self.horizon {
            None => self.lr,
            Some(h) if h == 0 => self.lr,
            Some(h) => {
                let t = self.step.min(h) as f64 / h as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Updates every parameter whose gradient was touched this step.
    pub fn step_all(&mut self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().into_iter().filter(|&id| store.touched(id)).collect();
        self.apply(store, &ids);
    }

    /// Updates exactly the listed parameters; a listed parameter without an
    /// accumulated gradient is an error.
    pub fn step_params(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if !store.touched(id) {
                return Err(StptError::MissingGrad(store.name(id).to_string()));
            }
        }
        self.apply(store, ids);
        Ok(())
    }

    fn apply(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) {
        let lr = T::cst(self.current_lr());
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::cst(self.beta1);
        let b2 = T::cst(self.beta2);
        let eps = T::cst(self.eps);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let wd = T::cst(self.weight_decay);

        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for &id in ids {
            let grad = store.grad(id).clone();
            let slot = &mut self.moments[id.raw()];
            if slot.is_none() {
                *slot = Some((Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            }
            let (m, v) = slot.as_mut().unwrap();
            let value = store.value_mut(id);
            for (((p, &g), mv), vv) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * g;
                *vv = b2 * *vv + (one - b2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                let mut upd = lr * m_hat / (v_hat.sqrt() + eps);
                if wd != T::zero() {
                    upd += lr * wd * *p;
                }
                *p -= upd;
            }
        }
    }
}

impl ParamId {
    pub(crate) fn raw(self) -> usize {
        self.0
    }
}
