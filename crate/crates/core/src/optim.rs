//! Adam with optional global-norm gradient clipping.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global l2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// First and second moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// Aligned with the parameter store; `None` for buffers and untouched parameters.
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Global l2 norm over all trainable gradients.
    pub fn grad_norm(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
        store
            .trainable_ids()
            .filter_map(|id| grads.get(id))
            .flat_map(|g| g.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One update with learning rate `lr`; returns the pre-clipping gradient norm.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<f64> {
        let norm = Self::grad_norm(store, grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => Some(T::c(c / norm)),
            _ => None,
        };
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let (b1, b2) = (T::c(self.config.beta1), T::c(self.config.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let (lr, eps) = (T::c(lr), T::c(self.config.eps));
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        let moments = &mut self.moments;
        store.zip_grads(grads, |id, p, g| {
            let slot = moments[id.0].get_or_insert_with(|| Moments {
                name: names[id.0].clone(),
                m: ArrayD::zeros(p.raw_dim()),
                v: ArrayD::zeros(p.raw_dim()),
            });
            ndarray::Zip::from(p)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = match clip {
                        Some(s) => g * s,
                        None => g,
                    };
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        });
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.trainable("w", arr1(&[1.0, -2.0]).into_dyn());
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let l = t.square(w);
        let l = t.sum(l);
        let g = t.backward(l);
        let mut opt = Adam::new(AdamConfig {
            clip_norm: None,
            ..Default::default()
        });
        opt.update(&mut store, &g, 0.1).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        let v = store.value(id);
        assert!((v[IxDyn(&[0])] - 0.9).abs() < 1e-6);
        assert!((v[IxDyn(&[1])] + 1.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.trainable("w", arr1(&[3.0, -4.0]).into_dyn());
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..500 {
            let mut t = Tape::new();
            let w = t.param(&store, id);
            let l = t.square(w);
            let l = t.sum(l);
            let g = t.backward(l);
            opt.update(&mut store, &g, 0.05).unwrap();
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2));
    }
}
