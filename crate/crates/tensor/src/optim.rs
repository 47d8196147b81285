//! SGD with momentum and the warm-up + cosine learning-rate schedule.

use std::collections::HashMap;

use crate::nn::{ParamGrads, ParamId, ParamStore};
use crate::{Result, Scalar, Tensor};

/// Heavy-ball SGD. Weight decay applies to weight tensors only, never to
/// biases or normalization parameters.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::of(momentum), weight_decay: T::of(weight_decay), velocity: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: T) -> Result<()> {
        let mut ids: Vec<_> = grads.iter().map(|(&id, _)| id).collect();
        ids.sort();
        for id in ids {
            let entry = store.entry(id);
            if entry.kind.is_buffer() {
                continue;
            }
            let mut g = grads.get(id).expect("listed").clone();
            if entry.kind.decays() && self.weight_decay > T::zero() {
                g.axpy(self.weight_decay, &entry.value)?;
            }
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let v = v.clone();
            store.get_mut(id).axpy(-lr, &v)?;
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKind, Session};

    #[test]
    fn schedule_endpoints() {
        let s = WarmupCosine { base_lr: 0.03, warmup_steps: 10, total_steps: 110 };
        assert!((s.lr(0) - 0.003).abs() < 1e-15);
        assert!((s.lr(9) - 0.03).abs() < 1e-15);
        assert!((s.lr(10) - 0.03).abs() < 1e-15);
        assert!((s.lr(60) - 0.015).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-15);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamKind::Bias, Tensor::full(&[1], 5.0));
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..200 {
            let mut s = Session::new(true);
            let x = s.param(&store, id);
            let sq = s.tape.masked_mse(x, &Tensor::zeros(&[1]), &Tensor::full(&[1], 1.0)).unwrap();
            let g = s.backward(sq).unwrap();
            let pg = s.param_grads(&store, &g);
            opt.step(&mut store, &pg, 0.05).unwrap();
        }
        assert!(store.get(id).item().abs() < 1e-3);
    }
}
