use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::Real;

/// Cosine decay from `base_lr` to zero over `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: Real,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> Real {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = (step.min(self.total_steps)) as Real / self.total_steps as Real;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: Real) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update with learning rate `lr`. A zero `lr` leaves every
    /// value untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: Real) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-4,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert!(s.lr_at(100).abs() < 1e-20);
        assert!((s.lr_at(50) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, 0.0);
        for _ in 0..2000 {
            store.zero_grad();
            let w = store.value(id).data().to_vec();
            store.grad_mut(id).data_mut().copy_from_slice(&[2.0 * w[0], 2.0 * w[1]]);
            adam.step(&mut store, 0.01);
        }
        assert!(store.value(id).max_abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![0.5, 1.5]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(&store, 1e-2);
        store.grad_mut(id).fill(1.0);
        adam.step(&mut store, 0.0);
        assert!(store.values_equal(&before));
    }
}
