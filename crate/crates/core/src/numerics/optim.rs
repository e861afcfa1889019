use super::param::ParamStore;
use super::real::{lit, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step-decay schedule: the learning rate is multiplied by `factor` after
/// every `interval` completed epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub factor: f64,
    pub interval: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: StepDecay,
    pub step: u64,
    /// First/second moment buffers, parallel to the parameter store.
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64, schedule: StepDecay, params: &ParamStore<T>) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if schedule.interval == 0 || !(schedule.factor > 0.0) {
            return Err(Error::config("decay interval and factor must be positive"));
        }
        let zeros = |_| -> Vec<Tensor<T>> { params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect() };
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(()), zeros(())),
        };
        Ok(OptimizerState {
            kind,
            lr,
            schedule,
            step: 0,
            first,
            second,
        })
    }

    /// Applies one update using the gradient buffers in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for p in params.iter_mut() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut().filter(|p| p.requires_grad) {
                    let g = p.grad.as_ref().unwrap();
                    let lr: T = lit(lr);
                    for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (b1, b2): (T, T) = (lit(beta1), lit(beta2));
                let (one, eps_t) = (T::one(), lit::<T>(eps));
                let step_size: T = lit(lr / bc1);
                let bc2_sqrt: T = lit(bc2.sqrt());
                for (i, p) in params.iter_mut().enumerate() {
                    if !p.requires_grad {
                        continue;
                    }
                    let g = p.grad.as_ref().unwrap();
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, &d), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mi = b1 * *mi + (one - b1) * d;
                        *vi = b2 * *vi + (one - b2) * d * d;
                        *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps_t);
                    }
                }
            }
        }
        Ok(())
    }

    /// Call once after each completed epoch (1-based).
    pub fn end_epoch(&mut self, epoch: usize) {
        if epoch > 0 && epoch.is_multiple_of(self.schedule.interval) {
            self.lr *= self.schedule.factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        let id = ps.add("theta", Tensor::scalar(value));
        ps.get_mut(id).grad = Some(Tensor::scalar(grad));
        ps
    }

    #[test]
    fn sgd_step() {
        let mut ps = single(1.0, 1.0);
        let sched = StepDecay {
            factor: 0.7,
            interval: 15,
        };
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, sched, &ps).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((ps.value(super::super::param::ParamId(0)).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decay_applies_on_interval_boundaries() {
        let ps = single(1.0, 0.0);
        let sched = StepDecay {
            factor: 0.7,
            interval: 15,
        };
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3, sched, &ps).unwrap();
        for e in 1..15 {
            opt.end_epoch(e);
            assert_eq!(opt.lr, 1e-3);
        }
        opt.end_epoch(15);
        assert!((opt.lr - 7e-4).abs() < 1e-18);
        opt.end_epoch(16);
        assert!((opt.lr - 7e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut ps = single(0.25, 0.0);
        let sched = StepDecay {
            factor: 0.7,
            interval: 15,
        };
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3, sched, &ps).unwrap();
        for _ in 0..3 {
            opt.step(&mut ps).unwrap();
        }
        assert_eq!(ps.value(super::super::param::ParamId(0)).data()[0], 0.25);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = single(1.0, 1.0);
        ps.get_mut(super::super::param::ParamId(0)).grad = None;
        let sched = StepDecay {
            factor: 0.7,
            interval: 15,
        };
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, sched, &ps).unwrap();
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let ps = single(1.0, 1.0);
        let sched = StepDecay {
            factor: 0.7,
            interval: 15,
        };
        assert!(OptimizerState::new(OptimizerKind::Sgd, 0.0, sched, &ps).is_err());
    }
}
