use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::{Scalar, Tensor};

/// RMSProp with a per-step exponential learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr0: f64,
    pub decay: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay: 0.99977,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// Mean-square accumulators plus the schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub learning_rate: f64,
}

impl RmsProp {
    /// Learning rate in effect at step `t` (0-based): `lr0 * decay^t`.
    pub fn learning_rate(&self, t: u64) -> f64 {
        self.lr0 * self.decay.powf(t as f64)
    }

    pub fn init_state<T: Scalar>(&self, params: &[Tensor<T>]) -> OptimState<T> {
        OptimState {
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
            learning_rate: self.lr0,
        }
    }

    /// One update of every parameter, then advances the schedule.
    pub fn step<T: Scalar>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[&[T]],
        state: &mut OptimState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.v.len() {
            return Err(mismatch("rmsprop_step", &[params.len()], &[grads.len(), state.v.len()]));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&state.v) {
            if p.numel() != g.len() || p.numel() != v.len() {
                return Err(mismatch("rmsprop_step", p.shape(), &[g.len(), v.len()]));
            }
        }
        let rho = T::from_f64_lossy(self.rho);
        let eps = T::from_f64_lossy(self.eps);
        let lr = T::from_f64_lossy(state.learning_rate);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.v) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = rho * *vi + (T::one() - rho) * gi * gi;
                *w -= lr * gi / (*vi + eps).sqrt();
            }
        }
        state.step += 1;
        state.learning_rate = self.learning_rate(state.step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_unit_gradient_step() {
        let opt = RmsProp::default();
        let mut params = vec![Tensor::<f64>::zeros([1])];
        let mut state = opt.init_state(&params);
        opt.step(&mut params, &[&[1.0]], &mut state).unwrap();
        let want = -1e-4 / (0.1f64 + 1e-8).sqrt();
        assert!((params[0].data()[0] - want).abs() < 1e-15);
        assert!((want + 3.1623e-4).abs() < 1e-8);
        assert!((state.v[0][0] - 0.1).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_only_decays_accumulator() {
        let opt = RmsProp::default();
        let mut params = vec![Tensor::<f64>::full([2], 3.0)];
        let mut state = opt.init_state(&params);
        state.v[0] = vec![0.5, 2.0];
        opt.step(&mut params, &[&[0.0, 0.0]], &mut state).unwrap();
        assert_eq!(params[0].data(), &[3.0, 3.0]);
        assert!((state.v[0][0] - 0.45).abs() < 1e-15);
        assert!((state.v[0][1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_closed_form() {
        let opt = RmsProp::default();
        assert_eq!(opt.learning_rate(0), 1e-4);
        let lr = opt.learning_rate(10_000);
        assert!((lr - 1.003e-5).abs() / 1.003e-5 < 1e-3, "{lr}");
        let mut params = vec![Tensor::<f32>::zeros([1])];
        let mut state = opt.init_state(&params);
        for _ in 0..50 {
            opt.step(&mut params, &[&[0.1]], &mut state).unwrap();
        }
        assert_eq!(state.learning_rate, 1e-4 * 0.99977f64.powf(50.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let opt = RmsProp::default();
        let mut params = vec![Tensor::<f32>::zeros([3])];
        let mut state = opt.init_state(&params);
        assert!(opt.step(&mut params, &[&[0.0; 2]], &mut state).is_err());
    }
}
