//! Adam with bias correction over a fixed list of parameter arrays.

use crate::autodiff::array::DenseArray;
use crate::error::{Result, StmError};

#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers start at zero; shapes are fixed by `params` for the
    /// lifetime of the state.
    pub fn new(params: &[&DenseArray], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One in-place update. `grads` must align with `params` slot for slot.
    pub fn step(&mut self, params: &mut [&mut DenseArray], grads: &[DenseArray]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(StmError::Usage(format!(
                "optimizer built for {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(StmError::Usage(format!(
                    "slot {slot}: param shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pi, &gi), (mi, vi)) in
                p.values_mut().iter_mut().zip(g.values()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = [DenseArray::vector(vec![1.0, -2.0])];
        let grads = [DenseArray::vector(vec![0.0, 0.0])];
        let mut opt = AdamState::new(&params.iter().collect::<Vec<_>>(), 1e-3);
        opt.step(&mut params.iter_mut().collect::<Vec<_>>(), &grads).unwrap();
        assert_eq!(params[0].values(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        let mut params = [DenseArray::scalar(0.5)];
        let grads = [DenseArray::scalar(3.0)];
        let mut opt = AdamState::new(&params.iter().collect::<Vec<_>>(), 1e-3);
        opt.step(&mut params.iter_mut().collect::<Vec<_>>(), &grads).unwrap();
        // with zero moments, one step moves by lr * g / (|g| + eps)
        let expect = 0.5 - 1e-3 * 3.0 / (3.0 + 1e-8);
        assert!((params[0].item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn update_direction_opposes_gradient_sign() {
        let mut params = [DenseArray::vector(vec![0.0, 0.0])];
        let grads = [DenseArray::vector(vec![1.0, -1.0])];
        let mut opt = AdamState::new(&params.iter().collect::<Vec<_>>(), 1e-3);
        opt.step(&mut params.iter_mut().collect::<Vec<_>>(), &grads).unwrap();
        assert!(params[0].values()[0] < 0.0);
        assert!(params[0].values()[1] > 0.0);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut params = [DenseArray::vector(vec![0.0, 0.0])];
        let grads = [DenseArray::vector(vec![1.0])];
        let mut opt = AdamState::new(&params.iter().collect::<Vec<_>>(), 1e-3);
        let step = opt.step(&mut params.iter_mut().collect::<Vec<_>>(), &grads);
        assert!(matches!(step, Err(StmError::Usage(_))));
    }

    #[test]
    fn repeated_runs_are_deterministic() {
        let run = || {
            let mut params = [DenseArray::vector(vec![0.1, 0.2, 0.3])];
            let mut opt = AdamState::new(&params.iter().collect::<Vec<_>>(), 1e-2);
            for i in 0..50 {
                let g = DenseArray::vector(vec![(i as f64).sin(), 0.5, -1.0]);
                opt.step(&mut params.iter_mut().collect::<Vec<_>>(), &[g]).unwrap();
            }
            params[0].values().to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
