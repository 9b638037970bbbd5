//! Adam with bias correction. One optimizer instance owns the first and
//! second moment buffers for a fixed list of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam {
    pub lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `sizes` are the element counts of the parameters, in the order they
    /// will be passed to every `step` call.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. A `None` gradient leaves that parameter and its moment
    /// buffers untouched (the parameter did not participate in the step).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam",
                format!("expected {} parameters, got {} / {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let Some(grad) = &grads[i] else { continue };
            if grad.numel() != self.m[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: vec![self.m[i].len()],
                    rhs: grad.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params[i].data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut w = t1(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(0.01, &[3]);
        let g = t1(&[0.5, -2.0, 1e-3]);
        opt.step(&mut [&mut w], &[Some(g)]).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps') ~ lr * sign(g)
        assert!((w.data()[0] + 0.01).abs() < 1e-6);
        assert!((w.data()[1] - 0.01).abs() < 1e-6);
        assert!((w.data()[2] + 0.01).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut w = t1(&[1.5, -2.5]);
        let mut opt = Adam::new(0.1, &[2]);
        opt.step(&mut [&mut w], &[Some(t1(&[0.0, 0.0]))]).unwrap();
        assert_eq!(w.data(), &[1.5, -2.5]);
        opt.step(&mut [&mut w], &[None]).unwrap();
        assert_eq!(w.data(), &[1.5, -2.5]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize w^2 from w = 1 with lr 0.1
        let mut w = t1(&[1.0]);
        let mut opt = Adam::new(0.1, &[1]);
        for _ in 0..200 {
            let g = t1(&[2.0 * w.data()[0]]);
            opt.step(&mut [&mut w], &[Some(g)]).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-2, "ended at {}", w.data()[0]);
    }

    #[test]
    fn parameter_count_mismatch_is_an_error() {
        let mut w = t1(&[0.0]);
        let mut opt = Adam::new(0.1, &[1, 1]);
        assert!(opt.step(&mut [&mut w], &[Some(t1(&[1.0]))]).is_err());
    }
}
