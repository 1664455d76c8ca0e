use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::{Element, Param};
use crate::error::{Error, Result};

/// SGD with momentum and L2 weight decay.
///
/// Velocity buffers are keyed by parameter identity; the state keeps a clone
/// of each handle so identities stay valid for its lifetime.
pub struct SgdState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<usize, (Param<T>, Vec<T>)>,
}

fn key<T>(p: &Param<T>) -> usize {
    Rc::as_ptr(p) as *const () as usize
}

impl<T: Element> SgdState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`,
    /// then clears the gradients. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &[Param<T>], lr: f64) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.borrow().grad().is_none()) {
            return Err(Error::MissingGradient(format!(
                "#{i} of shape {:?}",
                params[i].borrow().shape()
            )));
        }
        let (mom, wd, lr) = (
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.weight_decay),
            T::from_f64_lossy(lr),
        );
        for p in params {
            let entry = self
                .velocity
                .entry(key(p))
                .or_insert_with(|| (Rc::clone(p), vec![T::zero(); p.borrow().numel()]));
            let v = &mut entry.1;
            let mut t = p.borrow_mut();
            let grad = t.grad().expect("checked above").to_vec();
            debug_assert_eq!(v.len(), grad.len());
            for ((vi, x), g) in v.iter_mut().zip(t.data_mut()).zip(grad) {
                *vi = mom * *vi + g + wd * *x;
                *x = *x - lr * *vi;
            }
            t.clear_grad();
        }
        Ok(())
    }

    pub fn velocity(&self, p: &Param<T>) -> Option<&[T]> {
        self.velocity.get(&key(p)).map(|(_, v)| v.as_slice())
    }
}

/// Linear warmup followed by cosine decay, indexed by epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: usize, total: usize) -> Self {
        LrSchedule {
            base,
            warmup,
            total,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total {
            return Err(Error::EpochOutOfRange {
                epoch,
                total: self.total,
            });
        }
        if epoch < self.warmup {
            return Ok(self.base * (epoch + 1) as f64 / self.warmup as f64);
        }
        let progress = (epoch - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(0.5 * self.base * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::RefCell;

    fn param(v: f64, g: Option<f64>) -> Param<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().with_requires_grad(true);
        if let Some(g) = g {
            t.accumulate_grad(&[g]);
        }
        Rc::new(RefCell::new(t))
    }

    #[test]
    fn plain_gradient_step() {
        let p = param(1.0, Some(0.5));
        SgdState::new(0.0, 0.0).step(&[p.clone()], 0.1).unwrap();
        assert!((p.borrow().data()[0] - 0.95).abs() < 1e-15);
        assert!(p.borrow().grad().is_none());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let p = param(-3.25, Some(0.0));
        SgdState::new(0.9, 0.0).step(&[p.clone()], 0.1).unwrap();
        assert_eq!(p.borrow().data()[0], -3.25);
    }

    #[test]
    fn momentum_second_step_is_one_point_nine() {
        let p = param(0.0, Some(1.0));
        let mut opt = SgdState::new(0.9, 0.0);
        opt.step(&[p.clone()], 1.0).unwrap();
        let first = -p.borrow().data()[0];
        p.borrow_mut().accumulate_grad(&[1.0]);
        opt.step(&[p.clone()], 1.0).unwrap();
        let second = -p.borrow().data()[0] - first;
        assert!((first - 1.0).abs() < 1e-15);
        assert!((second - 1.9).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_rejected() {
        let p = param(1.0, None);
        assert!(matches!(
            SgdState::new(0.9, 0.0).step(&[p], 0.1),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn schedule_warmup_and_cosine() {
        let s = LrSchedule::new(0.1, 10, 110);
        assert!((s.lr_at(9).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.lr_at(10).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.lr_at(60).unwrap() - 0.05).abs() < 1e-15);
        assert!((s.lr_at(0).unwrap() - 0.01).abs() < 1e-15);
        assert!(s.lr_at(110).is_err());
        assert!((0..110).all(|e| s.lr_at(e).unwrap() > 0.0));
    }
}
