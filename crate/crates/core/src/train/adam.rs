//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update of `params` in place. Gradients are checked for finiteness
    /// before anything changes; `names` label the offending parameter.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for (i, g) in grads.iter().enumerate() {
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    index,
                    context: format!(
                        "gradient of parameter `{}`",
                        names.get(i).map_or("?", String::as_str)
                    ),
                });
            }
            if g.shape() != params[i].shape() {
                return Err(Error::dim(
                    0,
                    format!(
                        "gradient of `{}` has shape {:?}, parameter has {:?}",
                        names.get(i).map_or("?", String::as_str),
                        g.shape(),
                        params[i].shape()
                    ),
                ));
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powf(self.t as f64);
        let c2 = 1.0 - BETA2.powf(self.t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((x, &gi), (mi, vi)) in iter {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * mh / (vh.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    fn names() -> Vec<String> {
        vec!["x".into()]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![scalar(1.5)];
        let mut adam = Adam::new(&p);
        for _ in 0..5 {
            adam.step(&mut p, &[scalar(0.0)], &names(), 0.1).unwrap();
        }
        assert_eq!(p[0].data(), &[1.5]);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn moments_decay_without_gradient() {
        let mut p = vec![scalar(0.0)];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[scalar(2.0)], &names(), 0.1).unwrap();
        let (m0, v0) = (adam.m[0].data()[0], adam.v[0].data()[0]);
        adam.step(&mut p, &[scalar(0.0)], &names(), 0.1).unwrap();
        assert!(adam.m[0].data()[0].abs() < m0.abs());
        assert!(adam.v[0].data()[0] < v0);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![scalar(0.0)];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[scalar(1.0)], &names(), 1e-3).unwrap();
        let expect = -1e-3 * 1.0 / (1.0 + EPSILON);
        assert!((p[0].data()[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_approaches_unit_step() {
        let mut p = vec![scalar(0.0)];
        let mut adam = Adam::new(&p);
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p[0].data()[0];
            adam.step(&mut p, &[scalar(0.37)], &names(), 0.01).unwrap();
            last = before - p[0].data()[0];
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![scalar(0.0)];
        let mut adam = Adam::new(&p);
        let err = adam
            .step(&mut p, &[scalar(f64::NAN)], &names(), 0.1)
            .unwrap_err();
        match err {
            Error::NonFinite { context, .. } => assert!(context.contains("`x`")),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.t, 0);
    }
}
