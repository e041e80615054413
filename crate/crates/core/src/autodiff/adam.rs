use std::collections::HashMap;

use super::graph::Gradients;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: T, beta2: T, eps: T) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `(name, param)` from `grads`. All gradients are
    /// validated before any parameter is touched.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>, lr: T) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        if !(lr > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        for (name, p) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    context: format!("adam `{name}`"),
                    message: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }

        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, p) in params {
            let g = grads.get(name).expect("validated");
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.rows(), p.cols()),
                v: Tensor::zeros(p.rows(), p.cols()),
            });
            let pd = p.data_mut();
            let md = mom.m.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (T::one() - b1) * gv;
            }
            let vd = mom.v.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                vd[i] = b2 * vd[i] + (T::one() - b2) * gv * gv;
            }
            let (md, vd) = (mom.m.data(), mom.v.data());
            for i in 0..pd.len() {
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(name: &str, t: Tensor<f64>) -> Gradients<f64> {
        let mut g = Gradients::default();
        g.insert(name, t);
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = AdamState::default();
        s.step([("w", &mut p)], &grads("w", Tensor::zeros(1, 3)), 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε) ≈ lr·sign(g).
        let mut p = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let mut s = AdamState::default();
        s.step(
            [("w", &mut p)],
            &grads("w", Tensor::from_vec(1, 2, vec![0.5, -4.0])),
            0.01,
        )
        .unwrap();
        let expect0 = -0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((p.data()[0] - expect0).abs() < 1e-15);
        assert!((p.data()[1] - expect1).abs() < 1e-15);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn nan_gradient_is_rejected_by_name() {
        let mut p = Tensor::from_vec(1, 1, vec![1.0]);
        let mut s = AdamState::default();
        let err = s
            .step([("layer.w", &mut p)], &grads("layer.w", Tensor::scalar(f64::NAN)), 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("layer.w"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::from_vec(1, 2, vec![0.3, -0.7]);
            let mut s = AdamState::default();
            for k in 0..20 {
                let g = Tensor::from_vec(1, 2, vec![(k as f64).sin(), (k as f64 * 0.3).cos()]);
                s.step([("w", &mut p)], &grads("w", g), 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }
}
