//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("adam", "eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of `params` in place. `names` label the parameters in
    /// errors; all slices share the canonical order.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || names.len() != params.len() {
            return Err(Error::shape("adam_step", "parameter count", self.m.len(), grads.len()));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.shape() != g.shape() {
                return Err(Error::invalid("adam_step", format!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for i in 0..params.len() {
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] + wd * p[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&p[0]]);
        for _ in 0..10 {
            st.step(&mut p, &[Tensor::zeros(&[3])], &names(1), 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &[&p[0]]);
        for _ in 0..500 {
            let w = p[0].data()[0];
            st.step(&mut p, &[Tensor::scalar(2.0 * (w - 3.0))], &names(1), 0.1).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 1e-2, "{:?}", p[0]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &[&p[0]]);
        st.step(&mut p, &[Tensor::new(vec![3], g.to_vec()).unwrap()], &names(1), 0.01).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            // m̂ = g and v̂ = g² after one step
            let expected = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((p[0].data()[i] - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = vec![Tensor::<f32>::zeros(&[2]), Tensor::zeros(&[1])];
        let mut st = AdamState::new(AdamConfig::default(), &[&p[0], &p[1]]);
        let grads = [Tensor::zeros(&[2]), Tensor::scalar(f32::NAN)];
        let err = st.step(&mut p, &grads, &names(2), 1e-3).unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}
