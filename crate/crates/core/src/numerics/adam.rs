use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: each step subtracts `lr * weight_decay * param`.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.rows(), p.cols());
        AdamState {
            config,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update. Fails without touching anything if a
    /// gradient is not finite or shapes disagree.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![params.len(), self.m.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.same_shape(g, "adam_step")?;
            p.same_shape(&self.m[i], "adam_step")?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let decay = c.lr * c.weight_decay * *pv;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps) + decay;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::new(0.1), &p);
        st.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].data()[0] + 0.0999999990).abs() < 1e-12);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments() {
        let mut p = vec![Tensor::row_vector(vec![1.5, -2.0])];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::new(0.1), &p);
        st.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.m[0], Tensor::zeros(1, 2));
        assert_eq!(st.v[0], Tensor::zeros(1, 2));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn converges_on_convex_scalar() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::new(0.1), &p);
        for _ in 0..200 {
            let w = p[0].data()[0];
            st.step(&mut p, &[Tensor::scalar(2.0 * (w - 3.0))]).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.1, "{}", p[0].data()[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = AdamState::new(AdamConfig::new(0.1).with_weight_decay(0.5), &p);
        st.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(AdamConfig::new(0.1), &p);
        let err = st.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.t, 0);
        assert_eq!(p[0].data()[0], 1.0);
    }
}
