//! RMSProp with inverse-time learning-rate decay.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Smoothing of the running mean square.
    pub rho: f64,
    pub epsilon: f64,
    /// `lr_t = lr / (1 + lr_decay · step)`.
    pub lr_decay: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            rho: 0.9,
            epsilon: 1e-8,
            lr_decay: 0.01,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.rho > 0.0
            && self.rho < 1.0
            && self.epsilon > 0.0
            && self.lr_decay >= 0.0
            && self.lr_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!("bad RMSProp settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    config: RmsPropConfig,
    accumulators: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    /// Fresh state with zeroed accumulators, one per parameter shape.
    pub fn new<'a>(config: RmsPropConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            accumulators: shapes.into_iter().map(Tensor::zeros).collect(),
            step: 0,
        })
    }

    /// Restores saved state, e.g. from a checkpoint.
    pub fn from_parts(config: RmsPropConfig, accumulators: Vec<Tensor>, step: u64) -> Result<Self> {
        config.validate()?;
        if accumulators.iter().any(|a| a.data().iter().any(|&v| !(v >= 0.0))) {
            return Err(TensorError::Invalid("negative mean-square accumulator".into()));
        }
        Ok(Self {
            config,
            accumulators,
            step,
        })
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate applied by the next step.
    pub fn current_lr(&self) -> f64 {
        self.config.lr / (1.0 + self.config.lr_decay * self.step as f64)
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves, so a rejected step leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != params.len() {
            return Err(TensorError::Invalid(format!(
                "{} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.accumulators.len()
            )));
        }
        for ((name, p), (g, a)) in params.iter().zip(grads.iter().zip(&self.accumulators)) {
            if p.shape() != g.shape() || p.shape() != a.shape() {
                return Err(TensorError::Shape {
                    op: "rmsprop_step",
                    detail: format!(
                        "`{name}`: param {:?}, grad {:?}, accumulator {:?}",
                        p.shape(),
                        g.shape(),
                        a.shape()
                    ),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient { name: (*name).to_string() });
            }
        }
        let RmsPropConfig { rho, epsilon, .. } = self.config;
        let lr = self.current_lr();
        for ((_, p), (g, a)) in params.iter_mut().zip(grads.iter().zip(&mut self.accumulators)) {
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                *av = rho * *av + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (av.sqrt() + epsilon);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Snaps accumulators to the `f32` grid used for persistence.
    pub fn round_to_f32(&mut self) {
        self.accumulators.iter_mut().for_each(Tensor::round_to_f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(acc: f64) -> OptimizerState {
        OptimizerState::from_parts(
            RmsPropConfig {
                lr_decay: 0.0,
                ..RmsPropConfig::default()
            },
            vec![Tensor::scalar(acc).unwrap()],
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_only_decays_accumulator() {
        let mut st = scalar_state(0.5);
        let mut p = Tensor::scalar(2.0).unwrap();
        let g = Tensor::scalar(0.0).unwrap();
        st.step(&mut [("w", &mut p)], &[&g]).unwrap();
        assert_eq!(p.data()[0], 2.0);
        assert!((st.accumulators()[0].data()[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn single_scalar_update_matches_hand_evaluation() {
        let mut st = scalar_state(0.0);
        let mut p = Tensor::scalar(1.0).unwrap();
        let g = Tensor::scalar(1.0).unwrap();
        st.step(&mut [("w", &mut p)], &[&g]).unwrap();
        assert!((st.accumulators()[0].data()[0] - 0.1).abs() < 1e-15);
        let expected = 1.0 - 0.001 / (0.1f64.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.996838).abs() < 1e-6);
    }

    #[test]
    fn two_steps_follow_unrolled_recurrence() {
        let cfg = RmsPropConfig::default();
        let mut st = OptimizerState::new(cfg, [&[1usize][..]]).unwrap();
        let mut p = Tensor::scalar(0.0).unwrap();
        let g = Tensor::scalar(2.0).unwrap();
        st.step(&mut [("w", &mut p)], &[&g]).unwrap();
        st.step(&mut [("w", &mut p)], &[&g]).unwrap();
        // acc₂ = ρ(1−ρ)g² + (1−ρ)g² = (1−ρ²)g²
        let acc2 = (1.0 - 0.81) * 4.0;
        assert!((st.accumulators()[0].data()[0] - acc2).abs() < 1e-14);
        let acc1: f64 = 0.1 * 4.0;
        let expected = -0.001 * 2.0 / (acc1.sqrt() + 1e-8) - 0.001 / 1.01 * 2.0 / (acc2.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut st = OptimizerState::new(RmsPropConfig::default(), [&[2usize][..], &[1usize][..]]).unwrap();
        let mut a = Tensor::zeros(&[2]);
        let mut b = Tensor::zeros(&[1]);
        let ga = Tensor::zeros(&[2]);
        let mut gb = Tensor::zeros(&[1]);
        gb.data_mut()[0] = f64::NAN;
        let err = st
            .step(&mut [("conv.weight", &mut a), ("conv.bias", &mut b)], &[&ga, &gb])
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { name: "conv.bias".into() });
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn inverse_time_decay() {
        let mut st = OptimizerState::from_parts(RmsPropConfig::default(), vec![], 0).unwrap();
        assert_eq!(st.current_lr(), 0.001);
        st.step = 100;
        assert!((st.current_lr() - 0.0005).abs() < 1e-18);
    }
}
