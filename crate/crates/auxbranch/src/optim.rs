//! Adam optimizer and the warmup learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Precision, Tensor2D};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup to peak, then peak * sqrt(warmup / step).
    InverseSqrt,
    /// Linear warmup to peak, then constant.
    Constant,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse_sqrt" => Ok(Schedule::InverseSqrt),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::InverseSqrt => "inverse_sqrt",
            Schedule::Constant => "constant",
        }
    }
}

/// Learning rate at a 1-based step.
pub fn lr_at(step: u64, peak: f64, warmup: u64, schedule: Schedule) -> f64 {
    debug_assert!(step >= 1 && warmup >= 1);
    if step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::InverseSqrt => peak * (warmup as f64 / step as f64).sqrt(),
        Schedule::Constant => peak,
    }
}

/// First and second moment buffers, aligned with the parameter set by name.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    names: Vec<String>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        let m = params
            .iter()
            .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let v = params
            .iter()
            .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            m,
            v,
            names: params.names(),
            t: 0,
            beta1,
            beta2,
        }
    }
}

/// One Adam update with bias correction, consuming the gradients accumulated
/// in `params`. Aborts without touching anything if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64, precision: Precision) -> Result<()> {
    let step = state.t + 1;
    for (p, name) in params.iter().zip(&state.names) {
        if p.name != *name {
            return Err(Error::ManifestMismatch(format!(
                "optimizer state is for '{name}' but parameter is '{}'",
                p.name
            )));
        }
        if !p.grad.is_finite() {
            return Err(Error::NanGradient {
                name: p.name.clone(),
                step,
            });
        }
    }
    state.t = step;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((pv, g), (mv, vv)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * g;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * g * g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p.value.apply_precision(precision);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> ParamSet {
        let mut ps = ParamSet::new(0);
        ps.insert("w", Tensor2D::row_vec(values)).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = one_param(vec![1.0, -2.0, 3.0]);
        let mut state = AdamState::new(&ps, 0.9, 0.98);
        adam_step(&mut ps, &mut state, 1e-3, Precision::F64).unwrap();
        assert_eq!(ps.get("w").unwrap().value.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        // With constant gradient g the bias-corrected first step is
        // -lr * g / (|g| + eps) ~ -lr * sign(g).
        let mut ps = one_param(vec![0.0, 0.0]);
        ps.get_mut("w").unwrap().grad = Tensor2D::row_vec(vec![0.5, -2.0]);
        let mut state = AdamState::new(&ps, 0.9, 0.98);
        let lr = 1e-3;
        adam_step(&mut ps, &mut state, lr, Precision::F64).unwrap();
        let w = ps.get("w").unwrap().value.data().to_vec();
        assert!((w[0] + lr).abs() < 1e-6);
        assert!((w[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn trajectories_replay_under_same_seed() {
        let run = || {
            let mut rng = crate::rng::stream(5, &[0]);
            let mut ps = one_param(vec![0.3, -0.4]);
            let mut state = AdamState::new(&ps, 0.9, 0.98);
            for step in 1..=20u64 {
                use rand::Rng;
                let g: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ps.get_mut("w").unwrap().grad = Tensor2D::row_vec(g);
                let lr = lr_at(step, 1e-3, 5, Schedule::InverseSqrt);
                adam_step(&mut ps, &mut state, lr, Precision::F64).unwrap();
            }
            ps.get("w")
                .unwrap()
                .value
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut ps = one_param(vec![1.0]);
        ps.get_mut("w").unwrap().grad = Tensor2D::row_vec(vec![f64::NAN]);
        let mut state = AdamState::new(&ps, 0.9, 0.98);
        let err = adam_step(&mut ps, &mut state, 1e-3, Precision::F64);
        assert!(matches!(err, Err(Error::NanGradient { .. })));
        assert_eq!(ps.get("w").unwrap().value.data(), &[1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn schedule_shape() {
        let peak = 7e-4;
        let warmup = 4000;
        assert!((lr_at(warmup, peak, warmup, Schedule::InverseSqrt) - peak).abs() < 1e-15);
        assert!((lr_at(4 * warmup, peak, warmup, Schedule::InverseSqrt) - peak / 2.0).abs() < 1e-15);
        assert!((lr_at(warmup / 2, peak, warmup, Schedule::InverseSqrt) - peak / 2.0).abs() < 1e-15);
        assert!((lr_at(10 * warmup, peak, warmup, Schedule::Constant) - peak).abs() < 1e-15);
    }
}
