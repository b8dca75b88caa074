//! AdamW with decoupled weight decay and the warmup+cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamwConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates plus the step count for one parameter
/// tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. Decay is applied to the raw
/// parameter, not folded into the gradient.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamwConfig,
) -> Result<()> {
    let n = param.numel();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adamw_step: param {n} elements, grad {}, state {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let data = param.data_mut();
    for i in 0..n {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * data[i]);
    }
    Ok(())
}

/// Linear warmup to the peak followed by cosine decay to zero.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub warmup_lr: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Learning rate at a 0-based step index.
pub fn lr_at_step(s: &LrSchedule, step: u64) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        let f = step as f64 / s.warmup_steps as f64;
        return s.warmup_lr + (s.peak_lr - s.warmup_lr) * f;
    }
    if step >= s.total_steps {
        return 0.0;
    }
    let span = (s.total_steps - s.warmup_steps).max(1) as f64;
    let f = (step - s.warmup_steps) as f64 / span;
    s.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::from_vec(&[3], vec![1., -2., 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3);
        let cfg = AdamwConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[0., 0., 0.], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[3]);
        let mut st = AdamState::new(2);
        let cfg = AdamwConfig::default();
        assert!(adamw_step(&mut p, &[0., 0., 0.], &mut st, 1e-3, &cfg).is_err());
    }

    #[test]
    fn single_step_descends_quadratic() {
        // f(x) = x^2 from x = 1
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(1);
        let cfg = AdamwConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = 2.0 * p.data()[0];
        adamw_step(&mut p, &[g], &mut st, 0.1, &cfg).unwrap();
        let f = p.data()[0] * p.data()[0];
        assert!(f < 1.0, "f after step = {f}");
    }

    #[test]
    fn warmup_and_peak_match_schedule() {
        // toy defaults keep the published warmup:peak ratio (3e-4 -> 1.2e-3)
        let s = LrSchedule {
            warmup_lr: 3e-4,
            peak_lr: 1.2e-3,
            warmup_steps: 200,
            total_steps: 2000,
        };
        assert_eq!(lr_at_step(&s, 0), 3e-4);
        assert!((lr_at_step(&s, 200) - 1.2e-3).abs() < 1e-15);
        assert!(lr_at_step(&s, 1000) < 1.2e-3);
        assert!(lr_at_step(&s, 1999) > 0.0);
        assert_eq!(lr_at_step(&s, 2000), 0.0);
    }
}
