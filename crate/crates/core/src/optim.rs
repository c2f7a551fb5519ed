//! AdamW, global-norm clipping and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_norm_gain, Parameters};

pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to RMSNorm gains as well.
    #[serde(default)]
    pub decay_norm_gains: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-5, weight_decay: 0.1, decay_norm_gains: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step_count: u64,
}

impl AdamWState {
    /// Zeroed moments for every tensor in `params`.
    pub fn new(config: AdamWConfig, params: &Parameters) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect();
        AdamWState { config, m: zeros.clone(), v: zeros, step_count: 0 }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut Parameters, grads: &Gradients, state: &mut AdamWState, lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        let ok = grads.get(name).is_some_and(|g| g.len() == t.numel())
            && state.m.get(name).is_some_and(|m| m.len() == t.numel())
            && state.v.get(name).is_some_and(|v| v.len() == t.numel());
        if !ok {
            return Err(Error::shape(format!("optimizer inputs for '{name}' do not match the parameter")));
        }
    }
    let c = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let wd = if is_norm_gain(name) && !c.decay_norm_gains { 0.0 } else { c.weight_decay };
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *theta = *theta * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so that their joint L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when already within bounds).
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid("max_norm must be positive"));
    }
    let norm = global_norm(grads);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let mut factor = max_norm / norm;
    let original = grads.clone();
    // Rounding can leave the rescaled norm a few ulps above the bound.
    loop {
        for (g, o) in grads.values_mut().flatten().zip(original.values().flatten()) {
            *g = o * factor;
        }
        if global_norm(grads) <= max_norm {
            return Ok(factor);
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// Warmup-stable-decay schedule: linear warmup, a constant plateau at
/// `peak_lr`, then a linear ramp to zero over the last `decay_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_steps: u64,
}

impl WsdSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64, decay_steps: u64) -> Result<Self> {
        let s = WsdSchedule { peak_lr, warmup_steps, total_steps, decay_steps };
        s.validate()?;
        Ok(s)
    }

    /// 5e-4 peak, 2,000 warmup, 42,000 total, 2,000 decay.
    pub fn full_scale() -> Self {
        WsdSchedule { peak_lr: 5e-4, warmup_steps: 2000, total_steps: 42_000, decay_steps: 2000 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.warmup_steps + self.decay_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup ({}) + decay ({}) exceed total steps ({})",
                self.warmup_steps, self.decay_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// First step of the decay window.
    pub fn decay_start(&self) -> u64 {
        self.total_steps - self.decay_steps
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        wsd_lr(self, step)
    }

    /// Same schedule with the decay window removed.
    pub fn without_decay(&self) -> Self {
        WsdSchedule { decay_steps: 0, ..*self }
    }
}

pub fn wsd_lr(s: &WsdSchedule, step: u64) -> Result<f64> {
    if step >= s.total_steps {
        return Err(Error::StepOutOfRange { step, total: s.total_steps });
    }
    let lr = if step < s.warmup_steps {
        s.peak_lr * ((step + 1) as f64 / s.warmup_steps as f64)
    } else if s.decay_steps > 0 && step >= s.decay_start() {
        s.peak_lr * ((s.total_steps - step) as f64 / s.decay_steps as f64)
    } else {
        s.peak_lr
    };
    Ok(lr.clamp(0.0, s.peak_lr))
}

/// Fine-tuning schedule: linear warmup over the first 10% of steps
/// (rounded up), then linear decay reaching zero at `total_steps`.
pub fn finetune_lr(peak_lr: f64, total_steps: u64, step: u64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange { step, total: total_steps });
    }
    let warmup = total_steps.div_ceil(10);
    let lr = if step < warmup {
        peak_lr * ((step + 1) as f64 / warmup as f64)
    } else {
        peak_lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    };
    Ok(lr.clamp(0.0, peak_lr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, values: Vec<f64>) -> Parameters {
        let mut p = Parameters::new();
        p.insert(name, Tensor::vector(values).unwrap());
        p
    }

    #[test]
    fn wsd_examples() {
        let s = WsdSchedule::full_scale();
        assert_eq!(wsd_lr(&s, 1999).unwrap(), 5e-4);
        assert_eq!(wsd_lr(&s, 21_000).unwrap(), 5e-4);
        assert_eq!(wsd_lr(&s, 41_000).unwrap(), 2.5e-4);
        assert_eq!(wsd_lr(&s, 0).unwrap(), 5e-4 / 2000.0);
        assert!(wsd_lr(&s, 42_000).is_err());
        assert!(WsdSchedule::new(1e-3, 10, 15, 10).is_err());
        assert!(WsdSchedule::new(0.0, 1, 15, 1).is_err());
    }

    #[test]
    fn finetune_examples() {
        let peak = 1e-4;
        assert_eq!(finetune_lr(peak, 1000, 99).unwrap(), peak);
        let mid = finetune_lr(peak, 1000, 549).unwrap();
        assert!((mid - peak * 451.0 / 900.0).abs() < 1e-18);
        assert!(finetune_lr(peak, 1000, 999).unwrap() <= peak / 900.0 + 1e-18);
        assert!(finetune_lr(peak, 1000, 1000).is_err());
        // Tiny runs still get one warmup step.
        assert_eq!(finetune_lr(peak, 3, 0).unwrap(), peak);
    }

    #[test]
    fn clipping_examples() {
        let mut g: Gradients = [("a".to_string(), vec![2.0, 0.0])].into();
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 0.5);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut g: Gradients = [("a".to_string(), vec![0.3, 0.4])].into();
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 1.0);
        assert_eq!(g["a"], vec![0.3, 0.4]);
        let mut z: Gradients = [("a".to_string(), vec![0.0; 3])].into();
        assert_eq!(clip_global_norm(&mut z, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn adamw_unit_gradient_step() {
        let mut p = single("w", vec![0.5, -2.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, eps: 1e-12, ..AdamWConfig::default() };
        let mut st = AdamWState::new(cfg, &p);
        let g: Gradients = [("w".to_string(), vec![1.0, 1.0])].into();
        adamw_step(&mut p, &g, &mut st, 0.1).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.4).abs() < 1e-9 && (d[1] + 2.1).abs() < 1e-9);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn decoupled_decay_and_norm_exclusion() {
        let mut p = single("w", vec![1.0, -3.0]);
        p.insert("final_norm", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        let g: Gradients = [("w".to_string(), vec![0.0; 2]), ("final_norm".to_string(), vec![0.0; 2])].into();
        adamw_step(&mut p, &g, &mut st, 0.1).unwrap();
        let f = 1.0 - 0.1 * 0.1;
        assert_eq!(p.get("w").unwrap().data(), &[f, -3.0 * f]);
        assert_eq!(p.get("final_norm").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn adamw_rejects_mismatched_gradients() {
        let mut p = single("w", vec![1.0, 2.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        let g: Gradients = [("w".to_string(), vec![0.0; 3])].into();
        assert!(adamw_step(&mut p, &g, &mut st, 0.1).is_err());
        let g: Gradients = [("other".to_string(), vec![0.0; 2])].into();
        assert!(adamw_step(&mut p, &g, &mut st, 0.1).is_err());
        assert_eq!(st.step_count, 0);
    }
}
