//! Client optimizers and learning-rate schedules with persistable state.

use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Constant,
    /// Cosine decay to zero over the whole federation's local steps.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum (heavy ball, dampening 0).
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be > 0");
        }
        Ok(())
    }
}

/// Learning rate at local step `t` of a horizon of `total` steps.
pub fn scheduled_lr(kind: SchedulerKind, base: f64, t: usize, total: usize) -> f64 {
    match kind {
        SchedulerKind::Constant => base,
        SchedulerKind::Cosine => {
            if total == 0 {
                return base;
            }
            let frac = (t.min(total) as f64) / total as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Optimizer moments and step counter, kept per client between rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub momentum: NamedParams,
    pub m: NamedParams,
    pub v: NamedParams,
    pub t: u64,
}

fn buffer<'a>(map: &'a mut NamedParams, name: &str, like: &Tensor) -> Result<&'a mut Tensor> {
    if !map.contains_key(name) {
        map.insert(name.to_string(), Tensor::zeros(like.dims())?);
    }
    Ok(map.get_mut(name).expect("inserted above"))
}

/// Applies one optimizer step to every parameter that has a gradient.
pub fn optimizer_step(
    params: &mut NamedParams,
    grads: &NamedParams,
    cfg: &OptimizerConfig,
    lr: f64,
    state: &mut OptState,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    for (name, g) in grads {
        let p = params.get_mut(name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "gradient for unknown parameter".into(),
        })?;
        if p.dims() != g.dims() {
            return Err(Error::Parameter {
                name: name.clone(),
                reason: format!("gradient shape {:?} vs parameter {:?}", g.dims(), p.dims()),
            });
        }
        let wd = cfg.weight_decay;
        let grad = |i: usize, pv: f64| if wd > 0.0 { g.data()[i] + wd * pv } else { g.data()[i] };
        match cfg.kind {
            OptimizerKind::Sgd if cfg.momentum == 0.0 => {
                for (i, pv) in p.data_mut().iter_mut().enumerate() {
                    *pv -= lr * grad(i, *pv);
                }
            }
            OptimizerKind::Sgd => {
                let buf = buffer(&mut state.momentum, name, p)?;
                for (i, pv) in p.data_mut().iter_mut().enumerate() {
                    let b = &mut buf.data_mut()[i];
                    *b = cfg.momentum * *b + grad(i, *pv);
                    *pv -= lr * *b;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                buffer(&mut state.m, name, p)?;
                buffer(&mut state.v, name, p)?;
                let m = state.m.get_mut(name).expect("present");
                let v = state.v.get_mut(name).expect("present");
                for (i, pv) in p.data_mut().iter_mut().enumerate() {
                    let gi = grad(i, *pv);
                    let mi = &mut m.data_mut()[i];
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    let vi = &mut v.data_mut()[i];
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> NamedParams {
        let mut m = NamedParams::new();
        m.insert(name.into(), Tensor::from_vec(&[1], vec![v]).unwrap());
        m
    }

    #[test]
    fn test_sgd_and_momentum() {
        let mut p = one("w", 1.0);
        let g = one("w", 0.5);
        let mut st = OptState::default();
        let cfg = OptimizerConfig::default();
        optimizer_step(&mut p, &g, &cfg, 0.1, &mut st).unwrap();
        assert_eq!(p["w"].data()[0], 1.0 - 0.05);

        let cfg = OptimizerConfig {
            momentum: 0.9,
            ..cfg
        };
        let mut p = one("w", 0.0);
        let mut st = OptState::default();
        optimizer_step(&mut p, &g, &cfg, 1.0, &mut st).unwrap();
        optimizer_step(&mut p, &g, &cfg, 1.0, &mut st).unwrap();
        assert!((p["w"].data()[0] + (0.5 + 0.95)).abs() < 1e-15);
    }

    #[test]
    fn test_adam_first_step_is_signed_lr() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Default::default()
        };
        let mut p = one("w", 2.0);
        let mut st = OptState::default();
        optimizer_step(&mut p, &one("w", -3.0), &cfg, 0.01, &mut st).unwrap();
        assert!((p["w"].data()[0] - (2.0 + 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn test_cosine_schedule() {
        assert_eq!(scheduled_lr(SchedulerKind::Cosine, 0.1, 0, 10), 0.1);
        assert!((scheduled_lr(SchedulerKind::Cosine, 0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(scheduled_lr(SchedulerKind::Cosine, 0.1, 10, 10).abs() < 1e-15);
        assert_eq!(scheduled_lr(SchedulerKind::Constant, 0.1, 7, 10), 0.1);
    }

    #[test]
    fn test_unknown_gradient_is_error() {
        let mut p = one("w", 1.0);
        let mut st = OptState::default();
        assert!(optimizer_step(&mut p, &one("x", 1.0), &OptimizerConfig::default(), 0.1, &mut st).is_err());
    }
}
