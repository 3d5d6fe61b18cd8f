//! Activation normalization (batch, group, layer) over a [`Tape`].

use crate::error::{Error, Result};
use crate::tensor::{NormAxes, Tape, Var};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
    Layer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub kind: NormKind,
    /// Channel groups, used by the group kind only.
    pub groups: usize,
    pub eps: f64,
    /// Running-statistics update rate, used by the batch kind only.
    pub momentum: f64,
}

impl NormConfig {
    pub fn batch() -> Self {
        NormConfig {
            kind: NormKind::Batch,
            groups: 1,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn group(groups: usize) -> Self {
        NormConfig {
            kind: NormKind::Group,
            groups,
            ..Self::batch()
        }
    }

    pub fn layer() -> Self {
        NormConfig {
            kind: NormKind::Layer,
            ..Self::batch()
        }
    }

    pub fn none() -> Self {
        NormConfig {
            kind: NormKind::None,
            ..Self::batch()
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("norm eps must be > 0, got {}", self.eps)));
        }
        match self.kind {
            NormKind::Group => {
                if self.groups == 0 || channels % self.groups != 0 {
                    return Err(Error::config(format!(
                        "group norm: {channels} channels not divisible by {} groups",
                        self.groups
                    )));
                }
            }
            NormKind::Batch => {
                if !(self.momentum > 0.0 && self.momentum < 1.0) {
                    return Err(Error::config(format!(
                        "batch norm momentum must be in (0, 1), got {}",
                        self.momentum
                    )));
                }
            }
            NormKind::Layer | NormKind::None => {}
        }
        Ok(())
    }

    fn axes(&self) -> Option<NormAxes> {
        match self.kind {
            NormKind::Batch => Some(NormAxes::Batch),
            NormKind::Group => Some(NormAxes::Group(self.groups)),
            NormKind::Layer => Some(NormAxes::Group(1)),
            NormKind::None => None,
        }
    }
}

/// Per-channel running mean and (unbiased) variance of a batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Normalizes `x[B, C, H, W]` with affine parameters `gamma`, `beta` (each
/// `[C]`).
///
/// Batch kind in train mode uses batch statistics and returns the updated
/// running statistics; in eval mode it uses `running`. The other kinds ignore
/// `mode` and `running`. The `none` kind returns `x` unchanged.
pub fn norm_forward(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    cfg: &NormConfig,
    mode: Mode,
    running: Option<&RunningStats>,
) -> Result<(Var, Option<RunningStats>)> {
    let dims = tape.value(x).dims().to_vec();
    let (b, c) = match dims.as_slice() {
        &[b, c, _, _] => (b, c),
        d => return Err(Error::shape("norm_forward", d, &[0, 0, 0, 0])),
    };
    cfg.validate(c)?;
    let Some(axes) = cfg.axes() else {
        return Ok((x, None));
    };
    if cfg.kind != NormKind::Batch {
        let (y, _) = tape.normalize(x, gamma, beta, axes, cfg.eps)?;
        return Ok((y, None));
    }
    let running = running.ok_or_else(|| Error::invalid("batch norm needs running statistics"))?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape("norm_forward running stats", &dims, &[running.mean.len()]));
    }
    match mode {
        Mode::Eval => {
            let y = tape.frozen_norm(x, gamma, beta, &running.mean, &running.var, cfg.eps)?;
            Ok((y, None))
        }
        Mode::Train => {
            if b < 2 {
                return Err(Error::invalid(
                    "batch norm in train mode needs batch size >= 2 (variance undefined for B = 1)",
                ));
            }
            let (y, stats) = tape.normalize(x, gamma, beta, axes, cfg.eps)?;
            let n = stats.count as f64;
            let m = cfg.momentum;
            let updated = RunningStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&stats.mean)
                    .map(|(r, s)| (1.0 - m) * r + m * s)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&stats.var)
                    .map(|(r, s)| (1.0 - m) * r + m * s * n / (n - 1.0))
                    .collect(),
            };
            Ok((y, Some(updated)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor, cfg: &NormConfig, gamma: &[f64], beta: &[f64]) -> Tensor {
        let c = x.dims()[1];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::from_vec(&[c], gamma.to_vec()).unwrap());
        let b = tape.constant(Tensor::from_vec(&[c], beta.to_vec()).unwrap());
        let rs = RunningStats::new(c);
        let (y, _) = norm_forward(&mut tape, xv, g, b, cfg, Mode::Train, Some(&rs)).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn test_batch_norm_standardizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut rng).unwrap();
        x.data_mut().iter_mut().for_each(|v| *v += 3.0);
        let y = run(&x, &NormConfig::batch(), &[1.0; 3], &[0.0; 3]);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5 * 2.0);
        }
    }

    #[test]
    fn test_layer_norm_constant_input_gives_beta() {
        let x = Tensor::full(&[2, 4, 3, 3], 7.5).unwrap();
        let beta = [0.1, -0.2, 0.3, 0.4];
        let y = run(&x, &NormConfig::layer(), &[2.0; 4], &beta);
        for (i, v) in y.data().iter().enumerate() {
            assert!((v - beta[(i / 9) % 4]).abs() < 1e-12);
        }
    }

    #[test]
    fn test_group_norm_with_c_groups_is_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4, 4, 4], 1.5, &mut rng).unwrap();
        let gamma = [0.5, 1.0, 1.5, -2.0];
        let beta = [0.0, 0.1, 0.2, 0.3];
        let y = run(&x, &NormConfig::group(4), &gamma, &beta);
        for plane in 0..12 {
            let ch = plane % 4;
            let xs = &x.data()[plane * 16..(plane + 1) * 16];
            let mean = xs.iter().sum::<f64>() / 16.0;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for (k, &xv) in xs.iter().enumerate() {
                let expected = gamma[ch] * (xv - mean) / (var + DEFAULT_EPS).sqrt() + beta[ch];
                assert!((y.data()[plane * 16 + k] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn test_batch_norm_train_b1_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]).unwrap());
        let g = tape.constant(Tensor::ones(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let rs = RunningStats::new(2);
        let cfg = NormConfig::batch();
        assert!(norm_forward(&mut tape, x, g, b, &cfg, Mode::Train, Some(&rs)).is_err());
        assert!(norm_forward(&mut tape, x, g, b, &cfg, Mode::Eval, Some(&rs)).is_ok());
    }

    #[test]
    fn test_group_norm_divisibility() {
        assert!(NormConfig::group(3).validate(8).is_err());
        assert!(NormConfig::group(4).validate(8).is_ok());
        let mut bad = NormConfig::batch();
        bad.eps = 0.0;
        assert!(bad.validate(4).is_err());
    }

    #[test]
    fn test_running_stats_update() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[1]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let rs = RunningStats::new(1);
        let (_, upd) =
            norm_forward(&mut tape, xv, g, b, &NormConfig::batch(), Mode::Train, Some(&rs)).unwrap();
        let upd = upd.unwrap();
        // batch mean 4, unbiased variance 20/3
        assert!((upd.mean[0] - 0.4).abs() < 1e-15);
        assert!((upd.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn test_eval_mode_is_per_sample_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rs = RunningStats {
            mean: vec![0.3, -0.1],
            var: vec![2.0, 0.5],
        };
        let sample = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng).unwrap();
        let eval_first = |others: Tensor| {
            let mut data = sample.data().to_vec();
            data.extend_from_slice(others.data());
            let n = 1 + others.dims()[0];
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[n, 2, 3, 3], data).unwrap());
            let g = tape.constant(Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap());
            let b = tape.constant(Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
            let (y, _) =
                norm_forward(&mut tape, x, g, b, &NormConfig::batch(), Mode::Eval, Some(&rs)).unwrap();
            tape.value(y).data()[..18].to_vec()
        };
        let a = eval_first(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng).unwrap());
        let b = eval_first(Tensor::randn(&[5, 2, 3, 3], 4.0, &mut rng).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn test_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng).unwrap();
        for cfg in [NormConfig::batch(), NormConfig::group(2), NormConfig::layer()] {
            for _ in 0..20 {
                let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng).unwrap();
                let err = grad_check(
                    |t, v| {
                        let g = t.constant(Tensor::from_vec(&[4], vec![1.0, 0.5, -1.0, 2.0])?);
                        let b = t.constant(Tensor::zeros(&[4])?);
                        let rs = RunningStats::new(4);
                        let (y, _) = norm_forward(t, v, g, b, &cfg, Mode::Train, Some(&rs))?;
                        let w = t.constant(weights.clone());
                        let p = t.mul(y, w)?;
                        t.sum(p)
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{:?}: {err}", cfg.kind);
            }
        }
    }
}
