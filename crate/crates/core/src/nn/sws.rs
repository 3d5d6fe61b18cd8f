//! Scaled weight standardization.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use std::str::FromStr;

/// Nonlinearity following a standardized convolution; selects the fixed
/// variance-preserving gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Relu,
}

impl Nonlinearity {
    /// `γ` such that `Var(γ · f(z)) = 1` for `z ~ N(0, 1)`.
    pub fn gamma(self) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Relu => (2.0 / (1.0 - std::f64::consts::FRAC_1_PI)).sqrt(),
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Nonlinearity::Identity),
            "relu" => Ok(Nonlinearity::Relu),
            other => Err(Error::config(format!("unknown nonlinearity `{other}`"))),
        }
    }
}

pub fn gamma_for_nonlinearity(kind: &str) -> Result<f64> {
    Ok(kind.parse::<Nonlinearity>()?.gamma())
}

/// Raw parameters of a standardized convolution or linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SwsParams {
    /// `[C_out, ...]`; every trailing axis counts towards fan-in.
    pub weight: Tensor,
    pub gain: Vec<f64>,
    pub gamma_nl: f64,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl SwsParams {
    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.numel() / self.c_out()
    }

    /// `g · γ / sqrt(fan_in)` per output channel.
    pub fn gamma_eff(&self) -> Vec<f64> {
        let root = (self.fan_in() as f64).sqrt();
        self.gain.iter().map(|g| g * self.gamma_nl / root).collect()
    }
}

/// Standardized weight `γ_eff · (W - μ) / σ` per output row, with
/// `σ = sqrt(max(var, eps))`.
pub fn sws_standardize(p: &SwsParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.constant(p.weight.clone());
    let g = tape.constant(Tensor::from_vec(&[p.gain.len()], p.gain.clone())?);
    let out = tape.standardize_weight(w, g, p.gamma_nl, p.eps)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn params(weight: Tensor, gamma_nl: f64) -> SwsParams {
        let c = weight.dims()[0];
        SwsParams {
            weight,
            gain: vec![1.0; c],
            gamma_nl,
            bias: vec![0.0; c],
            eps: 1e-5,
        }
    }

    #[test]
    fn test_gamma_values() {
        assert_eq!(gamma_for_nonlinearity("identity").unwrap(), 1.0);
        let g = gamma_for_nonlinearity("relu").unwrap();
        assert!((g * g * (1.0 - 1.0 / std::f64::consts::PI) / 2.0 - 1.0).abs() < 1e-15);
        assert!(gamma_for_nonlinearity("swish").is_err());
    }

    #[test]
    fn test_relu_gamma_monte_carlo() {
        let g = Nonlinearity::Relu.gamma();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = g * z.max(0.0);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn test_constant_row_maps_to_zero() {
        let p = params(Tensor::ones(&[1, 4]).unwrap(), 1.0);
        let w = sws_standardize(&p).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_two_element_row() {
        let g = Nonlinearity::Relu.gamma();
        let p = params(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap(), g);
        let w = sws_standardize(&p).unwrap();
        // row mean 0, population variance 1, so the row is scaled by γ/√2 only
        let ge = g / 2f64.sqrt();
        assert!((w.data()[0] - ge).abs() < 1e-15);
        assert!((w.data()[1] + ge).abs() < 1e-15);
        assert!((p.gamma_eff()[0] - ge).abs() < 1e-15);
    }

    #[test]
    fn test_unit_rows_before_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Tensor::randn(&[8, 18], 3.0, &mut rng).unwrap();
        let mut p = params(raw, 1.0);
        // γ_eff = 1 so the output is the unit-standardized row
        p.gain = vec![(18f64).sqrt(); 8];
        let w = sws_standardize(&p).unwrap();
        for row in w.data().chunks(18) {
            let mean = row.iter().sum::<f64>() / 18.0;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0).sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn test_fan_in_one_is_error() {
        let p = params(Tensor::ones(&[3, 1]).unwrap(), 1.0);
        assert!(sws_standardize(&p).is_err());
    }
}
