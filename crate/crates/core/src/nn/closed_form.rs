//! Dual-path evaluation of the channel descriptor fed to channel attention
//! after a 1×1 convolution.
//!
//! Path one runs the layer and spatially averages its output. Path two uses
//! the closed form, in which the spatial average moves through the
//! convolution onto the input channel means:
//!
//! * normalized layer: `Z = γ/σ · W·x̄ − μγ/σ + β`
//! * standardized layer: `Z = γ_eff/σ_W · W·x̄ − μ_W γ_eff/σ_W · Σx̄ + β`

use super::norm::{norm_forward, Mode, NormConfig, NormKind, RunningStats};
use super::sws::SwsParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub enum ClosedFormLayer {
    /// Bias-free 1×1 conv `weight[C_out, C_in, 1, 1]` followed by an
    /// activation norm in train mode.
    Normalized {
        weight: Tensor,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        norm: NormConfig,
    },
    /// Standardized 1×1 conv with bias.
    Standardized(SwsParams),
}

/// Returns `(Z from GAP of the layer output, Z from the closed form)`, both
/// `[B, C_out]`.
pub fn gap_closed_form(x: &Tensor, layer: &ClosedFormLayer) -> Result<(Tensor, Tensor)> {
    let weight = match layer {
        ClosedFormLayer::Normalized { weight, .. } => weight,
        ClosedFormLayer::Standardized(p) => &p.weight,
    };
    let (co, ci, kh, kw) = weight
        .shape()
        .bchw()
        .ok_or_else(|| Error::invalid("closed form needs a rank-4 conv weight"))?;
    if (kh, kw) != (1, 1) {
        return Err(Error::invalid(format!(
            "closed form applies to 1x1 convolutions, got {kh}x{kw}"
        )));
    }
    let (b, xc, h, w) = x
        .shape()
        .bchw()
        .ok_or_else(|| Error::shape("gap_closed_form", x.dims(), weight.dims()))?;
    if xc != ci {
        return Err(Error::shape("gap_closed_form", x.dims(), weight.dims()));
    }
    let hw = h * w;
    let xbar: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    let wx = |wd: &[f64], bi: usize, o: usize| -> f64 {
        (0..ci).map(|c| wd[o * ci + c] * xbar[bi * ci + c]).sum()
    };

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    match layer {
        ClosedFormLayer::Normalized {
            weight,
            gamma,
            beta,
            norm,
        } => {
            if norm.kind == NormKind::None {
                return Err(Error::invalid("normalized closed form needs a norm kind"));
            }
            let wv = tape.constant(weight.clone());
            let a = tape.conv2d(xv, wv, None, 1, 0)?;
            let g = tape.constant(Tensor::from_vec(&[co], gamma.clone())?);
            let bt = tape.constant(Tensor::from_vec(&[co], beta.clone())?);
            let rs = RunningStats::new(co);
            let (y, _) = norm_forward(&mut tape, a, g, bt, norm, Mode::Train, Some(&rs))?;
            let z = tape.global_avg_pool(y)?;
            let direct = tape.value(z).clone();

            // Statistics over the normalized axes of the conv output.
            let ad = tape.value(a).data().to_vec();
            let groups = match norm.kind {
                NormKind::Group => norm.groups,
                _ => 1,
            };
            let per_group = co / groups;
            let mut closed = vec![0.0; b * co];
            let stat = |sel: &dyn Fn(usize, usize) -> bool| -> (f64, f64) {
                let mut n = 0.0;
                let mut s = 0.0;
                for bi in 0..b {
                    for o in 0..co {
                        if sel(bi, o) {
                            s += ad[(bi * co + o) * hw..(bi * co + o + 1) * hw].iter().sum::<f64>();
                            n += hw as f64;
                        }
                    }
                }
                let mean = s / n;
                let mut v = 0.0;
                for bi in 0..b {
                    for o in 0..co {
                        if sel(bi, o) {
                            v += ad[(bi * co + o) * hw..(bi * co + o + 1) * hw]
                                .iter()
                                .map(|a| (a - mean).powi(2))
                                .sum::<f64>();
                        }
                    }
                }
                (mean, (v / n + norm.eps).sqrt())
            };
            for bi in 0..b {
                for o in 0..co {
                    let (mu, sigma) = match norm.kind {
                        NormKind::Batch => stat(&|_, oo| oo == o),
                        _ => stat(&|bb, oo| bb == bi && oo / per_group == o / per_group),
                    };
                    closed[bi * co + o] =
                        gamma[o] / sigma * wx(weight.data(), bi, o) - mu * gamma[o] / sigma + beta[o];
                }
            }
            Ok((direct, Tensor::from_vec(&[b, co], closed)?))
        }
        ClosedFormLayer::Standardized(p) => {
            let wv = tape.constant(p.weight.clone());
            let gv = tape.constant(Tensor::from_vec(&[co], p.gain.clone())?);
            let bv = tape.constant(Tensor::from_vec(&[co], p.bias.clone())?);
            let what = tape.standardize_weight(wv, gv, p.gamma_nl, p.eps)?;
            let y = tape.conv2d(xv, what, Some(bv), 1, 0)?;
            let z = tape.global_avg_pool(y)?;
            let direct = tape.value(z).clone();

            let gamma_eff = p.gamma_eff();
            let wd = p.weight.data();
            let mut closed = vec![0.0; b * co];
            for o in 0..co {
                let row = &wd[o * ci..(o + 1) * ci];
                let mu = row.iter().sum::<f64>() / ci as f64;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / ci as f64;
                let sigma = var.max(p.eps).sqrt();
                for bi in 0..b {
                    let xsum: f64 = xbar[bi * ci..(bi + 1) * ci].iter().sum();
                    closed[bi * co + o] = gamma_eff[o] / sigma * wx(wd, bi, o)
                        - mu * gamma_eff[o] / sigma * xsum
                        + p.bias[o];
                }
            }
            Ok((direct, Tensor::from_vec(&[b, co], closed)?))
        }
    }
}
