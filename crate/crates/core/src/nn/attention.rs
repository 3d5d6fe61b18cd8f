//! Channel-attention blocks: squeeze-excitation, ECA and CBAM.
//!
//! Each block returns `(output, S)` where `S[B, C]` holds the channel gates.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Se,
    Eca,
    Cbam,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Reduction ratio of the SE / CBAM bottleneck.
    pub reduction: usize,
    /// ECA kernel length.
    pub eca_kernel: usize,
    /// CBAM spatial kernel size.
    pub spatial_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Se,
            reduction: 4,
            eca_kernel: 3,
            spatial_kernel: 7,
        }
    }
}

impl AttentionConfig {
    pub fn none() -> Self {
        AttentionConfig {
            kind: AttentionKind::None,
            ..Default::default()
        }
    }

    pub fn with_kind(kind: AttentionKind) -> Self {
        AttentionConfig {
            kind,
            ..Default::default()
        }
    }

    /// Bottleneck width for `channels` inputs.
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttentionKind::Se | AttentionKind::Cbam if self.reduction == 0 => {
                Err(Error::config("attention reduction must be >= 1"))
            }
            AttentionKind::Eca if self.eca_kernel % 2 == 0 => Err(Error::config(format!(
                "eca kernel size {} must be odd",
                self.eca_kernel
            ))),
            AttentionKind::Cbam if self.spatial_kernel % 2 == 0 => Err(Error::config(format!(
                "cbam spatial kernel size {} must be odd",
                self.spatial_kernel
            ))),
            _ => Ok(()),
        }
    }
}

/// Shared two-layer gate MLP: `w1[hidden, C]`, `w2[C, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    fn apply(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = tape.linear(z, self.w1, Some(self.b1))?;
        let h = tape.relu(h)?;
        tape.linear(h, self.w2, Some(self.b2))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CbamVars {
    pub mlp: MlpVars,
    /// `[1, 2, k, k]` over the (mean, max) channel-pooled maps.
    pub spatial_w: Var,
    pub spatial_b: Var,
}

/// `S = sigmoid(W2 relu(W1 GAP(x) + b1) + b2)`, output `S ⊙ x`.
pub fn se_block(tape: &mut Tape, x: Var, p: &MlpVars) -> Result<(Var, Var)> {
    let z = tape.global_avg_pool(x)?;
    let pre = p.apply(tape, z)?;
    let s = tape.sigmoid(pre)?;
    let y = tape.channel_scale(x, s)?;
    Ok((y, s))
}

/// `S = sigmoid(conv1d(GAP(x), kernel))` along the channel axis.
pub fn eca_block(tape: &mut Tape, x: Var, kernel: Var) -> Result<(Var, Var)> {
    let z = tape.global_avg_pool(x)?;
    let pre = tape.channel_conv1d(z, kernel)?;
    let s = tape.sigmoid(pre)?;
    let y = tape.channel_scale(x, s)?;
    Ok((y, s))
}

/// Channel gate from the shared MLP on average- and max-pooled descriptors,
/// then a spatial gate from a conv over channel-pooled maps.
pub fn cbam_block(tape: &mut Tape, x: Var, p: &CbamVars) -> Result<(Var, Var)> {
    let k = tape.value(p.spatial_w).dims().last().copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(Error::config(format!("cbam spatial kernel size {k} must be odd")));
    }
    let avg = tape.global_avg_pool(x)?;
    let max = tape.global_max_pool(x)?;
    let a = p.mlp.apply(tape, avg)?;
    let m = p.mlp.apply(tape, max)?;
    let pre = tape.add(a, m)?;
    let s = tape.sigmoid(pre)?;
    let xc = tape.channel_scale(x, s)?;
    let mean = tape.channel_mean(xc)?;
    let mx = tape.channel_max(xc)?;
    let pooled = tape.concat_channels(mean, mx)?;
    let sp = tape.conv2d(pooled, p.spatial_w, Some(p.spatial_b), 1, k / 2)?;
    let sp = tape.sigmoid(sp)?;
    let y = tape.spatial_scale(xc, sp)?;
    Ok((y, s))
}
