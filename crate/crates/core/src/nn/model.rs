//! Declarative toy residual networks for the five compared architectures.
//!
//! All models share one skeleton: stem conv, `N` stages of two-conv residual
//! blocks (the first block of stages after the first halves the resolution),
//! global average pooling and a linear head.
//!
//! * `bn_resnet`, `gn_resnet`, `se_resnet`: post-activation blocks
//!   `conv-norm-relu-conv-norm[-SE] + shortcut -> relu`.
//! * `nf_resnet`, `anfr`: pre-activation normalizer-free blocks with
//!   standardized convs. Block input `h` enters as `relu(h / β)`, where `β²` is
//!   the analytically tracked variance of `h`; the residual branch is scaled by
//!   `α` before the add. `anfr` places the attention block where `se_resnet`
//!   does: after the second conv, before the add.

use super::attention::{cbam_block, eca_block, se_block, AttentionConfig, AttentionKind, CbamVars, MlpVars};
use super::norm::{norm_forward, Mode, NormConfig, NormKind, RunningStats, DEFAULT_EPS};
use super::sws::Nonlinearity;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Named parameter tensors in a fixed order.
pub type NamedParams = IndexMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    BnResnet,
    GnResnet,
    SeResnet,
    NfResnet,
    Anfr,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::BnResnet,
        Architecture::GnResnet,
        Architecture::SeResnet,
        Architecture::NfResnet,
        Architecture::Anfr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::BnResnet => "bn_resnet",
            Architecture::GnResnet => "gn_resnet",
            Architecture::SeResnet => "se_resnet",
            Architecture::NfResnet => "nf_resnet",
            Architecture::Anfr => "anfr",
        }
    }

    pub fn norm_kind(self) -> NormKind {
        match self {
            Architecture::BnResnet | Architecture::SeResnet => NormKind::Batch,
            Architecture::GnResnet => NormKind::Group,
            Architecture::NfResnet | Architecture::Anfr => NormKind::None,
        }
    }

    pub fn is_normalizer_free(self) -> bool {
        self.norm_kind() == NormKind::None
    }

    pub fn default_attention(self) -> AttentionKind {
        match self {
            Architecture::SeResnet | Architecture::Anfr => AttentionKind::Se,
            _ => AttentionKind::None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Channel width of each stage; the stem outputs `widths[0]`.
    pub widths: Vec<usize>,
    /// Residual blocks per stage.
    pub depths: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Square input side length.
    pub image_size: usize,
    /// Defaults to the architecture's attention kind when absent.
    pub attention: Option<AttentionConfig>,
    /// Must match the architecture when given.
    pub norm: Option<NormKind>,
    pub norm_groups: usize,
    /// Residual branch scale of normalizer-free blocks.
    pub alpha: f64,
    /// Gain applied after attention in normalizer-free blocks, compensating
    /// the mean gate value of 0.5 at initialization.
    pub attention_gain: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::new(Architecture::Anfr)
    }
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        ModelSpec {
            architecture,
            widths: vec![16, 32, 64],
            depths: vec![2, 2, 2],
            num_classes: 4,
            in_channels: 3,
            image_size: 16,
            attention: None,
            norm: None,
            norm_groups: 4,
            alpha: 0.2,
            attention_gain: 2.0,
        }
    }

    /// Fills architecture-dependent defaults.
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        if s.attention.is_none() {
            s.attention = Some(AttentionConfig::with_kind(s.architecture.default_attention()));
        }
        if s.norm.is_none() {
            s.norm = Some(s.architecture.norm_kind());
        }
        s
    }

    pub fn attention_config(&self) -> AttentionConfig {
        self.attention
            .unwrap_or_else(|| AttentionConfig::with_kind(self.architecture.default_attention()))
    }

    pub fn norm_config(&self) -> NormConfig {
        match self.architecture.norm_kind() {
            NormKind::Batch => NormConfig::batch(),
            NormKind::Group => NormConfig::group(self.norm_groups),
            NormKind::Layer => NormConfig::layer(),
            NormKind::None => NormConfig::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture;
        if self.widths.is_empty() || self.widths.len() != self.depths.len() {
            return Err(Error::config(format!(
                "widths {:?} and depths {:?} must be non-empty and equally long",
                self.widths, self.depths
            )));
        }
        if self.widths.iter().any(|&w| w < 2) || self.depths.iter().any(|&d| d == 0) {
            return Err(Error::config("stage widths must be >= 2 and depths >= 1"));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::config("need >= 2 classes and >= 1 input channel"));
        }
        let factor = 1usize << (self.widths.len() - 1);
        if self.image_size < factor || self.image_size % factor != 0 {
            return Err(Error::config(format!(
                "image size {} must be divisible by {factor} for {} stages",
                self.image_size,
                self.widths.len()
            )));
        }
        if let Some(norm) = self.norm {
            if norm != arch.norm_kind() {
                return Err(Error::config(format!(
                    "{arch} requires norm {:?}, got {norm:?}",
                    arch.norm_kind()
                )));
            }
        }
        let att = self.attention_config();
        att.validate()?;
        match (arch, att.kind) {
            (Architecture::Anfr, _) => {}
            (Architecture::SeResnet, AttentionKind::Se) => {}
            (a, k) if k == a.default_attention() => {}
            (a, k) => {
                return Err(Error::config(format!("{a} does not support attention {k:?}")));
            }
        }
        if arch.norm_kind() == NormKind::Group {
            for &w in &self.widths {
                NormConfig::group(self.norm_groups).validate(w)?;
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.attention_gain > 0.0 && self.attention_gain.is_finite()) {
            return Err(Error::config("attention_gain must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Conv,
    Norm,
    Attention,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamInfo {
    /// Buffers (running statistics) receive no gradient.
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
struct BlockPlan {
    name: String,
    out_ch: usize,
    downsample: bool,
    projection: bool,
    /// Expected std of the block input (normalizer-free only).
    beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub stats: RunningStats,
}

/// Activations seen by the analysis probes of one residual block.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub block: usize,
    /// ReLU output feeding the second conv.
    pub pre_attention: Var,
    /// ReLU of the block output.
    pub post_attention: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Non-negative feature map fed to global pooling.
    pub features: Var,
    pub stage_outputs: Vec<Var>,
    pub probes: Vec<Probe>,
    /// Channel gates `[B, C]` of each attention block, in block order.
    pub attention: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Trainable parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: "not bound".into(),
        })
    }

    /// Replaces the variable used for `name`.
    pub fn set(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Parameter {
                name: name.to_string(),
                reason: "not a trainable parameter".into(),
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter (zeros where unused).
    pub fn grads(&self, tape: &Tape) -> NamedParams {
        self.vars.iter().map(|(n, &v)| (n.clone(), tape.grad_or_zeros(v))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: NamedParams,
    info: IndexMap<String, ParamInfo>,
    plan: Vec<BlockPlan>,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: NamedParams,
    info: IndexMap<String, ParamInfo>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor, trainable: bool, group: ParamGroup) {
        self.info.insert(name.clone(), ParamInfo { trainable, group });
        self.params.insert(name, t);
    }

    fn he(&mut self, name: String, dims: &[usize], fan_in: usize, group: ParamGroup) -> Result<()> {
        let t = Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), self.rng)?;
        self.add(name, t, true, group);
        Ok(())
    }

    fn conv(&mut self, prefix: &str, co: usize, ci: usize, k: usize, sws: bool) -> Result<()> {
        self.he(format!("{prefix}.weight"), &[co, ci, k, k], ci * k * k, ParamGroup::Conv)?;
        if sws {
            self.add(format!("{prefix}.gain"), Tensor::ones(&[co])?, true, ParamGroup::Conv);
            self.add(format!("{prefix}.bias"), Tensor::zeros(&[co])?, true, ParamGroup::Conv);
        }
        Ok(())
    }

    fn norm(&mut self, prefix: &str, c: usize, kind: NormKind) -> Result<()> {
        if kind == NormKind::None {
            return Ok(());
        }
        self.add(format!("{prefix}.gamma"), Tensor::ones(&[c])?, true, ParamGroup::Norm);
        self.add(format!("{prefix}.beta"), Tensor::zeros(&[c])?, true, ParamGroup::Norm);
        if kind == NormKind::Batch {
            self.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c])?, false, ParamGroup::Norm);
            self.add(format!("{prefix}.running_var"), Tensor::ones(&[c])?, false, ParamGroup::Norm);
        }
        Ok(())
    }

    fn attention(&mut self, prefix: &str, c: usize, cfg: &AttentionConfig) -> Result<()> {
        let a = ParamGroup::Attention;
        match cfg.kind {
            AttentionKind::None => {}
            AttentionKind::Eca => {
                let k = cfg.eca_kernel;
                self.he(format!("{prefix}.kernel"), &[k], k, a)?;
            }
            AttentionKind::Se | AttentionKind::Cbam => {
                let h = cfg.hidden(c);
                self.he(format!("{prefix}.fc1.weight"), &[h, c], c, a)?;
                self.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[h])?, true, a);
                self.he(format!("{prefix}.fc2.weight"), &[c, h], h, a)?;
                self.add(format!("{prefix}.fc2.bias"), Tensor::zeros(&[c])?, true, a);
                if cfg.kind == AttentionKind::Cbam {
                    let k = cfg.spatial_kernel;
                    self.he(format!("{prefix}.spatial.weight"), &[1, 2, k, k], 2 * k * k, a)?;
                    self.add(format!("{prefix}.spatial.bias"), Tensor::zeros(&[1])?, true, a);
                }
            }
        }
        Ok(())
    }
}

/// Instantiates `spec` with He-normal weights drawn from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let spec = spec.resolved();
    let arch = spec.architecture;
    let nf = arch.is_normalizer_free();
    let norm = arch.norm_kind();
    let att = spec.attention_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        params: IndexMap::new(),
        info: IndexMap::new(),
    };

    b.conv("stem.conv", spec.widths[0], spec.in_channels, 3, nf)?;
    b.norm("stem.norm", spec.widths[0], norm)?;

    let mut plan = Vec::new();
    let mut in_ch = spec.widths[0];
    let mut expected_var: f64 = 1.0;
    for (s, (&width, &depth)) in spec.widths.iter().zip(&spec.depths).enumerate() {
        for d in 0..depth {
            let name = format!("stage{s}.block{d}");
            let downsample = s > 0 && d == 0;
            let projection = downsample || in_ch != width;
            let k1 = if downsample { 4 } else { 3 };
            b.conv(&format!("{name}.conv1"), width, in_ch, k1, nf)?;
            b.norm(&format!("{name}.norm1"), width, norm)?;
            b.conv(&format!("{name}.conv2"), width, width, 3, nf)?;
            b.norm(&format!("{name}.norm2"), width, norm)?;
            b.attention(&format!("{name}.attn"), width, &att)?;
            if projection {
                let ks = if downsample { 2 } else { 1 };
                b.conv(&format!("{name}.shortcut.conv"), width, in_ch, ks, nf)?;
                b.norm(&format!("{name}.shortcut.norm"), width, norm)?;
            }
            let beta = expected_var.sqrt();
            // A projection shortcut sees the unit-variance pre-activation, so
            // the tracked variance restarts from 1.
            if projection {
                expected_var = 1.0;
            }
            expected_var += spec.alpha * spec.alpha;
            plan.push(BlockPlan {
                name,
                out_ch: width,
                downsample,
                projection,
                beta,
            });
            in_ch = width;
        }
    }
    b.he("head.weight".into(), &[spec.num_classes, in_ch], in_ch, ParamGroup::Classifier)?;
    b.add("head.bias".into(), Tensor::zeros(&[spec.num_classes])?, true, ParamGroup::Classifier);

    let (params, info) = (b.params, b.info);
    Ok(Model {
        spec,
        params,
        info,
        plan,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &NamedParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut NamedParams {
        &mut self.params
    }

    pub fn info(&self) -> &IndexMap<String, ParamInfo> {
        &self.info
    }

    pub fn param_info(&self, name: &str) -> Option<ParamInfo> {
        self.info.get(name).copied()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.spec.architecture.norm_kind() == NormKind::Batch
    }

    pub fn has_attention(&self) -> bool {
        self.spec.attention_config().kind != AttentionKind::None
    }

    pub fn num_blocks(&self) -> usize {
        self.plan.len()
    }

    pub fn block_names(&self) -> Vec<String> {
        self.plan.iter().map(|p| p.name.clone()).collect()
    }

    /// Expected input std used by each normalizer-free block.
    pub fn block_betas(&self) -> Vec<f64> {
        self.plan.iter().map(|p| p.beta).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.info.iter().filter(|(_, i)| i.trainable).map(|(n, _)| n.clone()).collect()
    }

    /// Overwrites parameters by name; every name must exist with the same
    /// shape. Names absent from `values` keep their current value.
    pub fn load(&mut self, values: &NamedParams) -> Result<()> {
        for (name, t) in values {
            let cur = self.params.get_mut(name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                reason: "unknown parameter".into(),
            })?;
            if cur.dims() != t.dims() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: format!("shape {:?} does not match {:?}", t.dims(), cur.dims()),
                });
            }
            *cur = t.clone();
        }
        Ok(())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut m = NamedParams::new();
        m.insert(name.to_string(), value);
        self.load(&m)
    }

    /// Applies running-statistic updates produced by a train-mode forward.
    pub fn commit(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            let c = u.stats.mean.len();
            let mut m = NamedParams::new();
            m.insert(format!("{}.running_mean", u.prefix), Tensor::from_vec(&[c], u.stats.mean.clone())?);
            m.insert(format!("{}.running_var", u.prefix), Tensor::from_vec(&[c], u.stats.var.clone())?);
            self.load(&m)?;
        }
        Ok(())
    }

    /// Registers every trainable parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(n, _)| self.info[n.as_str()].trainable)
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    fn conv(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var, geom: (usize, usize), gamma: f64) -> Result<Var> {
        let w = p.get(&format!("{prefix}.weight"))?;
        if self.spec.architecture.is_normalizer_free() {
            let g = p.get(&format!("{prefix}.gain"))?;
            let b = p.get(&format!("{prefix}.bias"))?;
            let wh = tape.standardize_weight(w, g, gamma, DEFAULT_EPS)?;
            tape.conv2d(x, wh, Some(b), geom.0, geom.1)
        } else {
            tape.conv2d(x, w, None, geom.0, geom.1)
        }
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let cfg = self.spec.norm_config();
        if cfg.kind == NormKind::None {
            return Ok(x);
        }
        let g = p.get(&format!("{prefix}.gamma"))?;
        let b = p.get(&format!("{prefix}.beta"))?;
        let running = if cfg.kind == NormKind::Batch {
            let mean = self.buffer(&format!("{prefix}.running_mean"))?;
            let var = self.buffer(&format!("{prefix}.running_var"))?;
            Some(RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            })
        } else {
            None
        };
        let (y, upd) = norm_forward(tape, x, g, b, &cfg, mode, running.as_ref())?;
        if let Some(stats) = upd {
            updates.push(BnUpdate {
                prefix: prefix.to_string(),
                stats,
            });
        }
        Ok(y)
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: "missing buffer".into(),
        })
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Option<(Var, Var)>> {
        let cfg = self.spec.attention_config();
        let mlp = |p: &Bound| -> Result<MlpVars> {
            Ok(MlpVars {
                w1: p.get(&format!("{prefix}.fc1.weight"))?,
                b1: p.get(&format!("{prefix}.fc1.bias"))?,
                w2: p.get(&format!("{prefix}.fc2.weight"))?,
                b2: p.get(&format!("{prefix}.fc2.bias"))?,
            })
        };
        let out = match cfg.kind {
            AttentionKind::None => return Ok(None),
            AttentionKind::Se => se_block(tape, x, &mlp(p)?)?,
            AttentionKind::Eca => eca_block(tape, x, p.get(&format!("{prefix}.kernel"))?)?,
            AttentionKind::Cbam => {
                let v = CbamVars {
                    mlp: mlp(p)?,
                    spatial_w: p.get(&format!("{prefix}.spatial.weight"))?,
                    spatial_b: p.get(&format!("{prefix}.spatial.bias"))?,
                };
                cbam_block(tape, x, &v)?
            }
        };
        Ok(Some(out))
    }

    /// Runs the network on `x[B, C, H, W]`. Train mode uses batch statistics
    /// and reports running-statistic updates, which are applied separately
    /// with [`Model::commit`].
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Forward> {
        let dims = tape.value(x).dims().to_vec();
        let s = &self.spec;
        if dims.len() != 4 || dims[1..] != [s.in_channels, s.image_size, s.image_size] {
            return Err(Error::shape(
                "model input",
                &dims,
                &[0, s.in_channels, s.image_size, s.image_size],
            ));
        }
        let nf = s.architecture.is_normalizer_free();
        let g_relu = Nonlinearity::Relu.gamma();
        let mut updates = Vec::new();
        let mut probes = Vec::new();
        let mut gates = Vec::new();
        let mut stage_outputs = Vec::new();

        let mut h = self.conv(tape, p, "stem.conv", x, (1, 1), 1.0)?;
        if !nf {
            h = self.norm(tape, p, "stem.norm", h, mode, &mut updates)?;
            h = tape.relu(h)?;
        }
        for (i, blk) in self.plan.iter().enumerate() {
            let n = &blk.name;
            let geom1 = if blk.downsample { (2, 1) } else { (1, 1) };
            let geom_sc = if blk.downsample { (2, 0) } else { (1, 0) };
            if nf {
                let scaled = tape.scale(h, 1.0 / blk.beta)?;
                let a = tape.relu(scaled)?;
                let shortcut = if blk.projection {
                    self.conv(tape, p, &format!("{n}.shortcut.conv"), a, geom_sc, g_relu)?
                } else {
                    h
                };
                let o = self.conv(tape, p, &format!("{n}.conv1"), a, geom1, g_relu)?;
                let pre = tape.relu(o)?;
                let mut o = self.conv(tape, p, &format!("{n}.conv2"), pre, (1, 1), g_relu)?;
                if let Some((y, gate)) = self.attention(tape, p, &format!("{n}.attn"), o)? {
                    gates.push(gate);
                    o = tape.scale(y, s.attention_gain)?;
                }
                let o = tape.scale(o, s.alpha)?;
                h = tape.add(o, shortcut)?;
                let post = tape.relu(h)?;
                probes.push(Probe {
                    block: i,
                    pre_attention: pre,
                    post_attention: post,
                });
            } else {
                let o = self.conv(tape, p, &format!("{n}.conv1"), h, geom1, 1.0)?;
                let o = self.norm(tape, p, &format!("{n}.norm1"), o, mode, &mut updates)?;
                let pre = tape.relu(o)?;
                let o = self.conv(tape, p, &format!("{n}.conv2"), pre, (1, 1), 1.0)?;
                let mut o = self.norm(tape, p, &format!("{n}.norm2"), o, mode, &mut updates)?;
                if let Some((y, gate)) = self.attention(tape, p, &format!("{n}.attn"), o)? {
                    gates.push(gate);
                    o = y;
                }
                let shortcut = if blk.projection {
                    let sc = self.conv(tape, p, &format!("{n}.shortcut.conv"), h, geom_sc, 1.0)?;
                    self.norm(tape, p, &format!("{n}.shortcut.norm"), sc, mode, &mut updates)?
                } else {
                    h
                };
                let sum = tape.add(o, shortcut)?;
                h = tape.relu(sum)?;
                probes.push(Probe {
                    block: i,
                    pre_attention: pre,
                    post_attention: h,
                });
            }
            let last_in_stage = self.plan.get(i + 1).is_none_or(|next| next.out_ch != blk.out_ch || next.downsample);
            if last_in_stage {
                stage_outputs.push(h);
            }
        }
        let features = probes.last().map(|p| p.post_attention).unwrap_or(h);
        let z = tape.global_avg_pool(features)?;
        let logits = tape.linear(z, p.get("head.weight")?, Some(p.get("head.bias")?))?;
        Ok(Forward {
            logits,
            features,
            stage_outputs,
            probes,
            attention: gates,
            bn_updates: updates,
        })
    }

    /// Eval-mode logits `[N, K]`, processed in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.dims()[0];
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n * self.spec.num_classes);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(x.slice_outer(start, end)?);
            let f = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
            out.extend_from_slice(tape.value(f.logits).data());
            start = end;
        }
        Tensor::from_vec(&[n, self.spec.num_classes], out)
    }
}
