use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Softmax cross-entropy; targets are class indices stored as f64.
    CrossEntropy,
    /// Sigmoid binary cross-entropy on logits; targets share the pred shape.
    Bce,
    /// Softmax focal loss with focusing parameter `gamma`.
    Focal { gamma: f64 },
}

/// Axes over which an activation normalization computes its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// Per channel over (B, H, W).
    Batch,
    /// Per sample over (C/G, H, W) for each of `G` channel groups.
    /// `Group(1)` is layer normalization.
    Group(usize),
}

/// Biased statistics computed by a normalization node, one entry per
/// statistics group (per channel for batch norm, per sample-group otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements contributing to each statistic.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Act(Var, Activation),
    Gap(Var),
    GlobalMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    SpatialScale {
        x: Var,
        m: Var,
    },
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Standardize {
        weight: Var,
        gain: Var,
        gamma_nl: f64,
        unit: Vec<f64>,
        inv_sigma: Vec<f64>,
        clamped: Vec<bool>,
    },
    ChannelConv1d {
        z: Var,
        kernel: Var,
    },
    Loss {
        pred: Var,
        target: Tensor,
        kind: LossKind,
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. `backward` may run once; afterwards gradients are read
/// with [`Tape::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    t.shape()
        .bchw()
        .ok_or_else(|| Error::invalid(format!("{op}: expected rank-4 input, got {:?}", t.dims())))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Segments `(start, len)` of the flat `[B, C, H, W]` buffer belonging to each
/// statistics group.
fn norm_groups(axes: NormAxes, b: usize, c: usize, hw: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    match axes {
        NormAxes::Batch => Ok((0..c)
            .map(|ch| (0..b).map(|bi| (bi * c * hw + ch * hw, hw)).collect())
            .collect()),
        NormAxes::Group(g) => {
            if g == 0 || c % g != 0 {
                return Err(Error::config(format!(
                    "group count {g} does not divide channel count {c}"
                )));
            }
            let cg = c / g;
            Ok((0..b)
                .flat_map(|bi| (0..g).map(move |gi| vec![(bi * c * hw + gi * cg * hw, cg * hw)]))
                .collect())
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backward root with respect to `v`, available after
    /// [`Tape::backward`] for nodes that require gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::from_vec(self.nodes[v.0].value.dims(), g.clone())
                .expect("gradient shape matches value shape"),
        )
    }

    /// Like [`Tape::grad`] but returns zeros for required-grad nodes the root
    /// does not depend on.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| {
            Tensor::zeros(self.nodes[v.0].value.dims()).expect("valid shape")
        })
    }

    // ----------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(weight)?;
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let (b, c_in, h, w) = dims4(x, "conv2d")?;
        let (c_out, wc_in, kh, kw) = wt
            .shape()
            .bchw()
            .ok_or_else(|| Error::shape("conv2d", x.dims(), wt.dims()))?;
        if wc_in != c_in {
            return Err(Error::shape("conv2d", x.dims(), wt.dims()));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        let (span_h, span_w) = (h + 2 * padding - kh, w + 2 * padding - kw);
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::config(format!(
                "conv2d: output extent ({h}+2*{padding}-{kh})/{stride}+1 is not an integer"
            )));
        }
        let (ho, wo) = (span_h / stride + 1, span_w / stride + 1);
        if let Some(bv) = bias {
            self.check_var(bv)?;
            let bt = &self.nodes[bv.0].value;
            if bt.dims() != [c_out] {
                return Err(Error::shape("conv2d bias", bt.dims(), &[c_out]));
            }
        }
        let k = c_in * kh * kw;
        let p = ho * wo;
        let mut cols = vec![0.0; b * k * p];
        let mut out = vec![0.0; b * c_out * p];
        for bi in 0..b {
            let col_b = &mut cols[bi * k * p..(bi + 1) * k * p];
            im2col(
                &x.data()[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                col_b,
            );
            gemm(
                c_out,
                k,
                p,
                wt.data(),
                false,
                col_b,
                false,
                &mut out[bi * c_out * p..(bi + 1) * c_out * p],
                false,
            );
        }
        if let Some(bv) = bias {
            let bt = self.nodes[bv.0].value.data();
            for bi in 0..b {
                for (co, &bias_v) in bt.iter().enumerate() {
                    let start = (bi * c_out + co) * p;
                    out[start..start + p].iter_mut().for_each(|o| *o += bias_v);
                }
            }
        }
        let value = Tensor::from_vec(&[b, c_out, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            },
            &inputs,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(weight)?;
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let (b, f_in) = match x.dims() {
            &[b, f] => (b, f),
            d => return Err(Error::shape("linear", d, wt.dims())),
        };
        let f_out = match wt.dims() {
            &[o, i] if i == f_in => o,
            d => return Err(Error::shape("linear", x.dims(), d)),
        };
        let mut out = vec![0.0; b * f_out];
        gemm(b, f_in, f_out, x.data(), false, wt.data(), true, &mut out, false);
        if let Some(bv) = bias {
            self.check_var(bv)?;
            let bt = &self.nodes[bv.0].value;
            if bt.dims() != [f_out] {
                return Err(Error::shape("linear bias", bt.dims(), &[f_out]));
            }
            for row in out.chunks_mut(f_out) {
                row.iter_mut().zip(bt.data()).for_each(|(o, bv)| *o += bv);
            }
        }
        let value = Tensor::from_vec(&[b, f_out], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &inputs))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        self.check_var(input)?;
        let x = &self.nodes[input.0].value;
        let data = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let value = Tensor::from_vec(x.dims(), data)?;
        Ok(self.push(value, Op::Act(input, kind), &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "global_avg_pool")?;
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::from_vec(&[b, c], data)?;
        Ok(self.push(value, Op::Gap(input), &[input]))
    }

    /// `[B, C, H, W] -> [B, C]` spatial max.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "global_max_pool")?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(b * c);
        let mut data = Vec::with_capacity(b * c);
        for (i, plane) in x.data().chunks(hw).enumerate() {
            let (j, &m) = plane
                .iter()
                .enumerate()
                .fold((0, &plane[0]), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
            argmax.push(i * hw + j);
            data.push(m);
        }
        let value = Tensor::from_vec(&[b, c], data)?;
        Ok(self.push(value, Op::GlobalMax { input, argmax }, &[input]))
    }

    /// `[B, C, H, W] -> [B, 1, H, W]` mean over channels.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "channel_mean")?;
        let hw = h * w;
        let mut data = vec![0.0; b * hw];
        for bi in 0..b {
            let dst = &mut data[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let src = &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let value = Tensor::from_vec(&[b, 1, h, w], data)?;
        Ok(self.push(value, Op::ChannelMean(input), &[input]))
    }

    /// `[B, C, H, W] -> [B, 1, H, W]` max over channels.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let x = &self.nodes[input.0].value;
        let (b, c, h, w) = dims4(x, "channel_max")?;
        let hw = h * w;
        let mut data = vec![f64::NEG_INFINITY; b * hw];
        let mut argmax = vec![0usize; b * hw];
        for bi in 0..b {
            for ci in 0..c {
                for s in 0..hw {
                    let idx = (bi * c + ci) * hw + s;
                    let v = x.data()[idx];
                    if v > data[bi * hw + s] {
                        data[bi * hw + s] = v;
                        argmax[bi * hw + s] = idx;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, 1, h, w], data)?;
        Ok(self.push(value, Op::ChannelMax { input, argmax }, &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ba, ca, ha, wa) = dims4(xa, "concat_channels")?;
        let (bb, cb, hb, wb) = dims4(xb, "concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape("concat_channels", xa.dims(), xb.dims()));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            data.extend_from_slice(&xa.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&xb.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if xa.dims() != xb.dims() {
            return Err(Error::shape("add", xa.dims(), xb.dims()));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::from_vec(xa.dims(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if xa.dims() != xb.dims() {
            return Err(Error::shape("mul", xa.dims(), xb.dims()));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_vec(xa.dims(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_var(a)?;
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(x.dims(), data)?;
        Ok(self.push(value, Op::Scale(a, factor), &[a]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let total = self.nodes[a.0].value.sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let value = self.nodes[a.0].value.reshape(dims)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `x[B, C, H, W] * s[B, C]` broadcast over space.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(s)?;
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let (b, c, h, w) = dims4(xv, "channel_scale")?;
        if sv.dims() != [b, c] {
            return Err(Error::shape("channel_scale", xv.dims(), sv.dims()));
        }
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for (plane, &f) in data.chunks_mut(hw).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_vec(xv.dims(), data)?;
        Ok(self.push(value, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// `x[B, C, H, W] * m[B, 1, H, W]` broadcast over channels.
    pub fn spatial_scale(&mut self, x: Var, m: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(m)?;
        let (xv, mv) = (&self.nodes[x.0].value, &self.nodes[m.0].value);
        let (b, c, h, w) = dims4(xv, "spatial_scale")?;
        if mv.dims() != [b, 1, h, w] {
            return Err(Error::shape("spatial_scale", xv.dims(), mv.dims()));
        }
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for bi in 0..b {
            let mask = &mv.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let plane = &mut data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                plane.iter_mut().zip(mask).for_each(|(v, f)| *v *= f);
            }
        }
        let value = Tensor::from_vec(xv.dims(), data)?;
        Ok(self.push(value, Op::SpatialScale { x, m }, &[x, m]))
    }

    /// Activation normalization `γ (x - μ) / sqrt(σ² + eps) + β` with
    /// statistics taken over `axes`. Returns the output and the biased
    /// statistics that were used.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        eps: f64,
    ) -> Result<(Var, NormStats)> {
        self.check_var(x)?;
        self.check_var(gamma)?;
        self.check_var(beta)?;
        let xv = &self.nodes[x.0].value;
        let (b, c, h, w) = dims4(xv, "normalize")?;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if gv.dims() != [c] || bv.dims() != [c] {
            return Err(Error::shape("normalize affine", gv.dims(), &[c]));
        }
        let hw = h * w;
        let groups = norm_groups(axes, b, c, hw)?;
        let count: usize = groups[0].iter().map(|s| s.1).sum();
        let mut xhat = vec![0.0; xv.numel()];
        let mut means = Vec::with_capacity(groups.len());
        let mut vars = Vec::with_capacity(groups.len());
        let mut inv_std = Vec::with_capacity(groups.len());
        let data = xv.data();
        for segs in &groups {
            let mean = segs
                .iter()
                .map(|&(s, l)| data[s..s + l].iter().sum::<f64>())
                .sum::<f64>()
                / count as f64;
            let var = segs
                .iter()
                .map(|&(s, l)| data[s..s + l].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count as f64;
            let is = 1.0 / (var + eps).sqrt();
            for &(s, l) in segs {
                for i in s..s + l {
                    xhat[i] = (data[i] - mean) * is;
                }
            }
            means.push(mean);
            vars.push(var);
            inv_std.push(is);
        }
        let mut out = vec![0.0; xv.numel()];
        for (idx, o) in out.iter_mut().enumerate() {
            let ch = (idx / hw) % c;
            *o = gv.data()[ch] * xhat[idx] + bv.data()[ch];
        }
        let value = Tensor::from_vec(xv.dims(), out)?;
        let stats = NormStats {
            mean: means,
            var: vars,
            count,
        };
        let var = self.push(
            value,
            Op::Normalize {
                x,
                gamma,
                beta,
                axes,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Per-channel normalization with fixed (running) statistics, as used by
    /// batch norm at inference.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(gamma)?;
        self.check_var(beta)?;
        let xv = &self.nodes[x.0].value;
        let (_, c, h, w) = dims4(xv, "frozen_norm")?;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if gv.dims() != [c] || bv.dims() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape("frozen_norm", xv.dims(), &[mean.len()]));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for (idx, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (idx / hw) % c;
            *xh = (xv.data()[idx] - mean[ch]) * inv_std[ch];
            *o = gv.data()[ch] * *xh + bv.data()[ch];
        }
        let value = Tensor::from_vec(xv.dims(), out)?;
        Ok(self.push(
            value,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled weight standardization of a `[C_out, ...]` weight:
    /// `gain[c] * gamma_nl / sqrt(fan_in) * (W[c] - mean) / sigma`, with
    /// `sigma = sqrt(max(var, eps))` so zero-variance rows map to zero.
    pub fn standardize_weight(
        &mut self,
        weight: Var,
        gain: Var,
        gamma_nl: f64,
        eps: f64,
    ) -> Result<Var> {
        self.check_var(weight)?;
        self.check_var(gain)?;
        let wv = &self.nodes[weight.0].value;
        let gv = &self.nodes[gain.0].value;
        let c_out = *wv
            .dims()
            .first()
            .ok_or_else(|| Error::invalid("standardize_weight: scalar weight"))?;
        if gv.dims() != [c_out] {
            return Err(Error::shape("standardize_weight", wv.dims(), gv.dims()));
        }
        let fan_in = wv.numel() / c_out;
        if fan_in < 2 {
            return Err(Error::invalid("standardize_weight: fan_in must be >= 2"));
        }
        let mut unit = vec![0.0; wv.numel()];
        let mut out = vec![0.0; wv.numel()];
        let mut inv_sigma = Vec::with_capacity(c_out);
        let mut clamped = Vec::with_capacity(c_out);
        let root_fan = (fan_in as f64).sqrt();
        for r in 0..c_out {
            let row = &wv.data()[r * fan_in..(r + 1) * fan_in];
            let mean = row.iter().sum::<f64>() / fan_in as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan_in as f64;
            let is_clamped = var < eps;
            let is = 1.0 / var.max(eps).sqrt();
            let scale = gv.data()[r] * gamma_nl / root_fan;
            for j in 0..fan_in {
                let u = (row[j] - mean) * is;
                unit[r * fan_in + j] = u;
                out[r * fan_in + j] = scale * u;
            }
            inv_sigma.push(is);
            clamped.push(is_clamped);
        }
        let value = Tensor::from_vec(wv.dims(), out)?;
        Ok(self.push(
            value,
            Op::Standardize {
                weight,
                gain,
                gamma_nl,
                unit,
                inv_sigma,
                clamped,
            },
            &[weight, gain],
        ))
    }

    /// Same-padded 1-D cross-correlation along the channel axis of `z[B, C]`
    /// with an odd-length kernel.
    pub fn channel_conv1d(&mut self, z: Var, kernel: Var) -> Result<Var> {
        self.check_var(z)?;
        self.check_var(kernel)?;
        let (zv, kv) = (&self.nodes[z.0].value, &self.nodes[kernel.0].value);
        let (b, c) = match zv.dims() {
            &[b, c] => (b, c),
            d => return Err(Error::shape("channel_conv1d", d, kv.dims())),
        };
        let k = match kv.dims() {
            &[k] => k,
            d => return Err(Error::shape("channel_conv1d", zv.dims(), d)),
        };
        if k % 2 == 0 {
            return Err(Error::config(format!("channel_conv1d: kernel size {k} must be odd")));
        }
        let half = (k / 2) as isize;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = ci as isize + j as isize - half;
                    if src >= 0 && (src as usize) < c {
                        acc += kv.data()[j] * zv.data()[bi * c + src as usize];
                    }
                }
                out[bi * c + ci] = acc;
            }
        }
        let value = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(value, Op::ChannelConv1d { z, kernel }, &[z, kernel]))
    }

    /// Mean-reduced loss. For `CrossEntropy` and `Focal`, `target` holds one
    /// class index per row of `pred[B, K]`; for `Bce` it matches `pred` and
    /// holds values in [0, 1]. `class_weights` (length K) rescale each term.
    pub fn loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        kind: LossKind,
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        self.check_var(pred)?;
        let p = &self.nodes[pred.0].value;
        let (b, k) = match p.dims() {
            &[b, k] => (b, k),
            d => return Err(Error::shape("loss", d, target.dims())),
        };
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::shape("loss class weights", &[w.len()], &[k]));
            }
        }
        let weight = |cls: usize| class_weights.map_or(1.0, |w| w[cls]);
        let total = match kind {
            LossKind::CrossEntropy | LossKind::Focal { .. } => {
                if target.dims() != [b] {
                    return Err(Error::shape("loss target", target.dims(), &[b]));
                }
                let gamma = match kind {
                    LossKind::Focal { gamma } => gamma,
                    _ => 0.0,
                };
                let mut acc = 0.0;
                for (row, &t) in p.data().chunks(k).zip(target.data()) {
                    let cls = class_index(t, k)?;
                    let log_pt = row[cls] - log_sum_exp(row);
                    let term = if gamma == 0.0 {
                        -log_pt
                    } else {
                        -(1.0 - log_pt.exp()).max(0.0).powf(gamma) * log_pt
                    };
                    acc += weight(cls) * term;
                }
                acc / b as f64
            }
            LossKind::Bce => {
                if target.dims() != p.dims() {
                    return Err(Error::shape("loss target", target.dims(), p.dims()));
                }
                let mut acc = 0.0;
                for (i, (&z, &t)) in p.data().iter().zip(target.data()).enumerate() {
                    let term = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                    acc += weight(i % k) * term;
                }
                acc / (b * k) as f64
            }
        };
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::Loss {
                pred,
                target: target.clone(),
                kind,
                weights: class_weights.map(|w| w.to_vec()),
            },
            &[pred],
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar root. Allowed once per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check_var(root)?;
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.dims()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // Keep only gradients of nodes that asked for them.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            } => {
                let (b, c_in, h, w) = val(*input).shape().bchw().unwrap();
                let (c_out, _, kh, kw) = val(*weight).shape().bchw().unwrap();
                let (_, _, ho, wo) = out.shape().bchw().unwrap();
                let (k, p) = (c_in * kh * kw, ho * wo);
                acc(*weight, &mut |dw| {
                    for bi in 0..b {
                        gemm(
                            c_out,
                            p,
                            k,
                            &g[bi * c_out * p..(bi + 1) * c_out * p],
                            false,
                            &cols[bi * k * p..(bi + 1) * k * p],
                            true,
                            dw,
                            true,
                        );
                    }
                });
                if let Some(bv) = bias {
                    acc(*bv, &mut |db| {
                        for bi in 0..b {
                            for (co, d) in db.iter_mut().enumerate() {
                                let s = (bi * c_out + co) * p;
                                *d += g[s..s + p].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let wdata = val(*weight).data();
                acc(*input, &mut |dx| {
                    let mut dcol = vec![0.0; k * p];
                    for bi in 0..b {
                        gemm(
                            k,
                            c_out,
                            p,
                            wdata,
                            true,
                            &g[bi * c_out * p..(bi + 1) * c_out * p],
                            false,
                            &mut dcol,
                            false,
                        );
                        col2im_add(
                            &dcol,
                            c_in,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            ho,
                            wo,
                            &mut dx[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                        );
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let (b, f_in) = (x.dims()[0], x.dims()[1]);
                let f_out = val(*weight).dims()[0];
                acc(*input, &mut |dx| {
                    gemm(b, f_out, f_in, g, false, val(*weight).data(), false, dx, true)
                });
                acc(*weight, &mut |dw| {
                    gemm(f_out, b, f_in, g, true, x.data(), false, dw, true)
                });
                if let Some(bv) = bias {
                    acc(*bv, &mut |db| {
                        for row in g.chunks(f_out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    });
                }
            }
            Op::Act(input, kind) => {
                let x = val(*input).data();
                let y = out.data();
                acc(*input, &mut |dx| match kind {
                    Activation::Relu => {
                        for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                });
            }
            Op::Gap(input) => {
                let (_, _, h, w) = val(*input).shape().bchw().unwrap();
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                acc(*input, &mut |dx| {
                    for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::GlobalMax { input, argmax } | Op::ChannelMax { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        dx[idx] += gv;
                    }
                });
            }
            Op::ChannelMean(input) => {
                let (b, c, h, w) = val(*input).shape().bchw().unwrap();
                let hw = h * w;
                let inv = 1.0 / c as f64;
                acc(*input, &mut |dx| {
                    for bi in 0..b {
                        let gs = &g[bi * hw..(bi + 1) * hw];
                        for ci in 0..c {
                            let plane = &mut dx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            plane.iter_mut().zip(gs).for_each(|(d, gv)| *d += gv * inv);
                        }
                    }
                });
            }
            Op::ConcatChannels(a, bvar) => {
                let (b, ca, h, w) = val(*a).shape().bchw().unwrap();
                let cb = val(*bvar).dims()[1];
                let hw = h * w;
                let ct = ca + cb;
                acc(*a, &mut |da| {
                    for bi in 0..b {
                        let src = &g[bi * ct * hw..(bi * ct + ca) * hw];
                        da[bi * ca * hw..(bi + 1) * ca * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
                acc(*bvar, &mut |db| {
                    for bi in 0..b {
                        let src = &g[(bi * ct + ca) * hw..(bi + 1) * ct * hw];
                        db[bi * cb * hw..(bi + 1) * cb * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for ((x, gv), o) in d.iter_mut().zip(g).zip(bv) {
                        *x += gv * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gv), o) in d.iter_mut().zip(g).zip(av) {
                        *x += gv * o;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y * f));
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += gv));
            }
            Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::ChannelScale { x, s } => {
                let (_, _, h, w) = val(*x).shape().bchw().unwrap();
                let hw = h * w;
                let (xv, sv) = (val(*x).data(), val(*s).data());
                acc(*x, &mut |dx| {
                    for ((plane, gp), &f) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(sv) {
                        plane.iter_mut().zip(gp).for_each(|(d, gv)| *d += gv * f);
                    }
                });
                acc(*s, &mut |ds| {
                    for ((d, gp), xp) in ds.iter_mut().zip(g.chunks(hw)).zip(xv.chunks(hw)) {
                        *d += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::SpatialScale { x, m } => {
                let (b, c, h, w) = val(*x).shape().bchw().unwrap();
                let hw = h * w;
                let (xv, mv) = (val(*x).data(), val(*m).data());
                acc(*x, &mut |dx| {
                    for bi in 0..b {
                        let mask = &mv[bi * hw..(bi + 1) * hw];
                        for ci in 0..c {
                            let o = (bi * c + ci) * hw;
                            for s in 0..hw {
                                dx[o + s] += g[o + s] * mask[s];
                            }
                        }
                    }
                });
                acc(*m, &mut |dm| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let o = (bi * c + ci) * hw;
                            for s in 0..hw {
                                dm[bi * hw + s] += g[o + s] * xv[o + s];
                            }
                        }
                    }
                });
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                axes,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = val(*x).shape().bchw().unwrap();
                let hw = h * w;
                let gam = val(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[(idx / hw) % c] += gv * xh;
                    }
                });
                acc(*beta, &mut |db| {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[(idx / hw) % c] += gv;
                    }
                });
                let groups = norm_groups(*axes, b, c, hw).expect("validated in forward");
                acc(*x, &mut |dx| {
                    for (segs, &is) in groups.iter().zip(inv_std) {
                        let n: usize = segs.iter().map(|s| s.1).sum();
                        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                        for &(s, l) in segs {
                            for i in s..s + l {
                                let dxh = g[i] * gam[(i / hw) % c];
                                sum_d += dxh;
                                sum_dx += dxh * xhat[i];
                            }
                        }
                        let (mean_d, mean_dx) = (sum_d / n as f64, sum_dx / n as f64);
                        for &(s, l) in segs {
                            for i in s..s + l {
                                let dxh = g[i] * gam[(i / hw) % c];
                                dx[i] += is * (dxh - mean_d - xhat[i] * mean_dx);
                            }
                        }
                    }
                });
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c, h, w) = val(*x).shape().bchw().unwrap();
                let hw = h * w;
                let gam = val(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[(idx / hw) % c] += gv * xh;
                    }
                });
                acc(*beta, &mut |db| {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[(idx / hw) % c] += gv;
                    }
                });
                acc(*x, &mut |dx| {
                    for (idx, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        let ch = (idx / hw) % c;
                        *d += gv * gam[ch] * inv_std[ch];
                    }
                });
            }
            Op::Standardize {
                weight,
                gain,
                gamma_nl,
                unit,
                inv_sigma,
                clamped,
            } => {
                let c_out = inv_sigma.len();
                let fan_in = unit.len() / c_out;
                let root_fan = (fan_in as f64).sqrt();
                let gains = val(*gain).data();
                acc(*gain, &mut |dg| {
                    for r in 0..c_out {
                        let s: f64 = (0..fan_in)
                            .map(|j| g[r * fan_in + j] * unit[r * fan_in + j])
                            .sum();
                        dg[r] += s * gamma_nl / root_fan;
                    }
                });
                acc(*weight, &mut |dw| {
                    for r in 0..c_out {
                        let scale = gains[r] * gamma_nl / root_fan;
                        let row = r * fan_in..(r + 1) * fan_in;
                        let du: Vec<f64> = g[row.clone()].iter().map(|v| v * scale).collect();
                        let mean_du = du.iter().sum::<f64>() / fan_in as f64;
                        let mean_duu = if clamped[r] {
                            0.0
                        } else {
                            du.iter().zip(&unit[row.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / fan_in as f64
                        };
                        for (j, d) in dw[row.clone()].iter_mut().enumerate() {
                            *d += inv_sigma[r]
                                * (du[j] - mean_du - unit[r * fan_in + j] * mean_duu);
                        }
                    }
                });
            }
            Op::ChannelConv1d { z, kernel } => {
                let (zv, kv) = (val(*z), val(*kernel));
                let (b, c) = (zv.dims()[0], zv.dims()[1]);
                let k = kv.numel();
                let half = (k / 2) as isize;
                acc(*z, &mut |dz| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for j in 0..k {
                                let src = ci as isize + j as isize - half;
                                if src >= 0 && (src as usize) < c {
                                    dz[bi * c + src as usize] += g[bi * c + ci] * kv.data()[j];
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |dk| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for (j, d) in dk.iter_mut().enumerate() {
                                let src = ci as isize + j as isize - half;
                                if src >= 0 && (src as usize) < c {
                                    *d += g[bi * c + ci] * zv.data()[bi * c + src as usize];
                                }
                            }
                        }
                    }
                });
            }
            Op::Loss {
                pred,
                target,
                kind,
                weights,
            } => {
                let p = val(*pred);
                let (b, k) = (p.dims()[0], p.dims()[1]);
                let upstream = g[0];
                let weight = |cls: usize| weights.as_ref().map_or(1.0, |w| w[cls]);
                acc(*pred, &mut |dp| match kind {
                    LossKind::CrossEntropy | LossKind::Focal { .. } => {
                        let gamma = match kind {
                            LossKind::Focal { gamma } => *gamma,
                            _ => 0.0,
                        };
                        for (bi, (row, &t)) in p.data().chunks(k).zip(target.data()).enumerate() {
                            let cls = t as usize;
                            let lse = log_sum_exp(row);
                            let log_pt = row[cls] - lse;
                            let pt = log_pt.exp();
                            // dL/dz_j = (δ_jy - p_j) * factor
                            let factor = if gamma == 0.0 {
                                -1.0
                            } else {
                                let one_m = (1.0 - pt).max(0.0);
                                let first = if one_m > 0.0 {
                                    gamma * one_m.powf(gamma - 1.0) * pt * log_pt
                                } else {
                                    0.0
                                };
                                first - one_m.powf(gamma)
                            };
                            let scale = upstream * weight(cls) / b as f64;
                            for (j, &z) in row.iter().enumerate() {
                                let pj = (z - lse).exp();
                                let delta = if j == cls { 1.0 } else { 0.0 };
                                dp[bi * k + j] += scale * factor * (delta - pj);
                            }
                        }
                    }
                    LossKind::Bce => {
                        let scale = upstream / (b * k) as f64;
                        for (i, (&z, &t)) in p.data().iter().zip(target.data()).enumerate() {
                            dp[i] += scale * weight(i % k) * (sigmoid(z) - t);
                        }
                    }
                });
            }
        }
    }
}

fn class_index(t: f64, k: usize) -> Result<usize> {
    if t < 0.0 || t.fract() != 0.0 || t as usize >= k {
        return Err(Error::invalid(format!(
            "loss: target class {t} out of range for {k} classes"
        )));
    }
    Ok(t as usize)
}
