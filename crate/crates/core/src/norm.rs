//! Batch and group normalization.
//!
//! A normalization layer rescales activations channel by channel, which is
//! the same as rescaling the input channels of the convolution it feeds.
//! [`implicit_modulation_check`] evaluates both sides of that identity and
//! [`fold_norm_into_conv`] absorbs a following normalization into the
//! preceding convolution for inference.

use crate::error::{KmError, Result};
use crate::tensor::{conv2d, fixed_affine, NormLayout, Tape, Tensor, Var};

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Group { groups: usize },
}

impl NormKind {
    /// Group count used when none is configured: `min(32, channels)`.
    pub fn default_groups(channels: usize) -> usize {
        channels.min(32)
    }
}

/// A normalization layer with its trainable affine and running statistics.
///
/// Running statistics store the standard deviation (including epsilon), not
/// the variance.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_std: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl NormLayer {
    pub fn new(kind: NormKind, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(KmError::Config("normalization needs at least one channel".into()));
        }
        if let NormKind::Group { groups } = kind {
            if groups == 0 || channels % groups != 0 {
                return Err(KmError::Config(format!(
                    "{channels} channels are not divisible into {groups} groups"
                )));
            }
        }
        Ok(NormLayer {
            kind,
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_std: Tensor::full([channels], 1.0),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn batch(channels: usize) -> Self {
        Self::new(NormKind::Batch, channels).expect("positive channel count")
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Whether eval mode uses fixed statistics (batch norm) rather than
    /// per-sample ones (group norm).
    pub fn has_fixed_eval_stats(&self) -> bool {
        self.kind == NormKind::Batch
    }

    pub(crate) fn layout(&self, mode: Mode) -> NormLayout<f32> {
        match (self.kind, mode) {
            (NormKind::Batch, Mode::Train) => NormLayout::Batch { eps: self.eps },
            (NormKind::Batch, Mode::Eval) => NormLayout::Fixed {
                mean: self.running_mean.data().to_vec(),
                std: self.running_std.data().to_vec(),
            },
            (NormKind::Group { groups }, _) => NormLayout::Group {
                groups,
                eps: self.eps,
            },
        }
    }

    /// Normalize `x` on `tape` using `gamma`/`beta` handles bound from this
    /// layer. Train mode updates the running statistics of a batch norm.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
    ) -> Result<Var> {
        let c = tape.value(x).shape().get(1).copied();
        if c != Some(self.channels()) {
            return Err(KmError::dim(
                "norm_forward",
                format!(
                    "input {:?} does not have {} channels",
                    tape.value(x).shape(),
                    self.channels()
                ),
            ));
        }
        let out = tape.normalize(x, gamma, beta, &self.layout(mode))?;
        if let Some((mean, std)) = out.batch_stats {
            self.update_running(&mean, &std);
        }
        Ok(out.out)
    }

    /// Blend batch statistics into the running statistics.
    pub(crate) fn update_running(&mut self, mean: &[f32], std: &[f32]) {
        let m = self.momentum;
        let floor = self.eps.sqrt();
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_std.data_mut().iter_mut().zip(std) {
            *r = ((1.0 - m) * *r + m * b).max(floor);
        }
    }

    /// Bind gamma and beta on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.param(self.gamma.clone()), tape.param(self.beta.clone()))
        } else {
            (tape.constant(self.gamma.clone()), tape.constant(self.beta.clone()))
        }
    }

    /// Per-channel `(scale, offset)` with `norm(x) = scale * x + offset`,
    /// available when eval statistics are fixed.
    pub fn eval_affine(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        if !self.has_fixed_eval_stats() {
            return Err(KmError::Contract(
                "group normalization has no fixed statistics to fold".into(),
            ));
        }
        let (scale, offset) = fixed_affine(
            self.gamma.data(),
            self.beta.data(),
            self.running_mean.data(),
            self.running_std.data(),
        );
        Ok((scale, offset))
    }
}

/// Normalize `x` outside of any training graph.
pub fn norm_forward(x: &Tensor, layer: &mut NormLayer, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (g, b) = layer.bind(&mut tape, false);
    let y = layer.forward_on_tape(&mut tape, xv, g, b, mode)?;
    Ok(tape.value(y).clone())
}

fn per_input_channel(w: &Tensor, scale: &[f32]) -> Tensor {
    let s = w.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= scale[(i / plane) % c];
    }
    out
}

/// Maximum elementwise difference between `conv(norm(x), w)` and the same
/// output computed as a convolution of raw `x` with kernels scaled by
/// `gamma / sigma` per input channel, plus the convolution of the constant
/// offset map `beta - gamma * mu / sigma`.
pub fn implicit_modulation_check(
    w: &Tensor,
    x: &Tensor,
    layer: &NormLayer,
    stride: usize,
    padding: usize,
) -> Result<f64> {
    let (scale, offset) = layer.eval_affine()?;
    if x.rank() != 4 || x.shape()[1] != layer.channels() {
        return Err(KmError::dim(
            "implicit_modulation_check",
            format!("input {:?} for {} channels", x.shape(), layer.channels()),
        ));
    }
    let mut eval_layer = layer.clone();
    let normalized = norm_forward(x, &mut eval_layer, Mode::Eval)?;
    let lhs = conv2d(&normalized, w, stride, padding)?;

    let scaled = conv2d(x, &per_input_channel(w, &scale), stride, padding)?;
    let plane = x.shape()[2] * x.shape()[3];
    let c = layer.channels();
    let offset_map = Tensor::new(
        x.shape().to_vec(),
        (0..x.numel()).map(|i| offset[(i / plane) % c]).collect(),
    )?;
    let shifted = conv2d(&offset_map, w, stride, padding)?;
    let rhs_data = scaled
        .data()
        .iter()
        .zip(shifted.data())
        .map(|(a, b)| a + b)
        .collect();
    let rhs = Tensor::new(lhs.shape().to_vec(), rhs_data)?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// Fold an eval-mode normalization that follows a convolution into the
/// convolution's weights and bias.
///
/// Per output channel `o`: `w'[o] = w[o] * gamma[o] / sigma[o]` and
/// `b'[o] = (b[o] - mu[o]) * gamma[o] / sigma[o] + beta[o]`.
pub fn fold_norm_into_conv(
    w: &Tensor,
    bias: Option<&Tensor>,
    layer: &NormLayer,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    if mode != Mode::Eval {
        return Err(KmError::Contract(
            "normalization folding needs eval-mode statistics".into(),
        ));
    }
    let (scale, _) = layer.eval_affine()?;
    if w.rank() != 4 || w.shape()[0] != layer.channels() {
        return Err(KmError::dim(
            "fold_norm_into_conv",
            format!(
                "weight {:?} does not produce {} channels",
                w.shape(),
                layer.channels()
            ),
        ));
    }
    let out_c = layer.channels();
    let zeros = Tensor::zeros([out_c]);
    let bias = bias.unwrap_or(&zeros);
    if bias.shape() != [out_c] {
        return Err(KmError::dim(
            "fold_norm_into_conv",
            format!("bias {:?} for {out_c} output channels", bias.shape()),
        ));
    }
    let per_kernel = w.numel() / out_c;
    let mut folded = w.clone();
    for (i, v) in folded.data_mut().iter_mut().enumerate() {
        *v *= scale[i / per_kernel];
    }
    let folded_bias = (0..out_c)
        .map(|o| {
            (bias.data()[o] - layer.running_mean.data()[o]) * scale[o] + layer.beta.data()[o]
        })
        .collect();
    Ok((folded, Tensor::new([out_c], folded_bias)?))
}

/// Add a per-channel bias to `[B, C, H, W]` activations.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || bias.shape() != [x.shape()[1]] {
        return Err(KmError::dim(
            "add_channel_bias",
            format!("bias {:?} for input {:?}", bias.shape(), x.shape()),
        ));
    }
    let (c, plane) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias.data()[(i / plane) % c];
    }
    Ok(out)
}
