//! Network assembly and per-group trainability.
//!
//! Parameters fall into four groups: frozen-able convolution weights, the
//! normalization affine ("implicit" modulation), kernel modulators
//! ("explicit" modulation) and the linear classifier. A [`ParamGroupMask`]
//! selects which groups train.

use std::fmt;
use std::str::FromStr;

use crate::error::{KmError, Result};
use crate::modulator::{
    init_modulator, modulate_on_tape, InitMethod, InitSpec, KernelModulator, KernelShape,
};
use crate::norm::{Mode, NormKind, NormLayer};
use crate::rng;
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Convolution,
    Implicit,
    Explicit,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Convolution,
        ParamGroup::Implicit,
        ParamGroup::Explicit,
        ParamGroup::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Convolution => "convolution",
            ParamGroup::Implicit => "implicit",
            ParamGroup::Explicit => "explicit",
            ParamGroup::Classifier => "classifier",
        }
    }
}

/// Which parameter groups receive gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ParamGroupMask {
    pub convolution: bool,
    pub implicit: bool,
    pub explicit: bool,
    pub classifier: bool,
}

impl ParamGroupMask {
    /// Normalization affine and classifier only.
    pub const BASELINE: Self = Self::new(false, true, false, true);
    /// Normalization affine, kernel modulators and classifier.
    pub const KERNEL_MODULATION: Self = Self::new(false, true, true, true);
    /// Conventional training of every network weight, without modulators.
    pub const FULL: Self = Self::new(true, true, false, true);
    pub const ALL: Self = Self::new(true, true, true, true);
    pub const NONE: Self = Self::new(false, false, false, false);

    pub const fn new(convolution: bool, implicit: bool, explicit: bool, classifier: bool) -> Self {
        ParamGroupMask {
            convolution,
            implicit,
            explicit,
            classifier,
        }
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Convolution => self.convolution,
            ParamGroup::Implicit => self.implicit,
            ParamGroup::Explicit => self.explicit,
            ParamGroup::Classifier => self.classifier,
        }
    }

    pub fn set(&mut self, group: ParamGroup, on: bool) {
        match group {
            ParamGroup::Convolution => self.convolution = on,
            ParamGroup::Implicit => self.implicit = on,
            ParamGroup::Explicit => self.explicit = on,
            ParamGroup::Classifier => self.classifier = on,
        }
    }

    pub fn any(&self) -> bool {
        ParamGroup::ALL.iter().any(|&g| self.contains(g))
    }
}

impl fmt::Display for ParamGroupMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = ParamGroup::ALL
            .iter()
            .filter(|&&g| self.contains(g))
            .map(|g| g.name())
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for ParamGroupMask {
    type Err = KmError;

    /// Comma-separated group names, `all` or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = ParamGroupMask::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "all" => mask = ParamGroupMask::ALL,
                name => {
                    let group = ParamGroup::ALL
                        .into_iter()
                        .find(|g| g.name() == name)
                        .ok_or_else(|| KmError::Config(format!("unknown parameter group {name:?}")))?;
                    mask.set(group, true);
                }
            }
        }
        Ok(mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Three pre-activation residual stages of `n_blocks` blocks each, with
    /// widths `base_width * (1, 2, 4)`.
    ResnetMicro { n_blocks: usize, base_width: usize },
    /// Flattened input straight into the linear classifier.
    MlpHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormChoice {
    Batch,
    /// Group norm; `None` means `min(32, channels)` groups per layer.
    Group { groups: Option<usize> },
}

impl NormChoice {
    fn kind_for(self, channels: usize) -> NormKind {
        match self {
            NormChoice::Batch => NormKind::Batch,
            NormChoice::Group { groups } => NormKind::Group {
                groups: groups.unwrap_or_else(|| NormKind::default_groups(channels)),
            },
        }
    }
}

/// How kernel modulators are constructed when the explicit group is on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulatorConfig {
    pub depth: usize,
    pub activation: Activation,
    pub init: InitMethod,
}

impl Default for ModulatorConfig {
    fn default() -> Self {
        ModulatorConfig {
            depth: 2,
            activation: Activation::Tanh,
            init: InitMethod::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    /// `(channels, height, width)` of one input sample.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub norm: NormChoice,
    pub modulator: ModulatorConfig,
}

impl NetworkSpec {
    pub fn resnet_micro(n_blocks: usize, base_width: usize, input_shape: [usize; 3], class_count: usize) -> Self {
        NetworkSpec {
            architecture: Architecture::ResnetMicro {
                n_blocks,
                base_width,
            },
            input_shape,
            class_count,
            norm: NormChoice::Batch,
            modulator: ModulatorConfig::default(),
        }
    }

    pub fn mlp_head(input_shape: [usize; 3], class_count: usize) -> Self {
        NetworkSpec {
            architecture: Architecture::MlpHead,
            input_shape,
            class_count,
            norm: NormChoice::Batch,
            modulator: ModulatorConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(KmError::Config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(KmError::Config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if let Architecture::ResnetMicro {
            n_blocks,
            base_width,
        } = self.architecture
        {
            if n_blocks == 0 || base_width == 0 {
                return Err(KmError::Config(format!(
                    "resnet_micro needs n_blocks >= 1 and base_width >= 1, got {n_blocks} and {base_width}"
                )));
            }
        }
        if self.modulator.depth == 0 {
            return Err(KmError::Config("modulator depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// A convolution with a frozen-able weight and an optional modulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub modulator: Option<KernelModulator>,
}

impl ConvLayer {
    pub fn shape(&self) -> KernelShape {
        KernelShape::of(&self.weight).expect("conv weights are 4D")
    }

    /// The weight the convolution actually applies.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.modulator {
            Some(m) => crate::modulator::modulate(&self.weight, m),
            None => Ok(self.weight.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedNorm {
    pub name: String,
    pub layer: NormLayer,
}

/// Linear classifier, `logits = x · weight + bias` with weight `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    norm1: usize,
    conv1: usize,
    norm2: usize,
    conv2: usize,
    shortcut: Option<usize>,
}

/// Reference to one parameter tensor of a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    ConvWeight(usize),
    Modulator { conv: usize, layer: usize },
    NormGamma(usize),
    NormBeta(usize),
    ClassifierWeight,
    ClassifierBias,
}

impl ParamRef {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamRef::ConvWeight(_) => ParamGroup::Convolution,
            ParamRef::Modulator { .. } => ParamGroup::Explicit,
            ParamRef::NormGamma(_) | ParamRef::NormBeta(_) => ParamGroup::Implicit,
            ParamRef::ClassifierWeight | ParamRef::ClassifierBias => ParamGroup::Classifier,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Output of a recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Handles of every trainable parameter bound on the tape.
    pub params: Vec<(ParamRef, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Resnet {
        stem: usize,
        blocks: Vec<Block>,
        head_norm: usize,
    },
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    mask: ParamGroupMask,
    convs: Vec<ConvLayer>,
    norms: Vec<NamedNorm>,
    classifier: Linear,
    body: Body,
}

// Stream tags for seed derivation.
const CONV_STREAM: u64 = 1;
const MODULATOR_STREAM: u64 = 2;
const CLASSIFIER_STREAM: u64 = 3;

/// He-normal weights, `N(0, sqrt(2 / fan_in))`.
fn conv_init(shape: [usize; 4], seed: u64, index: usize) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    let mut rng = rng::stream(seed, &[CONV_STREAM, index as u64]);
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
}

fn classifier_init(inputs: usize, outputs: usize, seed: u64) -> Linear {
    let mut rng = rng::stream(seed, &[CLASSIFIER_STREAM]);
    let bound = 1.0 / (inputs as f64).sqrt();
    Linear {
        weight: Tensor::uniform([inputs, outputs], -bound, bound, &mut rng),
        bias: Tensor::zeros([outputs]),
    }
}

struct Builder {
    spec: NetworkSpec,
    seed: u64,
    convs: Vec<ConvLayer>,
    norms: Vec<NamedNorm>,
}

impl Builder {
    fn conv(&mut self, name: String, shape: [usize; 4], stride: usize, padding: usize) -> usize {
        let index = self.convs.len();
        self.convs.push(ConvLayer {
            name,
            weight: conv_init(shape, self.seed, index),
            bias: None,
            stride,
            padding,
            modulator: None,
        });
        index
    }

    fn norm(&mut self, name: String, channels: usize) -> Result<usize> {
        let layer = NormLayer::new(self.spec.norm.kind_for(channels), channels)?;
        self.norms.push(NamedNorm { name, layer });
        Ok(self.norms.len() - 1)
    }
}

/// Construct a network. Conv weights depend only on `(init_seed, layer
/// index)`, so networks built from one seed share their frozen base whatever
/// the mask.
pub fn build_network(spec: NetworkSpec, mask: ParamGroupMask, init_seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        seed: init_seed,
        convs: Vec::new(),
        norms: Vec::new(),
    };
    let [in_c, in_h, in_w] = spec.input_shape;
    let (body, features) = match spec.architecture {
        Architecture::MlpHead => (Body::Flat, in_c * in_h * in_w),
        Architecture::ResnetMicro {
            n_blocks,
            base_width,
        } => {
            let widths = [base_width, 2 * base_width, 4 * base_width];
            let stem = b.conv("stem.conv".into(), [widths[0], in_c, 3, 3], 1, 1);
            let mut blocks = Vec::new();
            let mut width = widths[0];
            for (s, &out) in widths.iter().enumerate() {
                for k in 0..n_blocks {
                    let stride = if s > 0 && k == 0 { 2 } else { 1 };
                    let prefix = format!("stage{}.block{k}", s + 1);
                    let norm1 = b.norm(format!("{prefix}.norm1"), width)?;
                    let conv1 = b.conv(format!("{prefix}.conv1"), [out, width, 3, 3], stride, 1);
                    let norm2 = b.norm(format!("{prefix}.norm2"), out)?;
                    let conv2 = b.conv(format!("{prefix}.conv2"), [out, out, 3, 3], 1, 1);
                    let shortcut = (stride != 1 || out != width)
                        .then(|| b.conv(format!("{prefix}.shortcut"), [out, width, 1, 1], stride, 0));
                    blocks.push(Block {
                        norm1,
                        conv1,
                        norm2,
                        conv2,
                        shortcut,
                    });
                    width = out;
                }
            }
            let head_norm = b.norm("head.norm".into(), width)?;
            (
                Body::Resnet {
                    stem,
                    blocks,
                    head_norm,
                },
                width,
            )
        }
    };
    let mut net = Network {
        spec,
        mask,
        convs: b.convs,
        norms: b.norms,
        classifier: classifier_init(features, spec.class_count, init_seed),
        body,
    };
    if mask.explicit {
        net.attach_modulators(spec.modulator, init_seed)?;
    }
    Ok(net)
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mask(&self) -> ParamGroupMask {
        self.mask
    }

    pub fn set_mask(&mut self, mask: ParamGroupMask) {
        self.mask = mask;
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn norms(&self) -> &[NamedNorm] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NamedNorm] {
        &mut self.norms
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn conv_index(&self, name: &str) -> Option<usize> {
        self.convs.iter().position(|c| c.name == name)
    }

    pub fn norm_index(&self, name: &str) -> Option<usize> {
        self.norms.iter().position(|n| n.name == name)
    }

    pub fn has_modulators(&self) -> bool {
        self.convs.iter().any(|c| c.modulator.is_some())
    }

    /// Give every convolution (stem and shortcuts included) a freshly
    /// initialized modulator. Modulator `i` is seeded from `(seed, i)`.
    pub fn attach_modulators(&mut self, config: ModulatorConfig, seed: u64) -> Result<()> {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            let spec = InitSpec::new(
                config.init,
                rng::derive_seed(seed, &[MODULATOR_STREAM, i as u64]),
            );
            conv.modulator = Some(init_modulator(conv.shape(), config.depth, config.activation, &spec)?);
        }
        self.spec.modulator = config;
        Ok(())
    }

    /// Attach or replace the modulator of one convolution.
    pub fn set_modulator(&mut self, conv: usize, modulator: KernelModulator) -> Result<()> {
        let layer = &mut self.convs[conv];
        if modulator.side() != layer.shape().side() {
            return Err(KmError::dim(
                "set_modulator",
                format!(
                    "modulator side {} does not match {} kernels of {}x{}",
                    modulator.side(),
                    layer.name,
                    layer.shape().height,
                    layer.shape().width
                ),
            ));
        }
        layer.modulator = Some(modulator);
        Ok(())
    }

    /// Replace the classifier with a fresh one, as when moving to a new task.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let [inputs, outputs] = [self.classifier.weight.shape()[0], self.classifier.weight.shape()[1]];
        self.classifier = classifier_init(inputs, outputs, seed);
    }

    /// Every parameter tensor, in a fixed order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            refs.push(ParamRef::ConvWeight(i));
            if let Some(m) = &conv.modulator {
                refs.extend((0..m.depth()).map(|layer| ParamRef::Modulator { conv: i, layer }));
            }
        }
        for i in 0..self.norms.len() {
            refs.push(ParamRef::NormGamma(i));
            refs.push(ParamRef::NormBeta(i));
        }
        refs.push(ParamRef::ClassifierWeight);
        refs.push(ParamRef::ClassifierBias);
        refs
    }

    pub fn is_trainable(&self, r: ParamRef) -> bool {
        self.mask.contains(r.group())
    }

    /// Trainable values of a parameter; a diagonal modulator reports only
    /// its diagonal.
    pub fn param(&self, r: ParamRef) -> Tensor {
        match r {
            ParamRef::ConvWeight(i) => self.convs[i].weight.clone(),
            ParamRef::Modulator { conv, layer } => self.convs[conv]
                .modulator
                .as_ref()
                .expect("modulator present")
                .layer_params(layer),
            ParamRef::NormGamma(i) => self.norms[i].layer.gamma.clone(),
            ParamRef::NormBeta(i) => self.norms[i].layer.beta.clone(),
            ParamRef::ClassifierWeight => self.classifier.weight.clone(),
            ParamRef::ClassifierBias => self.classifier.bias.clone(),
        }
    }

    pub fn param_len(&self, r: ParamRef) -> usize {
        match r {
            ParamRef::Modulator { conv, .. } => {
                let m = self.convs[conv].modulator.as_ref().expect("modulator present");
                m.trainable_count() / m.depth()
            }
            other => self.param(other).numel(),
        }
    }

    pub fn set_param(&mut self, r: ParamRef, value: &Tensor) -> Result<()> {
        let slot = match r {
            ParamRef::ConvWeight(i) => &mut self.convs[i].weight,
            ParamRef::Modulator { conv, layer } => {
                return self.convs[conv]
                    .modulator
                    .as_mut()
                    .ok_or_else(|| KmError::Contract(format!("conv {conv} has no modulator")))?
                    .set_layer_params(layer, value);
            }
            ParamRef::NormGamma(i) => &mut self.norms[i].layer.gamma,
            ParamRef::NormBeta(i) => &mut self.norms[i].layer.beta,
            ParamRef::ClassifierWeight => &mut self.classifier.weight,
            ParamRef::ClassifierBias => &mut self.classifier.bias,
        };
        if slot.shape() != value.shape() {
            return Err(KmError::dim(
                "set_param",
                format!("{r:?} has shape {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value.clone();
        Ok(())
    }

    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount {
            trainable: 0,
            total: 0,
        };
        for r in self.param_refs() {
            let n = self.param_len(r);
            count.total += n;
            if self.is_trainable(r) {
                count.trainable += n;
            }
        }
        count
    }

    /// Run the network on `tape`. Trainable parameters are recorded as
    /// tape parameters and returned; everything else is constant. In train
    /// mode, batch-norm running statistics are updated.
    pub fn forward_tape(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ForwardPass> {
        let mut updates = Vec::new();
        let pass = self.run(tape, x, mode, true, &mut updates)?;
        for (i, mean, std) in updates {
            self.norms[i].layer.update_running(&mean, &std);
        }
        Ok(pass)
    }

    /// Forward pass without recording gradients.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut updates = Vec::new();
        let pass = self.run(&mut tape, xv, mode, false, &mut updates)?;
        for (i, mean, std) in updates {
            self.norms[i].layer.update_running(&mean, &std);
        }
        Ok(tape.value(pass.logits).clone())
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.run(&mut tape, xv, Mode::Eval, false, &mut Vec::new())?;
        Ok(tape.value(pass.logits).clone())
    }

    fn bind(&self, tape: &mut Tape, r: ParamRef, record: bool, params: &mut Vec<(ParamRef, Var)>) -> Var {
        let value = self.param(r);
        if record && self.is_trainable(r) {
            let v = tape.param(value);
            params.push((r, v));
            v
        } else {
            tape.constant(value)
        }
    }

    fn conv_on_tape(
        &self,
        tape: &mut Tape,
        i: usize,
        x: Var,
        record: bool,
        params: &mut Vec<(ParamRef, Var)>,
    ) -> Result<Var> {
        let conv = &self.convs[i];
        let mut w = self.bind(tape, ParamRef::ConvWeight(i), record, params);
        if let Some(m) = &conv.modulator {
            let us: Vec<Var> = (0..m.depth())
                .map(|layer| self.bind(tape, ParamRef::Modulator { conv: i, layer }, record, params))
                .collect();
            w = modulate_on_tape(tape, w, &us, m.activation(), m.structure())?;
        }
        let y = tape.conv2d(x, w, conv.stride, conv.padding)?;
        match &conv.bias {
            None => Ok(y),
            Some(bias) => {
                // Only used by folded inference networks; never trainable.
                let biased = crate::norm::add_channel_bias(tape.value(y), bias)?;
                Ok(tape.constant(biased))
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn norm_on_tape(
        &self,
        tape: &mut Tape,
        i: usize,
        x: Var,
        mode: Mode,
        record: bool,
        params: &mut Vec<(ParamRef, Var)>,
        updates: &mut Vec<(usize, Vec<f32>, Vec<f32>)>,
    ) -> Result<Var> {
        let layer = &self.norms[i].layer;
        let c = tape.value(x).shape().get(1).copied();
        if c != Some(layer.channels()) {
            return Err(KmError::dim(
                "norm_forward",
                format!(
                    "{}: input {:?} does not have {} channels",
                    self.norms[i].name,
                    tape.value(x).shape(),
                    layer.channels()
                ),
            ));
        }
        let g = self.bind(tape, ParamRef::NormGamma(i), record, params);
        let b = self.bind(tape, ParamRef::NormBeta(i), record, params);
        let out = tape.normalize(x, g, b, &layer.layout(mode))?;
        if let Some((mean, std)) = out.batch_stats {
            updates.push((i, mean, std));
        }
        Ok(out.out)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        record: bool,
        updates: &mut Vec<(usize, Vec<f32>, Vec<f32>)>,
    ) -> Result<ForwardPass> {
        let [c, h, w] = self.spec.input_shape;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(KmError::dim(
                "forward",
                format!("input {shape:?} does not match [B, {c}, {h}, {w}]"),
            ));
        }
        let batch = shape[0];
        let mut params = Vec::new();
        let features = match &self.body {
            Body::Flat => tape.reshape(x, [batch, c * h * w])?,
            Body::Resnet {
                stem,
                blocks,
                head_norm,
            } => {
                let mut act = self.conv_on_tape(tape, *stem, x, record, &mut params)?;
                for block in blocks {
                    let pre = self.norm_on_tape(tape, block.norm1, act, mode, record, &mut params, updates)?;
                    let pre = tape.activation(Activation::Relu, pre);
                    let r = self.conv_on_tape(tape, block.conv1, pre, record, &mut params)?;
                    let r = self.norm_on_tape(tape, block.norm2, r, mode, record, &mut params, updates)?;
                    let r = tape.activation(Activation::Relu, r);
                    let r = self.conv_on_tape(tape, block.conv2, r, record, &mut params)?;
                    let skip = match block.shortcut {
                        Some(s) => self.conv_on_tape(tape, s, pre, record, &mut params)?,
                        None => act,
                    };
                    act = tape.add(r, skip)?;
                }
                let out = self.norm_on_tape(tape, *head_norm, act, mode, record, &mut params, updates)?;
                let out = tape.activation(Activation::Relu, out);
                tape.global_avg_pool(out)?
            }
        };
        let wv = self.bind(tape, ParamRef::ClassifierWeight, record, &mut params);
        let bv = self.bind(tape, ParamRef::ClassifierBias, record, &mut params);
        let logits = tape.matmul(features, wv)?;
        let logits = tape.add_row_bias(logits, bv)?;
        Ok(ForwardPass { logits, params })
    }
}
