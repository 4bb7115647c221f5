//! SGD training, evaluation metrics and the modulator ablation harness.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{augment, AugmentSpec, DatasetSplit};
use crate::error::{KmError, Result};
use crate::modulator::InitMethod;
use crate::net::{build_network, Network, NetworkSpec, ParamGroupMask, ParamRef};
use crate::norm::Mode;
use crate::rng;
use crate::tensor::{Activation, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` at the start of each milestone epoch
    /// (epochs count from 0).
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::Step { milestones, factor } => {
                let m: Vec<String> = milestones.iter().map(|m| m.to_string()).collect();
                write!(f, "step:{}:{factor}", m.join("/"))
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = KmError;

    /// `constant` or `step:<m1>/<m2>/...:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || KmError::Config(format!("bad lr schedule {s:?}; expected constant or step:12/16:0.1"));
        if s == "constant" {
            return Ok(LrSchedule::Constant);
        }
        let mut parts = s.split(':');
        if parts.next() != Some("step") {
            return Err(bad());
        }
        let milestones = parts
            .next()
            .ok_or_else(bad)?
            .split('/')
            .filter(|m| !m.is_empty())
            .map(|m| m.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?;
        let factor = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(LrSchedule::Step { milestones, factor })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Also decay normalization affine and modulator parameters.
    pub decay_all: bool,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Step {
                milestones: vec![12, 16],
                factor: 0.1,
            },
            decay_all: false,
            augment: AugmentSpec::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(KmError::Config(format!(
                "epochs and batch_size must be at least 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        // Zero is allowed: it is the identity run used to test plumbing.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(KmError::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(KmError::Config(format!(
                "momentum {} must be in [0, 1) and weight decay {} non-negative",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    fn decays(&self, r: ParamRef) -> bool {
        match r {
            ParamRef::ConvWeight(_) | ParamRef::ClassifierWeight | ParamRef::ClassifierBias => true,
            _ => self.decay_all,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: SplitKind,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={:.6} acc={:.6}",
            self.epoch,
            self.split.name(),
            self.loss,
            self.accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    /// Eval-mode accuracy on the test split after the last epoch.
    pub final_test_accuracy: f64,
    /// Eval-mode accuracy on the full training split after the last epoch.
    pub final_train_accuracy: f64,
    /// Test accuracy after each epoch.
    pub accuracy_curve: Vec<f64>,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub wall_time_seconds: f64,
}

impl RunResult {
    /// Everything except wall time, for reproducibility comparisons.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        RunResult {
            wall_time_seconds: 0.0,
            ..self.clone()
        } == RunResult {
            wall_time_seconds: 0.0,
            ..other.clone()
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_loss_and_correct(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let classes = logits.shape()[1];
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[label] as f64;
        correct += usize::from(argmax(row) == label);
    }
    (loss, correct)
}

const EVAL_BATCH: usize = 256;

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate(net: &Network, data: &DatasetSplit) -> Result<(f64, f64)> {
    check_compatible(net, data)?;
    let mut loss = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let (l, c) = batch_loss_and_correct(&net.predict(&x)?, &labels);
        loss += l;
        correct += c;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn check_compatible(net: &Network, data: &DatasetSplit) -> Result<()> {
    if data.is_empty() {
        return Err(KmError::Contract(format!("dataset {} is empty", data.name)));
    }
    if net.spec().class_count != data.class_count {
        return Err(KmError::Contract(format!(
            "network has {} classes but {} has {}",
            net.spec().class_count,
            data.name,
            data.class_count
        )));
    }
    if net.spec().input_shape != data.sample_shape() {
        return Err(KmError::dim(
            "train",
            format!(
                "network expects samples {:?}, {} has {:?}",
                net.spec().input_shape,
                data.name,
                data.sample_shape()
            ),
        ));
    }
    Ok(())
}

const SHUFFLE_STREAM: u64 = 10;
const AUGMENT_STREAM: u64 = 11;

/// SGD with momentum on the parameters enabled by the network's mask.
///
/// `on_epoch` receives one train record per epoch and, when `test` is given,
/// one test record. Parameters outside the mask are never written.
pub fn train(
    net: &mut Network,
    train_data: &DatasetSplit,
    test_data: Option<&DatasetSplit>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    if !net.mask().any() {
        return Err(KmError::Config("no parameter group is trainable".into()));
    }
    check_compatible(net, train_data)?;
    if let Some(t) = test_data {
        check_compatible(net, t)?;
    }
    let mut velocity: HashMap<ParamRef, Vec<f32>> = HashMap::new();
    let mut accuracy_curve = Vec::with_capacity(cfg.epochs);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let n = train_data.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch) as f32;
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut rng::stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]),
        );
        let mut aug_rng = rng::stream(cfg.seed, &[AUGMENT_STREAM, epoch as u64]);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train_data.batch(chunk);
            let x = augment(&x, cfg.augment, &mut aug_rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pass = net.forward_tape(&mut tape, xv, Mode::Train)?;
            let loss = tape.cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(KmError::Diverged(format!(
                    "loss is {loss_value} at epoch {epoch} step {step} (lr {lr}); try a smaller learning rate"
                )));
            }
            let (_, correct) = batch_loss_and_correct(tape.value(pass.logits), &labels);
            epoch_loss += loss_value * chunk.len() as f64;
            epoch_correct += correct;
            tape.backward(loss)?;
            for &(r, v) in &pass.params {
                let grad = tape.grad_data(v).expect("parameters carry gradients");
                let mut p = net.param(r);
                let vel = velocity.entry(r).or_insert_with(|| vec![0.0; grad.len()]);
                let wd = if cfg.decays(r) { cfg.weight_decay as f32 } else { 0.0 };
                let mu = cfg.momentum as f32;
                for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *vi = mu * *vi + gi + wd * *pi;
                    *pi -= lr * *vi;
                }
                net.set_param(r, &p)?;
            }
        }
        let train_metrics = EpochMetrics {
            epoch,
            split: SplitKind::Train,
            loss: epoch_loss / n as f64,
            accuracy: epoch_correct as f64 / n as f64,
        };
        loss_curve.push(train_metrics.loss);
        on_epoch(&train_metrics);
        if let Some(t) = test_data {
            let (loss, accuracy) = evaluate(net, t)?;
            accuracy_curve.push(accuracy);
            on_epoch(&EpochMetrics {
                epoch,
                split: SplitKind::Test,
                loss,
                accuracy,
            });
        }
    }
    let (_, final_train_accuracy) = evaluate(net, train_data)?;
    let final_test_accuracy = accuracy_curve.last().copied().unwrap_or(f64::NAN);
    let counts = net.count_params();
    Ok(RunResult {
        final_test_accuracy,
        final_train_accuracy,
        accuracy_curve,
        loss_curve,
        trainable_params: counts.trainable,
        total_params: counts.total,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Accuracy of a parameter-efficient method relative to full training.
/// The raw ratio is returned; see [`clamp_ratio`] for reporting.
pub fn recovered_accuracy_ratio(method_acc: f64, full_acc: f64) -> Result<f64> {
    if !(full_acc > 0.0) {
        return Err(KmError::Contract(format!(
            "reference accuracy must be positive, got {full_acc}"
        )));
    }
    Ok(method_acc / full_acc)
}

pub fn clamp_ratio(ratio: f64) -> f64 {
    ratio.clamp(0.0, 1.0)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Activation,
    Initialization,
    Depth,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Activation => "activation",
            AblationAxis::Initialization => "initialization",
            AblationAxis::Depth => "depth",
        }
    }

    pub fn parse_value(self, s: &str) -> Result<AblationValue> {
        let s = s.trim();
        match self {
            AblationAxis::Activation => s.parse().map(AblationValue::Activation),
            AblationAxis::Initialization => {
                InitMethod::parse(s, InitMethod::DEFAULT_SIGMA).map(AblationValue::Init)
            }
            AblationAxis::Depth => match s.parse::<usize>() {
                Ok(d) if d >= 1 => Ok(AblationValue::Depth(d)),
                _ => Err(KmError::Config(format!("depth must be a positive integer, got {s:?}"))),
            },
        }
    }
}

impl FromStr for AblationAxis {
    type Err = KmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(AblationAxis::Activation),
            "initialization" => Ok(AblationAxis::Initialization),
            "depth" => Ok(AblationAxis::Depth),
            other => Err(KmError::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationValue {
    Activation(Activation),
    Init(InitMethod),
    Depth(usize),
}

impl AblationValue {
    pub fn axis(&self) -> AblationAxis {
        match self {
            AblationValue::Activation(_) => AblationAxis::Activation,
            AblationValue::Init(_) => AblationAxis::Initialization,
            AblationValue::Depth(_) => AblationAxis::Depth,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AblationValue::Activation(a) => a.name(),
            AblationValue::Init(m) => m.name().into(),
            AblationValue::Depth(d) => d.to_string(),
        }
    }

    fn apply(&self, spec: &mut NetworkSpec) {
        match *self {
            AblationValue::Activation(a) => spec.modulator.activation = a,
            AblationValue::Init(m) => spec.modulator.init = m,
            AblationValue::Depth(d) => spec.modulator.depth = d,
        }
    }
}

/// Everything held fixed across an ablation.
#[derive(Clone, Debug)]
pub struct AblationBase<'a> {
    pub spec: NetworkSpec,
    pub mask: ParamGroupMask,
    pub train: TrainConfig,
    pub train_data: &'a DatasetSplit,
    pub test_data: &'a DatasetSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: AblationValue,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value.label() == label)
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\tmean\tstd\tseeds\taccuracies\n", self.axis.name());
        for r in &self.rows {
            let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\t{}\n",
                r.value.label(),
                r.mean,
                r.std,
                r.accuracies.len(),
                accs.join(",")
            ));
        }
        out
    }
}

/// Train one network per `(value, seed)`, varying only the chosen
/// modulator property. The seed drives both initialization and batch order.
pub fn run_ablation(
    values: &[AblationValue],
    base: &AblationBase<'_>,
    seeds: &[u64],
    on_run: &mut dyn FnMut(&AblationValue, u64, &RunResult),
) -> Result<AblationTable> {
    let axis = match values.first() {
        Some(v) => v.axis(),
        None => return Err(KmError::Config("ablation needs at least one value".into())),
    };
    if values.iter().any(|v| v.axis() != axis) {
        return Err(KmError::Config("ablation values span more than one axis".into()));
    }
    if seeds.is_empty() {
        return Err(KmError::Config("ablation needs at least one seed".into()));
    }
    if !base.mask.explicit {
        return Err(KmError::Config("ablations vary the modulator, so the explicit group must train".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut spec = base.spec;
        value.apply(&mut spec);
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut net = build_network(spec, base.mask, seed)?;
            let cfg = TrainConfig {
                seed,
                ..base.train.clone()
            };
            let result = train(&mut net, base.train_data, Some(base.test_data), &cfg, &mut |_| {})?;
            on_run(value, seed, &result);
            accuracies.push(result.final_test_accuracy);
        }
        let (mean, std) = mean_std(&accuracies);
        rows.push(AblationRow {
            value: *value,
            accuracies,
            mean,
            std,
        });
    }
    Ok(AblationTable {
        axis,
        seeds: seeds.to_vec(),
        rows,
    })
}
