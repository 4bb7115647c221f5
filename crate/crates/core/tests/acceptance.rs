//! Acceptance suite: one PASS/FAIL/NOT RUN line per criterion on stderr,
//! then a single assertion that nothing failed.
//!
//! The training criteria run on a synthetic desk task (oriented stripe
//! textures, 10 classes, 100 train / 50 test images per class, 16x16) with
//! the default training schedule. The CIFAR-10 variant of the mask ordering
//! runs only when `KM_CIFAR10_DIR` points at the binary batches.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use kmod::data::{load_cifar10_binary, synth_task, DatasetSplit, Split, SynthKind};
use kmod::delta::{apply_delta, export_delta, memory_report, KmDelta};
use kmod::modulator::{init_modulator, modulate, modulator_param_count, InitMethod, InitSpec, KernelShape, ModulatorStructure};
use kmod::net::{build_network, NetworkSpec, ParamGroupMask, ParamRef};
use kmod::norm::{add_channel_bias, fold_norm_into_conv, implicit_modulation_check, norm_forward, Mode, NormLayer};
use kmod::tensor::{conv2d, Activation, Tensor};
use kmod::train::{mean_std, recovered_accuracy_ratio, run_ablation, train, AblationBase, AblationValue, RunResult, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_INSTANCES: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const THEOREM_TOL: f64 = 1e-5;
const FOLD_TOL: f64 = 1e-5;
const INIT_TOL: f64 = 0.01;
const INIT_SAMPLES: usize = 100_000;
const KM_MARGIN: f64 = 0.05;

#[derive(Default)]
struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        let status = if pass { "PASS" } else { "FAIL" };
        if !pass {
            self.failed.push(id.to_string());
        }
        writeln!(std::io::stderr(), "[{status}] {id}: {detail}").unwrap();
    }

    fn note(&self, id: &str, status: &str, detail: String) {
        writeln!(std::io::stderr(), "[{status}] {id}: {detail}").unwrap();
    }
}

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = (0.0f64, "");
    for op in common::GRAD_OPS {
        for _ in 0..GRAD_INSTANCES {
            let e = common::op_gradient_error(op, &mut rng);
            if e > worst.0 || e.is_nan() {
                worst = (e, op);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "1 gradient correctness",
        worst.0 < GRAD_TOL && secs < 60.0,
        format!(
            "{} ops x {GRAD_INSTANCES} instances, worst relative error {:.2e} ({}) < {GRAD_TOL:.0e}, {secs:.1}s < 60s",
            common::GRAD_OPS.len(),
            worst.0,
            worst.1
        ),
    );
}

fn random_stat_layer(c: usize, rng: &mut impl Rng) -> NormLayer {
    let mut layer = NormLayer::batch(c);
    layer.gamma = Tensor::uniform([c], 0.5, 2.0, rng);
    layer.beta = Tensor::randn([c], 1.0, rng);
    layer.running_mean = Tensor::randn([c], 1.0, rng);
    layer.running_std = Tensor::uniform([c], 0.5, 2.0, rng);
    layer
}

fn implicit_theorem(r: &mut Report) {
    // Scalar case evaluated by hand: w * (gamma * (x - mu) / sigma + beta).
    let (w, x, gamma, sigma, mu, beta) = (2.0f64, 3.0, 1.5, 0.5, 1.0, 0.2);
    let expected = w * (gamma * (x - mu) / sigma + beta);
    let mut layer = NormLayer::batch(1);
    layer.gamma = Tensor::full([1], gamma as f32);
    layer.beta = Tensor::full([1], beta as f32);
    layer.running_mean = Tensor::full([1], mu as f32);
    layer.running_std = Tensor::full([1], sigma as f32);
    let wt = Tensor::full([1, 1, 1, 1], w as f32);
    let xt = Tensor::full([1, 1, 1, 1], x as f32);
    let lhs = conv2d(&norm_forward(&xt, &mut layer.clone(), Mode::Eval).unwrap(), &wt, 1, 0).unwrap().data()[0] as f64;
    let scalar_gap = implicit_modulation_check(&wt, &xt, &layer, 1, 0).unwrap();
    let scalar_ok = (expected - 12.4).abs() < 1e-12 && (lhs - expected).abs() < 1e-5 && scalar_gap < THEOREM_TOL;

    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..k / 2 + 1);
        let layer = random_stat_layer(c, &mut rng);
        let w = Tensor::randn([n, c, k, k], 0.5, &mut rng);
        let x = Tensor::randn([2, c, 5, 5], 1.0, &mut rng);
        worst = worst.max(implicit_modulation_check(&w, &x, &layer, stride, padding).unwrap());
    }
    r.line(
        "2 implicit modulation identity",
        scalar_ok && worst < THEOREM_TOL,
        format!("scalar case {lhs:.6} vs {expected:.6} (gap {scalar_gap:.1e}); 100 random configs worst {worst:.2e} < {THEOREM_TOL:.0e}"),
    );
}

fn folding(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c_in = rng.random_range(1..4);
        let c_out = rng.random_range(1..5);
        let layer = random_stat_layer(c_out, &mut rng);
        let w = Tensor::randn([c_out, c_in, 3, 3], 0.3, &mut rng);
        let b = Tensor::randn([c_out], 0.5, &mut rng);
        let x = Tensor::randn([2, c_in, 6, 6], 1.0, &mut rng);
        let two_step = norm_forward(
            &add_channel_bias(&conv2d(&x, &w, 1, 1).unwrap(), &b).unwrap(),
            &mut layer.clone(),
            Mode::Eval,
        )
        .unwrap();
        let (wf, bf) = fold_norm_into_conv(&w, Some(&b), &layer, Mode::Eval).unwrap();
        let folded = add_channel_bias(&conv2d(&x, &wf, 1, 1).unwrap(), &bf).unwrap();
        worst = worst.max(two_step.max_abs_diff(&folded));
    }
    r.line(
        "3 normalization folding",
        worst < FOLD_TOL,
        format!("100 random configs, worst two-path difference {worst:.2e} < {FOLD_TOL:.0e}"),
    );
}

fn init_preservation(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut worst: f64 = 0.0;
    let mut sampled = 0;
    let mut seed = 0;
    while sampled < INIT_SAMPLES {
        let shape = KernelShape::new(64, 16, 3, 3).unwrap();
        let m = init_modulator(shape, 2, Activation::Tanh, &InitSpec::new(InitMethod::IdentityNoise { sigma: 0.001 }, seed)).unwrap();
        let w = Tensor::uniform(shape.dims().to_vec(), -0.2, 0.2, &mut rng);
        worst = worst.max(modulate(&w, &m).unwrap().max_abs_diff(&w));
        sampled += w.numel();
        seed += 1;
    }
    let reference = 0.1f64.tanh().tanh();
    let exact = init_modulator(
        KernelShape::new(1, 1, 1, 1).unwrap(),
        2,
        Activation::Tanh,
        &InitSpec::new(InitMethod::IdentityNoise { sigma: 0.0 }, 0),
    )
    .unwrap();
    let ours = modulate(&Tensor::full([1, 1, 1, 1], 0.1), &exact).unwrap().data()[0] as f64;
    let pass = worst <= INIT_TOL && (reference - 0.09934).abs() <= 1e-5 && (ours - reference).abs() <= 1e-6;
    r.line(
        "4 initialization preservation",
        pass,
        format!(
            "{sampled} weights in [-0.2, 0.2], max |modulate(w) - w| = {worst:.4} <= {INIT_TOL}; tanh(tanh(0.1)) = {reference:.5} (modulate gives {ours:.5})"
        ),
    );
}

fn desk_spec() -> NetworkSpec {
    NetworkSpec::resnet_micro(1, 8, [3, 16, 16], 10)
}

fn accounting(r: &mut Report) {
    let shape = KernelShape::new(32, 16, 3, 3).unwrap();
    let frozen = shape.numel();
    let trainable = modulator_param_count(shape, 2, ModulatorStructure::Full);
    let layer_ok = frozen == 4608 && trainable == 162;

    // Hand audit of resnet_micro(1 block, width 8) on 3x16x16 inputs, 10 classes.
    let convs = 3 * 8 * 9 // stem
        + 2 * (8 * 8 * 9) // stage 1 conv1, conv2
        + 8 * 16 * 9 + 16 * 16 * 9 + 8 * 16 // stage 2 conv1, conv2, 1x1 shortcut
        + 16 * 32 * 9 + 32 * 32 * 9 + 16 * 32; // stage 3
    let norms = 2 * (8 + 8 + 8 + 16 + 16 + 32 + 32);
    let classifier = 32 * 10 + 10;
    let modulators = 7 * 2 * 81 + 2 * 2; // seven 3x3 convs, two 1x1 shortcuts
    let expect = [
        (ParamGroupMask::BASELINE, norms + classifier, convs + norms + classifier),
        (ParamGroupMask::KERNEL_MODULATION, norms + classifier + modulators, convs + norms + classifier + modulators),
        (ParamGroupMask::FULL, convs + norms + classifier, convs + norms + classifier),
    ];
    let mut audit_ok = true;
    let mut parts = Vec::new();
    for (mask, trainable, total) in expect {
        let c = build_network(desk_spec(), mask, 0).unwrap().count_params();
        audit_ok &= c.trainable == trainable && c.total == total;
        parts.push(format!("{mask}: {}/{} (audit {trainable}/{total})", c.trainable, c.total));
    }
    r.line(
        "5 parameter accounting",
        layer_ok && audit_ok,
        format!(
            "(32,16,3,3) depth 2: {frozen} frozen / {trainable} trainable ({:.1}X); desk network trainable/total {}",
            frozen as f64 / trainable as f64,
            parts.join("; ")
        ),
    );
}

fn ratios(r: &mut Report) {
    let km = recovered_accuracy_ratio(0.7760, 0.928).unwrap();
    let bl = recovered_accuracy_ratio(0.5958, 0.928).unwrap();
    let two = |v: f64| (v * 100.0).round() / 100.0;
    r.line(
        "6 recovered accuracy ratio",
        two(km) == 0.84 && two(bl) == 0.64,
        format!("(0.7760, 0.928) -> {km:.4} ~ {:.2}; (0.5958, 0.928) -> {bl:.4} ~ {:.2}", two(km), two(bl)),
    );
}

fn memory(r: &mut Report) {
    let m = memory_report(94_000_000, 1_316_000, 100).unwrap();
    let km_mb = m.km_total_bytes as f64 / 1e6;
    let pass = (km_mb - 225.6).abs() < 0.05 && (m.per_task_factor - 71.4).abs() < 0.05 && (m.reduction_factor - 41.7).abs() < 0.05;
    r.line(
        "7 memory arithmetic",
        pass,
        format!(
            "km_total {km_mb:.1} MB, per-task factor {:.1}X, reduction {:.1}X (the published figure of 43X does not follow from 9400 MB / 225.6 MB)",
            m.per_task_factor, m.reduction_factor
        ),
    );
}

/// Desk runs keyed by (config label, seed). Network init and batch order
/// both follow the seed, as in `run_ablation`.
struct Desk {
    train: DatasetSplit,
    test: DatasetSplit,
    cfg: TrainConfig,
    runs: HashMap<(String, u64), RunResult>,
}

impl Desk {
    fn new() -> Self {
        let (train, test) = synth_task(SynthKind::StripedTextures, 10, 100, 16, 0).unwrap();
        Desk {
            train,
            test,
            cfg: TrainConfig::default(),
            runs: HashMap::new(),
        }
    }

    fn run(&mut self, label: &str, mask: ParamGroupMask) -> Vec<RunResult> {
        SEEDS
            .iter()
            .map(|&seed| {
                let key = (label.to_string(), seed);
                if let Some(r) = self.runs.get(&key) {
                    return r.clone();
                }
                let mut net = build_network(desk_spec(), mask, seed).unwrap();
                let cfg = TrainConfig { seed, ..self.cfg.clone() };
                let r = train(&mut net, &self.train, Some(&self.test), &cfg, &mut |_| {}).unwrap();
                self.runs.insert(key, r.clone());
                r
            })
            .collect()
    }
}

fn accuracies(runs: &[RunResult]) -> Vec<f64> {
    runs.iter().map(|r| r.final_test_accuracy).collect()
}

fn fmt_ms(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.3} +/- {s:.3}")
}

fn table_one_proxy(r: &mut Report, desk: &mut Desk) {
    let start = Instant::now();
    let full = desk.run("full", ParamGroupMask::FULL);
    let km = desk.run("km", ParamGroupMask::KERNEL_MODULATION);
    let bl = desk.run("bl", ParamGroupMask::BASELINE);
    let (f, k, b) = (mean_std(&accuracies(&full)).0, mean_std(&accuracies(&km)).0, mean_std(&accuracies(&bl)).0);
    r.line(
        "8 mask ordering (synthetic desk task)",
        f > k && k > b && k - b >= KM_MARGIN,
        format!(
            "all-parameters {} > KM {} > BL {}, KM - BL = {:.1} points >= {:.0}; {:.0}s",
            fmt_ms(&accuracies(&full)),
            fmt_ms(&accuracies(&km)),
            fmt_ms(&accuracies(&bl)),
            100.0 * (k - b),
            100.0 * KM_MARGIN,
            start.elapsed().as_secs_f64()
        ),
    );
    let gap = |runs: &[RunResult]| mean_std(&runs.iter().map(|r| r.final_train_accuracy - r.final_test_accuracy).collect::<Vec<_>>()).0;
    r.line(
        "generalization gap (desk task)",
        gap(&km) <= gap(&full),
        format!("train - test accuracy: KM {:.3} <= all-parameters {:.3}", gap(&km), gap(&full)),
    );
}

fn table_one_cifar(r: &mut Report) {
    let Some(dir) = std::env::var_os("KM_CIFAR10_DIR") else {
        r.note("8 mask ordering (CIFAR-10 subset)", "NOT RUN", "KM_CIFAR10_DIR is not set; no CIFAR-10 batches available".into());
        return;
    };
    let start = Instant::now();
    let train_data = load_cifar10_binary(&dir, Split::Train, Some(4000), 0).unwrap();
    let test_data = load_cifar10_binary(&dir, Split::Test, Some(2000), 0).unwrap();
    let spec = NetworkSpec::resnet_micro(1, 8, [3, 32, 32], 10);
    let base_cfg = TrainConfig {
        augment: "crop_flip:4".parse().unwrap(),
        ..TrainConfig::default()
    };
    let mut means = Vec::new();
    let mut parts = Vec::new();
    for mask in [ParamGroupMask::FULL, ParamGroupMask::KERNEL_MODULATION, ParamGroupMask::BASELINE] {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let mut net = build_network(spec, mask, seed).unwrap();
                let cfg = TrainConfig { seed, ..base_cfg.clone() };
                train(&mut net, &train_data, Some(&test_data), &cfg, &mut |_| {}).unwrap().final_test_accuracy
            })
            .collect();
        means.push(mean_std(&accs).0);
        parts.push(format!("{mask} {}", fmt_ms(&accs)));
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    r.line(
        "8 mask ordering (CIFAR-10 subset)",
        means[0] > means[1] && means[1] > means[2] && means[1] - means[2] >= KM_MARGIN,
        format!("{}; KM - BL = {:.1} points; {minutes:.1} min (target < 60)", parts.join(", "), 100.0 * (means[1] - means[2])),
    );
}

fn ablations(r: &mut Report, desk: &mut Desk) {
    let default_accs = accuracies(&desk.run("km", ParamGroupMask::KERNEL_MODULATION));
    let base = AblationBase {
        spec: desk_spec(),
        mask: ParamGroupMask::KERNEL_MODULATION,
        train: desk.cfg.clone(),
        train_data: &desk.train,
        test_data: &desk.test,
    };
    let table = |values: &[AblationValue]| run_ablation(values, &base, &SEEDS, &mut |_, _, _| {}).unwrap();
    let start = Instant::now();

    let act = table(&[AblationValue::Activation(Activation::Sin), AblationValue::Activation(Activation::Relu)]);
    let init = table(&[AblationValue::Init(InitMethod::Diagonal { sigma: 0.001 })]);
    let depth = table(&[AblationValue::Depth(8)]);

    let (tanh, _) = mean_std(&default_accs);
    let sin = act.row("sin").unwrap();
    let relu = act.row("relu").unwrap();
    let diag = init.rows[0].clone();
    let d8 = depth.rows[0].clone();
    let ms = |row: &kmod::train::AblationRow| format!("{:.3} +/- {:.3}", row.mean, row.std);
    let default = fmt_ms(&default_accs);

    r.line(
        "9a activation ablation",
        tanh > relu.mean && sin.mean > relu.mean,
        format!("tanh {default}, sin {}, relu {}", ms(sin), ms(relu)),
    );
    r.line(
        "9b initialization ablation",
        tanh > diag.mean,
        format!("identity_noise {default} > diagonal {}", ms(&diag)),
    );
    r.line(
        "9c depth ablation",
        tanh >= d8.mean,
        format!("depth 2 {default} >= depth 8 {}; {:.0}s", ms(&d8), start.elapsed().as_secs_f64()),
    );
}

fn integrity(r: &mut Report, desk: &Desk) {
    let mut net = build_network(desk_spec(), ParamGroupMask::KERNEL_MODULATION, 0).unwrap();
    let initial: Vec<Tensor> = (0..net.convs().len()).map(|i| net.param(ParamRef::ConvWeight(i))).collect();
    let base = net.clone();
    let cfg = TrainConfig { epochs: 3, ..desk.cfg.clone() };
    train(&mut net, &desk.train, Some(&desk.test), &cfg, &mut |_| {}).unwrap();
    let frozen = initial.iter().enumerate().all(|(i, w)| net.param(ParamRef::ConvWeight(i)) == *w);

    let delta = export_delta(&net, "desk").unwrap();
    let bytes = delta.to_bytes().unwrap();
    let applied = apply_delta(&base, &KmDelta::from_bytes(&bytes).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let x = Tensor::randn([100, 3, 16, 16], 1.0, &mut rng);
    let exact = net.predict(&x).unwrap() == applied.predict(&x).unwrap();

    let trainable = net.count_params().trainable;
    let bound = 4 * trainable + delta.header_bytes();
    r.line(
        "10 frozen weights and delta integrity",
        frozen && exact && bytes.len() <= bound,
        format!(
            "conv weights bit-identical: {frozen}; logits bit-exact on 100 inputs: {exact}; delta {} bytes <= 4 x {trainable} + {} header = {bound}",
            bytes.len(),
            delta.header_bytes()
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report::default();
    gradients(&mut r);
    implicit_theorem(&mut r);
    folding(&mut r);
    init_preservation(&mut r);
    accounting(&mut r);
    ratios(&mut r);
    memory(&mut r);
    let mut desk = Desk::new();
    table_one_cifar(&mut r);
    table_one_proxy(&mut r, &mut desk);
    ablations(&mut r, &mut desk);
    integrity(&mut r, &desk);
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
