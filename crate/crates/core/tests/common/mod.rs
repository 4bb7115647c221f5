#![allow(dead_code)]

use kmod::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Central-difference step for gradient checks.
pub const FD_EPS: f64 = 1e-3;

/// Gradients whose largest entry is below this are compared absolutely.
const TINY: f64 = 1e-8;

/// Relative error between the analytic gradient of `sum(weights * f(inputs))`
/// and its central difference: per input, the largest entry of |a - n|
/// divided by the largest magnitude in either gradient; worst input wins.
/// Scaling per tensor keeps the O(eps^2) truncation error of near-zero
/// entries from dominating.
///
/// `f` records the function on a fresh tape given one handle per input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, rng: &mut impl Rng) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        tape.value(y).numel()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss_of = |values: &[Tensor<f64>], record: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| if record { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let y = f(&mut tape, &vars);
        let loss = tape.weighted_sum(y, weights.clone()).expect("weights match output");
        let value = tape.value(loss).data()[0];
        if !record {
            return (value, Vec::new());
        }
        tape.backward(loss).expect("scalar loss");
        let grads = vars.iter().map(|&v| tape.grad_data(v).map(|g| g.to_vec())).collect();
        (value, grads)
    };
    let (_, analytic) = loss_of(inputs, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let grad = analytic[k].clone().unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric: Vec<f64> = (0..input.numel())
            .map(|i| {
                let mut values = inputs.to_vec();
                values[k].data_mut()[i] = input.data()[i] + FD_EPS;
                let (up, _) = loss_of(&values, false);
                values[k].data_mut()[i] = input.data()[i] - FD_EPS;
                let (down, _) = loss_of(&values, false);
                (up - down) / (2.0 * FD_EPS)
            })
            .collect();
        let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = inf_norm(&grad).max(inf_norm(&numeric));
        let diff = grad.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(if scale < TINY { diff } else { diff / scale });
    }
    worst
}

/// Gaussian tensor whose entries keep at least `gap` away from zero, so
/// kinked functions are differentiable within the finite-difference step.
pub fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape.to_vec(), 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * 2.0;
        }
    }
    t
}

/// Direct-loop cross-correlation used as an oracle for the GEMM kernel.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (n, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * n * oh * ow];
    for bi in 0..b {
        for o in 0..n {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - padding as isize;
                                let ix = (xo * stride + j) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * n + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new([b, n, oh, ow], out).unwrap()
}

use kmod::modulator::{modulate_on_tape, ModulatorStructure};
use kmod::tensor::{Activation, NormLayout};

/// Ops covered by the gradient checks.
pub const GRAD_OPS: [&str; 12] = [
    "conv2d",
    "matmul",
    "tanh",
    "sin",
    "relu",
    "leaky_relu",
    "norm_batch",
    "norm_group",
    "norm_fixed",
    "modulate",
    "modulate_diagonal",
    "cross_entropy",
];

/// Worst relative gradient error of one random instance of `op`.
pub fn op_gradient_error(op: &str, rng: &mut impl Rng) -> f64 {
    match op {
        "conv2d" => {
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let x = Tensor::<f64>::randn([2, 2, 5, 5], 1.0, rng);
            let w = Tensor::<f64>::randn([3, 2, 3, 3], 1.0, rng);
            gradcheck(&[x, w], |t, v| t.conv2d(v[0], v[1], stride, padding).unwrap(), rng)
        }
        "matmul" => {
            let a = Tensor::<f64>::randn([3, 4], 1.0, rng);
            let b = Tensor::<f64>::randn([4, 5], 1.0, rng);
            gradcheck(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap(), rng)
        }
        "tanh" | "sin" | "relu" | "leaky_relu" => {
            let act: Activation = op.parse().unwrap();
            let x = randn_away_from_zero(&[4, 6], 0.01, rng);
            gradcheck(&[x], move |t, v| t.activation(act, v[0]), rng)
        }
        "norm_batch" | "norm_group" | "norm_fixed" => {
            let x = Tensor::<f64>::randn([3, 4, 3, 3], 1.0, rng);
            let g = Tensor::<f64>::uniform([4], 0.5, 1.5, rng);
            let b = Tensor::<f64>::randn([4], 1.0, rng);
            let layout = match op {
                "norm_batch" => NormLayout::Batch { eps: 1e-5 },
                "norm_group" => NormLayout::Group { groups: 2, eps: 1e-5 },
                _ => NormLayout::Fixed {
                    mean: Tensor::<f64>::randn([4], 1.0, rng).into_data(),
                    std: Tensor::<f64>::uniform([4], 0.5, 2.0, rng).into_data(),
                },
            };
            gradcheck(
                &[x, g, b],
                move |t, v| t.normalize(v[0], v[1], v[2], &layout).unwrap().out,
                rng,
            )
        }
        "modulate" | "modulate_diagonal" => {
            let diagonal = op == "modulate_diagonal";
            let w = Tensor::<f64>::randn([3, 2, 2, 2], 0.5, rng);
            let layer = |rng: &mut _| {
                if diagonal {
                    Tensor::<f64>::uniform([4], 0.5, 1.5, rng)
                } else {
                    let mut u = Tensor::<f64>::randn([4, 4], 0.3, rng);
                    for i in 0..4 {
                        u.data_mut()[i * 5] += 1.0;
                    }
                    u
                }
            };
            let (u1, u2) = (layer(rng), layer(rng));
            let structure = if diagonal {
                ModulatorStructure::Diagonal
            } else {
                ModulatorStructure::Full
            };
            gradcheck(
                &[w, u1, u2],
                move |t, v| modulate_on_tape(t, v[0], &v[1..], Activation::Tanh, structure).unwrap(),
                rng,
            )
        }
        "cross_entropy" => {
            let logits = Tensor::<f64>::randn([4, 5], 2.0, rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            gradcheck(&[logits], move |t, v| t.cross_entropy(v[0], &labels).unwrap(), rng)
        }
        other => panic!("no gradient case for {other}"),
    }
}
