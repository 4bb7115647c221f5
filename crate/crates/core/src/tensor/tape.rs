use super::kernels::{self, ConvGeometry};
use super::{Activation, Scalar, Tensor};
use crate::error::{KmError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a normalization op groups elements when computing statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum NormLayout<T> {
    /// Per-channel statistics over (batch, height, width).
    Batch { eps: T },
    /// Per-sample statistics over each group of channels.
    Group { groups: usize, eps: T },
    /// Fixed per-channel mean and standard deviation (inference).
    Fixed { mean: Vec<T>, std: Vec<T> },
}

/// Result of [`Tape::normalize`].
#[derive(Debug)]
pub struct NormOutput<T> {
    pub out: Var,
    /// Per-channel batch mean and standard deviation, for
    /// [`NormLayout::Batch`] only.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    ScaleColumns {
        x: Var,
        scale: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        // Channel count, spatial plane size and per-set bookkeeping.
        channels: usize,
        plane: usize,
        groups: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation graph. [`Tape::backward`] walks it in reverse, visiting every
/// node reachable from the loss exactly once.
///
/// Gradient buffers accumulate: calling `backward` twice without
/// [`Tape::zero_grad`] in between adds the second gradient onto the first.
/// Buffers are only ever allocated for values that require a gradient, so a
/// frozen constant never carries one.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Number of allocated gradient buffers.
    pub fn grad_buffer_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data());
        let rg = self.needs(input) || self.needs(weight);
        let t = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = super::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul { a, b }, rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let t = super::elementwise(kind, self.value(x));
        let rg = self.needs(x);
        self.push(t, Op::Activation { x, kind }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(KmError::dim(
                "add",
                format!("shapes {:?} and {:?} differ", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `x[m, n] * scale[n]`, scaling every column by its own factor.
    pub fn scale_columns(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(scale));
        if vx.rank() != 2 || vs.shape() != [vx.shape()[1]] {
            return Err(KmError::dim(
                "scale_columns",
                format!("cannot scale {:?} by {:?}", vx.shape(), vs.shape()),
            ));
        }
        let n = vs.numel();
        let s = vs.data();
        let data = vx.data().iter().enumerate().map(|(i, v)| *v * s[i % n]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(scale);
        Ok(self.push(t, Op::ScaleColumns { x, scale }, rg))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.shape() != [vx.shape()[1]] {
            return Err(KmError::dim(
                "add_row_bias",
                format!("cannot add {:?} to {:?}", vb.shape(), vx.shape()),
            ));
        }
        let n = vb.numel();
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, v)| *v + b[i % n]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRowBias { x, bias }, rg))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(KmError::dim(
                "global_avg_pool",
                format!("expected [B, C, H, W], got {:?}", vx.shape()),
            ));
        }
        let (b, c, plane) = (vx.shape()[0], vx.shape()[1], vx.shape()[2] * vx.shape()[3]);
        let inv = T::one() / T::lit(plane as f64);
        let data = vx
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new([b, c], data)?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }, rg))
    }

    /// Normalize `[B, C, H, W]` activations and apply the per-channel affine
    /// `gamma * x_hat + beta`.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: &NormLayout<T>,
    ) -> Result<NormOutput<T>> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(KmError::dim(
                "normalize",
                format!("expected [B, C, H, W], got {:?}", vx.shape()),
            ));
        }
        let shape = vx.shape().to_vec();
        let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [channels] {
                return Err(KmError::dim(
                    "normalize",
                    format!(
                        "{name} has shape {:?} but input has {channels} channels",
                        self.value(v).shape()
                    ),
                ));
            }
        }
        let xs = vx.data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut batch_stats = None;
        let (inv_std, groups) = match layout {
            NormLayout::Batch { eps } => {
                let count = T::lit((batch * plane) as f64);
                let mut means = vec![T::zero(); channels];
                let mut stds = vec![T::zero(); channels];
                let mut inv = vec![T::zero(); channels];
                for c in 0..channels {
                    let chunks = (0..batch).map(|b| &xs[(b * channels + c) * plane..][..plane]);
                    let mean = chunks.clone().flatten().copied().sum::<T>() / count;
                    let var = chunks
                        .clone()
                        .flatten()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        / count;
                    let std = (var + *eps).sqrt();
                    means[c] = mean;
                    stds[c] = std;
                    inv[c] = T::one() / std;
                    for b in 0..batch {
                        let base = (b * channels + c) * plane;
                        for i in base..base + plane {
                            xhat[i] = (xs[i] - mean) * inv[c];
                        }
                    }
                }
                batch_stats = Some((means, stds));
                (inv, None)
            }
            NormLayout::Group { groups, eps } => {
                let groups = *groups;
                if groups == 0 || channels % groups != 0 {
                    return Err(KmError::dim(
                        "normalize",
                        format!("{channels} channels cannot be split into {groups} groups"),
                    ));
                }
                let span = channels / groups * plane;
                let count = T::lit(span as f64);
                let mut inv = vec![T::zero(); batch * groups];
                for (set, chunk) in xs.chunks(span).enumerate() {
                    let mean = chunk.iter().copied().sum::<T>() / count;
                    let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                    let r = T::one() / (var + *eps).sqrt();
                    inv[set] = r;
                    for (o, &v) in xhat[set * span..(set + 1) * span].iter_mut().zip(chunk) {
                        *o = (v - mean) * r;
                    }
                }
                (inv, Some(groups))
            }
            NormLayout::Fixed { mean, std } => {
                if mean.len() != channels || std.len() != channels {
                    return Err(KmError::dim(
                        "normalize",
                        format!(
                            "fixed statistics have {} / {} entries for {channels} channels",
                            mean.len(),
                            std.len()
                        ),
                    ));
                }
                let inv: Vec<T> = std.iter().map(|&s| T::one() / s).collect();
                for (i, (o, &v)) in xhat.iter_mut().zip(xs).enumerate() {
                    let c = (i / plane) % channels;
                    *o = (v - mean[c]) * inv[c];
                }
                (inv, Some(0))
            }
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = match layout {
            // Fixed statistics collapse into one per-channel affine of x, so
            // a layer with folded statistics (mean 0, std 1) reproduces the
            // output bit for bit.
            NormLayout::Fixed { mean, std } => {
                let (scale, offset) = fixed_affine(g, bt, mean, std);
                xs.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = (i / plane) % channels;
                        v * scale[c] + offset[c]
                    })
                    .collect()
            }
            _ => xhat
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let c = (i / plane) % channels;
                    g[c] * h + bt[c]
                })
                .collect(),
        };
        let t = Tensor::new(shape, out)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            t,
            Op::Normalize {
                x,
                gamma,
                beta,
                channels,
                plane,
                groups,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok(NormOutput { out, batch_stats })
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != labels.len() {
            return Err(KmError::dim(
                "cross_entropy",
                format!("logits {:?} for {} labels", vl.shape(), labels.len()),
            ));
        }
        let k = vl.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(KmError::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); vl.numel()];
        let mut total = T::zero();
        for (row, (z, p)) in vl.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (pi, &zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                sum = sum + *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / sum;
            }
            total = total + (sum.ln() + max - z[labels[row]]);
        }
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![T::one(); n]).expect("matching length")
    }

    /// `sum(x * weights)` for a fixed weight buffer of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if weights.len() != vx.numel() {
            return Err(KmError::dim(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), vx.numel()),
            ));
        }
        let s = vx.data().iter().zip(&weights).map(|(a, b)| *a * *b).sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Propagate d`loss` back through the tape, accumulating into the
    /// gradient buffer of every value that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(KmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(KmError::Contract(
                "loss does not depend on any value that requires a gradient".into(),
            ));
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (xi, wi) = (self.value(*input), self.value(*weight));
                let mut dx = self.needs(*input).then(|| vec![T::zero(); xi.numel()]);
                let mut dw = self.needs(*weight).then(|| vec![T::zero(); wi.numel()]);
                kernels::conv2d_backward(
                    geom,
                    xi.data(),
                    wi.data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                for (v, d) in [(*input, dx), (*weight, dw)] {
                    if let Some(d) = d {
                        let acc = ensure(pending, v, d.len());
                        acc.iter_mut().zip(&d).for_each(|(a, b)| *a = *a + *b);
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    // dA[m, k] += G[m, n] * B[k, n]^T
                    let acc = ensure(pending, *a, m * k);
                    T::gemm(m, n, k, g, false, vb.data(), true, acc, true);
                }
                if self.needs(*b) {
                    // dB[k, n] += A[m, k]^T * G[m, n]
                    let acc = ensure(pending, *b, k * n);
                    T::gemm(k, m, n, va.data(), true, g, false, acc, true);
                }
            }
            Op::Activation { x, kind } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let acc = ensure(pending, *x, xs.len());
                for (((a, &gx), &xv), &yv) in acc.iter_mut().zip(g).zip(xs).zip(ys) {
                    *a = *a + gx * kind.derivative(xv, yv);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let acc = ensure(pending, v, g.len());
                        acc.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y);
                    }
                }
            }
            Op::Reshape { x } => {
                let acc = ensure(pending, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
            }
            Op::ScaleColumns { x, scale } => {
                let s = self.value(*scale).data();
                let n = s.len();
                if self.needs(*x) {
                    let acc = ensure(pending, *x, g.len());
                    for (i, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                        *a = *a + *gi * s[i % n];
                    }
                }
                if self.needs(*scale) {
                    let xs = self.value(*x).data();
                    let acc = ensure(pending, *scale, n);
                    for (i, (gi, xv)) in g.iter().zip(xs).enumerate() {
                        acc[i % n] = acc[i % n] + *gi * *xv;
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                let n = self.value(*bias).numel();
                if self.needs(*x) {
                    let acc = ensure(pending, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
                }
                if self.needs(*bias) {
                    let acc = ensure(pending, *bias, n);
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape();
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::lit(plane as f64);
                let acc = ensure(pending, *x, g.len() * plane);
                for (p, &gi) in acc.chunks_mut(plane).zip(g) {
                    p.iter_mut().for_each(|a| *a = *a + gi * inv);
                }
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                channels,
                plane,
                groups,
                xhat,
                inv_std,
            } => {
                let (channels, plane) = (*channels, *plane);
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); channels];
                    let mut db = vec![T::zero(); channels];
                    for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                        let c = (i / plane) % channels;
                        dg[c] = dg[c] + *gi * *h;
                        db[c] = db[c] + *gi;
                    }
                    for (v, d) in [(*gamma, dg), (*beta, db)] {
                        if self.needs(v) {
                            let acc = ensure(pending, v, channels);
                            acc.iter_mut().zip(&d).for_each(|(a, b)| *a = *a + *b);
                        }
                    }
                }
                if self.needs(*x) {
                    let dxhat: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| *gi * gam[(i / plane) % channels])
                        .collect();
                    let acc = ensure(pending, *x, g.len());
                    match groups {
                        // Fixed statistics: x_hat is affine in x.
                        Some(0) => {
                            for (i, (a, d)) in acc.iter_mut().zip(&dxhat).enumerate() {
                                *a = *a + *d * inv_std[(i / plane) % channels];
                            }
                        }
                        Some(groups) => {
                            let span = channels / groups * plane;
                            set_backward(
                                (0..g.len() / span).map(|s| (s, s * span..(s + 1) * span)),
                                &dxhat,
                                xhat,
                                inv_std,
                                acc,
                            );
                        }
                        None => {
                            let batch = g.len() / (channels * plane);
                            for c in 0..channels {
                                let ranges: Vec<_> = (0..batch)
                                    .map(|b| {
                                        let s = (b * channels + c) * plane;
                                        s..s + plane
                                    })
                                    .collect();
                                batch_set_backward(&ranges, &dxhat, xhat, inv_std[c], acc);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let acc = ensure(pending, *logits, probs.len());
                for (row, (a, p)) in acc.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                    for (j, (aj, pj)) in a.iter_mut().zip(p).enumerate() {
                        let target = if j == labels[row] { T::one() } else { T::zero() };
                        *aj = *aj + (*pj - target) * scale;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let acc = ensure(pending, *x, weights.len());
                acc.iter_mut().zip(weights).for_each(|(a, w)| *a = *a + g[0] * *w);
            }
        }
    }
}

// dx = r * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) over each
// normalization set.
fn set_backward<T: Scalar>(
    sets: impl Iterator<Item = (usize, std::ops::Range<usize>)>,
    dxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    acc: &mut [T],
) {
    for (s, range) in sets {
        let n = T::lit(range.len() as f64);
        let mean_d = dxhat[range.clone()].iter().copied().sum::<T>() / n;
        let mean_dx = dxhat[range.clone()]
            .iter()
            .zip(&xhat[range.clone()])
            .map(|(d, h)| *d * *h)
            .sum::<T>()
            / n;
        for i in range {
            acc[i] = acc[i] + inv_std[s] * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
}

fn batch_set_backward<T: Scalar>(
    ranges: &[std::ops::Range<usize>],
    dxhat: &[T],
    xhat: &[T],
    r: T,
    acc: &mut [T],
) {
    let count: usize = ranges.iter().map(|r| r.len()).sum();
    let n = T::lit(count as f64);
    let mut sum_d = T::zero();
    let mut sum_dx = T::zero();
    for range in ranges {
        for i in range.clone() {
            sum_d = sum_d + dxhat[i];
            sum_dx = sum_dx + dxhat[i] * xhat[i];
        }
    }
    let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
    for range in ranges {
        for i in range.clone() {
            acc[i] = acc[i] + r * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
}

/// Per-channel `(gamma / std, beta - mean * gamma / std)`, the affine an
/// eval-mode normalization applies to its input.
pub(crate) fn fixed_affine<T: Scalar>(gamma: &[T], beta: &[T], mean: &[T], std: &[T]) -> (Vec<T>, Vec<T>) {
    let scale: Vec<T> = gamma.iter().zip(std).map(|(&g, &s)| g / s).collect();
    let offset = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &k)| b - k * m)
        .collect();
    (scale, offset)
}
