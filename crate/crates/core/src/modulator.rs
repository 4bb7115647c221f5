//! Explicit kernel modulation.
//!
//! A [`KernelModulator`] is a bias-free MLP that rewrites a frozen
//! convolution weight `W` of shape `(k_n, k_c, k_h, k_w)` into the weight the
//! layer actually uses. `W` is viewed as `k_n * k_c` rows of `k_h * k_w`
//! spatial taps; every row passes through the same stack of square matrices,
//! each followed by the activation, and the result is folded back into the
//! original 4D shape. Rows never mix, so each (kernel, channel) slice is
//! modulated independently.
//!
//! With the default initialization (tanh, two layers, `I + N(0, 0.001)`) the
//! modulated weights are nearly identical to the originals for the small
//! magnitudes a conv initializer produces.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{KmError, Result};
use crate::rng;
use crate::tensor::{Activation, Scalar, Tape, Tensor, Var};

/// Extents of a 4D convolution weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelShape {
    pub kernels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl KernelShape {
    pub fn new(kernels: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if kernels == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(KmError::Config(format!(
                "kernel extents must be positive, got ({kernels}, {channels}, {height}, {width})"
            )));
        }
        Ok(KernelShape {
            kernels,
            channels,
            height,
            width,
        })
    }

    pub fn of<T: Scalar>(w: &Tensor<T>) -> Result<Self> {
        match *w.shape() {
            [n, c, h, w] => Self::new(n, c, h, w),
            _ => Err(KmError::dim(
                "kernel",
                format!("expected a 4D weight, got shape {:?}", w.shape()),
            )),
        }
    }

    /// Side of the modulator matrices, `k_h * k_w`.
    pub fn side(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.kernels * self.channels
    }

    pub fn numel(&self) -> usize {
        self.rows() * self.side()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.kernels, self.channels, self.height, self.width]
    }
}

/// Whether modulator matrices are dense or restricted to their diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulatorStructure {
    Full,
    /// Off-diagonal entries are fixed at zero; only the diagonal trains.
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMethod {
    /// `I + N(0, sigma)` elementwise; `sigma` is a standard deviation.
    IdentityNoise { sigma: f64 },
    /// A random orthogonal matrix.
    Orthogonal,
    /// Diagonal `1 + N(0, sigma)`, off-diagonal zero and frozen.
    Diagonal { sigma: f64 },
}

impl InitMethod {
    pub const DEFAULT_SIGMA: f64 = 0.001;

    pub fn structure(&self) -> ModulatorStructure {
        match self {
            InitMethod::Diagonal { .. } => ModulatorStructure::Diagonal,
            _ => ModulatorStructure::Full,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InitMethod::IdentityNoise { .. } => "identity_noise",
            InitMethod::Orthogonal => "orthogonal",
            InitMethod::Diagonal { .. } => "diagonal",
        }
    }

    /// Parse a method name, attaching `sigma` where the method uses one.
    pub fn parse(name: &str, sigma: f64) -> Result<Self> {
        match name.trim() {
            "identity_noise" => Ok(InitMethod::IdentityNoise { sigma }),
            "orthogonal" => Ok(InitMethod::Orthogonal),
            "diagonal" => Ok(InitMethod::Diagonal { sigma }),
            other => Err(KmError::Config(format!("unknown init method {other:?}"))),
        }
    }
}

impl Default for InitMethod {
    fn default() -> Self {
        InitMethod::IdentityNoise {
            sigma: Self::DEFAULT_SIGMA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub method: InitMethod,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(method: InitMethod, seed: u64) -> Self {
        InitSpec { method, seed }
    }
}

/// Per-layer MLP mapping frozen kernel rows to modulated kernel rows.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelModulator {
    layers: Vec<Tensor>,
    activation: Activation,
    structure: ModulatorStructure,
}

impl KernelModulator {
    /// Assemble a modulator from explicit matrices.
    pub fn from_layers(
        layers: Vec<Tensor>,
        activation: Activation,
        structure: ModulatorStructure,
    ) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(KmError::Config("modulator depth must be at least 1".into()));
        };
        let side = first.shape().first().copied().unwrap_or(0);
        for (j, u) in layers.iter().enumerate() {
            if u.shape() != [side, side] {
                return Err(KmError::dim(
                    "modulator",
                    format!("layer {j} has shape {:?}, expected [{side}, {side}]", u.shape()),
                ));
            }
            if structure == ModulatorStructure::Diagonal {
                let off_diag = u
                    .data()
                    .iter()
                    .enumerate()
                    .any(|(i, &v)| i / side != i % side && v != 0.0);
                if off_diag {
                    return Err(KmError::Contract(format!(
                        "diagonal modulator layer {j} has nonzero off-diagonal entries"
                    )));
                }
            }
        }
        Ok(KernelModulator {
            layers,
            activation,
            structure,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Matrix side, `k_h * k_w` of the kernels this modulator accepts.
    pub fn side(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn structure(&self) -> ModulatorStructure {
        self.structure
    }

    /// The full square matrices, one per layer.
    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        per_layer_count(self.side(), self.structure) * self.depth()
    }

    /// Trainable values of layer `j`: the matrix, or its diagonal as a vector.
    pub fn layer_params(&self, j: usize) -> Tensor {
        let u = &self.layers[j];
        match self.structure {
            ModulatorStructure::Full => u.clone(),
            ModulatorStructure::Diagonal => {
                let s = self.side();
                let diag = (0..s).map(|i| u.data()[i * s + i]).collect();
                Tensor::new([s], diag).expect("diagonal length")
            }
        }
    }

    /// Overwrite the trainable values of layer `j`; the inverse of
    /// [`KernelModulator::layer_params`].
    pub fn set_layer_params(&mut self, j: usize, values: &Tensor) -> Result<()> {
        let s = self.side();
        match self.structure {
            ModulatorStructure::Full => {
                if values.shape() != [s, s] {
                    return Err(KmError::dim(
                        "modulator",
                        format!("expected [{s}, {s}], got {:?}", values.shape()),
                    ));
                }
                self.layers[j] = values.clone();
            }
            ModulatorStructure::Diagonal => {
                if values.shape() != [s] {
                    return Err(KmError::dim(
                        "modulator",
                        format!("expected [{s}], got {:?}", values.shape()),
                    ));
                }
                let u = self.layers[j].data_mut();
                for (i, &v) in values.data().iter().enumerate() {
                    u[i * s + i] = v;
                }
            }
        }
        Ok(())
    }

    /// Record the modulator's trainable values on `tape`, as parameters when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        (0..self.depth())
            .map(|j| {
                let p = self.layer_params(j);
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }
}

fn per_layer_count(side: usize, structure: ModulatorStructure) -> usize {
    match structure {
        ModulatorStructure::Full => side * side,
        ModulatorStructure::Diagonal => side,
    }
}

/// Trainable parameter count of a modulator for kernels of `shape`.
pub fn modulator_param_count(shape: KernelShape, depth: usize, structure: ModulatorStructure) -> usize {
    depth * per_layer_count(shape.side(), structure)
}

/// `(k_n, k_c, k_h, k_w) -> (k_n * k_c, k_h * k_w)`.
pub fn reshape_4d_to_2d(w: &Tensor) -> Result<Tensor> {
    let shape = KernelShape::of(w)?;
    w.clone().reshape([shape.rows(), shape.side()])
}

/// Inverse of [`reshape_4d_to_2d`].
pub fn reshape_2d_to_4d(w: &Tensor, shape: KernelShape) -> Result<Tensor> {
    if w.shape() != [shape.rows(), shape.side()] {
        return Err(KmError::dim(
            "reshape_2d_to_4d",
            format!(
                "{:?} does not flatten kernel shape {:?}",
                w.shape(),
                shape.dims()
            ),
        ));
    }
    w.clone().reshape(shape.dims())
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthogonal factor of a Gaussian matrix, via modified Gram-Schmidt with
/// the sign convention that makes the distribution Haar.
fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        // Columns of a, stored column-major for convenient orthogonalization.
        let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| gaussian(rng)).collect()).collect();
        let mut degenerate = false;
        for j in 0..n {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj: f64 = done[i].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[i]).for_each(|(v, q)| *v -= proj * q);
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-10 {
                degenerate = true;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if !degenerate {
            let mut q = vec![0.0; n * n];
            for (j, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    q[i * n + j] = v;
                }
            }
            return q;
        }
    }
}

/// Build a freshly initialized modulator for kernels of `shape`.
///
/// Matrix `j` draws from its own stream derived from `(spec.seed, j)`, so the
/// result is fully determined by `spec`.
pub fn init_modulator(
    shape: KernelShape,
    depth: usize,
    activation: Activation,
    spec: &InitSpec,
) -> Result<KernelModulator> {
    if depth == 0 {
        return Err(KmError::Config("modulator depth must be at least 1".into()));
    }
    let s = shape.side();
    let layers = (0..depth)
        .map(|j| {
            let mut rng = rng::stream(spec.seed, &[j as u64]);
            let data: Vec<f32> = match spec.method {
                InitMethod::IdentityNoise { sigma } => {
                    check_sigma(sigma)?;
                    (0..s * s)
                        .map(|i| {
                            let eye = if i / s == i % s { 1.0 } else { 0.0 };
                            (eye + sigma * gaussian(&mut rng)) as f32
                        })
                        .collect()
                }
                InitMethod::Orthogonal => random_orthogonal(s, &mut rng)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
                InitMethod::Diagonal { sigma } => {
                    check_sigma(sigma)?;
                    let mut d = vec![0.0f32; s * s];
                    for i in 0..s {
                        d[i * s + i] = (1.0 + sigma * gaussian(&mut rng)) as f32;
                    }
                    d
                }
            };
            Tensor::new([s, s], data)
        })
        .collect::<Result<Vec<_>>>()?;
    KernelModulator::from_layers(layers, activation, spec.method.structure())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(KmError::Config(format!("init sigma must be >= 0, got {sigma}")))
    }
}

/// Modulate a weight already recorded on `tape`.
///
/// `layers` holds one handle per modulator layer: `[s, s]` matrices for
/// [`ModulatorStructure::Full`], `[s]` diagonals for
/// [`ModulatorStructure::Diagonal`]. Gradients reach `w` only if `w` itself
/// requires one.
pub fn modulate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    layers: &[Var],
    activation: Activation,
    structure: ModulatorStructure,
) -> Result<Var> {
    let shape = match *tape.value(w).shape() {
        [n, c, h, w] => KernelShape::new(n, c, h, w)?,
        ref other => {
            return Err(KmError::dim(
                "modulate",
                format!("expected a 4D weight, got shape {other:?}"),
            ))
        }
    };
    let s = shape.side();
    for (j, &u) in layers.iter().enumerate() {
        let expected: &[usize] = match structure {
            ModulatorStructure::Full => &[s, s],
            ModulatorStructure::Diagonal => &[s],
        };
        if tape.value(u).shape() != expected {
            return Err(KmError::dim(
                "modulate",
                format!(
                    "kernel spatial size {}x{} needs modulator layers of shape {expected:?}, \
                     layer {j} has {:?}",
                    shape.height,
                    shape.width,
                    tape.value(u).shape()
                ),
            ));
        }
    }
    let mut h = tape.reshape(w, [shape.rows(), s])?;
    for &u in layers {
        h = match structure {
            ModulatorStructure::Full => tape.matmul(h, u)?,
            ModulatorStructure::Diagonal => tape.scale_columns(h, u)?,
        };
        h = tape.activation(activation, h);
    }
    tape.reshape(h, shape.dims())
}

/// Modulated weight `g(W; U)`, same shape as `w`.
pub fn modulate(w: &Tensor, m: &KernelModulator) -> Result<Tensor> {
    let shape = KernelShape::of(w)?;
    if shape.side() != m.side() {
        return Err(KmError::dim(
            "modulate",
            format!(
                "kernel spatial size {}x{} does not match modulator side {}",
                shape.height,
                shape.width,
                m.side()
            ),
        ));
    }
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let us = m.bind(&mut tape, false);
    let out = modulate_on_tape(&mut tape, wv, &us, m.activation(), m.structure())?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> KernelShape {
        KernelShape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn flattening_example_shape() {
        let w = Tensor::zeros([32, 16, 3, 3]);
        assert_eq!(reshape_4d_to_2d(&w).unwrap().shape(), &[512, 9]);
        let one = Tensor::new([1, 1, 1, 1], vec![0.25]).unwrap();
        let flat = reshape_4d_to_2d(&one).unwrap();
        assert_eq!(flat.shape(), &[1, 1]);
        assert_eq!(flat.data(), &[0.25]);
    }

    #[test]
    fn flattening_row_layout() {
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|v| v as f32).collect();
        let w = Tensor::new([2, 3, 2, 2], data).unwrap();
        let flat = reshape_4d_to_2d(&w).unwrap();
        // Row n * k_c + c holds kernel n, channel c.
        let (n, c) = (1, 2);
        let row = &flat.data()[(n * 3 + c) * 4..][..4];
        assert_eq!(row, &w.data()[((n * 3 + c) * 2) * 2..][..4]);
    }

    #[test]
    fn rejects_non_4d_weights() {
        assert!(reshape_4d_to_2d(&Tensor::zeros([3, 3])).is_err());
        assert!(reshape_2d_to_4d(&Tensor::zeros([4, 9]), shape(2, 3, 3, 3)).is_err());
    }

    #[test]
    fn zero_noise_gives_identity_layers() {
        let spec = InitSpec::new(InitMethod::IdentityNoise { sigma: 0.0 }, 5);
        let m = init_modulator(shape(4, 2, 3, 3), 3, Activation::Tanh, &spec).unwrap();
        assert_eq!(m.depth(), 3);
        for u in m.layers() {
            assert_eq!(u, &Tensor::eye(9));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = InitSpec::new(InitMethod::default(), 11);
        let a = init_modulator(shape(1, 1, 3, 3), 2, Activation::Tanh, &spec).unwrap();
        let b = init_modulator(shape(1, 1, 3, 3), 2, Activation::Tanh, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers()[0], a.layers()[1]);
        let c = init_modulator(
            shape(1, 1, 3, 3),
            2,
            Activation::Tanh,
            &InitSpec::new(InitMethod::default(), 12),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        for seed in 0..5 {
            let spec = InitSpec::new(InitMethod::Orthogonal, seed);
            let m = init_modulator(shape(2, 2, 3, 3), 2, Activation::Tanh, &spec).unwrap();
            for u in m.layers() {
                let mut tape = Tape::<f64>::new();
                let a = tape.constant(u.cast());
                let t: Tensor<f64> = {
                    let s = 9;
                    let d = u.data();
                    let tr = (0..s * s).map(|i| d[(i % s) * s + i / s] as f64).collect();
                    Tensor::new([s, s], tr).unwrap()
                };
                let b = tape.constant(t);
                let p = tape.matmul(a, b).unwrap();
                let diff = tape.value(p).max_abs_diff(&Tensor::eye(9));
                assert!(diff < 1e-5, "U U^T deviates from I by {diff}");
            }
        }
    }

    #[test]
    fn diagonal_init_has_zero_off_diagonal() {
        let spec = InitSpec::new(InitMethod::Diagonal { sigma: 0.001 }, 3);
        let m = init_modulator(shape(2, 2, 3, 3), 2, Activation::Tanh, &spec).unwrap();
        assert_eq!(m.structure(), ModulatorStructure::Diagonal);
        for u in m.layers() {
            for (i, &v) in u.data().iter().enumerate() {
                if i / 9 != i % 9 {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((v - 1.0).abs() < 0.01);
                }
            }
        }
        assert_eq!(m.layer_params(0).shape(), &[9]);
    }

    #[test]
    fn depth_zero_rejected() {
        let spec = InitSpec::new(InitMethod::default(), 0);
        assert!(init_modulator(shape(1, 1, 3, 3), 0, Activation::Tanh, &spec).is_err());
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let spec = InitSpec::new(InitMethod::default(), 1);
        let m = init_modulator(shape(4, 3, 3, 3), 2, Activation::Tanh, &spec).unwrap();
        let out = modulate(&Tensor::zeros([4, 3, 3, 3]), &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nested_tanh_reference_value() {
        let spec = InitSpec::new(InitMethod::IdentityNoise { sigma: 0.0 }, 0);
        let m = init_modulator(shape(1, 1, 1, 1), 2, Activation::Tanh, &spec).unwrap();
        let w = Tensor::new([1, 1, 1, 1], vec![0.1]).unwrap();
        let y = modulate(&w, &m).unwrap().data()[0] as f64;
        let oracle = 0.1f64.tanh().tanh();
        assert!((y - oracle).abs() < 1e-6);
        assert!((y - 0.09934).abs() < 1e-5);
    }

    #[test]
    fn diagonal_unit_modulator_is_near_identity() {
        let spec = InitSpec::new(InitMethod::Diagonal { sigma: 0.0 }, 0);
        let m = init_modulator(shape(3, 2, 3, 3), 1, Activation::Tanh, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::uniform([3, 2, 3, 3], -0.05, 0.05, &mut rng);
        let out = modulate(&w, &m).unwrap();
        assert!(out.max_abs_diff(&w) < 1e-4);
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let spec = InitSpec::new(InitMethod::default(), 0);
        let m = init_modulator(shape(1, 1, 3, 3), 2, Activation::Tanh, &spec).unwrap();
        assert!(modulate(&Tensor::zeros([2, 2, 1, 1]), &m).is_err());
    }

    #[test]
    fn parameter_counts() {
        let k3 = shape(32, 16, 3, 3);
        assert_eq!(modulator_param_count(k3, 2, ModulatorStructure::Full), 162);
        assert_eq!(modulator_param_count(shape(8, 8, 1, 1), 2, ModulatorStructure::Full), 2);
        assert_eq!(modulator_param_count(k3, 2, ModulatorStructure::Diagonal), 18);
    }

    #[test]
    fn diagonal_params_round_trip() {
        let spec = InitSpec::new(InitMethod::Diagonal { sigma: 0.01 }, 9);
        let mut m = init_modulator(shape(1, 1, 3, 3), 2, Activation::Tanh, &spec).unwrap();
        let d = Tensor::new([9], (0..9).map(|v| v as f32).collect()).unwrap();
        m.set_layer_params(1, &d).unwrap();
        assert_eq!(m.layer_params(1), d);
        assert!(KernelModulator::from_layers(m.layers().to_vec(), Activation::Tanh, ModulatorStructure::Diagonal).is_ok());
    }
}
