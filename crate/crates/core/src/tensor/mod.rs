//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Differentiation
//! happens on a [`Tape`], which records every operation applied to its
//! [`Var`] handles and replays them in reverse on [`Tape::backward`].
//!
//! The element type is generic over [`Scalar`] so the same kernels can be
//! instantiated in `f64` for gradient checking; everything else in the crate
//! runs in `f32`.

mod kernels;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{KmError, Result};

pub use tape::{NormLayout, NormOutput, Tape, Var};
pub(crate) use tape::fixed_affine;

/// Floating point element type supported by the kernels.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// `c = a · b (+ c if accumulate)` for row-major operands.
    ///
    /// `a` is logically `[m, k]` and stored transposed when `a_t` is set;
    /// `b` is logically `[k, n]` and stored transposed when `b_t` is set.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("literal representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the strides above address exactly the m*k, k*n and
                // m*n elements whose presence the assert checked.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sin,
    Relu,
    /// Leaky ReLU with the given negative slope.
    LeakyRelu(f32),
}

impl Activation {
    /// Leaky ReLU with slope 0.1, the variant used in the modulator ablations.
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu(0.1);

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope as f64)
                }
            }
        }
    }

    /// Derivative with respect to the input, given input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Sin => x.cos(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope as f64)
                }
            }
        }
    }

    /// Canonical name, as used on the command line and in delta metadata.
    pub fn name(self) -> String {
        match self {
            Activation::Tanh => "tanh".into(),
            Activation::Sin => "sin".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(s) if s == 0.1 => "leaky_relu".into(),
            Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = KmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "sin" => Ok(Activation::Sin),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LEAKY_RELU),
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => slope
                    .parse::<f32>()
                    .ok()
                    .filter(|s| s.is_finite())
                    .map(Activation::LeakyRelu)
                    .ok_or_else(|| KmError::Config(format!("bad leaky_relu slope {slope:?}"))),
                None => Err(KmError::Config(format!("unknown activation {other:?}"))),
            },
        }
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(KmError::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KmError::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(!shape.contains(&0), "zero extent in shape {shape:?}");
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::lit(z * std);
        }
        t
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::lit(rng.random_range(lo..hi));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::lit(v.to_f64().expect("finite conversion")))
                .collect(),
        }
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Apply an activation elementwise.
pub fn elementwise<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)
}

/// Cross-correlation of `[B, C, H, W]` input with `[k_n, C, k_h, k_w]` weights.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geom = kernels::ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(&geom, input.data(), weight.data());
    Tensor::new(geom.output_shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tanh_of_zero_is_zero() {
        assert_eq!(Activation::Tanh.apply(0.0f32), 0.0);
    }

    #[test]
    fn leaky_relu_slope() {
        let y = Activation::LEAKY_RELU.apply(-2.0f32);
        assert!((y + 0.2).abs() < 1e-7);
    }

    #[test]
    fn sin_half_pi() {
        let y = Activation::Sin.apply(std::f32::consts::FRAC_PI_2);
        assert!((y - 1.0).abs() < 1e-6);
    }

    #[test]
    fn activation_names_round_trip() {
        for a in [
            Activation::Tanh,
            Activation::Sin,
            Activation::Relu,
            Activation::LEAKY_RELU,
            Activation::LeakyRelu(0.25),
        ] {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
        assert!("gelu".parse::<Activation>().is_err());
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::scalar(1.0).numel(), 1);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Tensor::<f32>::randn([3, 2], 1.0, &mut rng);
        let out = matmul(&Tensor::eye(3), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new([2, 1], vec![1.0f32, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &b), Err(KmError::Dimension { .. })));
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::<f32>::randn([4, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d(&Tensor::zeros([2, 2, 5, 5]), &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_conv_is_multiplication() {
        let x = Tensor::new([1, 1, 1, 1], vec![3.0f32]).unwrap();
        let w = Tensor::new([1, 1, 1, 1], vec![2.0f32]).unwrap();
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn conv_names_offending_axes() {
        let x = Tensor::<f32>::zeros([1, 3, 5, 5]);
        let w = Tensor::<f32>::zeros([2, 4, 3, 3]);
        let err = conv2d(&x, &w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        let w = Tensor::<f32>::zeros([2, 3, 7, 7]);
        let err = conv2d(&x, &w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }
}
