use ndarray::{ArrayD, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar element type for all numeric kernels. Training runs in f32;
/// gradient checks and oracles run in f64.
pub trait Scalar: NdFloat + std::iter::Sum<Self> {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Central finite-difference step appropriate for this precision.
    fn fd_step() -> f64;

    /// Default relative-error tolerance for gradient checks.
    fn grad_tol() -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn fd_step() -> f64 {
        1e-3
    }

    fn grad_tol() -> f64 {
        1e-3
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn fd_step() -> f64 {
        1e-5
    }

    fn grad_tol() -> f64 {
        1e-5
    }
}

/// Standard-normal array, useful for He-style init and test inputs.
pub fn randn<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::from_f64(v)
        })
        .collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product consistent")
}

/// Uniform array in [lo, hi).
pub fn rand_uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(rng.random_range(lo..hi))).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product consistent")
}

/// True when every element is finite.
pub fn all_finite<F: Scalar>(a: &ArrayD<F>) -> bool {
    a.iter().all(|v| v.is_finite())
}
