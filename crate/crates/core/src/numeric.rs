//! Scalar, vector and matrix primitives shared by every other module.
//!
//! Everything is `f64`. Reductions always run in ascending index order so that
//! results are bit-reproducible on a given build; none of the kernels here (or
//! the batched kernels built on top of them) reassociate sums.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QuineError, Result};

/// Scale constant of the SeLU activation.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Negative-branch constant of the SeLU activation.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Largest slope of [`selu`], attained just left of zero.
pub const SELU_LIPSCHITZ: f64 = SELU_LAMBDA * SELU_ALPHA;

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

/// Derivative of [`selu`]. At exactly zero the left branch (`λα`) is used.
#[inline]
pub fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Independent purposes that draw random numbers during a run.
///
/// Each purpose gets its own generator, derived from the master seed, so that
/// for example changing the batch size never perturbs the initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Projection,
    Shuffle,
    Noise,
    ImagePairing,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x494e_4954,
            Stream::Projection => 0x5052_4f4a,
            Stream::Shuffle => 0x5348_5546,
            Stream::Noise => 0x4e4f_4953,
            Stream::ImagePairing => 0x5041_4952,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seedable generator: ChaCha8 keyed by a 64-bit seed.
///
/// Uniforms take the top 53 bits of a `u64` draw. Gaussians use the
/// Box–Muller transform on two uniforms, returning the cosine branch first and
/// caching the sine branch for the next call.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Sub-seed for `stream` (and an index such as the epoch number) of a run
    /// seeded with `master`: `splitmix64(splitmix64(master ^ tag) ^ index)`.
    pub fn sub_seed(master: u64, stream: Stream, index: u64) -> u64 {
        splitmix64(splitmix64(master ^ stream.tag()) ^ index)
    }

    pub fn derive(master: u64, stream: Stream, index: u64) -> Self {
        Self::new(Self::sub_seed(master, stream, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// One draw from the He initialisation distribution `N(0, 2 / fan_in)`.
pub fn he_sample(fan_in: usize, rng: &mut Rng) -> Result<f64> {
    he_sample_with_slope(fan_in, 0.0, rng)
}

/// He initialisation for a rectifier with negative slope `a`:
/// `N(0, 2 / ((1 + a²) · fan_in))`. `a = 0` is the plain ReLU case.
pub fn he_sample_with_slope(fan_in: usize, negative_slope: f64, rng: &mut Rng) -> Result<f64> {
    if fan_in == 0 {
        return Err(QuineError::InvalidArgument("fan_in must be at least 1".into()));
    }
    let std = he_std(fan_in, negative_slope);
    Ok(std * rng.normal())
}

pub fn he_std(fan_in: usize, negative_slope: f64) -> f64 {
    (2.0 / ((1.0 + negative_slope * negative_slope) * fan_in as f64)).sqrt()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QuineError::InvalidArgument(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(QuineError::InvalidArgument(format!(
                "matvec: vector length {} does not match {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

/// Free-standing form of [`DenseMatrix::matvec`].
pub fn matvec(m: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    m.matvec(v)
}

/// Dot product summed in ascending index order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`, elementwise.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major transpose of a `rows x cols` block.
pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_reference_values() {
        assert_eq!(selu(0.0), 0.0);
        assert_eq!(selu(1.0), 1.050_700_987_355_480_5);
        let limit = -SELU_LAMBDA * SELU_ALPHA;
        assert!((selu(-50.0) - limit).abs() < 1e-15);
        assert!((selu(-50.0) - (-1.758_099_340_847_376_6)).abs() < 1e-12);
    }

    #[test]
    fn selu_continuous_and_monotone_on_grid() {
        let eps = 1e-12;
        assert!(selu(-eps).abs() < 1e-11 && selu(eps).abs() < 1e-11);
        let grid: Vec<f64> = (0..1000).map(|i| -10.0 + 20.0 * i as f64 / 999.0).collect();
        for w in grid.windows(2) {
            assert!(selu(w[1]) > selu(w[0]), "not increasing at {}", w[0]);
        }
    }

    fn central_diff(x: f64, h: f64) -> f64 {
        (selu(x + h) - selu(x - h)) / (2.0 * h)
    }

    #[test]
    fn selu_derivative_values() {
        assert_eq!(selu_derivative(2.0), SELU_LAMBDA);
        let expected = SELU_LAMBDA * SELU_ALPHA * (-1.0f64).exp();
        assert!((selu_derivative(-1.0) - expected).abs() < 1e-15);
        assert!((selu_derivative(-1.0) - 0.6467).abs() < 1e-4);
        assert!((selu_derivative(-1.0) - central_diff(-1.0, 1e-5)).abs() <= 1e-8);
        let fd = central_diff(-0.001, 1e-6);
        assert!(((selu_derivative(-0.001) - fd) / fd).abs() <= 1e-6);
        assert_eq!(selu_derivative(0.0), SELU_LAMBDA * SELU_ALPHA);
    }

    #[test]
    fn selu_derivative_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut checked = 0;
        while checked < 100 {
            let x = -5.0 + 10.0 * rng.uniform();
            if x.abs() < 1e-3 {
                continue;
            }
            let fd = central_diff(x, 1e-6);
            let rel = ((selu_derivative(x) - fd) / fd).abs();
            assert!(rel <= 1e-6, "x={x} rel={rel}");
            checked += 1;
        }
    }

    #[test]
    fn he_sample_statistics() {
        let n = 1_000_000;
        let mut rng = Rng::new(1);
        let draws: Vec<f64> = (0..n).map(|_| he_sample(2, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((0.99..=1.01).contains(&var), "variance {var}");

        let mut rng = Rng::new(2);
        let mean = (0..n).map(|_| he_sample(100, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.005, "mean {mean}");
    }

    #[test]
    fn he_sample_rejects_zero_fan_in() {
        let mut rng = Rng::new(0);
        assert!(matches!(he_sample(0, &mut rng), Err(QuineError::InvalidArgument(_))));
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let mut a = Rng::new(42);
        let mut b = Rng::new(43);
        assert_ne!(a.uniform(), b.uniform());
    }

    #[test]
    fn derived_streams_differ() {
        let seeds: Vec<u64> = [Stream::Init, Stream::Projection, Stream::Shuffle, Stream::Noise, Stream::ImagePairing]
            .iter()
            .map(|s| Rng::sub_seed(7, *s, 0))
            .collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_ne!(Rng::sub_seed(7, Stream::Shuffle, 0), Rng::sub_seed(7, Stream::Shuffle, 1));
    }

    #[test]
    fn matvec_basics() {
        let id = DenseMatrix::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let z = DenseMatrix::zeros(2, 3);
        assert_eq!(matvec(&z, &[4.0, -1.0, 9.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(id.matvec(&[1.0]), Err(QuineError::InvalidArgument(_))));
    }

    fn naive_matvec(rows: usize, cols: usize, data: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut s = 0.0f64;
            let mut c = 0;
            while c < cols {
                s = s + data[r * cols + c] * v[c];
                c += 1;
            }
            out.push(s);
        }
        out
    }

    #[test]
    fn matvec_matches_naive_loop_bitwise() {
        let mut rng = Rng::new(5);
        let mut shapes = vec![(5usize, 4usize)];
        for _ in 0..100 {
            shapes.push((1 + (rng.uniform() * 16.0) as usize, 1 + (rng.uniform() * 16.0) as usize));
        }
        for (rows, cols) in shapes {
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
            let m = DenseMatrix::from_vec(rows, cols, data.clone()).unwrap();
            let got = m.matvec(&v).unwrap();
            let want = naive_matvec(rows, cols, &data, &v);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let t = transpose(&data, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), data);
    }
}
