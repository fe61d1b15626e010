//! Dense linear algebra and random-number primitives.
//!
//! Everything here is a pure function over immutable inputs; callers that
//! need damping add `lambda * I` themselves before factorizing.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Inner product with an explicit length check.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "dot",
            expected: a.len(),
            got: b.len(),
        });
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("dot"));
    }
    Ok(s)
}

pub fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                what: "matvec",
                expected: self.cols,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.entries[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        if !all_finite(&out) {
            return Err(Error::NonFinite("matvec"));
        }
        Ok(out)
    }

    /// Replace the matrix with `(M + M^T) / 2`. Only valid for square matrices.
    pub fn symmetrize(&mut self) {
        debug_assert_eq!(self.rows, self.cols);
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.entries[i * n + j] + self.entries[j * n + i]);
                self.entries[i * n + j] = avg;
                self.entries[j * n + i] = avg;
            }
        }
    }

    pub fn add_diagonal(&mut self, lambda: f64) {
        debug_assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            self.entries[i * self.cols + i] += lambda;
        }
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Kept separate from [`solve_spd`] so that callers scoring many right-hand
/// sides against the same Hessian factor once.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    n: usize,
    l: Vec<f64>, // row-major, lower triangle populated
}

impl CholeskyFactor {
    pub fn new(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch {
                what: "cholesky",
                expected: a.rows,
                got: a.cols,
            });
        }
        let n = a.rows;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i });
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(CholeskyFactor { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A x = b` via forward/back substitution.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "cholesky solve",
                expected: self.n,
                got: b.len(),
            });
        }
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        if !all_finite(&x) {
            return Err(Error::NonFinite("cholesky solve"));
        }
        Ok(x)
    }
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    CholeskyFactor::new(a)?.solve(b)
}

/// Power-iteration estimate of the spectral norm of a symmetric operator
/// given only through matrix-vector products.
pub fn spectral_norm_estimate<F>(dim: usize, iters: usize, rng: &mut RngState, matvec: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::EmptySet("spectral_norm_estimate"));
    }
    let mut v = rng.gaussian_vec(dim)?;
    let mut lambda = 0.0;
    for _ in 0..iters {
        let nv = norm2(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        scale(1.0 / nv, &mut v);
        let w = matvec(&v)?;
        lambda = dot(&v, &w)?.abs();
        v = w;
    }
    Ok(lambda)
}

/// Counter-based random number generator.
///
/// The n-th draw is a pure function of `(seed, counter)`, so identical state
/// reproduces identical sequences on any platform and parallel workers can be
/// handed disjoint pre-split streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Derive an independent stream, e.g. one per parallel worker.
    pub fn split(&self, stream: u64) -> RngState {
        RngState {
            seed: mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let z = self
            .seed
            .wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GOLDEN));
        self.counter += 1;
        mix64(z)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe to pass through `ln`.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, two uniforms per draw, no cached
    /// second value so the state stays exactly `(seed, counter)`).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::EmptySet("gaussian_vec"));
        }
        Ok((0..n).map(|_| self.next_gaussian()).collect())
    }

    /// Uniform integer in `[0, bound)` by rejection-free scaling. Bias is
    /// below 2^-53 for the bounds used here.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let u = self.next_f64();
        ((u * bound as f64) as usize).min(bound - 1)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// `n` independent standard-normal draws; advances the counter by `2n`.
pub fn rand_gaussian(rng: &mut RngState, n: usize) -> Result<Vec<f64>> {
    rng.gaussian_vec(n)
}
