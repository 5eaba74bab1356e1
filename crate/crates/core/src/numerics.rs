//! Dense row-major matrices and the seeded random stream contract.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ContractViolation(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::ContractViolation(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ContractViolation("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::ContractViolation(format!(
                "matvec: vector length {} does not match {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = vec![T::zero(); self.rows];
        self.matvec_acc(v, &mut out);
        Ok(out)
    }

    /// `out += self * v`. Lengths are the caller's responsibility.
    #[inline]
    pub fn matvec_acc(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, v);
        }
    }

    /// `out += selfᵀ * v`.
    #[inline]
    pub fn matvec_t_acc(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vi, row) in v.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if vi != T::zero() {
                axpy(vi, row, out);
            }
        }
    }

    /// `self += u vᵀ`.
    #[inline]
    pub fn add_outer(&mut self, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let cols = self.cols.max(1);
        for (&ui, row) in u.iter().zip(self.data.chunks_exact_mut(cols)) {
            if ui != T::zero() {
                axpy(ui, v, row);
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const ROOT_DOMAIN: &[u8] = b"seqfreq/root/v1";

/// Seeded, splittable random stream.
///
/// A stream is identified by a 256-bit key. Root keys come from a 64-bit
/// seed; child keys hash the parent key together with a label, so a child
/// depends only on `(root seed, label path)` and never on how much of the
/// parent has been consumed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: [u8; 32],
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(ROOT_DOMAIN);
        h.update(seed.to_le_bytes());
        Self::from_key(seed, h.finalize().into())
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        Self {
            seed,
            key,
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    /// Root seed this stream descends from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`.
    ///
    /// # Panics
    /// If `label` is empty.
    pub fn derive(&self, label: &str) -> RngStream {
        assert!(!label.is_empty(), "stream label must be nonempty");
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self::from_key(self.seed, h.finalize().into())
    }

    /// Uniform draw from `[0, 1)` with 53 random bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `[low, high)`.
    pub fn uniform<T: Scalar>(&mut self, low: f64, high: f64) -> T {
        T::from_f64_lossy(low + (high - low) * self.unit_f64())
    }

    pub fn coin(&mut self) -> bool {
        self.rng.next_u64() >> 63 == 1
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Free-function form of [`RngStream::derive`].
pub fn derive_stream(root: &RngStream, label: &str) -> RngStream {
    root.derive(label)
}
