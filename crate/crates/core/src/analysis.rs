//! Spectral and generalization metrics of output signals.

use std::f64::consts::LN_2;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::datagen::{LabelAssignment, TrainDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::binary_cross_entropy;

/// Cross-entropy of a constant 1/2 prediction, `-ln(1/2)`.
pub const RANDOM_BASELINE_LOSS: f64 = LN_2;

/// Magnitudes within this relative distance of the maximum count as tied.
pub const TIE_RELATIVE_TOLERANCE: f64 = 1e-12;

/// DFT coefficients `F[0..N]` of a real signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub coefficients: Vec<Complex<T>>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<T> {
        self.coefficients.iter().map(|c| c.norm()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominantFrequency<T> {
    /// `2 pi k_max / N`, in `(0, pi]`.
    pub omega: T,
    pub k_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestLoss<T> {
    pub value: T,
    pub test_index_count: usize,
}

fn check_len(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "signal length must be at least 2, got {n}"
        )));
    }
    Ok(())
}

/// DFT by the defining double sum, `O(N^2)`.
pub fn dft_direct<T: Scalar>(signal: &[T]) -> Result<Spectrum<T>> {
    let n = signal.len();
    check_len(n)?;
    let coefficients = (0..n)
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (t, &f) in signal.iter().enumerate() {
                // reduce kn mod N first so the angle stays small and exact
                let phase = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                let w = Complex::new(
                    T::from_f64_lossy(phase.cos()),
                    T::from_f64_lossy(phase.sin()),
                );
                acc += w * f;
            }
            acc
        })
        .collect();
    Ok(Spectrum { coefficients })
}

/// DFT via FFT. Agrees with [`dft_direct`] to rounding.
pub fn dft<T: Scalar>(signal: &[T]) -> Result<Spectrum<T>> {
    let n = signal.len();
    check_len(n)?;
    let mut buf: Vec<Complex<T>> = signal.iter().map(|&x| Complex::new(x, T::zero())).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(Spectrum { coefficients: buf })
}

/// Strongest non-DC component over `k = 1..=N/2`; ties go to the smallest `k`.
///
/// `N` must be even. A signal whose non-DC components all vanish (to rounding
/// of the transform) yields [`Error::DegenerateSignal`].
pub fn dominant_frequency<T: Scalar>(signal: &[T]) -> Result<DominantFrequency<T>> {
    let n = signal.len();
    check_len(n)?;
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "dominant frequency needs an even signal length, got {n}"
        )));
    }
    let mags = dft(signal)?.magnitudes();
    let considered = &mags[1..=n / 2];
    let max = considered.iter().copied().fold(T::zero(), T::max);

    // FFT rounding leaves noise of order eps * N * sum|f| where exact zeros belong
    let l1: T = signal.iter().fold(T::zero(), |a, &x| a + x.abs());
    let noise_floor = T::epsilon() * T::from_usize_exact(4 * n) * l1;
    if max <= noise_floor {
        return Err(Error::DegenerateSignal);
    }
    let tie = max * (T::one() - T::from_f64_lossy(TIE_RELATIVE_TOLERANCE));
    let k_max = 1 + considered
        .iter()
        .position(|&m| m >= tie)
        .expect("maximum is attained");
    let omega = T::from_f64_lossy(2.0 * std::f64::consts::PI * k_max as f64 / n as f64);
    Ok(DominantFrequency { omega, k_max })
}

/// Mean cross-entropy over the prefixes that are not in the train set.
pub fn test_cross_entropy<T: Scalar>(
    signal: &[T],
    la: &LabelAssignment,
    d: &TrainDataset,
    log_clamp: T,
) -> Result<TestLoss<T>> {
    let n = signal.len();
    if la.len() != n || d.sequence().len() != n {
        return Err(Error::ContractViolation(format!(
            "signal length {n}, {} labels and a length-{} sequence do not agree",
            la.len(),
            d.sequence().len()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (i, (&p, &y)) in signal.iter().zip(la.labels()).enumerate() {
        if !d.contains_prefix(i + 1) {
            total += binary_cross_entropy(p, y, log_clamp);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig(
            "every prefix is in the train set".into(),
        ));
    }
    Ok(TestLoss {
        value: total / T::from_usize_exact(count),
        test_index_count: count,
    })
}
