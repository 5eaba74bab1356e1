//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use seqfreq::datagen::{build_dataset, sample_labels, sample_sequence};
use seqfreq::training::{backward, train_loss};
use seqfreq::{
    Architecture, BinarySequence, CellKind, LabelAssignment, Model, RngStream, TrainDataset,
};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely: at this scale the
/// central difference is dominated by roundoff in the loss.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_dataset(seed: u64, n: usize, max_changes: usize) -> TrainDataset {
    let mut rng = RngStream::new(seed);
    let seq = sample_sequence(&mut rng, n).unwrap();
    let la = sample_labels(&mut rng, n, max_changes).unwrap();
    build_dataset(&seq, &la)
}

/// Largest relative disagreement between BPTT and central differences over
/// every parameter.
pub fn fd_max_relative_error(
    kind: CellKind,
    layers: usize,
    hidden: usize,
    seed: u64,
    d: &TrainDataset,
) -> f64 {
    let arch = Architecture::new(kind, layers, hidden).unwrap();
    let model = Model::init(arch, &mut RngStream::new(seed)).unwrap();
    let (_, grads) = backward(&model, d, 1e-12).unwrap();
    let analytic = grads.to_flat();
    let theta = model.params.to_flat();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut loss_at = |delta: f64| {
            let mut t = theta.clone();
            t[i] += delta;
            probe.params.set_flat(&t).unwrap();
            train_loss(&probe, d, 1e-12).unwrap()
        };
        let numeric = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// The textbook double sum, with the angle formed directly from `k * n`.
pub fn naive_dft(f: &[f64]) -> Vec<(f64, f64)> {
    let n = f.len();
    (0..n)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, &x) in f.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += x * angle.cos();
                im += x * angle.sin();
            }
            (re, im)
        })
        .collect()
}

/// Checks one generated instance against the dataset contract, deriving
/// every expectation from the dense labels alone.
pub fn check_instance(
    seq: &BinarySequence,
    la: &LabelAssignment,
    d: &TrainDataset,
    max_changes: usize,
) -> Result<(), String> {
    let y = la.labels();
    let n = seq.len();
    if y.len() != n {
        return Err(format!("{} labels for a length-{n} sequence", y.len()));
    }
    let changes: Vec<usize> = (0..n - 1).filter(|&i| y[i] != y[i + 1]).collect();
    let m = changes.len();
    if m == 0 || m > max_changes {
        return Err(format!("{m} label changes"));
    }
    if changes.windows(2).any(|w| w[1] - w[0] < 2) {
        return Err(format!("overlapping changes {changes:?}"));
    }
    if d.len() != 2 * m || d.len() > 2 * max_changes {
        return Err(format!("|D| = {} with m = {m}", d.len()));
    }
    let ones = d.entries().iter().filter(|e| e.label == 1).count();
    if ones != m || d.len() - ones != m {
        return Err(format!("{ones} ones among {} entries", d.len()));
    }
    let mut expected: Vec<(usize, u8)> = changes
        .iter()
        .flat_map(|&i| [(i + 1, y[i]), (i + 2, y[i + 1])])
        .collect();
    expected.sort();
    let got: Vec<(usize, u8)> = d
        .entries()
        .iter()
        .map(|e| (e.prefix_len, e.label))
        .collect();
    if got != expected {
        return Err(format!("entries {got:?}, expected {expected:?}"));
    }
    let back = seqfreq::datagen::reconstruct_labels(d, n).map_err(|e| e.to_string())?;
    if back.labels() != y {
        return Err("reconstruction differs from the dense labels".into());
    }
    Ok(())
}
