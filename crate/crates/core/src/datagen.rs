//! Sparse prefix-classification datasets.
//!
//! A dataset starts from a random binary sequence `s` of length `N` and a
//! dense labelling `y_0..y_{N-1}` of its prefixes, where `y_i` labels the
//! prefix `s[..=i]`. The labelling has `m` label changes (positions `i` with
//! `y_i != y_{i+1}`), no two of them adjacent. Only the two prefixes on either
//! side of each change are kept for training, so the train set has `2m`
//! entries and the dense labelling is recoverable from it by holding labels
//! constant between changes.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    A,
    B,
}

impl Symbol {
    /// Position of the symbol in the one-hot input encoding.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Symbol::A => 0,
            Symbol::B => 1,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::A => 'a',
            Symbol::B => 'b',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'a' => Some(Symbol::A),
            'b' => Some(Symbol::B),
            _ => None,
        }
    }
}

/// A string over `{a, b}` of length at least 2.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinarySequence {
    symbols: Vec<Symbol>,
}

impl BinarySequence {
    pub fn new(symbols: Vec<Symbol>) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "sequence length must be at least 2, got {}",
                symbols.len()
            )));
        }
        Ok(Self { symbols })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    /// Always false; kept for the `len`/`is_empty` pairing.
    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    #[inline]
    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    /// The first `len` symbols.
    pub fn prefix(&self, len: usize) -> &[Symbol] {
        &self.symbols[..len]
    }

    pub fn prefix_string(&self, len: usize) -> String {
        self.prefix(len).iter().map(|s| s.as_char()).collect()
    }
}

impl fmt::Display for BinarySequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.symbols {
            write!(f, "{}", s.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for BinarySequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let symbols = s
            .chars()
            .map(|c| {
                Symbol::from_char(c).ok_or_else(|| {
                    Error::DataCorruption(format!("symbol {c:?} is not in {{a, b}}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(symbols)
    }
}

/// Dense per-prefix labels together with their change positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAssignment {
    labels: Vec<u8>,
    change_positions: Vec<usize>,
}

impl LabelAssignment {
    /// Validates that `labels` is binary, has at least one change and no two
    /// adjacent changes.
    pub fn from_labels(labels: Vec<u8>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidConfig("need at least two labels".into()));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::DataCorruption("labels must be 0 or 1".into()));
        }
        let change_positions: Vec<usize> = labels
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] != w[1])
            .map(|(i, _)| i)
            .collect();
        if change_positions.is_empty() {
            return Err(Error::DataCorruption(
                "labelling has no label change".into(),
            ));
        }
        if let Some(w) = change_positions.windows(2).find(|w| w[0] + 1 >= w[1]) {
            return Err(Error::DataCorruption(format!(
                "label changes at {} and {} overlap",
                w[0], w[1]
            )));
        }
        Ok(Self {
            labels,
            change_positions,
        })
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn change_positions(&self) -> &[usize] {
        &self.change_positions
    }

    /// Number of label changes `m`.
    #[inline]
    pub fn change_count(&self) -> usize {
        self.change_positions.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One labelled prefix: the prefix `s[..prefix_len]` carries `label`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrainEntry {
    pub prefix_len: usize,
    pub label: u8,
}

impl TrainEntry {
    /// Index of this entry in the output signal.
    #[inline]
    pub fn signal_index(&self) -> usize {
        self.prefix_len - 1
    }
}

/// The sparse train set: both sides of every label change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainDataset {
    sequence: BinarySequence,
    entries: Vec<TrainEntry>,
}

impl TrainDataset {
    /// Checks the pairing invariants; entries may be given in any order.
    pub fn new(sequence: BinarySequence, mut entries: Vec<TrainEntry>) -> Result<Self> {
        entries.sort();
        validate_entries(&entries, sequence.len())?;
        Ok(Self { sequence, entries })
    }

    #[inline]
    pub fn sequence(&self) -> &BinarySequence {
        &self.sequence
    }

    /// Entries ordered by prefix length.
    #[inline]
    pub fn entries(&self) -> &[TrainEntry] {
        &self.entries
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of label changes the dataset encodes.
    pub fn change_count(&self) -> usize {
        self.entries.len() / 2
    }

    /// Length of the longest labelled prefix.
    pub fn max_prefix_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.prefix_len)
    }

    pub fn contains_prefix(&self, prefix_len: usize) -> bool {
        self.entries
            .binary_search_by_key(&prefix_len, |e| e.prefix_len)
            .is_ok()
    }

    /// Writes the tab-separated form: a `seq` header line then one
    /// `prefix_length<TAB>label` line per entry.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "seq\t{}\t{}", self.sequence, self.sequence.len())?;
        for e in &self.entries {
            writeln!(w, "{}\t{}", e.prefix_len, e.label)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty dataset file"))?;
        let header = header?;
        let fields: Vec<&str> = header.split('\t').collect();
        let sequence: BinarySequence = match fields.as_slice() {
            ["seq", s, n] => {
                let seq: BinarySequence = s.parse()?;
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::parse(1, format!("bad length {n:?}")))?;
                if n != seq.len() {
                    return Err(Error::parse(
                        1,
                        format!("declared length {n} but sequence has {}", seq.len()),
                    ));
                }
                seq
            }
            _ => return Err(Error::parse(1, "expected `seq<TAB>sequence<TAB>n` header")),
        };

        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (len, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(i + 1, "expected `prefix_length<TAB>label`"))?;
            let prefix_len = len
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad prefix length {len:?}")))?;
            let label = label
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad label {label:?}")))?;
            entries.push(TrainEntry { prefix_len, label });
        }
        Self::new(sequence, entries)
    }
}

fn validate_entries(entries: &[TrainEntry], n: usize) -> Result<()> {
    if entries.is_empty() || !entries.len().is_multiple_of(2) {
        return Err(Error::DataCorruption(format!(
            "train set must hold a positive even number of entries, got {}",
            entries.len()
        )));
    }
    for (k, pair) in entries.chunks_exact(2).enumerate() {
        let (lo, hi) = (pair[0], pair[1]);
        if lo.prefix_len == 0 || hi.prefix_len > n {
            return Err(Error::DataCorruption(format!(
                "prefix length out of range 1..={n}"
            )));
        }
        if lo.label > 1 || hi.label > 1 {
            return Err(Error::DataCorruption("labels must be 0 or 1".into()));
        }
        if hi.prefix_len != lo.prefix_len + 1 || lo.label == hi.label {
            return Err(Error::DataCorruption(format!(
                "entries {} and {} do not form a label-change pair",
                2 * k,
                2 * k + 1
            )));
        }
    }
    for w in entries.chunks_exact(2).collect::<Vec<_>>().windows(2) {
        let (prev, next) = (w[0][1], w[1][0]);
        if next.prefix_len <= prev.prefix_len {
            return Err(Error::DataCorruption("label-change pairs overlap".into()));
        }
        if next.label != prev.label {
            return Err(Error::DataCorruption(format!(
                "labels at prefixes {} and {} disagree with no change between them",
                prev.prefix_len, next.prefix_len
            )));
        }
    }
    Ok(())
}

/// Draws each of `n` symbols uniformly from `{a, b}`.
pub fn sample_sequence(rng: &mut RngStream, n: usize) -> Result<BinarySequence> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence length must be at least 2, got {n}"
        )));
    }
    let symbols = (0..n)
        .map(|_| if rng.coin() { Symbol::B } else { Symbol::A })
        .collect();
    BinarySequence::new(symbols)
}

/// Samples a labelling of `n` prefixes with between 1 and `max_changes`
/// pairwise non-adjacent label changes.
///
/// The change count and the initial label are uniform. Change positions are
/// uniform over all valid position sets: `m` sorted slots drawn from
/// `n - m` candidates map onto positions `slot_j + j`, which is a bijection
/// onto sets in `0..=n-2` with pairwise gaps of at least two.
pub fn sample_labels(rng: &mut RngStream, n: usize, max_changes: usize) -> Result<LabelAssignment> {
    if max_changes < 1 {
        return Err(Error::InvalidConfig(
            "max_changes must be at least 1".into(),
        ));
    }
    if n < 2 * max_changes + 1 {
        return Err(Error::InvalidConfig(format!(
            "length {n} cannot hold {max_changes} non-overlapping label changes (need n >= {})",
            2 * max_changes + 1
        )));
    }
    let m = rng.random_range(1..=max_changes);
    let first = u8::from(rng.coin());

    let mut slots = index::sample(rng, n - m, m).into_vec();
    slots.sort_unstable();
    let positions: Vec<usize> = slots.iter().enumerate().map(|(j, s)| s + j).collect();

    let mut labels = Vec::with_capacity(n);
    let mut current = first;
    let mut next_change = positions.iter().peekable();
    for i in 0..n {
        labels.push(current);
        if next_change.peek() == Some(&&i) {
            current ^= 1;
            next_change.next();
        }
    }
    let la = LabelAssignment::from_labels(labels)?;
    debug_assert_eq!(la.change_positions(), positions.as_slice());
    Ok(la)
}

/// Keeps the two prefixes around every label change.
///
/// # Panics
/// If the labelling and the sequence differ in length.
pub fn build_dataset(seq: &BinarySequence, la: &LabelAssignment) -> TrainDataset {
    assert_eq!(
        seq.len(),
        la.len(),
        "labelling must cover every prefix of the sequence"
    );
    let y = la.labels();
    let entries = la
        .change_positions()
        .iter()
        .flat_map(|&i| {
            [
                TrainEntry {
                    prefix_len: i + 1,
                    label: y[i],
                },
                TrainEntry {
                    prefix_len: i + 2,
                    label: y[i + 1],
                },
            ]
        })
        .collect();
    TrainDataset {
        sequence: seq.clone(),
        entries,
    }
}

/// Recovers the dense labelling by holding labels constant between changes
/// and extending the outermost labels to both ends.
pub fn reconstruct_labels(d: &TrainDataset, n: usize) -> Result<LabelAssignment> {
    if n != d.sequence.len() {
        return Err(Error::ContractViolation(format!(
            "n = {n} but the dataset sequence has length {}",
            d.sequence.len()
        )));
    }
    validate_entries(&d.entries, n)?;
    let mut labels = vec![d.entries[0].label; n];
    for pair in d.entries.chunks_exact(2) {
        let after = pair[1];
        for y in &mut labels[after.signal_index()..] {
            *y = after.label;
        }
    }
    LabelAssignment::from_labels(labels)
}
