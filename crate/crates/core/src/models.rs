//! Stacked Elman, LSTM and GRU networks with a bias-free linear decoder.
//!
//! Every layer carries an input-to-hidden matrix `w_ih`, a hidden-to-hidden
//! matrix `w_hh` and two bias vectors `b_ih`, `b_hh`, each stacked over the
//! gate blocks of the cell. Gate block order is fixed:
//!
//! * Elman: a single block, `h' = tanh(W_ih x + b_ih + W_hh h + b_hh)`
//! * LSTM: `i, f, g, o`; `c' = f * c + i * g`, `h' = o * tanh(c')`
//! * GRU: `r, z, n`; `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`,
//!   `h' = (1 - z) * n + z * h`
//!
//! Symbols enter layer 0 one-hot encoded; layer `l > 0` consumes the hidden
//! output of layer `l - 1`. The decoder maps the top hidden state to two
//! logits and the label-1 probability is their softmax.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{BinarySequence, Symbol};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::scalar::{sigmoid, Scalar};

/// Width of the one-hot input encoding.
pub const INPUT_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Elman,
    Lstm,
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Elman, CellKind::Lstm, CellKind::Gru];

    /// Number of stacked gate blocks in the weight matrices.
    pub fn gate_blocks(self) -> usize {
        match self {
            CellKind::Elman => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Elman => "elman",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }

    fn gate_order(self) -> &'static str {
        match self {
            CellKind::Elman => "h",
            CellKind::Lstm => "i,f,g,o",
            CellKind::Gru => "r,z,n",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elman" | "rnn" => Ok(CellKind::Elman),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::InvalidConfig(format!("unknown cell kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: CellKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub input_dim: usize,
}

impl Architecture {
    pub fn new(kind: CellKind, num_layers: usize, hidden_size: usize) -> Result<Self> {
        let arch = Self {
            kind,
            num_layers,
            hidden_size,
            input_dim: INPUT_DIM,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "architecture needs positive sizes, got {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_size
        }
    }

    /// Closed-form parameter count, decoder included.
    pub fn param_count(&self) -> usize {
        let g = self.kind.gate_blocks();
        let h = self.hidden_size;
        let layers: usize = (0..self.num_layers)
            .map(|l| g * h * (self.layer_input_dim(l) + h) + 2 * g * h)
            .sum();
        layers + 2 * h
    }
}

/// Weights of one recurrent layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub w_ih: Matrix<T>,
    pub w_hh: Matrix<T>,
    pub b_ih: Vec<T>,
    pub b_hh: Vec<T>,
}

/// All trainable tensors of a model. Also used for gradients and optimizer
/// moments, which share the model's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub layers: Vec<LayerParams<T>>,
    /// `2 x hidden_size`, no bias.
    pub decoder: Matrix<T>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let g = arch.kind.gate_blocks();
        let h = arch.hidden_size;
        let layers = (0..arch.num_layers)
            .map(|l| LayerParams {
                w_ih: Matrix::zeros(g * h, arch.layer_input_dim(l)),
                w_hh: Matrix::zeros(g * h, h),
                b_ih: vec![T::zero(); g * h],
                b_hh: vec![T::zero(); g * h],
            })
            .collect();
        Self {
            layers,
            decoder: Matrix::zeros(2, h),
        }
    }

    /// Tensors in canonical order: per layer `w_ih, w_hh, b_ih, b_hh`, then the decoder.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.w_ih.as_slice());
            out.push(l.w_hh.as_slice());
            out.push(l.b_ih.as_slice());
            out.push(l.b_hh.as_slice());
        }
        out.push(self.decoder.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.w_ih.as_mut_slice());
            out.push(l.w_hh.as_mut_slice());
            out.push(l.b_ih.as_mut_slice());
            out.push(l.b_hh.as_mut_slice());
        }
        out.push(self.decoder.as_mut_slice());
        out
    }

    /// `(name, rows, cols)` for each tensor, in canonical order.
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_ih"), l.w_ih.rows(), l.w_ih.cols()));
            out.push((format!("layer{i}.w_hh"), l.w_hh.rows(), l.w_hh.cols()));
            out.push((format!("layer{i}.b_ih"), l.b_ih.len(), 1));
            out.push((format!("layer{i}.b_hh"), l.b_hh.len(), 1));
        }
        out.push(("decoder".into(), self.decoder.rows(), self.decoder.cols()));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ContractViolation(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Per-layer recurrent state. `c` is empty except for LSTM layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> HiddenState<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let c_len = if arch.kind == CellKind::Lstm {
            arch.hidden_size
        } else {
            0
        };
        Self {
            layers: (0..arch.num_layers)
                .map(|_| LayerState {
                    h: vec![T::zero(); arch.hidden_size],
                    c: vec![T::zero(); c_len],
                })
                .collect(),
        }
    }

    pub fn top(&self) -> &[T] {
        &self.layers.last().expect("at least one layer").h
    }
}

/// Label-1 probabilities `p[0..N]`, one per prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSignal<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> OutputSignal<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }
}

/// Softmax of two logits as `[p0, p1]`.
#[inline]
pub fn softmax2<T: Scalar>(logits: [T; 2]) -> [T; 2] {
    let p1 = sigmoid(logits[1] - logits[0]);
    let p0 = sigmoid(logits[0] - logits[1]);
    [p0, p1]
}

/// Activations of one cell at one time step, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub(crate) struct CellTrace<T> {
    /// Post-activation gate values; for Elman this is the new hidden state.
    pub gates: Vec<T>,
    /// GRU only: `W_hn h + b_hn`.
    pub hidden_n: Vec<T>,
    /// LSTM only: new cell state.
    pub c: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    /// Advances one layer by one step, filling `trace`.
    pub(crate) fn forward(
        &self,
        kind: CellKind,
        x: &[T],
        h_prev: &[T],
        c_prev: &[T],
        trace: &mut CellTrace<T>,
    ) {
        let hs = h_prev.len();
        let gates = &mut trace.gates;
        gates.clear();
        gates.extend_from_slice(&self.b_ih);
        self.w_ih.matvec_acc(x, gates);
        trace.h.resize(hs, T::zero());

        match kind {
            CellKind::Elman => {
                for (g, &b) in gates.iter_mut().zip(&self.b_hh) {
                    *g += b;
                }
                self.w_hh.matvec_acc(h_prev, gates);
                for (h, g) in trace.h.iter_mut().zip(gates.iter_mut()) {
                    *g = g.tanh();
                    *h = *g;
                }
            }
            CellKind::Lstm => {
                for (g, &b) in gates.iter_mut().zip(&self.b_hh) {
                    *g += b;
                }
                self.w_hh.matvec_acc(h_prev, gates);
                let (i, rest) = gates.split_at_mut(hs);
                let (f, rest) = rest.split_at_mut(hs);
                let (g, o) = rest.split_at_mut(hs);
                trace.c.resize(hs, T::zero());
                for k in 0..hs {
                    i[k] = sigmoid(i[k]);
                    f[k] = sigmoid(f[k]);
                    g[k] = g[k].tanh();
                    o[k] = sigmoid(o[k]);
                    let c = f[k] * c_prev[k] + i[k] * g[k];
                    trace.c[k] = c;
                    trace.h[k] = o[k] * c.tanh();
                }
            }
            CellKind::Gru => {
                let hidden = &mut trace.hidden_n;
                hidden.clear();
                hidden.extend_from_slice(&self.b_hh);
                self.w_hh.matvec_acc(h_prev, hidden);
                let (r, rest) = gates.split_at_mut(hs);
                let (z, n) = rest.split_at_mut(hs);
                let (hr, rest_h) = hidden.split_at(hs);
                let (hz, hn) = rest_h.split_at(hs);
                for k in 0..hs {
                    r[k] = sigmoid(r[k] + hr[k]);
                    z[k] = sigmoid(z[k] + hz[k]);
                    n[k] = (n[k] + r[k] * hn[k]).tanh();
                    trace.h[k] = (T::one() - z[k]) * n[k] + z[k] * h_prev[k];
                }
                // keep only the n block of W_hh h + b_hh
                hidden.drain(..2 * hs);
            }
        }
    }
}

/// A stacked recurrent network with its decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnModel<T> {
    arch: Architecture,
    pub params: Parameters<T>,
}

impl<T: Scalar> RnnModel<T> {
    /// Model with every parameter zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            params: Parameters::zeros(&arch),
            arch,
        })
    }

    /// Every weight and bias drawn from `U(-1/sqrt(h), 1/sqrt(h))`, tensor by
    /// tensor in canonical order.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let bound = 1.0 / (arch.hidden_size as f64).sqrt();
        for t in model.params.tensors_mut() {
            for x in t.iter_mut() {
                *x = rng.uniform(-bound, bound);
            }
        }
        Ok(model)
    }

    pub fn from_parameters(arch: Architecture, params: Parameters<T>) -> Result<Self> {
        arch.validate()?;
        let expected = Parameters::<T>::zeros(&arch);
        if params.shapes() != expected.shapes() {
            return Err(Error::ContractViolation(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        if !params.all_finite() {
            return Err(Error::ContractViolation("parameters must be finite".into()));
        }
        Ok(Self { arch, params })
    }

    #[inline]
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_state(&self) -> HiddenState<T> {
        HiddenState::zeros(&self.arch)
    }

    pub(crate) fn decode(&self, top: &[T]) -> [T; 2] {
        let d = &self.params.decoder;
        [
            crate::numerics::dot(d.row(0), top),
            crate::numerics::dot(d.row(1), top),
        ]
    }

    /// Feeds one symbol through every layer.
    pub fn step(&self, state: &HiddenState<T>, symbol: Symbol) -> Result<(HiddenState<T>, [T; 2])> {
        if state.layers.len() != self.arch.num_layers
            || state.layers.iter().any(|l| {
                l.h.len() != self.arch.hidden_size
                    || (self.arch.kind == CellKind::Lstm && l.c.len() != self.arch.hidden_size)
            })
        {
            return Err(Error::ContractViolation(
                "hidden state does not match the architecture".into(),
            ));
        }
        let mut x = one_hot(symbol);
        let mut next = Vec::with_capacity(self.arch.num_layers);
        let mut trace = CellTrace::default();
        for (layer, prev) in self.params.layers.iter().zip(&state.layers) {
            layer.forward(self.arch.kind, &x, &prev.h, &prev.c, &mut trace);
            if trace.h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow(
                    "non-finite hidden activation".into(),
                ));
            }
            x = trace.h.clone();
            next.push(LayerState {
                h: trace.h.clone(),
                c: trace.c.clone(),
            });
        }
        let logits = self.decode(&x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite logits".into()));
        }
        Ok((HiddenState { layers: next }, logits))
    }

    /// Label-1 probability for every prefix of `seq`, starting from the zero state.
    pub fn forward_signal(&self, seq: &BinarySequence) -> Result<OutputSignal<T>> {
        let mut state = self.zero_state();
        let mut values = Vec::with_capacity(seq.len());
        for &s in seq.symbols() {
            let (next, logits) = self.step(&state, s)?;
            values.push(softmax2(logits)[1]);
            state = next;
        }
        Ok(OutputSignal { values })
    }

    /// Writes the versioned text checkpoint. Values use shortest round-trip
    /// formatting, so reading back is exact.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let a = &self.arch;
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(
            w,
            "arch {} layers {} hidden {} input {}",
            a.kind, a.num_layers, a.hidden_size, a.input_dim
        )?;
        writeln!(w, "bias two")?;
        writeln!(w, "gates {}", a.kind.gate_order())?;
        for ((name, rows, cols), data) in
            self.params.shapes().into_iter().zip(self.params.tensors())
        {
            writeln!(w, "tensor {name} {rows} {cols}")?;
            for row in data.chunks(cols.max(1)) {
                let line: Vec<String> = row
                    .iter()
                    .map(|x| format!("{:?}", x.to_f64_lossy()))
                    .collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i, l?)),
                None => Err(Error::DataCorruption(format!(
                    "checkpoint truncated before {what}"
                ))),
            }
        };

        let (ln, magic) = next_line("header")?;
        if magic != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::parse(
                ln,
                format!("unsupported checkpoint header {magic:?}"),
            ));
        }
        let (ln, arch_line) = next_line("arch")?;
        let f: Vec<&str> = arch_line.split_whitespace().collect();
        let arch = match f.as_slice() {
            ["arch", kind, "layers", l, "hidden", h, "input", d] => {
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::parse(ln, format!("bad count {s:?}")))
                };
                let arch = Architecture {
                    kind: kind.parse()?,
                    num_layers: num(l)?,
                    hidden_size: num(h)?,
                    input_dim: num(d)?,
                };
                arch.validate()?;
                arch
            }
            _ => return Err(Error::parse(ln, "malformed arch line")),
        };
        let (ln, bias) = next_line("bias")?;
        if bias != "bias two" {
            return Err(Error::parse(
                ln,
                format!("unsupported bias layout {bias:?}"),
            ));
        }
        let (ln, gates) = next_line("gates")?;
        if gates != format!("gates {}", arch.kind.gate_order()) {
            return Err(Error::parse(ln, format!("unexpected gate order {gates:?}")));
        }

        let mut params = Parameters::<T>::zeros(&arch);
        let shapes = params.shapes();
        for ((name, rows, cols), tensor) in shapes.into_iter().zip(params.tensors_mut()) {
            let (ln, head) = next_line(&name)?;
            if head != format!("tensor {name} {rows} {cols}") {
                return Err(Error::parse(
                    ln,
                    format!("expected tensor {name} {rows} {cols}, got {head:?}"),
                ));
            }
            let mut filled = 0;
            while filled < tensor.len() {
                let (ln, row) = next_line(&name)?;
                for tok in row.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::parse(ln, format!("bad value {tok:?}")))?;
                    if filled >= tensor.len() {
                        return Err(Error::parse(ln, format!("too many values for {name}")));
                    }
                    tensor[filled] = T::from_f64_lossy(v);
                    filled += 1;
                }
            }
        }
        let (ln, end) = next_line("end")?;
        if end != "end" {
            return Err(Error::parse(ln, "missing end marker"));
        }
        Self::from_parameters(arch, params)
    }
}

const CHECKPOINT_MAGIC: &str = "seqfreq-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[inline]
pub(crate) fn one_hot<T: Scalar>(symbol: Symbol) -> Vec<T> {
    let mut x = vec![T::zero(); INPUT_DIM];
    x[symbol.index()] = T::one();
    x
}

/// Layer-stacked forward pass over a whole sequence.
pub fn forward_signal<T: Scalar>(
    model: &RnnModel<T>,
    seq: &BinarySequence,
) -> Result<OutputSignal<T>> {
    model.forward_signal(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(kind: CellKind, layers: usize, hidden: usize) -> Architecture {
        Architecture::new(kind, layers, hidden).unwrap()
    }

    /// Independent cell equations on plain vectors, one symbol at a time.
    mod reference {
        use super::*;

        fn sig(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }

        fn affine(m: &Matrix<f64>, x: &[f64], b: &[f64], row: usize) -> f64 {
            (0..m.cols()).map(|c| m.get(row, c) * x[c]).sum::<f64>() + b[row]
        }

        pub fn run(model: &RnnModel<f64>, seq: &BinarySequence) -> Vec<f64> {
            let a = *model.arch();
            let h = a.hidden_size;
            let mut hs = vec![vec![0.0; h]; a.num_layers];
            let mut cs = vec![vec![0.0; h]; a.num_layers];
            let mut out = Vec::new();
            for s in seq.symbols() {
                let mut x = vec![0.0; 2];
                x[s.index()] = 1.0;
                for (l, p) in model.params.layers.iter().enumerate() {
                    let hp = hs[l].clone();
                    let mut hn = vec![0.0; h];
                    for k in 0..h {
                        let pre = |blk: usize| {
                            affine(&p.w_ih, &x, &p.b_ih, blk * h + k)
                                + affine(&p.w_hh, &hp, &p.b_hh, blk * h + k)
                        };
                        match a.kind {
                            CellKind::Elman => hn[k] = pre(0).tanh(),
                            CellKind::Lstm => {
                                let (i, f, g, o) =
                                    (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                                cs[l][k] = f * cs[l][k] + i * g;
                                hn[k] = o * cs[l][k].tanh();
                            }
                            CellKind::Gru => {
                                let r = sig(pre(0));
                                let z = sig(pre(1));
                                let n = (affine(&p.w_ih, &x, &p.b_ih, 2 * h + k)
                                    + r * affine(&p.w_hh, &hp, &p.b_hh, 2 * h + k))
                                .tanh();
                                hn[k] = (1.0 - z) * n + z * hp[k];
                            }
                        }
                    }
                    hs[l] = hn.clone();
                    x = hn;
                }
                let d = &model.params.decoder;
                let l0: f64 = (0..h).map(|k| d.get(0, k) * x[k]).sum();
                let l1: f64 = (0..h).map(|k| d.get(1, k) * x[k]).sum();
                out.push(l1.exp() / (l0.exp() + l1.exp()));
            }
            out
        }
    }

    #[test]
    fn parameter_counts_match_closed_form_and_allocation() {
        let lstm = arch(CellKind::Lstm, 1, 200);
        assert_eq!(lstm.param_count(), 163_600);
        assert_eq!(RnnModel::<f64>::zeros(lstm).unwrap().param_count(), 163_600);

        let elman = arch(CellKind::Elman, 1, 1);
        assert_eq!(elman.param_count(), 7);
        assert_eq!(RnnModel::<f64>::zeros(elman).unwrap().param_count(), 7);

        for kind in CellKind::ALL {
            for (layers, hidden) in [(1, 200), (2, 200), (3, 200), (2, 2000)] {
                let a = arch(kind, layers, hidden);
                let g = kind.gate_blocks();
                let h = hidden;
                let closed = g * h * (2 + h)
                    + 2 * g * h
                    + (layers - 1) * (g * h * 2 * h + 2 * g * h)
                    + 2 * h;
                assert_eq!(a.param_count(), closed);
                if hidden == 200 {
                    assert_eq!(Parameters::<f32>::zeros(&a).len(), closed);
                }
            }
        }
    }

    #[test]
    fn init_respects_bounds_and_is_deterministic() {
        let a = arch(CellKind::Gru, 2, 16);
        let m1 = RnnModel::<f64>::init(a, &mut RngStream::new(4)).unwrap();
        let m2 = RnnModel::<f64>::init(a, &mut RngStream::new(4)).unwrap();
        assert_eq!(m1, m2);
        let bound = 1.0 / 4.0;
        assert!(m1.params.to_flat().iter().all(|x| x.abs() <= bound));
        let m3 = RnnModel::<f64>::init(a, &mut RngStream::new(5)).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn zero_models_are_symmetric() {
        let seq: BinarySequence = "abbab".parse().unwrap();
        for kind in CellKind::ALL {
            let m = RnnModel::<f64>::zeros(arch(kind, 2, 3)).unwrap();
            let (state, logits) = m.step(&m.zero_state(), Symbol::B).unwrap();
            assert_eq!(logits, [0.0, 0.0]);
            assert!(state.layers.iter().all(|l| l.h.iter().all(|&v| v == 0.0)));
            if kind == CellKind::Lstm {
                assert!(state.layers.iter().all(|l| l.c == vec![0.0; 3]));
            }
            let p = m.forward_signal(&seq).unwrap();
            assert!(p.values.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn step_rejects_mismatched_state() {
        let m = RnnModel::<f64>::zeros(arch(CellKind::Lstm, 2, 3)).unwrap();
        let wrong = HiddenState::zeros(&arch(CellKind::Lstm, 1, 3));
        assert!(matches!(
            m.step(&wrong, Symbol::A),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn step_reports_non_finite_activations() {
        let mut m = RnnModel::<f64>::zeros(arch(CellKind::Elman, 1, 2)).unwrap();
        m.params.layers[0].b_ih[0] = f64::NAN;
        assert!(matches!(
            m.step(&m.zero_state(), Symbol::A),
            Err(Error::NumericOverflow(_))
        ));
    }

    #[test]
    fn matches_reference_cell_equations() {
        let mut rng = RngStream::new(12);
        let seq = crate::datagen::sample_sequence(&mut rng, 25).unwrap();
        for kind in CellKind::ALL {
            let m = RnnModel::<f64>::init(arch(kind, 3, 5), &mut rng).unwrap();
            let got = m.forward_signal(&seq).unwrap();
            let want = reference::run(&m, &seq);
            for (g, w) in got.values.iter().zip(&want) {
                assert!((g - w).abs() < 1e-13, "{kind}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn swapping_decoder_rows_complements_the_signal() {
        let mut rng = RngStream::new(8);
        let seq = crate::datagen::sample_sequence(&mut rng, 40).unwrap();
        for kind in CellKind::ALL {
            let m = RnnModel::<f64>::init(arch(kind, 2, 6), &mut rng).unwrap();
            let mut swapped = m.clone();
            let h = 6;
            for k in 0..h {
                let (a, b) = (m.params.decoder.get(0, k), m.params.decoder.get(1, k));
                swapped.params.decoder.set(0, k, b);
                swapped.params.decoder.set(1, k, a);
            }
            let p = m.forward_signal(&seq).unwrap();
            let q = swapped.forward_signal(&seq).unwrap();
            for (a, b) in p.values.iter().zip(&q.values) {
                assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_precision_forward_tracks_double() {
        let a = arch(CellKind::Lstm, 2, 8);
        let m64 = RnnModel::<f64>::init(a, &mut RngStream::new(2)).unwrap();
        let mut params32 = Parameters::<f32>::zeros(&a);
        let flat: Vec<f32> = m64.params.to_flat().iter().map(|&x| x as f32).collect();
        params32.set_flat(&flat).unwrap();
        let m32 = RnnModel::from_parameters(a, params32).unwrap();
        let seq = crate::datagen::sample_sequence(&mut RngStream::new(3), 50).unwrap();
        let p64 = m64.forward_signal(&seq).unwrap();
        let p32 = m32.forward_signal(&seq).unwrap();
        for (x, y) in p64.values.iter().zip(&p32.values) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for kind in CellKind::ALL {
            let m =
                RnnModel::<f64>::init(arch(kind, 2, 5), &mut RngStream::new(kind as u64)).unwrap();
            let mut buf = Vec::new();
            m.write_checkpoint(&mut buf).unwrap();
            let back = RnnModel::<f64>::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, m);
            let text = String::from_utf8(buf).unwrap();
            assert!(text.starts_with("seqfreq-checkpoint 1\n"));
            assert!(text.contains("bias two"));
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = RnnModel::<f64>::init(arch(CellKind::Gru, 1, 2), &mut RngStream::new(1)).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(RnnModel::<f64>::read_checkpoint(truncated.as_bytes()).is_err());
        let wrong_gates = text.replace("gates r,z,n", "gates z,r,n");
        assert!(RnnModel::<f64>::read_checkpoint(wrong_gates.as_bytes()).is_err());
        let wrong_version = text.replace("seqfreq-checkpoint 1", "seqfreq-checkpoint 9");
        assert!(RnnModel::<f64>::read_checkpoint(wrong_version.as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn outputs_are_probabilities_and_prefix_consistent(
            seed in any::<u64>(),
            kind_idx in 0usize..3,
            flip_at in 1usize..30,
        ) {
            let kind = CellKind::ALL[kind_idx];
            let mut rng = RngStream::new(seed);
            let m = RnnModel::<f64>::init(arch(kind, 2, 4), &mut rng).unwrap();
            let seq = crate::datagen::sample_sequence(&mut rng, 30).unwrap();
            let p = m.forward_signal(&seq).unwrap();
            prop_assert_eq!(p.len(), 30);
            for &v in &p.values {
                prop_assert!(v > 0.0 && v < 1.0);
            }
            let again = m.forward_signal(&seq).unwrap();
            prop_assert_eq!(&p, &again);

            let mut mutated: Vec<Symbol> = seq.symbols().to_vec();
            for s in &mut mutated[flip_at..] {
                *s = if *s == Symbol::A { Symbol::B } else { Symbol::A };
            }
            let q = m.forward_signal(&BinarySequence::new(mutated).unwrap()).unwrap();
            prop_assert_eq!(&p.values[..flip_at], &q.values[..flip_at]);
        }

        #[test]
        fn softmax_sums_to_one(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let [p0, p1] = softmax2([a, b]);
            prop_assert!((p0 + p1 - 1.0).abs() <= 1e-12);
        }
    }
}
