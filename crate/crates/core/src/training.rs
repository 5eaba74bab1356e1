//! Full-batch cross-entropy training with backpropagation through time and Adam.
//!
//! All labelled prefixes of a dataset share one forward pass over the
//! sequence: the output for prefix length `L` is the decoder read-out after
//! step `L - 1`, so each labelled entry injects its loss gradient at that step
//! of the reverse sweep.

use serde::{Deserialize, Serialize};

use crate::datagen::TrainDataset;
use crate::error::{Error, Result};
use crate::models::{
    one_hot, softmax2, Architecture, CellKind, CellTrace, LayerParams, Parameters, RnnModel,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Probabilities are clamped to `[log_clamp, 1 - log_clamp]` before logs.
    pub log_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            log_clamp: 1e-12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return bad("adam_beta1 must lie in (0, 1)");
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam_beta2 must lie in (0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        if !(self.log_clamp > 0.0 && self.log_clamp < 0.5) {
            return bad("log_clamp must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// Binary cross-entropy of predicting `p` for label `y`, with clamping.
#[inline]
pub fn binary_cross_entropy<T: Scalar>(p: T, y: u8, log_clamp: T) -> T {
    let p = p.max(log_clamp).min(T::one() - log_clamp);
    if y == 1 {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Mean cross-entropy over the train entries.
pub fn train_loss<T: Scalar>(model: &RnnModel<T>, d: &TrainDataset, log_clamp: T) -> Result<T> {
    if d.is_empty() {
        return Err(Error::ContractViolation("train set is empty".into()));
    }
    let signal = model.forward_signal(d.sequence())?;
    let total = d.entries().iter().fold(T::zero(), |acc, e| {
        acc + binary_cross_entropy(signal.values[e.signal_index()], e.label, log_clamp)
    });
    Ok(total / T::from_usize_exact(d.len()))
}

/// Reusable buffers for [`backward_into`].
#[derive(Debug, Default)]
pub struct Workspace<T> {
    /// `traces[t][layer]`
    traces: Vec<Vec<CellTrace<T>>>,
    dlogits: Vec<Option<[T; 2]>>,
    dh_next: Vec<Vec<T>>,
    dc_next: Vec<Vec<T>>,
    dh: Vec<T>,
    dx: Vec<T>,
    d_in: Vec<T>,
    d_hid: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new() -> Self {
        Self {
            traces: Vec::new(),
            dlogits: Vec::new(),
            dh_next: Vec::new(),
            dc_next: Vec::new(),
            dh: Vec::new(),
            dx: Vec::new(),
            d_in: Vec::new(),
            d_hid: Vec::new(),
        }
    }
}

/// Loss and exact gradients of [`train_loss`] with respect to every parameter.
pub fn backward<T: Scalar>(
    model: &RnnModel<T>,
    d: &TrainDataset,
    log_clamp: T,
) -> Result<(T, Parameters<T>)> {
    backward_scaled(model, d, log_clamp, T::one())
}

/// Gradients of `scale * train_loss`. The returned loss is unscaled.
pub fn backward_scaled<T: Scalar>(
    model: &RnnModel<T>,
    d: &TrainDataset,
    log_clamp: T,
    scale: T,
) -> Result<(T, Parameters<T>)> {
    let mut grads = Parameters::zeros(model.arch());
    let loss = backward_into(
        model,
        d,
        log_clamp,
        scale,
        &mut Workspace::new(),
        &mut grads,
    )?;
    Ok((loss, grads))
}

/// Overwrites `grads` with the gradient of `scale * train_loss`.
pub fn backward_into<T: Scalar>(
    model: &RnnModel<T>,
    d: &TrainDataset,
    log_clamp: T,
    scale: T,
    ws: &mut Workspace<T>,
    grads: &mut Parameters<T>,
) -> Result<T> {
    if d.is_empty() {
        return Err(Error::ContractViolation("train set is empty".into()));
    }
    let arch = *model.arch();
    let steps = d.max_prefix_len();
    let layers = arch.num_layers;
    let hs = arch.hidden_size;
    let symbols = &d.sequence().symbols()[..steps];
    let zeros = vec![T::zero(); hs];

    // forward
    ws.traces.resize_with(steps.max(ws.traces.len()), Vec::new);
    for row in ws.traces.iter_mut().take(steps) {
        row.resize_with(layers, CellTrace::default);
    }
    for (t, &sym) in symbols.iter().enumerate() {
        let x0 = one_hot::<T>(sym);
        let (done, rest) = ws.traces.split_at_mut(t);
        let prev = done.last();
        let row = &mut rest[0];
        for l in 0..layers {
            let (below, here) = row.split_at_mut(l);
            let x: &[T] = if l == 0 { &x0 } else { &below[l - 1].h };
            let (h_prev, c_prev): (&[T], &[T]) = match prev {
                Some(p) => (&p[l].h, &p[l].c),
                None => (&zeros, &zeros),
            };
            model.params.layers[l].forward(arch.kind, x, h_prev, c_prev, &mut here[0]);
        }
    }

    // loss and its gradient with respect to the logits
    let n_entries = T::from_usize_exact(d.len());
    let upper = T::one() - log_clamp;
    ws.dlogits.clear();
    ws.dlogits.resize(steps, None);
    let mut loss = T::zero();
    for e in d.entries() {
        let t = e.signal_index();
        let logits = model.decode(&ws.traces[t][layers - 1].h);
        let p = softmax2(logits)[1];
        loss += binary_cross_entropy(p, e.label, log_clamp);
        let y = if e.label == 1 { T::one() } else { T::zero() };
        // the clamp is flat outside [log_clamp, 1 - log_clamp]
        let g = if p < log_clamp || p > upper {
            T::zero()
        } else {
            scale * (p - y) / n_entries
        };
        ws.dlogits[t] = Some([-g, g]);
    }
    let loss = loss / n_entries;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow(format!("train loss is {loss}")));
    }

    // reverse sweep
    for t in grads.tensors_mut() {
        t.fill(T::zero());
    }
    ws.dh_next.resize_with(layers, Vec::new);
    ws.dc_next.resize_with(layers, Vec::new);
    for l in 0..layers {
        ws.dh_next[l].clear();
        ws.dh_next[l].resize(hs, T::zero());
        ws.dc_next[l].clear();
        ws.dc_next[l].resize(hs, T::zero());
    }
    for t in (0..steps).rev() {
        ws.dh.clear();
        ws.dh.resize(hs, T::zero());
        let top = &ws.traces[t][layers - 1].h;
        if let Some(dl) = ws.dlogits[t] {
            grads.decoder.add_outer(&dl, top);
            model.params.decoder.matvec_t_acc(&dl, &mut ws.dh);
        }
        let x0 = one_hot::<T>(symbols[t]);
        for l in (0..layers).rev() {
            for (a, b) in ws.dh.iter_mut().zip(&ws.dh_next[l]) {
                *a += *b;
            }
            let trace = &ws.traces[t][l];
            let x: &[T] = if l == 0 { &x0 } else { &ws.traces[t][l - 1].h };
            let (h_prev, c_prev): (&[T], &[T]) = if t == 0 {
                (&zeros, &zeros)
            } else {
                (&ws.traces[t - 1][l].h, &ws.traces[t - 1][l].c)
            };
            cell_backward(
                arch.kind,
                &model.params.layers[l],
                trace,
                x,
                h_prev,
                c_prev,
                &ws.dh,
                &mut ws.dc_next[l],
                &mut grads.layers[l],
                &mut ws.d_in,
                &mut ws.d_hid,
                &mut ws.dh_next[l],
            );
            if l > 0 {
                ws.dx.clear();
                ws.dx.resize(hs, T::zero());
                model.params.layers[l]
                    .w_ih
                    .matvec_t_acc(&ws.d_in, &mut ws.dx);
                std::mem::swap(&mut ws.dh, &mut ws.dx);
            }
        }
    }
    if !grads.all_finite() {
        return Err(Error::NumericOverflow("non-finite gradient".into()));
    }
    Ok(loss)
}

/// Reverse step of one cell at one time step.
///
/// Reads the upstream gradient `dh` of the cell's hidden output and, for
/// LSTM, the cell-state gradient carried in `dc` from the next step, which is
/// replaced by the gradient for `c_prev`. Accumulates parameter gradients,
/// leaves the pre-activation gradients of the input and hidden affine maps in
/// `d_in` / `d_hid` and writes the gradient for `h_prev` to `dh_prev`.
#[allow(clippy::too_many_arguments)]
fn cell_backward<T: Scalar>(
    kind: CellKind,
    p: &LayerParams<T>,
    trace: &CellTrace<T>,
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    dh: &[T],
    dc: &mut [T],
    g: &mut LayerParams<T>,
    d_in: &mut Vec<T>,
    d_hid: &mut Vec<T>,
    dh_prev: &mut [T],
) {
    let hs = dh.len();
    let one = T::one();
    d_in.clear();
    d_in.resize(kind.gate_blocks() * hs, T::zero());
    dh_prev.fill(T::zero());
    match kind {
        CellKind::Elman => {
            for k in 0..hs {
                let h = trace.gates[k];
                d_in[k] = dh[k] * (one - h * h);
            }
            d_hid.clear();
            d_hid.extend_from_slice(d_in);
        }
        CellKind::Lstm => {
            let gates = &trace.gates;
            for k in 0..hs {
                let (i, f, gg, o) = (
                    gates[k],
                    gates[hs + k],
                    gates[2 * hs + k],
                    gates[3 * hs + k],
                );
                let tc = trace.c[k].tanh();
                let d_o = dh[k] * tc;
                let dct = dc[k] + dh[k] * o * (one - tc * tc);
                let d_i = dct * gg;
                let d_g = dct * i;
                let d_f = dct * c_prev[k];
                dc[k] = dct * f;
                d_in[k] = d_i * i * (one - i);
                d_in[hs + k] = d_f * f * (one - f);
                d_in[2 * hs + k] = d_g * (one - gg * gg);
                d_in[3 * hs + k] = d_o * o * (one - o);
            }
            d_hid.clear();
            d_hid.extend_from_slice(d_in);
        }
        CellKind::Gru => {
            let gates = &trace.gates;
            d_hid.clear();
            d_hid.resize(3 * hs, T::zero());
            for k in 0..hs {
                let (r, z, n) = (gates[k], gates[hs + k], gates[2 * hs + k]);
                let d_n = dh[k] * (one - z);
                let d_z = dh[k] * (h_prev[k] - n);
                dh_prev[k] = dh[k] * z;
                let da_n = d_n * (one - n * n);
                let d_r = da_n * trace.hidden_n[k];
                let da_r = d_r * r * (one - r);
                let da_z = d_z * z * (one - z);
                d_in[k] = da_r;
                d_in[hs + k] = da_z;
                d_in[2 * hs + k] = da_n;
                d_hid[k] = da_r;
                d_hid[hs + k] = da_z;
                d_hid[2 * hs + k] = da_n * r;
            }
        }
    }
    g.w_ih.add_outer(d_in, x);
    add_assign(&mut g.b_ih, d_in);
    g.w_hh.add_outer(d_hid, h_prev);
    add_assign(&mut g.b_hh, d_hid);
    p.w_hh.matvec_t_acc(d_hid, dh_prev);
}

#[inline]
fn add_assign<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Adam first and second moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(arch: &Architecture) -> Self {
        Self {
            m: Parameters::zeros(arch),
            v: Parameters::zeros(arch),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of one flat tensor at step `t >= 1`.
pub fn adam_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &TrainConfig,
) {
    let b1 = T::from_f64_lossy(cfg.adam_beta1);
    let b2 = T::from_f64_lossy(cfg.adam_beta2);
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = T::from_f64_lossy(1.0 - cfg.adam_beta1.powi(exp));
    let c2 = T::from_f64_lossy(1.0 - cfg.adam_beta2.powi(exp));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.adam_epsilon);
    let one = T::one();
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam step over every tensor of the model.
pub fn adam_step<T: Scalar>(
    model: &mut RnnModel<T>,
    grads: &Parameters<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.shapes() != model.params.shapes() || state.m.shapes() != model.params.shapes() {
        return Err(Error::ContractViolation(
            "gradient or optimizer state shape does not match the model".into(),
        ));
    }
    state.t += 1;
    let t = state.t;
    let params = model.params.tensors_mut();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
        adam_update(p, g, m, v, t, cfg);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport<T> {
    /// Train loss after the last update; NaN when diverged.
    pub final_loss: T,
    /// Loss at the start of each epoch, before that epoch's update.
    pub trace: Vec<T>,
    pub diverged: bool,
}

/// Full-batch training: one backward pass and one Adam step per epoch.
///
/// Stops early and sets `diverged` when the loss or a gradient becomes
/// non-finite.
pub fn fit<T: Scalar>(
    model: &mut RnnModel<T>,
    d: &TrainDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::ContractViolation("train set is empty".into()));
    }
    let clamp = T::from_f64_lossy(cfg.log_clamp);
    let mut ws = Workspace::new();
    let mut grads = Parameters::zeros(model.arch());
    let mut adam = AdamState::new(model.arch());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let diverged_report = |trace| TrainReport {
        final_loss: T::nan(),
        trace,
        diverged: true,
    };

    for _ in 0..cfg.epochs {
        match backward_into(model, d, clamp, T::one(), &mut ws, &mut grads) {
            Ok(loss) => trace.push(loss),
            Err(Error::NumericOverflow(_)) => return Ok(diverged_report(trace)),
            Err(e) => return Err(e),
        }
        adam_step(model, &grads, &mut adam, cfg)?;
    }
    match train_loss(model, d, clamp) {
        Ok(loss) if loss.is_finite() => Ok(TrainReport {
            final_loss: loss,
            trace,
            diverged: false,
        }),
        Ok(_) | Err(Error::NumericOverflow(_)) => Ok(diverged_report(trace)),
        Err(e) => Err(e),
    }
}

/// One JSON-lines training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub dataset_id: usize,
    pub seed: usize,
    pub arch: String,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

impl TrainRecord {
    pub fn new<T: Scalar>(
        dataset_id: usize,
        seed: usize,
        arch: String,
        report: &TrainReport<T>,
        with_trace: bool,
    ) -> Self {
        Self {
            dataset_id,
            seed,
            arch,
            final_loss: (!report.diverged).then(|| report.final_loss.to_f64_lossy()),
            diverged: report.diverged,
            trace: with_trace.then(|| report.trace.iter().map(|x| x.to_f64_lossy()).collect()),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
