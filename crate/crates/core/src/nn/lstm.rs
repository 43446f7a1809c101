//! LSTM cell, bidirectional summary and backpropagation through time.
//!
//! Gate order everywhere is (input, forget, cell-candidate, output).

use rand::Rng;

use super::matrix::{gemm, sigmoid, Matrix, Strides};
use crate::error::{Error, Result};

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_CELL: usize = 2;
pub const GATE_OUTPUT: usize = 3;
const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

/// One directional half of the bi-LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `hidden x input` per gate.
    pub w_input: [Matrix; 4],
    /// `hidden x hidden` per gate.
    pub w_recurrent: [Matrix; 4],
    /// `hidden x 1` per gate.
    pub bias: [Matrix; 4],
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmCellParams {
            input_dim,
            hidden_dim,
            w_input: std::array::from_fn(|_| Matrix::zeros(hidden_dim, input_dim)),
            w_recurrent: std::array::from_fn(|_| Matrix::zeros(hidden_dim, hidden_dim)),
            bias: std::array::from_fn(|_| Matrix::zeros(hidden_dim, 1)),
        }
    }

    /// Glorot-uniform weights, zero biases except forget gate = 1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let w_input = std::array::from_fn(|_| Matrix::glorot(hidden_dim, input_dim, rng));
        let w_recurrent = std::array::from_fn(|_| Matrix::glorot(hidden_dim, hidden_dim, rng));
        let mut bias: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(hidden_dim, 1));
        bias[GATE_FORGET].fill(1.0);
        LstmCellParams {
            input_dim,
            hidden_dim,
            w_input,
            w_recurrent,
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmCellParams::zeros(self.input_dim, self.hidden_dim)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (g, name) in GATE_NAMES.iter().enumerate() {
            out.push((format!("{prefix}.w_input.{name}"), &self.w_input[g]));
            out.push((format!("{prefix}.w_recurrent.{name}"), &self.w_recurrent[g]));
            out.push((format!("{prefix}.bias.{name}"), &self.bias[g]));
        }
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Matrix)>,
    ) {
        let LstmCellParams {
            w_input,
            w_recurrent,
            bias,
            ..
        } = self;
        for (((wi, wr), b), name) in w_input
            .iter_mut()
            .zip(w_recurrent.iter_mut())
            .zip(bias.iter_mut())
            .zip(GATE_NAMES)
        {
            out.push((format!("{prefix}.w_input.{name}"), wi));
            out.push((format!("{prefix}.w_recurrent.{name}"), wr));
            out.push((format!("{prefix}.bias.{name}"), b));
        }
    }

    /// Post-activation gates for one step, written into `gates` (4 x hidden).
    #[inline]
    fn gates_into(&self, x: &[f64], h_prev: &[f64], gates: &mut [f64]) {
        let h = self.hidden_dim;
        for g in 0..4 {
            let out = &mut gates[g * h..(g + 1) * h];
            out.copy_from_slice(self.bias[g].as_slice());
            self.w_input[g].matvec_acc(x, out);
            self.w_recurrent[g].matvec_acc(h_prev, out);
            if g == GATE_CELL {
                out.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                out.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
        }
    }
}

impl LstmCellParams {
    /// The four input weight matrices stacked into one `4h x d` block.
    fn stacked_input_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.hidden_dim * self.input_dim);
        for w in &self.w_input {
            out.extend_from_slice(w.as_slice());
        }
        out
    }

    /// Input projections `W x_t` of every packed step, `total_steps x 4h`.
    pub(crate) fn project_packed(&self, packed: &PackedSequences) -> Vec<f64> {
        let (h4, d, rows) = (4 * self.hidden_dim, self.input_dim, packed.total_steps());
        let w = self.stacked_input_weights();
        let mut out = vec![0.0; rows * h4];
        gemm(
            rows,
            d,
            h4,
            &packed.data,
            Strides(d, 1),
            &w,
            Strides(1, d),
            0.0,
            &mut out,
            Strides(h4, 1),
        );
        out
    }

    /// Adds `da^T . x` over every packed step into the input-weight gradients.
    pub(crate) fn accumulate_input_grads(
        &self,
        packed: &PackedSequences,
        da: &[f64],
        grads: &mut LstmCellParams,
    ) {
        let (h, d, rows) = (self.hidden_dim, self.input_dim, packed.total_steps());
        let mut stacked = vec![0.0; 4 * h * d];
        gemm(
            4 * h,
            rows,
            d,
            da,
            Strides(1, 4 * h),
            &packed.data,
            Strides(d, 1),
            0.0,
            &mut stacked,
            Strides(d, 1),
        );
        for (g, w) in grads.w_input.iter_mut().enumerate() {
            for (dst, src) in w
                .as_mut_slice()
                .iter_mut()
                .zip(&stacked[g * h * d..(g + 1) * h * d])
            {
                *dst += src;
            }
        }
    }

    #[inline]
    fn gates_from_projection(&self, xp: &[f64], h_prev: &[f64], gates: &mut [f64]) {
        let h = self.hidden_dim;
        for g in 0..4 {
            let out = &mut gates[g * h..(g + 1) * h];
            for ((o, b), x) in out
                .iter_mut()
                .zip(self.bias[g].as_slice())
                .zip(&xp[g * h..(g + 1) * h])
            {
                *o = b + x;
            }
            self.w_recurrent[g].matvec_acc(h_prev, out);
            if g == GATE_CELL {
                out.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                out.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
        }
    }
}

pub fn lstm_cell_step(
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmCellParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = params.hidden_dim;
    if x_t.len() != params.input_dim {
        return Err(Error::shape(
            "lstm_cell_step input",
            params.input_dim,
            x_t.len(),
        ));
    }
    if h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::shape(
            "lstm_cell_step state",
            hd,
            format!("h={}, c={}", h_prev.len(), c_prev.len()),
        ));
    }
    let mut gates = vec![0.0; 4 * hd];
    params.gates_into(x_t, h_prev, &mut gates);
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for k in 0..hd {
        let (i, f, g, o) = (
            gates[k],
            gates[hd + k],
            gates[2 * hd + k],
            gates[3 * hd + k],
        );
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh();
    }
    Ok((h, c))
}

/// A flat `steps x dim` sequence, optionally read back to front.
#[derive(Clone, Copy, Debug)]
pub struct SeqView<'a> {
    data: &'a [f64],
    dim: usize,
    reversed: bool,
}

impl<'a> SeqView<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape(
                "sequence",
                format!("multiple of {dim}"),
                data.len(),
            ));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        Ok(SeqView {
            data,
            dim,
            reversed: false,
        })
    }

    pub fn reversed(self) -> Self {
        SeqView {
            reversed: !self.reversed,
            ..self
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Position in the underlying data of step `t`.
    #[inline]
    pub fn index(&self, t: usize) -> usize {
        if self.reversed {
            self.len() - 1 - t
        } else {
            t
        }
    }

    #[inline]
    pub fn step(&self, t: usize) -> &'a [f64] {
        let idx = self.index(t);
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Several sequences copied back to back so their input projections can be
/// computed with a single matrix product.
#[derive(Clone, Debug)]
pub(crate) struct PackedSequences {
    data: Vec<f64>,
    /// Step offset of each sequence; one extra trailing entry.
    offsets: Vec<usize>,
}

impl PackedSequences {
    pub(crate) fn new(batch: &[&[f64]], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(batch.iter().map(|s| s.len()).sum());
        let mut offsets = vec![0];
        for seq in batch {
            let view = SeqView::new(seq, dim)?;
            data.extend_from_slice(seq);
            offsets.push(offsets.last().copied().unwrap_or(0) + view.len());
        }
        Ok(PackedSequences { data, offsets })
    }

    pub(crate) fn total_steps(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    pub(crate) fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }
}

/// Cached activations of one directional pass.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    hidden: usize,
    steps: usize,
    /// `steps x 4 x hidden`, post-activation.
    gates: Vec<f64>,
    /// `steps x hidden`.
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    hiddens: Vec<f64>,
}

impl LstmTrace {
    pub fn final_hidden(&self) -> &[f64] {
        &self.hiddens[(self.steps - 1) * self.hidden..]
    }

    fn slot(buf: &[f64], width: usize, t: usize) -> &[f64] {
        &buf[t * width..(t + 1) * width]
    }
}

/// Runs one direction over the whole sequence, keeping what BPTT needs.
pub fn lstm_run(params: &LstmCellParams, seq: SeqView<'_>) -> Result<LstmTrace> {
    if seq.dim != params.input_dim {
        return Err(Error::shape("lstm input dim", params.input_dim, seq.dim));
    }
    let packed = PackedSequences::new(&[seq.data], seq.dim)?;
    let proj = params.project_packed(&packed);
    lstm_run_projected(params, &proj, seq.len(), seq.reversed)
}

/// Runs the recurrence over precomputed input projections (`steps x 4h`,
/// data order), walking them backwards when `reversed`.
pub(crate) fn lstm_run_projected(
    params: &LstmCellParams,
    proj: &[f64],
    steps: usize,
    reversed: bool,
) -> Result<LstmTrace> {
    let hd = params.hidden_dim;
    let mut trace = LstmTrace {
        hidden: hd,
        steps,
        gates: vec![0.0; steps * 4 * hd],
        cells: vec![0.0; steps * hd],
        tanh_cells: vec![0.0; steps * hd],
        hiddens: vec![0.0; steps * hd],
    };
    let zeros = vec![0.0; hd];
    for t in 0..steps {
        let LstmTrace {
            gates,
            cells,
            tanh_cells,
            hiddens,
            ..
        } = &mut trace;
        let (done_h, rest_h) = hiddens.split_at_mut(t * hd);
        let (done_c, rest_c) = cells.split_at_mut(t * hd);
        let (prev_h, prev_c) = if t == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&done_h[(t - 1) * hd..], &done_c[(t - 1) * hd..])
        };
        let gates = &mut gates[t * 4 * hd..(t + 1) * 4 * hd];
        let xi = if reversed { steps - 1 - t } else { t };
        params.gates_from_projection(&proj[xi * 4 * hd..(xi + 1) * 4 * hd], prev_h, gates);
        let tanh_out = &mut tanh_cells[t * hd..(t + 1) * hd];
        for k in 0..hd {
            let (i, f, g, o) = (
                gates[k],
                gates[hd + k],
                gates[2 * hd + k],
                gates[3 * hd + k],
            );
            let c = f * prev_c[k] + i * g;
            let tc = c.tanh();
            rest_c[k] = c;
            tanh_out[k] = tc;
            rest_h[k] = o * tc;
        }
    }
    if trace.hiddens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: "lstm" });
    }
    Ok(trace)
}

pub fn lstm_backward(
    params: &LstmCellParams,
    seq: SeqView<'_>,
    trace: &LstmTrace,
    d_final_hidden: &[f64],
    grads: &mut LstmCellParams,
) {
    let packed = PackedSequences::new(&[seq.data], seq.dim).expect("validated sequence");
    let mut da = vec![0.0; trace.steps * 4 * params.hidden_dim];
    lstm_backward_recurrent(params, trace, seq.reversed, d_final_hidden, grads, &mut da);
    params.accumulate_input_grads(&packed, &da, grads);
}

/// BPTT for everything except the input weights; gate pre-activation
/// gradients are written to `da_out` (`steps x 4h`, data order).
pub(crate) fn lstm_backward_recurrent(
    params: &LstmCellParams,
    trace: &LstmTrace,
    reversed: bool,
    d_final_hidden: &[f64],
    grads: &mut LstmCellParams,
    da_out: &mut [f64],
) {
    let hd = params.hidden_dim;
    let mut dh = d_final_hidden.to_vec();
    let mut dc = vec![0.0; hd];
    let zeros = vec![0.0; hd];
    for t in (0..trace.steps).rev() {
        let gates = LstmTrace::slot(&trace.gates, 4 * hd, t);
        let tanh_c = LstmTrace::slot(&trace.tanh_cells, hd, t);
        let c_prev = if t == 0 {
            &zeros[..]
        } else {
            LstmTrace::slot(&trace.cells, hd, t - 1)
        };
        let h_prev = if t == 0 {
            &zeros[..]
        } else {
            LstmTrace::slot(&trace.hiddens, hd, t - 1)
        };
        let xi = if reversed { trace.steps - 1 - t } else { t };
        let da = &mut da_out[xi * 4 * hd..(xi + 1) * 4 * hd];
        for k in 0..hd {
            let (i, f, g, o) = (
                gates[k],
                gates[hd + k],
                gates[2 * hd + k],
                gates[3 * hd + k],
            );
            let tc = tanh_c[k];
            let d_o = dh[k] * tc;
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            da[k] = dck * g * i * (1.0 - i);
            da[hd + k] = dck * c_prev[k] * f * (1.0 - f);
            da[2 * hd + k] = dck * i * (1.0 - g * g);
            da[3 * hd + k] = d_o * o * (1.0 - o);
            dc[k] = dck * f;
        }
        dh.iter_mut().for_each(|v| *v = 0.0);
        for gi in 0..4 {
            let dag = &da[gi * hd..(gi + 1) * hd];
            if t > 0 {
                grads.w_recurrent[gi].add_outer(1.0, dag, h_prev);
            }
            for (b, d) in grads.bias[gi].as_mut_slice().iter_mut().zip(dag) {
                *b += d;
            }
            params.w_recurrent[gi].matvec_t_acc(dag, &mut dh);
        }
    }
}

pub fn bilstm_forward(
    sequence: &[Vec<f64>],
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let dim = sequence[0].len();
    if sequence.iter().any(|s| s.len() != dim) {
        return Err(Error::shape(
            "bilstm_forward",
            "equal step widths",
            "ragged",
        ));
    }
    let flat: Vec<f64> = sequence.iter().flatten().copied().collect();
    let seq = SeqView::new(&flat, dim)?;
    bilstm_summary(seq, fwd, bwd)
}

pub(crate) fn bilstm_summary(
    seq: SeqView<'_>,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
) -> Result<Vec<f64>> {
    let f = lstm_run(fwd, seq)?;
    let b = lstm_run(bwd, seq.reversed())?;
    let mut out = f.final_hidden().to_vec();
    out.extend_from_slice(b.final_hidden());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Independent per-scalar LSTM recurrence, written without the
    /// production gate helpers.
    fn oracle_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmCellParams) -> (Vec<f64>, Vec<f64>) {
        let hd = p.hidden_dim;
        let pre = |g: usize, k: usize| {
            let mut s = p.bias[g].get(k, 0);
            for j in 0..p.input_dim {
                s += p.w_input[g].get(k, j) * x[j];
            }
            for j in 0..hd {
                s += p.w_recurrent[g].get(k, j) * h[j];
            }
            s
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut hn = vec![0.0; hd];
        let mut cn = vec![0.0; hd];
        for k in 0..hd {
            let i = sig(pre(0, k));
            let f = sig(pre(1, k));
            let g = pre(2, k).tanh();
            let o = sig(pre(3, k));
            cn[k] = f * c[k] + i * g;
            hn[k] = o * cn[k].tanh();
        }
        (hn, cn)
    }

    fn random_params(input: usize, hidden: usize, s: u64) -> LstmCellParams {
        let mut rng = seed::rng(s);
        let mut p = LstmCellParams::init(input, hidden, &mut rng);
        for b in p.bias.iter_mut() {
            for v in b.as_mut_slice() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmCellParams::zeros(3, 2);
        let (h, c) = lstm_cell_step(&[1.0, -2.0, 3.0], &[0.0; 2], &[0.0; 2], &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_params_half_gates() {
        let p = LstmCellParams::zeros(2, 3);
        let v = [0.4, -1.0, 2.5];
        let (h, c) = lstm_cell_step(&[9.0, 9.0], &[0.0; 3], &v, &p).unwrap();
        for k in 0..3 {
            assert!((c[k] - 0.5 * v[k]).abs() < 1e-15);
            assert!((h[k] - 0.5 * (0.5 * v[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn cell_step_matches_scalar_oracle() {
        let p = random_params(3, 3, 11);
        let mut rng = seed::rng(12);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h1, c1) = lstm_cell_step(&x, &h, &c, &p).unwrap();
        let (h2, c2) = oracle_step(&x, &h, &c, &p);
        for k in 0..3 {
            assert!((h1[k] - h2[k]).abs() < 1e-10);
            assert!((c1[k] - c2[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn cell_step_rejects_bad_dims() {
        let p = LstmCellParams::zeros(3, 2);
        assert!(lstm_cell_step(&[1.0; 2], &[0.0; 2], &[0.0; 2], &p).is_err());
        assert!(lstm_cell_step(&[1.0; 3], &[0.0; 3], &[0.0; 2], &p).is_err());
    }

    #[test]
    fn single_step_bilstm_is_concat_of_cells() {
        let f = random_params(4, 3, 1);
        let b = random_params(4, 3, 2);
        let x = vec![0.1, 0.2, -0.3, 0.4];
        let out = bilstm_forward(&[x.clone()], &f, &b).unwrap();
        let (hf, _) = lstm_cell_step(&x, &[0.0; 3], &[0.0; 3], &f).unwrap();
        let (hb, _) = lstm_cell_step(&x, &[0.0; 3], &[0.0; 3], &b).unwrap();
        assert_eq!(out[..3], hf[..]);
        assert_eq!(out[3..], hb[..]);
    }

    #[test]
    fn bilstm_matches_oracle_seed_7() {
        let f = random_params(3, 4, 70);
        let b = random_params(3, 4, 71);
        let mut rng = seed::rng(7);
        let seq: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let out = bilstm_forward(&seq, &f, &b).unwrap();
        let run = |p: &LstmCellParams, order: Vec<&Vec<f64>>| {
            let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
            for x in order {
                let (hn, cn) = oracle_step(x, &h, &c, p);
                h = hn;
                c = cn;
            }
            h
        };
        let mut expected = run(&f, seq.iter().collect());
        expected.extend(run(&b, seq.iter().rev().collect()));
        for (a, e) in out.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn reversal_with_swapped_cells_swaps_halves() {
        let f = random_params(3, 2, 5);
        let b = random_params(3, 2, 6);
        let seq: Vec<Vec<f64>> = (0..5)
            .map(|t| vec![t as f64 * 0.1, -0.2 * t as f64, 0.3])
            .collect();
        let a = bilstm_forward(&seq, &f, &b).unwrap();
        let rev: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
        let s = bilstm_forward(&rev, &b, &f).unwrap();
        assert_eq!(a[..2], s[2..]);
        assert_eq!(a[2..], s[..2]);
    }

    #[test]
    fn empty_sequence_is_error() {
        let f = LstmCellParams::zeros(2, 2);
        assert!(bilstm_forward(&[], &f, &f).is_err());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let p = LstmCellParams::init(5, 3, &mut seed::rng(0));
        assert!(p.bias[GATE_FORGET].as_slice().iter().all(|&v| v == 1.0));
        assert!(p.bias[GATE_INPUT].as_slice().iter().all(|&v| v == 0.0));
        let a = (6.0f64 / 8.0).sqrt();
        assert!(p.w_input[0].as_slice().iter().all(|v| v.abs() < a));
    }
}
