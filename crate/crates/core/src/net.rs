//! Emission network: character CNN, BiLSTM, multi-head self-attention and
//! an affine projection to per-token tag scores, with exact gradients.
//!
//! Per token the BiLSTM reads `[word vector, char-CNN vector, contextual
//! vector]`. Attention runs over the BiLSTM outputs `H` and its heads are
//! concatenated into `M`; the emission scores are `[H ; M] · W_out + b_out`.
//! Variational dropout masks, when given, scale the BiLSTM input columns and
//! the columns of `H` identically at every position.
//!
//! # Checkpoint layout
//!
//! ```text
//! "SCFM"  u32 version = 1
//! u32 word_dim ctx_dim char_dim char_filters kernel lstm_hidden heads head_size n_tags n_chars
//! n_chars × u32 code points (the character alphabet, rows 2.. of the char table)
//! f64 tensors, row-major, in ModelParams::tensors() order
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{self, Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crf::{self, CrfError};
use crate::embeddings::{init_char_table, CharVocab, InputBundle, PAD_INDEX};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("token {token}: character index {index} is outside the table")]
    IndexOutOfAlphabet { token: usize, index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub word_dim: usize,
    pub ctx_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub kernel: usize,
    pub lstm_hidden: usize,
    pub heads: usize,
    pub head_size: usize,
    pub n_tags: usize,
}

impl Dims {
    pub fn input_width(&self) -> usize {
        self.word_dim + self.char_filters + self.ctx_dim
    }

    /// Width of `H`, both directions.
    pub fn hidden_width(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn attention_width(&self) -> usize {
        self.heads * self.head_size
    }

    pub fn feature_width(&self) -> usize {
        self.hidden_width() + self.attention_width()
    }

    fn validate(&self) -> Result<(), NetError> {
        let positive = [
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
            ("kernel", self.kernel),
            ("lstm_hidden", self.lstm_hidden),
            ("heads", self.heads),
            ("head_size", self.head_size),
            ("n_tags", self.n_tags),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::ShapeMismatch(format!("{name} must be positive")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(NetError::ShapeMismatch(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

/// Weights of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// 4h × input width
    pub w: Array2<f64>,
    /// 4h × h
    pub u: Array2<f64>,
    /// 4h
    pub b: Array1<f64>,
}

impl LstmParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Array2::zeros((4 * hidden, input)),
            u: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.u.ncols()
    }
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// chars × char_dim; row 0 is padding and stays zero.
    pub char_table: Array2<f64>,
    /// filters × (kernel · char_dim); window offsets are laid out left to right.
    pub conv_w: Array2<f64>,
    pub conv_b: Array1<f64>,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// Per head, each 2h × head_size.
    pub query: Vec<Array2<f64>>,
    pub key: Vec<Array2<f64>>,
    pub value: Vec<Array2<f64>>,
    /// (2h + heads · head_size) × n_tags
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    /// (n_tags + 2) × (n_tags + 2), START and END last.
    pub transitions: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(dims: &Dims, char_rows: usize) -> Self {
        let d = dims.hidden_width();
        let head = || (0..dims.heads).map(|_| Array2::zeros((d, dims.head_size))).collect::<Vec<_>>();
        ModelParams {
            char_table: Array2::zeros((char_rows, dims.char_dim)),
            conv_w: Array2::zeros((dims.char_filters, dims.kernel * dims.char_dim)),
            conv_b: Array1::zeros(dims.char_filters),
            forward: LstmParams::zeros(dims.input_width(), dims.lstm_hidden),
            backward: LstmParams::zeros(dims.input_width(), dims.lstm_hidden),
            query: head(),
            key: head(),
            value: head(),
            out_w: Array2::zeros((dims.feature_width(), dims.n_tags)),
            out_b: Array1::zeros(dims.n_tags),
            transitions: Array2::zeros((dims.n_tags + 2, dims.n_tags + 2)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.dim());
        let lstm = |p: &LstmParams| LstmParams { w: z2(&p.w), u: z2(&p.u), b: z1(&p.b) };
        ModelParams {
            char_table: z2(&self.char_table),
            conv_w: z2(&self.conv_w),
            conv_b: z1(&self.conv_b),
            forward: lstm(&self.forward),
            backward: lstm(&self.backward),
            query: self.query.iter().map(z2).collect(),
            key: self.key.iter().map(z2).collect(),
            value: self.value.iter().map(z2).collect(),
            out_w: z2(&self.out_w),
            out_b: z1(&self.out_b),
            transitions: z2(&self.transitions),
        }
    }

    /// Named views of every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        fn flat(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut out = vec![
            ("char_table".to_string(), flat(&self.char_table)),
            ("conv_w".into(), flat(&self.conv_w)),
            ("conv_b".into(), self.conv_b.as_slice().expect("contiguous")),
        ];
        for (name, p) in [("forward", &self.forward), ("backward", &self.backward)] {
            out.push((format!("{name}.w"), flat(&p.w)));
            out.push((format!("{name}.u"), flat(&p.u)));
            out.push((format!("{name}.b"), p.b.as_slice().expect("contiguous")));
        }
        for i in 0..self.query.len() {
            out.push((format!("query.{i}"), flat(&self.query[i])));
            out.push((format!("key.{i}"), flat(&self.key[i])));
            out.push((format!("value.{i}"), flat(&self.value[i])));
        }
        out.push(("out_w".into(), flat(&self.out_w)));
        out.push(("out_b".into(), self.out_b.as_slice().expect("contiguous")));
        out.push(("transitions".into(), flat(&self.transitions)));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelParams { char_table, conv_w, conv_b, forward, backward, query, key, value, out_w, out_b, transitions } =
            self;
        let mut out: Vec<&mut [f64]> = vec![
            char_table.as_slice_mut().expect("standard layout"),
            conv_w.as_slice_mut().expect("standard layout"),
            conv_b.as_slice_mut().expect("contiguous"),
        ];
        for p in [forward, backward] {
            out.push(p.w.as_slice_mut().expect("standard layout"));
            out.push(p.u.as_slice_mut().expect("standard layout"));
            out.push(p.b.as_slice_mut().expect("contiguous"));
        }
        for ((q, k), v) in query.iter_mut().zip(key.iter_mut()).zip(value.iter_mut()) {
            out.push(q.as_slice_mut().expect("standard layout"));
            out.push(k.as_slice_mut().expect("standard layout"));
            out.push(v.as_slice_mut().expect("standard layout"));
        }
        out.push(out_w.as_slice_mut().expect("standard layout"));
        out.push(out_b.as_slice_mut().expect("contiguous"));
        out.push(transitions.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global L2 norm over all tensors, scaled by the largest magnitude so
    /// huge or tiny entries neither overflow nor underflow.
    pub fn norm(&self) -> f64 {
        let tensors = self.tensors();
        let values = || tensors.iter().flat_map(|(_, t)| t.iter());
        let max = values().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 || !max.is_finite() {
            return max;
        }
        max * values().map(|v| (v / max).powi(2)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
}

/// Per-sentence dropout masks, already divided by the keep probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One factor per BiLSTM input column.
    pub input: Array1<f64>,
    /// One factor per column of `H`.
    pub hidden: Array1<f64>,
}

/// Activations of one LSTM direction, indexed by token position.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub reverse: bool,
    /// n × 4h post-activation gates: input, forget, output, candidate.
    pub gates: Array2<f64>,
    /// n × h cell states.
    pub cells: Array2<f64>,
    /// n × h hidden states.
    pub hidden: Array2<f64>,
}

impl LstmTrace {
    /// Position processed just before `t`.
    fn previous(&self, t: usize) -> Option<usize> {
        let n = self.hidden.nrows();
        if self.reverse {
            (t + 1 < n).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub queries: Vec<Array2<f64>>,
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
    /// Per head, n × n row-stochastic attention weights.
    pub probs: Vec<Array2<f64>>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Winning window position per token and filter.
    pub char_argmax: Vec<Vec<usize>>,
    /// BiLSTM input after dropout.
    pub input: Array2<f64>,
    pub forward: LstmTrace,
    pub backward: LstmTrace,
    /// BiLSTM output after dropout.
    pub hidden: Array2<f64>,
    pub attention: AttentionTrace,
    /// `[H ; M]`
    pub features: Array2<f64>,
    pub emissions: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn window(table: &Array2<f64>, chars: &[usize], len: usize, p: usize, kernel: usize) -> Array1<f64> {
    let dim = table.ncols();
    let half = kernel / 2;
    let mut w = Array1::zeros(kernel * dim);
    for o in 0..kernel {
        let q = p as isize + o as isize - half as isize;
        if q >= 0 && (q as usize) < len {
            w.slice_mut(s![o * dim..(o + 1) * dim]).assign(&table.row(chars[q as usize]));
        }
    }
    w
}

/// Max-pooled convolution over each token's characters. Windows reaching
/// past either end of the token see zeros. Returns the n × filters output
/// and the winning position of each filter.
pub fn char_cnn_forward(
    params: &ModelParams,
    chars: &[Vec<usize>],
    lens: &[usize],
) -> Result<(Array2<f64>, Vec<Vec<usize>>), NetError> {
    let filters = params.conv_w.nrows();
    let kernel = params.conv_w.ncols() / params.char_table.ncols();
    let rows = params.char_table.nrows();
    let mut out = Array2::zeros((chars.len(), filters));
    let mut argmax = Vec::with_capacity(chars.len());
    for (t, (row, &len)) in chars.iter().zip(lens).enumerate() {
        if let Some(&index) = row[..len].iter().find(|&&c| c >= rows) {
            return Err(NetError::IndexOutOfAlphabet { token: t, index });
        }
        let mut best = vec![0; filters];
        let mut best_val = vec![f64::NEG_INFINITY; filters];
        for p in 0..len.max(1) {
            let w = window(&params.char_table, row, len, p, kernel);
            let response = params.conv_w.dot(&w) + &params.conv_b;
            for f in 0..filters {
                if response[f] > best_val[f] {
                    best_val[f] = response[f];
                    best[f] = p;
                }
            }
        }
        out.row_mut(t).assign(&Array1::from(best_val));
        argmax.push(best);
    }
    Ok((out, argmax))
}

/// One LSTM direction over the rows of `x`, starting from zero states.
pub fn lstm_forward(p: &LstmParams, x: ArrayView2<f64>, reverse: bool) -> LstmTrace {
    let n = x.nrows();
    let h = p.hidden();
    let projected = x.dot(&p.w.t()) + &p.b;
    let mut trace = LstmTrace {
        reverse,
        gates: Array2::zeros((n, 4 * h)),
        cells: Array2::zeros((n, h)),
        hidden: Array2::zeros((n, h)),
    };
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::zeros(h);
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        let z = &projected.row(t) + &p.u.dot(&h_prev);
        let mut gates = trace.gates.row_mut(t);
        for j in 0..3 * h {
            gates[j] = sigmoid(z[j]);
        }
        for j in 3 * h..4 * h {
            gates[j] = z[j].tanh();
        }
        let (i, f, o, g) =
            (gates.slice(s![..h]), gates.slice(s![h..2 * h]), gates.slice(s![2 * h..3 * h]), gates.slice(s![3 * h..]));
        let c = &i * &g + &f * &c_prev;
        let hidden = &o * &c.mapv(f64::tanh);
        trace.cells.row_mut(t).assign(&c);
        trace.hidden.row_mut(t).assign(&hidden);
        h_prev = hidden;
        c_prev = c;
    }
    trace
}

/// Forward and backward LSTMs; `H` rows are `[forward_t, backward_t]`.
pub fn bilstm_forward(params: &ModelParams, x: ArrayView2<f64>) -> (Array2<f64>, LstmTrace, LstmTrace) {
    let fwd = lstm_forward(&params.forward, x, false);
    let bwd = lstm_forward(&params.backward, x, true);
    let h = ndarray::concatenate(Axis(1), &[fwd.hidden.view(), bwd.hidden.view()]).expect("equal rows");
    (h, fwd, bwd)
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    s
}

/// Scaled dot-product attention per head with scores divided by
/// sqrt(width of `H`); heads are concatenated column-wise.
pub fn mhsa_forward(params: &ModelParams, h: ArrayView2<f64>) -> Result<(Array2<f64>, AttentionTrace), NetError> {
    let d = h.ncols();
    if params.query.first().is_some_and(|q| q.nrows() != d) {
        return Err(NetError::ShapeMismatch(format!("attention expects width {}, got {d}", params.query[0].nrows())));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut trace = AttentionTrace { queries: vec![], keys: vec![], values: vec![], probs: vec![] };
    let mut heads = Vec::with_capacity(params.query.len());
    for ((wq, wk), wv) in params.query.iter().zip(&params.key).zip(&params.value) {
        let q = h.dot(wq);
        let k = h.dot(wk);
        let v = h.dot(wv);
        let p = softmax_rows(q.dot(&k.t()) * scale);
        heads.push(p.dot(&v));
        trace.queries.push(q);
        trace.keys.push(k);
        trace.values.push(v);
        trace.probs.push(p);
    }
    let views: Vec<_> = heads.iter().map(|a| a.view()).collect();
    let m = ndarray::concatenate(Axis(1), &views).expect("equal rows");
    Ok((m, trace))
}

/// `[H ; M] · W_out + b_out`; returns the concatenated features and scores.
pub fn emission_forward(
    params: &ModelParams,
    h: ArrayView2<f64>,
    m: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>), NetError> {
    let features = ndarray::concatenate(Axis(1), &[h, m])
        .map_err(|_| NetError::ShapeMismatch("H and M row counts differ".into()))?;
    if features.ncols() != params.out_w.nrows() {
        return Err(NetError::ShapeMismatch(format!(
            "emission expects width {}, got {}",
            params.out_w.nrows(),
            features.ncols()
        )));
    }
    let scores = features.dot(&params.out_w) + &params.out_b;
    Ok((features, scores))
}

fn lstm_backward(
    p: &LstmParams,
    trace: &LstmTrace,
    x: ArrayView2<f64>,
    d_hidden: ArrayView2<f64>,
    grad: &mut LstmParams,
) -> Array2<f64> {
    let n = x.nrows();
    let h = p.hidden();
    let mut dz = Array2::zeros((n, 4 * h));
    let mut h_prev_rows = Array2::zeros((n, h));
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);
    for step in (0..n).rev() {
        let t = if trace.reverse { n - 1 - step } else { step };
        let gates = trace.gates.row(t);
        let (i, f, o, g) =
            (gates.slice(s![..h]), gates.slice(s![h..2 * h]), gates.slice(s![2 * h..3 * h]), gates.slice(s![3 * h..]));
        let prev = trace.previous(t);
        let c_prev = prev.map_or_else(|| Array1::zeros(h), |q| trace.cells.row(q).to_owned());
        if let Some(q) = prev {
            h_prev_rows.row_mut(t).assign(&trace.hidden.row(q));
        }
        let tanh_c = trace.cells.row(t).mapv(f64::tanh);
        let dh = &d_hidden.row(t) + &dh_next;
        let d_o = &dh * &tanh_c;
        let dc = &dh * &o * &tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
        let mut row = dz.row_mut(t);
        for j in 0..h {
            row[j] = dc[j] * g[j] * i[j] * (1.0 - i[j]);
            row[h + j] = dc[j] * c_prev[j] * f[j] * (1.0 - f[j]);
            row[2 * h + j] = d_o[j] * o[j] * (1.0 - o[j]);
            row[3 * h + j] = dc[j] * i[j] * (1.0 - g[j] * g[j]);
        }
        dc_next = &dc * &f;
        dh_next = p.u.t().dot(&row);
    }
    grad.w += &dz.t().dot(&x);
    grad.u += &dz.t().dot(&h_prev_rows);
    grad.b += &dz.sum_axis(Axis(0));
    dz.dot(&p.w)
}

/// Model: dimensions, character vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub dims: Dims,
    pub chars: CharVocab,
    pub params: ModelParams,
}

impl Tagger {
    /// Random initial parameters: character rows uniform in ±sqrt(3 / dim),
    /// matrices Glorot-uniform, biases and transitions zero.
    pub fn new(dims: Dims, chars: CharVocab, seed: u64) -> Result<Self, NetError> {
        dims.validate()?;
        let mut params = ModelParams::zeros(&dims, chars.rows());
        params.char_table = init_char_table(&chars, dims.char_dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut glorot = |a: &mut Array2<f64>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            a.mapv_inplace(|_| dist.sample(&mut rng));
        };
        glorot(&mut params.conv_w, dims.kernel * dims.char_dim, dims.char_filters);
        for p in [&mut params.forward, &mut params.backward] {
            glorot(&mut p.w, dims.input_width(), dims.lstm_hidden);
            glorot(&mut p.u, dims.lstm_hidden, dims.lstm_hidden);
        }
        for i in 0..dims.heads {
            glorot(&mut params.query[i], dims.hidden_width(), dims.head_size);
            glorot(&mut params.key[i], dims.hidden_width(), dims.head_size);
            glorot(&mut params.value[i], dims.hidden_width(), dims.head_size);
        }
        glorot(&mut params.out_w, dims.feature_width(), dims.n_tags);
        Ok(Tagger { dims, chars, params })
    }

    fn check_bundle(&self, bundle: &InputBundle) -> Result<(), NetError> {
        if bundle.is_empty() {
            return Err(NetError::ShapeMismatch("empty sentence".into()));
        }
        if bundle.words.ncols() != self.dims.word_dim || bundle.context.ncols() != self.dims.ctx_dim {
            return Err(NetError::ShapeMismatch(format!(
                "inputs have word/context widths {}/{}, model expects {}/{}",
                bundle.words.ncols(),
                bundle.context.ncols(),
                self.dims.word_dim,
                self.dims.ctx_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, bundle: &InputBundle, masks: Option<&DropoutMasks>) -> Result<ForwardTrace, NetError> {
        self.check_bundle(bundle)?;
        let (char_vecs, char_argmax) = char_cnn_forward(&self.params, &bundle.chars, &bundle.char_lens)?;
        let mut input = ndarray::concatenate(Axis(1), &[bundle.words.view(), char_vecs.view(), bundle.context.view()])
            .expect("equal rows");
        if let Some(m) = masks {
            input *= &m.input;
        }
        let (mut hidden, forward, backward) = bilstm_forward(&self.params, input.view());
        if let Some(m) = masks {
            hidden *= &m.hidden;
        }
        let (m, attention) = mhsa_forward(&self.params, hidden.view())?;
        let (features, emissions) = emission_forward(&self.params, hidden.view(), m.view())?;
        Ok(ForwardTrace { char_argmax, input, forward, backward, hidden, attention, features, emissions })
    }

    pub fn emissions(&self, bundle: &InputBundle) -> Result<Array2<f64>, NetError> {
        Ok(self.forward(bundle, None)?.emissions)
    }

    /// Viterbi tag indices for one sentence.
    pub fn predict(&self, bundle: &InputBundle) -> Result<Vec<usize>, NetError> {
        let e = self.emissions(bundle)?;
        Ok(crf::viterbi(e.view(), self.params.transitions.view())?)
    }

    /// Gradients of every parameter given the gradient of the loss with
    /// respect to the emission scores. Transitions get no gradient here.
    pub fn backward(
        &self,
        bundle: &InputBundle,
        trace: &ForwardTrace,
        masks: Option<&DropoutMasks>,
        d_emissions: ArrayView2<f64>,
    ) -> ModelParams {
        let p = &self.params;
        let dims = &self.dims;
        let mut grad = p.zeros_like();
        let d = dims.hidden_width();
        let hd = dims.lstm_hidden;

        grad.out_w = trace.features.t().dot(&d_emissions);
        grad.out_b = d_emissions.sum_axis(Axis(0));
        let d_features = d_emissions.dot(&p.out_w.t());
        let mut d_hidden = d_features.slice(s![.., ..d]).to_owned();

        let scale = 1.0 / (d as f64).sqrt();
        let h = trace.hidden.view();
        for i in 0..dims.heads {
            let att = &trace.attention;
            let d_head = d_features.slice(s![.., d + i * dims.head_size..d + (i + 1) * dims.head_size]);
            let probs = &att.probs[i];
            let d_probs = d_head.dot(&att.values[i].t());
            let d_values = probs.t().dot(&d_head);
            let row_dot = (&d_probs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = (probs * &(&d_probs - &row_dot)) * scale;
            let d_queries = d_scores.dot(&att.keys[i]);
            let d_keys = d_scores.t().dot(&att.queries[i]);
            grad.query[i] = h.t().dot(&d_queries);
            grad.key[i] = h.t().dot(&d_keys);
            grad.value[i] = h.t().dot(&d_values);
            d_hidden += &d_queries.dot(&p.query[i].t());
            d_hidden += &d_keys.dot(&p.key[i].t());
            d_hidden += &d_values.dot(&p.value[i].t());
        }
        if let Some(m) = masks {
            d_hidden *= &m.hidden;
        }

        let x = trace.input.view();
        let mut d_input = lstm_backward(&p.forward, &trace.forward, x, d_hidden.slice(s![.., ..hd]), &mut grad.forward);
        d_input += &lstm_backward(&p.backward, &trace.backward, x, d_hidden.slice(s![.., hd..]), &mut grad.backward);
        if let Some(m) = masks {
            d_input *= &m.input;
        }

        let d_chars = d_input.slice(s![.., dims.word_dim..dims.word_dim + dims.char_filters]);
        let cd = dims.char_dim;
        let half = dims.kernel / 2;
        for (t, (row, &len)) in bundle.chars.iter().zip(&bundle.char_lens).enumerate() {
            for f in 0..dims.char_filters {
                let g = d_chars[[t, f]];
                if g == 0.0 {
                    continue;
                }
                let pos = trace.char_argmax[t][f];
                let w = window(&p.char_table, row, len, pos, dims.kernel);
                grad.conv_w.row_mut(f).scaled_add(g, &w);
                grad.conv_b[f] += g;
                for o in 0..dims.kernel {
                    let q = pos as isize + o as isize - half as isize;
                    if q >= 0 && (q as usize) < len {
                        let weights = p.conv_w.slice(s![f, o * cd..(o + 1) * cd]);
                        grad.char_table.row_mut(row[q as usize]).scaled_add(g, &weights);
                    }
                }
            }
        }
        grad.char_table.row_mut(PAD_INDEX).fill(0.0);
        grad
    }

    /// CRF negative log-likelihood of `gold` and gradients of every parameter.
    pub fn loss_and_grad(
        &self,
        bundle: &InputBundle,
        gold: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, ModelParams), NetError> {
        let trace = self.forward(bundle, masks)?;
        let crf = crf::nll_and_grad(trace.emissions.view(), self.params.transitions.view(), gold)?;
        let mut grad = self.backward(bundle, &trace, masks, crf.d_emissions.view());
        grad.transitions = crf.d_transitions;
        Ok((crf.loss, grad))
    }

    pub fn loss(&self, bundle: &InputBundle, gold: &[usize], masks: Option<&DropoutMasks>) -> Result<f64, NetError> {
        let e = self.forward(bundle, masks)?.emissions;
        Ok(crf::nll_and_grad(e.view(), self.params.transitions.view(), gold)?.loss)
    }

    pub fn save<W: Write>(&self, mut out: W) -> io::Result<()> {
        let d = &self.dims;
        out.write_all(CHECKPOINT_MAGIC)?;
        let header = [
            CHECKPOINT_VERSION,
            d.word_dim as u32,
            d.ctx_dim as u32,
            d.char_dim as u32,
            d.char_filters as u32,
            d.kernel as u32,
            d.lstm_hidden as u32,
            d.heads as u32,
            d.head_size as u32,
            d.n_tags as u32,
            self.chars.alphabet().len() as u32,
        ];
        for v in header {
            out.write_all(&v.to_le_bytes())?;
        }
        for &c in self.chars.alphabet() {
            out.write_all(&(c as u32).to_le_bytes())?;
        }
        for (_, tensor) in self.params.tensors() {
            for v in tensor {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self, NetError> {
        let mut magic = [0u8; 4];
        source.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("missing SCFM magic".into()));
        }
        let mut word = || -> Result<usize, NetError> {
            let mut b = [0u8; 4];
            source.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = word()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(NetError::Checkpoint(format!("unsupported version {version}")));
        }
        let dims = Dims {
            word_dim: word()?,
            ctx_dim: word()?,
            char_dim: word()?,
            char_filters: word()?,
            kernel: word()?,
            lstm_hidden: word()?,
            heads: word()?,
            head_size: word()?,
            n_tags: word()?,
        };
        dims.validate()?;
        let n_chars = word()?;
        let alphabet = (0..n_chars)
            .map(|_| {
                let code = word()? as u32;
                char::from_u32(code).ok_or_else(|| NetError::Checkpoint(format!("bad code point {code}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let chars = CharVocab::new(alphabet);
        if chars.alphabet().len() != n_chars {
            return Err(NetError::Checkpoint("repeated character in alphabet".into()));
        }
        let mut params = ModelParams::zeros(&dims, chars.rows());
        for tensor in params.tensors_mut() {
            let mut bytes = vec![0u8; tensor.len() * 8];
            source.read_exact(&mut bytes)?;
            for (v, b) in tensor.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
        }
        let mut rest = [0u8; 1];
        if source.read(&mut rest)? != 0 {
            return Err(NetError::Checkpoint("trailing bytes".into()));
        }
        Ok(Tagger { dims, chars, params })
    }
}

/// Relative error `|a - n| / max(|a|, |n|)` per tensor between analytic
/// gradients and central differences of `loss`.
pub fn gradient_check(
    tagger: &Tagger,
    bundle: &InputBundle,
    gold: &[usize],
    masks: Option<&DropoutMasks>,
    step: f64,
) -> Result<Vec<(String, f64)>, NetError> {
    let (_, analytic) = tagger.loss_and_grad(bundle, gold, masks)?;
    let mut probe = tagger.clone();
    let mut report = Vec::new();
    let names: Vec<String> = analytic.tensors().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.into_iter().enumerate() {
        let len = analytic.tensors()[k].1.len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let original = probe.params.tensors_mut()[k][j];
            probe.params.tensors_mut()[k][j] = original + step;
            let plus = probe.loss(bundle, gold, masks)?;
            probe.params.tensors_mut()[k][j] = original - step;
            let minus = probe.loss(bundle, gold, masks)?;
            probe.params.tensors_mut()[k][j] = original;
            *slot = (plus - minus) / (2.0 * step);
        }
        let exact = analytic.tensors()[k].1;
        // padding row of the char table is frozen; its true gradient is
        // excluded by zeroing the numeric estimate as well
        if k == 0 {
            numeric[..tagger.dims.char_dim].fill(0.0);
        }
        let diff: f64 = exact.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        report.push((name, diff / na.max(nn).max(1e-12)));
    }
    Ok(report)
}

/// Row-sum deviation of the attention weights from 1, over all heads.
pub fn attention_row_error(trace: &AttentionTrace) -> f64 {
    trace
        .probs
        .iter()
        .flat_map(|p| p.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[doc(hidden)]
pub fn tiny_dims() -> Dims {
    Dims {
        word_dim: 3,
        ctx_dim: 2,
        char_dim: 3,
        char_filters: 2,
        kernel: 3,
        lstm_hidden: 2,
        heads: 2,
        head_size: 2,
        n_tags: 7,
    }
}

#[doc(hidden)]
pub fn random_bundle(n: usize, dims: &Dims, chars: &CharVocab, seed: u64) -> InputBundle {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = Array2::from_shape_simple_fn((n, dims.word_dim), || rng.gen_range(-1.0..1.0));
    let context = Array2::from_shape_simple_fn((n, dims.ctx_dim), || rng.gen_range(-1.0..1.0));
    let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
    let width = lens.iter().copied().max().unwrap_or(0);
    let rows = chars.rows();
    let char_rows = lens
        .iter()
        .map(|&len| {
            let mut r: Vec<usize> = (0..len).map(|_| rng.gen_range(1..rows)).collect();
            r.resize(width, PAD_INDEX);
            r
        })
        .collect();
    InputBundle { words, context, chars: char_rows, char_lens: lens }
}

#[doc(hidden)]
pub fn random_masks(dims: &Dims, seed: u64) -> DropoutMasks {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| Array1::from_shape_simple_fn(n, || if rng.gen_bool(0.5) { 2.0 } else { 0.0 });
    DropoutMasks { input: draw(dims.input_width()), hidden: draw(dims.hidden_width()) }
}
