//! Neural building blocks: word and character embeddings, bidirectional
//! LSTM encoders, and the intent classification head.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Reserved embedding rows.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Uniform Glorot limit for a [rows x cols] matrix.
pub fn glorot_limit(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

pub fn uniform_tensor(rng: &mut impl Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(rows, cols, data)
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Rows init uniform in +-sqrt(3/dim); the PAD row is zero and frozen.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (3.0 / dim as f64).sqrt();
        let mut weights = uniform_tensor(rng, vocab_size, dim, limit);
        for c in 0..dim {
            weights.set(PAD_ID, c, 0.0);
        }
        let weights = store.add(name, weights, trainable);
        store.freeze_rows(weights, &[PAD_ID]);
        EmbeddingTable { weights, vocab_size, dim }
    }

    /// Gather rows for the given ids as a `[len x dim]` leaf.
    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        for &id in ids {
            assert!(
                id < self.vocab_size,
                "vocab error: id {id} out of range for table of {} rows",
                self.vocab_size
            );
        }
        tape.param_rows(store, self.weights, ids)
    }
}

/// One direction's gate parameters: `pre = x @ wx + h @ wh + b`, gate order
/// (input, forget, cell, output) along the columns.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Glorot-uniform gate weights; biases zero except the forget gate at 1.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lim_x = glorot_limit(input_dim, 4 * hidden);
        let lim_h = glorot_limit(hidden, 4 * hidden);
        let wx =
            store.add(format!("{name}.wx"), uniform_tensor(rng, input_dim, 4 * hidden, lim_x), true);
        let wh =
            store.add(format!("{name}.wh"), uniform_tensor(rng, hidden, 4 * hidden, lim_h), true);
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for c in hidden..2 * hidden {
            bias.set(0, c, 1.0);
        }
        let b = store.add(format!("{name}.b"), bias, true);
        LstmCell { wx, wh, b, input_dim, hidden }
    }

    /// One recurrence step; returns (h, c).
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> (Var, Var) {
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let b = tape.param(store, self.b);
        let from_x = tape.matmul(x, wx);
        let from_h = tape.matmul(h_prev, wh);
        let lin = tape.add(from_x, from_h);
        let pre = tape.add(lin, b);
        let h = self.hidden;
        let i_pre = tape.slice_cols(pre, 0, h);
        let f_pre = tape.slice_cols(pre, h, h);
        let g_pre = tape.slice_cols(pre, 2 * h, h);
        let o_pre = tape.slice_cols(pre, 3 * h, h);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c_prev);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let c_act = tape.tanh(c);
        let h_out = tape.mul(o, c_act);
        (h_out, c)
    }
}

/// Bidirectional LSTM; per-token output width is `2 * hidden`.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmEncoder {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstmEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fwd = LstmCell::new(store, &format!("{name}.fwd"), input_dim, hidden, rng);
        let bwd = LstmCell::new(store, &format!("{name}.bwd"), input_dim, hidden, rng);
        BiLstmEncoder { fwd, bwd, input_dim, hidden }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Run a BiLSTM over the unmasked prefix of `x` (`[T x d]`).
///
/// Returns per-token states `H [T x 2h]` (zero rows at masked positions) and
/// the sentence representation: last real forward state joined with the
/// first-position backward state.
pub fn bilstm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &BiLstmEncoder,
    x: Var,
    mask: &[bool],
) -> (Var, Var) {
    let t_max = tape.value(x).rows();
    assert_eq!(mask.len(), t_max, "dimension error: mask length {} vs {} rows", mask.len(), t_max);
    assert_eq!(
        tape.value(x).cols(),
        enc.input_dim,
        "dimension error: encoder input width {} vs {}",
        tape.value(x).cols(),
        enc.input_dim
    );
    let len = mask.iter().take_while(|&&m| m).count();
    assert!(
        mask.iter().skip(len).all(|&m| !m),
        "contract error: mask must be a contiguous prefix"
    );
    assert!(len >= 1, "contract error: all-pad input to bilstm_forward");

    let h = enc.hidden;
    let zero_state = tape.constant(Tensor::zeros(1, h));

    let mut fwd_states = Vec::with_capacity(len);
    let (mut hs, mut cs) = (zero_state, zero_state);
    for t in 0..len {
        let xt = tape.slice_rows(x, t, 1);
        let (nh, nc) = enc.fwd.step(tape, store, xt, hs, cs);
        fwd_states.push(nh);
        hs = nh;
        cs = nc;
    }

    let mut bwd_states = vec![zero_state; len];
    let (mut hs, mut cs) = (zero_state, zero_state);
    for t in (0..len).rev() {
        let xt = tape.slice_rows(x, t, 1);
        let (nh, nc) = enc.bwd.step(tape, store, xt, hs, cs);
        bwd_states[t] = nh;
        hs = nh;
        cs = nc;
    }

    let mut rows = Vec::with_capacity(t_max);
    for t in 0..len {
        rows.push(tape.cat_cols(&[fwd_states[t], bwd_states[t]]));
    }
    if len < t_max {
        let pad = tape.constant(Tensor::zeros(t_max - len, 2 * h));
        rows.push(pad);
    }
    let states = tape.cat_rows(&rows);
    let sentence_rep = tape.cat_cols(&[fwd_states[len - 1], bwd_states[0]]);
    (states, sentence_rep)
}

/// Fully-connected layer producing pre-softmax intent scores.
#[derive(Debug, Clone, Copy)]
pub struct IntentHead {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub classes: usize,
}

impl IntentHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lim = glorot_limit(input_dim, classes);
        let w = store.add(format!("{name}.w"), uniform_tensor(rng, input_dim, classes, lim), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, classes), true);
        IntentHead { w, b, input_dim, classes }
    }

    /// Pre-softmax scores `[1 x classes]` for a sentence representation.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, sentence_rep: Var) -> Var {
        assert_eq!(
            tape.value(sentence_rep).cols(),
            self.input_dim,
            "dimension error: intent head expects width {}, got {}",
            self.input_dim,
            tape.value(sentence_rep).cols()
        );
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let scores = tape.matmul(sentence_rep, w);
        tape.add(scores, b)
    }
}

/// Cross-entropy of a single gold class against `[1 x C]` logits,
/// computed as log-sum-exp minus the gold logit.
pub fn cross_entropy(tape: &mut Tape, logits: Var, gold: usize) -> Var {
    let classes = tape.value(logits).cols();
    assert!(gold < classes, "contract error: gold class {gold} out of {classes}");
    let lse = tape.lse_rows(logits);
    let picked = tape.gather_sum(logits, &[(0, gold)]);
    tape.sub(lse, picked)
}

/// Index of the largest value in a `[1 x C]` tensor (lowest index on ties).
pub fn argmax_row(t: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in t.values().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Per-token embedding: word vector joined with the char-BiLSTM sentence
/// representation of the token's characters. Output is `[T x (dw + 2hc)]`.
pub fn embed_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    word_ids: &[usize],
    char_ids: &[Vec<usize>],
    word_table: &EmbeddingTable,
    char_table: &EmbeddingTable,
    char_encoder: &BiLstmEncoder,
) -> Var {
    assert!(!word_ids.is_empty(), "contract error: empty token sequence");
    assert_eq!(
        word_ids.len(),
        char_ids.len(),
        "contract error: {} tokens vs {} char sequences",
        word_ids.len(),
        char_ids.len()
    );
    let word_vecs = word_table.lookup(tape, store, word_ids);
    let mut rows = Vec::with_capacity(word_ids.len());
    for (t, chars) in char_ids.iter().enumerate() {
        assert!(!chars.is_empty(), "contract error: token {t} has no characters");
        let char_vecs = char_table.lookup(tape, store, chars);
        let mask = vec![true; chars.len()];
        let (_, char_rep) = bilstm_forward(tape, store, char_encoder, char_vecs, &mask);
        let word_vec = tape.slice_rows(word_vecs, t, 1);
        rows.push(tape.cat_cols(&[word_vec, char_rep]));
    }
    tape.cat_rows(&rows)
}
