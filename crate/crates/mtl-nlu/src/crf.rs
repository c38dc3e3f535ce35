//! Linear-chain CRF slot decoder: emission projection, sequence scoring,
//! log-partition via the forward recursion, negative log-likelihood, and
//! Viterbi decoding.
//!
//! Transitions use two virtual boundary states appended after the K real
//! tags: START = K, STOP = K + 1. Transitions into START and out of STOP are
//! pinned at -1e4 and frozen out of gradient updates.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::layers::{glorot_limit, uniform_tensor};
use crate::tensor::Tensor;

/// Score assigned to impossible boundary transitions.
pub const IMPOSSIBLE: f64 = -1e4;

#[derive(Debug, Clone, Copy)]
pub struct CrfParams {
    /// Emission projection `[input_dim x K]` plus per-tag bias.
    pub proj: ParamId,
    pub proj_bias: ParamId,
    /// `[(K+2) x (K+2)]`; entry (i, j) scores the transition i -> j.
    pub transitions: ParamId,
    pub input_dim: usize,
    pub tags: usize,
}

impl CrfParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        tags: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(tags >= 1, "contract error: CRF needs at least one tag");
        let lim = glorot_limit(input_dim, tags);
        let proj =
            store.add(format!("{name}.proj"), uniform_tensor(rng, input_dim, tags, lim), true);
        let proj_bias = store.add(format!("{name}.proj_bias"), Tensor::zeros(1, tags), true);

        let k2 = tags + 2;
        let mut trans = uniform_tensor(rng, k2, k2, 0.1);
        let start = tags;
        let stop = tags + 1;
        let mut frozen = Vec::new();
        for i in 0..k2 {
            trans.set(i, start, IMPOSSIBLE);
            frozen.push((i, start));
            trans.set(stop, i, IMPOSSIBLE);
            frozen.push((stop, i));
        }
        let transitions = store.add(format!("{name}.trans"), trans, true);
        store.freeze_elems(transitions, &frozen);

        CrfParams { proj, proj_bias, transitions, input_dim, tags }
    }

    pub fn start(&self) -> usize {
        self.tags
    }

    pub fn stop(&self) -> usize {
        self.tags + 1
    }

    /// Per-token tag scores `[T x K]` from decoder states `[T x input_dim]`.
    pub fn emissions(&self, tape: &mut Tape, store: &ParamStore, states: Var) -> Var {
        let proj = tape.param(store, self.proj);
        let bias = tape.param(store, self.proj_bias);
        let scores = tape.matmul(states, proj);
        tape.add_row_vec(scores, bias)
    }
}

fn check_tags(tags: &[usize], k: usize) {
    assert!(!tags.is_empty(), "contract error: empty tag sequence");
    for &t in tags {
        assert!(t < k, "contract error: tag id {t} out of {k}");
    }
}

/// Emission + transition score of one tag path, including the virtual
/// START -> first and last -> STOP boundary transitions.
pub fn sequence_score(tape: &mut Tape, emissions: Var, transitions: Var, tags: &[usize]) -> Var {
    let k = tape.value(emissions).cols();
    let len = tape.value(emissions).rows();
    check_tags(tags, k);
    assert_eq!(tags.len(), len, "contract error: {} tags for {len} tokens", tags.len());

    let emit_coords: Vec<(usize, usize)> = tags.iter().enumerate().map(|(t, &y)| (t, y)).collect();
    let emit = tape.gather_sum(emissions, &emit_coords);

    let start = k;
    let stop = k + 1;
    let mut trans_coords = Vec::with_capacity(len + 1);
    trans_coords.push((start, tags[0]));
    for w in tags.windows(2) {
        trans_coords.push((w[0], w[1]));
    }
    trans_coords.push((tags[len - 1], stop));
    let trans = tape.gather_sum(transitions, &trans_coords);

    tape.add(emit, trans)
}

/// log of the summed exponentiated scores of all K^T tag sequences,
/// computed by the forward recursion with log-sum-exp at each step.
pub fn log_partition(tape: &mut Tape, emissions: Var, transitions: Var) -> Var {
    let (len, k) = tape.value(emissions).shape();
    assert!(len >= 1 && k >= 1, "contract error: empty emissions");
    let start = k;
    let stop = k + 1;

    // alpha_0 = emissions[0] + trans[START, 0..K]
    let start_row = tape.slice_rows(transitions, start, 1);
    let start_scores = tape.slice_cols(start_row, 0, k);
    let e0 = tape.slice_rows(emissions, 0, 1);
    let mut alpha = tape.add(e0, start_scores);

    let inner = tape.slice_rows(transitions, 0, k);
    let inner = tape.slice_cols(inner, 0, k);

    for t in 1..len {
        // scores[i, j] = alpha[i] + trans[i, j]; reduce over i
        let alpha_col = tape.transpose(alpha);
        let scored = tape.add_col_vec(inner, alpha_col);
        let reduced = tape.lse_cols(scored);
        let et = tape.slice_rows(emissions, t, 1);
        alpha = tape.add(reduced, et);
    }

    let stop_col = tape.slice_cols(transitions, stop, 1);
    let stop_scores = tape.slice_rows(stop_col, 0, k);
    let stop_row = tape.transpose(stop_scores);
    let terminal = tape.add(alpha, stop_row);
    tape.lse_rows(terminal)
}

/// Sequence negative log-likelihood: log-partition minus the gold score.
pub fn crf_nll(tape: &mut Tape, emissions: Var, transitions: Var, gold: &[usize]) -> Var {
    let log_z = log_partition(tape, emissions, transitions);
    let gold_score = sequence_score(tape, emissions, transitions, gold);
    tape.sub(log_z, gold_score)
}

/// Max-scoring tag sequence and its score, on plain values.
///
/// Runs the max recursion backward over suffixes and then selects greedily
/// from the front, preferring the lower tag index at equal scores; this
/// yields the lexicographically smallest maximizer.
pub fn viterbi_decode(emissions: &Tensor, transitions: &Tensor) -> (Vec<usize>, f64) {
    let (len, k) = emissions.shape();
    assert!(len >= 1 && k >= 1, "contract error: empty emissions");
    let start = k;
    let stop = k + 1;

    // suffix[t][j]: best score of positions t.. given tag j at t
    let mut suffix = vec![vec![0.0; k]; len];
    for j in 0..k {
        suffix[len - 1][j] = emissions.at(len - 1, j) + transitions.at(j, stop);
    }
    for t in (0..len - 1).rev() {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            for n in 0..k {
                let v = transitions.at(j, n) + suffix[t + 1][n];
                if v > best {
                    best = v;
                }
            }
            suffix[t][j] = emissions.at(t, j) + best;
        }
    }

    let mut tags = Vec::with_capacity(len);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_tag = 0;
    for j in 0..k {
        let v = transitions.at(start, j) + suffix[0][j];
        if v > best_score {
            best_score = v;
            best_tag = j;
        }
    }
    tags.push(best_tag);
    for t in 1..len {
        let prev = tags[t - 1];
        let mut best = f64::NEG_INFINITY;
        let mut pick = 0;
        for j in 0..k {
            let v = transitions.at(prev, j) + suffix[t][j];
            if v > best {
                best = v;
                pick = j;
            }
        }
        tags.push(pick);
    }
    (tags, best_score)
}

/// Plain-value path score; mirrors `sequence_score` for decoded output.
pub fn score_tags(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> f64 {
    let k = emissions.cols();
    check_tags(tags, k);
    let mut score = transitions.at(k, tags[0]);
    for (t, &y) in tags.iter().enumerate() {
        score += emissions.at(t, y);
    }
    for w in tags.windows(2) {
        score += transitions.at(w[0], w[1]);
    }
    score + transitions.at(tags[tags.len() - 1], k + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// All K^T tag sequences in lexicographic order.
    fn enumerate_sequences(len: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            let mut next = Vec::new();
            for seq in &out {
                for tag in 0..k {
                    let mut s = seq.clone();
                    s.push(tag);
                    next.push(s);
                }
            }
            out = next;
        }
        out
    }

    fn random_instance(rng: &mut ChaCha8Rng, len: usize, k: usize) -> (Tensor, Tensor) {
        let emissions = uniform_tensor(rng, len, k, 2.0);
        let mut trans = uniform_tensor(rng, k + 2, k + 2, 1.0);
        for i in 0..k + 2 {
            trans.set(i, k, IMPOSSIBLE);
            trans.set(k + 1, i, IMPOSSIBLE);
        }
        (emissions, trans)
    }

    #[test]
    fn single_step_score() {
        let mut tape = Tape::new();
        let emissions = tape.leaf(Tensor::new(1, 2, vec![0.5, -0.3]), false);
        let trans = tape.leaf(Tensor::zeros(4, 4), false);
        let s = sequence_score(&mut tape, emissions, trans, &[0]);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn zero_params_score_zero() {
        let mut tape = Tape::new();
        let emissions = tape.leaf(Tensor::zeros(3, 2), false);
        let trans = tape.leaf(Tensor::zeros(4, 4), false);
        for tags in enumerate_sequences(3, 2) {
            let s = sequence_score(&mut tape, emissions, trans, &tags);
            assert_eq!(tape.value(s).item(), 0.0);
        }
    }

    #[test]
    fn random_score_matches_hand_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (emissions, trans) = random_instance(&mut rng, 4, 3);
        let tags = [2, 0, 1, 1];

        let mut expected = trans.at(3, 2);
        expected +=
            emissions.at(0, 2) + emissions.at(1, 0) + emissions.at(2, 1) + emissions.at(3, 1);
        expected += trans.at(2, 0) + trans.at(0, 1) + trans.at(1, 1);
        expected += trans.at(1, 4);

        let mut tape = Tape::new();
        let e = tape.leaf(emissions, false);
        let t = tape.leaf(trans, false);
        let s = sequence_score(&mut tape, e, t, &tags);
        assert!((tape.value(s).item() - expected).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "contract error")]
    fn tag_out_of_range_rejected() {
        let mut tape = Tape::new();
        let emissions = tape.leaf(Tensor::zeros(1, 2), false);
        let trans = tape.leaf(Tensor::zeros(4, 4), false);
        sequence_score(&mut tape, emissions, trans, &[2]);
    }

    #[test]
    fn uniform_partitions() {
        // zero params: every sequence scores 0, so log Z = T * log K
        for (len, k, expect) in
            [(1, 2, 2.0f64.ln()), (2, 2, 4.0f64.ln()), (3, 2, 3.0 * 2.0f64.ln())]
        {
            let mut tape = Tape::new();
            let e = tape.leaf(Tensor::zeros(len, k), false);
            let t = tape.leaf(Tensor::zeros(k + 2, k + 2), false);
            let z = log_partition(&mut tape, e, t);
            assert!((tape.value(z).item() - expect).abs() < 1e-12, "T={len} K={k}");
        }
    }

    #[test]
    fn partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for case in 0..30 {
            let len = 1 + (case % 5);
            let k = 1 + (case % 4);
            let (emissions, trans) = random_instance(&mut rng, len, k);

            let mut brute = Vec::new();
            for tags in enumerate_sequences(len, k) {
                brute.push(score_tags(&emissions, &trans, &tags));
            }
            let expected = crate::autograd::log_sum_exp_slice(&brute);

            let mut tape = Tape::new();
            let e = tape.leaf(emissions, false);
            let t = tape.leaf(trans, false);
            let z = log_partition(&mut tape, e, t);
            assert!(
                (tape.value(z).item() - expected).abs() < 1e-8,
                "partition mismatch at T={len} K={k}"
            );
        }
    }

    #[test]
    fn nll_degenerate_tagset_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (emissions, trans) = random_instance(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let e = tape.leaf(emissions, false);
        let t = tape.leaf(trans, false);
        let nll = crf_nll(&mut tape, e, t, &[0, 0, 0, 0]);
        assert!(tape.value(nll).item().abs() < 1e-10);
    }

    #[test]
    fn nll_uniform_case() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::zeros(3, 2), false);
        let t = tape.leaf(Tensor::zeros(4, 4), false);
        let nll = crf_nll(&mut tape, e, t, &[1, 0, 1]);
        assert!((tape.value(nll).item() - 3.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_enumerated_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (emissions, trans) = random_instance(&mut rng, 3, 3);
        let gold = [1, 2, 0];

        let scores: Vec<f64> = enumerate_sequences(3, 3)
            .iter()
            .map(|tags| score_tags(&emissions, &trans, tags))
            .collect();
        let log_z = crate::autograd::log_sum_exp_slice(&scores);
        let gold_prob = (score_tags(&emissions, &trans, &gold) - log_z).exp();

        let mut tape = Tape::new();
        let e = tape.leaf(emissions, false);
        let t = tape.leaf(trans, false);
        let nll = crf_nll(&mut tape, e, t, &gold);
        assert!((tape.value(nll).item() + gold_prob.ln()).abs() < 1e-8);
        assert!(tape.value(nll).item() >= 0.0);
    }

    #[test]
    fn sequence_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (emissions, trans) = random_instance(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let e = tape.leaf(emissions.clone(), false);
        let t = tape.leaf(trans.clone(), false);
        let z = log_partition(&mut tape, e, t);
        let log_z = tape.value(z).item();
        let total: f64 = enumerate_sequences(4, 3)
            .iter()
            .map(|tags| (score_tags(&emissions, &trans, tags) - log_z).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn viterbi_zero_transitions_is_per_token_argmax() {
        let emissions = Tensor::new(3, 3, vec![0.1, 0.9, 0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 1.0]);
        let trans = Tensor::zeros(5, 5);
        let (tags, score) = viterbi_decode(&emissions, &trans);
        assert_eq!(tags, vec![1, 0, 2]);
        assert!((score - (0.9 + 2.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn viterbi_single_tag() {
        let emissions = Tensor::new(4, 1, vec![0.3, -0.1, 0.7, 0.2]);
        let trans = Tensor::zeros(3, 3);
        let (tags, _) = viterbi_decode(&emissions, &trans);
        assert_eq!(tags, vec![0, 0, 0, 0]);
    }

    #[test]
    fn viterbi_matches_brute_force_with_lexicographic_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for case in 0..40 {
            let len = 1 + (case % 5);
            let k = 1 + (case % 4);
            let (mut emissions, trans) = random_instance(&mut rng, len, k);
            if case % 3 == 0 {
                // flatten emissions to provoke ties
                emissions.fill(0.25);
            }

            let mut best_tags: Option<Vec<usize>> = None;
            let mut best = f64::NEG_INFINITY;
            for tags in enumerate_sequences(len, k) {
                let s = score_tags(&emissions, &trans, &tags);
                if s > best + 1e-12 {
                    best = s;
                    best_tags = Some(tags);
                }
            }

            let (tags, score) = viterbi_decode(&emissions, &trans);
            assert_eq!(tags, best_tags.unwrap(), "case {case}");
            assert!((score - best).abs() < 1e-9);
            assert!((score_tags(&emissions, &trans, &tags) - score).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_dominates_every_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (emissions, trans) = random_instance(&mut rng, 5, 3);
        let (_, best) = viterbi_decode(&emissions, &trans);
        for tags in enumerate_sequences(5, 3) {
            assert!(best >= score_tags(&emissions, &trans, &tags) - 1e-12);
        }
    }

    #[test]
    fn constant_emission_shift_preserves_argmax_and_shifts_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (emissions, trans) = random_instance(&mut rng, 4, 3);
        let c = 1.7;
        let mut shifted = emissions.clone();
        shifted.values_mut().iter_mut().for_each(|v| *v += c);

        let (tags_a, _) = viterbi_decode(&emissions, &trans);
        let (tags_b, _) = viterbi_decode(&shifted, &trans);
        assert_eq!(tags_a, tags_b);

        let log_z = |e: Tensor, t: Tensor| {
            let mut tape = Tape::new();
            let e = tape.leaf(e, false);
            let t = tape.leaf(t, false);
            let z = log_partition(&mut tape, e, t);
            tape.value(z).item()
        };
        let za = log_z(emissions, trans.clone());
        let zb = log_z(shifted, trans);
        assert!((zb - za - 4.0 * c).abs() < 1e-9);
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let crf = CrfParams::new(&mut store, "crf", 4, 3, &mut rng);
        let states = store.add("states", uniform_tensor(&mut rng, 3, 4, 1.0), true);
        let gold = [0, 2, 1];

        let loss_fn = |store: &ParamStore| {
            let mut tape = Tape::new();
            let h = tape.param(store, states);
            let emissions = crf.emissions(&mut tape, store, h);
            let trans = tape.param(store, crf.transitions);
            let nll = crf_nll(&mut tape, emissions, trans, &gold);
            tape.value(nll).item()
        };

        let params: Vec<_> = store.ids().collect();
        let mut tape = Tape::new();
        let h = tape.param(&store, states);
        let emissions = crf.emissions(&mut tape, &store, h);
        let trans = tape.param(&store, crf.transitions);
        let nll = crf_nll(&mut tape, emissions, trans, &gold);
        tape.backward(nll);
        store.zero_grads();
        tape.export_grads(&mut store);

        let analytic: Vec<Tensor> = params.iter().map(|&p| store.grad(p).clone()).collect();
        crate::gradcheck::assert_grads_close(&mut store, &params, &analytic, 1e-5, 1e-4, loss_fn);
    }
}
