//! Assembles universe / group / task encoders and per-task decoders into the
//! parallel and serial multi-task architectures, and computes the composite
//! training objective with adversarial and orthogonality terms.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::crf::{self, CrfParams};
use crate::data::TaskRegistry;
use crate::layers::{
    argmax_row, bilstm_forward, cross_entropy, embed_tokens, BiLstmEncoder, EmbeddingTable,
    IntentHead,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    SingleTask,
    ParallelUniv,
    ParallelUnivTask,
    ParallelUnivGroupTask,
    Serial,
    SerialHighway,
    SerialHighwaySwap,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 7] = [
        ArchitectureKind::SingleTask,
        ArchitectureKind::ParallelUniv,
        ArchitectureKind::ParallelUnivTask,
        ArchitectureKind::ParallelUnivGroupTask,
        ArchitectureKind::Serial,
        ArchitectureKind::SerialHighway,
        ArchitectureKind::SerialHighwaySwap,
    ];

    /// The six multi-task arrangements (everything but the single-task baseline).
    pub const MTL: [ArchitectureKind; 6] = [
        ArchitectureKind::ParallelUniv,
        ArchitectureKind::ParallelUnivTask,
        ArchitectureKind::ParallelUnivGroupTask,
        ArchitectureKind::Serial,
        ArchitectureKind::SerialHighway,
        ArchitectureKind::SerialHighwaySwap,
    ];

    pub fn has_universe(self) -> bool {
        self != ArchitectureKind::SingleTask
    }

    pub fn has_group_encoders(self) -> bool {
        matches!(
            self,
            ArchitectureKind::ParallelUnivGroupTask
                | ArchitectureKind::Serial
                | ArchitectureKind::SerialHighway
                | ArchitectureKind::SerialHighwaySwap
        )
    }

    pub fn has_task_encoders(self) -> bool {
        self != ArchitectureKind::ParallelUniv
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::SingleTask => "single-task",
            ArchitectureKind::ParallelUniv => "parallel-univ",
            ArchitectureKind::ParallelUnivTask => "parallel-univ-task",
            ArchitectureKind::ParallelUnivGroupTask => "parallel-univ-group-task",
            ArchitectureKind::Serial => "serial",
            ArchitectureKind::SerialHighway => "serial-highway",
            ArchitectureKind::SerialHighwaySwap => "serial-highway-swap",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown architecture {name:?}")))
    }

    /// Number of encoder outputs concatenated for the decoders.
    fn decoder_parts(self) -> usize {
        match self {
            ArchitectureKind::SingleTask
            | ArchitectureKind::ParallelUniv
            | ArchitectureKind::Serial => 1,
            ArchitectureKind::ParallelUnivTask => 2,
            ArchitectureKind::ParallelUnivGroupTask
            | ArchitectureKind::SerialHighway
            | ArchitectureKind::SerialHighwaySwap => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { word_dim: 300, char_dim: 100, char_hidden: 64, hidden: 128 }
    }
}

impl ModelDims {
    pub fn embed_width(&self) -> usize {
        self.word_dim + 2 * self.char_hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TaskDecoder {
    pub crf: CrfParams,
    pub intent: IntentHead,
}

/// Forward mode: training draws dropout masks from the epoch generator,
/// evaluation applies no dropout.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng, dropout: f64 },
    Eval,
}

impl Mode<'_> {
    fn apply_dropout(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Mode::Train { rng, dropout } => tape.dropout(x, *dropout, rng),
            Mode::Eval => x,
        }
    }
}

/// Shared-feature views produced while encoding one utterance: per-token
/// states and the sentence representation for each encoder that ran.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureBundle {
    pub task: Option<(Var, Var)>,
    pub group: Option<(Var, Var)>,
    pub universe: Option<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[T x D]` decoder input.
    pub input: Var,
    /// `[1 x D]` sentence representation mirroring the same concatenation.
    pub rep: Var,
    pub bundle: FeatureBundle,
    pub len: usize,
}

#[derive(Debug)]
pub struct MtlModel {
    pub kind: ArchitectureKind,
    pub dims: ModelDims,
    pub word_table: EmbeddingTable,
    pub char_table: EmbeddingTable,
    pub char_encoder: BiLstmEncoder,
    pub universe: Option<BiLstmEncoder>,
    /// Aligned with the registry's group list.
    pub group_encoders: Vec<BiLstmEncoder>,
    /// Aligned with the registry's task list.
    pub task_encoders: Vec<BiLstmEncoder>,
    pub decoders: Vec<TaskDecoder>,
    /// Classifies the task id from pooled universe features.
    pub universe_disc: Option<IntentHead>,
    /// Per group, classifies the member task from pooled group features.
    pub group_discs: Vec<IntentHead>,
    /// Per-token decoder input width; {2h, 4h, 6h} depending on the kind.
    pub decoder_width: usize,
    /// Dropout applied between serial stages (and not only before decoders).
    pub stage_dropout: bool,
}

impl MtlModel {
    pub fn build(
        store: &mut ParamStore,
        kind: ArchitectureKind,
        dims: ModelDims,
        registry: &TaskRegistry,
        word_vocab: usize,
        char_vocab: usize,
        freeze_word_embeddings: bool,
        stage_dropout: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<MtlModel> {
        if registry.tasks.is_empty() {
            return Err(Error::Config("model needs at least one task".into()));
        }
        if kind == ArchitectureKind::SingleTask && registry.tasks.len() != 1 {
            return Err(Error::Config(format!(
                "single-task architecture cannot host {} tasks",
                registry.tasks.len()
            )));
        }

        let word_table = EmbeddingTable::new(
            store,
            "embed.word",
            word_vocab,
            dims.word_dim,
            !freeze_word_embeddings,
            rng,
        );
        let char_table =
            EmbeddingTable::new(store, "embed.char", char_vocab, dims.char_dim, true, rng);
        let char_encoder =
            BiLstmEncoder::new(store, "embed.char_lstm", dims.char_dim, dims.char_hidden, rng);

        let embed = dims.embed_width();
        let h2 = 2 * dims.hidden;
        let (univ_in, group_in, task_in) = match kind {
            ArchitectureKind::Serial | ArchitectureKind::SerialHighway => (embed, embed, 2 * h2),
            ArchitectureKind::SerialHighwaySwap => (h2, h2, embed),
            _ => (embed, embed, embed),
        };

        let universe = kind
            .has_universe()
            .then(|| BiLstmEncoder::new(store, "encoder.universe", univ_in, dims.hidden, rng));

        let mut group_encoders = Vec::new();
        if kind.has_group_encoders() {
            for (name, _) in &registry.groups {
                group_encoders.push(BiLstmEncoder::new(
                    store,
                    &format!("encoder.group.{name}"),
                    group_in,
                    dims.hidden,
                    rng,
                ));
            }
        }

        let mut task_encoders = Vec::new();
        if kind.has_task_encoders() {
            for task in &registry.tasks {
                task_encoders.push(BiLstmEncoder::new(
                    store,
                    &format!("encoder.task.{}", task.name),
                    task_in,
                    dims.hidden,
                    rng,
                ));
            }
        }

        let decoder_width = kind.decoder_parts() * h2;
        let mut decoders = Vec::new();
        for task in &registry.tasks {
            let crf = CrfParams::new(
                store,
                &format!("decoder.{}.crf", task.name),
                decoder_width,
                task.slot_labels.len(),
                rng,
            );
            let intent = IntentHead::new(
                store,
                &format!("decoder.{}.intent", task.name),
                decoder_width,
                task.intent_labels.len(),
                rng,
            );
            decoders.push(TaskDecoder { crf, intent });
        }

        let universe_disc = universe
            .is_some()
            .then(|| IntentHead::new(store, "disc.universe", h2, registry.tasks.len(), rng));
        let mut group_discs = Vec::new();
        if kind.has_group_encoders() {
            for (name, members) in &registry.groups {
                group_discs.push(IntentHead::new(
                    store,
                    &format!("disc.group.{name}"),
                    h2,
                    members.len(),
                    rng,
                ));
            }
        }

        Ok(MtlModel {
            kind,
            dims,
            word_table,
            char_table,
            char_encoder,
            universe,
            group_encoders,
            task_encoders,
            decoders,
            universe_disc,
            group_discs,
            decoder_width,
            stage_dropout,
        })
    }

    /// Encode one utterance for its task: returns the decoder input, the
    /// mirrored sentence representation, and the per-encoder feature bundle.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        registry: &TaskRegistry,
        task: usize,
        word_ids: &[usize],
        char_ids: &[Vec<usize>],
        mode: &mut Mode,
    ) -> Encoded {
        assert!(task < registry.tasks.len(), "registry error: unknown task index {task}");
        let len = word_ids.len();
        let mask = vec![true; len];

        let raw = embed_tokens(
            tape,
            store,
            word_ids,
            char_ids,
            &self.word_table,
            &self.char_table,
            &self.char_encoder,
        );
        let x = mode.apply_dropout(tape, raw);

        // (dropped states, raw states, sentence rep)
        let mut run = |tape: &mut Tape, enc: &BiLstmEncoder, input: Var, mode: &mut Mode| {
            let (states, rep) = bilstm_forward(tape, store, enc, input, &mask);
            let dropped = mode.apply_dropout(tape, states);
            (dropped, states, rep)
        };

        let mut bundle = FeatureBundle::default();
        let (input, rep) = match self.kind {
            ArchitectureKind::SingleTask => {
                let (ht, _, rt) = run(tape, &self.task_encoders[task], x, mode);
                bundle.task = Some((ht, rt));
                (ht, rt)
            }
            ArchitectureKind::ParallelUniv => {
                let (hu, _, ru) = run(tape, self.universe.as_ref().unwrap(), x, mode);
                bundle.universe = Some((hu, ru));
                (hu, ru)
            }
            ArchitectureKind::ParallelUnivTask => {
                let (ht, _, rt) = run(tape, &self.task_encoders[task], x, mode);
                let (hu, _, ru) = run(tape, self.universe.as_ref().unwrap(), x, mode);
                bundle.task = Some((ht, rt));
                bundle.universe = Some((hu, ru));
                (tape.cat_cols(&[ht, hu]), tape.cat_cols(&[rt, ru]))
            }
            ArchitectureKind::ParallelUnivGroupTask => {
                let group = registry.group_of(task);
                let (ht, _, rt) = run(tape, &self.task_encoders[task], x, mode);
                let (hg, _, rg) = run(tape, &self.group_encoders[group], x, mode);
                let (hu, _, ru) = run(tape, self.universe.as_ref().unwrap(), x, mode);
                bundle.task = Some((ht, rt));
                bundle.group = Some((hg, rg));
                bundle.universe = Some((hu, ru));
                (tape.cat_cols(&[ht, hg, hu]), tape.cat_cols(&[rt, rg, ru]))
            }
            ArchitectureKind::Serial | ArchitectureKind::SerialHighway => {
                let group = registry.group_of(task);
                let (hg, hg_raw, rg) = run(tape, &self.group_encoders[group], x, mode);
                let (hu, hu_raw, ru) = run(tape, self.universe.as_ref().unwrap(), x, mode);
                let stage1 = if self.stage_dropout {
                    tape.cat_cols(&[hg, hu])
                } else {
                    tape.cat_cols(&[hg_raw, hu_raw])
                };
                let (ht, _, rt) = run(tape, &self.task_encoders[task], stage1, mode);
                bundle.task = Some((ht, rt));
                bundle.group = Some((hg, rg));
                bundle.universe = Some((hu, ru));
                if self.kind == ArchitectureKind::Serial {
                    (ht, rt)
                } else {
                    (tape.cat_cols(&[ht, hg, hu]), tape.cat_cols(&[rt, rg, ru]))
                }
            }
            ArchitectureKind::SerialHighwaySwap => {
                let group = registry.group_of(task);
                let (ht, ht_raw, rt) = run(tape, &self.task_encoders[task], x, mode);
                let stage2 = if self.stage_dropout { ht } else { ht_raw };
                let (hu, _, ru) = run(tape, self.universe.as_ref().unwrap(), stage2, mode);
                let (hg, _, rg) = run(tape, &self.group_encoders[group], stage2, mode);
                bundle.task = Some((ht, rt));
                bundle.group = Some((hg, rg));
                bundle.universe = Some((hu, ru));
                (tape.cat_cols(&[ht, hg, hu]), tape.cat_cols(&[rt, rg, ru]))
            }
        };

        let width = tape.value(input).cols();
        assert_eq!(
            width, self.decoder_width,
            "dimension error: decoder input width {width} vs expected {}",
            self.decoder_width
        );
        Encoded { input, rep, bundle, len }
    }

    /// Joint slot + intent loss for one utterance (the per-task objective):
    /// `w_sf * crf_nll + w_ic * intent cross-entropy`.
    pub fn task_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        task: usize,
        encoded: &Encoded,
        gold_slots: &[usize],
        gold_intent: usize,
        w_sf: f64,
        w_ic: f64,
    ) -> Var {
        assert!(w_sf >= 0.0 && w_ic >= 0.0, "contract error: negative loss weight");
        let decoder = &self.decoders[task];
        let emissions = decoder.crf.emissions(tape, store, encoded.input);
        let trans = tape.param(store, decoder.crf.transitions);
        let nll = crf::crf_nll(tape, emissions, trans, gold_slots);
        let logits = decoder.intent.logits(tape, store, encoded.rep);
        let ce = cross_entropy(tape, logits, gold_intent);
        let sf_term = tape.scale(nll, w_sf);
        let ic_term = tape.scale(ce, w_ic);
        tape.add(sf_term, ic_term)
    }

    /// Discriminator cross-entropy over shared features, connected through
    /// the gradient reversal layer. The universe discriminator classifies
    /// over all tasks, each group discriminator over its member tasks;
    /// single-member groups contribute exactly zero.
    pub fn adversarial_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        registry: &TaskRegistry,
        task: usize,
        bundle: &FeatureBundle,
    ) -> Option<Var> {
        self.adversarial_loss_inner(tape, store, registry, task, bundle, true)
    }

    /// Test hook: `reverse = false` drops the gradient reversal so suites can
    /// compare the reversed and plain gradients.
    pub fn adversarial_loss_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        registry: &TaskRegistry,
        task: usize,
        bundle: &FeatureBundle,
        reverse: bool,
    ) -> Option<Var> {
        let mut pooled_ce = |tape: &mut Tape, states: Var, disc: &IntentHead, class: usize| {
            let rows = tape.value(states).rows();
            let keep = vec![true; rows];
            let summed = tape.masked_sum_rows(states, &keep);
            let pooled = tape.scale(summed, 1.0 / rows as f64);
            let features = if reverse { tape.grad_reverse(pooled) } else { pooled };
            let logits = disc.logits(tape, store, features);
            cross_entropy(tape, logits, class)
        };

        let mut terms = Vec::new();
        if let (Some((h_univ, _)), Some(disc)) = (bundle.universe, &self.universe_disc) {
            terms.push(pooled_ce(tape, h_univ, disc, task));
        }
        if let Some((h_group, _)) = bundle.group {
            let group = registry.group_of(task);
            let members = &registry.groups[group].1;
            let class = members.iter().position(|&t| t == task).unwrap();
            terms.push(pooled_ce(tape, h_group, &self.group_discs[group], class));
        }
        let mut total = *terms.first()?;
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        Some(total)
    }

    /// Squared Frobenius norms of the cross-products between task states and
    /// each shared encoder's states; absent components contribute zero.
    /// The cross-product is taken over token pairs, so per-token states with
    /// disjoint support score exactly zero.
    pub fn orthogonality_loss(&self, tape: &mut Tape, bundle: &FeatureBundle) -> Option<Var> {
        let (h_task, _) = bundle.task?;
        let mut terms = Vec::new();
        for shared in [bundle.universe, bundle.group].into_iter().flatten() {
            let shared_t = tape.transpose(shared.0);
            let cross = tape.matmul(h_task, shared_t);
            let squared = tape.mul(cross, cross);
            terms.push(tape.sum(squared));
        }
        let mut total = *terms.first()?;
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        Some(total)
    }

    /// Greedy slot tags and intent prediction for one utterance.
    pub fn predict(
        &self,
        store: &ParamStore,
        registry: &TaskRegistry,
        task: usize,
        word_ids: &[usize],
        char_ids: &[Vec<usize>],
    ) -> (Vec<usize>, usize) {
        let mut tape = Tape::forward_only();
        let encoded =
            self.encode(&mut tape, store, registry, task, word_ids, char_ids, &mut Mode::Eval);
        let decoder = &self.decoders[task];
        let emissions = decoder.crf.emissions(&mut tape, store, encoded.input);
        let (tags, _) =
            crf::viterbi_decode(tape.value(emissions), store.value(decoder.crf.transitions));
        let logits = decoder.intent.logits(&mut tape, store, encoded.rep);
        let intent = argmax_row(tape.value(logits));
        (tags, intent)
    }
}

/// Weighted sum of per-task losses (the multi-task objective over tasks).
pub fn tasks_loss(tape: &mut Tape, weighted: &[(f64, Var)]) -> Var {
    assert!(!weighted.is_empty(), "registry error: no task losses to combine");
    let mut total: Option<Var> = None;
    for &(alpha, loss) in weighted {
        assert!(alpha > 0.0, "registry error: task weight must be positive");
        let term = tape.scale(loss, alpha);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.unwrap()
}

/// Composite objective: `tasks + lambda * adv + gamma * ortho`. Zero-weight
/// or absent terms are skipped so the reduction to the plain task objective
/// is bit-exact.
pub fn total_loss(
    tape: &mut Tape,
    tasks: Var,
    adv: Option<Var>,
    ortho: Option<Var>,
    lambda: f64,
    gamma: f64,
) -> Var {
    assert!(lambda >= 0.0 && gamma >= 0.0, "contract error: negative objective weight");
    let mut total = tasks;
    if lambda > 0.0 {
        if let Some(adv) = adv {
            let term = tape.scale(adv, lambda);
            total = tape.add(total, term);
        }
    }
    if gamma > 0.0 {
        if let Some(ortho) = ortho {
            let term = tape.scale(ortho, gamma);
            total = tape.add(total, term);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AlphaMode, TaskRegistry, Utterance};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn utt(tokens: &[&str], slots: &[&str], intent: &str) -> Utterance {
        Utterance {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            slots: slots.iter().map(|s| s.to_string()).collect(),
            intent: intent.to_string(),
        }
    }

    fn two_task_registry() -> TaskRegistry {
        let t1 = vec![
            utt(&["play", "madonna"], &["O", "B-artist"], "play_music"),
            utt(&["stop"], &["O"], "stop"),
        ];
        let t2 = vec![
            utt(&["book", "a", "table"], &["O", "O", "B-object"], "book"),
            utt(&["weather"], &["B-topic"], "weather"),
        ];
        TaskRegistry::build(
            &[
                ("alpha".to_string(), "g1".to_string(), t1.as_slice()),
                ("beta".to_string(), "g2".to_string(), t2.as_slice()),
            ],
            AlphaMode::Uniform,
        )
        .unwrap()
    }

    fn tiny_dims() -> ModelDims {
        ModelDims { word_dim: 5, char_dim: 3, char_hidden: 2, hidden: 4 }
    }

    fn build(kind: ArchitectureKind) -> (ParamStore, MtlModel, TaskRegistry) {
        let registry = two_task_registry();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let model = MtlModel::build(
            &mut store,
            kind,
            tiny_dims(),
            &registry,
            12,
            10,
            false,
            true,
            &mut rng,
        )
        .unwrap();
        (store, model, registry)
    }

    fn encode_sample(
        store: &ParamStore,
        model: &MtlModel,
        registry: &TaskRegistry,
        tape: &mut Tape,
    ) -> Encoded {
        model.encode(
            tape,
            store,
            registry,
            0,
            &[2, 3, 4],
            &[vec![2], vec![3, 4], vec![5]],
            &mut Mode::Eval,
        )
    }

    #[test]
    fn decoder_widths_follow_architecture() {
        // 2h = 8 at hidden 4: {8, 16, 24} per parts count
        for (kind, expect) in [
            (ArchitectureKind::ParallelUniv, 8),
            (ArchitectureKind::ParallelUnivTask, 16),
            (ArchitectureKind::ParallelUnivGroupTask, 24),
            (ArchitectureKind::Serial, 8),
            (ArchitectureKind::SerialHighway, 24),
            (ArchitectureKind::SerialHighwaySwap, 24),
        ] {
            let (store, model, registry) = build(kind);
            assert_eq!(model.decoder_width, expect, "{}", kind.name());
            let mut tape = Tape::new();
            let encoded = encode_sample(&store, &model, &registry, &mut tape);
            assert_eq!(tape.value(encoded.input).shape(), (3, expect));
            assert_eq!(tape.value(encoded.rep).shape(), (1, expect));
        }
    }

    #[test]
    fn group_encoders_exist_exactly_where_specified() {
        for kind in ArchitectureKind::ALL {
            if kind == ArchitectureKind::SingleTask {
                continue;
            }
            let (_, model, _) = build(kind);
            assert_eq!(model.group_encoders.is_empty(), !kind.has_group_encoders());
        }
    }

    #[test]
    fn serial_depends_on_universe_but_swap_does_not() {
        let probe = |kind: ArchitectureKind| -> (Tensor, Tensor) {
            let (mut store, model, registry) = build(kind);
            let h_task = |store: &ParamStore| {
                let mut tape = Tape::new();
                let encoded = encode_sample(store, &model, &registry, &mut tape);
                tape.value(encoded.bundle.task.unwrap().0).clone()
            };
            let before = h_task(&store);
            let univ_wx = model.universe.as_ref().unwrap().fwd.wx;
            store.entry_mut(univ_wx).value.values_mut()[0] += 0.25;
            let after = h_task(&store);
            (before, after)
        };

        let (before, after) = probe(ArchitectureKind::Serial);
        assert_ne!(before, after, "serial task features must react to universe weights");

        let (before, after) = probe(ArchitectureKind::SerialHighwaySwap);
        assert_eq!(before, after, "swapped task features must ignore universe weights");
    }

    #[test]
    fn swap_zero_shared_weights_reduce_input_to_task_features() {
        let (mut store, model, registry) = build(ArchitectureKind::SerialHighwaySwap);
        let zero_enc = |store: &mut ParamStore, enc: &BiLstmEncoder| {
            for cell in [enc.fwd, enc.bwd] {
                for id in [cell.wx, cell.wh, cell.b] {
                    store.entry_mut(id).value.fill(0.0);
                }
            }
        };
        let universe = *model.universe.as_ref().unwrap();
        zero_enc(&mut store, &universe);
        let groups: Vec<BiLstmEncoder> = model.group_encoders.clone();
        for g in &groups {
            zero_enc(&mut store, g);
        }

        let mut tape = Tape::new();
        let encoded = encode_sample(&store, &model, &registry, &mut tape);
        let input = tape.value(encoded.input);
        let h_task = tape.value(encoded.bundle.task.unwrap().0);
        for t in 0..3 {
            let row = input.row_slice(t);
            assert_eq!(&row[0..8], h_task.row_slice(t));
            assert!(row[8..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn task_loss_weights_are_linear() {
        let (store, model, registry) = build(ArchitectureKind::ParallelUnivTask);
        let loss_at = |w_sf: f64, w_ic: f64| {
            let mut tape = Tape::new();
            let encoded = encode_sample(&store, &model, &registry, &mut tape);
            let l = model.task_loss(&mut tape, &store, 0, &encoded, &[0, 1, 0], 1, w_sf, w_ic);
            tape.value(l).item()
        };
        let sf_only = loss_at(1.0, 0.0);
        let ic_only = loss_at(0.0, 1.0);
        let both = loss_at(1.0, 1.0);
        assert!((both - sf_only - ic_only).abs() < 1e-12);
        let doubled = loss_at(2.0, 2.0);
        assert!((doubled - 2.0 * both).abs() < 1e-12);
    }

    #[test]
    fn tasks_loss_weighted_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.7), false);
        let b = tape.leaf(Tensor::scalar(0.3), false);
        let total = tasks_loss(&mut tape, &[(1.0, a), (1.0, b)]);
        assert!((tape.value(total).item() - 1.0).abs() < 1e-15);

        let scaled = tasks_loss(&mut tape, &[(3.0, a), (3.0, b)]);
        assert!((tape.value(scaled).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let tasks = tape.leaf(Tensor::scalar(1.0), false);
        let adv = tape.leaf(Tensor::scalar(0.5), false);
        let ortho = tape.leaf(Tensor::scalar(2.0), false);
        let total = total_loss(&mut tape, tasks, Some(adv), Some(ortho), 0.05, 0.01);
        assert!((tape.value(total).item() - 1.045).abs() < 1e-12);

        // lambda = gamma = 0 reduces to the task objective bit-for-bit
        let reduced = total_loss(&mut tape, tasks, Some(adv), Some(ortho), 0.0, 0.0);
        assert_eq!(reduced, tasks);
        assert!(tape.value(total).item() >= tape.value(tasks).item());
    }

    #[test]
    fn adversarial_uniform_logits_give_log_classes() {
        let (mut store, model, registry) = build(ArchitectureKind::ParallelUnivTask);
        let disc = model.universe_disc.as_ref().unwrap();
        store.entry_mut(disc.w).value.fill(0.0);
        store.entry_mut(disc.b).value.fill(0.0);

        let mut tape = Tape::new();
        let encoded = encode_sample(&store, &model, &registry, &mut tape);
        let adv = model
            .adversarial_loss(&mut tape, &store, &registry, 0, &encoded.bundle)
            .unwrap();
        // two tasks -> uniform discriminator loss log 2
        assert!((tape.value(adv).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_single_member_group_contributes_zero() {
        let (store, model, registry) = build(ArchitectureKind::ParallelUnivGroupTask);
        let mut tape = Tape::new();
        let encoded = encode_sample(&store, &model, &registry, &mut tape);
        let with_groups = model
            .adversarial_loss(&mut tape, &store, &registry, 0, &encoded.bundle)
            .unwrap();
        let universe_only = model
            .adversarial_loss(
                &mut tape,
                &store,
                &registry,
                0,
                &FeatureBundle { group: None, ..encoded.bundle },
            )
            .unwrap();
        // both groups are single-member here, so the group term is exactly 0
        assert_eq!(tape.value(with_groups).item(), tape.value(universe_only).item());
    }

    #[test]
    fn single_task_has_no_shared_losses() {
        let t1 = vec![utt(&["go"], &["O"], "go")];
        let registry = TaskRegistry::build(
            &[("only".to_string(), "g".to_string(), t1.as_slice())],
            AlphaMode::Uniform,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MtlModel::build(
            &mut store,
            ArchitectureKind::SingleTask,
            tiny_dims(),
            &registry,
            8,
            8,
            false,
            true,
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let encoded =
            model.encode(&mut tape, &store, &registry, 0, &[2], &[vec![2]], &mut Mode::Eval);
        assert!(model.adversarial_loss(&mut tape, &store, &registry, 0, &encoded.bundle).is_none());
        assert!(model.orthogonality_loss(&mut tape, &encoded.bundle).is_none());
    }

    #[test]
    fn orthogonality_hand_cases() {
        let model = build(ArchitectureKind::ParallelUnivTask).1;
        let mut tape = Tape::new();

        // identical single rows [1,1]: token cross-product is [2], squared 4
        let h = tape.leaf(Tensor::new(1, 2, vec![1.0, 1.0]), false);
        let bundle = FeatureBundle { task: Some((h, h)), universe: Some((h, h)), group: None };
        let loss = model.orthogonality_loss(&mut tape, &bundle).unwrap();
        let expected = 4.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);

        // orthogonal rows (disjoint support) give zero
        let a = tape.leaf(Tensor::new(1, 2, vec![1.0, 0.0]), false);
        let b = tape.leaf(Tensor::new(1, 2, vec![0.0, 3.0]), false);
        let bundle = FeatureBundle { task: Some((a, a)), universe: Some((b, b)), group: None };
        let loss = model.orthogonality_loss(&mut tape, &bundle).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // scaling the task side by c scales the loss by c^2
        let c = 3.0;
        let scaled = tape.scale(h, c);
        let bundle_scaled =
            FeatureBundle { task: Some((scaled, scaled)), universe: Some((h, h)), group: None };
        let loss_scaled = model.orthogonality_loss(&mut tape, &bundle_scaled).unwrap();
        assert!((tape.value(loss_scaled).item() - c * c * expected).abs() < 1e-9);
    }

    #[test]
    fn task_isolation_under_gradient_step() {
        let (mut store, model, registry) = build(ArchitectureKind::ParallelUnivGroupTask);
        let mut tape = Tape::new();
        let encoded = encode_sample(&store, &model, &registry, &mut tape);
        let task_term = model.task_loss(&mut tape, &store, 0, &encoded, &[0, 1, 0], 1, 1.0, 1.0);
        let adv = model.adversarial_loss(&mut tape, &store, &registry, 0, &encoded.bundle);
        let ortho = model.orthogonality_loss(&mut tape, &encoded.bundle);
        let total = total_loss(&mut tape, task_term, adv, ortho, 0.05, 0.01);
        tape.backward(total);
        store.zero_grads();
        tape.export_grads(&mut store);

        let grad_norm = |store: &ParamStore, prefix: &str| -> f64 {
            store
                .ids()
                .filter(|&id| store.name(id).starts_with(prefix))
                .map(|id| store.grad(id).values().iter().map(|v| v * v).sum::<f64>())
                .sum()
        };
        // task 0's own decoder and encoder move; task 1's stay untouched
        assert!(grad_norm(&store, "decoder.alpha") > 0.0);
        assert!(grad_norm(&store, "encoder.task.alpha") > 0.0);
        assert_eq!(grad_norm(&store, "decoder.beta"), 0.0);
        assert_eq!(grad_norm(&store, "encoder.task.beta"), 0.0);
        // universe and own-group encoders move; the other group's does not
        assert!(grad_norm(&store, "encoder.universe") > 0.0);
        assert!(grad_norm(&store, "encoder.group.g1") > 0.0);
        assert_eq!(grad_norm(&store, "encoder.group.g2"), 0.0);
    }

    #[test]
    fn reversal_negates_encoder_gradients_through_adversarial_loss() {
        let (mut store, model, registry) = build(ArchitectureKind::ParallelUnivTask);
        let word_ids = [2usize, 3];
        let char_ids = vec![vec![2usize], vec![3, 4]];

        let adv_loss = |store: &ParamStore, tape: &mut Tape, reverse: bool| -> Var {
            let encoded =
                model.encode(tape, store, &registry, 0, &word_ids, &char_ids, &mut Mode::Eval);
            model
                .adversarial_loss_inner(tape, store, &registry, 0, &encoded.bundle, reverse)
                .unwrap()
        };

        // forward values are bit-identical with and without the reversal
        let mut tape = Tape::new();
        let with = adv_loss(&store, &mut tape, true);
        let without = adv_loss(&store, &mut tape, false);
        assert_eq!(
            tape.value(with).item().to_bits(),
            tape.value(without).item().to_bits()
        );

        let grads = |store: &mut ParamStore, reverse: bool| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let loss = adv_loss(store, &mut tape, reverse);
            tape.backward(loss);
            store.zero_grads();
            tape.export_grads(store);
            store.ids().map(|id| store.grad(id).clone()).collect()
        };
        let reversed = grads(&mut store, true);
        let plain = grads(&mut store, false);

        let params: Vec<_> = store.ids().collect();
        for (&id, (r, p)) in params.iter().zip(reversed.iter().zip(&plain)) {
            let name = store.name(id);
            if name.starts_with("disc.") {
                // discriminator weights sit below the reversal: untouched
                assert_eq!(r, p, "{name}");
            } else {
                for (rv, pv) in r.values().iter().zip(p.values()) {
                    assert!((rv + pv).abs() < 1e-12, "{name}: {rv} vs {pv}");
                }
            }
        }

        // and the plain gradients are the true derivatives of the forward value
        let analytic = plain;
        crate::gradcheck::assert_grads_close(
            &mut store,
            &params,
            &analytic,
            1e-5,
            1e-4,
            |store| {
                let mut tape = Tape::new();
                let loss = adv_loss(store, &mut tape, false);
                tape.value(loss).item()
            },
        );
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        // End-to-end gradient check of the composite objective on the
        // two-task / two-group toy model. The reversal layer is replaced by
        // identity here: finite differences always measure the true forward
        // derivative, which the reversal negates on shared-encoder paths by
        // contract. The reversal sign has its own dedicated test.
        let (mut store, model, registry) = build(ArchitectureKind::SerialHighway);
        let word_ids = [2usize, 3];
        let char_ids = vec![vec![2usize, 3], vec![4]];
        let gold_slots = [0usize, 1];

        let forward = |store: &ParamStore, tape: &mut Tape| -> Var {
            let encoded =
                model.encode(tape, store, &registry, 0, &word_ids, &char_ids, &mut Mode::Eval);
            let task_term =
                model.task_loss(tape, store, 0, &encoded, &gold_slots, 1, 1.0, 1.0);
            let weighted = tasks_loss(tape, &[(registry.alpha(0), task_term)]);
            let adv = model.adversarial_loss_inner(
                tape,
                store,
                &registry,
                0,
                &encoded.bundle,
                false,
            );
            let ortho = model.orthogonality_loss(tape, &encoded.bundle);
            total_loss(tape, weighted, adv, ortho, 0.05, 0.01)
        };

        let mut tape = Tape::new();
        let loss = forward(&store, &mut tape);
        tape.backward(loss);
        store.zero_grads();
        tape.export_grads(&mut store);

        let params: Vec<_> = store.ids().collect();
        let analytic: Vec<Tensor> = params.iter().map(|&p| store.grad(p).clone()).collect();
        crate::gradcheck::assert_grads_close(
            &mut store,
            &params,
            &analytic,
            1e-5,
            1e-4,
            |store| {
                let mut tape = Tape::new();
                let loss = forward(store, &mut tape);
                tape.value(loss).item()
            },
        );
    }
}
