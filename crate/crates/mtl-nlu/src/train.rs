//! The stochastic multi-task training loop: Adam optimization, the
//! random-task / random-batch epoch schedule, per-epoch dev evaluation, and
//! dual-metric early stopping.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape};
use crate::data::{make_batches, Batch, TaskRegistry, Utterance, Vocab};
use crate::eval::{aggregate_report, intent_accuracy, slot_f1, MetricReport, TaskMetrics};
use crate::model::{tasks_loss, total_loss, Mode, MtlModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Deterministic per-(epoch, purpose) seed derivation, FNV-1a over the parts.
/// Keeps every epoch reproducible in isolation so checkpoint resume replays
/// the exact schedule of the uninterrupted run.
pub fn derive_seed(master: u64, epoch: u64, purpose: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&master.to_le_bytes());
    eat(&epoch.to_le_bytes());
    eat(purpose.as_bytes());
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Serializable optimizer state for checkpoint resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<(Tensor, Tensor)>,
}

/// Adam with bias correction; moment tensors mirror parameter shapes.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let moments = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                (Tensor::zeros(r, c), Tensor::zeros(r, c))
            })
            .collect();
        Adam { cfg, step: 0, moments }
    }

    pub fn state(&self) -> AdamState {
        AdamState { step: self.step, moments: self.moments.clone() }
    }

    pub fn from_state(cfg: AdamConfig, state: AdamState, store: &ParamStore) -> Result<Self> {
        if state.moments.len() != store.len() {
            return Err(Error::Compat(format!(
                "optimizer state holds {} moment pairs for {} parameters",
                state.moments.len(),
                store.len()
            )));
        }
        Ok(Adam { cfg, step: state.step, moments: state.moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the store's accumulated gradients;
    /// gradients are zeroed afterward. Non-finite gradients abort with the
    /// offending parameter's name before anything is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids() {
            let entry = store.entry(id);
            if entry.trainable && !entry.grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    entry.name
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bias1 = 1.0 - beta1.powi(t as i32);
        let bias2 = 1.0 - beta2.powi(t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let entry = store.entry_mut(id);
            if !entry.trainable {
                entry.grad.fill(0.0);
                continue;
            }
            let (m, v) = &mut self.moments[i];
            for ((p, g), (m, v)) in entry
                .value
                .values_mut()
                .iter_mut()
                .zip(entry.grad.values())
                .zip(m.values_mut().iter_mut().zip(v.values_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            entry.grad.fill(0.0);
        }
        Ok(())
    }
}

/// Scale all trainable gradients so their global norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut total = 0.0;
    for id in store.ids() {
        let entry = store.entry(id);
        if entry.trainable {
            total += entry.grad.values().iter().map(|g| g * g).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            let entry = store.entry_mut(id);
            if entry.trainable {
                entry.grad.values_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatienceMode {
    /// An epoch improves when either metric beats its best.
    #[default]
    Any,
    /// An epoch improves only when both metrics beat their bests.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_f1: f64,
    pub best_acc: f64,
    pub since_improvement: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub mode: PatienceMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

impl EarlyStopState {
    pub fn new(patience: usize, max_epochs: usize, mode: PatienceMode) -> Self {
        EarlyStopState {
            best_f1: f64::NEG_INFINITY,
            best_acc: f64::NEG_INFINITY,
            since_improvement: 0,
            patience,
            max_epochs,
            mode,
        }
    }

    /// Fold in one epoch's aggregated dev metrics.
    pub fn update(&mut self, epoch: usize, dev_f1: f64, dev_acc: f64) -> Decision {
        let f1_up = dev_f1 > self.best_f1;
        let acc_up = dev_acc > self.best_acc;
        let improved = match self.mode {
            PatienceMode::Any => f1_up || acc_up,
            PatienceMode::All => f1_up && acc_up,
        };
        self.best_f1 = self.best_f1.max(dev_f1);
        self.best_acc = self.best_acc.max(dev_acc);
        if improved {
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        if self.since_improvement >= self.patience || epoch >= self.max_epochs {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// Per-step loss weights and regularizers for one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub w_sf: f64,
    pub w_ic: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub dropout: f64,
    pub grad_clip: Option<f64>,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { w_sf: 1.0, w_ic: 1.0, lambda: 0.05, gamma: 0.01, dropout: 0.5, grad_clip: Some(5.0) }
    }
}

/// One gradient step on a single-task batch. The batch objective is
/// `alpha * mean(task loss) + lambda * sum(adv) + gamma * sum(ortho)` over
/// the batch rows. Returns the objective value.
pub fn train_on_batch(
    model: &MtlModel,
    store: &mut ParamStore,
    registry: &TaskRegistry,
    batch: &Batch,
    adam: &mut Adam,
    cfg: &StepConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut task_terms = Vec::with_capacity(batch.size());
    let mut adv_terms = Vec::new();
    let mut ortho_terms = Vec::new();

    for row in 0..batch.size() {
        let len = batch.len_of(row);
        let word_ids = &batch.word_ids[row][..len];
        let char_ids = &batch.char_ids[row][..len];
        let mut mode = Mode::Train { rng: dropout_rng, dropout: cfg.dropout };
        let encoded =
            model.encode(&mut tape, store, registry, batch.task, word_ids, char_ids, &mut mode);
        let loss = model.task_loss(
            &mut tape,
            store,
            batch.task,
            &encoded,
            &batch.slot_ids[row][..len],
            batch.intent_ids[row],
            cfg.w_sf,
            cfg.w_ic,
        );
        task_terms.push(loss);
        if cfg.lambda > 0.0 {
            if let Some(adv) =
                model.adversarial_loss(&mut tape, store, registry, batch.task, &encoded.bundle)
            {
                adv_terms.push(adv);
            }
        }
        if cfg.gamma > 0.0 {
            if let Some(ortho) = model.orthogonality_loss(&mut tape, &encoded.bundle) {
                ortho_terms.push(ortho);
            }
        }
    }

    let mut task_sum = task_terms[0];
    for t in &task_terms[1..] {
        task_sum = tape.add(task_sum, *t);
    }
    let task_mean = tape.scale(task_sum, 1.0 / batch.size() as f64);
    let weighted = tasks_loss(&mut tape, &[(registry.alpha(batch.task), task_mean)]);

    let fold = |tape: &mut Tape, terms: &[crate::autograd::Var]| {
        terms.split_first().map(|(&first, rest)| {
            let mut acc = first;
            for t in rest {
                acc = tape.add(acc, *t);
            }
            acc
        })
    };
    let adv = fold(&mut tape, &adv_terms);
    let ortho = fold(&mut tape, &ortho_terms);
    let total = total_loss(&mut tape, weighted, adv, ortho, cfg.lambda, cfg.gamma);

    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on task {}",
            registry.tasks[batch.task].name
        )));
    }

    tape.backward(total);
    tape.export_grads(store);
    if let Some(max_norm) = cfg.grad_clip {
        clip_global_norm(store, max_norm);
    }
    adam.step(store)?;
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    /// (task, original batch index) in consumption order.
    pub consumed: Vec<(usize, usize)>,
    /// Objective value per gradient step, in step order.
    pub batch_losses: Vec<f64>,
    /// Mean objective per task over the epoch.
    pub per_task_loss: Vec<f64>,
}

/// One epoch of the stochastic schedule: repeatedly pick a random task among
/// those with batches left, pick a random batch of that task, take a
/// gradient step, and drop the batch from its list. Every batch is consumed
/// exactly once.
pub fn train_epoch(
    model: &MtlModel,
    store: &mut ParamStore,
    registry: &TaskRegistry,
    batch_lists: Vec<Vec<Batch>>,
    adam: &mut Adam,
    cfg: &StepConfig,
    loop_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    assert!(!batch_lists.is_empty(), "contract error: empty registry");
    assert_eq!(
        batch_lists.len(),
        registry.num_tasks(),
        "contract error: {} batch lists for {} tasks",
        batch_lists.len(),
        registry.num_tasks()
    );
    for (i, list) in batch_lists.iter().enumerate() {
        assert!(!list.is_empty(), "contract error: task {i} has no batches");
    }

    let mut remaining: Vec<Vec<(usize, Batch)>> =
        batch_lists.into_iter().map(|list| list.into_iter().enumerate().collect()).collect();
    let mut stats = EpochStats {
        consumed: Vec::new(),
        batch_losses: Vec::new(),
        per_task_loss: vec![0.0; registry.num_tasks()],
    };
    let mut per_task_steps = vec![0usize; registry.num_tasks()];

    loop {
        let available: Vec<usize> =
            (0..remaining.len()).filter(|&t| !remaining[t].is_empty()).collect();
        if available.is_empty() {
            break;
        }
        let task = available[loop_rng.gen_range(0..available.len())];
        let pick = loop_rng.gen_range(0..remaining[task].len());
        let (original_idx, batch) = remaining[task].swap_remove(pick);

        let value = train_on_batch(model, store, registry, &batch, adam, cfg, dropout_rng)?;
        stats.consumed.push((task, original_idx));
        stats.batch_losses.push(value);
        stats.per_task_loss[task] += value;
        per_task_steps[task] += 1;
    }

    for (loss, steps) in stats.per_task_loss.iter_mut().zip(&per_task_steps) {
        if *steps > 0 {
            *loss /= *steps as f64;
        }
    }
    Ok(stats)
}

/// Decode a task's corpus against gold and compute its metrics.
pub fn evaluate_task(
    model: &MtlModel,
    store: &ParamStore,
    registry: &TaskRegistry,
    vocab: &Vocab,
    task: usize,
    corpus: &[Utterance],
) -> TaskMetrics {
    assert!(!corpus.is_empty(), "contract error: empty evaluation corpus");
    let spec = &registry.tasks[task];
    let mut gold_tags = Vec::with_capacity(corpus.len());
    let mut pred_tags = Vec::with_capacity(corpus.len());
    let mut gold_intents = Vec::with_capacity(corpus.len());
    let mut pred_intents = Vec::with_capacity(corpus.len());
    for u in corpus {
        let word_ids: Vec<usize> = u.tokens.iter().map(|t| vocab.word_id(t)).collect();
        let char_ids: Vec<Vec<usize>> = u.tokens.iter().map(|t| vocab.char_seq(t)).collect();
        let (tag_ids, intent_id) = model.predict(store, registry, task, &word_ids, &char_ids);
        pred_tags.push(tag_ids.iter().map(|&t| spec.slot_labels.name(t).to_string()).collect());
        gold_tags.push(u.slots.clone());
        pred_intents.push(spec.intent_labels.name(intent_id).to_string());
        gold_intents.push(u.intent.clone());
    }
    TaskMetrics {
        task: spec.name.clone(),
        group: spec.group.clone(),
        intent_acc: intent_accuracy(&gold_intents, &pred_intents),
        slot_f1: slot_f1(&gold_tags, &pred_tags),
    }
}

/// Evaluate every task and aggregate.
pub fn evaluate_all(
    model: &MtlModel,
    store: &ParamStore,
    registry: &TaskRegistry,
    vocab: &Vocab,
    corpora: &[Vec<Utterance>],
) -> MetricReport {
    let metrics: Vec<TaskMetrics> = (0..registry.num_tasks())
        .map(|t| evaluate_task(model, store, registry, vocab, t, &corpora[t]))
        .collect();
    aggregate_report(&metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestTracker {
    pub epoch: usize,
    pub dev_f1: f64,
    pub dev_acc: f64,
}

impl BestTracker {
    /// Strictly better aggregated slot F1 wins; ties go to better intent
    /// accuracy, then to the earlier epoch (by never replacing on equality).
    pub fn improves(&self, dev_f1: f64, dev_acc: f64) -> bool {
        dev_f1 > self.dev_f1 || (dev_f1 == self.dev_f1 && dev_acc > self.dev_acc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seconds: f64,
    pub per_task_loss: Vec<f64>,
    pub dev: MetricReport,
    pub is_best: bool,
    pub since_improvement: usize,
}

pub fn render_log_line(registry: &TaskRegistry, log: &EpochLog) -> String {
    let mut line = format!("epoch={} seconds={:.2}", log.epoch, log.seconds);
    for (spec, loss) in registry.tasks.iter().zip(&log.per_task_loss) {
        line.push_str(&format!(" loss[{}]={:.4}", spec.name, loss));
    }
    line.push_str(&format!(
        " dev_f1={:.2} dev_acc={:.2} stale={} best={}",
        log.dev.mean_slot_f1,
        log.dev.mean_intent_acc,
        log.since_improvement,
        if log.is_best { "yes" } else { "no" }
    ));
    line
}

/// Epoch-by-epoch training driver over prepared corpora.
pub struct Fitter<'a> {
    pub model: &'a MtlModel,
    pub store: &'a mut ParamStore,
    pub registry: &'a TaskRegistry,
    pub vocab: &'a Vocab,
    pub train_corpora: &'a [Vec<Utterance>],
    pub dev_corpora: &'a [Vec<Utterance>],
    pub adam: Adam,
    pub early: EarlyStopState,
    pub best: Option<BestTracker>,
    pub step_cfg: StepConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
    pub stopped: bool,
}

impl<'a> Fitter<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a MtlModel,
        store: &'a mut ParamStore,
        registry: &'a TaskRegistry,
        vocab: &'a Vocab,
        train_corpora: &'a [Vec<Utterance>],
        dev_corpora: &'a [Vec<Utterance>],
        adam_cfg: AdamConfig,
        step_cfg: StepConfig,
        batch_size: usize,
        patience: usize,
        max_epochs: usize,
        patience_mode: PatienceMode,
        seed: u64,
    ) -> Self {
        let adam = Adam::new(adam_cfg, store);
        Fitter {
            model,
            store,
            registry,
            vocab,
            train_corpora,
            dev_corpora,
            adam,
            early: EarlyStopState::new(patience, max_epochs, patience_mode),
            best: None,
            step_cfg,
            batch_size,
            seed,
            epoch: 0,
            stopped: false,
        }
    }

    /// Run one epoch (training plus dev evaluation) and update the stopping
    /// and best-checkpoint state.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        assert!(!self.stopped, "contract error: training already stopped");
        self.epoch += 1;
        let epoch = self.epoch as u64;
        let start = Instant::now();

        let mut batch_lists = Vec::with_capacity(self.registry.num_tasks());
        for (t, corpus) in self.train_corpora.iter().enumerate() {
            let seed = derive_seed(self.seed, epoch, &format!("batches.{t}"));
            batch_lists.push(make_batches(
                corpus,
                self.vocab,
                t,
                &self.registry.tasks[t],
                self.batch_size,
                seed,
            )?);
        }
        let mut loop_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch, "loop"));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch, "dropout"));

        let stats = train_epoch(
            self.model,
            self.store,
            self.registry,
            batch_lists,
            &mut self.adam,
            &self.step_cfg,
            &mut loop_rng,
            &mut dropout_rng,
        )?;

        let dev = evaluate_all(self.model, self.store, self.registry, self.vocab, self.dev_corpora);
        let is_best = self.best.map_or(true, |b| b.improves(dev.mean_slot_f1, dev.mean_intent_acc));
        if is_best {
            self.best = Some(BestTracker {
                epoch: self.epoch,
                dev_f1: dev.mean_slot_f1,
                dev_acc: dev.mean_intent_acc,
            });
        }
        if self.early.update(self.epoch, dev.mean_slot_f1, dev.mean_intent_acc) == Decision::Stop {
            self.stopped = true;
        }

        Ok(EpochLog {
            epoch: self.epoch,
            seconds: start.elapsed().as_secs_f64(),
            per_task_loss: stats.per_task_loss,
            dev,
            is_best,
            since_improvement: self.early.since_improvement,
        })
    }

    pub fn done(&self) -> bool {
        self.stopped || self.epoch >= self.early.max_epochs
    }

    /// Drive epochs to completion; the callback sees every epoch log (for
    /// checkpointing and logging).
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&Fitter, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.done() {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
