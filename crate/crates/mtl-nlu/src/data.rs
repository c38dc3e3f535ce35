//! Corpus ingestion, the intent-based Snips domain split, vocabulary and
//! task-registry construction, and batch assembly.
//!
//! Native corpus format, one block per utterance:
//!
//! ```text
//! token<TAB>BIO-tag
//! ...
//! #intent=<label>
//! <blank line>
//! ```
//!
//! A loader for the published three-file split layout (`seq.in`, `seq.out`,
//! `label` with one utterance per line) is provided as well.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{PAD_ID, UNK_ID};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn valid_tag(tag: &str) -> bool {
    tag == "O" || ((tag.starts_with("B-") || tag.starts_with("I-")) && tag.len() > 2)
}

/// Which on-disk layout a corpus uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// Blank-line separated token/tag blocks with a `#intent=` line.
    #[default]
    Native,
    /// Directory of `seq.in` / `seq.out` / `label` files.
    Split,
}

/// Load a corpus in the given format. `path` is a file for `Native` and a
/// directory for `Split`.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Utterance>> {
    match format {
        CorpusFormat::Native => load_native(path),
        CorpusFormat::Split => load_split_dir(path),
    }
}

fn load_native(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut utterances = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut slots: Vec<String> = Vec::new();
    let mut intent: Option<String> = None;

    let fail = |line_no: usize, msg: String| -> Error {
        Error::Data(format!("{}:{line_no}: {msg}", path.display()))
    };

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            if !tokens.is_empty() || intent.is_some() {
                let intent = intent
                    .take()
                    .ok_or_else(|| fail(line_no, "utterance block without #intent= line".into()))?;
                utterances.push(Utterance {
                    tokens: std::mem::take(&mut tokens),
                    slots: std::mem::take(&mut slots),
                    intent,
                });
            }
            continue;
        }
        if let Some(label) = trimmed.strip_prefix("#intent=") {
            if label.is_empty() {
                return Err(fail(line_no, "empty intent label".into()));
            }
            if tokens.is_empty() {
                return Err(fail(line_no, "intent line before any token".into()));
            }
            if intent.replace(label.to_string()).is_some() {
                return Err(fail(line_no, "duplicate intent line in block".into()));
            }
            continue;
        }
        if intent.is_some() {
            return Err(fail(line_no, "token line after #intent= line".into()));
        }
        let Some((token, tag)) = trimmed.split_once('\t') else {
            return Err(fail(line_no, format!("expected token<TAB>tag, got {trimmed:?}")));
        };
        if token.is_empty() {
            return Err(fail(line_no, "empty token".into()));
        }
        if !valid_tag(tag) {
            return Err(fail(line_no, format!("malformed slot tag {tag:?}")));
        }
        tokens.push(token.to_string());
        slots.push(tag.to_string());
    }
    if !tokens.is_empty() || intent.is_some() {
        let intent = intent
            .ok_or_else(|| fail(text.lines().count(), "utterance block without #intent= line".into()))?;
        utterances.push(Utterance { tokens, slots, intent });
    }
    if utterances.is_empty() {
        eprintln!("warning: {} contains no utterances", path.display());
    }
    Ok(utterances)
}

fn load_split_dir(dir: &Path) -> Result<Vec<Utterance>> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    let seq_in = read("seq.in")?;
    let seq_out = read("seq.out")?;
    let labels = read("label")?;

    let ins: Vec<&str> = seq_in.lines().collect();
    let outs: Vec<&str> = seq_out.lines().collect();
    let labs: Vec<&str> = labels.lines().collect();
    if ins.len() != outs.len() || ins.len() != labs.len() {
        return Err(Error::Data(format!(
            "{}: seq.in/seq.out/label line counts differ ({}/{}/{})",
            dir.display(),
            ins.len(),
            outs.len(),
            labs.len()
        )));
    }

    let mut utterances = Vec::with_capacity(ins.len());
    for (i, ((tokens, tags), label)) in ins.iter().zip(&outs).zip(&labs).enumerate() {
        let line_no = i + 1;
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
        let slots: Vec<String> = tags.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::Data(format!("{}:{line_no}: empty utterance", dir.display())));
        }
        if tokens.len() != slots.len() {
            return Err(Error::Data(format!(
                "{}:{line_no}: {} tokens vs {} tags",
                dir.display(),
                tokens.len(),
                slots.len()
            )));
        }
        for tag in &slots {
            if !valid_tag(tag) {
                return Err(Error::Data(format!(
                    "{}:{line_no}: malformed slot tag {tag:?}",
                    dir.display()
                )));
            }
        }
        if label.trim().is_empty() {
            return Err(Error::Data(format!("{}:{line_no}: empty intent label", dir.display())));
        }
        utterances.push(Utterance { tokens, slots, intent: label.trim().to_string() });
    }
    Ok(utterances)
}

/// Serialize utterances in the native format; parsing the output reproduces
/// the content exactly.
pub fn write_corpus(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut out = String::new();
    for u in utterances {
        for (token, tag) in u.tokens.iter().zip(&u.slots) {
            writeln!(out, "{token}\t{tag}").unwrap();
        }
        writeln!(out, "#intent={}", u.intent).unwrap();
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// The three Snips domains keyed by intent.
pub const SNIPS_DOMAINS: [(&str, &[&str]); 3] = [
    ("snips-creative", &["search_creative_work", "rate_book"]),
    ("snips-music", &["play_music", "add_to_playlist"]),
    ("snips-location", &["get_weather", "book_restaurant", "search_screening_event"]),
];

/// Partition Snips utterances into the creative / music / location domains
/// by intent, preserving order within each part. Intents are matched
/// case-insensitively with camel-case folded to snake_case.
pub fn split_snips(utterances: &[Utterance]) -> Result<[Vec<Utterance>; 3]> {
    let mut parts: [Vec<Utterance>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for u in utterances {
        let key = normalize_intent(&u.intent);
        let idx = SNIPS_DOMAINS
            .iter()
            .position(|(_, intents)| intents.contains(&key.as_str()))
            .ok_or_else(|| Error::Data(format!("unknown Snips intent {:?}", u.intent)))?;
        parts[idx].push(u.clone());
    }
    Ok(parts)
}

/// `AddToPlaylist` -> `add_to_playlist`; already-snake intents pass through.
pub fn normalize_intent(intent: &str) -> String {
    let mut out = String::new();
    for (i, ch) in intent.chars().enumerate() {
        if ch.is_uppercase() {
            if i > 0 && !out.ends_with('_') {
                out.push('_');
            }
            out.extend(ch.to_lowercase());
        } else {
            out.push(ch);
        }
    }
    out
}

/// Bijective label <-> id map with first-seen ordering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn from_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Self {
        let mut map = LabelMap::default();
        for l in labels {
            map.intern(l);
        }
        map
    }

    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(i) = self.id(label) {
            return i;
        }
        self.names.push(label.to_string());
        self.names.len() - 1
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Word and character vocabularies shared across tasks. Ids 0 and 1 are
/// reserved for PAD and UNK in both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    pub chars: Vec<String>,
    pub lowercase: bool,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    char_index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from training utterances only: training tokens plus PAD and UNK.
    pub fn build<'a>(train: impl Iterator<Item = &'a Utterance>, lowercase: bool) -> Self {
        let mut vocab = Vocab {
            words: vec!["<pad>".into(), "<unk>".into()],
            chars: vec!["<pad>".into(), "<unk>".into()],
            lowercase,
            word_index: HashMap::new(),
            char_index: HashMap::new(),
        };
        for u in train {
            for token in &u.tokens {
                let w = vocab.normalize(token);
                if !vocab.word_index.contains_key(&w) {
                    vocab.word_index.insert(w.clone(), vocab.words.len());
                    vocab.words.push(w);
                }
                for ch in token.chars() {
                    let c = ch.to_string();
                    if !vocab.char_index.contains_key(&c) {
                        vocab.char_index.insert(c.clone(), vocab.chars.len());
                        vocab.chars.push(c);
                    }
                }
            }
        }
        vocab
    }

    /// Rebuild the lookup indices after deserialization.
    pub fn rebuild_index(&mut self) {
        self.word_index =
            self.words.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i)).collect();
        self.char_index =
            self.chars.iter().enumerate().skip(2).map(|(i, c)| (c.clone(), i)).collect();
    }

    fn normalize(&self, token: &str) -> String {
        if self.lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        }
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.word_index.get(&self.normalize(token)).copied().unwrap_or(UNK_ID)
    }

    pub fn char_seq(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.char_index.get(&c.to_string()).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }
}

/// How per-task loss weights are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// Every task weighs 1.
    Uniform,
    /// Weights proportional to 1/n over the training-set size n, normalized
    /// so the largest weight is 1.
    #[default]
    InverseSize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub group: String,
    pub slot_labels: LabelMap,
    pub intent_labels: LabelMap,
    pub alpha: f64,
    pub train_size: usize,
}

/// Tasks partitioned into groups, with per-task label spaces and loss weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
    /// (group name, member task indices); every task appears exactly once.
    pub groups: Vec<(String, Vec<usize>)>,
}

impl TaskRegistry {
    /// Build from named, grouped training corpora.
    pub fn build(tasks: &[(String, String, &[Utterance])], alpha_mode: AlphaMode) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("registry needs at least one task".into()));
        }
        let mut specs = Vec::new();
        for (name, group, train) in tasks {
            if train.is_empty() {
                return Err(Error::Data(format!("task {name} has an empty training set")));
            }
            let slot_labels =
                LabelMap::from_labels(train.iter().flat_map(|u| u.slots.iter().map(String::as_str)));
            let intent_labels = LabelMap::from_labels(train.iter().map(|u| u.intent.as_str()));
            specs.push(TaskSpec {
                name: name.clone(),
                group: group.clone(),
                slot_labels,
                intent_labels,
                alpha: 1.0,
                train_size: train.len(),
            });
        }
        if let AlphaMode::InverseSize = alpha_mode {
            let min_size = specs.iter().map(|s| s.train_size).min().unwrap() as f64;
            for s in &mut specs {
                s.alpha = min_size / s.train_size as f64;
            }
        }

        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == s.group) {
                Some((_, members)) => members.push(i),
                None => groups.push((s.group.clone(), vec![i])),
            }
        }
        Ok(TaskRegistry { tasks: specs, groups })
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn group_of(&self, task: usize) -> usize {
        self.groups
            .iter()
            .position(|(_, members)| members.contains(&task))
            .expect("registry error: task not in any group")
    }

    pub fn alpha(&self, task: usize) -> f64 {
        self.tasks[task].alpha
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// One single-task batch in padded matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task: usize,
    /// `[B x T_max]`, padded with PAD (0).
    pub word_ids: Vec<Vec<usize>>,
    /// Per utterance, per token: character ids (empty at pad positions).
    pub char_ids: Vec<Vec<Vec<usize>>>,
    /// `[B x T_max]`; true marks a real token, always a contiguous prefix.
    pub mask: Vec<Vec<bool>>,
    /// Gold slot ids padded with 0.
    pub slot_ids: Vec<Vec<usize>>,
    pub intent_ids: Vec<usize>,
    /// Gold slot tags at true length, for evaluation.
    pub slot_tags: Vec<Vec<String>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.word_ids.len()
    }

    pub fn len_of(&self, row: usize) -> usize {
        self.mask[row].iter().take_while(|&&m| m).count()
    }
}

/// Encode an utterance against the vocab and a task's label maps.
/// Fails if a gold label is missing from the task's label space.
pub fn encode_utterance(
    u: &Utterance,
    vocab: &Vocab,
    task: &TaskSpec,
) -> Result<(Vec<usize>, Vec<Vec<usize>>, Vec<usize>, usize)> {
    let word_ids: Vec<usize> = u.tokens.iter().map(|t| vocab.word_id(t)).collect();
    let char_ids: Vec<Vec<usize>> = u.tokens.iter().map(|t| vocab.char_seq(t)).collect();
    let slot_ids = u
        .slots
        .iter()
        .map(|s| {
            task.slot_labels.id(s).ok_or_else(|| {
                Error::Compat(format!("slot label {s:?} unknown to task {}", task.name))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let intent_id = task.intent_labels.id(&u.intent).ok_or_else(|| {
        Error::Compat(format!("intent label {:?} unknown to task {}", u.intent, task.name))
    })?;
    Ok((word_ids, char_ids, slot_ids, intent_id))
}

/// Shuffle (seeded) and partition one task's corpus into padded batches of
/// at most `batch_size`; every utterance lands in exactly one batch.
pub fn make_batches(
    corpus: &[Utterance],
    vocab: &Vocab,
    task_index: usize,
    task: &TaskSpec,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    assert!(batch_size >= 1, "contract error: batch size must be at least 1");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let t_max = chunk.iter().map(|&i| corpus[i].len()).max().unwrap_or(0);
        let mut batch = Batch {
            task: task_index,
            word_ids: Vec::with_capacity(chunk.len()),
            char_ids: Vec::with_capacity(chunk.len()),
            mask: Vec::with_capacity(chunk.len()),
            slot_ids: Vec::with_capacity(chunk.len()),
            intent_ids: Vec::with_capacity(chunk.len()),
            slot_tags: Vec::with_capacity(chunk.len()),
        };
        for &i in chunk {
            let u = &corpus[i];
            let (mut word_ids, mut char_ids, mut slot_ids, intent_id) =
                encode_utterance(u, vocab, task)?;
            let len = u.len();
            word_ids.resize(t_max, PAD_ID);
            char_ids.resize(t_max, Vec::new());
            slot_ids.resize(t_max, 0);
            let mut mask = vec![true; len];
            mask.resize(t_max, false);
            batch.word_ids.push(word_ids);
            batch.char_ids.push(char_ids);
            batch.mask.push(mask);
            batch.slot_ids.push(slot_ids);
            batch.intent_ids.push(intent_id);
            batch.slot_tags.push(u.slots.clone());
        }
        batches.push(batch);
    }
    Ok(batches)
}
