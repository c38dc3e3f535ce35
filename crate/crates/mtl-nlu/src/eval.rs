//! Metrics: chunk-level slot F1 with conlleval semantics, intent accuracy,
//! and per-task / per-group / aggregate reporting.

use serde::{Deserialize, Serialize};

/// A labeled span: inclusive start, exclusive end token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChunkSpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> BioTag<'_> {
    if let Some(label) = tag.strip_prefix("B-") {
        BioTag::Begin(label)
    } else if let Some(label) = tag.strip_prefix("I-") {
        BioTag::Inside(label)
    } else {
        // "O" and anything unrecognized score as outside
        BioTag::Outside
    }
}

/// Extract labeled chunks from a BIO tag sequence.
///
/// B-X starts a chunk; I-X continues a chunk of label X; an I-X without a
/// compatible open chunk starts a new one (the conlleval repair); O or a
/// label change closes the open chunk.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> Vec<ChunkSpan> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref()) {
            BioTag::Outside => {
                if let Some((label, start)) = open.take() {
                    chunks.push(ChunkSpan { label, start, end: i });
                }
            }
            BioTag::Begin(label) => {
                if let Some((l, start)) = open.take() {
                    chunks.push(ChunkSpan { label: l, start, end: i });
                }
                open = Some((label.to_string(), i));
            }
            BioTag::Inside(label) => match &open {
                Some((l, _)) if l == label => {}
                _ => {
                    if let Some((l, start)) = open.take() {
                        chunks.push(ChunkSpan { label: l, start, end: i });
                    }
                    open = Some((label.to_string(), i));
                }
            },
        }
    }
    if let Some((label, start)) = open {
        chunks.push(ChunkSpan { label, start, end: tags.len() });
    }
    chunks
}

/// Render chunks back into a BIO tag sequence of the given length.
pub fn render_tags(chunks: &[ChunkSpan], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for ch in chunks {
        tags[ch.start] = format!("B-{}", ch.label);
        for t in ch.start + 1..ch.end {
            tags[t] = format!("I-{}", ch.label);
        }
    }
    tags
}

/// Micro-averaged chunk F1 over a corpus, as a percentage.
/// When both sides contain zero chunks the score is 100.
pub fn slot_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> f64 {
    assert_eq!(
        gold.len(),
        pred.len(),
        "contract error: {} gold vs {} predicted utterances",
        gold.len(),
        pred.len()
    );
    let mut gold_total = 0usize;
    let mut pred_total = 0usize;
    let mut correct = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        assert_eq!(
            g.len(),
            p.len(),
            "contract error: tag length mismatch {} vs {}",
            g.len(),
            p.len()
        );
        let gc = extract_chunks(g);
        let pc = extract_chunks(p);
        gold_total += gc.len();
        pred_total += pc.len();
        correct += pc.iter().filter(|c| gc.contains(c)).count();
    }
    if gold_total == 0 && pred_total == 0 {
        return 100.0;
    }
    if correct == 0 {
        return 0.0;
    }
    let precision = correct as f64 / pred_total as f64;
    let recall = correct as f64 / gold_total as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// Percentage of utterances whose predicted intent matches gold.
pub fn intent_accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> f64 {
    assert!(!gold.is_empty(), "contract error: empty evaluation set");
    assert_eq!(
        gold.len(),
        pred.len(),
        "contract error: {} gold vs {} predicted intents",
        gold.len(),
        pred.len()
    );
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    100.0 * correct as f64 / gold.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub group: String,
    pub intent_acc: f64,
    pub slot_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub intent_acc: f64,
    pub slot_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskMetrics>,
    pub groups: Vec<GroupMetrics>,
    pub mean_intent_acc: f64,
    pub mean_slot_f1: f64,
    pub median_intent_acc: f64,
    pub median_slot_f1: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median over per-task values; even counts take the lower-middle element.
fn lower_median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[(sorted.len() - 1) / 2]
}

/// Aggregate per-task metrics into group means and overall mean/median.
/// All aggregation is over per-task values, never pooled utterances.
pub fn aggregate_report(tasks: &[TaskMetrics]) -> MetricReport {
    assert!(!tasks.is_empty(), "contract error: no task metrics to aggregate");
    let mut group_names = Vec::new();
    for t in tasks {
        if !group_names.contains(&t.group) {
            group_names.push(t.group.clone());
        }
    }
    let groups = group_names
        .into_iter()
        .map(|g| {
            let accs: Vec<f64> =
                tasks.iter().filter(|t| t.group == g).map(|t| t.intent_acc).collect();
            let f1s: Vec<f64> = tasks.iter().filter(|t| t.group == g).map(|t| t.slot_f1).collect();
            GroupMetrics { group: g, intent_acc: mean(&accs), slot_f1: mean(&f1s) }
        })
        .collect();

    let accs: Vec<f64> = tasks.iter().map(|t| t.intent_acc).collect();
    let f1s: Vec<f64> = tasks.iter().map(|t| t.slot_f1).collect();
    MetricReport {
        tasks: tasks.to_vec(),
        groups,
        mean_intent_acc: mean(&accs),
        mean_slot_f1: mean(&f1s),
        median_intent_acc: lower_median(&accs),
        median_slot_f1: lower_median(&f1s),
    }
}

impl MetricReport {
    /// Aligned plain-text table with task, group, and overall rows.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .tasks
            .iter()
            .map(|t| t.task.len())
            .chain(self.groups.iter().map(|g| g.group.len() + 6))
            .chain(std::iter::once("median".len()))
            .max()
            .unwrap_or(6)
            .max(6);
        out.push_str(&format!("{:<width$}  {:>10}  {:>8}\n", "task", "intent_acc", "slot_f1"));
        for t in &self.tasks {
            out.push_str(&format!(
                "{:<width$}  {:>10.2}  {:>8.2}\n",
                t.task, t.intent_acc, t.slot_f1
            ));
        }
        for g in &self.groups {
            out.push_str(&format!(
                "{:<width$}  {:>10.2}  {:>8.2}\n",
                format!("group:{}", g.group),
                g.intent_acc,
                g.slot_f1
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>10.2}  {:>8.2}\n",
            "mean", self.mean_intent_acc, self.mean_slot_f1
        ));
        out.push_str(&format!(
            "{:<width$}  {:>10.2}  {:>8.2}\n",
            "median", self.median_intent_acc, self.median_slot_f1
        ));
        out
    }

    /// Machine-readable copy: one tab-separated record per row.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("scope\tname\tgroup\tintent_acc\tslot_f1\n");
        for t in &self.tasks {
            out.push_str(&format!(
                "task\t{}\t{}\t{}\t{}\n",
                t.task, t.group, t.intent_acc, t.slot_f1
            ));
        }
        for g in &self.groups {
            out.push_str(&format!(
                "group\t{}\t{}\t{}\t{}\n",
                g.group, g.group, g.intent_acc, g.slot_f1
            ));
        }
        out.push_str(&format!(
            "overall\tmean\t-\t{}\t{}\n",
            self.mean_intent_acc, self.mean_slot_f1
        ));
        out.push_str(&format!(
            "overall\tmedian\t-\t{}\t{}\n",
            self.median_intent_acc, self.median_slot_f1
        ));
        out
    }
}
