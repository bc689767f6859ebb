//! Accuracy, confusion matrices, per-group accuracy, nearest-neighbour
//! prediction over embeddings and embedding export.

mod curves;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Spectrogram;
use crate::data::{Dataset, LabeledExample};
use crate::loss::{mine_from_distances, DistanceMatrix, MiningError, MiningStrategy};
use crate::model::{Model, ModelError};
use crate::tensor::{Float, Tensor};

pub use curves::{emit_curves, metrics_csv, write_metrics_csv, METRICS_COLUMNS};

/// Group key for examples without a group tag.
pub const UNGROUPED: &str = "(none)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("embedding dimension mismatch: reference {reference}, query {query}")]
    Dimension { reference: usize, query: usize },
    #[error("invalid k-NN request: {0}")]
    Knn(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self {
            counts: vec![vec![0; c]; c],
            class_names,
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// `(C+1) × (C+1)` grid: a header row of predicted names, then one row
    /// per true class led by its name.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupStat {
    pub correct: u64,
    pub total: u64,
}

impl GroupStat {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Accuracy per group tag; untagged examples fall under [`UNGROUPED`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupReport {
    pub groups: BTreeMap<String, GroupStat>,
}

impl GroupReport {
    pub fn record(&mut self, group: Option<&str>, correct: bool) {
        let s = self
            .groups
            .entry(group.unwrap_or(UNGROUPED).to_owned())
            .or_default();
        s.total += 1;
        s.correct += correct as u64;
    }

    /// Group accuracies weighted by group size.
    pub fn weighted_accuracy(&self) -> f64 {
        let total: u64 = self.groups.values().map(|g| g.total).sum();
        if total == 0 {
            return 0.0;
        }
        self.groups
            .values()
            .map(|g| g.accuracy() * g.total as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("group,correct,total,accuracy\n");
        for (name, g) in &self.groups {
            writeln!(out, "{name},{},{},{}", g.correct, g.total, g.accuracy()).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub margin: f64,
    pub strategy: MiningStrategy,
    /// Chunk size for inference and for validation-time mining.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            margin: 0.2,
            strategy: MiningStrategy::SemiHard,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub groups: GroupReport,
    /// Cross entropy averaged over examples.
    pub mean_cel: f64,
    /// Hinge values summed over mined triplets, divided by their count; 0
    /// when nothing was mined.
    pub mean_triplet: f64,
    pub mined_triplets: usize,
    pub active_triplets: usize,
    pub predictions: Vec<usize>,
}

/// Stacks spectrograms into `[B, 1, n_mels, n_frames]`.
pub fn stack_features<T: Float>(specs: &[&Spectrogram]) -> Tensor<T> {
    let (m, f) = specs
        .first()
        .map(|s| (s.n_mels, s.n_frames))
        .unwrap_or((0, 0));
    let data = specs
        .iter()
        .flat_map(|s| {
            assert_eq!((s.n_mels, s.n_frames), (m, f), "spectrogram grids differ");
            s.values.iter().map(|&v| T::from_f64_lossy(v as f64))
        })
        .collect();
    Tensor::new(vec![specs.len(), 1, m, f], data).expect("consistent grid")
}

/// Embeddings `[N, D]` and logits `[N, C]`, computed in chunks. Each row
/// depends only on its own input, so chunking does not change results.
pub fn infer<T: Float>(
    model: &Model<T>,
    examples: &[LabeledExample],
    batch_size: usize,
) -> Result<(Tensor<T>, Tensor<T>), EvalError> {
    let (d, c) = (model.config.embedding_dim, model.config.n_classes);
    let mut emb = Vec::with_capacity(examples.len() * d);
    let mut logits = Vec::with_capacity(examples.len() * c);
    for chunk in examples.chunks(batch_size.max(1)) {
        let specs: Vec<&Spectrogram> = chunk.iter().map(|e| &e.features).collect();
        let (e, l) = model.forward(&stack_features(&specs))?;
        emb.extend_from_slice(e.data());
        logits.extend_from_slice(l.data());
    }
    let n = examples.len();
    Ok((
        Tensor::new(vec![n, d], emb).expect("embedding rows"),
        Tensor::new(vec![n, c], logits).expect("logit rows"),
    ))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `−log softmax(row)[label]` in `f64`.
pub fn cross_entropy_row<T: Float>(row: &[T], label: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    lse - row[label].as_f64()
}

/// Interleaves classes (first of each class, then second of each, ...), so
/// fixed-size chunks of the result mix classes.
pub fn stratified_order(labels: &[usize]) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let longest = by_class.values().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|r| by_class.values().filter_map(move |v| v.get(r).copied()))
        .collect()
}

/// Mined-triplet statistics over `embeddings`, chunked in stratified order:
/// `(hinge sum, mined, active)`.
pub fn triplet_statistics<T: Float>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    opts: &EvalOptions,
) -> (f64, usize, usize) {
    let order = stratified_order(labels);
    let (mut sum, mut mined, mut active) = (0.0, 0, 0);
    for chunk in order.chunks(opts.batch_size.max(2)) {
        let rows: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| embeddings.row(i).iter().map(|v| v.as_f64()).collect())
            .collect();
        let n = rows.len();
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sq[i * n + j] = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        let dist = DistanceMatrix::from_values(n, sq);
        let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        match mine_from_distances(&dist, &chunk_labels, opts.margin, opts.strategy) {
            Ok(set) => {
                for t in &set.triples {
                    let h =
                        dist.sq(t.anchor, t.positive) - dist.sq(t.anchor, t.negative) + opts.margin;
                    if h > 0.0 {
                        sum += h;
                        active += 1;
                    }
                }
                mined += set.len();
            }
            Err(MiningError::NoValidTriples | MiningError::BatchTooSmall(_)) => {}
            Err(e) => unreachable!("labels and rows agree: {e}"),
        }
    }
    (sum, mined, active)
}

/// Argmax predictions, confusion matrix, per-group accuracy, mean cross
/// entropy and mined-triplet loss over `dataset`. Augmentation never applies.
pub fn evaluate<T: Float>(
    model: &Model<T>,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n_classes = model.config.n_classes;
    if let Some(e) = dataset.examples.iter().find(|e| e.label >= n_classes) {
        return Err(EvalError::LabelOutOfRange {
            label: e.label,
            n_classes,
        });
    }
    let (emb, logits) = infer(model, &dataset.examples, opts.batch_size)?;
    let mut confusion = ConfusionMatrix::new(model.class_names.clone());
    let mut groups = GroupReport::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut ce_sum = 0.0;
    for (i, ex) in dataset.examples.iter().enumerate() {
        let row = logits.row(i);
        let pred = argmax(row);
        ce_sum += cross_entropy_row(row, ex.label);
        confusion.record(ex.label, pred);
        groups.record(ex.group.as_deref(), pred == ex.label);
        predictions.push(pred);
    }
    let (hinge_sum, mined, active) = triplet_statistics(&emb, &dataset.labels(), opts);
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        confusion,
        groups,
        mean_cel: ce_sum / dataset.len() as f64,
        mean_triplet: if mined == 0 {
            0.0
        } else {
            hinge_sum / mined as f64
        },
        mined_triplets: mined,
        active_triplets: active,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMetric {
    #[default]
    Euclidean,
    /// `1 − cos θ`; a zero vector has similarity 0 with everything.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfMatch {
    #[default]
    Allow,
    /// Queries are the reference set itself; query `i` never sees reference
    /// `i` (leave-one-out).
    Exclude,
}

fn knn_distance(metric: KnnMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        KnnMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        KnnMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// Exact k-nearest-neighbour labels. Equidistant references are ranked by
/// index; a vote tie goes to the smallest class index.
pub fn knn_classify<T: Float>(
    reference: &Tensor<T>,
    reference_labels: &[usize],
    queries: &Tensor<T>,
    k: usize,
    metric: KnnMetric,
    self_match: SelfMatch,
) -> Result<Vec<usize>, EvalError> {
    let (n_ref, n_q) = (reference.shape()[0], queries.shape()[0]);
    let (d_ref, d_q) = (reference.shape()[1], queries.shape()[1]);
    if d_ref != d_q {
        return Err(EvalError::Dimension {
            reference: d_ref,
            query: d_q,
        });
    }
    if reference_labels.len() != n_ref {
        return Err(EvalError::Knn(format!(
            "{} labels for {n_ref} references",
            reference_labels.len()
        )));
    }
    if self_match == SelfMatch::Exclude && n_q != n_ref {
        return Err(EvalError::Knn(
            "self-match exclusion needs queries identical to the reference set".into(),
        ));
    }
    let available = n_ref - usize::from(self_match == SelfMatch::Exclude);
    if n_ref == 0 || available == 0 {
        return Err(EvalError::Knn("empty reference set".into()));
    }
    if k == 0 || k > available {
        return Err(EvalError::Knn(format!(
            "k = {k} with {available} candidate references"
        )));
    }
    let to_f64 =
        |t: &Tensor<T>, i: usize| t.row(i).iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let refs: Vec<Vec<f64>> = (0..n_ref).map(|i| to_f64(reference, i)).collect();
    let n_classes = reference_labels.iter().max().map_or(0, |&m| m + 1);
    let mut out = Vec::with_capacity(n_q);
    for q in 0..n_q {
        let query = to_f64(queries, q);
        let mut ranked: Vec<(f64, usize)> = refs
            .iter()
            .enumerate()
            .filter(|&(r, _)| !(self_match == SelfMatch::Exclude && r == q))
            .map(|(r, v)| (knn_distance(metric, &query, v), r))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        for &(_, r) in &ranked[..k] {
            votes[reference_labels[r]] += 1;
        }
        out.push(argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / labels.len() as f64
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros
/// trimmed, exponent form outside `1e-5 ..= 1e9`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..9).contains(&exp) {
        trim(format!("{v:.*}", (8 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    }
}

/// TSV with header `id, label, group, e0 .. e{D-1}`, one row per example in
/// dataset order.
pub fn export_embeddings<T: Float>(
    model: &Model<T>,
    dataset: &Dataset,
    path: impl AsRef<Path>,
    batch_size: usize,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let d = model.config.embedding_dim;
    let mut out = String::from("id\tlabel\tgroup");
    for j in 0..d {
        write!(out, "\te{j}").unwrap();
    }
    out.push('\n');
    if !dataset.is_empty() {
        let (emb, _) = infer(model, &dataset.examples, batch_size)?;
        for (i, ex) in dataset.examples.iter().enumerate() {
            let label = dataset
                .class_names
                .get(ex.label)
                .map_or("?", String::as_str);
            write!(
                out,
                "{}\t{}\t{}",
                ex.id,
                label,
                ex.group.as_deref().unwrap_or("")
            )
            .unwrap();
            for v in emb.row(i) {
                write!(out, "\t{}", format_sig9(v.as_f64())).unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
