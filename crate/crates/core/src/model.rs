//! Shared data model: sample identity, corpus records and the labeled /
//! unlabeled partition that every pipeline step reads and advances.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::pipeline::{PipelineConfig, Strategy};
use crate::select::SelectionBatch;

/// Opaque sample identifier. Ordering is byte-lexicographic and is the
/// tie-break order used throughout selection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(String);

impl SampleId {
    pub fn new(id: impl Into<String>) -> Self {
        SampleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_owned())
    }
}

impl From<String> for SampleId {
    fn from(s: String) -> Self {
        SampleId(s)
    }
}

impl Borrow<str> for SampleId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: SampleId,
    pub embedding_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_text: Option<String>,
}

impl SampleRecord {
    pub fn new(id: impl Into<SampleId>, embedding_index: usize) -> Self {
        SampleRecord {
            id: id.into(),
            embedding_index,
            duration_s: None,
            audio_ref: None,
            oracle_text: None,
        }
    }
}

/// The fixed set of samples a run works over.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub source_tag: String,
    pub entries: Vec<SampleRecord>,
}

impl CorpusManifest {
    /// Checks id uniqueness, embedding-row uniqueness and (when `rows` is
    /// known) that every embedding index resolves.
    pub fn validate(&self, rows: Option<usize>) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut used: BTreeMap<usize, &SampleId> = BTreeMap::new();
        for rec in &self.entries {
            if !ids.insert(&rec.id) {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
            if let Some(d) = rec.duration_s {
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "duration_s of `{}` must be a non-negative number",
                        rec.id
                    )));
                }
            }
            if let Some(rows) = rows {
                if rec.embedding_index >= rows {
                    return Err(Error::DanglingEmbedding {
                        id: rec.id.clone(),
                        index: rec.embedding_index,
                        rows,
                    });
                }
            }
            if let Some(first) = used.insert(rec.embedding_index, &rec.id) {
                return Err(Error::SharedEmbedding {
                    index: rec.embedding_index,
                    first: first.clone(),
                    second: rec.id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeSet<SampleId> {
        self.entries.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &SampleId) -> Option<&SampleRecord> {
        self.entries.iter().find(|r| &r.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Five-number summary plus mean of a score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreDigest {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl ScoreDigest {
    /// Quartiles use linear interpolation between order statistics.
    /// Returns `None` for an empty input.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(ScoreDigest {
            count: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSummary {
    pub iteration: u32,
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Scores of the chosen samples.
    pub batch_scores: Option<ScoreDigest>,
    /// Scores over the whole scored pool at selection time.
    pub pool_scores: Option<ScoreDigest>,
}

/// A label submitted through the annotation service, not yet applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub text: String,
    pub submitted_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineState {
    pub iteration: u32,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub corpus: CorpusManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_path: Option<String>,
    pub labeled_ids: BTreeSet<SampleId>,
    pub unlabeled_ids: BTreeSet<SampleId>,
    pub clusters: Option<ClusterAssignment>,
    pub pending_batch: Option<SelectionBatch>,
    pub labels: BTreeMap<SampleId, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<SampleId, Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_file: Option<String>,
    pub history: Vec<IterationSummary>,
}

impl PipelineState {
    /// Fresh state: every corpus id unlabeled, iteration 0, no clusters.
    pub fn new(corpus: CorpusManifest, config: PipelineConfig) -> Self {
        let unlabeled_ids = corpus.ids();
        PipelineState {
            iteration: 0,
            config_hash: config.hash(),
            config,
            corpus,
            embeddings_path: None,
            labeled_ids: BTreeSet::new(),
            unlabeled_ids,
            clusters: None,
            pending_batch: None,
            labels: BTreeMap::new(),
            annotations: BTreeMap::new(),
            score_file: None,
            history: Vec::new(),
        }
    }

    /// Moves the batch ids from the unlabeled pool into the labeled set,
    /// records their labels and advances the iteration counter.
    ///
    /// The receiver is left untouched; on error nothing changes.
    pub fn apply_batch_labels(
        &self,
        batch: &SelectionBatch,
        labels: &BTreeMap<SampleId, String>,
    ) -> Result<PipelineState> {
        let ids: Vec<&SampleId> = batch.ids().collect();

        let already: Vec<SampleId> = ids
            .iter()
            .filter(|id| self.labeled_ids.contains(**id))
            .map(|id| (*id).clone())
            .collect();
        if !already.is_empty() {
            return Err(Error::AlreadyLabeled(already));
        }
        let outside: Vec<SampleId> = ids
            .iter()
            .filter(|id| !self.unlabeled_ids.contains(**id))
            .map(|id| (*id).clone())
            .collect();
        if !outside.is_empty() {
            return Err(Error::NotInPool(outside));
        }
        if let Some(pending) = &self.pending_batch {
            if !pending.same_selection(batch) {
                return Err(Error::PendingBatch(pending.iteration));
            }
        }
        let missing: Vec<SampleId> = ids
            .iter()
            .filter(|id| !labels.contains_key(**id))
            .map(|id| (*id).clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteBatch(missing));
        }
        let batch_set: BTreeSet<&SampleId> = ids.iter().copied().collect();
        let extra: Vec<SampleId> = labels
            .keys()
            .filter(|id| !batch_set.contains(id))
            .cloned()
            .collect();
        if !extra.is_empty() {
            return Err(Error::UnexpectedLabels(extra));
        }

        let mut next = self.clone();
        for id in ids {
            next.unlabeled_ids.remove(id);
            next.labeled_ids.insert(id.clone());
            next.labels.insert(id.clone(), labels[id].clone());
            next.annotations.remove(id);
        }
        next.history.push(IterationSummary {
            iteration: self.iteration,
            strategy: batch.strategy,
            batch_size: batch.len(),
            batch_scores: ScoreDigest::from_values(batch.chosen.iter().filter_map(|c| c.score)),
            pool_scores: batch.pool_scores,
        });
        next.iteration += 1;
        next.pending_batch = None;
        next.score_file = None;
        Ok(next)
    }

    /// Reports every invariant violation; an empty list means the state is
    /// consistent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let corpus = self.corpus.ids();

        let overlap: Vec<SampleId> = self
            .labeled_ids
            .intersection(&self.unlabeled_ids)
            .cloned()
            .collect();
        if !overlap.is_empty() {
            out.push(Violation::new(ViolationKind::PartitionOverlap, overlap));
        }

        let missing: Vec<SampleId> = corpus
            .iter()
            .filter(|id| !self.labeled_ids.contains(*id) && !self.unlabeled_ids.contains(*id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            out.push(Violation::new(ViolationKind::PartitionIncomplete, missing));
        }

        let unknown: BTreeSet<SampleId> = self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .filter(|id| !corpus.contains(*id))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            out.push(Violation::new(
                ViolationKind::UnknownId,
                unknown.into_iter().collect(),
            ));
        }

        let unlabeled_ids: Vec<SampleId> = self
            .labeled_ids
            .iter()
            .filter(|id| !self.labels.contains_key(*id))
            .cloned()
            .collect();
        if !unlabeled_ids.is_empty() {
            out.push(Violation::new(ViolationKind::MissingLabel, unlabeled_ids));
        }

        let stray: Vec<SampleId> = self
            .labels
            .keys()
            .filter(|id| !self.labeled_ids.contains(*id))
            .cloned()
            .collect();
        if !stray.is_empty() {
            out.push(Violation::new(ViolationKind::StrayLabel, stray));
        }

        if let Some(batch) = &self.pending_batch {
            let off: Vec<SampleId> = batch
                .ids()
                .filter(|id| !self.unlabeled_ids.contains(*id))
                .cloned()
                .collect();
            if !off.is_empty() {
                out.push(Violation::new(ViolationKind::PendingOutsidePool, off));
            }
        }

        if self.history.len() != self.iteration as usize {
            out.push(Violation {
                kind: ViolationKind::HistoryLength,
                ids: Vec::new(),
                detail: format!(
                    "history has {} entries at iteration {}",
                    self.history.len(),
                    self.iteration
                ),
            });
        }
        out
    }

    pub fn pending_ids(&self) -> BTreeSet<SampleId> {
        self.pending_batch
            .as_ref()
            .map(|b| b.ids().cloned().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    PartitionOverlap,
    PartitionIncomplete,
    UnknownId,
    MissingLabel,
    StrayLabel,
    PendingOutsidePool,
    HistoryLength,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ids: Vec<SampleId>,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, ids: Vec<SampleId>) -> Self {
        let detail = format!("{kind:?}: {} id(s)", ids.len());
        Violation { kind, ids, detail }
    }
}
