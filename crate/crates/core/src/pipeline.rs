//! End-to-end driver: clustering cold start, the scored batch loop, the
//! transcriber hand-off and label application.
//!
//! The engine never runs a speech model. Before each scored iteration it
//! writes a [`TranscriberRequest`]; an external process answers with a
//! committee file (one reference plus `T` dropout hypotheses per sample).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{dbscan, default_eps, ClusterAssignment, ClusterId, ClusterParams, Metric};
use crate::error::{Error, Result};
use crate::metrics::{score_committee, NormalizeConfig};
use crate::model::{CorpusManifest, PipelineState, SampleId, ScoreDigest};
use crate::sampling::{draw_random, plan_quotas, QuotaPlan, DEFAULT_BETA, DEFAULT_GAMMA};
use crate::select::{
    entropy_scores, select_isolated_first_stage, select_random, select_top_global,
    select_top_uncertain_per_cluster, smca_scores, subsample_for_scoring, SelectionBatch,
};
use crate::store::{write_json, CommitteeArtifact, EmbeddingMatrix, DEFAULT_COMMITTEE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Committee WER disagreement, top-k within each cluster.
    #[default]
    Proposed,
    Random,
    /// Single dropout member scored by CMER, global top-k.
    Smca,
    /// Mean token entropy, global top-k.
    Entropy,
    /// Cold-start cluster draw repeated every iteration.
    IsolatedFirstStage,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Proposed,
        Strategy::Random,
        Strategy::Smca,
        Strategy::Entropy,
        Strategy::IsolatedFirstStage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Proposed => "proposed",
            Strategy::Random => "random",
            Strategy::Smca => "smca",
            Strategy::Entropy => "entropy",
            Strategy::IsolatedFirstStage => "isolated_first_stage",
        }
    }

    pub fn needs_committee(self) -> bool {
        matches!(self, Strategy::Proposed | Strategy::Smca | Strategy::Entropy)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Neighborhood radius; derived from the data when unset.
    pub eps: Option<f64>,
    pub min_points: usize,
    pub metric: Metric,
    /// Treat DBSCAN noise as one more sampling group.
    pub include_noise: bool,
    pub eps_sample: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps: None,
            min_points: 5,
            metric: Metric::Cosine,
            include_noise: true,
            eps_sample: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub target_per_iteration: usize,
    /// Number of scored iterations after the cold start.
    pub iterations: u32,
    pub committee_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub cluster: ClusterConfig,
    pub normalize: NormalizeConfig,
    pub strategy: Strategy,
    pub scoring_fraction: f64,
    pub seed: u64,
    /// Let the annotation loop advance with unlabeled tasks, returning them
    /// to the pool.
    pub allow_skip: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_per_iteration: 643,
            iterations: 3,
            committee_size: DEFAULT_COMMITTEE_SIZE,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            cluster: ClusterConfig::default(),
            normalize: NormalizeConfig::default(),
            strategy: Strategy::Proposed,
            scoring_fraction: 1.0,
            seed: 0,
            allow_skip: false,
        }
    }
}

impl PipelineConfig {
    /// SHA-256 over the canonical (key-sorted) JSON encoding.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let text = serde_json::to_string(&value).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.committee_size == 0 {
            return Err(Error::InvalidParameter("committee_size must be at least 1".into()));
        }
        if !(self.scoring_fraction > 0.0 && self.scoring_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "scoring_fraction must be in (0, 1], got {}",
                self.scoring_fraction
            )));
        }
        if !self.beta.is_finite() || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter("beta and gamma must be finite".into()));
        }
        if let Some(eps) = self.cluster.eps {
            if !(eps > 0.0) {
                return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
            }
        }
        if self.cluster.min_points == 0 {
            return Err(Error::InvalidParameter("min_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent random stream for one (purpose, strategy, iteration).
pub fn derive_seed(base: u64, purpose: &str, strategy: Strategy, iteration: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(strategy.as_str().as_bytes());
    h.update(iteration.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn cluster_params(config: &PipelineConfig, embeddings: &EmbeddingMatrix) -> ClusterParams {
    let c = &config.cluster;
    let eps = c.eps.unwrap_or_else(|| {
        default_eps(
            embeddings,
            c.metric,
            c.min_points.saturating_sub(1).max(1),
            c.eps_sample,
            derive_seed(config.seed, "eps", config.strategy, 0),
        )
    });
    ClusterParams {
        eps,
        min_points: c.min_points,
        metric: c.metric,
    }
}

pub fn cluster_corpus(config: &PipelineConfig, embeddings: &EmbeddingMatrix) -> Result<ClusterAssignment> {
    dbscan(embeddings, &cluster_params(config, embeddings))
}

/// Clusters the corpus and draws the cold-start batch. The returned state
/// is at iteration 0 with that batch pending.
pub fn run_stage1(
    config: &PipelineConfig,
    manifest: &CorpusManifest,
    embeddings: &EmbeddingMatrix,
) -> Result<(PipelineState, SelectionBatch)> {
    config.validate()?;
    let ids: BTreeSet<&SampleId> = embeddings.ids().iter().collect();
    let missing: Vec<SampleId> = manifest
        .entries
        .iter()
        .filter(|r| !ids.contains(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} manifest id(s) have no embedding row",
            missing.len()
        )));
    }
    let mut state = PipelineState::new(manifest.clone(), config.clone());
    state.clusters = Some(cluster_corpus(config, embeddings)?);
    let batch = select_initial(&state)?;
    state.pending_batch = Some(batch.clone());
    Ok((state, batch))
}

fn quota_plan_for(config: &PipelineConfig, members: &BTreeMap<ClusterId, Vec<SampleId>>) -> QuotaPlan {
    let sizes = members.iter().map(|(k, v)| (*k, v.len())).collect();
    plan_quotas(&sizes, config.target_per_iteration, config.beta, config.gamma)
}

/// Cold-start batch for the current pool. The random baseline draws from
/// the whole pool; every other strategy uses the per-cluster quota draw.
pub fn select_initial(state: &PipelineState) -> Result<SelectionBatch> {
    let config = &state.config;
    let h = state.iteration;
    let seed = derive_seed(config.seed, "initial", config.strategy, h);
    if config.strategy == Strategy::Random {
        return Ok(select_random(&state.unlabeled_ids, config.target_per_iteration, seed, h));
    }
    let clusters = state.clusters.as_ref().ok_or(Error::MissingClusters)?;
    let members = clusters.available(&state.unlabeled_ids, config.cluster.include_noise);
    let plan = quota_plan_for(config, &members);
    Ok(draw_random(&members, &plan, seed, h, config.strategy))
}

/// Ids whose committee outputs the next selection needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriberRequest {
    pub iteration: u32,
    #[serde(rename = "expected_T")]
    pub expected_t: usize,
    pub ids: Vec<SampleId>,
}

/// The iteration the next selection will run at: a pending batch is
/// assumed labeled first.
fn next_iteration(state: &PipelineState) -> u32 {
    state.iteration + u32::from(state.pending_batch.is_some())
}

/// Pool the next selection draws from, grouped for the proposed strategy
/// (after the scoring subsample) or as a single flat set otherwise.
fn scoring_pool(state: &PipelineState, h: u32) -> Result<ScoringPool> {
    let config = &state.config;
    let pending = state.pending_ids();
    let pool: BTreeSet<SampleId> = state.unlabeled_ids.difference(&pending).cloned().collect();
    match config.strategy {
        Strategy::Proposed => {
            let clusters = state.clusters.as_ref().ok_or(Error::MissingClusters)?;
            let members = clusters.available(&pool, config.cluster.include_noise);
            let seed = derive_seed(config.seed, "subsample", config.strategy, h);
            Ok(ScoringPool::Clustered(subsample_for_scoring(&members, config.scoring_fraction, seed)?))
        }
        Strategy::Smca | Strategy::Entropy => Ok(ScoringPool::Flat(pool)),
        Strategy::Random | Strategy::IsolatedFirstStage => Ok(ScoringPool::Flat(BTreeSet::new())),
    }
}

enum ScoringPool {
    Clustered(BTreeMap<ClusterId, Vec<SampleId>>),
    Flat(BTreeSet<SampleId>),
}

impl ScoringPool {
    fn ids(&self) -> Vec<SampleId> {
        match self {
            ScoringPool::Clustered(m) => {
                let mut v: Vec<SampleId> = m.values().flatten().cloned().collect();
                v.sort();
                v
            }
            ScoringPool::Flat(s) => s.iter().cloned().collect(),
        }
    }
}

pub fn transcriber_request(state: &PipelineState) -> Result<TranscriberRequest> {
    let h = next_iteration(state);
    let ids = if state.config.strategy.needs_committee() && h >= 1 && h <= state.config.iterations {
        scoring_pool(state, h)?.ids()
    } else {
        Vec::new()
    };
    Ok(TranscriberRequest {
        iteration: h,
        expected_t: state.config.committee_size,
        ids,
    })
}

pub fn emit_transcriber_request(state: &PipelineState, path: impl AsRef<Path>) -> Result<TranscriberRequest> {
    let req = transcriber_request(state)?;
    write_json(path, &req)?;
    Ok(req)
}

/// Scores the current pool from committee artifacts with the configured
/// strategy's measure. Strategies that need no committee score nothing.
pub fn score_pool(
    state: &PipelineState,
    committee: &BTreeMap<SampleId, CommitteeArtifact>,
    workers: usize,
) -> Result<BTreeMap<SampleId, f64>> {
    let config = &state.config;
    if !config.strategy.needs_committee() {
        return Ok(BTreeMap::new());
    }
    let ids = scoring_pool(state, state.iteration)?.ids();
    let missing: Vec<SampleId> = ids.iter().filter(|id| !committee.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let pool: BTreeSet<SampleId> = ids.into_iter().collect();
    match config.strategy {
        Strategy::Proposed => {
            let scores = score_committee(pool.iter().map(|id| &committee[id]), &config.normalize, workers)?;
            Ok(scores.into_iter().map(|(id, s)| (id, s.value)).collect())
        }
        Strategy::Smca => smca_scores(committee, &pool, &config.normalize),
        Strategy::Entropy => entropy_scores(committee, &pool),
        Strategy::Random | Strategy::IsolatedFirstStage => unreachable!("no committee needed"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage2Outcome {
    Selected {
        state: Box<PipelineState>,
        batch: SelectionBatch,
    },
    /// All configured iterations have been labeled.
    Complete,
}

/// Selects the next scored batch from precomputed `scores` (ignored by
/// strategies that need none) and marks it pending.
pub fn select_batch(state: &PipelineState, scores: &BTreeMap<SampleId, f64>) -> Result<Stage2Outcome> {
    if let Some(p) = &state.pending_batch {
        return Err(Error::PendingBatch(p.iteration));
    }
    let h = state.iteration;
    if h == 0 {
        return Err(Error::InvalidParameter(
            "the cold-start batch must be labeled before scored selection".into(),
        ));
    }
    let config = &state.config;
    if h > config.iterations {
        return Ok(Stage2Outcome::Complete);
    }
    let target = config.target_per_iteration;
    let batch = match (config.strategy, scoring_pool(state, h)?) {
        (Strategy::Proposed, ScoringPool::Clustered(members)) => {
            let plan = quota_plan_for(config, &members);
            let mut b = select_top_uncertain_per_cluster(scores, &members, &plan, h)?;
            b.pool_scores = ScoreDigest::from_values(members.values().flatten().map(|id| scores[id]));
            b
        }
        (Strategy::Smca | Strategy::Entropy, ScoringPool::Flat(pool)) => {
            let mut b = select_top_global(scores, &pool, target, config.strategy, h)?;
            b.pool_scores = ScoreDigest::from_values(pool.iter().map(|id| scores[id]));
            b
        }
        (Strategy::Random, _) => select_random(
            &state.unlabeled_ids,
            target,
            derive_seed(config.seed, "batch", config.strategy, h),
            h,
        ),
        (Strategy::IsolatedFirstStage, _) => {
            let clusters = state.clusters.as_ref().ok_or(Error::MissingClusters)?;
            let members = clusters.available(&state.unlabeled_ids, config.cluster.include_noise);
            let plan = quota_plan_for(config, &members);
            select_isolated_first_stage(&members, &plan, derive_seed(config.seed, "batch", config.strategy, h), h)
        }
        _ => unreachable!("scoring pool shape follows strategy"),
    };
    let mut next = state.clone();
    next.pending_batch = Some(batch.clone());
    Ok(Stage2Outcome::Selected {
        state: Box::new(next),
        batch,
    })
}

/// Scores the pool and selects the next batch in one step.
pub fn run_stage2_iteration(
    state: &PipelineState,
    committee: &BTreeMap<SampleId, CommitteeArtifact>,
    workers: usize,
) -> Result<Stage2Outcome> {
    if let Some(p) = &state.pending_batch {
        return Err(Error::PendingBatch(p.iteration));
    }
    if state.iteration > state.config.iterations {
        return Ok(Stage2Outcome::Complete);
    }
    let scores = score_pool(state, committee, workers)?;
    select_batch(state, &scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels come from each sample's stored oracle transcription.
    Oracle,
    /// Labels come from annotators through the service.
    AnnotationQueue,
}

/// Oracle labels for every id of the pending batch.
pub fn oracle_labels(state: &PipelineState) -> Result<BTreeMap<SampleId, String>> {
    let batch = state.pending_batch.as_ref().ok_or(Error::NoPendingBatch)?;
    let by_id: BTreeMap<&SampleId, Option<&String>> = state
        .corpus
        .entries
        .iter()
        .map(|r| (&r.id, r.oracle_text.as_ref()))
        .collect();
    let mut labels = BTreeMap::new();
    let mut missing = Vec::new();
    for id in batch.ids() {
        match by_id.get(id).copied().flatten() {
            Some(t) => {
                labels.insert(id.clone(), t.clone());
            }
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingOracleText(missing));
    }
    Ok(labels)
}

/// Applies `labels` to the pending batch.
pub fn label_pending(state: &PipelineState, labels: &BTreeMap<SampleId, String>) -> Result<PipelineState> {
    let batch = state.pending_batch.as_ref().ok_or(Error::NoPendingBatch)?;
    state.apply_batch_labels(batch, labels)
}

/// Applies annotator submissions to the pending batch. Unlabeled tasks
/// block unless `allow_skip` is configured, in which case they go back to
/// the pool.
pub fn label_from_annotations(state: &PipelineState) -> Result<PipelineState> {
    let batch = state.pending_batch.as_ref().ok_or(Error::NoPendingBatch)?;
    let open = batch.ids().filter(|id| !state.annotations.contains_key(*id)).count();
    if open > 0 && !state.config.allow_skip {
        return Err(Error::TasksPending(open));
    }
    let mut trimmed = batch.clone();
    trimmed.chosen.retain(|c| state.annotations.contains_key(&c.id));
    let labels: BTreeMap<SampleId, String> = trimmed
        .ids()
        .map(|id| (id.clone(), state.annotations[id].text.clone()))
        .collect();
    let mut staged = state.clone();
    staged.pending_batch = Some(trimmed.clone());
    staged.apply_batch_labels(&trimmed, &labels)
}
