//! Desk-scale simulation: synthetic speaker-embedding corpora, a mock
//! dropout-committee transcriber and a coverage-based quality proxy that
//! stands in for the word error rate of a model trained on the labeled set.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::distance;
use crate::cluster::Metric;
use crate::error::{Error, Result};
use crate::model::{CorpusManifest, PipelineState, SampleId, SampleRecord};
use crate::pipeline::{
    label_pending, oracle_labels, run_stage1, run_stage2_iteration, transcriber_request, PipelineConfig,
    Stage2Outcome, Strategy,
};
use crate::store::{CommitteeArtifact, EmbeddingMatrix, RawEmbeddings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    /// Points generated per cluster, held-out test points included.
    pub points_per_cluster: Vec<usize>,
    /// Base word corruption rate per cluster; the last value repeats.
    pub difficulty: Vec<f64>,
    pub dim: usize,
    pub cluster_spread: f64,
    pub inter_cluster_distance: f64,
    pub vocab_size: usize,
    pub words_per_utterance: (usize, usize),
    /// Clusters smaller than this are underrepresented; a fraction of
    /// their points is held out as the test set.
    pub small_cluster_below: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            points_per_cluster: vec![120, 120, 120, 120, 15, 15, 15],
            difficulty: vec![0.12, 0.15, 0.18, 0.2, 0.4, 0.45, 0.5],
            dim: 16,
            cluster_spread: 1.0,
            inter_cluster_distance: 20.0,
            vocab_size: 200,
            words_per_utterance: (6, 14),
            small_cluster_below: 50,
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.points_per_cluster.is_empty() || self.points_per_cluster.contains(&0) {
            return bad("every cluster needs at least one point");
        }
        if self.dim == 0 || self.vocab_size < 2 {
            return bad("dim must be positive and vocab_size at least 2");
        }
        if !(self.cluster_spread > 0.0) || !(self.inter_cluster_distance > 0.0) {
            return bad("spread and inter-cluster distance must be positive");
        }
        let (lo, hi) = self.words_per_utterance;
        if lo == 0 || lo > hi {
            return bad("words_per_utterance must be a non-empty positive range");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        if self.difficulty.is_empty() || self.difficulty.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("difficulty values must lie in [0, 1]");
        }
        Ok(())
    }

    fn difficulty_of(&self, k: usize) -> f64 {
        self.difficulty[k.min(self.difficulty.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPoint {
    pub embedding: Vec<f64>,
    pub cluster: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub manifest: CorpusManifest,
    pub embeddings: EmbeddingMatrix,
    pub centroids: Vec<Vec<f64>>,
    /// Generating cluster of every corpus sample.
    pub truth: BTreeMap<SampleId, usize>,
    pub test_points: Vec<TestPoint>,
}

impl SyntheticCorpus {
    pub fn row_of(&self, id: &SampleId) -> Option<usize> {
        self.embeddings.ids().iter().position(|x| x == id)
    }

    /// f32 rows in manifest order, as the embedding file would hold them.
    pub fn raw_embeddings(&self) -> RawEmbeddings {
        let n = self.embeddings.len();
        let dim = self.embeddings.dim();
        RawEmbeddings {
            rows: n,
            dim,
            data: (0..n)
                .flat_map(|i| self.embeddings.row(i).iter().map(|&v| v as f32).collect::<Vec<_>>())
                .collect(),
        }
    }
}

fn centroids(spec: &SyntheticCorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = spec.points_per_cluster.len();
    let radius = spec.inter_cluster_distance / std::f64::consts::SQRT_2;
    if spec.dim >= k {
        // Orthogonal axes: every pair sits exactly inter_cluster_distance apart.
        (0..k)
            .map(|c| {
                let mut v = vec![0.0; spec.dim];
                v[c] = radius;
                v
            })
            .collect()
    } else {
        (0..k)
            .map(|_| {
                let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let norm = dir.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-12);
                dir.into_iter().map(|x| x / norm * radius).collect()
            })
            .collect()
    }
}

/// Gaussian blobs with random ground-truth word sequences as oracle text.
///
/// Embeddings are rounded through f32 so that a corpus written to disk and
/// read back is identical.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = centroids(spec, &mut rng);
    let noise = Normal::new(0.0, spec.cluster_spread).expect("positive spread");

    let mut points: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut test_points = Vec::new();
    for (k, &size) in spec.points_per_cluster.iter().enumerate() {
        let mut blob: Vec<Vec<f64>> = (0..size)
            .map(|_| {
                centers[k]
                    .iter()
                    .map(|c| f64::from((c + noise.sample(&mut rng)) as f32))
                    .collect()
            })
            .collect();
        if size < spec.small_cluster_below {
            let held = ((spec.holdout_fraction * size as f64).round() as usize).min(size.saturating_sub(1));
            for embedding in blob.drain(..held) {
                test_points.push(TestPoint { embedding, cluster: k });
            }
        }
        points.extend(blob.into_iter().map(|p| (k, p)));
    }
    points.shuffle(&mut rng);

    let (lo, hi) = spec.words_per_utterance;
    let mut entries = Vec::with_capacity(points.len());
    let mut truth = BTreeMap::new();
    let mut data = Vec::with_capacity(points.len() * spec.dim);
    for (i, (k, p)) in points.into_iter().enumerate() {
        let id = SampleId::new(format!("s{i:05}"));
        let words: Vec<String> = (0..rng.random_range(lo..=hi))
            .map(|_| format!("w{}", rng.random_range(0..spec.vocab_size)))
            .collect();
        let mut rec = SampleRecord::new(id.clone(), i);
        rec.oracle_text = Some(words.join(" "));
        rec.duration_s = Some(words.len() as f64 * 0.4);
        entries.push(rec);
        truth.insert(id, k);
        data.extend(p);
    }
    let ids = entries.iter().map(|r| r.id.clone()).collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        manifest: CorpusManifest {
            source_tag: format!("synthetic-{}", spec.seed),
            entries,
        },
        embeddings: EmbeddingMatrix::new(ids, spec.dim, data)?,
        centroids: centers,
        truth,
        test_points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockTranscriberSpec {
    /// Word-level corruption probability of each sample's dropout passes.
    pub per_sample_corruption: BTreeMap<SampleId, f64>,
    #[serde(rename = "T")]
    pub committee_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub entropy: EntropyModel,
}

/// Token entropy emitted by the mock: `scale * p` plus a per-sample offset
/// and per-token noise, floored at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyModel {
    pub scale: f64,
    pub sample_noise: f64,
    pub token_noise: f64,
}

impl Default for EntropyModel {
    fn default() -> Self {
        EntropyModel {
            scale: 2.0,
            sample_noise: 0.25,
            token_noise: 0.5,
        }
    }
}

fn sample_rng(seed: u64, tag: &str, id: &SampleId) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(id.as_str().as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Each word independently suffers, with probability `p`, a substitution,
/// a deletion or an insertion (equally likely).
pub fn corrupt(words: &[&str], p: f64, vocab_size: usize, rng: &mut impl Rng) -> Vec<String> {
    let p = p.clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(words.len() + 2);
    for &w in words {
        if !rng.random_bool(p) {
            out.push(w.to_owned());
            continue;
        }
        match rng.random_range(0..3) {
            0 => {
                let mut sub = format!("w{}", rng.random_range(0..vocab_size));
                if sub == w {
                    sub = format!("{w}x");
                }
                out.push(sub);
            }
            1 => {}
            _ => {
                out.push(w.to_owned());
                out.push(format!("w{}", rng.random_range(0..vocab_size)));
            }
        }
    }
    out
}

/// Committee artifacts for every sample in `spec.per_sample_corruption`.
/// The reference pass is corrupted at `p / 4`, each dropout pass at `p`.
/// Every sample has its own random stream, so an artifact does not depend
/// on which other ids were requested.
pub fn mock_committee(
    manifest: &CorpusManifest,
    spec: &MockTranscriberSpec,
    vocab_size: usize,
) -> Result<BTreeMap<SampleId, CommitteeArtifact>> {
    let texts: BTreeMap<&SampleId, &SampleRecord> = manifest.entries.iter().map(|r| (&r.id, r)).collect();
    let sample_noise = Normal::new(0.0, spec.entropy.sample_noise.max(0.0))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let token_noise = Normal::new(0.0, spec.entropy.token_noise.max(0.0))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for (id, &p) in &spec.per_sample_corruption {
        let Some(text) = texts.get(id).and_then(|r| r.oracle_text.as_deref()) else {
            missing.push(id.clone());
            continue;
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("corruption of `{id}` outside [0, 1]")));
        }
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut rng = sample_rng(spec.seed, "committee", id);
        let reference = corrupt(&words, p / 4.0, vocab_size, &mut rng);
        let hypotheses = (0..spec.committee_size)
            .map(|_| corrupt(&words, p, vocab_size, &mut rng).join(" "))
            .collect();
        let offset: f64 = sample_noise.sample(&mut rng);
        let token_entropies = (0..reference.len().max(1))
            .map(|_| (spec.entropy.scale * p + offset + token_noise.sample(&mut rng)).max(0.0))
            .collect();
        out.insert(
            id.clone(),
            CommitteeArtifact {
                sample_id: id.clone(),
                reference: reference.join(" "),
                hypotheses,
                token_entropies: Some(token_entropies),
            },
        );
    }
    if !missing.is_empty() {
        return Err(Error::MissingOracleText(missing));
    }
    Ok(out)
}

/// How hard each sample is for a model trained on the current labels.
///
/// The base rate grows with the sample's distance from its cluster centre
/// and scales with the cluster's difficulty. Labeled samples from the same
/// cluster shrink it towards 30% of the base.
pub fn corruption_rates(
    corpus: &SyntheticCorpus,
    labeled: &BTreeSet<SampleId>,
    ids: &[SampleId],
) -> BTreeMap<SampleId, f64> {
    let mut per_cluster = vec![0usize; corpus.centroids.len()];
    for id in labeled {
        if let Some(&k) = corpus.truth.get(id) {
            per_cluster[k] += 1;
        }
    }
    let row: BTreeMap<&SampleId, usize> = corpus.embeddings.ids().iter().enumerate().map(|(i, id)| (id, i)).collect();
    let scale = corpus.spec.cluster_spread * (corpus.spec.dim as f64).sqrt();
    ids.iter()
        .filter_map(|id| {
            let k = *corpus.truth.get(id)?;
            let r = distance(corpus.embeddings.row(row[id]), &corpus.centroids[k], Metric::Euclidean);
            let base = corpus.spec.difficulty_of(k) * (0.5 + 0.5 * (r / scale).min(2.0));
            let coverage = 0.3 + 0.7 / (1.0 + per_cluster[k] as f64 / 5.0);
            Some((id.clone(), (base * coverage).clamp(0.0, 1.0)))
        })
        .collect()
}

/// Difficulty-weighted distance from each held-out test point to its
/// nearest labeled sample, normalized to [0, 1]. Lower is better; an empty
/// labeled set scores 1.
pub fn proxy_quality(labeled: &BTreeSet<SampleId>, corpus: &SyntheticCorpus) -> f64 {
    if labeled.is_empty() || corpus.test_points.is_empty() {
        return 1.0;
    }
    let rows: Vec<&[f64]> = corpus
        .embeddings
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| labeled.contains(*id))
        .map(|(i, _)| corpus.embeddings.row(i))
        .collect();
    if rows.is_empty() {
        return 1.0;
    }
    let cap = corpus.spec.inter_cluster_distance;
    let max_diff = corpus.spec.difficulty.iter().copied().fold(0.0, f64::max).max(1e-12);
    let total: f64 = corpus
        .test_points
        .iter()
        .map(|t| {
            let nn = rows
                .iter()
                .map(|r| distance(&t.embedding, r, Metric::Euclidean))
                .fold(f64::INFINITY, f64::min);
            nn.min(cap) / cap * corpus.spec.difficulty_of(t.cluster) / max_diff
        })
        .sum();
    total / corpus.test_points.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSpec {
    pub corpus: SyntheticCorpusSpec,
    pub pipeline: PipelineConfig,
    pub entropy: EntropyModel,
    pub strategies: Vec<Strategy>,
    pub seeds: usize,
    pub first_seed: u64,
    pub workers: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            corpus: SyntheticCorpusSpec::default(),
            pipeline: PipelineConfig {
                target_per_iteration: 40,
                iterations: 3,
                // Within-blob distances sit near spread * sqrt(2 * dim) = 5.7,
                // between blobs near 20.8.
                cluster: crate::pipeline::ClusterConfig {
                    eps: Some(8.0),
                    metric: Metric::Euclidean,
                    ..Default::default()
                },
                ..PipelineConfig::default()
            },
            entropy: EntropyModel::default(),
            strategies: vec![Strategy::Proposed, Strategy::Random],
            seeds: 10,
            first_seed: 0,
            workers: 1,
        }
    }
}

/// Trajectory of one strategy on one seed. Index 0 is the cold start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub strategy: Strategy,
    pub proxy: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Median pool score at selection time (scored strategies only).
    pub pool_median: Vec<Option<f64>>,
    pub pool_quartiles: Vec<Option<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iteration: u32,
    pub proxy_metric_mean: f64,
    /// Half-width of a normal-approximation 95% interval over seeds.
    pub proxy_metric_ci: f64,
    /// Seed-averaged (q1, median, q3) of pool scores, when scored.
    pub uncertainty_quartiles: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub strategies: BTreeMap<Strategy, Vec<ReportRow>>,
    pub runs: Vec<SeedRun>,
}

impl SimulationReport {
    pub fn runs_for(&self, strategy: Strategy) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter(move |r| r.strategy == strategy)
    }
}

/// Cold start plus the configured number of scored iterations for one
/// strategy on one corpus, with oracle labels and mock committees.
pub fn run_strategy(
    corpus: &SyntheticCorpus,
    config: &PipelineConfig,
    entropy: EntropyModel,
    workers: usize,
) -> Result<SeedRun> {
    let (state, first) = run_stage1(config, &corpus.manifest, &corpus.embeddings)?;
    let mut state: PipelineState = label_pending(&state, &oracle_labels(&state)?)?;
    let mut run = SeedRun {
        seed: config.seed,
        strategy: config.strategy,
        proxy: vec![proxy_quality(&state.labeled_ids, corpus)],
        batch_sizes: vec![first.len()],
        pool_median: vec![None],
        pool_quartiles: vec![None],
    };
    loop {
        let request = transcriber_request(&state)?;
        let rates = corruption_rates(corpus, &state.labeled_ids, &request.ids);
        let mock = MockTranscriberSpec {
            per_sample_corruption: rates,
            committee_size: config.committee_size,
            seed: crate::pipeline::derive_seed(config.seed, "mock", config.strategy, request.iteration),
            entropy,
        };
        let committee = mock_committee(&corpus.manifest, &mock, corpus.spec.vocab_size)?;
        match run_stage2_iteration(&state, &committee, workers)? {
            Stage2Outcome::Complete => break,
            Stage2Outcome::Selected { state: next, batch } => {
                let labels = oracle_labels(&next)?;
                state = label_pending(&next, &labels)?;
                run.proxy.push(proxy_quality(&state.labeled_ids, corpus));
                run.batch_sizes.push(batch.len());
                run.pool_median.push(batch.pool_scores.map(|d| d.median));
                run.pool_quartiles.push(batch.pool_scores.map(|d| [d.q1, d.median, d.q3]));
            }
        }
    }
    Ok(run)
}

/// Runs every strategy on every seed (seeds in parallel) and aggregates
/// per-iteration means.
pub fn run_simulation(spec: &SimulationSpec) -> Result<SimulationReport> {
    let seeds: Vec<u64> = (0..spec.seeds as u64).map(|i| spec.first_seed + i).collect();
    let per_seed: Vec<Result<Vec<SeedRun>>> = seeds
        .par_iter()
        .map(|&seed| {
            let corpus = generate_corpus(&SyntheticCorpusSpec {
                seed,
                ..spec.corpus.clone()
            })?;
            spec.strategies
                .iter()
                .map(|&strategy| {
                    let config = PipelineConfig {
                        strategy,
                        seed,
                        ..spec.pipeline.clone()
                    };
                    run_strategy(&corpus, &config, spec.entropy, spec.workers)
                })
                .collect()
        })
        .collect();
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }

    let mut strategies = BTreeMap::new();
    for &strategy in &spec.strategies {
        let mine: Vec<&SeedRun> = runs.iter().filter(|r| r.strategy == strategy).collect();
        let len = mine.iter().map(|r| r.proxy.len()).min().unwrap_or(0);
        let rows = (0..len)
            .map(|h| {
                let vals: Vec<f64> = mine.iter().map(|r| r.proxy[h]).collect();
                let (mean, ci) = mean_ci(&vals);
                let quarts: Vec<[f64; 3]> = mine.iter().filter_map(|r| r.pool_quartiles[h]).collect();
                let uncertainty_quartiles = (!quarts.is_empty()).then(|| {
                    let n = quarts.len() as f64;
                    [0, 1, 2].map(|j| quarts.iter().map(|q| q[j]).sum::<f64>() / n)
                });
                ReportRow {
                    iteration: h as u32,
                    proxy_metric_mean: mean,
                    proxy_metric_ci: ci,
                    uncertainty_quartiles,
                }
            })
            .collect();
        strategies.insert(strategy, rows);
    }
    Ok(SimulationReport { strategies, runs })
}

fn mean_ci(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}
