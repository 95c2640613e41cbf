//! Active-learning sample selection for speech transcription.
//!
//! A cold-start batch is drawn from density clusters of speaker embeddings
//! with size-dependent quotas; later batches take the samples a
//! dropout committee disagrees on most (mean WER of the stochastic passes
//! against the deterministic pass) from every cluster.

pub mod cluster;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampling;
pub mod select;
pub mod sim;
pub mod store;

pub use cluster::{dbscan, pairwise_distance, silhouette, ClusterAssignment, ClusterId, ClusterParams, Metric};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{
    cer, cmer, committee_uncertainty, edit_counts, entropy_uncertainty, normalize, pearson, score_committee, wer,
    EditCounts, NormalizeConfig, TokenizedText, UncertaintyScore,
};
pub use model::{CorpusManifest, IterationSummary, PipelineState, SampleId, SampleRecord, ScoreDigest, Violation};
pub use pipeline::{
    run_stage1, run_stage2_iteration, PipelineConfig, Stage2Outcome, Strategy, TranscriberRequest,
};
pub use sampling::{alpha, draw_random, plan_quotas, raw_quota, QuotaPlan};
pub use select::{Chosen, SelectionBatch};
pub use store::{CommitteeArtifact, EmbeddingMatrix, RawEmbeddings};
