//! Shared inputs for the criterion benches.

use voxsel_core::sim::{generate_corpus, mock_committee, MockTranscriberSpec, SyntheticCorpus, SyntheticCorpusSpec};
use voxsel_core::CommitteeArtifact;

pub fn corpus(points_per_cluster: Vec<usize>, dim: usize) -> SyntheticCorpus {
    generate_corpus(&SyntheticCorpusSpec {
        points_per_cluster,
        dim,
        small_cluster_below: 0,
        seed: 1,
        ..SyntheticCorpusSpec::default()
    })
    .expect("valid corpus spec")
}

/// Committee outputs at a flat 20% corruption rate for every sample.
pub fn committee(corpus: &SyntheticCorpus, t: usize) -> Vec<CommitteeArtifact> {
    let spec = MockTranscriberSpec {
        per_sample_corruption: corpus.manifest.entries.iter().map(|r| (r.id.clone(), 0.2)).collect(),
        committee_size: t,
        seed: 3,
        entropy: Default::default(),
    };
    mock_committee(&corpus.manifest, &spec, corpus.spec.vocab_size)
        .expect("oracle text present")
        .into_values()
        .collect()
}
