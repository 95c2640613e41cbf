//! Random operation sequences over the pipeline, used by the state
//! integrity tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsel_core::model::Annotation;
use voxsel_core::pipeline::{label_from_annotations, label_pending, oracle_labels, run_stage1, transcriber_request};
use voxsel_core::sim::{corruption_rates, generate_corpus, mock_committee, MockTranscriberSpec, SyntheticCorpus, SyntheticCorpusSpec};
use voxsel_core::store::{state_from_str, state_to_string};
use voxsel_core::{run_stage2_iteration, PipelineConfig, PipelineState, Stage2Outcome, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Select,
    LabelOracle,
    /// Labels with one id missing; must be rejected.
    LabelIncomplete,
    /// Records annotator submissions for the first `n` pending ids.
    Annotate(usize),
    LabelAnnotations,
    RoundTrip,
}

pub fn random_op(rng: &mut impl Rng) -> Op {
    match rng.random_range(0..10) {
        0..=2 => Op::Select,
        3..=4 => Op::LabelOracle,
        5 => Op::LabelIncomplete,
        6 => Op::Annotate(rng.random_range(0..6)),
        7..=8 => Op::LabelAnnotations,
        _ => Op::RoundTrip,
    }
}

pub fn small_corpus(seed: u64) -> SyntheticCorpus {
    generate_corpus(&SyntheticCorpusSpec {
        points_per_cluster: vec![18, 18, 6],
        small_cluster_below: 10,
        dim: 4,
        seed,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap()
}

pub fn config_for(rng: &mut impl Rng, seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig {
        target_per_iteration: rng.random_range(1..10),
        iterations: rng.random_range(0..4),
        committee_size: rng.random_range(1..4),
        strategy: Strategy::ALL[rng.random_range(0..Strategy::ALL.len())],
        scoring_fraction: [1.0, 0.5, 0.25][rng.random_range(0..3)],
        allow_skip: rng.random_bool(0.5),
        seed,
        ..PipelineConfig::default()
    };
    c.cluster.metric = voxsel_core::Metric::Euclidean;
    c
}

/// One step. `Ok(None)` means the operation was rejected and the state is
/// unchanged (rejections are part of the contract being exercised).
pub fn apply(state: Option<&PipelineState>, op: Op, corpus: &SyntheticCorpus, config: &PipelineConfig) -> Option<PipelineState> {
    let Some(state) = state else {
        return match op {
            Op::Select => Some(run_stage1(config, &corpus.manifest, &corpus.embeddings).unwrap().0),
            _ => None,
        };
    };
    match op {
        Op::Select => {
            if state.pending_batch.is_some() {
                assert!(run_stage2_iteration(state, &BTreeMap::new(), 1).is_err());
                return None;
            }
            let req = transcriber_request(state).unwrap();
            let mock = MockTranscriberSpec {
                per_sample_corruption: corruption_rates(corpus, &state.labeled_ids, &req.ids),
                committee_size: state.config.committee_size,
                seed: u64::from(req.iteration),
                entropy: Default::default(),
            };
            let committee = mock_committee(&corpus.manifest, &mock, corpus.spec.vocab_size).unwrap();
            match run_stage2_iteration(state, &committee, 2).unwrap() {
                Stage2Outcome::Selected { state, .. } => Some(*state),
                Stage2Outcome::Complete => None,
            }
        }
        Op::LabelOracle => {
            let labels = oracle_labels(state).ok()?;
            Some(label_pending(state, &labels).unwrap())
        }
        Op::LabelIncomplete => {
            let mut labels = oracle_labels(state).ok()?;
            if labels.is_empty() {
                return None;
            }
            let first = labels.keys().next().unwrap().clone();
            labels.remove(&first);
            assert!(label_pending(state, &labels).is_err());
            None
        }
        Op::Annotate(n) => {
            let batch = state.pending_batch.as_ref()?;
            let mut next = state.clone();
            for id in batch.ids().take(n) {
                next.annotations.insert(
                    id.clone(),
                    Annotation {
                        text: format!("typed {id}"),
                        submitted_at: "2024-01-01T00:00:00Z".into(),
                    },
                );
            }
            Some(next)
        }
        Op::LabelAnnotations => label_from_annotations(state).ok(),
        Op::RoundTrip => {
            let text = state_to_string(state).unwrap();
            let back = state_from_str(&text).unwrap();
            assert_eq!(&back, state);
            assert_eq!(state_to_string(&back).unwrap(), text);
            Some(back)
        }
    }
}

/// Runs `ops` from an empty start and returns every intermediate state.
pub fn run_ops(ops: &[Op], corpus: &SyntheticCorpus, config: &PipelineConfig) -> Vec<PipelineState> {
    let mut states: Vec<PipelineState> = Vec::new();
    for &op in ops {
        if let Some(next) = apply(states.last(), op, corpus, config) {
            states.push(next);
        }
    }
    states
}

pub fn random_sequence(seed: u64, len: usize) -> (SyntheticCorpus, PipelineConfig, Vec<Op>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = small_corpus(seed);
    let config = config_for(&mut rng, seed);
    let mut ops = vec![Op::Select];
    ops.extend((0..len).map(|_| random_op(&mut rng)));
    (corpus, config, ops)
}
