//! Batch acquisition strategies.
//!
//! Everywhere a top-k is taken, equal scores are ordered by ascending
//! sample id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterId;
use crate::error::{Error, Result};
use crate::metrics::{cmer, entropy_uncertainty, NormalizeConfig};
use crate::model::{SampleId, ScoreDigest};
use crate::pipeline::Strategy;
use crate::sampling::{draw_random, QuotaPlan};
use crate::store::CommitteeArtifact;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chosen {
    pub id: SampleId,
    pub cluster: Option<ClusterId>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionBatch {
    pub iteration: u32,
    pub strategy: Strategy,
    pub chosen: Vec<Chosen>,
    pub quota_plan: Option<QuotaPlan>,
    pub pool_scores: Option<ScoreDigest>,
}

impl SelectionBatch {
    pub fn empty(iteration: u32, strategy: Strategy) -> Self {
        SelectionBatch {
            iteration,
            strategy,
            chosen: Vec::new(),
            quota_plan: None,
            pool_scores: None,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &SampleId> {
        self.chosen.iter().map(|c| &c.id)
    }

    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    /// Same iteration, strategy and chosen ids, in order.
    pub fn same_selection(&self, other: &SelectionBatch) -> bool {
        self.iteration == other.iteration && self.strategy == other.strategy && self.ids().eq(other.ids())
    }
}

fn by_score_then_id(a: &(f64, &SampleId), b: &(f64, &SampleId)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Per cluster, the `quota` highest-scoring members; the batch is their
/// union in ascending cluster order.
pub fn select_top_uncertain_per_cluster(
    scores: &BTreeMap<SampleId, f64>,
    cluster_members: &BTreeMap<ClusterId, Vec<SampleId>>,
    plan: &QuotaPlan,
    iteration: u32,
) -> Result<SelectionBatch> {
    let missing: Vec<SampleId> = cluster_members
        .values()
        .flatten()
        .filter(|id| !scores.contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    let mut chosen = Vec::new();
    for (&k, members) in cluster_members {
        let quota = plan.quota(k);
        if quota == 0 {
            continue;
        }
        let mut ranked: Vec<(f64, &SampleId)> = members.iter().map(|id| (scores[id], id)).collect();
        ranked.sort_by(by_score_then_id);
        chosen.extend(ranked.into_iter().take(quota).map(|(s, id)| Chosen {
            id: id.clone(),
            cluster: Some(k),
            score: Some(s),
        }));
    }
    Ok(SelectionBatch {
        iteration,
        strategy: Strategy::Proposed,
        chosen,
        quota_plan: Some(plan.clone()),
        pool_scores: None,
    })
}

/// Uniform draw without replacement from the whole pool.
pub fn select_random(pool: &BTreeSet<SampleId>, target: usize, seed: u64, iteration: u32) -> SelectionBatch {
    let members: Vec<&SampleId> = pool.iter().collect();
    let k = target.min(members.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, members.len(), k).into_vec();
    picks.sort_unstable();
    SelectionBatch {
        iteration,
        strategy: Strategy::Random,
        chosen: picks
            .into_iter()
            .map(|i| Chosen {
                id: members[i].clone(),
                cluster: None,
                score: None,
            })
            .collect(),
        quota_plan: None,
        pool_scores: None,
    }
}

/// Global top-`target` over `pool` by a precomputed score.
pub fn select_top_global(
    scores: &BTreeMap<SampleId, f64>,
    pool: &BTreeSet<SampleId>,
    target: usize,
    strategy: Strategy,
    iteration: u32,
) -> Result<SelectionBatch> {
    let missing: Vec<SampleId> = pool.iter().filter(|id| !scores.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    let mut ranked: Vec<(f64, &SampleId)> = pool.iter().map(|id| (scores[id], id)).collect();
    ranked.sort_by(by_score_then_id);
    Ok(SelectionBatch {
        iteration,
        strategy,
        chosen: ranked
            .into_iter()
            .take(target)
            .map(|(s, id)| Chosen {
                id: id.clone(),
                cluster: None,
                score: Some(s),
            })
            .collect(),
        quota_plan: None,
        pool_scores: None,
    })
}

fn artifacts_for<'a>(
    artifacts: &'a BTreeMap<SampleId, CommitteeArtifact>,
    pool: &BTreeSet<SampleId>,
) -> Result<Vec<&'a CommitteeArtifact>> {
    let missing: Vec<SampleId> = pool.iter().filter(|id| !artifacts.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    Ok(pool.iter().map(|id| &artifacts[id]).collect())
}

/// Single-dropout-member committee scores: CMER between hypothesis 0 and
/// the reference. Artifacts without hypotheses score 0.
pub fn smca_scores(
    artifacts: &BTreeMap<SampleId, CommitteeArtifact>,
    pool: &BTreeSet<SampleId>,
    config: &NormalizeConfig,
) -> Result<BTreeMap<SampleId, f64>> {
    Ok(artifacts_for(artifacts, pool)?
        .into_iter()
        .map(|a| {
            let s = a.hypotheses.first().map_or(0.0, |h| cmer(h, &a.reference, config));
            (a.sample_id.clone(), s)
        })
        .collect())
}

pub fn select_smca(
    artifacts: &BTreeMap<SampleId, CommitteeArtifact>,
    pool: &BTreeSet<SampleId>,
    target: usize,
    config: &NormalizeConfig,
    iteration: u32,
) -> Result<SelectionBatch> {
    let scores = smca_scores(artifacts, pool, config)?;
    select_top_global(&scores, pool, target, Strategy::Smca, iteration)
}

pub fn entropy_scores(
    artifacts: &BTreeMap<SampleId, CommitteeArtifact>,
    pool: &BTreeSet<SampleId>,
) -> Result<BTreeMap<SampleId, f64>> {
    artifacts_for(artifacts, pool)?
        .into_iter()
        .map(|a| Ok((a.sample_id.clone(), entropy_uncertainty(a)?)))
        .collect()
}

pub fn select_entropy(
    artifacts: &BTreeMap<SampleId, CommitteeArtifact>,
    pool: &BTreeSet<SampleId>,
    target: usize,
    iteration: u32,
) -> Result<SelectionBatch> {
    let scores = entropy_scores(artifacts, pool)?;
    select_top_global(&scores, pool, target, Strategy::Entropy, iteration)
}

/// Cold-start draw repeated against the shrinking pool.
pub fn select_isolated_first_stage(
    cluster_members: &BTreeMap<ClusterId, Vec<SampleId>>,
    plan: &QuotaPlan,
    seed: u64,
    iteration: u32,
) -> SelectionBatch {
    draw_random(cluster_members, plan, seed, iteration, Strategy::IsolatedFirstStage)
}

/// Seeded per-cluster subsample of `ceil(fraction * size)` members, kept in
/// id order. A fraction of 1 (or more) keeps everything.
pub fn subsample_for_scoring(
    cluster_members: &BTreeMap<ClusterId, Vec<SampleId>>,
    fraction: f64,
    seed: u64,
) -> Result<BTreeMap<ClusterId, Vec<SampleId>>> {
    if !(fraction > 0.0) || !fraction.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "scoring fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction >= 1.0 {
        return Ok(cluster_members.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(cluster_members
        .iter()
        .map(|(&k, members)| {
            let mut sorted = members.clone();
            sorted.sort();
            let keep = ((fraction * sorted.len() as f64).ceil() as usize).min(sorted.len());
            let mut picks = index::sample(&mut rng, sorted.len(), keep).into_vec();
            picks.sort_unstable();
            (k, picks.into_iter().map(|i| sorted[i].clone()).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{plan_quotas, DEFAULT_BETA, DEFAULT_GAMMA};

    fn ids(v: &[&str]) -> Vec<SampleId> {
        v.iter().map(|s| SampleId::from(*s)).collect()
    }

    fn chosen(b: &SelectionBatch) -> Vec<&str> {
        b.ids().map(|i| i.as_str()).collect()
    }

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<SampleId, f64> {
        pairs.iter().map(|(k, v)| (SampleId::from(*k), *v)).collect()
    }

    fn plan_with(quotas: &[(u32, usize, usize)]) -> QuotaPlan {
        let sizes = quotas.iter().map(|&(k, s, _)| (ClusterId(k), s)).collect();
        let mut p = plan_quotas(&sizes, 0, DEFAULT_BETA, DEFAULT_GAMMA);
        for &(k, _, q) in quotas {
            p.entries.get_mut(&ClusterId(k)).unwrap().quota = q;
        }
        p
    }

    fn artifact(id: &str, reference: &str, h0: &str, ent: Option<Vec<f64>>) -> CommitteeArtifact {
        CommitteeArtifact {
            sample_id: id.into(),
            reference: reference.into(),
            hypotheses: vec![h0.into(), "ignored".into()],
            token_entropies: ent,
        }
    }

    #[test]
    fn top_per_cluster_examples() {
        let members: BTreeMap<_, _> = [(ClusterId(0), ids(&["a", "b", "c"]))].into();
        let s = scores(&[("a", 0.9), ("b", 0.1), ("c", 0.5)]);
        let b = select_top_uncertain_per_cluster(&s, &members, &plan_with(&[(0, 3, 2)]), 1).unwrap();
        assert_eq!(chosen(&b), vec!["a", "c"]);

        let members: BTreeMap<_, _> = [(ClusterId(0), ids(&["b", "a"]))].into();
        let s = scores(&[("a", 0.5), ("b", 0.5)]);
        let b = select_top_uncertain_per_cluster(&s, &members, &plan_with(&[(0, 2, 1)]), 1).unwrap();
        assert_eq!(chosen(&b), vec!["a"]);

        let members: BTreeMap<_, _> = [(ClusterId(0), ids(&["a"])), (ClusterId(1), ids(&["b"]))].into();
        let s = scores(&[("a", 0.5), ("b", 0.9)]);
        let b = select_top_uncertain_per_cluster(&s, &members, &plan_with(&[(0, 1, 1), (1, 1, 0)]), 1).unwrap();
        assert_eq!(chosen(&b), vec!["a"]);
    }

    #[test]
    fn top_per_cluster_missing_scores() {
        let members: BTreeMap<_, _> = [(ClusterId(0), ids(&["a", "z"]))].into();
        let err = select_top_uncertain_per_cluster(&scores(&[("a", 1.0)]), &members, &plan_with(&[(0, 2, 1)]), 1)
            .unwrap_err();
        assert!(matches!(err, Error::MissingScores(ref v) if v == &ids(&["z"])));
    }

    #[test]
    fn random_examples() {
        let pool: BTreeSet<SampleId> = ids(&["a", "b", "c", "d", "e"]).into_iter().collect();
        assert_eq!(select_random(&pool, 5, 3, 0).len(), 5);
        assert!(select_random(&pool, 0, 3, 0).is_empty());
        assert_eq!(select_random(&pool, 2, 11, 0), select_random(&pool, 2, 11, 0));
        assert_eq!(select_random(&pool, 9, 1, 0).len(), 5);
    }

    #[test]
    fn smca_examples() {
        let arts: BTreeMap<_, _> = ["c", "a", "b"]
            .iter()
            .map(|id| (SampleId::from(*id), artifact(id, "hello world", "hello world", None)))
            .collect();
        let pool: BTreeSet<SampleId> = arts.keys().cloned().collect();
        let cfg = NormalizeConfig::default();
        let b = select_smca(&arts, &pool, 2, &cfg, 1).unwrap();
        assert_eq!(chosen(&b), vec!["a", "b"]);

        let mut arts2 = arts.clone();
        arts2.insert("c".into(), artifact("c", "hello world", "yellow word", None));
        let b = select_smca(&arts2, &pool, 1, &cfg, 1).unwrap();
        assert_eq!(chosen(&b), vec!["c"]);

        let b = select_smca(&arts, &pool, 10, &cfg, 1).unwrap();
        assert_eq!(b.len(), 3);

        let mut bigger = pool.clone();
        bigger.insert("zz".into());
        assert!(matches!(select_smca(&arts, &bigger, 1, &cfg, 1), Err(Error::MissingArtifacts(_))));
    }

    #[test]
    fn entropy_examples() {
        let mk = |id: &str, e: f64| (SampleId::from(id), artifact(id, "x", "x", Some(vec![e, e])));
        let flat: BTreeMap<_, _> = [mk("b", 0.0), mk("a", 0.0), mk("c", 0.0)].into();
        let pool: BTreeSet<SampleId> = flat.keys().cloned().collect();
        assert_eq!(chosen(&select_entropy(&flat, &pool, 2, 1).unwrap()), vec!["a", "b"]);

        let peaked: BTreeMap<_, _> = [mk("b", 0.0), mk("a", 0.0), mk("c", 2.0)].into();
        assert_eq!(chosen(&select_entropy(&peaked, &pool, 1, 1).unwrap()), vec!["c"]);
        assert_eq!(select_entropy(&peaked, &pool, 10, 1).unwrap().len(), 3);

        let mut missing = flat.clone();
        missing.insert("a".into(), artifact("a", "x", "x", None));
        assert!(matches!(select_entropy(&missing, &pool, 1, 1), Err(Error::MissingEntropies(_))));
    }

    #[test]
    fn isolated_first_stage_examples() {
        let members: BTreeMap<_, _> = [(ClusterId(0), ids(&["a", "b"]))].into();
        let p = plan_with(&[(0, 2, 2)]);
        assert_eq!(select_isolated_first_stage(&members, &p, 1, 2).len(), 2);
        let empty: BTreeMap<_, _> = [(ClusterId(0), Vec::new())].into();
        assert!(select_isolated_first_stage(&empty, &plan_with(&[(0, 0, 0)]), 1, 2).is_empty());
        let members: BTreeMap<_, _> = [(ClusterId(0), ids(&["a", "b", "c", "d"]))].into();
        let p = plan_with(&[(0, 4, 2)]);
        let b = select_isolated_first_stage(&members, &p, 9, 2);
        assert_eq!(b, select_isolated_first_stage(&members, &p, 9, 2));
        assert_eq!(b.strategy, Strategy::IsolatedFirstStage);
    }

    #[test]
    fn subsample_sizes() {
        let members: BTreeMap<_, _> = [
            (ClusterId(0), ids(&["a", "b", "c", "d", "e", "f", "g", "h"])),
            (ClusterId(1), ids(&["x"])),
            (ClusterId(2), Vec::new()),
        ]
        .into();
        let s = subsample_for_scoring(&members, 0.25, 4).unwrap();
        assert_eq!(s[&ClusterId(0)].len(), 2);
        assert_eq!(s[&ClusterId(1)].len(), 1);
        assert!(s[&ClusterId(2)].is_empty());
        assert_eq!(s, subsample_for_scoring(&members, 0.25, 4).unwrap());
        assert_eq!(subsample_for_scoring(&members, 1.0, 4).unwrap(), members);
        assert!(subsample_for_scoring(&members, 0.0, 4).is_err());
    }
}
