//! Disproportionate per-cluster quotas and the seeded random draw used for
//! cold-start selection.
//!
//! The raw quota of a cluster holding fraction `f` of the available samples
//! is `ceil((beta - gamma * f) * f * target)`. Raw quotas rarely sum to the
//! target, so [`plan_quotas`] reconciles them deterministically: a deficit
//! is handed out one sample at a time, round-robin over clusters in
//! ascending size order; a surplus is taken back round-robin in descending
//! size order.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterId;
use crate::model::SampleId;
use crate::pipeline::Strategy;
use crate::select::{Chosen, SelectionBatch};

pub const DEFAULT_BETA: f64 = 0.095;
pub const DEFAULT_GAMMA: f64 = 0.0553;
pub const ALPHA_FLOOR: f64 = 1e-6;

/// Size-dependent sampling rate; smaller clusters get a larger value when
/// `gamma > 0`.
pub fn alpha(cluster_size: usize, total_size: usize, beta: f64, gamma: f64) -> f64 {
    let frac = if total_size == 0 {
        0.0
    } else {
        cluster_size as f64 / total_size as f64
    };
    (beta - gamma * frac).max(ALPHA_FLOOR)
}

pub fn raw_quota(cluster_size: usize, total_size: usize, target: usize, beta: f64, gamma: f64) -> usize {
    if cluster_size == 0 || target == 0 || total_size == 0 {
        return 0;
    }
    let frac = cluster_size as f64 / total_size as f64;
    let q = (alpha(cluster_size, total_size, beta, gamma) * frac * target as f64).ceil();
    (q as usize).min(cluster_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "cluster")]
pub enum Adjustment {
    Add(ClusterId),
    Remove(ClusterId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaEntry {
    pub size: usize,
    pub alpha: f64,
    pub raw_quota: usize,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaPlan {
    pub target: usize,
    pub beta: f64,
    pub gamma: f64,
    pub entries: BTreeMap<ClusterId, QuotaEntry>,
    pub adjustments: Vec<Adjustment>,
}

impl QuotaPlan {
    pub fn quota(&self, cluster: ClusterId) -> usize {
        self.entries.get(&cluster).map_or(0, |e| e.quota)
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|e| e.quota).sum()
    }

    /// Flat rows for the per-iteration quota export.
    pub fn rows(&self) -> Vec<QuotaRow> {
        self.entries
            .iter()
            .map(|(k, e)| QuotaRow {
                cluster_id: *k,
                size: e.size,
                alpha: e.alpha,
                raw_quota: e.raw_quota,
                final_quota: e.quota,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaRow {
    pub cluster_id: ClusterId,
    pub size: usize,
    pub alpha: f64,
    pub raw_quota: usize,
    pub final_quota: usize,
}

/// Per-cluster quotas summing to `min(target, total available)`.
pub fn plan_quotas(cluster_sizes: &BTreeMap<ClusterId, usize>, target: usize, beta: f64, gamma: f64) -> QuotaPlan {
    let total: usize = cluster_sizes.values().sum();
    let mut entries: BTreeMap<ClusterId, QuotaEntry> = cluster_sizes
        .iter()
        .map(|(&k, &size)| {
            let raw = raw_quota(size, total, target, beta, gamma);
            (
                k,
                QuotaEntry {
                    size,
                    alpha: alpha(size, total, beta, gamma),
                    raw_quota: raw,
                    quota: raw,
                },
            )
        })
        .collect();

    let goal = target.min(total);
    let mut have: usize = entries.values().map(|e| e.quota).sum();
    let mut adjustments = Vec::new();

    if have < goal {
        let mut order: Vec<(usize, ClusterId)> = cluster_sizes.iter().map(|(&k, &s)| (s, k)).collect();
        order.sort();
        while have < goal {
            for &(_, k) in &order {
                if have == goal {
                    break;
                }
                let e = entries.get_mut(&k).expect("planned cluster");
                if e.quota < e.size {
                    e.quota += 1;
                    have += 1;
                    adjustments.push(Adjustment::Add(k));
                }
            }
        }
    } else if have > goal {
        let mut order: Vec<(usize, ClusterId)> = cluster_sizes.iter().map(|(&k, &s)| (s, k)).collect();
        order.sort_by(|a, b| b.cmp(a));
        while have > goal {
            for &(_, k) in &order {
                if have == goal {
                    break;
                }
                let e = entries.get_mut(&k).expect("planned cluster");
                if e.quota > 0 {
                    e.quota -= 1;
                    have -= 1;
                    adjustments.push(Adjustment::Remove(k));
                }
            }
        }
    }

    QuotaPlan {
        target,
        beta,
        gamma,
        entries,
        adjustments,
    }
}

/// Uniform draw without replacement of each cluster's quota, one seeded
/// stream walked in ascending cluster order. Members are taken in id order
/// before drawing so the result does not depend on input ordering.
pub fn draw_random(
    cluster_members: &BTreeMap<ClusterId, Vec<SampleId>>,
    plan: &QuotaPlan,
    seed: u64,
    iteration: u32,
    strategy: Strategy,
) -> SelectionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (&k, members) in cluster_members {
        let mut sorted = members.clone();
        sorted.sort();
        let quota = plan.quota(k).min(sorted.len());
        if quota == 0 {
            continue;
        }
        let mut picks = index::sample(&mut rng, sorted.len(), quota).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|i| Chosen {
            id: sorted[i].clone(),
            cluster: Some(k),
            score: None,
        }));
    }
    SelectionBatch {
        iteration,
        strategy,
        chosen,
        quota_plan: Some(plan.clone()),
        pool_scores: None,
    }
}
