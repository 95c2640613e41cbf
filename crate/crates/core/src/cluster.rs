//! DBSCAN over speaker embeddings and silhouette diagnostics.
//!
//! Results are canonical: cluster ids are assigned in ascending order of
//! each cluster's smallest member id, so the partition does not depend on
//! row order. A border point reachable from several clusters joins the one
//! whose smallest core member id is smallest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::SampleId;
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    #[default]
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::InvalidParameter(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_points: usize,
    pub metric: Metric,
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        if self.min_points == 0 {
            return Err(Error::InvalidParameter("min_points must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterAssignment {
    pub clusters: BTreeMap<ClusterId, BTreeSet<SampleId>>,
    pub noise: BTreeSet<SampleId>,
    pub params: ClusterParams,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Id given to the noise set when it is treated as one more cluster.
    pub fn noise_id(&self) -> ClusterId {
        ClusterId(self.clusters.len() as u32)
    }

    pub fn cluster_of(&self, id: &SampleId) -> Option<ClusterId> {
        self.clusters
            .iter()
            .find(|(_, members)| members.contains(id))
            .map(|(k, _)| *k)
    }

    /// Sampling groups: the clusters, plus the noise set under
    /// [`noise_id`](Self::noise_id) when `include_noise` is set and noise is
    /// non-empty.
    pub fn groups(&self, include_noise: bool) -> BTreeMap<ClusterId, &BTreeSet<SampleId>> {
        let mut out: BTreeMap<ClusterId, &BTreeSet<SampleId>> =
            self.clusters.iter().map(|(k, v)| (*k, v)).collect();
        if include_noise && !self.noise.is_empty() {
            out.insert(self.noise_id(), &self.noise);
        }
        out
    }

    /// Group members still in `pool`, sorted by id. Labeled samples drop out
    /// here; the assignment itself never changes after clustering.
    pub fn available(
        &self,
        pool: &BTreeSet<SampleId>,
        include_noise: bool,
    ) -> BTreeMap<ClusterId, Vec<SampleId>> {
        self.groups(include_noise)
            .into_iter()
            .map(|(k, members)| (k, members.iter().filter(|id| pool.contains(*id)).cloned().collect()))
            .collect()
    }

    /// Lookup table from sample id to group id.
    pub fn membership(&self, include_noise: bool) -> HashMap<SampleId, ClusterId> {
        let mut out = HashMap::new();
        for (k, members) in self.groups(include_noise) {
            for id in members {
                out.insert(id.clone(), k);
            }
        }
        out
    }

    pub fn table(&self) -> Vec<ClusterTableRow> {
        let mut rows: Vec<ClusterTableRow> = self
            .clusters
            .iter()
            .flat_map(|(k, members)| {
                members.iter().map(move |id| ClusterTableRow {
                    id: id.clone(),
                    cluster_id: ClusterLabel::Cluster(*k),
                })
            })
            .chain(self.noise.iter().map(|id| ClusterTableRow {
                id: id.clone(),
                cluster_id: ClusterLabel::Noise,
            }))
            .collect();
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterLabel {
    Cluster(ClusterId),
    Noise,
}

impl Serialize for ClusterLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClusterLabel::Cluster(k) => s.serialize_u32(k.0),
            ClusterLabel::Noise => s.serialize_str("noise"),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(k) => Ok(ClusterLabel::Cluster(ClusterId(k))),
            Raw::Word(w) if w == "noise" => Ok(ClusterLabel::Noise),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("bad cluster label `{w}`"))),
        }
    }
}

/// One line of the cluster table export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTableRow {
    pub id: SampleId,
    pub cluster_id: ClusterLabel,
}

pub fn pairwise_distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(distance(a, b, metric))
}

pub(crate) fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            match (na == 0.0, nb == 0.0) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                _ => (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0),
            }
        }
    }
}

pub fn dbscan(embeddings: &EmbeddingMatrix, params: &ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    let n = embeddings.len();
    let ids = embeddings.ids();

    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = embeddings.row(i);
            (0..n)
                .filter(|&j| distance(row, embeddings.row(j), params.metric) <= params.eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_points).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in (0..n).filter(|&i| core[i]) {
        for &j in neighbors[i].iter().filter(|&&j| core[j]) {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }

    // Components keyed by root; ranked by smallest core member id.
    let mut smallest_core: HashMap<usize, &SampleId> = HashMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let root = find(&mut parent, i);
        let entry = smallest_core.entry(root).or_insert(&ids[i]);
        if ids[i] < **entry {
            *entry = &ids[i];
        }
    }
    let mut order: Vec<(&SampleId, usize)> = smallest_core.iter().map(|(r, id)| (*id, *r)).collect();
    order.sort();
    let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(k, (_, r))| (*r, k)).collect();

    let mut members: Vec<BTreeSet<SampleId>> = vec![BTreeSet::new(); order.len()];
    let mut noise = BTreeSet::new();
    for i in 0..n {
        let home = if core[i] {
            Some(rank[&find(&mut parent, i)])
        } else {
            neighbors[i]
                .iter()
                .filter(|&&j| core[j])
                .map(|&j| rank[&find(&mut parent, j)])
                .min()
        };
        match home {
            Some(k) => {
                members[k].insert(ids[i].clone());
            }
            None => {
                noise.insert(ids[i].clone());
            }
        }
    }

    members.sort_by(|a, b| a.first().cmp(&b.first()));
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(k, m)| (ClusterId(k as u32), m))
        .collect();
    Ok(ClusterAssignment {
        clusters,
        noise,
        params: *params,
    })
}

/// Mean silhouette coefficient over clustered points; noise is ignored and
/// members of singleton clusters score 0.
pub fn silhouette(embeddings: &EmbeddingMatrix, assignment: &ClusterAssignment) -> Result<f64> {
    let k = assignment.num_clusters();
    if k < 2 {
        return Err(Error::TooFewClusters(k));
    }
    let row_of: HashMap<&SampleId, usize> =
        embeddings.ids().iter().enumerate().map(|(i, id)| (id, i)).collect();
    let groups: Vec<Vec<usize>> = assignment
        .clusters
        .values()
        .map(|m| {
            m.iter()
                .map(|id| {
                    row_of
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::InvalidParameter(format!("`{id}` has no embedding")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let metric = assignment.params.metric;
    let points: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, rows)| rows.iter().map(move |&r| (g, r)))
        .collect();

    let mean_to = |r: usize, rows: &[usize]| -> (f64, usize) {
        let x = embeddings.row(r);
        let mut total = 0.0;
        let mut count = 0;
        for &o in rows.iter().filter(|&&o| o != r) {
            total += distance(x, embeddings.row(o), metric);
            count += 1;
        }
        (total, count)
    };
    let scores: Vec<f64> = points
        .par_iter()
        .map(|&(g, r)| {
            if groups[g].len() == 1 {
                return 0.0;
            }
            let (sum, cnt) = mean_to(r, &groups[g]);
            let a = sum / cnt as f64;
            let b = groups
                .iter()
                .enumerate()
                .filter(|(h, _)| *h != g)
                .map(|(_, rows)| {
                    let (sum, cnt) = mean_to(r, rows);
                    sum / cnt as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Median distance to the `k`-th nearest neighbor over a seeded subsample
/// of at most `max_sample` rows.
pub fn default_eps(embeddings: &EmbeddingMatrix, metric: Metric, k: usize, max_sample: usize, seed: u64) -> f64 {
    const FLOOR: f64 = 1e-9;
    let n = embeddings.len();
    if n < 2 {
        return 1.0;
    }
    let mut rows: Vec<usize> = if n > max_sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, n, max_sample).into_vec()
    } else {
        (0..n).collect()
    };
    rows.sort_unstable();
    let k = k.max(1).min(rows.len() - 1);
    let mut kth: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let mut d: Vec<f64> = rows
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| distance(embeddings.row(i), embeddings.row(j), metric))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let mid = kth.len() / 2;
    let median = if kth.len() % 2 == 0 {
        0.5 * (kth[mid - 1] + kth[mid])
    } else {
        kth[mid]
    };
    median.max(FLOOR)
}
