//! Reference implementations the library is checked against. They favour
//! obviousness over speed and share no code with the crate.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsel_core::{CorpusManifest, EmbeddingMatrix, Metric, SampleId, SampleRecord};

/// Plain Levenshtein distance over a full table.
pub fn oracle_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

pub fn oracle_metric(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]).powi(2);
            }
            s.sqrt()
        }
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 && nb == 0.0 {
                0.0
            } else if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
            }
        }
    }
}

/// Textbook DBSCAN: visit points in id order, grow each new cluster
/// breadth-first from an unvisited core point. A border point joins the
/// first cluster that reaches it. Returns (clusters, noise).
pub fn oracle_dbscan(
    ids: &[SampleId],
    rows: &[Vec<f64>],
    eps: f64,
    min_points: usize,
    metric: Metric,
) -> (BTreeSet<BTreeSet<SampleId>>, BTreeSet<SampleId>) {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let near: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut v: Vec<usize> = (0..n).filter(|&j| oracle_metric(&rows[i], &rows[j], metric) <= eps).collect();
            v.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
            v
        })
        .collect();
    let is_core: Vec<bool> = (0..n).map(|i| near[i].len() >= min_points).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for &start in &order {
        if !is_core[start] || label[start].is_some() {
            continue;
        }
        let c = next;
        next += 1;
        label[start] = Some(c);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &near[p] {
                if label[q].is_some() {
                    continue;
                }
                label[q] = Some(c);
                if is_core[q] {
                    queue.push_back(q);
                }
            }
        }
    }
    let mut clusters: BTreeMap<usize, BTreeSet<SampleId>> = BTreeMap::new();
    let mut noise = BTreeSet::new();
    for i in 0..n {
        match label[i] {
            Some(c) => {
                clusters.entry(c).or_default().insert(ids[i].clone());
            }
            None => {
                noise.insert(ids[i].clone());
            }
        }
    }
    (clusters.into_values().collect(), noise)
}

/// Mean silhouette over the given groups: a(i) is the mean distance to the
/// rest of the own group, b(i) the smallest mean distance to another
/// group, s(i) = (b - a) / max(a, b), and singletons score 0.
pub fn oracle_silhouette(groups: &[Vec<Vec<f64>>], metric: Metric) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (g, members) in groups.iter().enumerate() {
        for (i, x) in members.iter().enumerate() {
            count += 1;
            if members.len() == 1 {
                continue;
            }
            let a = members
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| oracle_metric(x, y, metric))
                .sum::<f64>()
                / (members.len() - 1) as f64;
            let mut b = f64::INFINITY;
            for (h, other) in groups.iter().enumerate() {
                if h == g {
                    continue;
                }
                let d = other.iter().map(|y| oracle_metric(x, y, metric)).sum::<f64>() / other.len() as f64;
                b = b.min(d);
            }
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / count as f64
}

/// Gaussian-ish blobs (uniform jitter) with ids `p000..`; rows are shuffled
/// relative to ids so id order does not follow blob order.
pub fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Vec<SampleId>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in centers {
        for _ in 0..per {
            rows.push(c.iter().map(|v| v + rng.random_range(-spread..=spread)).collect::<Vec<f64>>());
        }
    }
    let mut ids: Vec<SampleId> = (0..rows.len()).map(|i| SampleId::new(format!("p{i:03}"))).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    (ids, rows)
}

pub fn matrix(ids: &[SampleId], rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let dim = rows.first().map_or(1, Vec::len);
    EmbeddingMatrix::new(ids.to_vec(), dim, rows.iter().flatten().copied().collect()).unwrap()
}

pub fn manifest_for(ids: &[SampleId]) -> CorpusManifest {
    CorpusManifest {
        source_tag: "test".into(),
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mut r = SampleRecord::new(id.clone(), i);
                r.oracle_text = Some(format!("w{} w{} w{}", i % 7, i % 11, i % 13));
                r
            })
            .collect(),
    }
}

pub mod ops;
