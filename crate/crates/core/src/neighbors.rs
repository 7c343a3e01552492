//! In-batch nearest-neighbor mining and kNN graph construction.
//!
//! Mining is brute force over the batch — every candidate pair is scored, no
//! index structures — which keeps the semantics exact: ties are broken by
//! lowest index, self-matches are excluded, and an all-zero feature row has
//! cosine similarity 0 against everything.

use crate::linalg::{dot, DataMatrix};
use rayon::prelude::*;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("batch has {rows} rows; neighbor mining needs at least 2")]
    BatchTooSmall { rows: usize },
    #[error("k = {k} but only {rows} rows are available (need k < rows)")]
    KTooLarge { k: usize, rows: usize },
    #[error("anchor {anchor} lists itself as a neighbor")]
    SelfNeighbor { anchor: usize },
    #[error("anchor {anchor} has {got} neighbors, expected {expected}")]
    RaggedNeighbors {
        anchor: usize,
        expected: usize,
        got: usize,
    },
    #[error("neighbor index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

/// Distance/similarity convention used to rank neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Rank by descending cosine similarity; zero rows score 0.
    Cosine,
    /// Rank by ascending Euclidean distance.
    Euclidean,
}

/// Per-anchor neighbor indices: `anchor_count` rows of `k` indices each,
/// ranked best-first under [`Metric`], ties broken by lowest index, self
/// excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    anchor_count: usize,
    k: usize,
    indices: Vec<usize>,
    metric: Metric,
    tie_count: usize,
}

impl NeighborSet {
    /// Assemble a neighbor set from explicit per-anchor index lists.
    pub fn from_indices(indices: Vec<Vec<usize>>, metric: Metric) -> Result<Self> {
        let anchor_count = indices.len();
        let k = indices.first().map_or(0, |r| r.len());
        let mut flat = Vec::with_capacity(anchor_count * k);
        for (anchor, list) in indices.iter().enumerate() {
            if list.len() != k {
                return Err(Error::RaggedNeighbors {
                    anchor,
                    expected: k,
                    got: list.len(),
                });
            }
            for &j in list {
                if j == anchor {
                    return Err(Error::SelfNeighbor { anchor });
                }
                if j >= anchor_count {
                    return Err(Error::IndexOutOfRange {
                        index: j,
                        rows: anchor_count,
                    });
                }
                flat.push(j);
            }
        }
        Ok(Self {
            anchor_count,
            k,
            indices: flat,
            metric,
            tie_count: 0,
        })
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_count
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Number of anchors whose selection hit a ranking tie (broken by index).
    pub fn tie_count(&self) -> usize {
        self.tie_count
    }

    #[inline]
    pub fn neighbors(&self, anchor: usize) -> &[usize] {
        &self.indices[anchor * self.k..(anchor + 1) * self.k]
    }
}

fn row_norms(features: &DataMatrix) -> Vec<f64> {
    (0..features.rows())
        .map(|i| dot(features.row(i), features.row(i)).sqrt())
        .collect()
}

#[inline]
fn cosine(features: &DataMatrix, norms: &[f64], i: usize, j: usize) -> f64 {
    if norms[i] == 0.0 || norms[j] == 0.0 {
        return 0.0;
    }
    dot(features.row(i), features.row(j)) / (norms[i] * norms[j])
}

#[inline]
fn sq_dist(features: &DataMatrix, i: usize, j: usize) -> f64 {
    let (a, b) = (features.row(i), features.row(j));
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

/// For every batch row, the single most cosine-similar other row — the
/// in-batch positive used by the CNA losses. Ties go to the lowest index.
pub fn batch_nearest(features: &DataMatrix) -> Result<NeighborSet> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    let norms = row_norms(features);
    let mine = |i: usize| -> (usize, bool) {
        let mut best_sim = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        let mut tied = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            let sim = cosine(features, &norms, i, j);
            if sim > best_sim {
                best_sim = sim;
                best_j = j;
                tied = false;
            } else if sim == best_sim {
                tied = true;
            }
        }
        (best_j, tied)
    };
    let picks: Vec<(usize, bool)> = if n * n * features.cols() >= 1 << 22 {
        (0..n).into_par_iter().map(mine).collect()
    } else {
        (0..n).map(mine).collect()
    };
    let tie_count = picks.iter().filter(|(_, t)| *t).count();
    Ok(NeighborSet {
        anchor_count: n,
        k: 1,
        indices: picks.into_iter().map(|(j, _)| j).collect(),
        metric: Metric::Cosine,
        tie_count,
    })
}

/// The `k` best other rows per anchor under `metric`, ranked best-first.
pub fn topk(features: &DataMatrix, k: usize, metric: Metric) -> Result<NeighborSet> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    if k == 0 || k >= n {
        return Err(Error::KTooLarge { k, rows: n });
    }
    let norms = match metric {
        Metric::Cosine => row_norms(features),
        Metric::Euclidean => Vec::new(),
    };
    let mine = |i: usize| -> (Vec<usize>, bool) {
        // Keys are arranged so that ascending (key, index) order is the
        // ranking order for both metrics.
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let key = match metric {
                    Metric::Cosine => -cosine(features, &norms, i, j),
                    Metric::Euclidean => sq_dist(features, i, j),
                };
                (key, j)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let boundary_tie = k < scored.len() && scored[k - 1].0 == scored[k].0;
        (scored[..k].iter().map(|&(_, j)| j).collect(), boundary_tie)
    };
    let picks: Vec<(Vec<usize>, bool)> = if n * n * features.cols() >= 1 << 22 {
        (0..n).into_par_iter().map(mine).collect()
    } else {
        (0..n).map(mine).collect()
    };
    let tie_count = picks.iter().filter(|(_, t)| *t).count();
    let mut indices = Vec::with_capacity(n * k);
    for (list, _) in picks {
        indices.extend(list);
    }
    Ok(NeighborSet {
        anchor_count: n,
        k,
        indices,
        metric,
        tie_count,
    })
}

/// Directed kNN edges plus their symmetrized undirected closure, with
/// Euclidean edge lengths. This is the substrate for Isomap geodesics and
/// LLE weight solves.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub neighbors: NeighborSet,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl KnnGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Symmetrized neighbors of `i`, sorted by index, with edge lengths.
    pub fn adjacency(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// All adjacency rows at once, indexed by node.
    pub fn adjacency_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.adjacency
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Connected components of the symmetrized graph.
    pub fn component_count(&self) -> usize {
        let n = self.adjacency.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        components
    }
}

/// Build the symmetrized kNN graph of `data` rows under Euclidean distance.
pub fn knn_graph(data: &DataMatrix, k: usize) -> Result<KnnGraph> {
    let neighbors = topk(data, k, Metric::Euclidean)?;
    let n = data.rows();
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(n * k);
    for i in 0..n {
        for &j in neighbors.neighbors(i) {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let mut adjacency = vec![Vec::new(); n];
    for (a, b) in edges {
        let d = sq_dist(data, a, b).sqrt();
        adjacency[a].push((b, d));
        adjacency[b].push((a, d));
    }
    for adj in &mut adjacency {
        adj.sort_by_key(|&(j, _)| j);
    }
    Ok(KnnGraph {
        neighbors,
        adjacency,
    })
}
