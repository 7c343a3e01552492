//! Transductive embeddings: locally linear reconstruction and geodesic
//! multidimensional scaling, plus an out-of-sample extension that carries
//! held-out points into an existing embedding.
//!
//! Both methods operate on a k-nearest-neighbor structure over the input
//! rows and produce an [`Embedding`] — coordinates per row plus the
//! eigenvalue slice backing them.

use crate::linalg::{self, solve_spd, sym_eig, DataMatrix};
use crate::neighbors::{self, knn_graph, topk, Metric, NeighborSet};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Ridge factor applied to a reconstruction Gram matrix, times
/// `trace(C) / k`.
pub const RECONSTRUCTION_RIDGE: f64 = 1e-3;

/// Row count past which per-source shortest paths run on the global thread
/// pool.
const PAR_DIJKSTRA_MIN_ROWS: usize = 64;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding dimension {dim} does not fit {rows} rows")]
    BadDim { dim: usize, rows: usize },
    #[error("neighbor graph splits into {components} components; embedding needs one")]
    DisconnectedGraph { components: usize },
    #[error("{what} has {got} rows, expected {expected}")]
    RowMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} has {got} columns, expected {expected}")]
    ColMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Neighbors(#[from] neighbors::Error),
    #[error(transparent)]
    Matrix(#[from] linalg::Error),
}

/// Coordinates produced by an embedding, one row per input row, together
/// with the eigenvalues that selected them.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: DataMatrix,
    pub spectrum: Vec<f64>,
}

/// Solve for weights reconstructing `point` from `neighbor_rows` as an
/// affine combination (weights sum to one, least-squares residual).
///
/// The Gram matrix gets an upfront ridge of `RECONSTRUCTION_RIDGE ·
/// trace / k` whenever it is rank-deficient by construction (more neighbors
/// than input dimensions); otherwise plain Cholesky runs first and the ridge
/// is a fallback. Neighbors coincident with the point (zero trace) yield
/// uniform weights.
fn reconstruction_weights(point: &[f64], neighbor_rows: &[&[f64]]) -> Result<Vec<f64>> {
    let k = neighbor_rows.len();
    let dim = point.len();
    let diffs: Vec<Vec<f64>> = neighbor_rows
        .iter()
        .map(|row| point.iter().zip(*row).map(|(p, n)| p - n).collect())
        .collect();
    let mut gram = DataMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = linalg::dot(&diffs[a], &diffs[b]);
            gram.set(a, b, v);
            gram.set(b, a, v);
        }
    }
    let trace: f64 = (0..k).map(|a| gram.get(a, a)).sum();
    if trace == 0.0 {
        return Ok(vec![1.0 / k as f64; k]);
    }
    let ridge = RECONSTRUCTION_RIDGE * trace / k as f64;
    let add_ridge = |g: &DataMatrix| {
        let mut r = g.clone();
        for a in 0..k {
            r.set(a, a, r.get(a, a) + ridge);
        }
        r
    };
    let ones = vec![1.0; k];
    let solved = if k > dim {
        solve_spd(&add_ridge(&gram), &ones)?
    } else {
        match solve_spd(&gram, &ones) {
            Ok(w) => w,
            Err(linalg::Error::SingularAfterRegularization { .. }) => {
                solve_spd(&add_ridge(&gram), &ones)?
            }
            Err(e) => return Err(e.into()),
        }
    };
    let sum: f64 = solved.iter().sum();
    if sum == 0.0 {
        return Ok(vec![1.0 / k as f64; k]);
    }
    Ok(solved.into_iter().map(|w| w / sum).collect())
}

/// Per-anchor affine reconstruction weights aligned with `neighbors`:
/// row `i` holds the weights of `neighbors.neighbors(i)` in order.
pub fn lle_weights(data: &DataMatrix, neighbors: &NeighborSet) -> Result<DataMatrix> {
    let n = data.rows();
    if neighbors.anchor_count() != n {
        return Err(Error::RowMismatch {
            what: "neighbor set",
            expected: n,
            got: neighbors.anchor_count(),
        });
    }
    let k = neighbors.k();
    let mut weights = DataMatrix::zeros(n, k);
    for i in 0..n {
        let rows: Vec<&[f64]> = neighbors.neighbors(i).iter().map(|&j| data.row(j)).collect();
        let w = reconstruction_weights(data.row(i), &rows)?;
        weights.row_mut(i).copy_from_slice(&w);
    }
    Ok(weights)
}

/// Assemble `(I − W)ᵀ (I − W)` from per-anchor weight rows.
fn lle_matrix(n: usize, neighbors: &NeighborSet, weights: &DataMatrix) -> DataMatrix {
    let mut m = DataMatrix::zeros(n, n);
    for i in 0..n {
        let idx = neighbors.neighbors(i);
        let w = weights.row(i);
        m.set(i, i, m.get(i, i) + 1.0);
        for (a, &ja) in idx.iter().enumerate() {
            m.set(i, ja, m.get(i, ja) - w[a]);
            m.set(ja, i, m.get(ja, i) - w[a]);
            for (b, &jb) in idx.iter().enumerate() {
                m.set(ja, jb, m.get(ja, jb) + w[a] * w[b]);
            }
        }
    }
    m
}

/// Locally linear embedding: reconstruct each row from its `k` nearest
/// neighbors, then take the `dim` bottom non-constant eigenvectors of
/// `(I − W)ᵀ(I − W)`, scaled by `√n` so coordinates are O(1).
pub fn lle_embed(data: &DataMatrix, k: usize, dim: usize) -> Result<Embedding> {
    let n = data.rows();
    if dim == 0 || dim + 1 > n {
        return Err(Error::BadDim { dim, rows: n });
    }
    let nbrs = topk(data, k, Metric::Euclidean)?;
    let weights = lle_weights(data, &nbrs)?;
    let m = lle_matrix(n, &nbrs, &weights);
    let eig = sym_eig(&m)?;
    let scale = (n as f64).sqrt();
    let mut coords = DataMatrix::zeros(n, dim);
    for c in 0..dim {
        for r in 0..n {
            coords.set(r, c, eig.eigenvectors.get(r, c + 1) * scale);
        }
    }
    Ok(Embedding {
        coords,
        spectrum: eig.eigenvalues[1..=dim].to_vec(),
    })
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the smallest distance; ties pop the
        // lowest node index.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra_row(adjacency: &[Vec<(usize, f64)>], source: usize, out: &mut [f64]) {
    out.fill(f64::INFINITY);
    out[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapEntry { dist, node }) = heap.pop() {
        if dist > out[node] {
            continue;
        }
        for &(next, w) in &adjacency[node] {
            let cand = dist + w;
            if cand < out[next] {
                out[next] = cand;
                heap.push(HeapEntry {
                    dist: cand,
                    node: next,
                });
            }
        }
    }
}

/// All-pairs shortest path lengths over a symmetric weighted adjacency.
fn graph_distances(adjacency: &[Vec<(usize, f64)>]) -> DataMatrix {
    let n = adjacency.len();
    let mut d = DataMatrix::zeros(n, n);
    if n >= PAR_DIJKSTRA_MIN_ROWS {
        let cols = n;
        d.values_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(source, row)| dijkstra_row(adjacency, source, row));
    } else {
        for source in 0..n {
            dijkstra_row(adjacency, source, d.row_mut(source));
        }
    }
    d
}

/// Geodesic embedding: squared shortest-path distances over the symmetrized
/// k-nearest-neighbor graph are double-centered and factored; coordinates
/// are the top `dim` eigenvectors scaled by the square roots of their
/// eigenvalues.
pub fn isomap_embed(data: &DataMatrix, k: usize, dim: usize) -> Result<Embedding> {
    let n = data.rows();
    if dim == 0 || dim > n {
        return Err(Error::BadDim { dim, rows: n });
    }
    let graph = knn_graph(data, k)?;
    let components = graph.component_count();
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    let geo = graph_distances(graph_adjacency(&graph));

    // Double centering of squared distances: b = −½ J D² J.
    let inv_n = 1.0 / n as f64;
    let mut sq = DataMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = geo.get(i, j);
            sq.set(i, j, v * v);
        }
    }
    let mut row_mean = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        let mean = sq.row(i).iter().sum::<f64>() * inv_n;
        row_mean[i] = mean;
        grand += mean * inv_n;
    }
    let mut b = DataMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let centered = -0.5 * (sq.get(i, j) - row_mean[i] - row_mean[j] + grand);
            let mirrored = -0.5 * (sq.get(j, i) - row_mean[j] - row_mean[i] + grand);
            let v = 0.5 * (centered + mirrored);
            b.set(i, j, v);
            b.set(j, i, v);
        }
    }
    let eig = sym_eig(&b)?;
    let mut coords = DataMatrix::zeros(n, dim);
    let mut spectrum = Vec::with_capacity(dim);
    for c in 0..dim {
        let src = n - 1 - c;
        let lambda = eig.eigenvalues[src];
        spectrum.push(lambda);
        let scale = lambda.max(0.0).sqrt();
        for r in 0..n {
            coords.set(r, c, eig.eigenvectors.get(r, src) * scale);
        }
    }
    Ok(Embedding { coords, spectrum })
}

fn graph_adjacency(graph: &crate::neighbors::KnnGraph) -> &[Vec<(usize, f64)>] {
    graph.adjacency_rows()
}

/// Map held-out rows into an existing embedding: each test row is written
/// as an affine combination of its `k` nearest training rows in the source
/// space, and the same combination is applied to the training coordinates.
pub fn out_of_sample(
    train_source: &DataMatrix,
    train_embedded: &DataMatrix,
    test_source: &DataMatrix,
    k: usize,
) -> Result<DataMatrix> {
    let n = train_source.rows();
    if train_embedded.rows() != n {
        return Err(Error::RowMismatch {
            what: "train_embedded",
            expected: n,
            got: train_embedded.rows(),
        });
    }
    if test_source.cols() != train_source.cols() {
        return Err(Error::ColMismatch {
            what: "test_source",
            expected: train_source.cols(),
            got: test_source.cols(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::Neighbors(neighbors::Error::KTooLarge { k, rows: n }));
    }
    let dim = train_embedded.cols();
    let mut out = DataMatrix::zeros(test_source.rows(), dim);
    for t in 0..test_source.rows() {
        let point = test_source.row(t);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let mut sq = 0.0;
                for (a, b) in point.iter().zip(train_source.row(j)) {
                    let diff = a - b;
                    sq += diff * diff;
                }
                (sq, j)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let picked: Vec<usize> = scored[..k].iter().map(|&(_, j)| j).collect();
        let rows: Vec<&[f64]> = picked.iter().map(|&j| train_source.row(j)).collect();
        let w = reconstruction_weights(point, &rows)?;
        let dest = out.row_mut(t);
        for (&j, &wj) in picked.iter().zip(&w) {
            for (a, v) in dest.iter_mut().zip(train_embedded.row(j)) {
                *a += wj * v;
            }
        }
    }
    Ok(out)
}
