//! Exact K-nearest-neighbour search under the diagonal Mahalanobis metric.

use std::sync::Arc;

use rayon::prelude::*;

use super::kdtree::KdTreeSearch;
use super::MetricSpec;
use crate::error::{GwclError, Result};
use crate::features::FeatureMatrix;
use crate::registry::{Named, Registry};

/// `sum_k (a_k - b_k)^2 * w_k`, accumulated in dimension order.
///
/// Every backend evaluates distances through this function (or its early-exit
/// twin below) so results agree bit-for-bit.
#[inline]
pub fn weighted_sq_dist(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..w.len() {
        let d = a[k] - b[k];
        acc += d * d * w[k];
    }
    acc
}

/// Same sum as [`weighted_sq_dist`], abandoned once it exceeds `bound`.
/// Returns `None` when abandoned; otherwise the exact full sum.
#[inline]
pub(crate) fn weighted_sq_dist_bounded(a: &[f64], b: &[f64], w: &[f64], bound: f64) -> Option<f64> {
    let mut acc = 0.0;
    for k in 0..w.len() {
        let d = a[k] - b[k];
        acc += d * d * w[k];
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

/// Per-node neighbour lists, each sorted by `(distance, index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    k: usize,
    indices: Vec<u32>,
    dists: Vec<f64>,
}

impl NeighborLists {
    pub fn new(k: usize, indices: Vec<u32>, dists: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), dists.len());
        Self { k, indices, dists }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nodes(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.indices[node * self.k..(node + 1) * self.k]
    }

    pub fn distances(&self, node: usize) -> &[f64] {
        &self.dists[node * self.k..(node + 1) * self.k]
    }
}

/// Bounded candidate list holding the `k` smallest `(distance, index)` pairs.
#[derive(Debug, Clone)]
pub(crate) struct TopK {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    pub(crate) fn clear(&mut self) {
        self.items.clear();
    }

    pub(crate) fn is_full(&self) -> bool {
        self.items.len() == self.k
    }

    /// Current admission bound: the k-th distance, or +inf while filling.
    #[inline]
    pub(crate) fn bound(&self) -> f64 {
        if self.is_full() {
            self.items[self.k - 1].0
        } else {
            f64::INFINITY
        }
    }

    #[inline]
    pub(crate) fn offer(&mut self, dist: f64, idx: u32) {
        let key = (dist, idx);
        if self.is_full() {
            let last = self.items[self.k - 1];
            if !lex_less(key, last) {
                return;
            }
        }
        let pos = self.items.partition_point(|&e| lex_less(e, key));
        self.items.insert(pos, key);
        self.items.truncate(self.k);
    }

    pub(crate) fn drain_into(&self, indices: &mut [u32], dists: &mut [f64]) {
        for (slot, &(d, i)) in self.items.iter().enumerate() {
            indices[slot] = i;
            dists[slot] = d;
        }
    }
}

#[inline]
fn lex_less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// A strategy for exact K-NN queries over every feature row.
pub trait NeighborSearch: Named + Send + Sync {
    /// For every node, the `k` other nodes nearest to it, ties to smaller index.
    fn search(&self, features: &FeatureMatrix, metric: &MetricSpec, k: usize) -> Result<NeighborLists>;
}

pub fn neighbor_backends() -> Registry<dyn NeighborSearch> {
    Registry::<dyn NeighborSearch>::new("knn backend")
        .with(Arc::new(BruteForceSearch))
        .with(Arc::new(KdTreeSearch::default()))
}

pub(crate) fn check_k(features: &FeatureMatrix, metric: &MetricSpec, k: usize) -> Result<()> {
    if features.dim() != metric.dim() {
        return Err(GwclError::Dimension(format!(
            "features have {} columns, metric expects {}",
            features.dim(),
            metric.dim()
        )));
    }
    if k == 0 || k >= features.rows() {
        return Err(GwclError::InvalidParameter(format!(
            "K must satisfy 1 <= K < P, got K={k}, P={}",
            features.rows()
        )));
    }
    Ok(())
}

/// Exhaustive scan of all pairs, parallel over query rows.
pub struct BruteForceSearch;

impl Named for BruteForceSearch {
    fn name(&self) -> &'static str {
        "brute"
    }
}

impl NeighborSearch for BruteForceSearch {
    fn search(&self, features: &FeatureMatrix, metric: &MetricSpec, k: usize) -> Result<NeighborLists> {
        check_k(features, metric, k)?;
        let n = features.rows();
        let w = metric.weights();
        let mut indices = vec![0u32; n * k];
        let mut dists = vec![0.0; n * k];
        indices
            .par_chunks_mut(k)
            .zip(dists.par_chunks_mut(k))
            .enumerate()
            .for_each_init(
                || TopK::new(k),
                |top, (i, (idx_out, dist_out))| {
                    top.clear();
                    let q = features.row(i);
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        if let Some(d) = weighted_sq_dist_bounded(q, features.row(j), &w, top.bound()) {
                            top.offer(d, j as u32);
                        }
                    }
                    top.drain_into(idx_out, dist_out);
                },
            );
        Ok(NeighborLists::new(k, indices, dists))
    }
}
