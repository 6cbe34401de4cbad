//! Exact KD-tree backend.
//!
//! Cells are split on the dimension with the largest metric-weighted spread
//! at the median point. Queries keep the per-dimension offsets to the current
//! cell (incremental lower bound) and only prune a cell whose bound exceeds
//! the current k-th distance by more than a relative 1e-9, so rounding in the
//! bound can never discard a true neighbour. Candidate distances are computed
//! by the same routine as the brute-force backend, which makes the two
//! backends' outputs identical.

use rayon::prelude::*;

use super::knn::{check_k, weighted_sq_dist_bounded, NeighborLists, NeighborSearch, TopK};
use super::MetricSpec;
use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::registry::Named;

const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct KdTreeSearch {
    pub leaf_size: usize,
}

impl Default for KdTreeSearch {
    fn default() -> Self {
        Self { leaf_size: 8 }
    }
}

impl Named for KdTreeSearch {
    fn name(&self) -> &'static str {
        "kdtree"
    }
}

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

struct Tree<'a> {
    features: &'a FeatureMatrix,
    weights: Vec<f64>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl<'a> Tree<'a> {
    fn build(features: &'a FeatureMatrix, weights: Vec<f64>, leaf_size: usize) -> Self {
        let mut tree = Tree {
            features,
            weights,
            order: (0..features.rows() as u32).collect(),
            nodes: Vec::new(),
        };
        tree.build_node(0, features.rows(), leaf_size.max(1));
        tree
    }

    fn build_node(&mut self, start: usize, end: usize, leaf_size: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        let span = &self.order[start..end];
        let (lo, hi) = span.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = self.features.row(i as usize)[dim];
            (lo.min(v), hi.max(v))
        });
        if lo == hi {
            // all points coincide in every weighted dimension
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let feats = self.features;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            feats.row(a as usize)[dim]
                .total_cmp(&feats.row(b as usize)[dim])
                .then(a.cmp(&b))
        });
        let value = feats.row(self.order[mid] as usize)[dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid, leaf_size);
        let right = self.build_node(mid, end, leaf_size);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let d = self.weights.len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &i in &self.order[start..end] {
            for (k, &v) in self.features.row(i as usize).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (0..d)
            .max_by(|&a, &b| {
                let sa = (hi[a] - lo[a]).powi(2) * self.weights[a];
                let sb = (hi[b] - lo[b]).powi(2) * self.weights[b];
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .unwrap_or(0)
    }

    fn query(&self, node: usize, q: usize, rd: f64, off: &mut [f64], top: &mut TopK) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let qrow = self.features.row(q);
                for &j in &self.order[start..end] {
                    if j as usize == q {
                        continue;
                    }
                    if let Some(d) =
                        weighted_sq_dist_bounded(qrow, self.features.row(j as usize), &self.weights, top.bound())
                    {
                        top.offer(d, j);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = self.features.row(q)[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.query(near, q, rd, off, top);
                let old = off[dim];
                let w = self.weights[dim];
                let far_rd = rd - w * old * old + w * diff * diff;
                if far_rd <= top.bound() * (1.0 + PRUNE_SLACK) + f64::MIN_POSITIVE {
                    off[dim] = diff;
                    self.query(far, q, far_rd, off, top);
                    off[dim] = old;
                }
            }
        }
    }
}

impl NeighborSearch for KdTreeSearch {
    fn search(&self, features: &FeatureMatrix, metric: &MetricSpec, k: usize) -> Result<NeighborLists> {
        check_k(features, metric, k)?;
        let n = features.rows();
        let tree = Tree::build(features, metric.weights(), self.leaf_size);
        let d = features.dim();
        let mut indices = vec![0u32; n * k];
        let mut dists = vec![0.0; n * k];
        indices
            .par_chunks_mut(k)
            .zip(dists.par_chunks_mut(k))
            .enumerate()
            .for_each_init(
                || (TopK::new(k), vec![0.0; d]),
                |(top, off), (i, (idx_out, dist_out))| {
                    top.clear();
                    off.iter_mut().for_each(|o| *o = 0.0);
                    tree.query(0, i, 0.0, off, top);
                    top.drain_into(idx_out, dist_out);
                },
            );
        Ok(NeighborLists::new(k, indices, dists))
    }
}
