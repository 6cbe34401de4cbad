//! Pixel-level K-NN similarity graph.
//!
//! `s_ij = exp(-d_ij / 2)` with `d_ij = (x_i - x_j)^T S^-1 (x_i - x_j)` and
//! `S = diag(1, ..., 1, sigma_m, sigma_n)`, kept only when one node is among
//! the other's K nearest neighbours. Stored as CSR with `u32` column indices.

mod kdtree;
mod knn;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use kdtree::KdTreeSearch;
pub use knn::{neighbor_backends, weighted_sq_dist, BruteForceSearch, NeighborLists, NeighborSearch};

use crate::error::{GwclError, Result};
use crate::features::FeatureMatrix;
use crate::rawio::{ArrayBundle, ArrayData};

/// Diagonal metric with unit spectral weights and spatial variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSpec {
    beta: usize,
    sigma_m: f64,
    sigma_n: f64,
}

impl MetricSpec {
    pub fn new(beta: usize, sigma_m: f64, sigma_n: f64) -> Result<Self> {
        if !(sigma_m > 0.0 && sigma_m.is_finite() && sigma_n > 0.0 && sigma_n.is_finite()) {
            return Err(GwclError::InvalidParameter(format!(
                "sigma_m and sigma_n must be positive and finite, got {sigma_m}, {sigma_n}"
            )));
        }
        Ok(Self {
            beta,
            sigma_m,
            sigma_n,
        })
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn sigma_m(&self) -> f64 {
        self.sigma_m
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    pub fn dim(&self) -> usize {
        self.beta + 2
    }

    /// Diagonal of the inverse covariance.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.beta];
        w.push(1.0 / self.sigma_m);
        w.push(1.0 / self.sigma_n);
        w
    }
}

/// The quadratic form `(x_i - x_j)^T S^-1 (x_i - x_j)`.
pub fn mahalanobis_sq(x_i: &[f64], x_j: &[f64], metric: &MetricSpec) -> f64 {
    weighted_sq_dist(x_i, x_j, &metric.weights())
}

/// `exp(-d/2)`, floored at the smallest normal `f64` so stored weights stay positive.
#[inline]
pub fn similarity_from_sq(d: f64) -> f64 {
    (-0.5 * d).exp().max(f64::MIN_POSITIVE)
}

/// How the directed K-NN relation becomes the stored edge set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Symmetrize {
    /// Edge if either node lists the other.
    #[default]
    Union,
    /// Edge only if both nodes list each other.
    Mutual,
    /// Keep the directed relation: row `i` holds K-NN(i).
    Directed,
}

impl FromStr for Symmetrize {
    type Err = GwclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "union" => Ok(Symmetrize::Union),
            "mutual" => Ok(Symmetrize::Mutual),
            "directed" | "none" => Ok(Symmetrize::Directed),
            other => Err(GwclError::UnknownStrategy {
                kind: "symmetrization",
                name: other.to_string(),
                available: "union, mutual, directed".into(),
            }),
        }
    }
}

impl fmt::Display for Symmetrize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Symmetrize::Union => "union",
            Symmetrize::Mutual => "mutual",
            Symmetrize::Directed => "directed",
        })
    }
}

/// Weighted graph in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
    symmetric: bool,
}

impl SparseGraph {
    /// Builds from per-row `(column, weight)` lists; rows are sorted here.
    pub fn from_rows(mut rows: Vec<Vec<(u32, f64)>>, symmetric: bool) -> Result<Self> {
        let n = rows.len();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable_by_key(|e| e.0);
            row.dedup_by_key(|e| e.0);
            for &(j, w) in row.iter() {
                if j as usize >= n {
                    return Err(GwclError::IndexOutOfRange {
                        index: j as usize,
                        len: n,
                    });
                }
                if j as usize == i {
                    return Err(GwclError::InvalidParameter(format!("self-loop at node {i}")));
                }
                indices.push(j);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        let g = Self {
            offsets,
            indices,
            weights,
            symmetric,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn empty(nodes: usize) -> Self {
        Self {
            offsets: vec![0; nodes + 1],
            indices: Vec::new(),
            weights: Vec::new(),
            symmetric: true,
        }
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn row(&self, node: usize) -> (&[u32], &[f64]) {
        let r = self.offsets[node]..self.offsets[node + 1];
        (&self.indices[r.clone()], &self.weights[r])
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Stored weight of `(i, j)`, or 0 when absent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (cols, ws) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => ws[p],
            Err(_) => 0.0,
        }
    }

    /// Dense `nodes x nodes` copy; intended for small graphs and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.nodes();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let (cols, ws) = self.row(i);
            for (&j, &w) in cols.iter().zip(ws) {
                out[i * n + j as usize] = w;
            }
        }
        out
    }

    /// Checks the structural invariants: weight range, no self-loops, sorted
    /// columns, and exact symmetry when flagged.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes();
        for i in 0..n {
            let (cols, ws) = self.row(i);
            for (p, (&j, &w)) in cols.iter().zip(ws).enumerate() {
                if !(w > 0.0 && w <= 1.0) {
                    return Err(GwclError::InvalidParameter(format!(
                        "edge ({i},{j}) weight {w} outside (0, 1]"
                    )));
                }
                if j as usize == i {
                    return Err(GwclError::InvalidParameter(format!("self-loop at node {i}")));
                }
                if p > 0 && cols[p - 1] >= j {
                    return Err(GwclError::InvalidParameter(format!("row {i} columns not strictly sorted")));
                }
            }
        }
        if self.symmetric {
            for i in 0..n {
                let (cols, ws) = self.row(i);
                for (&j, &w) in cols.iter().zip(ws) {
                    if self.weight(j as usize, i) != w {
                        return Err(GwclError::InvalidParameter(format!(
                            "graph flagged symmetric but ({i},{j}) != ({j},{i})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> ArrayBundle {
        let mut b = ArrayBundle::new("graph");
        b.meta
            .set("nodes", self.nodes())
            .set("nnz", self.nnz())
            .set("symmetric", self.symmetric);
        b.push(
            "offsets",
            ArrayData::U64(self.offsets.iter().map(|&o| o as u64).collect()),
        )
        .push("indices", ArrayData::U32(self.indices.clone()))
        .push("weights", ArrayData::F64(self.weights.clone()));
        b
    }

    pub fn from_bundle(b: &ArrayBundle) -> Result<Self> {
        let offsets: Vec<usize> = b.u64s("offsets")?.iter().map(|&o| o as usize).collect();
        let indices = b.u32s("indices")?.to_vec();
        let weights = b.f64s("weights")?.to_vec();
        let symmetric: bool = b.meta.parse_key("symmetric")?;
        if offsets.is_empty()
            || offsets[0] != 0
            || *offsets.last().unwrap() != indices.len()
            || indices.len() != weights.len()
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(GwclError::Dimension("inconsistent CSR arrays".into()));
        }
        let g = Self {
            offsets,
            indices,
            weights,
            symmetric,
        };
        for &j in &g.indices {
            if j as usize >= g.nodes() {
                return Err(GwclError::IndexOutOfRange {
                    index: j as usize,
                    len: g.nodes(),
                });
            }
        }
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        self.to_bundle().save(base)
    }

    pub fn load(base: &Path) -> Result<Self> {
        Self::from_bundle(&ArrayBundle::load(base, "graph")?)
    }

    pub fn summary(&self) -> GraphSummary {
        let mut degree_histogram = BTreeMap::new();
        for i in 0..self.nodes() {
            *degree_histogram.entry(self.degree(i)).or_insert(0usize) += 1;
        }
        let mut sorted = self.weights.clone();
        sorted.sort_by(f64::total_cmp);
        let quantile = |q: f64| -> f64 {
            if sorted.is_empty() {
                return f64::NAN;
            }
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        GraphSummary {
            nodes: self.nodes(),
            nnz: self.nnz(),
            symmetric: self.symmetric,
            degree_histogram,
            weight_quantiles: [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| (q, quantile(q))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphSummary {
    pub nodes: usize,
    pub nnz: usize,
    pub symmetric: bool,
    pub degree_histogram: BTreeMap<usize, usize>,
    pub weight_quantiles: [(f64, f64); 5],
}

impl fmt::Display for GraphSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes: {}", self.nodes)?;
        writeln!(f, "nnz: {}", self.nnz)?;
        writeln!(f, "symmetric: {}", self.symmetric)?;
        writeln!(f, "degree histogram:")?;
        for (deg, count) in &self.degree_histogram {
            writeln!(f, "  {deg:>4}: {count}")?;
        }
        writeln!(f, "weight quantiles:")?;
        for (q, v) in &self.weight_quantiles {
            writeln!(f, "  q{:<4}: {v:.6e}", q)?;
        }
        Ok(())
    }
}

/// Unit-weight copy of a graph's sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyIndicator(SparseGraph);

impl AdjacencyIndicator {
    pub fn graph(&self) -> &SparseGraph {
        &self.0
    }

    pub fn nnz(&self) -> usize {
        self.0.nnz()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.weight(i, j)
    }
}

pub fn to_indicator(graph: &SparseGraph) -> AdjacencyIndicator {
    let mut g = graph.clone();
    g.weights.iter_mut().for_each(|w| *w = 1.0);
    AdjacencyIndicator(g)
}

/// Builds the similarity graph from precomputed neighbour lists.
pub fn graph_from_neighbors(lists: &NeighborLists, mode: Symmetrize) -> Result<SparseGraph> {
    let n = lists.nodes();
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for (&j, &d) in lists.neighbors(i).iter().zip(lists.distances(i)) {
            let w = similarity_from_sq(d);
            rows[i].push((j, w));
            if mode == Symmetrize::Union {
                rows[j as usize].push((i as u32, w));
            }
        }
    }
    match mode {
        Symmetrize::Union => SparseGraph::from_rows(rows, true),
        Symmetrize::Directed => SparseGraph::from_rows(rows, false),
        Symmetrize::Mutual => {
            let directed = SparseGraph::from_rows(rows, false)?;
            let mutual = (0..n)
                .map(|i| {
                    let (cols, ws) = directed.row(i);
                    cols.iter()
                        .zip(ws)
                        .filter(|(&j, _)| directed.weight(j as usize, i) > 0.0)
                        .map(|(&j, &w)| (j, w))
                        .collect()
                })
                .collect();
            SparseGraph::from_rows(mutual, true)
        }
    }
}

/// K-NN search followed by weighting and symmetrization.
pub fn build_similarity(
    features: &FeatureMatrix,
    metric: &MetricSpec,
    k: usize,
    mode: Symmetrize,
    backend: &dyn NeighborSearch,
) -> Result<SparseGraph> {
    let lists = backend.search(features, metric, k)?;
    graph_from_neighbors(&lists, mode)
}

/// Similarities among the nodes of one mini-batch.
///
/// `entries` holds every nonzero `(p, q, s)` with local positions `p != q`,
/// sorted by `(p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    pub size: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl SparseBlock {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.size * self.size];
        for &(p, q, w) in &self.entries {
            out[p as usize * self.size + q as usize] = w;
        }
        out
    }
}

/// Extracts `T[p][q] = s(nodes[p], nodes[q])` without touching nodes outside
/// the batch: each batch row's neighbours are looked up in a sorted copy of
/// the batch, `O(|B| * degree * log |B|)`.
pub fn batch_submatrix(graph: &SparseGraph, nodes: &[u32]) -> Result<SparseBlock> {
    let n = graph.nodes();
    let mut sorted: Vec<(u32, u32)> = nodes.iter().enumerate().map(|(p, &v)| (v, p as u32)).collect();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(GwclError::DuplicateIndex(w[0].0 as usize));
        }
    }
    if let Some(&(v, _)) = sorted.last() {
        if v as usize >= n {
            return Err(GwclError::IndexOutOfRange {
                index: v as usize,
                len: n,
            });
        }
    }
    let mut entries = Vec::new();
    for (p, &node) in nodes.iter().enumerate() {
        let (cols, ws) = graph.row(node as usize);
        for (&j, &w) in cols.iter().zip(ws) {
            if let Ok(pos) = sorted.binary_search_by_key(&j, |e| e.0) {
                entries.push((p as u32, sorted[pos].1, w));
            }
        }
    }
    entries.sort_unstable_by_key(|e| (e.0, e.1));
    Ok(SparseBlock {
        size: nodes.len(),
        entries,
    })
}
