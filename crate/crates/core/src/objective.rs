//! Graph-weighted contrastive loss, cross-entropy and their combination.
//!
//! With `z` the softmax output of the classifier:
//!
//! * pair similarity `f(z_i, z_j) = exp(-w_ij ||z_i - z_j||^2)`, where the
//!   pair weight `w_ij` is 1 (gaussian), the adjacency indicator, or the graph
//!   similarity `s_ij`;
//! * contrastive loss `L_gwcl = (1/|P|) sum_{(i,j) in P} w_ij ||z_i - z_j||^2`
//!   over the unordered connected pairs `P` of the batch;
//! * cross-entropy `L_ce = -sum_i sum_k t_ik log z_ik` summed over labeled rows;
//! * total `L = L_gwcl + lambda * L_ce`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{GwclError, Result};
use crate::graph::SparseBlock;
use crate::registry::{Named, Registry};

/// Floor inside the cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Maps a stored graph similarity to the weight used in the loss.
pub trait PairWeighting: Named + Send + Sync {
    fn weight(&self, similarity: f64) -> f64;
}

/// Plain Gaussian similarity: every connected pair gets weight 1.
pub struct GaussianWeighting;
/// Binary adjacency: weight 1 where an edge exists.
pub struct IndicatorWeighting;
/// Soft graph weighting: weight `s_ij`.
pub struct GraphWeighting;

impl Named for GaussianWeighting {
    fn name(&self) -> &'static str {
        "gaussian"
    }
}

impl PairWeighting for GaussianWeighting {
    fn weight(&self, _similarity: f64) -> f64 {
        1.0
    }
}

impl Named for IndicatorWeighting {
    fn name(&self) -> &'static str {
        "indicator"
    }
}

impl PairWeighting for IndicatorWeighting {
    fn weight(&self, similarity: f64) -> f64 {
        if similarity > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl Named for GraphWeighting {
    fn name(&self) -> &'static str {
        "graph"
    }
}

impl PairWeighting for GraphWeighting {
    fn weight(&self, similarity: f64) -> f64 {
        similarity
    }
}

pub fn pair_weightings() -> Registry<dyn PairWeighting> {
    Registry::<dyn PairWeighting>::new("similarity kind")
        .with(Arc::new(GaussianWeighting))
        .with(Arc::new(IndicatorWeighting))
        .with(Arc::new(GraphWeighting))
}

/// `exp(-w ||z_i - z_j||^2)`.
pub fn pair_similarity(z_i: &[f64], z_j: &[f64], weight: f64) -> f64 {
    let d: f64 = z_i.iter().zip(z_j).map(|(a, b)| (a - b) * (a - b)).sum();
    (-weight * d).exp()
}

/// [`pair_similarity`] with the weight derived from a graph similarity by `kind`.
pub fn pair_similarity_of(kind: &dyn PairWeighting, z_i: &[f64], z_j: &[f64], similarity: f64) -> f64 {
    pair_similarity(z_i, z_j, kind.weight(similarity))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub p: u32,
    pub q: u32,
    pub weight: f64,
}

/// Unordered positive pairs of a batch, `p < q`, each listed once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pairs: Vec<Pair>,
}

impl PairSet {
    pub fn new(mut pairs: Vec<Pair>) -> Result<Self> {
        for pr in &mut pairs {
            if pr.p == pr.q {
                return Err(GwclError::InvalidParameter(format!("pair ({}, {}) is a self-pair", pr.p, pr.q)));
            }
            if pr.p > pr.q {
                std::mem::swap(&mut pr.p, &mut pr.q);
            }
            if !(pr.weight > 0.0) {
                return Err(GwclError::InvalidParameter(format!(
                    "pair ({}, {}) has non-positive weight {}",
                    pr.p, pr.q, pr.weight
                )));
            }
        }
        pairs.sort_by_key(|pr| (pr.p, pr.q));
        if pairs.windows(2).any(|w| (w[0].p, w[0].q) == (w[1].p, w[1].q)) {
            return Err(GwclError::InvalidParameter("duplicate unordered pair".into()));
        }
        Ok(Self { pairs })
    }

    /// Collects unordered pairs from a batch block. For a directed block the
    /// larger of the two directed similarities is used.
    pub fn from_block(block: &SparseBlock, kind: &dyn PairWeighting) -> Self {
        let mut raw: Vec<(u32, u32, f64)> = block
            .entries
            .iter()
            .map(|&(p, q, s)| (p.min(q), p.max(q), s))
            .collect();
        raw.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(b.2.total_cmp(&a.2)));
        raw.dedup_by_key(|e| (e.0, e.1));
        let pairs = raw
            .into_iter()
            .filter_map(|(p, q, s)| {
                let weight = kind.weight(s);
                (weight > 0.0).then_some(Pair { p, q, weight })
            })
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter()
    }
}

/// A scalar loss with its gradient w.r.t. the rows it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossTerm {
    pub fn zero(rows: usize, classes: usize) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros((rows, classes)),
        }
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean weighted squared distance over the pairs. An empty pair set yields
/// a zero loss and zero gradient.
pub fn gwcl_loss(z: ArrayView2<'_, f64>, pairs: &PairSet) -> Result<LossTerm> {
    let (rows, classes) = z.dim();
    let mut term = LossTerm::zero(rows, classes);
    if pairs.is_empty() {
        return Ok(term);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for pr in pairs.iter() {
        let (p, q) = (pr.p as usize, pr.q as usize);
        if p >= rows || q >= rows {
            return Err(GwclError::IndexOutOfRange {
                index: p.max(q),
                len: rows,
            });
        }
        let (zp, zq) = (z.row(p), z.row(q));
        total += pr.weight * sq_dist(zp, zq);
        for k in 0..classes {
            let g = 2.0 * pr.weight * (zp[k] - zq[k]) * scale;
            term.grad[(p, k)] += g;
            term.grad[(q, k)] -= g;
        }
    }
    term.value = total * scale;
    Ok(term)
}

/// Summed negative log-likelihood of the target classes (0-based).
pub fn ce_loss(z_labeled: ArrayView2<'_, f64>, targets: &[usize]) -> Result<LossTerm> {
    let (rows, classes) = z_labeled.dim();
    if targets.len() != rows {
        return Err(GwclError::Dimension(format!(
            "{} targets for {rows} rows",
            targets.len()
        )));
    }
    let mut term = LossTerm::zero(rows, classes);
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(GwclError::IndexOutOfRange { index: t, len: classes });
        }
        let z = z_labeled[(r, t)];
        if z > LOG_FLOOR {
            term.value -= z.ln();
            term.grad[(r, t)] = -1.0 / z;
        } else {
            term.value -= LOG_FLOOR.ln();
        }
    }
    Ok(term)
}

/// One-hot rows for 0-based class indices.
pub fn one_hot(targets: &[usize], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((targets.len(), classes));
    for (r, &c) in targets.iter().enumerate() {
        t[(r, c)] = 1.0;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_gwcl: f64,
    pub l_ce: f64,
    pub total: f64,
    pub pair_count: usize,
    pub labeled_count: usize,
    pub lambda: f64,
}

/// Combines the two terms. `labeled_rows[r]` is the batch row of the r-th
/// cross-entropy row.
pub fn total_loss(
    gwcl: &LossTerm,
    ce: &LossTerm,
    labeled_rows: &[usize],
    pair_count: usize,
    lambda: f64,
) -> Result<(LossReport, Array2<f64>)> {
    if !(lambda >= 0.0) {
        return Err(GwclError::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if ce.grad.nrows() != labeled_rows.len() || ce.grad.ncols() != gwcl.grad.ncols() {
        return Err(GwclError::Dimension(format!(
            "cross-entropy gradient is {:?} for {} labeled rows",
            ce.grad.dim(),
            labeled_rows.len()
        )));
    }
    let mut grad = gwcl.grad.clone();
    if lambda != 0.0 {
        for (r, &row) in labeled_rows.iter().enumerate() {
            if row >= grad.nrows() {
                return Err(GwclError::IndexOutOfRange {
                    index: row,
                    len: grad.nrows(),
                });
            }
            for k in 0..grad.ncols() {
                grad[(row, k)] += lambda * ce.grad[(r, k)];
            }
        }
    }
    let report = LossReport {
        l_gwcl: gwcl.value,
        l_ce: ce.value,
        total: gwcl.value + lambda * ce.value,
        pair_count,
        labeled_count: labeled_rows.len(),
        lambda,
    };
    Ok((report, grad))
}
