//! Oracle checks returning a one-line detail on success.

use std::sync::Arc;

use gwcl_core::data::{make_split, LabelRaster};
use gwcl_core::features::{FeatureMatrix, PcaModel};
use gwcl_core::graph::{
    batch_submatrix, build_similarity, BruteForceSearch, KdTreeSearch, MetricSpec, NeighborSearch, SparseGraph,
    Symmetrize,
};
use gwcl_core::metrics::{aa, aggregate, chance_agreement, confusion, kappa, oa, MetricReport};
use gwcl_core::net::{activations, backward, forward, MlpGrads, MlpParams};
use gwcl_core::objective::{ce_loss, gwcl_loss, total_loss, Pair, PairSet};
use gwcl_core::optim::{Adam, Optimizer};
use gwcl_core::rng::GwclRng;
use gwcl_core::trainer::Trainer;
use gwcl_core::TrainConfig;
use ndarray::{s, Array2};

use super::{random_features, ref_dense_graph, ref_knn, top_eigenvalues};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Both backends agree with the O(P^2) oracle on 500 random 22-D points, K = 10.
pub fn knn_matches_oracle() -> Check {
    let f = random_features(500, 20, 11);
    let (sm, sn, k) = (0.04, 0.001, 10);
    let metric = MetricSpec::new(20, sm, sn).map_err(|e| e.to_string())?;
    let expected = ref_knn(&f, sm, sn, k);
    let backends: [(&str, &dyn NeighborSearch); 2] = [("brute", &BruteForceSearch), ("kdtree", &KdTreeSearch::default())];
    for (name, backend) in backends {
        let lists = backend.search(&f, &metric, k).map_err(|e| e.to_string())?;
        for (i, want) in expected.iter().enumerate() {
            ensure(lists.neighbors(i) == want.as_slice(), || {
                format!("{name}: node {i} got {:?}, oracle {:?}", lists.neighbors(i), want)
            })?;
        }
    }
    Ok("500 points, K=10: brute and kdtree neighbour lists equal the oracle".into())
}

/// CSR similarity graph equals the dense construction entrywise.
pub fn csr_matches_dense() -> Check {
    let n = 1500;
    let f = random_features(n, 20, 12);
    let (sm, sn, k) = (0.04, 0.04, 10);
    let metric = MetricSpec::new(20, sm, sn).map_err(|e| e.to_string())?;
    let g = build_similarity(&f, &metric, k, Symmetrize::Union, &BruteForceSearch).map_err(|e| e.to_string())?;
    let got = g.to_dense();
    let want = ref_dense_graph(&f, sm, sn, k);
    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("max entry difference {worst:e}"))?;
    let pattern_ok = got.iter().zip(&want).all(|(a, b)| (*a == 0.0) == (*b == 0.0));
    ensure(pattern_ok, || "sparsity pattern differs".into())?;
    Ok(format!("P={n}: max |CSR - dense| = {worst:e}"))
}

/// Batch submatrix equals slicing the dense matrix on a 512-node batch.
pub fn submatrix_matches_dense() -> Check {
    let n = 2000;
    let f = random_features(n, 20, 13);
    let metric = MetricSpec::new(20, 0.04, 0.04).map_err(|e| e.to_string())?;
    let g = build_similarity(&f, &metric, 10, Symmetrize::Union, &BruteForceSearch).map_err(|e| e.to_string())?;
    let dense = g.to_dense();
    let mut order: Vec<u32> = (0..n as u32).collect();
    GwclRng::seed_from_u64(5).shuffle(&mut order);
    // a contiguous run plus random nodes, so the block is not nearly empty
    let mut batch: Vec<u32> = (0..256).collect();
    batch.extend(order.iter().copied().filter(|&v| v >= 256).take(256));
    GwclRng::seed_from_u64(6).shuffle(&mut batch);
    let block = batch_submatrix(&g, &batch).map_err(|e| e.to_string())?;
    let got = block.to_dense();
    let b = batch.len();
    for p in 0..b {
        for q in 0..b {
            let want = dense[batch[p] as usize * n + batch[q] as usize];
            ensure(got[p * b + q] == want, || format!("entry ({p}, {q}): {} vs {want}", got[p * b + q]))?;
        }
    }
    Ok(format!("512-node batch, {} nonzeros, identical to dense slice", block.entries.len()))
}

fn combined_loss(params: &MlpParams, x: &Array2<f64>, pairs: &PairSet, targets: &[usize], lambda: f64) -> (f64, Array2<f64>) {
    let trace = forward(params, x.view()).unwrap();
    let g = gwcl_loss(trace.probs.view(), pairs).unwrap();
    let l = targets.len();
    let ce = ce_loss(trace.probs.slice(s![..l, ..]), targets).unwrap();
    let rows: Vec<usize> = (0..l).collect();
    let (report, dz) = total_loss(&g, &ce, &rows, pairs.len(), lambda).unwrap();
    (report.total, dz)
}

/// Analytic gradient of the combined loss through the network against
/// central differences, for each activation.
pub fn gradients_match_finite_differences() -> Check {
    let mut worst_all: f64 = 0.0;
    let mut count = 0;
    for act_name in ["relu", "tanh", "sigmoid"] {
        let act = activations().get(act_name).map_err(|e| e.to_string())?;
        let params = MlpParams::init(4, 6, 3, act, 21);
        count = params.parameter_count();
        ensure(count <= 100, || format!("{count} parameters"))?;
        let mut rng = GwclRng::seed_from_u64(22);
        let x = Array2::from_shape_fn((7, 4), |_| rng.uniform(-1.0, 1.0));
        let pairs = PairSet::new(vec![
            Pair { p: 0, q: 3, weight: 0.7 },
            Pair { p: 1, q: 4, weight: 1.0 },
            Pair { p: 2, q: 6, weight: 0.2 },
            Pair { p: 5, q: 6, weight: 0.9 },
            Pair { p: 0, q: 1, weight: 0.4 },
        ])
        .unwrap();
        let targets = [0usize, 2, 1];
        let lambda = 8.0;
        let trace = forward(&params, x.view()).unwrap();
        let (_, dz) = combined_loss(&params, &x, &pairs, &targets, lambda);
        let grads: MlpGrads = backward(&params, &trace, dz.view()).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let h = 1e-6;
        let mut idx = 0;
        for t in 0..4 {
            let len = params.tensors()[t].len();
            for e in 0..len {
                let mut plus = params.clone();
                plus.tensors_mut()[t][e] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t][e] -= h;
                let numeric = (combined_loss(&plus, &x, &pairs, &targets, lambda).0
                    - combined_loss(&minus, &x, &pairs, &targets, lambda).0)
                    / (2.0 * h);
                let a = analytic[idx];
                let scale = a.abs().max(numeric.abs());
                let rel = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
                ensure(rel < 1e-4, || {
                    format!("{act_name}: tensor {t} element {e}: analytic {a:e}, numeric {numeric:e}")
                })?;
                worst_all = worst_all.max(rel);
                idx += 1;
            }
        }
    }
    Ok(format!("{count}-parameter nets, relu/tanh/sigmoid, worst relative error {worst_all:.2e}"))
}

/// Confusion, OA, AA, chance agreement, kappa and aggregation on hand-computed cases.
pub fn metrics_match_hand_counts() -> Check {
    let cm = confusion(&[1, 2, 2, 1], &[1, 2, 1, 1], 2).map_err(|e| e.to_string())?;
    let counts = [cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)];
    ensure(counts == [2, 1, 0, 1], || format!("confusion {counts:?}"))?;
    let e = |x: gwcl_core::Result<f64>| x.map_err(|e| e.to_string());
    ensure(e(oa(&cm))? == 0.75, || "oa".into())?;
    ensure((e(aa(&cm))? - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15, || "aa".into())?;
    ensure(e(chance_agreement(&cm))? == 0.5, || "chance agreement".into())?;
    ensure(e(kappa(&cm))? == 0.5, || "kappa".into())?;
    let perfect = confusion(&[1, 2, 3], &[1, 2, 3], 3).map_err(|e| e.to_string())?;
    ensure(e(oa(&perfect))? == 1.0 && e(aa(&perfect))? == 1.0 && e(kappa(&perfect))? == 1.0, || "perfect".into())?;
    let mut r1 = MetricReport::from_confusion(&cm).map_err(|e| e.to_string())?;
    let mut r2 = r1.clone();
    r1.oa.mean = 0.98;
    r2.oa.mean = 0.96;
    let agg = aggregate(&[r1, r2]).map_err(|e| e.to_string())?;
    ensure((agg.oa.mean - 0.97).abs() < 1e-12, || "aggregate mean".into())?;
    ensure((agg.oa.stddev - 0.02f64 / 2f64.sqrt()).abs() < 1e-12, || format!("stddev {}", agg.oa.stddev))?;
    Ok("[[2,1],[0,1]]: oa 0.75, aa 0.8333, P_e 0.5, kappa 0.5; aggregate 0.97 +/- 0.01414".into())
}

/// PCA on a rank-3 model against eigenvalues of the pixel Gram matrix.
pub fn pca_matches_gram_oracle() -> Check {
    let (n, bands) = (200, 200);
    let mut rng = GwclRng::seed_from_u64(31);
    let basis: Vec<f64> = (0..3 * bands).map(|_| rng.normal()).collect();
    let mut x = vec![0.0; n * bands];
    for i in 0..n {
        let coef = [rng.normal() * 3.0, rng.normal() * 2.0, rng.normal()];
        for b in 0..bands {
            x[i * bands + b] = 5.0 + (0..3).map(|k| coef[k] * basis[k * bands + b]).sum::<f64>() + 1e-4 * rng.normal();
        }
    }
    let model = PcaModel::fit(&x, bands, 3).map_err(|e| e.to_string())?;
    let total: f64 = model.explained.iter().sum();
    ensure(total >= 0.999, || format!("explained variance {total}"))?;

    // oracle: standardize independently, eigenvalues of Z Z^T / trace
    let mut z = x.clone();
    for b in 0..bands {
        let mean = (0..n).map(|i| x[i * bands + b]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * bands + b] - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            z[i * bands + b] = (x[i * bands + b] - mean) / var.sqrt();
        }
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = (0..bands).map(|b| z[i * bands + b] * z[j * bands + b]).sum();
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let eig = top_eigenvalues(gram, n, 3);
    for (k, (&got, &lam)) in model.explained.iter().zip(&eig).enumerate() {
        let want = lam / trace;
        ensure((got - want).abs() < 1e-6, || format!("component {k}: {got} vs oracle {want}"))?;
    }
    Ok(format!("rank-3 model, explained variance {total:.6}, components match Gram oracle"))
}

/// Adam on f(x, y) = (x - 3)^2 + 10 (y + 1)^2 from the origin for 200 steps.
pub fn adam_reaches_quadratic_optimum() -> Check {
    let act = activations().get("relu").map_err(|e| e.to_string())?;
    let mut params = MlpParams::zeros(1, 1, 1, act);
    let mut opt = Adam::new(0.1);
    let f = |x: f64, y: f64| (x - 3.0).powi(2) + 10.0 * (y + 1.0).powi(2);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let (x, y) = (params.w1[(0, 0)], params.b1[0]);
        let mut g = MlpGrads {
            w1: Array2::zeros((1, 1)),
            b1: ndarray::Array1::zeros(1),
            w2: Array2::zeros((1, 1)),
            b2: ndarray::Array1::zeros(1),
        };
        g.w1[(0, 0)] = 2.0 * (x - 3.0);
        g.b1[0] = 20.0 * (y + 1.0);
        opt.step(&mut params, &g).map_err(|e| e.to_string())?;
        losses.push(f(params.w1[(0, 0)], params.b1[0]));
    }
    let (x, y) = (params.w1[(0, 0)], params.b1[0]);
    let dist = ((x - 3.0).powi(2) + (y + 1.0).powi(2)).sqrt();
    ensure(dist < 1e-3, || format!("final point ({x}, {y}), distance {dist:e}"))?;
    Ok(format!("distance to optimum after 200 steps {dist:.2e}, final loss {:.2e}", losses[199]))
}

/// 40 linearly separable labeled points; pre-training fits them exactly.
pub fn pretrain_fits_separable_toy() -> Check {
    let (h, w) = (5, 10);
    let mut rng = GwclRng::seed_from_u64(41);
    let codes: Vec<u16> = (0..h * w).map(|i| if i % w < 5 { 1 } else { 2 }).collect();
    let labels = LabelRaster::new(h, w, codes.clone()).map_err(|e| e.to_string())?;
    let mut data = Vec::new();
    for &c in &codes {
        let (cx, cy) = if c == 1 { (0.25, 0.3) } else { (0.75, 0.7) };
        data.extend([cx + rng.uniform(-0.15, 0.15), cy + rng.uniform(-0.15, 0.15), 0.5, 0.5]);
    }
    // hand-built separator x + y = 1
    for (i, &c) in codes.iter().enumerate() {
        let side = data[i * 4] + data[i * 4 + 1] > 1.0;
        ensure(side == (c == 2), || format!("toy point {i} not separable by x + y = 1"))?;
    }
    let coords = (0..h * w).map(|i| ((i / w) as u32, (i % w) as u32)).collect();
    let features = FeatureMatrix::from_parts(2, data, h, w, coords).map_err(|e| e.to_string())?;
    let split = make_split(&labels, &features.indexer().map_err(|e| e.to_string())?, 20, 20, 3).map_err(|e| e.to_string())?;
    ensure(split.labeled.len() == 40, || format!("{} labeled", split.labeled.len()))?;
    let mut cfg = TrainConfig::default();
    cfg.no_spatial_input = true;
    let trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let state = trainer.init_state(2, 2);
    let state = trainer.pretrain(&features, &split, state).map_err(|e| e.to_string())?;
    let nodes: Vec<u32> = split.labeled.iter().map(|(p, _)| p.flat).collect();
    let mut x = vec![0.0; nodes.len() * 2];
    features.gather_into(&nodes, false, &mut x);
    let trace = forward(&state.params, Array2::from_shape_vec((nodes.len(), 2), x).unwrap().view()).map_err(|e| e.to_string())?;
    let preds = gwcl_core::net::argmax_rows(&trace.probs);
    let correct = preds.iter().zip(&split.labeled).filter(|(p, (_, c))| **p + 1 == *c as usize).count();
    ensure(correct == 40, || format!("train accuracy {correct}/40"))?;
    Ok("40 labeled points, 300 epochs: train accuracy 1.0".into())
}

/// Structural invariants of a graph built by `mode`.
pub fn graph_invariants(g: &SparseGraph, k: usize, mode: Symmetrize, outdeg: &[Vec<u32>]) -> Result<(), String> {
    let n = g.nodes();
    for i in 0..n {
        let (idx, w) = g.row(i);
        for (&j, &s) in idx.iter().zip(w) {
            ensure(s > 0.0 && s <= 1.0, || format!("weight {s} out of (0, 1]"))?;
            ensure(j as usize != i, || format!("self loop at {i}"))?;
            if mode != Symmetrize::Directed {
                ensure(g.weight(j as usize, i) == s, || format!("asymmetric pair ({i}, {j})"))?;
            }
        }
        let deg = g.degree(i);
        match mode {
            Symmetrize::Directed => ensure(deg == k, || format!("node {i} out-degree {deg}"))?,
            Symmetrize::Union => {
                let incoming = (0..n).filter(|&m| outdeg[m].contains(&(i as u32))).count();
                ensure(deg >= k && deg <= k + incoming, || format!("node {i} union degree {deg}"))?;
            }
            Symmetrize::Mutual => ensure(deg <= k, || format!("node {i} mutual degree {deg}"))?,
        }
    }
    if mode == Symmetrize::Union {
        ensure(g.nnz() <= 2 * k * n, || format!("union nnz {} above 2KP", g.nnz()))?;
    }
    Ok(())
}

pub fn arc_relu() -> Arc<dyn gwcl_core::net::Activation> {
    activations().get("relu").unwrap()
}
