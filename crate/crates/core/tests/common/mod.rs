//! Fixtures and independent reference implementations shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use gwcl_core::data::{HsiCube, LabelRaster};
use gwcl_core::features::FeatureMatrix;
use gwcl_core::rng::GwclRng;

/// Smooth class signature: a class-specific mix of low-frequency sines.
pub fn signature(class: usize, bands: usize) -> Vec<f64> {
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands as f64;
            let k = class as f64 + 1.0;
            0.5 + 0.25 * (std::f64::consts::PI * k * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * t + k).cos()
        })
        .collect()
}

/// Band-sequential cube where pixel `(r, c)` has the signature of
/// `class_of(r, c)` scaled by `separation` plus white noise.
pub fn synthetic_cube(
    height: usize,
    width: usize,
    bands: usize,
    class_of: &dyn Fn(usize, usize) -> usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> HsiCube {
    let mut rng = GwclRng::seed_from_u64(seed);
    let classes = (0..height * width).map(|i| class_of(i / width, i % width)).max().unwrap() + 1;
    let sigs: Vec<Vec<f64>> = (0..classes).map(|k| signature(k, bands)).collect();
    let plane = height * width;
    let mut values = vec![0.0; plane * bands];
    for p in 0..plane {
        let k = class_of(p / width, p % width);
        for b in 0..bands {
            values[b * plane + p] = 1.0 + separation * sigs[k][b] + noise * rng.normal();
        }
    }
    HsiCube::new(height, width, bands, values).unwrap()
}

pub fn labels_from(height: usize, width: usize, class_of: &dyn Fn(usize, usize) -> usize) -> LabelRaster {
    let codes = (0..height * width).map(|i| class_of(i / width, i % width) as u16 + 1).collect();
    LabelRaster::new(height, width, codes).unwrap()
}

/// 20x20 image split into left and right halves with well separated spectra.
pub fn two_class_scene(seed: u64) -> (HsiCube, LabelRaster) {
    let f = |_r: usize, c: usize| usize::from(c >= 10);
    (synthetic_cube(20, 20, 30, &f, 1.0, 0.02, seed), labels_from(20, 20, &f))
}

/// 4-class scene: 5x5 blocks with pseudo-random classes and spectra whose
/// class means are close relative to the noise.
pub fn overlap_scene(seed: u64) -> (HsiCube, LabelRaster) {
    const SIDE: usize = 40;
    const BLOCK: usize = 5;
    let blocks = SIDE / BLOCK;
    let mut rng = GwclRng::seed_from_u64(0xB10C);
    let assign: Vec<usize> = (0..blocks * blocks).map(|i| (i + rng.below(4) as usize) % 4).collect();
    let f = move |r: usize, c: usize| assign[(r / BLOCK) * blocks + c / BLOCK];
    (synthetic_cube(SIDE, SIDE, 40, &f, 0.2, 0.05, seed), labels_from(SIDE, SIDE, &f))
}

/// Random `n x (beta + 2)` feature matrix in the unit cube on a near-square raster.
pub fn random_features(n: usize, beta: usize, seed: u64) -> FeatureMatrix {
    let mut rng = GwclRng::seed_from_u64(seed);
    let width = (n as f64).sqrt().ceil() as usize;
    let height = n.div_ceil(width);
    let data: Vec<f64> = (0..n * (beta + 2)).map(|_| rng.unit_f64()).collect();
    let coords = (0..n).map(|i| ((i / width) as u32, (i % width) as u32)).collect();
    FeatureMatrix::from_parts(beta, data, height, width, coords).unwrap()
}

/// Reference quadratic form, written independently of the library.
pub fn ref_quadratic(a: &[f64], b: &[f64], beta: usize, sigma_m: f64, sigma_n: f64) -> f64 {
    let mut d = 0.0;
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        let var = if k < beta {
            1.0
        } else if k == beta {
            sigma_m
        } else {
            sigma_n
        };
        d += diff * diff / var;
    }
    d
}

/// O(P^2) exact neighbours: sort every candidate by `(distance, index)`.
pub fn ref_knn(f: &FeatureMatrix, sigma_m: f64, sigma_n: f64, k: usize) -> Vec<Vec<u32>> {
    let n = f.rows();
    (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (ref_quadratic(f.row(i), f.row(j), f.beta(), sigma_m, sigma_n), j as u32))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(|c| c.1).collect()
        })
        .collect()
}

/// Dense union-symmetrized similarity matrix from reference neighbour lists.
pub fn ref_dense_graph(f: &FeatureMatrix, sigma_m: f64, sigma_n: f64, k: usize) -> Vec<f64> {
    let n = f.rows();
    let lists = ref_knn(f, sigma_m, sigma_n, k);
    let mut dense = vec![0.0; n * n];
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            let j = j as usize;
            let s = (-0.5 * ref_quadratic(f.row(i), f.row(j), f.beta(), sigma_m, sigma_n))
                .exp()
                .max(f64::MIN_POSITIVE);
            dense[i * n + j] = s;
            dense[j * n + i] = s;
        }
    }
    dense
}

/// Top eigenvalues of a symmetric matrix by power iteration with deflation.
pub fn top_eigenvalues(mut m: Vec<f64>, n: usize, count: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for e in 0..count {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + e * 3) % 11) as f64 / 11.0).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                w[i] = (0..n).map(|j| m[i * n + j] * v[j]).sum();
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-14 {
                break;
            }
        }
        out.push(lambda);
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] -= lambda * v[i] * v[j];
            }
        }
    }
    out
}

/// Nearest-centroid classifier over cube spectra using every labeled pixel.
pub fn nearest_centroid(cube: &HsiCube, labels: &LabelRaster) -> Vec<u16> {
    let (h, w, bands) = (cube.height(), cube.width(), cube.bands());
    let c = labels.num_classes();
    let mut sums = vec![vec![0.0; bands]; c];
    let mut counts = vec![0usize; c];
    let mut spec = vec![0.0; bands];
    for r in 0..h {
        for col in 0..w {
            let code = labels.code(r, col) as usize;
            if code == 0 {
                continue;
            }
            cube.spectrum_into(r, col, &mut spec);
            for b in 0..bands {
                sums[code - 1][b] += spec[b];
            }
            counts[code - 1] += 1;
        }
    }
    let mut out = Vec::new();
    for r in 0..h {
        for col in 0..w {
            if labels.code(r, col) == 0 {
                continue;
            }
            cube.spectrum_into(r, col, &mut spec);
            let best = (0..c)
                .min_by(|&a, &b| {
                    let da: f64 = (0..bands).map(|k| (spec[k] - sums[a][k] / counts[a] as f64).powi(2)).sum();
                    let db: f64 = (0..bands).map(|k| (spec[k] - sums[b][k] / counts[b] as f64).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            out.push(best as u16 + 1);
        }
    }
    out
}

/// Writes `<dir>/<name>.raw` and `<dir>/<name>_gt.raw` with sidecars.
pub fn write_scene(dir: &std::path::Path, name: &str, cube: &HsiCube, labels: &LabelRaster) -> (std::path::PathBuf, std::path::PathBuf) {
    use gwcl_core::rawio::{write_raster_f64, write_raster_u16};
    let cube_path = dir.join(format!("{name}.raw"));
    let label_path = dir.join(format!("{name}_gt.raw"));
    write_raster_f64(&cube_path, cube.height(), cube.width(), cube.bands(), cube.values()).unwrap();
    write_raster_u16(&label_path, labels.height(), labels.width(), labels.codes()).unwrap();
    (cube_path, label_path)
}

pub mod checks;
