//! Spectral reduction and the fused spectral-spatial feature matrix.
//!
//! Each non-background pixel becomes `x = [h'; m_norm; n_norm]`: `beta`
//! reduced spectral values followed by its min-max normalized row and column.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::data::{HsiCube, PixelIndexer};
use crate::error::{GwclError, Result};
use crate::rawio::{ArrayBundle, ArrayData};
use crate::registry::{Named, Registry};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// A fitted map from `input_dim` bands to `output_dim` components.
pub trait SpectralProjection: Send + Sync {
    fn reducer_name(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn project_into(&self, spectrum: &[f64], out: &mut [f64]);
    fn save(&self, base: &Path) -> Result<()>;
}

/// Fits a [`SpectralProjection`] on a `rows x bands` matrix of spectra.
pub trait Reducer: Named + Send + Sync {
    fn fit(&self, spectra: &[f64], bands: usize, beta: usize) -> Result<Box<dyn SpectralProjection>>;
    fn load(&self, base: &Path) -> Result<Box<dyn SpectralProjection>>;
}

pub fn reducers() -> Registry<dyn Reducer> {
    Registry::new("reducer").with(Arc::new(PcaReducer))
}

/// Per-band standardization followed by principal component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `bands x beta`, row-major; columns are unit eigenvectors.
    pub projection: Vec<f64>,
    pub explained: Vec<f64>,
    pub bands: usize,
    pub beta: usize,
}

pub struct PcaReducer;

impl Named for PcaReducer {
    fn name(&self) -> &'static str {
        "pca"
    }
}

impl Reducer for PcaReducer {
    fn fit(&self, spectra: &[f64], bands: usize, beta: usize) -> Result<Box<dyn SpectralProjection>> {
        Ok(Box::new(PcaModel::fit(spectra, bands, beta)?))
    }

    fn load(&self, base: &Path) -> Result<Box<dyn SpectralProjection>> {
        Ok(Box::new(PcaModel::load(base)?))
    }
}

impl PcaModel {
    pub fn fit(spectra: &[f64], bands: usize, beta: usize) -> Result<Self> {
        if bands == 0 || spectra.len() % bands != 0 {
            return Err(GwclError::Dimension(format!(
                "spectra buffer of {} values is not a multiple of {bands} bands",
                spectra.len()
            )));
        }
        let rows = spectra.len() / bands;
        if beta == 0 || beta > bands {
            return Err(GwclError::InvalidParameter(format!(
                "beta must be in 1..={bands}, got {beta}"
            )));
        }
        if rows < beta {
            return Err(GwclError::InvalidParameter(format!(
                "{rows} pixels cannot support {beta} components"
            )));
        }

        let mut mean = vec![0.0; bands];
        for row in spectra.chunks_exact(bands) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; bands];
        for row in spectra.chunks_exact(bands) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // Constant bands keep unit scale so they standardize to zero.
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();

        let mut cov = DMatrix::<f64>::zeros(bands, bands);
        let mut z = vec![0.0; bands];
        for row in spectra.chunks_exact(bands) {
            for k in 0..bands {
                z[k] = (row[k] - mean[k]) / scale[k];
            }
            for a in 0..bands {
                let za = z[a];
                if za == 0.0 {
                    continue;
                }
                for b in a..bands {
                    cov[(a, b)] += za * z[b];
                }
            }
        }
        let denom = (rows.max(2) - 1) as f64;
        for a in 0..bands {
            for b in a..bands {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..bands).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let rank = order
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > RANK_TOLERANCE * top && top > 0.0)
            .count();
        if beta > rank {
            return Err(GwclError::RankDeficient {
                requested: beta,
                rank,
            });
        }
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut projection = vec![0.0; bands * beta];
        let mut explained = Vec::with_capacity(beta);
        for (c, &i) in order.iter().take(beta).enumerate() {
            let v = eig.eigenvectors.column(i);
            // Sign convention: the largest-magnitude loading is positive.
            let pivot = (0..bands)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                .unwrap();
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for k in 0..bands {
                projection[k * beta + c] = sign * v[k];
            }
            explained.push(eig.eigenvalues[i].max(0.0) / total);
        }
        Ok(Self {
            mean,
            scale,
            projection,
            explained,
            bands,
            beta,
        })
    }

    pub fn to_bundle(&self) -> ArrayBundle {
        let mut b = ArrayBundle::new("pca");
        b.meta.set("bands", self.bands).set("beta", self.beta);
        b.push("mean", ArrayData::F64(self.mean.clone()))
            .push("scale", ArrayData::F64(self.scale.clone()))
            .push("projection", ArrayData::F64(self.projection.clone()))
            .push("explained", ArrayData::F64(self.explained.clone()));
        b
    }

    pub fn load(base: &Path) -> Result<Self> {
        let b = ArrayBundle::load(base, "pca")?;
        let bands: usize = b.meta.parse_key("bands")?;
        let beta: usize = b.meta.parse_key("beta")?;
        let model = Self {
            mean: b.f64s("mean")?.to_vec(),
            scale: b.f64s("scale")?.to_vec(),
            projection: b.f64s("projection")?.to_vec(),
            explained: b.f64s("explained")?.to_vec(),
            bands,
            beta,
        };
        if model.mean.len() != bands || model.scale.len() != bands || model.projection.len() != bands * beta {
            return Err(GwclError::Dimension("inconsistent pca bundle".into()));
        }
        Ok(model)
    }
}

impl SpectralProjection for PcaModel {
    fn reducer_name(&self) -> &'static str {
        "pca"
    }

    fn input_dim(&self) -> usize {
        self.bands
    }

    fn output_dim(&self) -> usize {
        self.beta
    }

    fn project_into(&self, spectrum: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.bands {
            let z = (spectrum[k] - self.mean[k]) / self.scale[k];
            let row = &self.projection[k * self.beta..(k + 1) * self.beta];
            for (o, w) in out.iter_mut().zip(row) {
                *o += z * w;
            }
        }
    }

    fn save(&self, base: &Path) -> Result<()> {
        self.to_bundle().save(base)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
}

/// `rows x (beta + 2)` row-major features; rows follow [`PixelIndexer`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    beta: usize,
    data: Vec<f64>,
    stats: Vec<ColumnStats>,
    height: usize,
    width: usize,
    coords: Vec<(u32, u32)>,
}

impl FeatureMatrix {
    /// Wraps an existing matrix. Coordinates are the raster position of each row.
    pub fn from_parts(beta: usize, data: Vec<f64>, height: usize, width: usize, coords: Vec<(u32, u32)>) -> Result<Self> {
        let dim = beta + 2;
        if data.len() != coords.len() * dim {
            return Err(GwclError::Dimension(format!(
                "feature buffer has {} values, expected {}",
                data.len(),
                coords.len() * dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GwclError::NonFinite(i));
        }
        let rows = coords.len();
        let stats = column_stats(&data, rows, dim);
        Ok(Self {
            rows,
            beta,
            data,
            stats,
            height,
            width,
            coords,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.beta + 2
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn stats(&self) -> &[ColumnStats] {
        &self.stats
    }

    pub fn raster_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn indexer(&self) -> Result<PixelIndexer> {
        PixelIndexer::from_coords(self.height, self.width, self.coords.clone())
    }

    /// Classifier input width: `beta + 2`, or `beta` without coordinates.
    pub fn input_dim(&self, spatial: bool) -> usize {
        if spatial {
            self.dim()
        } else {
            self.beta
        }
    }

    /// Copies the selected rows into `out` (`nodes.len() x input_dim`).
    pub fn gather_into(&self, nodes: &[u32], spatial: bool, out: &mut [f64]) {
        let width = self.input_dim(spatial);
        for (dst, &n) in out.chunks_exact_mut(width).zip(nodes) {
            dst.copy_from_slice(&self.row(n as usize)[..width]);
        }
    }

    pub fn to_bundle(&self) -> ArrayBundle {
        let mut b = ArrayBundle::new("features");
        b.meta
            .set("rows", self.rows)
            .set("beta", self.beta)
            .set("height", self.height)
            .set("width", self.width);
        b.push("data", ArrayData::F64(self.data.clone()))
            .push("row", ArrayData::U32(self.coords.iter().map(|c| c.0).collect()))
            .push("col", ArrayData::U32(self.coords.iter().map(|c| c.1).collect()));
        b
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        self.to_bundle().save(base)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let b = ArrayBundle::load(base, "features")?;
        let coords = b
            .u32s("row")?
            .iter()
            .zip(b.u32s("col")?)
            .map(|(&r, &c)| (r, c))
            .collect();
        Self::from_parts(
            b.meta.parse_key("beta")?,
            b.f64s("data")?.to_vec(),
            b.meta.parse_key("height")?,
            b.meta.parse_key("width")?,
            coords,
        )
    }
}

fn column_stats(data: &[f64], rows: usize, dim: usize) -> Vec<ColumnStats> {
    (0..dim)
        .map(|k| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for r in 0..rows {
                let v = data[r * dim + k];
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
            let mean = if rows > 0 { sum / rows as f64 } else { 0.0 };
            let var = if rows > 0 {
                (0..rows).map(|r| (data[r * dim + k] - mean).powi(2)).sum::<f64>() / rows as f64
            } else {
                0.0
            };
            ColumnStats {
                min,
                max,
                mean,
                stddev: var.sqrt(),
            }
        })
        .collect()
}

/// Fits a reducer on the spectra of the indexed (non-background) pixels.
pub fn fit_reduce(
    reducer: &dyn Reducer,
    cube: &HsiCube,
    indexer: &PixelIndexer,
    beta: usize,
) -> Result<Box<dyn SpectralProjection>> {
    if beta == 0 || beta > cube.bands() {
        return Err(GwclError::InvalidParameter(format!(
            "beta must be in 1..={}, got {beta}",
            cube.bands()
        )));
    }
    let spectra = cube.gather(indexer);
    reducer.fit(&spectra, cube.bands(), beta)
}

/// Min-max maps `values` onto [0, 1]; a constant column becomes 0.5.
fn min_max_normalize(values: &mut [f64], stride: usize, col: usize, label: &str) {
    let rows = values.len() / stride;
    if rows == 0 {
        return;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..rows {
        let v = values[r * stride + col];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let span = hi - lo;
        for r in 0..rows {
            let v = &mut values[r * stride + col];
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        log::warn!("{label} column is constant; setting it to 0.5");
        for r in 0..rows {
            values[r * stride + col] = 0.5;
        }
    }
}

/// Projects every indexed pixel and appends normalized coordinates.
pub fn assemble_features(
    cube: &HsiCube,
    projection: &dyn SpectralProjection,
    indexer: &PixelIndexer,
    normalize_spectral: bool,
) -> Result<FeatureMatrix> {
    if projection.input_dim() != cube.bands() {
        return Err(GwclError::Dimension(format!(
            "reducer expects {} bands, cube has {}",
            projection.input_dim(),
            cube.bands()
        )));
    }
    let beta = projection.output_dim();
    let dim = beta + 2;
    let rows = indexer.len();
    let mut data = vec![0.0; rows * dim];
    data.par_chunks_mut(dim).enumerate().for_each_init(
        || vec![0.0; cube.bands()],
        |spectrum, (i, out)| {
            let p = indexer.coords(i);
            cube.spectrum_into(p.row as usize, p.col as usize, spectrum);
            projection.project_into(spectrum, &mut out[..beta]);
            out[beta] = p.row as f64;
            out[beta + 1] = p.col as f64;
        },
    );
    if normalize_spectral {
        for k in 0..beta {
            min_max_normalize(&mut data, dim, k, "spectral");
        }
    }
    min_max_normalize(&mut data, dim, beta, "row coordinate");
    min_max_normalize(&mut data, dim, beta + 1, "column coordinate");
    let coords = indexer.iter().map(|p| (p.row, p.col)).collect();
    FeatureMatrix::from_parts(beta, data, indexer.height(), indexer.width(), coords)
}
