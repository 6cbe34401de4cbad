//! Hyperspectral cubes, ground-truth rasters and labeled/test splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GwclError, Result};
use crate::rawio::{sidecar_paths, read_scalars, ByteOrder, Dtype, Header};
use crate::rng::GwclRng;

/// An `M x N x bands` reflectance cube stored band-sequential.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
    nodata_mask: Option<Vec<bool>>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(GwclError::Dimension(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(GwclError::Dimension(format!(
                "cube buffer has {} values, expected {}",
                values.len(),
                height * width * bands
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GwclError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            nodata_mask: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nodata_mask(&self) -> Option<&[bool]> {
        self.nodata_mask.as_deref()
    }

    #[inline]
    pub fn value(&self, band: usize, row: usize, col: usize) -> f64 {
        self.values[(band * self.height + row) * self.width + col]
    }

    /// Spectrum of one pixel written into `out` (length = bands).
    pub fn spectrum_into(&self, row: usize, col: usize, out: &mut [f64]) {
        let plane = self.height * self.width;
        let offset = row * self.width + col;
        for (b, o) in out.iter_mut().enumerate() {
            *o = self.values[b * plane + offset];
        }
    }

    /// Row-major `pixels.len() x bands` matrix of the selected spectra.
    pub fn gather(&self, pixels: &PixelIndexer) -> Vec<f64> {
        let mut out = vec![0.0; pixels.len() * self.bands];
        for (i, chunk) in out.chunks_exact_mut(self.bands).enumerate() {
            let p = pixels.coords(i);
            self.spectrum_into(p.row as usize, p.col as usize, chunk);
        }
        out
    }
}

/// Loads a cube from `<name>.raw` + `<name>.hdr.txt`.
///
/// An optional `nodata:` header key marks pixels whose every band equals that
/// value; such pixels are reported in [`HsiCube::nodata_mask`].
pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let (raw, hdr) = sidecar_paths(path);
    let header = Header::read(&hdr)?;
    let height: usize = header.parse_key("height")?;
    let width: usize = header.parse_key("width")?;
    let bands: usize = header.parse_key("bands")?;
    let dtype: Dtype = header.require("dtype")?.parse()?;
    let order: ByteOrder = header.get("byteorder").unwrap_or("little").parse()?;
    if let Some(il) = header.get("interleave") {
        if !il.eq_ignore_ascii_case("bsq") {
            return Err(GwclError::Header {
                path: hdr,
                reason: format!("only band-sequential (bsq) interleave is supported, got `{il}`"),
            });
        }
    }
    let values = read_scalars(&raw, dtype, order, height * width * bands)?;
    let mut cube = HsiCube::new(height, width, bands, values)?;
    if let Some(nodata) = header.get("nodata") {
        let nodata: f64 = nodata.parse().map_err(|_| GwclError::Header {
            path: hdr.clone(),
            reason: format!("cannot parse nodata value `{nodata}`"),
        })?;
        let plane = height * width;
        let mask: Vec<bool> = (0..plane)
            .map(|p| (0..bands).all(|b| cube.values[b * plane + p] == nodata))
            .collect();
        cube.nodata_mask = Some(mask);
    }
    log::debug!("loaded cube {height}x{width}x{bands} ({dtype}) from {}", raw.display());
    Ok(cube)
}

/// Ground-truth class codes; 0 is background, `1..=num_classes` are classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    codes: Vec<u16>,
    num_classes: u16,
}

impl LabelRaster {
    /// Validates that codes are contiguous `0..=c`.
    pub fn new(height: usize, width: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != height * width {
            return Err(GwclError::Dimension(format!(
                "label buffer has {} values, expected {}",
                codes.len(),
                height * width
            )));
        }
        let max = codes.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max as usize + 1];
        for &c in &codes {
            seen[c as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&c| !seen[c as usize]) {
            return Err(GwclError::NonContiguousClasses { missing, max });
        }
        Ok(Self {
            height,
            width,
            codes,
            num_classes: max,
        })
    }

    /// Remaps sparse class codes onto dense `1..=c` in ascending order.
    /// Returns the raster and the `(original, dense)` mapping.
    pub fn new_remapped(height: usize, width: usize, codes: Vec<u16>) -> Result<(Self, Vec<(u16, u16)>)> {
        let mut distinct: Vec<u16> = codes.iter().copied().filter(|&c| c != 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mapping: Vec<(u16, u16)> = distinct
            .iter()
            .enumerate()
            .map(|(i, &orig)| (orig, i as u16 + 1))
            .collect();
        let lookup: BTreeMap<u16, u16> = mapping.iter().copied().collect();
        let dense = codes
            .into_iter()
            .map(|c| if c == 0 { 0 } else { lookup[&c] })
            .collect();
        if mapping.iter().any(|(a, b)| a != b) {
            log::info!("remapped class codes: {mapping:?}");
        }
        Ok((Self::new(height, width, dense)?, mapping))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes as usize
    }

    pub fn code(&self, row: usize, col: usize) -> u16 {
        self.codes[row * self.width + col]
    }

    /// Population of each class; entry `k` is class `k + 1`.
    pub fn class_populations(&self) -> Vec<usize> {
        let mut pops = vec![0usize; self.num_classes()];
        for &c in &self.codes {
            if c > 0 {
                pops[c as usize - 1] += 1;
            }
        }
        pops
    }

    pub fn check_matches(&self, cube: &HsiCube) -> Result<()> {
        if self.height != cube.height() || self.width != cube.width() {
            return Err(GwclError::Dimension(format!(
                "label raster is {}x{}, cube is {}x{}",
                self.height,
                self.width,
                cube.height(),
                cube.width()
            )));
        }
        Ok(())
    }

    /// Turns masked pixels into background. Fails if this empties a class.
    pub fn mask_out(&self, mask: &[bool]) -> Result<Self> {
        let codes = self
            .codes
            .iter()
            .zip(mask)
            .map(|(&c, &m)| if m { 0 } else { c })
            .collect();
        Self::new(self.height, self.width, codes)
    }
}

/// Loads a single-band `u16` label raster (`bands: 1`).
pub fn load_labels(path: &Path) -> Result<LabelRaster> {
    let (height, width, codes) = read_label_codes(path)?;
    LabelRaster::new(height, width, codes)
}

/// Like [`load_labels`] but densifies sparse class codes instead of failing.
pub fn load_labels_remapped(path: &Path) -> Result<(LabelRaster, Vec<(u16, u16)>)> {
    let (height, width, codes) = read_label_codes(path)?;
    LabelRaster::new_remapped(height, width, codes)
}

fn read_label_codes(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (raw, hdr) = sidecar_paths(path);
    let header = Header::read(&hdr)?;
    let height: usize = header.parse_key("height")?;
    let width: usize = header.parse_key("width")?;
    let bands: usize = header.get("bands").map(str::parse).transpose().ok().flatten().unwrap_or(1);
    if bands != 1 {
        return Err(GwclError::Dimension(format!("label raster must have 1 band, has {bands}")));
    }
    let dtype: Dtype = header.require("dtype")?.parse()?;
    let order: ByteOrder = header.get("byteorder").unwrap_or("little").parse()?;
    let values = read_scalars(&raw, dtype, order, height * width)?;
    let codes = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                Err(GwclError::InvalidParameter(format!(
                    "label value {v} at element {i} is not a class code"
                )))
            } else {
                Ok(v as u16)
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    Ok((height, width, codes))
}

/// A non-background pixel: dense flat index plus raster coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelIndex {
    pub flat: u32,
    pub row: u32,
    pub col: u32,
}

/// Bijection between dense flat indices (row-major over non-background
/// pixels) and raster coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelIndexer {
    height: usize,
    width: usize,
    coords: Vec<(u32, u32)>,
    lookup: Vec<u32>,
}

const NOT_INDEXED: u32 = u32::MAX;

impl PixelIndexer {
    pub fn from_labels(labels: &LabelRaster) -> Self {
        let mut coords = Vec::new();
        let mut lookup = vec![NOT_INDEXED; labels.height * labels.width];
        for r in 0..labels.height {
            for c in 0..labels.width {
                if labels.code(r, c) > 0 {
                    lookup[r * labels.width + c] = coords.len() as u32;
                    coords.push((r as u32, c as u32));
                }
            }
        }
        Self {
            height: labels.height,
            width: labels.width,
            coords,
            lookup,
        }
    }

    /// Rebuilds from explicit coordinates (e.g. a persisted feature matrix).
    pub fn from_coords(height: usize, width: usize, coords: Vec<(u32, u32)>) -> Result<Self> {
        let mut lookup = vec![NOT_INDEXED; height * width];
        for (i, &(r, c)) in coords.iter().enumerate() {
            let (r, c) = (r as usize, c as usize);
            if r >= height || c >= width {
                return Err(GwclError::Dimension(format!(
                    "coordinate ({r}, {c}) outside {height}x{width}"
                )));
            }
            if lookup[r * width + c] != NOT_INDEXED {
                return Err(GwclError::DuplicateIndex(i));
            }
            lookup[r * width + c] = i as u32;
        }
        Ok(Self {
            height,
            width,
            coords,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self, flat: usize) -> PixelIndex {
        let (row, col) = self.coords[flat];
        PixelIndex {
            flat: flat as u32,
            row,
            col,
        }
    }

    pub fn to_flat(&self, row: usize, col: usize) -> Option<u32> {
        let v = self.lookup[row * self.width + col];
        (v != NOT_INDEXED).then_some(v)
    }

    pub fn iter(&self) -> impl Iterator<Item = PixelIndex> + '_ {
        (0..self.len()).map(|i| self.coords(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Labeled,
    Test,
}

/// Labeled/test partition of the non-background pixels.
///
/// `unlabeled` holds every non-background pixel that is not labeled (the
/// transductive pool, identical to the test pixels as a set).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<(PixelIndex, u16)>,
    pub test: Vec<(PixelIndex, u16)>,
    pub unlabeled: Vec<PixelIndex>,
    pub seed: u64,
    pub per_class_quota: usize,
    pub fallback_quota: usize,
}

/// Samples `quota` labeled pixels per class, or `fallback` for classes with
/// fewer than `quota` pixels. Sampling is a partial Fisher-Yates over each
/// class's pixels in flat-index order, classes visited in ascending code
/// order, all from one [`GwclRng`] stream seeded with `seed`.
pub fn make_split(
    labels: &LabelRaster,
    indexer: &PixelIndexer,
    quota: usize,
    fallback: usize,
    seed: u64,
) -> Result<Split> {
    let c = labels.num_classes();
    let mut members: Vec<Vec<PixelIndex>> = vec![Vec::new(); c];
    for p in indexer.iter() {
        let code = labels.code(p.row as usize, p.col as usize);
        members[code as usize - 1].push(p);
    }
    let mut rng = GwclRng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    let mut test = Vec::new();
    for (k, pool) in members.iter_mut().enumerate() {
        let class = k as u16 + 1;
        let take = if pool.len() >= quota { quota } else { fallback };
        if pool.len() <= take {
            return Err(GwclError::ClassTooSmall {
                class,
                population: pool.len(),
                required: take + 1,
            });
        }
        for i in 0..take {
            let j = i + rng.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        labeled.extend(pool[..take].iter().map(|&p| (p, class)));
        test.extend(pool[take..].iter().map(|&p| (p, class)));
    }
    labeled.sort_unstable();
    test.sort_unstable();
    let unlabeled = test.iter().map(|&(p, _)| p).collect();
    Ok(Split {
        labeled,
        test,
        unlabeled,
        seed,
        per_class_quota: quota,
        fallback_quota: fallback,
    })
}

impl Split {
    /// Labeled count per class; entry `k` is class `k + 1`.
    pub fn labeled_per_class(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &(_, c) in &self.labeled {
            counts[c as usize - 1] += 1;
        }
        counts
    }

    /// `index,row,col,class,role` lines sorted by flat index.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(PixelIndex, u16, &str)> = self
            .labeled
            .iter()
            .map(|&(p, c)| (p, c, "labeled"))
            .chain(self.test.iter().map(|&(p, c)| (p, c, "test")))
            .collect();
        rows.sort_unstable_by_key(|r| r.0.flat);
        let mut out = String::from("index,row,col,class,role\n");
        for (p, c, role) in rows {
            let _ = writeln!(out, "{},{},{},{},{}", p.flat, p.row, p.col, c, role);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| GwclError::io(path, e))
    }
}
