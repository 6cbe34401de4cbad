//! Raw binary payloads with plain-text `key: value` sidecar headers.
//!
//! Two layouts share the same header syntax:
//!
//! * rasters: `<name>.raw` + `<name>.hdr.txt` with `height`, `width`,
//!   `bands`, `dtype` and `byteorder` keys, band-sequential payload;
//! * array bundles: `<name>.hdr.txt` listing `arrays: a,b,...` with
//!   `a.dtype` / `a.len` keys, each array stored in `<name>.a.raw`
//!   (always little-endian). Used for models, graphs and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{GwclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    U16,
    I16,
    U32,
    U64,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 | Dtype::I16 => 2,
            Dtype::U32 | Dtype::F32 => 4,
            Dtype::U64 | Dtype::F64 => 8,
        }
    }
}

impl FromStr for Dtype {
    type Err = GwclError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "u8" | "uint8" => Dtype::U8,
            "u16" | "uint16" => Dtype::U16,
            "i16" | "int16" => Dtype::I16,
            "u32" | "uint32" => Dtype::U32,
            "u64" | "uint64" => Dtype::U64,
            "f32" | "float32" => Dtype::F32,
            "f64" | "float64" => Dtype::F64,
            other => return Err(GwclError::UnsupportedDtype(other.to_string())),
        })
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::I16 => "i16",
            Dtype::U32 => "u32",
            Dtype::U64 => "u64",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl FromStr for ByteOrder {
    type Err = GwclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "little" | "le" | "little-endian" => Ok(ByteOrder::Little),
            "big" | "be" | "big-endian" => Ok(ByteOrder::Big),
            other => Err(GwclError::InvalidParameter(format!(
                "unknown byte order `{other}`"
            ))),
        }
    }
}

/// Ordered `key: value` map read from / written to a sidecar header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| GwclError::Header {
                path: path.to_path_buf(),
                reason: format!("line {} has no `key: value` form", lineno + 1),
            })?;
            entries.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GwclError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| GwclError::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.insert(key.to_ascii_lowercase(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| GwclError::Header {
            path: self.path.clone(),
            reason: format!("missing key `{key}`"),
        })
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| GwclError::Header {
            path: self.path.clone(),
            reason: format!("cannot parse `{key}: {raw}`"),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// `foo`, `foo.raw` or `foo.hdr.txt` all resolve to (`foo.raw`, `foo.hdr.txt`).
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = base_path(path);
    (with_suffix(&base, ".raw"), with_suffix(&base, ".hdr.txt"))
}

pub fn base_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    let stripped = s
        .strip_suffix(".hdr.txt")
        .or_else(|| s.strip_suffix(".raw"))
        .unwrap_or(&s);
    PathBuf::from(stripped)
}

pub fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_bytes(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| GwclError::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(GwclError::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

macro_rules! decode {
    ($bytes:expr, $ty:ty, $order:expr) => {{
        const N: usize = std::mem::size_of::<$ty>();
        $bytes
            .chunks_exact(N)
            .map(|c| {
                let arr: [u8; N] = c.try_into().unwrap();
                match $order {
                    ByteOrder::Little => <$ty>::from_le_bytes(arr),
                    ByteOrder::Big => <$ty>::from_be_bytes(arr),
                }
            })
            .collect::<Vec<$ty>>()
    }};
}

/// Reads `count` scalars of `dtype` and widens them to `f64`.
pub fn read_scalars(path: &Path, dtype: Dtype, order: ByteOrder, count: usize) -> Result<Vec<f64>> {
    let bytes = read_bytes(path, (count * dtype.size()) as u64)?;
    Ok(match dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
        Dtype::U16 => decode!(bytes, u16, order).into_iter().map(f64::from).collect(),
        Dtype::I16 => decode!(bytes, i16, order).into_iter().map(f64::from).collect(),
        Dtype::U32 => decode!(bytes, u32, order).into_iter().map(f64::from).collect(),
        Dtype::U64 => decode!(bytes, u64, order).into_iter().map(|v| v as f64).collect(),
        Dtype::F32 => decode!(bytes, f32, order).into_iter().map(f64::from).collect(),
        Dtype::F64 => decode!(bytes, f64, order),
    })
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| GwclError::io(path, e))
}

pub fn write_u16(path: &Path, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| GwclError::io(path, e))
}

/// Writes a band-sequential raster with its sidecar header.
pub fn write_raster_f64(path: &Path, height: usize, width: usize, bands: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width * bands {
        return Err(GwclError::Dimension(format!(
            "raster buffer has {} values, expected {}",
            values.len(),
            height * width * bands
        )));
    }
    let (raw, hdr) = sidecar_paths(path);
    write_f64(&raw, values)?;
    raster_header(height, width, bands, Dtype::F64).write(&hdr)
}

pub fn write_raster_u16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    if values.len() != height * width {
        return Err(GwclError::Dimension(format!(
            "label buffer has {} values, expected {}",
            values.len(),
            height * width
        )));
    }
    let (raw, hdr) = sidecar_paths(path);
    write_u16(&raw, values)?;
    raster_header(height, width, 1, Dtype::U16).write(&hdr)
}

fn raster_header(height: usize, width: usize, bands: usize, dtype: Dtype) -> Header {
    let mut h = Header::new();
    h.set("height", height)
        .set("width", width)
        .set("bands", bands)
        .set("dtype", dtype)
        .set("byteorder", "little")
        .set("interleave", "bsq");
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U32(_) => Dtype::U32,
            ArrayData::U64(_) => Dtype::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

/// A set of named flat arrays plus free-form metadata, persisted bit-exactly.
#[derive(Debug, Clone, Default)]
pub struct ArrayBundle {
    pub meta: Header,
    arrays: Vec<(String, ArrayData)>,
}

impl ArrayBundle {
    pub fn new(kind: &str) -> Self {
        let mut meta = Header::new();
        meta.set("kind", kind);
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, data: ArrayData) -> &mut Self {
        self.arrays.push((name.to_string(), data));
        self
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let base = base_path(base);
        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| GwclError::io(dir, e))?;
        }
        let mut meta = self.meta.clone();
        let names: Vec<&str> = self.arrays.iter().map(|(n, _)| n.as_str()).collect();
        meta.set("arrays", names.join(","));
        for (name, data) in &self.arrays {
            meta.set(&format!("{name}.dtype"), data.dtype());
            meta.set(&format!("{name}.len"), data.len());
            let path = with_suffix(&base, &format!(".{name}.raw"));
            fs::write(&path, data.to_bytes()).map_err(|e| GwclError::io(&path, e))?;
        }
        meta.write(&with_suffix(&base, ".hdr.txt"))
    }

    pub fn load(base: &Path, expected_kind: &str) -> Result<Self> {
        let base = base_path(base);
        let hdr_path = with_suffix(&base, ".hdr.txt");
        let meta = Header::read(&hdr_path)?;
        let kind = meta.require("kind")?;
        if kind != expected_kind {
            return Err(GwclError::Header {
                path: hdr_path,
                reason: format!("expected kind `{expected_kind}`, found `{kind}`"),
            });
        }
        let mut arrays = Vec::new();
        let listed = meta.get("arrays").unwrap_or("").to_string();
        for name in listed.split(',').filter(|s| !s.is_empty()) {
            let dtype: Dtype = meta.require(&format!("{name}.dtype"))?.parse()?;
            let len: usize = meta.parse_key(&format!("{name}.len"))?;
            let path = with_suffix(&base, &format!(".{name}.raw"));
            let bytes = read_bytes(&path, (len * dtype.size()) as u64)?;
            let data = match dtype {
                Dtype::F64 => ArrayData::F64(decode!(bytes, f64, ByteOrder::Little)),
                Dtype::U32 => ArrayData::U32(decode!(bytes, u32, ByteOrder::Little)),
                Dtype::U64 => ArrayData::U64(decode!(bytes, u64, ByteOrder::Little)),
                other => return Err(GwclError::UnsupportedDtype(other.to_string())),
            };
            arrays.push((name.to_string(), data));
        }
        Ok(Self { meta, arrays })
    }

    fn find(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| GwclError::Header {
                path: PathBuf::new(),
                reason: format!("bundle has no array `{name}`"),
            })
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.find(name)? {
            ArrayData::F64(v) => Ok(v),
            other => Err(GwclError::UnsupportedDtype(format!("{name}: {}", other.dtype()))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.find(name)? {
            ArrayData::U32(v) => Ok(v),
            other => Err(GwclError::UnsupportedDtype(format!("{name}: {}", other.dtype()))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.find(name)? {
            ArrayData::U64(v) => Ok(v),
            other => Err(GwclError::UnsupportedDtype(format!("{name}: {}", other.dtype()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_parse_ignores_comments_and_case() {
        let h = Header::parse("# cube\nHeight: 3\nwidth:4\n\nbands : 2\n", Path::new("x")).unwrap();
        assert_eq!(h.parse_key::<usize>("height").unwrap(), 3);
        assert_eq!(h.parse_key::<usize>("width").unwrap(), 4);
        assert_eq!(h.parse_key::<usize>("bands").unwrap(), 2);
        assert!(h.require("dtype").is_err());
    }

    #[test]
    fn header_rejects_bare_line() {
        assert!(Header::parse("height 3", Path::new("x")).is_err());
    }

    #[test]
    fn sidecar_paths_accept_any_spelling() {
        for p in ["a/cube", "a/cube.raw", "a/cube.hdr.txt"] {
            let (raw, hdr) = sidecar_paths(Path::new(p));
            assert_eq!(raw, PathBuf::from("a/cube.raw"));
            assert_eq!(hdr, PathBuf::from("a/cube.hdr.txt"));
        }
    }

    #[test]
    fn big_endian_u16_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        fs::write(&p, [0x01, 0x02, 0xff, 0xff]).unwrap();
        let v = read_scalars(&p, Dtype::U16, ByteOrder::Big, 2).unwrap();
        assert_eq!(v, vec![258.0, 65535.0]);
        let v = read_scalars(&p, Dtype::I16, ByteOrder::Little, 2).unwrap();
        assert_eq!(v, vec![513.0, -1.0]);
        assert!(matches!(
            read_scalars(&p, Dtype::U16, ByteOrder::Big, 3),
            Err(GwclError::SizeMismatch { expected: 6, actual: 4 })
        ));
    }

    #[test]
    fn bundle_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("sub/bundle");
        let weights = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300];
        let mut b = ArrayBundle::new("test");
        b.meta.set("answer", 42);
        b.push("w", ArrayData::F64(weights.clone()))
            .push("i", ArrayData::U32(vec![1, 2, 3]))
            .push("o", ArrayData::U64(vec![u64::MAX]));
        b.save(&base).unwrap();
        let back = ArrayBundle::load(&base, "test").unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.f64s("w").unwrap()), bits(&weights));
        assert_eq!(back.u32s("i").unwrap(), &[1, 2, 3]);
        assert_eq!(back.u64s("o").unwrap(), &[u64::MAX]);
        assert_eq!(back.meta.get("answer"), Some("42"));
        assert!(ArrayBundle::load(&base, "other").is_err());
    }
}
