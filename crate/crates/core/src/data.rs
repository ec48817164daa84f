//! Spectral cubes, label rasters, and the labeled-pixel split.
//!
//! On disk a cube is a JSON header (`width`, `height`, `bands`, `dtype`,
//! `layout`) next to a raw little-endian `f32` payload in band-interleaved-
//! by-pixel order. Labels are raw little-endian `u16`, row-major, with 0
//! meaning unlabeled.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: String,
    pub layout: String,
}

/// `height × width` pixels of `bands` spectral values each.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `[height·width, bands]`, pixels in row-major order.
    pub values: Tensor,
    /// Per-band `(min, max)` seen by [`normalize_bands`], if it ran.
    pub band_ranges: Option<Vec<(f64, f64)>>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!("empty cube {height}x{width}x{bands}")));
        }
        let values = Tensor::matrix(height * width, bands, values)?;
        Ok(Self { height, width, bands, values, band_ranges: None })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        self.values.row(idx)
    }

    pub fn dims_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.bands)
    }
}

/// Parses a header and raw payload into a cube, promoting values to `f64`.
pub fn load_cube(header_text: &str, raw: &[u8]) -> Result<HsiCube> {
    let header: CubeHeader =
        serde_json::from_str(header_text).map_err(|e| Error::Format(format!("cube header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.layout != "bip" {
        return Err(Error::Format(format!("unsupported layout {:?}", header.layout)));
    }
    let count = header.width * header.height * header.bands;
    if raw.len() != count * 4 {
        return Err(Error::Format(format!(
            "raw payload has {} bytes, header {}x{}x{} needs {}",
            raw.len(),
            header.height,
            header.width,
            header.bands,
            count * 4
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    HsiCube::new(header.height, header.width, header.bands, values)
}

/// Resolves `path` (either `<name>.json`, `<name>.raw`, or `<name>`) to the
/// header and payload paths.
pub fn cube_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s.strip_suffix(".json").or_else(|| s.strip_suffix(".raw")).unwrap_or(&s);
    (PathBuf::from(format!("{stem}.json")), PathBuf::from(format!("{stem}.raw")))
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let (header, raw) = cube_paths(path);
    let text = fs::read_to_string(&header)?;
    let bytes = fs::read(&raw)?;
    load_cube(&text, &bytes)
}

/// Writes `<stem>.json` and `<stem>.raw`. Values are narrowed to `f32`.
pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    let (header_path, raw_path) = cube_paths(path);
    let header = CubeHeader {
        width: cube.width,
        height: cube.height,
        bands: cube.bands,
        dtype: "f32".into(),
        layout: "bip".into(),
    };
    fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(cube.values.numel() * 4);
    for &v in cube.values.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(raw_path, bytes)?;
    Ok(())
}

/// Per-band min-max scaling to `[0, 1]`; constant bands map to 0.
pub fn normalize_bands(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let data = cube.values.data();
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); b];
    for px in data.chunks(b) {
        for (r, &v) in ranges.iter_mut().zip(px) {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    let mut out = data.to_vec();
    for px in out.chunks_mut(b) {
        for (v, &(lo, hi)) in px.iter_mut().zip(&ranges) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    HsiCube {
        height: cube.height,
        width: cube.width,
        bands: b,
        values: Tensor::matrix(cube.pixel_count(), b, out).expect("same shape"),
        band_ranges: Some(ranges),
    }
}

/// Ground-truth class ids; 0 is unlabeled, classes are `1..=num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Format(format!("{} labels for a {height}x{width} raster", labels.len())));
        }
        let raster = Self { height, width, labels };
        if raster.num_classes() < 2 {
            return Err(Error::Format("label raster needs at least 2 classes".into()));
        }
        Ok(raster)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn matches(&self, cube: &HsiCube) -> bool {
        self.height == cube.height && self.width == cube.width
    }

    /// Flat indices of labeled pixels, ascending.
    pub fn labeled(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect()
    }

    /// Pixels per class, index 0 for class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

pub fn decode_u16_raster(raw: &[u8], height: usize, width: usize) -> Result<Vec<u16>> {
    if raw.len() != height * width * 2 {
        return Err(Error::Format(format!(
            "raster payload has {} bytes, {height}x{width} needs {}",
            raw.len(),
            height * width * 2
        )));
    }
    Ok(raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
}

pub fn encode_u16_raster(values: &[u16]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn load_labels(raw: &[u8], height: usize, width: usize) -> Result<LabelRaster> {
    LabelRaster::new(height, width, decode_u16_raster(raw, height, width)?)
}

pub fn read_labels(path: &Path, height: usize, width: usize) -> Result<LabelRaster> {
    load_labels(&fs::read(path)?, height, width)
}

/// A class that had fewer pixels than the small-class budget; all of its
/// pixels were sampled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitWarning {
    pub class: u16,
    pub available: usize,
    pub requested: usize,
}

/// Disjoint train / validation / test pixel sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    pub warnings: Vec<SplitWarning>,
}

/// Samples `per_class` labeled pixels per class (`small_class_budget` for
/// classes smaller than `per_class`), then moves `floor(val_fraction·k)` of
/// each class's sample (at least one when `k ≥ 2`) to validation. Every
/// other labeled pixel is a test pixel.
pub fn sample_split(
    labels: &LabelRaster,
    per_class: usize,
    small_class_budget: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if small_class_budget == 0 || per_class < small_class_budget {
        return Err(contract(format!(
            "need per_class >= small_class_budget >= 1, got {per_class} and {small_class_budget}"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(contract(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.num_classes()];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > 0 {
            by_class[l as usize - 1].push(i);
        }
    }
    let mut split = Split { train_idx: Vec::new(), val_idx: Vec::new(), test_idx: Vec::new(), seed, warnings: Vec::new() };
    for (ci, mut pool) in by_class.into_iter().enumerate() {
        let class = (ci + 1) as u16;
        let budget = if pool.len() < per_class { small_class_budget } else { per_class };
        let k = if pool.len() < budget {
            log::warn!("class {class} has {} pixels, fewer than the budget {budget}", pool.len());
            split.warnings.push(SplitWarning { class, available: pool.len(), requested: budget });
            pool.len()
        } else {
            budget
        };
        pool.partial_shuffle(&mut rng, k);
        let n_val = if k >= 2 { ((val_fraction * k as f64).floor() as usize).max(1) } else { 0 };
        split.val_idx.extend_from_slice(&pool[..n_val]);
        split.train_idx.extend_from_slice(&pool[n_val..k]);
        split.test_idx.extend_from_slice(&pool[k..]);
    }
    split.train_idx.sort_unstable();
    split.val_idx.sort_unstable();
    split.test_idx.sort_unstable();
    Ok(split)
}
