//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`, all reals little-endian `f64`):
//!
//! ```text
//! "CADG" | version | variant
//! height | width | bands | regions (0 = no projection) | classes | layers
//! widths[layers + 1] | metric ranks[layers]
//! config length | config JSON (UTF-8)
//! anchors (bands × regions, if regions > 0)
//! per layer: W (widths[l] × widths[l+1]), W_d (widths[l] × ranks[l])
//! region map (height × width u32, if regions > 0)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::segmentation::SegmentationMap;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainedModel, Variant};

pub const MAGIC: &[u8; 4] = b"CADG";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut put = |v: usize| -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    };
    put(FORMAT_VERSION as usize)?;
    put(model.variant.code() as usize)?;
    let regions = model.segmentation.as_ref().map_or(0, SegmentationMap::region_count);
    let p = &model.params;
    for v in [model.height, model.width, model.bands, regions, model.classes, p.layer_count()] {
        put(v)?;
    }
    for w in p.widths() {
        put(w)?;
    }
    for m in &p.metrics {
        put(m.cols())?;
    }
    let config = serde_json::to_vec(&model.config)?;
    put(config.len())?;
    out.extend_from_slice(&config);
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(seg) = &model.segmentation {
        for &r in seg.region_of() {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let bytes = self.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::matrix(rows, cols, data)
    }
}

pub fn decode(buf: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let variant = Variant::from_code(r.u32()? as u32).ok_or_else(|| Error::Format("unknown variant code".into()))?;
    let (height, width, bands, regions, classes, layers) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if layers == 0 {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let widths: Vec<usize> = (0..=layers).map(|_| r.u32()).collect::<Result<_>>()?;
    let ranks: Vec<usize> = (0..layers).map(|_| r.u32()).collect::<Result<_>>()?;
    let config_len = r.u32()?;
    let config: TrainConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let anchors = if regions > 0 { Some(r.tensor(bands, regions)?) } else { None };
    let mut weights = Vec::new();
    let mut metrics = Vec::new();
    for l in 0..layers {
        weights.push(r.tensor(widths[l], widths[l + 1])?);
        metrics.push(r.tensor(widths[l], ranks[l])?);
    }
    let segmentation = if regions > 0 {
        let region_of: Vec<usize> = (0..height * width).map(|_| r.u32()).collect::<Result<_>>()?;
        let seg = SegmentationMap::from_labels(height, width, region_of).map_err(|e| Error::Format(e.to_string()))?;
        if seg.region_count() != regions {
            return Err(Error::Format("region map disagrees with the region count".into()));
        }
        Some(seg)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    Ok(TrainedModel {
        config,
        variant,
        height,
        width,
        bands,
        classes,
        segmentation,
        params: ModelParams { anchors, weights, metrics },
    })
}

pub fn save(path: &Path, model: &TrainedModel) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    decode(&fs::read(path)?)
}
