//! Positive/negative pixel sampling from the driven footprint and from a
//! selected mask proposal, plus the mask proposal file format.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrvError};
use crate::geometry::FootprintMask;
use crate::raster::Bitmap;
use crate::rng::rng_from;

pub type Pixel = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Trajectory,
    Mask,
}

/// Sampled pixels, as `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub positives: Vec<Pixel>,
    pub negatives: Vec<Pixel>,
    pub source: SampleSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub bitmap: Bitmap,
    pub confidence: f32,
    pub area: usize,
}

impl MaskProposal {
    pub fn new(bitmap: Bitmap, confidence: f32) -> Self {
        let area = bitmap.count();
        Self {
            bitmap,
            confidence,
            area,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.confidence.is_finite() {
            return Err(TrvError::format("proposal confidence", "not finite"));
        }
        let count = self.bitmap.count();
        if count != self.area {
            return Err(TrvError::format(
                "proposal area",
                format!("header says {}, bitmap has {count} set pixels", self.area),
            ));
        }
        Ok(())
    }
}

/// Pixels covered by the vehicle body; never sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoMask {
    pub bitmap: Bitmap,
}

impl EgoMask {
    pub fn none(width: usize, height: usize) -> Self {
        Self {
            bitmap: Bitmap::new(width, height),
        }
    }
}

/// Counts per sampled set; defaults follow the reference training setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCounts {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl SampleCounts {
    pub const TRAJECTORY: SampleCounts = SampleCounts {
        n_pos: 256,
        n_neg: 1024,
    };
    pub const MASK: SampleCounts = SampleCounts {
        n_pos: 512,
        n_neg: 1024,
    };
}

fn draw(region: &[Pixel], n: usize, rng: &mut impl Rng) -> Vec<Pixel> {
    if region.len() >= n {
        index::sample(rng, region.len(), n)
            .into_iter()
            .map(|i| region[i])
            .collect()
    } else {
        (0..n).map(|_| region[rng.random_range(0..region.len())]).collect()
    }
}

fn sample_region(
    region: &Bitmap,
    ego: &EgoMask,
    counts: SampleCounts,
    seed: u64,
    source: SampleSource,
) -> Result<SampleSet> {
    if !region.same_shape(&ego.bitmap) {
        return Err(TrvError::InvalidInput(format!(
            "region is {}x{} but ego mask is {}x{}",
            region.width(),
            region.height(),
            ego.bitmap.width(),
            ego.bitmap.height()
        )));
    }
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for r in 0..region.height() {
        for c in 0..region.width() {
            if ego.bitmap.get(r, c) {
                continue;
            }
            if region.get(r, c) {
                inside.push((r, c));
            } else {
                outside.push((r, c));
            }
        }
    }
    let what = match source {
        SampleSource::Trajectory => "footprint",
        SampleSource::Mask => "mask",
    };
    if inside.is_empty() {
        return Err(TrvError::EmptyRegion(format!(
            "{what} has no pixels outside the ego mask"
        )));
    }
    if outside.is_empty() && counts.n_neg > 0 {
        return Err(TrvError::EmptyRegion(format!(
            "{what} covers the whole image; no negatives available"
        )));
    }
    let tag = match source {
        SampleSource::Trajectory => 1,
        SampleSource::Mask => 2,
    };
    let mut rng = rng_from(seed, &[tag]);
    let positives = draw(&inside, counts.n_pos, &mut rng);
    let negatives = if counts.n_neg > 0 {
        draw(&outside, counts.n_neg, &mut rng)
    } else {
        Vec::new()
    };
    Ok(SampleSet {
        positives,
        negatives,
        source,
    })
}

/// Draw positives inside the footprint and negatives outside it, skipping ego pixels.
///
/// Draws are without replacement unless a region has fewer pixels than requested.
/// An empty footprint is reported as [`TrvError::EmptyRegion`] (skip the frame).
pub fn sample_trajectory(
    footprint: &FootprintMask,
    ego: &EgoMask,
    counts: SampleCounts,
    seed: u64,
) -> Result<SampleSet> {
    sample_region(&footprint.bitmap, ego, counts, seed, SampleSource::Trajectory)
}

/// As [`sample_trajectory`], over a mask proposal.
pub fn sample_mask(mask: &MaskProposal, ego: &EgoMask, counts: SampleCounts, seed: u64) -> Result<SampleSet> {
    sample_region(&mask.bitmap, ego, counts, seed, SampleSource::Mask)
}

/// Default area threshold: the larger of the footprint area and 0.5% of the image.
pub fn default_min_area(footprint_area: usize, image_pixels: usize) -> usize {
    footprint_area.max((image_pixels as f64 * 0.005).ceil() as usize)
}

/// Index of the highest-confidence proposal with `area > min_area`.
///
/// Ties on confidence go to the larger area, then the lower index.
pub fn select_mask(proposals: &[MaskProposal], min_area: usize) -> Option<usize> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.area > min_area && p.confidence.is_finite())
        .min_by(|(ia, a), (ib, b)| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(b.area.cmp(&a.area))
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
}

const MASK_MAGIC: &[u8; 4] = b"TRVM";
pub const MASK_FILE_VERSION: u32 = 1;

/// Encode proposals as a `TRVM` file body.
pub fn encode_masks(proposals: &[MaskProposal]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&MASK_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(proposals.len() as u32).to_le_bytes());
    for p in proposals {
        buf.extend_from_slice(&p.confidence.to_le_bytes());
        buf.extend_from_slice(&(p.area as u32).to_le_bytes());
        buf.extend_from_slice(&(p.bitmap.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.bitmap.width() as u32).to_le_bytes());
        buf.extend_from_slice(&p.bitmap.pack());
    }
    buf
}

pub fn decode_masks(bytes: &[u8]) -> Result<Vec<MaskProposal>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MASK_MAGIC {
        return Err(TrvError::format("magic", "expected TRVM"));
    }
    let version = cur.u32("version")?;
    if version != MASK_FILE_VERSION {
        return Err(TrvError::format(
            "version",
            format!("unsupported mask file version {version}"),
        ));
    }
    let count = cur.u32("count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let confidence = f32::from_le_bytes(cur.take(4, "confidence")?.try_into().unwrap());
        let area = cur.u32("area")? as usize;
        let h = cur.u32("height")? as usize;
        let w = cur.u32("width")? as usize;
        let bits = cur.take((w * h).div_ceil(8), "bitmap")?;
        let proposal = MaskProposal {
            bitmap: Bitmap::unpack(w, h, bits)?,
            confidence,
            area,
        };
        proposal.validate().map_err(|e| match e {
            TrvError::Format { field, detail } => TrvError::format(format!("proposal {i} {field}"), detail),
            other => other,
        })?;
        out.push(proposal);
    }
    if cur.pos != bytes.len() {
        return Err(TrvError::format(
            "trailer",
            format!("{} unexpected bytes", bytes.len() - cur.pos),
        ));
    }
    Ok(out)
}

pub fn write_masks(path: &Path, proposals: &[MaskProposal]) -> Result<()> {
    crate::features::write_atomic(path, &encode_masks(proposals))
}

pub fn read_masks(path: &Path) -> Result<Vec<MaskProposal>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TrvError::io(path, e))?;
    decode_masks(&bytes)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TrvError::format(field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}
