//! Dense feature maps from the frozen encoder: the `TRVF` file format,
//! the synthetic encoder used for desk-scale worlds, and the dataset
//! manifest that ties frame files together.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TrvError};
use crate::raster::ClassRaster;
use crate::rng::rng_from;
use crate::sampling::{Cursor, Pixel};

pub mod manifest;

pub use manifest::{Calibration, Dataset, FrameRecord};

/// `H_f x W_f x D` grid of features, row-major with the feature dimension fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Image pixels per feature cell along each axis.
    pub stride: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, stride: usize, values: Vec<f32>) -> Result<Self> {
        if stride == 0 {
            return Err(TrvError::InvalidInput("feature stride must be >= 1".into()));
        }
        if values.len() != height * width * dim {
            return Err(TrvError::DimensionMismatch {
                expected: height * width * dim,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TrvError::InvalidInput(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            stride,
            values,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell(&self, index: usize) -> &[f32] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    /// Feature cell index holding image pixel `(row, col)`.
    #[inline]
    pub fn cell_of_pixel(&self, (row, col): Pixel) -> usize {
        let r = (row / self.stride).min(self.height - 1);
        let c = (col / self.stride).min(self.width - 1);
        r * self.width + c
    }

    pub fn cell_f64(&self, index: usize) -> Vec<f64> {
        self.cell(index).iter().map(|&v| v as f64).collect()
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"TRVF";
pub const FEATURE_FILE_VERSION: u32 = 1;

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 4 * map.values.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_FILE_VERSION,
        map.height as u32,
        map.width as u32,
        map.dim as u32,
        map.stride as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parse and validate a `TRVF` buffer. Errors name the offending header field.
pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != FEATURE_MAGIC {
        return Err(TrvError::format("magic", "expected TRVF"));
    }
    let version = cur.u32("version")?;
    if version != FEATURE_FILE_VERSION {
        return Err(TrvError::format("version", format!("unsupported version {version}")));
    }
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let d = cur.u32("dim")? as usize;
    let stride = cur.u32("stride")? as usize;
    for (name, v) in [("height", h), ("width", w), ("dim", d), ("stride", stride)] {
        if v == 0 {
            return Err(TrvError::format(name, "must be positive"));
        }
    }
    let body = &bytes[cur.pos..];
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TrvError::format("dim", "header dimensions overflow"))?;
    if body.len() != expected {
        return Err(TrvError::format(
            "values",
            format!("expected {expected} payload bytes, got {}", body.len()),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TrvError::format("values", "non-finite feature value"));
    }
    Ok(FeatureMap {
        height: h,
        width: w,
        dim: d,
        stride,
        values,
    })
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TrvError::io(path, e))?;
    decode_feature_map(&bytes)
}

/// Atomic write: temp file in the destination directory, then rename.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_map(map))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| TrvError::io(dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_data())
        .map_err(|e| TrvError::io(path, e))?;
    tmp.persist(path).map_err(|e| TrvError::io(path, e.error))?;
    Ok(())
}

/// Frozen feature source. Repeated calls on the same frame return identical maps.
pub trait Encoder: Sync {
    fn encode(&self, dataset: &Dataset, frame: &FrameRecord) -> Result<FeatureMap>;
}

/// Reads precomputed `TRVF` files named by the manifest.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileEncoder;

impl Encoder for FileEncoder {
    fn encode(&self, dataset: &Dataset, frame: &FrameRecord) -> Result<FeatureMap> {
        load_feature_map(&dataset.resolve(&frame.features))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthEncoderConfig {
    pub stride: usize,
    pub noise_sigma: f64,
    /// Box-blur radius in feature cells.
    pub blur_radius: usize,
}

impl Default for SynthEncoderConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            noise_sigma: 0.1,
            blur_radius: 1,
        }
    }
}

/// Encodes class rasters on the fly with fixed prototypes.
#[derive(Debug, Clone)]
pub struct SynthEncoder {
    pub prototypes: Vec<Vec<f32>>,
    pub config: SynthEncoderConfig,
    pub seed: u64,
}

impl Encoder for SynthEncoder {
    fn encode(&self, dataset: &Dataset, frame: &FrameRecord) -> Result<FeatureMap> {
        let raster = ClassRaster::read_png(&dataset.resolve(&frame.image))?;
        let seed = crate::rng::derive_seed(self.seed, &[frame.timestamp.to_bits()]);
        synth_encode(&raster, &self.prototypes, &self.config, seed)
    }
}

/// Synthetic dense features for a class raster.
///
/// Each cell takes the prototype of the majority class in its
/// `stride x stride` block (ties to the lower class id), plus i.i.d. Gaussian
/// noise, then a box blur of `blur_radius` cells. Output is not normalized.
pub fn synth_encode(
    semantic: &ClassRaster,
    prototypes: &[Vec<f32>],
    cfg: &SynthEncoderConfig,
    seed: u64,
) -> Result<FeatureMap> {
    if cfg.stride == 0 {
        return Err(TrvError::Config("synthetic encoder stride must be >= 1".into()));
    }
    let dim = prototypes
        .first()
        .map(|p| p.len())
        .ok_or_else(|| TrvError::InvalidInput("no prototypes".into()))?;
    if prototypes.iter().any(|p| p.len() != dim) {
        return Err(TrvError::InvalidInput("prototypes differ in dimension".into()));
    }
    let s = cfg.stride;
    let hf = semantic.height.div_ceil(s);
    let wf = semantic.width.div_ceil(s);
    let mut values = vec![0f64; hf * wf * dim];
    let mut counts = [0u32; 256];
    for r in 0..hf {
        for c in 0..wf {
            counts.fill(0);
            for y in r * s..((r + 1) * s).min(semantic.height) {
                for x in c * s..((c + 1) * s).min(semantic.width) {
                    counts[semantic.get(y, x) as usize] += 1;
                }
            }
            // max_by_key keeps the last maximum; scan from the top for lowest id
            let class = (0..256).rev().max_by_key(|&k| counts[k]).unwrap();
            let proto = prototypes
                .get(class)
                .ok_or_else(|| TrvError::InvalidInput(format!("class {class} has no prototype")))?;
            let base = (r * wf + c) * dim;
            for (k, &p) in proto.iter().enumerate() {
                values[base + k] = p as f64;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| TrvError::Config(format!("noise sigma: {e}")))?;
        let mut rng = rng_from(seed, &[0x5EED]);
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if cfg.blur_radius > 0 {
        values = box_blur(&values, hf, wf, dim, cfg.blur_radius);
    }
    FeatureMap::new(hf, wf, dim, s, values.into_iter().map(|v| v as f32).collect())
}

/// Separable box blur; windows are clipped at the border and averaged over valid cells.
fn box_blur(values: &[f64], h: usize, w: usize, dim: usize, radius: usize) -> Vec<f64> {
    let mut tmp = vec![0f64; values.len()];
    for r in 0..h {
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
            let n = (c1 - c0 + 1) as f64;
            for k in 0..dim {
                let sum: f64 = (c0..=c1).map(|x| values[(r * w + x) * dim + k]).sum();
                tmp[(r * w + c) * dim + k] = sum / n;
            }
        }
    }
    let mut out = vec![0f64; values.len()];
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
        let n = (r1 - r0 + 1) as f64;
        for c in 0..w {
            for k in 0..dim {
                let sum: f64 = (r0..=r1).map(|y| tmp[(y * w + c) * dim + k]).sum();
                out[(r * w + c) * dim + k] = sum / n;
            }
        }
    }
    out
}

/// `n` unit prototypes in `dim` dimensions with every pairwise angle equal
/// to `angle_deg` (0..=90), randomly rotated by a seeded orthogonal matrix.
pub fn class_prototypes(n: usize, dim: usize, angle_deg: f64, seed: u64) -> Result<Vec<Vec<f32>>> {
    if dim < n + 1 {
        return Err(TrvError::Config(format!(
            "prototype dimension {dim} too small for {n} classes"
        )));
    }
    if !(0.0..=90.0).contains(&angle_deg) {
        return Err(TrvError::Config(format!("prototype angle {angle_deg} outside [0, 90]")));
    }
    let cos = angle_deg.to_radians().cos().max(0.0);
    let (a, b) = (cos.sqrt(), (1.0 - cos).sqrt());
    let rotation = random_rotation(dim, seed);
    Ok((0..n)
        .map(|i| {
            let mut p = nalgebra::DVector::<f64>::zeros(dim);
            p[0] = a;
            p[i + 1] = b;
            let q = &rotation * p;
            q.iter().map(|&v| v as f32).collect()
        })
        .collect())
}

/// Perturb prototypes by seeded random directions of length `magnitude`, renormalized.
pub fn shift_prototypes(prototypes: &[Vec<f32>], magnitude: f64, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng_from(seed, &[0x5817]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    prototypes
        .iter()
        .map(|p| {
            let g: Vec<f64> = (0..p.len()).map(|_| normal.sample(&mut rng)).collect();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let q: Vec<f64> = p.iter().zip(&g).map(|(&a, &b)| a as f64 + magnitude * b / gn).collect();
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            q.iter().map(|v| (v / qn) as f32).collect()
        })
        .collect()
}

fn random_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from(seed, &[0x0207]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let g = DMatrix::from_fn(dim, dim, |_, _| normal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // sign fix makes the factorization unique
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, h: usize, w: usize, d: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        FeatureMap::new(h, w, d, 2, values).unwrap()
    }

    #[test]
    fn round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.trvf");
        let a = random_map(1, 8, 8, 4);
        write_feature_map(&a, &path).unwrap();
        assert_eq!(load_feature_map(&path).unwrap(), a);
        let b = random_map(2, 3, 5, 2);
        write_feature_map(&b, &path).unwrap();
        assert_eq!(load_feature_map(&path).unwrap(), b);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = encode_feature_map(&random_map(3, 4, 4, 3));
        let err = decode_feature_map(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(
            matches!(err, TrvError::Format { ref field, .. } if field == "values"),
            "{err}"
        );
        let err = decode_feature_map(&bytes[..10]).unwrap_err();
        assert!(
            matches!(err, TrvError::Format { ref field, .. } if field == "height"),
            "{err}"
        );
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_feature_map(&bad), Err(TrvError::Format { field, .. }) if field == "version"));
        let mut bad = bytes.clone();
        bad[20] = 0;
        assert!(matches!(decode_feature_map(&bad), Err(TrvError::Format { field, .. }) if field == "stride"));
        let mut bad = bytes;
        bad[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_feature_map(&bad).is_err());
    }

    #[test]
    fn write_into_missing_directory_surfaces_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("f.trvf");
        assert!(matches!(
            write_feature_map(&random_map(1, 2, 2, 2), &path),
            Err(TrvError::Io { .. })
        ));
    }

    #[test]
    fn exporter_layout_dims() {
        // the exporter's contract: 1024x1024 input, 64x64x256 grid, stride 16
        let map = FeatureMap::new(64, 64, 256, 16, vec![0.0; 64 * 64 * 256]).unwrap();
        let back = decode_feature_map(&encode_feature_map(&map)).unwrap();
        assert_eq!((back.height, back.width, back.dim, back.stride), (64, 64, 256, 16));
        assert_eq!(back.cell_of_pixel((1023, 1023)), 64 * 64 - 1);
        assert_eq!(back.cell_of_pixel((16, 31)), 64 + 1);
    }

    #[test]
    fn noise_free_cells_are_exact_prototypes() {
        let protos = class_prototypes(3, 8, 90.0, 4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f32 = protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        let mut raster = ClassRaster::new(16, 16, 0);
        for r in 0..16 {
            for c in 0..16 {
                raster.set(r, c, ((r / 4 + c / 4) % 3) as u8);
            }
        }
        let cfg = SynthEncoderConfig {
            stride: 4,
            noise_sigma: 0.0,
            blur_radius: 0,
        };
        let map = synth_encode(&raster, &protos, &cfg, 1).unwrap();
        assert_eq!((map.height, map.width), (4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(map.cell(r * 4 + c), &protos[(r + c) % 3][..]);
            }
        }
        assert_eq!(synth_encode(&raster, &protos, &cfg, 99).unwrap(), map);
    }

    #[test]
    fn half_half_gives_two_values_and_majority_ties_go_low() {
        let protos = class_prototypes(2, 4, 60.0, 0).unwrap();
        let mut raster = ClassRaster::new(16, 16, 0);
        for r in 0..16 {
            for c in 8..16 {
                raster.set(r, c, 1);
            }
        }
        let cfg = SynthEncoderConfig {
            stride: 4,
            noise_sigma: 0.0,
            blur_radius: 0,
        };
        let map = synth_encode(&raster, &protos, &cfg, 0).unwrap();
        let mut distinct: Vec<&[f32]> = (0..map.cells()).map(|i| map.cell(i)).collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
        // a 2/2 split inside one block resolves to class 0
        let mut tie = ClassRaster::new(4, 4, 0);
        for r in 0..4 {
            for c in 2..4 {
                tie.set(r, c, 1);
            }
        }
        let m = synth_encode(&tie, &protos, &cfg, 0).unwrap();
        assert_eq!(m.cell(0), &protos[0][..]);
    }

    #[test]
    fn missing_prototype_errors() {
        let protos = class_prototypes(2, 4, 60.0, 0).unwrap();
        let raster = ClassRaster::new(4, 4, 5);
        assert!(synth_encode(&raster, &protos, &SynthEncoderConfig::default(), 0).is_err());
    }

    #[test]
    fn prototype_angles() {
        let protos = class_prototypes(8, 32, 60.0, 7).unwrap();
        for i in 0..8 {
            let n: f32 = protos[i].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
            for j in i + 1..8 {
                let dot: f32 = protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum();
                assert!((dot - 0.5).abs() < 1e-5, "cos 60 = 0.5, got {dot}");
            }
        }
    }

    #[test]
    fn seeded_noise_checksum() {
        let protos = class_prototypes(3, 8, 60.0, 1).unwrap();
        let mut raster = ClassRaster::new(32, 32, 0);
        for r in 0..32 {
            for c in 0..32 {
                raster.set(r, c, ((r * 7 + c * 3) / 11 % 3) as u8);
            }
        }
        let cfg = SynthEncoderConfig {
            stride: 4,
            noise_sigma: 0.1,
            blur_radius: 1,
        };
        let a = synth_encode(&raster, &protos, &cfg, 21).unwrap();
        assert_eq!(a, synth_encode(&raster, &protos, &cfg, 21).unwrap());
        assert_ne!(a, synth_encode(&raster, &protos, &cfg, 22).unwrap());
        let sum: f64 = a.values.iter().map(|&v| v as f64).sum();
        let sumsq: f64 = a.values.iter().map(|&v| (v as f64).powi(2)).sum();
        assert_eq!(format!("{sum:.6} {sumsq:.6}"), GOLDEN_SYNTH_CHECKSUM);
    }

    const GOLDEN_SYNTH_CHECKSUM: &str = "-97.227450 47.234092";

    proptest! {
        #[test]
        fn file_round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, d in 1usize..5, stride in 1usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..h * w * d)
                .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
                .collect();
            let map = FeatureMap { height: h, width: w, dim: d, stride, values };
            let back = decode_feature_map(&encode_feature_map(&map)).unwrap();
            prop_assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            map.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
