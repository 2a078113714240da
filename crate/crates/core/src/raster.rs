//! Boolean bitmaps and 8-bit class rasters shared across modules.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Result, TrvError};

/// Row-major boolean image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(TrvError::DimensionMismatch {
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set pixels as (row, col) pairs, in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn same_shape(&self, other: &Bitmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pack row-major, least-significant bit first, padded to whole bytes.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let n = width * height;
        if bytes.len() != n.div_ceil(8) {
            return Err(TrvError::format(
                "bitmap",
                format!("expected {} bytes, got {}", n.div_ceil(8), bytes.len()),
            ));
        }
        let bits = (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(Self { width, height, bits })
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ClassRaster {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| TrvError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| TrvError::format("png", e.to_string()))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| TrvError::format("png", e.to_string()))?;
        writer.finish().map_err(|e| TrvError::format("png", e.to_string()))
    }

    /// Read an 8-bit grayscale PNG of class ids.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| TrvError::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| TrvError::format("png", e.to_string()))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(TrvError::format(
                "png",
                format!(
                    "expected 8-bit grayscale class raster, got {:?}/{:?}",
                    info.color_type, info.bit_depth
                ),
            ));
        }
        let (width, height) = (info.width as usize, info.height as usize);
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(width * height)];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| TrvError::format("png", e.to_string()))?;
        buf.truncate(frame.buffer_size());
        Ok(Self {
            width,
            height,
            data: buf,
        })
    }

    pub fn to_bitmap(&self, f: impl Fn(u8) -> bool) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.data.iter().map(|&c| f(c)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_odd_size() {
        let bm = Bitmap::from_fn(5, 3, |r, c| (r + c) % 3 == 0);
        let packed = bm.pack();
        assert_eq!(packed.len(), 2);
        assert_eq!(Bitmap::unpack(5, 3, &packed).unwrap(), bm);
        assert!(Bitmap::unpack(5, 3, &packed[..1]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut r = ClassRaster::new(7, 4, 1);
        r.set(2, 3, 5);
        r.set(0, 0, 255);
        r.write_png(&path).unwrap();
        assert_eq!(ClassRaster::read_png(&path).unwrap(), r);
    }
}
