//! `TRVC` checkpoint: decoder weights, traversability vector and loss config echo.
//!
//! Layout (little-endian): magic, version u32, layer count u32, layer dims
//! u32 x (count + 1), per layer row-major f32 weights then f32 biases,
//! vector dim u32, f32 z, f64 alpha, u8 initialized, f32 tau, f32 omega_mask,
//! u32 n_pos_traj, n_neg_traj, n_pos_mask, n_neg_mask.

use std::path::Path;

use super::decoder::Decoder;
use super::ema::TraversabilityVector;
use super::loss::LossConfig;
use crate::error::{Result, TrvError};
use crate::sampling::Cursor;

const MAGIC: &[u8; 4] = b"TRVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub decoder: Decoder,
    pub vector: TraversabilityVector,
    pub loss: LossConfig,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let put_u32 = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION as usize);
        put_u32(&mut b, self.decoder.layers.len());
        for d in self.decoder.dims() {
            put_u32(&mut b, d);
        }
        for l in &self.decoder.layers {
            for v in l.weights.iter().chain(&l.bias) {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        put_u32(&mut b, self.vector.z.len());
        for v in &self.vector.z {
            b.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        b.extend_from_slice(&self.vector.alpha.to_le_bytes());
        b.push(self.vector.initialized as u8);
        b.extend_from_slice(&(self.loss.tau as f32).to_le_bytes());
        b.extend_from_slice(&(self.loss.omega_mask as f32).to_le_bytes());
        for n in [
            self.loss.n_pos_traj,
            self.loss.n_neg_traj,
            self.loss.n_pos_mask,
            self.loss.n_neg_mask,
        ] {
            put_u32(&mut b, n);
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(TrvError::format("magic", "expected TRVC"));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(TrvError::format("version", format!("unsupported version {version}")));
        }
        let n_layers = cur.u32("layer count")? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(TrvError::format("layer count", format!("{n_layers}")));
        }
        let dims: Vec<usize> = (0..=n_layers)
            .map(|_| cur.u32("layer dims").map(|v| v as usize))
            .collect::<Result<_>>()?;
        if dims.contains(&0) {
            return Err(TrvError::format("layer dims", "zero-width layer"));
        }
        let mut decoder = Decoder::zeros(&dims);
        for l in &mut decoder.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = cur.f32("weights")? as f64;
            }
        }
        let zdim = cur.u32("vector dim")? as usize;
        if zdim != decoder.output_dim() {
            return Err(TrvError::format(
                "vector dim",
                format!("{zdim} does not match decoder output {}", decoder.output_dim()),
            ));
        }
        let z = (0..zdim)
            .map(|_| cur.f32("vector").map(|v| v as f64))
            .collect::<Result<Vec<_>>>()?;
        let alpha = cur.f64("alpha")?;
        let initialized = cur.take(1, "initialized")?[0] != 0;
        let tau = cur.f32("tau")? as f64;
        let omega_mask = cur.f32("omega_mask")? as f64;
        let loss = LossConfig {
            tau,
            omega_mask,
            n_pos_traj: cur.u32("n_pos_traj")? as usize,
            n_neg_traj: cur.u32("n_neg_traj")? as usize,
            n_pos_mask: cur.u32("n_pos_mask")? as usize,
            n_neg_mask: cur.u32("n_neg_mask")? as usize,
        };
        if cur.pos != bytes.len() {
            return Err(TrvError::format("trailer", "unexpected trailing bytes"));
        }
        // stored z is f32; renormalize in f64
        let mut vector = TraversabilityVector { z, alpha, initialized };
        if initialized {
            let n = vector.z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(TrvError::format("vector", "initialized vector has zero norm"));
            }
            vector.z.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { decoder, vector, loss })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::features::write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrvError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_up_to_f32() {
        let decoder = Decoder::new(&[5, 7, 3], 1).unwrap();
        let ck = Checkpoint {
            decoder: decoder.clone(),
            vector: TraversabilityVector {
                z: vec![0.6, 0.0, 0.8],
                alpha: 0.999,
                initialized: true,
            },
            loss: LossConfig::default(),
        };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.decoder.dims(), vec![5, 7, 3]);
        for (a, b) in back.decoder.flat().iter().zip(decoder.flat()) {
            assert_eq!(*a, b as f32 as f64);
        }
        assert_eq!(back.vector.alpha, 0.999);
        assert!(back.vector.initialized);
        assert!((back.loss.tau - 0.05).abs() < 1e-8);
        assert_eq!(back.loss.n_pos_mask, 512);
        // a second round trip is exact
        assert_eq!(Checkpoint::decode(&back.encode()).unwrap(), back);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let ck = Checkpoint {
            decoder: Decoder::new(&[2, 2], 0).unwrap(),
            vector: TraversabilityVector::new(2, 0.9),
            loss: LossConfig::default(),
        };
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes;
        bad[3] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(TrvError::Format { field, .. }) if field == "magic"));
    }
}
