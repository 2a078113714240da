//! Per-cell MLP decoder with L2-normalized output and hand-written backprop.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Result, TrvError};
use crate::features::FeatureMap;
use crate::rng::rng_from;

const LEAKY_SLOPE: f64 = 0.01;
const NORM_FLOOR: f64 = 1e-12;

#[inline]
fn act(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn act_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Dense layer, `weights` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

/// Traversability decoder: leaky-ReLU MLP applied independently to every
/// feature cell, followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub layers: Vec<Layer>,
}

/// Gradients with the same shapes as [`Decoder::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub layers: Vec<Layer>,
}

impl DecoderGrads {
    pub fn zeros_like(decoder: &Decoder) -> Self {
        Self {
            layers: decoder
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &DecoderGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs (index 0 is the raw feature).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    norm: f64,
    pub output: Vec<f64>,
}

impl Decoder {
    /// He-uniform weights, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(TrvError::Config(format!("invalid decoder dims {dims:?}")));
        }
        let mut rng = rng_from(seed, &[0xDEC0]);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut l = Layer::zeros(w[0], w[1]);
                l.weights.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                l
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = Vec::with_capacity(layer.outputs);
            layer.forward(&cur, &mut a);
            let next = if i + 1 < n {
                a.iter().map(|&v| act(v)).collect()
            } else {
                a.clone()
            };
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(a);
        }
        let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
        let output = if norm > NORM_FLOOR {
            cur.iter().map(|v| v / norm).collect()
        } else {
            // a zero vector has no direction; pin it to the first axis
            let mut e = vec![0.0; cur.len()];
            e[0] = 1.0;
            e
        };
        ForwardCache {
            inputs,
            pre,
            norm,
            output,
        }
    }

    /// Unit-norm decoded feature for one cell.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).output
    }

    /// Accumulate parameter gradients given `d loss / d output` for one cell.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut DecoderGrads) {
        if cache.norm <= NORM_FLOOR {
            return;
        }
        let y = &cache.output;
        let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
        let mut delta: Vec<f64> = y
            .iter()
            .zip(grad_out)
            .map(|(yi, gi)| (gi - yi * dot) / cache.norm)
            .collect();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i + 1 < self.layers.len() {
                for (d, &a) in delta.iter_mut().zip(&cache.pre[i]) {
                    *d *= act_grad(a);
                }
            }
            let g = &mut grads.layers[i];
            let input = &cache.inputs[i];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                delta = prev;
            }
        }
    }

    /// Decode every cell of a feature map. Output dim is `output_dim()`, same grid and stride.
    pub fn decode(&self, features: &FeatureMap) -> Result<FeatureMap> {
        if features.dim != self.input_dim() {
            return Err(TrvError::DimensionMismatch {
                expected: self.input_dim(),
                actual: features.dim,
            });
        }
        let dout = self.output_dim();
        let values: Vec<f32> = (0..features.cells())
            .into_par_iter()
            .flat_map_iter(|i| self.forward(&features.cell_f64(i)).into_iter().map(|v| v as f32))
            .collect();
        FeatureMap::new(features.height, features.width, dout, features.stride, values)
    }

    /// Plain SGD with momentum: `v = m v + g; w -= lr v`.
    pub fn sgd_step(&mut self, grads: &DecoderGrads, velocity: &mut DecoderGrads, lr: f64, momentum: f64) {
        for ((l, g), v) in self.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
            for ((w, gw), vw) in l.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                *vw = momentum * *vw + gw;
                *w -= lr * *vw;
            }
            for ((b, gb), vb) in l.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = momentum * *vb + gb;
                *b -= lr * *vb;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_constant_normalized_bias_chain() {
        let mut d = Decoder::zeros(&[3, 4, 4, 2]);
        d.layers[0].bias = vec![1.0, -2.0, 0.5, 0.0];
        d.layers[1].bias = vec![0.3, 0.0, 0.0, 0.0];
        d.layers[2].bias = vec![3.0, -4.0];
        let fm = FeatureMap::new(2, 2, 3, 1, (0..12).map(|v| v as f32).collect()).unwrap();
        let out = d.decode(&fm).unwrap();
        for i in 0..4 {
            assert!((out.cell(i)[0] - 0.6).abs() < 1e-6 && (out.cell(i)[1] + 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn dim_mismatch_errors() {
        let d = Decoder::new(&[4, 8, 2], 0).unwrap();
        let fm = FeatureMap::new(1, 1, 3, 1, vec![0.0; 3]).unwrap();
        assert!(matches!(d.decode(&fm), Err(TrvError::DimensionMismatch { .. })));
    }

    #[test]
    fn seeded_forward_checksum() {
        let d = Decoder::new(&[8, 256, 128, 16], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = FeatureMap::new(4, 4, 8, 4, (0..128).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let out = d.decode(&fm).unwrap();
        assert_eq!(out, d.decode(&fm).unwrap());
        let s: f64 = out
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (i % 7 + 1) as f64 * v as f64)
            .sum();
        assert_eq!(format!("{s:.5}"), GOLDEN_DECODE_CHECKSUM);
    }

    const GOLDEN_DECODE_CHECKSUM: &str = "81.99514";

    #[test]
    fn backward_matches_finite_differences() {
        let mut d = Decoder::new(&[4, 8, 8, 4], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for l in &mut d.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        // scalar objective: c . forward(x)
        let f = |d: &Decoder| d.forward(&x).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let mut grads = DecoderGrads::zeros_like(&d);
        d.backward(&d.forward_cached(&x), &c, &mut grads);
        let analytic = grads.flat();
        let base = d.flat();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            d.set_flat(&p);
            let fp = f(&d);
            p[i] -= 2.0 * h;
            d.set_flat(&p);
            let fm = f(&d);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                analytic[i]
            );
        }
    }

    proptest! {
        #[test]
        fn outputs_are_unit_norm(x in proptest::collection::vec(-1e6f64..1e6, 6), seed in 0u64..100) {
            let d = Decoder::new(&[6, 16, 8, 5], seed).unwrap();
            let y = d.forward(&x);
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
