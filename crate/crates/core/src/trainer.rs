//! Decoder training: per-frame sampling, combined contrastive loss, SGD with
//! momentum, and EMA tracking of the traversability vector.

pub mod checkpoint;
pub mod decoder;
pub mod ema;
pub mod loss;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use decoder::{Decoder, DecoderGrads};
pub use ema::{ema_update, TraversabilityVector};
pub use loss::{combined_loss, contrastive_loss, CellSamples, FrameLoss, LossConfig};

use crate::error::{Result, TrvError};
use crate::features::{Dataset, Encoder, FeatureMap, FrameRecord};
use crate::geometry::{filter_occluded, project_track, rasterize_footprint, DepthMap, FootprintMask, WheelTrack};
use crate::raster::ClassRaster;
use crate::rng::derive_seed;
use crate::sampling::{
    default_min_area, read_masks, sample_mask, sample_trajectory, select_mask, EgoMask, MaskProposal, SampleSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Frames per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// EMA momentum of the traversability vector.
    pub alpha: f64,
    /// Future wheel poses projected per frame.
    pub horizon: usize,
    /// Depth slack in meters for the occlusion test.
    pub occlusion_tol: f64,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    /// Use only the first `max_frames` manifest entries.
    pub max_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 2,
            epochs: 1,
            seed: 0,
            alpha: 0.999,
            horizon: 300,
            occlusion_tol: 0.1,
            hidden: vec![256, 128],
            out_dim: 16,
            max_frames: None,
        }
    }
}

impl TrainConfig {
    /// Few-shot continuation defaults: 2 epochs over 10 frames.
    pub fn adaptation() -> Self {
        Self {
            epochs: 2,
            max_frames: Some(10),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrvError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrvError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(TrvError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrvError::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.horizon == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(TrvError::Config(
                "horizon, out_dim and hidden widths must be positive".into(),
            ));
        }
        if !(self.occlusion_tol >= 0.0) {
            return Err(TrvError::Config("occlusion_tol must be non-negative".into()));
        }
        Ok(())
    }

    pub fn decoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        dims
    }
}

/// Everything the loss needs from one frame; features are frozen, so this is
/// computed once and reused across epochs.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    /// Index into the manifest.
    pub index: usize,
    pub features: FeatureMap,
    pub footprint: FootprintMask,
    pub ego: EgoMask,
    pub mask: Option<MaskProposal>,
}

/// Footprint of the future wheel track in the frame's image, after occlusion culling.
pub fn frame_footprint(dataset: &Dataset, frame: &FrameRecord, horizon: usize, tol: f64) -> Result<FootprintMask> {
    let cal = crate::features::Calibration::load(&dataset.resolve(&frame.calibration))?;
    let depth = DepthMap::read(&dataset.resolve(&frame.depth))?;
    let (w, h) = (cal.intrinsics.width, cal.intrinsics.height);
    if depth.width != w || depth.height != h {
        return Err(TrvError::InvalidInput(format!(
            "depth is {}x{} but intrinsics are {w}x{h}",
            depth.width, depth.height
        )));
    }
    let track = WheelTrack::read_csv(&dataset.resolve(&frame.poses), horizon)?;
    let window = match track.window(frame.timestamp, horizon) {
        Ok(w) => w,
        Err(_) => return Ok(FootprintMask::empty(w, h, true)),
    };
    let points = project_track(&window, &cal.intrinsics, &cal.extrinsics)?;
    let visible = filter_occluded(&points, &depth, tol);
    Ok(rasterize_footprint(&visible, w, h))
}

pub fn load_ego_mask(dataset: &Dataset, frame: &FrameRecord, width: usize, height: usize) -> Result<EgoMask> {
    let Some(rel) = &frame.ego_mask else {
        return Ok(EgoMask::none(width, height));
    };
    let raster = ClassRaster::read_png(&dataset.resolve(rel))?;
    if raster.width != width || raster.height != height {
        return Err(TrvError::InvalidInput(format!(
            "ego mask is {}x{} but image is {width}x{height}",
            raster.width, raster.height
        )));
    }
    Ok(EgoMask {
        bitmap: raster.to_bitmap(|c| c != 0),
    })
}

/// Load and preprocess one frame. `Ok(None)` means the frame has no usable
/// footprint and is skipped.
pub fn prepare_frame(
    dataset: &Dataset,
    index: usize,
    encoder: &dyn Encoder,
    cfg: &TrainConfig,
) -> Result<Option<PreparedFrame>> {
    let frame = &dataset.frames[index];
    let footprint = frame_footprint(dataset, frame, cfg.horizon, cfg.occlusion_tol)?;
    let (w, h) = (footprint.bitmap.width(), footprint.bitmap.height());
    let ego = load_ego_mask(dataset, frame, w, h)?;
    let usable = footprint.bitmap.pixels().any(|(r, c)| !ego.bitmap.get(r, c));
    if footprint.is_empty() || !usable {
        debug!("frame {index}: empty footprint, skipped");
        return Ok(None);
    }
    let proposals = read_masks(&dataset.resolve(&frame.masks))?;
    let min_area = default_min_area(footprint.area, w * h);
    let mask = select_mask(&proposals, min_area)
        .map(|i| proposals[i].clone())
        .filter(|m| m.bitmap.width() == w && m.bitmap.height() == h);
    let features = encoder.encode(dataset, frame)?;
    Ok(Some(PreparedFrame {
        index,
        features,
        footprint,
        ego,
        mask,
    }))
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub frame: usize,
    pub loss_traj: f64,
    pub loss_mask: Option<f64>,
    pub loss_total: f64,
}

pub fn write_loss_log(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,frame,loss_traj,loss_mask,loss_total").unwrap();
    for r in records {
        let mask = r.loss_mask.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.step, r.frame, r.loss_traj, mask, r.loss_total).unwrap();
    }
    crate::features::write_atomic(path, &out)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub decoder: Decoder,
    pub vector: TraversabilityVector,
    pub log: Vec<LossRecord>,
    /// Manifest indices of skipped frames.
    pub skipped: Vec<usize>,
}

/// Combined loss and decoder gradient for one frame.
///
/// `inputs` is a table of raw feature rows; the sample sets index into it.
/// Returns the loss, the parameter gradient and the decoded rows.
pub fn frame_loss_and_grad(
    decoder: &Decoder,
    inputs: &[Vec<f64>],
    traj: &CellSamples,
    mask: Option<&CellSamples>,
    cfg: &LossConfig,
) -> Result<(FrameLoss, DecoderGrads, Vec<Vec<f64>>)> {
    let caches: Vec<_> = inputs.iter().map(|x| decoder.forward_cached(x)).collect();
    let rows: Vec<Vec<f64>> = caches.iter().map(|c| c.output.clone()).collect();
    let loss = combined_loss(&rows, traj, mask, cfg)?;
    let mut grads = DecoderGrads::zeros_like(decoder);
    for (cache, g) in caches.iter().zip(&loss.grads) {
        if g.iter().any(|v| *v != 0.0) {
            decoder.backward(cache, g, &mut grads);
        }
    }
    if !loss.total.is_finite() {
        return Err(TrvError::Numeric("non-finite loss".into()));
    }
    Ok((loss, grads, rows))
}

/// Map sampled pixels onto a deduplicated table of feature cells.
fn cell_table(map: &FeatureMap, sets: &[&SampleSet]) -> (Vec<Vec<f64>>, Vec<CellSamples>) {
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut cells = Vec::new();
    let mut lookup = |px: &(usize, usize)| -> usize {
        let c = map.cell_of_pixel(*px);
        *slot.entry(c).or_insert_with(|| {
            cells.push(c);
            cells.len() - 1
        })
    };
    let samples = sets
        .iter()
        .map(|s| CellSamples {
            positives: s.positives.iter().map(&mut lookup).collect(),
            negatives: s.negatives.iter().map(&mut lookup).collect(),
        })
        .collect();
    let rows = cells.iter().map(|&c| map.cell_f64(c)).collect();
    (rows, samples)
}

struct FrameResult {
    loss: FrameLoss,
    grads: DecoderGrads,
    /// Decoded trajectory positives, before the optimizer step.
    positives: Vec<Vec<f64>>,
}

fn run_frame(decoder: &Decoder, frame: &PreparedFrame, loss_cfg: &LossConfig, seed: u64) -> Result<FrameResult> {
    let traj = sample_trajectory(&frame.footprint, &frame.ego, loss_cfg.traj_counts(), seed)?;
    let mask = match &frame.mask {
        Some(m) if loss_cfg.omega_mask > 0.0 => match sample_mask(m, &frame.ego, loss_cfg.mask_counts(), seed) {
            Ok(s) => Some(s),
            Err(TrvError::EmptyRegion(_)) => None,
            Err(e) => return Err(e),
        },
        _ => None,
    };
    let mut sets = vec![&traj];
    sets.extend(mask.as_ref());
    let (inputs, samples) = cell_table(&frame.features, &sets);
    let (loss, grads, rows) = frame_loss_and_grad(decoder, &inputs, &samples[0], samples.get(1), loss_cfg)?;
    let positives = samples[0].positives.iter().map(|&i| rows[i].clone()).collect();
    Ok(FrameResult { loss, grads, positives })
}

/// Continue optimizing `decoder` and `vector` over prepared frames.
fn optimize(
    decoder: &mut Decoder,
    vector: &mut TraversabilityVector,
    frames: &[PreparedFrame],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<LossRecord>> {
    let mut velocity = DecoderGrads::zeros_like(decoder);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in frames.chunks(cfg.batch_size) {
            let results: Vec<Result<FrameResult>> = batch
                .par_iter()
                .map(|f| {
                    let seed = derive_seed(cfg.seed, &[epoch as u64, f.index as u64]);
                    run_frame(decoder, f, loss_cfg, seed)
                })
                .collect();
            let mut total = DecoderGrads::zeros_like(decoder);
            let scale = 1.0 / batch.len() as f64;
            for (f, r) in batch.iter().zip(results) {
                let r = r?;
                total.add_scaled(&r.grads, scale);
                let pos: Vec<&[f64]> = r.positives.iter().map(Vec::as_slice).collect();
                vector.update(&pos);
                log.push(LossRecord {
                    step,
                    frame: f.index,
                    loss_traj: r.loss.loss_traj,
                    loss_mask: r.loss.loss_mask,
                    loss_total: r.loss.total,
                });
            }
            decoder.sgd_step(&total, &mut velocity, cfg.learning_rate, cfg.momentum);
            step += 1;
        }
        if let Some(last) = log.last() {
            info!("epoch {epoch}: {step} steps, last loss {:.4}", last.loss_total);
        }
    }
    Ok(log)
}

fn prepare_all(
    dataset: &Dataset,
    encoder: &dyn Encoder,
    cfg: &TrainConfig,
) -> Result<(Vec<PreparedFrame>, Vec<usize>)> {
    let n = cfg
        .max_frames
        .map_or(dataset.frames.len(), |m| m.min(dataset.frames.len()));
    let prepared: Vec<Result<Option<PreparedFrame>>> = (0..n)
        .into_par_iter()
        .map(|i| prepare_frame(dataset, i, encoder, cfg))
        .collect();
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for (i, p) in prepared.into_iter().enumerate() {
        match p? {
            Some(f) => frames.push(f),
            None => skipped.push(i),
        }
    }
    if !skipped.is_empty() {
        warn!("{} of {n} frames skipped (empty footprint)", skipped.len());
    }
    Ok((frames, skipped))
}

/// Train a fresh decoder and traversability vector on a dataset.
pub fn train(
    dataset: &Dataset,
    encoder: &dyn Encoder,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let (frames, skipped) = if cfg.epochs == 0 {
        (Vec::new(), Vec::new())
    } else {
        prepare_all(dataset, encoder, cfg)?
    };
    let input_dim = match frames.first() {
        Some(f) => f.features.dim,
        None if cfg.epochs == 0 => match dataset.frames.first() {
            Some(fr) => encoder.encode(dataset, fr)?.dim,
            None => return Err(TrvError::NoFrames("no frame has a usable footprint".into())),
        },
        None => return Err(TrvError::NoFrames("no frame has a usable footprint".into())),
    };
    if let Some(f) = frames.iter().find(|f| f.features.dim != input_dim) {
        return Err(TrvError::DimensionMismatch {
            expected: input_dim,
            actual: f.features.dim,
        });
    }
    let mut decoder = Decoder::new(&cfg.decoder_dims(input_dim), derive_seed(cfg.seed, &[0xDEC0DE]))?;
    let mut vector = TraversabilityVector::new(cfg.out_dim, cfg.alpha);
    let log = optimize(&mut decoder, &mut vector, &frames, cfg, loss_cfg)?;
    Ok(TrainOutput {
        decoder,
        vector,
        log,
        skipped,
    })
}

/// Few-shot continuation of a trained model on new frames.
///
/// An empty dataset or zero epochs leaves the model unchanged.
pub fn adapt(
    decoder: &Decoder,
    vector: &TraversabilityVector,
    dataset: &Dataset,
    encoder: &dyn Encoder,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut decoder = decoder.clone();
    let mut vector = vector.clone();
    if cfg.epochs == 0 || dataset.frames.is_empty() || cfg.max_frames == Some(0) {
        return Ok(TrainOutput {
            decoder,
            vector,
            log: Vec::new(),
            skipped: Vec::new(),
        });
    }
    let (frames, skipped) = prepare_all(dataset, encoder, cfg)?;
    if frames.is_empty() {
        return Err(TrvError::NoFrames("no frame has a usable footprint".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.features.dim != decoder.input_dim()) {
        return Err(TrvError::DimensionMismatch {
            expected: decoder.input_dim(),
            actual: f.features.dim,
        });
    }
    let log = optimize(&mut decoder, &mut vector, &frames, cfg, loss_cfg)?;
    Ok(TrainOutput {
        decoder,
        vector,
        log,
        skipped,
    })
}
