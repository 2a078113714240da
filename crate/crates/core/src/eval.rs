//! Classification metrics, BEV cost error, per-frame prediction and
//! hyperparameter selection.

use serde::{Deserialize, Serialize};

use crate::control::{GroundTruthBev, VehicleState};
use crate::costmap::{
    project_costs_to_bev, similarity_map, to_cost, BevClassGrid, BevCostmap, CostImage, SimilarityMap,
};
use crate::error::{Result, TrvError};
use crate::features::{Calibration, Dataset, Encoder, FrameRecord};
use crate::geometry::{BevGridConfig, DepthMap, WheelTrack};
use crate::raster::ClassRaster;
use crate::trainer::{train, Decoder, LossConfig, TrainConfig, TraversabilityVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub ap: f64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

/// Metrics for `scores` (higher = more traversable) against binary labels.
///
/// AUROC is the rank statistic with ties counted half. AP is the step-wise
/// precision-recall sum. F1 is maximized over every distinct score used as a
/// `score >= threshold` cut; the other rates are reported at that cut.
pub fn classification_metrics(scores: &[f64], labels: &[bool]) -> Result<MetricReport> {
    if scores.len() != labels.len() {
        return Err(TrvError::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TrvError::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrvError::InvalidInput(
            "metrics need both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // walk tie groups from the highest score down
    let (p, n) = (n_pos as f64, n_neg as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc_pairs = 0.0;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut best: Option<(f64, f64, usize, usize)> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // positives in this group beat all negatives below it and tie with the group's negatives
        auc_pairs += gp as f64 * ((n_neg - fp - gn) as f64 + 0.5 * gn as f64);
        tp += gp;
        fp += gn;
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / p;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if best.is_none_or(|b| f1 > b.0) {
            best = Some((f1, s, tp, fp));
        }
    }
    let (f1, threshold, tp, fp) = best.expect("non-empty input");
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = tp as f64 / p;
    Ok(MetricReport {
        auroc: auc_pairs / (p * n),
        ap,
        f1,
        fpr: fp as f64 / n,
        fnr: (n_pos - tp) as f64 / p,
        precision,
        recall,
        threshold,
    })
}

/// Mean `|predicted - manual cost|` over known predicted cells.
pub fn l1_cost_error(pred: &BevCostmap, gt: &GroundTruthBev) -> Result<f64> {
    if pred.config != gt.grid.config {
        return Err(TrvError::InvalidInput(
            "prediction and ground truth grids differ".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, c) in gt.grid.classes.iter().enumerate() {
        if pred.known[i] {
            sum += (pred.costs[i] - gt.class_costs[*c as usize]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrvError::EmptyRegion("prediction has no known cells".into()));
    }
    Ok(sum / count as f64)
}

/// Per-class evaluation semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub name: String,
    /// Binary label for metrics; `None` leaves the class unlabeled.
    pub traversable: Option<bool>,
    /// Manual BEV cost in `[0, 1]`.
    pub cost: f64,
    pub lethal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassTable {
    pub classes: Vec<ClassInfo>,
}

impl ClassTable {
    pub fn label(&self, class: u8) -> Option<bool> {
        self.classes.get(class as usize).and_then(|c| c.traversable)
    }

    pub fn ground_truth(&self, grid: BevClassGrid) -> Result<GroundTruthBev> {
        GroundTruthBev::new(
            grid,
            self.classes.iter().map(|c| c.cost).collect(),
            self.classes.iter().map(|c| c.lethal).collect(),
        )
    }
}

/// Majority binary label per feature cell over labeled pixels; ties count as non-traversable.
pub fn cell_labels(
    labels: &ClassRaster,
    table: &ClassTable,
    stride: usize,
    height: usize,
    width: usize,
) -> Vec<Option<bool>> {
    let mut votes = vec![(0usize, 0usize); height * width];
    for r in 0..labels.height {
        for c in 0..labels.width {
            let Some(l) = table.label(labels.get(r, c)) else {
                continue;
            };
            let (cr, cc) = (r / stride, c / stride);
            if cr >= height || cc >= width {
                continue;
            }
            let v = &mut votes[cr * width + cc];
            if l {
                v.0 += 1;
            } else {
                v.1 += 1;
            }
        }
    }
    votes.into_iter().map(|(t, n)| (t + n > 0).then_some(t > n)).collect()
}

/// Append labeled cells' scores and labels.
pub fn collect_scores(
    scores: &SimilarityMap,
    labels: &[Option<bool>],
    out_scores: &mut Vec<f64>,
    out_labels: &mut Vec<bool>,
) {
    for (s, l) in scores.values.iter().zip(labels) {
        if let Some(l) = l {
            out_scores.push(*s);
            out_labels.push(*l);
        }
    }
}

/// Outputs of the prediction pipeline for one frame.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub similarity: SimilarityMap,
    pub cost: CostImage,
    /// Projected, not inpainted.
    pub bev: BevCostmap,
}

pub fn predict_frame(
    decoder: &Decoder,
    vector: &TraversabilityVector,
    dataset: &Dataset,
    frame: &FrameRecord,
    encoder: &dyn Encoder,
    grid: &BevGridConfig,
) -> Result<FramePrediction> {
    let features = encoder.encode(dataset, frame)?;
    let decoded = decoder.decode(&features)?;
    let similarity = similarity_map(&decoded, vector)?;
    let cost = to_cost(&similarity);
    let cal = Calibration::load(&dataset.resolve(&frame.calibration))?;
    let depth = DepthMap::read(&dataset.resolve(&frame.depth))?;
    let bev = project_costs_to_bev(&cost, &depth, &cal.intrinsics, &cal.mount, grid)?;
    Ok(FramePrediction { similarity, cost, bev })
}

/// Start state and goal for a frame's MPPI run, in the vehicle frame.
///
/// The goal is the wheel-track midpoint `horizon_s` seconds after the frame
/// (or the last pose if the track ends earlier).
pub fn frame_goal(
    dataset: &Dataset,
    frame: &FrameRecord,
    horizon_s: f64,
    speed: f64,
) -> Result<(VehicleState, (f64, f64))> {
    let cal = Calibration::load(&dataset.resolve(&frame.calibration))?;
    let track = WheelTrack::read_csv(&dataset.resolve(&frame.poses), 1)?;
    let t = frame.timestamp + horizon_s;
    let i = track.timestamps.partition_point(|&ts| ts < t).min(track.len() - 1);
    let mid = nalgebra::Vector3::from(std::array::from_fn::<f64, 3, _>(|k| {
        (track.left[i][k] + track.right[i][k]) / 2.0
    }));
    let g = cal.world_to_vehicle().apply(&mid);
    let start = VehicleState {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        speed,
    };
    Ok((start, (g.x, g.y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamRow {
    pub tau: f64,
    pub omega_mask: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamSelection {
    pub best: HyperparamRow,
    pub table: Vec<HyperparamRow>,
}

/// Train once per `(tau, omega_mask)` candidate and keep the lowest mean BEV L1 error
/// on the validation frames. Ties keep the earlier candidate.
#[allow(clippy::too_many_arguments)]
pub fn select_hyperparams(
    candidates: &[(f64, f64)],
    train_set: &Dataset,
    validation: &Dataset,
    encoder: &dyn Encoder,
    cfg: &TrainConfig,
    base_loss: &LossConfig,
    classes: &ClassTable,
    grid: &BevGridConfig,
) -> Result<HyperparamSelection> {
    if candidates.is_empty() {
        return Err(TrvError::Config("no hyperparameter candidates".into()));
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &(tau, omega_mask) in candidates {
        let loss = LossConfig {
            tau,
            omega_mask,
            ..*base_loss
        };
        let out = train(train_set, encoder, cfg, &loss)?;
        let mut total = 0.0;
        let mut frames = 0usize;
        for frame in &validation.frames {
            let Some(gt_rel) = &frame.gt_bev else {
                continue;
            };
            let pred = predict_frame(&out.decoder, &out.vector, validation, frame, encoder, grid)?;
            let gt = classes.ground_truth(BevClassGrid::read(&validation.resolve(gt_rel))?)?;
            total += l1_cost_error(&pred.bev, &gt)?;
            frames += 1;
        }
        if frames == 0 {
            return Err(TrvError::InvalidInput(
                "validation frames carry no ground-truth BEV".into(),
            ));
        }
        table.push(HyperparamRow {
            tau,
            omega_mask,
            l1: total / frames as f64,
        });
    }
    let best = table
        .iter()
        .fold(None::<&HyperparamRow>, |b, r| match b {
            Some(b) if b.l1 <= r.l1 => Some(b),
            _ => Some(r),
        })
        .cloned()
        .expect("non-empty table");
    Ok(HyperparamSelection { best, table })
}
