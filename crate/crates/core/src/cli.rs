//! `trv` command line: `sim-gen`, `train`, `predict`, `eval`, `adapt`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::control::{evaluate_collisions, CollisionFrame, MppiConfig};
use crate::costmap::{inpaint_nearest, BevClassGrid, BevCostmap, CellGrid};
use crate::error::{Result, TrvError};
use crate::eval::{
    cell_labels, classification_metrics, collect_scores, frame_goal, predict_frame, ClassTable, MetricReport,
};
use crate::features::{load_feature_map, write_atomic, write_feature_map, Dataset, FeatureMap, FileEncoder};
use crate::geometry::BevGridConfig;
use crate::raster::ClassRaster;
use crate::simworld::{default_class_table, generate_dataset, SimConfig};
use crate::trainer::{adapt, train, write_loss_log, Checkpoint, LossConfig, TrainConfig};

/// Every tunable in one file; missing keys take their defaults, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub adapt: TrainConfig,
    pub loss: LossConfig,
    pub mppi: MppiConfig,
    pub grid: BevGridConfig,
    pub classes: ClassTable,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            adapt: TrainConfig::adaptation(),
            loss: LossConfig::default(),
            mppi: MppiConfig::default(),
            grid: BevGridConfig::default(),
            classes: default_class_table(),
            eval_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| TrvError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrvError::Config(format!("{}: {e}", path.display())))
    }

    /// Write the effective config as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TrvError::Config(e.to_string()))?;
        write_atomic(&dir.join("config.json"), text.as_bytes())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "trv",
    version,
    about = "Self-supervised traversability learning from driven trajectories"
)]
pub struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    SimGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trail_width: Option<f64>,
        #[arg(long)]
        shoulder_width: Option<f64>,
        #[arg(long)]
        prototype_shift: Option<f64>,
    },
    /// Train a decoder and traversability vector.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Cost images and BEV costmaps for every frame.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Output directory of `predict`; omit with `--oracle`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plan on ground-truth class costs instead of predictions (mppi mode).
        #[arg(long)]
        oracle: bool,
    },
    /// Continue training a checkpoint on a few frames.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Metrics,
    Mppi,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub omega_mask: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, train: &mut TrainConfig, loss: &mut LossConfig) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(self.seed, train.seed);
        set!(self.epochs, train.epochs);
        set!(self.learning_rate, train.learning_rate);
        set!(self.momentum, train.momentum);
        set!(self.batch_size, train.batch_size);
        set!(self.alpha, train.alpha);
        set!(self.horizon, train.horizon);
        if self.max_frames.is_some() {
            train.max_frames = self.max_frames;
        }
        set!(self.tau, loss.tau);
        set!(self.omega_mask, loss.omega_mask);
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TrvError::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TrvError::format("json", e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn cmd_sim_gen(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    create_dir(out)?;
    cfg.echo(out)?;
    if cfg.sim.frames == 0 {
        warn!("generating an empty dataset");
    }
    let ds = generate_dataset(&cfg.sim, out)?;
    info!("wrote {} frames to {}", ds.frames.len(), out.display());
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Checkpoint> {
    let dataset = Dataset::load(manifest)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let result = train(&dataset, &FileEncoder, &cfg.train, &cfg.loss)?;
    let ck = Checkpoint {
        decoder: result.decoder,
        vector: result.vector,
        loss: cfg.loss,
    };
    ck.write(&out.join("checkpoint.trvc"))?;
    write_loss_log(&result.log, &out.join("loss.csv"))?;
    info!(
        "trained on {} frames ({} skipped)",
        dataset.frames.len().min(cfg.train.max_frames.unwrap_or(usize::MAX)) - result.skipped.len(),
        result.skipped.len()
    );
    Ok(ck)
}

pub fn cmd_adapt(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<Checkpoint> {
    let base = Checkpoint::read(checkpoint)?;
    let dataset = Dataset::load(manifest)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let result = adapt(
        &base.decoder,
        &base.vector,
        &dataset,
        &FileEncoder,
        &cfg.adapt,
        &cfg.loss,
    )?;
    let ck = Checkpoint {
        decoder: result.decoder,
        vector: result.vector,
        loss: cfg.loss,
    };
    ck.write(&out.join("checkpoint.trvc"))?;
    write_loss_log(&result.log, &out.join("loss.csv"))?;
    Ok(ck)
}

/// Per-frame outputs of `predict`, relative to the prediction directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub cost: String,
    pub bev: String,
    pub preview: String,
}

pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<Vec<PredictionRecord>> {
    let ck = Checkpoint::read(checkpoint)?;
    if !ck.vector.initialized {
        return Err(TrvError::UninitializedVector);
    }
    let dataset = Dataset::load(manifest)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let mut records = Vec::with_capacity(dataset.frames.len());
    for (k, frame) in dataset.frames.iter().enumerate() {
        let pred = predict_frame(&ck.decoder, &ck.vector, &dataset, frame, &FileEncoder, &cfg.grid)?;
        let rec = PredictionRecord {
            cost: format!("{k:04}.cost.trvf"),
            bev: format!("{k:04}.bev.trvb"),
            preview: format!("{k:04}.cost.png"),
        };
        let c = &pred.cost;
        let map = FeatureMap::new(
            c.height,
            c.width,
            1,
            c.stride,
            c.values.iter().map(|v| *v as f32).collect(),
        )?;
        write_feature_map(&map, &out.join(&rec.cost))?;
        let mut preview = ClassRaster::new(c.width, c.height, 0);
        preview.data = c.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        preview.write_png(&out.join(&rec.preview))?;
        inpaint_nearest(&pred.bev)?.write(&out.join(&rec.bev))?;
        records.push(rec);
    }
    write_json(&records, &out.join("predictions.json"))?;
    Ok(records)
}

fn load_predictions(dir: &Path) -> Result<Vec<PredictionRecord>> {
    let path = dir.join("predictions.json");
    let text = std::fs::read_to_string(&path).map_err(|e| TrvError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| TrvError::format("predictions.json", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsOutput {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub frames: usize,
    pub cells: usize,
}

pub fn eval_metrics(cfg: &RunConfig, predictions: &Path, manifest: &Path) -> Result<MetricsOutput> {
    let dataset = Dataset::load(manifest)?;
    let preds = load_predictions(predictions)?;
    if preds.len() != dataset.frames.len() {
        return Err(TrvError::InvalidInput(format!(
            "{} predictions for {} frames",
            preds.len(),
            dataset.frames.len()
        )));
    }
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (rec, frame) in preds.iter().zip(&dataset.frames) {
        let cost = load_feature_map(&predictions.join(&rec.cost))?;
        if cost.dim != 1 {
            return Err(TrvError::format("dim", "cost image must have one channel"));
        }
        let sim = CellGrid {
            height: cost.height,
            width: cost.width,
            stride: cost.stride,
            values: cost.values.iter().map(|c| 1.0 - 2.0 * *c as f64).collect(),
        };
        let label_path = frame.labels.as_ref().unwrap_or(&frame.image);
        let raster = ClassRaster::read_png(&dataset.resolve(label_path))?;
        let cells = cell_labels(&raster, &cfg.classes, sim.stride, sim.height, sim.width);
        collect_scores(&sim, &cells, &mut scores, &mut labels);
    }
    let metrics = classification_metrics(&scores, &labels)?;
    Ok(MetricsOutput {
        metrics,
        frames: dataset.frames.len(),
        cells: scores.len(),
    })
}

/// Collision frames for `dataset`; predictions come from `predictions` or, if absent, ground truth.
pub fn collision_frames(cfg: &RunConfig, dataset: &Dataset, predictions: Option<&Path>) -> Result<Vec<CollisionFrame>> {
    let preds = predictions.map(load_predictions).transpose()?;
    if let Some(p) = &preds {
        if p.len() != dataset.frames.len() {
            return Err(TrvError::InvalidInput(format!(
                "{} predictions for {} frames",
                p.len(),
                dataset.frames.len()
            )));
        }
    }
    let horizon_s = cfg.mppi.horizon_steps as f64 * cfg.mppi.dt;
    dataset
        .frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            let gt_rel = frame
                .gt_bev
                .as_ref()
                .ok_or_else(|| TrvError::InvalidInput(format!("frame {k} has no ground-truth BEV")))?;
            let gt = cfg
                .classes
                .ground_truth(BevClassGrid::read(&dataset.resolve(gt_rel))?)?;
            let prediction = match (&preds, predictions) {
                (Some(p), Some(dir)) => BevCostmap::read(&dir.join(&p[k].bev))?,
                _ => gt.cost_map(),
            };
            let (start, goal) = frame_goal(dataset, frame, horizon_s, cfg.mppi.initial_speed)?;
            Ok(CollisionFrame {
                prediction,
                gt,
                start,
                goal,
            })
        })
        .collect()
}

pub fn cmd_eval(
    cfg: &RunConfig,
    mode: EvalMode,
    predictions: Option<&Path>,
    manifest: &Path,
    out: &Path,
    oracle: bool,
) -> Result<serde_json::Value> {
    create_dir(out)?;
    cfg.echo(out)?;
    let report = match mode {
        EvalMode::Metrics => {
            let dir = predictions.ok_or_else(|| TrvError::Config("metrics mode needs --predictions".into()))?;
            serde_json::to_value(eval_metrics(cfg, dir, manifest)?)
        }
        EvalMode::Mppi => {
            let dataset = Dataset::load(manifest)?;
            let source = if oracle {
                None
            } else {
                Some(predictions.ok_or_else(|| TrvError::Config("mppi mode needs --predictions or --oracle".into()))?)
            };
            let frames = collision_frames(cfg, &dataset, source)?;
            serde_json::to_value(evaluate_collisions(&frames, &cfg.mppi, cfg.eval_seed)?)
        }
    }
    .map_err(|e| TrvError::format("report", e.to_string()))?;
    write_json(&report, &out.join("report.json"))?;
    Ok(report)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TRV_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| TrvError::Config(format!("TRV_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(TrvError::Config("TRV_THREADS must be at least 1".into()));
        }
        // a second call only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::SimGen {
            out,
            frames,
            seed,
            trail_width,
            shoulder_width,
            prototype_shift,
        } => {
            if let Some(v) = frames {
                cfg.sim.frames = v;
            }
            if let Some(v) = seed {
                cfg.sim.seed = v;
            }
            if let Some(v) = trail_width {
                cfg.sim.world.trail_width = v;
            }
            if let Some(v) = shoulder_width {
                cfg.sim.world.shoulder_width = v;
            }
            if let Some(v) = prototype_shift {
                cfg.sim.prototype_shift = v;
            }
            cmd_sim_gen(&cfg, &out)?;
        }
        Command::Train {
            manifest,
            out,
            overrides,
        } => {
            overrides.apply(&mut cfg.train, &mut cfg.loss);
            cmd_train(&cfg, &manifest, &out)?;
        }
        Command::Adapt {
            checkpoint,
            manifest,
            out,
            overrides,
        } => {
            overrides.apply(&mut cfg.adapt, &mut cfg.loss);
            cmd_adapt(&cfg, &checkpoint, &manifest, &out)?;
        }
        Command::Predict {
            checkpoint,
            manifest,
            out,
        } => {
            cmd_predict(&cfg, &checkpoint, &manifest, &out)?;
        }
        Command::Eval {
            mode,
            predictions,
            manifest,
            out,
            oracle,
        } => {
            let report = cmd_eval(&cfg, mode, predictions.as_deref(), &manifest, &out, oracle)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
        }
    }
    Ok(())
}
