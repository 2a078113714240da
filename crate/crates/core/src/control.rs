//! MPPI planning over BEV costmaps and collision counting against ground truth.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmap::{inpaint_nearest, BevClassGrid, BevCostmap};
use crate::error::{Result, TrvError};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub steer: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    pub rollouts: usize,
    /// Noise std-dev for steer (rad) and accel (m/s^2).
    pub noise_sigma: [f64; 2],
    pub lambda: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub wheelbase: f64,
    pub goal_weight: f64,
    pub cost_weight: f64,
    /// Cells at or above this cost add `lethal_penalty` per visited state.
    pub lethal_threshold: f64,
    pub lethal_penalty: f64,
    /// Cost of states off the grid.
    pub off_grid_cost: f64,
    /// Sampling iterations per plan, each re-centred on the previous average.
    pub iterations: usize,
    /// Plans whose total cost exceeds this count as failed runs.
    pub success_cost_cap: f64,
    pub initial_speed: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 50,
            dt: 0.1,
            rollouts: 512,
            noise_sigma: [0.15, 0.5],
            lambda: 1.0,
            max_steer: 0.6,
            max_accel: 2.0,
            wheelbase: 2.5,
            goal_weight: 1.0,
            cost_weight: 1.0,
            lethal_threshold: 0.99,
            lethal_penalty: 1000.0,
            off_grid_cost: 1.0,
            iterations: 4,
            success_cost_cap: 1.0e6,
            initial_speed: 2.0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rollouts >= 1
            && self.horizon_steps >= 1
            && self.iterations >= 1
            && self.dt > 0.0
            && self.lambda > 0.0
            && self.wheelbase > 0.0
            && self.max_steer >= 0.0
            && self.max_accel >= 0.0
            && self.noise_sigma.iter().all(|s| *s >= 0.0 && s.is_finite());
        if !ok {
            return Err(TrvError::Config(format!("invalid MPPI config {self:?}")));
        }
        Ok(())
    }

    pub fn clamp(&self, c: Control) -> Control {
        Control {
            steer: c.steer.clamp(-self.max_steer, self.max_steer),
            accel: c.accel.clamp(-self.max_accel, self.max_accel),
        }
    }
}

/// Kinematic bicycle rollout. Returns `controls.len() + 1` states, starting with `state`.
pub fn rollout(state: VehicleState, controls: &[Control], cfg: &MppiConfig) -> Result<Vec<VehicleState>> {
    if controls.len() != cfg.horizon_steps {
        return Err(TrvError::InvalidInput(format!(
            "expected {} controls, got {}",
            cfg.horizon_steps,
            controls.len()
        )));
    }
    Ok(integrate(state, controls, cfg))
}

fn integrate(state: VehicleState, controls: &[Control], cfg: &MppiConfig) -> Vec<VehicleState> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    let mut s = state;
    out.push(s);
    for c in controls {
        let c = cfg.clamp(*c);
        let v = s.speed;
        s = VehicleState {
            x: s.x + v * s.heading.cos() * cfg.dt,
            y: s.y + v * s.heading.sin() * cfg.dt,
            heading: s.heading + v * c.steer.tan() / cfg.wheelbase * cfg.dt,
            speed: (v + c.accel * cfg.dt).max(0.0),
        };
        out.push(s);
    }
    out
}

/// `S = cost_weight * sum_t c(x_t) + lethal penalties + goal_weight * H * |x_T - goal|`.
pub fn trajectory_cost(traj: &[VehicleState], costmap: &BevCostmap, goal: (f64, f64), cfg: &MppiConfig) -> f64 {
    let mut map_cost = 0.0;
    let mut penalty = 0.0;
    for s in &traj[1..] {
        let c = costmap.cost_at(s.x, s.y).unwrap_or(cfg.off_grid_cost);
        map_cost += c;
        if c >= cfg.lethal_threshold {
            penalty += cfg.lethal_penalty;
        }
    }
    let last = traj[traj.len() - 1];
    let dist = ((last.x - goal.0).powi(2) + (last.y - goal.1).powi(2)).sqrt();
    cfg.cost_weight * map_cost + penalty + cfg.goal_weight * cfg.horizon_steps as f64 * dist
}

/// Normalized path-integral weights `exp(-(S_k - min S) / lambda)`.
pub fn mppi_weights(costs: &[f64], lambda: f64) -> Vec<f64> {
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|s| (-(s - min) / lambda).exp()).collect();
    let eta: f64 = raw.iter().sum();
    raw.iter().map(|w| w / eta).collect()
}

/// Clamped noisy copy of `nominal` for rollout `k` of `iteration`.
pub fn perturb(nominal: &[Control], cfg: &MppiConfig, seed: u64, iteration: usize, k: usize) -> Vec<Control> {
    let mut rng = rng_from(seed, &[0x3399, iteration as u64, k as u64]);
    let steer = Normal::new(0.0, cfg.noise_sigma[0]).unwrap();
    let accel = Normal::new(0.0, cfg.noise_sigma[1]).unwrap();
    nominal
        .iter()
        .map(|c| {
            cfg.clamp(Control {
                steer: c.steer + steer.sample(&mut rng),
                accel: c.accel + accel.sample(&mut rng),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiPlan {
    pub controls: Vec<Control>,
    pub trajectory: Vec<VehicleState>,
    pub cost: f64,
    /// Sum of the normalized weights in each iteration.
    pub weight_sums: Vec<f64>,
}

/// Plan controls from `state` toward `goal` over a fully known costmap.
///
/// `warm_start` seeds the nominal sequence (zeros otherwise).
pub fn mppi_plan(
    costmap: &BevCostmap,
    state: VehicleState,
    goal: (f64, f64),
    cfg: &MppiConfig,
    seed: u64,
    warm_start: Option<&[Control]>,
) -> Result<MppiPlan> {
    cfg.validate()?;
    let h = cfg.horizon_steps;
    let mut nominal: Vec<Control> = match warm_start {
        Some(w) if w.len() == h => w.iter().map(|c| cfg.clamp(*c)).collect(),
        Some(w) => {
            return Err(TrvError::InvalidInput(format!(
                "warm start has {} controls, expected {h}",
                w.len()
            )));
        }
        None => vec![Control::default(); h],
    };
    let mut weight_sums = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let samples: Vec<(Vec<Control>, f64)> = (0..cfg.rollouts)
            .into_par_iter()
            .map(|k| {
                let u = perturb(&nominal, cfg, seed, it, k);
                let s = trajectory_cost(&integrate(state, &u, cfg), costmap, goal, cfg);
                (u, s)
            })
            .collect();
        let costs: Vec<f64> = samples.iter().map(|(_, s)| *s).collect();
        if costs.iter().any(|s| !s.is_finite()) {
            return Err(TrvError::Numeric("non-finite rollout cost".into()));
        }
        let w = mppi_weights(&costs, cfg.lambda);
        weight_sums.push(w.iter().sum());
        let mut next = vec![Control::default(); h];
        for ((u, _), wk) in samples.iter().zip(&w) {
            for (n, c) in next.iter_mut().zip(u) {
                n.steer += wk * c.steer;
                n.accel += wk * c.accel;
            }
        }
        nominal = next;
    }
    let trajectory = integrate(state, &nominal, cfg);
    let cost = trajectory_cost(&trajectory, costmap, goal, cfg);
    Ok(MppiPlan {
        controls: nominal,
        trajectory,
        cost,
        weight_sums,
    })
}

/// BEV class grid with a manual cost and lethal flag per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBev {
    pub grid: BevClassGrid,
    pub class_costs: Vec<f64>,
    pub lethal: Vec<bool>,
}

impl GroundTruthBev {
    pub fn new(grid: BevClassGrid, class_costs: Vec<f64>, lethal: Vec<bool>) -> Result<Self> {
        if class_costs.len() != lethal.len() {
            return Err(TrvError::InvalidInput("cost and lethal tables differ in length".into()));
        }
        if let Some(c) = grid.classes.iter().find(|c| **c as usize >= class_costs.len()) {
            return Err(TrvError::InvalidInput(format!("class {c} missing from the cost table")));
        }
        Ok(Self {
            grid,
            class_costs,
            lethal,
        })
    }

    /// Fully known costmap of manual class costs.
    pub fn cost_map(&self) -> BevCostmap {
        BevCostmap {
            config: self.grid.config,
            costs: self
                .grid
                .classes
                .iter()
                .map(|c| self.class_costs[*c as usize])
                .collect(),
            known: vec![true; self.grid.classes.len()],
        }
    }

    pub fn is_lethal_at(&self, x: f64, y: f64) -> bool {
        self.grid
            .config
            .cell_of(x, y)
            .is_some_and(|c| self.lethal[self.grid.get(c) as usize])
    }
}

/// One evaluation frame: predicted costs, ground truth, start and goal in the vehicle frame.
#[derive(Debug, Clone)]
pub struct CollisionFrame {
    pub prediction: BevCostmap,
    pub gt: GroundTruthBev,
    pub start: VehicleState,
    pub goal: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub frame: usize,
    pub success: bool,
    pub collision: bool,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub frames: usize,
    pub successful_runs: usize,
    pub collisions: usize,
    pub rate: f64,
    pub per_frame: Vec<FrameOutcome>,
}

/// Plan on each inpainted prediction and count plans that touch lethal ground truth.
pub fn evaluate_collisions(frames: &[CollisionFrame], cfg: &MppiConfig, seed: u64) -> Result<CollisionReport> {
    cfg.validate()?;
    let mut per_frame = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let map = inpaint_nearest(&f.prediction)?;
        let plan = mppi_plan(&map, f.start, f.goal, cfg, derive_seed(seed, &[i as u64]), None)?;
        let in_grid = plan.trajectory.iter().all(|s| map.config.cell_of(s.x, s.y).is_some());
        let success = in_grid && plan.cost <= cfg.success_cost_cap;
        let collision = success && plan.trajectory.iter().any(|s| f.gt.is_lethal_at(s.x, s.y));
        per_frame.push(FrameOutcome {
            frame: i,
            success,
            collision,
            cost: plan.cost,
        });
    }
    collision_report(per_frame)
}

pub fn collision_report(per_frame: Vec<FrameOutcome>) -> Result<CollisionReport> {
    let successful_runs = per_frame.iter().filter(|f| f.success).count();
    let collisions = per_frame.iter().filter(|f| f.success && f.collision).count();
    if successful_runs == 0 {
        return Err(TrvError::InvalidInput("no successful MPPI runs".into()));
    }
    Ok(CollisionReport {
        frames: per_frame.len(),
        successful_runs,
        collisions,
        rate: collisions as f64 / successful_runs as f64,
        per_frame,
    })
}
