//! Deterministic synthetic off-road world: flat ground with a meandering
//! trail, extruded obstacles, a ray-cast camera, an expert driver and
//! SAM-like mask proposals. Writes complete datasets in the on-disk formats.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmap::BevClassGrid;
use crate::error::{Result, TrvError};
use crate::eval::{ClassInfo, ClassTable};
use crate::features::{
    class_prototypes, shift_prototypes, synth_encode, write_feature_map, Calibration, Dataset, FrameRecord,
    SynthEncoderConfig,
};
use crate::geometry::{
    filter_occluded, project_track, rasterize_footprint, BevGridConfig, CameraExtrinsics, CameraIntrinsics, DepthMap,
    WheelTrack,
};
use crate::raster::{Bitmap, ClassRaster};
use crate::rng::{derive_seed, rng_from};
use crate::sampling::{write_masks, EgoMask, MaskProposal, Pixel};

pub const TRAIL: u8 = 0;
pub const GRASS: u8 = 1;
pub const BUSH: u8 = 2;
pub const ROCK: u8 = 3;
pub const TREE: u8 = 4;
pub const BARRIER: u8 = 5;
pub const SKY: u8 = 6;
pub const EGO: u8 = 7;
/// Traversable verge beside the trail; looks different but belongs to the same segment.
pub const SHOULDER: u8 = 8;
pub const NUM_CLASSES: usize = 9;

/// Labels and manual costs of the synthetic classes. Trail and shoulder count as traversable.
pub fn default_class_table() -> ClassTable {
    let c = |name: &str, traversable: Option<bool>, cost: f64, lethal: bool| ClassInfo {
        name: name.into(),
        traversable,
        cost,
        lethal,
    };
    ClassTable {
        classes: vec![
            c("trail", Some(true), 0.0, false),
            c("grass", Some(false), 0.5, false),
            c("bush", Some(false), 0.8, false),
            c("rock", Some(false), 1.0, true),
            c("tree", Some(false), 1.0, true),
            c("barrier", Some(false), 1.0, true),
            c("sky", None, 1.0, false),
            c("ego", None, 0.0, false),
            c("shoulder", Some(true), 0.2, false),
        ],
    }
}

/// Obstacles per square meter of off-trail ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleDensities {
    pub bush: f64,
    pub rock: f64,
    pub tree: f64,
    pub barrier: f64,
}

impl Default for ObstacleDensities {
    fn default() -> Self {
        Self {
            bush: 0.012,
            rock: 0.008,
            tree: 0.006,
            barrier: 0.0008,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub length_m: f64,
    pub width_m: f64,
    pub resolution: f64,
    pub trail: bool,
    pub trail_width: f64,
    /// Shoulder band on each side of the trail.
    pub shoulder_width: f64,
    pub trail_amplitude: f64,
    pub trail_wavelength: f64,
    pub densities: ObstacleDensities,
    /// Clearance kept between obstacles and the trail edge.
    pub obstacle_margin: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            length_m: 300.0,
            width_m: 80.0,
            resolution: 0.25,
            trail: true,
            trail_width: 3.2,
            shoulder_width: 0.0,
            trail_amplitude: 4.0,
            trail_wavelength: 80.0,
            densities: ObstacleDensities::default(),
            obstacle_margin: 0.75,
        }
    }
}

/// Class and obstacle height per ground cell. Cell `(ix, iy)` covers
/// `x in [ix r, (ix+1) r)`, `y in [-width/2 + iy r, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub nx: usize,
    pub ny: usize,
    pub classes: Vec<u8>,
    pub heights: Vec<f32>,
    /// Trail centerline phases.
    phases: [f64; 2],
}

fn class_height(class: u8, rng: &mut impl Rng) -> f32 {
    match class {
        BUSH => rng.random_range(0.6..1.2),
        ROCK => rng.random_range(0.4..0.9),
        TREE => rng.random_range(3.0..6.0),
        BARRIER => 1.0,
        _ => 0.0,
    }
}

impl World {
    /// Trail centerline `y` at `x`.
    pub fn centerline(&self, x: f64) -> f64 {
        let c = &self.config;
        let k = 2.0 * PI / c.trail_wavelength;
        c.trail_amplitude * ((k * x + self.phases[0]).sin() + 0.3 * (2.7 * k * x + self.phases[1]).sin()) / 1.3
    }

    /// Trail heading at `x`.
    pub fn centerline_heading(&self, x: f64) -> f64 {
        let h = 1e-3;
        ((self.centerline(x + h) - self.centerline(x - h)) / (2.0 * h)).atan()
    }

    pub fn cell_index(&self, x: f64, y: f64) -> Option<usize> {
        let r = self.config.resolution;
        let fx = (x / r).floor();
        let fy = ((y + self.config.width_m / 2.0) / r).floor();
        if fx < 0.0 || fy < 0.0 || fx as usize >= self.nx || fy as usize >= self.ny {
            return None;
        }
        Some(fy as usize * self.nx + fx as usize)
    }

    /// Class at a world point; off-world ground is grass.
    pub fn class_at(&self, x: f64, y: f64) -> u8 {
        self.cell_index(x, y).map_or(GRASS, |i| self.classes[i])
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.cell_index(x, y).map_or(0.0, |i| self.heights[i] as f64)
    }

    fn cell_center(&self, i: usize) -> (f64, f64) {
        let r = self.config.resolution;
        let (ix, iy) = (i % self.nx, i / self.nx);
        ((ix as f64 + 0.5) * r, (iy as f64 + 0.5) * r - self.config.width_m / 2.0)
    }

    /// FNV-1a over classes and heights.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (c, z) in self.classes.iter().zip(&self.heights) {
            feed(*c);
            z.to_le_bytes().into_iter().for_each(&mut feed);
        }
        h
    }
}

/// Seeded procedural world: trail band, then obstacles placed clear of it.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    let c = config;
    if !(c.resolution > 0.0 && c.length_m > 0.0 && c.width_m > 0.0 && c.trail_width >= 0.0 && c.shoulder_width >= 0.0) {
        return Err(TrvError::Config(format!("invalid world config {c:?}")));
    }
    let nx = (c.length_m / c.resolution).round() as usize;
    let ny = (c.width_m / c.resolution).round() as usize;
    let mut rng = rng_from(seed, &[0x3071D]);
    let phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let mut world = World {
        config: c.clone(),
        nx,
        ny,
        classes: vec![GRASS; nx * ny],
        heights: vec![0.0; nx * ny],
        phases,
    };
    if c.trail {
        for i in 0..nx * ny {
            let (x, y) = world.cell_center(i);
            let d = (y - world.centerline(x)).abs();
            if d <= c.trail_width / 2.0 {
                world.classes[i] = TRAIL;
            } else if d <= c.trail_width / 2.0 + c.shoulder_width {
                world.classes[i] = SHOULDER;
            }
        }
    }
    let area = c.length_m * c.width_m;
    let d = &c.densities;
    let clear = |w: &World, x: f64, y: f64, radius: f64| -> bool {
        !c.trail || (y - w.centerline(x)).abs() > c.trail_width / 2.0 + c.shoulder_width + c.obstacle_margin + radius
    };
    for (class, density) in [(BUSH, d.bush), (ROCK, d.rock), (TREE, d.tree)] {
        let count = (density * area).round() as usize;
        for _ in 0..count {
            let x = rng.random_range(0.0..c.length_m);
            let y = rng.random_range(-c.width_m / 2.0..c.width_m / 2.0);
            let radius = match class {
                BUSH => rng.random_range(0.5..1.2),
                ROCK => rng.random_range(0.3..0.8),
                _ => rng.random_range(0.3..0.6),
            };
            let h = class_height(class, &mut rng);
            if !clear(&world, x, y, radius) {
                continue;
            }
            stamp_disc(&mut world, x, y, radius, class, h);
        }
    }
    let count = (d.barrier * area).round() as usize;
    for _ in 0..count {
        let (x, y) = (
            rng.random_range(0.0..c.length_m),
            rng.random_range(-c.width_m / 2.0..c.width_m / 2.0),
        );
        let len = rng.random_range(3.0..8.0);
        let theta = rng.random_range(0.0..PI);
        let (dx, dy) = (theta.cos(), theta.sin());
        let steps = (len / (c.resolution / 2.0)).ceil() as usize;
        let pts: Vec<(f64, f64)> = (0..=steps)
            .map(|k| {
                let s = k as f64 / steps as f64 * len - len / 2.0;
                (x + s * dx, y + s * dy)
            })
            .collect();
        if pts.iter().all(|&(px, py)| clear(&world, px, py, 0.2)) {
            for (px, py) in pts {
                stamp_disc(&mut world, px, py, 0.2, BARRIER, 1.0);
            }
        }
    }
    Ok(world)
}

fn stamp_disc(world: &mut World, x: f64, y: f64, radius: f64, class: u8, height: f32) {
    let r = world.config.resolution;
    let steps = (radius / r).ceil() as i64 + 1;
    let Some(center) = world.cell_index(x, y) else {
        return;
    };
    let (cx, cy) = ((center % world.nx) as i64, (center / world.nx) as i64);
    for dy in -steps..=steps {
        for dx in -steps..=steps {
            let (ix, iy) = (cx + dx, cy + dy);
            if ix < 0 || iy < 0 || ix as usize >= world.nx || iy as usize >= world.ny {
                continue;
            }
            let i = iy as usize * world.nx + ix as usize;
            let (px, py) = world.cell_center(i);
            if (px - x).powi(2) + (py - y).powi(2) <= radius * radius
                && world.classes[i] != TRAIL
                && world.classes[i] != SHOULDER
            {
                world.classes[i] = class;
                world.heights[i] = world.heights[i].max(height);
            }
        }
    }
}

/// Forward camera rig: intrinsics plus the vehicle-to-camera mount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Camera position in the vehicle frame.
    pub position: [f64; 3],
    pub pitch_deg: f64,
    pub max_range: f64,
    /// Rows from the bottom covered by the vehicle hood (0 disables it).
    pub hood_rows: usize,
    pub hood_depth: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            focal: 160.0,
            position: [0.5, 0.0, 1.5],
            pitch_deg: 30.0,
            max_range: 60.0,
            hood_rows: 20,
            hood_depth: 1.0,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn mount(&self) -> CameraExtrinsics {
        CameraExtrinsics::forward_camera_mount(self.position, self.pitch_deg.to_radians())
    }

    /// Bottom trapezoid occupied by the hood.
    pub fn ego_mask(&self) -> EgoMask {
        let (w, h) = (self.width, self.height);
        let top = h.saturating_sub(self.hood_rows);
        let half = w as f64 * 0.35;
        let cx = (w as f64 - 1.0) / 2.0;
        EgoMask {
            bitmap: Bitmap::from_fn(w, h, |r, c| {
                r >= top && (c as f64 - cx).abs() <= half + 1.5 * (r - top) as f64
            }),
        }
    }

    pub fn calibration(&self, pose: Pose) -> Calibration {
        let mount = self.mount();
        Calibration {
            intrinsics: self.intrinsics(),
            extrinsics: mount.compose(&pose.world_to_vehicle()),
            mount,
        }
    }
}

/// Planar vehicle pose in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn world_to_vehicle(&self) -> CameraExtrinsics {
        CameraExtrinsics::world_to_vehicle(self.x, self.y, self.yaw)
    }
}

/// Nearest hit along a ray: `(class, t)`, or `None` for sky.
///
/// The ray is `o + t d`; obstacles are vertical prisms over their cells.
pub fn cast_ray(world: &World, o: Vector3<f64>, d: Vector3<f64>, max_t: f64) -> Option<(u8, f64)> {
    let t_ground = if d.z < 0.0 { -o.z / d.z } else { f64::INFINITY };
    let t_end = t_ground.min(max_t);
    let r = world.config.resolution;
    let y0 = -world.config.width_m / 2.0;
    // cell coordinates of the ray origin
    let gx = o.x / r;
    let gy = (o.y - y0) / r;
    let (mut ix, mut iy) = (gx.floor() as i64, gy.floor() as i64);
    let step_x: i64 = if d.x > 0.0 { 1 } else { -1 };
    let step_y: i64 = if d.y > 0.0 { 1 } else { -1 };
    let inv = |v: f64| if v != 0.0 { r / v.abs() } else { f64::INFINITY };
    let (dtx, dty) = (inv(d.x), inv(d.y));
    let frac = |g: f64, pos: bool| if pos { g.floor() + 1.0 - g } else { g - g.floor() };
    let mut tmx = if d.x != 0.0 {
        frac(gx, d.x > 0.0) * dtx
    } else {
        f64::INFINITY
    };
    let mut tmy = if d.y != 0.0 {
        frac(gy, d.y > 0.0) * dty
    } else {
        f64::INFINITY
    };
    let mut t0 = 0.0;
    let (nx, ny) = (world.nx as i64, world.ny as i64);
    while t0 < t_end {
        let t1 = tmx.min(tmy).min(t_end);
        if ix >= 0 && iy >= 0 && ix < nx && iy < ny {
            let i = (iy * nx + ix) as usize;
            let h = world.heights[i] as f64;
            if h > 0.0 {
                let z0 = o.z + d.z * t0;
                if z0 <= h && t0 > 0.0 {
                    return Some((world.classes[i], t0));
                }
                if d.z < 0.0 {
                    let t_top = (h - o.z) / d.z;
                    if t_top >= t0 && t_top <= t1 {
                        return Some((world.classes[i], t_top));
                    }
                }
            }
        }
        if t1 >= t_end {
            break;
        }
        if tmx < tmy {
            ix += step_x;
            t0 = tmx;
            tmx += dtx;
        } else {
            iy += step_y;
            t0 = tmy;
            tmy += dty;
        }
    }
    if t_ground <= max_t {
        let p = o + d * t_ground;
        return Some((world.class_at(p.x, p.y), t_ground));
    }
    None
}

/// Semantic image and depth (along the optical axis) seen from `pose`.
pub fn render(world: &World, pose: Pose, camera: &CameraConfig) -> (ClassRaster, DepthMap) {
    let k = camera.intrinsics();
    let ext = camera.mount().compose(&pose.world_to_vehicle());
    let rt = ext.rotation_matrix().transpose();
    let origin = -(rt * ext.translation_vector());
    let ego = camera.ego_mask();
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(u8, f32)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (row, col) = (i / w, i % w);
            if ego.bitmap.get(row, col) {
                return (EGO, camera.hood_depth as f32);
            }
            let dc = Vector3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
            match cast_ray(world, origin, rt * dc, camera.max_range) {
                Some((class, t)) => (class, t as f32),
                None => (SKY, 0.0),
            }
        })
        .collect();
    let mut raster = ClassRaster::new(w, h, SKY);
    raster.data = pixels.iter().map(|p| p.0).collect();
    let depth = DepthMap {
        width: w,
        height: h,
        values: pixels.iter().map(|p| p.1).collect(),
    };
    (raster, depth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub speed: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub track_width: f64,
    pub lookahead: f64,
    pub candidates: usize,
    /// Largest heading change per step (rad).
    pub max_turn: f64,
    pub heading_noise: f64,
    /// Lookahead penalty per meter of offset from the trail centerline.
    pub center_weight: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            speed: 2.0,
            dt: 0.1,
            max_steps: 20_000,
            track_width: 1.6,
            lookahead: 8.0,
            candidates: 21,
            max_turn: 0.08,
            heading_noise: 0.01,
            center_weight: 0.5,
        }
    }
}

fn wheel_points(x: f64, y: f64, heading: f64, half_track: f64) -> [(f64, f64); 3] {
    let (s, c) = heading.sin_cos();
    [
        (x - s * half_track, y + c * half_track),
        (x, y),
        (x + s * half_track, y - c * half_track),
    ]
}

/// Greedy expert: each step turns toward the heading whose straight lookahead
/// along both wheel lines has the lowest manual cost, never placing a wheel
/// on a non-traversable cell. Stops near the world edge or after `max_steps`.
pub fn drive_expert(
    world: &World,
    start: Pose,
    table: &ClassTable,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<WheelTrack> {
    let half = cfg.track_width / 2.0;
    let safe = |x: f64, y: f64, h: f64| {
        wheel_points(x, y, h, half)
            .iter()
            .all(|&(px, py)| world.cell_index(px, py).is_some() && table.label(world.class_at(px, py)) == Some(true))
    };
    if !safe(start.x, start.y, start.yaw) {
        return Err(TrvError::InvalidInput(
            "expert start is not on traversable ground".into(),
        ));
    }
    let cost_of = |c: u8| table.classes.get(c as usize).map_or(1.0, |i| i.cost);
    let mut rng = rng_from(seed, &[0xD21E]);
    let noise = Normal::new(0.0, cfg.heading_noise.max(0.0)).map_err(|e| TrvError::Config(e.to_string()))?;
    let (mut x, mut y, mut h) = (start.x, start.y, start.yaw);
    let (mut ts, mut left, mut right) = (Vec::new(), Vec::new(), Vec::new());
    let n_look = (cfg.lookahead / world.config.resolution).ceil().max(1.0) as usize;
    let margin = cfg.lookahead.max(2.0);
    for step in 0..cfg.max_steps {
        let [l, _, r] = wheel_points(x, y, h, half);
        ts.push(step as f64 * cfg.dt);
        left.push([l.0, l.1, 0.0]);
        right.push([r.0, r.1, 0.0]);
        if x + margin >= world.config.length_m || x < 0.0 || y.abs() + margin >= world.config.width_m / 2.0 {
            break;
        }
        let n = cfg.candidates.max(1);
        let mut scored: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let delta = if n == 1 {
                    0.0
                } else {
                    -cfg.max_turn + 2.0 * cfg.max_turn * k as f64 / (n - 1) as f64
                };
                let hh = h + delta;
                let (s, c) = hh.sin_cos();
                let mut cost = 0.0;
                for j in 1..=n_look {
                    let dist = j as f64 * world.config.resolution;
                    // nearer cells weigh more, so turning early beats turning late
                    let weight = (n_look + 1 - j) as f64 / n_look as f64;
                    let (lx, ly) = (x + c * dist, y + s * dist);
                    for (px, py) in wheel_points(lx, ly, hh, half) {
                        cost += weight * cost_of(world.class_at(px, py));
                    }
                    if world.config.trail {
                        cost += weight * cfg.center_weight * (ly - world.centerline(lx)).abs();
                    }
                }
                (cost + 0.1 * delta.abs(), delta)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.abs().total_cmp(&b.1.abs())));
        let jitter = noise.sample(&mut rng);
        let step_len = cfg.speed * cfg.dt;
        let mut moved = false;
        for (i, &(_, delta)) in scored.iter().enumerate() {
            let tries: &[f64] = if i == 0 { &[jitter, 0.0] } else { &[0.0] };
            for &j in tries {
                let hh = h + delta + j;
                let (nx, ny) = (x + step_len * hh.cos(), y + step_len * hh.sin());
                if safe(nx, ny, hh) {
                    (x, y, h) = (nx, ny, hh);
                    moved = true;
                    break;
                }
            }
            if moved {
                break;
            }
        }
        if !moved {
            return Err(TrvError::InvalidInput(format!("expert trapped at ({x:.2}, {y:.2})")));
        }
    }
    WheelTrack::new(ts, left, right, 300)
}

/// Vehicle pose at track index `i`, recovered from the wheel pair.
pub fn track_pose(track: &WheelTrack, i: usize) -> Pose {
    let (l, r) = (track.left[i], track.right[i]);
    Pose {
        x: (l[0] + r[0]) / 2.0,
        y: (l[1] + r[1]) / 2.0,
        yaw: (-(l[0] - r[0])).atan2(l[1] - r[1]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSimConfig {
    /// Largest boundary dilation or erosion in pixels.
    pub jitter: usize,
    /// Chance per frame of an extra, wrong proposal.
    pub drop_rate: f64,
    /// Query points drawn from the footprint.
    pub queries: usize,
}

impl Default for MaskSimConfig {
    fn default() -> Self {
        Self {
            jitter: 2,
            drop_rate: 0.05,
            queries: 8,
        }
    }
}

/// 4-connected component of `seed`'s class.
pub fn connected_component(semantic: &ClassRaster, seed: Pixel) -> Bitmap {
    let (w, h) = (semantic.width, semantic.height);
    let class = semantic.get(seed.0, seed.1);
    let mut out = Bitmap::new(w, h);
    let mut queue = VecDeque::from([seed]);
    out.set(seed.0, seed.1, true);
    while let Some((r, c)) = queue.pop_front() {
        let mut visit = |rr: usize, cc: usize| {
            if !out.get(rr, cc) && semantic.get(rr, cc) == class {
                out.set(rr, cc, true);
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    out
}

/// Square-window dilation (`k > 0`) or erosion (`k < 0`).
fn morph(b: &Bitmap, k: i64) -> Bitmap {
    if k == 0 {
        return b.clone();
    }
    let (w, h) = (b.width() as i64, b.height() as i64);
    let rad = k.abs();
    let dilate = k > 0;
    Bitmap::from_fn(b.width(), b.height(), |r, c| {
        let (r, c) = (r as i64, c as i64);
        let mut any = false;
        let mut all = true;
        for rr in (r - rad).max(0)..=(r + rad).min(h - 1) {
            for cc in (c - rad).max(0)..=(c + rad).min(w - 1) {
                let v = b.get(rr as usize, cc as usize);
                any |= v;
                all &= v;
            }
        }
        if dilate {
            any
        } else {
            all
        }
    })
}

fn iou(a: &Bitmap, b: &Bitmap) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Simulated promptable segmentation: one proposal per distinct component
/// hit by the query points, with boundary jitter and confidence = IoU with
/// the clean component. With probability `drop_rate` a wrong proposal from
/// another class is added with high confidence.
pub fn propose_masks(
    semantic: &ClassRaster,
    queries: &[Pixel],
    cfg: &MaskSimConfig,
    seed: u64,
) -> Result<Vec<MaskProposal>> {
    let (w, h) = (semantic.width, semantic.height);
    if let Some(q) = queries.iter().find(|q| q.0 >= h || q.1 >= w) {
        return Err(TrvError::InvalidInput(format!("query {q:?} outside {w}x{h} image")));
    }
    let mut rng = rng_from(seed, &[0x3A5C]);
    let mut covered = Bitmap::new(w, h);
    let mut out = Vec::new();
    let jitter = cfg.jitter as i64;
    let mut queried_classes = Vec::new();
    for &q in queries {
        if covered.get(q.0, q.1) {
            continue;
        }
        let clean = connected_component(semantic, q);
        for (r, c) in clean.pixels() {
            covered.set(r, c, true);
        }
        queried_classes.push(semantic.get(q.0, q.1));
        let k = rng.random_range(-jitter..=jitter);
        let mut noisy = morph(&clean, k);
        if noisy.is_empty() {
            noisy = clean.clone();
        }
        let conf = iou(&noisy, &clean) as f32;
        out.push(MaskProposal::new(noisy, conf));
    }
    if cfg.drop_rate > 0.0 && rng.random_bool(cfg.drop_rate.min(1.0)) {
        for _ in 0..64 {
            let p = (rng.random_range(0..h), rng.random_range(0..w));
            let class = semantic.get(p.0, p.1);
            if class == SKY || class == EGO || queried_classes.contains(&class) {
                continue;
            }
            let wrong = connected_component(semantic, p);
            out.push(MaskProposal::new(wrong, rng.random_range(0.95..1.0)));
            break;
        }
    }
    Ok(out)
}

/// Ground-truth classes of the BEV grid around `pose`.
pub fn ground_truth_bev(world: &World, pose: Pose, grid: &BevGridConfig) -> BevClassGrid {
    let w2v = pose.world_to_vehicle();
    let (rows, cols) = (grid.rows(), grid.cols());
    let classes = (0..rows * cols)
        .map(|i| {
            let (x, y) = grid.cell_center(crate::geometry::BevCell {
                row: i / cols,
                col: i % cols,
            });
            let p = w2v.apply_inverse(&Vector3::new(x, y, 0.0));
            world.class_at(p.x, p.y)
        })
        .collect();
    BevClassGrid { config: *grid, classes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub frames: usize,
    pub seed: u64,
    /// Track poses between consecutive frames.
    pub frame_spacing: usize,
    /// Track poses skipped before the first frame.
    pub start_offset: usize,
    pub horizon: usize,
    pub occlusion_tol: f64,
    pub world: WorldConfig,
    pub camera: CameraConfig,
    pub expert: ExpertConfig,
    pub masks: MaskSimConfig,
    pub encoder: SynthEncoderConfig,
    pub feature_dim: usize,
    pub prototype_angle_deg: f64,
    /// Prototypes depend only on this seed, so separately generated worlds share them.
    pub prototype_seed: u64,
    /// Magnitude of a seeded perturbation of the prototypes (domain shift).
    pub prototype_shift: f64,
    pub grid: BevGridConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            seed: 7,
            frame_spacing: 12,
            start_offset: 0,
            horizon: 300,
            occlusion_tol: 0.1,
            world: WorldConfig::default(),
            camera: CameraConfig::default(),
            expert: ExpertConfig::default(),
            masks: MaskSimConfig::default(),
            encoder: SynthEncoderConfig::default(),
            feature_dim: 32,
            prototype_angle_deg: 60.0,
            prototype_seed: 1,
            prototype_shift: 0.0,
            grid: BevGridConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn prototypes(&self) -> Result<Vec<Vec<f32>>> {
        let base = class_prototypes(
            NUM_CLASSES,
            self.feature_dim,
            self.prototype_angle_deg,
            self.prototype_seed,
        )?;
        Ok(if self.prototype_shift > 0.0 {
            shift_prototypes(&base, self.prototype_shift, derive_seed(self.prototype_seed, &[0x5817]))
        } else {
            base
        })
    }

    pub fn start_pose(&self, world: &World) -> Pose {
        let x = 5.0;
        Pose {
            x,
            y: if self.world.trail { world.centerline(x) } else { 0.0 },
            yaw: if self.world.trail {
                world.centerline_heading(x)
            } else {
                0.0
            },
        }
    }
}

/// Everything generated for one frame, before it is written out.
#[derive(Debug, Clone)]
pub struct FramePacket {
    pub pose: Pose,
    pub timestamp: f64,
    pub semantic: ClassRaster,
    pub depth: DepthMap,
    pub calibration: Calibration,
    pub masks: Vec<MaskProposal>,
    pub gt_bev: BevClassGrid,
}

/// The generated world, expert track and frame index list.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub world: World,
    pub track: WheelTrack,
    pub frame_indices: Vec<usize>,
}

pub fn build_scenario(cfg: &SimConfig) -> Result<Scenario> {
    let world = generate_world(&cfg.world, cfg.seed)?;
    let table = default_class_table();
    let mut track = drive_expert(
        &world,
        cfg.start_pose(&world),
        &table,
        &cfg.expert,
        derive_seed(cfg.seed, &[1]),
    )?;
    track.horizon = cfg.horizon;
    let spacing = cfg.frame_spacing.max(1);
    let frame_indices: Vec<usize> = (0..cfg.frames).map(|k| cfg.start_offset + k * spacing).collect();
    if let Some(&last) = frame_indices.last() {
        if last >= track.len() {
            return Err(TrvError::Config(format!(
                "{} frames at spacing {spacing} need {} track poses, the expert drove {}",
                cfg.frames,
                last + 1,
                track.len()
            )));
        }
    }
    Ok(Scenario {
        world,
        track,
        frame_indices,
    })
}

pub fn make_frame(cfg: &SimConfig, scenario: &Scenario, k: usize) -> Result<FramePacket> {
    let i = scenario.frame_indices[k];
    let track = &scenario.track;
    let pose = track_pose(track, i);
    let timestamp = track.timestamps[i];
    let (semantic, depth) = render(&scenario.world, pose, &cfg.camera);
    let calibration = cfg.camera.calibration(pose);
    let window = track.window(timestamp, cfg.horizon)?;
    let points = project_track(&window, &calibration.intrinsics, &calibration.extrinsics)?;
    let footprint = rasterize_footprint(
        &filter_occluded(&points, &depth, cfg.occlusion_tol),
        cfg.camera.width,
        cfg.camera.height,
    );
    let ego = cfg.camera.ego_mask();
    let candidates: Vec<Pixel> = footprint
        .bitmap
        .pixels()
        .filter(|&(r, c)| !ego.bitmap.get(r, c))
        .collect();
    let seed = derive_seed(cfg.seed, &[2, k as u64]);
    let mut rng = rng_from(seed, &[0x0E71]);
    let queries: Vec<Pixel> = if candidates.is_empty() {
        Vec::new()
    } else {
        (0..cfg.masks.queries)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };
    let mut segments = semantic.clone();
    segments
        .data
        .iter_mut()
        .filter(|c| **c == SHOULDER)
        .for_each(|c| *c = TRAIL);
    let masks = propose_masks(&segments, &queries, &cfg.masks, seed)?;
    let gt_bev = ground_truth_bev(&scenario.world, pose, &cfg.grid);
    Ok(FramePacket {
        pose,
        timestamp,
        semantic,
        depth,
        calibration,
        masks,
        gt_bev,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TrvError::format("json", e.to_string()))?;
    crate::features::write_atomic(path, text.as_bytes())
}

/// Generate `cfg.frames` frames and write them under `out_dir` with a `manifest.json`.
pub fn generate_dataset(cfg: &SimConfig, out_dir: &Path) -> Result<Dataset> {
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| TrvError::io(&frames_dir, e))?;
    let scenario = build_scenario(cfg)?;
    let prototypes = cfg.prototypes()?;
    scenario.track.write_csv(&out_dir.join("poses.csv"))?;
    let mut ego = ClassRaster::new(cfg.camera.width, cfg.camera.height, 0);
    for (r, c) in cfg.camera.ego_mask().bitmap.pixels() {
        ego.set(r, c, 1);
    }
    ego.write_png(&out_dir.join("ego.png"))?;
    write_json(&default_class_table(), &out_dir.join("classes.json"))?;
    let records: Vec<Result<FrameRecord>> = (0..cfg.frames)
        .into_par_iter()
        .map(|k| {
            let p = make_frame(cfg, &scenario, k)?;
            let name = |ext: &str| format!("frames/{k:04}.{ext}");
            p.semantic.write_png(&out_dir.join(name("png")))?;
            p.depth.write(&out_dir.join(name("trvd")))?;
            write_masks(&out_dir.join(name("trvm")), &p.masks)?;
            let features = synth_encode(
                &p.semantic,
                &prototypes,
                &cfg.encoder,
                derive_seed(cfg.seed, &[3, k as u64]),
            )?;
            write_feature_map(&features, &out_dir.join(name("trvf")))?;
            write_json(&p.calibration, &out_dir.join(name("json")))?;
            p.gt_bev.write(&out_dir.join(name("trvb")))?;
            Ok(FrameRecord {
                image: name("png"),
                depth: name("trvd"),
                features: name("trvf"),
                masks: name("trvm"),
                poses: "poses.csv".into(),
                calibration: name("json"),
                timestamp: p.timestamp,
                labels: Some(name("png")),
                gt_bev: Some(name("trvb")),
                ego_mask: Some("ego.png".into()),
            })
        })
        .collect();
    let frames = records.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.json");
    Dataset::write_manifest(&frames, &manifest)?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        frames,
    })
}
