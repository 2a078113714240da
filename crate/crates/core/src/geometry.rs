//! Camera models, wheel-trajectory projection, depth-based occlusion
//! filtering, footprint rasterization and pixel to BEV transforms.
//!
//! Conventions:
//! - camera frame: x right, y down, z forward (optical axis);
//! - vehicle frame: x forward, y left, z up;
//! - pixel `(row, col)` has its center at image coordinates `(u = col, v = row)`,
//!   so a projected point lands on pixel `(round(v), round(u))`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrvError};
use crate::raster::Bitmap;

const ORTHO_TOL: f64 = 1e-9;
const FILL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(TrvError::InvalidInput(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(TrvError::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point. Caller guarantees `p.z > 0`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at depth `depth` (along the optical axis) behind pixel `(u, v)`.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Pixel `(row, col)` that `(u, v)` rounds to, if inside the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (c, r) = (u.round(), v.round());
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

/// Rigid transform `x_dst = rotation * x_src + translation`.
///
/// Used both as world-to-camera extrinsics and as the vehicle-to-camera mount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraExtrinsics {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut rot = [[0.0; 3]; 3];
        for (r, row) in rot.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rotation[(r, c)];
            }
        }
        Self {
            rotation: rot,
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(TrvError::InvalidInput("non-finite extrinsics".into()));
        }
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(TrvError::InvalidInput(format!(
                "rotation is not orthonormal (max deviation {err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(TrvError::InvalidInput(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (p - self.translation_vector())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self::from_parts(rt, -(rt * self.translation_vector()))
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &CameraExtrinsics) -> Self {
        let r = self.rotation_matrix();
        Self::from_parts(
            r * inner.rotation_matrix(),
            r * inner.translation_vector() + self.translation_vector(),
        )
    }

    /// World-to-vehicle transform for a planar vehicle pose.
    pub fn world_to_vehicle(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        // vehicle axes expressed in world coordinates are the rows
        let r = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        Self::from_parts(r, -(r * Vector3::new(x, y, 0.0)))
    }

    /// Vehicle-to-camera mount for a forward-looking camera at `position`
    /// (vehicle frame), pitched down by `pitch` radians.
    pub fn forward_camera_mount(position: [f64; 3], pitch: f64) -> Self {
        let (sp, cp) = pitch.sin_cos();
        let x_c = Vector3::new(0.0, -1.0, 0.0);
        let z_c = Vector3::new(cp, 0.0, -sp);
        let y_c = z_c.cross(&x_c);
        let r = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), z_c.transpose()]);
        Self::from_parts(r, -(r * Vector3::from(position)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Timestamped left/right wheel ground-contact poses in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WheelTrack {
    pub timestamps: Vec<f64>,
    pub left: Vec<[f64; 3]>,
    pub right: Vec<[f64; 3]>,
    /// Number of poses used for projection.
    pub horizon: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    time_s: f64,
    lx: f64,
    ly: f64,
    lz: f64,
    rx: f64,
    ry: f64,
    rz: f64,
}

impl WheelTrack {
    pub fn new(timestamps: Vec<f64>, left: Vec<[f64; 3]>, right: Vec<[f64; 3]>, horizon: usize) -> Result<Self> {
        let t = Self {
            timestamps,
            left,
            right,
            horizon,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.left.len() != self.right.len() || self.left.len() != self.timestamps.len() {
            return Err(TrvError::InvalidInput(format!(
                "wheel track lengths differ: {} timestamps, {} left, {} right",
                self.timestamps.len(),
                self.left.len(),
                self.right.len()
            )));
        }
        if self.left.is_empty() {
            return Err(TrvError::InvalidInput("wheel track is empty".into()));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrvError::InvalidInput(
                "wheel track timestamps must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    /// The `horizon` poses starting at the first timestamp `>= t`.
    pub fn window(&self, t: f64, horizon: usize) -> Result<WheelTrack> {
        let start = self.timestamps.partition_point(|&ts| ts < t);
        let end = (start + horizon).min(self.len());
        if start >= end {
            return Err(TrvError::InvalidInput(format!("no poses at or after t={t}")));
        }
        WheelTrack::new(
            self.timestamps[start..end].to_vec(),
            self.left[start..end].to_vec(),
            self.right[start..end].to_vec(),
            horizon,
        )
    }

    pub fn read_csv(path: &Path, horizon: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| TrvError::io(path, e))?;
        let mut reader = csv::Reader::from_reader(BufReader::new(file));
        let (mut ts, mut left, mut right) = (Vec::new(), Vec::new(), Vec::new());
        for row in reader.deserialize::<PoseRow>() {
            let row = row.map_err(|e| TrvError::format("poses csv", e.to_string()))?;
            ts.push(row.time_s);
            left.push([row.lx, row.ly, row.lz]);
            right.push([row.rx, row.ry, row.rz]);
        }
        WheelTrack::new(ts, left, right, horizon)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| TrvError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        for i in 0..self.len() {
            let (l, r) = (self.left[i], self.right[i]);
            writer
                .serialize(PoseRow {
                    time_s: self.timestamps[i],
                    lx: l[0],
                    ly: l[1],
                    lz: l[2],
                    rx: r[0],
                    ry: r[1],
                    rz: r[2],
                })
                .map_err(|e| TrvError::format("poses csv", e.to_string()))?;
        }
        writer.flush().map_err(|e| TrvError::io(path, e))
    }
}

/// Stereo depth along the camera z axis, meters. Non-positive or
/// non-finite values mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"TRVD";

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(TrvError::DimensionMismatch {
                expected: width * height,
                actual: values.len(),
            });
        }
        Ok(Self { width, height, values })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Valid depth at a pixel, or `None`.
    #[inline]
    pub fn valid(&self, row: usize, col: usize) -> Option<f64> {
        let d = self.get(row, col);
        (d.is_finite() && d > 0.0).then_some(d as f64)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.values.len());
        buf.extend_from_slice(DEPTH_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        crate::features::write_atomic(path, &buf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| TrvError::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
            return Err(TrvError::format("magic", "expected TRVD"));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != 4 * w * h {
            return Err(TrvError::format(
                "depth payload",
                format!("expected {} bytes, got {}", 4 * w * h, body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DepthMap::new(w, h, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    /// Depth along the camera axis.
    pub z: f64,
    pub side: Side,
    /// Pose index within the track.
    pub index: usize,
}

/// Project the first `track.horizon` left/right wheel poses into the image.
///
/// Points behind the camera or outside the image are dropped. Output order is
/// pose order, left before right.
pub fn project_track(
    track: &WheelTrack,
    intrinsics: &CameraIntrinsics,
    extrinsics: &CameraExtrinsics,
) -> Result<Vec<ProjectedPoint>> {
    track.validate()?;
    intrinsics.validate()?;
    extrinsics.validate()?;
    let n = track.len().min(track.horizon);
    let mut out = Vec::with_capacity(2 * n);
    for index in 0..n {
        for (side, pose) in [(Side::Left, track.left[index]), (Side::Right, track.right[index])] {
            let pc = extrinsics.apply(&Vector3::from(pose));
            if pc.z <= 0.0 {
                continue;
            }
            let (u, v) = intrinsics.project(&pc);
            if intrinsics.pixel_of(u, v).is_some() {
                out.push(ProjectedPoint {
                    u,
                    v,
                    z: pc.z,
                    side,
                    index,
                });
            }
        }
    }
    Ok(out)
}

/// Keep points whose depth does not exceed the measured depth plus `tol`.
///
/// Points on invalid depth pixels are kept.
pub fn filter_occluded(points: &[ProjectedPoint], depth: &DepthMap, tol: f64) -> Vec<ProjectedPoint> {
    points
        .iter()
        .filter(|p| {
            let (r, c) = (p.v.round(), p.u.round());
            if r < 0.0 || c < 0.0 || r as usize >= depth.height || c as usize >= depth.width {
                return true;
            }
            match depth.valid(r as usize, c as usize) {
                Some(d) => p.z <= d + tol,
                None => true,
            }
        })
        .copied()
        .collect()
}

/// Filled driven region in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintMask {
    pub bitmap: Bitmap,
    pub area: usize,
    /// Set when the input could not form a polygon with positive area.
    pub degenerate: bool,
}

impl FootprintMask {
    pub fn empty(width: usize, height: usize, degenerate: bool) -> Self {
        Self {
            bitmap: Bitmap::new(width, height),
            area: 0,
            degenerate,
        }
    }

    pub fn from_bitmap(bitmap: Bitmap) -> Self {
        let area = bitmap.count();
        Self {
            bitmap,
            area,
            degenerate: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }
}

/// Closed footprint polygon: left polyline in pose order, then the right
/// polyline in reverse. Returns `None` when either side has fewer than two points.
pub fn footprint_polygon(points: &[ProjectedPoint]) -> Option<Vec<(f64, f64)>> {
    let mut left: Vec<&ProjectedPoint> = points.iter().filter(|p| p.side == Side::Left).collect();
    let mut right: Vec<&ProjectedPoint> = points.iter().filter(|p| p.side == Side::Right).collect();
    if left.len() < 2 || right.len() < 2 {
        return None;
    }
    left.sort_by_key(|p| p.index);
    right.sort_by_key(|p| p.index);
    Some(left.iter().chain(right.iter().rev()).map(|p| (p.u, p.v)).collect())
}

fn is_collinear(poly: &[(f64, f64)]) -> bool {
    let a = poly[0];
    let b = poly
        .iter()
        .copied()
        .max_by(|p, q| {
            let dp = (p.0 - a.0).hypot(p.1 - a.1);
            let dq = (q.0 - a.0).hypot(q.1 - a.1);
            dp.total_cmp(&dq)
        })
        .unwrap();
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    if len < FILL_EPS {
        return true;
    }
    poly.iter().all(|p| {
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        (cross / len).abs() < FILL_EPS
    })
}

/// Scanline fill of a closed polygon, evaluated at pixel centers.
///
/// Interior is decided by the even-odd rule; pixel centers lying on an edge
/// are included.
pub fn fill_polygon(poly: &[(f64, f64)], width: usize, height: usize) -> Bitmap {
    let mut bm = Bitmap::new(width, height);
    if poly.len() < 2 || width == 0 || height == 0 {
        return bm;
    }
    let vmin = poly.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let vmax = poly.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let r0 = (vmin - FILL_EPS).ceil().max(0.0) as usize;
    let r1 = (vmax + FILL_EPS).floor().min(height as f64 - 1.0);
    if r1 < 0.0 {
        return bm;
    }
    let r1 = r1 as usize;
    let set_span = |bm: &mut Bitmap, row: usize, a: f64, b: f64| {
        let c0 = (a - FILL_EPS).ceil().max(0.0);
        let c1 = (b + FILL_EPS).floor().min(width as f64 - 1.0);
        if c1 >= c0 {
            for c in c0 as usize..=c1 as usize {
                bm.set(row, c, true);
            }
        }
    };
    let n = poly.len();
    let mut xs = Vec::new();
    for row in r0..=r1 {
        let y = row as f64;
        xs.clear();
        for i in 0..n {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            if (p.1 - q.1).abs() < FILL_EPS {
                if (y - p.1).abs() < FILL_EPS {
                    set_span(&mut bm, row, p.0.min(q.0), p.0.max(q.0));
                }
                continue;
            }
            let x = p.0 + (y - p.1) * (q.0 - p.0) / (q.1 - p.1);
            if (p.1 <= y && y < q.1) || (q.1 <= y && y < p.1) {
                xs.push(x);
            }
            let (lo, hi) = (p.1.min(q.1), p.1.max(q.1));
            if y >= lo - FILL_EPS && y <= hi + FILL_EPS && (x - x.round()).abs() < FILL_EPS {
                set_span(&mut bm, row, x, x);
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            set_span(&mut bm, row, pair[0], pair[1]);
        }
    }
    bm
}

/// Fill the region enclosed by the projected left and right wheel polylines.
///
/// Fewer than two points on either side, or a zero-area (collinear) polygon,
/// yield an empty mask with `degenerate` set.
pub fn rasterize_footprint(points: &[ProjectedPoint], width: usize, height: usize) -> FootprintMask {
    let Some(poly) = footprint_polygon(points) else {
        return FootprintMask::empty(width, height, true);
    };
    if is_collinear(&poly) {
        return FootprintMask::empty(width, height, true);
    }
    FootprintMask::from_bitmap(fill_polygon(&poly, width, height))
}

/// Metric BEV grid in the vehicle frame. Rows index forward distance `x`,
/// columns index lateral offset `y`; `origin` is the `(x, y)` of the grid's
/// minimum corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridConfig {
    pub resolution: f64,
    pub x_extent: f64,
    pub y_extent: f64,
    pub origin: [f64; 2],
}

impl Default for BevGridConfig {
    fn default() -> Self {
        Self {
            resolution: 0.25,
            x_extent: 40.0,
            y_extent: 40.0,
            origin: [0.0, -20.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BevCell {
    pub row: usize,
    pub col: usize,
}

impl BevGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.x_extent > 0.0 && self.y_extent > 0.0) {
            return Err(TrvError::Config(format!(
                "BEV grid needs positive resolution and extents, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        (self.x_extent / self.resolution - 1e-9).ceil() as usize
    }

    pub fn cols(&self) -> usize {
        (self.y_extent / self.resolution - 1e-9).ceil() as usize
    }

    /// Cell containing vehicle-frame point `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<BevCell> {
        let fr = ((x - self.origin[0]) / self.resolution).floor();
        let fc = ((y - self.origin[1]) / self.resolution).floor();
        if !(fr >= 0.0 && fc >= 0.0) || x >= self.origin[0] + self.x_extent || y >= self.origin[1] + self.y_extent {
            return None;
        }
        let (row, col) = (fr as usize, fc as usize);
        (row < self.rows() && col < self.cols()).then_some(BevCell { row, col })
    }

    pub fn cell_center(&self, cell: BevCell) -> (f64, f64) {
        (
            self.origin[0] + (cell.row as f64 + 0.5) * self.resolution,
            self.origin[1] + (cell.col as f64 + 0.5) * self.resolution,
        )
    }
}

/// Back-project a pixel with known depth and bin it into the BEV grid.
///
/// `mount` is the vehicle-to-camera transform. Returns `None` for
/// non-positive depth or points outside the grid.
pub fn pixel_to_bev(
    u: f64,
    v: f64,
    depth: f64,
    intrinsics: &CameraIntrinsics,
    mount: &CameraExtrinsics,
    grid: &BevGridConfig,
) -> Option<BevCell> {
    if !(depth > 0.0) || !depth.is_finite() {
        return None;
    }
    let pc = intrinsics.back_project(u, v, depth);
    let pv = mount.apply_inverse(&pc);
    grid.cell_of(pv.x, pv.y)
}
