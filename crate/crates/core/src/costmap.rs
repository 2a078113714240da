//! Similarity and cost maps, BEV projection and nearest-value inpainting.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Result, TrvError};
use crate::features::FeatureMap;
use crate::geometry::{pixel_to_bev, BevCell, BevGridConfig, CameraExtrinsics, CameraIntrinsics, DepthMap};
use crate::raster::Bitmap;
use crate::sampling::Cursor;
use crate::trainer::TraversabilityVector;

/// Scalar per feature cell, with the feature map's stride.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub values: Vec<f64>,
}

impl CellGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Value of the cell covering image pixel `(row, col)`.
    pub fn at_pixel(&self, row: usize, col: usize) -> f64 {
        let r = (row / self.stride).min(self.height - 1);
        let c = (col / self.stride).min(self.width - 1);
        self.get(r, c)
    }
}

/// Cosine similarity of each decoded cell to the traversability vector, in `[-1, 1]`.
pub type SimilarityMap = CellGrid;
/// Cost per cell in `[0, 1]`; 0 is most traversable.
pub type CostImage = CellGrid;

pub fn similarity_map(decoded: &FeatureMap, z: &TraversabilityVector) -> Result<SimilarityMap> {
    if !z.initialized {
        return Err(TrvError::UninitializedVector);
    }
    if decoded.dim != z.dim() {
        return Err(TrvError::DimensionMismatch {
            expected: z.dim(),
            actual: decoded.dim,
        });
    }
    let values = (0..decoded.cells())
        .map(|i| {
            let dot: f64 = decoded.cell(i).iter().zip(&z.z).map(|(a, b)| *a as f64 * b).sum();
            dot.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(CellGrid {
        height: decoded.height,
        width: decoded.width,
        stride: decoded.stride,
        values,
    })
}

/// `(1 - sim) / 2`.
pub fn to_cost(sim: &SimilarityMap) -> CostImage {
    CellGrid {
        values: sim.values.iter().map(|s| ((1.0 - s) / 2.0).clamp(0.0, 1.0)).collect(),
        ..sim.clone()
    }
}

/// Bird's-eye cost grid with a known flag per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BevCostmap {
    pub config: BevGridConfig,
    pub costs: Vec<f64>,
    pub known: Vec<bool>,
}

impl BevCostmap {
    pub fn unknown(config: BevGridConfig) -> Self {
        let n = config.rows() * config.cols();
        Self {
            config,
            costs: vec![0.0; n],
            known: vec![false; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.config.rows()
    }

    pub fn cols(&self) -> usize {
        self.config.cols()
    }

    fn idx(&self, cell: BevCell) -> usize {
        cell.row * self.cols() + cell.col
    }

    pub fn get(&self, cell: BevCell) -> Option<f64> {
        let i = self.idx(cell);
        self.known[i].then_some(self.costs[i])
    }

    pub fn set(&mut self, cell: BevCell, cost: f64) {
        let i = self.idx(cell);
        self.costs[i] = cost;
        self.known[i] = true;
    }

    /// Cost at a vehicle-frame point; `None` off the grid or on unknown cells.
    pub fn cost_at(&self, x: f64, y: f64) -> Option<f64> {
        self.config.cell_of(x, y).and_then(|c| self.get(c))
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let known = Bitmap::from_bits(self.cols(), self.rows(), self.known.clone())?;
        let mut b = bev_header(&self.config, KIND_COST);
        for (c, k) in self.costs.iter().zip(&self.known) {
            let v = if *k { *c as f32 } else { 0.0 };
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&known.pack());
        crate::features::write_atomic(path, &b)
    }

    pub fn read(path: &Path) -> Result<Self> {
        match read_bev(path)? {
            BevFile::Costs(c) => Ok(c),
            BevFile::Classes(_) => Err(TrvError::format("kind", "expected a cost grid, found class ids")),
        }
    }
}

/// Per-pixel projection of a cost image through depth, max-aggregated per BEV cell.
///
/// `mount` maps the vehicle frame to the camera. Pixels with invalid depth
/// or landing off the grid are ignored.
pub fn project_costs_to_bev(
    cost: &CostImage,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    mount: &CameraExtrinsics,
    grid: &BevGridConfig,
) -> Result<BevCostmap> {
    grid.validate()?;
    let mut bev = BevCostmap::unknown(*grid);
    for row in 0..depth.height {
        for col in 0..depth.width {
            let Some(d) = depth.valid(row, col) else {
                continue;
            };
            let Some(cell) = pixel_to_bev(col as f64, row as f64, d, intrinsics, mount, grid) else {
                continue;
            };
            let c = cost.at_pixel(row, col);
            match bev.get(cell) {
                Some(prev) if prev >= c => {}
                _ => bev.set(cell, c),
            }
        }
    }
    Ok(bev)
}

/// Fill unknown cells with the value of the Euclidean-nearest known cell.
///
/// Ties go to the smaller row, then the smaller column.
pub fn inpaint_nearest(bev: &BevCostmap) -> Result<BevCostmap> {
    let (rows, cols) = (bev.rows(), bev.cols());
    let known = |r: usize, c: usize| bev.known[r * cols + c];
    // the nearest known cell always has an unknown 4-neighbour
    let mut sources = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !known(r, c) {
                continue;
            }
            let edge = (r > 0 && !known(r - 1, c))
                || (r + 1 < rows && !known(r + 1, c))
                || (c > 0 && !known(r, c - 1))
                || (c + 1 < cols && !known(r, c + 1));
            if edge {
                sources.push((r as i64, c as i64, bev.costs[r * cols + c]));
            }
        }
    }
    if bev.known_count() == 0 {
        return Err(TrvError::EmptyRegion(
            "BEV costmap has no known cells to inpaint from".into(),
        ));
    }
    let costs: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|i| {
            if bev.known[i] {
                return bev.costs[i];
            }
            let (r, c) = ((i / cols) as i64, (i % cols) as i64);
            // sources are in row-major order, so strict `<` keeps the lexicographic tie-break
            let mut best = (i64::MAX, 0.0);
            for &(sr, sc, v) in &sources {
                let d2 = (sr - r).pow(2) + (sc - c).pow(2);
                if d2 < best.0 {
                    best = (d2, v);
                }
            }
            best.1
        })
        .collect();
    Ok(BevCostmap {
        config: bev.config,
        costs,
        known: vec![true; rows * cols],
    })
}

/// Class id per BEV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BevClassGrid {
    pub config: BevGridConfig,
    pub classes: Vec<u8>,
}

impl BevClassGrid {
    pub fn get(&self, cell: BevCell) -> u8 {
        self.classes[cell.row * self.config.cols() + cell.col]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut b = bev_header(&self.config, KIND_CLASS);
        b.extend_from_slice(&self.classes);
        crate::features::write_atomic(path, &b)
    }

    pub fn read(path: &Path) -> Result<Self> {
        match read_bev(path)? {
            BevFile::Classes(c) => Ok(c),
            BevFile::Costs(_) => Err(TrvError::format("kind", "expected class ids, found a cost grid")),
        }
    }
}

// TRVB layout: magic, version u32, kind u32 (0 costs, 1 class ids), rows u32,
// cols u32, resolution, x_extent, y_extent, origin x, origin y as f64, then
// either f32 costs plus the packed known bitmask, or u8 class ids.
const BEV_MAGIC: &[u8; 4] = b"TRVB";
pub const BEV_FILE_VERSION: u32 = 1;
const KIND_COST: u32 = 0;
const KIND_CLASS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BevFile {
    Costs(BevCostmap),
    Classes(BevClassGrid),
}

fn bev_header(cfg: &BevGridConfig, kind: u32) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(BEV_MAGIC);
    for v in [BEV_FILE_VERSION, kind, cfg.rows() as u32, cfg.cols() as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in [cfg.resolution, cfg.x_extent, cfg.y_extent, cfg.origin[0], cfg.origin[1]] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

pub fn decode_bev(bytes: &[u8]) -> Result<BevFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != BEV_MAGIC {
        return Err(TrvError::format("magic", "expected TRVB"));
    }
    let version = cur.u32("version")?;
    if version != BEV_FILE_VERSION {
        return Err(TrvError::format("version", format!("unsupported version {version}")));
    }
    let kind = cur.u32("kind")?;
    let rows = cur.u32("rows")? as usize;
    let cols = cur.u32("cols")? as usize;
    let config = BevGridConfig {
        resolution: cur.f64("resolution")?,
        x_extent: cur.f64("x_extent")?,
        y_extent: cur.f64("y_extent")?,
        origin: [cur.f64("origin")?, cur.f64("origin")?],
    };
    config.validate().map_err(|e| TrvError::format("grid", e.to_string()))?;
    if config.rows() != rows || config.cols() != cols {
        return Err(TrvError::format(
            "rows",
            format!(
                "header says {rows}x{cols}, grid config implies {}x{}",
                config.rows(),
                config.cols()
            ),
        ));
    }
    let n = rows * cols;
    let out = match kind {
        KIND_COST => {
            let costs = (0..n)
                .map(|_| cur.f32("costs").map(|v| v as f64))
                .collect::<Result<Vec<_>>>()?;
            let known = Bitmap::unpack(cols, rows, cur.take(n.div_ceil(8), "known")?)?;
            BevFile::Costs(BevCostmap {
                config,
                costs,
                known: known.bits().to_vec(),
            })
        }
        KIND_CLASS => BevFile::Classes(BevClassGrid {
            config,
            classes: cur.take(n, "classes")?.to_vec(),
        }),
        k => return Err(TrvError::format("kind", format!("unknown payload kind {k}"))),
    };
    if cur.pos != bytes.len() {
        return Err(TrvError::format("trailer", "unexpected trailing bytes"));
    }
    Ok(out)
}

pub fn read_bev(path: &Path) -> Result<BevFile> {
    let bytes = std::fs::read(path).map_err(|e| TrvError::io(path, e))?;
    decode_bev(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> BevGridConfig {
        BevGridConfig {
            resolution: 1.0,
            x_extent: 6.0,
            y_extent: 5.0,
            origin: [0.0, 0.0],
        }
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn vector(z: &[f64]) -> TraversabilityVector {
        TraversabilityVector {
            z: z.to_vec(),
            alpha: 0.9,
            initialized: true,
        }
    }

    #[test]
    fn similarity_extremes_and_costs() {
        let z = [0.6, 0.8];
        let f = FeatureMap::new(1, 3, 2, 1, vec![0.6, 0.8, -0.6, -0.8, 0.8, -0.6]).unwrap();
        let sim = similarity_map(&f, &vector(&z)).unwrap();
        assert!((sim.values[0] - 1.0).abs() < 1e-7);
        assert!((sim.values[1] + 1.0).abs() < 1e-7);
        assert!(sim.values[2].abs() < 1e-7);
        let cost = to_cost(&sim);
        assert!(cost.values[0].abs() < 1e-7 && (cost.values[1] - 1.0).abs() < 1e-7);
        assert!((cost.values[2] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn uninitialized_vector_is_rejected() {
        let f = FeatureMap::new(1, 1, 2, 1, vec![1.0, 0.0]).unwrap();
        let z = TraversabilityVector::new(2, 0.9);
        assert!(matches!(similarity_map(&f, &z), Err(TrvError::UninitializedVector)));
    }

    proptest! {
        #[test]
        fn similarity_and_cost_bounded(seed in any::<u64>(), d in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || unit(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let z = draw();
            let values: Vec<f32> = (0..12).flat_map(|_| draw()).map(|v| v as f32).collect();
            let f = FeatureMap::new(3, 4, d, 1, values).unwrap();
            let sim = similarity_map(&f, &vector(&z)).unwrap();
            let cost = to_cost(&sim);
            prop_assert!(sim.values.iter().all(|s| (-1.0..=1.0).contains(s)));
            prop_assert!(cost.values.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    fn down_camera() -> (CameraIntrinsics, CameraExtrinsics) {
        let k = CameraIntrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
        };
        // camera 5 m above (3, 2.5) looking straight down; image x -> vehicle -y, image y -> vehicle -x
        let r = nalgebra::Matrix3::new(0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0);
        let center = nalgebra::Vector3::new(3.0, 2.5, 5.0);
        (k, CameraExtrinsics::from_parts(r, -(r * center)))
    }

    #[test]
    fn constant_cost_projects_to_constant_cells() {
        let (k, mount) = down_camera();
        let depth = DepthMap::new(32, 32, vec![5.0; 1024]).unwrap();
        let cost = CellGrid {
            height: 8,
            width: 8,
            stride: 4,
            values: vec![0.3; 64],
        };
        let bev = project_costs_to_bev(&cost, &depth, &k, &mount, &small_grid()).unwrap();
        assert!(bev.known_count() > 0);
        for (c, k) in bev.costs.iter().zip(&bev.known) {
            if *k {
                assert_eq!(*c, 0.3);
            }
        }
    }

    #[test]
    fn projection_matches_brute_force_max() {
        let (k, mount) = down_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let depth_vals: Vec<f32> = (0..1024)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        0.0
                    } else {
                        rng.random_range(3.0..7.0)
                    }
                })
                .collect();
            let depth = DepthMap::new(32, 32, depth_vals).unwrap();
            let cost = CellGrid {
                height: 8,
                width: 8,
                stride: 4,
                values: (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
            };
            let grid = small_grid();
            let bev = project_costs_to_bev(&cost, &depth, &k, &mount, &grid).unwrap();
            // oracle: explicit back-projection and a per-cell list of contributions
            let rinv = mount.rotation_matrix().transpose();
            let t = mount.translation_vector();
            let mut lists = vec![Vec::new(); grid.rows() * grid.cols()];
            for row in 0..32 {
                for col in 0..32 {
                    let d = depth.get(row, col) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let pc = nalgebra::Vector3::new((col as f64 - 16.0) / 20.0 * d, (row as f64 - 16.0) / 20.0 * d, d);
                    let pv = rinv * (pc - t);
                    let (fr, fc) = (pv.x.floor(), pv.y.floor());
                    if (0.0..6.0).contains(&fr) && (0.0..5.0).contains(&fc) {
                        lists[fr as usize * 5 + fc as usize].push(cost.values[(row / 4) * 8 + col / 4]);
                    }
                }
            }
            for (i, l) in lists.iter().enumerate() {
                if l.is_empty() {
                    assert!(!bev.known[i]);
                } else {
                    assert!(bev.known[i]);
                    assert_eq!(bev.costs[i], l.iter().cloned().fold(f64::MIN, f64::max));
                }
            }
        }
    }

    #[test]
    fn two_pixels_same_cell_take_max() {
        let (k, mount) = down_camera();
        let mut vals = vec![0.0f32; 1024];
        vals[16 * 32 + 16] = 5.0;
        vals[16 * 32 + 17] = 5.0;
        let depth = DepthMap::new(32, 32, vals).unwrap();
        let cost = CellGrid {
            height: 1,
            width: 32,
            stride: 1,
            values: (0..32).map(|c| if c == 16 { 0.2 } else { 0.9 }).collect(),
        };
        let bev = project_costs_to_bev(&cost, &depth, &k, &mount, &small_grid()).unwrap();
        assert_eq!(bev.known_count(), 1);
        assert_eq!(bev.costs[bev.known.iter().position(|k| *k).unwrap()], 0.9);
    }

    #[test]
    fn inpaint_single_known_cell_fills_grid() {
        let mut bev = BevCostmap::unknown(small_grid());
        bev.set(BevCell { row: 2, col: 3 }, 0.3);
        let out = inpaint_nearest(&bev).unwrap();
        assert!(out.costs.iter().all(|c| *c == 0.3) && out.known.iter().all(|k| *k));
    }

    #[test]
    fn inpaint_rejects_empty() {
        assert!(inpaint_nearest(&BevCostmap::unknown(small_grid())).is_err());
    }

    fn brute_inpaint(bev: &BevCostmap) -> Vec<f64> {
        let cols = bev.cols();
        (0..bev.costs.len())
            .map(|i| {
                if bev.known[i] {
                    return bev.costs[i];
                }
                let (r, c) = ((i / cols) as i64, (i % cols) as i64);
                let mut best: Option<(i64, usize, usize)> = None;
                for j in 0..bev.costs.len() {
                    if !bev.known[j] {
                        continue;
                    }
                    let (jr, jc) = (j / cols, j % cols);
                    let d2 = (jr as i64 - r).pow(2) + (jc as i64 - c).pow(2);
                    if best.is_none_or(|b| (d2, jr, jc) < b) {
                        best = Some((d2, jr, jc));
                    }
                }
                let (_, jr, jc) = best.unwrap();
                bev.costs[jr * cols + jc]
            })
            .collect()
    }

    #[test]
    fn inpaint_voronoi_split_of_opposite_corners() {
        let mut bev = BevCostmap::unknown(small_grid());
        bev.set(BevCell { row: 0, col: 0 }, 0.1);
        bev.set(BevCell { row: 5, col: 4 }, 0.9);
        let out = inpaint_nearest(&bev).unwrap();
        assert_eq!(out.costs, brute_inpaint(&bev));
        // equidistant cell (row 3, col 1): d2 = 10 to both, goes to the smaller row (0, 0)
        assert_eq!(out.costs[3 * 5 + 1], 0.1);
    }

    proptest! {
        #[test]
        fn inpaint_matches_brute_force_and_is_idempotent(seed in any::<u64>(), p in 0.02f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = BevGridConfig { resolution: 1.0, x_extent: 13.0, y_extent: 11.0, origin: [0.0, 0.0] };
            let mut bev = BevCostmap::unknown(grid);
            for r in 0..13 {
                for c in 0..11 {
                    if rng.random_bool(p) {
                        // few distinct values so ties actually matter
                        bev.set(BevCell { row: r, col: c }, rng.random_range(0..4) as f64 / 4.0);
                    }
                }
            }
            bev.set(BevCell { row: rng.random_range(0..13), col: rng.random_range(0..11) }, 1.0);
            let out = inpaint_nearest(&bev).unwrap();
            prop_assert_eq!(&out.costs, &brute_inpaint(&bev));
            for i in 0..bev.costs.len() {
                if bev.known[i] {
                    prop_assert_eq!(out.costs[i], bev.costs[i]);
                }
            }
            prop_assert_eq!(inpaint_nearest(&out).unwrap(), out);
        }
    }

    #[test]
    fn bev_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bev = BevCostmap::unknown(small_grid());
        bev.set(BevCell { row: 1, col: 4 }, 0.25);
        bev.set(BevCell { row: 5, col: 0 }, 1.0);
        let p = dir.path().join("c.trvb");
        bev.write(&p).unwrap();
        assert_eq!(BevCostmap::read(&p).unwrap(), bev);
        assert!(BevClassGrid::read(&p).is_err());

        let classes = BevClassGrid {
            config: small_grid(),
            classes: (0..30).map(|i| (i % 7) as u8).collect(),
        };
        let q = dir.path().join("g.trvb");
        classes.write(&q).unwrap();
        assert_eq!(BevClassGrid::read(&q).unwrap(), classes);

        let mut bytes = std::fs::read(&q).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(decode_bev(&bytes).is_err());
    }
}
