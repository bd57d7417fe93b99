//! Occupancy grids, confidence fields, surface extraction and Chamfer distance.
//!
//! Grids are stored z-fastest: the flat index of cell `(x, y, z)` is
//! `(x * Y + y) * Z + z`. Cell `(i, j, k)` is centered on the integer voxel
//! coordinate `(i, j, k)`; world positions come from the grid's [`VoxelFrame`].

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::frames::VoxelFrame;

pub type Dims = [usize; 3];

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("grid has no cell at or above threshold {0}")]
    EmptySurface(f64),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("bad magic: expected VXG1")]
    BadMagic,
    #[error("dimension mismatch: expected {expected} values, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("file truncated: header declares {expected} values, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("value {value} at cell {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("grid dimensions must be positive, got {0:?}")]
    ZeroDims(Dims),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense occupancy grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    values: Vec<f32>,
    frame: VoxelFrame,
}

impl VoxelGrid {
    /// All-zero grid.
    pub fn new(dims: Dims, frame: VoxelFrame) -> Self {
        Self::filled(dims, 0.0, frame)
    }

    pub fn filled(dims: Dims, value: f32, frame: VoxelFrame) -> Self {
        assert!((0.0..=1.0).contains(&value), "occupancy {value} outside [0, 1]");
        assert!(dims.iter().all(|&d| d > 0), "grid dims must be positive");
        Self {
            dims,
            values: vec![value; dims[0] * dims[1] * dims[2]],
            frame,
        }
    }

    pub fn from_values(dims: Dims, values: Vec<f32>, frame: VoxelFrame) -> Result<Self, VoxelError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VoxelError::ZeroDims(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(VoxelError::DimMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(VoxelError::ValueOutOfRange { index, value });
        }
        Ok(Self { dims, values, frame })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame(&self) -> &VoxelFrame {
        &self.frame
    }

    pub fn set_frame(&mut self, frame: VoxelFrame) {
        self.frame = frame;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn index(&self, cell: [usize; 3]) -> usize {
        index_of(self.dims, cell)
    }

    #[inline]
    pub fn cell(&self, index: usize) -> [usize; 3] {
        cell_of(self.dims, index)
    }

    #[inline]
    pub fn get(&self, cell: [usize; 3]) -> f32 {
        self.values[self.index(cell)]
    }

    #[inline]
    pub fn get_index(&self, index: usize) -> f32 {
        self.values[index]
    }

    /// Value at a signed cell coordinate, `None` outside the grid.
    pub fn get_signed(&self, cell: [i64; 3]) -> Option<f32> {
        self.checked_cell(cell).map(|c| self.get(c))
    }

    pub fn checked_cell(&self, cell: [i64; 3]) -> Option<[usize; 3]> {
        checked_cell(self.dims, cell)
    }

    /// Sets a cell, clamping into `[0, 1]`.
    pub fn set(&mut self, cell: [usize; 3], value: f32) {
        let i = self.index(cell);
        self.values[i] = value.clamp(0.0, 1.0);
    }

    pub fn set_index(&mut self, index: usize, value: f32) {
        self.values[index] = value.clamp(0.0, 1.0);
    }

    pub fn contains_cell(&self, cell: [usize; 3]) -> bool {
        cell.iter().zip(self.dims).all(|(&c, d)| c < d)
    }

    /// World-frame center of a cell.
    pub fn cell_center_world(&self, cell: [usize; 3]) -> Point3<f64> {
        self.frame.voxel_to_world(&Point3::new(
            cell[0] as f64,
            cell[1] as f64,
            cell[2] as f64,
        ))
    }

    /// Cells with value `>= threshold`, as flat indices.
    pub fn occupied_indices(&self, threshold: f32) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= threshold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Inclusive cell bounding box of cells with value `>= threshold`.
    pub fn occupied_bounds(&self, threshold: f32) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.values.iter().enumerate() {
            if v >= threshold {
                any = true;
                let c = self.cell(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Max-pools the grid by an integer factor per axis (partial blocks at
    /// the upper edges are pooled over what exists).
    pub fn max_pool(&self, factor: usize) -> VoxelGrid {
        let factor = factor.max(1);
        let dims = self.dims.map(|d| d.div_ceil(factor));
        let mut out = vec![0f32; dims[0] * dims[1] * dims[2]];
        for (i, &v) in self.values.iter().enumerate() {
            let c = self.cell(i);
            let o = index_of(dims, c.map(|x| x / factor));
            if v > out[o] {
                out[o] = v;
            }
        }
        let mut frame = self.frame;
        frame.pixels_per_voxel *= factor as u32;
        frame.origin_voxel = Point3::from((frame.origin_voxel.coords - Vector3::repeat((factor as f64 - 1.0) / 2.0)) / factor as f64);
        VoxelGrid {
            dims,
            values: out,
            frame,
        }
    }
}

#[inline]
pub fn index_of(dims: Dims, cell: [usize; 3]) -> usize {
    (cell[0] * dims[1] + cell[1]) * dims[2] + cell[2]
}

#[inline]
pub fn cell_of(dims: Dims, index: usize) -> [usize; 3] {
    let z = index % dims[2];
    let rest = index / dims[2];
    [rest / dims[1], rest % dims[1], z]
}

#[inline]
pub fn checked_cell(dims: Dims, cell: [i64; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        if cell[a] < 0 || cell[a] as usize >= dims[a] {
            return None;
        }
        out[a] = cell[a] as usize;
    }
    Some(out)
}

/// Cell containing a continuous voxel coordinate (cell-center convention).
#[inline]
pub fn containing_cell(p: &Point3<f64>) -> [i64; 3] {
    [
        (p.x + 0.5).floor() as i64,
        (p.y + 0.5).floor() as i64,
        (p.z + 0.5).floor() as i64,
    ]
}

pub const NEIGHBORS_6: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// Per-cell confidence `c = |v - 0.5|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceGrid {
    pub dims: Dims,
    pub values: Vec<f64>,
}

pub fn confidence(grid: &VoxelGrid) -> ConfidenceGrid {
    ConfidenceGrid {
        dims: grid.dims,
        values: grid
            .values
            .iter()
            .map(|&v| (f64::from(v) - 0.5).abs())
            .collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// World-frame centers of the shell cells: value `>= threshold` with at least
/// one 6-neighbor below it. Neighbors outside the grid count as below.
pub fn extract_surface(grid: &VoxelGrid, threshold: f64) -> Result<PointCloud, VoxelError> {
    let cells = surface_cells(grid, threshold);
    if cells.is_empty() {
        return Err(VoxelError::EmptySurface(threshold));
    }
    Ok(PointCloud::new(
        cells
            .into_iter()
            .map(|i| grid.cell_center_world(grid.cell(i)))
            .collect(),
    ))
}

/// Flat indices of shell cells, ascending.
pub fn surface_cells(grid: &VoxelGrid, threshold: f64) -> Vec<usize> {
    let inside = |c: [i64; 3]| {
        grid.get_signed(c)
            .is_some_and(|v| f64::from(v) >= threshold)
    };
    (0..grid.len())
        .filter(|&i| {
            if f64::from(grid.values[i]) < threshold {
                return false;
            }
            let c = grid.cell(i).map(|x| x as i64);
            NEIGHBORS_6
                .iter()
                .any(|d| !inside([c[0] + d[0], c[1] + d[1], c[2] + d[2]]))
        })
        .collect()
}

/// Both Chamfer variants from one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferDistance {
    /// Sum of nearest-neighbor distances in both directions.
    pub sum: f64,
    /// Each directed sum divided by its cloud's size, then added.
    pub normalized: f64,
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<ChamferDistance, VoxelError> {
    if a.is_empty() || b.is_empty() {
        return Err(VoxelError::EmptyCloud);
    }
    let ab = directed_sum(a, b);
    let ba = directed_sum(b, a);
    Ok(ChamferDistance {
        sum: ab + ba,
        normalized: ab / a.len() as f64 + ba / b.len() as f64,
    })
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64, VoxelError> {
    chamfer(a, b).map(|c| c.sum)
}

pub fn chamfer_distance_normalized(a: &PointCloud, b: &PointCloud) -> Result<f64, VoxelError> {
    chamfer(a, b).map(|c| c.normalized)
}

fn directed_sum(from: &PointCloud, to: &PointCloud) -> f64 {
    let index = NearestIndex::build(&to.points);
    from.points.iter().map(|p| index.nearest_distance(p)).sum()
}

/// Exact nearest-neighbor lookup over a uniform spatial hash.
pub struct NearestIndex<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    origin: Point3<f64>,
    buckets: HashMap<[i64; 3], Vec<u32>>,
    /// Largest occupied bucket coordinate span, bounds the ring search.
    max_ring: i64,
}

impl<'a> NearestIndex<'a> {
    pub fn build(points: &'a [Point3<f64>]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let longest = extent.max();
        let n = points.len() as f64;
        let cell = if longest > 0.0 {
            // Flat axes are floored so planar clouds keep a sane bucket size.
            let floor = longest / n.cbrt();
            let volume: f64 = extent.iter().map(|e| e.max(floor)).product();
            (volume / n).cbrt()
        } else {
            1.0
        };
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets
                .entry(Self::key(&lo, cell, p))
                .or_default()
                .push(i as u32);
        }
        let max_ring = extent.map(|e| (e / cell).ceil() as i64).max() + 1;
        Self {
            points,
            cell,
            origin: lo,
            buckets,
            max_ring,
        }
    }

    #[inline]
    fn key(origin: &Point3<f64>, cell: f64, p: &Point3<f64>) -> [i64; 3] {
        let d = (p - origin) / cell;
        [d.x.floor() as i64, d.y.floor() as i64, d.z.floor() as i64]
    }

    pub fn nearest_distance(&self, q: &Point3<f64>) -> f64 {
        self.nearest(q).1
    }

    /// Index and distance of the nearest point (ties keep the lowest index).
    pub fn nearest(&self, q: &Point3<f64>) -> (usize, f64) {
        let center = Self::key(&self.origin, self.cell, q);
        // Rings beyond the indexed region cannot be closer than its farthest
        // bucket, so the search is bounded by the query offset plus the span.
        let offset = center
            .iter()
            .map(|&c| if c < 0 { -c } else { (c - self.max_ring).max(0) })
            .max()
            .unwrap_or(0);
        if offset > 2 {
            return self.brute_force(q);
        }
        let limit = self.max_ring + offset + 1;
        let mut best = (usize::MAX, f64::INFINITY);
        for r in 0..=limit {
            self.scan_ring(center, r, q, &mut best);
            // Any point in ring r + 1 is at least r cells away along some axis.
            if best.1 <= r as f64 * self.cell {
                break;
            }
        }
        best
    }

    fn brute_force(&self, q: &Point3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - q).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn scan_ring(&self, c: [i64; 3], r: i64, q: &Point3<f64>, best: &mut (usize, f64)) {
        let mut visit = |k: [i64; 3]| {
            if let Some(ids) = self.buckets.get(&k) {
                for &i in ids {
                    let d = (self.points[i as usize] - q).norm();
                    if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                        *best = (i as usize, d);
                    }
                }
            }
        };
        if r == 0 {
            visit(c);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                if dx.abs() == r || dy.abs() == r {
                    for dz in -r..=r {
                        visit([c[0] + dx, c[1] + dy, c[2] + dz]);
                    }
                } else {
                    visit([c[0] + dx, c[1] + dy, c[2] - r]);
                    visit([c[0] + dx, c[1] + dy, c[2] + r]);
                }
            }
        }
    }
}

const VXG_MAGIC: &[u8; 4] = b"VXG1";

/// Encodes a grid as VXG1 bytes.
pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.len() * 4);
    out.extend_from_slice(VXG_MAGIC);
    for d in grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes VXG1 bytes. The frame is not stored in the file and is supplied
/// by the caller.
pub fn decode_grid(bytes: &[u8], frame: VoxelFrame) -> Result<VoxelGrid, VoxelError> {
    let mut reader = bytes;
    let mut magic = [0u8; 4];
    if reader.read_exact(&mut magic).is_err() || &magic != VXG_MAGIC {
        return Err(VoxelError::BadMagic);
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b).map_err(|_| VoxelError::TruncatedFile {
            expected: 12,
            actual: 0,
        })?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let expected = dims[0] * dims[1] * dims[2];
    let actual = reader.len() / 4;
    if reader.len() < expected * 4 {
        return Err(VoxelError::TruncatedFile { expected, actual });
    }
    if reader.len() > expected * 4 {
        return Err(VoxelError::DimMismatch { expected, actual });
    }
    let values = reader
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    VoxelGrid::from_values(dims, values, frame)
}

pub fn write_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<(), VoxelError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<VoxelGrid, VoxelError> {
    read_grid_with_frame(path, VoxelFrame::default())
}

pub fn read_grid_with_frame(path: impl AsRef<Path>, frame: VoxelFrame) -> Result<VoxelGrid, VoxelError> {
    decode_grid(&fs::read(path)?, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> VoxelFrame {
        VoxelFrame::default()
    }

    fn brute_chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
        let dir = |x: &[Point3<f64>], y: &[Point3<f64>]| -> f64 {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
                .sum()
        };
        dir(a, b) + dir(b, a)
    }

    #[test]
    fn confidence_examples() {
        let g = VoxelGrid::filled([2, 2, 2], 0.5, unit());
        assert!(confidence(&g).values.iter().all(|&c| c == 0.0));
        let g = VoxelGrid::filled([2, 2, 2], 1.0, unit());
        assert!(confidence(&g).values.iter().all(|&c| c == 0.5));
        let g = VoxelGrid::from_values([1, 1, 3], vec![0.1, 0.6, 0.5], unit()).unwrap();
        let c = confidence(&g).values;
        for (got, want) in c.iter().zip([0.4, 0.1, 0.0]) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
        assert_eq!(confidence(&g), confidence(&g));
    }

    #[test]
    fn index_order_is_z_fastest() {
        let dims = [2, 3, 4];
        assert_eq!(index_of(dims, [0, 0, 1]), 1);
        assert_eq!(index_of(dims, [0, 1, 0]), 4);
        assert_eq!(index_of(dims, [1, 0, 0]), 12);
        for i in 0..24 {
            assert_eq!(index_of(dims, cell_of(dims, i)), i);
        }
    }

    #[test]
    fn single_cell_surface() {
        let mut g = VoxelGrid::new([5, 5, 5], unit());
        g.set([2, 3, 1], 1.0);
        let pc = extract_surface(&g, 0.5).unwrap();
        assert_eq!(pc.points, vec![Point3::new(2.0, 3.0, 1.0)]);
    }

    #[test]
    fn full_cube_shell_matches_enumeration() {
        let g = VoxelGrid::filled([4, 4, 4], 1.0, unit());
        let shell = surface_cells(&g, 0.5);
        // Brute force: a cell is interior iff every coordinate is 1 or 2.
        let interior = (0..64)
            .filter(|&i| cell_of([4, 4, 4], i).iter().all(|&c| c == 1 || c == 2))
            .count();
        assert_eq!(interior, 8);
        assert_eq!(shell.len(), 64 - interior);
        assert_eq!(shell.len(), 56);
    }

    #[test]
    fn below_threshold_is_empty_surface() {
        let g = VoxelGrid::filled([3, 3, 3], 0.4, unit());
        assert!(matches!(
            extract_surface(&g, 0.5),
            Err(VoxelError::EmptySurface(_))
        ));
    }

    #[test]
    fn chamfer_examples() {
        let a = PointCloud::new(vec![Point3::origin()]);
        let b = PointCloud::new(vec![Point3::new(3.0, 0.0, 0.0)]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 6.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            chamfer_distance(&a, &PointCloud::default()),
            Err(VoxelError::EmptyCloud)
        ));
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut cloud = |n: usize| -> Vec<Point3<f64>> {
                (0..n)
                    .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                    .collect()
            };
            let a = cloud(50);
            let b = cloud(50);
            let want = brute_chamfer(&a, &b);
            let got = chamfer_distance(&PointCloud::new(a), &PointCloud::new(b)).unwrap();
            assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn nearest_handles_far_queries_and_duplicates() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0)];
        let idx = NearestIndex::build(&pts);
        assert_eq!(idx.nearest(&Point3::new(0.1, 0.0, 0.0)).0, 0);
        let far = Point3::new(100.0, -40.0, 7.0);
        let want = pts.iter().map(|p| (p - far).norm()).fold(f64::INFINITY, f64::min);
        assert_eq!(idx.nearest_distance(&far), want);
        let single = [Point3::new(2.0, 2.0, 2.0)];
        let idx = NearestIndex::build(&single);
        assert_eq!(idx.nearest_distance(&Point3::new(2.0, 2.0, 5.0)), 3.0);
    }

    #[test]
    fn grid_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vxg");
        let values: Vec<f32> = (0..60).map(|i| i as f32 / 59.0).collect();
        let g = VoxelGrid::from_values([3, 4, 5], values, unit()).unwrap();
        write_grid(&g, &path).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(back.dims(), g.dims());
        assert!(back
            .values()
            .iter()
            .zip(g.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut bytes = encode_grid(&g);
        bytes[0] = b'X';
        assert!(matches!(decode_grid(&bytes, unit()), Err(VoxelError::BadMagic)));

        let g4 = VoxelGrid::new([4, 4, 4], unit());
        let bytes = encode_grid(&g4);
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            decode_grid(short, unit()),
            Err(VoxelError::TruncatedFile { expected: 64, actual: 63 })
        ));
    }

    #[test]
    fn max_pool_takes_block_maximum() {
        let mut g = VoxelGrid::new([4, 4, 4], unit());
        g.set([3, 0, 1], 0.7);
        g.set([2, 1, 0], 0.2);
        let p = g.max_pool(2);
        assert_eq!(p.dims(), [2, 2, 2]);
        assert_eq!(p.get([1, 0, 0]), 0.7);
        assert_eq!(p.get([0, 0, 0]), 0.0);
    }
}
