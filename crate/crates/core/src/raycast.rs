//! Face-connected voxel traversal (Amanatides–Woo) in voxel coordinates.

use nalgebra::{Point3, Vector3};

use crate::voxel::Dims;

/// One visited cell with the ray parameters where the ray enters and leaves it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayStep {
    pub cell: [usize; 3],
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Parameter interval where `origin + t·dir` lies inside the grid box
/// `[-0.5, dim - 0.5]³`, clipped to `t ≥ 0`.
pub fn clip_to_grid(dims: Dims, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for a in 0..3 {
        let min = -0.5;
        let max = dims[a] as f64 - 0.5;
        if dir[a] == 0.0 {
            if origin[a] < min || origin[a] > max {
                return None;
            }
            continue;
        }
        let t1 = (min - origin[a]) / dir[a];
        let t2 = (max - origin[a]) / dir[a];
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    (lo < hi).then_some((lo, hi))
}

/// Cells pierced by the ray, in order, until it leaves the grid or passes `t_max`.
pub struct Traversal {
    dims: Dims,
    cell: [i64; 3],
    step: [i64; 3],
    t_next: [f64; 3],
    t_delta: [f64; 3],
    t: f64,
    t_end: f64,
}

impl Traversal {
    pub fn new(dims: Dims, origin: &Point3<f64>, dir: &Vector3<f64>, t_max: f64) -> Self {
        let dead = Self {
            dims,
            cell: [0; 3],
            step: [0; 3],
            t_next: [f64::INFINITY; 3],
            t_delta: [f64::INFINITY; 3],
            t: 1.0,
            t_end: 0.0,
        };
        let Some((t0, t1)) = clip_to_grid(dims, origin, dir) else {
            return dead;
        };
        let t_end = t1.min(t_max);
        if t0 >= t_end {
            return dead;
        }
        let p = origin + dir * t0;
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            // Entry points on a far face round outward; keep the cell inside.
            cell[a] = ((p[a] + 0.5).floor() as i64).clamp(0, dims[a] as i64 - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                t_next[a] = (cell[a] as f64 + 0.5 - origin[a]) / dir[a];
                t_delta[a] = 1.0 / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                t_next[a] = (cell[a] as f64 - 0.5 - origin[a]) / dir[a];
                t_delta[a] = -1.0 / dir[a];
            }
        }
        Self {
            dims,
            cell,
            step,
            t_next,
            t_delta,
            t: t0,
            t_end,
        }
    }
}

impl Iterator for Traversal {
    type Item = RayStep;

    fn next(&mut self) -> Option<RayStep> {
        if self.t >= self.t_end {
            return None;
        }
        let a = if self.t_next[0] <= self.t_next[1] && self.t_next[0] <= self.t_next[2] {
            0
        } else if self.t_next[1] <= self.t_next[2] {
            1
        } else {
            2
        };
        let exit = self.t_next[a].min(self.t_end);
        let out = RayStep {
            cell: self.cell.map(|c| c as usize),
            t_enter: self.t,
            t_exit: exit,
        };
        self.t = exit;
        self.cell[a] += self.step[a];
        self.t_next[a] += self.t_delta[a];
        if self.cell[a] < 0 || self.cell[a] >= self.dims[a] as i64 {
            self.t_end = self.t;
        }
        Some(out)
    }
}

pub fn traverse(dims: Dims, origin: &Point3<f64>, dir: &Vector3<f64>, t_max: f64) -> Traversal {
    Traversal::new(dims, origin, dir, t_max)
}
