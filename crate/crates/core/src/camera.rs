//! Pinhole depth camera that ray-casts voxel grids.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raycast::traverse;
use crate::voxel::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub height_mm: f64,
    /// Downward tilt from horizontal.
    pub tilt_deg: f64,
    #[serde(default = "default_pixels")]
    pub pixels: usize,
}

fn default_pixels() -> usize {
    128
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            height_mm: 457.2,
            tilt_deg: 30.0,
            pixels: default_pixels(),
        }
    }
}

/// World-frame pinhole camera with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Point3<f64>,
    pub forward: Vector3<f64>,
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Places the camera `height_mm` above the table on the −y side, tilted
    /// down by `tilt_deg` so the optical axis passes through `target`; the
    /// field of view frames a sphere of `radius` around the target.
    pub fn looking_at(config: &CameraConfig, target: Point3<f64>, radius: f64) -> Self {
        let tilt = config.tilt_deg.to_radians();
        let drop = (config.height_mm - target.z).max(1e-6);
        let back = drop / tilt.tan().max(1e-6);
        let position = Point3::new(target.x, target.y - back, config.height_mm);
        let forward = (target - position).normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let up = right.cross(&forward);
        let dist = (target - position).norm();
        let half = (radius / dist).clamp(0.0, 0.99).asin() * 1.05;
        Self {
            position,
            forward,
            right,
            up,
            fov_deg: 2.0 * half.to_degrees(),
            width: config.pixels,
            height: config.pixels,
        }
    }

    /// Unit ray direction through a pixel center; row 0 is the top.
    pub fn ray(&self, row: usize, col: usize) -> Vector3<f64> {
        let t = (self.fov_deg.to_radians() / 2.0).tan();
        let sx = (2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0) * t;
        let sy = (1.0 - 2.0 * (row as f64 + 0.5) / self.height as f64) * t;
        (self.forward + self.right * sx + self.up * sy).normalize()
    }
}

/// Range along each pixel ray (mm); `None` is no return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub camera: Camera,
    pub ranges: Vec<Option<f64>>,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.ranges[row * self.camera.width + col]
    }

    pub fn returns(&self) -> usize {
        self.ranges.iter().filter(|r| r.is_some()).count()
    }
}

/// Range to the entry face of the first cell at or above 0.5 along a world ray.
pub fn cast(grid: &VoxelGrid, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let frame = grid.frame();
    let o = frame.world_to_voxel(origin);
    let d = frame.world_dir_to_voxel(dir);
    traverse(grid.dims(), &o, &d, f64::INFINITY)
        .find(|s| grid.get(s.cell) >= 0.5)
        .map(|s| s.t_enter)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthNoise {
    #[serde(default)]
    pub depth_sigma_mm: f64,
    /// Whole object returns nothing.
    #[serde(default)]
    pub transparent: bool,
}

pub fn render_depth(grid: &VoxelGrid, camera: &Camera, noise: &DepthNoise, seed: u64) -> DepthMap {
    let mut ranges: Vec<Option<f64>> = if noise.transparent {
        vec![None; camera.width * camera.height]
    } else {
        (0..camera.width * camera.height)
            .map(|i| cast(grid, &camera.position, &camera.ray(i / camera.width, i % camera.width)))
            .collect()
    };
    if noise.depth_sigma_mm > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.depth_sigma_mm).expect("finite sigma");
        for r in ranges.iter_mut().flatten() {
            *r = (*r + normal.sample(&mut rng)).max(0.0);
        }
    }
    DepthMap {
        camera: *camera,
        ranges,
    }
}
