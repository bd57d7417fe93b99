//! Procedural solids used as ground truth and as the prior's training corpus.
//!
//! Parameters are in voxels. Every solid stands on the grid floor plane
//! `z = 1.5` and is centered horizontally.

use nalgebra::Point3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::VoxelFrame;
use crate::voxel::VoxelGrid;

/// Empty cells kept between any solid and the grid faces.
pub const MARGIN: usize = 2;
/// Floor plane of every solid, in voxel coordinates.
pub const FLOOR_Z: f64 = 1.5;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("shape does not fit a {resolution}³ grid with a {MARGIN}-voxel margin")]
    ShapeOutOfBounds { resolution: usize },
    #[error("invalid shape parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Box,
    Cylinder,
    Sphere,
    Bottle,
    Cone,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Box, Family::Cylinder, Family::Sphere, Family::Bottle, Family::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::Sphere => "sphere",
            Family::Bottle => "bottle",
            Family::Cone => "cone",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Draws parameters from the default ranges, which scale with the span
    /// left after margins.
    pub fn sample(self, resolution: usize, rng: &mut ChaCha8Rng) -> ShapeParams {
        let m = (resolution as f64 - 6.0).max(1.0);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match self {
            Family::Box => ShapeParams::Box {
                size_x: u(0.25, 0.6) * m,
                size_y: u(0.25, 0.6) * m,
                size_z: u(0.2, 0.75) * m,
                yaw_deg: u(0.0, 90.0),
            },
            Family::Cylinder => ShapeParams::Cylinder {
                radius: u(0.12, 0.3) * m,
                height: u(0.2, 0.75) * m,
            },
            Family::Sphere => ShapeParams::Sphere {
                radius: u(0.15, 0.4) * m,
            },
            Family::Bottle => {
                let radius = u(0.12, 0.28) * m;
                ShapeParams::Bottle {
                    radius,
                    height: u(0.45, 0.85) * m,
                    neck_radius: u(0.3, 0.6) * radius,
                    body_frac: u(0.45, 0.65),
                    neck_frac: u(0.15, 0.25),
                }
            }
            Family::Cone => {
                let base_radius = u(0.15, 0.35) * m;
                ShapeParams::Cone {
                    base_radius,
                    top_radius: u(0.2, 0.9) * base_radius,
                    height: u(0.25, 0.7) * m,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum ShapeParams {
    /// Full extents; yaw about the vertical axis.
    Box {
        size_x: f64,
        size_y: f64,
        size_z: f64,
        #[serde(default)]
        yaw_deg: f64,
    },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
    /// Body, a straight shoulder taper, then a neck.
    Bottle {
        radius: f64,
        height: f64,
        neck_radius: f64,
        body_frac: f64,
        neck_frac: f64,
    },
    /// Truncated cone with flat caps.
    Cone {
        base_radius: f64,
        top_radius: f64,
        height: f64,
    },
}

impl ShapeParams {
    pub fn family(&self) -> Family {
        match self {
            ShapeParams::Box { .. } => Family::Box,
            ShapeParams::Cylinder { .. } => Family::Cylinder,
            ShapeParams::Sphere { .. } => Family::Sphere,
            ShapeParams::Bottle { .. } => Family::Bottle,
            ShapeParams::Cone { .. } => Family::Cone,
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ShapeError::InvalidParams(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            ShapeParams::Box { size_x, size_y, size_z, yaw_deg } => {
                positive("size_x", size_x)?;
                positive("size_y", size_y)?;
                positive("size_z", size_z)?;
                if !yaw_deg.is_finite() {
                    return Err(ShapeError::InvalidParams("yaw must be finite".into()));
                }
            }
            ShapeParams::Cylinder { radius, height } => {
                positive("radius", radius)?;
                positive("height", height)?;
            }
            ShapeParams::Sphere { radius } => positive("radius", radius)?,
            ShapeParams::Bottle { radius, height, neck_radius, body_frac, neck_frac } => {
                positive("radius", radius)?;
                positive("height", height)?;
                positive("neck_radius", neck_radius)?;
                if !(body_frac > 0.0 && neck_frac > 0.0 && body_frac + neck_frac <= 1.0) {
                    return Err(ShapeError::InvalidParams("bottle fractions must be positive and sum to at most 1".into()));
                }
            }
            ShapeParams::Cone { base_radius, top_radius, height } => {
                positive("base_radius", base_radius)?;
                positive("height", height)?;
                if !(top_radius >= 0.0) {
                    return Err(ShapeError::InvalidParams("top_radius must be non-negative".into()));
                }
            }
        }
        Ok(())
    }
}

/// A solid placed in a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub params: ShapeParams,
    pub resolution: usize,
}

impl Shape {
    pub fn new(params: ShapeParams, resolution: usize) -> Result<Self, ShapeError> {
        params.validate()?;
        Ok(Self { params, resolution })
    }

    fn axis(&self) -> f64 {
        (self.resolution as f64 - 1.0) / 2.0
    }

    /// Point membership in voxel coordinates.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let c = self.axis();
        let (x, y, z) = (p.x - c, p.y - c, p.z - FLOOR_Z);
        if z < 0.0 {
            return false;
        }
        let rho = x.hypot(y);
        match self.params {
            ShapeParams::Box { size_x, size_y, size_z, yaw_deg } => {
                let (s, co) = yaw_deg.to_radians().sin_cos();
                let lx = co * x + s * y;
                let ly = -s * x + co * y;
                z <= size_z && lx.abs() <= size_x / 2.0 && ly.abs() <= size_y / 2.0
            }
            ShapeParams::Cylinder { radius, height } => z <= height && rho <= radius,
            ShapeParams::Sphere { radius } => {
                let dz = z - radius;
                rho * rho + dz * dz <= radius * radius
            }
            ShapeParams::Bottle { radius, height, neck_radius, body_frac, neck_frac } => {
                if z > height {
                    return false;
                }
                let body = body_frac * height;
                let neck_start = (1.0 - neck_frac) * height;
                let r = if z <= body {
                    radius
                } else if z >= neck_start {
                    neck_radius
                } else {
                    let t = (z - body) / (neck_start - body);
                    radius + (neck_radius - radius) * t
                };
                rho <= r
            }
            ShapeParams::Cone { base_radius, top_radius, height } => {
                z <= height && rho <= base_radius + (top_radius - base_radius) * z / height
            }
        }
    }

    /// Radius of a sphere around the grid axis at mid-height that holds the solid.
    pub fn bounding_radius(&self) -> f64 {
        let (half_w, h) = match self.params {
            ShapeParams::Box { size_x, size_y, size_z, .. } => (size_x.hypot(size_y) / 2.0, size_z),
            ShapeParams::Cylinder { radius, height } => (radius, height),
            ShapeParams::Sphere { radius } => (radius, 2.0 * radius),
            ShapeParams::Bottle { radius, neck_radius, height, .. } => (radius.max(neck_radius), height),
            ShapeParams::Cone { base_radius, top_radius, height } => (base_radius.max(top_radius), height),
        };
        half_w.hypot(h / 2.0)
    }

    /// Binary occupancy of cell centers. Fails if any occupied cell breaks the margin.
    pub fn voxelize(&self, frame: VoxelFrame) -> Result<VoxelGrid, ShapeError> {
        let n = self.resolution;
        let values: Vec<f32> = (0..n * n * n)
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = (i / (n * n), (i / n) % n, i % n);
                if self.contains(&Point3::new(x as f64, y as f64, z as f64)) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let grid = VoxelGrid::from_values([n; 3], values, frame)
            .map_err(|e| ShapeError::InvalidParams(e.to_string()))?;
        match grid.occupied_bounds(0.5) {
            None => Err(ShapeError::InvalidParams("shape occupies no cell centers".into())),
            Some((lo, hi)) => {
                let ok = (0..3).all(|a| lo[a] >= MARGIN && hi[a] + MARGIN < n);
                if ok {
                    Ok(grid)
                } else {
                    Err(ShapeError::ShapeOutOfBounds { resolution: n })
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCount {
    pub family: Family,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCorpusSpec {
    pub resolution: usize,
    pub seed: u64,
    pub families: Vec<FamilyCount>,
}

impl ShapeCorpusSpec {
    /// Every family, `per_family` shapes each.
    pub fn balanced(resolution: usize, per_family: usize, seed: u64) -> Self {
        Self {
            resolution,
            seed,
            families: Family::ALL
                .iter()
                .map(|&family| FamilyCount { family, count: per_family })
                .collect(),
        }
    }

    /// Keeps only the named families.
    pub fn filtered(&self, keep: &[Family]) -> Self {
        Self {
            families: self.families.iter().filter(|f| keep.contains(&f.family)).cloned().collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusShape {
    pub params: ShapeParams,
    pub grid: VoxelGrid,
}

/// Parameters are drawn sequentially from one seeded stream, so the corpus
/// depends only on the spec.
pub fn sample_corpus_params(spec: &ShapeCorpusSpec) -> Vec<ShapeParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    spec.families
        .iter()
        .flat_map(|fc| std::iter::repeat_n(fc.family, fc.count))
        .map(|f| f.sample(spec.resolution, &mut rng))
        .collect()
}

pub fn generate_corpus(spec: &ShapeCorpusSpec) -> Result<Vec<CorpusShape>, ShapeError> {
    if spec.resolution < 2 * MARGIN + 1 {
        return Err(ShapeError::ShapeOutOfBounds { resolution: spec.resolution });
    }
    let frame = VoxelFrame::default();
    sample_corpus_params(spec)
        .into_iter()
        .map(|params| {
            let grid = Shape::new(params, spec.resolution)?.voxelize(frame)?;
            Ok(CorpusShape { params, grid })
        })
        .collect()
}
