//! Registration between world, robot and voxel frames.
//!
//! World units are millimeters throughout. Voxel coordinates use the
//! cell-center convention: integer coordinates are cell centers.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("calibration points are collinear or coincident")]
    DegenerateCalibration,
    #[error("voxel frame axes are not orthonormal")]
    NonOrthonormalAxes,
    #[error("voxel scale must be positive, got {0}")]
    NonPositiveScale(f64),
}

/// `x_r = rotation * x_w + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Orthonormal triad anchored at the first point: columns are the unit edge
/// direction, the in-plane perpendicular and their cross product.
fn triad(p: &[Point3<f64>; 3]) -> Result<Matrix3<f64>, FrameError> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let scale = e1.norm_squared().max(e2.norm_squared());
    if scale == 0.0 || e1.cross(&e2).norm() <= 1e-9 * scale.max(1.0) {
        return Err(FrameError::DegenerateCalibration);
    }
    let x = e1.normalize();
    let y = (e2 - x * x.dot(&e2)).normalize();
    let z = x.cross(&y);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Nearest proper rotation by polar decomposition.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Solves `X_r = R · X_w + T` from three world/robot correspondences.
pub fn solve_world_to_robot(
    world: &[Point3<f64>; 3],
    robot: &[Point3<f64>; 3],
) -> Result<RigidTransform, FrameError> {
    let tw = triad(world)?;
    let tr = triad(robot)?;
    let rotation = nearest_rotation(&(tr * tw.transpose()));
    let centroid = |p: &[Point3<f64>; 3]| (p[0].coords + p[1].coords + p[2].coords) / 3.0;
    let translation = centroid(robot) - rotation * centroid(world);
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Affine map between voxel coordinates and world millimeters:
/// `x_w = R_v (x_v - o_v) + o_w` with `R_v = s [a_x, a_y, a_z]^T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelFrame {
    pub origin_voxel: Point3<f64>,
    pub origin_world: Point3<f64>,
    pub axes: [Vector3<f64>; 3],
    pub pixels_per_voxel: u32,
    pub pixel_length_mm: f64,
}

impl Default for VoxelFrame {
    /// Identity map, 1 mm per voxel.
    fn default() -> Self {
        Self {
            origin_voxel: Point3::origin(),
            origin_world: Point3::origin(),
            axes: [Vector3::x(), Vector3::y(), Vector3::z()],
            pixels_per_voxel: 1,
            pixel_length_mm: 1.0,
        }
    }
}

impl VoxelFrame {
    pub fn new(
        origin_voxel: Point3<f64>,
        origin_world: Point3<f64>,
        axes: [Vector3<f64>; 3],
        pixels_per_voxel: u32,
        pixel_length_mm: f64,
    ) -> Result<Self, FrameError> {
        let frame = Self {
            origin_voxel,
            origin_world,
            axes,
            pixels_per_voxel,
            pixel_length_mm,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// Frame for a cubic grid resting on the table: the bottom center of the
    /// grid sits on the world origin, axes as in the tabletop setup
    /// (`a_x = -x`, `a_y = y`, `a_z = z`).
    pub fn tabletop(resolution: usize, voxel_mm: f64) -> Self {
        let c = (resolution as f64 - 1.0) / 2.0;
        Self {
            origin_voxel: Point3::new(c, c, -0.5),
            origin_world: Point3::origin(),
            axes: [-Vector3::x(), Vector3::y(), Vector3::z()],
            pixels_per_voxel: 1,
            pixel_length_mm: voxel_mm,
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        let s = self.scale();
        if !(s > 0.0 && s.is_finite()) || self.pixels_per_voxel == 0 {
            return Err(FrameError::NonPositiveScale(s));
        }
        let a = self.axis_matrix();
        if ((a * a.transpose()) - Matrix3::identity()).amax() > 1e-9 {
            return Err(FrameError::NonOrthonormalAxes);
        }
        Ok(())
    }

    /// `s = n_p × l_p`, millimeters per voxel.
    pub fn scale(&self) -> f64 {
        self.pixels_per_voxel as f64 * self.pixel_length_mm
    }

    /// Rows are the axes.
    fn axis_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[
            self.axes[0].transpose(),
            self.axes[1].transpose(),
            self.axes[2].transpose(),
        ])
    }

    /// `R_v`.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.axis_matrix() * self.scale()
    }

    pub fn voxel_to_world(&self, x_v: &Point3<f64>) -> Point3<f64> {
        self.origin_world + self.rotation() * (x_v - self.origin_voxel)
    }

    pub fn world_to_voxel(&self, x_w: &Point3<f64>) -> Point3<f64> {
        self.origin_voxel + self.axis_matrix().transpose() * (x_w - self.origin_world) / self.scale()
    }

    /// World direction to voxel direction, preserving the ray parameter:
    /// `x_w + t d_w` maps to `x_v + t d_v`.
    pub fn world_dir_to_voxel(&self, d_w: &Vector3<f64>) -> Vector3<f64> {
        self.axis_matrix().transpose() * d_w / self.scale()
    }

    pub fn voxel_dir_to_world(&self, d_v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * d_v
    }
}
