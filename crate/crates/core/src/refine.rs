//! Touch constraints and latent refinement.
//!
//! Each touch contributes empty cells (the approach path) and occupied cells
//! (the contact and the tactile patch). The loss is
//! `Σ_Z v² + Σ_O (1 - v)²`, and refinement descends it in latent space
//! through the prior decoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::VoxelFrame;
use crate::prior::{sigmoid, PriorError, ShapePrior};
use crate::tactile::{SensorPose, SensorSpec};
use crate::voxel::{cell_of, containing_cell, index_of, Dims, VoxelGrid};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("constraint cell {cell:?} is outside grid {dims:?}")]
    OutOfBounds { cell: [usize; 3], dims: Dims },
    #[error("constraint dims {constraints:?} do not match grid dims {grid:?}")]
    GridMismatch { constraints: Dims, grid: Dims },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("bad log line {line}: {reason}")]
    BadLog { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Empty,
    Occupied,
}

impl Target {
    pub fn value(self) -> f64 {
        match self {
            Target::Empty => 0.0,
            Target::Occupied => 1.0,
        }
    }
}

/// One registered touch. Cells and the normal are in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchRecord {
    pub hit: bool,
    pub contact: Option<[usize; 3]>,
    /// Approach direction, from free space into the surface.
    pub normal: Vector3<f64>,
    /// Free cells crossed before the contact, in order.
    pub ray_cells: Vec<[usize; 3]>,
    /// Occupied cells recovered from the tactile height map.
    #[serde(default)]
    pub patch_cells: Vec<[usize; 3]>,
}

impl TouchRecord {
    pub fn miss(normal: Vector3<f64>, ray_cells: Vec<[usize; 3]>) -> Self {
        Self {
            hit: false,
            contact: None,
            normal,
            ray_cells,
            patch_cells: Vec::new(),
        }
    }

    fn cells(&self) -> impl Iterator<Item = &[usize; 3]> {
        self.ray_cells.iter().chain(&self.patch_cells).chain(&self.contact)
    }

    /// `H|M px py pz nx ny nz len : ray cells : patch cells`.
    pub fn to_log_line(&self) -> String {
        let mut s = String::new();
        let p = self.contact.map(|c| c.map(|x| x as i64)).unwrap_or([-1; 3]);
        let _ = write!(
            s,
            "{} {} {} {} {:?} {:?} {:?} {} :",
            if self.hit { 'H' } else { 'M' },
            p[0],
            p[1],
            p[2],
            self.normal.x,
            self.normal.y,
            self.normal.z,
            self.ray_cells.len()
        );
        for c in &self.ray_cells {
            let _ = write!(s, " {},{},{}", c[0], c[1], c[2]);
        }
        s.push_str(" :");
        for c in &self.patch_cells {
            let _ = write!(s, " {},{},{}", c[0], c[1], c[2]);
        }
        s
    }

    pub fn from_log_line(line: &str, lineno: usize) -> Result<Self, RefineError> {
        let bad = |reason: &str| RefineError::BadLog {
            line: lineno,
            reason: reason.to_string(),
        };
        let mut parts = line.split(':');
        let head: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
        if head.len() != 8 {
            return Err(bad("expected 8 header fields"));
        }
        let hit = match head[0] {
            "H" => true,
            "M" => false,
            _ => return Err(bad("flag must be H or M")),
        };
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad("bad integer"));
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let p = [int(head[1])?, int(head[2])?, int(head[3])?];
        let normal = Vector3::new(float(head[4])?, float(head[5])?, float(head[6])?);
        let len = head[7].parse::<usize>().map_err(|_| bad("bad ray length"))?;
        let cells = |s: Option<&str>| -> Result<Vec<[usize; 3]>, RefineError> {
            s.unwrap_or("")
                .split_whitespace()
                .map(|t| {
                    let v: Vec<usize> = t
                        .split(',')
                        .map(|x| x.parse::<usize>().map_err(|_| bad("bad cell")))
                        .collect::<Result<_, _>>()?;
                    <[usize; 3]>::try_from(v).map_err(|_| bad("cell needs three coordinates"))
                })
                .collect()
        };
        let ray_cells = cells(parts.next())?;
        let patch_cells = cells(parts.next())?;
        if ray_cells.len() != len {
            return Err(bad("ray length does not match cells"));
        }
        let contact = if hit {
            if p.iter().any(|&x| x < 0) {
                return Err(bad("hit without contact"));
            }
            Some(p.map(|x| x as usize))
        } else {
            None
        };
        Ok(Self {
            hit,
            contact,
            normal,
            ray_cells,
            patch_cells,
        })
    }
}

/// Accumulated touches and their per-cell targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    dims: Dims,
    records: Vec<TouchRecord>,
    targets: BTreeMap<usize, Target>,
    conflicts: usize,
}

impl ConstraintSet {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            records: Vec::new(),
            targets: BTreeMap::new(),
            conflicts: 0,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn records(&self) -> &[TouchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn conflicts(&self) -> usize {
        self.conflicts
    }

    /// Flat index → target, ascending by index.
    pub fn targets(&self) -> &BTreeMap<usize, Target> {
        &self.targets
    }

    pub fn target(&self, cell: [usize; 3]) -> Option<Target> {
        self.targets.get(&index_of(self.dims, cell)).copied()
    }

    fn check(&self, cell: &[usize; 3]) -> Result<(), RefineError> {
        if (0..3).all(|a| cell[a] < self.dims[a]) {
            Ok(())
        } else {
            Err(RefineError::OutOfBounds {
                cell: *cell,
                dims: self.dims,
            })
        }
    }

    /// Sets a target; a different earlier target is overwritten and counted.
    pub fn mark(&mut self, cell: [usize; 3], target: Target) -> Result<(), RefineError> {
        self.check(&cell)?;
        if let Some(old) = self.targets.insert(index_of(self.dims, cell), target) {
            if old != target {
                self.conflicts += 1;
                log::debug!("constraint conflict at {cell:?}: {old:?} replaced by {target:?}");
            }
        }
        Ok(())
    }

    /// Patch cells first, then the ray, then the contact, so the exact
    /// measurements win within one touch.
    pub fn add_record(&mut self, record: TouchRecord) -> Result<(), RefineError> {
        for c in record.cells() {
            self.check(c)?;
        }
        for &c in &record.patch_cells {
            self.mark(c, Target::Occupied)?;
        }
        for &c in &record.ray_cells {
            self.mark(c, Target::Empty)?;
        }
        if let Some(c) = record.contact {
            self.mark(c, Target::Occupied)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_log(&self) -> String {
        self.records.iter().map(|r| r.to_log_line() + "\n").collect()
    }

    /// Replays a log; lines starting with `#` or `P` are skipped.
    pub fn from_log(dims: Dims, text: &str) -> Result<Self, RefineError> {
        let mut cs = Self::new(dims);
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with('P') {
                continue;
            }
            cs.add_record(TouchRecord::from_log_line(t, i + 1)?)?;
        }
        Ok(cs)
    }
}

/// Read access to per-cell occupancy, so losses run on f32 grids and f64
/// fields alike.
pub trait OccupancyField {
    fn dims(&self) -> Dims;
    fn occupancy(&self, index: usize) -> f64;
}

impl OccupancyField for VoxelGrid {
    fn dims(&self) -> Dims {
        VoxelGrid::dims(self)
    }

    fn occupancy(&self, index: usize) -> f64 {
        f64::from(self.get_index(index))
    }
}

/// Dense f64 field in grid order.
#[derive(Debug, Clone, Copy)]
pub struct FieldView<'a> {
    pub dims: Dims,
    pub values: &'a [f64],
}

impl OccupancyField for FieldView<'_> {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn occupancy(&self, index: usize) -> f64 {
        self.values[index]
    }
}

fn check_dims(field: &impl OccupancyField, cs: &ConstraintSet) -> Result<(), RefineError> {
    if field.dims() != cs.dims {
        return Err(RefineError::GridMismatch {
            constraints: cs.dims,
            grid: field.dims(),
        });
    }
    Ok(())
}

pub fn touch_loss(field: &impl OccupancyField, cs: &ConstraintSet) -> Result<f64, RefineError> {
    check_dims(field, cs)?;
    Ok(cs
        .targets
        .iter()
        .map(|(&i, t)| (field.occupancy(i) - t.value()).powi(2))
        .sum())
}

/// `2v` on empty targets, `2(v - 1)` on occupied targets, zero elsewhere.
pub fn touch_loss_grad(field: &impl OccupancyField, cs: &ConstraintSet) -> Result<Vec<f64>, RefineError> {
    check_dims(field, cs)?;
    let mut g = vec![0.0; cs.dims.iter().product()];
    for (&i, t) in &cs.targets {
        g[i] = 2.0 * (field.occupancy(i) - t.value());
    }
    Ok(g)
}

/// Touch loss as a function of the latent code, evaluated only on
/// constrained cells, plus an optional Gaussian penalty
/// `λ/2 · Σ (z_d / scale_d)²`.
pub struct LatentObjective<'a> {
    prior: &'a ShapePrior,
    cells: Vec<usize>,
    targets: Vec<f64>,
    prior_weight: f64,
}

const CHUNK: usize = 2048;

impl<'a> LatentObjective<'a> {
    pub fn new(prior: &'a ShapePrior, cs: &ConstraintSet) -> Result<Self, RefineError> {
        if prior.dims() != cs.dims {
            return Err(RefineError::GridMismatch {
                constraints: cs.dims,
                grid: prior.dims(),
            });
        }
        Ok(Self {
            prior,
            cells: cs.targets.keys().copied().collect(),
            targets: cs.targets.values().map(|t| t.value()).collect(),
            prior_weight: 0.0,
        })
    }

    pub fn with_prior_weight(mut self, weight: f64) -> Self {
        self.prior_weight = weight;
        self
    }

    fn penalty(&self, z: &[f64]) -> f64 {
        if self.prior_weight == 0.0 {
            return 0.0;
        }
        let sum: f64 = z
            .iter()
            .zip(self.prior.scales())
            .filter(|(_, &s)| s > 0.0)
            .map(|(z, s)| (z / s).powi(2))
            .sum();
        0.5 * self.prior_weight * sum
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let parts: Vec<f64> = self
            .cells
            .par_chunks(CHUNK)
            .zip(self.targets.par_chunks(CHUNK))
            .map(|(cells, targets)| {
                cells
                    .iter()
                    .zip(targets)
                    .map(|(&i, t)| (sigmoid(self.prior.logit_at(i, z)) - t).powi(2))
                    .sum::<f64>()
            })
            .collect();
        parts.iter().sum::<f64>() + self.penalty(z)
    }

    /// Loss and `∂L/∂z = Σ_i 2(v_i - t_i) v_i (1 - v_i) B[:, i]`.
    pub fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let d = self.prior.latent_dim();
        let parts: Vec<(f64, Vec<f64>)> = self
            .cells
            .par_chunks(CHUNK)
            .zip(self.targets.par_chunks(CHUNK))
            .map(|(cells, targets)| {
                let mut loss = 0.0;
                let mut g = vec![0.0; d];
                for (&i, t) in cells.iter().zip(targets) {
                    let v = sigmoid(self.prior.logit_at(i, z));
                    loss += (v - t).powi(2);
                    let w = 2.0 * (v - t) * v * (1.0 - v);
                    if w != 0.0 {
                        for (gd, b) in g.iter_mut().zip(self.prior.basis_column(i)) {
                            *gd += w * b;
                        }
                    }
                }
                (loss, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; d];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if self.prior_weight != 0.0 {
            loss += self.penalty(z);
            for ((g, z), &s) in grad.iter_mut().zip(z).zip(self.prior.scales()) {
                if s > 0.0 {
                    *g += self.prior_weight * z / (s * s);
                }
            }
        }
        (loss, grad)
    }
}

/// Gradient-descent settings for latent refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentParams {
    pub steps: usize,
    pub lr: f64,
    /// Stop once an accepted step improves the loss by less than this.
    pub tolerance: f64,
    /// Weight of the Gaussian latent penalty; zero leaves the touch loss alone.
    #[serde(default)]
    pub prior_weight: f64,
}

impl DescentParams {
    pub const MAX_HALVINGS: usize = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub z: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted_steps: usize,
}

/// Plain gradient descent in whitened latent coordinates `w = z / scale`,
/// so the step in `z` is `-lr · scale² ⊙ ∂L/∂z`. A step that raises the loss
/// is halved up to five times and otherwise abandoned, which ends the run.
pub fn descend(objective: &LatentObjective, z0: &[f64], params: &DescentParams) -> RefineOutcome {
    let scales = objective.prior.scales();
    let mut z = z0.to_vec();
    let (mut loss, mut grad) = objective.value_and_grad(&z);
    let initial_loss = loss;
    let mut accepted = 0;
    if objective.is_empty() {
        return RefineOutcome {
            z,
            initial_loss,
            final_loss: loss,
            accepted_steps: 0,
        };
    }
    for _ in 0..params.steps {
        let dir: Vec<f64> = grad.iter().zip(scales).map(|(g, s)| -g * s * s).collect();
        let mut step = params.lr;
        let mut next = None;
        for _ in 0..=DescentParams::MAX_HALVINGS {
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(z, d)| z + step * d).collect();
            let trial_loss = objective.value(&trial);
            if trial_loss <= loss {
                next = Some((trial, trial_loss));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, trial_loss)) = next else {
            break;
        };
        let gain = loss - trial_loss;
        z = trial;
        accepted += 1;
        if gain < params.tolerance {
            loss = trial_loss;
            break;
        }
        (loss, grad) = objective.value_and_grad(&z);
    }
    RefineOutcome {
        z,
        initial_loss,
        final_loss: loss,
        accepted_steps: accepted,
    }
}

pub fn refine_latent(
    prior: &ShapePrior,
    z: &[f64],
    cs: &ConstraintSet,
    params: &DescentParams,
) -> Result<RefineOutcome, RefineError> {
    if z.len() != prior.latent_dim() {
        return Err(PriorError::DimMismatch {
            expected: prior.latent_dim(),
            actual: z.len(),
        }
        .into());
    }
    let objective = LatentObjective::new(prior, cs)?.with_prior_weight(params.prior_weight);
    Ok(descend(&objective, z, params))
}

/// Writes targets straight into the grid.
pub fn direct_edit(grid: &VoxelGrid, cs: &ConstraintSet) -> Result<VoxelGrid, RefineError> {
    check_dims(grid, cs)?;
    let mut out = grid.clone();
    for (&i, t) in &cs.targets {
        out.set_index(i, t.value() as f32);
    }
    Ok(out)
}

/// Occupied cells implied by a reconstructed height patch.
///
/// `pose.origin` is the undeformed gel plane at full press. A pixel at
/// height `h` touched the surface at `plane - h · approach`. Pixels below a
/// tenth of the peak height are out of contact; surface points more than
/// half a voxel behind the plane are ignored. Kept points are pushed half a
/// voxel into the object before taking their cell.
pub fn patch_cells(
    dims: Dims,
    frame: &VoxelFrame,
    spec: &SensorSpec,
    pose: &SensorPose,
    heights: &DMatrix<f64>,
) -> Vec<[usize; 3]> {
    let peak = heights.max();
    if !(peak > 0.0) {
        return Vec::new();
    }
    let s = frame.scale();
    let (half_w, half_h) = (spec.contact_width_mm / 2.0, spec.contact_height_mm / 2.0);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in 0..heights.nrows() {
        for c in 0..heights.ncols() {
            let h = heights[(r, c)];
            if h < 0.1 * peak || h > 0.5 * s {
                continue;
            }
            let (x, y) = spec.pixel_position(r, c);
            let plane: Point3<f64> = pose.origin + pose.u_axis * (x - half_w) + pose.v_axis * (y - half_h);
            let inside = plane + pose.approach * (0.5 * s - h);
            let cell = containing_cell(&frame.world_to_voxel(&inside));
            if (0..3).any(|a| cell[a] < 0 || cell[a] >= dims[a] as i64) {
                continue;
            }
            let cell = cell.map(|x| x as usize);
            if seen.insert(index_of(dims, cell)) {
                out.push(cell);
            }
        }
    }
    out
}

pub fn cells_of(dims: Dims, indices: impl IntoIterator<Item = usize>) -> Vec<[usize; 3]> {
    indices.into_iter().map(|i| cell_of(dims, i)).collect()
}
