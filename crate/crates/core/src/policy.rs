//! Touch selection.
//!
//! The active policy sweeps sampling planes around the predicted shape,
//! scores every `k×k` sensor window by summed confidence with an integral
//! map, and picks the least certain window whose approach path is clear.
//! Policies are trait objects looked up by name in a [`PolicyRegistry`].

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raycast::traverse;
use crate::tactile::SensorSpec;
use crate::voxel::{containing_cell, Dims, VoxelGrid, NEIGHBORS_6};

pub const YAWS_DEG: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const PITCHES_DEG: [f64; 10] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];
/// Offset stride between parallel planes, in voxels.
pub const OFFSET_STRIDE: f64 = 4.0;
/// Confidence given to samples off the surface band.
pub const MASKED: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("no touchable region: every candidate is masked or blocked")]
    NoTouchableRegion,
    #[error("region of {k} samples does not fit a {n}-sample grid")]
    RegionTooLarge { k: usize, n: usize },
    #[error("approach to the requested region is blocked")]
    BlockedPlan,
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("scripted plans exhausted after {0} touches")]
    ScriptExhausted(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// Plane orientation from the sweep sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl Orientation {
    /// Index into the sweep, `yaw_index · 10 + pitch_index`.
    pub fn sweep() -> Vec<Orientation> {
        YAWS_DEG
            .iter()
            .flat_map(|&yaw_deg| PITCHES_DEG.iter().map(move |&pitch_deg| Orientation { yaw_deg, pitch_deg }))
            .collect()
    }

    /// Outward plane normal `n` and in-plane axes `u`, `w = n × u`, in voxel
    /// coordinates.
    pub fn axes(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (sy, cy) = self.yaw_deg.to_radians().sin_cos();
        let (sp, cp) = self.pitch_deg.to_radians().sin_cos();
        let n = Vector3::new(cp * cy, cp * sy, sp);
        let u = Vector3::new(-sy, cy, 0.0);
        let w = n.cross(&u);
        (n, u, w)
    }
}

/// Per-cell confidence and surface-band membership of a prediction.
pub struct ConfidenceField {
    dims: Dims,
    confidence: Vec<f64>,
    band: Vec<bool>,
}

impl ConfidenceField {
    /// A cell is in the band when `min ≤ 0.5 ≤ max` over itself and its six
    /// neighbors; neighbors outside the grid count as empty.
    pub fn new(grid: &VoxelGrid) -> Self {
        let dims = grid.dims();
        let band = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let v = grid.get_index(i);
                let c = grid.cell(i).map(|x| x as i64);
                let (mut lo, mut hi) = (v, v);
                for d in NEIGHBORS_6 {
                    let nv = grid.get_signed([c[0] + d[0], c[1] + d[1], c[2] + d[2]]).unwrap_or(0.0);
                    lo = lo.min(nv);
                    hi = hi.max(nv);
                }
                lo <= 0.5 && 0.5 <= hi
            })
            .collect();
        Self {
            dims,
            confidence: grid.values().iter().map(|&v| (f64::from(v) - 0.5).abs()).collect(),
            band,
        }
    }

    pub fn in_band(&self, cell: [usize; 3]) -> bool {
        self.band[crate::voxel::index_of(self.dims, cell)]
    }

    fn index(&self, c: [i64; 3]) -> Option<usize> {
        crate::voxel::checked_cell(self.dims, c).map(|c| crate::voxel::index_of(self.dims, c))
    }

    /// Confidence of the nearest voxel if it is on the band within √3/2 of
    /// the plane, otherwise the masked value.
    pub fn sample(&self, p: &Point3<f64>, plane_point: &Point3<f64>, normal: &Vector3<f64>) -> f64 {
        let c = containing_cell(p);
        let Some(i) = self.index(c) else {
            return MASKED;
        };
        let center = Point3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        if normal.dot(&(center - plane_point)).abs() > 3f64.sqrt() / 2.0 || !self.band[i] {
            return MASKED;
        }
        self.confidence[i]
    }
}

/// Occupied bounding box of a prediction (cells ≥ 0.5), or the whole grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: Point3<f64>,
    pub hi: Point3<f64>,
    pub occupied: bool,
}

impl Bounds {
    pub fn of(grid: &VoxelGrid) -> Self {
        match grid.occupied_bounds(0.5) {
            Some((lo, hi)) => Bounds {
                lo: Point3::from(lo.map(|x| x as f64)),
                hi: Point3::from(hi.map(|x| x as f64)),
                occupied: true,
            },
            None => {
                let d = grid.dims();
                Bounds {
                    lo: Point3::origin(),
                    hi: Point3::new(d[0] as f64 - 1.0, d[1] as f64 - 1.0, d[2] as f64 - 1.0),
                    occupied: false,
                }
            }
        }
    }

    /// Rounded box center.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(((self.lo.coords + self.hi.coords) / 2.0).map(f64::round))
    }

    /// Half-diagonal of the box, at least one voxel.
    pub fn radius(&self) -> f64 {
        ((self.hi - self.lo).norm() / 2.0).max(1.0)
    }

    /// Extreme projections of the box corners onto `n` relative to the center.
    fn projection_range(&self, n: &Vector3<f64>) -> (f64, f64) {
        let c = self.center();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..8 {
            let corner = Point3::new(
                if k & 1 == 0 { self.lo.x } else { self.hi.x },
                if k & 2 == 0 { self.lo.y } else { self.hi.y },
                if k & 4 == 0 { self.lo.z } else { self.hi.z },
            );
            let d = n.dot(&(corner - c));
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }

    /// Plane offsets from the outermost projection inward at the fixed stride.
    pub fn offsets(&self, n: &Vector3<f64>) -> Vec<f64> {
        let (lo, hi) = self.projection_range(n);
        let mut out = Vec::new();
        let mut o = hi;
        while o >= lo - 1e-9 {
            out.push(o);
            o -= OFFSET_STRIDE;
        }
        out
    }
}

/// Confidence samples on one plane, `N×N` at voxel pitch, row index `p`
/// along `u` and column index `q` along `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    pub orientation: Orientation,
    /// Distance of the plane from the box center along `n`, in voxels.
    pub offset: f64,
    pub n: usize,
    pub origin: Point3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub w: Vector3<f64>,
    pub values: Vec<f64>,
}

impl SearchGrid {
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.n + q]
    }

    /// Voxel position of sample `(p, q)`; fractional indices allowed.
    pub fn point(&self, p: f64, q: f64) -> Point3<f64> {
        let h = (self.n as f64 - 1.0) / 2.0;
        self.origin + self.u * (p - h) + self.w * (q - h)
    }
}

/// Smallest odd side that covers the grid diagonal at voxel pitch.
pub fn search_side(dims: Dims) -> usize {
    let diag = dims.iter().map(|&d| (d * d) as f64).sum::<f64>().sqrt();
    2 * (diag / 2.0).ceil() as usize + 1
}

pub fn build_search_grid(grid: &VoxelGrid, orientation: Orientation, offset: f64) -> SearchGrid {
    build_with(&ConfidenceField::new(grid), &Bounds::of(grid), orientation, offset)
}

/// Plane sampling against a precomputed field; the sweep shares one field.
pub fn build_with(field: &ConfidenceField, bounds: &Bounds, orientation: Orientation, offset: f64) -> SearchGrid {
    let (normal, u, w) = orientation.axes();
    let n = search_side(field.dims);
    let origin = bounds.center() + normal * offset;
    let mut sg = SearchGrid {
        orientation,
        offset,
        n,
        origin,
        normal,
        u,
        w,
        values: Vec::with_capacity(n * n),
    };
    for p in 0..n {
        for q in 0..n {
            let x = sg.point(p as f64, q as f64);
            sg.values.push(field.sample(&x, &origin, &normal));
        }
    }
    sg
}

/// Summed-area table with a zero row and column in front.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralMap {
    pub n: usize,
    pub g: Vec<f64>,
}

impl IntegralMap {
    pub fn new(values: &[f64], n: usize) -> Self {
        let m = n + 1;
        let mut g = vec![0.0; m * m];
        for p in 1..=n {
            for q in 1..=n {
                g[p * m + q] = values[(p - 1) * n + q - 1] + g[(p - 1) * m + q] + g[p * m + q - 1]
                    - g[(p - 1) * m + q - 1];
            }
        }
        Self { n, g }
    }

    /// `g[p][q]`: sum of the first `p` rows and `q` columns.
    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.g[p * (self.n + 1) + q]
    }

    /// Sum of the `k×k` window with corner `(p, q)`.
    pub fn window(&self, p: usize, q: usize, k: usize) -> f64 {
        self.at(p + k, q + k) - self.at(p, q + k) - self.at(p + k, q) + self.at(p, q)
    }
}

pub fn integral_map(sg: &SearchGrid) -> IntegralMap {
    IntegralMap::new(&sg.values, sg.n)
}

/// Lowest-sum `k×k` window; ties go to the smallest `(p, q)`.
pub fn min_region(im: &IntegralMap, k: usize) -> Result<((usize, usize), f64), PolicyError> {
    if k == 0 || k > im.n {
        return Err(PolicyError::RegionTooLarge { k, n: im.n });
    }
    let mut best = ((0, 0), f64::INFINITY);
    for p in 0..=im.n - k {
        for q in 0..=im.n - k {
            let s = im.window(p, q, k);
            if s < best.1 {
                best = ((p, q), s);
            }
        }
    }
    Ok(best)
}

/// Candidate sensor placement. Positions and directions are voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchPlan {
    pub orientation: Orientation,
    pub orientation_index: usize,
    pub offset: f64,
    pub offset_index: usize,
    pub corner: (usize, usize),
    pub k: usize,
    pub score: f64,
    /// Region center on the plane.
    pub center: Point3<f64>,
    /// Unit approach direction, from free space into the surface (`-n`).
    pub approach: Vector3<f64>,
    /// In-plane sensor axes.
    pub u: Vector3<f64>,
    pub w: Vector3<f64>,
    /// Where the approach starts.
    pub start: Point3<f64>,
}

impl TouchPlan {
    /// `P yaw pitch offset p q k score cx cy cz`.
    pub fn to_log_line(&self) -> String {
        format!(
            "P {} {} {:?} {} {} {} {:?} {:?} {:?} {:?}",
            self.orientation.yaw_deg,
            self.orientation.pitch_deg,
            self.offset,
            self.corner.0,
            self.corner.1,
            self.k,
            self.score,
            self.center.x,
            self.center.y,
            self.center.z
        )
    }
}

/// Window candidate before the clearance check.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    orientation: usize,
    offset: usize,
    p: usize,
    q: usize,
}

struct Plane {
    grid: SearchGrid,
    offset_index: usize,
    orientation_index: usize,
}

/// All planes of the sweep with their unmasked-center windows.
pub struct CandidateSet {
    planes: Vec<Plane>,
    candidates: Vec<Candidate>,
    plane_of: BTreeMap<(usize, usize), usize>,
    k: usize,
    radius: f64,
}

impl CandidateSet {
    pub fn build(grid: &VoxelGrid, k: usize) -> Result<Self, PolicyError> {
        let field = ConfidenceField::new(grid);
        let bounds = Bounds::of(grid);
        if !bounds.occupied {
            return Err(PolicyError::NoTouchableRegion);
        }
        let n = search_side(grid.dims());
        if k == 0 || k > n {
            return Err(PolicyError::RegionTooLarge { k, n });
        }
        let jobs: Vec<(usize, Orientation, usize, f64)> = Orientation::sweep()
            .into_iter()
            .enumerate()
            .flat_map(|(oi, o)| {
                let (normal, _, _) = o.axes();
                bounds
                    .offsets(&normal)
                    .into_iter()
                    .enumerate()
                    .map(move |(fi, off)| (oi, o, fi, off))
                    .collect::<Vec<_>>()
            })
            .collect();
        let per_plane: Vec<(Plane, Vec<Candidate>)> = jobs
            .par_iter()
            .map(|&(oi, o, fi, off)| {
                let sg = build_with(&field, &bounds, o, off);
                let im = integral_map(&sg);
                let mut cands = Vec::new();
                let h = k / 2;
                for p in 0..=n - k {
                    for q in 0..=n - k {
                        if sg.get(p + h, q + h) == MASKED && !field_unmasked_at(&sg, &field, p + h, q + h) {
                            continue;
                        }
                        cands.push(Candidate {
                            score: im.window(p, q, k),
                            orientation: oi,
                            offset: fi,
                            p,
                            q,
                        });
                    }
                }
                (
                    Plane {
                        grid: sg,
                        offset_index: fi,
                        orientation_index: oi,
                    },
                    cands,
                )
            })
            .collect();
        let mut planes = Vec::with_capacity(per_plane.len());
        let mut candidates = Vec::new();
        let mut plane_of = BTreeMap::new();
        for (i, (plane, cands)) in per_plane.into_iter().enumerate() {
            plane_of.insert((plane.orientation_index, plane.offset_index), i);
            planes.push(plane);
            candidates.extend(cands);
        }
        candidates.sort_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(a.orientation.cmp(&b.orientation))
                .then(a.offset.cmp(&b.offset))
                .then(a.p.cmp(&b.p))
                .then(a.q.cmp(&b.q))
        });
        Ok(Self {
            planes,
            candidates,
            plane_of,
            k,
            radius: bounds.radius(),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn plan(&self, c: &Candidate) -> TouchPlan {
        let plane = &self.planes[self.plane_of[&(c.orientation, c.offset)]];
        let sg = &plane.grid;
        let mid = (self.k as f64 - 1.0) / 2.0;
        let center = sg.point(c.p as f64 + mid, c.q as f64 + mid);
        TouchPlan {
            orientation: sg.orientation,
            orientation_index: plane.orientation_index,
            offset: sg.offset,
            offset_index: plane.offset_index,
            corner: (c.p, c.q),
            k: self.k,
            score: c.score,
            center,
            approach: -sg.normal,
            u: sg.u,
            w: sg.w,
            start: center + sg.normal * (1.5 * self.radius),
        }
    }

    /// Scores of every candidate, best first.
    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score).collect()
    }

    pub fn plan_at(&self, i: usize) -> TouchPlan {
        self.plan(&self.candidates[i])
    }
}

/// The window's center sample is masked only when its value is the mask and
/// the underlying cell is off the band; a band cell with confidence exactly
/// 0.5 counts as unmasked.
fn field_unmasked_at(sg: &SearchGrid, field: &ConfidenceField, p: usize, q: usize) -> bool {
    let x = sg.point(p as f64, q as f64);
    let c = containing_cell(&x);
    match crate::voxel::checked_cell(field.dims, c) {
        Some(cell) => {
            let center = Point3::new(c[0] as f64, c[1] as f64, c[2] as f64);
            field.in_band(cell) && sg.normal.dot(&(center - sg.origin)).abs() <= 3f64.sqrt() / 2.0
        }
        None => false,
    }
}

/// True when no predicted-occupied cell (v > 0.5) lies on the approach
/// segment more than one voxel in front of the plane.
pub fn approach_is_clear(grid: &VoxelGrid, plan: &TouchPlan) -> bool {
    let n = -plan.approach;
    let length = (plan.start - plan.center).norm();
    for step in traverse(grid.dims(), &plan.start, &plan.approach, length) {
        let c = Point3::from(step.cell.map(|x| x as f64));
        if n.dot(&(c - plan.center)) <= 1.0 {
            break;
        }
        if grid.get(step.cell) > 0.5 {
            return false;
        }
    }
    true
}

pub fn next_touch(grid: &VoxelGrid, spec: &SensorSpec) -> Result<TouchPlan, PolicyError> {
    let set = CandidateSet::build(grid, spec.k_voxels)?;
    (0..set.len())
        .map(|i| set.plan_at(i))
        .find(|p| approach_is_clear(grid, p))
        .ok_or(PolicyError::NoTouchableRegion)
}

/// Uniform over the same candidate windows, ignoring score. Blocked draws
/// are dropped and redrawn.
pub fn random_touch(grid: &VoxelGrid, spec: &SensorSpec, rng: &mut ChaCha8Rng) -> Result<TouchPlan, PolicyError> {
    let set = CandidateSet::build(grid, spec.k_voxels)?;
    let mut pool: Vec<usize> = (0..set.len()).collect();
    while !pool.is_empty() {
        let j = rng.random_range(0..pool.len());
        let plan = set.plan_at(pool[j]);
        if approach_is_clear(grid, &plan) {
            return Ok(plan);
        }
        pool.swap_remove(j);
    }
    Err(PolicyError::NoTouchableRegion)
}

/// A hand-picked placement: region center in voxel coordinates plus a sweep
/// orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManualPlan {
    pub center: Point3<f64>,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

/// Turns a manual placement into a plan, scoring its window on the plane
/// through the chosen center.
pub fn plan_manual(grid: &VoxelGrid, spec: &SensorSpec, manual: &ManualPlan) -> Result<TouchPlan, PolicyError> {
    let orientation = Orientation {
        yaw_deg: manual.yaw_deg,
        pitch_deg: manual.pitch_deg,
    };
    let sweep = Orientation::sweep();
    let orientation_index = sweep
        .iter()
        .position(|o| o == &orientation)
        .ok_or_else(|| PolicyError::InvalidPlan("orientation is not in the sweep".into()))?;
    if !manual.center.iter().all(|x| x.is_finite()) {
        return Err(PolicyError::InvalidPlan("center must be finite".into()));
    }
    let field = ConfidenceField::new(grid);
    let bounds = Bounds::of(grid);
    let (n, u, w) = orientation.axes();
    let k = spec.k_voxels;
    let mid = (k as f64 - 1.0) / 2.0;
    let mut score = 0.0;
    for p in 0..k {
        for q in 0..k {
            let x = manual.center + u * (p as f64 - mid) + w * (q as f64 - mid);
            score += field.sample(&x, &manual.center, &n);
        }
    }
    let plan = TouchPlan {
        orientation,
        orientation_index,
        offset: n.dot(&(manual.center - bounds.center())),
        offset_index: 0,
        corner: (0, 0),
        k,
        score,
        center: manual.center,
        approach: -n,
        u,
        w,
        start: manual.center + n * (1.5 * bounds.radius()),
    };
    if !approach_is_clear(grid, &plan) {
        return Err(PolicyError::BlockedPlan);
    }
    Ok(plan)
}

/// How a policy's touches update the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Latent refinement through the prior.
    Refine,
    /// Write touch results straight into voxels.
    DirectEdit,
}

pub trait TouchPolicy: Send {
    fn name(&self) -> &str;
    fn update_rule(&self) -> UpdateRule {
        UpdateRule::Refine
    }
    fn plan(&mut self, grid: &VoxelGrid, spec: &SensorSpec) -> Result<TouchPlan, PolicyError>;
}

pub struct ActivePolicy;

impl TouchPolicy for ActivePolicy {
    fn name(&self) -> &str {
        "active"
    }

    fn plan(&mut self, grid: &VoxelGrid, spec: &SensorSpec) -> Result<TouchPlan, PolicyError> {
        next_touch(grid, spec)
    }
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl TouchPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn plan(&mut self, grid: &VoxelGrid, spec: &SensorSpec) -> Result<TouchPlan, PolicyError> {
        random_touch(grid, spec, &mut self.rng)
    }
}

/// Active selection with voxel writes instead of the prior.
pub struct DirectEditPolicy;

impl TouchPolicy for DirectEditPolicy {
    fn name(&self) -> &str {
        "direct-edit"
    }

    fn update_rule(&self) -> UpdateRule {
        UpdateRule::DirectEdit
    }

    fn plan(&mut self, grid: &VoxelGrid, spec: &SensorSpec) -> Result<TouchPlan, PolicyError> {
        next_touch(grid, spec)
    }
}

/// Replays placements chosen by a person, in order.
pub struct HumanPolicy {
    script: Vec<ManualPlan>,
    next: usize,
}

impl HumanPolicy {
    pub fn new(script: Vec<ManualPlan>) -> Self {
        Self { script, next: 0 }
    }
}

impl TouchPolicy for HumanPolicy {
    fn name(&self) -> &str {
        "human"
    }

    fn plan(&mut self, grid: &VoxelGrid, spec: &SensorSpec) -> Result<TouchPlan, PolicyError> {
        let m = self.script.get(self.next).ok_or(PolicyError::ScriptExhausted(self.next))?;
        self.next += 1;
        plan_manual(grid, spec, m)
    }
}

/// Inputs a policy constructor may use.
#[derive(Debug, Clone, Default)]
pub struct PolicyArgs {
    pub seed: u64,
    pub script: Vec<ManualPlan>,
}

pub type PolicyFactory = fn(&PolicyArgs) -> Box<dyn TouchPolicy>;

/// Name → constructor table.
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("active", |_| Box::new(ActivePolicy));
        r.register("random", |a| Box::new(RandomPolicy::new(a.seed)));
        r.register("human", |a| Box::new(HumanPolicy::new(a.script.clone())));
        r.register("direct-edit", |_| Box::new(DirectEditPolicy));
        r
    }
}

impl PolicyRegistry {
    pub fn register(&mut self, name: &str, factory: PolicyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, args: &PolicyArgs) -> Result<Box<dyn TouchPolicy>, PolicyError> {
        self.factories
            .get(name)
            .map(|f| f(args))
            .ok_or_else(|| PolicyError::UnknownPolicy(name.to_string()))
    }
}

impl fmt::Debug for PolicyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}
