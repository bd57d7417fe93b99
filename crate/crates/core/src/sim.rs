//! Ground-truth scenes, simulated touches and the experiment runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{render_depth, Camera, CameraConfig, DepthMap, DepthNoise};
use crate::frames::VoxelFrame;
use crate::policy::{ManualPlan, PolicyArgs, PolicyError, PolicyRegistry, TouchPlan, TouchPolicy, UpdateRule};
use crate::prior::{vision_params, visibility_constraints, PriorError, ShapePrior};
use crate::raycast::traverse;
use crate::refine::{
    descend, direct_edit, patch_cells, refine_latent, ConstraintSet, DescentParams, LatentObjective, RefineError,
    TouchRecord,
};
use crate::shapes::{Family, Shape, ShapeError, ShapeParams, FLOOR_Z};
use crate::tactile::{SensorPose, SensorSpec, TactileError, TactileFrame, TactileSensor};
use crate::voxel::{chamfer, extract_surface, ChamferDistance, PointCloud, VoxelError, VoxelGrid};

/// Gel indentation at full press, mm.
pub const PRESS_MM: f64 = 0.5;
/// Calibration ball radius, mm.
pub const CALIBRATION_RADIUS_MM: f64 = 4.0;
pub const CALIBRATION_PRESSES: usize = 50;
pub const CALIBRATION_SEED: u64 = 0;
/// Probe depth past the plan center, as a multiple of the approach length to it.
pub const PROBE_FACTOR: f64 = 1.2;
pub const CSV_HEADER: &str = "scene,policy,seed,touch_index,cd_sum,cd_norm,ms";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("plan center {0:?} is outside the grid")]
    PlanOutOfBounds([f64; 3]),
    #[error("bad scene: {0}")]
    BadScene(String),
    #[error("prior resolution {prior:?} does not match scene resolution {scene}")]
    PriorMismatch { prior: [usize; 3], scene: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tactile(#[from] TactileError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub w_mm: f64,
    pub h_mm: f64,
    pub res: [usize; 2],
    pub k_voxels: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self::from(SensorSpec::default())
    }
}

impl From<SensorSpec> for SensorConfig {
    fn from(s: SensorSpec) -> Self {
        Self {
            w_mm: s.contact_width_mm,
            h_mm: s.contact_height_mm,
            res: [s.res_u, s.res_v],
            k_voxels: s.k_voxels,
        }
    }
}

impl From<SensorConfig> for SensorSpec {
    fn from(c: SensorConfig) -> Self {
        Self {
            contact_width_mm: c.w_mm,
            contact_height_mm: c.h_mm,
            res_u: c.res[0],
            res_v: c.res[1],
            k_voxels: c.k_voxels,
        }
    }
}

/// Scene file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub resolution: usize,
    pub voxel_mm: f64,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub sensor: SensorConfig,
    pub shape: ShapeParams,
    #[serde(default)]
    pub noise: DepthNoise,
    #[serde(default)]
    pub seed: u64,
}

impl SceneConfig {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::BadScene(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// Procedural scenes cycling through the families.
pub fn procedural_scenes(resolution: usize, voxel_mm: f64, count: usize, seed: u64) -> Vec<SceneConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| SceneConfig {
            resolution,
            voxel_mm,
            camera: CameraConfig::default(),
            sensor: SensorConfig::default(),
            shape: Family::ALL[i % Family::ALL.len()].sample(resolution, &mut rng),
            noise: DepthNoise::default(),
            seed: seed.wrapping_add(i as u64),
        })
        .collect()
}

/// A built world: binary truth, camera and calibrated sensor.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub shape: Shape,
    pub frame: VoxelFrame,
    pub truth: VoxelGrid,
    pub camera: Camera,
    pub sensor: Arc<TactileSensor>,
    truth_surface: PointCloud,
}

impl Scene {
    pub fn build(config: SceneConfig) -> Result<Self, SimError> {
        let spec = SensorSpec::from(config.sensor);
        spec.validate()?;
        let sensor = TactileSensor::calibrated(spec, CALIBRATION_RADIUS_MM, CALIBRATION_PRESSES, CALIBRATION_SEED)?;
        Self::with_sensor(config, Arc::new(sensor))
    }

    /// Builds the scene around an already calibrated sensor.
    pub fn with_sensor(config: SceneConfig, sensor: Arc<TactileSensor>) -> Result<Self, SimError> {
        if config.resolution < 8 {
            return Err(SimError::BadScene(format!("resolution {} below 8", config.resolution)));
        }
        if !(config.voxel_mm > 0.0 && config.voxel_mm.is_finite()) {
            return Err(SimError::BadScene("voxel_mm must be positive".into()));
        }
        if sensor.spec != SensorSpec::from(config.sensor) {
            return Err(SimError::BadScene("sensor does not match the scene's sensor spec".into()));
        }
        let frame = VoxelFrame::tabletop(config.resolution, config.voxel_mm);
        let shape = Shape::new(config.shape, config.resolution)?;
        let truth = shape.voxelize(frame)?;
        let truth_surface = extract_surface(&truth, 0.5)?;
        let axis = (config.resolution as f64 - 1.0) / 2.0;
        let (_, hi) = truth.occupied_bounds(0.5).expect("voxelize guarantees occupancy");
        let mid = Point3::new(axis, axis, (FLOOR_Z + hi[2] as f64) / 2.0);
        let camera = Camera::looking_at(
            &config.camera,
            frame.voxel_to_world(&mid),
            shape.bounding_radius() * config.voxel_mm,
        );
        Ok(Self {
            config,
            shape,
            frame,
            truth,
            camera,
            sensor,
            truth_surface,
        })
    }

    pub fn spec(&self) -> SensorSpec {
        self.sensor.spec
    }

    pub fn truth_surface(&self) -> &PointCloud {
        &self.truth_surface
    }

    pub fn render_depth(&self, seed: u64) -> DepthMap {
        render_depth(&self.truth, &self.camera, &self.config.noise, seed)
    }

    /// Chamfer distance between the prediction's and the truth's surfaces, in mm.
    pub fn chamfer(&self, prediction: &VoxelGrid) -> Result<ChamferDistance, SimError> {
        Ok(chamfer(&extract_surface(prediction, 0.5)?, &self.truth_surface)?)
    }

    /// Distance along `dir` (voxels) from `origin` to the analytic surface,
    /// sampled at quarter-voxel steps and bisected.
    fn surface_distance(&self, origin: &Point3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        if self.shape.contains(origin) {
            return Some(0.0);
        }
        let step = 0.25;
        let mut t0 = 0.0;
        while t0 < t_max {
            let t1 = t0 + step;
            if self.shape.contains(&(origin + dir * t1)) {
                let (mut lo, mut hi) = (t0, t1);
                for _ in 0..30 {
                    let m = 0.5 * (lo + hi);
                    if self.shape.contains(&(origin + dir * m)) {
                        hi = m;
                    } else {
                        lo = m;
                    }
                }
                return Some(hi);
            }
            t0 = t1;
        }
        None
    }

    /// Gel indentation of the true surface under a sensor pressed along the
    /// plan, plus the pose of the undeformed gel plane at full press.
    fn contact_heights(&self, plan: &TouchPlan, t_max: f64) -> (DMatrix<f64>, SensorPose) {
        let spec = self.spec();
        let s = self.config.voxel_mm;
        let (half_w, half_h) = (spec.contact_width_mm / 2.0, spec.contact_height_mm / 2.0);
        let reach = t_max + (half_w.hypot(half_h) / s) * 4.0;
        let dist: Vec<Option<f64>> = (0..spec.res_v * spec.res_u)
            .into_par_iter()
            .map(|i| {
                let (x, y) = spec.pixel_position(i / spec.res_u, i % spec.res_u);
                let o = plan.start + plan.u * ((x - half_w) / s) + plan.w * ((y - half_h) / s);
                self.surface_distance(&o, &plan.approach, reach)
            })
            .collect();
        let first = dist.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let plane_t = first + PRESS_MM / s;
        let heights = DMatrix::from_fn(spec.res_v, spec.res_u, |r, c| match dist[r * spec.res_u + c] {
            Some(d) => ((plane_t - d) * s).max(0.0),
            None => 0.0,
        });
        let pose = SensorPose {
            origin: self.frame.voxel_to_world(&(plan.start + plan.approach * plane_t)),
            u_axis: self.frame.voxel_dir_to_world(&plan.u).normalize(),
            v_axis: self.frame.voxel_dir_to_world(&plan.w).normalize(),
            approach: self.frame.voxel_dir_to_world(&plan.approach).normalize(),
        };
        (heights, pose)
    }
}

/// A touch's record plus the tactile frame for hits.
#[derive(Debug, Clone)]
pub struct TouchOutcome {
    pub record: TouchRecord,
    pub tactile: Option<TactileFrame>,
}

/// Marches the plan's approach through the truth. The first occupied cell is
/// the contact; the probe gives up `PROBE_FACTOR` times the start-to-center
/// distance from the start.
pub fn execute_touch(scene: &Scene, plan: &TouchPlan) -> Result<TouchOutcome, SimError> {
    let dims = scene.truth.dims();
    let c = plan.center;
    if !(0..3).all(|a| c[a].is_finite() && c[a] >= -0.5 && c[a] <= dims[a] as f64 - 0.5) {
        return Err(SimError::PlanOutOfBounds([c.x, c.y, c.z]));
    }
    let t_max = PROBE_FACTOR * (plan.start - plan.center).norm();
    let mut ray_cells = Vec::new();
    let mut contact = None;
    for step in traverse(dims, &plan.start, &plan.approach, t_max) {
        if scene.truth.get(step.cell) >= 0.5 {
            contact = Some(step.cell);
            break;
        }
        ray_cells.push(step.cell);
    }
    let Some(contact) = contact else {
        return Ok(TouchOutcome {
            record: TouchRecord::miss(plan.approach, ray_cells),
            tactile: None,
        });
    };
    let (heights, pose) = scene.contact_heights(plan, t_max);
    let frame = scene.sensor.sense(&heights, Some(pose))?;
    let patch = patch_cells(dims, &scene.frame, &scene.spec(), &pose, &frame.height)
        .into_iter()
        .filter(|&p| scene.truth.get(p) >= 0.5)
        .collect();
    Ok(TouchOutcome {
        record: TouchRecord {
            hit: true,
            contact: Some(contact),
            normal: plan.approach,
            ray_cells,
            patch_cells: patch,
        },
        tactile: Some(frame),
    })
}


/// Estimate after the single depth view.
#[derive(Debug, Clone)]
pub struct VisionResult {
    pub z: Vec<f64>,
    pub grid: VoxelGrid,
    pub cd: ChamferDistance,
    /// Visibility constraints from the depth view.
    pub constraints: ConstraintSet,
    /// No depth return: the estimate is the prior mean.
    pub blind: bool,
}

pub fn vision_estimate(
    scene: &Scene,
    prior: &ShapePrior,
    seed: u64,
    params: &DescentParams,
) -> Result<VisionResult, SimError> {
    check_prior(scene, prior)?;
    let depth = scene.render_depth(seed);
    let (z, constraints, blind) = if depth.returns() == 0 {
        (vec![0.0; prior.latent_dim()], ConstraintSet::new(prior.dims()), true)
    } else {
        let cs = visibility_constraints(&depth, prior.dims(), &scene.frame);
        let objective = LatentObjective::new(prior, &cs)?.with_prior_weight(params.prior_weight);
        (descend(&objective, &vec![0.0; prior.latent_dim()], params).z, cs, false)
    };
    let grid = prior.decode(&z, scene.frame)?;
    let cd = scene.chamfer(&grid)?;
    Ok(VisionResult {
        z,
        grid,
        cd,
        constraints,
        blind,
    })
}

fn check_prior(scene: &Scene, prior: &ShapePrior) -> Result<(), SimError> {
    if prior.dims() != [scene.config.resolution; 3] {
        return Err(SimError::PriorMismatch {
            prior: prior.dims(),
            scene: scene.config.resolution,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TouchStep {
    pub touch_index: usize,
    pub plan: Option<TouchPlan>,
    pub record: Option<TouchRecord>,
    pub cd_sum: f64,
    pub cd_norm: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub policy: String,
    pub seed: u64,
    pub steps: Vec<TouchStep>,
    pub blind: bool,
    /// Why the episode ended before its touch budget, if it did.
    pub stopped: Option<String>,
    #[serde(skip)]
    pub final_grid: Option<VoxelGrid>,
}

impl EpisodeResult {
    pub fn cd_history(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.cd_sum).collect()
    }

    pub fn final_cd(&self) -> f64 {
        self.steps.last().map(|s| s.cd_sum).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    /// Record wall time per step; off keeps output byte-reproducible.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "vision_params")]
    pub vision: DescentParams,
    #[serde(default = "refine_params")]
    pub refine: DescentParams,
    /// Keep fitting the depth view while refining on touches.
    #[serde(default = "yes")]
    pub keep_vision: bool,
}

fn yes() -> bool {
    true
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            timing: false,
            vision: vision_params(),
            refine: refine_params(),
            keep_vision: true,
        }
    }
}

/// Descent settings for refinement after each touch.
pub fn refine_params() -> DescentParams {
    DescentParams {
        steps: 50,
        lr: 0.001,
        tolerance: 1e-6,
        prior_weight: 1.0,
    }
}

/// Mutable state of an episode between touches.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub z: Vec<f64>,
    pub vision_grid: VoxelGrid,
    pub grid: VoxelGrid,
    /// Touch constraints only.
    pub constraints: ConstraintSet,
    /// Depth-view constraints with the touches marked over them.
    pub joint: ConstraintSet,
}

impl EpisodeState {
    pub fn new(vision: &VisionResult) -> Self {
        Self {
            z: vision.z.clone(),
            vision_grid: vision.grid.clone(),
            grid: vision.grid.clone(),
            constraints: ConstraintSet::new(vision.grid.dims()),
            joint: vision.constraints.clone(),
        }
    }

    /// Executes a plan on the truth and folds the record into the estimate.
    pub fn apply(
        &mut self,
        scene: &Scene,
        prior: &ShapePrior,
        plan: &TouchPlan,
        rule: UpdateRule,
        options: &EpisodeOptions,
    ) -> Result<TouchOutcome, SimError> {
        let outcome = execute_touch(scene, plan)?;
        self.constraints.add_record(outcome.record.clone())?;
        self.joint.add_record(outcome.record.clone())?;
        match rule {
            UpdateRule::Refine => {
                let cs = if options.keep_vision { &self.joint } else { &self.constraints };
                self.z = refine_latent(prior, &self.z, cs, &options.refine)?.z;
                self.grid = prior.decode(&self.z, scene.frame)?;
            }
            UpdateRule::DirectEdit => {
                self.grid = direct_edit(&self.vision_grid, &self.constraints)?;
            }
        }
        Ok(outcome)
    }

    /// The prediction with every touched cell set to its measured value,
    /// which is what the policy plans on.
    pub fn belief(&self) -> Result<VoxelGrid, SimError> {
        Ok(direct_edit(&self.grid, &self.constraints)?)
    }
}

fn elapsed_ms(t: Instant, timing: bool) -> f64 {
    if timing {
        t.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

/// Runs the touch loop from a precomputed vision estimate.
pub fn run_from_vision(
    scene: &Scene,
    prior: &ShapePrior,
    vision: &VisionResult,
    policy: &mut dyn TouchPolicy,
    seed: u64,
    n_touches: usize,
    options: EpisodeOptions,
) -> Result<EpisodeResult, SimError> {
    let mut state = EpisodeState::new(vision);
    let mut steps = vec![TouchStep {
        touch_index: 0,
        plan: None,
        record: None,
        cd_sum: vision.cd.sum,
        cd_norm: vision.cd.normalized,
        ms: 0.0,
    }];
    let mut stopped = None;
    for t in 1..=n_touches {
        let start = Instant::now();
        let plan = match policy.plan(&state.belief()?, &scene.spec()) {
            Ok(p) => p,
            Err(e @ PolicyError::NoTouchableRegion) => {
                log::warn!("episode stopped after {} touches: {e}", t - 1);
                stopped = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let outcome = state.apply(scene, prior, &plan, policy.update_rule(), &options)?;
        let cd = scene.chamfer(&state.grid)?;
        steps.push(TouchStep {
            touch_index: t,
            plan: Some(plan),
            record: Some(outcome.record),
            cd_sum: cd.sum,
            cd_norm: cd.normalized,
            ms: elapsed_ms(start, options.timing),
        });
    }
    Ok(EpisodeResult {
        policy: policy.name().to_string(),
        seed,
        steps,
        blind: vision.blind,
        stopped,
        final_grid: Some(state.grid),
    })
}

pub fn run_episode(
    scene: &Scene,
    prior: &ShapePrior,
    policy: &mut dyn TouchPolicy,
    seed: u64,
    n_touches: usize,
    options: EpisodeOptions,
) -> Result<EpisodeResult, SimError> {
    let start = Instant::now();
    let vision = vision_estimate(scene, prior, seed, &options.vision)?;
    let mut episode = run_from_vision(scene, prior, &vision, policy, seed, n_touches, options)?;
    episode.steps[0].ms = elapsed_ms(start, options.timing);
    Ok(episode)
}

/// One episode of a registered policy, seeded the same way as a suite row.
#[allow(clippy::too_many_arguments)]
pub fn run_policy_episode(
    scene: &Scene,
    prior: &ShapePrior,
    registry: &PolicyRegistry,
    policy_name: &str,
    script: Vec<ManualPlan>,
    run_seed: u64,
    n_touches: usize,
    options: EpisodeOptions,
) -> Result<EpisodeResult, SimError> {
    let seed = episode_seed(scene.config.seed, run_seed);
    let mut policy = registry.create(policy_name, &PolicyArgs { seed, script })?;
    let start = Instant::now();
    let vision = vision_estimate(scene, prior, seed, &options.vision)?;
    let mut episode = run_from_vision(scene, prior, &vision, policy.as_mut(), run_seed, n_touches, options)?;
    episode.steps[0].ms = elapsed_ms(start, options.timing);
    Ok(episode)
}

/// Mixes a scene seed and a run seed into one episode seed.
pub fn episode_seed(scene_seed: u64, run_seed: u64) -> u64 {
    scene_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ run_seed.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScene {
    pub name: String,
    #[serde(flatten)]
    pub scene: SceneConfig,
}

/// Procedurally sampled test scenes appended to a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedScenes {
    pub count: usize,
    pub seed: u64,
    pub resolution: usize,
    pub voxel_mm: f64,
    #[serde(default)]
    pub noise: DepthNoise,
}

/// How to obtain the prior when none is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTraining {
    pub corpus: crate::shapes::ShapeCorpusSpec,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    #[serde(default)]
    pub scenes: Vec<NamedScene>,
    #[serde(default)]
    pub generate: Option<GeneratedScenes>,
    pub policies: Vec<String>,
    pub seeds: Vec<u64>,
    pub touches: usize,
    #[serde(default)]
    pub prior: Option<PriorTraining>,
}

impl SuiteConfig {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::BadScene(e.to_string()))
    }

    /// Listed scenes followed by generated ones.
    pub fn all_scenes(&self) -> Vec<NamedScene> {
        let mut out = self.scenes.clone();
        if let Some(g) = &self.generate {
            for (i, mut s) in procedural_scenes(g.resolution, g.voxel_mm, g.count, g.seed)
                .into_iter()
                .enumerate()
            {
                s.noise = g.noise;
                out.push(NamedScene {
                    name: format!("{}-{:02}", s.shape.family().name(), i),
                    scene: s,
                });
            }
        }
        out
    }

    /// Overrides every scene seed and run seed.
    pub fn override_seed(&mut self, seed: u64) {
        for s in &mut self.scenes {
            s.scene.seed = seed;
        }
        if let Some(g) = &mut self.generate {
            g.seed = seed;
        }
        for (i, s) in self.seeds.iter_mut().enumerate() {
            *s = seed.wrapping_add(i as u64);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub scene: String,
    pub policy: String,
    pub seed: u64,
    pub touch_index: usize,
    pub cd_sum: f64,
    pub cd_norm: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteFailure {
    pub scene: String,
    pub policy: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteResult {
    pub rows: Vec<SuiteRow>,
    pub failures: Vec<SuiteFailure>,
}

/// Aggregate over seeds for one scene, policy and touch index.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scene: String,
    pub policy: String,
    pub touch_index: usize,
    pub mean: f64,
    pub median: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl SuiteResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:?},{:?},{:?}",
                r.scene, r.policy, r.seed, r.touch_index, r.cd_sum, r.cd_norm, r.ms
            );
        }
        s
    }

    /// Mean and median CD over seeds.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.scene.clone(), r.policy.clone(), r.touch_index))
                .or_default()
                .push(r.cd_sum);
        }
        groups
            .into_iter()
            .map(|((scene, policy, touch_index), mut v)| SummaryRow {
                scene,
                policy,
                touch_index,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: median(&mut v),
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("scene,policy,touch_index,cd_mean,cd_median\n");
        for r in self.summary() {
            let _ = writeln!(s, "{},{},{},{:?},{:?}", r.scene, r.policy, r.touch_index, r.mean, r.median);
        }
        s
    }

    /// CD at the given touch, per episode, for one policy. Episodes that
    /// stopped early contribute their last value.
    pub fn cd_at(&self, policy: &str, touch: usize) -> Vec<f64> {
        let mut last: BTreeMap<(String, u64), (usize, f64)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.policy == policy && r.touch_index <= touch) {
            let e = last.entry((r.scene.clone(), r.seed)).or_insert((r.touch_index, r.cd_sum));
            if r.touch_index >= e.0 {
                *e = (r.touch_index, r.cd_sum);
            }
        }
        last.into_values().map(|(_, cd)| cd).collect()
    }
}

/// Every scene × seed × policy. Vision runs once per scene and depth-noise
/// seed; episodes run in parallel and rows come out in config order.
pub fn run_suite(
    config: &SuiteConfig,
    prior: &ShapePrior,
    registry: &PolicyRegistry,
    options: EpisodeOptions,
) -> Result<SuiteResult, SimError> {
    for p in &config.policies {
        registry.create(p, &PolicyArgs::default())?;
    }
    let scenes = config.all_scenes();
    let mut sensors: BTreeMap<String, Arc<TactileSensor>> = BTreeMap::new();
    let mut built = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let spec = SensorSpec::from(s.scene.sensor);
        let key = format!("{spec:?}");
        let sensor = match sensors.get(&key) {
            Some(x) => x.clone(),
            None => {
                spec.validate()?;
                let x = Arc::new(TactileSensor::calibrated(
                    spec,
                    CALIBRATION_RADIUS_MM,
                    CALIBRATION_PRESSES,
                    CALIBRATION_SEED,
                )?);
                sensors.insert(key, x.clone());
                x
            }
        };
        built.push(Scene::with_sensor(s.scene.clone(), sensor).map_err(|e| (s.name.clone(), e)));
    }
    // Noiseless depth does not depend on the seed, so vision is shared.
    let vision_seed = |i: usize, run_seed: u64| -> u64 {
        match &built[i] {
            Ok(s) if s.config.noise.depth_sigma_mm > 0.0 => episode_seed(s.config.seed, run_seed),
            _ => 0,
        }
    };
    let vision_keys: Vec<(usize, u64)> = (0..scenes.len())
        .flat_map(|i| config.seeds.iter().map(move |&s| (i, vision_seed(i, s))))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let visions: BTreeMap<(usize, u64), Result<VisionResult, String>> = vision_keys
        .par_iter()
        .map(|&(i, seed)| {
            let v = match &built[i] {
                Ok(scene) => vision_estimate(scene, prior, seed, &options.vision).map_err(|e| e.to_string()),
                Err((_, e)) => Err(e.to_string()),
            };
            ((i, seed), v)
        })
        .collect();
    let jobs: Vec<(usize, u64, &String)> = (0..scenes.len())
        .flat_map(|i| {
            config
                .seeds
                .iter()
                .flat_map(move |&s| config.policies.iter().map(move |p| (i, s, p)))
        })
        .collect();
    let per_job: Vec<(Vec<SuiteRow>, Vec<SuiteFailure>)> = jobs
        .par_iter()
        .map(|&(i, run_seed, p)| {
            let name = &scenes[i].name;
            let fail = |e: &dyn std::fmt::Display| {
                log::error!("{name} {p} seed {run_seed}: {e}");
                (
                    vec![],
                    vec![SuiteFailure {
                        scene: name.clone(),
                        policy: p.clone(),
                        seed: run_seed,
                        error: e.to_string(),
                    }],
                )
            };
            let scene = match &built[i] {
                Ok(s) => s,
                Err((_, e)) => return fail(e),
            };
            let vision = match &visions[&(i, vision_seed(i, run_seed))] {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            let seed = episode_seed(scene.config.seed, run_seed);
            let mut policy = registry
                .create(p, &PolicyArgs { seed, script: vec![] })
                .expect("checked above");
            match run_from_vision(scene, prior, vision, policy.as_mut(), run_seed, config.touches, options) {
                Ok(ep) => (
                    ep.steps
                        .iter()
                        .map(|s| SuiteRow {
                            scene: name.clone(),
                            policy: p.clone(),
                            seed: run_seed,
                            touch_index: s.touch_index,
                            cd_sum: s.cd_sum,
                            cd_norm: s.cd_norm,
                            ms: s.ms,
                        })
                        .collect(),
                    vec![],
                ),
                Err(e) => fail(&e),
            }
        })
        .collect();
    let mut result = SuiteResult::default();
    for (rows, failures) in per_job {
        result.rows.extend(rows);
        result.failures.extend(failures);
    }
    Ok(result)
}
