use std::sync::OnceLock;

use nalgebra::{DMatrix, Point3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tactoform_core::frames::{solve_world_to_robot, VoxelFrame};
use tactoform_core::policy::{min_region, next_touch, random_touch, CandidateSet, IntegralMap, PolicyRegistry};
use tactoform_core::prior::{fit_prior, ShapePrior};
use tactoform_core::refine::{direct_edit, refine_latent, touch_loss, ConstraintSet, DescentParams, Target};
use tactoform_core::shapes::{generate_corpus, Family, ShapeCorpusSpec};
use tactoform_core::sim::{
    execute_touch, refine_params, run_policy_episode, EpisodeOptions, Scene, SceneConfig, SensorConfig,
};
use tactoform_core::tactile::{divergence, integrate_heights, laplacian, SensorSpec};
use tactoform_core::voxel::{
    chamfer_distance, confidence, decode_grid, encode_grid, extract_surface, PointCloud, VoxelGrid,
};

fn small_prior() -> &'static ShapePrior {
    static PRIOR: OnceLock<ShapePrior> = OnceLock::new();
    PRIOR.get_or_init(|| {
        let corpus = generate_corpus(&ShapeCorpusSpec::balanced(16, 4, 21)).unwrap();
        let refs: Vec<_> = corpus.iter().map(|c| &c.grid).collect();
        fit_prior(&refs, 12).unwrap()
    })
}

fn grid_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, n)
}

fn cloud() -> impl Strategy<Value = Vec<Point3<f64>>> {
    prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 1..40)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
}

fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64).prop_map(|(r, p, y)| Rotation3::from_euler_angles(r, p, y))
}

fn frame() -> impl Strategy<Value = VoxelFrame> {
    (rotation(), prop::array::uniform3(-50.0..50.0f64), prop::array::uniform3(-500.0..500.0f64), 1u32..6, 0.1..4.0f64)
        .prop_map(|(r, ov, ow, ppv, mm)| {
            let m = r.into_inner();
            VoxelFrame::new(
                Point3::from(ov),
                Point3::from(ow),
                [m.column(0).into(), m.column(1).into(), m.column(2).into()],
                ppv,
                mm,
            )
            .unwrap()
        })
}

fn scene(family_index: usize, seed: u64, resolution: usize) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneConfig {
        resolution,
        voxel_mm: 2.0,
        camera: Default::default(),
        sensor: SensorConfig::default(),
        shape: Family::ALL[family_index % Family::ALL.len()].sample(resolution, &mut rng),
        noise: Default::default(),
        seed,
    }
}

fn quick_options() -> EpisodeOptions {
    EpisodeOptions {
        vision: DescentParams {
            steps: 60,
            ..tactoform_core::prior::vision_params()
        },
        refine: DescentParams {
            steps: 8,
            ..refine_params()
        },
        ..EpisodeOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn confidence_is_a_pure_function(values in grid_values(60)) {
        let g = VoxelGrid::from_values([3, 4, 5], values, VoxelFrame::default()).unwrap();
        prop_assert_eq!(confidence(&g), confidence(&g));
        for (c, v) in confidence(&g).values.iter().zip(g.values()) {
            prop_assert!((c - (*v as f64 - 0.5).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_translation_invariant(a in cloud(), b in cloud(), t in prop::array::uniform3(-100.0..100.0f64)) {
        let (pa, pb) = (PointCloud::new(a.clone()), PointCloud::new(b.clone()));
        let ab = chamfer_distance(&pa, &pb).unwrap();
        prop_assert_eq!(ab, chamfer_distance(&pb, &pa).unwrap());
        prop_assert_eq!(chamfer_distance(&pa, &pa).unwrap(), 0.0);
        let shift = Vector3::from(t);
        let moved = |c: &[Point3<f64>]| PointCloud::new(c.iter().map(|p| p + shift).collect());
        let ab2 = chamfer_distance(&moved(&a), &moved(&b)).unwrap();
        prop_assert!((ab - ab2).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn surface_is_a_subset_of_occupied_cells(values in grid_values(125)) {
        let g = VoxelGrid::from_values([5, 5, 5], values, VoxelFrame::default()).unwrap();
        if let Ok(pc) = extract_surface(&g, 0.5) {
            for p in &pc.points {
                let cell = [p.x, p.y, p.z].map(|c| c.round() as usize);
                prop_assert!(g.get(cell) >= 0.5);
            }
        }
    }

    #[test]
    fn vxg1_round_trips(values in grid_values(24)) {
        let g = VoxelGrid::from_values([2, 3, 4], values, VoxelFrame::default()).unwrap();
        prop_assert_eq!(decode_grid(&encode_grid(&g), VoxelFrame::default()).unwrap(), g);
    }

    #[test]
    fn voxel_world_round_trip(f in frame(), p in prop::array::uniform3(-10.0..80.0f64)) {
        let p = Point3::from(p);
        prop_assert!((f.world_to_voxel(&f.voxel_to_world(&p)) - p).norm() <= 1e-9);
    }

    #[test]
    fn registration_is_equivariant(
        r in rotation(),
        q in rotation(),
        t in prop::array::uniform3(-200.0..200.0f64),
        pts in prop::array::uniform3(prop::array::uniform3(-100.0..100.0f64)),
    ) {
        let world = pts.map(Point3::from);
        let e1 = world[1] - world[0];
        let e2 = world[2] - world[0];
        prop_assume!(e1.cross(&e2).norm() > 1.0);
        let robot = world.map(|p| r * p + Vector3::from(t));
        let sol = solve_world_to_robot(&world, &robot).unwrap();
        let rot = sol.rotation;
        prop_assert!((rot.transpose() * rot - nalgebra::Matrix3::identity()).amax() <= 1e-9);
        // Rotating both sets by Q conjugates the solved rotation.
        let qw = world.map(|p| q * p);
        let qr = robot.map(|p| q * p);
        let conj = solve_world_to_robot(&qw, &qr).unwrap();
        let want = q.matrix() * rot * q.matrix().transpose();
        prop_assert!((conj.rotation - want).amax() <= 1e-9);
    }

    #[test]
    fn poisson_solver_is_linear_with_small_residual(seed in any::<u64>(), alpha in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let (h, w) = (18, 23);
        let gx = DMatrix::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let gy = DMatrix::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let (pu, pv) = (0.12, 0.11);
        let f = integrate_heights(&gx, &gy, pu, pv);
        let fa = integrate_heights(&(&gx * alpha), &(&gy * alpha), pu, pv);
        prop_assert!((&fa - &f * alpha).amax() <= 1e-9 * (alpha.abs() * f.amax()).max(1e-12));
        let div = divergence(&gx, &gy, pu, pv);
        let resid = (laplacian(&f, pu, pv) - &div).view((1, 1), (h - 2, w - 2)).into_owned();
        let rms = |m: &DMatrix<f64>| (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
        prop_assert!(rms(&resid) <= 1e-8 * rms(&div));
    }

    #[test]
    fn min_region_is_scale_invariant(values in prop::collection::vec(0.0..0.5f64, 144), k in 1usize..6, c in 0.01..100.0f64) {
        let a = min_region(&IntegralMap::new(&values, 12), k).unwrap().0;
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        let b = min_region(&IntegralMap::new(&scaled, 12), k).unwrap().0;
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decode_jacobian_matches_finite_differences(z in prop::collection::vec(-1.0..1.0f64, 12), b in 0usize..12, cell in 0usize..4096) {
        let prior = small_prior();
        let z: Vec<f64> = z.iter().zip(prior.scales()).map(|(z, s)| z * s).collect();
        let v = prior.decode_f64(&z).unwrap()[cell];
        let analytic = v * (1.0 - v) * prior.basis(b, cell);
        let h = 1e-5;
        let (mut zp, mut zm) = (z.clone(), z.clone());
        zp[b] += h;
        zm[b] -= h;
        let fd = (prior.decode_f64(&zp).unwrap()[cell] - prior.decode_f64(&zm).unwrap()[cell]) / (2.0 * h);
        prop_assert!((analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()).max(1e-6));
    }

    #[test]
    fn mean_shape_does_not_depend_on_dimension(d in 1usize..12) {
        let prior = small_prior();
        let t = prior.truncated(d);
        prop_assert_eq!(t.decode_f64(&vec![0.0; d]).unwrap(), prior.decode_f64(&vec![0.0; 12]).unwrap());
        prop_assert!(t.orthonormality_error() <= 1e-6);
    }

    #[test]
    fn touch_loss_is_nonnegative_and_zero_when_satisfied(
        values in grid_values(64),
        marks in prop::collection::vec((0usize..4, 0usize..4, 0usize..4, any::<bool>()), 1..20),
    ) {
        let g = VoxelGrid::from_values([4, 4, 4], values, VoxelFrame::default()).unwrap();
        let mut cs = ConstraintSet::new([4, 4, 4]);
        for &(x, y, z, occ) in &marks {
            cs.mark([x, y, z], if occ { Target::Occupied } else { Target::Empty }).unwrap();
        }
        prop_assert!(touch_loss(&g, &cs).unwrap() >= 0.0);
        let edited = direct_edit(&g, &cs).unwrap();
        prop_assert_eq!(touch_loss(&edited, &cs).unwrap(), 0.0);
        // Only constrained cells change.
        for i in 0..64 {
            let constrained = cs.targets().contains_key(&i);
            if !constrained {
                prop_assert_eq!(edited.get_index(i), g.get_index(i));
            }
        }
    }

    #[test]
    fn refinement_never_raises_the_loss(
        z in prop::collection::vec(-1.0..1.0f64, 12),
        marks in prop::collection::vec((0usize..16, 0usize..16, 0usize..16, any::<bool>()), 1..40),
        lr in 0.0001..0.5f64,
    ) {
        let prior = small_prior();
        let z: Vec<f64> = z.iter().zip(prior.scales()).map(|(z, s)| z * s).collect();
        let mut cs = ConstraintSet::new(prior.dims());
        for &(x, y, w, occ) in &marks {
            cs.mark([x, y, w], if occ { Target::Occupied } else { Target::Empty }).unwrap();
        }
        let params = DescentParams { steps: 20, lr, tolerance: 0.0, prior_weight: 0.0 };
        let out = refine_latent(prior, &z, &cs, &params).unwrap();
        prop_assert!(out.final_loss <= out.initial_loss);
    }

    #[test]
    fn active_score_is_at_most_any_random_score(family in 0usize..5, seed in any::<u64>()) {
        let s = Scene::build(scene(family, seed, 24)).unwrap();
        let spec = SensorSpec::from(SensorConfig::default());
        let active = next_touch(&s.truth, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 {
            let random = random_touch(&s.truth, &spec, &mut rng).unwrap();
            prop_assert!(active.score <= random.score);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn simulated_touches_never_lie(family in 0usize..5, seed in any::<u64>()) {
        let s = Scene::build(scene(family, seed, 24)).unwrap();
        let set = CandidateSet::build(&s.truth, s.spec().k_voxels).unwrap();
        let step = (set.len() / 12).max(1);
        for i in (0..set.len()).step_by(step) {
            let out = execute_touch(&s, &set.plan_at(i)).unwrap();
            let r = out.record;
            if let Some(c) = r.contact {
                prop_assert!(s.truth.get(c) >= 0.5, "contact {c:?} not occupied");
            }
            for c in &r.ray_cells {
                prop_assert!(s.truth.get(*c) < 0.5, "ray cell {c:?} occupied");
            }
            for c in &r.patch_cells {
                prop_assert!(s.truth.get(*c) >= 0.5, "patch cell {c:?} not occupied");
            }
        }
    }

    #[test]
    fn episodes_are_deterministic(family in 0usize..5, seed in 0u64..1000) {
        let s = Scene::build(scene(family, seed, 20)).unwrap();
        let registry = PolicyRegistry::default();
        let prior = {
            let corpus = generate_corpus(&ShapeCorpusSpec::balanced(20, 2, 5)).unwrap();
            let refs: Vec<_> = corpus.iter().map(|c| &c.grid).collect();
            fit_prior(&refs, 6).unwrap()
        };
        let run = |p: &str| run_policy_episode(&s, &prior, &registry, p, vec![], seed, 3, quick_options()).unwrap();
        let a = run("random");
        let b = run("random");
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        // Touch 0 depends on the scene, camera, noise seed and prior only.
        let d = run("direct-edit");
        prop_assert_eq!(a.steps[0].cd_sum, d.steps[0].cd_sum);
        // Direct edit leaves every measured cell at its true value.
        let grid = d.final_grid.as_ref().unwrap();
        for step in &d.steps[1..] {
            let r = step.record.as_ref().unwrap();
            for c in r.ray_cells.iter() {
                prop_assert_eq!(grid.get(*c), 0.0);
            }
            for c in r.patch_cells.iter().chain(&r.contact) {
                prop_assert_eq!(grid.get(*c), 1.0);
            }
        }
    }
}
