use std::f64::consts::PI;

use proptest::prelude::*;

use eqcollide::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use eqcollide::decoder::DecoderConfig;
use eqcollide::encoder::EncoderConfig;
use eqcollide::geometry::{ball_query, dist_sq, farthest_point_sample, heading, wrap_angle, GroupElement, Vec2};
use eqcollide::latent::{GroupVariant, LatentState};
use eqcollide::model::{Model, ModelConfig};
use eqcollide::mpm::{generate_trajectory, MpmConfig, SceneConfig};
use eqcollide::processor::ProcessorConfig;
use eqcollide::training::{begin_stage2, train_stage1, train_stage2, EpochLog, TrainConfig};
use eqcollide::trajectory::{read_trajectory, write_trajectory, MassPointCloud, Provenance, Trajectory};

fn micro(variant: GroupVariant) -> ModelConfig {
    ModelConfig {
        variant,
        encoder: EncoderConfig {
            mlp_widths: vec![vec![8, 8], vec![8, 8]],
            samples: vec![16, 4],
            radii: vec![0.03, 0.06],
            max_neighbors: vec![8, 8],
            velocity_scale: 1.0,
        },
        decoder: DecoderConfig {
            hidden: 8,
            context_width: 8,
            n_frequencies: 4,
            ..DecoderConfig::default()
        },
        processor: ProcessorConfig {
            hidden: 8,
            basis_dim: 8,
            ..ProcessorConfig::default()
        },
        seed: 9,
        ..ModelConfig::default()
    }
}

/// An 8 x 8 lattice per object, each with its own drift.
fn lattices(origins: &[Vec2], drifts: &[Vec2]) -> MassPointCloud {
    let (mut p, mut v, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (o, (origin, drift)) in origins.iter().zip(drifts).enumerate() {
        for i in 0..8 {
            for j in 0..8 {
                let wobble = 1e-3 * ((i * 7 + j * 3) % 5) as f64;
                p.push([
                    origin[0] + i as f64 * 0.0125 + wobble,
                    origin[1] + j as f64 * 0.0125 - wobble,
                ]);
                v.push([drift[0] + 0.02 * j as f64, drift[1] - 0.02 * i as f64]);
                ids.push(o as u32);
            }
        }
    }
    MassPointCloud::new(p, v, ids).unwrap()
}

fn min_inter_distance(cloud: &MassPointCloud) -> f64 {
    let mut best = f64::INFINITY;
    for (i, (p, a)) in cloud.positions.iter().zip(&cloud.object_ids).enumerate() {
        for (q, b) in cloud.positions[i + 1..].iter().zip(&cloud.object_ids[i + 1..]) {
            if a != b {
                best = best.min(dist_sq(*p, *q).sqrt());
            }
        }
    }
    best
}

fn latent_rows(z: &LatentState, object: u32) -> Vec<usize> {
    (0..z.len()).filter(|&i| z.object_ids[i] == object).collect()
}

#[test]
fn separated_objects_evolve_as_if_alone() {
    for variant in [GroupVariant::Translation, GroupVariant::Se2] {
        let model = Model::new(&micro(variant)).unwrap();
        let d_col = model.config.processor.collision_distance;
        let both = lattices(&[[0.15, 0.45], [0.75, 0.5]], &[[0.3, 0.1], [-0.2, 0.2]]);
        let alone = both.select_objects(&[0]).unwrap();
        let (mut cb, mut zb) = (both.clone(), model.encode(&both).unwrap());
        let (mut ca, mut za) = (alone.clone(), model.encode(&alone).unwrap());
        for k in 0..10 {
            assert!(
                min_inter_distance(&cb) >= d_col,
                "objects came within {d_col} at step {k}"
            );
            let graph = model.collision_graph(&cb, &zb).unwrap();
            assert!(graph.inter.is_empty());
            (cb, zb) = model.step(&cb, &zb, 0.002, k).unwrap();
            (ca, za) = model.step(&ca, &za, 0.002, k).unwrap();
        }
        let rows = latent_rows(&zb, 0);
        assert_eq!(rows.len(), za.len());
        let mut worst: f64 = 0.0;
        for (a, &b) in rows.iter().enumerate() {
            let (pa, pb) = (&za.poses[a], &zb.poses[b]);
            worst = worst.max(dist_sq(pa.position, pb.position).sqrt());
            worst = worst.max(wrap_angle(pa.orientation - pb.orientation).abs());
            for c in 0..za.contexts.ncols() {
                worst = worst.max((za.contexts[[a, c]] - zb.contexts[[b, c]]).abs());
            }
        }
        assert!(worst <= 1e-5, "{variant:?}: latent differs by {worst:.3e}");
    }
}

fn small_dataset() -> Vec<Trajectory> {
    let mpm = MpmConfig {
        grid_resolution: 32,
        ..MpmConfig::default()
    };
    (0..2)
        .map(|i| generate_trajectory(40 + i, 2, 64, 5, &mpm, &SceneConfig::default()).unwrap())
        .collect()
}

fn same_params(a: &Model, b: &Model) -> bool {
    a.store.ids().all(|id| a.store.value(id) == b.store.value(id))
}

fn losses(rows: &[EpochLog]) -> Vec<(usize, f64, f64, f64)> {
    rows.iter().map(|r| (r.epoch, r.l_dis, r.l_recons, r.total)).collect()
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let data = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg1 = TrainConfig {
        epochs: 3,
        batch_size: 1,
        window: 2,
        ..TrainConfig::default()
    };
    let mid = dir.path().join("stage1_epoch1");
    let mut full = TrainState::fresh(Model::new(&micro(GroupVariant::Translation)).unwrap());
    let full_log = train_stage1(&mut full, &data, &cfg1, |row, state| {
        if row.epoch == 1 {
            save_checkpoint(state, &mid)?;
        }
        Ok(())
    })
    .unwrap();
    let mut resumed = load_checkpoint(&mid).unwrap();
    assert_eq!(resumed.epoch, 1);
    let tail = train_stage1(&mut resumed, &data, &cfg1, |_, _| Ok(())).unwrap();
    assert!(same_params(&full.model, &resumed.model));
    assert_eq!(losses(&full_log[1..]), losses(&tail));

    let cfg2 = TrainConfig {
        stage: 2,
        epochs: 2,
        ..cfg1
    };
    let mid2 = dir.path().join("stage2_epoch1");
    let mut full2 = begin_stage2(full).unwrap();
    let log2 = train_stage2(&mut full2, &data, &cfg2, |row, state| {
        if row.epoch == 1 {
            save_checkpoint(state, &mid2)?;
        }
        Ok(())
    })
    .unwrap();
    assert!(log2.iter().all(|r| r.l_dis > 0.0 && r.l_recons > 0.0));
    let mut resumed2 = load_checkpoint(&mid2).unwrap();
    assert_eq!((resumed2.stage, resumed2.epoch), (2, 1));
    let tail2 = train_stage2(&mut resumed2, &data, &cfg2, |_, _| Ok(())).unwrap();
    assert!(same_params(&full2.model, &resumed2.model));
    assert_eq!(losses(&log2[1..]), losses(&tail2));
}

#[test]
fn generation_is_reproducible_and_hash_matches_disk() {
    let mpm = MpmConfig {
        grid_resolution: 32,
        ..MpmConfig::default()
    };
    let a = generate_trajectory(3, 2, 80, 6, &mpm, &SceneConfig::default()).unwrap();
    let b = generate_trajectory(3, 2, 80, 6, &mpm, &SceneConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = generate_trajectory(4, 2, 80, 6, &mpm, &SceneConfig::default()).unwrap();
    assert_ne!(a.content_hash(), c.content_hash());
    let dir = tempfile::tempdir().unwrap();
    let hash = write_trajectory(&a, dir.path()).unwrap();
    assert_eq!(hash, a.content_hash());
    let back = read_trajectory(dir.path()).unwrap();
    assert_eq!(back.provenance.content_sha256, hash);
    assert_eq!(back.frames, a.frames);
}

fn point() -> impl Strategy<Value = Vec2> {
    (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y)| [x, y])
}

fn element() -> impl Strategy<Value = GroupElement> {
    (-PI..PI, point()).prop_map(|(a, t)| GroupElement::new(a, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wrapped_angles_are_half_open(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!((-PI..PI).contains(&w));
        prop_assert!((((a - w) / (2.0 * PI)).round() * 2.0 * PI - (a - w)).abs() < 1e-9);
    }

    #[test]
    fn group_action_is_an_isometry(g in element(), h in element(), p in point(), q in point()) {
        let d = dist_sq(p, q);
        prop_assert!((dist_sq(g.act_point(p), g.act_point(q)) - d).abs() < 1e-12);
        let a = g.act_point(h.act_point(p));
        let b = g.compose(&h).act_point(p);
        prop_assert!(dist_sq(a, b) < 1e-24);
        let back = g.inverse().act_point(g.act_point(p));
        prop_assert!(dist_sq(back, p) < 1e-24);
    }

    #[test]
    fn heading_rotates_with_the_group(g in element(), v in point()) {
        prop_assume!(v[0].hypot(v[1]) > 1e-3);
        let turned = heading(g.act_vector(v), 1e-8);
        prop_assert!(wrap_angle(turned - heading(v, 1e-8) - g.rotation_angle).abs() < 1e-12);
    }

    #[test]
    fn fps_picks_distinct_points(pts in prop::collection::vec(point(), 1..120), frac in 0.05..1.0f64) {
        let k = ((pts.len() as f64 * frac).ceil() as usize).clamp(1, pts.len());
        let idx = farthest_point_sample(&pts, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert_eq!(farthest_point_sample(&pts, k).unwrap(), idx);
    }

    #[test]
    fn ball_query_stays_in_radius(pts in prop::collection::vec(point(), 1..120), r in 0.05..0.8f64, k in 1usize..12) {
        let centers: Vec<usize> = (0..pts.len()).step_by(3).collect();
        let nl = ball_query(&centers, &pts, r, k).unwrap();
        prop_assert_eq!(nl.n_centers(), centers.len());
        for (c, &ci) in centers.iter().enumerate() {
            let n = nl.neighbors(c);
            prop_assert_eq!(n.len(), k);
            prop_assert_eq!(n[0], ci);
            for &j in n {
                prop_assert!(dist_sq(pts[ci], pts[j]) <= r * r);
            }
        }
    }

    #[test]
    fn trajectories_round_trip(
        frames in prop::collection::vec(prop::collection::vec((point(), point()), 3..30), 1..4),
        dt in 1e-4..1e-2f64,
    ) {
        let n = frames.iter().map(Vec::len).min().unwrap();
        let clouds: Vec<MassPointCloud> = frames
            .iter()
            .map(|f| {
                let (p, v): (Vec<Vec2>, Vec<Vec2>) = f[..n].iter().copied().unzip();
                let ids = (0..n).map(|i| (i % 2) as u32).collect();
                MassPointCloud::new(p, v, ids).unwrap()
            })
            .collect();
        let mut traj = Trajectory::new(clouds, dt, Provenance::default()).unwrap();
        traj.quantize();
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&traj, dir.path()).unwrap();
        let back = read_trajectory(dir.path()).unwrap();
        prop_assert_eq!(back.frames, traj.frames);
        prop_assert_eq!(back.dt, traj.dt);
    }
}
