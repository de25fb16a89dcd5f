use std::collections::BTreeSet;

use forknet::scene::*;
use forknet::voxel::{read_volume, CameraIntrinsics, GridSpec, Pose, SemanticVolume};

fn wall_scene(occluder: bool) -> Scene {
    let grid = GridSpec::new([20, 20, 20], 0.15, [0.0; 3]);
    let mut labels = vec![EMPTY; grid.len()];
    let wall_k = (2.0f32 / 0.15).floor() as usize; // voxel containing z = 2.0
    for i in 0..20 {
        for j in 0..20 {
            labels[grid.index([i, j, wall_k])] = WALL;
            if occluder && (8..12).contains(&i) && (8..12).contains(&j) {
                labels[grid.index([i, j, 6])] = 3;
            }
        }
    }
    Scene {
        grid,
        classes: 4,
        labels,
        intrinsics: CameraIntrinsics::with_fov(32, 24, 40.0),
        pose: Pose::look_along([1.5, 1.5, 0.0], [0.0, 0.0, 1.0]),
        depth_noise: 0.0,
        seed: 0,
    }
}

#[test]
fn wall_depth_matches_ray_plane_intersection() {
    let scene = wall_scene(false);
    let depth = render_depth(&scene);
    let wall_front = (2.0f32 / 0.15).floor() * 0.15;
    assert!(depth.depth.iter().all(|&d| d > 0.0));
    for &d in &depth.depth {
        // the plane z = wall_front is hit at z-depth wall_front for every pixel
        assert!((d - wall_front).abs() <= 0.15, "{d}");
        assert!((d - 2.0).abs() <= 0.15 + 1e-6);
    }
}

#[test]
fn occluder_reports_nearer_depth() {
    let scene = wall_scene(true);
    let depth = render_depth(&scene);
    let center = depth.at(16, 12);
    assert!((center - 0.9).abs() <= 0.15, "{center}");
    assert!(depth.at(0, 0) > 1.8);
}

#[test]
fn every_class_appears_over_seeds() {
    let config = SceneConfig::desk();
    let mut seen = BTreeSet::new();
    for seed in 0..100 {
        seen.extend(generate_scene(seed, &config).unwrap().labels);
    }
    assert_eq!(seen, (0..=4).collect());
}

#[test]
fn rendered_surface_agrees_with_labels() {
    let config = SceneConfig::desk();
    for seed in 0..20 {
        let scene = generate_scene(seed, &config).unwrap();
        let depth = render_depth(&scene);
        for p in depth.points() {
            let v = scene.grid.voxel_of(p).expect("hit point inside grid");
            assert_ne!(scene.label(v), EMPTY, "seed {seed}");
        }
    }
}

#[test]
fn completion_task_has_occlusion() {
    let config = SceneConfig::desk();
    let (mut hidden, mut solid) = (0usize, 0usize);
    for seed in 0..20 {
        let scene = generate_scene(seed, &config).unwrap();
        let visible = render_depth(&scene).visible_voxels(&scene.grid);
        for (v, &c) in scene.labels.iter().enumerate() {
            if c != EMPTY {
                solid += 1;
                hidden += usize::from(!visible[v]);
            }
        }
    }
    assert!(hidden as f64 > 0.1 * solid as f64);
}

#[test]
fn objects_stay_axis_aligned_inside_grid() {
    let config = SceneConfig::desk();
    for seed in 0..20 {
        let scene = generate_scene(seed, &config).unwrap();
        assert_eq!(scene.labels.len(), scene.grid.len());
        assert!(scene.labels.iter().all(|&c| c as usize <= config.classes));
    }
}

#[test]
fn dataset_layout_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = SceneConfig::desk();
    let manifest = make_dataset(a.path(), 10, 42, &config).unwrap();
    make_dataset(b.path(), 10, 42, &config).unwrap();
    assert_eq!(manifest.entries.len(), 10);
    assert_eq!(manifest.ids(Split::HeldOut).len(), 1);
    assert_eq!(Manifest::read(a.path()).unwrap(), manifest);

    let mut files = 0;
    for (id, _) in &manifest.entries {
        for name in ["depth.pgm", "depth.meta", "x.fvox", "s_gt.fvox", "g_gt.fvox"] {
            let fa = std::fs::read(a.path().join(id).join(name)).unwrap();
            let fb = std::fs::read(b.path().join(id).join(name)).unwrap();
            assert_eq!(fa, fb, "{id}/{name}");
            files += 1;
        }
        let s = read_volume(a.path().join(id).join("s_gt.fvox")).unwrap();
        assert!(SemanticVolume::ground_truth(s).is_ok());
        load_sample(a.path(), id).unwrap();
    }
    assert_eq!(files, 50);
    assert!(a.path().join(MANIFEST_FILE).exists());
}
