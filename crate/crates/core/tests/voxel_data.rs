use forknet::voxel::*;
use forknet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VS: f32 = 0.1;

fn wall_setup() -> (DepthImage, GridSpec) {
    let cam = CameraIntrinsics::with_fov(64, 48, 60.0);
    let depth = DepthImage::new(cam, Pose::identity(), vec![2.0; 64 * 48]).unwrap();
    (depth, GridSpec::new([16, 12, 20], VS, [-0.8, -0.6, 1.0]))
}

#[test]
fn fronto_parallel_wall_matches_plane_distance() {
    let (depth, grid) = wall_setup();
    let tau = default_truncation(VS);
    let sdf = depth_to_sdf(&depth, &grid, tau).unwrap();
    let mut slab = 0;
    for idx in 0..grid.len() {
        let v = grid.coords(idx);
        let c = grid.center(v);
        if depth.intrinsics.pixel_of(c).is_none() {
            assert_eq!(sdf.values()[idx], tau);
            continue;
        }
        // signed distance from the center to the plane z = 2, camera side positive
        let oracle = (2.0 - c[2]).clamp(-tau, tau);
        let got = sdf.values()[idx];
        assert!((got - oracle).abs() <= VS / 2.0 + 1e-6, "{v:?}: {got} vs {oracle}");
        if (c[2] - 2.0).abs() < VS {
            slab += 1;
            assert!(got.abs() <= VS / 2.0 + 1e-6);
        } else {
            assert!(got.abs() > VS / 2.0);
            assert_eq!(got > 0.0, c[2] < 2.0);
        }
    }
    assert!(slab > 0);
}

#[test]
fn projection_round_trip_within_half_voxel() {
    let (depth, grid) = wall_setup();
    let cam = depth.intrinsics;
    for idx in 0..grid.len() {
        let c = grid.center(grid.coords(idx));
        if let Some((col, row)) = cam.pixel_of(c) {
            let ray = cam.back_project(col, row, 1.0);
            // distance from c to the line through the origin along `ray`
            let n = (ray[0] * ray[0] + ray[1] * ray[1] + ray[2] * ray[2]).sqrt();
            let u = [ray[0] / n, ray[1] / n, ray[2] / n];
            let t = c[0] * u[0] + c[1] * u[1] + c[2] * u[2];
            let perp = [c[0] - t * u[0], c[1] - t * u[1], c[2] - t * u[2]];
            let d = (perp[0] * perp[0] + perp[1] * perp[1] + perp[2] * perp[2]).sqrt();
            assert!(d <= VS / 2.0, "voxel {idx}: {d}");
        }
    }
}

#[test]
fn sdf_bounded_by_truncation_on_random_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut depth, grid) = wall_setup();
    for d in depth.depth.iter_mut() {
        *d = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.5..4.0) };
    }
    let tau = default_truncation(VS);
    let sdf = depth_to_sdf(&depth, &grid, tau).unwrap();
    assert!(sdf.values().iter().all(|v| v.abs() <= tau));
    for p in depth.points() {
        if let Some(v) = grid.voxel_of(p) {
            assert!(sdf.values()[grid.index(v)].abs() <= VS / 2.0);
        }
    }
}

#[test]
fn onehot_channels_sum_to_one() {
    let grid = GridSpec::new([4, 3, 5], VS, [0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<u8> = (0..grid.len()).map(|_| rng.random_range(0..=4)).collect();
    let s = labels_to_onehot(&labels, &grid, 4).unwrap();
    for v in 0..grid.len() {
        let sum: f32 = (0..5).map(|c| s.0.channel(c)[v]).sum();
        assert_eq!(sum, 1.0);
    }
    assert!(SemanticVolume::ground_truth(s.0.clone()).is_ok());
}

#[test]
fn geometric_gt_is_superset_of_labels() {
    let grid = GridSpec::new([4, 3, 5], VS, [0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let labels: Vec<u8> = (0..grid.len()).map(|_| rng.random_range(0..=3)).collect();
    let s = labels_to_onehot(&labels, &grid, 3).unwrap();
    let values: Vec<f32> = (0..grid.len()).map(|_| rng.random_range(-0.4..=0.4)).collect();
    let x = SdfVolume::new(Volume::new(grid, 1, values).unwrap(), 0.4).unwrap();
    let g = derive_geometric_gt(&s, &x).unwrap();
    let occ = g.occupied();
    for v in 0..grid.len() {
        assert_eq!(occ[v], labels[v] != 0 || x.values()[v].abs() <= VS / 2.0);
    }
}

#[test]
fn truncated_payload_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec::new([2, 2, 2], VS, [0.0; 3]);
    let path = dir.path().join("v.fvox");
    write_volume(&path, &Volume::new(grid, 1, vec![1.0; 8]).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..FVOX_HEADER_LEN + 7 * 4]).unwrap();
    match read_volume(&path) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, (FVOX_HEADER_LEN + 28) as u64);
            assert!(message.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn depth_units_and_missing_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cam = CameraIntrinsics::with_fov(2, 1, 60.0);
    let img = DepthImage::new(cam, Pose::identity(), vec![2.0, 0.0]).unwrap();
    let path = dir.path().join("depth.pgm");
    write_depth(&path, &img).unwrap();
    let raw = std::fs::read(&path).unwrap();
    let n = raw.len();
    assert_eq!(&raw[n - 4..], &[0x07, 0xd0, 0, 0]);
    let back = read_depth(&path).unwrap();
    assert_eq!(back.depth, vec![2.0, 0.0]);
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    assert!(matches!(read_depth(&path), Err(Error::Format { offset: 0, .. })));
}

fn random_volume(seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
    let grid = GridSpec::new(dims, rng.random_range(0.01..1.0), [rng.random(), rng.random(), rng.random()]);
    let channels = rng.random_range(1..6);
    let data = (0..channels * grid.len()).map(|_| rng.random_range(-1e3..1e3)).collect();
    Volume::new(grid, channels, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fvox_round_trip(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.fvox");
        let v = random_volume(seed);
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.grid, v.grid);
        prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
