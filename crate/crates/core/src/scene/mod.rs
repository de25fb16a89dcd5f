//! Procedural indoor rooms and their rendered depth images.
//!
//! A room is a floor layer, a back wall, an optional side wall and a few
//! axis-aligned pieces of furniture. The camera stands near the open front
//! edge of the room and looks inward and slightly down.

mod dataset;

pub use dataset::{load_sample, make_dataset, Manifest, Sample, Split, MANIFEST_FILE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::voxel::{CameraIntrinsics, DepthImage, GridSpec, Pose, MAX_DEPTH};

pub const EMPTY: u8 = 0;
pub const FLOOR: u8 = 1;
pub const WALL: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Furniture {
    /// Solid block standing on the floor.
    Box,
    /// Thin top slab on four corner legs.
    Table,
}

impl Furniture {
    /// Shape used for class `class`: classes from 3 upward alternate
    /// between boxes and tables.
    pub fn of_class(class: u8) -> Self {
        if (class - 3) % 2 == 0 {
            Furniture::Box
        } else {
            Furniture::Table
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub grid: GridSpec,
    /// Non-empty classes; 1 is floor, 2 is wall, the rest are furniture.
    pub classes: usize,
    pub object_count: (usize, usize),
    /// Footprint edge range, meters.
    pub footprint: (f32, f32),
    /// Box height range, meters.
    pub box_height: (f32, f32),
    /// Table height range, meters.
    pub table_height: (f32, f32),
    pub camera_height: (f32, f32),
    pub image_size: (usize, usize),
    pub hfov_deg: f32,
    /// Standard deviation of Gaussian depth jitter, meters.
    pub depth_noise: f32,
}

impl SceneConfig {
    pub fn desk() -> Self {
        Self::for_grid(GridSpec::new([32, 16, 32], 0.15, [0.0; 3]), 4)
    }

    pub fn for_grid(grid: GridSpec, classes: usize) -> Self {
        SceneConfig {
            grid,
            classes,
            object_count: (2, 6),
            footprint: (0.45, 1.35),
            box_height: (0.3, 1.2),
            table_height: (0.6, 0.9),
            camera_height: (1.2, 1.6),
            image_size: (96, 72),
            hfov_deg: 60.0,
            depth_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [l, h, w] = self.grid.dims;
        if l < 4 || h < 3 || w < 6 {
            return Err(Error::Config(format!(
                "grid {:?} too small to host floor, walls and furniture",
                self.grid.dims
            )));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::Config(format!(
                "scene needs at least floor and wall classes, got {}",
                self.classes
            )));
        }
        let (lo, hi) = self.object_count;
        if lo > hi {
            return Err(Error::Config(format!("object count range {lo}..={hi}")));
        }
        if hi > 0 && self.classes < 3 {
            return Err(Error::Config("furniture needs a third class".into()));
        }
        for (name, (a, b)) in [
            ("footprint", self.footprint),
            ("box_height", self.box_height),
            ("table_height", self.table_height),
            ("camera_height", self.camera_height),
        ] {
            if !(a > 0.0 && a <= b) {
                return Err(Error::Config(format!("{name} range {a}..{b}")));
            }
        }
        if self.depth_noise < 0.0 {
            return Err(Error::Config("negative depth noise".into()));
        }
        CameraIntrinsics::with_fov(self.image_size.0, self.image_size.1, self.hfov_deg)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid: GridSpec,
    pub classes: usize,
    pub labels: Vec<u8>,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub depth_noise: f32,
    pub seed: u64,
}

impl Scene {
    pub fn label(&self, v: [usize; 3]) -> u8 {
        self.labels[self.grid.index(v)]
    }

    fn fill(&mut self, lo: [usize; 3], hi: [usize; 3], class: u8) {
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    let idx = self.grid.index([i, j, k]);
                    self.labels[idx] = class;
                }
            }
        }
    }
}

fn voxels(meters: f32, voxel_size: f32) -> usize {
    ((meters / voxel_size).round() as usize).max(1)
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let grid = config.grid;
    let [l, h, w] = grid.dims;
    let vs = grid.voxel_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let intrinsics = CameraIntrinsics::with_fov(config.image_size.0, config.image_size.1, config.hfov_deg);
    let mut scene = Scene {
        grid,
        classes: config.classes,
        labels: vec![EMPTY; grid.len()],
        intrinsics,
        pose: Pose::identity(),
        depth_noise: config.depth_noise,
        seed,
    };

    scene.fill([0, 0, 0], [l, 1, w], FLOOR);
    scene.fill([0, 1, w - 1], [l, h, w], WALL);
    let side = rng.random_range(0..3u8);
    match side {
        1 => scene.fill([0, 1, 0], [1, h, w], WALL),
        2 => scene.fill([l - 1, 1, 0], [l, h, w], WALL),
        _ => {}
    }
    let i_range = (usize::from(side == 1), l - usize::from(side == 2));
    let k_range = (3.min(w - 2), w - 1);

    let count = rng.random_range(config.object_count.0..=config.object_count.1);
    for _ in 0..count {
        let class = rng.random_range(3..=config.classes as u8);
        let sx = voxels(rng.random_range(config.footprint.0..=config.footprint.1), vs).min(i_range.1 - i_range.0);
        let sz = voxels(rng.random_range(config.footprint.0..=config.footprint.1), vs).min(k_range.1 - k_range.0);
        let i0 = rng.random_range(i_range.0..=i_range.1 - sx);
        let k0 = rng.random_range(k_range.0..=k_range.1 - sz);
        match Furniture::of_class(class) {
            Furniture::Box => {
                let sy = voxels(rng.random_range(config.box_height.0..=config.box_height.1), vs).min(h - 1);
                scene.fill([i0, 1, k0], [i0 + sx, 1 + sy, k0 + sz], class);
            }
            Furniture::Table => {
                let sy = voxels(rng.random_range(config.table_height.0..=config.table_height.1), vs).min(h - 1);
                let top = sy; // slab occupies layer `top`, legs fill 1..top
                scene.fill([i0, top, k0], [i0 + sx, top + 1, k0 + sz], class);
                for (li, lk) in [(i0, k0), (i0 + sx - 1, k0), (i0, k0 + sz - 1), (i0 + sx - 1, k0 + sz - 1)] {
                    scene.fill([li, 1, lk], [li + 1, top, lk + 1], class);
                }
            }
        }
    }

    let [ex, ey, _] = grid.extent_meters();
    let height = rng.random_range(config.camera_height.0..=config.camera_height.1).min(0.8 * ey);
    let eye = [
        grid.origin[0] + rng.random_range(0.3..=0.7) * ex,
        grid.origin[1] + height,
        grid.origin[2] + 0.1 * vs,
    ];
    let yaw = rng.random_range(-20.0f32..=20.0).to_radians();
    let pitch = rng.random_range(20.0f32..=35.0).to_radians();
    let forward = [yaw.sin() * pitch.cos(), -pitch.sin(), yaw.cos() * pitch.cos()];
    scene.pose = Pose::look_along(eye, forward);
    Ok(scene)
}

/// Ray-marched z-depth image of the scene.
///
/// Rays advance in steps of half a voxel. The reported depth is the first
/// whole millimeter past the entry into the first non-empty voxel whose
/// back-projection lands inside a non-empty voxel, so the stored image
/// agrees with the labels after 16-bit quantization.
pub fn render_depth(scene: &Scene) -> DepthImage {
    let cam = &scene.intrinsics;
    let grid = &scene.grid;
    let occupied = |t: f32, col: usize, row: usize| -> bool {
        let p = scene.pose.camera_to_world(cam.back_project(col, row, t));
        grid.voxel_of(p).is_some_and(|v| scene.label(v) != EMPTY)
    };
    let mut depth = vec![0.0f32; cam.width * cam.height];
    for row in 0..cam.height {
        for col in 0..cam.width {
            let ray = cam.back_project(col, row, 1.0);
            let len = (ray[0] * ray[0] + ray[1] * ray[1] + 1.0).sqrt();
            let step = grid.voxel_size / 2.0 / len;
            let mut prev = 0.0f32;
            let mut t = step;
            while t <= MAX_DEPTH {
                if occupied(t, col, row) {
                    let (mut lo, mut hi) = (prev, t);
                    for _ in 0..30 {
                        let mid = 0.5 * (lo + hi);
                        if occupied(mid, col, row) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    let start = (lo * 1000.0).ceil() as u32;
                    let end = (t * 1000.0).ceil() as u32 + 1;
                    if let Some(mm) = (start..=end).find(|&mm| occupied(mm as f32 / 1000.0, col, row)) {
                        depth[row * cam.width + col] = mm as f32 / 1000.0;
                    }
                    break;
                }
                prev = t;
                t += step;
            }
        }
    }
    if scene.depth_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6a09_e667_f3bc_c909);
        let noise = Normal::new(0.0, scene.depth_noise).expect("validated noise");
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            let jittered = *d + noise.sample(&mut rng);
            *d = ((jittered * 1000.0).round() / 1000.0).clamp(0.001, MAX_DEPTH);
        }
    }
    DepthImage::new(*cam, scene.pose, depth).expect("renderer emits valid depth")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let config = SceneConfig::desk();
        assert_eq!(generate_scene(7, &config).unwrap(), generate_scene(7, &config).unwrap());
        assert_ne!(generate_scene(7, &config).unwrap().labels, generate_scene(8, &config).unwrap().labels);
    }

    #[test]
    fn zero_objects_leaves_floor_and_walls() {
        let config = SceneConfig {
            object_count: (0, 0),
            ..SceneConfig::desk()
        };
        for seed in 0..5 {
            let scene = generate_scene(seed, &config).unwrap();
            assert!(scene.labels.iter().all(|&c| c <= WALL));
            let [l, _, w] = scene.grid.dims;
            for i in 0..l {
                for k in 0..w {
                    assert_eq!(scene.label([i, 0, k]), FLOOR);
                }
            }
        }
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let config = SceneConfig::for_grid(GridSpec::new([3, 2, 3], 0.15, [0.0; 3]), 4);
        assert!(matches!(generate_scene(0, &config), Err(Error::Config(_))));
    }

    #[test]
    fn empty_scene_renders_invalid() {
        let mut scene = generate_scene(1, &SceneConfig::desk()).unwrap();
        scene.labels.iter_mut().for_each(|c| *c = EMPTY);
        assert!(render_depth(&scene).depth.iter().all(|&d| d == 0.0));
    }
}
