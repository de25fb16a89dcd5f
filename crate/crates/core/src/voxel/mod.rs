//! Depth images, voxel grids and the three volumetric representations: the
//! truncated signed distance volume of the observation, the one-hot
//! semantic volume and the two-channel geometric occupancy volume.
//!
//! Grid axes are `(x, y, z)` with `y` pointing up; axis 1 is the vertical
//! extent (48 in the 80×48×80 configuration). Volumes are stored channel
//! major, then row major over `(x, y, z)`.

mod io;

pub use io::{read_depth, read_volume, sidecar_path, write_depth, write_volume, FVOX_HEADER_LEN, FVOX_MAGIC, FVOX_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f32).contains(&self.cx)
            && (0.0..self.height as f32).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Pinhole camera with horizontal field of view `hfov_deg` and square
    /// pixels, principal point at the image center.
    pub fn with_fov(width: usize, height: usize, hfov_deg: f32) -> Self {
        let f = (width as f32 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f32 - 1.0) / 2.0,
            cy: (height as f32 - 1.0) / 2.0,
            width,
            height,
        }
    }

    /// Continuous pixel coordinates of a camera-space point in front of the
    /// camera.
    pub fn project(&self, p: [f32; 3]) -> Option<(f32, f32)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Nearest pixel `(col, row)` whose center lies closest to the
    /// projection of `p`.
    pub fn pixel_of(&self, p: [f32; 3]) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let (col, row) = (u.round(), v.round());
        if col < 0.0 || row < 0.0 || col >= self.width as f32 || row >= self.height as f32 {
            return None;
        }
        Some((col as usize, row as usize))
    }

    /// Camera-space point at z-depth `depth` on the ray through pixel
    /// center `(col, row)`.
    pub fn back_project(&self, col: usize, row: usize, depth: f32) -> [f32; 3] {
        [
            (col as f32 - self.cx) / self.fx * depth,
            (row as f32 - self.cy) / self.fy * depth,
            depth,
        ]
    }
}

/// Rigid camera-to-world transform. Camera axes: `x` right, `y` down,
/// `z` forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn from_rows(m: [f32; 12]) -> Self {
        Pose {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        }
    }

    pub fn to_rows(&self) -> [f32; 12] {
        let (r, t) = (self.rotation, self.translation);
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    /// Camera at `eye` looking along `forward`, with world `y` up. The
    /// camera's `y` axis points toward world down.
    pub fn look_along(eye: [f32; 3], forward: [f32; 3]) -> Self {
        let f = normalize(forward);
        let right = normalize(cross(f, [0.0, 1.0, 0.0]));
        let down = cross(f, right);
        Pose {
            rotation: [
                [right[0], down[0], f[0]],
                [right[1], down[1], f[1]],
                [right[2], down[2], f[2]],
            ],
            translation: eye,
        }
    }

    pub fn world_to_camera(&self, p: [f32; 3]) -> [f32; 3] {
        let d = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn camera_to_world(&self, p: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// World-space direction of a camera-space vector.
    pub fn rotate(&self, v: [f32; 3]) -> [f32; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f32; 3]) -> [f32; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Z-depth image in meters; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub depth: Vec<f32>,
}

pub const MAX_DEPTH: f32 = 20.0;

impl DepthImage {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose, depth: Vec<f32>) -> Result<Self> {
        intrinsics.validate()?;
        if depth.len() != intrinsics.width * intrinsics.height {
            return Err(Error::Shape(format!(
                "depth buffer of {} for a {}×{} image",
                depth.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        if let Some(bad) = depth.iter().find(|&&d| !(d == 0.0 || (d > 0.0 && d <= MAX_DEPTH))) {
            return Err(Error::Data(format!("depth {bad} outside (0, {MAX_DEPTH}] m")));
        }
        Ok(DepthImage { intrinsics, pose, depth })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.depth[row * self.intrinsics.width + col]
    }

    /// World positions of every valid pixel's back-projected point.
    pub fn points(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        let w = self.intrinsics.width;
        self.depth.iter().enumerate().filter(|(_, &d)| d > 0.0).map(move |(i, &d)| {
            let p = self.intrinsics.back_project(i % w, i / w, d);
            self.pose.camera_to_world(p)
        })
    }

    /// Voxels of `grid` that contain at least one back-projected point.
    pub fn visible_voxels(&self, grid: &GridSpec) -> Vec<bool> {
        let mut mask = vec![false; grid.len()];
        for p in self.points() {
            if let Some(v) = grid.voxel_of(p) {
                mask[grid.index(v)] = true;
            }
        }
        mask
    }
}

/// Placement and resolution of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    /// World position of the outer corner of voxel `(0, 0, 0)`.
    pub origin: [f32; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f32, origin: [f32; 3]) -> Self {
        GridSpec { dims, voxel_size, origin }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn center(&self, [i, j, k]: [usize; 3]) -> [f32; 3] {
        let s = self.voxel_size;
        [
            self.origin[0] + (i as f32 + 0.5) * s,
            self.origin[1] + (j as f32 + 0.5) * s,
            self.origin[2] + (k as f32 + 0.5) * s,
        ]
    }

    /// Voxel containing a world point, if inside the grid.
    pub fn voxel_of(&self, p: [f32; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.dims[a] as f32 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn extent_meters(&self) -> [f32; 3] {
        self.dims.map(|d| d as f32 * self.voxel_size)
    }
}

/// A multi-channel voxel volume; the FVOX on-disk unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: GridSpec, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || grid.dims.contains(&0) {
            return Err(Error::InvalidShape(format!("volume {channels}×{:?}", grid.dims)));
        }
        if data.len() != channels * grid.len() {
            return Err(Error::Shape(format!(
                "{} values for {channels}×{:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume { grid, channels, data })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.grid.dims[0], self.grid.dims[1], self.grid.dims[2]]
    }

    /// Per-voxel argmax over channels, ties to the lowest channel.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.grid.len();
        (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + v] > self.data[best * n + v] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    fn is_one_hot(&self) -> bool {
        let n = self.grid.len();
        (0..n).all(|v| {
            let mut ones = 0;
            for c in 0..self.channels {
                match self.data[c * n + v] {
                    x if x == 1.0 => ones += 1,
                    x if x == 0.0 => {}
                    _ => return false,
                }
            }
            ones == 1
        })
    }
}

/// Truncated signed distance volume `x`, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfVolume {
    pub volume: Volume,
    pub truncation: f32,
}

impl SdfVolume {
    pub fn new(volume: Volume, truncation: f32) -> Result<Self> {
        if volume.channels != 1 {
            return Err(Error::Shape(format!("SDF volume with {} channels", volume.channels)));
        }
        if !(truncation > 0.0) {
            return Err(Error::Data(format!("truncation {truncation} must be positive")));
        }
        if volume.data.iter().any(|v| !(v.abs() <= truncation)) {
            return Err(Error::Data("SDF value outside [-τ, τ]".into()));
        }
        Ok(SdfVolume { volume, truncation })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.volume.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.volume.data
    }

    /// Values divided by τ, in `[-1, 1]`; the network input.
    pub fn normalized(&self) -> Vec<f32> {
        self.volume.data.iter().map(|v| v / self.truncation).collect()
    }

    /// Voxels within half a voxel of the observed surface.
    pub fn surface_mask(&self) -> Vec<bool> {
        let half = self.volume.grid.voxel_size / 2.0;
        self.volume.data.iter().map(|v| v.abs() <= half).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.volume.data.iter().filter(|&&v| v < self.truncation).count()
    }
}

/// One-hot (ground truth) or probabilistic (prediction) class volume with
/// `N + 1` channels; channel 0 is empty space.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVolume(pub Volume);

impl SemanticVolume {
    /// Validates a ground-truth volume: exact one-hot per voxel.
    pub fn ground_truth(volume: Volume) -> Result<Self> {
        if volume.channels < 2 {
            return Err(Error::Shape("semantic volume needs at least 2 channels".into()));
        }
        if !volume.is_one_hot() {
            return Err(Error::Data("semantic ground truth is not one-hot".into()));
        }
        Ok(SemanticVolume(volume))
    }

    pub fn classes(&self) -> usize {
        self.0.channels - 1
    }

    pub fn labels(&self) -> Vec<u8> {
        self.0.argmax()
    }
}

/// Two-channel (empty, occupied) volume.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyVolume(pub Volume);

impl OccupancyVolume {
    pub fn ground_truth(volume: Volume) -> Result<Self> {
        if volume.channels != 2 {
            return Err(Error::Shape(format!("occupancy volume with {} channels", volume.channels)));
        }
        if !volume.is_one_hot() {
            return Err(Error::Data("occupancy ground truth is not one-hot".into()));
        }
        Ok(OccupancyVolume(volume))
    }

    pub fn occupied(&self) -> Vec<bool> {
        self.0.channel(1).iter().map(|&v| v > 0.5).collect()
    }
}

/// Truncation distance used throughout: four voxels.
pub fn default_truncation(voxel_size: f32) -> f32 {
    4.0 * voxel_size
}

/// Projective truncated SDF of a depth image.
///
/// Each voxel center is projected into the image; its value is the pixel's
/// z-depth minus the voxel's camera-space z-depth, clamped to `[-τ, τ]`.
/// Voxels behind the camera, outside the image or on invalid pixels are
/// `+τ`. Voxels that contain a back-projected point are additionally
/// clamped to `±voxel_size/2` so every observed surface voxel is marked as
/// such.
pub fn depth_to_sdf(depth: &DepthImage, grid: &GridSpec, truncation: f32) -> Result<SdfVolume> {
    if !(truncation > 0.0) {
        return Err(Error::Data(format!("truncation {truncation} must be positive")));
    }
    let cam = &depth.intrinsics;
    let mut values: Vec<f32> = (0..grid.len())
        .map(|idx| {
            let c = depth.pose.world_to_camera(grid.center(grid.coords(idx)));
            match cam.pixel_of(c) {
                Some((col, row)) => {
                    let d = depth.at(col, row);
                    if d > 0.0 {
                        (d - c[2]).clamp(-truncation, truncation)
                    } else {
                        truncation
                    }
                }
                None => truncation,
            }
        })
        .collect();
    let half = grid.voxel_size / 2.0;
    for p in depth.points() {
        if let Some(v) = grid.voxel_of(p) {
            let idx = grid.index(v);
            values[idx] = values[idx].clamp(-half, half);
        }
    }
    let sdf = SdfVolume::new(Volume::new(*grid, 1, values)?, truncation)?;
    if sdf.observed_count() == 0 {
        log::warn!("depth image observes no voxel of the {:?} grid", grid.dims);
    }
    Ok(sdf)
}

/// One-hot encoding of per-voxel class indices in `0..=classes`.
pub fn labels_to_onehot(labels: &[u8], grid: &GridSpec, classes: usize) -> Result<SemanticVolume> {
    if labels.len() != grid.len() {
        return Err(Error::Shape(format!("{} labels for {} voxels", labels.len(), grid.len())));
    }
    let n = grid.len();
    let mut data = vec![0.0f32; (classes + 1) * n];
    for (v, &l) in labels.iter().enumerate() {
        if l as usize > classes {
            return Err(Error::Data(format!("label {l} at voxel {v} exceeds {classes} classes")));
        }
        data[l as usize * n + v] = 1.0;
    }
    Ok(SemanticVolume(Volume::new(*grid, classes + 1, data)?))
}

/// Occupied where the semantic label is non-empty or the SDF marks an
/// observed surface voxel.
pub fn derive_geometric_gt(s_gt: &SemanticVolume, x: &SdfVolume) -> Result<OccupancyVolume> {
    if s_gt.0.grid.dims != x.grid().dims {
        return Err(Error::Shape(format!(
            "semantic grid {:?} vs SDF grid {:?}",
            s_gt.0.grid.dims,
            x.grid().dims
        )));
    }
    let n = s_gt.0.grid.len();
    let labels = s_gt.labels();
    let surface = x.surface_mask();
    let mut data = vec![0.0f32; 2 * n];
    for v in 0..n {
        let occupied = labels[v] != 0 || surface[v];
        data[if occupied { n + v } else { v }] = 1.0;
    }
    Ok(OccupancyVolume(Volume::new(s_gt.0.grid, 2, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_camera() -> (DepthImage, GridSpec) {
        let cam = CameraIntrinsics::with_fov(64, 48, 60.0);
        let depth = DepthImage::new(cam, Pose::identity(), vec![2.0; 64 * 48]).unwrap();
        let grid = GridSpec::new([16, 12, 40], 0.1, [-0.8, -0.6, 0.0]);
        (depth, grid)
    }

    #[test]
    fn invalid_pixels_give_positive_truncation() {
        let (mut depth, grid) = wall_camera();
        depth.depth.iter_mut().for_each(|d| *d = 0.0);
        let sdf = depth_to_sdf(&depth, &grid, 0.4).unwrap();
        assert!(sdf.values().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn voxel_at_back_projected_point_is_surface() {
        let cam = CameraIntrinsics::with_fov(32, 32, 60.0);
        let grid = GridSpec::new([8, 8, 8], 0.1, [-0.4, -0.4, 1.0]);
        // voxel center on the optical axis at z = 1.45
        let center = grid.center([4, 4, 4]);
        let pose = Pose {
            rotation: Pose::identity().rotation,
            translation: [center[0], center[1], 0.0],
        };
        let mut depth = vec![0.0; 32 * 32];
        let (col, row) = cam.pixel_of(pose.world_to_camera(center)).unwrap();
        depth[row * 32 + col] = center[2];
        let img = DepthImage::new(cam, pose, depth).unwrap();
        let sdf = depth_to_sdf(&img, &grid, 0.4).unwrap();
        let v = sdf.values()[grid.index([4, 4, 4])];
        assert!(v.abs() <= 0.05, "value {v}");
    }

    #[test]
    fn onehot_encoding() {
        let grid = GridSpec::new([2, 2, 2], 0.1, [0.0; 3]);
        let s = labels_to_onehot(&[0; 8], &grid, 4).unwrap();
        assert!(s.0.channel(0).iter().all(|&v| v == 1.0));
        assert!((1..5).all(|c| s.0.channel(c).iter().all(|&v| v == 0.0)));
        let mut labels = [0u8; 8];
        labels[5] = 3;
        let s = labels_to_onehot(&labels, &grid, 4).unwrap();
        assert_eq!(s.0.channel(3)[5], 1.0);
        assert_eq!(s.labels(), labels.to_vec());
        assert!(matches!(labels_to_onehot(&[5; 8], &grid, 4), Err(Error::Data(_))));
    }

    #[test]
    fn geometric_gt_rules() {
        let grid = GridSpec::new([3, 1, 1], 0.1, [0.0; 3]);
        let s = labels_to_onehot(&[2, 0, 0], &grid, 3).unwrap();
        let x = SdfVolume::new(Volume::new(grid, 1, vec![0.4, 0.03, 0.4]).unwrap(), 0.4).unwrap();
        let g = derive_geometric_gt(&s, &x).unwrap();
        assert_eq!(g.occupied(), vec![true, true, false]);
        let other = GridSpec::new([1, 3, 1], 0.1, [0.0; 3]);
        let bad = SdfVolume::new(Volume::new(other, 1, vec![0.4; 3]).unwrap(), 0.4).unwrap();
        assert!(matches!(derive_geometric_gt(&s, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pose_round_trip() {
        let pose = Pose::look_along([1.0, 1.4, 0.2], [0.3, -0.4, 1.0]);
        let p = [2.0, 0.5, 3.0];
        let q = pose.camera_to_world(pose.world_to_camera(p));
        for a in 0..3 {
            assert!((p[a] - q[a]).abs() < 1e-5);
        }
        assert_eq!(Pose::from_rows(pose.to_rows()), pose);
    }
}
