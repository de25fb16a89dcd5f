//! Evaluation: decision rule, IoU in both modes, reference baselines,
//! single-image completion and cube-mesh export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{sample_latent, stack, ForkNet, LatentCode};
use crate::nn::{Ctx, Mode};
use crate::scene::{load_sample, Manifest, Sample, Split};
use crate::tensor::{Element, Tensor};
use crate::voxel::{default_truncation, depth_to_sdf, read_depth, write_volume, GridSpec, SdfVolume, Volume};

/// Per-voxel argmax over the channel axis of a `[C, …]` or `[B, C, …]`
/// tensor, ties to the lowest class. Batched input yields labels item by
/// item.
pub fn binarize<T: Element>(s: &Tensor<T>) -> Result<Vec<u8>> {
    let (batch, channels) = match *s.shape() {
        [c, _, _, _] => (1, c),
        [b, c, _, _, _] => (b, c),
        ref other => return Err(Error::Shape(format!("binarize expects rank 4 or 5, got {other:?}"))),
    };
    if channels == 0 || channels > 256 {
        return Err(Error::Shape(format!("{channels} channels")));
    }
    let v = s.len() / (batch * channels);
    let d = s.data();
    let mut out = Vec::with_capacity(batch * v);
    for b in 0..batch {
        let base = b * channels * v;
        for i in 0..v {
            let mut best = 0;
            for c in 1..channels {
                if d[base + c * v + i] > d[base + best * v + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Every voxel of the grid.
    Full,
    /// Voxels on the observed surface, `|x| ≤ voxel_size/2`.
    Surface,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::Surface => "surface",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `None` when the class appears in neither prediction nor ground
    /// truth.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }
}

/// Counts for classes `1..=N`; index 0 of `counts` is class 1.
#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    pub mode: EvalMode,
    pub counts: Vec<ClassCounts>,
}

impl IoUReport {
    pub fn new(mode: EvalMode, classes: usize) -> Self {
        IoUReport {
            mode,
            counts: vec![ClassCounts::default(); classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.counts.iter().map(ClassCounts::iou).collect()
    }

    /// Mean IoU over classes present in prediction or ground truth.
    pub fn average(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn merge(&mut self, other: &IoUReport) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
    }

    /// Machine-readable table: `class iou tp fp fn` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("class iou tp fp fn\n");
        for (i, c) in self.counts.iter().enumerate() {
            let iou = c.iou().map_or("nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{} {iou} {} {} {}", i + 1, c.tp, c.fp, c.fn_);
        }
        let _ = writeln!(out, "mean {:.6}", self.average());
        out
    }

    pub fn table(&self, names: &[String]) -> String {
        let mut out = format!("{:<10} {:>8} {:>10} {:>10} {:>10}\n", self.mode.name(), "iou", "tp", "fp", "fn");
        for (i, c) in self.counts.iter().enumerate() {
            let name = names.get(i + 1).cloned().unwrap_or_else(|| format!("class{}", i + 1));
            let iou = c.iou().map_or("-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(out, "{name:<10} {iou:>8} {:>10} {:>10} {:>10}", c.tp, c.fp, c.fn_);
        }
        let _ = writeln!(out, "{:<10} {:>8.4}", "mean", self.average());
        out
    }
}

/// Counts agreement between label volumes, optionally restricted to
/// `mask`.
pub fn iou(pred: &[u8], gt: &[u8], classes: usize, mode: EvalMode, mask: Option<&[bool]>) -> Result<IoUReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction {} vs ground truth {} voxels", pred.len(), gt.len())));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::Shape(format!("mask {} vs {} voxels", m.len(), gt.len())));
        }
    }
    if mode == EvalMode::Surface && mask.is_none() {
        return Err(Error::Contract("surface evaluation needs the observed mask".into()));
    }
    let mut report = IoUReport::new(mode, classes);
    for (v, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if mask.is_some_and(|m| !m[v]) || p == g && p == 0 {
            continue;
        }
        if p == g {
            if let Some(c) = report.counts.get_mut(p as usize - 1) {
                c.tp += 1;
            }
            continue;
        }
        if p != 0 {
            if let Some(c) = report.counts.get_mut(p as usize - 1) {
                c.fp += 1;
            }
        }
        if g != 0 {
            if let Some(c) = report.counts.get_mut(g as usize - 1) {
                c.fn_ += 1;
            }
        }
    }
    Ok(report)
}

pub fn observed_mask(x: &SdfVolume) -> Vec<bool> {
    x.surface_mask()
}

/// Most frequent non-empty class over a set of label volumes, ties to the
/// lowest class.
pub fn majority_class<'a>(labels: impl IntoIterator<Item = &'a [u8]>, classes: usize) -> u8 {
    let mut hist = vec![0u64; classes + 1];
    for l in labels {
        for &c in l {
            if (c as usize) <= classes {
                hist[c as usize] += 1;
            }
        }
    }
    let mut best = 1;
    for c in 2..=classes {
        if hist[c] > hist[best] {
            best = c;
        }
    }
    best as u8
}

/// Every voxel assigned `class`.
pub fn majority_fill(voxels: usize, class: u8) -> Vec<u8> {
    vec![class; voxels]
}

/// Ground-truth labels on the observed surface, empty elsewhere.
pub fn copy_visible_labels(gt: &[u8], x: &SdfVolume) -> Vec<u8> {
    gt.iter()
        .zip(observed_mask(x))
        .map(|(&g, m)| if m { g } else { 0 })
        .collect()
}

/// The three reconstructions of one input, on its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    /// SDF estimate in meters.
    pub x_hat: Volume,
    pub g: Volume,
    pub s: Volume,
}

impl Completion {
    pub fn labels(&self) -> Vec<u8> {
        self.s.argmax()
    }
}

fn volume_from<T: Element>(t: &Tensor<T>, grid: GridSpec, scale: f64) -> Result<Volume> {
    let channels = t.shape()[1];
    let data = t.data().iter().map(|v| (v.as_f64() * scale) as f32).collect();
    Volume::new(grid, channels, data)
}

/// Inference-mode forward pass of one SDF volume.
pub fn infer(net: &ForkNet<f32>, x: &SdfVolume) -> Result<Completion> {
    let cfg = net.config();
    if x.grid().dims != cfg.grid {
        return Err(Error::Config(format!(
            "input grid {:?} does not match model grid {:?}",
            x.grid().dims,
            cfg.grid
        )));
    }
    let [d, h, w] = cfg.grid;
    let input = Tensor::from_vec(&[1, 1, d, h, w], x.normalized())?;
    let mut params = net.params.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Infer, &[]);
    let xv = ctx.tape.constant(input);
    let code = net.arch.encode(&mut ctx, xv, None)?;
    let out = net.arch.decode(&mut ctx, code.mean)?;
    let grid = *x.grid();
    Ok(Completion {
        x_hat: volume_from(ctx.tape.value(out.sdf), grid, x.truncation as f64)?,
        g: volume_from(ctx.tape.value(out.geometry), grid, 1.0)?,
        s: volume_from(ctx.tape.value(out.semantic), grid, 1.0)?,
    })
}

/// Voxelizes a stored depth image onto the model grid (at the world
/// origin) and runs inference.
pub fn complete_depth(depth_path: &Path, net: &ForkNet<f32>, voxel_size: f32) -> Result<Completion> {
    let depth = read_depth(depth_path)?;
    let grid = GridSpec::new(net.config().grid, voxel_size, [0.0; 3]);
    let x = depth_to_sdf(&depth, &grid, default_truncation(voxel_size))?;
    infer(net, &x)
}

/// Voxelizes a stored depth image onto the model grid (the grid sits at
/// the world origin with the sample voxel size) and writes `x_hat.fvox`,
/// `g.fvox`, `s.fvox` into `out_dir`, plus an optional OBJ mesh.
pub fn complete(
    depth_path: &Path,
    net: &ForkNet<f32>,
    voxel_size: f32,
    out_dir: &Path,
    mesh: Option<&Path>,
) -> Result<Completion> {
    let c = complete_depth(depth_path, net, voxel_size)?;
    let grid = c.s.grid;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_volume(out_dir.join("x_hat.fvox"), &c.x_hat)?;
    write_volume(out_dir.join("g.fvox"), &c.g)?;
    write_volume(out_dir.join("s.fvox"), &c.s)?;
    if let Some(path) = mesh {
        export_mesh(&c.labels(), &grid, &class_names(net.config().classes), path)?;
    }
    Ok(c)
}

/// A generated SDF (meters) with its semantic volume.
#[derive(Clone, Debug)]
pub struct SampledPair {
    pub x: Volume,
    pub s: Volume,
}

/// Decodes `count` codes drawn around the latent mean recorded in the
/// checkpoint, one code per pair.
pub fn sample_pairs(net: &ForkNet<f32>, count: usize, std: f64, seed: u64, voxel_size: f32) -> Result<Vec<SampledPair>> {
    let cfg = net.config();
    let grid = GridSpec::new(cfg.grid, voxel_size, [0.0; 3]);
    let tau = default_truncation(voxel_size) as f64;
    let mean = net.params.get(net.arch.latent_mean).value.clone();
    let center = LatentCode {
        logvar: Tensor::zeros(mean.shape())?,
        z: mean.clone(),
        mean,
    };
    (0..count)
        .map(|k| {
            let code = sample_latent(std::slice::from_ref(&center), std, seed.wrapping_add(k as u64))?;
            let z = stack(&[&code.z])?;
            let mut params = net.params.clone();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Infer, &[]);
            let zv = ctx.tape.constant(z);
            let out = net.arch.decode(&mut ctx, zv)?;
            Ok(SampledPair {
                x: volume_from(ctx.tape.value(out.sdf), grid, tau)?,
                s: volume_from(ctx.tape.value(out.semantic), grid, 1.0)?,
            })
        })
        .collect()
}

/// Writes pairs as `sample_KKK_x.fvox` and `sample_KKK_s.fvox`.
pub fn write_pairs(pairs: &[SampledPair], out_dir: &Path) -> Result<Vec<(std::path::PathBuf, std::path::PathBuf)>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let xp = out_dir.join(format!("sample_{k:03}_x.fvox"));
            let sp = out_dir.join(format!("sample_{k:03}_s.fvox"));
            write_volume(&xp, &p.x)?;
            write_volume(&sp, &p.s)?;
            Ok((xp, sp))
        })
        .collect()
}

/// Default class names: empty, floor, wall, then alternating furniture.
pub fn class_names(classes: usize) -> Vec<String> {
    (0..=classes)
        .map(|c| match c {
            0 => "empty".to_string(),
            1 => "floor".to_string(),
            2 => "wall".to_string(),
            c if (c - 3) % 2 == 0 => format!("box{}", (c - 3) / 2),
            c => format!("table{}", (c - 3) / 2),
        })
        .map(|s| s.replace("box0", "box").replace("table0", "table"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mesh {
    pub obj: String,
    pub vertices: usize,
    pub triangles: usize,
}

const FACES: [([i64; 3], [[i64; 3]; 4]); 6] = [
    ([-1, 0, 0], [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]]),
    ([1, 0, 0], [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
    ([0, -1, 0], [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]]),
    ([0, 1, 0], [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
    ([0, 0, -1], [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]),
    ([0, 0, 1], [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
];

/// Cube mesh of every non-empty voxel. Faces shared by two voxels of the
/// same class are dropped; vertices are shared.
pub fn build_mesh(labels: &[u8], grid: &GridSpec, names: &[String]) -> Result<Mesh> {
    if labels.len() != grid.len() {
        return Err(Error::Shape(format!("{} labels for {} voxels", labels.len(), grid.len())));
    }
    let dims = grid.dims.map(|d| d as i64);
    let label_at = |p: [i64; 3]| -> u8 {
        if (0..3).all(|a| p[a] >= 0 && p[a] < dims[a]) {
            labels[grid.index(p.map(|v| v as usize))]
        } else {
            0
        }
    };
    let mut vertex_ids: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces_by_class: Vec<Vec<[usize; 3]>> = vec![Vec::new(); names.len().max(256)];
    for (idx, &c) in labels.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let v = grid.coords(idx).map(|x| x as i64);
        for (n, quad) in FACES {
            let nb = [v[0] + n[0], v[1] + n[1], v[2] + n[2]];
            if label_at(nb) == c {
                continue;
            }
            let ids: Vec<usize> = quad
                .iter()
                .map(|o| {
                    let corner = [v[0] + o[0], v[1] + o[1], v[2] + o[2]];
                    *vertex_ids.entry(corner).or_insert_with(|| {
                        vertices.push(corner);
                        vertices.len()
                    })
                })
                .collect();
            faces_by_class[c as usize].push([ids[0], ids[1], ids[2]]);
            faces_by_class[c as usize].push([ids[0], ids[2], ids[3]]);
        }
    }
    let mut obj = String::from("# voxel cube mesh\n");
    for c in &vertices {
        let p = [0, 1, 2].map(|a| grid.origin[a] + c[a] as f32 * grid.voxel_size);
        let _ = writeln!(obj, "v {} {} {}", p[0], p[1], p[2]);
    }
    let mut triangles = 0;
    for (class, faces) in faces_by_class.iter().enumerate() {
        if faces.is_empty() {
            continue;
        }
        let name = names.get(class).cloned().unwrap_or_else(|| format!("class{class}"));
        let _ = writeln!(obj, "usemtl {name}");
        for f in faces {
            let _ = writeln!(obj, "f {} {} {}", f[0], f[1], f[2]);
        }
        triangles += faces.len();
    }
    Ok(Mesh {
        obj,
        vertices: vertices.len(),
        triangles,
    })
}

pub fn export_mesh(labels: &[u8], grid: &GridSpec, names: &[String], path: &Path) -> Result<Mesh> {
    let mesh = build_mesh(labels, grid, names)?;
    fs::write(path, &mesh.obj).map_err(|e| Error::io(path, e))?;
    Ok(mesh)
}

/// Network and baseline reports over one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: IoUReport,
    pub majority: IoUReport,
    pub copy_visible: IoUReport,
    pub majority_class: u8,
}

/// Evaluates `net` on the held-out split of a dataset in `mode`. The
/// majority class is measured on the training split.
pub fn evaluate(net: &ForkNet<f32>, data_dir: &Path, mode: EvalMode) -> Result<Evaluation> {
    let manifest = Manifest::read(data_dir)?;
    let classes = net.config().classes;
    let train: Vec<Sample> = manifest
        .ids(Split::Train)
        .par_iter()
        .map(|id| load_sample(data_dir, id))
        .collect::<Result<_>>()?;
    let train_labels: Vec<Vec<u8>> = train.iter().map(|s| s.s_gt.labels()).collect();
    let majority = majority_class(train_labels.iter().map(Vec::as_slice), classes);
    drop(train);

    let held = manifest.ids(Split::HeldOut);
    if held.is_empty() {
        return Err(Error::Data("dataset has no held-out samples".into()));
    }
    let reports: Vec<[IoUReport; 3]> = held
        .par_iter()
        .map(|id| {
            let s = load_sample(data_dir, id)?;
            let gt = s.s_gt.labels();
            let mask = observed_mask(&s.x);
            let m = (mode == EvalMode::Surface).then_some(mask.as_slice());
            let pred = infer(net, &s.x)?.labels();
            Ok([
                iou(&pred, &gt, classes, mode, m)?,
                iou(&majority_fill(gt.len(), majority), &gt, classes, mode, m)?,
                iou(&copy_visible_labels(&gt, &s.x), &gt, classes, mode, m)?,
            ])
        })
        .collect::<Result<_>>()?;
    let mut out = [0, 1, 2].map(|_| IoUReport::new(mode, classes));
    for r in &reports {
        for k in 0..3 {
            out[k].merge(&r[k]);
        }
    }
    let [model, majority_r, copy] = out;
    Ok(Evaluation {
        model,
        majority: majority_r,
        copy_visible: copy,
        majority_class: majority,
    })
}
