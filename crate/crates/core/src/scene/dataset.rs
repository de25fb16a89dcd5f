use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_scene, render_depth, SceneConfig};
use crate::error::{Error, Result};
use crate::voxel::{
    default_truncation, depth_to_sdf, derive_geometric_gt, labels_to_onehot, read_depth, read_volume, write_depth,
    write_volume, DepthImage, OccupancyVolume, SdfVolume, SemanticVolume,
};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::HeldOut => "heldout",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::HeldOut),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(split), None) => entries.push((id.to_string(), split.parse()?)),
                _ => return Err(Error::Data(format!("manifest line {}: {line:?}", n + 1))),
            }
        }
        Ok(Manifest { entries })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text: String = self.entries.iter().map(|(id, s)| format!("{id} {s}\n")).collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One training or evaluation example as stored on disk.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub depth: DepthImage,
    pub x: SdfVolume,
    pub s_gt: SemanticVolume,
    pub g_gt: OccupancyVolume,
}

/// Generates `count` scenes with per-sample seeds drawn from `seed`; the
/// last tenth (rounded down) is held out.
pub fn make_dataset(out_dir: impl AsRef<Path>, count: usize, seed: u64, config: &SceneConfig) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    let held_out = count / 10;
    let entries: Vec<(String, Split)> = (0..count)
        .map(|i| {
            let split = if i >= count - held_out { Split::HeldOut } else { Split::Train };
            (format!("{i:05}"), split)
        })
        .collect();

    entries
        .par_iter()
        .zip(seeds.par_iter())
        .try_for_each(|((id, _), &s)| {
            write_sample(&out_dir.join(id), s, config).map_err(|e| Error::Sample {
                sample: id.clone(),
                source: Box::new(e),
            })
        })?;

    let manifest = Manifest { entries };
    manifest.write(out_dir)?;
    Ok(manifest)
}

fn write_sample(dir: &Path, seed: u64, config: &SceneConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scene = generate_scene(seed, config)?;
    let depth_path = dir.join("depth.pgm");
    write_depth(&depth_path, &render_depth(&scene))?;
    // derive x from the stored image so disk and memory agree exactly
    let depth = read_depth(&depth_path)?;
    let grid = &scene.grid;
    let x = depth_to_sdf(&depth, grid, default_truncation(grid.voxel_size))?;
    let s_gt = labels_to_onehot(&scene.labels, grid, scene.classes)?;
    let g_gt = derive_geometric_gt(&s_gt, &x)?;
    write_volume(dir.join("x.fvox"), &x.volume)?;
    write_volume(dir.join("s_gt.fvox"), &s_gt.0)?;
    write_volume(dir.join("g_gt.fvox"), &g_gt.0)
}

pub fn load_sample(data_dir: impl AsRef<Path>, id: &str) -> Result<Sample> {
    let dir = data_dir.as_ref().join(id);
    let wrap = |e: Error| Error::Sample {
        sample: id.to_string(),
        source: Box::new(e),
    };
    let load = || -> Result<Sample> {
        let depth = read_depth(dir.join("depth.pgm"))?;
        let xv = read_volume(dir.join("x.fvox"))?;
        let tau = default_truncation(xv.grid.voxel_size);
        let x = SdfVolume::new(xv, tau)?;
        let s_gt = SemanticVolume::ground_truth(read_volume(dir.join("s_gt.fvox"))?)?;
        let g_gt = OccupancyVolume::ground_truth(read_volume(dir.join("g_gt.fvox"))?)?;
        if s_gt.0.grid.dims != x.grid().dims || g_gt.0.grid.dims != x.grid().dims {
            return Err(Error::Shape("sample volumes disagree on grid dims".into()));
        }
        Ok(Sample {
            id: id.to_string(),
            depth,
            x,
            s_gt,
            g_gt,
        })
    };
    load().map_err(wrap)
}
