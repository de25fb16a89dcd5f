use std::fs;
use std::path::{Path, PathBuf};

use super::{CameraIntrinsics, DepthImage, GridSpec, Pose, Volume};
use crate::error::{Error, Result};

pub const FVOX_MAGIC: &[u8; 4] = b"FVOX";
pub const FVOX_VERSION: u32 = 1;
pub const FVOX_HEADER_LEN: usize = 41;
const DTYPE_F32: u8 = 0;

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub(crate) fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(FVOX_HEADER_LEN + 4 * volume.data.len());
    out.extend_from_slice(FVOX_MAGIC);
    out.extend_from_slice(&FVOX_VERSION.to_le_bytes());
    out.extend_from_slice(&(volume.channels as u32).to_le_bytes());
    for d in volume.grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&volume.grid.voxel_size.to_le_bytes());
    for o in volume.grid.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in &volume.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))
    };
    if word(0)? != *FVOX_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FVOX\""));
    }
    let version = u32::from_le_bytes(word(4)?);
    if version != FVOX_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let channels = u32::from_le_bytes(word(8)?) as usize;
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(word(12 + 4 * a)?) as usize;
    }
    let voxel_size = f32::from_le_bytes(word(24)?);
    let mut origin = [0f32; 3];
    for (a, o) in origin.iter_mut().enumerate() {
        *o = f32::from_le_bytes(word(28 + 4 * a)?);
    }
    let dtype = *bytes
        .get(40)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(40, format!("unsupported dtype {dtype}")));
    }
    if channels == 0 || dims.contains(&0) {
        return Err(Error::format(8, format!("empty volume {channels}×{dims:?}")));
    }
    let count = channels
        .checked_mul(dims.iter().product())
        .ok_or_else(|| Error::format(8, "volume size overflows"))?;
    let payload = &bytes[FVOX_HEADER_LEN..];
    let expected = count * 4;
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            (FVOX_HEADER_LEN + expected) as u64,
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(GridSpec::new(dims, voxel_size, origin), channels, data)
}

/// Metadata file accompanying a depth PGM: `depth.pgm` → `depth.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn write_depth(path: impl AsRef<Path>, depth: &DepthImage) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &d in &depth.depth {
        let mm = (d * 1000.0).round();
        if !(0.0..=65535.0).contains(&mm) {
            return Err(Error::Data(format!("depth {d} m not representable in 16-bit millimeters")));
        }
        out.extend_from_slice(&(mm as u16).to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;

    let k = &depth.intrinsics;
    let pose = depth.pose.to_rows().map(|v| v.to_string()).join(" ");
    let meta = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\npose = {pose}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, depth) = decode_pgm(&bytes)?;

    let meta_path = sidecar_path(path);
    let meta = fs::read_to_string(&meta_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::format(0, format!("missing depth sidecar {}", meta_path.display()))
        }
        _ => Error::io(&meta_path, e),
    })?;
    let (intrinsics, pose) = parse_sidecar(&meta)?;
    if intrinsics.width != width || intrinsics.height != height {
        return Err(Error::Data(format!(
            "sidecar declares {}×{} but image is {width}×{height}",
            intrinsics.width, intrinsics.height
        )));
    }
    DepthImage::new(intrinsics, pose, depth)
}

fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PGM header"));
        }
        tokens.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    // exactly one whitespace byte separates maxval from the raster
    pos += 1;
    if tokens[0].1 != "P5" {
        return Err(Error::format(0, "not a binary PGM (expected P5)"));
    }
    let number = |(at, s): (usize, &str)| -> Result<usize> {
        s.parse().map_err(|_| Error::format(at as u64, format!("bad PGM header field {s:?}")))
    };
    let width = number(tokens[1])?;
    let height = number(tokens[2])?;
    if number(tokens[3])? != 65535 {
        return Err(Error::format(tokens[3].0 as u64, "expected maxval 65535"));
    }
    let expected = width * height * 2;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < expected {
        return Err(Error::format(bytes.len() as u64, "truncated PGM raster"));
    }
    let depth = raster[..expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 1000.0)
        .collect();
    Ok((width, height, depth))
}

fn parse_sidecar(text: &str) -> Result<(CameraIntrinsics, Pose)> {
    let mut fields = std::collections::HashMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::format(offset, format!("expected `key = value`, got {trimmed:?}")))?;
            fields.insert(k.trim().to_string(), (offset, v.trim().to_string()));
        }
        offset += line.len() as u64 + 1;
    }
    let get = |key: &str| -> Result<&(u64, String)> {
        fields
            .get(key)
            .ok_or_else(|| Error::format(0, format!("sidecar missing key `{key}`")))
    };
    let float = |key: &str| -> Result<f32> {
        let (at, v) = get(key)?;
        v.parse().map_err(|_| Error::format(*at, format!("bad value for `{key}`")))
    };
    let int = |key: &str| -> Result<usize> {
        let (at, v) = get(key)?;
        v.parse().map_err(|_| Error::format(*at, format!("bad value for `{key}`")))
    };
    let intrinsics = CameraIntrinsics {
        fx: float("fx")?,
        fy: float("fy")?,
        cx: float("cx")?,
        cy: float("cy")?,
        width: int("width")?,
        height: int("height")?,
    };
    let (at, pose_text) = get("pose")?;
    let values: Vec<f32> = pose_text
        .split_whitespace()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(*at, "bad pose value"))?;
    let rows: [f32; 12] = values
        .try_into()
        .map_err(|_| Error::format(*at, "pose needs 12 values"))?;
    Ok((intrinsics, Pose::from_rows(rows)))
}
