//! Scene container: a `key = value` manifest next to two raw payloads.
//!
//! ```text
//! version     = 1
//! height      = 32
//! width       = 32
//! bands       = 20
//! dtype       = f32le
//! interleave  = bsq
//! data_file   = scene.bsq
//! gt_file     = scene.gt
//! classes     = grass,water,...
//! palette     = #e6194b,#3cb44b,...
//! wavelengths = 400,431.6,...
//! ```
//!
//! The data file holds `f32` LE reflectances, band-sequential and row-major
//! within a band. The label file holds `u16` LE labels, row-major, 0 meaning
//! unlabeled and `k` meaning the k-th name in `classes`. `wavelengths` (nm)
//! is optional. Payload sizes must match the header exactly.

use std::path::{Path, PathBuf};

use super::{GroundTruth, HsiCube};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const MANIFEST_VERSION: u32 = 1;

fn read_exact_len(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn parse_color(s: &str) -> Option<[u8; 3]> {
    let hex = s.trim().strip_prefix('#')?;
    if hex.len() != 6 {
        return None;
    }
    let v = u32::from_str_radix(hex, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

fn list(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        Vec::new()
    } else {
        s.split(',').map(str::trim).collect()
    }
}

/// Reads a manifest and the payloads it names (paths relative to the
/// manifest's directory).
pub fn load_cube(manifest: &Path) -> Result<(HsiCube, GroundTruth)> {
    let kv = KeyValues::read(manifest)?;
    let bad = |msg: String| Error::format(manifest, msg);
    let version: u32 = kv.parse_req("version")?;
    if version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported manifest version {version}")));
    }
    let dtype = kv.require("dtype")?;
    if !dtype.eq_ignore_ascii_case("f32le") {
        return Err(bad(format!("unsupported dtype `{dtype}`, expected f32le")));
    }
    let interleave = kv.require("interleave")?;
    if !interleave.eq_ignore_ascii_case("bsq") {
        return Err(bad(format!("unsupported interleave `{interleave}`, expected bsq")));
    }
    let h: usize = kv.parse_req("height")?;
    let w: usize = kv.parse_req("width")?;
    let d: usize = kv.parse_req("bands")?;
    let classes: Vec<String> = list(kv.require("classes")?).into_iter().map(String::from).collect();
    let palette = list(kv.require("palette")?)
        .into_iter()
        .map(|c| parse_color(c).ok_or_else(|| bad(format!("bad palette color `{c}`"))))
        .collect::<Result<Vec<_>>>()?;
    if palette.len() != classes.len() {
        return Err(bad(format!(
            "{} classes but {} palette colors",
            classes.len(),
            palette.len()
        )));
    }
    let wavelengths = match kv.get("wavelengths") {
        Some(s) => {
            let wl = list(s)
                .into_iter()
                .map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad wavelength `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            if wl.len() != d {
                return Err(bad(format!("{} wavelengths for {d} bands", wl.len())));
            }
            Some(wl)
        }
        None => None,
    };

    let dir = manifest.parent().unwrap_or(Path::new("."));
    let data_path = dir.join(kv.require("data_file")?);
    let gt_path = dir.join(kv.require("gt_file")?);
    let n = (h * w * d) as u64;
    let raw = read_exact_len(&data_path, 4 * n)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut cube = HsiCube::new(h, w, d, data).map_err(|e| Error::format(&data_path, e.to_string()))?;
    cube.wavelengths = wavelengths;

    let raw = read_exact_len(&gt_path, 2 * (h * w) as u64)?;
    let labels: Vec<u16> = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let gt = GroundTruth::new(h, w, labels, classes, palette)?;
    Ok((cube, gt))
}

/// Writes `<stem>.manifest`, `<stem>.bsq` and `<stem>.gt` into `dir` and
/// returns the manifest path. Reflectances are stored as `f32`.
pub fn write_scene(dir: &Path, stem: &str, cube: &HsiCube, gt: &GroundTruth) -> Result<PathBuf> {
    if gt.height() != cube.height() || gt.width() != cube.width() {
        return Err(Error::InvalidArgument(format!(
            "labels are {}×{} but the cube is {}×{}",
            gt.height(),
            gt.width(),
            cube.height(),
            cube.width()
        )));
    }
    if let Some(c) = gt.classes().iter().find(|c| c.contains([',', '\n', '#']) || c.trim() != c.as_str()) {
        return Err(Error::InvalidArgument(format!("class name `{c}` cannot be stored")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_name = format!("{stem}.bsq");
    let gt_name = format!("{stem}.gt");

    let mut kv = KeyValues::new("manifest");
    kv.set("version", MANIFEST_VERSION);
    kv.set("height", cube.height());
    kv.set("width", cube.width());
    kv.set("bands", cube.bands());
    kv.set("dtype", "f32le");
    kv.set("interleave", "bsq");
    kv.set("data_file", &data_name);
    kv.set("gt_file", &gt_name);
    kv.set("classes", gt.classes().join(","));
    let colors: Vec<String> = gt
        .palette()
        .iter()
        .map(|[r, g, b]| format!("#{r:02x}{g:02x}{b:02x}"))
        .collect();
    kv.set("palette", colors.join(","));
    if let Some(wl) = &cube.wavelengths {
        let s: Vec<String> = wl.iter().map(f64::to_string).collect();
        kv.set("wavelengths", s.join(","));
    }

    let bytes: Vec<u8> = cube.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let path = dir.join(&data_name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let bytes: Vec<u8> = gt.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    let path = dir.join(&gt_name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(format!("{stem}.manifest"));
    std::fs::write(&path, kv.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
