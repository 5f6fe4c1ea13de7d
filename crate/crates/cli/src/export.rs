//! CSV point lists and 8-bit PNG previews for external plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fringeforge::io::{read_json, read_pgm16, read_ply, read_raster, write_file, RasterHeader};
use fringeforge::reconstruct::{Point, PointCloud};

const PREVIEW: u32 = 256;

fn save_png(path: &Path, width: u32, height: u32, pixels: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let img = image::GrayImage::from_raw(width, height, pixels).context("preview buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn cloud_csv(cloud: &PointCloud) -> String {
    let mut s = String::from(if cloud.pixels.is_some() { "x,y,z,u,v\n" } else { "x,y,z\n" });
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.pixels {
            Some(px) => writeln!(s, "{},{},{},{},{}", p.x, p.y, p.z, px[i][0], px[i][1]),
            None => writeln!(s, "{},{},{}", p.x, p.y, p.z),
        }
        .unwrap();
    }
    s
}

/// Front view of a cloud: x right, y down, nearer points brighter.
pub fn cloud_preview(cloud: &PointCloud) -> Vec<u8> {
    let n = PREVIEW as usize;
    let mut img = vec![0u8; n * n];
    if cloud.is_empty() {
        return img;
    }
    let bound = |f: fn(&Point) -> f64| {
        cloud.points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = bound(|p| p.x);
    let (y0, y1) = bound(|p| p.y);
    let (z0, z1) = bound(|p| p.z);
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let zspan = (z1 - z0).max(1e-9);
    for p in &cloud.points {
        let u = (((p.x - x0) / span) * (n - 1) as f64).round() as usize;
        let v = (((p.y - y0) / span) * (n - 1) as f64).round() as usize;
        let shade = to_u8(0.25 + 0.75 * (z1 - p.z) / zspan);
        let px = &mut img[v.min(n - 1) * n + u.min(n - 1)];
        *px = (*px).max(shade);
    }
    img
}

fn export_file(input: &Path, out_stem: &Path) -> Result<bool> {
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "ply" => {
            let cloud = read_ply(input)?;
            write_file(&out_stem.with_extension("csv"), cloud_csv(&cloud))?;
            save_png(&out_stem.with_extension("png"), PREVIEW, PREVIEW, cloud_preview(&cloud))?;
        }
        "pgm" => {
            let img = read_pgm16(input)?;
            let pixels = img.as_slice().iter().map(|&v| to_u8(v)).collect();
            save_png(&out_stem.with_extension("png"), img.width() as u32, img.height() as u32, pixels)?;
        }
        "bin" => {
            // Only rasters; model weights share the extension but not the sidecar shape.
            if read_json::<RasterHeader>(&input.with_extension("json")).is_err() {
                return Ok(false);
            }
            let (_, values, mask) = read_raster(input)?;
            let valid: Vec<f64> = (0..values.len()).filter(|&i| mask[i]).map(|i| values[i]).collect();
            let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = (hi - lo).max(1e-12);
            let pixels = (0..values.len()).map(|i| if mask[i] { to_u8((values[i] - lo) / range) } else { 0 }).collect();
            save_png(&out_stem.with_extension("png"), values.width() as u32, values.height() as u32, pixels)?;
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading {}", dir.display()))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk(&path, files)?;
        } else {
            files.push(path);
        }
    }
    Ok(())
}

/// Exports one file, or every PLY/PGM/raster under a directory, mirroring
/// relative paths under `out`. Returns the number of files exported.
pub fn export(input: &Path, out: &Path) -> Result<usize> {
    let mut count = 0;
    if input.is_dir() {
        let mut files = Vec::new();
        walk(input, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(input).unwrap();
            if export_file(&f, &out.join(rel))? {
                count += 1;
            }
        }
    } else {
        let name = input.file_name().context("input has no file name")?;
        if !export_file(input, &out.join(name))? {
            anyhow::bail!("{}: not a PLY, PGM or raster file", input.display());
        }
        count = 1;
    }
    Ok(count)
}
