//! On-disk formats: 16-bit PGM images, float64 rasters with JSON sidecars,
//! ASCII PLY clouds, model weights with a JSON header, and attack result
//! directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::attack::{Artifact, AttackConfig, AttackResult, RmseReport, SearchStep, TraceRow};
use crate::error::{Error, Result};
use crate::fringe::{PhaseKind, PhaseMap};
use crate::geometry::Calibration;
use crate::photometric::SceneSurface;
use crate::raster::{Grid, Image, Mask};
use crate::recognize::ModelParams;
use crate::reconstruct::{DepthImage, PointCloud};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a file, creating parent directories.
pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Binary PGM, maxval 65535, linear; values are clamped to `[0, 1]`.
pub fn encode_pgm16(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    out.reserve(2 * image.len());
    for &v in image.as_slice() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<Image> {
    let bad = |d: &str| Error::format("PGM", d);
    // Header: magic, width, height, maxval, each separated by whitespace; comments start with '#'.
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5 magic"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let data = bytes.get(i + 1..).ok_or_else(|| bad("no pixel data"))?;
    let wide = maxval > 255;
    let per = if wide { 2 } else { 1 };
    if data.len() != width * height * per {
        return Err(bad("pixel data length does not match header"));
    }
    let values = (0..width * height)
        .map(|k| {
            let q = if wide { u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as f64 } else { data[k] as f64 };
            q / maxval as f64
        })
        .collect();
    Grid::from_vec(width, height, values)
}

pub fn write_pgm16(path: &Path, image: &Image) -> Result<()> {
    write_file(path, encode_pgm16(image))
}

pub fn read_pgm16(path: &Path) -> Result<Image> {
    decode_pgm16(&read(path)?)
}

/// Sidecar of a float64 raster. `kind` is `wrapped`, `absolute`, `depth` or
/// `albedo`; `n_s` is zero for non-phase rasters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub kind: String,
    pub n_s: usize,
}

/// Little-endian float64 values in raster order; masked-out pixels are NaN.
pub fn encode_raster(values: &Image, mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * values.len());
    for (i, &v) in values.as_slice().iter().enumerate() {
        let v = if mask[i] { v } else { f64::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(header: &RasterHeader, bytes: &[u8]) -> Result<(Image, Mask)> {
    let n = header.width * header.height;
    if bytes.len() != 8 * n {
        return Err(Error::format("raster", format!("expected {} bytes, found {}", 8 * n, bytes.len())));
    }
    let raw: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mask = Grid::from_vec(header.width, header.height, raw.iter().map(|v| !v.is_nan()).collect())?;
    let values = Grid::from_vec(header.width, header.height, raw.iter().map(|&v| if v.is_nan() { 0.0 } else { v }).collect())?;
    Ok((values, mask))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (binary) and its `.json` sidecar.
pub fn write_raster(path: &Path, header: &RasterHeader, values: &Image, mask: &Mask) -> Result<()> {
    if values.width() != header.width || values.height() != header.height || mask.len() != values.len() {
        return Err(Error::ShapeMismatch("raster header does not match its data".into()));
    }
    write_file(path, encode_raster(values, mask))?;
    write_json(&sidecar(path), header)
}

pub fn read_raster(path: &Path) -> Result<(RasterHeader, Image, Mask)> {
    let header: RasterHeader = read_json(&sidecar(path))?;
    let (values, mask) = decode_raster(&header, &read(path)?)?;
    Ok((header, values, mask))
}

fn kind_name(kind: PhaseKind) -> &'static str {
    match kind {
        PhaseKind::Wrapped => "wrapped",
        PhaseKind::Absolute => "absolute",
    }
}

/// Modulation is not stored; it loads as 1 on valid pixels and 0 elsewhere.
pub fn write_phase_map(path: &Path, phase: &PhaseMap) -> Result<()> {
    let header = RasterHeader {
        width: phase.width(),
        height: phase.height(),
        kind: kind_name(phase.kind).into(),
        n_s: phase.fringe_count,
    };
    write_raster(path, &header, &phase.values, &phase.mask)
}

pub fn read_phase_map(path: &Path) -> Result<PhaseMap> {
    let (header, values, mask) = read_raster(path)?;
    let kind = match header.kind.as_str() {
        "wrapped" => PhaseKind::Wrapped,
        "absolute" => PhaseKind::Absolute,
        other => return Err(Error::format("phase map", format!("kind {other:?} is not a phase"))),
    };
    let modulation = Grid::from_vec(mask.width(), mask.height(), mask.as_slice().iter().map(|&m| m as u8 as f64).collect())?;
    Ok(PhaseMap { kind, fringe_count: header.n_s, values, mask, modulation })
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let header = RasterHeader { width: depth.depth.width(), height: depth.depth.height(), kind: "depth".into(), n_s: 0 };
    write_raster(path, &header, &depth.depth, &depth.mask)
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let (header, depth, mask) = read_raster(path)?;
    if header.kind != "depth" {
        return Err(Error::format("depth image", format!("kind {:?}", header.kind)));
    }
    Ok(DepthImage { depth, mask })
}

/// Scene directory: `depth.bin`, `albedo.bin` (with sidecars) and `calibration.json`.
pub fn write_scene(dir: &Path, scene: &SceneSurface, calibration: &Calibration) -> Result<()> {
    let all = Grid::filled(scene.width(), scene.height(), true);
    let header = |kind: &str| RasterHeader { width: scene.width(), height: scene.height(), kind: kind.into(), n_s: 0 };
    write_raster(&dir.join("depth.bin"), &header("depth"), &scene.depth, &all)?;
    write_raster(&dir.join("albedo.bin"), &header("albedo"), &scene.albedo, &all)?;
    write_file(&dir.join("calibration.json"), calibration.to_json()? + "\n")
}

/// Loads a scene; normals are recomputed from the height field.
pub fn read_scene(dir: &Path) -> Result<(SceneSurface, Calibration)> {
    let calibration = Calibration::from_json(&read_text(&dir.join("calibration.json"))?)?;
    let (_, depth, _) = read_raster(&dir.join("depth.bin"))?;
    let (_, albedo, _) = read_raster(&dir.join("albedo.bin"))?;
    let scene = SceneSurface::from_height_field(calibration.camera.clone(), depth, albedo)?;
    Ok((scene, calibration))
}

/// ASCII PLY with one `comment pixel <index> <u> <v>` line per point when
/// provenance is known.
pub fn encode_ply(cloud: &PointCloud) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    if let Some(pixels) = &cloud.pixels {
        for (i, p) in pixels.iter().enumerate() {
            let _ = writeln!(s, "comment pixel {i} {} {}", p[0], p[1]);
        }
    }
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn decode_ply(text: &str) -> Result<PointCloud> {
    let bad = |d: String| Error::format("PLY", d);
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut pixels: Vec<(usize, [u32; 2])> = Vec::new();
    let mut properties = Vec::new();
    for line in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", "pixel", i, u, v] => {
                let p = |s: &str| s.parse::<u32>().map_err(|_| bad(format!("bad pixel comment {line:?}")));
                pixels.push((p(i)? as usize, [p(u)?, p(v)?]));
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad count {n}")))?),
            ["element", ..] => {}
            ["property", _, name] => properties.push(name.to_string()),
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let axis = |name: &str| properties.iter().position(|p| p == name).ok_or_else(|| bad(format!("no {name} property")));
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad vertex {line:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != properties.len() {
            return Err(bad(format!("vertex has {} fields, expected {}", vals.len(), properties.len())));
        }
        points.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
    }
    if points.len() != count {
        return Err(bad(format!("expected {count} vertices, found {}", points.len())));
    }
    let pixels = if pixels.is_empty() {
        None
    } else {
        if pixels.len() != count || pixels.iter().enumerate().any(|(k, (i, _))| *i != k) {
            return Err(bad("pixel comments do not cover every vertex in order".into()));
        }
        Some(pixels.into_iter().map(|(_, p)| p).collect())
    };
    Ok(PointCloud { points, pixels })
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_file(path, encode_ply(cloud))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&read_text(path)?)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    #[serde(flatten)]
    params: ModelParams,
    weight_count: usize,
}

/// Writes little-endian float64 weights to `path` and the header to the `.json` sidecar.
pub fn write_model(path: &Path, model: &ModelParams) -> Result<()> {
    let bytes: Vec<u8> = model.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    write_file(path, bytes)?;
    write_json(&sidecar(path), &ModelHeader { params: model.clone(), weight_count: model.weights.len() })
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    let header: ModelHeader = read_json(&sidecar(path))?;
    let bytes = read(path)?;
    let mut model = header.params;
    if bytes.len() != 8 * header.weight_count || header.weight_count != model.parameter_count() {
        return Err(Error::format(
            "model",
            format!("{} weight bytes for {} expected weights", bytes.len(), model.parameter_count()),
        ));
    }
    model.weights = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(model)
}

pub fn config_hash(config: &AttackConfig) -> Result<u64> {
    Ok(fnv1a(&serde_json::to_vec(config)?))
}

/// Content address of an attack run: seed plus a hash of the full config.
pub fn attack_dir_name(label: usize, config: &AttackConfig) -> Result<String> {
    Ok(format!("face{label:03}-seed{:016x}-cfg{:016x}", config.seed, config_hash(config)?))
}

/// Everything in `metadata.json` of an attack directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetadata {
    pub label: usize,
    pub config: AttackConfig,
    pub config_hash: String,
    pub seed: u64,
    pub success: bool,
    pub surrogate_success: bool,
    pub lambda: Option<f64>,
    pub margin: f64,
    pub logits: Vec<f64>,
    pub rmse: RmseReport,
    pub l1: f64,
    pub iterations: usize,
    pub search: Vec<SearchStep>,
}

pub const TRACE_HEADER: &str = "stage,iteration,lambda,adversarial_loss,distance,total,margin";

pub fn encode_trace(rows: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.stage, r.iteration, r.lambda, r.adversarial_loss, r.distance, r.total, r.margin
        );
    }
    s
}

pub fn decode_trace(text: &str) -> Result<Vec<TraceRow>> {
    let bad = |d: String| Error::format("trace CSV", d);
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("row {line:?} has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            Ok(TraceRow {
                stage: f[0].to_string(),
                iteration: f[1].parse().map_err(|_| bad(format!("bad iteration {:?}", f[1])))?,
                lambda: num(f[2])?,
                adversarial_loss: num(f[3])?,
                distance: num(f[4])?,
                total: num(f[5])?,
                margin: num(f[6])?,
            })
        })
        .collect()
}

/// Writes an attack result under `root/<attack_dir_name>` and returns that directory.
///
/// Layout: `patterns/shift_NN.pgm` and `patterns/gray_NN.pgm` (or
/// `illumination.pgm`), `clean.ply`, `adversarial.ply`, `trace.csv`,
/// `metadata.json`.
pub fn write_attack_result(root: &Path, label: usize, config: &AttackConfig, result: &AttackResult) -> Result<PathBuf> {
    let dir = root.join(attack_dir_name(label, config)?);
    match &result.artifact {
        Artifact::Patterns(set) => {
            for (k, p) in set.shift_patterns.iter().enumerate() {
                write_pgm16(&dir.join(format!("patterns/shift_{k:02}.pgm")), &p.to_image())?;
            }
            for (k, p) in set.gray_patterns.iter().enumerate() {
                write_pgm16(&dir.join(format!("patterns/gray_{k:02}.pgm")), &p.to_image())?;
            }
        }
        Artifact::Illumination(x) => write_pgm16(&dir.join("illumination.pgm"), x)?,
    }
    write_ply(&dir.join("clean.ply"), &result.clean_cloud)?;
    write_ply(&dir.join("adversarial.ply"), &result.adversarial_cloud)?;
    write_file(&dir.join("trace.csv"), encode_trace(&result.trace))?;
    let meta = AttackMetadata {
        label,
        config: config.clone(),
        config_hash: format!("{:016x}", config_hash(config)?),
        seed: config.seed,
        success: result.success,
        surrogate_success: result.surrogate_success,
        lambda: result.lambda,
        margin: result.margin,
        logits: result.logits.clone(),
        rmse: result.rmse,
        l1: result.l1,
        iterations: result.iterations,
        search: result.search.clone(),
    };
    write_json(&dir.join("metadata.json"), &meta)?;
    Ok(dir)
}

pub fn read_attack_metadata(dir: &Path) -> Result<AttackMetadata> {
    read_json(&dir.join("metadata.json"))
}

pub fn read_trace(dir: &Path) -> Result<Vec<TraceRow>> {
    decode_trace(&read_text(&dir.join("trace.csv"))?)
}
