//! Differentiable phase-to-geometry path and point-cloud preprocessing:
//! triangulated clouds, depth images, farthest point sampling,
//! renormalization, random rigid transforms and the phase clip rule.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fringe::{column_per_radian, phase_to_column, Correspondence, PhaseKind, PhaseMap};
use crate::geometry::{rotation_xyz, triangulate, ProjectionMatrix};
use crate::raster::{Grid, Image, Mask};

pub type Point = Vector3<f64>;

/// Ordered points with optional camera-pixel provenance `[u, v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub pixels: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, pixels: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            pixels: self
                .pixels
                .as_ref()
                .map(|px| indices.iter().map(|&i| px[i]).collect()),
        }
    }
}

/// A cloud triangulated from a phase map, with `d point / d phase` per point.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub cloud: PointCloud,
    pub d_point_d_phase: Vec<Vector3<f64>>,
    /// Raster index of the source pixel of each point.
    pub pixel_index: Vec<usize>,
}

/// Triangulates one pixel from its absolute phase; returns the point and `dP/dphi`.
#[inline]
pub fn reconstruct_pixel(
    camera: &ProjectionMatrix,
    projector: &ProjectionMatrix,
    projector_width: usize,
    fringe_count: usize,
    u: usize,
    v: usize,
    phase: f64,
) -> Result<(Point, Vector3<f64>)> {
    let (column, _) = phase_to_column(phase, projector_width, fringe_count);
    let t = triangulate(camera, projector, u as f64, v as f64, column)?;
    let scale = column_per_radian(phase, projector_width, fringe_count);
    Ok((t.point, t.d_point_d_up * scale))
}

/// One point per valid pixel of an absolute phase map.
pub fn reconstruct_cloud(
    phase: &PhaseMap,
    camera: &ProjectionMatrix,
    projector: &ProjectionMatrix,
    projector_width: usize,
) -> Result<Reconstruction> {
    if phase.kind != PhaseKind::Absolute {
        return Err(Error::InvalidConfig("reconstruction needs an absolute phase map".into()));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut jac = Vec::new();
    let mut index = Vec::new();
    for i in 0..phase.values.len() {
        if !phase.mask[i] {
            continue;
        }
        let (u, v) = phase.values.coords(i);
        match reconstruct_pixel(camera, projector, projector_width, phase.fringe_count, u, v, phase.values[i]) {
            Ok((p, d)) => {
                points.push(p);
                jac.push(d);
                pixels.push([u as u32, v as u32]);
                index.push(i);
            }
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(Reconstruction {
        cloud: PointCloud {
            points,
            pixels: Some(pixels),
        },
        d_point_d_phase: jac,
        pixel_index: index,
    })
}

/// Projector coordinates each valid pixel's reconstructed point lands on.
pub fn correspondence(
    phase: &PhaseMap,
    rec: &Reconstruction,
    projector: &ProjectionMatrix,
    projector_width: usize,
) -> Grid<Option<Correspondence>> {
    let mut out = Grid::filled(phase.width(), phase.height(), None);
    for (k, &i) in rec.pixel_index.iter().enumerate() {
        if let Ok(p) = projector.project(&rec.cloud.points[k]) {
            let (column, _) = phase_to_column(phase.values[i], projector_width, phase.fringe_count);
            out[i] = Some(Correspondence { column, u_p: p.u, v_p: p.v });
        }
    }
    out
}

/// Per-pixel camera-frame depth with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub depth: Image,
    pub mask: Mask,
}

pub fn cloud_to_depth(
    cloud: &PointCloud,
    camera: &ProjectionMatrix,
    width: usize,
    height: usize,
) -> Result<DepthImage> {
    let pixels = cloud
        .pixels
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("depth rasterization needs pixel provenance".into()))?;
    let mut depth = Grid::filled(width, height, 0.0);
    let mut mask = Grid::filled(width, height, false);
    for (p, px) in cloud.points.iter().zip(pixels) {
        let (u, v) = (px[0] as usize, px[1] as usize);
        if u < width && v < height {
            let z = camera.to_device(p).z;
            if z > 0.0 {
                *depth.get_mut(u, v) = z;
                *mask.get_mut(u, v) = true;
            }
        }
    }
    Ok(DepthImage { depth, mask })
}

/// Random start index for farthest point sampling.
pub fn fps_start(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)
}

/// Greedy max-min selection starting at `start`; ties go to the lowest index.
pub fn fps_indices_from(points: &[Point], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n || start >= n {
        return Err(Error::InvalidK { k, n });
    }
    let mut selected = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        selected.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

pub fn fps_indices(points: &[Point], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidK { k, n: points.len() });
    }
    fps_indices_from(points, k, fps_start(points.len(), seed))
}

/// Farthest point sampling of `k` points; the seed selects the initial point.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    Ok(cloud.select(&fps_indices(&cloud.points, k, seed)?))
}

/// Centering and scaling used by [`renormalize`], kept for the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
    /// Index of the point farthest from the centroid.
    pub farthest: usize,
}

impl Normalization {
    pub fn fit(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateCloud);
        }
        let centroid = points.iter().sum::<Point>() / points.len() as f64;
        let mut scale = 0.0;
        let mut farthest = 0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - centroid).norm();
            if d > scale {
                scale = d;
                farthest = i;
            }
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateCloud);
        }
        Ok(Self { centroid, scale, farthest })
    }

    pub fn apply(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|p| (p - self.centroid) / self.scale).collect()
    }

    /// Gradient with respect to the input points given gradients on the normalized points.
    pub fn backward(&self, normalized: &[Point], grad: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let n = normalized.len() as f64;
        let s = self.scale;
        let sum: Vector3<f64> = grad.iter().sum();
        let d_scale = -grad.iter().zip(normalized).map(|(g, y)| g.dot(y)).sum::<f64>() / s;
        let dir = normalized[self.farthest];
        let shared = -sum / (n * s) - dir * (d_scale / n);
        let mut out: Vec<Vector3<f64>> = grad.iter().map(|g| g / s + shared).collect();
        out[self.farthest] += dir * d_scale;
        out
    }

    /// Backward pass treating centroid and scale as constants.
    pub fn backward_frozen(&self, grad: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        grad.iter().map(|g| g / self.scale).collect()
    }
}

/// Centers a cloud on its centroid and scales it to unit maximum norm.
pub fn renormalize(cloud: &PointCloud) -> Result<PointCloud> {
    let norm = Normalization::fit(&cloud.points)?;
    Ok(PointCloud {
        points: norm.apply(&cloud.points),
        pixels: cloud.pixels.clone(),
    })
}

/// FPS to `target` points (when the cloud is larger) followed by [`renormalize`].
pub fn resample_and_normalize(cloud: &PointCloud, target: Option<usize>, seed: u64) -> Result<PointCloud> {
    match target {
        Some(k) if k < cloud.len() => renormalize(&farthest_point_sample(cloud, k, seed)?),
        _ => renormalize(cloud),
    }
}

/// Rigid transform parameters: fixed angles/offsets plus Gaussian sampling spreads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Rotation angles about x, y, z in radians.
    pub angles: [f64; 3],
    /// Translation along x, y in normalized units.
    pub translation: [f64; 2],
    pub angle_sigma: f64,
    pub translation_sigma: f64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            angles: [0.0; 3],
            translation: [0.0; 2],
            angle_sigma: 0.0,
            translation_sigma: 0.0,
        }
    }

    /// Zero-mean sampling with 5 degree angle and 0.05 translation spreads.
    pub fn default_sampling() -> Self {
        Self {
            angle_sigma: 5f64.to_radians(),
            translation_sigma: 0.05,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angle_sigma >= 0.0 && self.translation_sigma >= 0.0) {
            return Err(Error::InvalidConfig("transform spreads must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws a concrete transform; deterministic per seed.
    pub fn sample(&self, seed: u64) -> RigidTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |sigma: f64| {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("sigma").sample(&mut rng)
            } else {
                0.0
            }
        };
        let a = [
            self.angles[0] + draw(self.angle_sigma),
            self.angles[1] + draw(self.angle_sigma),
            self.angles[2] + draw(self.angle_sigma),
        ];
        let t = [
            self.translation[0] + draw(self.translation_sigma),
            self.translation[1] + draw(self.translation_sigma),
        ];
        RigidTransform {
            rotation: rotation_xyz(a[0], a[1], a[2]),
            translation: Vector3::new(t[0], t[1], 0.0),
        }
    }
}

/// `p -> R p + M`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|p| self.rotation * p + self.translation).collect()
    }

    pub fn backward(&self, grad: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let rt = self.rotation.transpose();
        grad.iter().map(|g| rt * g).collect()
    }
}

pub fn random_transform(cloud: &PointCloud, params: &TransformParams, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    let t = params.sample(seed);
    Ok(PointCloud {
        points: t.apply(&cloud.points),
        pixels: cloud.pixels.clone(),
    })
}

/// Normalized phase `phi / (2 pi n_s)` in `[0, 1]`.
#[inline]
pub fn to_normalized(phase: f64, fringe_count: usize) -> f64 {
    phase / (TAU * fringe_count as f64)
}

#[inline]
pub fn from_normalized(nu: f64, fringe_count: usize) -> f64 {
    nu * TAU * fringe_count as f64
}

/// Clamp of one normalized phase to `[max(0, nu0 - 1/n_s), min(1, nu0 + 1/n_s)]`.
#[inline]
pub fn clip_normalized(nu: f64, nu0: f64, fringe_count: usize) -> f64 {
    let r = 1.0 / fringe_count as f64;
    nu.clamp((nu0 - r).max(0.0), (nu0 + r).min(1.0))
}

/// Keeps every adversarial phase within one fringe period of the original.
pub fn clip_phase(adversarial: &PhaseMap, original: &PhaseMap, fringe_count: usize) -> Result<PhaseMap> {
    adversarial.values.ensure_same_shape(&original.values, "adversarial vs original phase")?;
    if adversarial.kind != PhaseKind::Absolute || original.kind != PhaseKind::Absolute {
        return Err(Error::InvalidConfig("clip_phase needs absolute phase maps".into()));
    }
    let mut out = adversarial.clone();
    for i in 0..out.values.len() {
        if out.mask[i] && original.mask[i] {
            let nu = to_normalized(adversarial.values[i], fringe_count);
            let nu0 = to_normalized(original.values[i], fringe_count);
            out.values[i] = from_normalized(clip_normalized(nu, nu0, fringe_count), fringe_count);
        }
    }
    Ok(out)
}
