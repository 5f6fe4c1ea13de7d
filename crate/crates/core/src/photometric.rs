//! Synthetic face scenes, Lambertian shading under projector light, the tanh
//! projector gamma law and rendering of captures as the camera sees them.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fringe::Pattern;
use crate::geometry::ProjectionMatrix;
use crate::raster::{Grid, Image, Mask};

/// Projector response `g(u) = (tanh(gamma (2u - 1)) + 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaModel {
    pub gamma: f64,
}

impl GammaModel {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    #[inline]
    pub fn apply(&self, u: f64) -> f64 {
        0.5 * ((self.gamma * (2.0 * u - 1.0)).tanh() + 1.0)
    }

    /// dg/du
    #[inline]
    pub fn d_input(&self, u: f64) -> f64 {
        let t = (self.gamma * (2.0 * u - 1.0)).tanh();
        self.gamma * (1.0 - t * t)
    }

    /// dg/dgamma
    #[inline]
    pub fn d_gamma(&self, u: f64) -> f64 {
        let t = (self.gamma * (2.0 * u - 1.0)).tanh();
        0.5 * (1.0 - t * t) * (2.0 * u - 1.0)
    }
}

/// Applies an optional gamma law; `None` is a linear projector.
#[inline]
pub fn gamma_distort(u: f64, model: Option<&GammaModel>) -> f64 {
    match model {
        Some(m) => m.apply(u),
        None => u,
    }
}

#[inline]
fn gamma_slope(u: f64, model: Option<&GammaModel>) -> f64 {
    match model {
        Some(m) => m.d_input(u),
        None => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaFit {
    pub model: GammaModel,
    pub residual_rms: f64,
}

pub const GAMMA_SEARCH_RANGE: (f64, f64) = (1e-3, 20.0);
pub const GAMMA_MAX_RESIDUAL: f64 = 0.05;

/// Least-squares gamma by golden-section search over [`GAMMA_SEARCH_RANGE`].
pub fn fit_gamma(samples: &[(f64, f64)]) -> Result<GammaFit> {
    if samples.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "gamma fit needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    let mut us: Vec<f64> = samples.iter().map(|s| s.0).collect();
    us.sort_by(f64::total_cmp);
    if us.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("gamma fit samples need distinct inputs".into()));
    }
    let sse = |g: f64| {
        let m = GammaModel { gamma: g };
        samples.iter().map(|&(u, y)| (m.apply(u) - y).powi(2)).sum::<f64>()
    };
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = GAMMA_SEARCH_RANGE;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (sse(c), sse(d));
    while b - a > 1e-12 * (1.0 + a.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = sse(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = sse(d);
        }
    }
    let gamma = 0.5 * (a + b);
    let residual_rms = (sse(gamma) / samples.len() as f64).sqrt();
    if !(residual_rms <= GAMMA_MAX_RESIDUAL) {
        return Err(Error::FitDiverged(residual_rms));
    }
    Ok(GammaFit {
        model: GammaModel { gamma },
        residual_rms,
    })
}

/// One anisotropic Gaussian relief feature, lateral millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
    pub amplitude: f64,
}

/// Mean face layout: (center, sigma, amplitude) in mm, image `y` pointing down.
const FEATURES: [([f64; 2], [f64; 2], f64); 12] = [
    ([0.0, 8.0], [10.0, 19.0], 22.0),    // nose
    ([0.0, -16.0], [7.0, 12.0], 8.0),    // nose bridge
    ([-30.0, -33.0], [15.0, 6.0], 7.0),  // brows
    ([30.0, -33.0], [15.0, 6.0], 7.0),
    ([-32.0, -17.0], [11.0, 7.0], -9.0), // eye sockets
    ([32.0, -17.0], [11.0, 7.0], -9.0),
    ([-42.0, 18.0], [16.0, 16.0], 7.0),  // cheeks
    ([42.0, 18.0], [16.0, 16.0], 7.0),
    ([0.0, 47.0], [16.0, 6.0], 5.0),     // lips
    ([0.0, 78.0], [20.0, 12.0], 9.0),    // chin
    ([-20.0, 62.0], [10.0, 10.0], -3.0), // mouth corners
    ([20.0, 62.0], [10.0, 10.0], -3.0),
];

/// Texture term of the albedo: amplitude, spatial frequency (rad/mm), phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlbedoWave {
    pub amplitude: f64,
    pub frequency: [f64; 2],
    pub phase: f64,
}

/// Identity-level shape parameters of a synthetic face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceShape {
    /// Lateral semi-axes of the elliptical support, mm.
    pub semi_axes: [f64; 2],
    pub base_depth: f64,
    pub features: Vec<Feature>,
    pub albedo_base: f64,
    pub albedo_waves: Vec<AlbedoWave>,
}

impl FaceShape {
    pub fn identity(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let semi_axes = [rng.gen_range(70.0..85.0), rng.gen_range(95.0..112.0)];
        let base_depth = rng.gen_range(55.0..75.0);
        let features = FEATURES
            .iter()
            .map(|&(c, s, a)| Feature {
                center: [c[0] + rng.gen_range(-6.0..6.0), c[1] + rng.gen_range(-6.0..6.0)],
                sigma: [s[0] * rng.gen_range(0.8..1.25), s[1] * rng.gen_range(0.8..1.25)],
                amplitude: a * rng.gen_range(0.6..1.4),
            })
            .collect();
        let albedo_base = rng.gen_range(0.5..0.7);
        let albedo_waves = (0..6)
            .map(|_| {
                let wavelength: f64 = rng.gen_range(30.0..120.0);
                let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                AlbedoWave {
                    amplitude: rng.gen_range(-0.05..0.05),
                    frequency: [k * dir.cos(), k * dir.sin()],
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self {
            semi_axes,
            base_depth,
            features,
            albedo_base,
            albedo_waves,
        }
    }

    /// Small seeded perturbation of feature amplitudes and positions.
    pub fn with_expression(&self, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out = self.clone();
        for f in &mut out.features {
            f.amplitude *= 1.0 + scale * rng.gen_range(-0.08..0.08);
            f.center[0] += scale * rng.gen_range(-1.0..1.0);
            f.center[1] += scale * rng.gen_range(-1.0..1.0);
        }
        out
    }

    /// Relief (mm toward the camera) and its lateral gradient at `(x, y)` mm.
    pub fn relief(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (a, b) = (self.semi_axes[0], self.semi_axes[1]);
        let r2 = (x / a).powi(2) + (y / b).powi(2);
        if r2 >= 1.0 {
            return (0.0, [0.0, 0.0]);
        }
        let win = (1.0 - r2).powi(2);
        let dwin = -2.0 * (1.0 - r2);
        let win_grad = [dwin * 2.0 * x / (a * a), dwin * 2.0 * y / (b * b)];
        let mut f = self.base_depth;
        let mut fg = [0.0, 0.0];
        for feat in &self.features {
            let dx = x - feat.center[0];
            let dy = y - feat.center[1];
            let (sx, sy) = (feat.sigma[0], feat.sigma[1]);
            let e = feat.amplitude * (-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy))).exp();
            f += e;
            fg[0] -= e * dx / (sx * sx);
            fg[1] -= e * dy / (sy * sy);
        }
        (
            win * f,
            [win_grad[0] * f + win * fg[0], win_grad[1] * f + win * fg[1]],
        )
    }

    pub fn albedo(&self, x: f64, y: f64) -> f64 {
        let r2 = (x / self.semi_axes[0]).powi(2) + (y / self.semi_axes[1]).powi(2);
        let r = r2.sqrt();
        let t = ((1.0 - r) / 0.08).clamp(0.0, 1.0);
        let edge = t * t * (3.0 - 2.0 * t);
        let tex = self.albedo_base
            + self
                .albedo_waves
                .iter()
                .map(|w| w.amplitude * (w.frequency[0] * x + w.frequency[1] * y + w.phase).sin())
                .sum::<f64>();
        (tex * edge).clamp(0.0, 1.0)
    }
}

/// Scene generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub width: usize,
    pub height: usize,
    /// Distance from the camera to the flat background, mm.
    pub standoff: f64,
    /// Multiplies every relief amplitude; 0 gives a flat plane.
    pub relief_scale: f64,
    /// Expression seed; 0 is the neutral face.
    pub expression: u64,
    pub expression_scale: f64,
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            standoff: 1500.0,
            relief_scale: 1.0,
            expression: 0,
            expression_scale: 1.0,
        }
    }
}

/// A camera-aligned surface: per camera pixel depth, albedo, normal and world point.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSurface {
    pub camera: ProjectionMatrix,
    /// Camera-frame depth (mm) of the surface seen by each pixel.
    pub depth: Image,
    pub albedo: Image,
    pub normals: Grid<Vector3<f64>>,
    pub points: Grid<Vector3<f64>>,
}

impl SceneSurface {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    /// Rebuilds points and normals from a depth map by central differences.
    pub fn from_height_field(camera: ProjectionMatrix, depth: Image, albedo: Image) -> Result<Self> {
        depth.ensure_same_shape(&albedo, "depth vs albedo")?;
        let (w, h) = (depth.width(), depth.height());
        if w < 2 || h < 2 {
            return Err(Error::InvalidConfig("scene grid must be at least 2x2".into()));
        }
        let points = Grid::from_fn(w, h, |u, v| {
            camera.point_at_depth(u as f64, v as f64, *depth.get(u, v))
        });
        let center = camera.center();
        let normals = Grid::from_fn(w, h, |u, v| {
            let (u0, u1) = (u.saturating_sub(1), (u + 1).min(w - 1));
            let (v0, v1) = (v.saturating_sub(1), (v + 1).min(h - 1));
            let du = points.get(u1, v) - points.get(u0, v);
            let dv = points.get(u, v1) - points.get(u, v0);
            orient(dv.cross(&du).normalize(), points.get(u, v), &center)
        });
        Ok(Self {
            camera,
            depth,
            albedo,
            normals,
            points,
        })
    }

    /// Multiplies the albedo by seeded per-pixel factors in `[1 - error, 1 + error]`.
    pub fn with_albedo_error(&self, seed: u64, error: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for a in out.albedo.as_mut_slice() {
            *a = (*a * (1.0 + rng.gen_range(-error..=error))).clamp(0.0, 1.0);
        }
        out
    }
}

fn orient(n: Vector3<f64>, point: &Vector3<f64>, camera_center: &Vector3<f64>) -> Vector3<f64> {
    if n.dot(&(camera_center - point)) < 0.0 {
        -n
    } else {
        n
    }
}

/// Analytic face surface over continuous camera pixel coordinates.
#[derive(Clone, Debug)]
pub struct FaceSurface {
    pub shape: FaceShape,
    pub camera: ProjectionMatrix,
    pub standoff: f64,
    pub relief_scale: f64,
}

impl FaceSurface {
    /// Lateral face coordinates (mm) of a camera pixel on the standoff plane.
    fn lateral(&self, u: f64, v: f64) -> (Vector3<f64>, f64, f64) {
        let ki = self.camera.intrinsics().try_inverse().expect("validated intrinsics");
        let ray = ki * Vector3::new(u, v, 1.0);
        (ray, self.standoff * ray.x / ray.z, self.standoff * ray.y / ray.z)
    }

    pub fn depth(&self, u: f64, v: f64) -> f64 {
        let (_, x, y) = self.lateral(u, v);
        self.standoff - self.relief_scale * self.shape.relief(x, y).0
    }

    /// World point seen by pixel `(u, v)`.
    pub fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        self.camera.point_at_depth(u, v, self.depth(u, v))
    }

    /// Unit normal facing the camera, from the analytic relief gradient.
    pub fn normal(&self, u: f64, v: f64) -> Vector3<f64> {
        let ki = self.camera.intrinsics().try_inverse().expect("validated intrinsics");
        let ray = ki * Vector3::new(u, v, 1.0);
        let (x, y) = (self.standoff * ray.x, self.standoff * ray.y);
        let (rel, g) = self.shape.relief(x, y);
        let z = self.standoff - self.relief_scale * rel;
        let s = self.standoff * self.relief_scale;
        let z_u = -s * (g[0] * ki[(0, 0)] + g[1] * ki[(1, 0)]);
        let z_v = -s * (g[0] * ki[(0, 1)] + g[1] * ki[(1, 1)]);
        let x_u = ray * z_u + ki.column(0) * z;
        let x_v = ray * z_v + ki.column(1) * z;
        let n_cam = x_v.cross(&x_u).normalize();
        let n = self.camera.rotation().transpose() * n_cam;
        orient(n, &self.point(u, v), &self.camera.center())
    }
}

/// Synthesizes a face scene for identity `seed` on the camera grid.
pub fn synth_face(seed: u64, params: &FaceParams, camera: &ProjectionMatrix) -> Result<SceneSurface> {
    if params.width < 2 || params.height < 2 {
        return Err(Error::InvalidConfig("scene grid must be at least 2x2".into()));
    }
    if !(params.standoff > 0.0) || !(params.relief_scale >= 0.0) || !(params.expression_scale >= 0.0) {
        return Err(Error::InvalidConfig(
            "standoff must be positive and scales non-negative".into(),
        ));
    }
    let mut shape = FaceShape::identity(seed);
    if params.expression != 0 {
        shape = shape.with_expression(params.expression, params.expression_scale);
    }
    let surface = FaceSurface {
        shape,
        camera: camera.clone(),
        standoff: params.standoff,
        relief_scale: params.relief_scale,
    };
    Ok(surface.sample(params.width, params.height))
}

impl FaceSurface {
    pub fn sample(&self, width: usize, height: usize) -> SceneSurface {
        let depth = Grid::from_fn(width, height, |u, v| self.depth(u as f64, v as f64));
        let points = Grid::from_fn(width, height, |u, v| self.point(u as f64, v as f64));
        let normals = Grid::from_fn(width, height, |u, v| self.normal(u as f64, v as f64));
        let albedo = Grid::from_fn(width, height, |u, v| {
            let (_, x, y) = self.lateral(u as f64, v as f64);
            self.shape.albedo(x, y)
        });
        SceneSurface {
            camera: self.camera.clone(),
            depth,
            albedo,
            normals,
            points,
        }
    }
}

/// Per-pixel light vectors (direction times radiance) for the scanner and attacker projectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    pub scanner: Grid<Vector3<f64>>,
    pub attacker: Grid<Vector3<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadingMode {
    /// `a max(0, n . s)`.
    #[default]
    Clamped,
    /// `a n . s` exactly as the linear model is written.
    Linear,
}

/// `I = a max(0, n . (s1 + s2))` per pixel.
pub fn lambertian_shade(scene: &SceneSurface, lights: &LightField, mode: ShadingMode) -> Result<Image> {
    scene.albedo.ensure_same_shape(&lights.scanner, "scene vs scanner light")?;
    scene.albedo.ensure_same_shape(&lights.attacker, "scene vs attacker light")?;
    let mut out = Grid::filled(scene.width(), scene.height(), 0.0);
    for i in 0..out.len() {
        let d = scene.normals[i].dot(&(lights.scanner[i] + lights.attacker[i]));
        out[i] = scene.albedo[i]
            * match mode {
                ShadingMode::Clamped => d.max(0.0),
                ShadingMode::Linear => d,
            };
    }
    Ok(out)
}

/// Render controls shared by scanner and attacker simulations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub ambient: f64,
    pub scanner_radiance: f64,
    pub attacker_radiance: f64,
    /// Scanner projector response; `None` for a radiometrically linearized projector.
    pub scanner_gamma: Option<GammaModel>,
    pub attacker_gamma: Option<GammaModel>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub shading: ShadingMode,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            ambient: 0.05,
            scanner_radiance: 1.0,
            attacker_radiance: 1.0,
            scanner_gamma: None,
            attacker_gamma: None,
            noise_sigma: 0.0,
            noise_seed: 0,
            shading: ShadingMode::Clamped,
        }
    }
}

/// Geometry-dependent shading factors, computed once per scene and projector pair.
#[derive(Clone, Debug)]
pub struct ShadingBasis {
    width: usize,
    height: usize,
    /// `a n . unit(C_p - X)` per pixel.
    pub scanner_gain: Vec<f64>,
    /// `a n . unit(C_c - X)` per pixel (camera-aligned attacker).
    pub attacker_gain: Vec<f64>,
    /// Projector pixel coordinates lit onto each camera pixel.
    pub projector_uv: Vec<(f64, f64)>,
    pub in_view: Mask,
}

impl ShadingBasis {
    pub fn new(scene: &SceneSurface, projector: &ProjectionMatrix, pattern_width: usize, pattern_height: usize) -> Self {
        let (w, h) = (scene.width(), scene.height());
        let cp = projector.center();
        let cc = scene.camera.center();
        let n = w * h;
        let mut scanner_gain = vec![0.0; n];
        let mut attacker_gain = vec![0.0; n];
        let mut projector_uv = vec![(f64::NAN, f64::NAN); n];
        let mut in_view = Grid::filled(w, h, false);
        for i in 0..n {
            let x = scene.points[i];
            let nrm = scene.normals[i];
            let a = scene.albedo[i];
            attacker_gain[i] = a * nrm.dot(&(cc - x).normalize());
            if let Ok(p) = projector.project(&x) {
                let visible = p.u >= 0.0
                    && p.v >= 0.0
                    && p.u <= (pattern_width - 1) as f64
                    && p.v <= (pattern_height - 1) as f64;
                if visible {
                    projector_uv[i] = (p.u, p.v);
                    scanner_gain[i] = a * nrm.dot(&(cp - x).normalize());
                    in_view[i] = true;
                }
            }
        }
        Self {
            width: w,
            height: h,
            scanner_gain,
            attacker_gain,
            projector_uv,
            in_view,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Light vectors equivalent to this basis for a given emitted pattern and attacker image.
    pub fn light_field(
        &self,
        scene: &SceneSurface,
        projector: &ProjectionMatrix,
        pattern: &Pattern,
        extra: Option<&Image>,
        settings: &RenderSettings,
    ) -> LightField {
        let cp = projector.center();
        let cc = scene.camera.center();
        let scanner = Grid::from_fn(self.width, self.height, |u, v| {
            let i = v * self.width + u;
            if !self.in_view[i] {
                return Vector3::zeros();
            }
            let (pu, pv) = self.projector_uv[i];
            let e = gamma_distort(pattern.sample(pu, pv).unwrap_or(0.0), settings.scanner_gamma.as_ref());
            (cp - scene.points[i]).normalize() * (settings.scanner_radiance * e)
        });
        let attacker = Grid::from_fn(self.width, self.height, |u, v| {
            let i = v * self.width + u;
            let x = extra.map_or(0.0, |img| img[i]);
            let e = if extra.is_some() {
                gamma_distort(x, settings.attacker_gamma.as_ref())
            } else {
                0.0
            };
            (cc - scene.points[i]).normalize() * (settings.attacker_radiance * e)
        });
        LightField { scanner, attacker }
    }

    /// Renders one capture; with `want_grad` also returns `dI/dx` for the attacker image.
    pub fn render(
        &self,
        pattern: &Pattern,
        extra: Option<&Image>,
        settings: &RenderSettings,
        noise_stream: u64,
        want_grad: bool,
    ) -> (Image, Option<Image>) {
        let n = self.width * self.height;
        let mut img = vec![0.0; n];
        let mut grad = if want_grad { vec![0.0; n] } else { Vec::new() };
        let noise = (settings.noise_sigma > 0.0).then(|| Normal::new(0.0, settings.noise_sigma).expect("sigma"));
        for v in 0..self.height {
            let mut rng = noise.map(|_| {
                let mut r = ChaCha8Rng::seed_from_u64(settings.noise_seed);
                r.set_stream(noise_stream.wrapping_mul(1 << 20).wrapping_add(v as u64));
                r
            });
            for u in 0..self.width {
                let i = v * self.width + u;
                let e1 = if self.in_view[i] {
                    let (pu, pv) = self.projector_uv[i];
                    gamma_distort(pattern.sample(pu, pv).unwrap_or(0.0), settings.scanner_gamma.as_ref())
                } else {
                    0.0
                };
                let (e2, de2) = match extra {
                    Some(x) => (
                        gamma_distort(x[i], settings.attacker_gamma.as_ref()),
                        gamma_slope(x[i], settings.attacker_gamma.as_ref()),
                    ),
                    None => (0.0, 0.0),
                };
                let lin = self.scanner_gain[i] * settings.scanner_radiance * e1
                    + self.attacker_gain[i] * settings.attacker_radiance * e2;
                let (shade, active) = match settings.shading {
                    ShadingMode::Clamped => (lin.max(0.0), lin > 0.0),
                    ShadingMode::Linear => (lin, true),
                };
                let mut value = shade + settings.ambient;
                if let (Some(dist), Some(r)) = (noise.as_ref(), rng.as_mut()) {
                    value += dist.sample(r);
                }
                let clamped = value.clamp(0.0, 1.0);
                img[i] = clamped;
                if want_grad && active && value > 0.0 && value < 1.0 {
                    grad[i] = self.attacker_gain[i] * settings.attacker_radiance * de2;
                }
            }
        }
        let img = Grid::from_vec(self.width, self.height, img).expect("shape");
        let grad = want_grad.then(|| Grid::from_vec(self.width, self.height, grad).expect("shape"));
        (img, grad)
    }
}

/// A rendered camera image with the pixels the projector reaches.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub image: Image,
    pub in_view: Mask,
}

/// Renders what the camera records while the scanner projects `pattern` and an
/// optional camera-aligned attacker projector emits `extra`.
pub fn render_capture(
    scene: &SceneSurface,
    projector: &ProjectionMatrix,
    pattern: &Pattern,
    extra: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Capture> {
    if let Some(x) = extra {
        scene.depth.ensure_same_shape(x, "attacker illumination")?;
    }
    let basis = ShadingBasis::new(scene, projector, pattern.width(), pattern.height());
    let (image, _) = basis.render(pattern, extra, settings, 0, false);
    Ok(Capture {
        image,
        in_view: basis.in_view.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fringe::{generate_patterns, wrap, wrapped_phase};
    use crate::geometry::rotation_y;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::Rng;

    fn camera() -> ProjectionMatrix {
        ProjectionMatrix::pinhole(400.0, 400.0, 31.5, 31.5, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    fn projector() -> ProjectionMatrix {
        ProjectionMatrix::look_at(
            2200.0,
            1100.0,
            255.5,
            95.5,
            Vector3::new(300.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1500.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap()
    }

    fn plane(albedo: f64) -> SceneSurface {
        let params = FaceParams { relief_scale: 0.0, ..Default::default() };
        let mut s = synth_face(1, &params, &camera()).unwrap();
        s.albedo = Grid::filled(64, 64, albedo);
        s
    }

    #[test]
    fn gamma_examples() {
        for g in [0.1, 1.0, 2.5, 7.0] {
            assert_eq!(GammaModel::new(g).unwrap().apply(0.5), 0.5);
        }
        let g = GammaModel::new(1.0).unwrap();
        assert!((g.apply(1.0) - 0.8807970779778823).abs() < 1e-12);
        assert!(g.apply(0.0) > 0.0 && g.apply(1.0) < 1.0);
        assert!(GammaModel::new(0.0).is_err());
    }

    #[test]
    fn gamma_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &gamma in &[0.3, 1.0, 2.5, 5.0] {
            let m = GammaModel { gamma };
            for k in 0..=20 {
                let u = k as f64 / 20.0;
                let fd = (m.apply(u + h) - m.apply(u - h)) / (2.0 * h);
                assert!((fd - m.d_input(u)).abs() <= 1e-6 * (1.0 + fd.abs()));
                let mp = GammaModel { gamma: gamma + h };
                let mm = GammaModel { gamma: gamma - h };
                let fdg = (mp.apply(u) - mm.apply(u)) / (2.0 * h);
                assert!((fdg - m.d_gamma(u)).abs() <= 1e-6 * (1.0 + fdg.abs()));
            }
        }
    }

    #[test]
    fn gamma_fit_recovers_planted_values() {
        let us: Vec<f64> = (0..21).map(|k| k as f64 / 20.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &g in &[0.5, 1.0, 2.5, 5.0] {
            let m = GammaModel { gamma: g };
            let clean: Vec<(f64, f64)> = us.iter().map(|&u| (u, m.apply(u))).collect();
            let fit = fit_gamma(&clean).unwrap();
            assert!((fit.model.gamma - g).abs() < 1e-4, "{g}: {}", fit.model.gamma);
            let noisy: Vec<(f64, f64)> = us
                .iter()
                .map(|&u| (u, m.apply(u) + rng.gen_range(-0.005..0.005)))
                .collect();
            let fit = fit_gamma(&noisy).unwrap();
            assert!((fit.model.gamma - g).abs() < 0.05, "{g}: {}", fit.model.gamma);
        }
    }

    #[test]
    fn gamma_fit_preconditions() {
        assert!(matches!(fit_gamma(&[(0.1, 0.2), (0.9, 0.8)]), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            fit_gamma(&[(0.1, 0.2), (0.1, 0.2), (0.9, 0.8)]),
            Err(Error::InvalidConfig(_))
        ));
        // Decreasing data cannot be explained by any gamma.
        let bad: Vec<(f64, f64)> = (0..10).map(|k| (k as f64 / 9.0, 1.0 - k as f64 / 9.0)).collect();
        assert!(matches!(fit_gamma(&bad), Err(Error::FitDiverged(_))));
    }

    #[test]
    fn flat_scene_faces_camera() {
        let s = plane(0.5);
        for n in s.normals.as_slice() {
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        }
        assert!(s.depth.as_slice().iter().all(|&z| z == 1500.0));
    }

    #[test]
    fn same_seed_same_scene() {
        let p = FaceParams { expression: 3, ..Default::default() };
        assert_eq!(synth_face(9, &p, &camera()).unwrap(), synth_face(9, &p, &camera()).unwrap());
        assert_ne!(
            synth_face(9, &p, &camera()).unwrap().depth,
            synth_face(10, &p, &camera()).unwrap().depth
        );
    }

    #[test]
    fn normals_agree_with_surface_differences() {
        for seed in 0..5 {
            let surf = FaceSurface {
                shape: FaceShape::identity(seed),
                camera: camera(),
                standoff: 1500.0,
                relief_scale: 1.0,
            };
            let h = 1e-4;
            for v in (2..62).step_by(5) {
                for u in (2..62).step_by(5) {
                    let (uf, vf) = (u as f64, v as f64);
                    let du = surf.point(uf + h, vf) - surf.point(uf - h, vf);
                    let dv = surf.point(uf, vf + h) - surf.point(uf, vf - h);
                    let fd = dv.cross(&du).normalize();
                    let fd = if fd.z > 0.0 { -fd } else { fd };
                    let n = surf.normal(uf, vf);
                    assert!((n.norm() - 1.0).abs() < 1e-9);
                    let angle = n.cross(&fd).norm().atan2(n.dot(&fd));
                    assert!(angle < 1e-3, "seed {seed} pixel ({u},{v}) angle {angle}");
                }
            }
        }
    }

    #[test]
    fn albedo_in_unit_interval_and_zero_off_face() {
        let s = synth_face(3, &FaceParams::default(), &camera()).unwrap();
        assert!(s.albedo.as_slice().iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(*s.albedo.get(0, 0), 0.0);
        assert!(*s.albedo.get(32, 32) > 0.3);
    }

    #[test]
    fn identities_separate_more_than_expressions() {
        let cam = camera();
        let scenes: Vec<Vec<Image>> = (0..8)
            .map(|id| {
                (0..4)
                    .map(|e| {
                        let p = FaceParams { expression: e + 1, ..Default::default() };
                        synth_face(id, &p, &cam).unwrap().depth
                    })
                    .collect()
            })
            .collect();
        let rms = |a: &Image, b: &Image| {
            (a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                / a.len() as f64)
                .sqrt()
        };
        let mut within: f64 = 0.0;
        let mut between = f64::INFINITY;
        for i in 0..scenes.len() {
            for a in 0..4 {
                for b in a + 1..4 {
                    within = within.max(rms(&scenes[i][a], &scenes[i][b]));
                }
                for j in i + 1..scenes.len() {
                    between = between.min(rms(&scenes[i][a], &scenes[j][a]));
                }
            }
        }
        assert!(between > within, "between {between} within {within}");
    }

    #[test]
    fn shading_examples() {
        let mut s = plane(1.0);
        s.albedo = Grid::filled(64, 64, 1.0);
        let zero = Grid::filled(64, 64, Vector3::zeros());
        let lights = LightField { scanner: Grid::filled(64, 64, Vector3::new(0.0, 0.0, -1.0)), attacker: zero.clone() };
        let img = lambertian_shade(&s, &lights, ShadingMode::Clamped).unwrap();
        assert!(img.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let lights = LightField { scanner: Grid::filled(64, 64, Vector3::new(1.0, 0.0, 0.0)), attacker: zero.clone() };
        let img = lambertian_shade(&s, &lights, ShadingMode::Clamped).unwrap();
        assert!(img.as_slice().iter().all(|&v| v.abs() < 1e-12));

        s.albedo = Grid::filled(64, 64, 0.8);
        let l = rotation_y(60f64.to_radians()) * Vector3::new(0.0, 0.0, -1.0);
        let lights = LightField { scanner: Grid::filled(64, 64, l), attacker: zero.clone() };
        let img = lambertian_shade(&s, &lights, ShadingMode::Clamped).unwrap();
        assert!(img.as_slice().iter().all(|&v| (v - 0.4).abs() < 1e-12));

        // Back-facing light: clamped to zero, negative under the linear form.
        let lights = LightField { scanner: Grid::filled(64, 64, Vector3::new(0.0, 0.0, 1.0)), attacker: zero };
        assert_eq!(lambertian_shade(&s, &lights, ShadingMode::Clamped).unwrap()[0], 0.0);
        assert!(lambertian_shade(&s, &lights, ShadingMode::Linear).unwrap()[0] < 0.0);
    }

    proptest! {
        #[test]
        fn shading_is_homogeneous(a in 0.05f64..0.5, k in 0.1f64..3.0, lx in -0.5f64..0.5, ly in -0.5f64..0.5) {
            let s = synth_face(2, &FaceParams::default(), &camera()).unwrap();
            let l = Vector3::new(lx, ly, -1.0);
            let mut s1 = s.clone();
            s1.albedo = s.albedo.map(|v| v * a);
            let mut s2 = s.clone();
            s2.albedo = s.albedo.map(|v| v * a * 2.0);
            let z = Grid::filled(64, 64, Vector3::zeros());
            let l1 = LightField { scanner: Grid::filled(64, 64, l), attacker: z.clone() };
            let lk = LightField { scanner: Grid::filled(64, 64, l * k), attacker: z };
            let base = lambertian_shade(&s1, &l1, ShadingMode::Linear).unwrap();
            let doubled = lambertian_shade(&s2, &l1, ShadingMode::Linear).unwrap();
            let scaled = lambertian_shade(&s1, &lk, ShadingMode::Linear).unwrap();
            for i in 0..base.len() {
                prop_assert!((doubled[i] - 2.0 * base[i]).abs() < 1e-12);
                prop_assert!((scaled[i] - k * base[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn gamma_is_odd_about_half(u in 0.0f64..1.0, g in 0.01f64..20.0) {
            let m = GammaModel { gamma: g };
            prop_assert!((m.apply(u) + m.apply(1.0 - u) - 1.0).abs() < 1e-12);
            prop_assert!(m.d_input(u) > 0.0 || g > 15.0);
        }
    }

    #[test]
    fn uniform_pattern_on_plane_matches_shading_oracle() {
        let s = plane(1.0);
        let proj = projector();
        let pattern = Pattern::uniform(512, 192, 1.0);
        let settings = RenderSettings { ambient: 0.0, ..Default::default() };
        let cap = render_capture(&s, &proj, &pattern, None, &settings).unwrap();
        let cp = proj.center();
        for i in 0..cap.image.len() {
            if !cap.in_view[i] {
                continue;
            }
            let x = s.points[i];
            let oracle = Vector3::new(0.0, 0.0, -1.0).dot(&(cp - x).normalize());
            assert!((cap.image[i] - oracle).abs() < 1e-6);
        }
        assert!(cap.in_view.as_slice().iter().filter(|&&m| m).count() > 4000);
    }

    #[test]
    fn rendered_fringes_demodulate_to_plane_phase() {
        let s = plane(0.8);
        let proj = projector();
        let set = generate_patterns(12, 16, 512, 192).unwrap();
        let settings = RenderSettings::default();
        let caps: Vec<Image> = set
            .shift_patterns
            .iter()
            .map(|p| render_capture(&s, &proj, p, None, &settings).unwrap().image)
            .collect();
        let pm = wrapped_phase(&caps, 16, 0.01).unwrap();
        let mut checked = 0;
        for i in 0..pm.values.len() {
            if !pm.mask[i] {
                continue;
            }
            let p = proj.project(&s.points[i]).unwrap();
            let analytic = std::f64::consts::TAU * 16.0 * p.u / 512.0;
            assert!(wrap(pm.values[i] - analytic).abs() < 1e-3);
            checked += 1;
        }
        assert!(checked > 4000);
    }

    #[test]
    fn renders_are_deterministic_and_noise_is_seeded() {
        let s = synth_face(5, &FaceParams::default(), &camera()).unwrap();
        let set = generate_patterns(4, 16, 512, 192).unwrap();
        let mut settings = RenderSettings::default();
        let a = render_capture(&s, &projector(), &set.shift_patterns[1], None, &settings).unwrap();
        let b = render_capture(&s, &projector(), &set.shift_patterns[1], None, &settings).unwrap();
        assert_eq!(a, b);
        settings.noise_sigma = 0.005;
        settings.noise_seed = 3;
        let c = render_capture(&s, &projector(), &set.shift_patterns[1], None, &settings).unwrap();
        let d = render_capture(&s, &projector(), &set.shift_patterns[1], None, &settings).unwrap();
        assert_eq!(c, d);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn attacker_gradient_matches_finite_differences() {
        let s = synth_face(6, &FaceParams::default(), &camera()).unwrap();
        let proj = projector();
        let set = generate_patterns(4, 16, 512, 192).unwrap();
        let basis = ShadingBasis::new(&s, &proj, 512, 192);
        let settings = RenderSettings { attacker_gamma: Some(GammaModel { gamma: 2.5 }), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Grid::from_fn(64, 64, |_, _| rng.gen_range(0.05..0.6));
        let (_, grad) = basis.render(&set.shift_patterns[0], Some(&x), &settings, 0, true);
        let grad = grad.unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..x.len()).step_by(17) {
            if s.albedo[i] == 0.0 {
                continue;
            }
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let (ip, _) = basis.render(&set.shift_patterns[0], Some(&xp), &settings, 0, false);
            let (im, _) = basis.render(&set.shift_patterns[0], Some(&xm), &settings, 0, false);
            let fd = (ip[i] - im[i]) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "{fd} vs {}", grad[i]);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn constant_attacker_light_leaves_phase_unchanged() {
        let s = synth_face(7, &FaceParams::default(), &camera()).unwrap();
        let proj = projector();
        let set = generate_patterns(12, 16, 512, 192).unwrap();
        let settings = RenderSettings::default();
        let x = Grid::filled(64, 64, 0.2);
        let render_all = |extra: Option<&Image>| -> Vec<Image> {
            set.shift_patterns
                .iter()
                .map(|p| render_capture(&s, &proj, p, extra, &settings).unwrap().image)
                .collect()
        };
        let a = wrapped_phase(&render_all(None), 16, 0.01).unwrap();
        let b = wrapped_phase(&render_all(Some(&x)), 16, 0.01).unwrap();
        for i in 0..a.values.len() {
            if a.mask[i] && b.mask[i] {
                assert!(wrap(a.values[i] - b.values[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn light_field_reproduces_basis_render() {
        let s = synth_face(8, &FaceParams::default(), &camera()).unwrap();
        let proj = projector();
        let set = generate_patterns(4, 16, 512, 192).unwrap();
        let basis = ShadingBasis::new(&s, &proj, 512, 192);
        let settings = RenderSettings { ambient: 0.0, ..Default::default() };
        let x = Grid::filled(64, 64, 0.3);
        let lights = basis.light_field(&s, &proj, &set.shift_patterns[2], Some(&x), &settings);
        let shaded = lambertian_shade(&s, &lights, ShadingMode::Clamped).unwrap();
        let (img, _) = basis.render(&set.shift_patterns[2], Some(&x), &settings, 0, false);
        for i in 0..img.len() {
            assert!((img[i] - shaded[i].min(1.0)).abs() < 1e-12);
        }
    }
}
