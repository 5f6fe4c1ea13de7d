//! Projector-camera rigs and the multi-step scanning pipeline.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fringe::{
    binarize, generate_patterns, unwrap_phase, wrapped_phase, FringePatternSet, PhaseMap, Unwrapped,
    DEFAULT_MODULATION_THRESHOLD,
};
use crate::geometry::{Calibration, ProjectionMatrix};
use crate::photometric::{RenderSettings, SceneSurface, ShadingBasis};
use crate::raster::Image;

/// Camera, projector and the fringe configuration they scan with.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub camera: ProjectionMatrix,
    pub projector: ProjectionMatrix,
    pub camera_width: usize,
    pub camera_height: usize,
    pub projector_width: usize,
    pub projector_height: usize,
    pub steps: usize,
    pub fringe_count: usize,
    pub standoff: f64,
}

/// Plain-data description of a rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub camera_size: [usize; 2],
    pub camera_focal: f64,
    pub projector_size: [usize; 2],
    pub projector_focal: [f64; 2],
    /// Projector center in world mm; it is aimed at the standoff point on the optical axis.
    pub projector_position: [f64; 3],
    pub steps: usize,
    pub fringe_count: usize,
    pub standoff: f64,
}

impl RigSpec {
    /// 64x64 camera, 512x192 projector 300 mm to the right, 16 fringes, 12 steps.
    pub fn desk() -> Self {
        Self {
            camera_size: [64, 64],
            camera_focal: 400.0,
            projector_size: [512, 192],
            projector_focal: [2200.0, 1100.0],
            projector_position: [300.0, 0.0, 0.0],
            steps: 12,
            fringe_count: 16,
            standoff: 1500.0,
        }
    }

    /// 128x128 camera crop with a 1600x1200 projector.
    pub fn fine() -> Self {
        Self {
            camera_size: [128, 128],
            camera_focal: 800.0,
            projector_size: [1600, 1200],
            projector_focal: [3000.0, 3000.0],
            projector_position: [300.0, 0.0, 0.0],
            steps: 12,
            fringe_count: 16,
            standoff: 1500.0,
        }
    }

    pub fn build(&self) -> Result<Rig> {
        let [cw, ch] = self.camera_size;
        let [pw, ph] = self.projector_size;
        let camera = ProjectionMatrix::pinhole(
            self.camera_focal,
            self.camera_focal,
            (cw as f64 - 1.0) / 2.0,
            (ch as f64 - 1.0) / 2.0,
            Matrix3::identity(),
            Vector3::zeros(),
        )?;
        let projector = ProjectionMatrix::look_at(
            self.projector_focal[0],
            self.projector_focal[1],
            (pw as f64 - 1.0) / 2.0,
            (ph as f64 - 1.0) / 2.0,
            Vector3::from(self.projector_position),
            Vector3::new(0.0, 0.0, self.standoff),
            Vector3::new(0.0, 1.0, 0.0),
        )?;
        generate_patterns(self.steps, self.fringe_count, pw, ph)?;
        Ok(Rig {
            camera,
            projector,
            camera_width: cw,
            camera_height: ch,
            projector_width: pw,
            projector_height: ph,
            steps: self.steps,
            fringe_count: self.fringe_count,
            standoff: self.standoff,
        })
    }
}

impl Rig {
    pub fn patterns(&self) -> FringePatternSet {
        generate_patterns(self.steps, self.fringe_count, self.projector_width, self.projector_height)
            .expect("validated when the rig was built")
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            camera: self.camera.clone(),
            projector: self.projector.clone(),
        }
    }

    pub fn basis(&self, scene: &SceneSurface) -> ShadingBasis {
        ShadingBasis::new(scene, &self.projector, self.projector_width, self.projector_height)
    }
}

/// Everything one scan produces.
#[derive(Clone, Debug)]
pub struct Scan {
    pub wrapped: PhaseMap,
    pub unwrapped: Unwrapped,
}

impl Scan {
    pub fn absolute(&self) -> &PhaseMap {
        &self.unwrapped.phase
    }
}

/// Noise stream indices so every capture in a sequence draws independent noise.
pub const STREAM_WHITE: u64 = 1000;
pub const STREAM_BLACK: u64 = 1001;
pub const STREAM_GRAY: u64 = 2000;

/// Renders the gray-code sequence plus white and black references and binarizes it.
pub fn capture_gray_bits(
    basis: &ShadingBasis,
    patterns: &FringePatternSet,
    extra: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Vec<crate::raster::Mask>> {
    let (white, _) = basis.render(&patterns.white(), extra, settings, STREAM_WHITE, false);
    let (black, _) = basis.render(&patterns.black(), extra, settings, STREAM_BLACK, false);
    let grays: Vec<Image> = patterns
        .gray_patterns
        .iter()
        .enumerate()
        .map(|(k, p)| basis.render(p, extra, settings, STREAM_GRAY + k as u64, false).0)
        .collect();
    binarize(&grays, &white, &black)
}

/// Full multi-step scan: shift captures, gray-code captures, demodulation and unwrapping.
pub fn scan(
    rig: &Rig,
    scene: &SceneSurface,
    patterns: &FringePatternSet,
    extra: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Scan> {
    let basis = rig.basis(scene);
    scan_with_basis(&basis, patterns, extra, settings)
}

pub fn scan_with_basis(
    basis: &ShadingBasis,
    patterns: &FringePatternSet,
    extra: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Scan> {
    let shifts: Vec<Image> = patterns
        .shift_patterns
        .iter()
        .enumerate()
        .map(|(k, p)| basis.render(p, extra, settings, k as u64, false).0)
        .collect();
    let mut wrapped = wrapped_phase(&shifts, patterns.fringe_count, DEFAULT_MODULATION_THRESHOLD)?;
    for i in 0..wrapped.mask.len() {
        if !basis.in_view[i] && wrapped.mask[i] {
            wrapped.mask[i] = false;
            wrapped.values[i] = f64::NAN;
        }
    }
    let bits = capture_gray_bits(basis, patterns, extra, settings)?;
    let unwrapped = unwrap_phase(&wrapped, &bits)?;
    Ok(Scan { wrapped, unwrapped })
}
