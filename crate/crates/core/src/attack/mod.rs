//! Optical adversarial attacks: sensitivity maps, the transform-invariant
//! adversarial loss, lambda search, the phase shifting attack on the
//! scanner's own fringe patterns and the phase superposition attack with a
//! second, camera-aligned projector.

mod shifting;
mod superposition;

pub use shifting::{phase_shifting_attack, realize_phase, ShiftingContext};
pub use superposition::{
    fringe_analysis_surrogate, phase_superposition_attack, reference_carrier, single_step_scan, Surrogate,
    SurrogateOutput, SurrogateParams, SuperpositionContext,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fringe::{FringePatternSet, PhaseKind, PhaseMap};
use crate::geometry::ProjectionMatrix;
use crate::raster::{Grid, Image};
use crate::recognize::{goal_met, logit_gap, logits_loss, Architecture, AttackMode, ModelParams, DEFAULT_MARGIN};
use crate::reconstruct::{
    fps_indices, reconstruct_pixel, Normalization, Point, PointCloud, RigidTransform, TransformParams,
};

/// splitmix64 finalizer over `(base, tag, index)`; keeps per-instance seeds independent.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed69));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Perturbation penalty used by the phase shifting attack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Sensitivity-weighted L1 on normalized phase.
    #[default]
    SensitivityL1,
    /// Unweighted squared L2 on normalized phase (baseline).
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub lambda_bounds: [f64; 2],
    pub search_steps: usize,
    pub iterations: usize,
    pub margin: f64,
    /// Extra margin the optimizer aims for so that re-simulation keeps `margin`.
    pub margin_slack: f64,
    /// Phase shifting step, normalized phase units.
    pub step_size: f64,
    /// Phase superposition step, intensity units.
    pub superposition_step: f64,
    pub initial_noise: f64,
    pub transform_samples: usize,
    pub transform: TransformParams,
    /// Weight of the RMSE term in the superposition loss.
    pub lambda1: f64,
    pub mode: AttackMode,
    /// Impersonation target; ignored when dodging.
    pub target: Option<usize>,
    pub seed: u64,
    /// FPS target for point models.
    pub cloud_points: usize,
    pub direction_constraint: bool,
    pub renormalize_in_loop: bool,
    pub tiv: bool,
    pub distance: Distance,
    /// Sensitivity falloff; `None` is a quarter of the image width.
    pub sensitivity_width: Option<f64>,
    pub sensitivity_radius: usize,
    pub abort_early: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda_bounds: [1e-5, 1e5],
            search_steps: 10,
            iterations: 100,
            margin: DEFAULT_MARGIN,
            margin_slack: 2.0,
            step_size: 0.01,
            superposition_step: 1.0 / 255.0,
            initial_noise: 1e-5,
            transform_samples: 4,
            transform: TransformParams::default_sampling(),
            lambda1: 1.0,
            mode: AttackMode::Dodge,
            target: None,
            seed: 0,
            cloud_points: 256,
            direction_constraint: true,
            renormalize_in_loop: true,
            tiv: true,
            distance: Distance::SensitivityL1,
            sensitivity_width: None,
            sensitivity_radius: 2,
            abort_early: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.lambda_bounds;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("lambda bounds must be positive and ordered");
        }
        if self.search_steps == 0 {
            return bad("search_steps must be at least 1");
        }
        if !(self.step_size > 0.0 && self.superposition_step > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.margin >= 0.0 && self.margin_slack >= 0.0 && self.initial_noise >= 0.0 && self.lambda1 >= 0.0) {
            return bad("margin, slack, initial noise and lambda1 must be non-negative");
        }
        if self.transform_samples == 0 || self.cloud_points == 0 {
            return bad("transform_samples and cloud_points must be positive");
        }
        if let Some(w) = self.sensitivity_width {
            if !(w > 0.0) {
                return bad("sensitivity_width must be positive");
            }
        }
        self.transform.validate()
    }

    /// The class the margin loss is written against.
    pub fn loss_label(&self, true_label: usize) -> Result<usize> {
        match self.mode {
            AttackMode::Dodge => Ok(true_label),
            AttackMode::Impersonate => match self.target {
                Some(t) if t != true_label => Ok(t),
                Some(_) => Err(Error::InvalidConfig("impersonation target equals the true label".into())),
                None => Err(Error::InvalidConfig("impersonation needs a target".into())),
            },
        }
    }
}

/// Per-pixel perturbation weights `Sen1 + Sen2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    pub weights: Image,
    pub sen1: Image,
    pub sen2: Image,
    pub center: [f64; 2],
    pub falloff: f64,
    pub radius: usize,
}

/// `Sen1 = exp(-|(u,v) - c| / w_s)`, `Sen2 = 1 / (valid pixels in the (2r+1)^2 window, floor 1)`.
/// The center defaults to the centroid of the valid pixels.
pub fn sensitivity_map(phase: &PhaseMap, center: Option<[f64; 2]>, falloff: f64, radius: usize) -> Result<SensitivityMap> {
    if phase.kind != PhaseKind::Absolute {
        return Err(Error::InvalidConfig("sensitivity map needs an absolute phase".into()));
    }
    if !(falloff > 0.0) {
        return Err(Error::InvalidConfig("sensitivity falloff must be positive".into()));
    }
    let (w, h) = (phase.width(), phase.height());
    let center = center.unwrap_or_else(|| {
        let idx = phase.valid_indices();
        if idx.is_empty() {
            return [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
        }
        let (su, sv) = idx.iter().fold((0.0, 0.0), |(a, b), &i| {
            let (u, v) = phase.values.coords(i);
            (a + u as f64, b + v as f64)
        });
        [su / idx.len() as f64, sv / idx.len() as f64]
    });
    let sen1 = Grid::from_fn(w, h, |u, v| {
        (-((u as f64 - center[0]).hypot(v as f64 - center[1])) / falloff).exp()
    });
    let r = radius as isize;
    let sen2 = Grid::from_fn(w, h, |u, v| {
        let mut count = 0usize;
        for dv in -r..=r {
            for du in -r..=r {
                let (x, y) = (u as isize + du, v as isize + dv);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *phase.mask.get(x as usize, y as usize) {
                    count += 1;
                }
            }
        }
        1.0 / count.max(1) as f64
    });
    let weights = Grid::from_fn(w, h, |u, v| sen1.get(u, v) + sen2.get(u, v));
    Ok(SensitivityMap { weights, sen1, sen2, center, falloff, radius })
}

/// The recognizer plus the preprocessing that turns a reconstruction into its input.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a> {
    pub model: &'a ModelParams,
    pub camera: &'a ProjectionMatrix,
    pub width: usize,
    pub height: usize,
    /// FPS target for point models.
    pub cloud_points: usize,
}

/// Depth-image input scale, mm per unit.
pub const DEPTH_SCALE: f64 = 50.0;

/// Preprocessing choices frozen for one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// FPS subset (point models); empty means all points.
    pub indices: Vec<usize>,
    /// Fixed normalization applied before the transform instead of renormalizing after it.
    pub frozen: Option<Normalization>,
    pub transforms: Vec<RigidTransform>,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a ModelParams, camera: &'a ProjectionMatrix, width: usize, height: usize, cloud_points: usize) -> Result<Self> {
        if model.architecture == Architecture::DepthConv && model.input_size != [width, height] {
            return Err(Error::ShapeMismatch(format!(
                "depth model expects {:?}, camera grid is {width}x{height}",
                model.input_size
            )));
        }
        Ok(Self { model, camera, width, height, cloud_points })
    }

    fn is_points(&self) -> bool {
        self.model.architecture == Architecture::PointMlp
    }

    /// FPS subset for a cloud (all points when it is already small enough).
    pub fn subset(&self, points: &[Point], seed: u64) -> Result<Vec<usize>> {
        if !self.is_points() {
            return Ok(Vec::new());
        }
        if points.len() <= self.cloud_points {
            return Ok((0..points.len()).collect());
        }
        fps_indices(points, self.cloud_points, seed)
    }

    /// Plan for evaluating a finished cloud: renormalizing pipeline, one optional transform.
    pub fn evaluation_plan(&self, points: &[Point], seed: u64, transform: Option<RigidTransform>) -> Result<Plan> {
        Ok(Plan {
            indices: self.subset(points, seed)?,
            frozen: None,
            transforms: vec![transform.unwrap_or_else(RigidTransform::identity)],
        })
    }

    pub fn logits(&self, points: &[Point], pixels: &[[u32; 2]], plan: &Plan) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(plan.transforms.len());
        for t in &plan.transforms {
            let (input, _) = self.input(points, pixels, plan, t)?;
            out.push(self.model.classify(&input)?);
        }
        Ok(out)
    }

    /// Logits of a cloud under the evaluation preprocessing.
    pub fn classify_cloud(&self, cloud: &PointCloud, seed: u64, transform: Option<RigidTransform>) -> Result<Vec<f64>> {
        let pixels = cloud.pixels.as_deref().unwrap_or(&[]);
        let plan = self.evaluation_plan(&cloud.points, seed, transform)?;
        Ok(self.logits(&cloud.points, pixels, &plan)?.remove(0))
    }

    /// Model input of a finished cloud under the evaluation preprocessing.
    pub fn model_input(&self, cloud: &PointCloud, seed: u64, transform: Option<RigidTransform>) -> Result<Vec<f64>> {
        let pixels = cloud.pixels.as_deref().unwrap_or(&[]);
        let plan = self.evaluation_plan(&cloud.points, seed, transform)?;
        Ok(self.input(&cloud.points, pixels, &plan, &plan.transforms[0])?.0)
    }

    /// Model input and what the backward pass needs to map input gradients to points.
    fn input(&self, points: &[Point], pixels: &[[u32; 2]], plan: &Plan, t: &RigidTransform) -> Result<(Vec<f64>, InputTape)> {
        if points.is_empty() {
            return Err(Error::DegenerateCloud);
        }
        if self.is_points() {
            let idx: Vec<usize> = if plan.indices.is_empty() { (0..points.len()).collect() } else { plan.indices.clone() };
            let subset: Vec<Point> = idx.iter().map(|&i| points[i]).collect();
            let (normalized, norm) = match &plan.frozen {
                Some(n) => (t.apply(&n.apply(&subset)), None),
                None => {
                    let moved = t.apply(&subset);
                    let n = Normalization::fit(&moved)?;
                    (n.apply(&moved), Some(n))
                }
            };
            let input = normalized.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            Ok((input, InputTape::Points { indices: idx, normalized, norm }))
        } else {
            if pixels.len() != points.len() {
                return Err(Error::ShapeMismatch("depth input needs pixel provenance for every point".into()));
            }
            let depth: Vec<f64> = points.iter().map(|p| self.camera.to_device(p).z).collect();
            let mean = depth.iter().sum::<f64>() / depth.len() as f64;
            let mut input = vec![0.0; self.width * self.height];
            for (z, px) in depth.iter().zip(pixels) {
                input[px[1] as usize * self.width + px[0] as usize] = (z - mean) / DEPTH_SCALE;
            }
            Ok((input, InputTape::Depth))
        }
    }

    /// Mean margin loss over the plan's transforms and its gradient with respect to every point.
    pub fn loss_and_grad(
        &self,
        points: &[Point],
        pixels: &[[u32; 2]],
        plan: &Plan,
        label: usize,
        mode: AttackMode,
        margin: f64,
    ) -> Result<(f64, Vec<Vector3<f64>>)> {
        let mut grad = vec![Vector3::zeros(); points.len()];
        let mut total = 0.0;
        let count = plan.transforms.len() as f64;
        for t in &plan.transforms {
            let (input, tape) = self.input(points, pixels, plan, t)?;
            let fwd = self.model.forward(&input)?;
            let (loss, d_logits) = logits_loss(&fwd.logits, label, mode, margin);
            total += loss / count;
            if d_logits.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g_in = fwd.backward(self.model, &d_logits, None);
            match tape {
                InputTape::Points { indices, normalized, norm } => {
                    let g_norm: Vec<Vector3<f64>> = (0..normalized.len())
                        .map(|k| Vector3::new(g_in[3 * k], g_in[3 * k + 1], g_in[3 * k + 2]))
                        .collect();
                    let g_sub = match (&norm, &plan.frozen) {
                        (Some(n), _) => t.backward(&n.backward(&normalized, &g_norm)),
                        (None, Some(f)) => f.backward_frozen(&t.backward(&g_norm)),
                        (None, None) => unreachable!("either fitted or frozen normalization"),
                    };
                    for (&i, g) in indices.iter().zip(g_sub) {
                        grad[i] += g / count;
                    }
                }
                InputTape::Depth => {
                    let row = self.camera.rotation().row(2).transpose();
                    let g: Vec<f64> = pixels
                        .iter()
                        .map(|px| g_in[px[1] as usize * self.width + px[0] as usize])
                        .collect();
                    let mean = g.iter().sum::<f64>() / g.len() as f64;
                    for (gp, gi) in grad.iter_mut().zip(&g) {
                        *gp += row * ((gi - mean) / DEPTH_SCALE / count);
                    }
                }
            }
        }
        Ok((total, grad))
    }
}

enum InputTape {
    Points { indices: Vec<usize>, normalized: Vec<Point>, norm: Option<Normalization> },
    Depth,
}

/// Ranking of a best-effort iterate: meeting the goal untransformed comes
/// first, then the mean gap over fixed check transforms (3D-TI on) or the
/// untransformed gap (3D-TI off).
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Score {
    pub met: bool,
    pub value: f64,
}

impl Score {
    pub const WORST: Score = Score { met: false, value: f64::INFINITY };

    pub fn better_than(&self, other: &Score) -> bool {
        (self.met && !other.met) || (self.met == other.met && self.value < other.value)
    }
}

/// Untransformed gap of a cloud and its best-effort score.
pub(crate) fn score_cloud(
    classifier: &Classifier,
    cloud: &PointCloud,
    label: usize,
    config: &AttackConfig,
) -> Result<(f64, Score)> {
    let mut plan = classifier.evaluation_plan(&cloud.points, derive_seed(config.seed, 10, 0), None)?;
    if config.tiv && classifier.model.architecture == Architecture::PointMlp {
        plan.transforms
            .extend((0..config.transform_samples).map(|k| config.transform.sample(derive_seed(config.seed, 12, k as u64))));
    }
    let pixels = cloud.pixels.as_deref().unwrap_or(&[]);
    let gaps: Vec<f64> = classifier
        .logits(&cloud.points, pixels, &plan)?
        .iter()
        .map(|z| logit_gap(z, label, config.mode))
        .collect();
    let gap = gaps[0];
    let value = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok((gap, Score { met: goal_met(gap), value }))
}

/// Draws the per-iteration preprocessing: FPS on the current points (or the
/// frozen clean subset) and `transform_samples` transforms when 3D-TI is on.
pub fn sample_plan(
    classifier: &Classifier,
    config: &AttackConfig,
    points: &[Point],
    frozen: Option<&(Vec<usize>, Normalization)>,
    seed: u64,
) -> Result<Plan> {
    let (indices, frozen) = match (config.renormalize_in_loop, frozen) {
        (false, Some((idx, norm))) => (idx.clone(), Some(*norm)),
        _ => (classifier.subset(points, derive_seed(seed, 1, 0))?, None),
    };
    let transforms = if config.tiv && classifier.model.architecture == Architecture::PointMlp {
        (0..config.transform_samples)
            .map(|k| config.transform.sample(derive_seed(seed, 2, k as u64)))
            .collect()
    } else {
        vec![RigidTransform::identity()]
    };
    Ok(Plan { indices, frozen, transforms })
}

/// Transform-invariant adversarial loss of an absolute phase map and its
/// gradient with respect to every phase value.
pub fn tiv_adv_loss(
    phase: &PhaseMap,
    projector: &ProjectionMatrix,
    projector_width: usize,
    classifier: &Classifier,
    config: &AttackConfig,
    true_label: usize,
    seed: u64,
) -> Result<(f64, Image)> {
    let label = config.loss_label(true_label)?;
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut jac = Vec::new();
    let mut index = Vec::new();
    for i in phase.valid_indices() {
        let (u, v) = phase.values.coords(i);
        let (p, d) = reconstruct_pixel(classifier.camera, projector, projector_width, phase.fringe_count, u, v, phase.values[i])?;
        points.push(p);
        pixels.push([u as u32, v as u32]);
        jac.push(d);
        index.push(i);
    }
    let plan = sample_plan(classifier, config, &points, None, seed)?;
    let (loss, g) = classifier.loss_and_grad(&points, &pixels, &plan, label, config.mode, config.margin)?;
    let mut out = Grid::filled(phase.width(), phase.height(), 0.0);
    for ((&i, gp), d) in index.iter().zip(&g).zip(&jac) {
        out[i] = gp.dot(d);
    }
    Ok((loss, out))
}

/// One probed lambda in a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub lambda: f64,
    pub success: bool,
    pub distance: Option<f64>,
}

/// Outcome an attack branch reports to [`lambda_search`].
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub success: bool,
    pub distance: f64,
    pub value: T,
}

/// Bisection on `log lambda`; success raises lambda, failure lowers it.
/// Returns the successful branch with the smallest distance (earliest on ties),
/// the lambda it used and the search trace.
pub fn lambda_search<T>(
    bounds: [f64; 2],
    steps: usize,
    mut attack: impl FnMut(f64) -> Result<Branch<T>>,
) -> Result<(T, f64, Vec<SearchStep>)> {
    if !(bounds[0] > 0.0 && bounds[1] >= bounds[0]) || steps == 0 {
        return Err(Error::InvalidConfig("invalid lambda search bounds or steps".into()));
    }
    let (mut lo, mut hi) = (bounds[0].ln(), bounds[1].ln());
    let mut best: Option<(T, f64, f64)> = None;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        let lambda = mid.exp();
        let branch = attack(lambda)?;
        trace.push(SearchStep {
            lambda,
            success: branch.success,
            distance: branch.success.then_some(branch.distance),
        });
        if branch.success {
            lo = mid;
            if best.as_ref().is_none_or(|(_, d, _)| branch.distance < *d) {
                best = Some((branch.value, branch.distance, lambda));
            }
        } else {
            hi = mid;
        }
    }
    match best {
        Some((value, _, lambda)) => Ok((value, lambda, trace)),
        None => Err(Error::AllStepsFailed),
    }
}

/// Reconstruction error between provenance-matched clouds, after normalizing
/// both with the clean cloud's normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// `sum |P* - P| / n^2` over matched points.
    pub rmse: f64,
    /// Plain mean displacement.
    pub mean_distance: f64,
    pub matched: usize,
}

pub fn rmse_aligned(adversarial: &PointCloud, clean: &PointCloud) -> Result<RmseReport> {
    let (Some(pa), Some(pc)) = (&adversarial.pixels, &clean.pixels) else {
        return Err(Error::InvalidConfig("RMSE needs pixel provenance on both clouds".into()));
    };
    let norm = Normalization::fit(&clean.points)?;
    let lookup: std::collections::HashMap<[u32; 2], usize> = pc.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, px) in pa.iter().enumerate() {
        if let Some(&j) = lookup.get(px) {
            sum += (adversarial.points[k] - clean.points[j]).norm() / norm.scale;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    let nf = n as f64;
    Ok(RmseReport { rmse: sum / (nf * nf), mean_distance: sum / nf, matched: n })
}

/// One optimizer iteration (or the final re-simulation, `stage = "resim"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub iteration: usize,
    pub lambda: f64,
    pub adversarial_loss: f64,
    pub distance: f64,
    pub total: f64,
    /// Margin loss of the untransformed evaluation (`<= -margin` means success).
    pub margin: f64,
}

/// The physical perturbation an attack produced.
#[derive(Clone, Debug)]
pub enum Artifact {
    Patterns(FringePatternSet),
    Illumination(Image),
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub artifact: Artifact,
    /// Re-simulated adversarial reconstruction.
    pub adversarial_cloud: PointCloud,
    pub clean_cloud: PointCloud,
    /// Verified by full re-simulation.
    pub success: bool,
    /// Success of the optimizer's own (differentiable) model on the returned iterate.
    pub surrogate_success: bool,
    pub logits: Vec<f64>,
    pub margin: f64,
    pub rmse: RmseReport,
    /// Sum of per-pixel absolute change: normalized phase for shifting, intensity for superposition.
    pub l1: f64,
    pub lambda: Option<f64>,
    pub search: Vec<SearchStep>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
}
