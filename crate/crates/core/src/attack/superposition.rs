//! Phase superposition attack: a camera-aligned projector adds light to the
//! single-step fringe capture so the scanner's fringe analysis decodes a
//! shifted phase.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, lambda_search, rmse_aligned, sample_plan, score_cloud, Score, sensitivity_map, Artifact, AttackConfig, AttackResult,
    Branch, Classifier, TraceRow,
};
use crate::error::{Error, Result};
use crate::fringe::{unwrap_phase, unwrap_pixel, wrap, FringePatternSet, PhaseKind, PhaseMap};
use crate::photometric::{GammaModel, RenderSettings, ShadingBasis};
use crate::raster::{Grid, Image, Mask};
use crate::recognize::{goal_met, logit_gap, ModelParams};
use crate::reconstruct::{reconstruct_cloud, reconstruct_pixel, Normalization, Point, PointCloud};
use crate::scan::{capture_gray_bits, Rig, Scan, STREAM_BLACK, STREAM_WHITE};

/// Separable Gaussian low-pass of the quadrature estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub sigma: f64,
    /// Truncation radius in pixels.
    pub radius: usize,
    pub modulation_threshold: f64,
    /// Demodulation passes; each refines the carrier with the previous phase.
    pub passes: usize,
    /// Pixels this close to an unlit pixel are dropped; the low-pass smears edges.
    pub erode: usize,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { sigma: 2.0, radius: 6, modulation_threshold: 0.01, passes: 2, erode: 2 }
    }
}

/// Gaussian blur with zero padding, renormalized by the in-bounds weight.
#[derive(Clone, Debug)]
struct Lowpass {
    kernel: Vec<f64>,
    radius: usize,
    width: usize,
    height: usize,
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl Lowpass {
    fn new(params: &SurrogateParams, width: usize, height: usize) -> Self {
        let r = params.radius as isize;
        let kernel: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / params.sigma).powi(2)).exp()).collect();
        let z = |n: usize| -> Vec<f64> {
            (0..n as isize)
                .map(|i| (-r..=r).filter(|d| (0..n as isize).contains(&(i + d))).map(|d| kernel[(d + r) as usize]).sum())
                .collect()
        };
        Self { zx: z(width), zy: z(height), kernel, radius: params.radius, width, height }
    }

    fn pass(&self, x: &[f64], horizontal: bool) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = self.radius as isize;
        let mut out = vec![0.0; x.len()];
        for v in 0..h {
            for u in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (uu, vv) = if horizontal { (u as isize + d, v as isize) } else { (u as isize, v as isize + d) };
                    if uu >= 0 && vv >= 0 && (uu as usize) < w && (vv as usize) < h {
                        acc += self.kernel[(d + r) as usize] * x[vv as usize * w + uu as usize];
                    }
                }
                out[v * w + u] = acc;
            }
        }
        out
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = self.width;
        let mut y = self.pass(x, true);
        for (i, v) in y.iter_mut().enumerate() {
            *v /= self.zx[i % w];
        }
        let mut y = self.pass(&y, false);
        for (i, v) in y.iter_mut().enumerate() {
            *v /= self.zy[i / w];
        }
        y
    }

    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let w = self.width;
        let scaled: Vec<f64> = g.iter().enumerate().map(|(i, v)| v / self.zy[i / w]).collect();
        let y = self.pass(&scaled, false);
        let scaled: Vec<f64> = y.iter().enumerate().map(|(i, v)| v / self.zx[i % w]).collect();
        self.pass(&scaled, true)
    }
}

/// Phase a fronto-parallel plane at the rig standoff shows at each camera pixel (shift 0).
pub fn reference_carrier(rig: &Rig) -> Image {
    let full = TAU * rig.fringe_count as f64 / rig.projector_width as f64;
    Grid::from_fn(rig.camera_width, rig.camera_height, |u, v| {
        let x = rig.camera.point_at_depth(u as f64, v as f64, rig.standoff);
        rig.projector.project(&x).map(|p| full * p.u).unwrap_or(0.0)
    })
}

/// One demodulation pass: the carrier it used and its low-passed quadratures.
#[derive(Clone, Debug)]
struct Pass {
    sin: Vec<f64>,
    cos: Vec<f64>,
    m: Vec<f64>,
    d: Vec<f64>,
    valid: Vec<bool>,
}

/// Forward pass of the surrogate with what its adjoint needs.
#[derive(Clone, Debug)]
pub struct SurrogateOutput {
    pub phase: PhaseMap,
    hp: Vec<f64>,
    passes: Vec<Pass>,
}

/// Differentiable single-image fringe analysis against a known carrier.
///
/// Later passes demodulate against the previous pass's phase, which keeps the
/// baseband nearly flat so the low-pass no longer bends it over curved relief.
#[derive(Clone, Debug)]
pub struct Surrogate {
    params: SurrogateParams,
    lowpass: Lowpass,
    carrier: Vec<f64>,
    fringe_count: usize,
}

impl Surrogate {
    pub fn new(carrier: &Image, fringe_count: usize, params: SurrogateParams) -> Result<Self> {
        if !(params.sigma > 0.0) || params.radius == 0 || params.passes == 0 {
            return Err(Error::InvalidConfig("surrogate needs positive sigma, radius and pass count".into()));
        }
        Ok(Self {
            lowpass: Lowpass::new(&params, carrier.width(), carrier.height()),
            carrier: carrier.as_slice().to_vec(),
            params,
            fringe_count,
        })
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    /// Removes the local mean, demodulates against the carrier, low-passes
    /// both quadratures and reads the phase with the multi-step sign convention.
    pub fn forward(&self, image: &Image) -> Result<SurrogateOutput> {
        let (w, h) = (self.lowpass.width, self.lowpass.height);
        if image.width() != w || image.height() != h {
            return Err(Error::ShapeMismatch("image does not match the carrier grid".into()));
        }
        let x = image.as_slice();
        let mean = self.lowpass.apply(x);
        let hp: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let mut theta = self.carrier.clone();
        let mut passes = Vec::with_capacity(self.params.passes);
        let mut modulation = Grid::filled(w, h, 0.0);
        for _ in 0..self.params.passes {
            let sin: Vec<f64> = theta.iter().map(|t| t.sin()).collect();
            let cos: Vec<f64> = theta.iter().map(|t| t.cos()).collect();
            let s: Vec<f64> = hp.iter().zip(&sin).map(|(a, b)| a * b).collect();
            let c: Vec<f64> = hp.iter().zip(&cos).map(|(a, b)| a * b).collect();
            let m = self.lowpass.apply(&s);
            let d = self.lowpass.apply(&c);
            let mut valid = vec![false; w * h];
            for i in 0..w * h {
                modulation[i] = 2.0 * m[i].hypot(d[i]);
                if modulation[i] >= self.params.modulation_threshold {
                    valid[i] = true;
                    theta[i] += (-m[i]).atan2(d[i]);
                }
            }
            passes.push(Pass { sin, cos, m, d, valid });
        }
        let last = passes.last().expect("at least one pass");
        let mask = Grid::from_vec(w, h, last.valid.clone())?;
        let values = Grid::from_fn(w, h, |u, v| {
            let i = v * w + u;
            if last.valid[i] {
                wrap(theta[i])
            } else {
                f64::NAN
            }
        });
        Ok(SurrogateOutput {
            phase: PhaseMap { kind: PhaseKind::Wrapped, fringe_count: self.fringe_count, values, mask, modulation },
            hp,
            passes,
        })
    }

    /// Image gradient given gradients on the (locally unwrapped) phase.
    pub fn backward(&self, out: &SurrogateOutput, d_phase: &[f64]) -> Vec<f64> {
        let n = d_phase.len();
        let last = out.passes.last().expect("at least one pass");
        let mut g_theta: Vec<f64> = (0..n).map(|i| if last.valid[i] { d_phase[i] } else { 0.0 }).collect();
        let mut g_hp = vec![0.0; n];
        for pass in out.passes.iter().rev() {
            let mut gm = vec![0.0; n];
            let mut gd = vec![0.0; n];
            for i in 0..n {
                if g_theta[i] == 0.0 || !pass.valid[i] {
                    continue;
                }
                let (m, d) = (pass.m[i], pass.d[i]);
                let r2 = m * m + d * d;
                gm[i] = g_theta[i] * (-d / r2);
                gd[i] = g_theta[i] * (m / r2);
            }
            let gs = self.lowpass.apply_transpose(&gm);
            let gc = self.lowpass.apply_transpose(&gd);
            for i in 0..n {
                g_hp[i] += gs[i] * pass.sin[i] + gc[i] * pass.cos[i];
                // The pass output carries its carrier through with unit slope.
                g_theta[i] += out.hp[i] * (gs[i] * pass.cos[i] - gc[i] * pass.sin[i]);
            }
        }
        let g_mean = self.lowpass.apply_transpose(&g_hp);
        g_hp.iter().zip(&g_mean).map(|(a, b)| a - b).collect()
    }
}

/// Convenience wrapper returning only the wrapped phase.
pub fn fringe_analysis_surrogate(image: &Image, carrier: &Image, fringe_count: usize, params: SurrogateParams) -> Result<PhaseMap> {
    Ok(Surrogate::new(carrier, fringe_count, params)?.forward(image)?.phase)
}

/// Pixels the scanner projector lights with enough contrast, from the white
/// and black reference captures. The blurred surrogate modulation cannot
/// tell a lit pixel from its shadowed neighbour.
pub fn contrast_mask(
    basis: &ShadingBasis,
    patterns: &FringePatternSet,
    extra: Option<&Image>,
    settings: &RenderSettings,
    params: &SurrogateParams,
) -> Mask {
    let (white, _) = basis.render(&patterns.white(), extra, settings, STREAM_WHITE, false);
    let (black, _) = basis.render(&patterns.black(), extra, settings, STREAM_BLACK, false);
    let lit = Grid::from_fn(white.width(), white.height(), |u, v| {
        *basis.in_view.get(u, v) && 0.5 * (white.get(u, v) - black.get(u, v)) >= params.modulation_threshold
    });
    erode(&lit, params.erode)
}

/// Keeps pixels whose whole (2r+1)-square neighbourhood is set and in bounds.
fn erode(mask: &Mask, r: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let r = r as isize;
    Grid::from_fn(w, h, |u, v| {
        (-r..=r).all(|dv| {
            (-r..=r).all(|du| {
                let (x, y) = (u as isize + du, v as isize + dv);
                x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *mask.get(x as usize, y as usize)
            })
        })
    })
}

/// The single-step scanner: one fringe capture analyzed by the surrogate,
/// gray codes for the fringe order.
pub fn single_step_scan(
    basis: &ShadingBasis,
    patterns: &FringePatternSet,
    surrogate: &Surrogate,
    extra: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Scan> {
    let (image, _) = basis.render(&patterns.shift_patterns[0], extra, settings, 0, false);
    let mut wrapped = surrogate.forward(&image)?.phase;
    let lit = contrast_mask(basis, patterns, extra, settings, surrogate.params());
    for i in 0..wrapped.mask.len() {
        if !lit[i] && wrapped.mask[i] {
            wrapped.mask[i] = false;
            wrapped.values[i] = f64::NAN;
        }
    }
    let bits = capture_gray_bits(basis, patterns, extra, settings)?;
    let unwrapped = unwrap_phase(&wrapped, &bits)?;
    Ok(Scan { wrapped, unwrapped })
}

#[derive(Clone, Copy)]
pub struct SuperpositionContext<'a> {
    pub rig: &'a Rig,
    pub basis: &'a ShadingBasis,
    pub patterns: &'a FringePatternSet,
    /// Clean multi-step scan: gray-code orders and the sensitivity map come from it.
    pub clean: &'a Scan,
    pub surrogate: &'a Surrogate,
    /// Physical capture settings for re-simulation (true attacker gamma, sensor noise).
    pub settings: &'a RenderSettings,
    /// Projector response the optimizer assumes; `None` treats the attacker projector as linear.
    pub model_gamma: Option<GammaModel>,
}

struct Forward {
    points: Vec<Point>,
    pixels: Vec<[u32; 2]>,
    index: Vec<usize>,
    jac: Vec<Vector3<f64>>,
    out: SurrogateOutput,
    d_image: Image,
}

fn differentiable_scan(ctx: &SuperpositionContext, x: &Image, settings: &RenderSettings, lit: &Mask) -> Result<Forward> {
    let rig = ctx.rig;
    let (image, d_image) = ctx.basis.render(&ctx.patterns.shift_patterns[0], Some(x), settings, 0, true);
    let out = ctx.surrogate.forward(&image)?;
    let half = &ctx.clean.unwrapped.half_periods;
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut index = Vec::new();
    let mut jac = Vec::new();
    for i in 0..image.len() {
        if !(out.phase.mask[i] && lit[i]) {
            continue;
        }
        let Some(phase) = unwrap_pixel(out.phase.values[i], half[i], rig.fringe_count) else { continue };
        let (u, v) = image.coords(i);
        match reconstruct_pixel(&rig.camera, &rig.projector, rig.projector_width, rig.fringe_count, u, v, phase) {
            Ok((p, d)) => {
                points.push(p);
                pixels.push([u as u32, v as u32]);
                index.push(i);
                jac.push(d);
            }
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if points.is_empty() {
        return Err(Error::DegenerateCloud);
    }
    Ok(Forward { points, pixels, index, jac, out, d_image: d_image.expect("requested") })
}

struct Candidate {
    x: Image,
    trace: Vec<TraceRow>,
    surrogate_success: bool,
    /// Best-effort rank of this iterate.
    score: Score,
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    lambda: f64,
    branch: u64,
    ctx: &SuperpositionContext,
    classifier: &Classifier,
    config: &AttackConfig,
    label: usize,
    sen: &Image,
    reference: &(PointCloud, Normalization, Vec<usize>),
    model_settings: &RenderSettings,
    lit: &Mask,
) -> Result<(Option<(Candidate, f64)>, Candidate)> {
    let (w, h) = (ctx.rig.camera_width, ctx.rig.camera_height);
    let opt_margin = config.margin + config.margin_slack;
    let check_margin = config.margin + 0.5 * config.margin_slack;
    let (clean_cloud, clean_norm, clean_subset) = reference;
    let frozen = (clean_subset.clone(), *clean_norm);
    let clean_lookup: std::collections::HashMap<[u32; 2], usize> = clean_cloud
        .pixels
        .as_ref()
        .expect("provenance")
        .iter()
        .enumerate()
        .map(|(k, p)| (*p, k))
        .collect();
    let mut x = Grid::filled(w, h, config.initial_noise.min(1.0));
    let mut best: Option<(Candidate, f64)> = None;
    let mut trace = Vec::new();
    let mut fallback: Option<Candidate> = None;
    let check_every = (config.iterations / 10).max(1);
    let mut checkpoint = f64::INFINITY;
    for it in 0..config.iterations {
        let fwd = differentiable_scan(ctx, &x, model_settings, lit)?;
        let plan = sample_plan(classifier, config, &fwd.points, Some(&frozen), derive_seed(config.seed, 200 + branch, it as u64))?;
        let (adv, mut g_points) = classifier.loss_and_grad(&fwd.points, &fwd.pixels, &plan, label, config.mode, opt_margin)?;

        // RMSE against the clean single-step reconstruction, in its normalized frame.
        let matched: Vec<(usize, usize)> = fwd
            .pixels
            .iter()
            .enumerate()
            .filter_map(|(k, p)| clean_lookup.get(p).map(|&j| (k, j)))
            .collect();
        let nm = matched.len().max(1) as f64;
        let mut rmse = 0.0;
        for &(k, j) in &matched {
            let diff = (fwd.points[k] - clean_cloud.points[j]) / clean_norm.scale;
            let len = diff.norm();
            rmse += len / (nm * nm);
            if len > 0.0 {
                g_points[k] += diff / len * (config.lambda1 / (nm * nm * clean_norm.scale));
            }
        }
        let l1: f64 = x.as_slice().iter().zip(sen.as_slice()).map(|(a, s)| a * s).sum();
        let total = adv + config.lambda1 * rmse + lambda * l1;

        let cloud = PointCloud { points: fwd.points.clone(), pixels: Some(fwd.pixels.clone()) };
        let (margin, score) = score_cloud(classifier, &cloud, label, config)?;
        if adv <= -opt_margin + 1e-9 && margin <= -check_margin && best.as_ref().is_none_or(|(_, d)| l1 < *d) {
            best = Some((Candidate { x: x.clone(), trace: Vec::new(), surrogate_success: true, score }, l1));
        }
        if fallback.as_ref().is_none_or(|f| score.better_than(&f.score)) {
            fallback = Some(Candidate { x: x.clone(), trace: Vec::new(), surrogate_success: score.met, score });
        }
        trace.push(TraceRow {
            stage: "optimize".into(),
            iteration: it,
            lambda,
            adversarial_loss: adv,
            distance: l1,
            total,
            margin,
        });
        if config.abort_early && best.is_some() && it % check_every == 0 {
            if total > checkpoint - 1e-4 * checkpoint.abs() {
                break;
            }
            checkpoint = total;
        }

        let mut d_phase = vec![0.0; w * h];
        for (k, &i) in fwd.index.iter().enumerate() {
            d_phase[i] = g_points[k].dot(&fwd.jac[k]);
        }
        let d_img = ctx.surrogate.backward(&fwd.out, &d_phase);
        let mut any = false;
        for i in 0..w * h {
            let g = d_img[i] * fwd.d_image[i] + lambda * sen[i];
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(it));
            }
            if g != 0.0 {
                any = true;
                x[i] = (x[i] - config.superposition_step * g.signum()).clamp(0.0, 1.0);
            }
        }
        if !any {
            break;
        }
    }
    if let Some((c, _)) = best.as_mut() {
        c.trace = trace.clone();
    }
    let mut fallback = fallback.unwrap_or(Candidate { x, trace: Vec::new(), surrogate_success: false, score: Score::WORST });
    fallback.trace = trace;
    Ok((best, fallback))
}

struct Verified {
    cloud: PointCloud,
    logits: Vec<f64>,
    margin: f64,
    success: bool,
}

fn verify(ctx: &SuperpositionContext, x: &Image, classifier: &Classifier, config: &AttackConfig, label: usize) -> Result<Verified> {
    let rig = ctx.rig;
    let scan = single_step_scan(ctx.basis, ctx.patterns, ctx.surrogate, Some(x), ctx.settings)?;
    let rec = reconstruct_cloud(scan.absolute(), &rig.camera, &rig.projector, rig.projector_width)?;
    let logits = classifier.classify_cloud(&rec.cloud, derive_seed(config.seed, 10, 0), None)?;
    let margin = logit_gap(&logits, label, config.mode);
    Ok(Verified { cloud: rec.cloud, logits, success: goal_met(margin), margin })
}

/// Phase superposition attack with lambda search over the sensitivity-weighted
/// illumination penalty.
pub fn phase_superposition_attack(
    ctx: &SuperpositionContext,
    model: &ModelParams,
    true_label: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let rig = ctx.rig;
    let (w, h) = (rig.camera_width, rig.camera_height);
    let label = config.loss_label(true_label)?;
    let classifier = Classifier::new(model, &rig.camera, w, h, config.cloud_points)?;
    let model_settings = RenderSettings {
        attacker_gamma: ctx.model_gamma,
        noise_sigma: 0.0,
        ..ctx.settings.clone()
    };
    let falloff = config.sensitivity_width.unwrap_or(w as f64 / 4.0);
    let sen = sensitivity_map(ctx.clean.absolute(), None, falloff, config.sensitivity_radius)?.weights;
    let eval_seed = derive_seed(config.seed, 10, 0);

    let zeros = Grid::filled(w, h, 0.0);
    let lit = contrast_mask(ctx.basis, ctx.patterns, None, &model_settings, ctx.surrogate.params());
    let clean_fwd = differentiable_scan(ctx, &zeros, &model_settings, &lit)?;
    let clean_model_cloud = PointCloud { points: clean_fwd.points.clone(), pixels: Some(clean_fwd.pixels.clone()) };
    let subset = classifier.subset(&clean_model_cloud.points, eval_seed)?;
    let sub_points: Vec<Point> = subset.iter().map(|&i| clean_model_cloud.points[i]).collect();
    let reference = (clean_model_cloud.clone(), Normalization::fit(&clean_model_cloud.points)?, subset);
    let reference = (reference.0, reference.1, reference.2);
    let frozen_norm = Normalization::fit(&sub_points)?;

    let clean = verify(ctx, &zeros, &classifier, config, label)?;
    if clean.margin <= -config.margin {
        return Ok(AttackResult {
            artifact: Artifact::Illumination(zeros),
            rmse: rmse_aligned(&clean.cloud, &clean.cloud)?,
            adversarial_cloud: clean.cloud.clone(),
            clean_cloud: clean.cloud,
            success: true,
            surrogate_success: true,
            logits: clean.logits,
            margin: clean.margin,
            l1: 0.0,
            lambda: None,
            search: Vec::new(),
            trace: Vec::new(),
            iterations: 0,
        });
    }
    let reference = (reference.0, frozen_norm, reference.2);

    let mut fallback: Option<Candidate> = None;
    let mut branch_index = 0u64;
    let mut iterations = 0;
    let search = lambda_search(config.lambda_bounds, config.search_steps, |lambda| {
        let (best, last) =
            optimize(lambda, branch_index, ctx, &classifier, config, label, &sen, &reference, &model_settings, &lit)?;
        branch_index += 1;
        iterations += last.trace.len();
        if fallback.as_ref().is_none_or(|f| last.score.better_than(&f.score)) {
            fallback = Some(last);
        }
        let Some((cand, distance)) = best else {
            return Ok(Branch { success: false, distance: f64::INFINITY, value: None });
        };
        let v = verify(ctx, &cand.x, &classifier, config, label)?;
        Ok(Branch { success: v.success, distance, value: Some((cand, v)) })
    });
    let (cand, verified, lambda, steps) = match search {
        Ok((Some((c, v)), lambda, steps)) => (c, v, Some(lambda), steps),
        Ok((None, _, _)) => unreachable!("successful branches carry a value"),
        Err(Error::AllStepsFailed) => {
            let c = fallback.expect("at least one branch ran");
            let v = verify(ctx, &c.x, &classifier, config, label)?;
            (c, v, None, Vec::new())
        }
        Err(e) => return Err(e),
    };
    let l1 = cand.x.as_slice().iter().sum();
    let mut trace = cand.trace;
    trace.push(TraceRow {
        stage: "resim".into(),
        iteration: trace.len(),
        lambda: lambda.unwrap_or(f64::NAN),
        adversarial_loss: verified.margin,
        distance: l1,
        total: f64::NAN,
        margin: verified.margin,
    });
    Ok(AttackResult {
        artifact: Artifact::Illumination(cand.x),
        rmse: rmse_aligned(&verified.cloud, &clean.cloud)?,
        adversarial_cloud: verified.cloud,
        clean_cloud: clean.cloud,
        success: verified.success,
        surrogate_success: cand.surrogate_success,
        logits: verified.logits,
        margin: verified.margin,
        l1,
        lambda,
        search: steps,
        trace,
        iterations,
    })
}
