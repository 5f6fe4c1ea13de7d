//! Phase shifting attack: optimize the absolute phase map the scanner will
//! decode, then re-index the scanner's own shift patterns to produce it.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    derive_seed, lambda_search, rmse_aligned, sample_plan, score_cloud, sensitivity_map, Score, Artifact, AttackConfig, AttackResult,
    Branch, Classifier, Distance, TraceRow,
};
use crate::error::{Error, Result};
use crate::fringe::{
    encode_adversarial_patterns, phase_to_column, unwrap_pixel, wrap, Correspondence, FringePatternSet, PhaseKind,
    PhaseMap,
};
use crate::geometry::{constrain_gradient, triangulate};
use crate::photometric::{RenderSettings, ShadingBasis};
use crate::raster::Grid;
use crate::recognize::{goal_met, logit_gap, ModelParams};
use crate::reconstruct::{clip_normalized, correspondence, reconstruct_cloud, Normalization, Point, PointCloud};
use crate::scan::{scan_with_basis, Rig, Scan};

/// Everything the attack needs about the victim scanner and the scanned subject.
#[derive(Clone, Copy)]
pub struct ShiftingContext<'a> {
    pub rig: &'a Rig,
    pub basis: &'a ShadingBasis,
    pub patterns: &'a FringePatternSet,
    /// Scanner capture settings used for re-simulation.
    pub settings: &'a RenderSettings,
    pub clean: &'a Scan,
}

/// Per-pixel state of the clean scan restricted to reconstructable pixels.
struct Clean {
    index: Vec<usize>,
    pixels: Vec<[u32; 2]>,
    nu0: Vec<f64>,
    wrapped0: Vec<f64>,
    half_period: Vec<u32>,
    rounded_column0: Vec<i64>,
    points: Vec<Point>,
    d_point_d_nu: Vec<Vector3<f64>>,
    sen: Vec<f64>,
    correspondence: Grid<Option<Correspondence>>,
}

impl Clean {
    fn new(ctx: &ShiftingContext, config: &AttackConfig) -> Result<Self> {
        let rig = ctx.rig;
        let phase = ctx.clean.absolute();
        let rec = reconstruct_cloud(phase, &rig.camera, &rig.projector, rig.projector_width)?;
        let corr = correspondence(phase, &rec, &rig.projector, rig.projector_width);
        let full = TAU * rig.fringe_count as f64;
        let falloff = config.sensitivity_width.unwrap_or(phase.width() as f64 / 4.0);
        let sen_map = sensitivity_map(phase, None, falloff, config.sensitivity_radius)?;
        let mut out = Clean {
            index: Vec::new(),
            pixels: Vec::new(),
            nu0: Vec::new(),
            wrapped0: Vec::new(),
            half_period: Vec::new(),
            rounded_column0: Vec::new(),
            points: Vec::new(),
            d_point_d_nu: Vec::new(),
            sen: Vec::new(),
            correspondence: corr,
        };
        for (k, &i) in rec.pixel_index.iter().enumerate() {
            let Some(c) = out.correspondence[i] else { continue };
            out.index.push(i);
            out.pixels.push(rec.cloud.pixels.as_ref().expect("provenance")[k]);
            out.nu0.push(phase.values[i] / full);
            out.wrapped0.push(ctx.clean.wrapped.values[i]);
            out.half_period.push(ctx.clean.unwrapped.half_periods[i]);
            out.rounded_column0.push(c.column.round() as i64);
            out.points.push(rec.cloud.points[k]);
            out.d_point_d_nu.push(rec.d_point_d_phase[k] * full);
            out.sen.push(sen_map.weights[i]);
        }
        if out.index.is_empty() {
            return Err(Error::DegenerateCloud);
        }
        Ok(out)
    }

    fn cloud(&self) -> PointCloud {
        PointCloud { points: self.points.clone(), pixels: Some(self.pixels.clone()) }
    }
}

/// Phase the scanner decodes at one pixel when the encoder receives normalized
/// phase `nu`: the column shift is rounded, added to the clean wrapped phase and
/// unwrapped with the (unchanged) gray code. Full-period shifts are no-ops.
pub fn realize_phase(
    nu: f64,
    wrapped0: f64,
    half_period: u32,
    rounded_column0: i64,
    projector_width: usize,
    fringe_count: usize,
) -> Option<f64> {
    let full = TAU * fringe_count as f64;
    let (_, target) = phase_to_column(nu * full, projector_width, fringe_count);
    let period = (projector_width / fringe_count) as i64;
    let shift = target - rounded_column0;
    if shift.rem_euclid(period) == 0 {
        return unwrap_pixel(wrapped0, half_period, fringe_count);
    }
    let w = wrap(wrapped0 + full * shift as f64 / projector_width as f64);
    unwrap_pixel(w, half_period, fringe_count)
}

/// Folds full-period shifts back to the clean phase; they decode identically.
fn fold_full_periods(nu: &mut [f64], clean: &Clean, rig: &Rig) {
    let full = TAU * rig.fringe_count as f64;
    let period = (rig.projector_width / rig.fringe_count) as i64;
    for (k, v) in nu.iter_mut().enumerate() {
        let (_, target) = phase_to_column(*v * full, rig.projector_width, rig.fringe_count);
        let shift = target - clean.rounded_column0[k];
        if shift != 0 && shift.rem_euclid(period) == 0 {
            *v = clean.nu0[k];
        }
    }
}

struct Realized {
    cloud: PointCloud,
    distance: f64,
}

fn distance_of(config: &AttackConfig, clean: &Clean, delta: impl Iterator<Item = (usize, f64)>) -> f64 {
    match config.distance {
        Distance::SensitivityL1 => delta.map(|(k, d)| clean.sen[k] * d.abs()).sum(),
        Distance::L2 => delta.map(|(_, d)| d * d).sum(),
    }
}

fn realize(nu: &[f64], clean: &Clean, rig: &Rig, config: &AttackConfig) -> Result<Realized> {
    let full = TAU * rig.fringe_count as f64;
    let mut points = Vec::with_capacity(nu.len());
    let mut pixels = Vec::with_capacity(nu.len());
    let mut deltas = Vec::with_capacity(nu.len());
    for (k, &v) in nu.iter().enumerate() {
        let Some(phase) = realize_phase(
            v,
            clean.wrapped0[k],
            clean.half_period[k],
            clean.rounded_column0[k],
            rig.projector_width,
            rig.fringe_count,
        ) else {
            continue;
        };
        let d = phase / full - clean.nu0[k];
        let p = if d == 0.0 {
            clean.points[k]
        } else {
            let (col, _) = phase_to_column(phase, rig.projector_width, rig.fringe_count);
            let [u, vv] = clean.pixels[k];
            match triangulate(&rig.camera, &rig.projector, u as f64, vv as f64, col) {
                Ok(t) => t.point,
                Err(Error::DegenerateGeometry(_)) => continue,
                Err(e) => return Err(e),
            }
        };
        points.push(p);
        pixels.push(clean.pixels[k]);
        deltas.push((k, d));
    }
    let distance = distance_of(config, clean, deltas.iter().copied());
    Ok(Realized { cloud: PointCloud { points, pixels: Some(pixels) }, distance })
}

/// Projects free 3D offsets onto each pixel's ray and reads back the projector column.
fn offsets_to_phase(offsets: &[Vector3<f64>], clean: &Clean, rig: &Rig) -> Vec<f64> {
    let center = rig.camera.center();
    offsets
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let [u, v] = clean.pixels[k];
            let dir = rig.camera.back_project(u as f64, v as f64).direction.normalize();
            let x = clean.points[k] + q;
            let on_ray = center + dir * (x - center).dot(&dir);
            match rig.projector.project(&on_ray) {
                Ok(p) => clip_normalized(p.u / rig.projector_width as f64, clean.nu0[k], rig.fringe_count),
                Err(_) => clean.nu0[k],
            }
        })
        .collect()
}

struct Outcome {
    nu: Vec<f64>,
    trace: Vec<TraceRow>,
    surrogate_success: bool,
    /// Best-effort rank of this iterate on the realized cloud.
    score: Score,
}

/// One optimization run at a fixed lambda. Returns the confident realized
/// iterate with the smallest distance (if any) and the iterate with the
/// lowest realized gap.
fn optimize(
    lambda: f64,
    branch: u64,
    clean: &Clean,
    ctx: &ShiftingContext,
    classifier: &Classifier,
    config: &AttackConfig,
    label: usize,
    frozen: &(Vec<usize>, Normalization),
) -> Result<(Option<(Outcome, f64)>, Outcome)> {
    let rig = ctx.rig;
    let n = clean.nu0.len();
    let opt_margin = config.margin + config.margin_slack;
    let check_margin = config.margin + 0.5 * config.margin_slack;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3, branch));
    let naive = !config.direction_constraint;
    let mean_jac = clean.d_point_d_nu.iter().map(|d| d.norm()).sum::<f64>() / n as f64;

    let mut nu: Vec<f64> = clean
        .nu0
        .iter()
        .map(|&v| clip_normalized(v + config.initial_noise * rng.gen_range(-1.0..1.0), v, rig.fringe_count))
        .collect();
    let mut offsets: Vec<Vector3<f64>> = if naive {
        (0..n)
            .map(|_| {
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                    * (config.initial_noise * mean_jac)
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut best: Option<(Outcome, f64)> = None;
    let mut trace = Vec::new();
    let check_every = (config.iterations / 10).max(1);
    let mut checkpoint = f64::INFINITY;
    let mut fallback: Option<Outcome> = None;
    for it in 0..config.iterations {
        let (points, jac): (Vec<Point>, Vec<Vector3<f64>>) = if naive {
            (clean.points.iter().zip(&offsets).map(|(p, q)| p + q).collect(), Vec::new())
        } else {
            let full = TAU * rig.fringe_count as f64;
            let mut pts = Vec::with_capacity(n);
            let mut jac = Vec::with_capacity(n);
            for k in 0..n {
                let phase = nu[k] * full;
                let (col, _) = phase_to_column(phase, rig.projector_width, rig.fringe_count);
                let [u, v] = clean.pixels[k];
                let t = triangulate(&rig.camera, &rig.projector, u as f64, v as f64, col)?;
                pts.push(t.point);
                jac.push(t.d_point_d_up * (rig.projector_width as f64));
            }
            (pts, jac)
        };
        let plan = sample_plan(classifier, config, &points, Some(frozen), derive_seed(config.seed, 100 + branch, it as u64))?;
        let (adv, g_points) = classifier.loss_and_grad(&points, &clean.pixels, &plan, label, config.mode, opt_margin)?;
        let (distance, step): (f64, Vec<f64>) = if naive {
            let mut dist = 0.0;
            let mut step = Vec::with_capacity(3 * n);
            for k in 0..n {
                let q = offsets[k];
                for c in 0..3 {
                    let (d, g) = match config.distance {
                        Distance::SensitivityL1 => (clean.sen[k] * q[c].abs(), clean.sen[k] * sign(q[c])),
                        Distance::L2 => (q[c] * q[c], 2.0 * q[c]),
                    };
                    dist += d;
                    step.push(g_points[k][c] + lambda * g);
                }
            }
            (dist, step)
        } else {
            let g = if config.direction_constraint { constrain_gradient(&g_points, &rig.camera) } else { g_points };
            let mut dist = 0.0;
            let mut step = Vec::with_capacity(n);
            for k in 0..n {
                let d = nu[k] - clean.nu0[k];
                let (dv, dg) = match config.distance {
                    Distance::SensitivityL1 => (clean.sen[k] * d.abs(), clean.sen[k] * sign(d)),
                    Distance::L2 => (d * d, 2.0 * d),
                };
                dist += dv;
                step.push(g[k].dot(&jac[k]) + lambda * dg);
            }
            (dist, step)
        };
        let total = adv + lambda * distance;

        // Realize and classify the current iterate: confident candidates feed
        // the search, the lowest gap is kept as a best-effort fallback.
        let candidate_nu = if naive { offsets_to_phase(&offsets, clean, rig) } else { nu.clone() };
        let realized = realize(&candidate_nu, clean, rig, config)?;
        let (margin, score) = score_cloud(classifier, &realized.cloud, label, config)?;
        if adv <= -opt_margin + 1e-9
            && margin <= -check_margin
            && best.as_ref().is_none_or(|(_, d)| realized.distance < *d)
        {
            best = Some((
                Outcome { nu: candidate_nu.clone(), trace: Vec::new(), surrogate_success: true, score },
                realized.distance,
            ));
        }
        if fallback.as_ref().is_none_or(|f| score.better_than(&f.score)) {
            fallback = Some(Outcome { nu: candidate_nu, trace: Vec::new(), surrogate_success: score.met, score });
        }
        trace.push(TraceRow {
            stage: "optimize".into(),
            iteration: it,
            lambda,
            adversarial_loss: adv,
            distance,
            total,
            margin,
        });

        if config.abort_early && best.is_some() && it % check_every == 0 {
            if total > checkpoint - 1e-4 * checkpoint.abs() {
                break;
            }
            checkpoint = total;
        }

        let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteGradient(it));
        }
        if norm == 0.0 {
            break;
        }
        if naive {
            let alpha = config.step_size * mean_jac / norm;
            for k in 0..n {
                for c in 0..3 {
                    let old = offsets[k][c];
                    let new = old - alpha * step[3 * k + c];
                    offsets[k][c] = if old != 0.0 && new.signum() != old.signum() { 0.0 } else { new };
                }
            }
        } else {
            let alpha = config.step_size / norm;
            for k in 0..n {
                let old = nu[k] - clean.nu0[k];
                let mut new = clip_normalized(nu[k] - alpha * step[k], clean.nu0[k], rig.fringe_count);
                if old != 0.0 && (new - clean.nu0[k]).signum() != old.signum() {
                    new = clean.nu0[k];
                }
                nu[k] = new;
            }
        }
    }
    if let Some((o, _)) = best.as_mut() {
        o.trace = trace.clone();
    }
    let mut fallback = match fallback {
        Some(f) => f,
        None => {
            let nu = if naive { offsets_to_phase(&offsets, clean, rig) } else { nu };
            Outcome { nu, trace: Vec::new(), surrogate_success: false, score: Score::WORST }
        }
    };
    fallback.trace = trace;
    Ok((best, fallback))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Full physical check: encode, rescan the true scene, reconstruct, classify.
struct Verified {
    patterns: FringePatternSet,
    cloud: PointCloud,
    logits: Vec<f64>,
    margin: f64,
    success: bool,
    l1: f64,
}

fn verify(
    nu: &[f64],
    clean: &Clean,
    ctx: &ShiftingContext,
    classifier: &Classifier,
    config: &AttackConfig,
    label: usize,
) -> Result<Verified> {
    let rig = ctx.rig;
    let full = TAU * rig.fringe_count as f64;
    let phase0 = ctx.clean.absolute();
    let mut adv = PhaseMap {
        kind: PhaseKind::Absolute,
        fringe_count: rig.fringe_count,
        values: phase0.values.clone(),
        mask: Grid::filled(phase0.width(), phase0.height(), false),
        modulation: phase0.modulation.clone(),
    };
    for (k, &i) in clean.index.iter().enumerate() {
        adv.values[i] = nu[k] * full;
        adv.mask[i] = true;
    }
    let (patterns, _) = encode_adversarial_patterns(&adv, ctx.patterns, &clean.correspondence)?;
    let scan = scan_with_basis(ctx.basis, &patterns, None, ctx.settings)?;
    let rec = reconstruct_cloud(scan.absolute(), &rig.camera, &rig.projector, rig.projector_width)?;
    let logits = classifier.classify_cloud(&rec.cloud, derive_seed(config.seed, 10, 0), None)?;
    let margin = logit_gap(&logits, label, config.mode);
    let mut l1 = 0.0;
    for &i in &clean.index {
        if scan.absolute().mask[i] {
            l1 += (scan.absolute().values[i] - phase0.values[i]).abs() / full;
        }
    }
    Ok(Verified { patterns, cloud: rec.cloud, logits, success: goal_met(margin), margin, l1 })
}

/// Phase shifting attack with lambda search. `true_label` is the subject's
/// identity; the config's mode and target choose dodging or impersonation.
pub fn phase_shifting_attack(
    ctx: &ShiftingContext,
    model: &ModelParams,
    true_label: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let rig = ctx.rig;
    let label = config.loss_label(true_label)?;
    let classifier = Classifier::new(model, &rig.camera, rig.camera_width, rig.camera_height, config.cloud_points)?;
    let clean = Clean::new(ctx, config)?;
    let clean_cloud = clean.cloud();
    let eval_seed = derive_seed(config.seed, 10, 0);
    let frozen = {
        let idx = classifier.subset(&clean.points, eval_seed)?;
        let subset: Vec<Point> = idx.iter().map(|&i| clean.points[i]).collect();
        let norm = Normalization::fit(&subset)?;
        (idx, norm)
    };

    let clean_logits = classifier.classify_cloud(&clean_cloud, eval_seed, None)?;
    let clean_margin = logit_gap(&clean_logits, label, config.mode);
    if clean_margin <= -config.margin {
        return Ok(AttackResult {
            artifact: Artifact::Patterns(ctx.patterns.clone()),
            adversarial_cloud: clean_cloud.clone(),
            clean_cloud: clean_cloud.clone(),
            success: true,
            surrogate_success: true,
            logits: clean_logits,
            margin: clean_margin,
            rmse: rmse_aligned(&clean_cloud, &clean_cloud)?,
            l1: 0.0,
            lambda: None,
            search: Vec::new(),
            trace: Vec::new(),
            iterations: 0,
        });
    }

    let mut fallback: Option<Outcome> = None;
    let mut branch_index = 0u64;
    let mut iterations = 0;
    let search = lambda_search(config.lambda_bounds, config.search_steps, |lambda| {
        let (best, last) = optimize(lambda, branch_index, &clean, ctx, &classifier, config, label, &frozen)?;
        branch_index += 1;
        iterations += last.trace.len();
        if fallback.as_ref().is_none_or(|f| last.score.better_than(&f.score)) {
            fallback = Some(last);
        }
        let Some((mut outcome, _)) = best else {
            return Ok(Branch { success: false, distance: f64::INFINITY, value: None });
        };
        fold_full_periods(&mut outcome.nu, &clean, rig);
        let v = verify(&outcome.nu, &clean, ctx, &classifier, config, label)?;
        let realized = realize(&outcome.nu, &clean, rig, config)?;
        Ok(Branch { success: v.success, distance: realized.distance, value: Some((outcome, v)) })
    });

    let (outcome, verified, lambda, steps) = match search {
        Ok((Some((o, v)), lambda, steps)) => (o, v, Some(lambda), steps),
        Ok((None, _, _)) => unreachable!("successful branches carry a value"),
        Err(Error::AllStepsFailed) => {
            let mut o = fallback.expect("at least one branch ran");
            fold_full_periods(&mut o.nu, &clean, rig);
            let v = verify(&o.nu, &clean, ctx, &classifier, config, label)?;
            (o, v, None, Vec::new())
        }
        Err(e) => return Err(e),
    };
    let mut trace = outcome.trace;
    trace.push(TraceRow {
        stage: "resim".into(),
        iteration: trace.len(),
        lambda: lambda.unwrap_or(f64::NAN),
        adversarial_loss: verified.margin,
        distance: verified.l1,
        total: f64::NAN,
        margin: verified.margin,
    });
    Ok(AttackResult {
        artifact: Artifact::Patterns(verified.patterns),
        rmse: rmse_aligned(&verified.cloud, &clean_cloud)?,
        adversarial_cloud: verified.cloud,
        clean_cloud,
        success: verified.success,
        surrogate_success: outcome.surrogate_success,
        logits: verified.logits,
        margin: verified.margin,
        l1: verified.l1,
        lambda,
        search: steps,
        trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photometric::{synth_face, FaceParams};
    use crate::scan::{scan, RigSpec};

    #[test]
    fn realization_matches_rescan() {
        let rig = RigSpec::desk().build().unwrap();
        let scene = synth_face(6, &FaceParams::default(), &rig.camera).unwrap();
        let patterns = rig.patterns();
        let settings = RenderSettings::default();
        let clean_scan = scan(&rig, &scene, &patterns, None, &settings).unwrap();
        let basis = rig.basis(&scene);
        let ctx = ShiftingContext { rig: &rig, basis: &basis, patterns: &patterns, settings: &settings, clean: &clean_scan };
        let config = AttackConfig::default();
        let clean = Clean::new(&ctx, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = 1.0 / rig.fringe_count as f64;
        let mut nu: Vec<f64> = clean
            .nu0
            .iter()
            .map(|&v| clip_normalized(v + rng.gen_range(-p..p), v, rig.fringe_count))
            .collect();
        fold_full_periods(&mut nu, &clean, &rig);
        let realized = realize(&nu, &clean, &rig, &config).unwrap();
        let full = TAU * rig.fringe_count as f64;
        let mut adv = clean_scan.absolute().clone();
        for (k, &i) in clean.index.iter().enumerate() {
            adv.values[i] = nu[k] * full;
        }
        let (set, report) = encode_adversarial_patterns(&adv, &patterns, &clean.correspondence).unwrap();
        assert!(report.max_abs_shift < (rig.projector_width / rig.fringe_count) as i64);
        let rescan = scan_with_basis(&basis, &set, None, &settings).unwrap();
        let rec = reconstruct_cloud(rescan.absolute(), &rig.camera, &rig.projector, rig.projector_width).unwrap();
        let lookup: std::collections::HashMap<[u32; 2], Point> =
            rec.cloud.pixels.unwrap().into_iter().zip(rec.cloud.points).collect();
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        for (px, p) in realized.cloud.pixels.unwrap().iter().zip(&realized.cloud.points) {
            if let Some(q) = lookup.get(px) {
                worst = worst.max((p - q).norm());
                compared += 1;
            }
        }
        assert!(compared as f64 > 0.95 * clean.index.len() as f64);
        // Only conflicting footprints and bilinear sampling separate the model from the rescan.
        assert!(worst < 1.0, "worst {worst}");
    }

    #[test]
    fn realize_phase_examples() {
        let (w, n) = (512, 16);
        // No shift returns the clean unwrapped phase.
        let w0 = 1.0;
        let k = 6u32;
        let clean = unwrap_pixel(w0, k, n).unwrap();
        let col0 = (clean / (TAU * n as f64) * w as f64).round() as i64;
        assert_eq!(realize_phase(clean / (TAU * n as f64), w0, k, col0, w, n), Some(clean));
        // A 4-column shift adds 4 columns worth of phase.
        let nu = (col0 + 4) as f64 / w as f64;
        let r = realize_phase(nu, w0, k, col0, w, n).unwrap();
        assert!((r - clean - TAU * n as f64 * 4.0 / w as f64).abs() < 1e-12);
        // A whole period is a no-op.
        let nu = (col0 + 32) as f64 / w as f64;
        assert_eq!(realize_phase(nu, w0, k, col0, w, n), Some(clean));
    }
}
