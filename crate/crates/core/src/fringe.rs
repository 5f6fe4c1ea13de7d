//! Phase-shift and gray-code projector patterns, demodulation, unwrapping,
//! and re-encoding of adversarial phase maps into patterns.
//!
//! Shift pattern `n` at projector column `u` is
//! `0.5 + 0.5 cos(2 pi (u mod P) / P + 2 pi n / N)` with period `P = w / n_s`.
//! Demodulation uses `atan2(-sum I sin, sum I cos)` so that the recovered
//! phase increases with the projector column.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Image, Mask};

/// Pixels whose fringe modulation falls below this are masked.
pub const DEFAULT_MODULATION_THRESHOLD: f64 = 0.01;

/// A projector image stored as one column profile plus sparse per-pixel overrides.
///
/// Fringe and gray-code patterns are constant along projector rows, so the
/// profile holds the full pattern until an adversarial encoding writes
/// individual pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    width: usize,
    height: usize,
    profile: Vec<f64>,
    overrides: BTreeMap<usize, f64>,
}

impl Pattern {
    pub fn from_profile(profile: Vec<f64>, height: usize) -> Self {
        Self {
            width: profile.len(),
            height,
            profile,
            overrides: BTreeMap::new(),
        }
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        Self::from_profile(vec![value; width], height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn overrides(&self) -> &BTreeMap<usize, f64> {
        &self.overrides
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let idx = y * self.width + x;
        if value == self.profile[x] {
            self.overrides.remove(&idx);
        } else {
            self.overrides.insert(idx, value);
        }
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        if self.overrides.is_empty() {
            return self.profile[x];
        }
        match self.overrides.get(&(y * self.width + x)) {
            Some(&v) => v,
            None => self.profile[x],
        }
    }

    /// Bilinear sample at real projector coordinates; `None` outside the image.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.value(x0, y0) * (1.0 - fx) + self.value(x1, y0) * fx;
        let bottom = self.value(x0, y1) * (1.0 - fx) + self.value(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Dense image of the pattern.
    pub fn to_image(&self) -> Image {
        Grid::from_fn(self.width, self.height, |x, y| self.value(x, y))
    }

    /// Number of projector columns containing at least one pixel that differs from `other`.
    pub fn changed_columns(&self, other: &Pattern) -> usize {
        let mut cols = std::collections::BTreeSet::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.value(x, y) != other.value(x, y) {
                    cols.insert(x);
                }
            }
        }
        cols.len()
    }
}

/// The patterns a scanner projector emits.
#[derive(Clone, Debug, PartialEq)]
pub struct FringePatternSet {
    pub steps: usize,
    pub fringe_count: usize,
    pub width: usize,
    pub height: usize,
    pub shift_patterns: Vec<Pattern>,
    pub gray_patterns: Vec<Pattern>,
}

/// Number of gray-code patterns for `n_s` fringes: `ceil(log2 n_s) + 1`.
pub fn gray_pattern_count(fringe_count: usize) -> usize {
    let mut bits = 0;
    while (1usize << bits) < fringe_count {
        bits += 1;
    }
    bits + 1
}

#[inline]
pub fn gray_encode(v: u32) -> u32 {
    v ^ (v >> 1)
}

#[inline]
pub fn gray_decode(mut g: u32) -> u32 {
    let mut v = 0;
    while g != 0 {
        v ^= g;
        g >>= 1;
    }
    v
}

/// Half-period index `floor(2 u n_s / w)` of projector column `u`.
#[inline]
pub fn half_period_index(u: usize, fringe_count: usize, width: usize) -> u32 {
    ((2 * u * fringe_count) / width) as u32
}

/// Shift value at column `u` for step `n`.
pub fn canonical_value(u: usize, n: usize, steps: usize, fringe_count: usize, width: usize) -> f64 {
    let period = width / fringe_count;
    let theta = TAU * (u % period) as f64 / period as f64;
    0.5 + 0.5 * (theta + TAU * n as f64 / steps as f64).cos()
}

/// Builds the canonical phase-shift and gray-code pattern set.
pub fn generate_patterns(
    steps: usize,
    fringe_count: usize,
    width: usize,
    height: usize,
) -> Result<FringePatternSet> {
    if steps < 3 {
        return Err(Error::InvalidConfig(format!("phase steps must be >= 3, got {steps}")));
    }
    if fringe_count == 0 {
        return Err(Error::InvalidConfig("fringe count must be >= 1".into()));
    }
    if width == 0 || height == 0 || width % fringe_count != 0 {
        return Err(Error::InvalidConfig(format!(
            "pattern width {width} must be a positive multiple of the fringe count {fringe_count}"
        )));
    }
    let shift_patterns = (0..steps)
        .map(|n| {
            let profile = (0..width)
                .map(|u| canonical_value(u, n, steps, fringe_count, width))
                .collect();
            Pattern::from_profile(profile, height)
        })
        .collect();
    let bits = gray_pattern_count(fringe_count);
    let gray_patterns = (0..bits)
        .map(|b| {
            let shift = bits - 1 - b;
            let profile = (0..width)
                .map(|u| {
                    let g = gray_encode(half_period_index(u, fringe_count, width));
                    ((g >> shift) & 1) as f64
                })
                .collect();
            Pattern::from_profile(profile, height)
        })
        .collect();
    Ok(FringePatternSet {
        steps,
        fringe_count,
        width,
        height,
        shift_patterns,
        gray_patterns,
    })
}

impl FringePatternSet {
    pub fn period(&self) -> usize {
        self.width / self.fringe_count
    }

    pub fn white(&self) -> Pattern {
        Pattern::uniform(self.width, self.height, 1.0)
    }

    pub fn black(&self) -> Pattern {
        Pattern::uniform(self.width, self.height, 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Wrapped,
    Absolute,
}

/// Per-pixel phase over the camera grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMap {
    pub kind: PhaseKind,
    pub fringe_count: usize,
    pub values: Image,
    pub mask: Mask,
    pub modulation: Image,
}

impl PhaseMap {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m).count()
    }

    /// Linear indices of valid pixels in raster order.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Wraps an angle into `(-pi, pi]`.
#[inline]
pub fn wrap(phi: f64) -> f64 {
    let r = phi - TAU * ((phi + PI) / TAU).floor();
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Per-pixel demodulation result with its intensity gradient.
#[derive(Clone, Copy, Debug)]
pub struct PixelPhase {
    pub phase: f64,
    pub modulation: f64,
    pub sin_sum: f64,
    pub cos_sum: f64,
}

pub fn demodulate_pixel(intensities: &[f64]) -> PixelPhase {
    let n = intensities.len() as f64;
    let (mut s, mut c) = (0.0, 0.0);
    for (k, &i) in intensities.iter().enumerate() {
        let (sd, cd) = (TAU * k as f64 / n).sin_cos();
        s += i * sd;
        c += i * cd;
    }
    let mut phase = (-s).atan2(c);
    if phase <= -PI {
        phase = PI;
    }
    PixelPhase {
        phase,
        modulation: 2.0 / n * s.hypot(c),
        sin_sum: s,
        cos_sum: c,
    }
}

/// d(phase)/d(I_n) for every step at one pixel.
pub fn demodulate_pixel_gradient(p: &PixelPhase, steps: usize) -> Vec<f64> {
    let denom = p.sin_sum * p.sin_sum + p.cos_sum * p.cos_sum;
    (0..steps)
        .map(|k| {
            let (sd, cd) = (TAU * k as f64 / steps as f64).sin_cos();
            (p.sin_sum * cd - p.cos_sum * sd) / denom
        })
        .collect()
}

/// Wrapped phase from `N >= 3` phase-shifted captures.
pub fn wrapped_phase(captures: &[Image], fringe_count: usize, threshold: f64) -> Result<PhaseMap> {
    if captures.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 phase-shifted captures, got {}",
            captures.len()
        )));
    }
    for c in &captures[1..] {
        captures[0].ensure_same_shape(c, "phase-shift captures")?;
    }
    let (w, h) = (captures[0].width(), captures[0].height());
    let mut values = Grid::filled(w, h, 0.0);
    let mut mask = Grid::filled(w, h, false);
    let mut modulation = Grid::filled(w, h, 0.0);
    let mut buf = vec![0.0; captures.len()];
    for i in 0..w * h {
        for (b, c) in buf.iter_mut().zip(captures) {
            *b = c[i];
        }
        let p = demodulate_pixel(&buf);
        modulation[i] = p.modulation;
        if p.modulation >= threshold && p.modulation.is_finite() {
            values[i] = p.phase;
            mask[i] = true;
        } else {
            values[i] = f64::NAN;
        }
    }
    Ok(PhaseMap {
        kind: PhaseKind::Wrapped,
        fringe_count,
        values,
        mask,
        modulation,
    })
}

/// Thresholds gray-code captures against the mean of white and black reference captures.
pub fn binarize(captures: &[Image], white: &Image, black: &Image) -> Result<Vec<Mask>> {
    white.ensure_same_shape(black, "reference captures")?;
    captures
        .iter()
        .map(|c| {
            c.ensure_same_shape(white, "gray capture")?;
            Ok(Grid::from_vec(
                c.width(),
                c.height(),
                c.as_slice()
                    .iter()
                    .zip(white.as_slice().iter().zip(black.as_slice()))
                    .map(|(&v, (&wv, &bv))| v > 0.5 * (wv + bv))
                    .collect(),
            )?)
        })
        .collect()
}

/// Decodes the half-period index per pixel from binarized gray captures (MSB first).
pub fn decode_gray(bits: &[Mask]) -> Result<Grid<u32>> {
    let first = bits
        .first()
        .ok_or_else(|| Error::InvalidConfig("no gray-code captures".into()))?;
    for b in &bits[1..] {
        first.ensure_same_shape(b, "gray captures")?;
    }
    let mut out = Grid::filled(first.width(), first.height(), 0u32);
    for i in 0..first.len() {
        let mut g = 0u32;
        for b in bits {
            g = (g << 1) | b[i] as u32;
        }
        out[i] = gray_decode(g);
    }
    Ok(out)
}

/// Absolute phase of one pixel from its wrapped phase and decoded half-period index.
///
/// Near a period boundary (`|phi_w| <= pi/2`) the order comes from the
/// half-period-shifted code; elsewhere from the plain order. Returns `None`
/// when the result leaves `[0, 2 pi n_s)`.
#[inline]
pub fn unwrap_pixel(wrapped: f64, half_period: u32, fringe_count: usize) -> Option<f64> {
    let k = (half_period >> 1) as f64;
    let k2 = ((half_period + 1) >> 1) as f64;
    let abs = if wrapped.abs() <= PI / 2.0 {
        wrapped + TAU * k2
    } else if wrapped > 0.0 {
        wrapped + TAU * k
    } else {
        wrapped + TAU * (k + 1.0)
    };
    let top = TAU * fringe_count as f64;
    // Exact fringe edges can demodulate a hair below zero.
    let abs = if (-1e-9..0.0).contains(&abs) { 0.0 } else { abs };
    (abs >= 0.0 && abs < top).then_some(abs)
}

/// Absolute phase map plus the number of pixels rejected by the decoder.
#[derive(Clone, Debug)]
pub struct Unwrapped {
    pub phase: PhaseMap,
    pub half_periods: Grid<u32>,
    pub decode_failures: usize,
}

impl Unwrapped {
    /// Integer fringe order `floor(phi_a / 2 pi)` per pixel (0 where masked).
    pub fn fringe_order(&self) -> Grid<u32> {
        let values = &self.phase.values;
        let mask = &self.phase.mask;
        Grid::from_fn(values.width(), values.height(), |u, v| {
            let i = values.index(u, v);
            if mask[i] {
                (values[i] / TAU + 1e-9).floor() as u32
            } else {
                0
            }
        })
    }
}

pub fn unwrap_phase(wrapped: &PhaseMap, gray_bits: &[Mask]) -> Result<Unwrapped> {
    if wrapped.kind != PhaseKind::Wrapped {
        return Err(Error::InvalidConfig("unwrap_phase expects a wrapped phase map".into()));
    }
    let half_periods = decode_gray(gray_bits)?;
    wrapped.values.ensure_same_shape(&half_periods, "wrapped phase vs gray captures")?;
    let mut values = wrapped.values.clone();
    let mut mask = wrapped.mask.clone();
    let mut failures = 0;
    for i in 0..values.len() {
        if !mask[i] {
            continue;
        }
        match unwrap_pixel(values[i], half_periods[i], wrapped.fringe_count) {
            Some(a) => values[i] = a,
            None => {
                values[i] = f64::NAN;
                mask[i] = false;
                failures += 1;
            }
        }
    }
    Ok(Unwrapped {
        phase: PhaseMap {
            kind: PhaseKind::Absolute,
            fringe_count: wrapped.fringe_count,
            values,
            mask,
            modulation: wrapped.modulation.clone(),
        },
        half_periods,
        decode_failures: failures,
    })
}

/// Projector column `w phi / (2 pi n_s)` clamped to `[0, w)`, and its rounding clamped to `[0, w-1]`.
#[inline]
pub fn phase_to_column(phase: f64, width: usize, fringe_count: usize) -> (f64, i64) {
    let w = width as f64;
    let raw = w * phase / (TAU * fringe_count as f64);
    let below_w = f64::from_bits(w.to_bits() - 1);
    let real = if raw.is_nan() { 0.0 } else { raw.clamp(0.0, below_w) };
    let rounded = (real.round() as i64).clamp(0, width as i64 - 1);
    (real, rounded)
}

/// Derivative of the real column with respect to phase (zero where clamped).
#[inline]
pub fn column_per_radian(phase: f64, width: usize, fringe_count: usize) -> f64 {
    let raw = width as f64 * phase / (TAU * fringe_count as f64);
    if raw >= 0.0 && raw < width as f64 {
        width as f64 / (TAU * fringe_count as f64)
    } else {
        0.0
    }
}

/// The projector location a camera pixel observed in the clean scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Real projector column decoded from the clean phase.
    pub column: f64,
    /// Projector pixel coordinates of the surface point (for the write footprint).
    pub u_p: f64,
    pub v_p: f64,
}

/// Summary of an adversarial re-encoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeReport {
    /// Projector pixels written by more than one camera pixel with different shifts.
    pub conflicts: usize,
    pub max_abs_shift: i64,
    /// Per camera pixel (raster index) column shift `u_p' - u_p`.
    pub shifts: BTreeMap<usize, i64>,
    pub written_pixels: usize,
}

/// Re-indexes shift patterns so each camera pixel observes the phase in `adversarial`.
///
/// Every projector pixel in the bilinear footprint of a camera pixel's surface
/// point receives the base value of the column shifted by
/// `round(w phi'/(2 pi n_s)) - round(u_p)`. Writes happen in camera raster
/// order and the last writer wins.
pub fn encode_adversarial_patterns(
    adversarial: &PhaseMap,
    base: &FringePatternSet,
    correspondence: &Grid<Option<Correspondence>>,
) -> Result<(FringePatternSet, EncodeReport)> {
    if adversarial.kind != PhaseKind::Absolute {
        return Err(Error::InvalidConfig("adversarial phase must be absolute".into()));
    }
    adversarial.values.ensure_same_shape(correspondence, "phase vs correspondence")?;
    let period = base.period() as i64;
    let mut report = EncodeReport::default();
    let mut writes: HashMap<usize, i64> = HashMap::new();
    for i in 0..correspondence.len() {
        let Some(c) = correspondence[i] else { continue };
        if !adversarial.mask[i] {
            continue;
        }
        let (_, target) = phase_to_column(adversarial.values[i], base.width, base.fringe_count);
        let shift = target - c.column.round() as i64;
        if shift.abs() > period {
            let (u, v) = adversarial.values.coords(i);
            return Err(Error::FringeOrderChange { u, v, shift });
        }
        report.max_abs_shift = report.max_abs_shift.max(shift.abs());
        report.shifts.insert(i, shift);
        for (x, y) in footprint(c.u_p, c.v_p, base.width, base.height) {
            let idx = y * base.width + x;
            if let Some(prev) = writes.insert(idx, shift) {
                if prev != shift {
                    report.conflicts += 1;
                }
            }
        }
    }
    let mut out = base.clone();
    let w = base.width as i64;
    for (&idx, &shift) in &writes {
        if shift == 0 {
            continue;
        }
        let (x, y) = (idx % base.width, idx / base.width);
        let src = (x as i64 + shift).rem_euclid(w) as usize;
        for (p, b) in out.shift_patterns.iter_mut().zip(&base.shift_patterns) {
            p.set(x, y, b.profile()[src]);
        }
        report.written_pixels += 1;
    }
    Ok((out, report))
}

/// Projector pixels with nonzero bilinear weight at `(u, v)`.
fn footprint(u: f64, v: f64, width: usize, height: usize) -> Vec<(usize, usize)> {
    if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
        return Vec::new();
    }
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let xs: &[usize] = if u > x0 as f64 && x0 + 1 < width { &[0, 1] } else { &[0] };
    let ys: &[usize] = if v > y0 as f64 && y0 + 1 < height { &[0, 1] } else { &[0] };
    let mut out = Vec::with_capacity(4);
    for &dy in ys {
        for &dx in xs {
            out.push((x0 + dx, y0 + dy));
        }
    }
    out
}
