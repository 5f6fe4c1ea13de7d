//! Browser bindings for the desk rig: fringe pattern previews, a full scan of
//! a synthetic face, and gamma fitting. Build with
//! `wasm-pack build crates/wasm --target web --out-dir www/pkg`.

use fringeforge::fringe::Pattern;
use fringeforge::io::encode_ply;
use fringeforge::photometric::{fit_gamma, synth_face, FaceParams, RenderSettings};
use fringeforge::reconstruct::reconstruct_cloud;
use fringeforge::scan::{scan, Rig, RigSpec};
use wasm_bindgen::prelude::*;

/// An 8-bit RGBA image ready for `ImageData`.
#[wasm_bindgen]
pub struct Preview {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Preview {
    /// Gray levels in [0, 1]; `None` pixels are drawn transparent.
    fn from_levels(width: usize, height: usize, levels: impl Iterator<Item = Option<f64>>) -> Self {
        let mut rgba = Vec::with_capacity(width * height * 4);
        for level in levels {
            match level {
                Some(v) => {
                    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    rgba.extend_from_slice(&[g, g, g, 255]);
                }
                None => rgba.extend_from_slice(&[0, 0, 0, 0]),
            }
        }
        Self { width, height, rgba }
    }
}

/// Result of scanning one synthetic face.
#[wasm_bindgen]
pub struct FaceScan {
    depth: Preview,
    points: usize,
    max_error_mm: f64,
    ply: String,
}

#[wasm_bindgen]
impl FaceScan {
    /// Reconstructed depth, nearer is brighter.
    #[wasm_bindgen(getter)]
    pub fn depth(&self) -> Preview {
        Preview { width: self.depth.width, height: self.depth.height, rgba: self.depth.rgba.clone() }
    }

    #[wasm_bindgen(getter)]
    pub fn points(&self) -> usize {
        self.points
    }

    /// Largest distance between a reconstructed point and the true surface.
    #[wasm_bindgen(getter, js_name = maxErrorMm)]
    pub fn max_error_mm(&self) -> f64 {
        self.max_error_mm
    }

    #[wasm_bindgen(getter)]
    pub fn ply(&self) -> String {
        self.ply.clone()
    }
}

fn desk() -> Result<Rig, String> {
    RigSpec::desk().build().map_err(|e| e.to_string())
}

pub fn pattern_preview_impl(kind: &str, index: usize) -> Result<Preview, String> {
    let rig = desk()?;
    let set = rig.patterns();
    let pattern: Pattern = match kind {
        "shift" => set.shift_patterns.get(index).cloned(),
        "gray" => set.gray_patterns.get(index).cloned(),
        _ => return Err(format!("unknown pattern kind `{kind}`")),
    }
    .ok_or_else(|| format!("no {kind} pattern {index}"))?;
    let (w, h) = (pattern.width(), pattern.height());
    Ok(Preview::from_levels(w, h, (0..w * h).map(|i| Some(pattern.value(i % w, i / w)))))
}

pub fn scan_face_impl(seed: u32, expression: u32) -> Result<FaceScan, String> {
    let rig = desk()?;
    let params = FaceParams { expression: expression as u64, ..FaceParams::default() };
    let scene = synth_face(seed as u64, &params, &rig.camera).map_err(|e| e.to_string())?;
    let result = scan(&rig, &scene, &rig.patterns(), None, &RenderSettings::default()).map_err(|e| e.to_string())?;
    let rec = reconstruct_cloud(result.absolute(), &rig.camera, &rig.projector, rig.projector_width)
        .map_err(|e| e.to_string())?;
    let (w, h) = (rig.camera_width, rig.camera_height);
    let mut depth = vec![None; w * h];
    let mut max_error_mm: f64 = 0.0;
    for (p, &i) in rec.cloud.points.iter().zip(&rec.pixel_index) {
        depth[i] = Some(p.z);
        max_error_mm = max_error_mm.max((p - scene.points[i]).norm());
    }
    let (lo, hi) = depth.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
    let span = (hi - lo).max(1e-9);
    let levels = depth.into_iter().map(|z| z.map(|z| 0.2 + 0.8 * (hi - z) / span));
    Ok(FaceScan {
        depth: Preview::from_levels(w, h, levels),
        points: rec.cloud.len(),
        max_error_mm,
        ply: encode_ply(&rec.cloud),
    })
}

pub fn fit_gamma_impl(inputs: &[f64], outputs: &[f64]) -> Result<f64, String> {
    if inputs.len() != outputs.len() {
        return Err(format!("{} inputs but {} outputs", inputs.len(), outputs.len()));
    }
    let samples: Vec<(f64, f64)> = inputs.iter().copied().zip(outputs.iter().copied()).collect();
    fit_gamma(&samples).map(|f| f.model.gamma).map_err(|e| e.to_string())
}

/// A desk-rig projector pattern: `kind` is "shift" or "gray".
#[wasm_bindgen(js_name = patternPreview)]
pub fn pattern_preview(kind: &str, index: usize) -> Result<Preview, JsError> {
    pattern_preview_impl(kind, index).map_err(|e| JsError::new(&e))
}

/// Scans a synthetic face with the desk rig and reconstructs it.
#[wasm_bindgen(js_name = scanFace)]
pub fn scan_face(seed: u32, expression: u32) -> Result<FaceScan, JsError> {
    scan_face_impl(seed, expression).map_err(|e| JsError::new(&e))
}

/// Least-squares gamma of a projector response sweep.
#[wasm_bindgen(js_name = fitGamma)]
pub fn fit_gamma_js(inputs: &[f64], outputs: &[f64]) -> Result<f64, JsError> {
    fit_gamma_impl(inputs, outputs).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_pattern_preview_is_opaque() {
        let p = pattern_preview_impl("shift", 3).unwrap();
        assert_eq!((p.width, p.height), (512, 192));
        assert_eq!(p.rgba.len(), 512 * 192 * 4);
        assert!(p.rgba.chunks(4).all(|px| px[3] == 255 && px[0] == px[1]));
        assert!(pattern_preview_impl("shift", 99).is_err());
        assert!(pattern_preview_impl("checker", 0).is_err());
    }

    #[test]
    fn gamma_round_trip() {
        let inputs: Vec<f64> = (0..=16).map(|k| k as f64 / 16.0).collect();
        let truth = fringeforge::photometric::GammaModel::new(2.2).unwrap();
        let outputs: Vec<f64> = inputs.iter().map(|&u| truth.apply(u)).collect();
        assert!((fit_gamma_impl(&inputs, &outputs).unwrap() - 2.2).abs() < 1e-6);
        assert!(fit_gamma_impl(&inputs, &outputs[1..]).is_err());
    }
}
