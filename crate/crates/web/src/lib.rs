//! Browser bindings for three pieces of the flowspect pipeline: the
//! shrink-and-pad product mask, TPR-targeted threshold selection on an ROC
//! curve, and the photometric jitter used during training and scoring.
//!
//! Every binding is a thin wrapper over a plain Rust function so the logic is
//! testable natively.

use flowspect::dataset::{render_background, render_product_frame, Blotch, CorpusSpec, Label, ProductShape};
use flowspect::eval::{auroc, roc_points, select_threshold, ScoredItem};
use flowspect::features::{photometric, PhotometricFactors};
use flowspect::image::Image;
use flowspect::mask::{per_frame_mask, shrink_and_pad};
use flowspect::roi::{detect_blob_roi, realign_crop};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Values in `[0, 1]`, gray or RGB, to packed RGBA bytes.
fn to_rgba(img: &Image) -> Vec<u8> {
    let rgb = img.to_rgb();
    let mut out = Vec::with_capacity(rgb.width() * rgb.height() * 4);
    for px in rgb.data().chunks_exact(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct MaskView {
    side: usize,
    rgba: Vec<u8>,
    foreground: usize,
    kept: usize,
    defect_visible: bool,
}

#[wasm_bindgen]
impl MaskView {
    /// Side of the square crop in pixels.
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Product pixels before shrinking.
    #[wasm_bindgen(getter)]
    pub fn foreground(&self) -> usize {
        self.foreground
    }

    /// Mask pixels after shrink-and-pad.
    #[wasm_bindgen(getter)]
    pub fn kept(&self) -> usize {
        self.kept
    }

    /// Whether any blotch pixel survives the mask.
    #[wasm_bindgen(getter)]
    pub fn defect_visible(&self) -> bool {
        self.defect_visible
    }
}

/// Renders a cone-shaped product with a blotch at `(dx, dy)` from its centre,
/// crops it square, and masks the crop with the composite silhouette shrunk
/// by `shrink`. Removed pixels are tinted blue so the loss is visible.
pub fn mask_view(top_width: usize, shrink: f64, dx: f64, dy: f64) -> Result<MaskView, String> {
    let base = CorpusSpec::default().scene;
    let mut scene = base;
    if let ProductShape::Trapezoid {
        bottom_width, height, ..
    } = base.shape
    {
        scene.shape = ProductShape::Trapezoid {
            top_width: top_width.clamp(1, bottom_width),
            bottom_width,
            height,
        };
    }
    let (pw, _) = scene.extent();
    let left = (scene.width - pw) as i64 / 2;
    let reference = render_background(&scene, 1).map_err(|e| e.to_string())?;
    let (clean, _) = render_product_frame(&scene, left, 2).map_err(|e| e.to_string())?;
    let defective = flowspect::dataset::SyntheticSceneSpec {
        defect: Some(Blotch {
            dx,
            dy,
            radius: 5.0,
            contrast: 0.22,
        }),
        ..scene
    };
    let (frame, _) = render_product_frame(&defective, left, 2).map_err(|e| e.to_string())?;

    let bbox = detect_blob_roi(&clean, &reference, 0.1, 50)
        .map_err(|e| e.to_string())?
        .ok_or("no product found")?;
    let crop = |img: &Image| {
        realign_crop(img, &bbox, 0.1, 0)
            .map(|c| c.image)
            .map_err(|e| e.to_string())
    };
    let (ref_crop, clean_crop, frame_crop) = (crop(&reference)?, crop(&clean)?, crop(&frame)?);

    let silhouette = per_frame_mask(&clean_crop, &ref_crop, 0.1).map_err(|e| e.to_string())?;
    let mask = shrink_and_pad(&silhouette, shrink).map_err(|e| e.to_string())?;
    let blotch = per_frame_mask(&frame_crop, &clean_crop, 0.1).map_err(|e| e.to_string())?;

    let side = frame_crop.width();
    let mut shown = frame_crop.to_rgb();
    for y in 0..side {
        for x in 0..side {
            if !mask.get(x, y) {
                let v = frame_crop.get(x, y, 0);
                shown.set(x, y, 0, 0.3 * v);
                shown.set(x, y, 1, 0.3 * v);
                shown.set(x, y, 2, 0.4 + 0.3 * v);
            }
        }
    }
    let defect_visible = (0..side).any(|y| (0..side).any(|x| blotch.get(x, y) && mask.get(x, y)));
    Ok(MaskView {
        side,
        rgba: to_rgba(&shown),
        foreground: silhouette.area(),
        kept: mask.area(),
        defect_visible,
    })
}

#[wasm_bindgen(js_name = maskView)]
pub fn mask_view_js(top_width: usize, shrink: f64, dx: f64, dy: f64) -> Result<MaskView, JsError> {
    mask_view(top_width, shrink, dx, dy).map_err(|e| JsError::new(&e))
}

#[derive(Debug, Serialize)]
pub struct RocSummary {
    pub auroc: f64,
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// `(fpr, tpr)` vertices from the strictest threshold down.
    pub roc: Vec<(f64, f64)>,
    pub good: Vec<f64>,
    pub defective: Vec<f64>,
}

/// Normal-ish scores (sum of three uniforms) for good items around 0 and
/// defective items around `separation`, then the ROC and the threshold with
/// the smallest FPR among those reaching `target_tpr`.
pub fn roc_summary(
    separation: f64,
    n_good: usize,
    n_defective: usize,
    target_tpr: f64,
    seed: u64,
) -> Result<RocSummary, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shift: f64| shift + (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>();
    let good: Vec<f64> = (0..n_good).map(|_| draw(0.0)).collect();
    let defective: Vec<f64> = (0..n_defective).map(|_| draw(separation)).collect();
    let items: Vec<ScoredItem> = good
        .iter()
        .map(|&s| (s, Label::Good))
        .chain(defective.iter().map(|&s| (s, Label::Defective)))
        .enumerate()
        .map(|(i, (s, l))| ScoredItem::new(i.to_string(), 0, s, l))
        .collect();
    let t = select_threshold(&items, target_tpr).map_err(|e| e.to_string())?;
    Ok(RocSummary {
        auroc: auroc(&items).map_err(|e| e.to_string())?,
        threshold: t.value,
        tpr: t.tpr,
        fpr: t.fpr,
        roc: roc_points(&items)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|p| (p.fpr, p.tpr))
            .collect(),
        good,
        defective,
    })
}

/// JSON form of [`roc_summary`].
#[wasm_bindgen(js_name = rocSummary)]
pub fn roc_summary_js(
    separation: f64,
    n_good: usize,
    n_defective: usize,
    target_tpr: f64,
    seed: u64,
) -> Result<String, JsError> {
    let s = roc_summary(separation, n_good, n_defective, target_tpr, seed).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&s).map_err(|e| JsError::new(&e.to_string()))
}

pub const PREVIEW_SIDE: usize = 128;

/// Colour test card: hue sweep across, value ramp down, a gray disk in the middle.
fn test_card() -> Image {
    let n = PREVIEW_SIDE;
    let mut img = Image::new(n, n, 3);
    for y in 0..n {
        for x in 0..n {
            let h = x as f64 / n as f64 * 6.0;
            let v = 0.25 + 0.6 * (1.0 - y as f64 / n as f64);
            // HSV to RGB at saturation 0.7
            let f = |k: f64| {
                let t = (k + h) % 6.0;
                v - v * 0.7 * t.min(4.0 - t).clamp(0.0, 1.0)
            };
            let (dx, dy) = (x as f64 - n as f64 / 2.0, y as f64 - n as f64 / 2.0);
            let rgb = if dx * dx + dy * dy < (n as f64 / 5.0).powi(2) {
                [0.5, 0.5, 0.5]
            } else {
                [f(5.0), f(3.0), f(1.0)]
            };
            for (c, v) in rgb.into_iter().enumerate() {
                img.set(x, y, c, v);
            }
        }
    }
    img
}

/// RGBA of the test card after brightness, contrast and saturation factors.
pub fn photometric_preview(brightness: f64, contrast: f64, saturation: f64) -> Vec<u8> {
    let factors = PhotometricFactors {
        brightness,
        contrast,
        saturation,
    };
    to_rgba(&photometric(&test_card(), &factors))
}

#[wasm_bindgen(js_name = photometricPreview)]
pub fn photometric_preview_js(brightness: f64, contrast: f64, saturation: f64) -> Vec<u8> {
    photometric_preview(brightness, contrast, saturation)
}

#[wasm_bindgen(js_name = previewSide)]
pub fn preview_side() -> usize {
    PREVIEW_SIDE
}
