//! Product localisation: background-difference blob detection, square
//! re-centred crops, and JSON-lines import of externally produced boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn centre(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        let inter = if x1 > x0 && y1 > y0 { (x1 - x0) * (y1 - y0) } else { 0 };
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

/// Square window cut around a detected product.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: Image,
    pub frame_index: u64,
    pub source: BoundingBox,
    /// Frame coordinates of the crop's top-left corner (may be negative
    /// when the window was padded).
    pub origin: (i64, i64),
}

impl Crop {
    /// Wraps a raster that did not come from a frame window.
    pub fn from_image(image: Image) -> Self {
        let source = BoundingBox {
            x: 0,
            y: 0,
            w: image.width(),
            h: image.height(),
            confidence: 1.0,
        };
        Self {
            image,
            frame_index: 0,
            source,
            origin: (0, 0),
        }
    }

    pub fn with_image(&self, image: Image) -> Self {
        Self { image, ..self.clone() }
    }
}

/// Largest 4-connected component of `|frame − reference| >= threshold`
/// with at least `min_area` pixels, as a tight box. Confidence is the fill
/// ratio of the component inside its box.
pub fn detect_blob_roi(
    frame: &Image,
    reference: &Image,
    threshold: f64,
    min_area: usize,
) -> Result<Option<BoundingBox>> {
    let diff = frame.abs_diff_map(reference)?;
    let (w, h) = frame.dims();
    let fg: Vec<bool> = diff.iter().map(|&d| d >= threshold).collect();
    let Some(c) = largest_component(&fg, w, h) else {
        return Ok(None);
    };
    if c.area < min_area.max(1) {
        return Ok(None);
    }
    let bw = c.x1 - c.x0 + 1;
    let bh = c.y1 - c.y0 + 1;
    Ok(Some(BoundingBox {
        x: c.x0,
        y: c.y0,
        w: bw,
        h: bh,
        confidence: c.area as f64 / (bw * bh) as f64,
    }))
}

#[derive(Debug, Clone, Copy)]
struct Component {
    area: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn largest_component(fg: &[bool], w: usize, h: usize) -> Option<Component> {
    let mut seen = vec![false; fg.len()];
    let mut stack = Vec::new();
    let mut best: Option<Component> = None;
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut c = Component {
            area: 0,
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            c.area += 1;
            c.x0 = c.x0.min(x);
            c.x1 = c.x1.max(x);
            c.y0 = c.y0.min(y);
            c.y1 = c.y1.max(y);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.is_none_or(|b| c.area > b.area) {
            best = Some(c);
        }
    }
    best
}

/// Square window of side `ceil(max(w, h) · (1 + margin))` centred on the box,
/// zero-padded where it leaves the frame.
pub fn realign_crop(frame: &Image, bbox: &BoundingBox, margin: f64, frame_index: u64) -> Result<Crop> {
    if !bbox.fits(frame.width(), frame.height()) {
        return Err(Error::Box(format!(
            "{bbox:?} does not fit a {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::Box(format!("margin must be non-negative, got {margin}")));
    }
    let (x0, y0, side) = crop_window(bbox, margin);
    Ok(Crop {
        image: frame.window(x0, y0, side, side, 0.0),
        frame_index,
        source: *bbox,
        origin: (x0, y0),
    })
}

/// Top-left corner and side of the square realignment window.
pub fn crop_window(bbox: &BoundingBox, margin: f64) -> (i64, i64, usize) {
    let longest = bbox.w.max(bbox.h) as f64;
    // guard against 10 * 1.2 landing a hair above 12
    let side = (longest * (1.0 + margin) - 1e-9).ceil().max(longest) as usize;
    let x0 = bbox.x as i64 + (bbox.w as i64 - side as i64).div_euclid(2);
    let y0 = bbox.y as i64 + (bbox.h as i64 - side as i64).div_euclid(2);
    (x0, y0, side)
}

/// One imported detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub frame: u64,
    pub camera: u32,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub confidence: f64,
}

impl BoxRecord {
    pub fn from_box(frame: u64, camera: u32, b: &BoundingBox) -> Self {
        Self {
            frame,
            camera,
            x: b.x as i64,
            y: b.y as i64,
            w: b.w as i64,
            h: b.h as i64,
            confidence: b.confidence,
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x: self.x as usize,
            y: self.y as usize,
            w: self.w as usize,
            h: self.h as usize,
            confidence: self.confidence,
        }
    }
}

/// Parses JSON lines with keys `frame, camera, x, y, w, h, confidence`.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_bbox_records(text: &str) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        if rec.x < 0 || rec.y < 0 {
            return Err(Error::parse(line_no, "negative box origin"));
        }
        if rec.w < 1 || rec.h < 1 {
            return Err(Error::parse(line_no, "box extents must be at least 1"));
        }
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(Error::parse(line_no, "confidence outside [0, 1]"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_bbox_records(records: &[BoxRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("box records serialize"));
        s.push('\n');
    }
    s
}
