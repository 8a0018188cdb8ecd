//! Bounding box and label overlay for output frames.

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::image::{Frame, Image};
use crate::roi::BoundingBox;

pub const GOOD_COLOR: [f64; 3] = [0.0, 1.0, 0.0];
pub const DEFECTIVE_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
const TEXT_COLOR: [f64; 3] = [0.0, 0.0, 0.0];
const LINE: usize = 2;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
/// Glyph plus one pixel of spacing, at scale 1.
const CELL_W: usize = GLYPH_W + 1;
const PAD: usize = 1;

/// 3×5 bitmap rows, most significant of the low three bits is the left column.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        ':' => [0, 2, 0, 2, 0],
        'C' => [7, 4, 4, 4, 7],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [7, 4, 5, 5, 7],
        'I' => [7, 2, 2, 2, 7],
        'O' => [7, 5, 5, 5, 7],
        'T' => [7, 2, 2, 2, 2],
        'V' => [5, 5, 5, 5, 2],
        'N' => [6, 5, 5, 5, 5],
        'A' => [2, 5, 7, 5, 5],
        _ => [0; 5],
    }
}

pub fn label_color(label: Label) -> [f64; 3] {
    match label {
        Label::Good => GOOD_COLOR,
        Label::Defective => DEFECTIVE_COLOR,
    }
}

/// Text written next to a box.
pub fn caption(label: Label, score: f64) -> String {
    format!("{} {:.2}", label.to_string().to_uppercase(), score)
}

/// `(x, y, w, h)` of the caption block for `text` anchored at the box's
/// top-left corner, above the box when there is room, clipped to the frame.
pub fn text_block_rect(bbox: &BoundingBox, text: &str, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let w = (text.chars().count() * CELL_W + 2 * PAD - 1).min(width - bbox.x);
    let h = GLYPH_H + 2 * PAD;
    let y = if bbox.y >= h { bbox.y - h } else { bbox.y };
    (bbox.x, y, w, h.min(height - y))
}

fn paint(img: &mut Image, x: usize, y: usize, color: [f64; 3]) {
    if x < img.width() && y < img.height() {
        for (c, v) in color.iter().enumerate() {
            img.set(x, y, c, *v);
        }
    }
}

/// Draws a 2-px rectangle in the label colour on the box perimeter and a
/// caption block with label and score at its top-left. Grayscale frames are
/// converted to RGB first; pixels outside the drawn regions are unchanged.
pub fn annotate_frame(frame: &Frame, bbox: &BoundingBox, label: Label, score: f64) -> Result<Frame> {
    let (w, h) = frame.image.dims();
    if bbox.w == 0 || bbox.h == 0 || !bbox.fits(w, h) {
        return Err(Error::Box(format!(
            "box {}x{} at ({}, {}) outside {w}x{h} frame",
            bbox.w, bbox.h, bbox.x, bbox.y
        )));
    }
    let mut img = frame.image.to_rgb();
    let color = label_color(label);
    let (x0, y0) = (bbox.x, bbox.y);
    let (x1, y1) = (bbox.x + bbox.w, bbox.y + bbox.h);
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + LINE || x + LINE >= x1 || y < y0 + LINE || y + LINE >= y1;
            if edge {
                paint(&mut img, x, y, color);
            }
        }
    }

    let text = caption(label, score);
    let (tx, ty, tw, th) = text_block_rect(bbox, &text, w, h);
    for y in ty..ty + th {
        for x in tx..tx + tw {
            paint(&mut img, x, y, color);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    let x = tx + PAD + i * CELL_W + col;
                    let y = ty + PAD + r;
                    if x < tx + tw && y < ty + th {
                        paint(&mut img, x, y, TEXT_COLOR);
                    }
                }
            }
        }
    }
    Ok(Frame {
        image: img,
        meta: frame.meta,
    })
}
