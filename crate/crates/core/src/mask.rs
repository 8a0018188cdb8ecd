//! Binary product masks: per-frame background difference, composite union,
//! shrink-and-pad, and application to crops.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1)
    }

    fn filled(width: usize, height: usize, v: u8) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    /// Any non-zero value counts as foreground.
    pub fn from_values(width: usize, height: usize, values: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} mask",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: values.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Foreground centroid in pixel-centre coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Nearest-neighbour resample; used to bring masks to a common size.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let mut out = Mask::zeros(width, height);
        for y in 0..height {
            let sy = nearest_src(y, self.height, height);
            for x in 0..width {
                let sx = nearest_src(x, self.width, width);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    fn check_same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Writes a 1-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let to_err = |e: png::EncodingError| match e {
            png::EncodingError::IoError(io) => Error::io(path, io),
            other => Error::Item {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        };
        let mut writer = encoder.write_header().map_err(to_err)?;
        writer.write_image_data(&packed).map_err(to_err)?;
        writer.finish().map_err(to_err)
    }

    /// Reads any PNG as a mask. Images with an alpha channel are binarized on
    /// alpha, others on luminance, both at 0.5.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| Error::Item {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values: Vec<u8> = if img.color().has_alpha() {
            img.to_rgba8().pixels().map(|p| u8::from(p.0[3] >= 128)).collect()
        } else {
            img.to_luma8().pixels().map(|p| u8::from(p.0[0] >= 128)).collect()
        };
        Mask::from_values(w, h, &values)
    }
}

/// `floor((dst + 0.5) · src / dst_len)` in exact integer arithmetic.
fn nearest_src(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskBuildConfig {
    pub theta: f64,
    pub shrink: f64,
    pub stride: usize,
    pub min_votes: usize,
}

impl Default for MaskBuildConfig {
    fn default() -> Self {
        Self {
            theta: 0.1,
            shrink: 0.10,
            stride: 1,
            min_votes: 1,
        }
    }
}

/// Foreground where the channel-mean difference to the reference reaches `theta`.
pub fn per_frame_mask(crop: &Image, reference: &Image, theta: f64) -> Result<Mask> {
    let diff = crop.abs_diff_map(reference)?;
    let values: Vec<u8> = diff.iter().map(|&d| u8::from(d >= theta)).collect();
    Mask::from_values(crop.width(), crop.height(), &values)
}

/// Union of all masks: per-pixel sum binarized at one vote.
pub fn composite_mask(masks: &[Mask]) -> Result<Mask> {
    composite_mask_with_votes(masks, 1)
}

/// Per-pixel vote count binarized at `min_votes`.
pub fn composite_mask_with_votes(masks: &[Mask], min_votes: usize) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Arg("composite of zero masks".into()))?;
    if min_votes == 0 {
        return Err(Error::Arg("min_votes must be at least 1".into()));
    }
    let mut votes = vec![0usize; first.data.len()];
    for m in masks {
        first.check_same_dims(m)?;
        for (acc, &v) in votes.iter_mut().zip(&m.data) {
            *acc += v as usize;
        }
    }
    Ok(Mask {
        width: first.width,
        height: first.height,
        data: votes.iter().map(|&v| u8::from(v >= min_votes)).collect(),
    })
}

/// Rescales the whole mask to `round((1 − f)·W) × round((1 − f)·H)` by
/// nearest neighbour and pads it back to `W × H` with the content placed at
/// `(floor((W − W')/2), floor((H − H')/2))`.
pub fn shrink_and_pad(mask: &Mask, f: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Arg(format!("shrink fraction {f} outside [0, 1)")));
    }
    let (w, h) = mask.dims();
    let sw = (((1.0 - f) * w as f64).round() as usize).clamp(1, w);
    let sh = (((1.0 - f) * h as f64).round() as usize).clamp(1, h);
    let small = mask.resize_nearest(sw, sh);
    let (ox, oy) = ((w - sw) / 2, (h - sh) / 2);
    let mut out = Mask::zeros(w, h);
    for y in 0..sh {
        let src = &small.data[y * sw..(y + 1) * sw];
        let dst = (y + oy) * w + ox;
        out.data[dst..dst + sw].copy_from_slice(src);
    }
    Ok(out)
}

/// Keeps pixels under the mask and replaces the rest with `fill`.
pub fn apply_mask(image: &Image, mask: &Mask, fill: f64) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.width(),
            image.height(),
            mask.width,
            mask.height
        )));
    }
    let c = image.channels();
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(&mask.data) {
        if m == 0 {
            px.fill(fill);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_mask(bits: &[bool], w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| bits[y * w + x])
    }

    fn or_oracle(masks: &[Mask]) -> Mask {
        let (w, h) = masks[0].dims();
        Mask::from_fn(w, h, |x, y| masks.iter().any(|m| m.get(x, y)))
    }

    #[test]
    fn per_frame_basics() {
        let img = Image::filled(5, 5, 3, 0.4);
        assert_eq!(per_frame_mask(&img, &img, 0.05).unwrap().area(), 0);
        assert_eq!(per_frame_mask(&img, &img, 0.0).unwrap(), Mask::ones(5, 5));
        let other = Image::new(5, 4, 3);
        assert!(matches!(per_frame_mask(&img, &other, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn per_frame_mask_matches_silhouette() {
        use crate::dataset::{render_background, render_product_frame, ProductShape, SyntheticSceneSpec};
        let spec = SyntheticSceneSpec {
            shape: ProductShape::Trapezoid {
                top_width: 10,
                bottom_width: 30,
                height: 40,
            },
            noise: 0.0,
            ..SyntheticSceneSpec::default()
        };
        let left = 50;
        let (frame, _) = render_product_frame(&spec, left, 0).unwrap();
        let bg = render_background(&spec, 0).unwrap();
        let m = per_frame_mask(&frame, &bg, 0.1).unwrap();
        let want = Mask::from_fn(frame.width(), frame.height(), |x, y| {
            let (col, row) = (x as i64 - left, y as i64 - spec.top as i64);
            col >= 0 && row >= 0 && spec.shape.contains(col as usize, row as usize)
        });
        assert_eq!(m, want);
    }

    #[test]
    fn composite_cases() {
        let left = Mask::from_fn(6, 4, |x, _| x < 3);
        let right = Mask::from_fn(6, 4, |x, _| x >= 3);
        assert_eq!(composite_mask(std::slice::from_ref(&left)).unwrap(), left);
        assert_eq!(composite_mask(&[left.clone(), right]).unwrap(), Mask::ones(6, 4));
        assert!(matches!(composite_mask(&[]), Err(Error::Arg(_))));
        assert!(matches!(
            composite_mask(&[left, Mask::ones(3, 3)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn votes_threshold() {
        let a = Mask::from_fn(4, 1, |x, _| x < 2);
        let b = Mask::from_fn(4, 1, |x, _| x < 3);
        let m = composite_mask_with_votes(&[a, b], 2).unwrap();
        assert_eq!(m.values(), &[1, 1, 0, 0]);
    }

    #[test]
    fn shrink_ten_percent_of_ones() {
        let out = shrink_and_pad(&Mask::ones(10, 10), 0.10).unwrap();
        assert_eq!(out.area(), 81);
        assert_eq!(out, Mask::from_fn(10, 10, |x, y| x < 9 && y < 9));
    }

    #[test]
    fn shrink_zero_is_identity() {
        let m = Mask::from_fn(7, 5, |x, y| (x * 3 + y) % 4 == 0);
        assert_eq!(shrink_and_pad(&m, 0.0).unwrap(), m);
        assert!(shrink_and_pad(&m, 1.0).is_err());
    }

    #[test]
    fn apply_cases() {
        let data: Vec<f64> = (0..48).map(|i| (i as f64 * 0.618).fract()).collect();
        let img = Image::from_vec(4, 4, 3, data).unwrap();
        assert_eq!(apply_mask(&img, &Mask::ones(4, 4), 0.0).unwrap(), img);
        assert!(apply_mask(&img, &Mask::zeros(4, 4), 0.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let half = Mask::from_fn(4, 4, |x, _| x < 2);
        let out = apply_mask(&img, &half, 0.25).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let want = if x < 2 { img.get(x, y, c) } else { 0.25 };
                    assert_eq!(out.get(x, y, c), want);
                }
            }
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Mask::from_fn(13, 7, |x, y| (x + 2 * y) % 3 == 0);
        m.save_png(&path).unwrap();
        assert_eq!(Mask::load_png(&path).unwrap(), m);
    }

    #[test]
    fn alpha_import_binarizes_at_half() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alpha.png");
        let mut img = image::RgbaImage::new(3, 1);
        img.put_pixel(0, 0, image::Rgba([0, 0, 0, 10]));
        img.put_pixel(1, 0, image::Rgba([0, 0, 0, 200]));
        img.put_pixel(2, 0, image::Rgba([255, 255, 255, 127]));
        img.save(&path).unwrap();
        assert_eq!(Mask::load_png(&path).unwrap().values(), &[0, 1, 0]);
    }

    proptest! {
        #[test]
        fn composite_is_or(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 48), 1..10)) {
            let masks: Vec<Mask> = bits.iter().map(|b| random_mask(b, 8, 6)).collect();
            let c = composite_mask(&masks).unwrap();
            prop_assert_eq!(&c, &or_oracle(&masks));
            for m in &masks {
                prop_assert!((0..6).all(|y| (0..8).all(|x| !m.get(x, y) || c.get(x, y))));
            }
            let mut rev = masks.clone();
            rev.reverse();
            prop_assert_eq!(&composite_mask(&rev).unwrap(), &c);
            prop_assert_eq!(&composite_mask(&[c.clone(), c.clone()]).unwrap(), &c);
        }

        #[test]
        fn shrink_never_grows(bits in proptest::collection::vec(any::<bool>(), 1..400), w in 1usize..20, f in 0.0f64..0.9) {
            let h = bits.len().div_ceil(w).max(1);
            let m = Mask::from_fn(w, h, |x, y| bits.get(y * w + x).copied().unwrap_or(false));
            prop_assert!(shrink_and_pad(&m, f).unwrap().area() <= m.area());
        }

        #[test]
        fn shrunk_centred_box_stays_inside(w in 4usize..60, h in 4usize..60, mx in 0usize..3, my in 0usize..3) {
            prop_assume!(2 * mx < w && 2 * my < h);
            let m = Mask::from_fn(w, h, |x, y| x >= mx && x < w - mx && y >= my && y < h - my);
            let s = shrink_and_pad(&m, 0.10).unwrap();
            let union = composite_mask(&[m.clone(), s]).unwrap();
            prop_assert_eq!(union, m);
        }

        #[test]
        fn shrink_area_ratio(w in 5usize..80, h in 5usize..80) {
            let s = shrink_and_pad(&Mask::ones(w, h), 0.10).unwrap();
            let ratio = s.area() as f64 / (w * h) as f64;
            // rounding of each side moves the area by at most one row and column
            let slack = (w + h) as f64 / (w * h) as f64;
            prop_assert!((ratio - 0.81).abs() <= slack, "ratio {} slack {}", ratio, slack);
        }

        #[test]
        fn apply_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 30), vals in proptest::collection::vec(0.0f64..=1.0, 30), fill in 0.0f64..=1.0) {
            let m = random_mask(&bits, 6, 5);
            let img = Image::from_vec(6, 5, 1, vals).unwrap();
            let once = apply_mask(&img, &m, fill).unwrap();
            prop_assert_eq!(&apply_mask(&once, &m, fill).unwrap(), &once);
        }
    }
}
