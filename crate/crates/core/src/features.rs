//! Model-input preparation: 448×448 resize, photometric jitter, pooled
//! multi-scale statistics, and CSV feature import/export.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Side length of the square model input.
pub const MODEL_SIDE: usize = 448;

/// Grid resolutions pooled by [`extract_features`], coarse to fine.
pub const GRID_SCALES: [usize; 3] = [4, 8, 16];

pub fn resize_to_model(image: &Image) -> Result<Image> {
    if image.is_empty() {
        return Err(Error::Shape("cannot resize an empty image".into()));
    }
    image.resize_bilinear(MODEL_SIDE, MODEL_SIDE)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl PhotometricFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };
}

/// Three independent uniform draws from `[lo, hi]`.
pub fn sample_factors<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<PhotometricFactors> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Arg(format!("factor interval [{lo}, {hi}] is empty")));
    }
    let mut draw = || lo + (hi - lo) * rng.gen::<f64>();
    Ok(PhotometricFactors {
        brightness: draw(),
        contrast: draw(),
        saturation: draw(),
    })
}

/// Brightness, then contrast about the post-brightness image mean, then
/// saturation about each pixel's channel mean; one clamp at the end.
///
/// Every step is written as a convex-style blend (`p·k + anchor·(1 − k)`), so a
/// factor of exactly one leaves values bit-identical.
pub fn photometric(image: &Image, factors: &PhotometricFactors) -> Image {
    let PhotometricFactors {
        brightness: b,
        contrast: c,
        saturation: s,
    } = *factors;
    let mut out = image.clone();
    let data = out.data_mut();
    for v in data.iter_mut() {
        *v *= b;
    }
    let mu = if data.is_empty() {
        0.0
    } else {
        data.iter().sum::<f64>() / data.len() as f64
    };
    let mu_term = mu * (1.0 - c);
    for v in data.iter_mut() {
        *v = *v * c + mu_term;
    }
    let ch = image.channels();
    if ch > 1 {
        for px in data.chunks_exact_mut(ch) {
            let g = px.iter().sum::<f64>() / ch as f64;
            let g_term = g * (1.0 - s);
            for v in px.iter_mut() {
                *v = *v * s + g_term;
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Extracted,
    Imported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureVector {
    pub fn extracted(values: Vec<f64>) -> Self {
        Self {
            values,
            provenance: Provenance::Extracted,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Length of the pooled-statistics vector for `channels` channels.
pub fn feature_dim(channels: usize) -> usize {
    GRID_SCALES.iter().map(|g| g * g).sum::<usize>() * 2 * channels
}

/// Running (count, mean, sum of squared deviations) for one cell and channel.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * (o.n / n),
            m2: self.m2 + o.m2 + delta * delta * (self.n * o.n / n),
        }
    }

    fn std(&self) -> f64 {
        (self.m2 / self.n).max(0.0).sqrt()
    }
}

/// Per-cell channel mean and population standard deviation on 4×4, 8×8 and
/// 16×16 grids. Layout: scales coarse to fine, cells row-major, channels,
/// then `(mean, std)`.
pub fn extract_features(image: &Image) -> Result<FeatureVector> {
    if image.dims() != (MODEL_SIDE, MODEL_SIDE) {
        return Err(Error::Shape(format!(
            "features need a {MODEL_SIDE}x{MODEL_SIDE} input, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let ch = image.channels();
    let finest = GRID_SCALES[GRID_SCALES.len() - 1];
    let cell = MODEL_SIDE / finest;

    // exact two-pass moments on the finest grid, merged upwards
    let mut base = vec![Moments::default(); finest * finest * ch];
    for gy in 0..finest {
        for gx in 0..finest {
            for c in 0..ch {
                let mut sum = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        sum += image.get(x, y, c);
                    }
                }
                let n = (cell * cell) as f64;
                let mean = sum / n;
                let mut m2 = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        let d = image.get(x, y, c) - mean;
                        m2 += d * d;
                    }
                }
                base[(gy * finest + gx) * ch + c] = Moments { n, mean, m2 };
            }
        }
    }

    let mut values = Vec::with_capacity(feature_dim(ch));
    for &g in &GRID_SCALES {
        let span = finest / g;
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..ch {
                    let mut m = Moments::default();
                    for by in gy * span..(gy + 1) * span {
                        for bx in gx * span..(gx + 1) * span {
                            m = m.merge(base[(by * finest + bx) * ch + c]);
                        }
                    }
                    values.push(m.mean);
                    values.push(m.std());
                }
            }
        }
    }
    Ok(FeatureVector::extracted(values))
}

/// Parses `id,v1,...,vd` lines. The dimension comes from the first line.
pub fn load_precomputed(text: &str) -> Result<Vec<(String, FeatureVector)>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(Error::parse(line_no, "missing item id"));
        }
        let values = fields
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("`{}` is not a number", f.trim())))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::parse(line_no, "non-finite feature value"))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::parse(line_no, "no feature values"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    line_no,
                    format!("expected {d} values, found {}", values.len()),
                ))
            }
            _ => {}
        }
        out.push((
            id,
            FeatureVector {
                values,
                provenance: Provenance::Imported,
            },
        ));
    }
    Ok(out)
}

pub fn write_features<'a>(rows: impl IntoIterator<Item = (&'a str, &'a FeatureVector)>) -> String {
    let mut s = String::new();
    for (id, fv) in rows {
        s.push_str(id);
        for v in &fv.values {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

/// Per-dimension affine standardization fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Deviations below this are treated as this, so constant dimensions
    /// (masked-out cells) do not blow up.
    pub const STD_FLOOR: f64 = 1e-3;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Arg("cannot fit a standardizer on zero rows".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape(format!("feature rows of length {d} and {}", r.len())));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(Self::STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for a {}-dimensional model",
                values.len(),
                self.dim()
            )));
        }
        Ok(values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize, c: usize) -> Image {
        let data = (0..w * h * c).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    #[test]
    fn resize_contract() {
        let same = ramp(448, 448, 1);
        assert_eq!(resize_to_model(&same).unwrap(), same);
        let flat = Image::filled(224, 224, 1, 0.5);
        assert_eq!(resize_to_model(&flat).unwrap(), Image::filled(448, 448, 1, 0.5));
        assert_eq!(resize_to_model(&ramp(100, 200, 3)).unwrap().dims(), (448, 448));
        assert!(resize_to_model(&Image::new(0, 5, 1)).is_err());
    }

    #[test]
    fn factor_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            sample_factors(&mut rng, 1.0, 1.0).unwrap(),
            PhotometricFactors::IDENTITY
        );
        assert!(sample_factors(&mut rng, 2.0, 1.0).is_err());

        let n = 10_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let f = sample_factors(&mut rng, 0.5, 1.5).unwrap();
            for (s, v) in sums.iter_mut().zip([f.brightness, f.contrast, f.saturation]) {
                assert!((0.5..=1.5).contains(&v));
                *s += v;
            }
        }
        for s in sums {
            assert!((s / n as f64 - 1.0).abs() < 0.02);
        }

        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| sample_factors(&mut r, 0.5, 1.5).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
    }

    #[test]
    fn photometric_hand_values() {
        let img = Image::from_vec(2, 1, 1, vec![0.2, 0.4]).unwrap();
        let out = photometric(
            &img,
            &PhotometricFactors {
                brightness: 0.5,
                contrast: 1.5,
                saturation: 0.3,
            },
        );
        assert!((out.get(0, 0, 0) - 0.075).abs() < 1e-15);
        assert!((out.get(1, 0, 0) - 0.225).abs() < 1e-15);
    }

    #[test]
    fn gray_ignores_saturation() {
        let img = ramp(9, 7, 1);
        let f = |s| PhotometricFactors {
            brightness: 0.9,
            contrast: 1.1,
            saturation: s,
        };
        assert_eq!(photometric(&img, &f(0.5)), photometric(&img, &f(1.5)));
        let rgb_gray = img.to_rgb();
        assert_eq!(photometric(&rgb_gray, &f(0.5)), photometric(&rgb_gray, &f(1.0)));
    }

    #[test]
    fn feature_layout() {
        assert_eq!(feature_dim(1), 672);
        assert_eq!(feature_dim(3), 2016);
        let fv = extract_features(&Image::filled(448, 448, 1, 0.5)).unwrap();
        assert_eq!(fv.dim(), 672);
        for pair in fv.values.chunks_exact(2) {
            assert_eq!(pair, &[0.5, 0.0]);
        }
        assert_eq!(extract_features(&ramp(448, 448, 3)).unwrap().dim(), 2016);
        assert!(matches!(extract_features(&ramp(447, 448, 1)), Err(Error::Shape(_))));
    }

    /// Brute-force statistics of one cell, independent of the merge path.
    fn cell_stats(img: &Image, g: usize, gx: usize, gy: usize, c: usize) -> (f64, f64) {
        let side = MODEL_SIDE / g;
        let vals: Vec<f64> = (gy * side..(gy + 1) * side)
            .flat_map(|y| (gx * side..(gx + 1) * side).map(move |x| (x, y)))
            .map(|(x, y)| img.get(x, y, c))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn merged_moments_match_direct() {
        let img = ramp(448, 448, 2);
        let fv = extract_features(&img).unwrap();
        let mut offset = 0;
        for &g in &GRID_SCALES {
            for (gx, gy) in [(0, 0), (g - 1, 0), (g / 2, g - 1)] {
                for c in 0..2 {
                    let (m, s) = cell_stats(&img, g, gx, gy, c);
                    let i = offset + ((gy * g + gx) * 2 + c) * 2;
                    assert!((fv.values[i] - m).abs() < 1e-12);
                    assert!((fv.values[i + 1] - s).abs() < 1e-12);
                }
            }
            offset += g * g * 2 * 2;
        }
    }

    #[test]
    fn translation_permutes_finest_block() {
        let mut a = Image::new(448, 448, 1);
        for y in 0..448 {
            for x in 0..420 {
                a.set(x, y, 0, ((x * 31 + y * 17) % 97) as f64 / 97.0);
            }
        }
        let b = a.window(-28, 0, 448, 448, 0.0);
        let fa = extract_features(&a).unwrap().values;
        let fb = extract_features(&b).unwrap().values;
        let start = (16 + 64) * 2;
        for gy in 0..16 {
            for gx in 0..15 {
                let ia = start + (gy * 16 + gx) * 2;
                let ib = start + (gy * 16 + gx + 1) * 2;
                assert_eq!(fa[ia..ia + 2], fb[ib..ib + 2]);
            }
        }
    }

    #[test]
    fn precomputed_lines() {
        let rows = load_precomputed("a,1,2,3,4\nb,0.5,-1,2e3,0\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].1.dim(), 4);
        assert_eq!(rows[0].1.provenance, Provenance::Imported);
        assert!(matches!(
            load_precomputed("a,1,nan\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            load_precomputed("a,1,2\nb,1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(load_precomputed("").unwrap().is_empty());
        let text = write_features(rows.iter().map(|(id, fv)| (id.as_str(), fv)));
        assert_eq!(load_precomputed(&text).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn identity_factors_are_exact(vals in proptest::collection::vec(0.0f64..=1.0, 27)) {
            let img = Image::from_vec(3, 3, 3, vals).unwrap();
            prop_assert_eq!(photometric(&img, &PhotometricFactors::IDENTITY), img);
        }

        #[test]
        fn brightness_scales_stats(b in 0.5f64..1.5, seed in 0u64..1000) {
            // values in [0.2, 0.6] never clip for b <= 1.5
            let data: Vec<f64> = (0..448 * 448).map(|i| 0.2 + 0.4 * (((i as u64 * 2654435761 + seed) % 1009) as f64 / 1009.0)).collect();
            let img = Image::from_vec(448, 448, 1, data).unwrap();
            let f = PhotometricFactors { brightness: b, ..PhotometricFactors::IDENTITY };
            let base = extract_features(&img).unwrap().values;
            let scaled = extract_features(&photometric(&img, &f)).unwrap().values;
            for (x, y) in base.iter().zip(&scaled) {
                prop_assert!((x * b - y).abs() < 1e-9);
            }
        }
    }
}
