//! Dataset indexing, seeded splits, and the synthetic conveyor renderer.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Frame, Image};
use crate::roi::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Defective,
}

impl Label {
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Good => "good",
            Label::Defective => "defective",
        }
    }

    pub fn is_defective(self) -> bool {
        matches!(self, Label::Defective)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Path relative to the dataset root, or a synthetic identifier.
    pub id: String,
    pub label: Label,
    pub camera: u32,
    pub frame: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub items: Vec<DatasetItem>,
}

impl DatasetIndex {
    pub fn new(items: Vec<DatasetItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }

    fn sort(&mut self) {
        self.items
            .sort_by(|a, b| (a.label, a.camera, a.frame, &a.id).cmp(&(b.label, b.camera, b.frame, &b.id)));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Scans `root/{good,defective}/camera<k>/<frame>.{png,ppm}`.
///
/// Every image is decoded once so that corrupt files surface here rather than
/// halfway through training.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut items = Vec::new();
    for label in [Label::Good, Label::Defective] {
        let label_dir = root.join(label.dir_name());
        if !label_dir.is_dir() {
            continue;
        }
        for cam_entry in read_dir_sorted(&label_dir)? {
            let Some(camera) = parse_camera_dir(&cam_entry) else {
                continue;
            };
            for file in read_dir_sorted(&cam_entry)? {
                if !is_image_file(&file) {
                    continue;
                }
                let frame = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| Error::Item {
                        path: file.clone(),
                        reason: "file stem is not a frame number".into(),
                    })?;
                Image::load(&file)?;
                let rel = file.strip_prefix(root).unwrap_or(&file);
                items.push(DatasetItem {
                    id: rel.to_string_lossy().replace('\\', "/"),
                    label,
                    camera,
                    frame,
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut index = DatasetIndex::new(items);
    index.sort();
    Ok(index)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    Ok(paths)
}

/// `camera<k>` directory name → `k`.
pub fn parse_camera_dir(path: &Path) -> Option<u32> {
    if !path.is_dir() {
        return None;
    }
    path.file_name()?.to_str()?.strip_prefix("camera")?.parse().ok()
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
}

/// Seeded shuffle then prefix-take. Training takes good items only; the
/// remainder is split into validation and test sets stratified by label, each
/// holding at least one item of both labels.
pub fn split_dataset(index: &DatasetIndex, spec: SplitSpec) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut good: Vec<&DatasetItem> = index.items.iter().filter(|i| i.label == Label::Good).collect();
    let mut defective: Vec<&DatasetItem> = index.items.iter().filter(|i| i.label == Label::Defective).collect();
    good.shuffle(&mut rng);
    defective.shuffle(&mut rng);

    if spec.n_train > good.len() {
        return Err(Error::Split(format!(
            "training needs {} good items, only {} available",
            spec.n_train,
            good.len()
        )));
    }
    let total = spec.n_train + spec.n_val + spec.n_test;
    if total > index.len() {
        return Err(Error::Split(format!(
            "split needs {total} items, index has {} (short by {})",
            index.len(),
            total - index.len()
        )));
    }

    let train: Vec<DatasetItem> = good[..spec.n_train].iter().map(|i| (*i).clone()).collect();
    let rest_good = &good[spec.n_train..];
    let pool = rest_good.len() + defective.len();
    let defective_share = if pool == 0 {
        0.0
    } else {
        defective.len() as f64 / pool as f64
    };

    let val_def = stratified_count(spec.n_val, defective_share, "validation")?;
    let test_def = stratified_count(spec.n_test, defective_share, "test")?;
    let (val_good, test_good) = (spec.n_val - val_def, spec.n_test - test_def);
    if val_def + test_def > defective.len() {
        return Err(Error::Split(format!(
            "validation and test need {} defective items, only {} available",
            val_def + test_def,
            defective.len()
        )));
    }
    if val_good + test_good > rest_good.len() {
        return Err(Error::Split(format!(
            "validation and test need {} good items beyond training, only {} available",
            val_good + test_good,
            rest_good.len()
        )));
    }

    let take = |g: &[&DatasetItem], d: &[&DatasetItem], rng: &mut ChaCha8Rng| {
        let mut v: Vec<DatasetItem> = g.iter().chain(d).map(|i| (*i).clone()).collect();
        v.shuffle(rng);
        DatasetIndex::new(v)
    };
    let val = take(&rest_good[..val_good], &defective[..val_def], &mut rng);
    let test = take(
        &rest_good[val_good..val_good + test_good],
        &defective[val_def..val_def + test_def],
        &mut rng,
    );
    Ok((DatasetIndex::new(train), val, test))
}

fn stratified_count(n: usize, share: f64, what: &str) -> Result<usize> {
    match n {
        0 => Ok(0),
        1 => Err(Error::Split(format!("{what} split of size 1 cannot hold both labels"))),
        _ => Ok(((n as f64 * share).round() as usize).clamp(1, n - 1)),
    }
}

// ---------------------------------------------------------------------------
// Synthetic conveyor scenes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProductShape {
    Rectangle {
        width: usize,
        height: usize,
    },
    /// Cone-like silhouette; rows interpolate linearly from `top_width` to `bottom_width`.
    Trapezoid {
        top_width: usize,
        bottom_width: usize,
        height: usize,
    },
}

impl ProductShape {
    pub fn extent(&self) -> (usize, usize) {
        match *self {
            ProductShape::Rectangle { width, height } => (width, height),
            ProductShape::Trapezoid {
                top_width,
                bottom_width,
                height,
            } => (top_width.max(bottom_width), height),
        }
    }

    /// Horizontal span `[start, end)` covered by the silhouette on `row`,
    /// relative to the bounding box.
    pub fn row_span(&self, row: usize) -> (usize, usize) {
        match *self {
            ProductShape::Rectangle { width, .. } => (0, width),
            ProductShape::Trapezoid {
                top_width,
                bottom_width,
                height,
            } => {
                let full = top_width.max(bottom_width);
                let t = if height <= 1 {
                    1.0
                } else {
                    row as f64 / (height - 1) as f64
                };
                let w = (top_width as f64 + (bottom_width as f64 - top_width as f64) * t).round() as usize;
                let w = w.clamp(1, full);
                let start = (full - w) / 2;
                (start, start + w)
            }
        }
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        let (_, h) = self.extent();
        if row >= h {
            return false;
        }
        let (a, b) = self.row_span(row);
        col >= a && col < b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blotch {
    /// Offset of the disk centre from the product box centre, in pixels.
    pub dx: f64,
    pub dy: f64,
    pub radius: f64,
    /// Added to the product albedo inside the disk.
    pub contrast: f64,
}

/// Low-contrast distractors painted on the belt, redrawn every frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clutter {
    pub count: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Maximum absolute albedo offset of a distractor from the belt.
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub shape: ProductShape,
    pub product_albedo: f64,
    pub belt_albedo: f64,
    pub noise: f64,
    /// Pixels per frame, left to right.
    pub speed: f64,
    /// Left edge of the product box at frame 0; may be negative.
    pub start_x: f64,
    /// Top edge of the product box.
    pub top: usize,
    pub defect: Option<Blotch>,
    pub clutter: Option<Clutter>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            shape: ProductShape::Rectangle { width: 40, height: 50 },
            product_albedo: 0.75,
            belt_albedo: 0.25,
            noise: 0.02,
            speed: 5.0,
            start_x: -40.0,
            top: 35,
            defect: None,
            clutter: None,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.extent();
        if w == 0 || h == 0 {
            return Err(Error::Spec("product has zero extent".into()));
        }
        if w > self.width || h + self.top > self.height {
            return Err(Error::Spec(format!(
                "product {w}x{h} at top {} does not fit a {}x{} frame",
                self.top, self.width, self.height
            )));
        }
        for (name, v) in [
            ("product_albedo", self.product_albedo),
            ("belt_albedo", self.belt_albedo),
            ("noise", self.noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Spec(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.speed > 0.0) {
            return Err(Error::Spec(format!("speed must be positive, got {}", self.speed)));
        }
        if let Some(d) = self.defect {
            if !(d.radius > 0.0) {
                return Err(Error::Spec(format!("blotch radius must be positive, got {}", d.radius)));
            }
        }
        if let Some(c) = self.clutter {
            if c.min_size == 0 || c.min_size > c.max_size {
                return Err(Error::Spec("clutter sizes must satisfy 1 <= min <= max".into()));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> (usize, usize) {
        self.shape.extent()
    }

    pub fn label(&self) -> Label {
        if self.defect.is_some() {
            Label::Defective
        } else {
            Label::Good
        }
    }

    /// Left edge of the product box on frame `t`.
    pub fn left_at(&self, t: usize) -> i64 {
        (self.start_x + self.speed * t as f64).round() as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    /// Visible part of the product, `None` while it is entirely off-frame.
    pub bbox: Option<BoundingBox>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub truth: Vec<FrameTruth>,
}

pub fn generate_synthetic_sequence(spec: &SyntheticSceneSpec, n_frames: usize, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    if n_frames == 0 {
        return Err(Error::Arg("n_frames must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n_frames);
    let mut truth = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let left = spec.left_at(t);
        let image = render_scene(spec, Some(left), &mut rng);
        frames.push(Frame::new(image, 0, t as u64));
        truth.push(FrameTruth {
            bbox: visible_box(spec, left),
            label: spec.label(),
        });
    }
    Ok(SyntheticSequence { frames, truth })
}

/// Frame with the product's box at `left`, sharing the renderer with
/// [`generate_synthetic_sequence`].
pub fn render_product_frame(spec: &SyntheticSceneSpec, left: i64, seed: u64) -> Result<(Image, Option<BoundingBox>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((render_scene(spec, Some(left), &mut rng), visible_box(spec, left)))
}

/// Empty belt with sensor noise but no product and no clutter.
pub fn render_background(spec: &SyntheticSceneSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bare = SyntheticSceneSpec { clutter: None, ..*spec };
    Ok(render_scene(&bare, None, &mut rng))
}

fn visible_box(spec: &SyntheticSceneSpec, left: i64) -> Option<BoundingBox> {
    let (w, h) = spec.extent();
    let x0 = left.max(0);
    let x1 = (left + w as i64).min(spec.width as i64);
    if x1 <= x0 {
        return None;
    }
    Some(BoundingBox {
        x: x0 as usize,
        y: spec.top,
        w: (x1 - x0) as usize,
        h,
        confidence: 1.0,
    })
}

fn render_scene(spec: &SyntheticSceneSpec, left: Option<i64>, rng: &mut ChaCha8Rng) -> Image {
    let (fw, fh) = (spec.width, spec.height);
    let mut img = Image::filled(fw, fh, 1, spec.belt_albedo);

    if let Some(c) = spec.clutter {
        for _ in 0..c.count {
            let w = rng.gen_range(c.min_size..=c.max_size).min(fw);
            let h = rng.gen_range(c.min_size..=c.max_size).min(fh);
            let x = rng.gen_range(0..=fw - w);
            let y = rng.gen_range(0..=fh - h);
            let delta = rng.gen_range(-c.contrast..=c.contrast);
            for yy in y..y + h {
                for xx in x..x + w {
                    img.set(xx, yy, 0, spec.belt_albedo + delta);
                }
            }
        }
    }

    if let Some(left) = left {
        let (pw, ph) = spec.extent();
        let (cx, cy) = (pw as f64 / 2.0, ph as f64 / 2.0);
        for row in 0..ph {
            let y = spec.top + row;
            let (a, b) = spec.shape.row_span(row);
            for col in a..b {
                let x = left + col as i64;
                if x < 0 || x >= fw as i64 {
                    continue;
                }
                let mut v = spec.product_albedo;
                if let Some(d) = spec.defect {
                    let ddx = col as f64 + 0.5 - (cx + d.dx);
                    let ddy = row as f64 + 0.5 - (cy + d.dy);
                    if ddx * ddx + ddy * ddy <= d.radius * d.radius {
                        v += d.contrast;
                    }
                }
                img.set(x as usize, y, 0, v);
            }
        }
    }

    let sigma = spec.noise;
    for v in img.data_mut() {
        let n = if sigma > 0.0 { rng.gen_range(-sigma..sigma) } else { 0.0 };
        *v = (*v + n).clamp(0.0, 1.0);
    }
    img
}

/// Pixels (frame coordinates) covered by the blotch disk when the product box
/// sits at `left`. Used to cross-check renders.
pub fn blotch_pixels(spec: &SyntheticSceneSpec, left: i64) -> Vec<(usize, usize)> {
    let Some(d) = spec.defect else {
        return Vec::new();
    };
    let (pw, ph) = spec.extent();
    let (cx, cy) = (pw as f64 / 2.0, ph as f64 / 2.0);
    let mut out = Vec::new();
    for row in 0..ph {
        let (a, b) = spec.shape.row_span(row);
        for col in a..b {
            let x = left + col as i64;
            if x < 0 || x >= spec.width as i64 {
                continue;
            }
            let ddx = col as f64 + 0.5 - (cx + d.dx);
            let ddy = row as f64 + 0.5 - (cy + d.dy);
            if ddx * ddx + ddy * ddy <= d.radius * d.radius {
                out.push((x as usize, spec.top + row));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// On-disk synthetic corpus

/// Parameters for writing a scan-ready corpus of trigger frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub scene: SyntheticSceneSpec,
    pub n_good: usize,
    pub n_defective: usize,
    pub cameras: u32,
    /// Maximum horizontal offset of the product from the frame centre.
    pub jitter: i64,
    pub radius: (f64, f64),
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            scene: SyntheticSceneSpec {
                shape: ProductShape::Trapezoid {
                    top_width: 24,
                    bottom_width: 44,
                    height: 56,
                },
                top: 32,
                ..SyntheticSceneSpec::default()
            },
            n_good: 200,
            n_defective: 50,
            cameras: 1,
            jitter: 4,
            radius: (4.0, 6.0),
            contrast: (0.15, 0.25),
            seed: 0,
        }
    }
}

/// Writes `root/{good,defective}/camera<k>/<n>.png` plus one empty-belt
/// reference per camera at `root/reference/camera<k>.png`. Frame numbers are
/// unique within a camera, so `(camera, frame)` identifies an item.
pub fn write_synthetic_corpus(root: &Path, spec: &CorpusSpec) -> Result<DatasetIndex> {
    spec.scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pw, ph) = spec.scene.extent();
    let centre_left = (spec.scene.width as i64 - pw as i64) / 2;
    let mut items = Vec::new();
    fs::create_dir_all(root.join("reference")).map_err(|e| Error::io(root, e))?;
    for camera in 0..spec.cameras {
        let bg = render_background(&spec.scene, rng.gen())?;
        bg.save(&reference_path(root, camera))?;
        // frame numbers are unique per camera across both labels
        let jobs = std::iter::repeat_n(Label::Good, spec.n_good)
            .chain(std::iter::repeat_n(Label::Defective, spec.n_defective));
        for (n, label) in (0u64..).zip(jobs) {
            let mut scene = spec.scene;
            if label == Label::Defective {
                let radius = rng.gen_range(spec.radius.0..=spec.radius.1);
                let contrast = rng.gen_range(spec.contrast.0..=spec.contrast.1);
                // keep the disk away from the silhouette border
                let (mx, my) = (pw as f64 * 0.15, ph as f64 * 0.25);
                scene.defect = Some(Blotch {
                    dx: rng.gen_range(-mx..=mx),
                    dy: rng.gen_range(-my..=my),
                    radius,
                    contrast,
                });
            }
            let left = centre_left + rng.gen_range(-spec.jitter..=spec.jitter);
            let (img, _) = render_product_frame(&scene, left, rng.gen())?;
            let dir = root.join(label.dir_name()).join(format!("camera{camera}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{n}.png"));
            img.save(&path)?;
            items.push(DatasetItem {
                id: format!("{}/camera{camera}/{n}.png", label.dir_name()),
                label,
                camera,
                frame: n,
            });
        }
    }
    let mut index = DatasetIndex::new(items);
    index.sort();
    Ok(index)
}

pub fn reference_path(root: &Path, camera: u32) -> PathBuf {
    root.join("reference").join(format!("camera{camera}.png"))
}

/// Writes one camera stream as `dir/<n>.png`: an empty-belt frame `0`
/// followed by the frames of a full transit. Returns the ground truth of the
/// transit frames (stream frame `i + 1` ↔ `truth[i]`).
pub fn write_synthetic_stream(
    dir: &Path,
    spec: &SyntheticSceneSpec,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<FrameTruth>> {
    let seq = generate_synthetic_sequence(spec, n_frames, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    render_background(spec, seed ^ 0x5EED)?.save(&dir.join("0.png"))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.image.save(&dir.join(format!("{}.png", i + 1)))?;
    }
    Ok(seq.truth)
}
