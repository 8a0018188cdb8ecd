//! Stage wiring: scan, mask-build, train, eval and run.
//!
//! Each stage reads the configuration plus the artifacts earlier stages left
//! in the output directory, and writes its own artifacts there and nowhere
//! else. Every random choice is seeded from the configuration, so repeating a
//! stage with the same inputs reproduces its files byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::annotate_frame;
use crate::config::{InputMode, PipelineConfig};
use crate::dataset::{reference_path, scan_dataset, split_dataset, DatasetIndex, DatasetItem, Label, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_cameras, classify, evaluate, roc_csv, scores_jsonl, AnomalyThreshold, Confusion, EvalReport, ScoredItem,
};
use crate::features::{
    extract_features, feature_dim, load_precomputed, photometric, resize_to_model, sample_factors, MODEL_SIDE,
};
use crate::flow::{anomaly_score, feature_nll, history_csv, train_flow, FlowModel, ModelFile, TrainingData};
use crate::image::{Frame, Image};
use crate::mask::{apply_mask, composite_mask_with_votes, per_frame_mask, shrink_and_pad, Mask};
use crate::motiongate::run_gate;
use crate::roi::{detect_blob_roi, parse_bbox_records, realign_crop, BoundingBox};

pub const INDEX_FILE: &str = "index.json";
pub const MASK_DIR: &str = "masks";
pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const RUN_DIR: &str = "run";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Optional `<product> <good|defective>` lines inside the streams directory.
pub const STREAM_LABELS_FILE: &str = "labels.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Scan,
    MaskBuild,
    Train,
    Eval,
    Run,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Scan, Stage::MaskBuild, Stage::Train, Stage::Eval, Stage::Run];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Scan => "scan",
            Stage::MaskBuild => "mask-build",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Run => "run",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Arg(format!("unknown stage `{s}`")))
    }
}

/// Output of `scan`: the seeded split of the scanned dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub config_hash: String,
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

/// Output of `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub n_items: usize,
    pub auroc: f64,
    /// Threshold chosen on the validation split.
    pub threshold: f64,
    pub target_tpr: f64,
    /// Rates on the evaluated split at that threshold.
    pub tpr: f64,
    pub fpr: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl ReportFile {
    pub fn from_report(config_hash: &str, n_items: usize, r: &EvalReport) -> Self {
        let c = r.confusion;
        let rate = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        Self {
            config_hash: config_hash.to_string(),
            n_items,
            auroc: r.auroc,
            threshold: r.threshold.value,
            target_tpr: r.threshold.target_tpr,
            tpr: rate(c.tp, c.fn_),
            fpr: rate(c.fp, c.tn),
            accuracy: r.accuracy,
            confusion: c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub camera: u32,
    pub stream: String,
    /// Stream positions at which the motion gate fired.
    pub triggers: Vec<u64>,
    /// Highest anomaly score over the triggers.
    pub score: Option<f64>,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product: String,
    pub cameras: Vec<CameraRecord>,
    /// Defective if any camera with a decision flagged the product.
    pub label: Option<Label>,
    pub truth: Option<Label>,
}

/// Output of `run`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub threshold: f64,
    pub products: Vec<ProductRecord>,
    /// Product-level evaluation when every product has a decision and a
    /// ground-truth label and both labels occur.
    pub summary: Option<ReportFile>,
}

/// One line of the annotated-frame manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stream: String,
    pub frame: u64,
    pub file: String,
    pub bbox: Option<[usize; 4]>,
    pub label: Option<Label>,
    pub score: Option<f64>,
}

/// Runs one stage and returns the paths it wrote.
pub fn run_pipeline(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    let result = match stage {
        Stage::Scan => stage_scan(cfg),
        Stage::MaskBuild => stage_mask_build(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Eval => stage_eval(cfg),
        Stage::Run => stage_run(cfg),
    };
    result.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        other => Error::stage(stage.name(), other.to_string()),
    })
}

fn stage_err(stage: Stage, reason: impl Into<String>) -> Error {
    Error::stage(stage.name(), reason)
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    Ok(&cfg.output_dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn require(stage: Stage, path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(stage_err(stage, format!("{what} not found: {}", path.display())))
    }
}

fn dataset_root(cfg: &PipelineConfig, stage: Stage) -> Result<&Path> {
    let root = cfg
        .dataset_root
        .as_deref()
        .ok_or_else(|| stage_err(stage, "dataset.root is not set"))?;
    require(stage, root, "dataset root")?;
    Ok(root)
}

fn check_optional_inputs(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    for (key, p) in [
        ("roi.boxes", &cfg.roi_boxes),
        ("mask.import", &cfg.mask_import),
        ("features.import", &cfg.features_import),
    ] {
        if let Some(p) = p {
            require(stage, p, key)?;
        }
    }
    Ok(())
}

fn load_index(cfg: &PipelineConfig, stage: Stage) -> Result<IndexFile> {
    let path = cfg.output_dir.join(INDEX_FILE);
    require(stage, &path, "dataset index (run scan first)")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_model(cfg: &PipelineConfig, stage: Stage) -> Result<ModelFile> {
    let path = cfg.output_dir.join(MODEL_FILE);
    if !path.exists() {
        return Err(stage_err(stage, "model file not found"));
    }
    let file = ModelFile::load(&path, None)?;
    let expected = if file.channels == 0 {
        if cfg.features_import.is_none() {
            return Err(stage_err(
                stage,
                "model was trained on imported features but features.import is not set",
            ));
        }
        file.model.dim()
    } else {
        feature_dim(file.channels)
    };
    if expected != file.model.dim() {
        return Err(Error::Shape(format!(
            "model expects {}-dimensional features, extractor yields {expected}",
            file.model.dim()
        )));
    }
    Ok(file)
}

/// Stable per-item seed for scoring transforms.
pub fn item_seed(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn mask_path(cfg: &PipelineConfig, camera: u32) -> PathBuf {
    cfg.output_dir.join(MASK_DIR).join(format!("camera{camera}.png"))
}

fn check_camera(cfg: &PipelineConfig, stage: Stage, camera: u32) -> Result<()> {
    if camera < cfg.cameras {
        Ok(())
    } else {
        Err(stage_err(
            stage,
            format!("camera {camera} outside the configured {} cameras", cfg.cameras),
        ))
    }
}

// ---------------------------------------------------------------------------
// Input preparation

/// Model input derived from one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    /// 448×448 raster handed to the extractor.
    pub image: Image,
    pub bbox: Option<BoundingBox>,
}

/// Localizes the product (unless `bbox` is given) and builds the model input
/// for the configured input mode.
pub fn prepare_input(
    cfg: &PipelineConfig,
    frame: &Image,
    reference: Option<&Image>,
    mask: Option<&Mask>,
    bbox: Option<BoundingBox>,
) -> Result<PreparedInput> {
    let bbox = match (bbox, reference) {
        (Some(b), _) => Some(b),
        (None, Some(r)) => detect_blob_roi(frame, r, cfg.roi_threshold, cfg.roi_min_area)?,
        (None, None) => None,
    };
    let located = || bbox.ok_or_else(|| Error::Degenerate("no product found in frame".into()));
    let image = match cfg.input_mode {
        InputMode::Original => resize_to_model(frame)?,
        InputMode::Cropped => {
            let crop = realign_crop(frame, &located()?, cfg.roi_margin, 0)?.image;
            let side = crop.width();
            let t = (side as f64 * cfg.input_trim).round() as usize;
            let inner = side.saturating_sub(2 * t).max(1);
            resize_to_model(&crop.window(t as i64, t as i64, inner, inner, 0.0))?
        }
        InputMode::Masked => {
            let mask = mask.ok_or_else(|| Error::Arg("masked input needs a composite mask".into()))?;
            let crop = realign_crop(frame, &located()?, cfg.roi_margin, 0)?.image;
            let resized = resize_to_model(&crop)?;
            let mask = if mask.dims() == resized.dims() {
                mask.clone()
            } else {
                mask.resize_nearest(resized.width(), resized.height())
            };
            apply_mask(&resized, &mask, cfg.mask_fill)?
        }
    };
    Ok(PreparedInput { image, bbox })
}

/// Per-frame foreground masks of crops against the same window of the
/// reference, united and shrunk. Frames without a detected product, and
/// frames whose mask centroid strays beyond `mask.center_tolerance` (as a
/// fraction of the side) from the centre, are skipped.
pub fn build_camera_mask(
    cfg: &PipelineConfig,
    frames: &[(Image, Option<BoundingBox>)],
    reference: &Image,
) -> Result<Mask> {
    let mut masks = Vec::new();
    for (frame, given) in frames.iter().step_by(cfg.mask.stride) {
        let bbox = match given {
            Some(b) => Some(*b),
            None => detect_blob_roi(frame, reference, cfg.roi_threshold, cfg.roi_min_area)?,
        };
        let Some(bbox) = bbox else { continue };
        let crop = resize_to_model(&realign_crop(frame, &bbox, cfg.roi_margin, 0)?.image)?;
        let back = resize_to_model(&realign_crop(reference, &bbox, cfg.roi_margin, 0)?.image)?;
        let m = per_frame_mask(&crop, &back, cfg.mask.theta)?;
        if let Some(tol) = cfg.mask_center_tolerance {
            let centre = MODEL_SIDE as f64 / 2.0;
            let off = m
                .centroid()
                .map_or(f64::INFINITY, |(x, y)| (x - centre).abs().max((y - centre).abs()));
            if off > tol * MODEL_SIDE as f64 {
                continue;
            }
        }
        masks.push(m);
    }
    if masks.is_empty() {
        return Err(Error::Degenerate("no usable frames for the composite mask".into()));
    }
    shrink_and_pad(&composite_mask_with_votes(&masks, cfg.mask.min_votes)?, cfg.mask.shrink)
}

/// Imported boxes keyed by `(camera, frame)`.
fn load_boxes(cfg: &PipelineConfig) -> Result<BTreeMap<(u32, u64), BoundingBox>> {
    let mut out = BTreeMap::new();
    let Some(path) = &cfg.roi_boxes else {
        return Ok(out);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for r in parse_bbox_records(&text)? {
        if out.insert((r.camera, r.frame), r.bbox()).is_some() {
            return Err(Error::Arg(format!(
                "duplicate box for camera {} frame {}",
                r.camera, r.frame
            )));
        }
    }
    Ok(out)
}

/// Frames, references and masks needed to prepare dataset items.
struct ItemSource<'a> {
    cfg: &'a PipelineConfig,
    root: &'a Path,
    boxes: BTreeMap<(u32, u64), BoundingBox>,
    references: BTreeMap<u32, Image>,
    masks: BTreeMap<u32, Mask>,
    features: Option<BTreeMap<String, Vec<f64>>>,
}

impl<'a> ItemSource<'a> {
    fn new(
        cfg: &'a PipelineConfig,
        stage: Stage,
        cameras: impl IntoIterator<Item = u32>,
        with_masks: bool,
    ) -> Result<Self> {
        let root = dataset_root(cfg, stage)?;
        check_optional_inputs(cfg, stage)?;
        let features = match &cfg.features_import {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Some(
                    load_precomputed(&text)?
                        .into_iter()
                        .map(|(id, fv)| (id, fv.values))
                        .collect(),
                )
            }
            None => None,
        };
        let mut src = Self {
            cfg,
            root,
            boxes: load_boxes(cfg)?,
            references: BTreeMap::new(),
            masks: BTreeMap::new(),
            features,
        };
        if src.features.is_some() {
            return Ok(src);
        }
        let needs_reference = cfg.input_mode != InputMode::Original || !with_masks;
        for camera in cameras {
            check_camera(cfg, stage, camera)?;
            if needs_reference {
                let path = reference_path(root, camera);
                require(stage, &path, "reference frame")?;
                src.references.insert(camera, Image::load(&path)?);
            }
            if with_masks && cfg.input_mode == InputMode::Masked {
                let path = mask_path(cfg, camera);
                require(
                    stage,
                    &path,
                    &format!("mask for camera {camera} (run mask-build first)"),
                )?;
                src.masks.insert(camera, Mask::load_png(&path)?);
            }
        }
        Ok(src)
    }

    fn frame(&self, item: &DatasetItem) -> Result<Image> {
        Image::load(&self.root.join(&item.id))
    }

    fn given_box(&self, item: &DatasetItem) -> Option<BoundingBox> {
        self.boxes.get(&(item.camera, item.frame)).copied()
    }

    fn input(&self, item: &DatasetItem) -> Result<ModelInput> {
        if let Some(features) = &self.features {
            return features
                .get(&item.id)
                .map(|v| ModelInput::Features(v.clone()))
                .ok_or_else(|| Error::Arg(format!("no imported features for {}", item.id)));
        }
        let prepared = prepare_input(
            self.cfg,
            &self.frame(item)?,
            self.references.get(&item.camera),
            self.masks.get(&item.camera),
            self.given_box(item),
        )
        .map_err(|e| Error::Item {
            path: self.root.join(&item.id),
            reason: e.to_string(),
        })?;
        Ok(ModelInput::Image(prepared.image))
    }
}

#[derive(Clone, Debug)]
enum ModelInput {
    Image(Image),
    Features(Vec<f64>),
}

impl ModelInput {
    fn identity_features(&self) -> Result<Vec<f64>> {
        match self {
            ModelInput::Image(img) => Ok(extract_features(img)?.values),
            ModelInput::Features(v) => Ok(v.clone()),
        }
    }

    fn channels(&self) -> usize {
        match self {
            ModelInput::Image(img) => img.channels(),
            ModelInput::Features(_) => 0,
        }
    }

    fn score(&self, cfg: &PipelineConfig, model: &FlowModel, id: &str) -> Result<f64> {
        match self {
            ModelInput::Image(img) => Ok(anomaly_score(model, img, &cfg.score_settings(item_seed(id)))?.value),
            ModelInput::Features(v) => feature_nll(model, v),
        }
    }
}

// ---------------------------------------------------------------------------
// Stages

fn stage_scan(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let root = dataset_root(cfg, Stage::Scan)?;
    let index = scan_dataset(root)?;
    for item in &index.items {
        check_camera(cfg, Stage::Scan, item.camera)?;
    }
    let (train, val, test) = split_dataset(
        &index,
        SplitSpec {
            n_train: cfg.split_train,
            n_val: cfg.split_val,
            n_test: cfg.split_test,
            seed: cfg.split_seed(),
        },
    )?;
    let file = IndexFile {
        config_hash: cfg.hash(),
        train,
        val,
        test,
    };
    let mut written = Vec::new();
    let out = out_dir(cfg)?;
    write(
        &out.join(INDEX_FILE),
        serde_json::to_string_pretty(&file)?,
        &mut written,
    )?;
    Ok(written)
}

fn cameras_of(items: &[DatasetItem]) -> Vec<u32> {
    let mut c: Vec<u32> = items.iter().map(|i| i.camera).collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn stage_mask_build(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let stage = Stage::MaskBuild;
    let index = load_index(cfg, stage)?;
    let cameras = cameras_of(&index.train.items);
    let src = ItemSource::new(cfg, stage, cameras.iter().copied(), false)?;
    let out = out_dir(cfg)?.join(MASK_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut written = Vec::new();
    for &camera in &cameras {
        let mask = match &cfg.mask_import {
            Some(dir) => {
                let path = dir.join(format!("camera{camera}.png"));
                require(stage, &path, "imported mask")?;
                Mask::load_png(&path)?.resize_nearest(MODEL_SIDE, MODEL_SIDE)
            }
            None => {
                let reference = src
                    .references
                    .get(&camera)
                    .ok_or_else(|| stage_err(stage, format!("no reference frame for camera {camera}")))?;
                let frames = index
                    .train
                    .items
                    .iter()
                    .filter(|i| i.camera == camera)
                    .map(|i| Ok((src.frame(i)?, src.given_box(i))))
                    .collect::<Result<Vec<_>>>()?;
                build_camera_mask(cfg, &frames, reference)
                    .map_err(|e| stage_err(stage, format!("camera {camera}: {e}")))?
            }
        };
        let path = out.join(format!("camera{camera}.png"));
        mask.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Training data drawn from prepared dataset items. Augmented passes redraw
/// photometric factors per item from a stream seeded by the pass number.
struct PreparedTraining<'a> {
    cfg: &'a PipelineConfig,
    train: Vec<ModelInput>,
    identity: Vec<Vec<f64>>,
    val: Vec<(DatasetItem, ModelInput)>,
    seed: u64,
}

impl PreparedTraining<'_> {
    fn augmented(&self, pass_seed: u64) -> Result<Vec<Vec<f64>>> {
        let (lo, hi) = self.cfg.augment_interval;
        let mut rng = ChaCha8Rng::seed_from_u64(pass_seed);
        self.train
            .iter()
            .zip(&self.identity)
            .map(|(input, id_features)| match input {
                ModelInput::Image(img) => {
                    let f = sample_factors(&mut rng, lo, hi)?;
                    Ok(extract_features(&photometric(img, &f))?.values)
                }
                ModelInput::Features(_) => Ok(id_features.clone()),
            })
            .collect()
    }

    fn augmenting(&self) -> bool {
        self.cfg.augment_enabled && matches!(self.train.first(), Some(ModelInput::Image(_)))
    }
}

impl TrainingData for PreparedTraining<'_> {
    /// Un-augmented features, plus one augmented draw when augmentation is
    /// on so the standardizer sees the spread the flow will be trained on.
    fn reference_features(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut rows = self.identity.clone();
        if self.augmenting() {
            rows.extend(self.augmented(self.seed ^ u64::MAX)?);
        }
        Ok(rows)
    }

    fn epoch_features(&mut self, epoch: usize) -> Result<Vec<Vec<f64>>> {
        if self.augmenting() {
            self.augmented(self.seed.wrapping_add(epoch as u64))
        } else {
            Ok(self.identity.clone())
        }
    }

    fn validation_scores(&mut self, model: &FlowModel) -> Result<Vec<ScoredItem>> {
        self.val
            .iter()
            .map(|(item, input)| {
                Ok(ScoredItem::new(
                    item.id.clone(),
                    item.camera,
                    input.score(self.cfg, model, &item.id)?,
                    item.label,
                ))
            })
            .collect()
    }
}

fn stage_train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let stage = Stage::Train;
    let index = load_index(cfg, stage)?;
    if index.train.is_empty() {
        return Err(stage_err(stage, "training split is empty"));
    }
    let mut cameras = cameras_of(&index.train.items);
    cameras.extend(cameras_of(&index.val.items));
    cameras.sort_unstable();
    cameras.dedup();
    let src = ItemSource::new(cfg, stage, cameras, true)?;

    let train = index
        .train
        .items
        .iter()
        .map(|i| src.input(i))
        .collect::<Result<Vec<_>>>()?;
    let channels = train[0].channels();
    if train.iter().any(|t| t.channels() != channels) {
        return Err(stage_err(stage, "training images mix grayscale and colour"));
    }
    let identity = train
        .iter()
        .map(ModelInput::identity_features)
        .collect::<Result<Vec<_>>>()?;
    let val = index
        .val
        .items
        .iter()
        .map(|i| Ok((i.clone(), src.input(i)?)))
        .collect::<Result<Vec<_>>>()?;
    let dim = identity[0].len();

    let schedule = cfg.train_schedule();
    let mut data = PreparedTraining {
        cfg,
        train,
        identity,
        val,
        seed: schedule.seed.wrapping_mul(31).wrapping_add(7),
    };
    let model = FlowModel::from_config(dim, &cfg.flow_config())?;
    let (model, history) = train_flow(model, &mut data, &schedule)?;
    let threshold = history.last().map(|h| h.threshold);

    let file = ModelFile {
        version: ModelFile::VERSION,
        channels,
        threshold,
        config_hash: cfg.hash(),
        model,
    };
    let out = out_dir(cfg)?;
    let mut written = Vec::new();
    let model_path = out.join(MODEL_FILE);
    file.save(&model_path)?;
    written.push(model_path);
    write(&out.join(HISTORY_FILE), history_csv(&history), &mut written)?;
    Ok(written)
}

fn model_threshold(stage: Stage, file: &ModelFile) -> Result<AnomalyThreshold> {
    file.threshold
        .ok_or_else(|| stage_err(stage, "model file carries no validated threshold"))
}

fn stage_eval(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let stage = Stage::Eval;
    let file = load_model(cfg, stage)?;
    let threshold = model_threshold(stage, &file)?;
    let index = load_index(cfg, stage)?;
    let src = ItemSource::new(cfg, stage, cameras_of(&index.test.items), true)?;
    let scored = index
        .test
        .items
        .iter()
        .map(|i| {
            let input = src.input(i)?;
            Ok(ScoredItem::new(
                i.id.clone(),
                i.camera,
                input.score(cfg, &file.model, &i.id)?,
                i.label,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&scored, threshold)?;
    let out = out_dir(cfg)?;
    let mut written = Vec::new();
    let summary = ReportFile::from_report(&cfg.hash(), scored.len(), &report);
    write(
        &out.join(REPORT_FILE),
        serde_json::to_string_pretty(&summary)?,
        &mut written,
    )?;
    write(&out.join(ROC_FILE), roc_csv(&report.roc), &mut written)?;
    write(&out.join(SCORES_FILE), scores_jsonl(&scored), &mut written)?;
    Ok(written)
}

/// `<product>_camera<k>` → `(product, k)`.
pub fn parse_stream_name(name: &str) -> Option<(String, u32)> {
    let (product, cam) = name.rsplit_once("_camera")?;
    if product.is_empty() {
        return None;
    }
    Some((product.to_string(), cam.parse().ok()?))
}

/// Numbered frames of a stream directory in numeric order.
fn stream_frames(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"));
        let n = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok());
        if let (true, Some(n)) = (ext_ok, n) {
            frames.push((n, path));
        }
    }
    frames.sort();
    Ok(frames)
}

fn stream_truth(dir: &Path) -> Result<BTreeMap<String, Label>> {
    let path = dir.join(STREAM_LABELS_FILE);
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(product), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(i + 1, "expected `<product> <good|defective>`"));
        };
        let label = match label {
            "good" => Label::Good,
            "defective" => Label::Defective,
            other => return Err(Error::parse(i + 1, format!("unknown label `{other}`"))),
        };
        out.insert(product.to_string(), label);
    }
    Ok(out)
}

fn stage_run(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let stage = Stage::Run;
    let streams_dir = cfg
        .run_streams
        .as_deref()
        .ok_or_else(|| stage_err(stage, "run.streams is not set"))?;
    require(stage, streams_dir, "streams directory")?;
    let file = load_model(cfg, stage)?;
    if file.channels == 0 {
        return Err(stage_err(stage, "run needs a model trained on image features"));
    }
    let threshold = model_threshold(stage, &file)?;
    let truth = stream_truth(streams_dir)?;

    let mut streams = Vec::new();
    for entry in fs::read_dir(streams_dir).map_err(|e| Error::io(streams_dir, e))? {
        let path = entry.map_err(|e| Error::io(streams_dir, e))?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let (product, camera) = parse_stream_name(&name)
            .ok_or_else(|| stage_err(stage, format!("stream directory `{name}` is not <product>_camera<k>")))?;
        check_camera(cfg, stage, camera)?;
        streams.push((product, camera, name, path));
    }
    streams.sort();
    if streams.is_empty() {
        return Err(stage_err(stage, "no streams found"));
    }

    let run_dir = out_dir(cfg)?.join(RUN_DIR);
    let mut written = Vec::new();
    let mut manifest = String::new();
    let mut products: BTreeMap<String, Vec<CameraRecord>> = BTreeMap::new();
    for (product, camera, name, path) in &streams {
        let mask = if cfg.input_mode == InputMode::Masked {
            let p = mask_path(cfg, *camera);
            require(stage, &p, &format!("mask for camera {camera} (run mask-build first)"))?;
            Some(Mask::load_png(&p)?)
        } else {
            None
        };
        let frames = stream_frames(path)?
            .into_iter()
            .map(|(n, p)| Ok((n, Image::load(&p)?)))
            .collect::<Result<Vec<_>>>()?;
        let Some((_, reference)) = frames.first() else {
            return Err(stage_err(stage, format!("stream `{name}` has no frames")));
        };
        let triggers = run_gate(frames.iter().map(|(_, f)| f), &cfg.gate)?;

        let mut best: Option<f64> = None;
        let mut trigger_frames = Vec::new();
        for t in &triggers {
            let (n, frame) = &frames[t.frame as usize];
            trigger_frames.push(*n);
            let prepared = prepare_input(cfg, frame, Some(reference), mask.as_ref(), None)?;
            let id = format!("{name}/{n}");
            let score = anomaly_score(&file.model, &prepared.image, &cfg.score_settings(item_seed(&id)))?.value;
            best = Some(best.map_or(score, |b: f64| b.max(score)));
        }
        let label = best.map(|s| classify(s, threshold.value));

        let dir = run_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (n, frame) in frames.iter().skip(1) {
            let bbox = detect_blob_roi(frame, reference, cfg.roi_threshold, cfg.roi_min_area)?;
            let meta_frame = Frame::new(frame.clone(), *camera, *n);
            let drawn = match (bbox, label, best) {
                (Some(b), Some(l), Some(s)) => annotate_frame(&meta_frame, &b, l, s)?.image,
                _ => frame.to_rgb(),
            };
            let file_name = format!("{n}.png");
            let out_path = dir.join(&file_name);
            drawn.save(&out_path)?;
            written.push(out_path);
            let entry = ManifestEntry {
                stream: name.clone(),
                frame: *n,
                file: format!("{name}/{file_name}"),
                bbox: bbox.map(|b| [b.x, b.y, b.w, b.h]),
                label: bbox.and(label),
                score: bbox.and(best),
            };
            manifest.push_str(&serde_json::to_string(&entry)?);
            manifest.push('\n');
        }
        products.entry(product.clone()).or_default().push(CameraRecord {
            camera: *camera,
            stream: name.clone(),
            triggers: trigger_frames,
            score: best,
            label,
        });
    }

    let mut records = Vec::new();
    for (product, cameras) in products {
        let decisions: Vec<Label> = cameras.iter().filter_map(|c| c.label).collect();
        let label = if decisions.is_empty() {
            None
        } else {
            Some(aggregate_cameras(&decisions)?)
        };
        records.push(ProductRecord {
            truth: truth.get(&product).copied(),
            product,
            cameras,
            label,
        });
    }
    let summary = product_summary(&cfg.hash(), &records, threshold)?;
    let report = RunReport {
        config_hash: cfg.hash(),
        threshold: threshold.value,
        products: records,
        summary,
    };
    write(&run_dir.join(MANIFEST_FILE), manifest, &mut written)?;
    write(
        &run_dir.join(RUN_REPORT_FILE),
        serde_json::to_string_pretty(&report)?,
        &mut written,
    )?;
    Ok(written)
}

/// Product-level evaluation with each product scored by its highest camera
/// score, which classifies exactly like the OR of the camera decisions.
fn product_summary(hash: &str, records: &[ProductRecord], threshold: AnomalyThreshold) -> Result<Option<ReportFile>> {
    let mut items = Vec::new();
    for r in records {
        let best = r
            .cameras
            .iter()
            .filter_map(|c| c.score)
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        match (best, r.truth) {
            (Some(score), Some(truth)) => items.push(ScoredItem::new(r.product.clone(), 0, score, truth)),
            _ => return Ok(None),
        }
    }
    let both = items.iter().any(|i| i.label == Label::Good) && items.iter().any(|i| i.label == Label::Defective);
    if !both {
        return Ok(None);
    }
    let report = evaluate(&items, threshold)?;
    Ok(Some(ReportFile::from_report(hash, items.len(), &report)))
}
