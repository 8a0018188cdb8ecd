//! `key = value` pipeline configuration.
//!
//! One file drives every stage. Lines are `dotted.key = value`; `#` starts a
//! comment; unknown keys are rejected; omitted keys keep their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, ScoreSettings, TrainSchedule};
use crate::mask::MaskBuildConfig;
use crate::motiongate::GateConfig;

/// What the flow sees of each product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// The whole camera frame.
    Original,
    /// The realigned crop with a fixed fraction trimmed from every side.
    Cropped,
    /// The realigned crop under the camera's composite mask.
    #[default]
    Masked,
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "original" => Ok(Self::Original),
            "cropped" => Ok(Self::Cropped),
            "masked" => Ok(Self::Masked),
            other => Err(format!("unknown input mode `{other}` (original, cropped, masked)")),
        }
    }
}

impl InputMode {
    fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Cropped => "cropped",
            Self::Masked => "masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    pub split_train: usize,
    pub split_val: usize,
    pub split_test: usize,
    pub seed: u64,
    pub cameras: u32,
    pub output_dir: PathBuf,

    pub gate: GateConfig,

    pub roi_min_area: usize,
    pub roi_margin: f64,
    /// Per-pixel difference threshold of the blob detector.
    pub roi_threshold: f64,
    pub roi_boxes: Option<PathBuf>,

    pub mask: MaskBuildConfig,
    pub mask_fill: f64,
    pub mask_center_tolerance: Option<f64>,
    pub mask_import: Option<PathBuf>,

    pub input_mode: InputMode,
    pub input_trim: f64,

    pub augment_enabled: bool,
    pub augment_interval: (f64, f64),

    pub features_import: Option<PathBuf>,

    pub flow: FlowConfig,
    pub schedule: TrainSchedule,
    pub score_transforms: usize,

    pub run_streams: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            split_train: 150,
            split_val: 60,
            split_test: 40,
            seed: 0,
            cameras: 4,
            output_dir: PathBuf::from("out"),
            gate: GateConfig::default(),
            roi_min_area: 50,
            roi_margin: 0.1,
            roi_threshold: 0.1,
            roi_boxes: None,
            mask: MaskBuildConfig::default(),
            mask_fill: 0.0,
            mask_center_tolerance: None,
            mask_import: None,
            input_mode: InputMode::Masked,
            input_trim: 0.1,
            augment_enabled: true,
            augment_interval: (0.5, 1.5),
            features_import: None,
            flow: FlowConfig::default(),
            schedule: TrainSchedule::default(),
            score_transforms: 4,
            run_streams: None,
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "dataset.root",
    "split.train",
    "split.val",
    "split.test",
    "seed",
    "cameras",
    "output.dir",
    "gate.threshold",
    "gate.band",
    "gate.settle",
    "gate.refractory",
    "roi.min_area",
    "roi.margin",
    "roi.threshold",
    "roi.boxes",
    "mask.theta_f",
    "mask.shrink",
    "mask.stride",
    "mask.min_votes",
    "mask.fill",
    "mask.center_tolerance",
    "mask.import",
    "input.mode",
    "input.trim",
    "augment.enabled",
    "augment.interval",
    "features.import",
    "flow.blocks",
    "flow.hidden",
    "flow.clamp",
    "flow.meta_epochs",
    "flow.sub_epochs",
    "flow.batch",
    "flow.lr",
    "flow.weight_decay",
    "flow.grad_clip",
    "flow.score_transforms",
    "flow.validate_every_sub_epoch",
    "eval.target_tpr",
    "run.streams",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn ranged(key: &str, v: &str, ok: impl Fn(f64) -> bool, what: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if x.is_finite() && ok(x) {
        Ok(x)
    } else {
        Err(Error::config(key, format!("{x} is outside {what}")))
    }
}

fn at_least(key: &str, v: &str, min: usize) -> Result<usize> {
    let x: usize = num(key, v)?;
    if x >= min {
        Ok(x)
    } else {
        Err(Error::config(key, format!("{x} is below the minimum {min}")))
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", i + 1)))?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        cfg.set(key, value)?;
    }
    cfg.check()?;
    Ok(cfg)
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unit_open = |x: f64| x > 0.0 && x < 1.0;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match key {
            "dataset.root" => self.dataset_root = optional_path(v),
            "split.train" => self.split_train = num(key, v)?,
            "split.val" => self.split_val = num(key, v)?,
            "split.test" => self.split_test = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "cameras" => self.cameras = at_least(key, v, 1)? as u32,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "gate.threshold" => self.gate.threshold = ranged(key, v, unit_open, "(0, 1)")?,
            "gate.band" => self.gate.band = ranged(key, v, |x| x > 0.0 && x <= 1.0, "(0, 1]")?,
            "gate.settle" => self.gate.settle = at_least(key, v, 1)?,
            "gate.refractory" => self.gate.refractory = num(key, v)?,
            "roi.min_area" => self.roi_min_area = at_least(key, v, 1)?,
            "roi.margin" => self.roi_margin = ranged(key, v, |x| (0.0..=2.0).contains(&x), "[0, 2]")?,
            "roi.threshold" => self.roi_threshold = ranged(key, v, unit_open, "(0, 1)")?,
            "roi.boxes" => self.roi_boxes = optional_path(v),
            "mask.theta_f" => self.mask.theta = ranged(key, v, unit, "[0, 1]")?,
            "mask.shrink" => self.mask.shrink = ranged(key, v, |x| (0.0..1.0).contains(&x), "[0, 1)")?,
            "mask.stride" => self.mask.stride = at_least(key, v, 1)?,
            "mask.min_votes" => self.mask.min_votes = at_least(key, v, 1)?,
            "mask.fill" => self.mask_fill = ranged(key, v, unit, "[0, 1]")?,
            "mask.center_tolerance" => {
                self.mask_center_tolerance = if v == "none" {
                    None
                } else {
                    Some(ranged(key, v, |x| x >= 0.0, "[0, inf)")?)
                }
            }
            "mask.import" => self.mask_import = optional_path(v),
            "input.mode" => self.input_mode = v.parse().map_err(|e: String| Error::config(key, e))?,
            "input.trim" => self.input_trim = ranged(key, v, |x| (0.0..0.5).contains(&x), "[0, 0.5)")?,
            "augment.enabled" => self.augment_enabled = boolean(key, v)?,
            "augment.interval" => {
                let (lo, hi) = v
                    .split_once(',')
                    .ok_or_else(|| Error::config(key, "expected `lo,hi`"))?;
                let lo = ranged(key, lo.trim(), |x| x >= 0.0, "[0, inf)")?;
                let hi = ranged(key, hi.trim(), |x| x >= 0.0, "[0, inf)")?;
                if lo > hi {
                    return Err(Error::config(key, format!("lower bound {lo} exceeds upper bound {hi}")));
                }
                self.augment_interval = (lo, hi);
            }
            "features.import" => self.features_import = optional_path(v),
            "flow.blocks" => self.flow.blocks = at_least(key, v, 1)?,
            "flow.hidden" => self.flow.hidden = num(key, v)?,
            "flow.clamp" => self.flow.clamp = ranged(key, v, |x| x > 0.0, "(0, inf)")?,
            "flow.meta_epochs" => self.schedule.meta_epochs = at_least(key, v, 1)?,
            "flow.sub_epochs" => self.schedule.sub_epochs = at_least(key, v, 1)?,
            "flow.batch" => self.schedule.batch_size = at_least(key, v, 1)?,
            "flow.lr" => self.schedule.learning_rate = ranged(key, v, |x| x > 0.0, "(0, inf)")?,
            "flow.weight_decay" => self.schedule.weight_decay = ranged(key, v, |x| x >= 0.0, "[0, inf)")?,
            "flow.grad_clip" => self.schedule.grad_clip = ranged(key, v, |x| x > 0.0, "(0, inf)")?,
            "flow.score_transforms" => self.score_transforms = at_least(key, v, 1)?,
            "flow.validate_every_sub_epoch" => self.schedule.validate_every_sub_epoch = boolean(key, v)?,
            "eval.target_tpr" => self.schedule.target_tpr = ranged(key, v, |x| x > 0.0 && x <= 1.0, "(0, 1]")?,
            "run.streams" => self.run_streams = optional_path(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-key checks that single assignments cannot catch.
    pub fn check(&self) -> Result<()> {
        if self.gate.settle == 0 {
            return Err(Error::config("gate.settle", "must be at least 1"));
        }
        Ok(())
    }

    /// Seeds derived from the global `seed` for each randomized stage.
    pub fn split_seed(&self) -> u64 {
        self.seed
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            seed: self.seed.wrapping_add(1),
            ..self.flow
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed.wrapping_add(2),
            ..self.schedule
        }
    }

    pub fn score_settings(&self, item_seed: u64) -> ScoreSettings {
        ScoreSettings {
            n_transforms: self.score_transforms,
            interval: self.augment_interval,
            seed: self.seed.wrapping_add(3).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ item_seed,
        }
    }

    /// Value of `key` in the same syntax [`parse_config`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset.root" => show_path(&self.dataset_root),
            "split.train" => self.split_train.to_string(),
            "split.val" => self.split_val.to_string(),
            "split.test" => self.split_test.to_string(),
            "seed" => self.seed.to_string(),
            "cameras" => self.cameras.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            "gate.threshold" => self.gate.threshold.to_string(),
            "gate.band" => self.gate.band.to_string(),
            "gate.settle" => self.gate.settle.to_string(),
            "gate.refractory" => self.gate.refractory.to_string(),
            "roi.min_area" => self.roi_min_area.to_string(),
            "roi.margin" => self.roi_margin.to_string(),
            "roi.threshold" => self.roi_threshold.to_string(),
            "roi.boxes" => show_path(&self.roi_boxes),
            "mask.theta_f" => self.mask.theta.to_string(),
            "mask.shrink" => self.mask.shrink.to_string(),
            "mask.stride" => self.mask.stride.to_string(),
            "mask.min_votes" => self.mask.min_votes.to_string(),
            "mask.fill" => self.mask_fill.to_string(),
            "mask.center_tolerance" => self
                .mask_center_tolerance
                .map_or_else(|| "none".to_string(), |t| t.to_string()),
            "mask.import" => show_path(&self.mask_import),
            "input.mode" => self.input_mode.as_str().to_string(),
            "input.trim" => self.input_trim.to_string(),
            "augment.enabled" => self.augment_enabled.to_string(),
            "augment.interval" => format!("{},{}", self.augment_interval.0, self.augment_interval.1),
            "features.import" => show_path(&self.features_import),
            "flow.blocks" => self.flow.blocks.to_string(),
            "flow.hidden" => self.flow.hidden.to_string(),
            "flow.clamp" => self.flow.clamp.to_string(),
            "flow.meta_epochs" => self.schedule.meta_epochs.to_string(),
            "flow.sub_epochs" => self.schedule.sub_epochs.to_string(),
            "flow.batch" => self.schedule.batch_size.to_string(),
            "flow.lr" => self.schedule.learning_rate.to_string(),
            "flow.weight_decay" => self.schedule.weight_decay.to_string(),
            "flow.grad_clip" => self.schedule.grad_clip.to_string(),
            "flow.score_transforms" => self.score_transforms.to_string(),
            "flow.validate_every_sub_epoch" => self.schedule.validate_every_sub_epoch.to_string(),
            "eval.target_tpr" => self.schedule.target_tpr.to_string(),
            "run.streams" => show_path(&self.run_streams),
            _ => return None,
        })
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("every listed key renders"));
        }
        s
    }

    /// SHA-256 of the rendered configuration without the output directory,
    /// so identical runs into different directories hash alike.
    pub fn hash(&self) -> String {
        let text: String = self
            .render()
            .lines()
            .filter(|l| !l.starts_with("output.dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Makes relative paths relative to `base` (normally the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.dataset_root,
            &mut self.roi_boxes,
            &mut self.mask_import,
            &mut self.features_import,
            &mut self.run_streams,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }
}
