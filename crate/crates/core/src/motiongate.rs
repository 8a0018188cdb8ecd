//! Motion gate: fires one trigger per product transit through the centre
//! band of a camera view, so localisation runs once per object.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Minimum mean absolute difference to the reference.
    pub threshold: f64,
    /// Width of the centred trigger band as a fraction of frame width.
    pub band: f64,
    /// Consecutive qualifying frames needed to fire.
    pub settle: usize,
    /// Frames after a trigger during which nothing fires.
    pub refractory: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.02,
            band: 0.2,
            settle: 2,
            refractory: 10,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Arg(format!("gate threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.band > 0.0 && self.band <= 1.0) {
            return Err(Error::Arg(format!("gate band {} outside (0, 1]", self.band)));
        }
        if self.settle == 0 {
            return Err(Error::Arg("gate settle must be at least 1".into()));
        }
        Ok(())
    }

    fn band_bounds(&self, width: usize) -> (f64, f64) {
        let w = width as f64;
        (w * (1.0 - self.band) / 2.0, w * (1.0 + self.band) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Tracking,
    Fired,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub phase: Phase,
    pub in_band: usize,
    pub refractory_left: usize,
    /// Frames consumed so far.
    pub frames_seen: u64,
    pub reference: Arc<Image>,
}

impl GateState {
    pub fn new(reference: Image) -> Self {
        Self {
            phase: Phase::Idle,
            in_band: 0,
            refractory_left: 0,
            frames_seen: 0,
            reference: Arc::new(reference),
        }
    }

    /// Restarts the gate against a new empty-belt reference.
    pub fn reseed(&self, reference: Image) -> Self {
        Self {
            frames_seen: self.frames_seen,
            ..Self::new(reference)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Zero-based position of the triggering frame in the stream.
    pub frame: u64,
    pub energy: f64,
    pub centroid_x: f64,
}

/// Mean over pixels of the channel-averaged absolute difference.
pub fn motion_energy(frame: &Image, reference: &Image) -> Result<f64> {
    let diff = frame.abs_diff_map(reference)?;
    if diff.is_empty() {
        return Ok(0.0);
    }
    Ok(diff.iter().sum::<f64>() / diff.len() as f64)
}

/// Difference-weighted mean column (pixel centres), `None` for identical frames.
pub fn motion_centroid_x(frame: &Image, reference: &Image) -> Result<Option<f64>> {
    let diff = frame.abs_diff_map(reference)?;
    let w = frame.width();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, d) in diff.iter().enumerate() {
        num += d * ((i % w) as f64 + 0.5);
        den += d;
    }
    Ok((den > 0.0).then(|| num / den))
}

/// Advances the gate by one frame.
pub fn gate_step(state: &GateState, frame: &Image, config: &GateConfig) -> Result<(GateState, Option<Trigger>)> {
    let energy = motion_energy(frame, &state.reference)?;
    let centroid = motion_centroid_x(frame, &state.reference)?;
    let (lo, hi) = config.band_bounds(frame.width());
    let qualifies = energy >= config.threshold && centroid.is_some_and(|c| c >= lo && c <= hi);

    let mut next = state.clone();
    let frame_no = state.frames_seen;
    next.frames_seen += 1;
    let mut event = None;
    match state.phase {
        Phase::Fired => {
            next.refractory_left = state.refractory_left.saturating_sub(1);
            // stay latched until the refractory period ends and the object has left the band
            if state.refractory_left == 0 && !qualifies {
                next.phase = Phase::Idle;
                next.in_band = 0;
            }
        }
        Phase::Idle | Phase::Tracking => {
            if qualifies {
                next.in_band = state.in_band + 1;
                if next.in_band >= config.settle {
                    next.phase = Phase::Fired;
                    next.refractory_left = config.refractory;
                    event = Some(Trigger {
                        frame: frame_no,
                        energy,
                        centroid_x: centroid.unwrap_or_default(),
                    });
                } else {
                    next.phase = Phase::Tracking;
                }
            } else {
                next.phase = Phase::Idle;
                next.in_band = 0;
            }
        }
    }
    Ok((next, event))
}

/// Runs a gate over a whole stream whose first frame is the reference.
pub fn run_gate<'a>(frames: impl IntoIterator<Item = &'a Image>, config: &GateConfig) -> Result<Vec<Trigger>> {
    let mut it = frames.into_iter();
    let Some(first) = it.next() else {
        return Ok(Vec::new());
    };
    let mut state = GateState::new(first.clone());
    let (s, e) = gate_step(&state, first, config)?;
    state = s;
    let mut out: Vec<Trigger> = e.into_iter().collect();
    for f in it {
        let (s, e) = gate_step(&state, f, config)?;
        state = s;
        out.extend(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_sequence, render_background, SyntheticSceneSpec};

    #[test]
    fn energy_cases() {
        let a = Image::new(10, 10, 1);
        assert_eq!(motion_energy(&a, &a).unwrap(), 0.0);
        assert_eq!(motion_energy(&a, &Image::filled(10, 10, 1, 1.0)).unwrap(), 1.0);
        let mut b = a.clone();
        b.set(3, 4, 0, 1.0);
        assert!((motion_energy(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(motion_energy(&a, &Image::new(9, 10, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn static_stream_never_fires() {
        let bg = Image::filled(40, 30, 1, 0.3);
        let frames = vec![bg.clone(); 50];
        assert!(run_gate(&frames, &GateConfig::default()).unwrap().is_empty());
    }

    fn transit(seed: u64) -> (Vec<Image>, crate::dataset::SyntheticSequence) {
        let spec = SyntheticSceneSpec::default();
        let seq = generate_synthetic_sequence(&spec, 45, seed).unwrap();
        let mut frames = vec![render_background(&spec, seed + 1000).unwrap()];
        frames.extend(seq.frames.iter().map(|f| f.image.clone()));
        (frames, seq)
    }

    #[test]
    fn one_trigger_inside_band() {
        let cfg = GateConfig::default();
        let (frames, seq) = transit(3);
        let triggers = run_gate(&frames, &cfg).unwrap();
        assert_eq!(triggers.len(), 1);
        let t = triggers[0];
        // frame 0 of the stream is the reference
        let truth = seq.truth[(t.frame - 1) as usize].bbox.unwrap();
        let (cx, _) = truth.centre();
        let (lo, hi) = cfg.band_bounds(160);
        assert!(cx >= lo && cx <= hi, "centre {cx} outside [{lo}, {hi}]");
    }

    #[test]
    fn two_transits_two_triggers() {
        let spec = SyntheticSceneSpec::default();
        let (mut frames, _) = transit(5);
        for i in 0..15 {
            frames.push(render_background(&spec, 77 + i).unwrap());
        }
        let second = generate_synthetic_sequence(&spec, 45, 6).unwrap();
        frames.extend(second.frames.iter().map(|f| f.image.clone()));
        assert_eq!(run_gate(&frames, &GateConfig::default()).unwrap().len(), 2);
    }

    #[test]
    fn gate_step_is_pure() {
        let (frames, _) = transit(9);
        let cfg = GateConfig::default();
        let state = GateState::new(frames[0].clone());
        let a = gate_step(&state, &frames[20], &cfg).unwrap();
        let b = gate_step(&state, &frames[20], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_above_peak_never_fires() {
        let (frames, _) = transit(11);
        let peak = frames[1..]
            .iter()
            .map(|f| motion_energy(f, &frames[0]).unwrap())
            .fold(0.0, f64::max);
        let above = GateConfig {
            threshold: (peak + 1e-6).min(0.999),
            ..GateConfig::default()
        };
        assert!(run_gate(&frames, &above).unwrap().is_empty());
        let below = GateConfig {
            threshold: peak * 0.9,
            ..GateConfig::default()
        };
        assert_eq!(run_gate(&frames, &below).unwrap().len(), 1);
    }
}
