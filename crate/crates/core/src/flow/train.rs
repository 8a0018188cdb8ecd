use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{feature_nll, FlowModel};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::eval::{auroc, select_threshold, AnomalyThreshold, ScoredItem};
use crate::features::Standardizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub meta_epochs: usize,
    pub sub_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub target_tpr: f64,
    pub validate_every_sub_epoch: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            meta_epochs: 10,
            sub_epochs: 8,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            grad_clip: 10.0,
            seed: 0,
            target_tpr: 0.85,
            validate_every_sub_epoch: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.meta_epochs * self.sub_epochs == 0 {
            return Err(Error::Arg("schedule needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Arg("batch size must be at least 1".into()));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr <= 1.0) {
            return Err(Error::Arg(format!("target TPR {} outside (0, 1]", self.target_tpr)));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Arg(
                "learning rate and clip must be positive, weight decay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.meta_epochs * self.sub_epochs
    }
}

/// One validation checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub meta_epoch: usize,
    /// Sub epoch within the meta epoch (1-based) at which validation ran.
    pub sub_epoch: usize,
    /// Mean training NLL over the last pass.
    pub train_loss: f64,
    pub val_auroc: f64,
    pub threshold: AnomalyThreshold,
}

/// Feature supply for [`train_flow`].
pub trait TrainingData {
    /// Un-augmented training features used to fit the standardizer.
    fn reference_features(&mut self) -> Result<Vec<Vec<f64>>>;

    /// Raw training features for pass `epoch` (0-based); implementations may
    /// recompute them under fresh augmentation.
    fn epoch_features(&mut self, epoch: usize) -> Result<Vec<Vec<f64>>>;

    /// Anomaly scores of the labelled validation items under `model`.
    fn validation_scores(&mut self, model: &FlowModel) -> Result<Vec<ScoredItem>>;
}

/// Fixed feature vectors; validation scores are plain feature NLLs.
#[derive(Clone, Debug, Default)]
pub struct StaticFeatures {
    pub train: Vec<Vec<f64>>,
    pub val: Vec<(Vec<f64>, Label)>,
}

impl TrainingData for StaticFeatures {
    fn reference_features(&mut self) -> Result<Vec<Vec<f64>>> {
        Ok(self.train.clone())
    }

    fn epoch_features(&mut self, _epoch: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.train.clone())
    }

    fn validation_scores(&mut self, model: &FlowModel) -> Result<Vec<ScoredItem>> {
        self.val
            .iter()
            .enumerate()
            .map(|(i, (v, label))| Ok(ScoredItem::new(format!("val{i}"), 0, feature_nll(model, v)?, *label)))
            .collect()
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Adds L2 decay to `grad`, rescales it to at most `clip` in global norm,
    /// and takes one step.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64], clip: f64) {
        for (g, p) in grad.iter_mut().zip(params.iter()) {
            *g += self.weight_decay * p;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Maximum-likelihood training on good samples. Each sub epoch is one
/// shuffled pass over freshly supplied features; validation (AUROC and the
/// TPR-targeted threshold) runs after every meta epoch, or after every sub
/// epoch when the schedule asks for it.
pub fn train_flow(
    mut model: FlowModel,
    data: &mut dyn TrainingData,
    schedule: &TrainSchedule,
) -> Result<(FlowModel, Vec<EpochRecord>)> {
    schedule.validate()?;
    let reference = data.reference_features()?;
    if reference.is_empty() {
        return Err(Error::Arg("training set is empty".into()));
    }
    model.standardizer = Standardizer::fit(&reference)?;
    if model.standardizer.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "{}-dimensional features for a {}-dimensional flow",
            model.standardizer.dim(),
            model.dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(model.n_params(), schedule.learning_rate, schedule.weight_decay);
    let mut history = Vec::new();
    for meta in 1..=schedule.meta_epochs {
        for sub in 1..=schedule.sub_epochs {
            let epoch = (meta - 1) * schedule.sub_epochs + (sub - 1);
            let raw = data.epoch_features(epoch)?;
            if raw.is_empty() {
                return Err(Error::Arg("training set is empty".into()));
            }
            let mut rows = raw
                .iter()
                .map(|r| model.standardizer.apply(r))
                .collect::<Result<Vec<_>>>()?;
            rows.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for batch in rows.chunks(schedule.batch_size) {
                let (loss, mut grad) = model.gradient(batch).map_err(|e| match e {
                    Error::Num(reason) => Error::Train {
                        epoch: epoch + 1,
                        reason,
                    },
                    other => other,
                })?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Train {
                        epoch: epoch + 1,
                        reason: format!("loss {loss}"),
                    });
                }
                loss_sum += loss * batch.len() as f64;
                adam.step(model.params_mut(), &mut grad, schedule.grad_clip);
            }
            let train_loss = loss_sum / rows.len() as f64;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Train {
                    epoch: epoch + 1,
                    reason: "parameters became non-finite".into(),
                });
            }

            if schedule.validate_every_sub_epoch || sub == schedule.sub_epochs {
                let scores = data.validation_scores(&model).map_err(|e| match e {
                    Error::Num(reason) => Error::Train {
                        epoch: epoch + 1,
                        reason,
                    },
                    other => other,
                })?;
                history.push(EpochRecord {
                    meta_epoch: meta,
                    sub_epoch: sub,
                    train_loss,
                    val_auroc: auroc(&scores)?,
                    threshold: select_threshold(&scores, schedule.target_tpr)?,
                });
            }
        }
    }
    Ok((model, history))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("meta_epoch,sub_epoch,train_loss,val_auroc,threshold,tpr,fpr\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.meta_epoch, r.sub_epoch, r.train_loss, r.val_auroc, r.threshold.value, r.threshold.tpr, r.threshold.fpr
        ));
    }
    s
}
