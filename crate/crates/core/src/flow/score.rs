use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::error::{Error, Result};
use crate::features::{extract_features, photometric, sample_factors, PhotometricFactors};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSettings {
    pub n_transforms: usize,
    pub interval: (f64, f64),
    pub seed: u64,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            n_transforms: 4,
            interval: (0.5, 1.5),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    /// Mean negative log-likelihood over the transforms.
    pub value: f64,
    pub n_transforms: usize,
}

/// Identity first, then `n − 1` seeded draws from the interval.
pub fn score_factors(settings: &ScoreSettings) -> Result<Vec<PhotometricFactors>> {
    if settings.n_transforms == 0 {
        return Err(Error::Arg("at least one scoring transform is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let (lo, hi) = settings.interval;
    let mut out = vec![PhotometricFactors::IDENTITY];
    for _ in 1..settings.n_transforms {
        out.push(sample_factors(&mut rng, lo, hi)?);
    }
    Ok(out)
}

/// Negative log-likelihood of raw (unstandardized) features.
pub fn feature_nll(model: &FlowModel, raw: &[f64]) -> Result<f64> {
    let y = model.standardizer.apply(raw)?;
    Ok(-model.log_likelihood(&y)?)
}

/// Mean NLL of a 448×448 model input over photometric variants of it.
pub fn anomaly_score(model: &FlowModel, image: &Image, settings: &ScoreSettings) -> Result<AnomalyScore> {
    let factors = score_factors(settings)?;
    let mut total = 0.0;
    for f in &factors {
        let fv = extract_features(&photometric(image, f))?;
        total += feature_nll(model, &fv.values)?;
    }
    let value = total / factors.len() as f64;
    if !value.is_finite() {
        return Err(Error::Num("anomaly score is not finite".into()));
    }
    Ok(AnomalyScore {
        value,
        n_transforms: factors.len(),
    })
}
