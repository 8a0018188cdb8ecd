//! Affine-coupling normalizing flow over feature vectors.
//!
//! Each block permutes its input, keeps the first `⌈d/2⌉` coordinates and
//! transforms the rest as `y₂ · exp(σ(s(y₁))) + t(y₁)` with the soft clamp
//! `σ(x) = α·tanh(x/α)`. `s` and `t` are one-hidden-layer tanh networks whose
//! output layers start at zero, so a fresh model is a pure permutation with
//! zero log-determinant.
//!
//! All trainable weights live in one flat vector; [`FlowModel::gradient`]
//! returns a vector of the same layout.

mod score;
mod train;

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AnomalyThreshold;
use crate::features::Standardizer;

pub use score::{anomaly_score, feature_nll, score_factors, AnomalyScore, ScoreSettings};
pub use train::{history_csv, train_flow, Adam, EpochRecord, StaticFeatures, TrainSchedule, TrainingData};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Hidden width; `0` selects `min(2·d, 512)`.
    pub hidden: usize,
    pub clamp: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            hidden: 0,
            clamp: 3.0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn hidden_for(&self, dim: usize) -> usize {
        if self.hidden == 0 {
            (2 * dim).min(512)
        } else {
            self.hidden
        }
    }
}

/// `(w1, b1, w2, b2)` of one subnet.
pub type SubnetParams<'a> = (&'a [f64], &'a [f64], &'a [f64], &'a [f64]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    dim: usize,
    hidden: usize,
    clamp: f64,
    permutations: Vec<Vec<usize>>,
    params: Vec<f64>,
    pub standardizer: Standardizer,
}

/// Offsets of one subnet's tensors inside a block slice.
#[derive(Clone, Copy, Debug)]
struct SubnetLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

/// Activations kept from the forward pass for backpropagation.
struct BlockTrace {
    /// Permuted block input `(y₁, y₂)`.
    input: Vec<f64>,
    output: Vec<f64>,
    hs: Vec<f64>,
    ht: Vec<f64>,
    s_raw: Vec<f64>,
    scale: Vec<f64>,
}

pub fn init_flow(dim: usize, blocks: usize, hidden: usize, clamp: f64, seed: u64) -> Result<FlowModel> {
    if dim < 2 {
        return Err(Error::Arg(format!("flow dimension must be at least 2, got {dim}")));
    }
    if blocks == 0 || hidden == 0 {
        return Err(Error::Arg("flow needs at least one block and one hidden unit".into()));
    }
    if !(clamp > 0.0) || !clamp.is_finite() {
        return Err(Error::Arg(format!("clamp must be positive, got {clamp}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel {
        dim,
        hidden,
        clamp,
        permutations: Vec::with_capacity(blocks),
        params: Vec::new(),
        standardizer: Standardizer::identity(dim),
    };
    model.params = vec![0.0; blocks * model.block_len()];
    let k = model.split();
    let bound = 1.0 / (k as f64).sqrt();
    let (s, t) = model.subnet_layouts();
    for b in 0..blocks {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(&mut rng);
        model.permutations.push(perm);
        let base = b * model.block_len();
        for layout in [s, t] {
            for w in &mut model.params[base + layout.w1..base + layout.b1] {
                *w = rng.gen_range(-bound..bound);
            }
        }
    }
    Ok(model)
}

impl FlowModel {
    pub fn from_config(dim: usize, cfg: &FlowConfig) -> Result<Self> {
        init_flow(dim, cfg.blocks, cfg.hidden_for(dim), cfg.clamp, cfg.seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn blocks(&self) -> usize {
        self.permutations.len()
    }

    /// Number of conditioning coordinates per block.
    pub fn split(&self) -> usize {
        self.dim.div_ceil(2)
    }

    pub fn permutation(&self, block: usize) -> &[usize] {
        &self.permutations[block]
    }

    pub fn set_permutation(&mut self, block: usize, perm: Vec<usize>) -> Result<()> {
        let mut seen = vec![false; self.dim];
        if perm.len() != self.dim
            || !perm
                .iter()
                .all(|&p| p < self.dim && !std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Arg("permutation must be a bijection of 0..d".into()));
        }
        self.permutations[block] = perm;
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn subnet_layouts(&self) -> (SubnetLayout, SubnetLayout) {
        let k = self.split();
        let m = self.dim - k;
        let h = self.hidden;
        let one = |start: usize| {
            let w1 = start;
            let b1 = w1 + h * k;
            let w2 = b1 + h;
            let b2 = w2 + m * h;
            SubnetLayout {
                w1,
                b1,
                w2,
                b2,
                end: b2 + m,
            }
        };
        let s = one(0);
        let t = one(s.end);
        (s, t)
    }

    fn block_len(&self) -> usize {
        self.subnet_layouts().1.end
    }

    /// Parameter slices of block `b` for the scale and translation subnets:
    /// `(w1, b1, w2, b2)` each.
    pub fn block_params(&self, b: usize) -> [SubnetParams<'_>; 2] {
        let base = b * self.block_len();
        let p = &self.params[base..base + self.block_len()];
        let (s, t) = self.subnet_layouts();
        let view = |l: SubnetLayout| (&p[l.w1..l.b1], &p[l.b1..l.w2], &p[l.w2..l.b2], &p[l.b2..l.end]);
        [view(s), view(t)]
    }

    /// Mutable view of one block's translation output bias; handy for
    /// constructing hand-checkable models.
    pub fn output_bias_mut(&mut self, b: usize, translation: bool) -> &mut [f64] {
        let base = b * self.block_len();
        let (s, t) = self.subnet_layouts();
        let l = if translation { t } else { s };
        &mut self.params[base + l.b2..base + l.end]
    }

    fn check_input(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::Shape(format!(
                "input of length {} for a {}-dimensional flow",
                y.len(),
                self.dim
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Num("flow input contains a non-finite value".into()));
        }
        Ok(())
    }

    /// Maps features to latent space. Returns `(z, log|det J|)`.
    pub fn forward(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(y)?;
        let mut x = y.to_vec();
        let mut logdet = 0.0;
        for b in 0..self.blocks() {
            let trace = self.block_forward(b, &x);
            logdet += self.block_logdet(&trace);
            x = trace.output;
        }
        Ok((x, logdet))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let k = self.split();
        let [s, t] = [0, 1];
        let mut u = z.to_vec();
        for b in (0..self.blocks()).rev() {
            let nets = self.block_params(b);
            let y1 = &u[..k];
            let (_, s_raw) = subnet_forward(nets[s], y1, self.hidden);
            let (_, shift) = subnet_forward(nets[t], y1, self.hidden);
            for i in 0..self.dim - k {
                let sig = soft_clamp(s_raw[i], self.clamp);
                u[k + i] = (u[k + i] - shift[i]) * (-sig).exp();
            }
            let mut x = vec![0.0; self.dim];
            for (i, &p) in self.permutations[b].iter().enumerate() {
                x[p] = u[i];
            }
            u = x;
        }
        Ok(u)
    }

    /// `log N(z; 0, I) + log|det J|` for standardized features `y`.
    pub fn log_likelihood(&self, y: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(y)?;
        Ok(gaussian_log_density(&z) + logdet)
    }

    /// Mean negative log-likelihood over `batch` and its gradient with
    /// respect to [`FlowModel::params`].
    pub fn gradient(&self, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Arg("gradient of an empty batch".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for y in batch {
            total += self.accumulate_sample(y, &mut grad)?;
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, grad))
    }

    fn block_forward(&self, b: usize, x: &[f64]) -> BlockTrace {
        let k = self.split();
        let input: Vec<f64> = self.permutations[b].iter().map(|&p| x[p]).collect();
        let nets = self.block_params(b);
        let (hs, s_raw) = subnet_forward(nets[0], &input[..k], self.hidden);
        let (ht, shift) = subnet_forward(nets[1], &input[..k], self.hidden);
        let scale: Vec<f64> = s_raw.iter().map(|&s| soft_clamp(s, self.clamp).exp()).collect();
        let mut output = input.clone();
        for i in 0..self.dim - k {
            output[k + i] = input[k + i] * scale[i] + shift[i];
        }
        BlockTrace {
            input,
            output,
            hs,
            ht,
            s_raw,
            scale,
        }
    }

    fn block_logdet(&self, trace: &BlockTrace) -> f64 {
        trace.s_raw.iter().map(|&s| soft_clamp(s, self.clamp)).sum()
    }

    /// Adds this sample's NLL gradient into `grad`; returns the NLL.
    fn accumulate_sample(&self, y: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_input(y)?;
        let k = self.split();
        let m = self.dim - k;
        let h = self.hidden;
        let mut traces: Vec<BlockTrace> = Vec::with_capacity(self.blocks());
        let mut logdet = 0.0;
        for b in 0..self.blocks() {
            let trace = self.block_forward(b, traces.last().map_or(y, |t| &t.output));
            logdet += self.block_logdet(&trace);
            traces.push(trace);
        }
        let z = &traces.last().expect("at least one block").output;
        let nll = -(gaussian_log_density(z) + logdet);

        // d nll / d z = z
        let mut g = z.clone();
        let block_len = self.block_len();
        let (ls, lt) = self.subnet_layouts();
        for b in (0..self.blocks()).rev() {
            let trace = &traces[b];
            let (y1, y2) = trace.input.split_at(k);
            let (g1, g2) = g.split_at(k);
            let mut g_y1 = g1.to_vec();
            let mut g_y2 = vec![0.0; m];
            let mut g_s = vec![0.0; m];
            for i in 0..m {
                g_y2[i] = g2[i] * trace.scale[i];
                // out₂ = y₂·e^σ + t, and the NLL carries −σ
                let g_sig = g2[i] * y2[i] * trace.scale[i] - 1.0;
                let th = (trace.s_raw[i] / self.clamp).tanh();
                g_s[i] = g_sig * (1.0 - th * th);
            }
            let nets = self.block_params(b);
            let base = b * block_len;
            let (s_grad, t_grad) = grad[base..base + lt.end].split_at_mut(ls.end);
            subnet_backward(nets[0], y1, &trace.hs, &g_s, h, s_grad, &mut g_y1);
            subnet_backward(nets[1], y1, &trace.ht, g2, h, t_grad, &mut g_y1);

            let mut g_x = vec![0.0; self.dim];
            for (i, &p) in self.permutations[b].iter().enumerate() {
                g_x[p] = if i < k { g_y1[i] } else { g_y2[i - k] };
            }
            g = g_x;
        }
        Ok(nll)
    }
}

/// On-disk model: the flow, its standardizer, the validated threshold, and
/// the configuration it was trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    /// Channels of the images the features were extracted from; `0` for
    /// imported features.
    pub channels: usize,
    pub threshold: Option<AnomalyThreshold>,
    pub config_hash: String,
    pub model: FlowModel,
}

impl ModelFile {
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks the model against the feature dimension the caller
    /// will feed it.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.version != Self::VERSION {
            return Err(Error::Arg(format!("unsupported model file version {}", file.version)));
        }
        let model = &file.model;
        let consistent = model.dim >= 2
            && model.standardizer.dim() == model.dim
            && model.permutations.iter().all(|p| p.len() == model.dim)
            && model.params.len() == model.blocks() * model.block_len()
            && model.params.iter().all(|v| v.is_finite());
        if !consistent {
            return Err(Error::Arg(format!(
                "model file {} is internally inconsistent",
                path.display()
            )));
        }
        if let Some(d) = expected_dim {
            if d != model.dim {
                return Err(Error::Shape(format!(
                    "model expects {}-dimensional features, extractor yields {d}",
                    model.dim
                )));
            }
        }
        Ok(file)
    }
}

#[inline]
fn soft_clamp(x: f64, alpha: f64) -> f64 {
    alpha * (x / alpha).tanh()
}

pub fn gaussian_log_density(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * sq
}

/// `(tanh hidden activations, output)` of a one-hidden-layer network.
fn subnet_forward(net: (&[f64], &[f64], &[f64], &[f64]), input: &[f64], h: usize) -> (Vec<f64>, Vec<f64>) {
    let (w1, b1, w2, b2) = net;
    let k = input.len();
    let hidden: Vec<f64> = (0..h)
        .map(|j| {
            let row = &w1[j * k..(j + 1) * k];
            (b1[j] + dot(row, input)).tanh()
        })
        .collect();
    let out = b2
        .iter()
        .enumerate()
        .map(|(o, bias)| bias + dot(&w2[o * h..(o + 1) * h], &hidden))
        .collect();
    (hidden, out)
}

/// Accumulates parameter gradients into `grad` (laid out as the subnet) and
/// input gradients into `g_in`.
fn subnet_backward(
    net: (&[f64], &[f64], &[f64], &[f64]),
    input: &[f64],
    hidden: &[f64],
    g_out: &[f64],
    h: usize,
    grad: &mut [f64],
    g_in: &mut [f64],
) {
    let (w1, _, w2, _) = net;
    let k = input.len();
    let m = g_out.len();
    let (gw1, rest) = grad.split_at_mut(h * k);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(m * h);
    let mut g_hidden = vec![0.0; h];
    for o in 0..m {
        let go = g_out[o];
        if go == 0.0 {
            continue;
        }
        gb2[o] += go;
        let row = &w2[o * h..(o + 1) * h];
        let grow = &mut gw2[o * h..(o + 1) * h];
        for j in 0..h {
            grow[j] += go * hidden[j];
            g_hidden[j] += go * row[j];
        }
    }
    for j in 0..h {
        let ga = g_hidden[j] * (1.0 - hidden[j] * hidden[j]);
        if ga == 0.0 {
            continue;
        }
        gb1[j] += ga;
        let row = &w1[j * k..(j + 1) * k];
        let grow = &mut gw1[j * k..(j + 1) * k];
        for i in 0..k {
            grow[i] += ga * input[i];
            g_in[i] += ga * row[i];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
