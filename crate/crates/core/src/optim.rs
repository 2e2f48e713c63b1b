//! DP-SGD, gradient-update-pruned DP-SGD and zeroth-order DP optimization
//! over block-structured parameters.
//!
//! Every step works on a copy of the parameters and returns the new set.
//! In [`dual_priv_step`] the Gaussian noise is drawn and added to the
//! aggregated gradient before any block norm or mask is computed, so the
//! mask is a function of the already-privatized gradient only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::numeric::{l2_norm, GaussianSource, Vec64};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector partitioned into named, contiguous blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    values: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParamSet {
    /// One block per named group, in the given order.
    pub fn new(groups: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut values = Vec::new();
        let mut blocks: Vec<Block> = Vec::with_capacity(groups.len());
        for (name, group) in groups {
            if blocks.iter().any(|b| b.name == name) {
                return Err(invalid(format!("duplicate block name {name:?}")));
            }
            if group.is_empty() {
                return Err(invalid(format!("block {name:?} is empty")));
            }
            if group.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("ParamSet"));
            }
            blocks.push(Block {
                name,
                offset: values.len(),
                len: group.len(),
            });
            values.extend(group);
        }
        if values.is_empty() {
            return Err(Error::Empty("ParamSet"));
        }
        Ok(Self { values, blocks })
    }

    /// Splits every block into consecutive chunks of at most `max_len`
    /// values, named `"{name}#{i}"`. Values are untouched.
    pub fn chunked(&self, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(invalid("block chunk length must be >= 1"));
        }
        let mut blocks = Vec::new();
        for b in &self.blocks {
            if b.len <= max_len {
                blocks.push(b.clone());
                continue;
            }
            for (i, start) in (0..b.len).step_by(max_len).enumerate() {
                blocks.push(Block {
                    name: format!("{}#{i}", b.name),
                    offset: b.offset + start,
                    len: max_len.min(b.len - start),
                });
            }
        }
        Ok(Self {
            values: self.values.clone(),
            blocks,
        })
    }

    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn block_values(&self, j: usize) -> &[f64] {
        let b = &self.blocks[j];
        &self.values[b.offset..b.offset + b.len]
    }

    /// Same block layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(shape(self.values.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamSet"));
        }
        Ok(Self {
            values,
            blocks: self.blocks.clone(),
        })
    }
}

/// Per-sample gradients, each clipped to `clip`.
#[derive(Clone, Debug)]
pub struct GradBatch {
    per_sample: Vec<Vec64>,
    clip: f64,
}

impl GradBatch {
    /// Clips every raw gradient to L2 norm `clip`.
    pub fn clip(raw: &[Vec64], clip: f64) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        let dim = raw[0].len();
        let per_sample = raw
            .iter()
            .map(|g| {
                if g.len() != dim {
                    return Err(shape(dim, g.len()));
                }
                clip_gradient(g, clip)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_sample, clip })
    }

    pub fn per_sample(&self) -> &[Vec64] {
        &self.per_sample
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }
}

/// Per-block update flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    flags: Vec<bool>,
}

impl UpdateMask {
    pub fn all(num_blocks: usize) -> Self {
        Self {
            flags: vec![true; num_blocks],
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.flags.len() as f64
    }
}

/// Hyperparameters of a single optimizer step. DPZO reads `noise_multiplier`
/// as its scalar noise scale and clips loss differences to `clip_zo`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub learning_rate: f64,
    pub clip: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub top_k_percent: f64,
    /// Skip the noise draw entirely (ε = ∞ runs).
    pub nonprivate: bool,
    pub perturb: f64,
    pub clip_zo: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            clip: 1.0,
            noise_multiplier: 1.0,
            batch_size: 12,
            top_k_percent: 80.0,
            nonprivate: false,
            perturb: 0.15,
            clip_zo: 1.0,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.clip > 0.0) {
            return Err(invalid(format!("clip must be > 0, got {}", self.clip)));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(invalid(format!(
                "noise multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if !(self.top_k_percent > 0.0 && self.top_k_percent <= 100.0) {
            return Err(invalid(format!(
                "top-k percent must be in (0, 100], got {}",
                self.top_k_percent
            )));
        }
        if !(self.perturb > 0.0) {
            return Err(invalid(format!(
                "perturbation scale must be > 0, got {}",
                self.perturb
            )));
        }
        if !(self.clip_zo > 0.0) {
            return Err(invalid(format!(
                "zeroth-order clip must be > 0, got {}",
                self.clip_zo
            )));
        }
        Ok(())
    }

    /// Per-coordinate std of the noise added to the averaged gradient.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip / self.batch_size as f64
    }
}

/// `g / max(1, ‖g‖/C)`. Gradients already inside the ball are returned
/// bit-for-bit; the output norm never exceeds `C`.
pub fn clip_gradient(g: &[f64], clip: f64) -> Result<Vec64> {
    if !(clip > 0.0) {
        return Err(invalid(format!("clip must be > 0, got {clip}")));
    }
    let norm = l2_norm(g)?;
    if norm <= clip {
        return Ok(Vec64::from_finite(g.to_vec()));
    }
    let factor = clip / norm;
    let mut out: Vec<f64> = g.iter().map(|v| v * factor).collect();
    // rounding can leave the norm a few ulps above clip
    while l2_norm(&out)? > clip {
        out.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    Ok(Vec64::from_finite(out))
}

/// `(1/m) Σ ĝ_i + N(0, σ²C²/m² I)`. With `nonprivate` no noise is drawn.
pub fn aggregate_and_noise(
    batch: &GradBatch,
    noise_multiplier: f64,
    batch_size: usize,
    nonprivate: bool,
    noise: &mut impl GaussianSource,
) -> Result<Vec64> {
    if batch.len() != batch_size {
        return Err(shape(
            format!("{batch_size} per-sample gradients"),
            batch.len(),
        ));
    }
    let dim = batch.per_sample[0].len();
    let mut sum = vec![0.0; dim];
    for g in &batch.per_sample {
        for (s, v) in sum.iter_mut().zip(g.iter()) {
            *s += v;
        }
    }
    let m = batch_size as f64;
    let mut out: Vec<f64> = sum.into_iter().map(|s| s / m).collect();
    if !nonprivate {
        let z = noise.gaussian_vec(dim, noise_multiplier * batch.clip / m)?;
        out.iter_mut().zip(z.iter()).for_each(|(o, n)| *o += n);
    }
    Vec64::new(out)
}

/// L2 norm of each block's slice of `g`.
pub fn block_norms(g: &[f64], params: &ParamSet) -> Result<Vec<f64>> {
    if g.len() != params.total_dim() {
        return Err(shape(params.total_dim(), g.len()));
    }
    params
        .blocks()
        .iter()
        .map(|b| l2_norm(&g[b.offset..b.offset + b.len]))
        .collect()
}

/// Number of flagged blocks: `⌈(P_K/100)·J⌉`.
pub fn mask_count(num_blocks: usize, top_k_percent: f64) -> usize {
    let raw = (top_k_percent * num_blocks as f64 / 100.0).ceil() as usize;
    raw.clamp(1, num_blocks)
}

/// Flags the `⌈(P_K/100)·J⌉` largest norms, ties to the lower block index.
pub fn build_mask(norms: &[f64], top_k_percent: f64) -> Result<UpdateMask> {
    if norms.is_empty() {
        return Err(Error::Empty("block norms"));
    }
    if !(top_k_percent > 0.0 && top_k_percent <= 100.0) {
        return Err(invalid(format!(
            "top-k percent must be in (0, 100], got {top_k_percent}"
        )));
    }
    let count = mask_count(norms.len(), top_k_percent);
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut flags = vec![false; norms.len()];
    for &j in &order[..count] {
        flags[j] = true;
    }
    Ok(UpdateMask { flags })
}

fn noisy_gradient(
    params: &ParamSet,
    raw_grads: &[Vec64],
    cfg: &StepConfig,
    noise: &mut impl GaussianSource,
) -> Result<Vec64> {
    cfg.validate()?;
    if let Some(g) = raw_grads.iter().find(|g| g.len() != params.total_dim()) {
        return Err(shape(params.total_dim(), g.len()));
    }
    let batch = GradBatch::clip(raw_grads, cfg.clip)?;
    aggregate_and_noise(
        &batch,
        cfg.noise_multiplier,
        cfg.batch_size,
        cfg.nonprivate,
        noise,
    )
}

fn masked_update(params: &ParamSet, g: &[f64], lr: f64, mask: &UpdateMask) -> Result<ParamSet> {
    let mut values = params.flat().to_vec();
    for (b, &on) in params.blocks().iter().zip(mask.flags()) {
        if !on {
            continue;
        }
        for i in b.offset..b.offset + b.len {
            values[i] -= lr * g[i];
        }
    }
    params.with_values(values)
}

/// Gradient-update pruning: noise the clipped mean, then update only the
/// top-`P_K`% blocks by noisy-gradient norm.
pub fn dual_priv_step(
    params: &ParamSet,
    raw_grads: &[Vec64],
    cfg: &StepConfig,
    noise: &mut impl GaussianSource,
) -> Result<(ParamSet, UpdateMask)> {
    let g = noisy_gradient(params, raw_grads, cfg, noise)?;
    let norms = block_norms(&g, params)?;
    let mask = build_mask(&norms, cfg.top_k_percent)?;
    let next = masked_update(params, &g, cfg.learning_rate, &mask)?;
    Ok((next, mask))
}

/// Plain DP-SGD: `θ ← θ − η g̃`.
pub fn dp_sgd_step(
    params: &ParamSet,
    raw_grads: &[Vec64],
    cfg: &StepConfig,
    noise: &mut impl GaussianSource,
) -> Result<ParamSet> {
    let g = noisy_gradient(params, raw_grads, cfg, noise)?;
    masked_update(
        params,
        &g,
        cfg.learning_rate,
        &UpdateMask::all(params.num_blocks()),
    )
}

/// Zeroth-order DP step along one random direction shared by the batch.
///
/// Draws `z ~ N(0, I)` then the scalar noise, both from `noise`. Loss
/// differences are clipped to `[-C_zo, C_zo]`, averaged, privatized with
/// std `σ·C_zo/|B|`, and the update is `θ − η·s·z/(2φ)`.
pub fn dpzo_step<S, F>(
    params: &ParamSet,
    loss: F,
    batch: &[S],
    cfg: &StepConfig,
    noise: &mut impl GaussianSource,
) -> Result<ParamSet>
where
    F: Fn(&ParamSet, &S) -> Result<f64>,
{
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("zeroth-order batch"));
    }
    let phi = cfg.perturb;
    let z = noise.gaussian_vec(params.total_dim(), 1.0)?;
    let plus = params.with_values(
        params
            .flat()
            .iter()
            .zip(z.iter())
            .map(|(t, z)| t + phi * z)
            .collect(),
    )?;
    let minus = params.with_values(
        params
            .flat()
            .iter()
            .zip(z.iter())
            .map(|(t, z)| t - phi * z)
            .collect(),
    )?;

    let mut total = 0.0;
    for sample in batch {
        let diff = loss(&plus, sample)? - loss(&minus, sample)?;
        if !diff.is_finite() {
            return Err(Error::NonFinite("zeroth-order loss difference"));
        }
        total += diff.clamp(-cfg.clip_zo, cfg.clip_zo);
    }
    let b = batch.len() as f64;
    let mut s = total / b;
    if !cfg.nonprivate {
        s += noise.gaussian_vec(1, cfg.noise_multiplier * cfg.clip_zo / b)?[0];
    }
    let scale = cfg.learning_rate * s / (2.0 * phi);
    params.with_values(
        params
            .flat()
            .iter()
            .zip(z.iter())
            .map(|(t, z)| t - scale * z)
            .collect(),
    )
}
