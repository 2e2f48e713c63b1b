//! Small classifiers with exact per-sample gradients, synthetic datasets and
//! neighbouring-dataset construction.
//!
//! Parameters live in a [`ParamSet`] whose flat layout is fixed per model
//! kind; the block partition on top of it may be re-chunked freely.
//!
//! | kind        | layout                                                        |
//! |-------------|---------------------------------------------------------------|
//! | `linear`    | `weight` (C×D), `bias` (C)                                    |
//! | `mlp`       | `hidden.weight` (H×D), `hidden.bias` (H), `output.weight` (C×H), `output.bias` (C) |
//! | `token_pool`| `weight` (C×d), `bias` (C), applied to the mean token         |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::numeric::{dot, gaussian_vec, softmax_row, SeededRng, Vec64};
use crate::optim::ParamSet;
use crate::tokens::TokenSet;

const INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    Linear,
    Mlp { hidden: usize },
    TokenPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    /// Feature dimension, or token dimension for `token_pool`.
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub init_seed: u64,
    /// Split parameter groups into blocks of at most this many values.
    #[serde(default)]
    pub block_len: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be >= 2"));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.kind {
            return Err(invalid("mlp hidden width must be >= 1"));
        }
        if self.block_len == Some(0) {
            return Err(invalid("block_len must be >= 1"));
        }
        Ok(())
    }

    fn group_shapes(&self) -> Vec<(&'static str, usize)> {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::Linear | ModelKind::TokenPool => vec![("weight", c * d), ("bias", c)],
            ModelKind::Mlp { hidden } => vec![
                ("hidden.weight", hidden * d),
                ("hidden.bias", hidden),
                ("output.weight", c * hidden),
                ("output.bias", c),
            ],
        }
    }

    /// Gaussian(0, 0.1²) weights from `init_seed`, zero biases.
    pub fn init(&self) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = SeededRng::new(self.init_seed, 0);
        let groups = self
            .group_shapes()
            .into_iter()
            .map(|(name, len)| {
                let values = if name.ends_with("bias") {
                    vec![0.0; len]
                } else {
                    gaussian_vec(&mut rng, len, INIT_STD)?.into_inner()
                };
                Ok((name.to_string(), values))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ParamSet::new(groups)?;
        match self.block_len {
            Some(len) => params.chunked(len),
            None => Ok(params),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.group_shapes().iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Dense(Vec64),
    Tokens(TokenSet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRecord", into = "SampleRecord")]
pub struct Sample {
    pub features: Features,
    pub label: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<TokenSet>,
    label: usize,
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;
    fn try_from(r: SampleRecord) -> Result<Self> {
        let features = match (r.features, r.tokens) {
            (Some(f), None) => Features::Dense(Vec64::new(f)?),
            (None, Some(t)) => Features::Tokens(t),
            _ => {
                return Err(invalid(
                    "sample needs exactly one of \"features\" or \"tokens\"",
                ))
            }
        };
        Ok(Sample {
            features,
            label: r.label,
        })
    }
}

impl From<Sample> for SampleRecord {
    fn from(s: Sample) -> Self {
        let (features, tokens) = match s.features {
            Features::Dense(v) => (Some(v.into_inner()), None),
            Features::Tokens(t) => (None, Some(t)),
        };
        SampleRecord {
            features,
            tokens,
            label: s.label,
        }
    }
}

impl Sample {
    pub fn dense(features: Vec<f64>, label: usize) -> Result<Self> {
        Ok(Self {
            features: Features::Dense(Vec64::new(features)?),
            label,
        })
    }

    pub fn tokens(tokens: TokenSet, label: usize) -> Self {
        Self {
            features: Features::Tokens(tokens),
            label,
        }
    }

    /// Model input: the dense vector, or the mean token.
    pub fn input(&self) -> Vec<f64> {
        match &self.features {
            Features::Dense(v) => v.as_slice().to_vec(),
            Features::Tokens(t) => t.mean(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.features {
            Features::Dense(v) => v.len(),
            Features::Tokens(t) => t.dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub kind: String,
    pub seed: u64,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let first = self.samples.first().ok_or(Error::Empty("dataset"))?;
        let dim = first.input_dim();
        let tokens = matches!(first.features, Features::Tokens(_));
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(invalid(format!(
                    "sample {i} label {} >= num_classes {}",
                    s.label, self.num_classes
                )));
            }
            if s.input_dim() != dim || matches!(s.features, Features::Tokens(_)) != tokens {
                return Err(shape(format!("dimension {dim}"), format!("sample {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Dataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        d.validate()?;
        Ok(d)
    }
}

/// Trained or initial model: spec plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        if params.total_dim() != spec.param_dim() {
            return Err(shape(spec.param_dim(), params.total_dim()));
        }
        Ok(Self {
            schema_version: 1,
            spec,
            params,
        })
    }

    pub fn init(spec: ModelSpec) -> Result<Self> {
        Self::new(spec, spec.init()?)
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        forward_loss(&self.spec, &self.params, sample)
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        let logits = logits(
            &self.spec,
            &self.params,
            &checked_input(&self.spec, sample)?,
        );
        Ok(argmax(&logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Model = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.spec.validate()?;
        Self::new(m.spec, m.params)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn checked_input(spec: &ModelSpec, sample: &Sample) -> Result<Vec<f64>> {
    let tokens = matches!(sample.features, Features::Tokens(_));
    if tokens != (spec.kind == ModelKind::TokenPool) {
        return Err(invalid("sample modality does not match model kind"));
    }
    if sample.input_dim() != spec.input_dim {
        return Err(shape(spec.input_dim, sample.input_dim()));
    }
    if sample.label >= spec.num_classes {
        return Err(invalid(format!("label {} out of range", sample.label)));
    }
    Ok(sample.input())
}

/// `out = W x + b` with `W` row-major `rows × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, bias)| dot(&w[r * x.len()..(r + 1) * x.len()], x) + bias)
        .collect()
}

struct MlpSplit<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn split_mlp<'a>(spec: &ModelSpec, flat: &'a [f64], hidden: usize) -> MlpSplit<'a> {
    let (d, c) = (spec.input_dim, spec.num_classes);
    let (w1, rest) = flat.split_at(hidden * d);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(c * hidden);
    MlpSplit { w1, b1, w2, b2 }
}

fn logits(spec: &ModelSpec, params: &ParamSet, x: &[f64]) -> Vec<f64> {
    let flat = params.flat();
    let c = spec.num_classes;
    match spec.kind {
        ModelKind::Linear | ModelKind::TokenPool => {
            let (w, b) = flat.split_at(c * spec.input_dim);
            affine(w, b, x)
        }
        ModelKind::Mlp { hidden } => {
            let p = split_mlp(spec, flat, hidden);
            let h: Vec<f64> = affine(p.w1, p.b1, x).into_iter().map(f64::tanh).collect();
            affine(p.w2, p.b2, &h)
        }
    }
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn check_params(spec: &ModelSpec, params: &ParamSet) -> Result<()> {
    if params.total_dim() != spec.param_dim() {
        return Err(shape(spec.param_dim(), params.total_dim()));
    }
    Ok(())
}

/// Cross-entropy of one sample.
pub fn forward_loss(spec: &ModelSpec, params: &ParamSet, sample: &Sample) -> Result<f64> {
    check_params(spec, params)?;
    let x = checked_input(spec, sample)?;
    let loss = cross_entropy(&logits(spec, params, &x), sample.label);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(loss)
}

/// Analytic gradient of [`forward_loss`], flat in parameter order.
pub fn per_sample_grad(spec: &ModelSpec, params: &ParamSet, sample: &Sample) -> Result<Vec64> {
    check_params(spec, params)?;
    let x = checked_input(spec, sample)?;
    let flat = params.flat();
    let c = spec.num_classes;
    let d = spec.input_dim;

    let outer = |dl: &[f64], h: &[f64], out: &mut Vec<f64>| {
        for &g in dl {
            out.extend(h.iter().map(|v| g * v));
        }
    };

    let grad = match spec.kind {
        ModelKind::Linear | ModelKind::TokenPool => {
            let (w, b) = flat.split_at(c * d);
            let mut dl = softmax_row(&affine(w, b, &x))?.into_inner();
            dl[sample.label] -= 1.0;
            let mut g = Vec::with_capacity(flat.len());
            outer(&dl, &x, &mut g);
            g.extend_from_slice(&dl);
            g
        }
        ModelKind::Mlp { hidden } => {
            let p = split_mlp(spec, flat, hidden);
            let h: Vec<f64> = affine(p.w1, p.b1, &x).into_iter().map(f64::tanh).collect();
            let mut dl = softmax_row(&affine(p.w2, p.b2, &h))?.into_inner();
            dl[sample.label] -= 1.0;
            let da: Vec<f64> = (0..hidden)
                .map(|k| {
                    let dh: f64 = (0..c).map(|r| p.w2[r * hidden + k] * dl[r]).sum();
                    dh * (1.0 - h[k] * h[k])
                })
                .collect();
            let mut g = Vec::with_capacity(flat.len());
            outer(&da, &x, &mut g);
            g.extend_from_slice(&da);
            outer(&dl, &h, &mut g);
            g.extend_from_slice(&dl);
            g
        }
    };
    Vec64::new(grad)
}

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Vec64::new(out)
}

/// Central finite differences of [`forward_loss`] with step `h`.
pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamSet,
    sample: &Sample,
    h: f64,
) -> Result<Vec64> {
    central_difference(
        |theta| forward_loss(spec, &params.with_values(theta.to_vec())?, sample),
        params.flat(),
        h,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Unit-variance Gaussians centred at `margin/√2 · e_c`, so class means
    /// sit `margin` apart.
    GaussBlobs { dim: usize, margin: f64 },
    /// Token sets `[cls, patches..]`. `planted` random patches carry
    /// `signal · e_{1+label}` plus a `key · e_0` component the CLS token
    /// (`key · e_0`) attends to; the rest are noise on dims `1..dim`.
    TokenGrid {
        tokens: usize,
        dim: usize,
        planted: usize,
        signal: f64,
        key: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub num_classes: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be >= 2"));
        }
        match self.kind {
            SyntheticKind::GaussBlobs { dim, margin } => {
                if dim < self.num_classes {
                    return Err(invalid("gauss-blobs needs dim >= num_classes"));
                }
                if !(margin >= 0.0) || !margin.is_finite() {
                    return Err(invalid("margin must be finite and >= 0"));
                }
            }
            SyntheticKind::TokenGrid {
                tokens,
                dim,
                planted,
                ..
            } => {
                if tokens < 2 || planted > tokens - 1 {
                    return Err(invalid(
                        "token-grid needs tokens >= 2 and planted <= tokens - 1",
                    ));
                }
                if dim < self.num_classes + 1 {
                    return Err(invalid("token-grid needs dim >= num_classes + 1"));
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            SyntheticKind::GaussBlobs { .. } => "gauss-blobs",
            SyntheticKind::TokenGrid { .. } => "token-grid",
        }
    }

    /// Feature dimension a model needs for this data.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            SyntheticKind::GaussBlobs { dim, .. } | SyntheticKind::TokenGrid { dim, .. } => dim,
        }
    }

    fn sample(&self, label: usize, rng: &mut SeededRng) -> Result<Sample> {
        match self.kind {
            SyntheticKind::GaussBlobs { dim, margin } => {
                let mut x = gaussian_vec(rng, dim, 1.0)?.into_inner();
                x[label] += margin / std::f64::consts::SQRT_2;
                Sample::dense(x, label)
            }
            SyntheticKind::TokenGrid {
                tokens,
                dim,
                planted,
                signal,
                key,
            } => {
                let chosen: Vec<usize> = rand::seq::index::sample(rng, tokens - 1, planted)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect();
                let mut rows = Vec::with_capacity(tokens);
                let mut cls = vec![0.0; dim];
                cls[0] = key;
                rows.push(cls);
                for j in 1..tokens {
                    let mut v = gaussian_vec(rng, dim, 1.0)?.into_inner();
                    v[0] = 0.0;
                    if chosen.contains(&j) {
                        v[0] = key;
                        v[1 + label] += signal;
                    }
                    rows.push(v);
                }
                Ok(Sample::tokens(TokenSet::from_rows(&rows)?, label))
            }
        }
    }
}

/// Training split: `n` samples with balanced labels, from stream 0 of `seed`.
pub fn make_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    make_split(spec, n, seed, 0)
}

/// Independent draw from the same generative process; `split` selects the
/// random stream (0 = train, 1 = test, ...).
pub fn make_split(spec: &SyntheticSpec, n: usize, seed: u64, split: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(invalid(format!(
            "need n >= num_classes ({}), got {n}",
            spec.num_classes
        )));
    }
    let mut rng = SeededRng::new(seed, split);
    let samples = (0..n)
        .map(|i| spec.sample(i % spec.num_classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind: spec.kind_name().to_string(),
        seed,
        num_classes: spec.num_classes,
        samples,
    })
}

/// `(d, d without one uniformly chosen record, removed index)`.
pub fn make_neighbors(d: &Dataset, rng: &mut SeededRng) -> Result<(Dataset, Dataset, usize)> {
    if d.len() < 2 {
        return Err(invalid("neighbouring datasets need at least 2 records"));
    }
    let removed = (rng.uniform() * d.len() as f64) as usize;
    let mut smaller = d.clone();
    smaller.samples.remove(removed);
    Ok((d.clone(), smaller, removed))
}
