//! Seeded training runs, top-K% sweeps, accuracy and the loss-threshold
//! membership-inference attack.
//!
//! A run derives every random stream from its seed: model init, batch
//! order, optimizer noise and token pruning each get their own stream, so
//! two runs with the same [`RunConfig`] produce byte-identical reports apart
//! from `wall_clock_secs`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, default_orders, epsilon_spent, PrivacySpec};
use crate::error::{invalid, Error, Result};
use crate::model::{
    forward_loss, make_split, per_sample_grad, Dataset, Features, Model, ModelKind, ModelSpec,
    Sample, SyntheticSpec,
};
use crate::numeric::{SeededRng, Vec64};
use crate::optim::{dp_sgd_step, dpzo_step, dual_priv_step, StepConfig, UpdateMask};
use crate::tokens::{prune_and_fuse, similarity_attention, ClsAxis, PruneConfig, TokenSet};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_PRUNE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dpsgd,
    Dualpriv,
    Dpzo,
    SgdNonprivate,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dpsgd => "dpsgd",
            Method::Dualpriv => "dualpriv",
            Method::Dpzo => "dpzo",
            Method::SgdNonprivate => "sgd-nonprivate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyTarget {
    pub epsilon: f64,
    /// Defaults to `1/N`.
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to `base · final_fraction` at the last step.
    Linear { final_fraction: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Linear { final_fraction } => {
                if total <= 1 {
                    return base;
                }
                let t = step as f64 / (total - 1) as f64;
                base * (1.0 - t * (1.0 - final_fraction))
            }
        }
    }
}

fn default_clip() -> f64 {
    1.0
}
fn default_batch() -> usize {
    12
}
fn default_top_k() -> f64 {
    80.0
}
fn default_perturb() -> f64 {
    0.15
}
fn default_heads() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_top_k")]
    pub top_k_percent: f64,
    #[serde(default = "default_perturb")]
    pub perturb: f64,
    #[serde(default = "default_clip")]
    pub clip_zo: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            lr_schedule: LrSchedule::Constant,
            clip: default_clip(),
            batch_size: default_batch(),
            top_k_percent: default_top_k(),
            perturb: default_perturb(),
            clip_zo: default_clip(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSettings {
    pub keep: usize,
    pub centers: usize,
    /// Defaults to the per-step optimizer noise std `σ·C/m`.
    #[serde(default)]
    pub sigma_fuse: Option<f64>,
    /// Heads of the harness-built similarity attention.
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub cls_axis: ClsAxis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelChoice {
    #[serde(flatten)]
    pub kind: ModelKind,
    #[serde(default)]
    pub block_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic {
                spec,
                train_size,
                test_size,
                seed,
            } => Ok((
                make_split(spec, *train_size, *seed, 0)?,
                make_split(spec, *test_size, *seed, 1)?,
            )),
            DataSource::Files { train, test } => {
                let train = Dataset::load(train)?;
                let test = Dataset::load(test)?;
                if train.num_classes != test.num_classes {
                    return Err(invalid("train and test disagree on num_classes"));
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub privacy: Option<PrivacyTarget>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub prune: Option<PruneSettings>,
    pub model: ModelChoice,
    pub data: DataSource,
    pub epochs: usize,
    pub seed: u64,
    /// Attack the trained model with train (members) vs test (non-members).
    #[serde(default)]
    pub evaluate_mia: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::SgdNonprivate && self.privacy.is_some() {
            return Err(invalid("sgd-nonprivate takes no privacy target"));
        }
        if let Some(p) = &self.privacy {
            if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
                return Err(invalid(format!("epsilon must be > 0, got {}", p.epsilon)));
            }
            if let Some(d) = p.delta {
                if !(d > 0.0 && d < 1.0) {
                    return Err(invalid(format!("delta must be in (0, 1), got {d}")));
                }
            }
        }
        if self.train.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if let Some(p) = &self.prune {
            if p.heads == 0 {
                return Err(invalid("prune.heads must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn is_private(&self) -> bool {
        self.privacy.is_some()
    }
}

/// Accountant view of a run. Depends only on the privacy target, sampling
/// rate, step count and clip norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub target_epsilon: f64,
    pub delta: f64,
    pub sample_rate: f64,
    pub steps: usize,
    pub clip: f64,
    pub noise_multiplier: f64,
    pub epsilon_spent: f64,
    pub rdp_order: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub top_k_percent: f64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub loss_trajectory: Vec<f64>,
    pub privacy: Option<PrivacyReport>,
    pub noise_multiplier: f64,
    pub sigma_fuse: Option<f64>,
    pub blocks_total: usize,
    pub blocks_updated: Vec<usize>,
    pub mask_fraction: Vec<f64>,
    pub mia_auc: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_row(&self) -> SweepRow {
        SweepRow {
            method: self.method.name().to_string(),
            eps: self.privacy.as_ref().map(|p| p.target_epsilon),
            p_k: self.top_k_percent,
            seed: self.seed,
            final_test_acc: self.final_test_acc,
            auc: self.mia_auc,
        }
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
}

/// Resolves the privacy accounting of a run before any training happens.
pub fn plan_privacy(
    cfg: &RunConfig,
    n_train: usize,
    steps: usize,
) -> Result<Option<PrivacyReport>> {
    let Some(target) = cfg.privacy else {
        return Ok(None);
    };
    let delta = target.delta.unwrap_or(1.0 / n_train as f64);
    let sample_rate = (cfg.train.batch_size as f64 / n_train as f64).min(1.0);
    let clip = match cfg.method {
        Method::Dpzo => cfg.train.clip_zo,
        _ => cfg.train.clip,
    };
    if steps == 0 {
        return Ok(Some(PrivacyReport {
            target_epsilon: target.epsilon,
            delta,
            sample_rate,
            steps,
            clip,
            noise_multiplier: 0.0,
            epsilon_spent: 0.0,
            rdp_order: None,
        }));
    }
    let spec = PrivacySpec {
        epsilon: target.epsilon,
        delta,
        sample_rate,
        steps,
        clip,
    };
    let sigma = calibrate_sigma(&spec)?;
    // independent re-check through the forward accountant
    let (spent, order) = epsilon_spent(sigma.sigma, sample_rate, steps, delta, &default_orders())?;
    Ok(Some(PrivacyReport {
        target_epsilon: target.epsilon,
        delta,
        sample_rate,
        steps,
        clip,
        noise_multiplier: sigma.sigma,
        epsilon_spent: spent,
        rdp_order: Some(order),
    }))
}

fn prune_dataset(
    data: &Dataset,
    settings: &PruneSettings,
    sigma_fuse: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    let samples = data
        .samples
        .iter()
        .map(|s| match &s.features {
            Features::Tokens(t) => {
                let stack = similarity_attention(t, settings.heads)?;
                let cfg = PruneConfig {
                    keep: settings.keep,
                    centers: settings.centers,
                    sigma_fuse,
                    cls_axis: settings.cls_axis,
                };
                let pruned = prune_and_fuse(t, &stack, &cfg, rng)?;
                Ok(Sample::tokens(TokenSet::new(pruned.tokens)?, s.label))
            }
            Features::Dense(_) => Err(invalid("token pruning needs a token dataset")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        ..data.clone()
    })
}

/// Runs one configuration end to end.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load()?;
    train_on(cfg, &train_set, &test_set)
}

struct Plan {
    privacy: Option<PrivacyReport>,
    step: StepConfig,
    steps_per_epoch: usize,
    total_steps: usize,
}

fn plan(cfg: &RunConfig, n: usize) -> Result<Plan> {
    let m = cfg.train.batch_size;
    if m > n {
        return Err(invalid(format!("batch size {m} exceeds dataset size {n}")));
    }
    let steps_per_epoch = n.div_ceil(m);
    let total_steps = steps_per_epoch * cfg.epochs;
    let privacy = plan_privacy(cfg, n, total_steps)?;
    let step = StepConfig {
        learning_rate: cfg.train.learning_rate,
        clip: cfg.train.clip,
        noise_multiplier: privacy.as_ref().map_or(0.0, |p| p.noise_multiplier),
        batch_size: m,
        top_k_percent: cfg.train.top_k_percent,
        nonprivate: !cfg.is_private(),
        perturb: cfg.train.perturb,
        clip_zo: cfg.train.clip_zo,
    };
    step.validate()?;
    Ok(Plan {
        privacy,
        step,
        steps_per_epoch,
        total_steps,
    })
}

fn prune_inputs(
    cfg: &RunConfig,
    step: &StepConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(Dataset, Dataset, Option<f64>)> {
    match &cfg.prune {
        Some(p) => {
            let sigma_fuse = p.sigma_fuse.unwrap_or_else(|| step.noise_std());
            let mut rng = SeededRng::new(cfg.seed, STREAM_PRUNE);
            let tr = prune_dataset(train_set, p, sigma_fuse, &mut rng)?;
            let te = prune_dataset(test_set, p, sigma_fuse, &mut rng)?;
            Ok((tr, te, Some(sigma_fuse)))
        }
        None => Ok((train_set.clone(), test_set.clone(), None)),
    }
}

/// The train and test sets exactly as the model sees them (after token
/// pruning, when configured).
pub fn preprocess(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let plan = plan(cfg, train_set.len())?;
    let (tr, te, _) = prune_inputs(cfg, &plan.step, train_set, test_set)?;
    Ok((tr, te))
}

/// Like [`train`] with the datasets supplied by the caller.
pub fn train_on(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    train_set.validate()?;
    test_set.validate()?;

    let n = train_set.len();
    let Plan {
        privacy,
        step: step_cfg,
        steps_per_epoch,
        total_steps,
    } = plan(cfg, n)?;
    let m = step_cfg.batch_size;
    let sigma = step_cfg.noise_multiplier;
    let (train_set, test_set, sigma_fuse) = prune_inputs(cfg, &step_cfg, train_set, test_set)?;

    let spec = ModelSpec {
        kind: cfg.model.kind,
        input_dim: train_set.samples[0].input_dim(),
        num_classes: train_set.num_classes,
        init_seed: SeededRng::new(cfg.seed, STREAM_INIT).next_u64(),
        block_len: cfg.model.block_len,
    };
    let mut params = spec.init()?;
    let blocks_total = params.num_blocks();

    let mut batch_rng = SeededRng::new(cfg.seed, STREAM_BATCH);
    let mut noise_rng = SeededRng::new(cfg.seed, STREAM_NOISE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(total_steps);
    let mut blocks_updated = Vec::with_capacity(total_steps);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        for b in 0..steps_per_epoch {
            // fixed-size batches: the last one wraps around the permutation
            let batch: Vec<&Sample> = (0..m)
                .map(|i| &train_set.samples[order[(b * m + i) % n]])
                .collect();
            let mut this = step_cfg;
            this.learning_rate =
                cfg.train
                    .lr_schedule
                    .rate(cfg.train.learning_rate, step, total_steps);
            let at_step = |e: Error| Error::AtStep {
                step,
                source: Box::new(e),
            };

            let loss = batch
                .iter()
                .map(|s| forward_loss(&spec, &params, s))
                .sum::<Result<f64>>()
                .map_err(at_step)?
                / m as f64;
            losses.push(loss);

            let mask;
            (params, mask) = match cfg.method {
                Method::Dpzo => {
                    let next = dpzo_step(
                        &params,
                        |p, s: &&Sample| forward_loss(&spec, p, s),
                        &batch,
                        &this,
                        &mut noise_rng,
                    )
                    .map_err(at_step)?;
                    (next, UpdateMask::all(blocks_total))
                }
                method => {
                    let grads = batch
                        .iter()
                        .map(|s| per_sample_grad(&spec, &params, s))
                        .collect::<Result<Vec<Vec64>>>()
                        .map_err(at_step)?;
                    if method == Method::Dualpriv {
                        dual_priv_step(&params, &grads, &this, &mut noise_rng).map_err(at_step)?
                    } else {
                        let next =
                            dp_sgd_step(&params, &grads, &this, &mut noise_rng).map_err(at_step)?;
                        (next, UpdateMask::all(blocks_total))
                    }
                }
            };
            blocks_updated.push(mask.count());
            step += 1;
        }
    }

    let model = Model::new(spec, params)?;
    let final_train_acc = accuracy(&model, &train_set)?;
    let final_test_acc = accuracy(&model, &test_set)?;
    let mia_auc = if cfg.evaluate_mia {
        Some(mia_evaluate(&model, &train_set, &test_set)?.auc)
    } else {
        None
    };

    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: cfg.method,
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: total_steps,
        batch_size: m,
        top_k_percent: if cfg.method == Method::Dualpriv {
            cfg.train.top_k_percent
        } else {
            100.0
        },
        final_train_acc,
        final_test_acc,
        loss_trajectory: losses,
        privacy,
        noise_multiplier: sigma,
        sigma_fuse,
        blocks_total,
        mask_fraction: blocks_updated
            .iter()
            .map(|&c| c as f64 / blocks_total as f64)
            .collect(),
        blocks_updated,
        mia_auc,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, model })
}

/// One run per `P_K` in `grid`, everything else (seed included) fixed.
/// Runs execute on at most `workers` threads; results keep grid order.
pub fn sweep_topk(base: &RunConfig, grid: &[f64], workers: usize) -> Result<Vec<RunReport>> {
    if grid.is_empty() {
        return Err(Error::Empty("top-k grid"));
    }
    if base.method != Method::Dualpriv {
        return Err(invalid("a top-k sweep needs method = \"dualpriv\""));
    }
    let configs: Vec<RunConfig> = grid
        .iter()
        .map(|&pk| {
            let mut c = base.clone();
            c.train.top_k_percent = pk;
            c
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        configs
            .par_iter()
            .map(|c| train(c).map(|o| o.report))
            .collect()
    })
}

/// Fraction of argmax-correct predictions (ties to the lowest class).
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut correct = 0usize;
    for s in &data.samples {
        if model.predict(s)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub schema_version: u32,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub auc: f64,
    pub best_threshold: f64,
    pub best_accuracy: f64,
}

/// Loss-threshold attack: score = −loss.
pub fn mia_evaluate(model: &Model, members: &Dataset, nonmembers: &Dataset) -> Result<MiaReport> {
    mia_evaluate_with(model, members, nonmembers, |m, s| Ok(-m.loss(s)?))
}

/// Attack with a custom membership score (higher = more member-like).
pub fn mia_evaluate_with<F>(
    model: &Model,
    members: &Dataset,
    nonmembers: &Dataset,
    score: F,
) -> Result<MiaReport>
where
    F: Fn(&Model, &Sample) -> Result<f64>,
{
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Empty("membership sets"));
    }
    let member_scores = members
        .samples
        .iter()
        .map(|s| score(model, s))
        .collect::<Result<Vec<_>>>()?;
    let nonmember_scores = nonmembers
        .samples
        .iter()
        .map(|s| score(model, s))
        .collect::<Result<Vec<_>>>()?;
    let auc = auc(&member_scores, &nonmember_scores);
    let (best_threshold, best_accuracy) = best_threshold(&member_scores, &nonmember_scores);
    Ok(MiaReport {
        schema_version: REPORT_SCHEMA_VERSION,
        member_scores,
        nonmember_scores,
        auc,
        best_threshold,
        best_accuracy,
    })
}

/// Mann–Whitney AUC: P(member score > non-member score), ties count half.
pub fn auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // average 1-based ranks over tied runs
    let mut member_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        member_rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let nm = members.len() as f64;
    let nn = nonmembers.len() as f64;
    (member_rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nn)
}

/// Threshold `t` (predict member iff score ≥ t) maximizing accuracy.
fn best_threshold(members: &[f64], nonmembers: &[f64]) -> (f64, f64) {
    let total = (members.len() + nonmembers.len()) as f64;
    let mut candidates: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for t in candidates {
        let tp = members.iter().filter(|&&s| s >= t).count();
        let tn = nonmembers.iter().filter(|&&s| s < t).count();
        let acc = (tp + tn) as f64 / total;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

/// One line of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub eps: Option<f64>,
    #[serde(rename = "P_K")]
    pub p_k: f64,
    pub seed: u64,
    pub final_test_acc: f64,
    pub auc: Option<f64>,
}

/// CSV with columns `method,eps,P_K,seed,final_test_acc,auc`.
pub fn write_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| invalid(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
