//! Epoch-structured training procedures over the composite classifier:
//! plain supervised training, down-sampling, reweighting, gradient-reversal
//! debiasing, and the adversarial-augmentation family (pre / once / online /
//! robust), plus the label-switch generalization experiments.
//!
//! Every stochastic component draws from its own purpose-derived stream, so
//! procedures that differ only by an inactive component (robust with an
//! interval larger than an epoch, reversal strength zero, an empty attack
//! plan) replay the exact float-op sequence of their reduced counterpart.

use crate::attack::{
    ifgsm_bias_attack, joint_attack, plan_balancing_attack, untargeted_ascent, AdvSet,
    AttackBatch, AttackConfig, AttackLogRow, AttackResult,
};
use crate::dataset::{GroupedDataset, LabeledExample};
use crate::metrics::{evaluate, transferability_probe, ProbeConfig};
use crate::model::{
    extractor_hash, head_hash, CompositeClassifier, StandaloneBiasClassifier,
};
use crate::nn::{argmax_rows, sgd_update, softmax_ce, ConvNetGrads};
use crate::util::seed_stream;
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Original,
    Downsampling,
    Reweighting,
    AdvDebias,
    AedaPre,
    AedaOnce,
    AedaOnline,
    AedaRobust,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Original => "original",
            Method::Downsampling => "downsampling",
            Method::Reweighting => "reweighting",
            Method::AdvDebias => "adv_debias",
            Method::AedaPre => "aeda_pre",
            Method::AedaOnce => "aeda_once",
            Method::AedaOnline => "aeda_online",
            Method::AedaRobust => "aeda_robust",
        };
        f.write_str(s)
    }
}

/// Bias labels carried by adversarial examples in the robust bias-head step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLabelMode {
    /// Pre-attack labels: adversarial training semantics (default).
    Original,
    /// Attacked labels b'.
    Attacked,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub name: String,
    pub lr: f32,
    pub momentum: f32,
    /// Learning-rate multiplier applied from `lr_decay_at_frac * epochs` on.
    pub lr_decay_factor: f32,
    pub lr_decay_at_frac: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            name: "sgd".into(),
            lr: 0.01,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_at_frac: 2.0 / 3.0,
        }
    }
}

impl OptimizerSpec {
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f32 {
        let cut = (self.lr_decay_at_frac * total_epochs as f64).floor() as usize;
        if total_epochs > 0 && epoch >= cut.max(1) {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvergenceRule {
    pub window: usize,
    pub rel_tol: f64,
    pub min_epochs: usize,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            window: 5,
            rel_tol: 1e-3,
            min_epochs: 20,
        }
    }
}

impl ConvergenceRule {
    /// True once the relative loss improvement over the window drops below
    /// tolerance; never before `min_epochs` completed epochs.
    pub fn fired(&self, losses: &[f64]) -> bool {
        let m = losses.len();
        if m < self.min_epochs || m <= self.window {
            return false;
        }
        let prev = losses[m - 1 - self.window];
        let cur = losses[m - 1];
        (prev - cur) / prev.abs().max(1e-9) < self.rel_tol
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Adversarial mini-batch interval for the robust bias-head step.
    pub k: usize,
    pub convergence: ConvergenceRule,
    pub seed: u64,
    /// Stop regenerating adversarial examples after this epoch (ablation).
    pub online_cutoff_epoch: Option<usize>,
    /// Gradient-reversal strength for adv_debias.
    pub adv_debias_strength: f32,
    pub robust_adv_labels: AdvLabelMode,
    /// Start the final aeda_pre model from the preliminary one.
    pub pre_finetune: bool,
    /// Re-initialize the bias head before each epoch's bias step, making it
    /// a fresh per-epoch minimization over h_b; `false` keeps warm-starting.
    pub bias_head_reset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Original,
            epochs: 60,
            batch_size: 64,
            optimizer: OptimizerSpec::default(),
            k: 2,
            convergence: ConvergenceRule::default(),
            seed: 0,
            online_cutoff_epoch: None,
            adv_debias_strength: 1.0,
            robust_adv_labels: AdvLabelMode::Original,
            pre_finetune: false,
            bias_head_reset: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.adv_debias_strength) && self.adv_debias_strength < 0.0 {
            return Err(Error::Config("reversal strength must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub target_train_loss: f64,
    /// Balanced accuracy on the test split, percent.
    pub bacc: f64,
    /// Overall classification bias on the test split (raw fraction scale).
    pub bias: f64,
    /// Transferability probe accuracy r for this epoch, percent.
    pub transfer_acc: Option<f64>,
    pub attack_success_rate: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    EpochLimit,
    Diverged,
}

/// Per-epoch parameter-hash journal for the coupled procedures. The bias
/// step must leave the extractor untouched and the attack step must leave
/// everything untouched; violations are detectable here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochJournal {
    pub epoch: usize,
    pub extractor_after_target: String,
    pub extractor_after_bias: String,
    pub bias_head_after_bias: String,
    pub extractor_after_attack: String,
    pub adv_digest: Option<String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CompositeClassifier,
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
    pub attack_rows: Vec<AttackLogRow>,
    pub journal: Vec<EpochJournal>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub enum TrainResult {
    Completed(Box<TrainOutcome>),
    Inapplicable { reason: String },
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeSettings {
    pub enabled: bool,
    pub cadence: usize,
    pub cfg: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            cadence: 1,
            cfg: ProbeConfig::default(),
        }
    }
}

pub struct TrainContext<'a> {
    pub train: &'a GroupedDataset,
    pub test: &'a GroupedDataset,
    pub config: &'a TrainConfig,
    pub attack: &'a AttackConfig,
    pub probe: ProbeSettings,
}

/// Dispatches to the configured training procedure.
pub fn run_method(ctx: &TrainContext, model: CompositeClassifier) -> Result<TrainResult> {
    ctx.config.validate()?;
    ctx.attack.validate()?;
    match ctx.config.method {
        Method::Original => Ok(TrainResult::Completed(Box::new(train_original(ctx, model)?))),
        Method::Downsampling => train_downsampling(ctx, model),
        Method::Reweighting => train_reweighting(ctx, model),
        Method::AdvDebias => Ok(TrainResult::Completed(Box::new(train_adv_debias(ctx, model)?))),
        Method::AedaPre => Ok(TrainResult::Completed(Box::new(train_aeda_pre(ctx, model)?))),
        Method::AedaOnce => Ok(TrainResult::Completed(Box::new(train_coupled(
            ctx,
            model,
            AedaMode::Once,
        )?))),
        Method::AedaOnline => Ok(TrainResult::Completed(Box::new(train_coupled(
            ctx,
            model,
            AedaMode::Online,
        )?))),
        Method::AedaRobust => Ok(TrainResult::Completed(Box::new(train_coupled(
            ctx,
            model,
            AedaMode::Robust,
        )?))),
    }
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

struct LinVel {
    w: Array2<f32>,
    b: Array1<f32>,
}

impl LinVel {
    fn zeros(l: &crate::nn::Linear<f32>) -> Self {
        Self {
            w: Array2::zeros(l.weight.dim()),
            b: Array1::zeros(l.bias.len()),
        }
    }
}

struct OptState {
    extractor: ConvNetGrads<f32>,
    target: LinVel,
    bias: LinVel,
}

impl OptState {
    fn new(model: &CompositeClassifier) -> Self {
        Self {
            extractor: model.extractor.zero_grads(),
            target: LinVel::zeros(&model.target_head),
            bias: LinVel::zeros(&model.bias_head),
        }
    }
}

/// Training pool: original examples optionally unioned with an adversarial
/// set whose target labels are preserved.
struct Pool<'a> {
    ds: &'a GroupedDataset,
    adv: Option<&'a AdvSet>,
}

impl Pool<'_> {
    fn len(&self) -> usize {
        self.ds.len() + self.adv.map_or(0, |a| a.len())
    }

    fn gather_target(&self, idx: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let n_ori = self.ds.len();
        let (c, h, w) = self.ds.examples[0].pixels.dim();
        let mut x = Array4::zeros((idx.len(), c, h, w));
        let mut t = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            if i < n_ori {
                x.index_axis_mut(Axis(0), row).assign(&self.ds.examples[i].pixels);
                t.push(self.ds.examples[i].target as usize);
            } else {
                let a = self.adv.expect("index beyond originals requires adv set");
                let j = i - n_ori;
                x.index_axis_mut(Axis(0), row).assign(&a.pixels.index_axis(Axis(0), j));
                t.push(a.target[j] as usize);
            }
        }
        (x, t)
    }
}

/// One SGD step on (extractor, target head).
fn target_step(
    model: &mut CompositeClassifier,
    x: &Array4<f32>,
    t: &[usize],
    weights: Option<&[f32]>,
    opt: &mut OptState,
    lr: f32,
    momentum: f32,
) -> f32 {
    let (feat, cache) = model.extractor.forward_features(x);
    let logits = model.target_head.forward(&feat);
    let (loss, dlogits) = softmax_ce(&logits, t, weights);
    let (dfeat, dw, db) = model.target_head.backward(&feat, &dlogits, true);
    let (_, grads) = model
        .extractor
        .backward_features(x, &cache, &dfeat.unwrap(), false, true);
    model
        .extractor
        .apply_sgd(&grads.unwrap(), &mut opt.extractor, lr, momentum);
    sgd_update(&mut model.target_head.weight, &dw, &mut opt.target.w, lr, momentum);
    sgd_update(&mut model.target_head.bias, &db, &mut opt.target.b, lr, momentum);
    loss
}

/// One SGD step on the bias head alone over precomputed features.
fn bias_head_step(
    model: &mut CompositeClassifier,
    feat: &Array2<f32>,
    b: &[usize],
    opt: &mut OptState,
    lr: f32,
    momentum: f32,
) -> f32 {
    let logits = model.bias_head.forward(feat);
    let (loss, dlogits) = softmax_ce(&logits, b, None);
    let (_, dw, db) = model.bias_head.backward(feat, &dlogits, false);
    sgd_update(&mut model.bias_head.weight, &dw, &mut opt.bias.w, lr, momentum);
    sgd_update(&mut model.bias_head.bias, &db, &mut opt.bias.b, lr, momentum);
    loss
}

/// Joint step with gradient reversal: the target loss trains (f, h_t); the
/// bias loss trains h_b while pushing `-strength` times its feature gradient
/// into the extractor.
fn adv_debias_step(
    model: &mut CompositeClassifier,
    x: &Array4<f32>,
    t: &[usize],
    b: &[usize],
    strength: f32,
    opt: &mut OptState,
    lr: f32,
    momentum: f32,
) -> f32 {
    let (feat, cache) = model.extractor.forward_features(x);
    let logits_t = model.target_head.forward(&feat);
    let (loss, dlogits_t) = softmax_ce(&logits_t, t, None);
    let (dfeat_t, dw_t, db_t) = model.target_head.backward(&feat, &dlogits_t, true);
    let dfeat_t = dfeat_t.unwrap();

    let logits_b = model.bias_head.forward(&feat);
    let (_, dlogits_b) = softmax_ce(&logits_b, b, None);
    let (dfeat_b, dw_b, db_b) = model.bias_head.backward(&feat, &dlogits_b, true);

    // strength == 0 must replay the original-training op sequence exactly.
    let dfeat_total = if strength == 0.0 {
        dfeat_t
    } else {
        dfeat_t - &(dfeat_b.unwrap() * strength)
    };
    let (_, grads) = model
        .extractor
        .backward_features(x, &cache, &dfeat_total, false, true);
    model
        .extractor
        .apply_sgd(&grads.unwrap(), &mut opt.extractor, lr, momentum);
    sgd_update(&mut model.target_head.weight, &dw_t, &mut opt.target.w, lr, momentum);
    sgd_update(&mut model.target_head.bias, &db_t, &mut opt.target.b, lr, momentum);
    sgd_update(&mut model.bias_head.weight, &dw_b, &mut opt.bias.w, lr, momentum);
    sgd_update(&mut model.bias_head.bias, &db_b, &mut opt.bias.b, lr, momentum);
    loss
}

/// One target-training epoch over the pool. Returns the mean loss.
fn target_epoch(
    model: &mut CompositeClassifier,
    pool: &Pool,
    weights: Option<&[f32]>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    opt: &mut OptState,
    lr: f32,
    momentum: f32,
) -> f64 {
    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total = 0.0f64;
    for chunk in order.chunks(batch_size) {
        let (x, t) = pool.gather_target(chunk);
        let w = weights.map(|ws| chunk.iter().map(|&i| ws[i]).collect::<Vec<f32>>());
        let loss = target_step(model, &x, &t, w.as_deref(), opt, lr, momentum);
        total += loss as f64 * chunk.len() as f64;
    }
    total / n as f64
}

/// One bias-head epoch over the originals with true bias labels, the
/// extractor frozen. Features are extracted once per epoch (the extractor
/// does not change during this step) and the head trains on cached rows. In
/// robust mode an adversarial mini-batch (with labels per `label_mode`) is
/// inserted after every k-th original batch. With `reset`, the head is
/// freshly initialized first, making the step a per-epoch minimization.
#[allow(clippy::too_many_arguments)]
fn bias_epoch(
    model: &mut CompositeClassifier,
    ds: &GroupedDataset,
    robust: Option<(&AdvSet, usize, AdvLabelMode)>,
    reset: Option<(u64, usize)>, // (seed, epoch)
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    rng_draw: &mut ChaCha8Rng,
    opt: &mut OptState,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if let Some((seed, epoch)) = reset {
        model.reset_bias_head(seed, &format!("epoch-{epoch}"));
        opt.bias = LinVel::zeros(&model.bias_head);
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (x, _, b_all) = ds.gather(&indices);
    let feats = model.features(&x, 256)?;
    let adv_feats = match robust {
        Some((adv, _, _)) if !adv.is_empty() => Some(model.features(&adv.pixels, 256)?),
        _ => None,
    };

    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let dim = feats.dim().1;
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let mut f = Array2::zeros((chunk.len(), dim));
        let mut b = Vec::with_capacity(chunk.len());
        for (row, &i) in chunk.iter().enumerate() {
            f.index_axis_mut(Axis(0), row).assign(&feats.index_axis(Axis(0), i));
            b.push(b_all[i]);
        }
        bias_head_step(model, &f, &b, opt, lr, momentum);
        if let (Some((adv, k, label_mode)), Some(adv_feats)) = (robust, adv_feats.as_ref()) {
            if !adv.is_empty() && (bi + 1) % k == 0 {
                let take = batch_size.min(adv.len());
                let picks = rand::seq::index::sample(rng_draw, adv.len(), take);
                let mut af = Array2::zeros((take, dim));
                let mut ab = Vec::with_capacity(take);
                for (row, j) in picks.iter().enumerate() {
                    af.index_axis_mut(Axis(0), row)
                        .assign(&adv_feats.index_axis(Axis(0), j));
                    ab.push(match label_mode {
                        AdvLabelMode::Original => adv.b_original[j] as usize,
                        AdvLabelMode::Attacked => adv.b_attacked[j] as usize,
                    });
                }
                bias_head_step(model, &af, &ab, opt, lr, momentum);
            }
        }
    }
    Ok(())
}

struct EpochEval {
    bacc: f64,
    bias: f64,
}

fn eval_epoch(model: &CompositeClassifier, test: &GroupedDataset) -> Result<EpochEval> {
    let report = evaluate(model, test)?;
    Ok(EpochEval {
        bacc: report.bacc,
        bias: report.overall_bias,
    })
}

// ---------------------------------------------------------------------------
// Plain target-only procedures
// ---------------------------------------------------------------------------

struct PlainRunSpec<'a> {
    train_ds: &'a GroupedDataset,
    adv: Option<&'a AdvSet>,
    weights: Option<Vec<f32>>,
    /// Fixed adversarial set to probe each epoch (aeda_pre).
    probe_adv: Option<&'a AdvSet>,
    attack_success_rate: Option<f64>,
}

/// The shared target-only loop: used by original, down-sampling,
/// reweighting, and the final phase of aeda_pre.
fn train_target_loop(
    ctx: &TrainContext,
    model: &mut CompositeClassifier,
    spec: PlainRunSpec,
) -> Result<(Vec<EpochRecord>, RunStatus)> {
    let cfg = ctx.config;
    let mut opt = OptState::new(model);
    let mut rng = seed_stream(cfg.seed, "shuffle-target");
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut status = RunStatus::EpochLimit;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let pool = Pool { ds: spec.train_ds, adv: spec.adv };
        let loss = target_epoch(
            model,
            &pool,
            spec.weights.as_deref(),
            cfg.batch_size,
            &mut rng,
            &mut opt,
            lr,
            cfg.optimizer.momentum,
        );
        losses.push(loss);

        let transfer = match spec.probe_adv {
            Some(adv)
                if ctx.probe.enabled && !adv.is_empty() && epoch % ctx.probe.cadence == 0 =>
            {
                let labels: Vec<usize> = adv.b_attacked.iter().map(|&b| b as usize).collect();
                let probe_cfg = ProbeConfig { seed: cfg.seed, ..ctx.probe.cfg };
                Some(transferability_probe(
                    model,
                    &adv.pixels,
                    &labels,
                    ctx.test,
                    &probe_cfg,
                    &format!("epoch-{epoch}"),
                )?)
            }
            _ => None,
        };

        let eval = eval_epoch(model, ctx.test)?;
        records.push(EpochRecord {
            epoch,
            target_train_loss: loss,
            bacc: eval.bacc,
            bias: eval.bias,
            transfer_acc: transfer,
            attack_success_rate: spec.attack_success_rate,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        if !loss.is_finite() {
            status = RunStatus::Diverged;
            break;
        }
        if cfg.convergence.fired(&losses) {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok((records, status))
}

pub fn train_original(ctx: &TrainContext, mut model: CompositeClassifier) -> Result<TrainOutcome> {
    let (records, status) = train_target_loop(
        ctx,
        &mut model,
        PlainRunSpec {
            train_ds: ctx.train,
            adv: None,
            weights: None,
            probe_adv: None,
            attack_success_rate: None,
        },
    )?;
    Ok(TrainOutcome {
        model,
        records,
        status,
        attack_rows: vec![],
        journal: vec![],
        warnings: vec![],
    })
}

pub fn train_downsampling(ctx: &TrainContext, mut model: CompositeClassifier) -> Result<TrainResult> {
    let counts = ctx.train.group_counts();
    let classes = ctx.train.classes();
    let mut empty: Vec<u8> = Vec::new();
    for &t in &classes {
        let c0 = *counts.get(&(t, 0)).unwrap_or(&0);
        let c1 = *counts.get(&(t, 1)).unwrap_or(&0);
        if c0 == 0 || c1 == 0 {
            empty.push(t);
        }
    }
    if !empty.is_empty() {
        return Ok(TrainResult::Inapplicable {
            reason: format!(
                "down-sampling needs both bias groups per class; empty cells for classes {empty:?}"
            ),
        });
    }

    // Per class, keep the minimum cell size from each cell.
    let mut members: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for (i, e) in ctx.train.examples.iter().enumerate() {
        members.entry((e.target, e.bias)).or_default().push(i);
    }
    let mut keep = vec![false; ctx.train.len()];
    for &t in &classes {
        let m = counts[&(t, 0)].min(counts[&(t, 1)]);
        for b in 0u8..2 {
            let cell = &members[&(t, b)];
            if cell.len() == m {
                for &i in cell {
                    keep[i] = true;
                }
            } else {
                let mut rng = seed_stream(ctx.config.seed, &format!("downsample-{t}-{b}"));
                for j in rand::seq::index::sample(&mut rng, cell.len(), m).iter() {
                    keep[cell[j]] = true;
                }
            }
        }
    }
    let examples: Vec<LabeledExample> = ctx
        .train
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    let reduced = GroupedDataset::new(ctx.train.split, examples);

    let reduced_ctx = TrainContext {
        train: &reduced,
        test: ctx.test,
        config: ctx.config,
        attack: ctx.attack,
        probe: ctx.probe,
    };
    let (records, status) = train_target_loop(
        &reduced_ctx,
        &mut model,
        PlainRunSpec {
            train_ds: &reduced,
            adv: None,
            weights: None,
            probe_adv: None,
            attack_success_rate: None,
        },
    )?;
    Ok(TrainResult::Completed(Box::new(TrainOutcome {
        model,
        records,
        status,
        attack_rows: vec![],
        journal: vec![],
        warnings: vec![],
    })))
}

/// Per-cell weights proportional to 1/count, normalized so the mean over
/// nonempty cells is 1.
pub fn reweighting_weights(ds: &GroupedDataset) -> Option<BTreeMap<(u8, u8), f32>> {
    let counts = ds.group_counts();
    for &t in &ds.classes() {
        if counts.get(&(t, 0)).copied().unwrap_or(0) == 0
            || counts.get(&(t, 1)).copied().unwrap_or(0) == 0
        {
            return None;
        }
    }
    let raw: BTreeMap<(u8, u8), f64> =
        counts.iter().map(|(&cell, &c)| (cell, 1.0 / c as f64)).collect();
    let mean = raw.values().sum::<f64>() / raw.len() as f64;
    Some(raw.into_iter().map(|(cell, w)| (cell, (w / mean) as f32)).collect())
}

pub fn train_reweighting(ctx: &TrainContext, mut model: CompositeClassifier) -> Result<TrainResult> {
    let Some(cell_weights) = reweighting_weights(ctx.train) else {
        return Ok(TrainResult::Inapplicable {
            reason: "reweighting needs both bias groups per class".into(),
        });
    };
    let weights: Vec<f32> = ctx
        .train
        .examples
        .iter()
        .map(|e| cell_weights[&(e.target, e.bias)])
        .collect();
    let (records, status) = train_target_loop(
        ctx,
        &mut model,
        PlainRunSpec {
            train_ds: ctx.train,
            adv: None,
            weights: Some(weights),
            probe_adv: None,
            attack_success_rate: None,
        },
    )?;
    Ok(TrainResult::Completed(Box::new(TrainOutcome {
        model,
        records,
        status,
        attack_rows: vec![],
        journal: vec![],
        warnings: vec![],
    })))
}

pub fn train_adv_debias(ctx: &TrainContext, mut model: CompositeClassifier) -> Result<TrainOutcome> {
    let cfg = ctx.config;
    let mut opt = OptState::new(&model);
    let mut rng = seed_stream(cfg.seed, "shuffle-target");
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut status = RunStatus::EpochLimit;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let n = ctx.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t, b) = ctx.train.gather(chunk);
            let loss = adv_debias_step(
                &mut model,
                &x,
                &t,
                &b,
                cfg.adv_debias_strength,
                &mut opt,
                lr,
                cfg.optimizer.momentum,
            );
            total += loss as f64 * chunk.len() as f64;
        }
        let loss = total / n as f64;
        losses.push(loss);
        let eval = eval_epoch(&model, ctx.test)?;
        records.push(EpochRecord {
            epoch,
            target_train_loss: loss,
            bacc: eval.bacc,
            bias: eval.bias,
            transfer_acc: None,
            attack_success_rate: None,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
        if !loss.is_finite() {
            status = RunStatus::Diverged;
            break;
        }
        if cfg.convergence.fired(&losses) {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        status,
        attack_rows: vec![],
        journal: vec![],
        warnings: vec![],
    })
}

// ---------------------------------------------------------------------------
// AEDA family
// ---------------------------------------------------------------------------

pub fn train_aeda_pre(ctx: &TrainContext, model: CompositeClassifier) -> Result<TrainOutcome> {
    let cfg = ctx.config;
    let plan = plan_balancing_attack(ctx.train, cfg.seed);
    if plan.is_empty() {
        // Already balanced: identical to plain training on the originals.
        return train_original(ctx, model);
    }

    // Preliminary target classifier on the originals.
    let mut prelim = CompositeClassifier::init_tagged(&model.config, cfg.seed, "prelim")?;
    {
        let mut opt = OptState::new(&prelim);
        let mut rng = seed_stream(cfg.seed, "prelim-shuffle");
        let mut losses = Vec::new();
        for epoch in 0..cfg.epochs {
            let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
            let pool = Pool { ds: ctx.train, adv: None };
            let loss = target_epoch(
                &mut prelim,
                &pool,
                None,
                cfg.batch_size,
                &mut rng,
                &mut opt,
                lr,
                cfg.optimizer.momentum,
            );
            losses.push(loss);
            if !loss.is_finite() {
                return Err(Error::Train("preliminary target classifier diverged".into()));
            }
            if cfg.convergence.fired(&losses) {
                break;
            }
        }
    }

    // Standalone bias classifier on the originals.
    let mut bias_model = StandaloneBiasClassifier::init(&model.config, cfg.seed, "pre-bias")?;
    let labels: Vec<usize> = ctx.train.examples.iter().map(|e| e.bias as usize).collect();
    train_binary_classifier(
        &mut bias_model,
        ctx.train.len(),
        &|idx| ctx.train.gather(idx).0,
        &labels,
        cfg,
        "pre-bias-shuffle",
        None,
    )?;

    // One joint attack against the pair.
    let surface = crate::attack::PairedSurface {
        bias_model: &bias_model,
        target_model: &prelim,
    };
    let batch = AttackBatch::from_plan(ctx.train, &plan);
    let result = joint_attack(&surface, &batch, ctx.attack)?;
    let attack_rows = result.log_rows();
    let success_rate = result.success_rate;
    let x_adv = result.kept_adv(ctx.attack.success_rule);
    let mut warnings = Vec::new();
    if x_adv.is_empty() {
        warnings.push("attack produced no kept examples; training on originals only".into());
    }

    // Fresh target model on the augmented pool (or fine-tune the prelim).
    let mut final_model = if cfg.pre_finetune { prelim } else { model };
    let adv_opt = (!x_adv.is_empty()).then_some(&x_adv);
    let (records, status) = train_target_loop(
        ctx,
        &mut final_model,
        PlainRunSpec {
            train_ds: ctx.train,
            adv: adv_opt,
            weights: None,
            probe_adv: adv_opt,
            attack_success_rate: Some(success_rate),
        },
    )?;
    Ok(TrainOutcome {
        model: final_model,
        records,
        status,
        attack_rows,
        journal: vec![],
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AedaMode {
    Online,
    Once,
    Robust,
}

/// The coupled three-step loop shared by aeda_online, aeda_once, and
/// aeda_robust. Per epoch: (1) target training on originals plus the
/// previous epoch's adversarial set, (2) bias-head training with the
/// extractor frozen, (3) regeneration of the adversarial set against the
/// coupled classifier.
fn train_coupled(ctx: &TrainContext, mut model: CompositeClassifier, mode: AedaMode) -> Result<TrainOutcome> {
    let cfg = ctx.config;
    let plan = plan_balancing_attack(ctx.train, cfg.seed);
    let plan_batch = AttackBatch::from_plan(ctx.train, &plan);
    let mut rng_target = seed_stream(cfg.seed, "shuffle-target");
    let mut rng_bias = seed_stream(cfg.seed, "shuffle-bias");
    let mut rng_draw = seed_stream(cfg.seed, "adv-draw");
    let mut opt = OptState::new(&model);
    let mut x_adv: Option<AdvSet> = None;
    let mut last_rate: Option<f64> = None;
    let mut attack_rows = Vec::new();
    let mut records = Vec::new();
    let mut journal = Vec::new();
    let mut warnings = Vec::new();
    let mut losses = Vec::new();
    let mut status = RunStatus::EpochLimit;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);

        // (1) target task training on {X_ori, X_adv^(m-1)}
        let pool = Pool { ds: ctx.train, adv: x_adv.as_ref() };
        let loss = target_epoch(
            &mut model,
            &pool,
            None,
            cfg.batch_size,
            &mut rng_target,
            &mut opt,
            lr,
            cfg.optimizer.momentum,
        );
        losses.push(loss);
        let extractor_after_target = extractor_hash(&model);

        // (2) bias-head training, extractor frozen; robust mode interleaves
        // adversarial mini-batches every k batches.
        let robust_arg = match (mode, x_adv.as_ref()) {
            (AedaMode::Robust, Some(adv)) => Some((adv, cfg.k, cfg.robust_adv_labels)),
            _ => None,
        };
        bias_epoch(
            &mut model,
            ctx.train,
            robust_arg,
            cfg.bias_head_reset.then_some((cfg.seed, epoch)),
            cfg.batch_size,
            &mut rng_bias,
            &mut rng_draw,
            &mut opt,
            lr,
            cfg.optimizer.momentum,
        )?;
        let extractor_after_bias = extractor_hash(&model);
        let bias_head_after_bias = head_hash(&model.bias_head);
        if extractor_after_bias != extractor_after_target {
            return Err(Error::Train(
                "freeze contract violated: extractor changed during bias-head step".into(),
            ));
        }

        // (3) adversarial attack against the coupled classifier.
        let regenerate = match mode {
            AedaMode::Once => epoch == 0,
            _ => cfg.online_cutoff_epoch.map_or(true, |cut| epoch < cut),
        };
        if regenerate && !plan.is_empty() {
            let result: AttackResult = joint_attack(&model, &plan_batch, ctx.attack)?;
            last_rate = Some(result.success_rate);
            attack_rows = result.log_rows();
            let kept = result.kept_adv(ctx.attack.success_rule);
            if kept.is_empty() {
                warnings.push(format!(
                    "epoch {epoch}: attack kept no examples; continuing with empty augmentation"
                ));
                x_adv = None;
            } else {
                x_adv = Some(kept);
            }
        }
        let extractor_after_attack = extractor_hash(&model);
        if extractor_after_attack != extractor_after_bias {
            return Err(Error::Train(
                "attack step mutated model parameters".into(),
            ));
        }

        // Probe r^(m) on the current adversarial set.
        let transfer = match (&x_adv, ctx.probe.enabled && epoch % ctx.probe.cadence == 0) {
            (Some(adv), true) => {
                let labels: Vec<usize> = adv.b_attacked.iter().map(|&b| b as usize).collect();
                let probe_cfg = ProbeConfig { seed: cfg.seed, ..ctx.probe.cfg };
                Some(transferability_probe(
                    &mut model,
                    &adv.pixels,
                    &labels,
                    ctx.test,
                    &probe_cfg,
                    &format!("epoch-{epoch}"),
                )?)
            }
            _ => None,
        };

        journal.push(EpochJournal {
            epoch,
            extractor_after_target,
            extractor_after_bias,
            bias_head_after_bias,
            extractor_after_attack,
            adv_digest: x_adv.as_ref().map(|a| a.digest()),
        });

        let eval = eval_epoch(&model, ctx.test)?;
        records.push(EpochRecord {
            epoch,
            target_train_loss: loss,
            bacc: eval.bacc,
            bias: eval.bias,
            transfer_acc: transfer,
            attack_success_rate: last_rate,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        if !loss.is_finite() {
            status = RunStatus::Diverged;
            break;
        }
        if cfg.convergence.fired(&losses) {
            status = RunStatus::Converged;
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        records,
        status,
        attack_rows,
        journal,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Standalone binary classifiers and the switch experiments
// ---------------------------------------------------------------------------

/// Trains a standalone binary classifier. With `adversarial`, every batch is
/// augmented with an untargeted ascent copy of itself under true labels
/// (adversarial training).
pub fn train_binary_classifier(
    g: &mut StandaloneBiasClassifier,
    n: usize,
    gather: &dyn Fn(&[usize]) -> Array4<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    shuffle_purpose: &str,
    adversarial: Option<&AttackConfig>,
) -> Result<RunStatus> {
    let mut vel_extractor = g.extractor.zero_grads();
    let mut vel_head = LinVel::zeros(&g.head);
    let mut rng = seed_stream(cfg.seed, shuffle_purpose);
    let mut losses = Vec::new();
    let mut status = RunStatus::EpochLimit;
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (x, y) = match adversarial {
                Some(acfg) => {
                    let x_at = untargeted_ascent(&*g, &x, &y, acfg)?;
                    let (n0, c, h, w) = x.dim();
                    let mut both = Array4::zeros((2 * n0, c, h, w));
                    both.slice_mut(ndarray::s![..n0, .., .., ..]).assign(&x);
                    both.slice_mut(ndarray::s![n0.., .., .., ..]).assign(&x_at);
                    let mut yy = y.clone();
                    yy.extend_from_slice(&y);
                    (both, yy)
                }
                None => (x, y),
            };
            let (feat, cache) = g.extractor.forward_features(&x);
            let logits = g.head.forward(&feat);
            let (loss, dlogits) = softmax_ce(&logits, &y, None);
            let (dfeat, dw, db) = g.head.backward(&feat, &dlogits, true);
            let (_, grads) = g
                .extractor
                .backward_features(&x, &cache, &dfeat.unwrap(), false, true);
            g.extractor
                .apply_sgd(&grads.unwrap(), &mut vel_extractor, lr, cfg.optimizer.momentum);
            sgd_update(&mut g.head.weight, &dw, &mut vel_head.w, lr, cfg.optimizer.momentum);
            sgd_update(&mut g.head.bias, &db, &mut vel_head.b, lr, cfg.optimizer.momentum);
            total += loss as f64 * chunk.len() as f64;
        }
        let loss = total / n as f64;
        losses.push(loss);
        if !loss.is_finite() {
            status = RunStatus::Diverged;
            break;
        }
        if cfg.convergence.fired(&losses) {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(status)
}

/// Accuracy (percent) of a standalone classifier against true bias labels.
pub fn standalone_accuracy(g: &StandaloneBiasClassifier, ds: &GroupedDataset) -> f64 {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (x, _, b) = ds.gather(&indices);
    let preds = g.predict(&x, 256);
    let correct = preds.iter().zip(&b).filter(|(p, b)| p == b).count();
    100.0 * correct as f64 / b.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwitchReport {
    /// Plain classifier on true labels (upper reference).
    pub reference_acc: f64,
    /// Original images, manually flipped labels.
    pub hard_switch_acc: f64,
    /// Adversarial images from the plain classifier, attacked labels.
    pub adv_switch_acc: f64,
    /// Adversarial images from the adversarially trained classifier.
    pub adv_switch_robust_acc: f64,
    pub attack_success_on_reference: f64,
    pub attack_success_on_robust: f64,
    pub n_test: usize,
}

/// Label-switch generalization experiments on the bias task: trains the
/// reference classifier, the hard-switch and ADV-switch variants, and the
/// robust ADV-switch variant, and evaluates all on original test images.
pub fn run_switch_experiments(
    train: &GroupedDataset,
    test: &GroupedDataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
) -> Result<SwitchReport> {
    attack.validate()?;
    cfg.validate()?;
    let n = train.len();
    let gather = |idx: &[usize]| train.gather(idx).0;
    let true_b: Vec<usize> = train.examples.iter().map(|e| e.bias as usize).collect();
    let flipped_b: Vec<usize> = true_b.iter().map(|&b| 1 - b).collect();

    // Reference classifier on true labels.
    let mut g_ref = StandaloneBiasClassifier::init(&modelless_config(train)?, cfg.seed, "switch-ref")?;
    train_binary_classifier(&mut g_ref, n, &gather, &true_b, cfg, "switch-ref-shuffle", None)?;
    let reference_acc = standalone_accuracy(&g_ref, test);

    // Hard switch: original pixels, flipped labels.
    let mut g_hard =
        StandaloneBiasClassifier::init(&g_ref.config, cfg.seed, "switch-hard")?;
    train_binary_classifier(&mut g_hard, n, &gather, &flipped_b, cfg, "switch-hard-shuffle", None)?;
    let hard_switch_acc = standalone_accuracy(&g_hard, test);

    // ADV switch: attack every image toward the flipped label on g_ref.
    let flip_batch = AttackBatch::flip_all(train);
    let adv_ref = ifgsm_bias_attack(&g_ref, &flip_batch, attack)?;
    let adv_labels: Vec<usize> = adv_ref.adv.b_attacked.iter().map(|&b| b as usize).collect();
    let mut g_adv = StandaloneBiasClassifier::init(&g_ref.config, cfg.seed, "switch-adv")?;
    let adv_pixels = adv_ref.adv.pixels.clone();
    train_binary_classifier(
        &mut g_adv,
        n,
        &|idx| gather_rows(&adv_pixels, idx),
        &adv_labels,
        cfg,
        "switch-adv-shuffle",
        None,
    )?;
    let adv_switch_acc = standalone_accuracy(&g_adv, test);

    // Robust classifier: adversarial training from the reference weights.
    let mut g_robust = g_ref.clone();
    train_binary_classifier(
        &mut g_robust,
        n,
        &gather,
        &true_b,
        cfg,
        "switch-robust-shuffle",
        Some(attack),
    )?;

    // ADV switch (robust): attack the robust classifier.
    let adv_rob = ifgsm_bias_attack(&g_robust, &flip_batch, attack)?;
    let adv_rob_labels: Vec<usize> = adv_rob.adv.b_attacked.iter().map(|&b| b as usize).collect();
    let mut g_advr = StandaloneBiasClassifier::init(&g_ref.config, cfg.seed, "switch-advr")?;
    let adv_rob_pixels = adv_rob.adv.pixels.clone();
    train_binary_classifier(
        &mut g_advr,
        n,
        &|idx| gather_rows(&adv_rob_pixels, idx),
        &adv_rob_labels,
        cfg,
        "switch-advr-shuffle",
        None,
    )?;
    let adv_switch_robust_acc = standalone_accuracy(&g_advr, test);

    Ok(SwitchReport {
        reference_acc,
        hard_switch_acc,
        adv_switch_acc,
        adv_switch_robust_acc,
        attack_success_on_reference: adv_ref.success_rate,
        attack_success_on_robust: adv_rob.success_rate,
        n_test: test.len(),
    })
}

fn gather_rows(pixels: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = pixels.dim();
    let mut x = Array4::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        x.index_axis_mut(Axis(0), row).assign(&pixels.index_axis(Axis(0), i));
    }
    x
}

fn modelless_config(ds: &GroupedDataset) -> Result<crate::model::ModelConfig> {
    if ds.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let dim = ds.examples[0].pixels.dim();
    crate::model::ModelConfig::preset("small_cnn", dim, 10)
}

/// Accuracy of the main bias head over a dataset (diagnostic).
pub fn bias_head_accuracy(model: &CompositeClassifier, ds: &GroupedDataset) -> Result<f64> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (x, _, b) = ds.gather(&indices);
    let logits_pred = model.predict_bias(&x, crate::model::BiasHead::Main, 256)?;
    let correct = logits_pred.iter().zip(&b).filter(|(p, b)| p == b).count();
    Ok(100.0 * correct as f64 / b.len() as f64)
}

/// Frozen-feature bias-head accuracy reference: trains a fresh head on the
/// model's frozen features over the train split and reports test accuracy.
pub fn frozen_feature_bias_accuracy(
    model: &CompositeClassifier,
    train: &GroupedDataset,
    test: &GroupedDataset,
    probe: &ProbeConfig,
) -> Result<f64> {
    let indices: Vec<usize> = (0..train.len()).collect();
    let (x, _, b) = train.gather(&indices);
    let feats = model.features(&x, 256)?;
    let mut head = crate::nn::Linear::init(
        model.config.feat_dim,
        2,
        &mut seed_stream(probe.seed, "frozen-ref-init"),
    );
    crate::metrics::train_head_on_features(&mut head, &feats, &b, probe, "frozen-ref-shuffle");
    let idx_test: Vec<usize> = (0..test.len()).collect();
    let (xt, _, bt) = test.gather(&idx_test);
    let ft = model.features(&xt, 256)?;
    let preds = argmax_rows(&head.forward(&ft));
    let correct = preds.iter().zip(&bt).filter(|(p, b)| p == b).count();
    Ok(100.0 * correct as f64 / bt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_rule_respects_min_epochs_and_window() {
        let rule = ConvergenceRule { window: 3, rel_tol: 1e-3, min_epochs: 6 };
        // Flat losses converge only once both gates pass.
        let flat = vec![1.0; 5];
        assert!(!rule.fired(&flat));
        let flat6 = vec![1.0; 6];
        assert!(rule.fired(&flat6));
        // Still improving: not converged.
        let improving: Vec<f64> = (0..10).map(|i| 1.0 / (i + 1) as f64).collect();
        assert!(!rule.fired(&improving));
    }

    #[test]
    fn lr_schedule_steps_down() {
        let opt = OptimizerSpec { lr: 0.1, ..OptimizerSpec::default() };
        assert_eq!(opt.lr_at(0, 9), 0.1);
        assert_eq!(opt.lr_at(5, 9), 0.1);
        assert!((opt.lr_at(6, 9) - 0.01).abs() < 1e-9);
        assert!((opt.lr_at(8, 9) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn reweighting_hand_normalization() {
        // Cells (60, 20): raw weights 1/60, 1/20; cell mean = 1/30;
        // normalized to (0.5, 1.5).
        use crate::dataset::{GroupedDataset, LabeledExample, Provenance, Split};
        let mut examples = Vec::new();
        for i in 0..80 {
            examples.push(LabeledExample {
                pixels: ndarray::Array3::zeros((3, 4, 4)),
                target: 1,
                bias: if i < 60 { 0 } else { 1 },
                provenance: Provenance::Original,
                source_id: format!("e{i}"),
            });
        }
        let ds = GroupedDataset::new(Split::Train, examples);
        let w = reweighting_weights(&ds).unwrap();
        assert!((w[&(1, 0)] - 0.5).abs() < 1e-6);
        assert!((w[&(1, 1)] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn reweighting_balanced_weights_are_one() {
        use crate::dataset::{GroupedDataset, LabeledExample, Provenance, Split};
        let examples = (0..40)
            .map(|i| LabeledExample {
                pixels: ndarray::Array3::zeros((3, 4, 4)),
                target: (i % 2) as u8,
                bias: ((i / 2) % 2) as u8,
                provenance: Provenance::Original,
                source_id: format!("e{i}"),
            })
            .collect();
        let ds = GroupedDataset::new(Split::Train, examples);
        let w = reweighting_weights(&ds).unwrap();
        assert!(w.values().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
