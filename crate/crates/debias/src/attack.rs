//! Targeted adversarial example generation against bias labels, with
//! optional target-task preservation.
//!
//! The iteration is the signed-gradient descent step
//! `x <- clip(x - alpha * sign(grad))`, projected into the L-inf ball around
//! the original image and into the pixel range, repeated `steps` times.
//! With `lambda = 1` the objective is the bias-attack loss alone; with
//! `lambda < 1` the target-task loss of the true label is mixed in so the
//! perturbation preserves the target prediction.

use crate::dataset::{GroupedDataset, LabeledExample, Provenance};
use crate::model::{CompositeClassifier, LossSpec, StandaloneBiasClassifier};
use crate::nn::argmax_rows;
use crate::util::{seed_stream, ParamHasher};
use crate::{Error, Result};
use ndarray::{s, Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Examples per attack execution slice; a multiple of the conv chunk so
/// slicing does not change float op grouping.
const EXEC_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessRule {
    /// Keep every generated example for augmentation.
    KeepAll,
    /// Keep only examples whose post-attack bias prediction equals b_attack.
    RequireBiasFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-inf budget in pixel units.
    pub epsilon: f32,
    /// Per-step size.
    pub alpha: f32,
    pub steps: usize,
    /// Weight of the bias-attack term; 1-lambda goes to target preservation.
    pub lambda: f32,
    /// Pixel clip range.
    pub clip: (f32, f32),
    pub success_rule: SuccessRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            lambda: 0.7,
            clip: (0.0, 1.0),
            success_rule: SuccessRule::KeepAll,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.epsilon > 0.0 && self.alpha > self.epsilon {
            return Err(Error::Config("alpha must not exceed epsilon".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0,1]".into()));
        }
        if self.clip.0 >= self.clip.1 {
            return Err(Error::Config("clip range must be non-empty".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Attack surfaces
// ---------------------------------------------------------------------------

/// A model (or pair of models) an attack can run against.
pub trait AttackSurface: Sync {
    fn bias_logits(&self, x: &Array4<f32>) -> Result<Array2<f32>>;
    fn target_logits(&self, x: &Array4<f32>) -> Result<Option<Array2<f32>>>;
    fn has_target(&self) -> bool;
    /// Input gradient of `lambda * L_bias(x, b_attack) + (1-lambda) *
    /// L_target(x, t)` plus the per-example combined losses.
    fn joint_grad(
        &self,
        x: &Array4<f32>,
        b_attack: &[usize],
        t: Option<&[usize]>,
        lambda: f32,
    ) -> Result<(Array4<f32>, Array1<f32>)>;
}

/// Coupled surface: the composite classifier's own extractor feeds both the
/// bias head under attack and the target head used for preservation.
impl AttackSurface for CompositeClassifier {
    fn bias_logits(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.forward_bias(x, crate::model::BiasHead::Main)
    }

    fn target_logits(&self, x: &Array4<f32>) -> Result<Option<Array2<f32>>> {
        Ok(Some(self.forward_target(x)?))
    }

    fn has_target(&self) -> bool {
        true
    }

    fn joint_grad(
        &self,
        x: &Array4<f32>,
        b_attack: &[usize],
        t: Option<&[usize]>,
        lambda: f32,
    ) -> Result<(Array4<f32>, Array1<f32>)> {
        if lambda < 1.0 {
            let t = t.ok_or_else(|| {
                Error::Attack("lambda < 1 requires target labels".into())
            })?;
            self.gradient_wrt_input(x, &LossSpec::Joint { b_attack, target_labels: t, lambda })
        } else {
            self.gradient_wrt_input(
                x,
                &LossSpec::Joint { b_attack, target_labels: &[], lambda: 1.0 },
            )
        }
    }
}

impl AttackSurface for StandaloneBiasClassifier {
    fn bias_logits(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(self.forward(x))
    }

    fn target_logits(&self, _x: &Array4<f32>) -> Result<Option<Array2<f32>>> {
        Ok(None)
    }

    fn has_target(&self) -> bool {
        false
    }

    fn joint_grad(
        &self,
        x: &Array4<f32>,
        b_attack: &[usize],
        _t: Option<&[usize]>,
        lambda: f32,
    ) -> Result<(Array4<f32>, Array1<f32>)> {
        if lambda < 1.0 {
            return Err(Error::Attack(
                "standalone bias classifier has no target head; lambda must be 1".into(),
            ));
        }
        self.gradient_wrt_input(x, b_attack)
    }
}

/// Pre-processing surface: a standalone bias classifier for the attack term
/// and a separately trained composite model for the preservation term.
pub struct PairedSurface<'a> {
    pub bias_model: &'a StandaloneBiasClassifier,
    pub target_model: &'a CompositeClassifier,
}

impl AttackSurface for PairedSurface<'_> {
    fn bias_logits(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(self.bias_model.forward(x))
    }

    fn target_logits(&self, x: &Array4<f32>) -> Result<Option<Array2<f32>>> {
        Ok(Some(self.target_model.forward_target(x)?))
    }

    fn has_target(&self) -> bool {
        true
    }

    fn joint_grad(
        &self,
        x: &Array4<f32>,
        b_attack: &[usize],
        t: Option<&[usize]>,
        lambda: f32,
    ) -> Result<(Array4<f32>, Array1<f32>)> {
        if lambda == 1.0 {
            return self.bias_model.gradient_wrt_input(x, b_attack);
        }
        let t = t.ok_or_else(|| Error::Attack("lambda < 1 requires target labels".into()))?;
        let (g_b, l_b) = self.bias_model.gradient_wrt_input(x, b_attack)?;
        if lambda == 0.0 {
            return self
                .target_model
                .gradient_wrt_input(x, &LossSpec::Target { labels: t });
        }
        let (g_t, l_t) = self
            .target_model
            .gradient_wrt_input(x, &LossSpec::Target { labels: t })?;
        let g = g_b * lambda + &(g_t * (1.0 - lambda));
        let l = l_b * lambda + &(l_t * (1.0 - lambda));
        Ok((g, l))
    }
}

// ---------------------------------------------------------------------------
// Attack batches and results
// ---------------------------------------------------------------------------

/// Inputs to an attack: original pixels plus label metadata.
#[derive(Debug, Clone)]
pub struct AttackBatch {
    pub pixels: Array4<f32>,
    pub target: Vec<u8>,
    pub b_original: Vec<u8>,
    pub b_attack: Vec<u8>,
    pub source_ids: Vec<String>,
}

impl AttackBatch {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Assembles a batch from a dataset following a balancing plan.
    pub fn from_plan(ds: &GroupedDataset, plan: &[PlanEntry]) -> Self {
        let indices: Vec<usize> = plan.iter().map(|p| p.index).collect();
        let (pixels, _, _) = ds.gather(&indices);
        Self {
            pixels,
            target: plan.iter().map(|p| ds.examples[p.index].target).collect(),
            b_original: plan.iter().map(|p| ds.examples[p.index].bias).collect(),
            b_attack: plan.iter().map(|p| p.b_attack).collect(),
            source_ids: plan.iter().map(|p| p.source_id.clone()).collect(),
        }
    }

    /// Every example of the dataset with the flipped bias label as target.
    pub fn flip_all(ds: &GroupedDataset) -> Self {
        let indices: Vec<usize> = (0..ds.len()).collect();
        let (pixels, _, _) = ds.gather(&indices);
        Self {
            pixels,
            target: ds.examples.iter().map(|e| e.target).collect(),
            b_original: ds.examples.iter().map(|e| e.bias).collect(),
            b_attack: ds.examples.iter().map(|e| 1 - e.bias).collect(),
            source_ids: ds.examples.iter().map(|e| e.source_id.clone()).collect(),
        }
    }
}

/// Generated adversarial examples in batch form.
#[derive(Debug, Clone)]
pub struct AdvSet {
    pub pixels: Array4<f32>,
    pub target: Vec<u8>,
    pub b_attacked: Vec<u8>,
    pub b_original: Vec<u8>,
    pub source_ids: Vec<String>,
}

impl AdvSet {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Content digest used by the trainer journal.
    pub fn digest(&self) -> String {
        let mut h = ParamHasher::new();
        h.update_f32(self.pixels.as_slice().unwrap());
        let mut meta = Vec::new();
        for i in 0..self.len() {
            meta.push(self.target[i] as f32);
            meta.push(self.b_attacked[i] as f32);
        }
        h.update_f32(&meta);
        h.finish()
    }

    pub fn to_examples(&self) -> Vec<LabeledExample> {
        (0..self.len())
            .map(|i| LabeledExample {
                pixels: self.pixels.index_axis(Axis(0), i).to_owned(),
                target: self.target[i],
                bias: self.b_attacked[i],
                provenance: Provenance::Adversarial,
                source_id: self.source_ids[i].clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adv: AdvSet,
    /// Post-attack bias prediction equals b_attack.
    pub success: Vec<bool>,
    /// Per-example L-inf norm actually used.
    pub linf: Vec<f32>,
    pub pre_target_pred: Option<Vec<usize>>,
    pub post_target_pred: Option<Vec<usize>>,
    pub success_rate: f64,
    /// Fraction whose post-attack target prediction matches the pre-attack
    /// one; absent when the surface has no target head.
    pub target_preservation_rate: Option<f64>,
    /// Set when lambda = 0 degenerated the attack to target reinforcement.
    pub lambda_zero: bool,
}

impl AttackResult {
    /// Indices kept under the configured success rule.
    pub fn kept_indices(&self, rule: SuccessRule) -> Vec<usize> {
        match rule {
            SuccessRule::KeepAll => (0..self.adv.len()).collect(),
            SuccessRule::RequireBiasFlip => self
                .success
                .iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// The adversarial set restricted to kept examples.
    pub fn kept_adv(&self, rule: SuccessRule) -> AdvSet {
        let idx = self.kept_indices(rule);
        let (_, c, h, w) = self.adv.pixels.dim();
        let mut pixels = Array4::zeros((idx.len(), c, h, w));
        for (row, &i) in idx.iter().enumerate() {
            pixels
                .index_axis_mut(Axis(0), row)
                .assign(&self.adv.pixels.index_axis(Axis(0), i));
        }
        AdvSet {
            pixels,
            target: idx.iter().map(|&i| self.adv.target[i]).collect(),
            b_attacked: idx.iter().map(|&i| self.adv.b_attacked[i]).collect(),
            b_original: idx.iter().map(|&i| self.adv.b_original[i]).collect(),
            source_ids: idx.iter().map(|&i| self.adv.source_ids[i].clone()).collect(),
        }
    }

    pub fn log_rows(&self) -> Vec<AttackLogRow> {
        (0..self.adv.len())
            .map(|i| AttackLogRow {
                source_id: self.adv.source_ids[i].clone(),
                b_attack: self.adv.b_attacked[i],
                success: self.success[i],
                linf: self.linf[i],
                pre_target_pred: self.pre_target_pred.as_ref().map(|v| v[i]),
                post_target_pred: self.post_target_pred.as_ref().map(|v| v[i]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackLogRow {
    pub source_id: String,
    pub b_attack: u8,
    pub success: bool,
    pub linf: f32,
    pub pre_target_pred: Option<usize>,
    pub post_target_pred: Option<usize>,
}

pub fn write_attack_log(rows: &[AttackLogRow], path: &Path) -> Result<()> {
    let mut out = String::from("source_id,b_attack,success,linf,pre_target_pred,post_target_pred\n");
    for r in rows {
        let pre = r.pre_target_pred.map_or(String::new(), |v| v.to_string());
        let post = r.post_target_pred.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.source_id, r.b_attack, r.success, r.linf, pre, post
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Attack execution
// ---------------------------------------------------------------------------

/// Pure bias-label attack (lambda forced to 1).
pub fn ifgsm_bias_attack<S: AttackSurface>(
    surface: &S,
    batch: &AttackBatch,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut cfg = *config;
    cfg.lambda = 1.0;
    run_attack(surface, batch, &cfg)
}

/// Joint attack mixing bias flip and target preservation by lambda.
pub fn joint_attack<S: AttackSurface>(
    surface: &S,
    batch: &AttackBatch,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if config.lambda < 1.0 && !surface.has_target() {
        return Err(Error::Attack(
            "joint attack with lambda < 1 needs a target head".into(),
        ));
    }
    run_attack(surface, batch, config)
}

fn run_attack<S: AttackSurface>(
    surface: &S,
    batch: &AttackBatch,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    if batch.is_empty() {
        return Ok(AttackResult {
            adv: AdvSet {
                pixels: batch.pixels.clone(),
                target: vec![],
                b_attacked: vec![],
                b_original: vec![],
                source_ids: vec![],
            },
            success: vec![],
            linf: vec![],
            pre_target_pred: None,
            post_target_pred: None,
            success_rate: 0.0,
            target_preservation_rate: None,
            lambda_zero: config.lambda == 0.0,
        });
    }

    let n = batch.len();
    let b_attack: Vec<usize> = batch.b_attack.iter().map(|&b| b as usize).collect();
    let t_labels: Vec<usize> = batch.target.iter().map(|&t| t as usize).collect();
    let needs_target = config.lambda < 1.0;

    let mut adv_pixels = Array4::zeros(batch.pixels.dim());
    let mut success = Vec::with_capacity(n);
    let mut linf = Vec::with_capacity(n);
    let mut pre_preds: Option<Vec<usize>> = surface.has_target().then(Vec::new);
    let mut post_preds: Option<Vec<usize>> = surface.has_target().then(Vec::new);

    let mut start = 0;
    while start < n {
        let end = (start + EXEC_BATCH).min(n);
        let x0 = batch.pixels.slice(s![start..end, .., .., ..]).to_owned();
        let ba = &b_attack[start..end];
        let tl = &t_labels[start..end];

        if let Some(pre) = pre_preds.as_mut() {
            let logits = surface.target_logits(&x0)?.expect("target head present");
            pre.extend(argmax_rows(&logits));
        }

        let x_adv = iterate(surface, &x0, ba, needs_target.then_some(tl), config, None)?;

        let bias_logits = surface.bias_logits(&x_adv)?;
        let preds = argmax_rows(&bias_logits);
        for (i, &p) in preds.iter().enumerate() {
            success.push(p == ba[i]);
        }
        for i in 0..(end - start) {
            let a = x_adv.index_axis(Axis(0), i);
            let b = x0.index_axis(Axis(0), i);
            let mut m = 0.0f32;
            for (&va, &vb) in a.iter().zip(b.iter()) {
                m = m.max((va - vb).abs());
            }
            linf.push(m);
        }
        if let Some(post) = post_preds.as_mut() {
            let logits = surface.target_logits(&x_adv)?.expect("target head present");
            post.extend(argmax_rows(&logits));
        }
        adv_pixels.slice_mut(s![start..end, .., .., ..]).assign(&x_adv);
        start = end;
    }

    let success_rate = success.iter().filter(|&&s| s).count() as f64 / n as f64;
    let preservation = match (&pre_preds, &post_preds) {
        (Some(pre), Some(post)) => Some(
            pre.iter().zip(post).filter(|(a, b)| a == b).count() as f64 / n as f64,
        ),
        _ => None,
    };

    Ok(AttackResult {
        adv: AdvSet {
            pixels: adv_pixels,
            target: batch.target.clone(),
            b_attacked: batch.b_attack.clone(),
            b_original: batch.b_original.clone(),
            source_ids: batch.source_ids.clone(),
        },
        success,
        linf,
        pre_target_pred: pre_preds,
        post_target_pred: post_preds,
        success_rate,
        target_preservation_rate: preservation,
        lambda_zero: config.lambda == 0.0,
    })
}

/// The signed-gradient iteration. When `loss_trace` is provided, per-example
/// combined losses are recorded at every iterate including the final one.
pub fn iterate<S: AttackSurface>(
    surface: &S,
    x0: &Array4<f32>,
    b_attack: &[usize],
    t: Option<&[usize]>,
    config: &AttackConfig,
    mut loss_trace: Option<&mut Vec<Array1<f32>>>,
) -> Result<Array4<f32>> {
    let mut x = x0.clone();
    for _ in 0..config.steps {
        let (grad, losses) = surface.joint_grad(&x, b_attack, t, config.lambda)?;
        if let Some(trace) = loss_trace.as_deref_mut() {
            trace.push(losses);
        }
        descend_and_project(&mut x, &grad, x0, config);
    }
    if let Some(trace) = loss_trace.as_deref_mut() {
        let (_, losses) = surface.joint_grad(&x, b_attack, t, config.lambda)?;
        trace.push(losses);
    }
    Ok(x)
}

/// Gradient ascent on the true-label loss (adversarial-training style).
pub fn untargeted_ascent<S: AttackSurface>(
    surface: &S,
    x0: &Array4<f32>,
    true_labels: &[usize],
    config: &AttackConfig,
) -> Result<Array4<f32>> {
    let mut x = x0.clone();
    for _ in 0..config.steps {
        let (grad, _) = surface.joint_grad(&x, true_labels, None, 1.0)?;
        // Ascend instead of descend.
        let neg = grad.mapv(|v| -v);
        descend_and_project(&mut x, &neg, x0, config);
    }
    Ok(x)
}

fn descend_and_project(x: &mut Array4<f32>, grad: &Array4<f32>, x0: &Array4<f32>, cfg: &AttackConfig) {
    let (lo, hi) = cfg.clip;
    ndarray::Zip::from(x).and(grad).and(x0).for_each(|x, &g, &x0| {
        let step = cfg.alpha * sign(g);
        let mut v = *x - step;
        let ball_lo = x0 - cfg.epsilon;
        let ball_hi = x0 + cfg.epsilon;
        if v < ball_lo {
            v = ball_lo;
        }
        if v > ball_hi {
            v = ball_hi;
        }
        *x = v.clamp(lo, hi);
    });
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Balancing plan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub index: usize,
    pub source_id: String,
    pub b_attack: u8,
}

/// Selects, per target class, enough majority-cell examples to erase the
/// cell deficit, each to be attacked toward the minority bias value.
pub fn plan_balancing_attack(ds: &GroupedDataset, seed: u64) -> Vec<PlanEntry> {
    let mut cell_members: std::collections::BTreeMap<(u8, u8), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, e) in ds.examples.iter().enumerate() {
        cell_members.entry((e.target, e.bias)).or_default().push(i);
    }
    let mut plan = Vec::new();
    for t in ds.classes() {
        let c0 = cell_members.get(&(t, 0)).map_or(0, |v| v.len());
        let c1 = cell_members.get(&(t, 1)).map_or(0, |v| v.len());
        if c0 == c1 {
            continue;
        }
        let (majority_b, minority_b) = if c0 > c1 { (0u8, 1u8) } else { (1u8, 0u8) };
        let members = &cell_members[&(t, majority_b)];
        let deficit = c0.abs_diff(c1);
        let chosen: Vec<usize> = if deficit >= members.len() {
            members.clone()
        } else {
            let mut rng = seed_stream(seed, &format!("attack-plan-{t}"));
            let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), deficit)
                .into_iter()
                .map(|j| members[j])
                .collect();
            picks.sort_unstable();
            picks
        };
        for i in chosen {
            plan.push(PlanEntry {
                index: i,
                source_id: ds.examples[i].source_id.clone(),
                b_attack: minority_b,
            });
        }
    }
    plan
}

/// Union of the original dataset and the kept adversarial examples.
pub fn augment_dataset(ds: &GroupedDataset, result: &AttackResult, rule: SuccessRule) -> GroupedDataset {
    let mut examples = ds.examples.clone();
    let kept = result.kept_adv(rule);
    examples.extend(kept.to_examples());
    let mut out = GroupedDataset::new(ds.split, examples);
    out.shortfall = ds.shortfall.clone();
    out.notes = ds.notes.clone();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::model::ModelConfig;
    use crate::util::seed_stream;
    use ndarray::Array3;
    use rand_distr::Distribution;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input: (3, 8, 8),
            conv_blocks: vec![vec![4]],
            feat_dim: 16,
            n_target_classes: 4,
        }
    }

    fn random_batch(n: usize, seed: u64) -> AttackBatch {
        let mut rng = seed_stream(seed, "attack-batch");
        let normal = rand_distr::Normal::new(0.5f64, 0.2).unwrap();
        let pixels = Array4::from_shape_fn((n, 3, 8, 8), |_| {
            (normal.sample(&mut rng) as f32).clamp(0.0, 1.0)
        });
        AttackBatch {
            pixels,
            target: (0..n).map(|i| (i % 4) as u8).collect(),
            b_original: (0..n).map(|i| (i % 2) as u8).collect(),
            b_attack: (0..n).map(|i| ((i + 1) % 2) as u8).collect(),
            source_ids: (0..n).map(|i| format!("x-{i:04}")).collect(),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig { epsilon: 0.01, alpha: 0.02, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = AttackConfig { epsilon: 0.0, alpha: 0.01, ..AttackConfig::default() };
        assert!(cfg.validate().is_ok(), "zero budget with positive alpha is legal");
        cfg = AttackConfig { lambda: 1.5, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = AttackConfig { steps: 0, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_budget_is_exact_identity() {
        let model = CompositeClassifier::init(&tiny_config(), 5).unwrap();
        let batch = random_batch(6, 1);
        let cfg = AttackConfig { epsilon: 0.0, alpha: 0.01, steps: 5, ..AttackConfig::default() };
        let result = joint_attack(&model, &batch, &cfg).unwrap();
        assert_eq!(result.adv.pixels, batch.pixels);
        assert!(result.linf.iter().all(|&v| v == 0.0));
        // Success iff the unmodified image is already predicted as b_attack.
        let preds = model.predict_bias(&batch.pixels, crate::model::BiasHead::Main, 64).unwrap();
        for (i, &p) in preds.iter().enumerate() {
            assert_eq!(result.success[i], p == batch.b_attack[i] as usize);
        }
        // Under require-bias-flip, examples whose prediction already differs
        // stay out of the kept set: failures are recorded, not dropped.
        let kept = result.kept_adv(SuccessRule::RequireBiasFlip);
        let n_success = result.success.iter().filter(|&&s| s).count();
        assert_eq!(kept.len(), n_success);
        assert_eq!(result.success.len(), batch.len());
    }

    #[test]
    fn single_step_matches_manual_fgsm() {
        let model = StandaloneBiasClassifier::init(&tiny_config(), 3, "t").unwrap();
        let batch = random_batch(4, 7);
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.05,
            steps: 1,
            lambda: 1.0,
            ..AttackConfig::default()
        };
        let result = ifgsm_bias_attack(&model, &batch, &cfg).unwrap();
        let labels: Vec<usize> = batch.b_attack.iter().map(|&b| b as usize).collect();
        let (grad, _) = model.gradient_wrt_input(&batch.pixels, &labels).unwrap();
        let mut expect = batch.pixels.clone();
        ndarray::Zip::from(&mut expect).and(&grad).and(&batch.pixels).for_each(|x, &g, &x0| {
            let v = (*x - cfg.alpha * sign(g)).clamp(x0 - cfg.epsilon, x0 + cfg.epsilon);
            *x = v.clamp(0.0, 1.0);
        });
        assert_eq!(result.adv.pixels, expect);
    }

    #[test]
    fn lambda_one_joint_equals_pure_bias_attack_bitwise() {
        let model = CompositeClassifier::init(&tiny_config(), 11).unwrap();
        let batch = random_batch(10, 13);
        let cfg = AttackConfig { lambda: 1.0, ..AttackConfig::default() };
        let a = joint_attack(&model, &batch, &cfg).unwrap();
        let b = ifgsm_bias_attack(&model, &batch, &cfg).unwrap();
        assert_eq!(a.adv.pixels, b.adv.pixels);
        assert_eq!(a.success, b.success);
        assert_eq!(a.linf, b.linf);
    }

    #[test]
    fn attack_respects_ball_and_clip() {
        let model = CompositeClassifier::init(&tiny_config(), 17).unwrap();
        let batch = random_batch(12, 19);
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.03,
            steps: 10,
            lambda: 0.6,
            ..AttackConfig::default()
        };
        let result = joint_attack(&model, &batch, &cfg).unwrap();
        for (i, &m) in result.linf.iter().enumerate() {
            assert!(m <= cfg.epsilon + 1e-6, "example {i}: linf {m}");
        }
        assert!(result.adv.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // target labels preserved on the emitted examples
        assert_eq!(result.adv.target, batch.target);
    }

    #[test]
    fn lambda_zero_is_flagged() {
        let model = CompositeClassifier::init(&tiny_config(), 23).unwrap();
        let batch = random_batch(3, 29);
        let cfg = AttackConfig { lambda: 0.0, ..AttackConfig::default() };
        let result = joint_attack(&model, &batch, &cfg).unwrap();
        assert!(result.lambda_zero);
    }

    fn synthetic_grouped(cells: &[((u8, u8), usize)]) -> GroupedDataset {
        let mut examples = Vec::new();
        let mut n = 0;
        for &((t, b), count) in cells {
            for _ in 0..count {
                examples.push(LabeledExample {
                    pixels: Array3::from_elem((3, 8, 8), 0.5),
                    target: t,
                    bias: b,
                    provenance: Provenance::Original,
                    source_id: format!("syn-{n:05}"),
                });
                n += 1;
            }
        }
        GroupedDataset::new(Split::Train, examples)
    }

    #[test]
    fn plan_covers_full_deficit() {
        let ds = synthetic_grouped(&[((7, 1), 100)]);
        let plan = plan_balancing_attack(&ds, 3);
        assert_eq!(plan.len(), 100);
        assert!(plan.iter().all(|p| p.b_attack == 0));
    }

    #[test]
    fn plan_skips_balanced_classes() {
        let ds = synthetic_grouped(&[((2, 0), 50), ((2, 1), 50)]);
        assert!(plan_balancing_attack(&ds, 3).is_empty());
    }

    #[test]
    fn plan_partial_deficit_and_recount_after_augment() {
        let ds = synthetic_grouped(&[((5, 0), 10), ((5, 1), 40)]);
        let plan = plan_balancing_attack(&ds, 3);
        assert_eq!(plan.len(), 30);
        assert!(plan.iter().all(|p| p.b_attack == 0));
        assert!(plan.iter().all(|p| ds.examples[p.index].bias == 1));

        let model = CompositeClassifier::init(
            &ModelConfig { n_target_classes: 6, ..tiny_config() },
            31,
        )
        .unwrap();
        let batch = AttackBatch::from_plan(&ds, &plan);
        let cfg = AttackConfig { lambda: 1.0, ..AttackConfig::default() };
        let result = joint_attack(&model, &batch, &cfg).unwrap();
        let augmented = augment_dataset(&ds, &result, SuccessRule::KeepAll);
        let counts = augmented.group_counts();
        assert_eq!(counts[&(5, 0)], 40);
        assert_eq!(counts[&(5, 1)], 40);
        augmented.validate().unwrap();
    }

    #[test]
    fn plan_is_deterministic_under_seed() {
        let ds = synthetic_grouped(&[((1, 0), 30), ((1, 1), 10)]);
        let a = plan_balancing_attack(&ds, 9);
        let b = plan_balancing_attack(&ds, 9);
        assert_eq!(
            a.iter().map(|p| p.index).collect::<Vec<_>>(),
            b.iter().map(|p| p.index).collect::<Vec<_>>()
        );
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn untargeted_ascent_respects_invariants() {
        let model = StandaloneBiasClassifier::init(&tiny_config(), 37, "at").unwrap();
        let batch = random_batch(5, 41);
        let cfg = AttackConfig { epsilon: 0.05, alpha: 0.02, steps: 4, ..AttackConfig::default() };
        let labels: Vec<usize> = batch.b_original.iter().map(|&b| b as usize).collect();
        let x_at = untargeted_ascent(&model, &batch.pixels, &labels, &cfg).unwrap();
        let mut max = 0.0f32;
        for (a, b) in x_at.iter().zip(batch.pixels.iter()) {
            max = max.max((a - b).abs());
        }
        assert!(max <= cfg.epsilon + 1e-6);
        assert!(max > 0.0, "ascent should move pixels");
        assert!(x_at.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
