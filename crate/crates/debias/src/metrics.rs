//! Fairness and accuracy diagnostics: per-group recalls, classification
//! bias, balanced accuracy, per-group confusion matrices, and the
//! cross-task transferability probe.
//!
//! All probabilities are ratios of recorded integer counts; bias values are
//! kept as raw fractions internally and scaled by 100 only for display.

use crate::dataset::GroupedDataset;
use crate::model::{extractor_hash, head_hash, CompositeClassifier};
use crate::nn::{argmax_rows, sgd_update, softmax_ce};
use crate::util::{seed_stream, spearman};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Evaluation batch size used when predicting over a dataset.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    /// Class set of the evaluation (union of true and predicted labels).
    pub classes: Vec<u8>,
    /// |recall(t, b=0) - recall(t, b=1)| for classes where both cells exist.
    pub per_class_bias: BTreeMap<u8, f64>,
    /// Classes whose bias is undefined because one group is absent.
    pub absent_bias_classes: Vec<u8>,
    /// Sum of per-class bias values (raw fraction scale).
    pub overall_bias: f64,
    /// Unweighted mean of per-(t,b)-cell recalls, in percent.
    pub bacc: f64,
    /// t -> b -> recall.
    pub group_accuracy: BTreeMap<u8, BTreeMap<u8, f64>>,
    pub n_per_cell: BTreeMap<u8, BTreeMap<u8, usize>>,
    /// (t, b) cells with no examples, excluded from the bACC mean.
    pub excluded_cells: Vec<(u8, u8)>,
    /// b -> confusion matrix (rows true class, columns predicted class,
    /// both in `classes` order).
    pub group_confusion: BTreeMap<u8, Vec<Vec<usize>>>,
}

impl BiasReport {
    /// Bias on the display scale used by comparison tables.
    pub fn display_bias(&self) -> f64 {
        self.overall_bias * 100.0
    }
}

/// Builds a report from (true target, bias) pairs and predicted targets.
/// Pure counting; independent of any model.
pub fn evaluate_predictions(truth: &[(u8, u8)], preds: &[usize]) -> Result<BiasReport> {
    if truth.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} truth rows vs {} predictions",
            truth.len(),
            preds.len()
        )));
    }
    let mut classes: Vec<u8> = truth.iter().map(|&(t, _)| t).collect();
    classes.extend(preds.iter().map(|&p| p as u8));
    classes.sort_unstable();
    classes.dedup();
    let col: BTreeMap<u8, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = classes.len();

    let mut confusion: BTreeMap<u8, Vec<Vec<usize>>> =
        [(0u8, vec![vec![0; k]; k]), (1u8, vec![vec![0; k]; k])].into();
    for (&(t, b), &p) in truth.iter().zip(preds) {
        if b > 1 {
            return Err(Error::Dataset(format!("bias label {b} not binary")));
        }
        confusion.get_mut(&b).unwrap()[col[&t]][col[&(p as u8)]] += 1;
    }

    let mut n_per_cell: BTreeMap<u8, BTreeMap<u8, usize>> = BTreeMap::new();
    let mut group_accuracy: BTreeMap<u8, BTreeMap<u8, f64>> = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut cell_accs = Vec::new();
    for &t in &classes {
        for b in 0u8..2 {
            let row = &confusion[&b][col[&t]];
            let n: usize = row.iter().sum();
            n_per_cell.entry(t).or_default().insert(b, n);
            if n == 0 {
                excluded.push((t, b));
            } else {
                let acc = row[col[&t]] as f64 / n as f64;
                group_accuracy.entry(t).or_default().insert(b, acc);
                cell_accs.push(acc);
            }
        }
    }

    let mut per_class_bias = BTreeMap::new();
    let mut absent = Vec::new();
    for &t in &classes {
        let accs = group_accuracy.get(&t);
        match accs.and_then(|m| m.get(&0).zip(m.get(&1))) {
            Some((&a0, &a1)) => {
                per_class_bias.insert(t, (a0 - a1).abs());
            }
            None => {
                // Only report classes that actually appear in the truth.
                if truth.iter().any(|&(tt, _)| tt == t) {
                    absent.push(t);
                }
            }
        }
    }
    let overall_bias: f64 = per_class_bias.values().sum();
    let bacc = if cell_accs.is_empty() {
        0.0
    } else {
        100.0 * cell_accs.iter().sum::<f64>() / cell_accs.len() as f64
    };

    Ok(BiasReport {
        classes,
        per_class_bias,
        absent_bias_classes: absent,
        overall_bias,
        bacc,
        group_accuracy,
        n_per_cell,
        excluded_cells: excluded,
        group_confusion: confusion,
    })
}

/// Runs the model over the test split and builds the report.
pub fn evaluate(model: &CompositeClassifier, test: &GroupedDataset) -> Result<BiasReport> {
    if test.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let (pixels, _, _) = test.gather(&indices);
    let preds = model.predict_target(&pixels, EVAL_BATCH)?;
    let truth: Vec<(u8, u8)> = test.examples.iter().map(|e| (e.target, e.bias)).collect();
    evaluate_predictions(&truth, &preds)
}

// ---------------------------------------------------------------------------
// Cross-task transferability probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains the probe head on adversarial examples with their attacked bias
/// labels (extractor frozen), then reports its accuracy on original test
/// images against true bias labels, in percent.
///
/// The probe head is reset at the start; extractor, target head, and bias
/// head are guaranteed untouched (verified by hash).
pub fn transferability_probe(
    model: &mut CompositeClassifier,
    adv_pixels: &Array4<f32>,
    adv_labels: &[usize],
    test: &GroupedDataset,
    cfg: &ProbeConfig,
    tag: &str,
) -> Result<f64> {
    if adv_pixels.dim().0 == 0 {
        return Err(Error::Train("probe undefined for empty adversarial set".into()));
    }
    if adv_pixels.dim().0 != adv_labels.len() {
        return Err(Error::Shape("adversarial label count mismatch".into()));
    }
    let f_hash = extractor_hash(model);
    let t_hash = head_hash(&model.target_head);
    let b_hash = head_hash(&model.bias_head);

    model.reset_probe_head(cfg.seed, tag);
    let feats = model.features(adv_pixels, EVAL_BATCH)?;
    train_head_on_features(
        &mut model.probe_head,
        &feats,
        adv_labels,
        cfg,
        &format!("probe-shuffle-{tag}"),
    );

    let indices: Vec<usize> = (0..test.len()).collect();
    let (test_pixels, _, test_b) = test.gather(&indices);
    let test_feats = model.features(&test_pixels, EVAL_BATCH)?;
    let logits = model.probe_head.forward(&test_feats);
    let preds = argmax_rows(&logits);
    let correct = preds.iter().zip(&test_b).filter(|(p, b)| p == b).count();
    let acc = 100.0 * correct as f64 / test_b.len() as f64;

    if extractor_hash(model) != f_hash
        || head_hash(&model.target_head) != t_hash
        || head_hash(&model.bias_head) != b_hash
    {
        return Err(Error::Train("probe mutated frozen parameters".into()));
    }
    Ok(acc)
}

/// Plain SGD loop for a linear head over fixed features.
pub fn train_head_on_features(
    head: &mut crate::nn::Linear<f32>,
    feats: &Array2<f32>,
    labels: &[usize],
    cfg: &ProbeConfig,
    shuffle_purpose: &str,
) {
    let n = feats.dim().0;
    let mut vel_w = Array2::<f32>::zeros(head.weight.dim());
    let mut vel_b = Array1::<f32>::zeros(head.bias.len());
    let mut rng = seed_stream(cfg.seed, shuffle_purpose);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), feats.dim().1));
            let mut y = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                x.index_axis_mut(Axis(0), row).assign(&feats.index_axis(Axis(0), i));
                y.push(labels[i]);
            }
            let logits = head.forward(&x);
            let (_, dlogits) = softmax_ce(&logits, &y, None);
            let (_, dw, db) = head.backward(&x, &dlogits, false);
            sgd_update(&mut head.weight, &dw, &mut vel_w, cfg.lr, cfg.momentum);
            sgd_update(&mut head.bias, &db, &mut vel_b, cfg.lr, cfg.momentum);
        }
    }
}

// ---------------------------------------------------------------------------
// Bias vs. data imbalance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioBiasRow {
    pub class: u8,
    pub bias_ratio: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioBiasTable {
    pub rows: Vec<RatioBiasRow>,
    /// Rank correlation between |ratio - 0.5| and class bias.
    pub imbalance_bias_spearman: Option<f64>,
}

/// Scatter table of (class, training bias ratio, measured bias) across runs,
/// with the monotone-trend statistic.
pub fn bias_vs_ratio_report(entries: &[(BTreeMap<u8, f64>, BiasReport)]) -> RatioBiasTable {
    let mut rows = Vec::new();
    for (ratios, report) in entries {
        for (&class, &bias) in &report.per_class_bias {
            if let Some(&r) = ratios.get(&class) {
                rows.push(RatioBiasRow { class, bias_ratio: r, bias });
            }
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.bias_ratio - 0.5).abs()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.bias).collect();
    RatioBiasTable {
        imbalance_bias_spearman: spearman(&xs, &ys),
        rows,
    }
}
