//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Heavy fixtures (the method-comparison runs, switch experiments, ratio
//! sweep) are shared lazily across criteria. Desk scale here means the
//! colored-digit protocol at 10k training images with the small CNN.

use debias::attack::{
    ifgsm_bias_attack, joint_attack, plan_balancing_attack, AttackBatch, AttackConfig,
};
use debias::corpus::GrayCorpus;
use debias::dataset::{
    build_cmnist, extreme_plan, uniform_plan, ColorSpec, GroupedDataset, LabeledExample,
    Provenance, Split,
};
use debias::experiment::{run_experiment, ExperimentConfig};
use debias::metrics::evaluate_predictions;
use debias::model::{
    extractor_hash, head_hash, model_hash, CompositeClassifier, LossSpec, ModelConfig,
};
use debias::train::{
    run_method, run_switch_experiments, ConvergenceRule, EpochRecord, Method, ProbeSettings,
    TrainConfig, TrainContext, TrainOutcome, TrainResult,
};
use ndarray::Array4;
use once_cell::sync::Lazy;
use std::collections::BTreeMap;

fn pass(criterion: usize, detail: &str) {
    println!("[criterion {criterion}] PASS: {detail}");
}

struct Gate {
    criterion: usize,
    failures: Vec<String>,
}

impl Gate {
    fn new(criterion: usize) -> Self {
        Self { criterion, failures: Vec::new() }
    }

    fn check(&mut self, name: &str, ok: bool) {
        if !ok {
            self.failures.push(name.to_string());
        }
    }

    fn finish(self, detail: &str) {
        if self.failures.is_empty() {
            pass(self.criterion, detail);
        } else {
            println!(
                "[criterion {}] FAIL: {}",
                self.criterion,
                self.failures.join("; ")
            );
            panic!("criterion {} failed: {}", self.criterion, self.failures.join("; "));
        }
    }
}

// ---------------------------------------------------------------------------
// Desk-scale fixtures
// ---------------------------------------------------------------------------

const DESK_TRAIN_PER_CLASS: usize = 1000; // 10k train images
const DESK_TEST_PER_CLASS: usize = 100;
const DESK_EPOCHS: usize = 10;
const DESK_SEEDS: [u64; 3] = [1, 2, 3];

fn desk_attack() -> AttackConfig {
    // Budget calibrated to the saturated-color margins (see attack tests);
    // alpha * steps comfortably covers the ball.
    AttackConfig {
        epsilon: 16.0 / 255.0,
        alpha: 4.0 / 255.0,
        steps: 6,
        lambda: 0.7,
        ..AttackConfig::default()
    }
}

fn desk_train_config(method: Method, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        method,
        epochs,
        batch_size: 64,
        seed,
        convergence: ConvergenceRule {
            window: 5,
            rel_tol: 1e-3,
            min_epochs: epochs,
        },
        ..TrainConfig::default()
    }
}

static DESK_DATA: Lazy<(GroupedDataset, GroupedDataset)> = Lazy::new(|| {
    let corpus = GrayCorpus::synthetic(DESK_TRAIN_PER_CLASS, DESK_TEST_PER_CLASS, 7);
    build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 7).unwrap()
});

fn desk_run(method: Method, seed: u64, epochs: usize, cutoff: Option<usize>) -> TrainOutcome {
    let (train, test) = &*DESK_DATA;
    let mut config = desk_train_config(method, seed, epochs);
    config.online_cutoff_epoch = cutoff;
    let attack = desk_attack();
    let probe = ProbeSettings {
        enabled: true,
        cadence: 1,
        cfg: debias::metrics::ProbeConfig { seed, ..Default::default() },
    };
    let ctx = TrainContext { train, test, config: &config, attack: &attack, probe };
    let mcfg = ModelConfig::preset("small_cnn", (3, 28, 28), 10).unwrap();
    let model = CompositeClassifier::init(&mcfg, seed).unwrap();
    match run_method(&ctx, model).unwrap() {
        TrainResult::Completed(out) => *out,
        TrainResult::Inapplicable { reason } => panic!("{method} inapplicable: {reason}"),
    }
}

struct FamilyRuns {
    /// method -> per-seed outcomes.
    by_method: BTreeMap<&'static str, Vec<TrainOutcome>>,
    once: TrainOutcome,
    cutoff: TrainOutcome,
}

/// The Table-1-style suite: 3 seeds of the four ranked methods plus the
/// once/cutoff ablations, all on the same extreme desk-scale dataset.
static FAMILY: Lazy<FamilyRuns> = Lazy::new(|| {
    let mut by_method: BTreeMap<&'static str, Vec<TrainOutcome>> = BTreeMap::new();
    for &(name, method) in &[
        ("original", Method::Original),
        ("aeda_pre", Method::AedaPre),
        ("aeda_online", Method::AedaOnline),
        ("aeda_robust", Method::AedaRobust),
    ] {
        for &seed in &DESK_SEEDS {
            by_method
                .entry(name)
                .or_default()
                .push(desk_run(method, seed, DESK_EPOCHS, None));
        }
    }
    let once = desk_run(Method::AedaOnce, DESK_SEEDS[0], DESK_EPOCHS, None);
    let cutoff = desk_run(
        Method::AedaRobust,
        DESK_SEEDS[0],
        DESK_EPOCHS,
        Some(DESK_EPOCHS / 2),
    );
    FamilyRuns { by_method, once, cutoff }
});

fn final_record(out: &TrainOutcome) -> &EpochRecord {
    out.records.last().expect("records present")
}

fn mean<'a>(outs: &'a [TrainOutcome], f: impl Fn(&'a TrainOutcome) -> f64) -> f64 {
    outs.iter().map(f).sum::<f64>() / outs.len() as f64
}

// ---------------------------------------------------------------------------
// Criterion 1: metric oracle equivalence
// ---------------------------------------------------------------------------

/// Brute-force counting oracle, structurally different from the library
/// implementation: nested filters per cell instead of streaming counts.
mod oracle {
    use std::collections::BTreeMap;

    pub struct Counts {
        pub per_class_bias: BTreeMap<u8, f64>,
        pub overall: f64,
        pub bacc: f64,
        pub cells: BTreeMap<(u8, u8), (usize, usize)>, // (correct, total)
    }

    pub fn count(truth: &[(u8, u8)], preds: &[usize]) -> Counts {
        let mut classes: Vec<u8> = truth.iter().map(|&(t, _)| t).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut cells = BTreeMap::new();
        let mut accs = Vec::new();
        let mut per_class_bias = BTreeMap::new();
        for &t in &classes {
            let mut pair = [None, None];
            for b in 0u8..2 {
                let idx: Vec<usize> =
                    (0..truth.len()).filter(|&i| truth[i] == (t, b)).collect();
                if idx.is_empty() {
                    continue;
                }
                let correct = idx.iter().filter(|&&i| preds[i] as u8 == t).count();
                cells.insert((t, b), (correct, idx.len()));
                let acc = correct as f64 / idx.len() as f64;
                accs.push(acc);
                pair[b as usize] = Some(acc);
            }
            if let [Some(a0), Some(a1)] = pair {
                per_class_bias.insert(t, (a0 - a1).abs());
            }
        }
        Counts {
            overall: per_class_bias.values().sum(),
            bacc: 100.0 * accs.iter().sum::<f64>() / accs.len() as f64,
            per_class_bias,
            cells,
        }
    }
}

#[test]
fn criterion_01_metric_oracle_equivalence() {
    // 200-example synthetic prediction log with deliberate structure:
    // empty cells, one-sided classes, and varied mistakes.
    let mut truth: Vec<(u8, u8)> = Vec::new();
    let mut preds: Vec<usize> = Vec::new();
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    for i in 0..200 {
        let t = (i % 5) as u8;
        let b = if t == 4 { 0 } else { (next() % 2) as u8 }; // class 4: one group only
        let p = if next() % 10 < 7 { t as usize } else { next() % 5 };
        truth.push((t, b));
        preds.push(p);
    }
    let report = evaluate_predictions(&truth, &preds).unwrap();
    let oracle = oracle::count(&truth, &preds);

    let mut gate = Gate::new(1);
    gate.check("per-class bias map", report.per_class_bias == oracle.per_class_bias);
    gate.check("overall bias", report.overall_bias == oracle.overall);
    gate.check("bacc", (report.bacc - oracle.bacc).abs() < 1e-12);
    for ((t, b), (correct, total)) in &oracle.cells {
        let n = report.n_per_cell[t][b];
        gate.check(&format!("cell count ({t},{b})"), n == *total);
        let acc = report.group_accuracy[t][b];
        gate.check(
            &format!("cell accuracy ({t},{b})"),
            acc == *correct as f64 / *total as f64,
        );
    }
    // Class 4 has one group: bias must be absent, not zero.
    gate.check("one-sided class absent", !report.per_class_bias.contains_key(&4));
    gate.check("absent class listed", report.absent_bias_classes.contains(&4));
    gate.finish("BiasReport matches brute-force counting on a 200-example log, cell by cell");
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_gradient_vs_finite_differences() {
    // Fixed tiny model (one conv block + dense) at f64; h = 1e-3 as stated.
    let config = ModelConfig {
        input: (3, 8, 8),
        conv_blocks: vec![vec![4]],
        feat_dim: 16,
        n_target_classes: 5,
    };
    let model = CompositeClassifier::<f64>::init(&config, 77).unwrap();
    let h = 1e-3;
    let mut gate = Gate::new(2);
    let mut rng = debias::util::seed_stream(42, "acceptance-fd");
    use rand::Rng;
    let mut max_rel: f64 = 0.0;
    for batch_i in 0..5 {
        let x = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.gen_range(0.05f64..0.95));
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let b_attack: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
        let spec = LossSpec::Joint {
            b_attack: &b_attack,
            target_labels: &labels,
            lambda: 0.7,
        };
        let (grad, _) = model.gradient_wrt_input(&x, &spec).unwrap();
        let loss_of = |x: &Array4<f64>| -> f64 {
            let (_, per) = model.gradient_wrt_input(x, &spec).unwrap();
            per.sum() / 4.0
        };
        for _ in 0..10 {
            let n = rng.gen_range(0..4);
            let c = rng.gen_range(0..3);
            let r = rng.gen_range(0..8);
            let col = rng.gen_range(0..8);
            let mut xp = x.clone();
            xp[(n, c, r, col)] += h;
            let mut xm = x.clone();
            xm[(n, c, r, col)] -= h;
            let numeric = (loss_of(&xp) - loss_of(&xm)) / (2.0 * h);
            let analytic = grad[(n, c, r, col)];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10);
            max_rel = max_rel.max(rel);
            gate.check(
                &format!("batch {batch_i} coord ({n},{c},{r},{col}): rel {rel:.2e}"),
                rel <= 1e-2,
            );
        }
    }
    gate.finish(&format!(
        "input gradient matches central differences (h=1e-3); max relative error {max_rel:.2e} <= 1e-2"
    ));
}

// ---------------------------------------------------------------------------
// Criterion 3: attack contracts
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_attack_contracts() {
    let mcfg = ModelConfig {
        input: (3, 28, 28),
        conv_blocks: vec![vec![4]],
        feat_dim: 32,
        n_target_classes: 10,
    };
    let model = CompositeClassifier::init(&mcfg, 5).unwrap();
    let corpus = GrayCorpus::synthetic(30, 5, 3);
    let (train, _) = build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 3).unwrap();
    let plan = plan_balancing_attack(&train, 3);
    let batch = AttackBatch::from_plan(&train, &plan);

    let mut gate = Gate::new(3);
    let cfg = AttackConfig { epsilon: 0.08, alpha: 0.02, steps: 7, lambda: 0.6, ..AttackConfig::default() };
    let result = joint_attack(&model, &batch, &cfg).unwrap();
    let all_in_ball = result.linf.iter().all(|&m| m <= cfg.epsilon + 1e-6);
    let all_clipped = result.adv.pixels.iter().all(|&v| (0.0..=1.0).contains(&v));
    gate.check("100% of examples within the L-inf ball", all_in_ball);
    gate.check("100% of examples pixel-clipped", all_clipped);
    gate.check(
        "target labels preserved on outputs",
        result.adv.target == batch.target,
    );

    // lambda = 1 joint attack bitwise equals the pure bias attack.
    let cfg1 = AttackConfig { lambda: 1.0, ..cfg };
    let a = joint_attack(&model, &batch, &cfg1).unwrap();
    let b = ifgsm_bias_attack(&model, &batch, &cfg1).unwrap();
    gate.check(
        "joint(lambda=1) bitwise-equals ifgsm_bias_attack",
        a.adv.pixels == b.adv.pixels && a.success == b.success,
    );

    // epsilon = 0 is the exact identity.
    let cfg0 = AttackConfig { epsilon: 0.0, alpha: 0.01, steps: 5, ..AttackConfig::default() };
    let r0 = joint_attack(&model, &batch, &cfg0).unwrap();
    gate.check("epsilon=0 attack is identity", r0.adv.pixels == batch.pixels);
    gate.finish("ball/clip contracts exact, lambda=1 reduction bitwise, zero budget is identity");
}

// ---------------------------------------------------------------------------
// Criterion 4: reduction suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_reduction_suite() {
    let corpus = GrayCorpus::synthetic(60, 20, 5);
    let (train, test) = build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 5).unwrap();
    let mcfg = ModelConfig {
        input: (3, 28, 28),
        conv_blocks: vec![vec![4]],
        feat_dim: 32,
        n_target_classes: 10,
    };
    let attack = AttackConfig { steps: 3, alpha: 3.0 / 255.0, ..AttackConfig::default() };
    let probe = ProbeSettings::default();
    let run = |method: Method, k: usize, strength: f32, train: &GroupedDataset, test: &GroupedDataset| {
        let mut cfg = desk_train_config(method, 11, 3);
        cfg.batch_size = 32;
        cfg.k = k;
        cfg.adv_debias_strength = strength;
        cfg.convergence.min_epochs = 3;
        let ctx = TrainContext { train, test, config: &cfg, attack: &attack, probe };
        let model = CompositeClassifier::init(&mcfg, 11).unwrap();
        match run_method(&ctx, model).unwrap() {
            TrainResult::Completed(out) => *out,
            TrainResult::Inapplicable { reason } => panic!("inapplicable: {reason}"),
        }
    };

    let mut gate = Gate::new(4);

    let online = run(Method::AedaOnline, 2, 1.0, &train, &test);
    let robust_inf = run(Method::AedaRobust, 1_000_000_000, 1.0, &train, &test);
    gate.check(
        "aeda_robust(k=inf) model bitwise equals aeda_online",
        model_hash(&online.model) == model_hash(&robust_inf.model),
    );
    let losses = |o: &TrainOutcome| -> Vec<f64> {
        o.records.iter().map(|r| r.target_train_loss).collect()
    };
    gate.check(
        "aeda_robust(k=inf) trajectory equals aeda_online",
        losses(&online) == losses(&robust_inf),
    );

    let original = run(Method::Original, 2, 1.0, &train, &test);
    let debias0 = run(Method::AdvDebias, 2, 0.0, &train, &test);
    gate.check(
        "adv_debias(strength 0) extractor bitwise equals original",
        extractor_hash(&original.model) == extractor_hash(&debias0.model),
    );
    gate.check(
        "adv_debias(strength 0) target head bitwise equals original",
        head_hash(&original.model.target_head) == head_hash(&debias0.model.target_head),
    );
    gate.check(
        "adv_debias(strength 0) target losses equal original",
        losses(&original) == losses(&debias0),
    );

    // Balanced input: aeda_pre falls back to plain training, bitwise.
    let balanced = {
        let colors = ColorSpec::default();
        let mut counters = std::collections::BTreeMap::new();
        let examples: Vec<LabeledExample> = corpus
            .train
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let c = counters.entry(e.label).or_insert(0usize);
                let b = (*c % 2) as u8;
                *c += 1;
                LabeledExample {
                    pixels: colors.colorize(&e.pixels, b),
                    target: e.label,
                    bias: b,
                    provenance: Provenance::Original,
                    source_id: format!("train-{i:06}"),
                }
            })
            .collect();
        GroupedDataset::new(Split::Train, examples)
    };
    let orig_bal = run(Method::Original, 2, 1.0, &balanced, &test);
    let pre_bal = run(Method::AedaPre, 2, 1.0, &balanced, &test);
    gate.check(
        "balanced-input aeda_pre bitwise equals original",
        model_hash(&orig_bal.model) == model_hash(&pre_bal.model)
            && losses(&orig_bal) == losses(&pre_bal),
    );
    gate.finish("all reductions bitwise under shared seeds");
}

// ---------------------------------------------------------------------------
// Criterion 5: Table-1 ordering at desk scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_method_ordering() {
    let family = &*FAMILY;
    let bacc_of = |m: &str| mean(&family.by_method[m], |o| final_record(o).bacc);
    let bias_of = |m: &str| mean(&family.by_method[m], |o| final_record(o).bias);

    let (b_orig, b_pre, b_onl, b_rob) = (
        bacc_of("original"),
        bacc_of("aeda_pre"),
        bacc_of("aeda_online"),
        bacc_of("aeda_robust"),
    );
    let (s_orig, s_onl, s_rob) = (
        bias_of("original"),
        bias_of("aeda_online"),
        bias_of("aeda_robust"),
    );
    let mut gate = Gate::new(5);
    gate.check(
        &format!("bACC robust {b_rob:.2} > online {b_onl:.2}"),
        b_rob > b_onl,
    );
    gate.check(&format!("bACC online {b_onl:.2} > pre {b_pre:.2}"), b_onl > b_pre);
    gate.check(
        &format!("bACC robust {b_rob:.2} - original {b_orig:.2} >= 15"),
        b_rob - b_orig >= 15.0,
    );
    gate.check(
        &format!("bias robust {s_rob:.3} < online {s_onl:.3}"),
        s_rob < s_onl,
    );
    gate.check(
        &format!("bias online {s_onl:.3} < original {s_orig:.3}"),
        s_onl < s_orig,
    );
    gate.finish(&format!(
        "seed-mean ordering holds: bACC {b_rob:.1} > {b_onl:.1} > {b_pre:.1} (orig {b_orig:.1}); bias {s_rob:.2} < {s_onl:.2} < {s_orig:.2}"
    ));
}

// ---------------------------------------------------------------------------
// Criterion 6: down-sampling / reweighting applicability
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_sampling_baselines() {
    let mut gate = Gate::new(6);

    // Extreme regime: both methods must report inapplicable.
    let (train, test) = &*DESK_DATA;
    let attack = desk_attack();
    for method in [Method::Downsampling, Method::Reweighting] {
        let cfg = desk_train_config(method, 1, 4);
        let ctx = TrainContext {
            train,
            test,
            config: &cfg,
            attack: &attack,
            probe: ProbeSettings::default(),
        };
        let mcfg = ModelConfig::preset("small_cnn", (3, 28, 28), 10).unwrap();
        let model = CompositeClassifier::init(&mcfg, 1).unwrap();
        let inapplicable = matches!(
            run_method(&ctx, model).unwrap(),
            TrainResult::Inapplicable { .. }
        );
        gate.check(&format!("{method} inapplicable on extreme regime"), inapplicable);
    }

    // rho = 0.9 regime: both run; both debias; down-sampling pays in bACC.
    let corpus = GrayCorpus::synthetic(500, 100, 17);
    let (train9, test9) = build_cmnist(&corpus, &ColorSpec::default(), &uniform_plan(0.9), 17).unwrap();
    let epochs = 8;
    let mut results: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (name, method) in [
        ("original", Method::Original),
        ("downsampling", Method::Downsampling),
        ("reweighting", Method::Reweighting),
    ] {
        let mut baccs = Vec::new();
        let mut biases = Vec::new();
        for seed in [1u64, 2] {
            let cfg = desk_train_config(method, seed, epochs);
            let ctx = TrainContext {
                train: &train9,
                test: &test9,
                config: &cfg,
                attack: &attack,
                probe: ProbeSettings::default(),
            };
            let mcfg = ModelConfig::preset("small_cnn", (3, 28, 28), 10).unwrap();
            let model = CompositeClassifier::init(&mcfg, seed).unwrap();
            match run_method(&ctx, model).unwrap() {
                TrainResult::Completed(out) => {
                    let r = final_record(&out);
                    baccs.push(r.bacc);
                    biases.push(r.bias);
                }
                TrainResult::Inapplicable { reason } => {
                    panic!("{name} unexpectedly inapplicable at rho=0.9: {reason}")
                }
            }
        }
        results.insert(
            name,
            (
                baccs.iter().sum::<f64>() / baccs.len() as f64,
                biases.iter().sum::<f64>() / biases.len() as f64,
            ),
        );
    }
    let (orig_bacc, orig_bias) = results["original"];
    let (down_bacc, down_bias) = results["downsampling"];
    let (rew_bacc, rew_bias) = results["reweighting"];
    gate.check(
        &format!("downsampling bias {down_bias:.3} < original {orig_bias:.3}"),
        down_bias < orig_bias,
    );
    gate.check(
        &format!("reweighting bias {rew_bias:.3} < original {orig_bias:.3}"),
        rew_bias < orig_bias,
    );
    gate.check(
        &format!("downsampling bACC {down_bacc:.2} < reweighting {rew_bacc:.2}"),
        down_bacc < rew_bacc,
    );
    let _ = orig_bacc;
    gate.finish(&format!(
        "dashes on extreme regime; at rho=0.9 both debias (orig {orig_bias:.2} -> down {down_bias:.2}, rew {rew_bias:.2}) and down-sampling pays accuracy ({down_bacc:.1} < {rew_bacc:.1})"
    ));
}

// ---------------------------------------------------------------------------
// Criterion 7: switch-experiment ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_switch_ordering() {
    let corpus = GrayCorpus::synthetic(500, 100, 23);
    let (train, test) = build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 23).unwrap();
    let attack = AttackConfig {
        epsilon: 32.0 / 255.0,
        alpha: 6.0 / 255.0,
        steps: 8,
        lambda: 1.0,
        ..AttackConfig::default()
    };
    let mut refs = Vec::new();
    let mut hards = Vec::new();
    let mut advs = Vec::new();
    let mut robusts = Vec::new();
    for seed in DESK_SEEDS {
        let cfg = desk_train_config(Method::Original, seed, 6);
        let report = run_switch_experiments(&train, &test, &cfg, &attack).unwrap();
        refs.push(report.reference_acc);
        hards.push(report.hard_switch_acc);
        advs.push(report.adv_switch_acc);
        robusts.push(report.adv_switch_robust_acc);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, h, a, rb) = (avg(&refs), avg(&hards), avg(&advs), avg(&robusts));
    let mut gate = Gate::new(7);
    gate.check(&format!("ADV robust {rb:.1} > ADV {a:.1}"), rb > a);
    gate.check(&format!("ADV {a:.1} > hard {h:.1}"), a > h);
    gate.check(&format!("hard switch {h:.1} < 20"), h < 20.0);
    gate.finish(&format!(
        "3-seed means: reference {r:.1}, hard {h:.1} < ADV {a:.1} < ADV-robust {rb:.1}"
    ));
}

// ---------------------------------------------------------------------------
// Criterion 8: transferability dynamics
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_transferability_dynamics() {
    let family = &*FAMILY;
    let final_r = |o: &TrainOutcome| final_record(o).transfer_acc.expect("probe enabled");
    let r_rob = mean(&family.by_method["aeda_robust"], final_r);
    let r_pre = mean(&family.by_method["aeda_pre"], final_r);

    let mut gate = Gate::new(8);
    gate.check(
        &format!("final r: robust {r_rob:.1} >= pre {r_pre:.1} + 10"),
        r_rob >= r_pre + 10.0,
    );

    // aeda_once: r decays at least 10 points from its peak.
    let rs: Vec<f64> = family
        .once
        .records
        .iter()
        .filter_map(|rec| rec.transfer_acc)
        .collect();
    let peak = rs.iter().cloned().fold(f64::MIN, f64::max);
    let last = *rs.last().unwrap();
    gate.check(
        &format!("aeda_once r decays: peak {peak:.1} -> final {last:.1} (>= 10)"),
        peak - last >= 10.0,
    );

    // Cutoff ablation: bias drifts up toward aeda_pre's level after cutoff.
    let robust_seed1 = &family.by_method["aeda_robust"][0];
    let pre_seed1 = &family.by_method["aeda_pre"][0];
    let bias_cut = final_record(&family.cutoff).bias;
    let bias_rob = final_record(robust_seed1).bias;
    let bias_pre = final_record(pre_seed1).bias;
    gate.check(
        &format!("post-cutoff bias {bias_cut:.3} > robust {bias_rob:.3}"),
        bias_cut > bias_rob,
    );
    gate.check(
        &format!(
            "cutoff bias {bias_cut:.3} closer to pre {bias_pre:.3} than robust {bias_rob:.3} is"
        ),
        (bias_cut - bias_pre).abs() < (bias_rob - bias_pre).abs(),
    );
    gate.finish(&format!(
        "r(robust) {r_rob:.1} >= r(pre) {r_pre:.1} + 10; once decays {peak:.1}->{last:.1}; cutoff drifts toward pre"
    ));
}

// ---------------------------------------------------------------------------
// Criterion 9: bias-vs-ratio trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_bias_vs_ratio_trend() {
    let ratios = [0.5, 0.7, 0.9, 0.95];
    let mut points: Vec<(f64, f64)> = Vec::new(); // (|rho-0.5|, bias)
    let mut by_class_ratio: BTreeMap<(u8, usize), f64> = BTreeMap::new();
    let attack = desk_attack();
    for (ri, &rho) in ratios.iter().enumerate() {
        let corpus = GrayCorpus::synthetic(500, 100, 31);
        let (train, test) =
            build_cmnist(&corpus, &ColorSpec::default(), &uniform_plan(rho), 31 + ri as u64).unwrap();
        let cfg = desk_train_config(Method::Original, 1, 8);
        let ctx = TrainContext {
            train: &train,
            test: &test,
            config: &cfg,
            attack: &attack,
            probe: ProbeSettings::default(),
        };
        let mcfg = ModelConfig::preset("small_cnn", (3, 28, 28), 10).unwrap();
        let model = CompositeClassifier::init(&mcfg, 1).unwrap();
        let TrainResult::Completed(out) = run_method(&ctx, model).unwrap() else {
            panic!("original inapplicable")
        };
        let report = debias::metrics::evaluate(&out.model, &test).unwrap();
        let train_ratio = train.bias_ratio();
        for (&t, &bias) in &report.per_class_bias {
            let actual_rho = train_ratio[&t];
            points.push(((actual_rho - 0.5).abs(), bias));
            by_class_ratio.insert((t, ri), bias);
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let rho_s = debias::util::spearman(&xs, &ys).expect("non-constant points");

    // Sign test: per class, bias at each imbalanced ratio vs the balanced one.
    let mut positives = 0usize;
    let mut n = 0usize;
    for t in 0u8..10 {
        if let Some(&base) = by_class_ratio.get(&(t, 0)) {
            for ri in 1..ratios.len() {
                if let Some(&b) = by_class_ratio.get(&(t, ri)) {
                    if b != base {
                        n += 1;
                        if b > base {
                            positives += 1;
                        }
                    }
                }
            }
        }
    }
    let p_value = debias::util::sign_test_p(positives, n);

    let mut gate = Gate::new(9);
    gate.check(&format!("points {} >= 20", points.len()), points.len() >= 20);
    gate.check(&format!("spearman {rho_s:.3} > 0"), rho_s > 0.0);
    gate.check(
        &format!("sign test over {n} pairs: {positives} positive, p = {p_value:.4} <= 0.05"),
        p_value <= 0.05,
    );
    gate.finish(&format!(
        "imbalance-bias rank correlation {rho_s:.3} > 0 over {} points; sign test p {p_value:.4}",
        points.len()
    ));
}

// ---------------------------------------------------------------------------
// Criterion 10: determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_run_determinism() {
    let mut config = ExperimentConfig::default();
    config.dataset.corpus = debias::experiment::CorpusSource::Synthetic {
        train_per_class: 40,
        test_per_class: 10,
    };
    config.model.preset = "tiny_cnn".into();
    config.method.method = Method::AedaRobust;
    config.method.epochs = 2;
    config.method.batch_size = 32;
    config.method.convergence.min_epochs = 2;
    config.method.seed = 5;
    config.attack.steps = 3;
    config.attack.alpha = 3.0 / 255.0;
    config.probe.enabled = true;

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (run_a, _) = run_experiment(&config, dir_a.path()).unwrap();
    let (run_b, _) = run_experiment(&config, dir_b.path()).unwrap();

    let mut gate = Gate::new(10);
    for file in ["epoch_records.csv", "checkpoint.json", "manifest.json", "journal.json"] {
        let a = std::fs::read(run_a.join(file)).unwrap();
        let b = std::fs::read(run_b.join(file)).unwrap();
        gate.check(&format!("{file} identical"), a == b);
    }
    gate.finish("repeated run yields identical epoch records, checkpoint, and manifest hashes");
}
