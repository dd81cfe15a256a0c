//! Config-driven experiment runner: dataset build, training, evaluation,
//! probing, comparison tables, and plot-data emission.
//!
//! A run directory contains a config echo, the epoch records, the final
//! checkpoint and bias report, attack logs, and a manifest hashing every
//! deterministic artifact. Wall-clock timings go to a separate file that is
//! deliberately excluded from the manifest so reruns hash identically.

use crate::attack::{write_attack_log, AttackConfig};
use crate::corpus::GrayCorpus;
use crate::dataset::{
    build_cmnist, dataset_manifest_bytes, extreme_plan, uniform_plan, ColorSpec, GroupedDataset,
};
use crate::metrics::{evaluate, BiasReport, ProbeConfig, RatioBiasTable};
use crate::model::{save_composite, CompositeClassifier, ModelConfig};
use crate::train::{
    run_method, EpochRecord, ProbeSettings, RunStatus, SwitchReport, TrainConfig, TrainContext,
    TrainResult,
};
use crate::util::sha256_hex;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const OUTPUT_ROOT_ENV: &str = "DEBIAS_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// Procedurally rendered glyph corpus.
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
    },
    /// IDX files (images/labels for train and t10k) in a directory.
    Idx { dir: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic {
            train_per_class: 1000,
            test_per_class: 100,
        }
    }
}

/// Ratio plan: either a named preset or an explicit class -> rho table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RatioPlanSpec {
    Named(String),
    Table(BTreeMap<String, f64>),
}

impl Default for RatioPlanSpec {
    fn default() -> Self {
        RatioPlanSpec::Named("extreme".into())
    }
}

impl RatioPlanSpec {
    pub fn resolve(&self) -> Result<BTreeMap<u8, f64>> {
        match self {
            RatioPlanSpec::Named(name) => match name.as_str() {
                "extreme" => Ok(extreme_plan()),
                "balanced" => Ok(uniform_plan(0.5)),
                other => {
                    if let Some(rho) = other.strip_prefix("uniform:") {
                        let rho: f64 = rho
                            .parse()
                            .map_err(|_| Error::Config(format!("bad uniform ratio '{other}'")))?;
                        Ok(uniform_plan(rho))
                    } else {
                        Err(Error::Config(format!("unknown ratio plan '{other}'")))
                    }
                }
            },
            RatioPlanSpec::Table(table) => {
                let mut plan = BTreeMap::new();
                for (key, &rho) in table {
                    let class: u8 = key
                        .parse()
                        .map_err(|_| Error::Config(format!("bad class key '{key}'")))?;
                    plan.insert(class, rho);
                }
                Ok(plan)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    pub corpus: CorpusSource,
    pub colors: ColorSpec,
    pub ratio_plan: RatioPlanSpec,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            colors: ColorSpec::default(),
            ratio_plan: RatioPlanSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub preset: String,
    /// Overrides the preset's feature dimension when set.
    pub feat_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "small_cnn".into(),
            feat_dim: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    pub enabled: bool,
    pub probe_epochs: usize,
    pub cadence: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            enabled: false,
            probe_epochs: 3,
            cadence: 1,
            lr: 0.1,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OutputSection {
    /// Run directory name; derived from method/seed/config hash when empty.
    pub run_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub method: TrainConfig,
    pub attack: AttackConfig,
    pub probe: ProbeSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Hash of the canonical serialized config.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Hash identifying the dataset build (everything that shapes the data).
    pub fn dataset_hash(&self) -> Result<String> {
        let section = toml::to_string_pretty(&self.dataset).map_err(Error::from)?;
        Ok(sha256_hex(section.as_bytes()))
    }

    pub fn build_corpus(&self) -> Result<GrayCorpus> {
        match &self.dataset.corpus {
            CorpusSource::Synthetic {
                train_per_class,
                test_per_class,
            } => Ok(GrayCorpus::synthetic(
                *train_per_class,
                *test_per_class,
                self.dataset.seed,
            )),
            CorpusSource::Idx { dir } => GrayCorpus::from_idx_dir(dir),
        }
    }

    pub fn build_datasets(&self) -> Result<(GroupedDataset, GroupedDataset)> {
        let corpus = self.build_corpus()?;
        let plan = self.dataset.ratio_plan.resolve()?;
        build_cmnist(&corpus, &self.dataset.colors, &plan, self.dataset.seed)
    }

    pub fn model_config(&self, input: (usize, usize, usize), n_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.model.preset, input, n_classes)?;
        if let Some(d) = self.model.feat_dim {
            cfg.feat_dim = d;
        }
        Ok(cfg)
    }

    pub fn probe_settings(&self) -> ProbeSettings {
        ProbeSettings {
            enabled: self.probe.enabled,
            cadence: self.probe.cadence.max(1),
            cfg: ProbeConfig {
                epochs: self.probe.probe_epochs,
                batch_size: self.probe.batch_size,
                lr: self.probe.lr,
                momentum: 0.9,
                seed: self.method.seed,
            },
        }
    }

    pub fn run_name(&self) -> Result<String> {
        if let Some(name) = &self.output.run_name {
            return Ok(name.clone());
        }
        let hash = self.config_hash()?;
        Ok(format!(
            "run-{}-seed{}-{}",
            self.method.method,
            self.method.seed,
            &hash[..8]
        ))
    }
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub status: String,
    pub exit_code: i32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub final_bacc: Option<f64>,
    pub final_bias: Option<f64>,
    pub inapplicable_reason: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: String,
    /// file name -> sha256; volatile files (timings) are not listed.
    pub files: BTreeMap<String, String>,
}

pub fn status_exit_code(status: &RunStatus) -> i32 {
    match status {
        RunStatus::Converged => 0,
        RunStatus::EpochLimit => 2,
        RunStatus::Diverged => 3,
    }
}

fn records_csv(records: &[EpochRecord]) -> String {
    let mut out =
        String::from("epoch,target_train_loss,bacc,model_bias,transfer_acc,attack_success_rate\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            fmt_f64(r.target_train_loss),
            fmt_f64(r.bacc),
            fmt_f64(r.bias),
            r.transfer_acc.map_or(String::new(), fmt_f64),
            r.attack_success_rate.map_or(String::new(), fmt_f64),
        ));
    }
    out
}

fn timings_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,wall_time_s\n");
    for r in records {
        out.push_str(&format!("{},{:.3}\n", r.epoch, r.wall_time_s));
    }
    out
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation keeps files deterministic.
    format!("{v}")
}

/// Parses the records CSV written by `records_csv`.
pub fn read_records_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::RunDir(format!("bad records row: {line}")));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse().map_err(|_| Error::RunDir(format!("bad number {s}")))?))
            }
        };
        records.push(EpochRecord {
            epoch: parts[0].parse().map_err(|_| Error::RunDir("bad epoch".into()))?,
            target_train_loss: parts[1].parse().map_err(|_| Error::RunDir("bad loss".into()))?,
            bacc: parts[2].parse().map_err(|_| Error::RunDir("bad bacc".into()))?,
            bias: parts[3].parse().map_err(|_| Error::RunDir("bad bias".into()))?,
            transfer_acc: opt(parts[4])?,
            attack_success_rate: opt(parts[5])?,
            wall_time_s: 0.0,
        });
    }
    Ok(records)
}

/// Executes the configured experiment into `<out_root>/<run_name>/`.
/// Returns the run directory and the summary.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<(PathBuf, RunSummary)> {
    let config_hash = config.config_hash()?;
    let dataset_hash = config.dataset_hash()?;
    let run_dir = out_root.join(config.run_name()?);
    std::fs::create_dir_all(&run_dir)?;

    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let write_file = |run_dir: &Path,
                          files: &mut BTreeMap<String, String>,
                          name: &str,
                          bytes: &[u8],
                          hashed: bool|
     -> Result<()> {
        std::fs::write(run_dir.join(name), bytes)?;
        if hashed {
            files.insert(name.to_string(), sha256_hex(bytes));
        }
        Ok(())
    };

    // Config echo first so a failed run still documents itself.
    let config_echo = config.to_toml()?;
    write_file(&run_dir, &mut files, "config.toml", config_echo.as_bytes(), true)?;

    let (train, test) = config.build_datasets()?;
    let (train_manifest, _) = dataset_manifest_bytes(&train);
    write_file(&run_dir, &mut files, "dataset_stats.json", &dataset_stats_json(&train, &test)?, true)?;
    let train_build_hash = sha256_hex(&train_manifest);

    let (c, h, w) = train.examples[0].pixels.dim();
    let n_classes = 10;
    let model_cfg = config.model_config((c, h, w), n_classes)?;
    let model = CompositeClassifier::init(&model_cfg, config.method.seed)?;

    let ctx = TrainContext {
        train: &train,
        test: &test,
        config: &config.method,
        attack: &config.attack,
        probe: config.probe_settings(),
    };
    let result = run_method(&ctx, model)?;

    let summary = match result {
        TrainResult::Inapplicable { reason } => {
            let summary = RunSummary {
                method: config.method.method.to_string(),
                seed: config.method.seed,
                status: "inapplicable".into(),
                exit_code: 4,
                config_hash: config_hash.clone(),
                dataset_hash: dataset_hash.clone(),
                final_bacc: None,
                final_bias: None,
                inapplicable_reason: Some(reason),
                warnings: vec![],
            };
            write_file(
                &run_dir,
                &mut files,
                "summary.json",
                &serde_json::to_vec_pretty(&summary)?,
                true,
            )?;
            summary
        }
        TrainResult::Completed(outcome) => {
            write_file(
                &run_dir,
                &mut files,
                "epoch_records.csv",
                records_csv(&outcome.records).as_bytes(),
                true,
            )?;
            // Timings are volatile; never part of the manifest.
            write_file(
                &run_dir,
                &mut files,
                "timings.csv",
                timings_csv(&outcome.records).as_bytes(),
                false,
            )?;
            save_composite(&outcome.model, &run_dir.join("checkpoint.json"))?;
            let ckpt_bytes = std::fs::read(run_dir.join("checkpoint.json"))?;
            files.insert("checkpoint.json".into(), sha256_hex(&ckpt_bytes));

            let report = evaluate(&outcome.model, &test)?;
            write_file(
                &run_dir,
                &mut files,
                "bias_report.json",
                &serde_json::to_vec_pretty(&report)?,
                true,
            )?;
            if !outcome.attack_rows.is_empty() {
                write_attack_log(&outcome.attack_rows, &run_dir.join("attack_log.csv"))?;
                let bytes = std::fs::read(run_dir.join("attack_log.csv"))?;
                files.insert("attack_log.csv".into(), sha256_hex(&bytes));
            }
            if !outcome.journal.is_empty() {
                write_file(
                    &run_dir,
                    &mut files,
                    "journal.json",
                    &serde_json::to_vec_pretty(&outcome.journal)?,
                    true,
                )?;
            }
            let summary = RunSummary {
                method: config.method.method.to_string(),
                seed: config.method.seed,
                status: match outcome.status {
                    RunStatus::Converged => "converged",
                    RunStatus::EpochLimit => "epoch-limit",
                    RunStatus::Diverged => "aborted-divergence",
                }
                .into(),
                exit_code: status_exit_code(&outcome.status),
                config_hash: config_hash.clone(),
                dataset_hash: dataset_hash.clone(),
                final_bacc: Some(report.bacc),
                final_bias: Some(report.overall_bias),
                inapplicable_reason: None,
                warnings: outcome.warnings.clone(),
            };
            write_file(
                &run_dir,
                &mut files,
                "summary.json",
                &serde_json::to_vec_pretty(&summary)?,
                true,
            )?;
            summary
        }
    };

    let manifest = RunManifest {
        config_hash,
        dataset_hash: format!("{dataset_hash}:{train_build_hash}"),
        files,
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok((run_dir, summary))
}

fn dataset_stats_json(train: &GroupedDataset, test: &GroupedDataset) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Stats {
        train_examples: usize,
        test_examples: usize,
        train_group_counts: Vec<(u8, u8, usize)>,
        train_bias_ratio: Vec<(u8, f64)>,
        test_group_counts: Vec<(u8, u8, usize)>,
        notes: Vec<String>,
    }
    let stats = Stats {
        train_examples: train.len(),
        test_examples: test.len(),
        train_group_counts: train.group_counts().into_iter().map(|((t, b), c)| (t, b, c)).collect(),
        train_bias_ratio: train.bias_ratio().into_iter().collect(),
        test_group_counts: test.group_counts().into_iter().map(|((t, b), c)| (t, b, c)).collect(),
        notes: train.notes.clone(),
    };
    Ok(serde_json::to_vec_pretty(&stats)?)
}

// ---------------------------------------------------------------------------
// Comparison and plot data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub runs: usize,
    /// Mean over runs; absent when no run of this method produced it.
    pub bacc: Option<f64>,
    pub bias: Option<f64>,
    pub inapplicable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset_hash: String,
    pub rows: Vec<ComparisonRow>,
    pub checks: Vec<OrderingCheck>,
}

fn load_summary(dir: &Path) -> Result<RunSummary> {
    let bytes = std::fs::read(dir.join("summary.json"))
        .map_err(|e| Error::RunDir(format!("{}: {e}", dir.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Builds the method-by-metric table from run directories. Refuses to mix
/// runs built from different dataset configs.
pub fn compare_runs(run_dirs: &[PathBuf]) -> Result<ComparisonTable> {
    if run_dirs.is_empty() {
        return Err(Error::RunDir("no run directories given".into()));
    }
    let summaries: Vec<RunSummary> = run_dirs.iter().map(|d| load_summary(d)).collect::<Result<_>>()?;
    let dataset_hash = summaries[0].dataset_hash.clone();
    for (dir, s) in run_dirs.iter().zip(&summaries) {
        if s.dataset_hash != dataset_hash {
            return Err(Error::RunDir(format!(
                "dataset config mismatch in {}",
                dir.display()
            )));
        }
    }

    let mut by_method: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for s in &summaries {
        by_method.entry(s.method.clone()).or_default().push(s);
    }
    let mut rows = Vec::new();
    for (method, group) in &by_method {
        let baccs: Vec<f64> = group.iter().filter_map(|s| s.final_bacc).collect();
        let biases: Vec<f64> = group.iter().filter_map(|s| s.final_bias).collect();
        rows.push(ComparisonRow {
            method: method.clone(),
            runs: group.len(),
            bacc: (!baccs.is_empty()).then(|| baccs.iter().sum::<f64>() / baccs.len() as f64),
            bias: (!biases.is_empty()).then(|| biases.iter().sum::<f64>() / biases.len() as f64),
            inapplicable: group.iter().all(|s| s.status == "inapplicable"),
        });
    }

    fn check_pair(
        checks: &mut Vec<OrderingCheck>,
        name: &str,
        a: Option<f64>,
        b: Option<f64>,
        gt: bool,
    ) {
        if let (Some(a), Some(b)) = (a, b) {
            checks.push(OrderingCheck {
                name: name.to_string(),
                holds: if gt { a > b } else { a < b },
            });
        }
    }
    let get = |m: &str| rows.iter().find(|r| r.method == m);
    let mut checks = Vec::new();
    if let (Some(r), Some(o)) = (get("aeda_robust"), get("aeda_online")) {
        check_pair(&mut checks, "bacc: aeda_robust > aeda_online", r.bacc, o.bacc, true);
        check_pair(&mut checks, "bias: aeda_robust < aeda_online", r.bias, o.bias, false);
    }
    if let (Some(o), Some(p)) = (get("aeda_online"), get("aeda_pre")) {
        check_pair(&mut checks, "bacc: aeda_online > aeda_pre", o.bacc, p.bacc, true);
        check_pair(&mut checks, "bias: aeda_online < aeda_pre", o.bias, p.bias, false);
    }
    if let (Some(o), Some(orig)) = (get("aeda_online"), get("original")) {
        check_pair(&mut checks, "bias: aeda_online < original", o.bias, orig.bias, false);
    }
    if let (Some(r), Some(orig)) = (get("aeda_robust"), get("original")) {
        if let (Some(rb), Some(ob)) = (r.bacc, orig.bacc) {
            checks.push(OrderingCheck {
                name: "bacc: aeda_robust - original >= 15".into(),
                holds: rb - ob >= 15.0,
            });
        }
    }
    if let (Some(d), Some(w)) = (get("downsampling"), get("reweighting")) {
        check_pair(&mut checks, "bacc: downsampling < reweighting", d.bacc, w.bacc, false);
    }
    for m in ["downsampling", "reweighting"] {
        if let (Some(x), Some(orig)) = (get(m), get("original")) {
            check_pair(&mut checks, &format!("bias: {m} < original"), x.bias, orig.bias, false);
        }
    }

    Ok(ComparisonTable {
        dataset_hash,
        rows,
        checks,
    })
}

pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from("method,runs,bacc,model_bias,inapplicable\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            r.runs,
            r.bacc.map_or(String::new(), fmt_f64),
            r.bias.map_or(String::new(), fmt_f64),
            r.inapplicable
        ));
    }
    out.push('\n');
    for c in &table.checks {
        out.push_str(&format!("# check: {} -> {}\n", c.name, c.holds));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    BiasVsRatio,
    TransferabilityCurves,
    ConfusionGrids,
    BiasCurves,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias_vs_ratio" => Ok(PlotKind::BiasVsRatio),
            "transferability_curves" => Ok(PlotKind::TransferabilityCurves),
            "confusion_grids" => Ok(PlotKind::ConfusionGrids),
            "bias_curves" => Ok(PlotKind::BiasCurves),
            other => Err(Error::Config(format!("unknown plot kind '{other}'"))),
        }
    }
}

/// Emits tabular plot data from run directories into `out_dir`. Numbers are
/// read from the stored records and reports, never recomputed.
pub fn emit_plot_data(run_dirs: &[PathBuf], kind: PlotKind, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::RunDir("no run directories given".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match kind {
        PlotKind::TransferabilityCurves | PlotKind::BiasCurves => {
            let header = match kind {
                PlotKind::TransferabilityCurves => "method,seed,epoch,transfer_acc\n",
                _ => "method,seed,epoch,model_bias,bacc\n",
            };
            let mut out = String::from(header);
            let mut any = false;
            for dir in run_dirs {
                let summary = load_summary(dir)?;
                let records = read_records_csv(&dir.join("epoch_records.csv"))?;
                for r in &records {
                    match kind {
                        PlotKind::TransferabilityCurves => {
                            if let Some(t) = r.transfer_acc {
                                out.push_str(&format!(
                                    "{},{},{},{}\n",
                                    summary.method, summary.seed, r.epoch, t
                                ));
                                any = true;
                            }
                        }
                        _ => {
                            out.push_str(&format!(
                                "{},{},{},{},{}\n",
                                summary.method,
                                summary.seed,
                                r.epoch,
                                fmt_f64(r.bias),
                                fmt_f64(r.bacc)
                            ));
                            any = true;
                        }
                    }
                }
            }
            if !any {
                out.push_str("# no probe records available\n");
            }
            let name = match kind {
                PlotKind::TransferabilityCurves => "transferability_curves.csv",
                _ => "bias_curves.csv",
            };
            let path = out_dir.join(name);
            std::fs::write(&path, out)?;
            written.push(path);
        }
        PlotKind::ConfusionGrids => {
            let mut out = String::from("method,seed,bias_group,true_class,pred_class,count\n");
            for dir in run_dirs {
                let summary = load_summary(dir)?;
                let report: BiasReport =
                    serde_json::from_slice(&std::fs::read(dir.join("bias_report.json"))?)?;
                for (b, matrix) in &report.group_confusion {
                    for (ri, row) in matrix.iter().enumerate() {
                        for (ci, &count) in row.iter().enumerate() {
                            out.push_str(&format!(
                                "{},{},{},{},{},{}\n",
                                summary.method,
                                summary.seed,
                                b,
                                report.classes[ri],
                                report.classes[ci],
                                count
                            ));
                        }
                    }
                }
            }
            let path = out_dir.join("confusion_grids.csv");
            std::fs::write(&path, out)?;
            written.push(path);
        }
        PlotKind::BiasVsRatio => {
            let mut entries = Vec::new();
            for dir in run_dirs {
                let report: BiasReport =
                    serde_json::from_slice(&std::fs::read(dir.join("bias_report.json"))?)?;
                let stats: serde_json::Value =
                    serde_json::from_slice(&std::fs::read(dir.join("dataset_stats.json"))?)?;
                let mut ratios = BTreeMap::new();
                if let Some(arr) = stats["train_bias_ratio"].as_array() {
                    for pair in arr {
                        let t = pair[0].as_u64().unwrap_or(0) as u8;
                        let r = pair[1].as_f64().unwrap_or(0.0);
                        ratios.insert(t, r);
                    }
                }
                entries.push((ratios, report));
            }
            let table: RatioBiasTable = crate::metrics::bias_vs_ratio_report(&entries);
            let mut out = String::from("class,bias_ratio,bias\n");
            for row in &table.rows {
                out.push_str(&format!(
                    "{},{},{}\n",
                    row.class,
                    fmt_f64(row.bias_ratio),
                    fmt_f64(row.bias)
                ));
            }
            out.push_str(&format!(
                "# spearman(|ratio-0.5|, bias) = {}\n",
                table
                    .imbalance_bias_spearman
                    .map_or("undefined".into(), |v| format!("{v:.4}"))
            ));
            let path = out_dir.join("bias_vs_ratio.csv");
            std::fs::write(&path, out)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Runs the switch experiments under a config and writes the report.
pub fn run_switch_experiments_to_dir(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<SwitchReport> {
    let (train, test) = config.build_datasets()?;
    let report =
        crate::train::run_switch_experiments(&train, &test, &config.method, &config.attack)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("switch_report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("config.toml"), config.to_toml()?)?;
    Ok(report)
}
