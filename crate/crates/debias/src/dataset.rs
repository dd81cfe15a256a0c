//! Bias-correlated grouped datasets: colored-digit construction, generic
//! imbalance injection, group statistics, and a deterministic on-disk
//! manifest format.

use crate::corpus::GrayCorpus;
use crate::util::{round_half_up, seed_stream, sha256_hex};
use crate::{Error, Result};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Adversarial,
}

/// One image sample: pixel tensor in [0,1], target label, binary bias label,
/// and provenance back to the original example it came from.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub pixels: Array3<f32>,
    pub target: u8,
    pub bias: u8,
    pub provenance: Provenance,
    pub source_id: String,
}

/// An ordered collection of labeled examples with per-(t,b) statistics.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    pub split: Split,
    pub examples: Vec<LabeledExample>,
    /// Per-class counts dropped because the requested ratio was not
    /// attainable from the available cells.
    pub shortfall: BTreeMap<u8, usize>,
    /// Construction notes (e.g. cells emptied by an extreme plan).
    pub notes: Vec<String>,
}

impl GroupedDataset {
    pub fn new(split: Split, examples: Vec<LabeledExample>) -> Self {
        Self {
            split,
            examples,
            shortfall: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Count of examples per (target, bias) cell.
    pub fn group_counts(&self) -> BTreeMap<(u8, u8), usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry((e.target, e.bias)).or_insert(0) += 1;
        }
        counts
    }

    /// Fraction of b=1 per class; absent when a class has no examples.
    pub fn bias_ratio(&self) -> BTreeMap<u8, f64> {
        let counts = self.group_counts();
        let mut ratios = BTreeMap::new();
        for t in self.classes() {
            let c0 = *counts.get(&(t, 0)).unwrap_or(&0);
            let c1 = *counts.get(&(t, 1)).unwrap_or(&0);
            if c0 + c1 > 0 {
                ratios.insert(t, c1 as f64 / (c0 + c1) as f64);
            }
        }
        ratios
    }

    pub fn classes(&self) -> Vec<u8> {
        let mut cs: Vec<u8> = self.examples.iter().map(|e| e.target).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    /// Gathers examples at `indices` into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>, Vec<usize>) {
        let (c, h, w) = self.examples[0].pixels.dim();
        let mut x = Array4::zeros((indices.len(), c, h, w));
        let mut t = Vec::with_capacity(indices.len());
        let mut b = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            x.index_axis_mut(Axis(0), row).assign(&self.examples[i].pixels);
            t.push(self.examples[i].target as usize);
            b.push(self.examples[i].bias as usize);
        }
        (x, t, b)
    }

    /// Checks the type invariants; used by tests and after construction.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.examples {
            if e.bias > 1 {
                return Err(Error::Dataset(format!("bias label {} not binary", e.bias)));
            }
            if e.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Dataset(format!(
                    "pixels out of [0,1] in {}",
                    e.source_id
                )));
            }
            if !seen.insert((e.source_id.clone(), e.provenance)) {
                return Err(Error::Dataset(format!(
                    "duplicate (source_id, provenance): {}",
                    e.source_id
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Colorization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    ReplaceBackground,
    Tint,
}

/// Maps the binary bias label to a background color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    /// RGB triples for b=0 and b=1.
    pub color_map: [[f32; 3]; 2],
    pub background_mode: BackgroundMode,
    /// Grayscale values below this are treated as background in
    /// replace-background mode.
    pub luminance_threshold: f32,
    /// Per-image uniform background color jitter (each channel offset drawn
    /// from [-jitter, jitter]). Gives the bias groups intra-class variance,
    /// which keeps bias-classifier margins at a realistic scale.
    #[serde(default)]
    pub jitter: f32,
}

impl Default for ColorSpec {
    fn default() -> Self {
        Self {
            // red / brown
            color_map: [[0.86, 0.08, 0.08], [0.55, 0.35, 0.17]],
            background_mode: BackgroundMode::ReplaceBackground,
            luminance_threshold: 0.2,
            jitter: 0.0,
        }
    }
}

impl ColorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color_map[0] == self.color_map[1] {
            return Err(Error::Config("the two bias colors must differ".into()));
        }
        for c in self.color_map.iter().flatten() {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::Config("color components must lie in [0,1]".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.luminance_threshold) {
            return Err(Error::Config("luminance threshold must lie in [0,1]".into()));
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(Error::Config("jitter must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Colorizes a grayscale image for bias label `b` with no jitter.
    pub fn colorize(&self, gray: &Array2<f32>, b: u8) -> Array3<f32> {
        self.colorize_offset(gray, b, [0.0; 3])
    }

    /// Colorizes with a per-image background offset. Output pixels are
    /// quantized to the u8 grid so datasets round-trip through the manifest
    /// byte-exactly.
    pub fn colorize_offset(&self, gray: &Array2<f32>, b: u8, offset: [f32; 3]) -> Array3<f32> {
        let (h, w) = gray.dim();
        let base = self.color_map[b as usize];
        let bg = [
            (base[0] + offset[0]).clamp(0.0, 1.0),
            (base[1] + offset[1]).clamp(0.0, 1.0),
            (base[2] + offset[2]).clamp(0.0, 1.0),
        ];
        let mut out = Array3::zeros((3, h, w));
        for r in 0..h {
            for c in 0..w {
                let g = gray[(r, c)];
                let rgb = match self.background_mode {
                    BackgroundMode::ReplaceBackground => {
                        if g < self.luminance_threshold {
                            bg
                        } else {
                            [g, g, g]
                        }
                    }
                    BackgroundMode::Tint => {
                        [
                            bg[0] + g * (1.0 - bg[0]),
                            bg[1] + g * (1.0 - bg[1]),
                            bg[2] + g * (1.0 - bg[2]),
                        ]
                    }
                };
                for ch in 0..3 {
                    out[(ch, r, c)] = quantize(rgb[ch]);
                }
            }
        }
        out
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn draw_offset<R: Rng>(jitter: f32, rng: &mut R) -> [f32; 3] {
    if jitter == 0.0 {
        return [0.0; 3];
    }
    [
        rng.gen_range(-jitter..=jitter),
        rng.gen_range(-jitter..=jitter),
        rng.gen_range(-jitter..=jitter),
    ]
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Builds the colored-digit protocol: training examples of class `t` get the
/// b=1 background with probability `ratio_plan[t]`, the test split assigns
/// both colors to every class in equal proportion. Classes missing from the
/// plan are dropped.
pub fn build_cmnist(
    corpus: &GrayCorpus,
    colors: &ColorSpec,
    ratio_plan: &BTreeMap<u8, f64>,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset)> {
    colors.validate()?;
    for (&t, &rho) in ratio_plan {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("ratio for class {t} outside [0,1]: {rho}")));
        }
    }

    // Train: Bernoulli color assignment per the plan, drawn in source order,
    // plus the per-image background offset.
    let mut rng = seed_stream(seed, "cmnist-train-assign");
    let mut train_items: Vec<(usize, u8, u8, [f32; 3])> = Vec::new();
    for (i, e) in corpus.train.iter().enumerate() {
        if let Some(&rho) = ratio_plan.get(&e.label) {
            let b = if rng.gen_range(0.0f64..1.0) < rho { 1 } else { 0 };
            train_items.push((i, e.label, b, draw_offset(colors.jitter, &mut rng)));
        }
    }
    let train_examples: Vec<LabeledExample> = train_items
        .iter()
        .map(|&(i, t, b, off)| LabeledExample {
            pixels: colors.colorize_offset(&corpus.train[i].pixels, b, off),
            target: t,
            bias: b,
            provenance: Provenance::Original,
            source_id: format!("train-{i:06}"),
        })
        .collect();
    let mut train = GroupedDataset::new(Split::Train, train_examples);
    let counts = train.group_counts();
    for &t in ratio_plan.keys() {
        let c0 = *counts.get(&(t, 0)).unwrap_or(&0);
        let c1 = *counts.get(&(t, 1)).unwrap_or(&0);
        if c0 + c1 == 0 {
            train.notes.push(format!("class {t}: no training examples"));
        } else if c0 == 0 || c1 == 0 {
            train
                .notes
                .push(format!("class {t}: cell b={} empty under plan", if c0 == 0 { 0 } else { 1 }));
        }
    }

    // Test: both colors per class, alternating after a seeded shuffle so
    // sibling cells differ by at most one.
    let mut per_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in corpus.test.iter().enumerate() {
        if ratio_plan.contains_key(&e.label) {
            per_class.entry(e.label).or_default().push(i);
        }
    }
    let mut test_items: Vec<(usize, u8, u8, [f32; 3])> = Vec::new();
    for (&t, idxs) in &per_class {
        let mut idxs = idxs.clone();
        let mut rng = seed_stream(seed, &format!("cmnist-test-assign-{t}"));
        idxs.shuffle(&mut rng);
        for (j, &i) in idxs.iter().enumerate() {
            test_items.push((i, t, (j % 2) as u8, draw_offset(colors.jitter, &mut rng)));
        }
    }
    test_items.sort_by_key(|&(i, _, _, _)| i);
    let test_examples: Vec<LabeledExample> = test_items
        .iter()
        .map(|&(i, t, b, off)| LabeledExample {
            pixels: colors.colorize_offset(&corpus.test[i].pixels, b, off),
            target: t,
            bias: b,
            provenance: Provenance::Original,
            source_id: format!("test-{i:06}"),
        })
        .collect();
    let test = GroupedDataset::new(Split::Test, test_examples);

    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// Subsamples per-(t,b) cells of an already-labeled dataset to hit the
/// requested bias ratios, dropping only (never duplicating or relabeling).
/// Classes absent from the plan are left untouched.
pub fn inject_imbalance(
    dataset: &GroupedDataset,
    ratio_plan: &BTreeMap<u8, f64>,
    seed: u64,
) -> Result<GroupedDataset> {
    for (&t, &rho) in ratio_plan {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("ratio for class {t} outside [0,1]: {rho}")));
        }
    }
    let counts = dataset.group_counts();
    let mut keep_quota: BTreeMap<(u8, u8), usize> = BTreeMap::new();
    let mut shortfall: BTreeMap<u8, usize> = BTreeMap::new();
    for t in dataset.classes() {
        let c0 = *counts.get(&(t, 0)).unwrap_or(&0);
        let c1 = *counts.get(&(t, 1)).unwrap_or(&0);
        let (k0, k1) = match ratio_plan.get(&t) {
            None => (c0, c1),
            Some(&rho) => target_cell_counts(c0, c1, rho),
        };
        keep_quota.insert((t, 0), k0);
        keep_quota.insert((t, 1), k1);
        let dropped = (c0 + c1) - (k0 + k1);
        if dropped > 0 {
            shortfall.insert(t, dropped);
        }
    }

    // Choose which examples to keep per cell, uniformly without replacement.
    let mut keep_flags = vec![false; dataset.len()];
    let mut cell_members: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        cell_members.entry((e.target, e.bias)).or_default().push(i);
    }
    for (cell, members) in &cell_members {
        let quota = *keep_quota.get(cell).unwrap_or(&members.len());
        if quota >= members.len() {
            for &i in members {
                keep_flags[i] = true;
            }
        } else {
            let mut rng = seed_stream(seed, &format!("inject-{}-{}", cell.0, cell.1));
            let chosen = rand::seq::index::sample(&mut rng, members.len(), quota);
            for j in chosen.iter() {
                keep_flags[members[j]] = true;
            }
        }
    }

    let examples: Vec<LabeledExample> = dataset
        .examples
        .iter()
        .zip(&keep_flags)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    let mut out = GroupedDataset::new(dataset.split, examples);
    out.shortfall = shortfall;
    Ok(out)
}

/// Cell quotas for a requested b=1 ratio: keep the binding cell whole and
/// size the other from the ratio, rounding half-up.
fn target_cell_counts(c0: usize, c1: usize, rho: f64) -> (usize, usize) {
    if rho == 0.0 {
        return (c0, 0);
    }
    if rho == 1.0 {
        return (0, c1);
    }
    // Keeping all of c1 needs k0 = c1 (1-rho)/rho of the other cell. The
    // 1e-9 guard keeps integer-derived halves (e.g. 12.5) from landing just
    // below the rounding boundary through float noise.
    let k0_needed = c1 as f64 * (1.0 / rho - 1.0);
    if k0_needed <= c0 as f64 + 1e-9 {
        (round_half_up(k0_needed + 1e-9).min(c0), c1)
    } else {
        let k1_needed = c0 as f64 * rho / (1.0 - rho);
        (c0, round_half_up(k1_needed + 1e-9).min(c1))
    }
}

/// Full-pass group statistics: per-cell counts and per-class b=1 ratio.
pub fn group_stats(dataset: &GroupedDataset) -> (BTreeMap<(u8, u8), usize>, BTreeMap<u8, f64>) {
    (dataset.group_counts(), dataset.bias_ratio())
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    source_id: String,
    t: u8,
    b: u8,
    provenance: Provenance,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    split: Split,
    image_shape: (usize, usize, usize),
    records: Vec<ManifestRecord>,
    group_counts: Vec<(u8, u8, usize)>,
    bias_ratio: Vec<(u8, f64)>,
    shortfall: Vec<(u8, usize)>,
    notes: Vec<String>,
    images_sha256: String,
}

/// Serializes a dataset into (manifest JSON, packed u8 image bytes).
/// Records are ordered by source id; pixels are quantized to the u8 grid.
pub fn dataset_manifest_bytes(ds: &GroupedDataset) -> (Vec<u8>, Vec<u8>) {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| {
        let ea = &ds.examples[a];
        let eb = &ds.examples[b];
        (&ea.source_id, ea.provenance as u8).cmp(&(&eb.source_id, eb.provenance as u8))
    });
    let shape = ds.examples[0].pixels.dim();
    let stride = shape.0 * shape.1 * shape.2;
    let mut images = Vec::with_capacity(ds.len() * stride);
    let mut records = Vec::with_capacity(ds.len());
    for (slot, &i) in order.iter().enumerate() {
        let e = &ds.examples[i];
        for &v in e.pixels.iter() {
            images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        records.push(ManifestRecord {
            source_id: e.source_id.clone(),
            t: e.target,
            b: e.bias,
            provenance: e.provenance,
            offset: slot * stride,
        });
    }
    let manifest = Manifest {
        format_version: 1,
        split: ds.split,
        image_shape: shape,
        records,
        group_counts: ds
            .group_counts()
            .into_iter()
            .map(|((t, b), c)| (t, b, c))
            .collect(),
        bias_ratio: ds.bias_ratio().into_iter().collect(),
        shortfall: ds.shortfall.iter().map(|(&t, &c)| (t, c)).collect(),
        notes: ds.notes.clone(),
        images_sha256: sha256_hex(&images),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialization");
    (json, images)
}

pub fn save_dataset(ds: &GroupedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (json, images) = dataset_manifest_bytes(ds);
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    f.write_all(&json)?;
    std::fs::write(dir.join("images.bin"), images)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<GroupedDataset> {
    let json = std::fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let images = std::fs::read(dir.join("images.bin"))?;
    if sha256_hex(&images) != manifest.images_sha256 {
        return Err(Error::Dataset("images.bin does not match manifest hash".into()));
    }
    let (c, h, w) = manifest.image_shape;
    let stride = c * h * w;
    let mut examples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        if rec.offset + stride > images.len() {
            return Err(Error::Dataset(format!("record {} offset out of range", rec.source_id)));
        }
        let pixels = Array3::from_shape_fn((c, h, w), |(ci, r, col)| {
            images[rec.offset + (ci * h + r) * w + col] as f32 / 255.0
        });
        examples.push(LabeledExample {
            pixels,
            target: rec.t,
            bias: rec.b,
            provenance: rec.provenance,
            source_id: rec.source_id.clone(),
        });
    }
    let mut ds = GroupedDataset::new(manifest.split, examples);
    ds.shortfall = manifest.shortfall.into_iter().collect();
    ds.notes = manifest.notes;
    Ok(ds)
}

/// The canonical “extreme” plan: classes 0-4 all b=0, classes 5-9 all b=1.
pub fn extreme_plan() -> BTreeMap<u8, f64> {
    (0u8..10).map(|t| (t, if t < 5 { 0.0 } else { 1.0 })).collect()
}

/// All classes at the given ratio.
pub fn uniform_plan(rho: f64) -> BTreeMap<u8, f64> {
    (0u8..10).map(|t| (t, rho)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus() -> GrayCorpus {
        GrayCorpus::synthetic(30, 10, 11)
    }

    /// Independent recount: a plain pass over emitted examples.
    fn recount(ds: &GroupedDataset) -> BTreeMap<(u8, u8), usize> {
        let mut m = BTreeMap::new();
        for e in &ds.examples {
            *m.entry((e.target, e.bias)).or_insert(0usize) += 1;
        }
        m
    }

    #[test]
    fn extreme_plan_gives_pure_cells() {
        let corpus = tiny_corpus();
        let (train, test) =
            build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 3).unwrap();
        let ratios = train.bias_ratio();
        for t in 0u8..5 {
            assert_eq!(ratios[&t], 0.0);
        }
        for t in 5u8..10 {
            assert_eq!(ratios[&t], 1.0);
        }
        assert_eq!(recount(&train), train.group_counts());
        // Test split stays fair.
        let counts = test.group_counts();
        for t in 0u8..10 {
            let c0 = *counts.get(&(t, 0)).unwrap_or(&0) as i64;
            let c1 = *counts.get(&(t, 1)).unwrap_or(&0) as i64;
            assert!((c0 - c1).abs() <= 1, "class {t}: {c0} vs {c1}");
            assert!(c0 + c1 == 10);
        }
    }

    #[test]
    fn balanced_plan_is_near_half() {
        let corpus = GrayCorpus::synthetic(100, 5, 17);
        let (train, _) = build_cmnist(&corpus, &ColorSpec::default(), &uniform_plan(0.5), 5).unwrap();
        for (_, rho) in train.bias_ratio() {
            assert!((rho - 0.5).abs() < 0.2, "ratio {rho} too far from 0.5");
        }
    }

    #[test]
    fn ratio_counts_within_binomial_tolerance() {
        // 100 examples of class 3 at rho=0.9: expect (3,1)=90 within 4 sigma (12).
        let corpus = GrayCorpus::synthetic(100, 5, 23);
        let plan: BTreeMap<u8, f64> = [(3u8, 0.9)].into_iter().collect();
        let (train, _) = build_cmnist(&corpus, &ColorSpec::default(), &plan, 7).unwrap();
        assert_eq!(train.len(), 100); // only class 3 kept
        let counts = recount(&train);
        let c1 = *counts.get(&(3, 1)).unwrap_or(&0) as i64;
        assert!((c1 - 90).abs() <= 12, "count {c1}");
        assert_eq!(recount(&train), train.group_counts());
    }

    #[test]
    fn invalid_ratio_rejected() {
        let corpus = tiny_corpus();
        let plan: BTreeMap<u8, f64> = [(1u8, 1.2)].into_iter().collect();
        assert!(build_cmnist(&corpus, &ColorSpec::default(), &plan, 0).is_err());
        let ds = GroupedDataset::new(Split::Train, vec![]);
        assert!(inject_imbalance(&ds, &plan, 0).is_err());
    }

    #[test]
    fn colorize_modes_stay_in_range_and_quantized() {
        let corpus = tiny_corpus();
        for mode in [BackgroundMode::ReplaceBackground, BackgroundMode::Tint] {
            let spec = ColorSpec {
                background_mode: mode,
                ..ColorSpec::default()
            };
            let img = spec.colorize(&corpus.train[0].pixels, 1);
            for &v in img.iter() {
                assert!((0.0..=1.0).contains(&v));
                let q = (v * 255.0).round() / 255.0;
                assert_eq!(v, q);
            }
        }
    }

    #[test]
    fn identical_colors_rejected() {
        let spec = ColorSpec {
            color_map: [[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]],
            ..ColorSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn manifests_are_byte_identical_and_round_trip() {
        let corpus = tiny_corpus();
        let (train, _) = build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 9).unwrap();
        let (m1, i1) = dataset_manifest_bytes(&train);
        let (train2, _) = build_cmnist(&corpus, &ColorSpec::default(), &extreme_plan(), 9).unwrap();
        let (m2, i2) = dataset_manifest_bytes(&train2);
        assert_eq!(m1, m2);
        assert_eq!(i1, i2);

        let dir = tempfile::tempdir().unwrap();
        save_dataset(&train, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), train.len());
        for (a, b) in train.examples.iter().zip(&loaded.examples) {
            assert_eq!(a.source_id, b.source_id);
        }
        // Round-trip is exact because build quantizes pixels.
        let by_id: BTreeMap<&str, &LabeledExample> =
            loaded.examples.iter().map(|e| (e.source_id.as_str(), e)).collect();
        for e in &train.examples {
            assert_eq!(e.pixels, by_id[e.source_id.as_str()].pixels);
        }
    }

    fn synthetic_grouped(cells: &[((u8, u8), usize)]) -> GroupedDataset {
        let mut examples = Vec::new();
        let mut n = 0;
        for &((t, b), count) in cells {
            for _ in 0..count {
                examples.push(LabeledExample {
                    pixels: Array3::zeros((3, 4, 4)),
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
    fn inject_fixed_point_keeps_everything() {
        let ds = synthetic_grouped(&[((1, 0), 30), ((1, 1), 10)]);
        let plan: BTreeMap<u8, f64> = [(1u8, 0.25)].into_iter().collect();
        let out = inject_imbalance(&ds, &plan, 5).unwrap();
        assert_eq!(out.len(), 40);
        assert!(out.shortfall.is_empty());
    }

    #[test]
    fn inject_hand_solved_case() {
        // Cells (50, 50), plan rho=0.8: keep all 50 of b=1 and
        // 50*(0.2/0.8)=12.5 -> 13 of b=0 by half-up rounding.
        let ds = synthetic_grouped(&[((1, 0), 50), ((1, 1), 50)]);
        let plan: BTreeMap<u8, f64> = [(1u8, 0.8)].into_iter().collect();
        let out = inject_imbalance(&ds, &plan, 5).unwrap();
        let counts = recount(&out);
        assert_eq!(counts[&(1, 1)], 50);
        assert_eq!(counts[&(1, 0)], 13);
        assert_eq!(out.shortfall[&1], 37);
    }

    #[test]
    fn inject_degenerate_plan_empties_cell() {
        let ds = synthetic_grouped(&[((2, 0), 20), ((2, 1), 20)]);
        let plan: BTreeMap<u8, f64> = [(2u8, 1.0)].into_iter().collect();
        let out = inject_imbalance(&ds, &plan, 5).unwrap();
        let counts = recount(&out);
        assert_eq!(counts.get(&(2, 0)), None);
        assert_eq!(counts[&(2, 1)], 20);
    }

    #[test]
    fn inject_is_subset_and_deterministic() {
        let ds = synthetic_grouped(&[((0, 0), 17), ((0, 1), 29), ((4, 0), 8), ((4, 1), 3)]);
        let plan: BTreeMap<u8, f64> = [(0u8, 0.5), (4u8, 0.9)].into_iter().collect();
        let a = inject_imbalance(&ds, &plan, 77).unwrap();
        let b = inject_imbalance(&ds, &plan, 77).unwrap();
        let ids = |d: &GroupedDataset| -> Vec<String> {
            d.examples.iter().map(|e| e.source_id.clone()).collect()
        };
        assert_eq!(ids(&a), ids(&b));
        let source: std::collections::BTreeSet<String> = ids(&ds).into_iter().collect();
        for id in ids(&a) {
            assert!(source.contains(&id));
        }
        // stats match the plan given recorded shortfall
        let ratios = a.bias_ratio();
        assert!((ratios[&0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn group_stats_empty_dataset() {
        let ds = GroupedDataset::new(Split::Train, vec![]);
        let (counts, ratios) = group_stats(&ds);
        assert!(counts.is_empty());
        assert!(ratios.is_empty());
    }
}
