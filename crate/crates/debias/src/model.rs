//! Composite classifier: shared feature extractor with target, bias, and
//! probe heads, plus a self-contained standalone bias classifier.
//!
//! The parameter set is partitioned by component (extractor / target head /
//! bias head / probe head); trainers rely on those partitions for freeze
//! contracts, which are observable through the per-partition hashes.

use crate::nn::{argmax_rows, softmax_ce, ConvNet, Linear, Scalar};
use crate::util::ParamHasher;
use crate::{Error, Result};
use base64::prelude::*;
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: (usize, usize, usize),
    pub conv_blocks: Vec<Vec<usize>>,
    pub feat_dim: usize,
    pub n_target_classes: usize,
}

impl ModelConfig {
    /// Named backbone presets. `small_cnn` is the default desk-scale
    /// backbone; `vgg16` exists as a configuration for larger inputs.
    pub fn preset(name: &str, input: (usize, usize, usize), n_target_classes: usize) -> Result<Self> {
        let (conv_blocks, feat_dim) = match name {
            "small_cnn" => (vec![vec![8], vec![16]], 128),
            "tiny_cnn" => (vec![vec![4]], 32),
            "vgg16" => (
                vec![
                    vec![64, 64],
                    vec![128, 128],
                    vec![256, 256, 256],
                    vec![512, 512, 512],
                    vec![512, 512, 512],
                ],
                4096,
            ),
            other => {
                return Err(Error::Config(format!("unknown backbone preset '{other}'")));
            }
        };
        Ok(Self {
            input,
            conv_blocks,
            feat_dim,
            n_target_classes,
        })
    }
}

/// Which bias head a forward pass should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasHead {
    Main,
    Probe,
}

/// Loss specifications for input-gradient computation.
pub enum LossSpec<'a> {
    Target { labels: &'a [usize] },
    Bias { labels: &'a [usize], head: BiasHead },
    /// lambda * bias-attack loss + (1-lambda) * target-preservation loss.
    Joint {
        b_attack: &'a [usize],
        target_labels: &'a [usize],
        lambda: f32,
    },
}

/// Shared feature extractor plus target / bias / probe heads.
#[derive(Debug, Clone)]
pub struct CompositeClassifier<F = f32> {
    pub extractor: ConvNet<F>,
    pub target_head: Linear<F>,
    pub bias_head: Linear<F>,
    pub probe_head: Linear<F>,
    pub config: ModelConfig,
}

impl<F: Scalar> CompositeClassifier<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_from_stream(config, crate::util::seed_stream(seed, "model-init"))
    }

    /// Init from a purpose-tagged stream, for auxiliary models that must not
    /// share draws with the main model.
    pub fn init_tagged(config: &ModelConfig, seed: u64, tag: &str) -> Result<Self> {
        Self::init_from_stream(
            config,
            crate::util::seed_stream(seed, &format!("model-init-{tag}")),
        )
    }

    fn init_from_stream(config: &ModelConfig, mut rng: rand_chacha::ChaCha8Rng) -> Result<Self> {
        let extractor = ConvNet::init(config.input, &config.conv_blocks, config.feat_dim, &mut rng)?;
        let target_head = Linear::init(config.feat_dim, config.n_target_classes, &mut rng);
        let bias_head = Linear::init(config.feat_dim, 2, &mut rng);
        let probe_head = Linear::init(config.feat_dim, 2, &mut rng);
        Ok(Self {
            extractor,
            target_head,
            bias_head,
            probe_head,
            config: config.clone(),
        })
    }

    pub fn reset_probe_head(&mut self, seed: u64, tag: &str) {
        let mut rng = crate::util::seed_stream(seed, &format!("probe-reset-{tag}"));
        self.probe_head = Linear::init(self.config.feat_dim, 2, &mut rng);
    }

    pub fn reset_bias_head(&mut self, seed: u64, tag: &str) {
        let mut rng = crate::util::seed_stream(seed, &format!("bias-head-reset-{tag}"));
        self.bias_head = Linear::init(self.config.feat_dim, 2, &mut rng);
    }

    fn check_batch(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.config.input {
            return Err(Error::Shape(format!(
                "batch {c}x{h}x{w} does not match model input {:?}",
                self.config.input
            )));
        }
        Ok(())
    }

    /// Eval-mode target logits.
    pub fn forward_target(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_batch(x)?;
        let (feat, _) = self.extractor.forward_features(x);
        Ok(self.target_head.forward(&feat))
    }

    /// Eval-mode bias logits from the main or probe head.
    pub fn forward_bias(&self, x: &Array4<F>, head: BiasHead) -> Result<Array2<F>> {
        self.check_batch(x)?;
        let (feat, _) = self.extractor.forward_features(x);
        Ok(match head {
            BiasHead::Main => self.bias_head.forward(&feat),
            BiasHead::Probe => self.probe_head.forward(&feat),
        })
    }

    /// Gradient of the specified loss with respect to the input batch.
    /// Also returns per-example loss values of the combined objective.
    pub fn gradient_wrt_input(&self, x: &Array4<F>, spec: &LossSpec) -> Result<(Array4<F>, Array1<F>)> {
        self.check_batch(x)?;
        let n = x.dim().0;
        let (feat, cache) = self.extractor.forward_features(x);

        let (dfeat, per_example) = match spec {
            LossSpec::Target { labels } => {
                check_labels(labels, n, self.config.n_target_classes)?;
                let logits = self.target_head.forward(&feat);
                let per = per_example_ce(&logits, labels);
                let (_, dlogits) = softmax_ce(&logits, labels, None);
                let (dfeat, _, _) = self.target_head.backward(&feat, &dlogits, true);
                (dfeat.unwrap(), per)
            }
            LossSpec::Bias { labels, head } => {
                check_labels(labels, n, 2)?;
                let head = match head {
                    BiasHead::Main => &self.bias_head,
                    BiasHead::Probe => &self.probe_head,
                };
                let logits = head.forward(&feat);
                let per = per_example_ce(&logits, labels);
                let (_, dlogits) = softmax_ce(&logits, labels, None);
                let (dfeat, _, _) = head.backward(&feat, &dlogits, true);
                (dfeat.unwrap(), per)
            }
            LossSpec::Joint {
                b_attack,
                target_labels,
                lambda,
            } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
                }
                check_labels(b_attack, n, 2)?;
                let lam = F::from_f64(*lambda as f64);
                let one = F::one();
                // lambda == 1 must follow exactly the bias-only path so the
                // pure-attack reduction is bitwise.
                if *lambda == 1.0 {
                    let logits = self.bias_head.forward(&feat);
                    let per = per_example_ce(&logits, b_attack);
                    let (_, dlogits) = softmax_ce(&logits, b_attack, None);
                    let (dfeat, _, _) = self.bias_head.backward(&feat, &dlogits, true);
                    (dfeat.unwrap(), per)
                } else if *lambda == 0.0 {
                    check_labels(target_labels, n, self.config.n_target_classes)?;
                    let logits = self.target_head.forward(&feat);
                    let per = per_example_ce(&logits, target_labels);
                    let (_, dlogits) = softmax_ce(&logits, target_labels, None);
                    let (dfeat, _, _) = self.target_head.backward(&feat, &dlogits, true);
                    (dfeat.unwrap(), per)
                } else {
                    check_labels(target_labels, n, self.config.n_target_classes)?;
                    let bias_logits = self.bias_head.forward(&feat);
                    let target_logits = self.target_head.forward(&feat);
                    let per_b = per_example_ce(&bias_logits, b_attack);
                    let per_t = per_example_ce(&target_logits, target_labels);
                    let (_, dl_b) = softmax_ce(&bias_logits, b_attack, None);
                    let (_, dl_t) = softmax_ce(&target_logits, target_labels, None);
                    let (df_b, _, _) = self.bias_head.backward(&feat, &dl_b, true);
                    let (df_t, _, _) = self.target_head.backward(&feat, &dl_t, true);
                    let dfeat = df_b.unwrap() * lam + &(df_t.unwrap() * (one - lam));
                    let per = &per_b * lam + &(per_t * (one - lam));
                    (dfeat, per)
                }
            }
        };

        let (dx, _) = self.extractor.backward_features(x, &cache, &dfeat, true, false);
        let dx = dx.ok_or_else(|| Error::Shape("missing input gradient".into()))?;
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Train("non-finite input gradient".into()));
        }
        Ok((dx, per_example))
    }

    /// Feature vectors from the frozen extractor, batched internally.
    pub fn features(&self, x: &Array4<F>, batch: usize) -> Result<Array2<F>> {
        self.check_batch(x)?;
        let mut out = Array2::zeros((x.dim().0, self.config.feat_dim));
        let mut row = 0;
        for chunk in batched_views(x, batch) {
            let (feat, _) = self.extractor.forward_features(&chunk.to_owned());
            let n = feat.dim().0;
            out.slice_mut(ndarray::s![row..row + n, ..]).assign(&feat);
            row += n;
        }
        Ok(out)
    }

    /// Predicted target classes, batched internally.
    pub fn predict_target(&self, x: &Array4<F>, batch: usize) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(x.dim().0);
        for chunk in batched_views(x, batch) {
            let logits = self.forward_target(&chunk.to_owned())?;
            preds.extend(argmax_rows(&logits));
        }
        Ok(preds)
    }

    pub fn predict_bias(&self, x: &Array4<F>, head: BiasHead, batch: usize) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(x.dim().0);
        for chunk in batched_views(x, batch) {
            let logits = self.forward_bias(&chunk.to_owned(), head)?;
            preds.extend(argmax_rows(&logits));
        }
        Ok(preds)
    }
}

fn batched_views<F: Scalar>(x: &Array4<F>, batch: usize) -> Vec<ndarray::ArrayView4<'_, F>> {
    let n = x.dim().0;
    let mut views = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        views.push(x.slice(ndarray::s![start..end, .., .., ..]));
        start = end;
    }
    views
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "label count {} does not match batch size {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Per-example cross-entropy values (no reduction).
pub fn per_example_ce<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Array1<F> {
    let probs = crate::nn::softmax_probs(logits);
    Array1::from_iter(labels.iter().enumerate().map(|(i, &l)| {
        let p = probs[(i, l)];
        let floor = F::from_f64(1e-12);
        -(if p < floor { floor } else { p }).ln()
    }))
}

/// Self-contained image -> binary bias classifier with its own extractor.
#[derive(Debug, Clone)]
pub struct StandaloneBiasClassifier<F = f32> {
    pub extractor: ConvNet<F>,
    pub head: Linear<F>,
    pub config: ModelConfig,
}

impl<F: Scalar> StandaloneBiasClassifier<F> {
    pub fn init(config: &ModelConfig, seed: u64, tag: &str) -> Result<Self> {
        let mut rng = crate::util::seed_stream(seed, &format!("standalone-init-{tag}"));
        let extractor = ConvNet::init(config.input, &config.conv_blocks, config.feat_dim, &mut rng)?;
        let head = Linear::init(config.feat_dim, 2, &mut rng);
        Ok(Self {
            extractor,
            head,
            config: config.clone(),
        })
    }

    pub fn forward(&self, x: &Array4<F>) -> Array2<F> {
        let (feat, _) = self.extractor.forward_features(x);
        self.head.forward(&feat)
    }

    pub fn predict(&self, x: &Array4<F>, batch: usize) -> Vec<usize> {
        let mut preds = Vec::with_capacity(x.dim().0);
        for chunk in batched_views(x, batch) {
            preds.extend(argmax_rows(&self.forward(&chunk.to_owned())));
        }
        preds
    }

    /// Gradient of CE(head(f(x)), labels) with respect to x, plus the
    /// per-example losses.
    pub fn gradient_wrt_input(&self, x: &Array4<F>, labels: &[usize]) -> Result<(Array4<F>, Array1<F>)> {
        check_labels(labels, x.dim().0, 2)?;
        let (feat, cache) = self.extractor.forward_features(x);
        let logits = self.head.forward(&feat);
        let per = per_example_ce(&logits, labels);
        let (_, dlogits) = softmax_ce(&logits, labels, None);
        let (dfeat, _, _) = self.head.backward(&feat, &dlogits, true);
        let (dx, _) = self
            .extractor
            .backward_features(x, &cache, &dfeat.unwrap(), true, false);
        Ok((dx.unwrap(), per))
    }
}

// ---------------------------------------------------------------------------
// Parameter hashing
// ---------------------------------------------------------------------------

fn hash_convnet(net: &ConvNet<f32>, hasher: &mut ParamHasher) {
    for conv in net.blocks.iter().flatten() {
        hasher.update_f32(conv.weight.as_slice().unwrap());
        hasher.update_f32(conv.bias.as_slice().unwrap());
    }
    hasher.update_f32(net.fc.weight.as_slice().unwrap());
    hasher.update_f32(net.fc.bias.as_slice().unwrap());
}

fn hash_linear(l: &Linear<f32>, hasher: &mut ParamHasher) {
    hasher.update_f32(l.weight.as_slice().unwrap());
    hasher.update_f32(l.bias.as_slice().unwrap());
}

pub fn extractor_hash(model: &CompositeClassifier) -> String {
    let mut h = ParamHasher::new();
    hash_convnet(&model.extractor, &mut h);
    h.finish()
}

pub fn head_hash(head: &Linear<f32>) -> String {
    let mut h = ParamHasher::new();
    hash_linear(head, &mut h);
    h.finish()
}

/// Hash over every partition of the composite model, in canonical order.
pub fn model_hash(model: &CompositeClassifier) -> String {
    let mut h = ParamHasher::new();
    hash_convnet(&model.extractor, &mut h);
    hash_linear(&model.target_head, &mut h);
    hash_linear(&model.bias_head, &mut h);
    hash_linear(&model.probe_head, &mut h);
    h.finish()
}

pub fn standalone_hash(model: &StandaloneBiasClassifier) -> String {
    let mut h = ParamHasher::new();
    hash_convnet(&model.extractor, &mut h);
    hash_linear(&model.head, &mut h);
    h.finish()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    shape: Vec<usize>,
    data: String, // base64 of f32 LE
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    kind: String,
    arch: ModelConfig,
    partitions: Vec<(String, Vec<TensorBlob>)>,
    param_hash: String,
}

fn blob_from(values: &[f32], shape: &[usize]) -> TensorBlob {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorBlob {
        shape: shape.to_vec(),
        data: BASE64_STANDARD.encode(bytes),
    }
}

fn blob_values(blob: &TensorBlob) -> Result<Vec<f32>> {
    let bytes = BASE64_STANDARD
        .decode(&blob.data)
        .map_err(|e| Error::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("tensor byte length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn convnet_blobs(net: &ConvNet<f32>) -> Vec<TensorBlob> {
    let mut blobs = Vec::new();
    for conv in net.blocks.iter().flatten() {
        blobs.push(blob_from(conv.weight.as_slice().unwrap(), &[conv.weight.dim().0, conv.weight.dim().1]));
        blobs.push(blob_from(conv.bias.as_slice().unwrap(), &[conv.bias.len()]));
    }
    blobs.push(blob_from(net.fc.weight.as_slice().unwrap(), &[net.fc.weight.dim().0, net.fc.weight.dim().1]));
    blobs.push(blob_from(net.fc.bias.as_slice().unwrap(), &[net.fc.bias.len()]));
    blobs
}

fn linear_blobs(l: &Linear<f32>) -> Vec<TensorBlob> {
    vec![
        blob_from(l.weight.as_slice().unwrap(), &[l.weight.dim().0, l.weight.dim().1]),
        blob_from(l.bias.as_slice().unwrap(), &[l.bias.len()]),
    ]
}

fn load_convnet(blobs: &[TensorBlob], net: &mut ConvNet<f32>) -> Result<()> {
    let mut it = blobs.iter();
    let mut next = |expect: &[usize]| -> Result<Vec<f32>> {
        let blob = it
            .next()
            .ok_or_else(|| Error::Checkpoint("missing tensor in extractor partition".into()))?;
        if blob.shape != expect {
            return Err(Error::Checkpoint(format!(
                "tensor shape {:?} does not match architecture {:?}",
                blob.shape, expect
            )));
        }
        blob_values(blob)
    };
    for conv in net.blocks.iter_mut().flatten() {
        let (o, i) = conv.weight.dim();
        conv.weight = Array2::from_shape_vec((o, i), next(&[o, i])?).unwrap();
        let n = conv.bias.len();
        conv.bias = Array1::from_vec(next(&[n])?);
    }
    let (o, i) = net.fc.weight.dim();
    net.fc.weight = Array2::from_shape_vec((o, i), next(&[o, i])?).unwrap();
    let n = net.fc.bias.len();
    net.fc.bias = Array1::from_vec(next(&[n])?);
    Ok(())
}

fn load_linear(blobs: &[TensorBlob], l: &mut Linear<f32>) -> Result<()> {
    if blobs.len() != 2 {
        return Err(Error::Checkpoint("head partition must hold two tensors".into()));
    }
    let (o, i) = l.weight.dim();
    if blobs[0].shape != [o, i] {
        return Err(Error::Checkpoint("head weight shape mismatch".into()));
    }
    l.weight = Array2::from_shape_vec((o, i), blob_values(&blobs[0])?).unwrap();
    l.bias = Array1::from_vec(blob_values(&blobs[1])?);
    Ok(())
}

pub fn save_composite(model: &CompositeClassifier, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        kind: "composite".into(),
        arch: model.config.clone(),
        partitions: vec![
            ("extractor".into(), convnet_blobs(&model.extractor)),
            ("target_head".into(), linear_blobs(&model.target_head)),
            ("bias_head".into(), linear_blobs(&model.bias_head)),
            ("probe_head".into(), linear_blobs(&model.probe_head)),
        ],
        param_hash: model_hash(model),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
    Ok(())
}

pub fn load_composite(path: &Path) -> Result<CompositeClassifier> {
    let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    if ckpt.kind != "composite" {
        return Err(Error::Checkpoint(format!("expected composite checkpoint, got {}", ckpt.kind)));
    }
    let mut model = CompositeClassifier::<f32>::init(&ckpt.arch, 0)?;
    for (name, blobs) in &ckpt.partitions {
        match name.as_str() {
            "extractor" => load_convnet(blobs, &mut model.extractor)?,
            "target_head" => load_linear(blobs, &mut model.target_head)?,
            "bias_head" => load_linear(blobs, &mut model.bias_head)?,
            "probe_head" => load_linear(blobs, &mut model.probe_head)?,
            other => return Err(Error::Checkpoint(format!("unknown partition '{other}'"))),
        }
    }
    let got = model_hash(&model);
    if got != ckpt.param_hash {
        return Err(Error::Checkpoint("checkpoint hash mismatch after load".into()));
    }
    Ok(model)
}

pub fn save_standalone(model: &StandaloneBiasClassifier, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        kind: "standalone_bias".into(),
        arch: model.config.clone(),
        partitions: vec![
            ("extractor".into(), convnet_blobs(&model.extractor)),
            ("head".into(), linear_blobs(&model.head)),
        ],
        param_hash: standalone_hash(model),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
    Ok(())
}

pub fn load_standalone(path: &Path) -> Result<StandaloneBiasClassifier> {
    let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    if ckpt.kind != "standalone_bias" {
        return Err(Error::Checkpoint(format!(
            "expected standalone_bias checkpoint, got {}",
            ckpt.kind
        )));
    }
    let mut model = StandaloneBiasClassifier::<f32>::init(&ckpt.arch, 0, "load")?;
    for (name, blobs) in &ckpt.partitions {
        match name.as_str() {
            "extractor" => load_convnet(blobs, &mut model.extractor)?,
            "head" => load_linear(blobs, &mut model.head)?,
            other => return Err(Error::Checkpoint(format!("unknown partition '{other}'"))),
        }
    }
    if standalone_hash(&model) != ckpt.param_hash {
        return Err(Error::Checkpoint("checkpoint hash mismatch after load".into()));
    }
    Ok(model)
}
