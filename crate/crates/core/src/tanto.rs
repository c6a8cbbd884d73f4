//! Trace-based adversarial-input detection.
//!
//! Counter traces from clean and attacked inputs become a labeled feature
//! dataset, a lightweight classifier learns to separate the two, and the
//! trained detector then rides along with ordinary inference to flag
//! suspicious inputs as they arrive.
//!
//! The feature encoding is deliberately dumb: every enabled per-layer metric,
//! in layer-execution order, z-scored with statistics frozen from the
//! detector's training split. Record-level throughput is excluded; it is a
//! whole-inference reading, not a layer signature.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::apc::{
    hooked_inference, verify_record, ApcMemory, CounterConfig, LayerMetrics, MetricFamily,
    TraceRecord,
};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::network::{
    model_from_bytes, model_to_bytes, predict, train_model, LabeledDataset, ModelSpec,
    TrainConfig, TrainedModel,
};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wire::{put_f64_slice, ByteReader};

pub const DETECTOR_MAGIC: &[u8; 4] = b"APCD";
pub const DETECTOR_FORMAT_VERSION: u16 = 1;

/// One per-layer counter reading usable as a detector feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricName {
    Sparsity,
    ZeroCount,
    AvgActivation,
    MaxActivation,
    MinActivation,
    Entropy,
    Flops,
    Macs,
    Tops,
}

/// Extraction order within a layer. Layouts derived from records or counter
/// configurations always follow this sequence.
pub const METRIC_ORDER: [MetricName; 9] = [
    MetricName::Sparsity,
    MetricName::ZeroCount,
    MetricName::AvgActivation,
    MetricName::MaxActivation,
    MetricName::MinActivation,
    MetricName::Entropy,
    MetricName::Flops,
    MetricName::Macs,
    MetricName::Tops,
];

impl MetricName {
    pub fn name(self) -> &'static str {
        match self {
            MetricName::Sparsity => "sparsity",
            MetricName::ZeroCount => "zero_count",
            MetricName::AvgActivation => "avg_activation",
            MetricName::MaxActivation => "max_activation",
            MetricName::MinActivation => "min_activation",
            MetricName::Entropy => "entropy",
            MetricName::Flops => "flops",
            MetricName::Macs => "macs",
            MetricName::Tops => "tops",
        }
    }

    /// The counter family that has to be enabled for this metric to exist.
    pub fn family(self) -> MetricFamily {
        match self {
            MetricName::Sparsity => MetricFamily::Sparsity,
            MetricName::ZeroCount => MetricFamily::ZeroCount,
            MetricName::AvgActivation
            | MetricName::MaxActivation
            | MetricName::MinActivation => MetricFamily::DenseActivity,
            MetricName::Entropy => MetricFamily::Entropy,
            MetricName::Flops => MetricFamily::Flops,
            MetricName::Macs => MetricFamily::Macs,
            MetricName::Tops => MetricFamily::Tops,
        }
    }

    fn tag(self) -> u8 {
        match self {
            MetricName::Sparsity => 0,
            MetricName::ZeroCount => 1,
            MetricName::AvgActivation => 2,
            MetricName::MaxActivation => 3,
            MetricName::MinActivation => 4,
            MetricName::Entropy => 5,
            MetricName::Flops => 6,
            MetricName::Macs => 7,
            MetricName::Tops => 8,
        }
    }

    fn from_tag(tag: u8) -> Option<MetricName> {
        METRIC_ORDER.iter().copied().find(|m| m.tag() == tag)
    }

    fn read(self, layer: &LayerMetrics) -> Option<f64> {
        match self {
            MetricName::Sparsity => layer.sparsity,
            MetricName::ZeroCount => layer.zero_count.map(|v| v as f64),
            MetricName::AvgActivation => layer.avg_activation,
            MetricName::MaxActivation => layer.max_activation,
            MetricName::MinActivation => layer.min_activation,
            MetricName::Entropy => layer.entropy,
            MetricName::Flops => layer.flops.map(|v| v as f64),
            MetricName::Macs => layer.macs.map(|v| v as f64),
            MetricName::Tops => layer.tops,
        }
    }
}

/// One slot of a feature layout: which metric, from which layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDescriptor {
    pub layer_index: usize,
    pub metric: MetricName,
}

/// Extracted metric values plus the layout that names each slot.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    layout: Vec<FeatureDescriptor>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, layout: Vec<FeatureDescriptor>) -> Result<FeatureVector> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch {
                message: format!(
                    "feature vector has {} values for a layout of {} descriptors",
                    values.len(),
                    layout.len()
                ),
            });
        }
        Ok(FeatureVector { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[FeatureDescriptor] {
        &self.layout
    }
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl FeatureStats {
    fn from_rows(rows: &[FeatureVector], width: usize) -> FeatureStats {
        let n = rows.len() as f64;
        let mut means = vec![0.0; width];
        for row in rows {
            for (m, v) in means.iter_mut().zip(row.values()) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let mut stds = vec![0.0; width];
        for row in rows {
            for (s, (v, m)) in stds.iter_mut().zip(row.values().iter().zip(&means)) {
                *s += (v - m) * (v - m);
            }
        }
        for (s, m) in stds.iter_mut().zip(&means) {
            *s = (*s / n).sqrt();
            // A constant feature carries no signal; clamping its spread to 1
            // maps it to a constant 0 instead of dividing by zero. Spread at
            // rounding-noise level counts as constant too, otherwise z-scoring
            // would amplify accumulated ulps into full-scale garbage.
            if *s <= 1e-12 * m.abs().max(1.0) {
                *s = 1.0;
            }
        }
        FeatureStats { means, stds }
    }

    fn from_parts(means: Vec<f64>, stds: Vec<f64>) -> FeatureStats {
        FeatureStats { means, stds }
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    fn normalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Labeled feature rows: 0 marks a clean trace, 1 an adversarial one.
///
/// Features are stored raw. The statistics describe exactly the rows held
/// here; a detector freezes a copy of them at training time and never
/// recomputes, so normalization follows the training split wherever the
/// detector goes.
#[derive(Clone, Debug, PartialEq)]
pub struct ApcDataset {
    features: Vec<FeatureVector>,
    labels: Vec<u8>,
    layout: Vec<FeatureDescriptor>,
    stats: FeatureStats,
}

impl ApcDataset {
    pub fn from_rows(features: Vec<FeatureVector>, labels: Vec<u8>) -> Result<ApcDataset> {
        if features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::InsufficientData {
                required: 1,
                got: 0,
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!(
                "detector labels are 0 (clean) or 1 (adversarial), got {bad}"
            )));
        }
        let layout = features[0].layout().to_vec();
        for row in &features[1..] {
            if row.layout() != layout.as_slice() {
                return Err(Error::LayoutMismatch {
                    message: "feature rows disagree on layout".to_string(),
                });
            }
        }
        let stats = FeatureStats::from_rows(&features, layout.len());
        Ok(ApcDataset {
            features,
            labels,
            layout,
            stats,
        })
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn layout(&self) -> &[FeatureDescriptor] {
        &self.layout
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let adv = self.labels.iter().filter(|&&y| y == 1).count();
        (self.labels.len() - adv, adv)
    }
}

/// The layout a trace record actually carries: every present metric of every
/// captured layer, layers in execution order, metrics in [`METRIC_ORDER`].
pub fn record_layout(record: &TraceRecord) -> Vec<FeatureDescriptor> {
    let mut layout = Vec::new();
    for layer in &record.layers {
        for metric in METRIC_ORDER {
            if metric.read(layer).is_some() {
                layout.push(FeatureDescriptor {
                    layer_index: layer.layer_index,
                    metric,
                });
            }
        }
    }
    layout
}

/// The layout a counter configuration produces on a model with `layer_count`
/// layers. Matches [`record_layout`] of any trace captured under `cfg`.
pub fn counter_layout(cfg: &CounterConfig, layer_count: usize) -> Result<Vec<FeatureDescriptor>> {
    if let Some(list) = cfg.include_layers() {
        if let Some(&bad) = list.iter().find(|&&i| i >= layer_count) {
            return Err(Error::invalid(format!(
                "layer include list references layer {bad} but the model has {layer_count} layers"
            )));
        }
    }
    let mut layout = Vec::new();
    for layer_index in 0..layer_count {
        if !cfg.includes_layer(layer_index) {
            continue;
        }
        for metric in METRIC_ORDER {
            if cfg.enabled(metric.family()) {
                layout.push(FeatureDescriptor {
                    layer_index,
                    metric,
                });
            }
        }
    }
    Ok(layout)
}

/// Pull the layout's metrics out of a record, in layout order, after the
/// record's checksum has been re-verified.
pub fn build_feature_vector(
    record: &TraceRecord,
    layout: &[FeatureDescriptor],
) -> Result<FeatureVector> {
    if !verify_record(record) {
        return Err(Error::IntegrityError {
            input_id: record.input_id.clone(),
        });
    }
    let mut values = Vec::with_capacity(layout.len());
    for desc in layout {
        let value = record
            .layers
            .iter()
            .find(|l| l.layer_index == desc.layer_index)
            .and_then(|l| desc.metric.read(l))
            .ok_or(Error::MissingMetric {
                layer_index: desc.layer_index,
                metric: desc.metric.name(),
            })?;
        values.push(value);
    }
    FeatureVector::new(values, layout.to_vec())
}

/// Build a labeled dataset from clean and adversarial trace records. The
/// layout is derived from the first clean record; every record must carry
/// exactly the same one.
pub fn build_dataset(clean: &[TraceRecord], adversarial: &[TraceRecord]) -> Result<ApcDataset> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(Error::InsufficientData {
            required: 1,
            got: 0,
        });
    }
    let layout = record_layout(&clean[0]);
    let mut features = Vec::with_capacity(clean.len() + adversarial.len());
    let mut labels = Vec::with_capacity(clean.len() + adversarial.len());
    for (records, label) in [(clean, 0u8), (adversarial, 1u8)] {
        for record in records {
            if record_layout(record) != layout {
                return Err(Error::LayoutMismatch {
                    message: format!(
                        "record '{}' does not carry the dataset's layout",
                        record.input_id
                    ),
                });
            }
            features.push(build_feature_vector(record, &layout)?);
            labels.push(label);
        }
    }
    ApcDataset::from_rows(features, labels)
}

/// Record lists split class-by-class for detector training and evaluation.
#[derive(Clone, Debug)]
pub struct SplitRecords {
    pub train_clean: Vec<TraceRecord>,
    pub train_adversarial: Vec<TraceRecord>,
    pub test_clean: Vec<TraceRecord>,
    pub test_adversarial: Vec<TraceRecord>,
}

/// Seeded stratified split, performed before any dataset is built so that
/// normalization statistics can only ever come from training records.
/// `holdout_fraction` of each class (rounded, but always leaving both sides
/// non-empty) goes to the test side.
pub fn stratified_split(
    clean: &[TraceRecord],
    adversarial: &[TraceRecord],
    holdout_fraction: f64,
    seed: u64,
) -> Result<SplitRecords> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must be inside (0, 1)"));
    }
    for class in [clean, adversarial] {
        if class.len() < 2 {
            return Err(Error::InsufficientData {
                required: 2,
                got: class.len(),
            });
        }
    }
    let mut rng = SplitMix64::new(seed);
    let mut split_class = |records: &[TraceRecord]| {
        let n = records.len();
        let test_n = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let test: Vec<TraceRecord> = order[..test_n].iter().map(|&i| records[i].clone()).collect();
        let train: Vec<TraceRecord> = order[test_n..].iter().map(|&i| records[i].clone()).collect();
        (train, test)
    };
    let (train_clean, test_clean) = split_class(clean);
    let (train_adversarial, test_adversarial) = split_class(adversarial);
    Ok(SplitRecords {
        train_clean,
        train_adversarial,
        test_clean,
        test_adversarial,
    })
}

/// Which classifier family the detector uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    LogisticRegression,
    LinearSvm,
    Mlp,
}

/// Training hyperparameters. `defaults_for` gives each kind its customary
/// settings; every value can be overridden through `new`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorSettings {
    epochs: usize,
    learning_rate: f64,
    weight_decay: f64,
    hidden_width: usize,
    batch_size: usize,
    threshold: f64,
}

impl DetectorSettings {
    pub fn new(
        epochs: usize,
        learning_rate: f64,
        weight_decay: f64,
        hidden_width: usize,
        batch_size: usize,
        threshold: f64,
    ) -> Result<DetectorSettings> {
        if epochs == 0 {
            return Err(Error::invalid("detector epochs must be at least 1"));
        }
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid(
                "detector learning rate must be a positive finite number",
            ));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::invalid(
                "detector weight decay must be a non-negative finite number",
            ));
        }
        if hidden_width == 0 {
            return Err(Error::invalid("detector hidden width must be at least 1"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("detector batch size must be at least 1"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(
                "detector decision threshold must be inside (0, 1)",
            ));
        }
        Ok(DetectorSettings {
            epochs,
            learning_rate,
            weight_decay,
            hidden_width,
            batch_size,
            threshold,
        })
    }

    /// Customary settings per kind. The full-batch logistic fit runs long and
    /// cool, the margin fit short, the network fit in between. Hidden width
    /// and batch size only matter for the network kind; weight decay only for
    /// the two linear kinds.
    pub fn defaults_for(kind: DetectorKind) -> DetectorSettings {
        let (epochs, learning_rate) = match kind {
            DetectorKind::LogisticRegression => (500, 0.1),
            DetectorKind::LinearSvm => (20, 0.1),
            DetectorKind::Mlp => (100, 0.05),
        };
        DetectorSettings {
            epochs,
            learning_rate,
            weight_decay: 1e-4,
            hidden_width: 32,
            batch_size: 1,
            threshold: 0.5,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[derive(Clone, Debug)]
enum DetectorParams {
    LogisticRegression { weights: Vec<f64>, bias: f64 },
    LinearSvm { weights: Vec<f64>, bias: f64 },
    Mlp { model: TrainedModel },
}

/// A trained detector: classifier parameters plus a frozen copy of the
/// feature layout and the training split's normalization statistics.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    params: DetectorParams,
    threshold: f64,
    layout: Vec<FeatureDescriptor>,
    stats: FeatureStats,
}

impl DetectorModel {
    pub fn kind(&self) -> DetectorKind {
        match &self.params {
            DetectorParams::LogisticRegression { .. } => DetectorKind::LogisticRegression,
            DetectorParams::LinearSvm { .. } => DetectorKind::LinearSvm,
            DetectorParams::Mlp { .. } => DetectorKind::Mlp,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn layout(&self) -> &[FeatureDescriptor] {
        &self.layout
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    /// Probability-like score in [0, 1] that the trace behind `features` is
    /// adversarial. Margins of the two linear kinds pass through a logistic
    /// squashing so every kind reports on the same scale.
    pub fn score(&self, features: &FeatureVector) -> Result<f64> {
        if features.layout() != self.layout.as_slice() {
            return Err(Error::LayoutMismatch {
                message: "feature vector layout differs from the detector's".to_string(),
            });
        }
        let z = self.stats.normalize(features.values());
        match &self.params {
            DetectorParams::LogisticRegression { weights, bias }
            | DetectorParams::LinearSvm { weights, bias } => {
                Ok(sigmoid(dot(weights, &z) + bias))
            }
            DetectorParams::Mlp { model } => {
                let input = Tensor::new(vec![z.len()], z)?;
                let (_, probabilities) = predict(model, &input)?;
                Ok(probabilities[1])
            }
        }
    }

    pub fn is_adversarial(&self, score: f64) -> bool {
        score >= self.threshold
    }

    /// Score and threshold in one step.
    pub fn classify(&self, features: &FeatureVector) -> Result<(f64, bool)> {
        let score = self.score(features)?;
        Ok((score, self.is_adversarial(score)))
    }

    /// Scalar-operation count of one `score` call: two ops per feature for
    /// normalization, then the classifier's own arithmetic. Linear kinds cost
    /// a dot product plus bias and sigmoid; the MLP kind costs its network's
    /// layer-by-layer flops. Feeds the deterministic overhead model, so it
    /// must stay in step with `score`.
    pub fn score_cost_flops(&self) -> Result<u64> {
        let d = self.layout.len() as u64;
        let normalize = 2 * d;
        let classify = match &self.params {
            DetectorParams::LogisticRegression { .. } | DetectorParams::LinearSvm { .. } => {
                2 * d + 4
            }
            DetectorParams::Mlp { model } => {
                let spec = model.spec();
                let shapes = spec.layer_output_shapes()?;
                let mut total = 0u64;
                let mut input_shape = spec.input_shape.clone();
                for (layer, output_shape) in spec.layers.iter().zip(&shapes) {
                    let (flops, _) = crate::apc::layer_cost(layer, &input_shape, output_shape)?;
                    total += flops;
                    input_shape = output_shape.clone();
                }
                total
            }
        };
        Ok(normalize + classify)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fit_logistic_regression(
    rows: &[Vec<f64>],
    labels: &[u8],
    settings: &DetectorSettings,
) -> Result<(Vec<f64>, f64)> {
    let n = rows.len();
    let width = rows[0].len();
    let mut weights = vec![0.0; width];
    let mut bias = 0.0;
    for epoch in 0..settings.epochs {
        let mut grad_w = vec![0.0; width];
        let mut grad_b = 0.0;
        for (row, &y) in rows.iter().zip(labels) {
            let err = sigmoid(dot(&weights, row) + bias) - f64::from(y);
            for (g, v) in grad_w.iter_mut().zip(row) {
                *g += err * v;
            }
            grad_b += err;
        }
        let inv_n = 1.0 / n as f64;
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= settings.learning_rate * (g * inv_n + settings.weight_decay * *w);
        }
        bias -= settings.learning_rate * grad_b * inv_n;
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::DivergedTraining { epoch });
        }
    }
    Ok((weights, bias))
}

fn fit_linear_svm(
    rows: &[Vec<f64>],
    labels: &[u8],
    settings: &DetectorSettings,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let n = rows.len();
    let width = rows[0].len();
    let mut rng = SplitMix64::new(seed);
    let mut weights = vec![0.0; width];
    let mut bias = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..settings.epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let y = if labels[i] == 1 { 1.0 } else { -1.0 };
            let margin = dot(&weights, &rows[i]) + bias;
            if y * margin < 1.0 {
                for (w, v) in weights.iter_mut().zip(&rows[i]) {
                    *w -= settings.learning_rate * (settings.weight_decay * *w - y * v);
                }
                bias += settings.learning_rate * y;
            } else {
                for w in weights.iter_mut() {
                    *w -= settings.learning_rate * settings.weight_decay * *w;
                }
            }
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::DivergedTraining { epoch });
        }
    }
    Ok((weights, bias))
}

fn fit_mlp(
    rows: &[Vec<f64>],
    labels: &[u8],
    settings: &DetectorSettings,
    seed: u64,
) -> Result<TrainedModel> {
    let width = rows[0].len();
    let inputs: Vec<Tensor> = rows
        .iter()
        .map(|row| Tensor::new(vec![width], row.clone()))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = labels.iter().map(|&y| usize::from(y)).collect();
    let data = LabeledDataset::new(inputs, labels, 2)?;
    let spec = ModelSpec {
        name: "apc-detector-mlp".to_string(),
        input_shape: vec![width],
        layers: vec![
            LayerSpec::Dense {
                in_features: width,
                out_features: settings.hidden_width,
            },
            LayerSpec::ReLU,
            LayerSpec::Dense {
                in_features: settings.hidden_width,
                out_features: 2,
            },
            LayerSpec::Softmax,
        ],
    };
    let train_cfg = TrainConfig::new(settings.epochs, settings.learning_rate, settings.batch_size, seed)?;
    train_model(&spec, &data, &train_cfg)
}

/// Train a detector on a dataset whose rows are normalized with the dataset's
/// own statistics; those statistics are frozen into the returned model.
pub fn train_detector(
    dataset: &ApcDataset,
    kind: DetectorKind,
    seed: u64,
    settings: &DetectorSettings,
) -> Result<DetectorModel> {
    if dataset.len() < 10 {
        return Err(Error::InsufficientData {
            required: 10,
            got: dataset.len(),
        });
    }
    let (clean, adversarial) = dataset.class_counts();
    if clean == 0 || adversarial == 0 {
        return Err(Error::SingleClassDataset);
    }
    let rows: Vec<Vec<f64>> = dataset
        .features()
        .iter()
        .map(|f| dataset.stats().normalize(f.values()))
        .collect();
    let params = match kind {
        DetectorKind::LogisticRegression => {
            let (weights, bias) = fit_logistic_regression(&rows, dataset.labels(), settings)?;
            DetectorParams::LogisticRegression { weights, bias }
        }
        DetectorKind::LinearSvm => {
            let (weights, bias) = fit_linear_svm(&rows, dataset.labels(), settings, seed)?;
            DetectorParams::LinearSvm { weights, bias }
        }
        DetectorKind::Mlp => DetectorParams::Mlp {
            model: fit_mlp(&rows, dataset.labels(), settings, seed)?,
        },
    };
    Ok(DetectorModel {
        params,
        threshold: settings.threshold,
        layout: dataset.layout().to_vec(),
        stats: dataset.stats().clone(),
    })
}

/// Confusion-matrix summary of a detector run. Positive class = adversarial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_negatives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub true_positives: u64,
}

impl DetectionMetrics {
    /// Derive every rate from the four counts. Undefined ratios (empty
    /// denominators) report 0.
    pub fn from_confusion(
        true_negatives: u64,
        false_positives: u64,
        false_negatives: u64,
        true_positives: u64,
    ) -> DetectionMetrics {
        let total = true_negatives + false_positives + false_negatives + true_positives;
        let accuracy = if total == 0 {
            0.0
        } else {
            (true_negatives + true_positives) as f64 / total as f64
        };
        let predicted_positive = true_positives + false_positives;
        let precision = if predicted_positive == 0 {
            0.0
        } else {
            true_positives as f64 / predicted_positive as f64
        };
        let actual_positive = true_positives + false_negatives;
        let recall = if actual_positive == 0 {
            0.0
        } else {
            true_positives as f64 / actual_positive as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMetrics {
            accuracy,
            precision,
            recall,
            f1,
            true_negatives,
            false_positives,
            false_negatives,
            true_positives,
        }
    }
}

/// Score every row with the model's frozen normalization and threshold, then
/// summarize against the dataset's labels.
pub fn evaluate_detector(model: &DetectorModel, dataset: &ApcDataset) -> Result<DetectionMetrics> {
    if dataset.layout() != model.layout() {
        return Err(Error::LayoutMismatch {
            message: "dataset layout differs from the detector's".to_string(),
        });
    }
    let (mut tn, mut fp, mut fn_count, mut tp) = (0u64, 0u64, 0u64, 0u64);
    for (features, &label) in dataset.features().iter().zip(dataset.labels()) {
        let (_, flagged) = model.classify(features)?;
        match (label == 1, flagged) {
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_count += 1,
            (true, true) => tp += 1,
        }
    }
    Ok(DetectionMetrics::from_confusion(tn, fp, fn_count, tp))
}

/// What the monitor did about one input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertAction {
    None,
    Logged,
    Halted,
}

/// Detector verdict for one monitored input. `score` is absent when the item
/// errored before it could be scored; an action other than `None` is only
/// ever taken on a positive detection.
#[derive(Clone, Debug, PartialEq)]
pub struct Alert {
    pub input_id: String,
    pub is_adversarial: bool,
    pub score: Option<f64>,
    pub action_taken: AlertAction,
}

/// One monitored workload item: the model's prediction (absent if inference
/// failed), the alert, and the failure message when there was one.
#[derive(Clone, Debug)]
pub struct MonitorEvent {
    pub prediction: Option<usize>,
    pub alert: Alert,
    pub error: Option<String>,
}

/// Everything a monitoring pass produced. Under a halting policy the inputs
/// after the first detection are never inferred; their ids are reported here
/// rather than given fabricated alerts.
#[derive(Clone, Debug)]
pub struct MonitorReport {
    events: Vec<MonitorEvent>,
    unprocessed_ids: Vec<String>,
}

impl MonitorReport {
    pub fn events(&self) -> &[MonitorEvent] {
        &self.events
    }

    pub fn unprocessed_ids(&self) -> &[String] {
        &self.unprocessed_ids
    }

    pub fn halted(&self) -> bool {
        self.events
            .iter()
            .any(|e| e.alert.action_taken == AlertAction::Halted)
    }
}

/// How the monitor responds to a detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionPolicy {
    /// Record the detection and keep going.
    LogOnly,
    /// Stop the stream at the first detection.
    HaltOnDetect,
}

/// Run hooked inference over a workload, score each trace, and act per
/// policy. Per-item failures produce an unscored alert and never stop the
/// stream; only a positive detection can halt it.
pub fn infer_and_detect(
    target: &TrainedModel,
    detector: &DetectorModel,
    workload: &[(String, Tensor)],
    cfg: &CounterConfig,
    policy: DetectionPolicy,
) -> Result<MonitorReport> {
    let expected = counter_layout(cfg, target.spec().layers.len())?;
    if expected != detector.layout {
        return Err(Error::LayoutMismatch {
            message: "counter configuration does not produce the detector's feature layout"
                .to_string(),
        });
    }
    let mut memory = ApcMemory::new(workload.len().max(1))?;
    let mut events = Vec::with_capacity(workload.len());
    let mut unprocessed_ids = Vec::new();
    for (position, (input_id, input)) in workload.iter().enumerate() {
        let scored = hooked_inference(target, input, cfg, &mut memory, input_id).and_then(
            |((prediction, _), record)| {
                let features = build_feature_vector(&record, &detector.layout)?;
                let (score, flagged) = detector.classify(&features)?;
                Ok((prediction, score, flagged))
            },
        );
        match scored {
            Ok((prediction, score, flagged)) => {
                let action = match (flagged, policy) {
                    (false, _) => AlertAction::None,
                    (true, DetectionPolicy::LogOnly) => AlertAction::Logged,
                    (true, DetectionPolicy::HaltOnDetect) => AlertAction::Halted,
                };
                events.push(MonitorEvent {
                    prediction: Some(prediction),
                    alert: Alert {
                        input_id: input_id.clone(),
                        is_adversarial: flagged,
                        score: Some(score),
                        action_taken: action,
                    },
                    error: None,
                });
                if action == AlertAction::Halted {
                    unprocessed_ids
                        .extend(workload[position + 1..].iter().map(|(id, _)| id.clone()));
                    break;
                }
            }
            Err(e) => {
                events.push(MonitorEvent {
                    prediction: None,
                    alert: Alert {
                        input_id: input_id.clone(),
                        is_adversarial: false,
                        score: None,
                        action_taken: AlertAction::None,
                    },
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(MonitorReport {
        events,
        unprocessed_ids,
    })
}

#[derive(Serialize)]
struct AlertRow<'a> {
    input_id: &'a str,
    is_adversarial: bool,
    score: Option<f64>,
    action_taken: AlertAction,
    prediction: Option<usize>,
}

/// Write one JSON line per monitored item. Unprocessed inputs have no line;
/// they were never inferred, so there is no verdict to record.
pub fn write_alert_log(path: &Path, report: &MonitorReport) -> Result<()> {
    let mut out = String::new();
    for event in report.events() {
        let row = AlertRow {
            input_id: &event.alert.input_id,
            is_adversarial: event.alert.is_adversarial,
            score: event.alert.score,
            action_taken: event.alert.action_taken,
            prediction: event.prediction,
        };
        out.push_str(&serde_json::to_string(&row).expect("alert row serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn kind_tag(kind: DetectorKind) -> u8 {
    match kind {
        DetectorKind::LogisticRegression => 0,
        DetectorKind::LinearSvm => 1,
        DetectorKind::Mlp => 2,
    }
}

/// Serialize a detector: magic, version, kind tag, threshold, layout
/// descriptors, normalization arrays, then kind-specific parameters.
pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DETECTOR_MAGIC);
    out.extend_from_slice(&DETECTOR_FORMAT_VERSION.to_le_bytes());
    out.push(kind_tag(model.kind()));
    out.extend_from_slice(&model.threshold.to_le_bytes());
    let count = u32::try_from(model.layout.len())
        .map_err(|_| Error::invalid("feature layout exceeds the format limit"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for desc in &model.layout {
        let layer_index = u32::try_from(desc.layer_index)
            .map_err(|_| Error::invalid("layer index exceeds the format limit"))?;
        out.extend_from_slice(&layer_index.to_le_bytes());
        out.push(desc.metric.tag());
    }
    put_f64_slice(&mut out, model.stats.means());
    put_f64_slice(&mut out, model.stats.stds());
    match &model.params {
        DetectorParams::LogisticRegression { weights, bias }
        | DetectorParams::LinearSvm { weights, bias } => {
            out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
            put_f64_slice(&mut out, weights);
            out.extend_from_slice(&bias.to_le_bytes());
        }
        DetectorParams::Mlp { model: network } => {
            let bytes = model_to_bytes(network);
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_finite_slice(values: &[f64], what: &str, offset: u64) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format_at(format!("non-finite {what}"), offset));
    }
    Ok(())
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&raw);
    r.expect_magic(DETECTOR_MAGIC, "detector")?;
    r.expect_version(DETECTOR_FORMAT_VERSION)?;
    let kind_offset = r.offset();
    let kind = r.u8()?;
    let threshold_offset = r.offset();
    let threshold = r.f64_le()?;
    if !threshold.is_finite() || !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::format_at(
            "detector threshold outside (0, 1)",
            threshold_offset,
        ));
    }
    let count_offset = r.offset();
    let count = r.u32_le()? as usize;
    if count == 0 {
        return Err(Error::format_at("empty feature layout", count_offset));
    }
    let mut layout = Vec::with_capacity(count.min(4096));
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let layer_index = r.u32_le()? as usize;
        let tag_offset = r.offset();
        let tag = r.u8()?;
        let metric = MetricName::from_tag(tag)
            .ok_or_else(|| Error::format_at(format!("unknown metric tag {tag}"), tag_offset))?;
        if !seen.insert((layer_index, tag)) {
            return Err(Error::format_at(
                format!("duplicate feature descriptor (layer {layer_index}, {})", metric.name()),
                tag_offset,
            ));
        }
        layout.push(FeatureDescriptor {
            layer_index,
            metric,
        });
    }
    let means_offset = r.offset();
    let means = r.f64_vec(count)?;
    check_finite_slice(&means, "normalization means", means_offset)?;
    let stds_offset = r.offset();
    let stds = r.f64_vec(count)?;
    check_finite_slice(&stds, "normalization deviations", stds_offset)?;
    if stds.iter().any(|&s| s <= 0.0) {
        return Err(Error::format_at(
            "normalization deviations must be positive",
            stds_offset,
        ));
    }
    let params = match kind {
        0 | 1 => {
            let dim_offset = r.offset();
            let dim = r.u32_le()? as usize;
            if dim != count {
                return Err(Error::format_at(
                    format!("parameter dimension {dim} disagrees with layout length {count}"),
                    dim_offset,
                ));
            }
            let weights_offset = r.offset();
            let weights = r.f64_vec(dim)?;
            let bias = r.f64_le()?;
            check_finite_slice(&weights, "detector weights", weights_offset)?;
            if !bias.is_finite() {
                return Err(Error::format_at("non-finite detector bias", weights_offset));
            }
            if kind == 0 {
                DetectorParams::LogisticRegression { weights, bias }
            } else {
                DetectorParams::LinearSvm { weights, bias }
            }
        }
        2 => {
            let len = r.u32_le()? as usize;
            let model_offset = r.offset();
            let bytes = r.bytes(len)?;
            let network = model_from_bytes(bytes).map_err(|e| match e {
                Error::Format { message, offset } => Error::Format {
                    message,
                    offset: offset.map(|o| o + model_offset),
                },
                other => other,
            })?;
            if network.spec().input_shape != vec![count] || network.class_count() != 2 {
                return Err(Error::format_at(
                    "embedded detector network shape disagrees with the layout",
                    model_offset,
                ));
            }
            DetectorParams::Mlp { model: network }
        }
        t => {
            return Err(Error::format_at(
                format!("unknown detector kind tag {t}"),
                kind_offset,
            ))
        }
    };
    r.expect_end()?;
    Ok(DetectorModel {
        params,
        threshold,
        layout,
        stats: FeatureStats::from_parts(means, stds),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apc::TimingMode;
    use crate::attack::{attack_dataset, AttackConfig, AttackOutcome};

    fn single_metric_layout() -> Vec<FeatureDescriptor> {
        vec![FeatureDescriptor {
            layer_index: 0,
            metric: MetricName::AvgActivation,
        }]
    }

    /// 20 clean rows at -1 and 20 adversarial rows at +1 on one feature.
    fn separable_dataset() -> ApcDataset {
        let layout = single_metric_layout();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let label = (i % 2) as u8;
            let value = if label == 0 { -1.0 } else { 1.0 };
            features.push(FeatureVector::new(vec![value], layout.clone()).unwrap());
            labels.push(label);
        }
        ApcDataset::from_rows(features, labels).unwrap()
    }

    fn blobs_dataset(n: usize, spread: f64, seed: u64) -> LabeledDataset {
        let mut rng = SplitMix64::new(seed);
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let x = sign + spread * rng.gaussian();
            let y = sign + spread * rng.gaussian();
            inputs.push(Tensor::from_flat(vec![x, y]).unwrap());
            labels.push(class);
        }
        LabeledDataset::new(inputs, labels, 2).unwrap()
    }

    fn blobs_target(seed: u64) -> TrainedModel {
        let spec = ModelSpec {
            name: "blobs-mlp".to_string(),
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense {
                    in_features: 2,
                    out_features: 8,
                },
                LayerSpec::ReLU,
                LayerSpec::Dense {
                    in_features: 8,
                    out_features: 2,
                },
                LayerSpec::Softmax,
            ],
        };
        let data = blobs_dataset(200, 0.4, seed);
        let cfg = TrainConfig::new(40, 0.1, 16, seed).unwrap();
        train_model(&spec, &data, &cfg).unwrap()
    }

    fn capture_records(
        model: &TrainedModel,
        inputs: &[Tensor],
        cfg: &CounterConfig,
        prefix: &str,
    ) -> Vec<TraceRecord> {
        let mut memory = ApcMemory::new(inputs.len().max(1)).unwrap();
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let (_, record) =
                    hooked_inference(model, x, cfg, &mut memory, &format!("{prefix}-{i:04}"))
                        .unwrap();
                record
            })
            .collect()
    }

    /// Attack a fresh test set and return (clean inputs, adversarial inputs)
    /// for the samples where the label actually flipped.
    fn attacked_pairs(model: &TrainedModel, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
        let test = blobs_dataset(200, 0.4, seed);
        let (outcomes, _) = attack_dataset(model, &test, &AttackConfig::default()).unwrap();
        let mut clean = Vec::new();
        let mut adversarial = Vec::new();
        for outcome in outcomes {
            if let AttackOutcome::Attacked(result) = outcome {
                if result.succeeded {
                    clean.push(result.original_input.clone());
                    adversarial.push(result.adversarial_input.clone());
                }
            }
        }
        (clean, adversarial)
    }

    #[test]
    fn metric_tags_round_trip() {
        for metric in METRIC_ORDER {
            assert_eq!(MetricName::from_tag(metric.tag()), Some(metric));
        }
        assert_eq!(MetricName::from_tag(9), None);
    }

    #[test]
    fn feature_extraction_is_identity() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let record = capture_records(&model, &[Tensor::from_flat(vec![1.0, 1.0]).unwrap()], &cfg, "x")
            .remove(0);
        let layout = vec![
            FeatureDescriptor {
                layer_index: 0,
                metric: MetricName::Sparsity,
            },
            FeatureDescriptor {
                layer_index: 3,
                metric: MetricName::Entropy,
            },
        ];
        let features = build_feature_vector(&record, &layout).unwrap();
        assert_eq!(features.values().len(), 2);
        assert_eq!(features.values()[0], record.layers[0].sparsity.unwrap());
        assert_eq!(features.values()[1], record.layers[3].entropy.unwrap());
    }

    #[test]
    fn tampered_record_is_rejected() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let mut record = capture_records(
            &model,
            &[Tensor::from_flat(vec![1.0, 1.0]).unwrap()],
            &cfg,
            "x",
        )
        .remove(0);
        record.layers[0].sparsity = Some(0.123);
        let err = build_feature_vector(&record, &record_layout(&record)).unwrap_err();
        assert!(matches!(err, Error::IntegrityError { .. }));
    }

    #[test]
    fn absent_metric_is_an_error_not_a_default() {
        let model = blobs_target(7);
        let cfg = CounterConfig::new(
            [MetricFamily::Sparsity],
            None,
            TimingMode::Deterministic,
        )
        .unwrap();
        let record = capture_records(
            &model,
            &[Tensor::from_flat(vec![1.0, 1.0]).unwrap()],
            &cfg,
            "x",
        )
        .remove(0);
        let err = build_feature_vector(
            &record,
            &[FeatureDescriptor {
                layer_index: 1,
                metric: MetricName::Entropy,
            }],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::MissingMetric {
                layer_index: 1,
                metric: "entropy"
            }
        ));
    }

    #[test]
    fn record_and_counter_layouts_agree() {
        let model = blobs_target(7);
        for cfg in [
            CounterConfig::all_families(TimingMode::Deterministic),
            CounterConfig::new(
                [MetricFamily::Sparsity, MetricFamily::Entropy, MetricFamily::Tops],
                Some(vec![0, 3]),
                TimingMode::Deterministic,
            )
            .unwrap(),
        ] {
            let record = capture_records(
                &model,
                &[Tensor::from_flat(vec![1.0, 1.0]).unwrap()],
                &cfg,
                "x",
            )
            .remove(0);
            let derived = counter_layout(&cfg, model.spec().layers.len()).unwrap();
            assert_eq!(record_layout(&record), derived);
        }
    }

    #[test]
    fn full_layout_length_is_layers_times_metrics() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let record = capture_records(
            &model,
            &[Tensor::from_flat(vec![1.0, 1.0]).unwrap()],
            &cfg,
            "x",
        )
        .remove(0);
        // 4 layers, 9 per-layer metrics each; throughput is record-level and
        // never part of a layout.
        assert_eq!(record_layout(&record).len(), 4 * 9);
    }

    #[test]
    fn counter_layout_rejects_out_of_range_include_list() {
        let cfg = CounterConfig::new(
            MetricFamily::ALL,
            Some(vec![0, 6]),
            TimingMode::Deterministic,
        )
        .unwrap();
        assert!(counter_layout(&cfg, 4).is_err());
    }

    #[test]
    fn dataset_labels_clean_then_adversarial() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(5, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &cfg, "r");
        let dataset = build_dataset(&records[..3], &records[3..]).unwrap();
        assert_eq!(dataset.len(), 5);
        assert_eq!(dataset.labels(), &[0, 0, 0, 1, 1]);
    }

    #[test]
    fn mixed_layouts_rejected() {
        let model = blobs_target(7);
        let full = CounterConfig::all_families(TimingMode::Deterministic);
        let partial = CounterConfig::new(
            [MetricFamily::Sparsity],
            None,
            TimingMode::Deterministic,
        )
        .unwrap();
        let x = vec![Tensor::from_flat(vec![1.0, 1.0]).unwrap()];
        let a = capture_records(&model, &x, &full, "a");
        let b = capture_records(&model, &x, &partial, "b");
        let err = build_dataset(&[a[0].clone(), b[0].clone()], &a).unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch { .. }));
    }

    #[test]
    fn constant_feature_std_clamps_to_one_and_zscores_center() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(12, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &cfg, "r");
        let dataset = build_dataset(&records[..6], &records[6..]).unwrap();
        // Layer costs depend only on shapes, so the flops column is constant.
        let flops_slot = dataset
            .layout()
            .iter()
            .position(|d| d.layer_index == 0 && d.metric == MetricName::Flops)
            .unwrap();
        assert_eq!(dataset.stats().stds()[flops_slot], 1.0);
        for slot in 0..dataset.layout().len() {
            let mean_z: f64 = dataset
                .features()
                .iter()
                .map(|f| {
                    (f.values()[slot] - dataset.stats().means()[slot])
                        / dataset.stats().stds()[slot]
                })
                .sum::<f64>()
                / dataset.len() as f64;
            assert!(mean_z.abs() <= 1e-9, "slot {slot} mean {mean_z}");
        }
    }

    #[test]
    fn stratified_split_keeps_class_proportions() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(40, 0.4, 3).inputs().to_vec();
        let clean = capture_records(&model, &points[..20], &cfg, "clean");
        let adv = capture_records(&model, &points[20..], &cfg, "adv");
        let split = stratified_split(&clean, &adv, 0.2, 11).unwrap();
        assert_eq!(split.train_clean.len(), 16);
        assert_eq!(split.test_clean.len(), 4);
        assert_eq!(split.train_adversarial.len(), 16);
        assert_eq!(split.test_adversarial.len(), 4);
        // Same seed, same partition; the split is a pure function of its inputs.
        let again = stratified_split(&clean, &adv, 0.2, 11).unwrap();
        assert_eq!(again.train_clean, split.train_clean);
        assert_eq!(again.test_adversarial, split.test_adversarial);
        // Every record lands on exactly one side.
        let mut ids: Vec<&str> = split
            .train_clean
            .iter()
            .chain(&split.test_clean)
            .map(|r| r.input_id.as_str())
            .collect();
        ids.sort_unstable();
        let mut expected: Vec<&str> = clean.iter().map(|r| r.input_id.as_str()).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected);
    }

    #[test]
    fn separable_features_reach_perfect_training_accuracy_for_every_kind() {
        let dataset = separable_dataset();
        for kind in [
            DetectorKind::LogisticRegression,
            DetectorKind::LinearSvm,
            DetectorKind::Mlp,
        ] {
            let settings = DetectorSettings::defaults_for(kind);
            let detector = train_detector(&dataset, kind, 5, &settings).unwrap();
            let metrics = evaluate_detector(&detector, &dataset).unwrap();
            assert_eq!(metrics.accuracy, 1.0, "{kind:?}");
            assert_eq!(metrics.false_positives, 0, "{kind:?}");
            assert_eq!(metrics.false_negatives, 0, "{kind:?}");
        }
    }

    #[test]
    fn single_class_labels_rejected() {
        let layout = single_metric_layout();
        let features: Vec<FeatureVector> = (0..20)
            .map(|i| FeatureVector::new(vec![i as f64], layout.clone()).unwrap())
            .collect();
        let dataset = ApcDataset::from_rows(features, vec![0; 20]).unwrap();
        let err = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingleClassDataset));
    }

    #[test]
    fn too_few_samples_rejected() {
        let layout = single_metric_layout();
        let features: Vec<FeatureVector> = (0..8)
            .map(|i| FeatureVector::new(vec![i as f64], layout.clone()).unwrap())
            .collect();
        let dataset = ApcDataset::from_rows(features, vec![0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let err = train_detector(
            &dataset,
            DetectorKind::Mlp,
            0,
            &DetectorSettings::defaults_for(DetectorKind::Mlp),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientData {
                required: 10,
                got: 8
            }
        ));
    }

    #[test]
    fn training_is_deterministic_per_kind() {
        let dataset = separable_dataset();
        for kind in [
            DetectorKind::LogisticRegression,
            DetectorKind::LinearSvm,
            DetectorKind::Mlp,
        ] {
            let settings = DetectorSettings::defaults_for(kind);
            let a = train_detector(&dataset, kind, 9, &settings).unwrap();
            let b = train_detector(&dataset, kind, 9, &settings).unwrap();
            let probe = FeatureVector::new(vec![0.37], single_metric_layout()).unwrap();
            assert_eq!(
                a.score(&probe).unwrap().to_bits(),
                b.score(&probe).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let dataset = separable_dataset();
        let mut rng = SplitMix64::new(3);
        for kind in [
            DetectorKind::LogisticRegression,
            DetectorKind::LinearSvm,
            DetectorKind::Mlp,
        ] {
            let detector =
                train_detector(&dataset, kind, 1, &DetectorSettings::defaults_for(kind)).unwrap();
            for _ in 0..50 {
                let v = FeatureVector::new(
                    vec![rng.uniform(-1e3, 1e3)],
                    single_metric_layout(),
                )
                .unwrap();
                let score = detector.score(&v).unwrap();
                assert!((0.0..=1.0).contains(&score), "{kind:?} score {score}");
            }
        }
    }

    #[test]
    fn logistic_score_matches_frozen_statistics_by_hand() {
        let dataset = separable_dataset();
        let detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let raw = 0.4;
        let z = (raw - detector.stats().means()[0]) / detector.stats().stds()[0];
        let DetectorParams::LogisticRegression { weights, bias } = &detector.params else {
            panic!("wrong params kind");
        };
        let expected = sigmoid(weights[0] * z + bias);
        let v = FeatureVector::new(vec![raw], single_metric_layout()).unwrap();
        assert_eq!(detector.score(&v).unwrap(), expected);
    }

    #[test]
    fn degenerate_detector_scores_half_on_balanced_data() {
        let dataset = separable_dataset();
        let mut detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        // Force a constant negative verdict.
        detector.params = DetectorParams::LogisticRegression {
            weights: vec![0.0],
            bias: -50.0,
        };
        let metrics = evaluate_detector(&detector, &dataset).unwrap();
        assert_eq!(metrics.accuracy, 0.5);
        assert_eq!(metrics.recall, 0.0);
        assert_eq!(metrics.precision, 0.0);
        assert_eq!(metrics.f1, 0.0);
        assert_eq!(metrics.true_positives, 0);
        assert_eq!(metrics.false_positives, 0);
    }

    #[test]
    fn metrics_recompute_from_confusion_counts() {
        let m = DetectionMetrics::from_confusion(13, 4, 2, 21);
        let again = DetectionMetrics::from_confusion(
            m.true_negatives,
            m.false_positives,
            m.false_negatives,
            m.true_positives,
        );
        assert!((m.accuracy - again.accuracy).abs() <= 1e-12);
        assert!((m.f1 - again.f1).abs() <= 1e-12);
        assert!((m.accuracy - 34.0 / 40.0).abs() <= 1e-12);
        let p = 21.0 / 25.0;
        let r = 21.0 / 23.0;
        assert!((m.f1 - 2.0 * p * r / (p + r)).abs() <= 1e-12);
    }

    #[test]
    fn raising_the_threshold_never_adds_positives() {
        let dataset = separable_dataset();
        let base = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let mut last_positives = u64::MAX;
        for threshold in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let mut detector = base.clone();
            detector.threshold = threshold;
            let m = evaluate_detector(&detector, &dataset).unwrap();
            let positives = m.true_positives + m.false_positives;
            assert!(positives <= last_positives);
            last_positives = positives;
        }
    }

    #[test]
    fn evaluation_rejects_foreign_layout() {
        let dataset = separable_dataset();
        let detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let other_layout = vec![FeatureDescriptor {
            layer_index: 2,
            metric: MetricName::Entropy,
        }];
        let features: Vec<FeatureVector> = (0..10)
            .map(|i| FeatureVector::new(vec![i as f64], other_layout.clone()).unwrap())
            .collect();
        let other = ApcDataset::from_rows(features, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        assert!(matches!(
            evaluate_detector(&detector, &other),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    /// End-to-end: train the blobs target, run the attack, capture traces for
    /// the surviving pairs, split, train a logistic detector, and check the
    /// held-out accuracy floor. The recorded value pins the whole pipeline.
    #[test]
    fn blobs_pipeline_detector_reaches_baseline() {
        let model = blobs_target(42);
        let (clean_inputs, adv_inputs) = attacked_pairs(&model, 43);
        assert!(clean_inputs.len() >= 180, "attack mostly succeeds on blobs");
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let clean = capture_records(&model, &clean_inputs, &cfg, "clean");
        let adv = capture_records(&model, &adv_inputs, &cfg, "adv");
        let split = stratified_split(&clean, &adv, 0.2, 42).unwrap();
        let train = build_dataset(&split.train_clean, &split.train_adversarial).unwrap();
        let test = build_dataset(&split.test_clean, &split.test_adversarial).unwrap();
        let detector = train_detector(
            &train,
            DetectorKind::LogisticRegression,
            42,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let metrics = evaluate_detector(&detector, &test).unwrap();
        assert!(metrics.accuracy >= 0.85, "accuracy {}", metrics.accuracy);
        // Recorded from the first run of this pipeline; drift beyond noise
        // means something upstream changed behavior.
        let recorded = 0.9625;
        assert!(
            (metrics.accuracy - recorded).abs() <= 0.02,
            "accuracy {} drifted from recorded {recorded}",
            metrics.accuracy
        );
    }

    #[test]
    fn streaming_and_batch_decisions_agree() {
        let model = blobs_target(42);
        let (clean_inputs, adv_inputs) = attacked_pairs(&model, 43);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let clean = capture_records(&model, &clean_inputs, &cfg, "clean");
        let adv = capture_records(&model, &adv_inputs, &cfg, "adv");
        let split = stratified_split(&clean, &adv, 0.2, 42).unwrap();
        let train = build_dataset(&split.train_clean, &split.train_adversarial).unwrap();
        let detector = train_detector(
            &train,
            DetectorKind::LogisticRegression,
            42,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();

        // 50 clean + 50 adversarial inputs as a live workload.
        let mut workload = Vec::new();
        let mut truth = Vec::new();
        for (i, x) in clean_inputs.iter().take(50).enumerate() {
            workload.push((format!("w-clean-{i:02}"), x.clone()));
            truth.push(false);
        }
        for (i, x) in adv_inputs.iter().take(50).enumerate() {
            workload.push((format!("w-adv-{i:02}"), x.clone()));
            truth.push(true);
        }
        let report =
            infer_and_detect(&model, &detector, &workload, &cfg, DetectionPolicy::LogOnly)
                .unwrap();
        assert_eq!(report.events().len(), workload.len());
        assert!(report.unprocessed_ids().is_empty());
        let stream_correct = report
            .events()
            .iter()
            .zip(&truth)
            .filter(|(e, &t)| e.alert.is_adversarial == t)
            .count();

        // The same inputs through the batch path.
        let clean_records = capture_records(&model, &clean_inputs[..50], &cfg, "w-clean");
        let adv_records = capture_records(&model, &adv_inputs[..50], &cfg, "w-adv");
        let eval = build_dataset(&clean_records, &adv_records).unwrap();
        let metrics = evaluate_detector(&detector, &eval).unwrap();
        let batch_correct = (metrics.true_negatives + metrics.true_positives) as usize;
        assert!(
            stream_correct.abs_diff(batch_correct) <= 1,
            "stream {stream_correct} batch {batch_correct}"
        );
    }

    #[test]
    fn empty_workload_yields_empty_report() {
        let model = blobs_target(7);
        let dataset = {
            let cfg = CounterConfig::all_families(TimingMode::Deterministic);
            let points: Vec<Tensor> = blobs_dataset(20, 0.4, 3).inputs().to_vec();
            let records = capture_records(&model, &points, &cfg, "r");
            build_dataset(&records[..10], &records[10..]).unwrap()
        };
        let detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let report =
            infer_and_detect(&model, &detector, &[], &cfg, DetectionPolicy::LogOnly).unwrap();
        assert!(report.events().is_empty());
        assert!(report.unprocessed_ids().is_empty());
        assert!(!report.halted());
    }

    #[test]
    fn clean_input_with_confident_detector_takes_no_action() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(20, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &cfg, "r");
        let dataset = build_dataset(&records[..10], &records[10..]).unwrap();
        let mut detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        // A detector that never fires, regardless of features.
        detector.params = DetectorParams::LogisticRegression {
            weights: vec![0.0; detector.layout.len()],
            bias: -50.0,
        };
        let workload = vec![("only".to_string(), points[0].clone())];
        let report =
            infer_and_detect(&model, &detector, &workload, &cfg, DetectionPolicy::LogOnly)
                .unwrap();
        let event = &report.events()[0];
        assert!(!event.alert.is_adversarial);
        assert_eq!(event.alert.action_taken, AlertAction::None);
        assert!(event.alert.score.unwrap() < 1e-9);
        assert!(event.prediction.is_some());
    }

    #[test]
    fn halt_policy_stops_at_first_detection() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(20, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &cfg, "r");
        let dataset = build_dataset(&records[..10], &records[10..]).unwrap();
        let mut detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        // A detector that always fires.
        detector.params = DetectorParams::LogisticRegression {
            weights: vec![0.0; detector.layout.len()],
            bias: 50.0,
        };
        let workload: Vec<(String, Tensor)> = points[..3]
            .iter()
            .enumerate()
            .map(|(i, x)| (format!("item-{i}"), x.clone()))
            .collect();
        let report = infer_and_detect(
            &model,
            &detector,
            &workload,
            &cfg,
            DetectionPolicy::HaltOnDetect,
        )
        .unwrap();
        assert_eq!(report.events().len(), 1);
        assert_eq!(report.events()[0].alert.action_taken, AlertAction::Halted);
        assert_eq!(report.unprocessed_ids(), &["item-1", "item-2"]);
        assert!(report.halted());
    }

    #[test]
    fn per_item_failure_logs_unscored_alert_and_continues() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(20, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &cfg, "r");
        let dataset = build_dataset(&records[..10], &records[10..]).unwrap();
        let detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let workload = vec![
            ("good-0".to_string(), points[0].clone()),
            ("bad".to_string(), Tensor::from_flat(vec![1.0, 2.0, 3.0]).unwrap()),
            ("good-1".to_string(), points[1].clone()),
        ];
        let report =
            infer_and_detect(&model, &detector, &workload, &cfg, DetectionPolicy::LogOnly)
                .unwrap();
        assert_eq!(report.events().len(), 3);
        let bad = &report.events()[1];
        assert_eq!(bad.alert.input_id, "bad");
        assert!(bad.alert.score.is_none());
        assert!(!bad.alert.is_adversarial);
        assert!(bad.prediction.is_none());
        assert!(bad.error.as_deref().unwrap().contains("shape"));
        assert!(report.events()[2].alert.score.is_some());
    }

    #[test]
    fn monitor_rejects_mismatched_counter_configuration() {
        let model = blobs_target(7);
        let full = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(20, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &full, "r");
        let dataset = build_dataset(&records[..10], &records[10..]).unwrap();
        let detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let narrow = CounterConfig::new(
            [MetricFamily::Sparsity],
            None,
            TimingMode::Deterministic,
        )
        .unwrap();
        let err = infer_and_detect(&model, &detector, &[], &narrow, DetectionPolicy::LogOnly)
            .unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch { .. }));
    }

    #[test]
    fn alert_log_lines_carry_the_fixed_fields() {
        let model = blobs_target(7);
        let cfg = CounterConfig::all_families(TimingMode::Deterministic);
        let points: Vec<Tensor> = blobs_dataset(20, 0.4, 3).inputs().to_vec();
        let records = capture_records(&model, &points, &cfg, "r");
        let dataset = build_dataset(&records[..10], &records[10..]).unwrap();
        let detector = train_detector(
            &dataset,
            DetectorKind::LogisticRegression,
            0,
            &DetectorSettings::defaults_for(DetectorKind::LogisticRegression),
        )
        .unwrap();
        let workload = vec![
            ("w-0".to_string(), points[0].clone()),
            ("w-1".to_string(), points[1].clone()),
        ];
        let report =
            infer_and_detect(&model, &detector, &workload, &cfg, DetectionPolicy::LogOnly)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alerts.jsonl");
        write_alert_log(&path, &report).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed["input_id"], "w-0");
        assert!(parsed["is_adversarial"].is_boolean());
        assert!(parsed["score"].is_number());
        assert!(parsed["action_taken"].is_string());
        assert!(parsed["prediction"].is_number());
        let id_pos = lines[0].find("input_id").unwrap();
        let adv_pos = lines[0].find("is_adversarial").unwrap();
        let score_pos = lines[0].find("score").unwrap();
        let action_pos = lines[0].find("action_taken").unwrap();
        let pred_pos = lines[0].find("prediction").unwrap();
        assert!(id_pos < adv_pos && adv_pos < score_pos);
        assert!(score_pos < action_pos && action_pos < pred_pos);
    }

    #[test]
    fn detector_files_round_trip_for_every_kind() {
        let dataset = separable_dataset();
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SplitMix64::new(8);
        for kind in [
            DetectorKind::LogisticRegression,
            DetectorKind::LinearSvm,
            DetectorKind::Mlp,
        ] {
            let detector =
                train_detector(&dataset, kind, 4, &DetectorSettings::defaults_for(kind)).unwrap();
            let path = dir.path().join(format!("{kind:?}.apcd"));
            save_detector(&detector, &path).unwrap();
            let loaded = load_detector(&path).unwrap();
            assert_eq!(loaded.kind(), kind);
            assert_eq!(loaded.threshold(), detector.threshold());
            assert_eq!(loaded.layout(), detector.layout());
            assert_eq!(loaded.stats(), detector.stats());
            for _ in 0..20 {
                let v = FeatureVector::new(
                    vec![rng.uniform(-5.0, 5.0)],
                    single_metric_layout(),
                )
                .unwrap();
                assert_eq!(
                    detector.score(&v).unwrap().to_bits(),
                    loaded.score(&v).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn detector_file_truncations_all_rejected() {
        let dataset = separable_dataset();
        let detector = train_detector(
            &dataset,
            DetectorKind::Mlp,
            4,
            &DetectorSettings::defaults_for(DetectorKind::Mlp),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.apcd");
        save_detector(&detector, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(load_detector(&path).is_err(), "prefix of {cut} bytes loaded");
        }
    }

    #[test]
    fn detector_file_structural_corruption_rejected() {
        let dataset = separable_dataset();
        let detector = train_detector(
            &dataset,
            DetectorKind::LinearSvm,
            4,
            &DetectorSettings::defaults_for(DetectorKind::LinearSvm),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.apcd");
        save_detector(&detector, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_detector(&path).unwrap_err().to_string().contains("magic"));

        let mut bad_kind = good.clone();
        bad_kind[6] = 9;
        fs::write(&path, &bad_kind).unwrap();
        assert!(load_detector(&path)
            .unwrap_err()
            .to_string()
            .contains("kind tag"));

        // Offset 6 kind, 7..15 threshold, 15..19 count, 19..23 layer index,
        // 23 metric tag.
        let mut bad_metric = good.clone();
        bad_metric[23] = 77;
        fs::write(&path, &bad_metric).unwrap();
        assert!(load_detector(&path)
            .unwrap_err()
            .to_string()
            .contains("metric tag"));

        // Zero out the single std (count = 1): it sits right after the mean.
        let mut bad_std = good.clone();
        let std_at = 24 + 8;
        bad_std[std_at..std_at + 8].copy_from_slice(&0.0f64.to_le_bytes());
        fs::write(&path, &bad_std).unwrap();
        assert!(load_detector(&path)
            .unwrap_err()
            .to_string()
            .contains("positive"));

        let mut bad_threshold = good.clone();
        bad_threshold[7..15].copy_from_slice(&1.5f64.to_le_bytes());
        fs::write(&path, &bad_threshold).unwrap();
        assert!(load_detector(&path)
            .unwrap_err()
            .to_string()
            .contains("threshold"));

        let mut trailing = good;
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        assert!(load_detector(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }
}
