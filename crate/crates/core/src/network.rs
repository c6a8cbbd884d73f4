//! Model definition, mini-batch SGD training, prediction, and weight
//! persistence for the desk-scale networks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, forward, softmax_cross_entropy, GradientTape};
use crate::error::{Error, Result};
use crate::layers::{init_layer_params, softmax, LayerParams, LayerSpec};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wire::{put_f64_slice, ByteReader};

const MODEL_MAGIC: &[u8; 4] = b"APCM";
const MODEL_FORMAT_VERSION: u16 = 1;

/// Architecture of a network: named layer stack plus the input shape it
/// expects. Loadable from JSON (`{"name", "input_shape", "layers"}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Chain shapes through every layer, verifying the stack is coherent.
    /// Returns each layer's output shape in order.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("model input shape has a zero dimension"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for layer in &self.layers {
            layer.validate()?;
            current = layer.output_shape(&current)?;
            shapes.push(current.clone());
        }
        let last = shapes.last().unwrap();
        if last.len() != 1 {
            return Err(Error::invalid(
                "final layer must produce a 1-D class-score vector",
            ));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_output_shapes().map(|_| ())
    }

    /// Number of classes: length of the final score vector.
    pub fn class_count(&self) -> Result<usize> {
        Ok(self.layer_output_shapes()?.last().unwrap()[0])
    }

    /// Index one past the last logit-producing layer: the full stack, minus a
    /// trailing Softmax if present. Training and gradient-based attacks work
    /// on this prefix.
    pub fn logits_layer_count(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }
}

/// Training hyperparameters. Constructed through `new`, which rejects zero
/// epochs, zero batch size, and non-positive learning rates.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, batch_size: usize, seed: u64) -> Result<TrainConfig> {
        if epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be a positive finite number"));
        }
        Ok(TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            seed,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Inputs paired with integer class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<LabeledDataset> {
        if inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::InsufficientData { required: 1, got: 0 });
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        let shape = inputs[0].shape().to_vec();
        for t in &inputs[1..] {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    got: t.shape().to_vec(),
                    context: "dataset inputs must share a shape",
                });
            }
        }
        for &label in &labels {
            if label >= class_count {
                return Err(Error::LabelOutOfRange { label, class_count });
            }
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    /// New dataset holding the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::InsufficientData { required: 1, got: 0 });
        }
        LabeledDataset::new(
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }
}

/// Loss curve recorded during training: mean per-sample loss for each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// A spec plus trained weights. Immutable once built; the training summary is
/// present only on freshly trained models (it is not persisted).
#[derive(Clone, Debug)]
pub struct TrainedModel {
    spec: ModelSpec,
    weights: Vec<LayerParams>,
    training_summary: Option<TrainingSummary>,
}

impl TrainedModel {
    /// Assemble from parts, revalidating the spec/weight pairing.
    pub fn from_parts(
        spec: ModelSpec,
        weights: Vec<LayerParams>,
        training_summary: Option<TrainingSummary>,
    ) -> Result<TrainedModel> {
        spec.validate()?;
        if weights.len() != spec.layers.len() {
            return Err(Error::invalid(format!(
                "{} weight sets for {} layers",
                weights.len(),
                spec.layers.len()
            )));
        }
        for (spec_layer, params) in spec.layers.iter().zip(&weights) {
            let expected = LayerParams::zeros_like_spec(spec_layer);
            let matches = match (&expected, params) {
                (LayerParams::Empty, LayerParams::Empty) => true,
                (
                    LayerParams::Dense { weight: ew, bias: eb },
                    LayerParams::Dense { weight, bias },
                )
                | (
                    LayerParams::Conv { weight: ew, bias: eb },
                    LayerParams::Conv { weight, bias },
                ) => ew.shape() == weight.shape() && eb.shape() == bias.shape(),
                _ => false,
            };
            if !matches {
                return Err(Error::invalid(format!(
                    "weight shapes do not match {} layer",
                    spec_layer.kind_name()
                )));
            }
            if !params.all_finite() {
                return Err(Error::NonFinite {
                    context: "model weights",
                });
            }
        }
        Ok(TrainedModel {
            spec,
            weights,
            training_summary,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[LayerParams] {
        &self.weights
    }

    pub fn training_summary(&self) -> Option<&TrainingSummary> {
        self.training_summary.as_ref()
    }

    pub fn class_count(&self) -> usize {
        self.spec
            .class_count()
            .expect("spec validated at construction")
    }

    /// The logit-producing prefix of the stack (full stack minus a trailing
    /// Softmax).
    pub fn logits_stack(&self) -> (&[LayerSpec], &[LayerParams]) {
        let n = self.spec.logits_layer_count();
        (&self.spec.layers[..n], &self.weights[..n])
    }
}

/// Mini-batch SGD over softmax cross-entropy.
///
/// Weight init draws first from the seeded generator, then each epoch
/// reshuffles sample order with the same generator, so the whole run is a
/// pure function of (spec, data, cfg). Gradients are averaged within a batch;
/// batch_size=1 recovers plain per-sample SGD.
pub fn train_model(spec: &ModelSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    spec.validate()?;
    if data.input_shape() != spec.input_shape {
        return Err(Error::ShapeMismatch {
            expected: spec.input_shape.clone(),
            got: data.input_shape().to_vec(),
            context: "training inputs",
        });
    }
    let class_count = spec.class_count()?;
    if data.class_count() != class_count {
        return Err(Error::invalid(format!(
            "dataset has {} classes but model produces {class_count} scores",
            data.class_count()
        )));
    }

    let mut rng = SplitMix64::new(cfg.seed());
    let mut weights: Vec<LayerParams> = spec
        .layers
        .iter()
        .map(|l| init_layer_params(l, &mut rng))
        .collect();

    // Loss is computed on raw logits; a trailing Softmax layer carries no
    // parameters and is skipped during training.
    let logits_len = spec.logits_layer_count();
    let logits_specs = &spec.layers[..logits_len];

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut tape = GradientTape::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs());

    for epoch in 1..=cfg.epochs() {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size()) {
            let mut grad_acc: Vec<LayerParams> = logits_specs
                .iter()
                .map(LayerParams::zeros_like_spec)
                .collect();
            for &idx in batch {
                let outputs = forward(
                    logits_specs,
                    &weights[..logits_len],
                    &data.inputs()[idx],
                    Some(&mut tape),
                )
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::DivergedTraining { epoch },
                    other => other,
                })?;
                let (loss, loss_grad) =
                    softmax_cross_entropy(outputs.last().unwrap(), data.labels()[idx])?;
                if !loss.is_finite() {
                    return Err(Error::DivergedTraining { epoch });
                }
                loss_sum += loss;
                let grads = backward(logits_specs, &weights[..logits_len], &tape, &loss_grad)?;
                for (acc, g) in grad_acc.iter_mut().zip(&grads.layers) {
                    acc.add_assign(g);
                }
            }
            let step = cfg.learning_rate() / batch.len() as f64;
            for (w, g) in weights[..logits_len].iter_mut().zip(&grad_acc) {
                w.step(g, step);
            }
        }
        let mean_loss = loss_sum / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        epoch_losses.push(mean_loss);
    }

    if weights.iter().any(|w| !w.all_finite()) {
        return Err(Error::DivergedTraining { epoch: cfg.epochs() });
    }
    let summary = TrainingSummary {
        final_loss: *epoch_losses.last().unwrap(),
        epoch_losses,
    };
    TrainedModel::from_parts(spec.clone(), weights, Some(summary))
}

/// Turn the final layer's output into (argmax class, probability vector).
/// Shared by plain and hooked inference so both produce bit-identical
/// predictions from the same stack output.
pub(crate) fn prediction_from_final(spec: &ModelSpec, last: &Tensor) -> (usize, Vec<f64>) {
    let probs = match spec.layers.last() {
        Some(LayerSpec::Softmax) => last.data().to_vec(),
        _ => softmax(last.data()),
    };
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs)
}

/// Class prediction: argmax of the probability vector, ties broken toward the
/// lower class index. Models ending in Softmax already emit probabilities;
/// otherwise the final scores are passed through softmax here.
pub fn predict(model: &TrainedModel, input: &Tensor) -> Result<(usize, Vec<f64>)> {
    if input.shape() != model.spec.input_shape {
        return Err(Error::ShapeMismatch {
            expected: model.spec.input_shape.clone(),
            got: input.shape().to_vec(),
            context: "predict input",
        });
    }
    let outputs = forward(&model.spec.layers, &model.weights, input, None)?;
    Ok(prediction_from_final(&model.spec, outputs.last().unwrap()))
}

/// Raw class scores: forward through the logit-producing prefix only.
pub fn logits(model: &TrainedModel, input: &Tensor) -> Result<Tensor> {
    let (specs, weights) = model.logits_stack();
    let outputs = forward(specs, weights, input, None)?;
    Ok(outputs.into_iter().last().unwrap())
}

fn weight_blocks(params: &LayerParams) -> Vec<&Tensor> {
    match params {
        LayerParams::Empty => vec![],
        LayerParams::Dense { weight, bias } | LayerParams::Conv { weight, bias } => {
            vec![weight, bias]
        }
    }
}

/// Serialize a trained model: magic, format version, spec JSON, then raw
/// weight arrays in layer order (weight matrix before bias for each
/// parameterized layer). The training summary is not persisted.
pub(crate) fn model_to_bytes(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    let spec_json = serde_json::to_vec(&model.spec).expect("spec serializes");
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    for params in &model.weights {
        for block in weight_blocks(params) {
            put_f64_slice(&mut out, block.data());
        }
    }
    out
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub(crate) fn model_from_bytes(raw: &[u8]) -> Result<TrainedModel> {
    let mut r = ByteReader::new(raw);
    r.expect_magic(MODEL_MAGIC, "model")?;
    r.expect_version(MODEL_FORMAT_VERSION)?;
    let spec_len = r.u32_le()? as usize;
    let spec_offset = r.offset();
    let spec_bytes = r.bytes(spec_len)?;
    let spec: ModelSpec = serde_json::from_slice(spec_bytes)
        .map_err(|e| Error::format_at(format!("bad model spec: {e}"), spec_offset))?;
    spec.validate()
        .map_err(|e| Error::format_at(format!("invalid model spec: {e}"), spec_offset))?;
    let mut weights = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let shaped = LayerParams::zeros_like_spec(layer);
        let filled = match shaped {
            LayerParams::Empty => LayerParams::Empty,
            LayerParams::Dense { weight, bias } => LayerParams::Dense {
                weight: Tensor::from_parts(weight.shape().to_vec(), r.f64_vec(weight.len())?),
                bias: Tensor::from_parts(bias.shape().to_vec(), r.f64_vec(bias.len())?),
            },
            LayerParams::Conv { weight, bias } => LayerParams::Conv {
                weight: Tensor::from_parts(weight.shape().to_vec(), r.f64_vec(weight.len())?),
                bias: Tensor::from_parts(bias.shape().to_vec(), r.f64_vec(bias.len())?),
            },
        };
        weights.push(filled);
    }
    r.expect_end()?;
    let model = TrainedModel::from_parts(spec, weights, None)?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        // Two well-separated Gaussian clusters on the plane.
        let mut rng = SplitMix64::new(seed);
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { 1.0 } else { -1.0 };
            let x = center + 0.3 * rng.gaussian();
            let y = center + 0.3 * rng.gaussian();
            inputs.push(Tensor::from_flat(vec![x, y]).unwrap());
            labels.push(class);
        }
        LabeledDataset::new(inputs, labels, 2).unwrap()
    }

    fn blobs_spec() -> ModelSpec {
        ModelSpec {
            name: "blobs".into(),
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense {
                    in_features: 2,
                    out_features: 2,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    fn accuracy(model: &TrainedModel, data: &LabeledDataset) -> f64 {
        let hits = data
            .inputs()
            .iter()
            .zip(data.labels())
            .filter(|(x, &y)| predict(model, x).unwrap().0 == y)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn zero_epochs_rejected_at_construction() {
        assert!(TrainConfig::new(0, 0.1, 8, 1).is_err());
        assert!(TrainConfig::new(1, 0.0, 8, 1).is_err());
        assert!(TrainConfig::new(1, 0.1, 0, 1).is_err());
        assert!(TrainConfig::new(1, f64::NAN, 8, 1).is_err());
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let data = blobs(200, 7);
        let cfg = TrainConfig::new(50, 0.1, 16, 7).unwrap();
        let model = train_model(&blobs_spec(), &data, &cfg).unwrap();
        assert!(accuracy(&model, &data) >= 0.99);
        let summary = model.training_summary().unwrap();
        assert_eq!(summary.epoch_losses.len(), 50);
        assert!(summary.final_loss <= summary.epoch_losses[0]);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = blobs(60, 3);
        let cfg = TrainConfig::new(5, 0.1, 4, 9).unwrap();
        let a = train_model(&blobs_spec(), &data, &cfg).unwrap();
        let b = train_model(&blobs_spec(), &data, &cfg).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn predict_identity_dense_takes_argmax() {
        let spec = ModelSpec {
            name: "identity".into(),
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense {
                in_features: 3,
                out_features: 3,
            }],
        };
        let weights = vec![LayerParams::Dense {
            weight: Tensor::new(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
            bias: Tensor::zeros(vec![3]),
        }];
        let model = TrainedModel::from_parts(spec, weights, None).unwrap();
        let (class, probs) = predict(&model, &Tensor::from_flat(vec![0.0, 5.0, 1.0]).unwrap()).unwrap();
        assert_eq!(class, 1);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_breaks_ties_toward_lower_index() {
        let spec = ModelSpec {
            name: "tied".into(),
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense {
                in_features: 2,
                out_features: 3,
            }],
        };
        let weights = vec![LayerParams::Dense {
            weight: Tensor::zeros(vec![3, 2]),
            bias: Tensor::new(vec![3], vec![0.5, 0.5, 0.0]).unwrap(),
        }];
        let model = TrainedModel::from_parts(spec, weights, None).unwrap();
        let (class, _) = predict(&model, &Tensor::from_flat(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(class, 0);
    }

    #[test]
    fn argmax_invariant_under_logit_shift() {
        let data = blobs(40, 21);
        let cfg = TrainConfig::new(3, 0.1, 8, 21).unwrap();
        let model = train_model(&blobs_spec(), &data, &cfg).unwrap();
        for x in data.inputs().iter().take(10) {
            let raw = logits(&model, x).unwrap();
            let shifted: Vec<f64> = raw.data().iter().map(|v| v + 123.456).collect();
            let argmax = |v: &[f64]| {
                let mut best = 0;
                for (i, &p) in v.iter().enumerate() {
                    if p > v[best] {
                        best = i;
                    }
                }
                best
            };
            assert_eq!(argmax(raw.data()), argmax(&shifted));
            assert_eq!(argmax(raw.data()), predict(&model, x).unwrap().0);
        }
    }

    #[test]
    fn save_load_round_trip_preserves_predictions() {
        let data = blobs(80, 5);
        let cfg = TrainConfig::new(10, 0.1, 8, 5).unwrap();
        let model = train_model(&blobs_spec(), &data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.apcm");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.weights(), model.weights());
        assert!(loaded.training_summary().is_none());
        let mut rng = SplitMix64::new(99);
        for _ in 0..100 {
            let x = Tensor::from_flat(vec![rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)]).unwrap();
            let (ca, pa) = predict(&model, &x).unwrap();
            let (cb, pb) = predict(&loaded, &x).unwrap();
            assert_eq!(ca, cb);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn truncated_model_file_is_rejected() {
        let data = blobs(20, 6);
        let cfg = TrainConfig::new(2, 0.1, 4, 6).unwrap();
        let model = train_model(&blobs_spec(), &data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.apcm");
        save_model(&model, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.apcm");
        std::fs::write(&cut, &full[..full.len() - 5]).unwrap();
        assert!(matches!(load_model(&cut), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.apcm");
        std::fs::write(&path, b"NOPE\x01\x00rest").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        // Large-magnitude inputs with an absurd learning rate overflow the
        // forward pass within a couple of steps.
        let inputs = vec![
            Tensor::from_flat(vec![1e160, 1e160]).unwrap(),
            Tensor::from_flat(vec![-1e160, -1e160]).unwrap(),
            Tensor::from_flat(vec![1e160, -1e160]).unwrap(),
            Tensor::from_flat(vec![-1e160, 1e160]).unwrap(),
        ];
        let data = LabeledDataset::new(inputs, vec![0, 1, 0, 1], 2).unwrap();
        let cfg = TrainConfig::new(5, 1e10, 2, 8).unwrap();
        match train_model(&blobs_spec(), &data, &cfg) {
            Err(Error::DivergedTraining { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        let inputs = vec![Tensor::from_flat(vec![0.0]).unwrap()];
        let err = LabeledDataset::new(inputs, vec![3], 2).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, class_count: 2 }));
    }

    #[test]
    fn dataset_rejects_mixed_shapes() {
        let inputs = vec![
            Tensor::from_flat(vec![0.0, 1.0]).unwrap(),
            Tensor::from_flat(vec![0.0]).unwrap(),
        ];
        assert!(LabeledDataset::new(inputs, vec![0, 1], 2).is_err());
    }
}
