//! Reverse-mode differentiation over layer stacks.
//!
//! The forward driver optionally records every layer's input and output on a
//! tape; the backward driver replays the tape in reverse, producing the loss
//! gradient with respect to the network input and every parameter. Gradients
//! here are exact (up to floating point), which the finite-difference tests
//! lean on.

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, softmax, LayerParams, LayerSpec};
use crate::tensor::Tensor;

/// Activation record of one forward pass: per layer, the input it saw and the
/// output it produced.
#[derive(Clone, Debug, Default)]
pub struct GradientTape {
    steps: Vec<(Tensor, Tensor)>,
}

impl GradientTape {
    pub fn new() -> GradientTape {
        GradientTape::default()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    fn clear(&mut self) {
        self.steps.clear();
    }
}

/// Gradients from one backward pass. `layers[i]` mirrors the shape of layer
/// i's parameters (`Empty` for parameterless layers).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Tensor,
    pub layers: Vec<LayerParams>,
}

/// Run `input` through the layer stack, returning every layer's output in
/// order. With a tape, records activations for a later backward pass. Any
/// non-finite layer output aborts the pass.
pub fn forward(
    specs: &[LayerSpec],
    params: &[LayerParams],
    input: &Tensor,
    mut tape: Option<&mut GradientTape>,
) -> Result<Vec<Tensor>> {
    debug_assert_eq!(specs.len(), params.len());
    if let Some(t) = tape.as_deref_mut() {
        t.clear();
    }
    let mut outputs = Vec::with_capacity(specs.len());
    let mut current = input.clone();
    for (spec, p) in specs.iter().zip(params) {
        let out = layer_forward(spec, p, &current)?;
        if !out.all_finite() {
            return Err(Error::NonFinite {
                context: spec.kind_name(),
            });
        }
        if let Some(t) = tape.as_deref_mut() {
            t.steps.push((current.clone(), out.clone()));
        }
        outputs.push(out.clone());
        current = out;
    }
    Ok(outputs)
}

/// Walk the tape in reverse from `loss_grad` (gradient at the final output)
/// down to the network input.
pub fn backward(
    specs: &[LayerSpec],
    params: &[LayerParams],
    tape: &GradientTape,
    loss_grad: &Tensor,
) -> Result<Gradients> {
    if tape.is_empty() || tape.len() != specs.len() {
        return Err(Error::EmptyTape);
    }
    let mut grad = loss_grad.clone();
    let mut layer_grads: Vec<LayerParams> = Vec::with_capacity(specs.len());
    for i in (0..specs.len()).rev() {
        let (input, output) = &tape.steps[i];
        let (dx, dp) = layer_backward(&specs[i], &params[i], input, output, &grad)?;
        layer_grads.push(dp);
        grad = dx;
    }
    layer_grads.reverse();
    Ok(Gradients {
        input: grad,
        layers: layer_grads,
    })
}

/// Softmax cross-entropy of raw logits against an integer label.
///
/// Computed via log-sum-exp so large logits stay finite; returns the scalar
/// loss and its gradient with respect to the logits (softmax minus one-hot).
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: z.len(),
        });
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let loss = max + sum_exp.ln() - z[label];
    let mut grad = softmax(z);
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}
