//! Minimal-perturbation adversarial attack by iterative linearization, plus
//! dataset-level robustness estimation.
//!
//! Each step linearizes the logit differences around the current point,
//! projects onto the nearest approximated decision boundary, and overshoots
//! slightly so the label actually flips. The dataset driver aggregates the
//! perturbation-to-input norm ratios into a robustness score.

use std::path::Path;

use serde::Serialize;

use crate::autodiff::{backward, forward, GradientTape};
use crate::error::{Error, Result};
use crate::network::{logits, predict, LabeledDataset, TrainedModel};
use crate::tensor::Tensor;

/// Attack hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    overshoot: f64,
    max_iterations: usize,
    candidate_class_count: usize,
}

impl AttackConfig {
    pub fn new(overshoot: f64, max_iterations: usize, candidate_class_count: usize) -> Result<AttackConfig> {
        if !(overshoot > 0.0 && overshoot < 1.0) {
            return Err(Error::invalid("overshoot must lie strictly between 0 and 1"));
        }
        if max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if candidate_class_count < 2 {
            return Err(Error::invalid("candidate_class_count must be at least 2"));
        }
        Ok(AttackConfig {
            overshoot,
            max_iterations,
            candidate_class_count,
        })
    }

    pub fn overshoot(&self) -> f64 {
        self.overshoot
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn candidate_class_count(&self) -> usize {
        self.candidate_class_count
    }
}

impl Default for AttackConfig {
    /// Overshoot 0.02, 50 iterations, top-10 candidate classes.
    fn default() -> AttackConfig {
        AttackConfig::new(0.02, 50, 10).unwrap()
    }
}

/// Outcome of attacking one input.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub original_input: Tensor,
    pub adversarial_input: Tensor,
    pub perturbation: Tensor,
    pub perturbation_norm: f64,
    pub original_label: usize,
    pub adversarial_label: usize,
    pub iterations_used: usize,
    pub succeeded: bool,
}

impl AttackResult {
    /// Perturbation size relative to the input: ‖p‖₂ / ‖a‖₂. Undefined for a
    /// zero input.
    pub fn norm_ratio(&self) -> Option<f64> {
        let a = self.original_input.norm_l2();
        (a > 0.0).then(|| self.perturbation_norm / a)
    }
}

/// Per-input outcome of a dataset attack. Inputs the model already
/// misclassifies are skipped (a minimal label-flipping perturbation is only
/// meaningful from a correct label); per-sample errors become failures
/// without aborting the batch.
#[derive(Clone, Debug)]
pub enum AttackOutcome {
    Attacked(AttackResult),
    Skipped {
        predicted_label: usize,
        dataset_label: usize,
    },
    Failed {
        message: String,
    },
}

/// Dataset-level robustness summary: the mean perturbation-to-input norm
/// ratio over successfully attacked samples.
#[derive(Clone, Debug)]
pub struct RobustnessReport {
    /// One ratio per succeeded sample with a nonzero input, in input order.
    pub ratios: Vec<f64>,
    /// Mean of `ratios`; absent when no attack succeeded.
    pub rho_adv: Option<f64>,
    /// Total inputs processed.
    pub sample_count: usize,
    /// Attacks attempted but not succeeded (budget exhausted or errored).
    pub failure_count: usize,
    /// Inputs skipped because the model misclassified them to begin with.
    pub skipped_count: usize,
    /// Attacks that flipped the label.
    pub success_count: usize,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn one_hot(len: usize, index: usize) -> Tensor {
    let mut data = vec![0.0; len];
    data[index] = 1.0;
    Tensor::from_parts(vec![len], data)
}

/// Find a small label-flipping perturbation for one input.
///
/// The reference label is the model's own prediction on `input`. Candidate
/// classes are the top-scoring classes at the original point (the reference
/// plus the next `candidate_class_count − 1`); that set stays fixed across
/// iterations. Each iteration picks the candidate whose linearized boundary
/// is nearest, steps onto it, and re-checks the label at the overshot point
/// x₀ + (1+overshoot)·r; on an exactly linear model one step therefore
/// already flips.
pub fn deepfool(model: &TrainedModel, input: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    let class_count = model.class_count();
    if class_count < 2 {
        return Err(Error::invalid("attack needs at least two classes"));
    }
    let (specs, weights) = model.logits_stack();

    let z0 = logits(model, input)?;
    let original_label = argmax(z0.data());

    // Rank classes by original score, descending, ties toward lower index.
    let mut ranked: Vec<usize> = (0..class_count).collect();
    ranked.sort_by(|&a, &b| {
        z0.data()[b]
            .partial_cmp(&z0.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    debug_assert_eq!(ranked[0], original_label);
    let effective = cfg.candidate_class_count().min(class_count);
    let candidates: Vec<usize> = ranked[1..effective].to_vec();

    let scale = 1.0 + cfg.overshoot();
    let mut r_total = Tensor::zeros(input.shape().to_vec());
    let mut x_pert = input.clone();
    let mut iterations_used = 0;
    let mut tape = GradientTape::new();

    while iterations_used < cfg.max_iterations() {
        let outputs = forward(specs, weights, &x_pert, Some(&mut tape))?;
        let z = outputs.last().unwrap();
        if argmax(z.data()) != original_label {
            break;
        }

        let grad_for = |class: usize, tape: &GradientTape| -> Result<Tensor> {
            let grads = backward(specs, weights, tape, &one_hot(class_count, class))?;
            Ok(grads.input)
        };
        let grad_orig = grad_for(original_label, &tape)?;

        // Nearest linearized boundary among the candidates.
        let mut best: Option<(f64, f64, Tensor, f64)> = None;
        for &k in &candidates {
            let f_k = z.data()[k] - z.data()[original_label];
            let w_k = grad_for(k, &tape)?.sub(&grad_orig)?;
            let w_norm = w_k.norm_l2();
            if w_norm < 1e-12 {
                continue;
            }
            let distance = f_k.abs() / w_norm;
            if best.as_ref().is_none_or(|(d, ..)| distance < *d) {
                best = Some((distance, f_k, w_k, w_norm));
            }
        }
        let Some((_, f_l, w_l, w_norm)) = best else {
            return Err(Error::DegenerateGradient);
        };

        let step = w_l.scale(f_l.abs() / (w_norm * w_norm));
        r_total = r_total.add(&step)?;
        x_pert = input.add(&r_total.scale(scale))?;
        iterations_used += 1;
    }

    let perturbation = r_total.scale(scale);
    let adversarial_input = input.add(&perturbation)?;
    let (adversarial_label, _) = predict(model, &adversarial_input)?;

    Ok(AttackResult {
        original_input: input.clone(),
        perturbation_norm: perturbation.norm_l2(),
        perturbation,
        adversarial_input,
        original_label,
        adversarial_label,
        iterations_used,
        succeeded: adversarial_label != original_label,
    })
}

/// Attack every input in the dataset, skipping already-misclassified samples
/// and turning per-sample errors into failed outcomes. Returns one outcome
/// per input, in order, plus the robustness summary.
pub fn attack_dataset(
    model: &TrainedModel,
    data: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<(Vec<AttackOutcome>, RobustnessReport)> {
    let mut outcomes = Vec::with_capacity(data.len());
    let mut ratios = Vec::new();
    let mut failure_count = 0;
    let mut skipped_count = 0;
    let mut success_count = 0;

    for (input, &label) in data.inputs().iter().zip(data.labels()) {
        let (predicted, _) = predict(model, input)?;
        if predicted != label {
            skipped_count += 1;
            outcomes.push(AttackOutcome::Skipped {
                predicted_label: predicted,
                dataset_label: label,
            });
            continue;
        }
        match deepfool(model, input, cfg) {
            Ok(result) => {
                if result.succeeded {
                    success_count += 1;
                    if let Some(ratio) = result.norm_ratio() {
                        ratios.push(ratio);
                    }
                } else {
                    failure_count += 1;
                }
                outcomes.push(AttackOutcome::Attacked(result));
            }
            Err(e) => {
                failure_count += 1;
                outcomes.push(AttackOutcome::Failed {
                    message: e.to_string(),
                });
            }
        }
    }

    let rho_adv = if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    };
    let report = RobustnessReport {
        rho_adv,
        ratios,
        sample_count: data.len(),
        failure_count,
        skipped_count,
        success_count,
    };
    Ok((outcomes, report))
}

#[derive(Serialize)]
struct AttackRow<'a> {
    input_id: &'a str,
    perturbation_norm: f64,
    norm_ratio: Option<f64>,
    iterations: usize,
    succeeded: bool,
    original_label: usize,
    adversarial_label: usize,
}

/// Export attacked samples as JSON Lines, one line per input that was
/// actually attacked (skipped and errored inputs are accounted for in the
/// report, not here). `ids` runs parallel to `outcomes`.
pub fn write_attack_results_file(
    path: &Path,
    ids: &[String],
    outcomes: &[AttackOutcome],
) -> Result<()> {
    debug_assert_eq!(ids.len(), outcomes.len());
    let mut out = String::new();
    for (id, outcome) in ids.iter().zip(outcomes) {
        let AttackOutcome::Attacked(result) = outcome else {
            continue;
        };
        let row = AttackRow {
            input_id: id,
            perturbation_norm: result.perturbation_norm,
            norm_ratio: result.norm_ratio(),
            iterations: result.iterations_used,
            succeeded: result.succeeded,
            original_label: result.original_label,
            adversarial_label: result.adversarial_label,
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
