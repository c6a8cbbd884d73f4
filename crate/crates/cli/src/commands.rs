//! One function per subcommand. Each stage reads the artifacts of earlier
//! stages from the output directory and writes its own, so the pipeline can
//! be re-run from any point.

use std::path::{Path, PathBuf};
use std::time::Instant;

use samurai_core::apc::{
    hooked_inference, layer_cost, metric_cost_flops, read_trace_file, write_trace_file, ApcMemory,
    CounterConfig, TimingMode, TraceRecord,
};
use samurai_core::attack::{attack_dataset, write_attack_results_file, AttackOutcome};
use samurai_core::container::{load_tensor_set, save_tensor_set, TensorEntry};
use samurai_core::network::{load_model, predict, save_model, train_model, TrainedModel};
use samurai_core::tanto::{
    build_dataset, build_feature_vector, counter_layout, evaluate_detector, infer_and_detect,
    load_detector, save_detector, stratified_split, train_detector, write_alert_log,
    DetectionMetrics, DetectionPolicy, DetectorKind, DetectorModel,
};
use samurai_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datasets::{ingest_dataset, Split};

/// Artifact locations inside the output directory.
pub struct RunPaths {
    out: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> RunPaths {
        RunPaths {
            out: out_dir.to_path_buf(),
        }
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.apcm")
    }

    pub fn traces(&self, split: Split) -> PathBuf {
        self.out.join(format!("traces-{split}.jsonl"))
    }

    pub fn inputs(&self, split: Split) -> PathBuf {
        self.out.join(format!("inputs-{split}.apct"))
    }

    pub fn adversarial_tensors(&self) -> PathBuf {
        self.out.join("adversarial.apct")
    }

    pub fn adversarial_traces(&self) -> PathBuf {
        self.out.join("traces-adversarial.jsonl")
    }

    pub fn attack_results(&self) -> PathBuf {
        self.out.join("attack-results.jsonl")
    }

    pub fn attack_report(&self) -> PathBuf {
        self.out.join("attack-report.json")
    }

    pub fn detector(&self) -> PathBuf {
        self.out.join("detector.apcd")
    }

    pub fn detector_metrics(&self) -> PathBuf {
        self.out.join("detector-metrics.json")
    }

    pub fn evaluate_metrics(&self) -> PathBuf {
        self.out.join("evaluate-metrics.json")
    }

    pub fn alerts(&self) -> PathBuf {
        self.out.join("alerts.jsonl")
    }

    pub fn overhead(&self) -> PathBuf {
        self.out.join("overhead.json")
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains the configured model on the train split and writes `model.apcm`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let spec = config.load_model_spec()?;
    let data = ingest_dataset(&config.dataset, Split::Train, config.seed, &spec.input_shape)?;
    let train_config = config.train.resolve(config.seed)?;
    println!(
        "training {} on {} samples ({} dataset)",
        spec.name,
        data.len(),
        config.dataset.label()
    );
    let model = train_model(&spec, &data, &train_config)?;
    if let Some(summary) = model.training_summary() {
        println!("epoch  mean loss");
        for (i, loss) in summary.epoch_losses.iter().enumerate() {
            println!("{:>5}  {loss:.6}", i + 1);
        }
        println!("final loss {:.6}", summary.final_loss);
    }
    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    save_model(&model, &paths.model())?;
    println!("model -> {}", paths.model().display());
    Ok(())
}

fn load_model_at(path: &Path) -> Result<TrainedModel> {
    std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    load_model(path)
}

/// Runs hooked inference over a split and writes one trace line per input.
pub fn cmd_extract(
    config: &ExperimentConfig,
    model_path: &Path,
    split: Split,
    export_inputs: bool,
) -> Result<()> {
    let model = load_model_at(model_path)?;
    let data = ingest_dataset(
        &config.dataset,
        split,
        config.seed,
        &model.spec().input_shape,
    )?;
    let counter_config = config.counters.resolve(config.timing)?;
    let mut memory = ApcMemory::new(data.len())?;
    for (i, input) in data.inputs().iter().enumerate() {
        let id = format!("{split}-{i:06}");
        hooked_inference(&model, input, &counter_config, &mut memory, &id)?;
    }
    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    let trace_path = paths.traces(split);
    write_trace_file(&trace_path, memory.records())?;
    println!(
        "captured {} traces -> {}",
        memory.records().len(),
        trace_path.display()
    );
    if export_inputs {
        let entries: Vec<TensorEntry> = data
            .inputs()
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry::new(format!("{split}-{i:06}"), t.clone()))
            .collect();
        let inputs_path = paths.inputs(split);
        save_tensor_set(&inputs_path, &entries)?;
        println!("inputs -> {}", inputs_path.display());
    }
    Ok(())
}

/// Schema of `attack-report.json`.
#[derive(Serialize, Deserialize)]
pub struct AttackReportJson {
    pub sample_count: usize,
    pub success_count: usize,
    pub failure_count: usize,
    pub skipped_count: usize,
    pub rho_adv: Option<f64>,
}

fn clamp_unit_range(tensor: &Tensor) -> Result<Tensor> {
    let data = tensor.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(tensor.shape().to_vec(), data)
}

/// Attacks a split, exports the successful adversarial inputs plus their
/// traces, and writes the per-sample results and the robustness report.
pub fn cmd_attack(
    config: &ExperimentConfig,
    model_path: &Path,
    split: Split,
    clip: bool,
) -> Result<()> {
    let model = load_model_at(model_path)?;
    let data = ingest_dataset(
        &config.dataset,
        split,
        config.seed,
        &model.spec().input_shape,
    )?;
    let attack_config = config.attack.resolve()?;
    println!(
        "attacking {} inputs from the {split} split",
        data.len()
    );
    let (outcomes, report) = attack_dataset(&model, &data, &attack_config)?;
    let ids: Vec<String> = (0..outcomes.len()).map(|i| format!("adv-{i:06}")).collect();

    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    write_attack_results_file(&paths.attack_results(), &ids, &outcomes)?;

    let mut entries = Vec::new();
    for (id, outcome) in ids.iter().zip(&outcomes) {
        if let AttackOutcome::Attacked(result) = outcome {
            if result.succeeded {
                let exported = if clip {
                    clamp_unit_range(&result.adversarial_input)?
                } else {
                    result.adversarial_input.clone()
                };
                entries.push(TensorEntry::new(id.clone(), exported));
            }
        }
    }
    save_tensor_set(&paths.adversarial_tensors(), &entries)?;

    let counter_config = config.counters.resolve(config.timing)?;
    let mut memory = ApcMemory::new(entries.len().max(1))?;
    for entry in &entries {
        hooked_inference(&model, &entry.tensor, &counter_config, &mut memory, &entry.id)?;
    }
    write_trace_file(&paths.adversarial_traces(), memory.records())?;

    write_json(
        &paths.attack_report(),
        &AttackReportJson {
            sample_count: report.sample_count,
            success_count: report.success_count,
            failure_count: report.failure_count,
            skipped_count: report.skipped_count,
            rho_adv: report.rho_adv,
        },
    )?;
    match report.rho_adv {
        Some(rho) => println!(
            "succeeded {} / failed {} / skipped {}, mean norm ratio {rho:.6}",
            report.success_count, report.failure_count, report.skipped_count
        ),
        None => println!(
            "succeeded {} / failed {} / skipped {}, no norm ratio (nothing succeeded)",
            report.success_count, report.failure_count, report.skipped_count
        ),
    }
    println!(
        "adversarial tensors -> {} ({} entries{})",
        paths.adversarial_tensors().display(),
        entries.len(),
        if clip { ", clipped to [0,1]" } else { "" }
    );
    println!("report -> {}", paths.attack_report().display());
    Ok(())
}

/// Schema of `detector-metrics.json`.
#[derive(Serialize, Deserialize)]
pub struct DetectorMetricsJson {
    pub kind: DetectorKind,
    pub train_size: usize,
    pub holdout_size: usize,
    pub train: DetectionMetrics,
    pub holdout: DetectionMetrics,
}

fn read_traces_at(path: &Path) -> Result<Vec<TraceRecord>> {
    std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    read_trace_file(path)
}

/// Trains a detector on clean-vs-adversarial trace files, holding out a
/// stratified fraction for honest metrics, and writes `detector.apcd`.
pub fn cmd_train_detector(
    config: &ExperimentConfig,
    clean_path: &Path,
    adversarial_path: &Path,
) -> Result<()> {
    let clean = read_traces_at(clean_path)?;
    let adversarial = read_traces_at(adversarial_path)?;
    let (kind, settings) = config.detector.resolve()?;
    let split = stratified_split(
        &clean,
        &adversarial,
        config.detector.holdout_fraction(),
        config.seed,
    )?;
    let train_set = build_dataset(&split.train_clean, &split.train_adversarial)?;
    let holdout_set = build_dataset(&split.test_clean, &split.test_adversarial)?;
    println!(
        "training {:?} detector on {} traces, holding out {}",
        kind,
        train_set.len(),
        holdout_set.len()
    );
    let detector = train_detector(&train_set, kind, config.seed, &settings)?;
    let train_metrics = evaluate_detector(&detector, &train_set)?;
    let holdout_metrics = evaluate_detector(&detector, &holdout_set)?;

    println!(
        "train accuracy {:.4}, held-out accuracy {:.4}",
        train_metrics.accuracy, holdout_metrics.accuracy
    );
    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    save_detector(&detector, &paths.detector())?;
    write_json(
        &paths.detector_metrics(),
        &DetectorMetricsJson {
            kind,
            train_size: train_set.len(),
            holdout_size: holdout_set.len(),
            train: train_metrics,
            holdout: holdout_metrics,
        },
    )?;
    println!("detector -> {}", paths.detector().display());
    println!("metrics -> {}", paths.detector_metrics().display());
    Ok(())
}

/// Schema of `evaluate-metrics.json`.
#[derive(Serialize, Deserialize)]
pub struct EvaluateJson {
    pub clean_records: usize,
    pub adversarial_records: usize,
    pub metrics: DetectionMetrics,
}

/// Scores a saved detector against labeled trace files.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    detector_path: &Path,
    clean_path: &Path,
    adversarial_path: &Path,
) -> Result<()> {
    std::fs::metadata(detector_path).map_err(|e| Error::io(detector_path, e))?;
    let detector = load_detector(detector_path)?;
    let clean = read_traces_at(clean_path)?;
    let adversarial = read_traces_at(adversarial_path)?;
    let dataset = build_dataset(&clean, &adversarial)?;
    let metrics = evaluate_detector(&detector, &dataset)?;
    println!(
        "accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}",
        metrics.accuracy, metrics.precision, metrics.recall, metrics.f1
    );
    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    write_json(
        &paths.evaluate_metrics(),
        &EvaluateJson {
            clean_records: clean.len(),
            adversarial_records: adversarial.len(),
            metrics,
        },
    )?;
    println!("metrics -> {}", paths.evaluate_metrics().display());
    Ok(())
}

/// Runs the monitored-inference loop over a stored workload and writes the
/// alert log. Returns whether a halting policy stopped the stream.
pub fn cmd_monitor(
    config: &ExperimentConfig,
    model_path: &Path,
    detector_path: &Path,
    workload_path: &Path,
    policy: DetectionPolicy,
) -> Result<bool> {
    let model = load_model_at(model_path)?;
    std::fs::metadata(detector_path).map_err(|e| Error::io(detector_path, e))?;
    let detector = load_detector(detector_path)?;
    std::fs::metadata(workload_path).map_err(|e| Error::io(workload_path, e))?;
    let entries = load_tensor_set(workload_path)?;
    let workload: Vec<(String, Tensor)> =
        entries.into_iter().map(|e| (e.id, e.tensor)).collect();
    let counter_config = config.counters.resolve(config.timing)?;
    let report = infer_and_detect(&model, &detector, &workload, &counter_config, policy)?;

    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    write_alert_log(&paths.alerts(), &report)?;
    let flagged = report
        .events()
        .iter()
        .filter(|e| e.alert.is_adversarial)
        .count();
    println!(
        "processed {} inputs, flagged {} adversarial, {} unprocessed",
        report.events().len(),
        flagged,
        report.unprocessed_ids().len()
    );
    println!("alerts -> {}", paths.alerts().display());
    if report.halted() {
        println!("halted by policy");
    }
    Ok(report.halted())
}

/// One row of `overhead.json`: per-input medians for one (model, dataset).
#[derive(Serialize, Deserialize)]
pub struct OverheadRow {
    pub model: String,
    pub dataset: String,
    pub timing: TimingMode,
    pub inputs: usize,
    pub repetitions: usize,
    pub baseline_us_per_input: f64,
    pub instrumented_us_per_input: f64,
    pub detector_us_per_input: f64,
    pub overhead_percent: f64,
}

/// Schema of `overhead.json`.
#[derive(Serialize, Deserialize)]
pub struct OverheadJson {
    pub rows: Vec<OverheadRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn wallclock_overhead(
    model: &TrainedModel,
    detector: &DetectorModel,
    counter_config: &CounterConfig,
    bench_inputs: &[Tensor],
    repetitions: usize,
) -> Result<(f64, f64, f64)> {
    let layout = counter_layout(counter_config, model.spec().layers.len())?;
    let n = bench_inputs.len() as f64;
    let mut baseline_medians = Vec::with_capacity(repetitions);
    let mut instrumented_medians = Vec::with_capacity(repetitions);
    let mut detector_medians = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for input in bench_inputs {
            std::hint::black_box(predict(model, input)?);
        }
        baseline_medians.push(start.elapsed().as_secs_f64() * 1e6 / n);

        let mut memory = ApcMemory::new(bench_inputs.len())?;
        let mut detector_us = 0.0;
        let start = Instant::now();
        for (i, input) in bench_inputs.iter().enumerate() {
            let id = format!("bench-{i:06}");
            let (_, record) = hooked_inference(model, input, counter_config, &mut memory, &id)?;
            let detector_start = Instant::now();
            let features = build_feature_vector(&record, &layout)?;
            std::hint::black_box(detector.classify(&features)?);
            detector_us += detector_start.elapsed().as_secs_f64() * 1e6;
        }
        instrumented_medians.push(start.elapsed().as_secs_f64() * 1e6 / n);
        detector_medians.push(detector_us / n);
    }
    Ok((
        median(&mut baseline_medians),
        median(&mut instrumented_medians),
        median(&mut detector_medians),
    ))
}

fn deterministic_overhead(
    model: &TrainedModel,
    detector: &DetectorModel,
    counter_config: &CounterConfig,
) -> Result<(f64, f64, f64)> {
    let spec = model.spec();
    let shapes = spec.layer_output_shapes()?;
    let mut baseline_flops = 0u64;
    let mut metric_flops = 0u64;
    let mut input_shape = spec.input_shape.clone();
    for (i, (layer, output_shape)) in spec.layers.iter().zip(&shapes).enumerate() {
        let (flops, _) = layer_cost(layer, &input_shape, output_shape)?;
        baseline_flops += flops;
        if counter_config.includes_layer(i) {
            let element_count: usize = output_shape.iter().product();
            metric_flops += metric_cost_flops(counter_config, element_count);
        }
        input_shape = output_shape.clone();
    }
    let detector_flops = detector.score_cost_flops()?;
    let baseline_us = baseline_flops as f64 / 1e6;
    let instrumented_us = (baseline_flops + metric_flops + detector_flops) as f64 / 1e6;
    let detector_us = detector_flops as f64 / 1e6;
    Ok((baseline_us, instrumented_us, detector_us))
}

/// Measures inference cost with and without the counter-plus-detector path.
/// Wall-clock mode times real loops (median over repetitions); deterministic
/// mode evaluates the closed-form cost model, so its numbers are
/// bit-reproducible.
pub fn cmd_bench_overhead(
    config: &ExperimentConfig,
    model_path: &Path,
    detector_path: &Path,
    inputs: usize,
    repetitions: usize,
) -> Result<()> {
    if inputs < 30 {
        return Err(Error::invalid(
            "benchmark needs at least 30 inputs to clear timer noise",
        ));
    }
    if repetitions < 5 {
        return Err(Error::invalid("benchmark needs at least 5 repetitions"));
    }
    let model = load_model_at(model_path)?;
    std::fs::metadata(detector_path).map_err(|e| Error::io(detector_path, e))?;
    let detector = load_detector(detector_path)?;
    let counter_config = config.counters.resolve(config.timing)?;
    let expected_layout = counter_layout(&counter_config, model.spec().layers.len())?;
    if expected_layout != detector.layout() {
        return Err(Error::LayoutMismatch {
            message: "counter configuration does not produce the detector's feature layout"
                .to_string(),
        });
    }
    let data = ingest_dataset(
        &config.dataset,
        Split::Test,
        config.seed,
        &model.spec().input_shape,
    )?;
    if data.is_empty() {
        return Err(Error::invalid("benchmark dataset is empty"));
    }
    let bench_inputs: Vec<Tensor> = (0..inputs)
        .map(|i| data.inputs()[i % data.len()].clone())
        .collect();

    let (baseline_us, instrumented_us, detector_us) = match config.timing {
        TimingMode::WallClock => wallclock_overhead(
            &model,
            &detector,
            &counter_config,
            &bench_inputs,
            repetitions,
        )?,
        TimingMode::Deterministic => {
            deterministic_overhead(&model, &detector, &counter_config)?
        }
    };
    let overhead_percent = (instrumented_us - baseline_us) / baseline_us * 100.0;
    let row = OverheadRow {
        model: model.spec().name.clone(),
        dataset: config.dataset.label().to_string(),
        timing: config.timing,
        inputs,
        repetitions,
        baseline_us_per_input: baseline_us,
        instrumented_us_per_input: instrumented_us,
        detector_us_per_input: detector_us,
        overhead_percent,
    };

    println!(
        "{:<16} {:<16} {:<14} {:>14} {:>16} {:>13} {:>10}",
        "model", "dataset", "timing", "baseline_us", "instrumented_us", "detector_us", "overhead"
    );
    println!(
        "{:<16} {:<16} {:<14} {:>14.3} {:>16.3} {:>13.3} {:>9.2}%",
        row.model,
        row.dataset,
        format!("{:?}", row.timing).to_lowercase(),
        row.baseline_us_per_input,
        row.instrumented_us_per_input,
        row.detector_us_per_input,
        row.overhead_percent
    );

    let paths = RunPaths::new(&config.out_dir);
    paths.ensure_out_dir()?;
    write_json(&paths.overhead(), &OverheadJson { rows: vec![row] })?;
    println!("report -> {}", paths.overhead().display());
    Ok(())
}

/// Re-verifies every record of every given trace file.
pub fn cmd_verify_traces(paths: &[PathBuf]) -> Result<()> {
    for path in paths {
        let records = read_traces_at(path)?;
        println!("ok: {} records ({})", records.len(), path.display());
    }
    Ok(())
}
