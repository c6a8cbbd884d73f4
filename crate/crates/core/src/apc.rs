//! Performance-counter subsystem: configurable counter families, per-layer
//! activation metrics, a capture state machine over an append-only trace
//! memory, and an integrity-checked JSON Lines trace format.
//!
//! Counters observe layer outputs without touching them, so hooked inference
//! is bit-identical to plain inference. Every trace record carries an FNV-1a
//! checksum over its canonical serialization; readers verify both the
//! checksum and that the stored bytes are exactly the canonical form.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{layer_forward, LayerSpec};
use crate::network::{prediction_from_final, TrainedModel};
use crate::tensor::Tensor;

/// The eight counter families. `DenseActivity` covers the avg/max/min
/// activation triple; `Throughput` covers the record-level inference time and
/// images-per-second pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricFamily {
    Sparsity,
    ZeroCount,
    DenseActivity,
    Flops,
    Tops,
    Macs,
    Entropy,
    Throughput,
}

impl MetricFamily {
    pub const ALL: [MetricFamily; 8] = [
        MetricFamily::Sparsity,
        MetricFamily::ZeroCount,
        MetricFamily::DenseActivity,
        MetricFamily::Flops,
        MetricFamily::Tops,
        MetricFamily::Macs,
        MetricFamily::Entropy,
        MetricFamily::Throughput,
    ];
}

/// Where layer timings come from.
///
/// `WallClock` reads a monotonic timer around each layer. `Deterministic`
/// models a fixed synthetic device that does one floating-point operation per
/// picosecond, so elapsed microseconds equal flops / 1e6; every timing-derived
/// value is then reproducible bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    WallClock,
    Deterministic,
}

/// Which counters run, on which layers, with which timing source.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterConfig {
    families: BTreeSet<MetricFamily>,
    include_layers: Option<Vec<usize>>,
    timing: TimingMode,
}

impl CounterConfig {
    /// At least one family must be enabled. `include_layers` of `None` means
    /// every layer; an explicit list restricts capture to those layer indices
    /// (checked against the model at hook time).
    pub fn new(
        families: impl IntoIterator<Item = MetricFamily>,
        include_layers: Option<Vec<usize>>,
        timing: TimingMode,
    ) -> Result<CounterConfig> {
        let families: BTreeSet<MetricFamily> = families.into_iter().collect();
        if families.is_empty() {
            return Err(Error::invalid("at least one counter family must be enabled"));
        }
        if let Some(list) = &include_layers {
            if list.is_empty() {
                return Err(Error::invalid("layer include list is empty"));
            }
        }
        Ok(CounterConfig {
            families,
            include_layers,
            timing,
        })
    }

    /// Every family enabled on every layer.
    pub fn all_families(timing: TimingMode) -> CounterConfig {
        CounterConfig::new(MetricFamily::ALL, None, timing).unwrap()
    }

    pub fn enabled(&self, family: MetricFamily) -> bool {
        self.families.contains(&family)
    }

    pub fn families(&self) -> &BTreeSet<MetricFamily> {
        &self.families
    }

    pub fn include_layers(&self) -> Option<&[usize]> {
        self.include_layers.as_deref()
    }

    pub fn timing(&self) -> TimingMode {
        self.timing
    }

    pub fn includes_layer(&self, index: usize) -> bool {
        match &self.include_layers {
            None => true,
            Some(list) => list.contains(&index),
        }
    }
}

/// Metrics captured from one layer's output. `None` marks a family that was
/// disabled, never a default value. `element_count` is always recorded.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMetrics {
    pub layer_index: usize,
    pub layer_kind: String,
    pub sparsity: Option<f64>,
    pub zero_count: Option<u64>,
    pub avg_activation: Option<f64>,
    pub max_activation: Option<f64>,
    pub min_activation: Option<f64>,
    pub entropy: Option<f64>,
    pub flops: Option<u64>,
    pub macs: Option<u64>,
    pub tops: Option<f64>,
    pub element_count: u64,
}

/// One inference's worth of counter readings, checksummed.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub input_id: String,
    pub model_name: String,
    pub layers: Vec<LayerMetrics>,
    pub inference_time_us: Option<u64>,
    pub throughput_ips: Option<f64>,
    pub checksum: u64,
}

/// Capture lifecycle. A full hooked inference walks
/// Idle → Armed → Capturing → Committing → Idle exactly once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsmState {
    Idle,
    Armed,
    Capturing,
    Committing,
}

impl FsmState {
    pub fn name(self) -> &'static str {
        match self {
            FsmState::Idle => "Idle",
            FsmState::Armed => "Armed",
            FsmState::Capturing => "Capturing",
            FsmState::Committing => "Committing",
        }
    }
}

/// Append-only, capacity-bounded store of trace records, guarded by the
/// capture state machine: records can only be appended while Committing, and
/// are never mutated afterwards.
#[derive(Clone, Debug)]
pub struct ApcMemory {
    records: Vec<TraceRecord>,
    capacity: usize,
    state: FsmState,
}

impl ApcMemory {
    pub fn new(capacity: usize) -> Result<ApcMemory> {
        if capacity == 0 {
            return Err(Error::invalid("trace memory capacity must be positive"));
        }
        Ok(ApcMemory {
            records: Vec::new(),
            capacity,
            state: FsmState::Idle,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn state(&self) -> FsmState {
        self.state
    }

    fn transition(&mut self, from: FsmState, to: FsmState) -> Result<()> {
        if self.state != from {
            return Err(Error::FsmViolation {
                state: self.state.name(),
            });
        }
        self.state = to;
        Ok(())
    }

    /// Idle → Armed. Refused when the memory is already full.
    pub fn arm(&mut self) -> Result<()> {
        if self.state != FsmState::Idle {
            return Err(Error::FsmViolation {
                state: self.state.name(),
            });
        }
        if self.records.len() >= self.capacity {
            return Err(Error::MemoryFull {
                capacity: self.capacity,
            });
        }
        self.state = FsmState::Armed;
        Ok(())
    }

    /// Armed → Capturing.
    pub fn begin_capture(&mut self) -> Result<()> {
        self.transition(FsmState::Armed, FsmState::Capturing)
    }

    /// Capturing → Committing.
    pub fn begin_commit(&mut self) -> Result<()> {
        self.transition(FsmState::Capturing, FsmState::Committing)
    }

    /// Store one record. Only legal while Committing.
    pub fn append(&mut self, record: TraceRecord) -> Result<()> {
        if self.state != FsmState::Committing {
            return Err(Error::FsmViolation {
                state: self.state.name(),
            });
        }
        if self.records.len() >= self.capacity {
            return Err(Error::MemoryFull {
                capacity: self.capacity,
            });
        }
        self.records.push(record);
        Ok(())
    }

    /// Committing → Idle.
    pub fn finish(&mut self) -> Result<()> {
        self.transition(FsmState::Committing, FsmState::Idle)
    }

    /// Abandon an in-flight capture, returning to Idle without appending.
    fn abort(&mut self) {
        self.state = FsmState::Idle;
    }

    /// Canonical serialization of every stored record, one per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&trace_line(record));
            out.push('\n');
        }
        out
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Operation counts from the layer kind and its output size alone. Shared by
/// `layer_cost` and metric capture so the two can never disagree.
fn cost_for_output(layer: &LayerSpec, out_len: usize) -> (u64, u64) {
    let out_len = out_len as u64;
    match *layer {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let macs = (in_features * out_features) as u64;
            (2 * macs + out_features as u64, macs)
        }
        LayerSpec::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let macs = (kernel_h * kernel_w * in_channels) as u64 * out_len;
            (2 * macs + out_len, macs)
        }
        // One comparison-against-zero per element.
        LayerSpec::ReLU => (out_len, 0),
        // window^2 - 1 comparisons per pooled output element.
        LayerSpec::MaxPool2d { window, .. } => (out_len * (window * window - 1) as u64, 0),
        LayerSpec::Flatten => (0, 0),
        // Per element: subtract max, exponentiate, divide by the sum.
        LayerSpec::Softmax => (3 * out_len, 0),
    }
}

/// (flops, macs) for one layer given its input and output shapes.
pub fn layer_cost(
    layer: &LayerSpec,
    input_shape: &[usize],
    output_shape: &[usize],
) -> Result<(u64, u64)> {
    let expected = layer.output_shape(input_shape)?;
    if expected != output_shape {
        return Err(Error::ShapeMismatch {
            expected,
            got: output_shape.to_vec(),
            context: "layer_cost output shape",
        });
    }
    Ok(cost_for_output(layer, output_shape.iter().product()))
}

/// Tera-operations per second: flops / (elapsed_seconds × 1e12).
pub fn tops_for_layer(flops: u64, layer_elapsed_us: f64) -> Result<f64> {
    if !(layer_elapsed_us > 0.0) {
        return Err(Error::ZeroElapsed);
    }
    Ok(flops as f64 / (layer_elapsed_us * 1e6))
}

/// Scalar-operation count of computing the enabled metric families for one
/// captured layer of `element_count` outputs. Single-pass families cost one
/// op per element; the activation trio and entropy each take three passes.
/// Shape-derived families (flops, macs, tops, throughput) are free at capture
/// time. Feeds the deterministic overhead model, so it must stay in step with
/// `compute_layer_metrics`.
pub fn metric_cost_flops(cfg: &CounterConfig, element_count: usize) -> u64 {
    let n = element_count as u64;
    let mut total = 0u64;
    for family in cfg.families() {
        total += match family {
            MetricFamily::Sparsity | MetricFamily::ZeroCount => n,
            MetricFamily::DenseActivity | MetricFamily::Entropy => 3 * n,
            MetricFamily::Flops
            | MetricFamily::Macs
            | MetricFamily::Tops
            | MetricFamily::Throughput => 0,
        };
    }
    total
}

/// Entropy of the normalized absolute-activation distribution, in nats.
///
/// P(a_i) = |a_i| / Σ|a_j|; an all-zero output is defined as zero entropy.
/// For a probability vector (a Softmax output) this reduces to the entropy of
/// the distribution itself. Computed as ln S − (Σ|a| ln|a|) / S, which agrees
/// with the direct −Σ P ln P sum to well under 1e-12.
fn activation_entropy(data: &[f64]) -> f64 {
    let total: f64 = data.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let weighted_log: f64 = data
        .iter()
        .map(|v| {
            let a = v.abs();
            if a > 0.0 {
                a * a.ln()
            } else {
                0.0
            }
        })
        .sum();
    (total.ln() - weighted_log / total).max(0.0)
}

/// Capture every enabled counter family from one layer's output tensor.
///
/// `elapsed_hint` is the layer's elapsed time in microseconds when the caller
/// has one; without it the time-derived tops value stays absent. A zero
/// elapsed hint (a zero-cost layer under deterministic timing, or a timer
/// reading below resolution) records tops as 0.0 rather than failing capture.
pub fn compute_layer_metrics(
    output: &Tensor,
    layer: &LayerSpec,
    cfg: &CounterConfig,
    elapsed_hint: Option<f64>,
    layer_index: usize,
) -> LayerMetrics {
    let data = output.data();
    let n = data.len();
    let (flops, macs) = cost_for_output(layer, n);

    let zero_count = data.iter().filter(|&&v| v == 0.0).count() as u64;
    let (avg, max, min) = if cfg.enabled(MetricFamily::DenseActivity) {
        let sum: f64 = data.iter().sum();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
        (
            Some(sum / n as f64),
            Some(max),
            Some(min),
        )
    } else {
        (None, None, None)
    };

    let tops = if cfg.enabled(MetricFamily::Tops) {
        elapsed_hint.map(|us| if us > 0.0 { flops as f64 / (us * 1e6) } else { 0.0 })
    } else {
        None
    };

    LayerMetrics {
        layer_index,
        layer_kind: layer.kind_name().to_string(),
        sparsity: cfg
            .enabled(MetricFamily::Sparsity)
            .then(|| zero_count as f64 / n as f64),
        zero_count: cfg.enabled(MetricFamily::ZeroCount).then_some(zero_count),
        avg_activation: avg,
        max_activation: max,
        min_activation: min,
        entropy: cfg
            .enabled(MetricFamily::Entropy)
            .then(|| activation_entropy(data)),
        flops: cfg.enabled(MetricFamily::Flops).then_some(flops),
        macs: cfg.enabled(MetricFamily::Macs).then_some(macs),
        tops,
        element_count: n as u64,
    }
}

/// Run one inference with counters attached.
///
/// Drives the memory's state machine through a full capture cycle, appends
/// exactly one checksummed record, and returns the same (class, probability)
/// pair plain `predict` would: observation never perturbs the computation,
/// because both paths run the identical kernel sequence and metrics are read
/// from the outputs afterwards.
pub fn hooked_inference(
    model: &TrainedModel,
    input: &Tensor,
    cfg: &CounterConfig,
    memory: &mut ApcMemory,
    input_id: &str,
) -> Result<((usize, Vec<f64>), TraceRecord)> {
    let spec = model.spec();
    if input.shape() != spec.input_shape {
        return Err(Error::ShapeMismatch {
            expected: spec.input_shape.clone(),
            got: input.shape().to_vec(),
            context: "hooked_inference input",
        });
    }
    if let Some(list) = cfg.include_layers() {
        for &idx in list {
            if idx >= spec.layers.len() {
                return Err(Error::invalid(format!(
                    "include list references layer {idx} but model has {} layers",
                    spec.layers.len()
                )));
            }
        }
    }

    memory.arm()?;
    match capture(model, input, cfg, memory, input_id) {
        Ok(result) => Ok(result),
        Err(e) => {
            memory.abort();
            Err(e)
        }
    }
}

fn capture(
    model: &TrainedModel,
    input: &Tensor,
    cfg: &CounterConfig,
    memory: &mut ApcMemory,
    input_id: &str,
) -> Result<((usize, Vec<f64>), TraceRecord)> {
    let spec = model.spec();
    let weights = model.weights();
    memory.begin_capture()?;

    // Same kernel calls in the same order as the plain forward pass; only
    // timestamps are taken in between.
    let mut outputs: Vec<Tensor> = Vec::with_capacity(spec.layers.len());
    let mut wall_us: Vec<f64> = Vec::with_capacity(spec.layers.len());
    let mut current = input.clone();
    for (layer, params) in spec.layers.iter().zip(weights) {
        let started = match cfg.timing() {
            TimingMode::WallClock => Some(Instant::now()),
            TimingMode::Deterministic => None,
        };
        let out = layer_forward(layer, params, &current)?;
        wall_us.push(match started {
            Some(t) => t.elapsed().as_nanos() as f64 / 1000.0,
            None => 0.0,
        });
        if !out.all_finite() {
            return Err(Error::NonFinite {
                context: layer.kind_name(),
            });
        }
        outputs.push(out.clone());
        current = out;
    }

    // Everything below observes the captured outputs; the computation that
    // produced them is already finished.
    let per_layer_elapsed: Vec<f64> = match cfg.timing() {
        TimingMode::WallClock => wall_us,
        TimingMode::Deterministic => outputs
            .iter()
            .zip(&spec.layers)
            .map(|(out, layer)| cost_for_output(layer, out.len()).0 as f64 / 1e6)
            .collect(),
    };
    let total_us: f64 = per_layer_elapsed.iter().sum();

    let layers: Vec<LayerMetrics> = outputs
        .iter()
        .enumerate()
        .filter(|(i, _)| cfg.includes_layer(*i))
        .map(|(i, out)| {
            compute_layer_metrics(out, &spec.layers[i], cfg, Some(per_layer_elapsed[i]), i)
        })
        .collect();

    let (inference_time_us, throughput_ips) = if cfg.enabled(MetricFamily::Throughput) {
        let us = total_us.round() as u64;
        let ips = if us > 0 { 1e6 / us as f64 } else { 0.0 };
        (Some(us), Some(ips))
    } else {
        (None, None)
    };

    let mut record = TraceRecord {
        input_id: input_id.to_string(),
        model_name: spec.name.clone(),
        layers,
        inference_time_us,
        throughput_ips,
        checksum: 0,
    };
    record.checksum = record_checksum(&record);

    memory.begin_commit()?;
    memory.append(record.clone())?;
    memory.finish()?;

    let prediction = prediction_from_final(spec, outputs.last().unwrap());
    Ok((prediction, record))
}

fn push_json_f64(out: &mut String, v: f64) {
    use std::fmt::Write;
    // 17 significant digits: enough to reconstruct the exact f64.
    write!(out, "{v:.16e}").unwrap();
}

fn push_opt_f64(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => push_json_f64(out, v),
        None => out.push_str("null"),
    }
}

fn push_opt_u64(out: &mut String, v: Option<u64>) {
    use std::fmt::Write;
    match v {
        Some(v) => write!(out, "{v}").unwrap(),
        None => out.push_str("null"),
    }
}

fn push_json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings serialize"));
}

fn line_with_checksum(record: &TraceRecord, checksum: u64) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(128 + record.layers.len() * 360);
    out.push_str("{\"input_id\":");
    push_json_str(&mut out, &record.input_id);
    out.push_str(",\"model_name\":");
    push_json_str(&mut out, &record.model_name);
    out.push_str(",\"layers\":[");
    for (i, m) in record.layers.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{{\"layer_index\":{}", m.layer_index).unwrap();
        out.push_str(",\"layer_kind\":");
        push_json_str(&mut out, &m.layer_kind);
        out.push_str(",\"sparsity\":");
        push_opt_f64(&mut out, m.sparsity);
        out.push_str(",\"zero_count\":");
        push_opt_u64(&mut out, m.zero_count);
        out.push_str(",\"avg_activation\":");
        push_opt_f64(&mut out, m.avg_activation);
        out.push_str(",\"max_activation\":");
        push_opt_f64(&mut out, m.max_activation);
        out.push_str(",\"min_activation\":");
        push_opt_f64(&mut out, m.min_activation);
        out.push_str(",\"entropy\":");
        push_opt_f64(&mut out, m.entropy);
        out.push_str(",\"flops\":");
        push_opt_u64(&mut out, m.flops);
        out.push_str(",\"macs\":");
        push_opt_u64(&mut out, m.macs);
        out.push_str(",\"tops\":");
        push_opt_f64(&mut out, m.tops);
        write!(out, ",\"element_count\":{}}}", m.element_count).unwrap();
    }
    out.push_str("],\"inference_time_us\":");
    push_opt_u64(&mut out, record.inference_time_us);
    out.push_str(",\"throughput_ips\":");
    push_opt_f64(&mut out, record.throughput_ips);
    write!(out, ",\"checksum\":{checksum}}}").unwrap();
    out
}

/// Canonical single-line serialization of a record (no trailing newline).
/// Field order is fixed; floats carry 17 significant digits; absent families
/// are literal nulls.
pub fn trace_line(record: &TraceRecord) -> String {
    line_with_checksum(record, record.checksum)
}

/// The checksum a record should carry: FNV-1a over its canonical line with
/// the checksum field textually zero.
pub fn record_checksum(record: &TraceRecord) -> u64 {
    fnv1a64(line_with_checksum(record, 0).as_bytes())
}

/// True iff the stored checksum matches recomputation from the record's
/// contents.
pub fn verify_record(record: &TraceRecord) -> bool {
    record.checksum == record_checksum(record)
}

/// Syntactic parse of one trace line. Unknown fields are rejected; no
/// integrity checking happens here.
pub fn parse_trace_line(line: &str) -> Result<TraceRecord> {
    serde_json::from_str(line).map_err(|e| Error::format(format!("bad trace line: {e}")))
}

/// Full verification of one trace line: it must parse, re-serialize to the
/// exact same bytes, and carry a checksum matching recomputation. The
/// byte-identity requirement catches corruption that survives a float
/// round-trip (a damaged digit beyond f64 precision still changes the line).
pub fn verify_trace_line(line: &str) -> Result<TraceRecord> {
    let record = parse_trace_line(line)?;
    if trace_line(&record) != line || !verify_record(&record) {
        return Err(Error::IntegrityError {
            input_id: record.input_id,
        });
    }
    Ok(record)
}

/// Write records as canonical JSON Lines.
pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&trace_line(record));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read and fully verify a trace file, failing on the first bad line.
pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0u64;
    for line in text.split_terminator('\n') {
        let record = verify_trace_line(line).map_err(|e| match e {
            Error::Format { message, .. } => Error::format_at(message, offset),
            other => other,
        })?;
        records.push(record);
        offset += line.len() as u64 + 1;
    }
    Ok(records)
}
