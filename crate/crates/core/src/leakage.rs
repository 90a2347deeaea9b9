//! Simulated side-channel traces.
//!
//! Each trace sample is the Hamming weight of a node's 8-bit value, summed
//! over its elements, plus Gaussian noise. Sample order follows node order,
//! which is the same for every input because the graph is branch-free.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::qgraph::QuantizedGraph;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const TRACE_MAGIC: &[u8; 4] = b"TRCS";
pub const TRACE_VERSION: u16 = 1;

/// Hamming weight of the two's-complement byte.
pub fn leak_value(q: i8) -> f32 {
    (q as u8).count_ones() as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    /// I: the single-model graph, no selection inputs.
    NoDefense,
    /// II: the multi-model graph with every selection bit fixed to -1.
    DefenseDisabled,
    /// III: the multi-model graph with fresh random bits per trace.
    DefenseEnabled,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::NoDefense, Condition::DefenseDisabled, Condition::DefenseEnabled];

    pub fn code(self) -> u8 {
        match self {
            Condition::NoDefense => 1,
            Condition::DefenseDisabled => 2,
            Condition::DefenseEnabled => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Condition::NoDefense),
            2 => Ok(Condition::DefenseDisabled),
            3 => Ok(Condition::DefenseEnabled),
            other => Err(Error::format("trace set", format!("unknown condition {other}"))),
        }
    }

    /// Roman numeral used in file names and reports.
    pub fn label(self) -> &'static str {
        match self {
            Condition::NoDefense => "I",
            Condition::DefenseDisabled => "II",
            Condition::DefenseEnabled => "III",
        }
    }
}

/// Which nodes contribute data-dependent leakage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeakTarget {
    /// Only computed nodes leak; inputs and constants contribute noise only.
    ComputedNodes,
    AllNodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One sample per node.
    PerNode,
    /// One sample per tensor element.
    PerElement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageConfig {
    pub noise_sigma: f64,
    pub seed: u64,
    pub target: LeakTarget,
    pub granularity: Granularity,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        Self { noise_sigma: 2.0, seed: 0, target: LeakTarget::ComputedNodes, granularity: Granularity::PerNode }
    }
}

impl LeakageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Fixed,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f32>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    condition: Condition,
    trace_len: usize,
    config_hash: [u8; 32],
    traces: Vec<Trace>,
}

impl TraceSet {
    pub fn new(condition: Condition, traces: Vec<Trace>, config_hash: [u8; 32]) -> Result<Self> {
        let trace_len = traces.first().map_or(0, |t| t.samples.len());
        if traces.iter().any(|t| t.samples.len() != trace_len) {
            return Err(Error::Shape("traces differ in length".into()));
        }
        Ok(Self { condition, trace_len, config_hash, traces })
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn trace_len(&self) -> usize {
        self.trace_len
    }

    pub fn config_hash(&self) -> &[u8; 32] {
        &self.config_hash
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.traces.iter().filter(|t| t.label == label).count()
    }

    /// The first `n` traces.
    pub fn prefix(&self, n: usize) -> TraceSet {
        TraceSet { traces: self.traces[..n.min(self.len())].to_vec(), ..self.clone_header() }
    }

    fn clone_header(&self) -> TraceSet {
        TraceSet {
            condition: self.condition,
            trace_len: self.trace_len,
            config_hash: self.config_hash,
            traces: Vec::new(),
        }
    }

    /// `TRCS`, u16 version, u32 trace count, u32 trace length, u8
    /// condition, 32-byte config hash, then per trace a label byte
    /// (0 fixed, 1 random) and little-endian f32 samples.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(47 + self.len() * (1 + 4 * self.trace_len));
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.trace_len as u32).to_le_bytes());
        out.push(self.condition.code());
        out.extend_from_slice(&self.config_hash);
        for t in &self.traces {
            out.push(match t.label {
                Label::Fixed => 0,
                Label::Random => 1,
            });
            for s in &t.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 4 + 4 + 1 + 32;
        let err = |d: String| Error::format("trace set", d);
        if bytes.len() < HEADER {
            return Err(err("truncated header".into()));
        }
        if &bytes[..4] != TRACE_MAGIC {
            return Err(err("bad magic (expected TRCS)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TRACE_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let condition = Condition::from_code(bytes[14])?;
        let config_hash: [u8; 32] = bytes[15..47].try_into().unwrap();
        let record = 1 + 4 * len;
        if (bytes.len() - HEADER) as u128 != n as u128 * record as u128 {
            return Err(err(format!(
                "expected {n} traces of {len} samples, found {} body bytes",
                bytes.len() - HEADER
            )));
        }
        let traces = bytes[HEADER..]
            .chunks_exact(record)
            .map(|r| {
                let label = match r[0] {
                    0 => Label::Fixed,
                    1 => Label::Random,
                    other => return Err(err(format!("bad label byte {other}"))),
                };
                let samples = r[1..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Ok(Trace { samples, label })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TraceSet { condition, trace_len: len, config_hash, traces })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

/// Number of samples a trace of `graph` has under `cfg`.
pub fn trace_len(graph: &QuantizedGraph, cfg: &LeakageConfig) -> usize {
    match cfg.granularity {
        Granularity::PerNode => graph.graph().node_count(),
        Granularity::PerElement => graph.graph().nodes().iter().map(|n| n.shape.iter().product::<usize>()).sum(),
    }
}

/// One trace. Noise is drawn from a stream keyed by `(cfg.seed, trace_index)`.
pub fn simulate_trace(
    graph: &QuantizedGraph,
    image: &Tensor,
    bits: &[f32],
    cfg: &LeakageConfig,
    trace_index: u64,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let run = graph.execute_quantized(image, bits)?;
    let nodes = graph.graph().nodes();
    let mut samples = Vec::with_capacity(trace_len(graph, cfg));
    for (node, value) in nodes.iter().zip(&run.values) {
        let leaks = cfg.target == LeakTarget::AllNodes || !node.kind.is_source();
        match cfg.granularity {
            Granularity::PerNode => {
                let hw: f32 = if leaks { value.values().iter().map(|&q| leak_value(q)).sum() } else { 0.0 };
                samples.push(hw);
            }
            Granularity::PerElement => {
                samples.extend(value.values().iter().map(|&q| if leaks { leak_value(q) } else { 0.0 }));
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        let mut rng = stream_rng(cfg.seed, Stream::TraceNoise, trace_index);
        for s in &mut samples {
            *s += normal.sample(&mut rng) as f32;
        }
    }
    Ok(samples)
}

fn check_pairing(graph: &QuantizedGraph, condition: Condition) -> Result<()> {
    let bits = graph.graph().selection_bit_count();
    match (condition, bits) {
        (Condition::NoDefense, 0) => Ok(()),
        (Condition::NoDefense, _) => {
            Err(Error::InvalidArgument("condition I needs the single-model graph without selection bits".into()))
        }
        (_, 0) => Err(Error::InvalidArgument(format!(
            "condition {} needs a multi-model graph with selection bits",
            condition.label()
        ))),
        _ => Ok(()),
    }
}

fn one_trace(
    graph: &QuantizedGraph,
    condition: Condition,
    fixed_image: &Tensor,
    cfg: &LeakageConfig,
    index: u64,
) -> Result<Trace> {
    let mut rng: ChaCha8Rng = stream_rng(cfg.seed, Stream::TraceInput, index);
    let label = if rng.random::<bool>() { Label::Fixed } else { Label::Random };
    let random_image;
    let image = match label {
        Label::Fixed => fixed_image,
        Label::Random => {
            random_image = Tensor::vector((0..fixed_image.len()).map(|_| rng.random::<f32>()).collect());
            &random_image
        }
    };
    let bit_count = graph.graph().selection_bit_count();
    let bits: Vec<f32> = match condition {
        Condition::NoDefense => Vec::new(),
        Condition::DefenseDisabled => vec![-1.0; bit_count],
        Condition::DefenseEnabled => (0..bit_count).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
    };
    let samples = simulate_trace(graph, image, &bits, cfg, index)?;
    Ok(Trace { samples, label })
}

/// Fixed-vs-random trace set. Each trace is labelled fixed or random with
/// probability 1/2; random traces use a fresh uniform image. Every trace's
/// randomness depends only on `(cfg.seed, trace index)`, so the result does
/// not depend on `threads`.
pub fn generate_traceset(
    graph: &QuantizedGraph,
    condition: Condition,
    n_traces: usize,
    fixed_image: &Tensor,
    cfg: &LeakageConfig,
    config_hash: [u8; 32],
    threads: usize,
) -> Result<TraceSet> {
    if n_traces < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 traces, got {n_traces}")));
    }
    cfg.validate()?;
    check_pairing(graph, condition)?;
    let threads = threads.clamp(1, n_traces);
    let chunk = n_traces.div_ceil(threads);
    let traces: Vec<Trace> = if threads == 1 {
        (0..n_traces as u64).map(|i| one_trace(graph, condition, fixed_image, cfg, i)).collect::<Result<_>>()?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = (t * chunk) as u64..((t + 1) * chunk).min(n_traces) as u64;
                    s.spawn(move || {
                        range.map(|i| one_trace(graph, condition, fixed_image, cfg, i)).collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(n_traces);
            for h in handles {
                all.extend(h.join().expect("trace worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    TraceSet::new(condition, traces, config_hash)
}

/// Worker count for trace generation.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{compile_bundle, compile_model};
    use crate::mlp::{init_params, Architecture};
    use crate::training::{ModelBundle, SelectionMode};

    fn images(n: usize, dim: usize) -> Vec<Tensor> {
        (0..n).map(|i| Tensor::vector((0..dim).map(|p| ((i * 7 + p * 3) % 11) as f32 / 10.0).collect())).collect()
    }

    fn graphs() -> (QuantizedGraph, QuantizedGraph) {
        let arch = Architecture::new(vec![12, 6, 4]).unwrap();
        let models: Vec<_> = (0..3).map(|k| init_params(&arch, 70 + k, 1.0)).collect();
        let calib = images(16, 12);
        let base = QuantizedGraph::calibrate(&compile_model(&models[0]), &calib, 0).unwrap();
        let bundle = ModelBundle::new(SelectionMode::Layerwise, models).unwrap();
        let defended = QuantizedGraph::calibrate(&compile_bundle(&bundle).unwrap(), &calib, 0).unwrap();
        (base, defended)
    }

    fn quiet() -> LeakageConfig {
        LeakageConfig { noise_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn hamming_weights() {
        assert_eq!(leak_value(0), 0.0);
        assert_eq!(leak_value(-1), 8.0);
        assert_eq!(leak_value(0x0F), 4.0);
        assert_eq!(leak_value(i8::MIN), 1.0);
    }

    #[test]
    fn noiseless_traces_are_reproducible_and_data_dependent() {
        let (base, _) = graphs();
        let x = &images(2, 12);
        let a = simulate_trace(&base, &x[0], &[], &quiet(), 0).unwrap();
        assert_eq!(a, simulate_trace(&base, &x[0], &[], &quiet(), 5).unwrap());
        let b = simulate_trace(&base, &x[1], &[], &quiet(), 0).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), base.graph().node_count());
        let per_element = LeakageConfig { granularity: Granularity::PerElement, ..quiet() };
        assert_eq!(simulate_trace(&base, &x[0], &[], &per_element, 0).unwrap().len(), trace_len(&base, &per_element));
    }

    #[test]
    fn source_nodes_leak_only_when_targeted() {
        let (base, _) = graphs();
        let x = &images(1, 12)[0];
        let computed = simulate_trace(&base, x, &[], &quiet(), 0).unwrap();
        let all = simulate_trace(&base, x, &[], &LeakageConfig { target: LeakTarget::AllNodes, ..quiet() }, 0).unwrap();
        for (i, node) in base.graph().nodes().iter().enumerate() {
            if node.kind.is_source() {
                assert_eq!(computed[i], 0.0);
            } else {
                assert_eq!(computed[i], all[i]);
            }
        }
    }

    #[test]
    fn condition_pairing() {
        let (base, defended) = graphs();
        let x = &images(1, 12)[0];
        let cfg = LeakageConfig::default();
        assert!(generate_traceset(&base, Condition::DefenseEnabled, 10, x, &cfg, [0; 32], 1).is_err());
        assert!(generate_traceset(&defended, Condition::NoDefense, 10, x, &cfg, [0; 32], 1).is_err());
        assert!(generate_traceset(&base, Condition::NoDefense, 1, x, &cfg, [0; 32], 1).is_err());
    }

    #[test]
    fn fixed_traces_under_condition_two_are_identical() {
        let (_, defended) = graphs();
        let x = &images(1, 12)[0];
        let ts = generate_traceset(&defended, Condition::DefenseDisabled, 200, x, &quiet(), [0; 32], 1).unwrap();
        let fixed: Vec<_> = ts.traces().iter().filter(|t| t.label == Label::Fixed).collect();
        assert!(fixed.len() > 50);
        assert!(fixed.iter().all(|t| t.samples == fixed[0].samples));

        let ts = generate_traceset(&defended, Condition::DefenseEnabled, 200, x, &quiet(), [0; 32], 1).unwrap();
        let fixed: Vec<_> = ts.traces().iter().filter(|t| t.label == Label::Fixed).collect();
        assert!(fixed.iter().any(|t| t.samples != fixed[0].samples));
    }

    #[test]
    fn threads_do_not_change_results() {
        let (_, defended) = graphs();
        let x = &images(1, 12)[0];
        let cfg = LeakageConfig { seed: 4, ..Default::default() };
        let serial = generate_traceset(&defended, Condition::DefenseEnabled, 101, x, &cfg, [1; 32], 1).unwrap();
        let parallel = generate_traceset(&defended, Condition::DefenseEnabled, 101, x, &cfg, [1; 32], 3).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn label_split_is_balanced() {
        let (base, _) = graphs();
        let x = &images(1, 12)[0];
        let ts =
            generate_traceset(&base, Condition::NoDefense, 4000, x, &LeakageConfig::default(), [0; 32], 1).unwrap();
        let fixed = ts.count(Label::Fixed) as i64;
        assert!((fixed - 2000).abs() <= 150, "{fixed}");
    }

    #[test]
    fn file_round_trip() {
        let (base, _) = graphs();
        let x = &images(1, 12)[0];
        let ts = generate_traceset(&base, Condition::NoDefense, 30, x, &LeakageConfig::default(), [9; 32], 1).unwrap();
        let bytes = ts.encode();
        assert_eq!(TraceSet::decode(&bytes).unwrap(), ts);
        assert!(TraceSet::decode(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(TraceSet::decode(&bad).is_err());
    }
}
