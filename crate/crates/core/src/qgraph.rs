//! Quantized execution of a branch-free graph.
//!
//! Every node carries one set of [`QuantParams`]:
//!
//! * constants are quantized per tensor ahead of time;
//! * the image uses the fixed `[0, 1]` grid, selection bits the unit grid;
//! * `ReLU` keeps its input grid and clamps at the zero point, `Neg` mirrors
//!   the zero point, `Softmax` emits probabilities on a `1/256` grid;
//! * `MatMul`, `Add` and `Mul` requantize onto an output grid calibrated from
//!   the float ranges seen on a calibration set, over all selection patterns
//!   when there are few enough of them.
//!
//! `MatMul` accumulates exact integer products in `i32`.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BranchFreeGraph, OpKind};
use crate::quant::{choose_params, quantize_with, QuantParams, QuantTensor};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Output grid of quantized probabilities.
pub const SOFTMAX_QP: QuantParams = QuantParams { scale: 1.0 / 256.0, zero_point: -128 };
const BIT_QP: QuantParams = QuantParams { scale: 1.0, zero_point: 0 };
/// Selection patterns enumerated exhaustively up to this many.
const MAX_ENUMERATED_PATTERNS: usize = 64;

#[derive(Debug, Clone)]
pub struct QuantizedGraph {
    graph: BranchFreeGraph,
    params: Vec<QuantParams>,
    constants: Vec<Option<Vec<i8>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantExecution {
    /// Dequantized pre-softmax values.
    pub logits: Tensor,
    /// Dequantized output node.
    pub output: Tensor,
    /// 8-bit value of every node in node order.
    pub values: Vec<QuantTensor>,
}

/// `count` distinct training images picked by a seeded stream.
pub fn calibration_images(data: &Dataset, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = stream_rng(seed, Stream::Calibration, 0);
    let count = count.min(data.len());
    let mut picked = sample(&mut rng, data.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| Tensor::vector(data.input(i).to_vec())).collect()
}

/// Bit patterns used for calibration: all of them when there are at most
/// 64, otherwise 64 random ones.
fn calibration_patterns(bit_count: usize, seed: u64) -> Vec<Vec<f32>> {
    let to_bits = |p: usize| (0..bit_count).map(|i| if p >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
    if bit_count < usize::BITS as usize && 1usize << bit_count <= MAX_ENUMERATED_PATTERNS {
        (0..1usize << bit_count).map(to_bits).collect()
    } else {
        let mut rng = stream_rng(seed, Stream::Calibration, 1);
        (0..MAX_ENUMERATED_PATTERNS)
            .map(|_| (0..bit_count).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect()
    }
}

impl QuantizedGraph {
    pub fn calibrate(graph: &BranchFreeGraph, images: &[Tensor], seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("calibration needs at least one image".into()));
        }
        let count = graph.node_count();
        let mut lo = vec![f32::INFINITY; count];
        let mut hi = vec![f32::NEG_INFINITY; count];
        for bits in calibration_patterns(graph.selection_bit_count(), seed) {
            for image in images {
                let run = graph.execute_traced(image, &bits)?;
                for (i, v) in run.values.iter().enumerate() {
                    for &x in v.data() {
                        lo[i] = lo[i].min(x);
                        hi[i] = hi[i].max(x);
                    }
                }
            }
        }

        let mut params: Vec<QuantParams> = Vec::with_capacity(count);
        let mut constants = Vec::with_capacity(count);
        for (i, node) in graph.nodes().iter().enumerate() {
            let mut constant = None;
            let qp = match &node.kind {
                OpKind::Constant => {
                    let payload =
                        node.payload.as_ref().ok_or_else(|| Error::Graph(format!("constant {i} has no payload")))?;
                    let qp = choose_params(payload);
                    constant = Some(quantize_with(payload, qp).values().to_vec());
                    qp
                }
                OpKind::Input => QuantParams::from_range(0.0, 1.0),
                OpKind::RandomInput => BIT_QP,
                OpKind::Relu => params[node.inputs[0]],
                OpKind::Neg => {
                    let input = params[node.inputs[0]];
                    QuantParams::new(input.scale, -input.zero_point)
                        .unwrap_or_else(|_| QuantParams::from_range(lo[i], hi[i]))
                }
                OpKind::Softmax => SOFTMAX_QP,
                OpKind::MatMul | OpKind::Add | OpKind::Mul => QuantParams::from_range(lo[i], hi[i]),
                OpKind::Other(name) => return Err(Error::Graph(format!("unsupported op {name} at node {i}"))),
            };
            params.push(qp);
            constants.push(constant);
        }
        Ok(Self { graph: graph.clone(), params, constants })
    }

    pub fn graph(&self) -> &BranchFreeGraph {
        &self.graph
    }

    pub fn node_params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn execute_quantized(&self, image: &Tensor, bits: &[f32]) -> Result<QuantExecution> {
        let g = &self.graph;
        g.check_inputs(image, bits)?;
        let mut values: Vec<QuantTensor> = Vec::with_capacity(g.node_count());
        for (pos, node) in g.nodes().iter().enumerate() {
            let qp = self.params[pos];
            let arg = |i: usize| &values[node.inputs[i]];
            let q: Vec<i8> = if pos == g.image_input() {
                image.data().iter().map(|&v| qp.quantize_value(v)).collect()
            } else if let Some(slot) = g.random_inputs().iter().position(|&r| r == pos) {
                vec![bits[slot] as i8]
            } else {
                match &node.kind {
                    OpKind::Constant => self.constants[pos].clone().expect("constants quantized at calibration"),
                    OpKind::MatMul => matmul(arg(0), arg(1), qp),
                    OpKind::Add => elementwise(arg(0), arg(1), qp, |a, b| a + b),
                    OpKind::Mul => elementwise(arg(0), arg(1), qp, |a, b| a * b),
                    OpKind::Neg => {
                        let a = arg(0);
                        a.values().iter().map(|&v| qp.requantize(-a.qp().real(v))).collect()
                    }
                    OpKind::Relu => {
                        let a = arg(0);
                        let z = a.qp().zero_point as i8;
                        a.values().iter().map(|&v| v.max(z)).collect()
                    }
                    OpKind::Softmax => softmax(arg(0), qp),
                    OpKind::Input | OpKind::RandomInput | OpKind::Other(_) => {
                        return Err(Error::Graph(format!("node {pos} ({}) cannot be evaluated", node.kind)))
                    }
                }
            };
            values.push(QuantTensor::new(node.shape.clone(), q, qp)?);
        }
        let logits = crate::quant::dequantize(&values[g.logits()]);
        let output = crate::quant::dequantize(&values[g.output()]);
        Ok(QuantExecution { logits, output, values })
    }

    /// Predicted class of one image.
    pub fn classify(&self, image: &Tensor, bits: &[f32]) -> Result<usize> {
        Ok(self.execute_quantized(image, bits)?.logits.argmax())
    }
}

fn matmul(w: &QuantTensor, x: &QuantTensor, out: QuantParams) -> Vec<i8> {
    let (outs, ins) = (w.shape()[0], w.shape()[1]);
    let zw = w.qp().zero_point;
    let zx = x.qp().zero_point;
    let xs: Vec<i32> = x.values().iter().map(|&v| i32::from(v) - zx).collect();
    let multiplier = f64::from(w.qp().scale) * f64::from(x.qp().scale);
    (0..outs)
        .map(|o| {
            let row = &w.values()[o * ins..(o + 1) * ins];
            let acc: i32 = row.iter().zip(&xs).map(|(&a, &b)| (i32::from(a) - zw) * b).sum();
            out.requantize(multiplier * f64::from(acc))
        })
        .collect()
}

fn elementwise(a: &QuantTensor, b: &QuantTensor, out: QuantParams, f: impl Fn(f64, f64) -> f64) -> Vec<i8> {
    let (qa, qb) = (a.qp(), b.qp());
    if a.shape() == b.shape() {
        a.values().iter().zip(b.values()).map(|(&x, &y)| out.requantize(f(qa.real(x), qb.real(y)))).collect()
    } else if b.shape().is_empty() {
        let y = qb.real(b.values()[0]);
        a.values().iter().map(|&x| out.requantize(f(qa.real(x), y))).collect()
    } else {
        let x = qa.real(a.values()[0]);
        b.values().iter().map(|&y| out.requantize(f(x, qb.real(y)))).collect()
    }
}

fn softmax(a: &QuantTensor, out: QuantParams) -> Vec<i8> {
    let real: Vec<f64> = a.values().iter().map(|&v| a.qp().real(v)).collect();
    let max = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = real.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| out.requantize(e / sum)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{compile_bundle, compile_model};
    use crate::mlp::{init_params, Architecture};
    use crate::training::{ModelBundle, SelectionMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, dim: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::vector((0..dim).map(|_| rng.random::<f32>()).collect())).collect()
    }

    #[test]
    fn pattern_enumeration() {
        assert_eq!(calibration_patterns(0, 0), vec![Vec::<f32>::new()]);
        assert_eq!(calibration_patterns(2, 0).len(), 4);
        assert_eq!(calibration_patterns(6, 0).len(), 64);
        let random = calibration_patterns(9, 3);
        assert_eq!(random.len(), 64);
        assert_eq!(random, calibration_patterns(9, 3));
    }

    #[test]
    fn tracks_float_execution() {
        let arch = Architecture::new(vec![8, 6, 4]).unwrap();
        let p = init_params(&arch, 5, 1.0);
        let g = compile_model(&p);
        let q = QuantizedGraph::calibrate(&g, &images(64, 8, 1), 0).unwrap();
        for x in images(20, 8, 2) {
            let float = g.execute_traced(&x, &[]).unwrap();
            let quant = q.execute_quantized(&x, &[]).unwrap();
            let logits = &float.values[g.logits()];
            assert!(quant.logits.max_abs_diff(logits).unwrap() < 0.1, "{:?} vs {:?}", quant.logits, logits);
            assert_eq!(quant.values.len(), g.node_count());
        }
    }

    #[test]
    fn mux_is_exact_in_quantized_domain() {
        let arch = Architecture::new(vec![5, 3]).unwrap();
        let bundle =
            ModelBundle::new(SelectionMode::Modelwise, (0..2).map(|k| init_params(&arch, k, 1.0)).collect()).unwrap();
        let g = compile_bundle(&bundle).unwrap();
        let q = QuantizedGraph::calibrate(&g, &images(16, 5, 3), 0).unwrap();
        let run = q.execute_quantized(&images(1, 5, 4)[0], &[1.0]).unwrap();
        // weights of model 0 pass through ReLU(+1) * W unchanged
        let w0 = g.nodes().iter().position(|n| n.kind == OpKind::Constant).unwrap();
        let selected = g.nodes().iter().position(|n| n.kind == OpKind::Mul && n.inputs[1] == w0).unwrap();
        assert_eq!(run.values[selected].values(), run.values[w0].values());
        assert_eq!(run.values[selected].qp(), run.values[w0].qp());
    }

    #[test]
    fn zero_image_sits_at_zero_point() {
        let arch = Architecture::new(vec![6, 4, 3]).unwrap();
        let p = init_params(&arch, 9, 1.0);
        let g = compile_model(&p);
        let q = QuantizedGraph::calibrate(&g, &images(32, 6, 5), 0).unwrap();
        let run = q.execute_quantized(&Tensor::zeros(vec![6]), &[]).unwrap();
        let input = &run.values[g.image_input()];
        assert!(input.values().iter().all(|&v| i32::from(v) == input.qp().zero_point));
        let first_matmul = g.nodes().iter().position(|n| n.kind == OpKind::MatMul).unwrap();
        let mm = &run.values[first_matmul];
        assert!(mm.values().iter().all(|&v| i32::from(v) == mm.qp().zero_point));
        assert_eq!(run, q.execute_quantized(&Tensor::zeros(vec![6]), &[]).unwrap());
    }

    #[test]
    fn rejects_bad_bits() {
        let arch = Architecture::new(vec![3, 2]).unwrap();
        let bundle =
            ModelBundle::new(SelectionMode::Layerwise, (0..2).map(|k| init_params(&arch, k, 1.0)).collect()).unwrap();
        let g = compile_bundle(&bundle).unwrap();
        let q = QuantizedGraph::calibrate(&g, &images(4, 3, 1), 0).unwrap();
        assert!(matches!(q.execute_quantized(&Tensor::zeros(vec![3]), &[0.0]), Err(Error::BitOutOfRange { .. })));
    }
}
