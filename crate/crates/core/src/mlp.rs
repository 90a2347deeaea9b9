//! Dense feed-forward classifier: ReLU hidden layers, softmax output,
//! categorical cross-entropy loss, and minibatch SGD.
//!
//! Single-sample operations ([`forward`], [`backward`], [`sgd_step`]) work on
//! [`Tensor`]s. Training runs on row-major minibatches through the kernels in
//! this module; the same routed step serves plain training (one parameter set)
//! and randomized layer selection (see [`crate::training`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{argmax, Tensor};

/// Smallest probability fed to the logarithm in the loss.
pub const PROB_FLOOR: f32 = 1e-12;

/// Layer widths from input to output, e.g. `784-100-10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs at least 2 layer sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer sizes must be positive: {layer_sizes:?}")));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(outputs, inputs)` of weight layer `j` (zero-based).
    pub fn layer_shape(&self, j: usize) -> (usize, usize) {
        (self.layer_sizes[j + 1], self.layer_sizes[j])
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.layer_count())
            .map(|j| {
                let (o, i) = self.layer_shape(j);
                o * i + o
            })
            .sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sizes = s
            .split('-')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad architecture '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        Architecture::new(sizes)
    }
}

/// Weight matrix (`out x in`) and bias vector (`out`) of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { weights: Tensor::zeros(vec![outputs, inputs]), bias: Tensor::zeros(vec![outputs]) }
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Trained (or initialized) parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        check_layers(&arch, &layers)?;
        Ok(Self { arch, layers })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let layers = (0..arch.layer_count())
            .map(|j| {
                let (o, i) = arch.layer_shape(j);
                Layer::zeros(o, i)
            })
            .collect();
        Self { arch: arch.clone(), layers }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, j: usize) -> &Layer {
        &self.layers[j]
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.all_finite() && l.bias.all_finite())
    }
}

fn check_layers(arch: &Architecture, layers: &[Layer]) -> Result<()> {
    if layers.len() != arch.layer_count() {
        return Err(Error::Shape(format!("{} layers for architecture {arch}", layers.len())));
    }
    for (j, layer) in layers.iter().enumerate() {
        let (o, i) = arch.layer_shape(j);
        if layer.weights.shape() != [o, i] || layer.bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "layer {j}: weights {:?}, bias {:?}, expected [{o}, {i}] and [{o}]",
                layer.weights.shape(),
                layer.bias.shape()
            )));
        }
    }
    Ok(())
}

/// Loss gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 20, batch_size: 64, seed: 0, init_scale: 1.0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument("init scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uniform `[-s/sqrt(fan_in), s/sqrt(fan_in)]` weights, zero biases.
pub fn init_params(arch: &Architecture, seed: u64, init_scale: f32) -> ModelParams {
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let layers = (0..arch.layer_count())
        .map(|j| {
            let (o, i) = arch.layer_shape(j);
            let bound = init_scale / (i as f32).sqrt();
            let weights: Vec<f32> = (0..o * i)
                .map(|_| {
                    let u: f32 = rng.random();
                    (2.0 * u - 1.0) * bound
                })
                .collect();
            Layer { weights: Tensor::new(vec![o, i], weights).unwrap(), bias: Tensor::zeros(vec![o]) }
        })
        .collect();
    ModelParams { arch: arch.clone(), layers }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Numerically stable softmax of a one-dimensional tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() > 1 || logits.is_empty() {
        return Err(Error::Shape(format!("softmax expects a non-empty vector, got {:?}", logits.shape())));
    }
    let mut out = logits.data().to_vec();
    softmax_row(&mut out);
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = ((v - max) as f64).exp();
            sum += e;
            e
        })
        .collect();
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum) as f32;
    }
}

/// Categorical cross-entropy `-sum y_c ln(max(y_hat_c, 1e-12))`.
pub fn cross_entropy(y_hat: &Tensor, y: &Tensor) -> Result<f32> {
    if y_hat.shape() != y.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", y_hat.shape(), y.shape())));
    }
    Ok(cross_entropy_row(y_hat.data(), y.data()))
}

fn cross_entropy_row(y_hat: &[f32], y: &[f32]) -> f32 {
    let loss: f64 = y_hat
        .iter()
        .zip(y)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -(t as f64) * (p.clamp(PROB_FLOOR, 1.0) as f64).ln())
        .sum();
    // -0.0 for perfect predictions
    (loss as f32).max(0.0)
}

/// Activations `Z_0 = x, ..., Z_n = softmax(...)` for one sample.
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<Vec<Tensor>> {
    if x.len() != params.arch.input_dim() || x.shape().len() > 1 {
        return Err(Error::Shape(format!("input {:?} for architecture {}", x.shape(), params.arch)));
    }
    let layers: Vec<&Layer> = params.layers.iter().collect();
    let acts = forward_rows(&layers, x.data(), 1);
    let mut out = Vec::with_capacity(acts.len() + 1);
    out.push(Tensor::vector(x.data().to_vec()));
    out.extend(acts.into_iter().map(Tensor::vector));
    Ok(out)
}

/// Output probabilities for one sample.
pub fn predict_proba(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    Ok(forward(params, x)?.pop().unwrap())
}

/// Gradients of the cross-entropy loss for one sample, given the activations
/// returned by [`forward`].
pub fn backward(params: &ModelParams, activations: &[Tensor], y: &Tensor) -> Result<Gradients> {
    let n = params.arch.layer_count();
    if activations.len() != n + 1 {
        return Err(Error::Shape(format!("{} activations for {} layers", activations.len(), n)));
    }
    for (j, a) in activations.iter().enumerate() {
        if a.len() != params.arch.layer_sizes()[j] {
            return Err(Error::Shape(format!("activation {j} has {} values", a.len())));
        }
    }
    if y.len() != params.arch.output_dim() {
        return Err(Error::Shape(format!("target has {} values", y.len())));
    }
    let layers: Vec<&Layer> = params.layers.iter().collect();
    let acts: Vec<&[f32]> = activations[1..].iter().map(Tensor::data).collect();
    let sums = backward_rows(&layers, activations[0].data(), &acts, y.data(), 1);
    let layers = sums
        .into_iter()
        .zip(&params.layers)
        .map(|((gw, gb), l)| Layer {
            weights: Tensor::new(l.weights.shape().to_vec(), gw).unwrap(),
            bias: Tensor::new(l.bias.shape().to_vec(), gb).unwrap(),
        })
        .collect();
    Ok(Gradients { layers })
}

/// `p - learning_rate * g` for every parameter.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, learning_rate: f32) -> Result<ModelParams> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::Shape("gradient layer count differs from parameters".into()));
    }
    let mut next = params.clone();
    for (layer, g) in next.layers.iter_mut().zip(&grads.layers) {
        if g.weights.shape() != layer.weights.shape() || g.bias.shape() != layer.bias.shape() {
            return Err(Error::Shape("gradient shape differs from parameters".into()));
        }
        axpy(-learning_rate, g.weights.data(), layer.weights.data_mut());
        axpy(-learning_rate, g.bias.data(), layer.bias.data_mut());
    }
    Ok(next)
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Progress of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Zero-based epoch number.
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub mean_loss: f64,
}

/// Minibatch SGD on a single parameter set.
pub fn train_baseline(data: &Dataset, arch: &Architecture, hyper: &Hyperparams) -> Result<ModelParams> {
    train_baseline_with(data, arch, hyper, &mut |_, _| {})
}

/// As [`train_baseline`], calling `observer` after every epoch.
pub fn train_baseline_with(
    data: &Dataset,
    arch: &Architecture,
    hyper: &Hyperparams,
    observer: &mut dyn FnMut(&EpochReport, &ModelParams),
) -> Result<ModelParams> {
    hyper.validate()?;
    check_dataset(data, arch)?;
    let mut models = vec![init_params(arch, hyper.seed, hyper.init_scale)];
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for epoch in 0..hyper.epochs {
        let batches = crate::data::minibatches(data.len(), hyper.batch_size, epoch_seed(hyper.seed, epoch))?;
        let mut loss = 0.0f64;
        for batch in &batches {
            data.gather(batch, &mut inputs, &mut targets);
            let choices = vec![0; batch.len() * arch.layer_count()];
            loss += routed_step(&mut models, &inputs, &targets, batch.len(), &choices, hyper.learning_rate);
        }
        let report = EpochReport { epoch, mean_loss: loss / data.len() as f64 };
        log::debug!("epoch {epoch}: loss {:.5}", report.mean_loss);
        observer(&report, &models[0]);
    }
    Ok(models.pop().unwrap())
}

pub(crate) fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, Stream::Shuffle, epoch as u64)
}

pub(crate) fn check_dataset(data: &Dataset, arch: &Architecture) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.features() != arch.input_dim() || data.classes() != arch.output_dim() {
        return Err(Error::Shape(format!(
            "dataset {}x{} does not fit architecture {arch}",
            data.features(),
            data.classes()
        )));
    }
    Ok(())
}

/// Classification accuracy in `[0, 1]`.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    check_dataset(data, &params.arch)?;
    let layers: Vec<&Layer> = params.layers.iter().collect();
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(count_correct(&layers, data, &rows) as f64 / data.len() as f64)
}

/// Number of rows in `indices` classified correctly by the given layer stack.
pub(crate) fn count_correct(layers: &[&Layer], data: &Dataset, indices: &[usize]) -> usize {
    let classes = data.classes();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut correct = 0;
    for chunk in indices.chunks(512) {
        data.gather(chunk, &mut inputs, &mut targets);
        let probs = forward_rows(layers, &inputs, chunk.len()).pop().unwrap();
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(&probs[r * classes..(r + 1) * classes]) == data.label(i))
            .count();
    }
    correct
}

// ---------------------------------------------------------------------------
// Row-major batch kernels

/// `out = x * W^T + b` for `rows` input rows.
fn affine_rows(x: &[f32], rows: usize, layer: &Layer, out: &mut [f32]) {
    let (o, i) = (layer.outputs(), layer.inputs());
    debug_assert_eq!(x.len(), rows * i);
    debug_assert_eq!(out.len(), rows * o);
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(layer.bias.data());
    }
    // SAFETY: slice lengths match the (rows x i) * (i x o) -> (rows x o) shapes.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            i,
            o,
            1.0,
            x.as_ptr(),
            i as isize,
            1,
            layer.weights.data().as_ptr(),
            1,
            i as isize,
            1.0,
            out.as_mut_ptr(),
            o as isize,
            1,
        );
    }
}

/// `gw = delta^T * a`, summed over rows.
fn weight_grad(delta: &[f32], a: &[f32], rows: usize, outs: usize, ins: usize, gw: &mut [f32]) {
    debug_assert_eq!(gw.len(), outs * ins);
    // SAFETY: (outs x rows) * (rows x ins) -> (outs x ins), lengths checked above.
    unsafe {
        matrixmultiply::sgemm(
            outs,
            rows,
            ins,
            1.0,
            delta.as_ptr(),
            1,
            outs as isize,
            a.as_ptr(),
            ins as isize,
            1,
            0.0,
            gw.as_mut_ptr(),
            ins as isize,
            1,
        );
    }
}

/// `out = delta * W`: loss gradient with respect to the layer input.
fn input_grad(delta: &[f32], rows: usize, layer: &Layer, out: &mut [f32]) {
    let (o, i) = (layer.outputs(), layer.inputs());
    debug_assert_eq!(out.len(), rows * i);
    // SAFETY: (rows x o) * (o x i) -> (rows x i).
    unsafe {
        matrixmultiply::sgemm(
            rows,
            o,
            i,
            1.0,
            delta.as_ptr(),
            o as isize,
            1,
            layer.weights.data().as_ptr(),
            i as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            i as isize,
            1,
        );
    }
}

fn bias_grad(delta: &[f32], outs: usize) -> Vec<f32> {
    let mut gb = vec![0.0; outs];
    for row in delta.chunks_exact(outs) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    gb
}

fn activate(out: &mut [f32], cols: usize, last: bool) {
    if last {
        out.chunks_exact_mut(cols).for_each(softmax_row);
    } else {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// Activations `Z_1..Z_n` for a batch through a fixed layer stack.
pub(crate) fn forward_rows(layers: &[&Layer], inputs: &[f32], rows: usize) -> Vec<Vec<f32>> {
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(layers.len());
    for (j, layer) in layers.iter().enumerate() {
        let prev = if j == 0 { inputs } else { &acts[j - 1] };
        let mut out = vec![0.0; rows * layer.outputs()];
        affine_rows(prev, rows, layer, &mut out);
        activate(&mut out, layer.outputs(), j + 1 == layers.len());
        acts.push(out);
    }
    acts
}

/// Per-layer `(sum of weight grads, sum of bias grads)` over a batch.
fn backward_rows(
    layers: &[&Layer],
    inputs: &[f32],
    acts: &[&[f32]],
    targets: &[f32],
    rows: usize,
) -> Vec<(Vec<f32>, Vec<f32>)> {
    let n = layers.len();
    let mut delta: Vec<f32> = acts[n - 1].iter().zip(targets).map(|(p, t)| p - t).collect();
    let mut grads = vec![(Vec::new(), Vec::new()); n];
    for j in (0..n).rev() {
        let layer = layers[j];
        let prev = if j == 0 { inputs } else { acts[j - 1] };
        let mut gw = vec![0.0; layer.outputs() * layer.inputs()];
        weight_grad(&delta, prev, rows, layer.outputs(), layer.inputs(), &mut gw);
        grads[j] = (gw, bias_grad(&delta, layer.outputs()));
        if j > 0 {
            let mut next = vec![0.0; rows * layer.inputs()];
            input_grad(&delta, rows, layer, &mut next);
            relu_mask(&mut next, prev);
            delta = next;
        }
    }
    grads
}

/// Zeroes gradient entries whose forward activation was not positive
/// (ReLU subgradient 0 at and below zero).
fn relu_mask(grad: &mut [f32], activation: &[f32]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn gather_rows(src: &[f32], cols: usize, rows: &[usize], dst: &mut Vec<f32>) {
    dst.clear();
    for &r in rows {
        dst.extend_from_slice(&src[r * cols..(r + 1) * cols]);
    }
}

fn scatter_rows(src: &[f32], cols: usize, rows: &[usize], dst: &mut [f32]) {
    for (k, &r) in rows.iter().enumerate() {
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[k * cols..(k + 1) * cols]);
    }
}

/// One SGD step where row `r` uses parameter set `choices[r * n + j]` at
/// layer `j`. Gradients reach only the selected sets, and each non-empty
/// (layer, set) bucket is updated with `learning_rate / bucket_size` times its
/// summed gradient. Returns the summed loss of the batch.
pub(crate) fn routed_step(
    models: &mut [ModelParams],
    inputs: &[f32],
    targets: &[f32],
    rows: usize,
    choices: &[usize],
    learning_rate: f32,
) -> f64 {
    let arch = models[0].arch.clone();
    let n = arch.layer_count();
    let m = models.len();
    debug_assert_eq!(choices.len(), rows * n);

    // buckets[j][k]: rows selecting set k at layer j, in batch order
    let buckets: Vec<Vec<Vec<usize>>> = (0..n)
        .map(|j| {
            let mut b = vec![Vec::new(); m];
            for r in 0..rows {
                b[choices[r * n + j]].push(r);
            }
            b
        })
        .collect();

    let mut gathered = Vec::new();
    let mut local = Vec::new();
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(n);
    for j in 0..n {
        let (outs, ins) = arch.layer_shape(j);
        let prev = if j == 0 { inputs } else { &acts[j - 1] };
        let mut out = vec![0.0; rows * outs];
        for (k, bucket) in buckets[j].iter().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            let layer = &models[k].layers[j];
            if bucket.len() == rows {
                affine_rows(prev, rows, layer, &mut out);
            } else {
                gather_rows(prev, ins, bucket, &mut gathered);
                local.resize(bucket.len() * outs, 0.0);
                affine_rows(&gathered, bucket.len(), layer, &mut local);
                scatter_rows(&local, outs, bucket, &mut out);
            }
        }
        activate(&mut out, outs, j + 1 == n);
        acts.push(out);
    }

    let classes = arch.output_dim();
    let loss: f64 = (0..rows)
        .map(|r| {
            cross_entropy_row(&acts[n - 1][r * classes..(r + 1) * classes], &targets[r * classes..(r + 1) * classes])
                as f64
        })
        .sum();

    let mut delta: Vec<f32> = acts[n - 1].iter().zip(targets).map(|(p, t)| p - t).collect();
    // updates[j][k] = (weight grad sum, bias grad sum, bucket size)
    let mut updates: Vec<Vec<Option<(Vec<f32>, Vec<f32>, usize)>>> = vec![vec![None; m]; n];
    let mut sub_delta = Vec::new();
    for j in (0..n).rev() {
        let (outs, ins) = arch.layer_shape(j);
        let prev = if j == 0 { inputs } else { &acts[j - 1] };
        let mut next = if j > 0 { vec![0.0; rows * ins] } else { Vec::new() };
        for (k, bucket) in buckets[j].iter().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            let layer = &models[k].layers[j];
            let mut gw = vec![0.0; outs * ins];
            let whole = bucket.len() == rows;
            let (d, a): (&[f32], &[f32]) = if whole {
                (&delta, prev)
            } else {
                gather_rows(&delta, outs, bucket, &mut sub_delta);
                gather_rows(prev, ins, bucket, &mut gathered);
                (&sub_delta, &gathered)
            };
            weight_grad(d, a, bucket.len(), outs, ins, &mut gw);
            let gb = bias_grad(d, outs);
            if j > 0 {
                if whole {
                    input_grad(d, rows, layer, &mut next);
                } else {
                    local.resize(bucket.len() * ins, 0.0);
                    input_grad(d, bucket.len(), layer, &mut local);
                    scatter_rows(&local, ins, bucket, &mut next);
                }
            }
            updates[j][k] = Some((gw, gb, bucket.len()));
        }
        if j > 0 {
            relu_mask(&mut next, prev);
            delta = next;
        }
    }

    for (j, per_model) in updates.into_iter().enumerate() {
        for (k, update) in per_model.into_iter().enumerate() {
            if let Some((gw, gb, count)) = update {
                let scale = learning_rate / count as f32;
                let layer = &mut models[k].layers[j];
                axpy(-scale, &gw, layer.weights.data_mut());
                axpy(-scale, &gb, layer.bias.data_mut());
            }
        }
    }
    loss
}
