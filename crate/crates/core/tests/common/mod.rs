//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shield_core::data::{Dataset, Split};
use shield_core::graph::{bits_for_selection, compile_bundle, selection_for_bits};
use shield_core::mlp::{backward, forward, init_params, Architecture, ModelParams};
use shield_core::training::{ModelBundle, SelectionMode, SelectionVector};
use shield_core::Tensor;

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn load_mnist() -> (Dataset, Dataset) {
    let d = mnist_dir();
    let train =
        Dataset::load_mnist(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"), Split::Train)
            .expect("MNIST training files under data/mnist");
    let test = Dataset::load_mnist(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"), Split::Test)
        .expect("MNIST test files under data/mnist");
    (train, test)
}

pub fn random_params(arch: &Architecture, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = init_params(arch, rng.random(), 1.0);
    for layer in p.layers_mut() {
        for v in layer.weights.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in layer.bias.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

/// Cross-entropy of a softmax MLP evaluated entirely in f64. `theta` holds
/// each layer's weights (row-major) followed by its biases.
fn loss_f64(theta: &[f64], sizes: &[usize], x: &[f64], label: usize) -> f64 {
    let mut a = x.to_vec();
    let mut off = 0;
    let n = sizes.len() - 1;
    for j in 0..n {
        let (o, i) = (sizes[j + 1], sizes[j]);
        let w = &theta[off..off + o * i];
        let b = &theta[off + o * i..off + o * i + o];
        off += o * i + o;
        let mut z: Vec<f64> = (0..o).map(|r| b[r] + (0..i).map(|c| w[r * i + c] * a[c]).sum::<f64>()).collect();
        if j + 1 < n {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = a.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    log_sum - a[label]
}

fn flatten(layers: &[shield_core::mlp::Layer]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weights.data().iter().chain(l.bias.data())).map(|&v| v as f64).collect()
}

/// Largest relative error between backprop and central differences
/// (step 1e-3) over `instances` random [4,3,2] networks.
///
/// Instances with a hidden pre-activation within 0.01 of zero are redrawn:
/// a single perturbation moves a pre-activation by at most `h * |x| <= 1e-3`,
/// so the remaining instances are differentiable over the whole stencil.
pub fn gradient_check(instances: usize, seed: u64) -> f64 {
    let arch = Architecture::new(vec![4, 3, 2]).unwrap();
    let sizes = arch.layer_sizes().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut accepted = 0;
    while accepted < instances {
        let params = random_params(&arch, &mut rng);
        let x: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l0 = params.layer(0);
        let near_kink = (0..3).any(|r| {
            let z: f32 = l0.bias.data()[r] + (0..4).map(|c| l0.weights.data()[r * 4 + c] * x[c]).sum::<f32>();
            z.abs() < 0.01
        });
        if near_kink {
            continue;
        }
        accepted += 1;
        let label = rng.random_range(0..2usize);
        let mut y = vec![0.0; 2];
        y[label] = 1.0;
        let acts = forward(&params, &Tensor::vector(x.clone())).unwrap();
        let analytic = flatten(&backward(&params, &acts, &Tensor::vector(y)).unwrap().layers);

        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut theta = flatten(params.layers());
        for k in 0..theta.len() {
            let orig = theta[k];
            theta[k] = orig + h;
            let up = loss_f64(&theta, &sizes, &x64, label);
            theta[k] = orig - h;
            let down = loss_f64(&theta, &sizes, &x64, label);
            theta[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub struct MuxReport {
    pub cases: usize,
    pub max_err: f32,
}

/// Exhaustive comparison of compiled layerwise bundles against directly
/// assembled models for m in 2..=4 and n in 1..=3, over every bit pattern
/// and `images` random inputs.
pub fn mux_equivalence(images: usize, seed: u64) -> MuxReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    let mut max_err = 0.0f32;
    for n in 1..=3 {
        let mut sizes = vec![784];
        sizes.extend([12, 9].iter().take(n - 1));
        sizes.push(10);
        let arch = Architecture::new(sizes).unwrap();
        for m in 2..=4usize {
            let models: Vec<ModelParams> = (0..m).map(|_| random_params(&arch, &mut rng)).collect();
            let bundle = ModelBundle::new(SelectionMode::Layerwise, models).unwrap();
            let graph = compile_bundle(&bundle).unwrap();
            let inputs: Vec<Tensor> =
                (0..images).map(|_| Tensor::vector((0..784).map(|_| rng.random::<f32>()).collect())).collect();

            let mut patterns: Vec<Vec<f32>> = (0..m.pow(n as u32))
                .map(|idx| bits_for_selection(&graph, &SelectionVector::from_index(idx, m, n)).unwrap())
                .collect();
            // padded codes as well
            let b = graph.selection_bit_count();
            patterns
                .extend((0..1usize << b).map(|p| (0..b).map(|i| if p >> i & 1 == 1 { -1.0 } else { 1.0 }).collect()));

            for bits in &patterns {
                let sel = selection_for_bits(&graph, bits).unwrap();
                let direct = bundle.assemble(&sel).unwrap();
                for x in &inputs {
                    let got = graph.execute(x, bits).unwrap();
                    let want = forward(&direct, x).unwrap().pop().unwrap();
                    max_err = max_err.max(got.max_abs_diff(&want).unwrap());
                    cases += 1;
                }
            }
        }
    }
    MuxReport { cases, max_err }
}
