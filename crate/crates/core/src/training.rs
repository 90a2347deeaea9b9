//! Multi-model training.
//!
//! * **Modelwise**: `m` networks trained independently on the full dataset;
//!   inference picks one whole network at random.
//! * **Layerwise**: `m` parameter sets trained jointly with randomized
//!   backpropagation. Every training sample draws its own layer selection,
//!   runs the forward pass through the selected per-layer parameters, and
//!   sends its gradients only to those parameters. Inference may then mix
//!   layers from different sets freely.
//!
//! Model indices in [`SelectionVector`] are zero-based.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mlp::{
    check_dataset, count_correct, epoch_seed, init_params, routed_step, train_baseline_with, Architecture, EpochReport,
    Hyperparams, Layer, ModelParams,
};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionMode {
    /// A single model; no runtime selection.
    Baseline,
    /// One random choice selects every layer of the same model.
    Modelwise,
    /// An independent random choice per layer.
    Layerwise,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Baseline => "baseline",
            SelectionMode::Modelwise => "modelwise",
            SelectionMode::Layerwise => "layerwise",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(SelectionMode::Baseline),
            "modelwise" => Ok(SelectionMode::Modelwise),
            "layerwise" => Ok(SelectionMode::Layerwise),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

/// `m` parameter sets sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    arch: Architecture,
    mode: SelectionMode,
    models: Vec<ModelParams>,
}

impl ModelBundle {
    pub fn new(mode: SelectionMode, models: Vec<ModelParams>) -> Result<Self> {
        let Some(first) = models.first() else {
            return Err(Error::InvalidArgument("bundle needs at least one model".into()));
        };
        let arch = first.arch().clone();
        if models.iter().any(|m| m.arch() != &arch) {
            return Err(Error::Shape("bundle models differ in architecture".into()));
        }
        match mode {
            SelectionMode::Baseline if models.len() != 1 => {
                return Err(Error::InvalidArgument("a baseline bundle holds exactly one model".into()))
            }
            SelectionMode::Modelwise | SelectionMode::Layerwise if models.len() < 2 => {
                return Err(Error::InvalidArgument(format!(
                    "{} bundle needs m >= 2 models, got {}",
                    mode.name(),
                    models.len()
                )))
            }
            _ => {}
        }
        Ok(Self { arch, mode, models })
    }

    pub fn baseline(model: ModelParams) -> Self {
        Self { arch: model.arch().clone(), mode: SelectionMode::Baseline, models: vec![model] }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }

    pub fn model_count(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.models
    }

    pub fn model(&self, k: usize) -> &ModelParams {
        &self.models[k]
    }

    /// Layer stack selected by `selection`.
    pub fn select_layers(&self, selection: &SelectionVector) -> Result<Vec<&Layer>> {
        let n = self.arch.layer_count();
        if selection.len() != n {
            return Err(Error::Shape(format!("selection of {} layers for {n}-layer bundle", selection.len())));
        }
        selection
            .choices()
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                self.models
                    .get(k)
                    .map(|m| m.layer(j))
                    .ok_or_else(|| Error::InvalidArgument(format!("model index {k} out of range")))
            })
            .collect()
    }

    /// Owned parameters of the mixed network named by `selection`.
    pub fn assemble(&self, selection: &SelectionVector) -> Result<ModelParams> {
        let layers = self.select_layers(selection)?.into_iter().cloned().collect();
        ModelParams::new(self.arch.clone(), layers)
    }
}

/// One parameter-set index per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionVector(Vec<usize>);

impl SelectionVector {
    pub fn new(choices: Vec<usize>, m: usize) -> Result<Self> {
        if choices.is_empty() {
            return Err(Error::InvalidArgument("selection must cover at least one layer".into()));
        }
        if let Some(&bad) = choices.iter().find(|&&k| k >= m) {
            return Err(Error::InvalidArgument(format!("choice {bad} out of range for m = {m}")));
        }
        Ok(Self(choices))
    }

    /// The same model for all `n` layers.
    pub fn uniform(model: usize, n: usize) -> Self {
        Self(vec![model; n])
    }

    pub fn choices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mixed-radix index `sum_j choice_j * m^j`; inverse of [`Self::from_index`].
    pub fn index(&self, m: usize) -> usize {
        self.0.iter().rev().fold(0, |acc, &k| acc * m + k)
    }

    pub fn from_index(mut index: usize, m: usize, n: usize) -> Self {
        let mut choices = Vec::with_capacity(n);
        for _ in 0..n {
            choices.push(index % m);
            index /= m;
        }
        Self(choices)
    }
}

/// Source of per-sample layer selections during layerwise training.
pub trait SelectionSource {
    fn draw(&mut self, m: usize, n: usize) -> SelectionVector;
}

impl<R: Rng> SelectionSource for R {
    fn draw(&mut self, m: usize, n: usize) -> SelectionVector {
        sample_selection(m, n, self)
    }
}

/// Each layer's choice uniform over `0..m`, independently.
pub fn sample_selection<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> SelectionVector {
    assert!(m >= 1 && n >= 1, "sample_selection needs m >= 1 and n >= 1");
    SelectionVector((0..n).map(|_| rng.random_range(0..m)).collect())
}

/// Distinct inference configurations: `m^n` layerwise, `m` modelwise.
pub fn count_configurations(m: usize, n: usize, mode: SelectionMode) -> Result<u64> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("m and n must be at least 1".into()));
    }
    let count = match mode {
        SelectionMode::Baseline => 1,
        SelectionMode::Modelwise => m as u64,
        SelectionMode::Layerwise => u32::try_from(n)
            .ok()
            .and_then(|n| (m as u64).checked_pow(n))
            .ok_or_else(|| Error::Overflow(format!("{m}^{n} configurations")))?,
    };
    if count > 1u64 << 63 {
        return Err(Error::Overflow(format!("{count} configurations exceed 2^63")));
    }
    Ok(count)
}

/// Progress of a multi-model run.
#[derive(Debug, Clone)]
pub struct TrainingEvent<'a> {
    /// Model being trained (modelwise) or `None` when all are trained jointly.
    pub model: Option<usize>,
    pub report: &'a EpochReport,
}

/// `m` independent baseline runs with seeds `seed+1 ..= seed+m`.
pub fn train_modelwise(data: &Dataset, arch: &Architecture, m: usize, hyper: &Hyperparams) -> Result<ModelBundle> {
    train_modelwise_with(data, arch, m, hyper, &mut |_, _| {})
}

pub fn train_modelwise_with(
    data: &Dataset,
    arch: &Architecture,
    m: usize,
    hyper: &Hyperparams,
    observer: &mut dyn FnMut(&TrainingEvent, &[&ModelParams]),
) -> Result<ModelBundle> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("modelwise training needs m >= 2, got {m}")));
    }
    let seeds: Vec<u64> = (1..=m as u64).map(|k| hyper.seed.wrapping_add(k)).collect();
    train_models_with_seeds(data, arch, hyper, &seeds, observer)
}

/// Independent runs with explicit seeds. Duplicate seeds produce duplicate
/// models; this is allowed but logged.
pub fn train_models_with_seeds(
    data: &Dataset,
    arch: &Architecture,
    hyper: &Hyperparams,
    seeds: &[u64],
    observer: &mut dyn FnMut(&TrainingEvent, &[&ModelParams]),
) -> Result<ModelBundle> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("modelwise training needs at least 2 seeds".into()));
    }
    let distinct: HashSet<u64> = seeds.iter().copied().collect();
    if distinct.len() < seeds.len() {
        log::warn!("duplicate training seeds {seeds:?}: bundle will contain identical models");
    }
    let mut models = Vec::with_capacity(seeds.len());
    for (k, &seed) in seeds.iter().enumerate() {
        let h = Hyperparams { seed, ..hyper.clone() };
        let model = train_baseline_with(data, arch, &h, &mut |report, params| {
            observer(&TrainingEvent { model: Some(k), report }, &[params]);
        })?;
        models.push(model);
    }
    ModelBundle::new(SelectionMode::Modelwise, models)
}

/// Randomized backpropagation over `m` parameter sets.
pub fn train_layerwise(data: &Dataset, arch: &Architecture, m: usize, hyper: &Hyperparams) -> Result<ModelBundle> {
    let mut selector = selection_rng(hyper.seed);
    train_layerwise_with(data, arch, m, hyper, &mut selector, &mut |_, _| {})
}

/// Selection stream used by [`train_layerwise`]; independent of the
/// initialization and shuffling streams.
pub fn selection_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Selection, 0)
}

pub fn train_layerwise_with(
    data: &Dataset,
    arch: &Architecture,
    m: usize,
    hyper: &Hyperparams,
    selector: &mut dyn SelectionSource,
    observer: &mut dyn FnMut(&TrainingEvent, &[&ModelParams]),
) -> Result<ModelBundle> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("layerwise training needs m >= 2, got {m}")));
    }
    hyper.validate()?;
    check_dataset(data, arch)?;
    let mut models: Vec<ModelParams> =
        (0..m as u64).map(|k| init_params(arch, derive_seed(hyper.seed, Stream::Init, k), hyper.init_scale)).collect();
    let n = arch.layer_count();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut choices = Vec::new();
    for epoch in 0..hyper.epochs {
        let batches = crate::data::minibatches(data.len(), hyper.batch_size, epoch_seed(hyper.seed, epoch))?;
        let mut loss = 0.0;
        for batch in &batches {
            data.gather(batch, &mut inputs, &mut targets);
            choices.clear();
            for _ in batch {
                choices.extend_from_slice(selector.draw(m, n).choices());
            }
            loss += routed_step(&mut models, &inputs, &targets, batch.len(), &choices, hyper.learning_rate);
        }
        let report = EpochReport { epoch, mean_loss: loss / data.len() as f64 };
        log::debug!("layerwise epoch {epoch}: loss {:.5}", report.mean_loss);
        let refs: Vec<&ModelParams> = models.iter().collect();
        observer(&TrainingEvent { model: None, report: &report }, &refs);
    }
    ModelBundle::new(SelectionMode::Layerwise, models)
}

/// One layerwise SGD step on an explicit batch with explicit selections.
/// Returns the summed batch loss.
pub fn layerwise_step(
    models: &mut [ModelParams],
    inputs: &[f32],
    targets: &[f32],
    selections: &[SelectionVector],
    learning_rate: f32,
) -> Result<f64> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidArgument("no models".into()));
    };
    let arch = first.arch().clone();
    if models.iter().any(|m| m.arch() != &arch) {
        return Err(Error::Shape("models differ in architecture".into()));
    }
    let rows = selections.len();
    if inputs.len() != rows * arch.input_dim() || targets.len() != rows * arch.output_dim() {
        return Err(Error::Shape(format!("batch buffers do not hold {rows} rows")));
    }
    let mut choices = Vec::with_capacity(rows * arch.layer_count());
    for s in selections {
        if s.len() != arch.layer_count() || s.choices().iter().any(|&k| k >= models.len()) {
            return Err(Error::InvalidArgument(format!("invalid selection {:?}", s.choices())));
        }
        choices.extend_from_slice(s.choices());
    }
    Ok(routed_step(models, inputs, targets, rows, &choices, learning_rate))
}

/// Plain minibatch SGD step (mean gradient) on one model.
pub fn baseline_step(model: &mut ModelParams, inputs: &[f32], targets: &[f32], learning_rate: f32) -> Result<f64> {
    let rows = inputs.len() / model.arch().input_dim().max(1);
    let n = model.arch().layer_count();
    let selections = vec![SelectionVector::uniform(0, n); rows];
    layerwise_step(std::slice::from_mut(model), inputs, targets, &selections, learning_rate)
}

/// Accuracy under random selection: every (sample, trial) pair draws a fresh
/// selection (a single model in modelwise mode) from a stream seeded by
/// `seed`, and correctness is averaged over all pairs.
pub fn eval_bundle_accuracy(bundle: &ModelBundle, data: &Dataset, trials_per_sample: usize, seed: u64) -> Result<f64> {
    if trials_per_sample == 0 {
        return Err(Error::InvalidArgument("trials_per_sample must be at least 1".into()));
    }
    check_dataset(data, &bundle.arch)?;
    let m = bundle.model_count();
    let n = bundle.arch.layer_count();
    let configs = count_configurations(m, n, SelectionMode::Layerwise)? as usize;
    let mut rng = stream_rng(seed, Stream::Evaluation, 0);

    // group (sample, trial) pairs by configuration, then evaluate each
    // configuration as one batch
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); configs];
    for i in 0..data.len() {
        for _ in 0..trials_per_sample {
            let selection = match bundle.mode {
                SelectionMode::Baseline => SelectionVector::uniform(0, n),
                SelectionMode::Modelwise => SelectionVector::uniform(rng.random_range(0..m), n),
                SelectionMode::Layerwise => sample_selection(m, n, &mut rng),
            };
            groups[selection.index(m)].push(i);
        }
    }
    let mut correct = 0usize;
    for (index, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let layers = bundle.select_layers(&SelectionVector::from_index(index, m, n))?;
        correct += count_correct(&layers, data, rows);
    }
    Ok(correct as f64 / (data.len() * trials_per_sample) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::mlp::accuracy;
    use rand::SeedableRng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            labels.push(usize::from(x[0] + x[1] * x[2] > 0.0));
            inputs.extend_from_slice(&x);
        }
        Dataset::new(4, 2, inputs, labels, Split::Train).unwrap()
    }

    fn arch(s: &[usize]) -> Architecture {
        Architecture::new(s.to_vec()).unwrap()
    }

    #[test]
    fn bundle_invariants() {
        let a = arch(&[4, 2]);
        let p = init_params(&a, 1, 1.0);
        assert!(ModelBundle::new(SelectionMode::Layerwise, vec![p.clone()]).is_err());
        assert!(ModelBundle::new(SelectionMode::Baseline, vec![p.clone(), p.clone()]).is_err());
        let other = init_params(&arch(&[4, 3]), 1, 1.0);
        assert!(ModelBundle::new(SelectionMode::Modelwise, vec![p.clone(), other]).is_err());
        assert_eq!(ModelBundle::new(SelectionMode::Modelwise, vec![p.clone(), p]).unwrap().model_count(), 2);
    }

    #[test]
    fn selection_with_one_model_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let s = sample_selection(1, 5, &mut rng);
            assert_eq!(s.len(), 5);
            assert!(s.choices().iter().all(|&k| k == 0));
        }
    }

    #[test]
    fn selection_vectors_are_uniform() {
        // 10_000 draws of 2 layers over 2 models: each of the 4 vectors
        // should appear with frequency 0.25 +- 0.02
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_selection(2, 2, &mut rng).index(2)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn selection_marginals_are_uniform() {
        for m in 2..=4 {
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let n = 3;
            let mut counts = vec![vec![0usize; m]; n];
            for _ in 0..10_000 {
                for (j, &k) in sample_selection(m, n, &mut rng).choices().iter().enumerate() {
                    counts[j][k] += 1;
                }
            }
            for per_layer in counts {
                for c in per_layer {
                    assert!((c as f64 / 10_000.0 - 1.0 / m as f64).abs() <= 0.02);
                }
            }
        }
    }

    #[test]
    fn selection_index_round_trip() {
        for index in 0..27 {
            assert_eq!(SelectionVector::from_index(index, 3, 3).index(3), index);
        }
        assert!(SelectionVector::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn configuration_counts() {
        assert_eq!(count_configurations(2, 2, SelectionMode::Layerwise).unwrap(), 4);
        assert_eq!(count_configurations(3, 1, SelectionMode::Layerwise).unwrap(), 3);
        assert_eq!(count_configurations(5, 7, SelectionMode::Modelwise).unwrap(), 5);
        assert_eq!(count_configurations(2, 63, SelectionMode::Layerwise).unwrap(), 1 << 63);
        assert!(matches!(count_configurations(3, 40, SelectionMode::Layerwise), Err(Error::Overflow(_))));
        assert!(matches!(count_configurations(2, 64, SelectionMode::Layerwise), Err(Error::Overflow(_))));
        assert!(count_configurations(10, 100, SelectionMode::Layerwise).is_err());
    }

    #[test]
    fn configuration_count_matches_enumeration() {
        fn enumerate(m: usize, n: usize) -> u64 {
            // every tuple in 0..m for each of n positions
            let mut tuples: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..n {
                tuples = tuples.into_iter().flat_map(|t| (0..m).map(move |k| [t.clone(), vec![k]].concat())).collect();
            }
            tuples.len() as u64
        }
        for m in 1..=4 {
            for n in 1..=4 {
                assert_eq!(count_configurations(m, n, SelectionMode::Layerwise).unwrap(), enumerate(m, n));
            }
        }
    }

    #[test]
    fn modelwise_requires_two_models() {
        let data = toy_data(16, 1);
        assert!(train_modelwise(&data, &arch(&[4, 2]), 1, &Hyperparams::default()).is_err());
        assert!(train_layerwise(&data, &arch(&[4, 2]), 1, &Hyperparams::default()).is_err());
    }

    #[test]
    fn modelwise_models_differ_and_identical_seeds_coincide() {
        let data = toy_data(64, 2);
        let hyper = Hyperparams { epochs: 3, batch_size: 8, seed: 5, ..Default::default() };
        let bundle = train_modelwise(&data, &arch(&[4, 3, 2]), 2, &hyper).unwrap();
        assert_ne!(bundle.model(0), bundle.model(1));
        // model k uses seed + k + 1
        let first =
            train_baseline_with(&data, &arch(&[4, 3, 2]), &Hyperparams { seed: 6, ..hyper.clone() }, &mut |_, _| {})
                .unwrap();
        assert_eq!(bundle.model(0), &first);

        let same = train_models_with_seeds(&data, &arch(&[4, 3, 2]), &hyper, &[9, 9], &mut |_, _| {}).unwrap();
        assert_eq!(same.model(0), same.model(1));
    }

    #[test]
    fn layerwise_is_deterministic() {
        let data = toy_data(64, 3);
        let hyper = Hyperparams { epochs: 2, batch_size: 16, seed: 8, ..Default::default() };
        let a = train_layerwise(&data, &arch(&[4, 3, 2]), 3, &hyper).unwrap();
        let b = train_layerwise(&data, &arch(&[4, 3, 2]), 3, &hyper).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mode(), SelectionMode::Layerwise);
    }

    struct Forced;
    impl SelectionSource for Forced {
        fn draw(&mut self, m: usize, n: usize) -> SelectionVector {
            // layer 0 always model 0, later layers alternate
            let mut v = vec![0; n];
            for (j, c) in v.iter_mut().enumerate().skip(1) {
                *c = j % m;
            }
            SelectionVector(v)
        }
    }

    #[test]
    fn unselected_parameters_stay_untouched() {
        let data = toy_data(64, 4);
        let a = arch(&[4, 3, 2]);
        let hyper = Hyperparams { epochs: 1, batch_size: 16, seed: 1, ..Default::default() };
        let bundle = train_layerwise_with(&data, &a, 2, &hyper, &mut Forced, &mut |_, _| {}).unwrap();
        let init_1 = init_params(&a, derive_seed(1, Stream::Init, 1), 1.0);
        let init_0 = init_params(&a, derive_seed(1, Stream::Init, 0), 1.0);
        // model 1 never selected for layer 0, model 0 never for layer 1
        assert_eq!(bundle.model(1).layer(0), init_1.layer(0));
        assert_eq!(bundle.model(0).layer(1), init_0.layer(1));
        assert_ne!(bundle.model(0).layer(0), init_0.layer(0));
        assert_ne!(bundle.model(1).layer(1), init_1.layer(1));
    }

    #[test]
    fn gradient_isolation_per_minibatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = arch(&[4, 3, 2]);
        for trial in 0..20 {
            let m = 3;
            let mut models: Vec<ModelParams> = (0..m).map(|k| init_params(&a, 100 * trial + k as u64, 1.0)).collect();
            let before = models.clone();
            let rows = 4;
            let inputs: Vec<f32> = (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut targets = vec![0.0; rows * 2];
            for r in 0..rows {
                targets[r * 2 + rng.random_range(0..2usize)] = 1.0;
            }
            let selections: Vec<SelectionVector> = (0..rows).map(|_| sample_selection(m, 2, &mut rng)).collect();
            layerwise_step(&mut models, &inputs, &targets, &selections, 0.1).unwrap();
            for j in 0..2 {
                for k in 0..m {
                    let selected = selections.iter().any(|s| s.choices()[j] == k);
                    let changed = models[k].layer(j) != before[k].layer(j);
                    // a selected layer may still see a zero gradient behind dead units
                    assert!(selected || !changed, "layer {j} model {k} updated without selection");
                    if selected && j == 1 {
                        assert!(changed, "output layer {k} selected but unchanged");
                    }
                }
            }
        }
    }

    #[test]
    fn bucket_update_equals_plain_update_on_sub_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = arch(&[4, 3, 2]);
        let base = init_params(&a, 4, 1.0);
        let m = 3;
        let rows = 12;
        let inputs: Vec<f32> = (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut targets = vec![0.0; rows * 2];
        for r in 0..rows {
            targets[r * 2 + rng.random_range(0..2usize)] = 1.0;
        }
        let selections: Vec<SelectionVector> = (0..rows).map(|_| sample_selection(m, 2, &mut rng)).collect();
        let mut models = vec![base.clone(); m];
        layerwise_step(&mut models, &inputs, &targets, &selections, 0.2).unwrap();

        for j in 0..2 {
            for k in 0..m {
                let sub: Vec<usize> = (0..rows).filter(|&r| selections[r].choices()[j] == k).collect();
                if sub.is_empty() {
                    continue;
                }
                let sub_in: Vec<f32> = sub.iter().flat_map(|&r| inputs[r * 4..r * 4 + 4].to_vec()).collect();
                let sub_t: Vec<f32> = sub.iter().flat_map(|&r| targets[r * 2..r * 2 + 2].to_vec()).collect();
                let mut plain = base.clone();
                baseline_step(&mut plain, &sub_in, &sub_t, 0.2).unwrap();
                assert_eq!(models[k].layer(j), plain.layer(j), "layer {j} model {k}");
            }
        }
    }

    #[test]
    fn identical_models_match_single_model_accuracy() {
        let data = toy_data(200, 5);
        let a = arch(&[4, 6, 2]);
        let p = train_baseline_with(
            &data,
            &a,
            &Hyperparams { epochs: 5, batch_size: 10, ..Default::default() },
            &mut |_, _| {},
        )
        .unwrap();
        let single = accuracy(&p, &data).unwrap();
        for mode in [SelectionMode::Modelwise, SelectionMode::Layerwise] {
            let bundle = ModelBundle::new(mode, vec![p.clone(); 3]).unwrap();
            assert_eq!(eval_bundle_accuracy(&bundle, &data, 3, 1).unwrap(), single);
        }
        let bundle = ModelBundle::new(SelectionMode::Layerwise, vec![p.clone(); 2]).unwrap();
        assert!(eval_bundle_accuracy(&bundle, &data, 0, 1).is_err());
    }
}
