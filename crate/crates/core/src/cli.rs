//! Experiment stages behind the `shield` binary.
//!
//! Every stage reads an [`ExperimentConfig`] and writes into its output
//! directory. Text outputs start with `# config_hash=<hex>` and
//! `# generated_unix=<seconds>`; only the latter changes between reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::bundle::{load_bundle, save_bundle, BundleFile};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{compile_bundle, compile_model, validate_graph, BranchFreeGraph};
use crate::leakage::{default_threads, generate_traceset, Condition, TraceSet};
use crate::mlp::{accuracy, train_baseline_with, ModelParams};
use crate::qgraph::{calibration_images, QuantizedGraph};
use crate::tensor::Tensor;
use crate::training::{
    eval_bundle_accuracy, selection_rng, train_layerwise_with, train_modelwise_with, ModelBundle, SelectionMode,
};
use crate::tvla::{run_tvla, t_evolution};

pub const TIMESTAMP_PREFIX: &str = "# generated_unix=";

/// Header lines shared by all text outputs.
fn header(hash_hex: &str) -> String {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("# config_hash={hash_hex}\n{TIMESTAMP_PREFIX}{now}\n")
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::file(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

pub struct Stage<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: PathBuf,
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg, out: cfg.out_dir.clone() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_split(&self, split: Split) -> Result<Dataset> {
        let cfg = self.cfg;
        let (images, labels, limit) = match split {
            Split::Train => (&cfg.train_images, &cfg.train_labels, cfg.train_limit),
            Split::Test => (&cfg.test_images, &cfg.test_labels, cfg.test_limit),
        };
        let data = Dataset::load_mnist(images, labels, split)?;
        Ok(if limit > 0 { data.truncated(limit) } else { data })
    }

    pub fn bundle_path(&self, mode: SelectionMode) -> PathBuf {
        self.path(&format!("{}.sshd", mode.name()))
    }
}

/// Trains the configured mode and, for defended modes, the single-model
/// baseline next to it.
pub fn cmd_train(stage: &Stage) -> Result<String> {
    let cfg = stage.cfg;
    ensure_dir(&stage.out)?;
    let train = stage.load_split(Split::Train)?;
    let test = stage.load_split(Split::Test)?;
    let arch = cfg.architecture()?;
    let hyper = cfg.hyperparams();
    let mode = cfg.selection_mode()?;
    let hash = cfg.hash();

    let mut summary = String::new();
    let mut modes = vec![SelectionMode::Baseline];
    if mode != SelectionMode::Baseline {
        modes.push(mode);
    }
    for mode in modes {
        let mut csv = header(&cfg.hash_hex());
        csv.push_str("model,epoch,mean_loss,test_accuracy\n");
        let bundle = match mode {
            SelectionMode::Baseline => {
                let p = train_baseline_with(&train, &arch, &hyper, &mut |r, p| {
                    let acc = accuracy(p, &test).unwrap_or(f64::NAN);
                    writeln!(csv, "0,{},{:.6},{:.6}", r.epoch, r.mean_loss, acc).unwrap();
                    log::info!("baseline epoch {} loss {:.4} acc {:.4}", r.epoch, r.mean_loss, acc);
                })?;
                ModelBundle::baseline(p)
            }
            SelectionMode::Modelwise => train_modelwise_with(&train, &arch, cfg.models, &hyper, &mut |e, p| {
                let acc = accuracy(p[0], &test).unwrap_or(f64::NAN);
                writeln!(csv, "{},{},{:.6},{:.6}", e.model.unwrap_or(0), e.report.epoch, e.report.mean_loss, acc)
                    .unwrap();
                log::info!("modelwise model {:?} epoch {} acc {:.4}", e.model, e.report.epoch, acc);
            })?,
            SelectionMode::Layerwise => {
                let mut selector = selection_rng(hyper.seed);
                train_layerwise_with(&train, &arch, cfg.models, &hyper, &mut selector, &mut |e, p| {
                    let acc = ModelBundle::new(SelectionMode::Layerwise, p.iter().map(|m| (*m).clone()).collect())
                        .and_then(|b| eval_bundle_accuracy(&b, &test, 1, cfg.seed))
                        .unwrap_or(f64::NAN);
                    writeln!(csv, "mixed,{},{:.6},{:.6}", e.report.epoch, e.report.mean_loss, acc).unwrap();
                    log::info!("layerwise epoch {} loss {:.4} acc {:.4}", e.report.epoch, e.report.mean_loss, acc);
                })?
            }
        };
        let path = stage.bundle_path(mode);
        save_bundle(&path, &BundleFile::new(bundle, hash, cfg.quantized))?;
        write_text(&stage.path(&format!("{}_metrics.csv", mode.name())), &csv)?;
        writeln!(summary, "wrote {}", path.display()).unwrap();
    }
    Ok(summary)
}

/// Graph for a bundle file: the plain graph for baselines, the multiplexed
/// graph otherwise.
pub fn graph_for(bundle: &ModelBundle) -> Result<BranchFreeGraph> {
    match bundle.mode() {
        SelectionMode::Baseline => Ok(compile_model(bundle.model(0))),
        _ => compile_bundle(bundle),
    }
}

/// Writes `graph.txt` and `validation.txt`; fails if validation finds
/// anything.
pub fn cmd_compile(bundle_path: &Path, out: &Path) -> Result<String> {
    let file = load_bundle(bundle_path)?;
    let graph = graph_for(&file.bundle)?;
    let violations = validate_graph(&graph);
    ensure_dir(out)?;
    let hash_hex = hex::encode(file.config_hash);
    let meta = graph.meta();
    let mut report = header(&hash_hex);
    writeln!(report, "bundle={}", bundle_path.display()).unwrap();
    writeln!(report, "mode={}", meta.mode.name()).unwrap();
    writeln!(report, "models={}", meta.m).unwrap();
    writeln!(report, "nodes={}", graph.node_count()).unwrap();
    writeln!(report, "selection_bit_count={}", meta.selection_bit_count).unwrap();
    writeln!(report, "mux_count={}", meta.mux_count).unwrap();
    writeln!(report, "violations={}", violations.len()).unwrap();
    for v in &violations {
        writeln!(report, "violation: {v}").unwrap();
    }
    write_text(&out.join("graph.txt"), &format!("# config_hash={hash_hex}\n{}", graph.dump()))?;
    write_text(&out.join("validation.txt"), &report)?;
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Graph(format!("{} violation(s):\n{}", violations.len(), list.join("\n"))));
    }
    Ok(format!("{} nodes, {} selection bits, 0 violations", graph.node_count(), meta.selection_bit_count))
}

/// Accuracy of a bundle under random selection, of each constituent
/// model, of the baseline next to it, and (when configured) of the
/// quantized constituent graphs.
pub fn cmd_eval(stage: &Stage, bundle_path: &Path, trials: usize) -> Result<String> {
    if trials == 0 {
        return Err(Error::InvalidArgument("--trials must be at least 1".into()));
    }
    let cfg = stage.cfg;
    ensure_dir(&stage.out)?;
    let file = load_bundle(bundle_path)?;
    let bundle = &file.bundle;
    let test = stage.load_split(Split::Test)?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    for (k, model) in bundle.models().iter().enumerate() {
        rows.push((format!("model_{k}"), accuracy(model, &test)?));
    }
    let defended = eval_bundle_accuracy(bundle, &test, trials, cfg.seed)?;
    rows.push(("selected".into(), defended));
    let baseline_path = stage.bundle_path(SelectionMode::Baseline);
    if bundle.mode() != SelectionMode::Baseline && baseline_path.exists() {
        let base = load_bundle(&baseline_path)?;
        let base_acc = accuracy(base.bundle.model(0), &test)?;
        rows.push(("baseline".into(), base_acc));
        rows.push(("degradation".into(), base_acc - defended));
    }
    if cfg.quantized {
        let train = stage.load_split(Split::Train)?;
        let calib = calibration_images(&train, cfg.calibration_images, cfg.seed);
        for (k, model) in bundle.models().iter().enumerate() {
            rows.push((format!("quantized_model_{k}"), quantized_accuracy(model, &calib, &test, cfg.seed)?));
        }
    }
    let mut csv = header(&cfg.hash_hex());
    writeln!(csv, "# bundle={} mode={} trials={trials}", bundle_path.display(), bundle.mode().name()).unwrap();
    csv.push_str("metric,value\n");
    let mut summary = String::new();
    for (name, value) in &rows {
        writeln!(csv, "{name},{value:.6}").unwrap();
        writeln!(summary, "{name:>20}  {:.2}%", value * 100.0).unwrap();
    }
    write_text(&stage.path(&format!("{}_eval.csv", bundle.mode().name())), &csv)?;
    Ok(summary)
}

/// Test accuracy of a single model run through the quantized interpreter.
pub fn quantized_accuracy(model: &ModelParams, calib: &[Tensor], test: &Dataset, seed: u64) -> Result<f64> {
    let q = QuantizedGraph::calibrate(&compile_model(model), calib, seed)?;
    let mut correct = 0;
    for i in 0..test.len() {
        if q.classify(&Tensor::vector(test.input(i).to_vec()), &[])? == test.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Baseline and defended graphs, calibrated, for the three conditions.
struct TvlaSubjects {
    baseline: QuantizedGraph,
    defended: QuantizedGraph,
    fixed_image: Tensor,
}

fn subjects(stage: &Stage) -> Result<TvlaSubjects> {
    let cfg = stage.cfg;
    let mode = cfg.selection_mode()?;
    if mode == SelectionMode::Baseline {
        return Err(Error::Config("TVLA needs a defended mode (modelwise or layerwise)".into()));
    }
    let missing =
        |p: &Path| Error::Config(format!("{} not found; run `shield train` with the same config first", p.display()));
    let base_path = stage.bundle_path(SelectionMode::Baseline);
    let def_path = stage.bundle_path(mode);
    for p in [&base_path, &def_path] {
        if !p.exists() {
            return Err(missing(p));
        }
    }
    let baseline = load_bundle(&base_path)?.bundle;
    let defended = load_bundle(&def_path)?.bundle;
    let train = stage.load_split(Split::Train)?;
    let test = stage.load_split(Split::Test)?;
    if cfg.fixed_image_index >= test.len() {
        return Err(Error::Config(format!("fixed_image_index {} beyond test set", cfg.fixed_image_index)));
    }
    let calib = calibration_images(&train, cfg.calibration_images, cfg.seed);
    Ok(TvlaSubjects {
        baseline: QuantizedGraph::calibrate(&graph_for(&baseline)?, &calib, cfg.seed)?,
        defended: QuantizedGraph::calibrate(&graph_for(&defended)?, &calib, cfg.seed)?,
        fixed_image: Tensor::vector(test.input(cfg.fixed_image_index).to_vec()),
    })
}

fn trace_path(stage: &Stage, c: Condition) -> PathBuf {
    stage.path(&format!("traces_{}.trc", c.label()))
}

/// Generates and saves the three trace sets.
pub fn cmd_traces(stage: &Stage) -> Result<String> {
    let cfg = stage.cfg;
    ensure_dir(&stage.out)?;
    let s = subjects(stage)?;
    let leak = cfg.leakage();
    let mut summary = String::new();
    for c in Condition::ALL {
        let graph = if c == Condition::NoDefense { &s.baseline } else { &s.defended };
        let ts = generate_traceset(graph, c, cfg.n_traces, &s.fixed_image, &leak, cfg.hash(), default_threads())?;
        let path = trace_path(stage, c);
        ts.save(&path)?;
        writeln!(summary, "wrote {} ({} traces x {} points)", path.display(), ts.len(), ts.trace_len()).unwrap();
    }
    Ok(summary)
}

/// Summary row of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub max_abs_t: f64,
    pub leaky_points: usize,
    pub growth_ratio: f64,
}

/// TVLA and t-evolution on the three trace sets (generated first when
/// missing or produced by a different config).
pub fn cmd_tvla(stage: &Stage) -> Result<Vec<ConditionSummary>> {
    let cfg = stage.cfg;
    ensure_dir(&stage.out)?;
    let hash = cfg.hash();
    let stale = Condition::ALL
        .iter()
        .any(|&c| TraceSet::load(&trace_path(stage, c)).map_or(true, |ts| ts.config_hash() != &hash));
    if stale {
        cmd_traces(stage)?;
    }
    let mut out = Vec::new();
    for c in Condition::ALL {
        let ts = TraceSet::load(&trace_path(stage, c))?;
        let result = run_tvla(&ts, cfg.threshold)?;
        let checkpoints: Vec<usize> = cfg.checkpoints.iter().copied().filter(|&n| n <= ts.len()).collect();
        let curve = t_evolution(&ts, &checkpoints)?;

        let mut csv = header(&cfg.hash_hex());
        writeln!(csv, "# condition={} threshold={}", c.label(), cfg.threshold).unwrap();
        csv.push_str("index,t,leaky\n");
        for (i, t) in result.t_scores.iter().enumerate() {
            writeln!(csv, "{i},{t:.6},{}", u8::from(t.abs() > cfg.threshold)).unwrap();
        }
        write_text(&stage.path(&format!("tvla_{}.csv", c.label())), &csv)?;

        let mut csv = header(&cfg.hash_hex());
        writeln!(csv, "# condition={}", c.label()).unwrap();
        csv.push_str("n,max_abs_t\n");
        for (n, t) in &curve.checkpoints {
            writeln!(csv, "{n},{t:.6}").unwrap();
        }
        write_text(&stage.path(&format!("evolution_{}.csv", c.label())), &csv)?;

        out.push(ConditionSummary {
            condition: c,
            max_abs_t: result.max_abs_t,
            leaky_points: result.leaky_points.len(),
            growth_ratio: curve.growth_ratio().unwrap_or(f64::NAN),
        });
    }
    let mut csv = header(&cfg.hash_hex());
    csv.push_str("condition,max_abs_t,leaky_points,growth_ratio\n");
    for s in &out {
        writeln!(csv, "{},{:.6},{},{:.6}", s.condition.label(), s.max_abs_t, s.leaky_points, s.growth_ratio).unwrap();
    }
    write_text(&stage.path("tvla_summary.csv"), &csv)?;
    Ok(out)
}

fn read_csv_rows(path: &Path) -> Option<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect(),
    )
}

/// Collects whatever stage outputs exist into `report.md`.
pub fn cmd_report(stage: &Stage) -> Result<String> {
    let cfg = stage.cfg;
    ensure_dir(&stage.out)?;
    let mut md = String::new();
    writeln!(md, "<!-- config_hash={} -->", cfg.hash_hex()).unwrap();
    writeln!(md, "# Experiment report\n").unwrap();
    writeln!(md, "- architecture: {}", cfg.arch).unwrap();
    writeln!(md, "- mode: {} (m = {})", cfg.mode, cfg.models).unwrap();
    writeln!(
        md,
        "- learning rate {}, epochs {}, batch {}, seed {}",
        cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.seed
    )
    .unwrap();
    writeln!(md, "- traces per condition: {}, noise sigma {}\n", cfg.n_traces, cfg.noise_sigma).unwrap();

    let mut found = false;
    for mode in [SelectionMode::Baseline, SelectionMode::Modelwise, SelectionMode::Layerwise] {
        if let Some(rows) = read_csv_rows(&stage.path(&format!("{}_eval.csv", mode.name()))) {
            if !found {
                writeln!(md, "## Accuracy\n\n| bundle | metric | value |\n|---|---|---|").unwrap();
                found = true;
            }
            for r in rows.iter().filter(|r| r.len() == 2) {
                writeln!(md, "| {} | {} | {} |", mode.name(), r[0], r[1]).unwrap();
            }
        }
    }
    if found {
        md.push('\n');
    }
    if let Some(rows) = read_csv_rows(&stage.path("tvla_summary.csv")) {
        writeln!(md, "## Leakage assessment (threshold {})\n", cfg.threshold).unwrap();
        writeln!(md, "| condition | max abs t | leaky points | growth last/first |\n|---|---|---|---|").unwrap();
        for r in rows.iter().filter(|r| r.len() == 4) {
            writeln!(md, "| {} | {} | {} | {} |", r[0], r[1], r[2], r[3]).unwrap();
        }
        md.push('\n');
    }
    if !found && !stage.path("tvla_summary.csv").exists() {
        writeln!(md, "No stage outputs found in {}.", stage.out.display()).unwrap();
    }
    let path = stage.path("report.md");
    write_text(&path, &md)?;
    Ok(format!("wrote {}", path.display()))
}
