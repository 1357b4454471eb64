//! Experiment runner behind the command-line tool: flat `key = value`
//! configuration, metrics files, batch-size and distribution sweeps, and the
//! gradient verification report.
//!
//! Every number written to a metrics or summary file uses 17 significant
//! digits, so replaying a file reproduces the in-memory values exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_cifar10_bin, load_mnist_idx, subset, LabeledDataset};
use crate::error::{Error, Result};
use crate::gradient::{backward, finite_difference_gradient, forward_with_cache, max_relative_error};
use crate::network::{Geometry, NetworkModel};
use crate::sampling::{derive_seed, ProposalKind, ProposalSpec, RngStream};
use crate::tensor::{ConvMode, Tensor4};
use crate::trainer::{
    acceptance_rate, initial_model, train_with, FreezeKind, FreezePolicy, StepOutcome, TrainOutcome, TrainerConfig,
    TrainerKind,
};
use crate::{Dataset, Network};

const TAG_SUBSET_TRAIN: u64 = 11;
const TAG_SUBSET_TEST: u64 = 12;

/// `{:.16e}`: 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Where the examples come from. MNIST takes an image/label IDX pair per
/// split; CIFAR-10 takes a list of binary batch files per split.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Cifar10 { train_files: Vec<PathBuf>, test_files: Vec<PathBuf> },
}

impl DataSource {
    pub fn kind(&self) -> DatasetKind {
        match self {
            DataSource::Mnist { .. } => DatasetKind::Mnist,
            DataSource::Cifar10 { .. } => DatasetKind::Cifar10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    pub data: DataSource,
    pub subset_train: Option<usize>,
    pub subset_test: Option<usize>,
    pub out: PathBuf,
    pub verbose_steps: bool,
}

const KEYS: &[&str] = &[
    "trainer",
    "proposal",
    "freeze",
    "gamma",
    "eta",
    "epochs",
    "batch",
    "seed",
    "conv_mode",
    "dataset",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_files",
    "test_files",
    "subset_train",
    "subset_test",
    "out",
    "verbose_steps",
];

fn parse_num<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{raw}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true/false, got `{raw}`"))),
    }
}

fn path_list(raw: &str) -> Vec<PathBuf> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

impl ExperimentConfig {
    /// Parses a `key = value` document. `#` starts a comment; blank lines are
    /// ignored. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if entries.insert(key, value).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        let get = |k: &str| entries.get(k).copied();
        let require = |k: &str| get(k).ok_or_else(|| Error::config(format!("missing required key `{k}`")));

        let defaults = TrainerConfig::default();
        let trainer_kind = get("trainer").map(TrainerKind::parse).transpose()?.unwrap_or(defaults.trainer);
        let proposal_kind = get("proposal").map(ProposalKind::parse).transpose()?.unwrap_or(defaults.proposal.kind);
        let freeze_kind = get("freeze").map(FreezeKind::parse).transpose()?.unwrap_or(FreezeKind::None);
        let gamma = get("gamma").map(|v| parse_num("gamma", v)).transpose()?.unwrap_or(0.75);
        let eta = get("eta").map(|v| parse_num("eta", v)).transpose()?.unwrap_or(defaults.proposal.eta);
        let epochs = get("epochs").map(|v| parse_num("epochs", v)).transpose()?.unwrap_or(defaults.epochs);
        let batch_size = get("batch").map(|v| parse_num("batch", v)).transpose()?.unwrap_or(defaults.batch_size);
        let seed = get("seed").map(|v| parse_num("seed", v)).transpose()?.unwrap_or(defaults.seed);
        let conv_mode = get("conv_mode").map(ConvMode::parse).transpose()?.unwrap_or(defaults.conv_mode);

        let data = match DatasetKind::parse(require("dataset")?)? {
            DatasetKind::Mnist => {
                for k in ["train_files", "test_files"] {
                    if get(k).is_some() {
                        return Err(Error::config(format!("`{k}` is only valid for dataset = cifar10")));
                    }
                }
                DataSource::Mnist {
                    train_images: require("train_images")?.into(),
                    train_labels: require("train_labels")?.into(),
                    test_images: require("test_images")?.into(),
                    test_labels: require("test_labels")?.into(),
                }
            }
            DatasetKind::Cifar10 => {
                for k in ["train_images", "train_labels", "test_images", "test_labels"] {
                    if get(k).is_some() {
                        return Err(Error::config(format!("`{k}` is only valid for dataset = mnist")));
                    }
                }
                let train_files = path_list(require("train_files")?);
                let test_files = path_list(require("test_files")?);
                if train_files.is_empty() || test_files.is_empty() {
                    return Err(Error::config("cifar10 needs at least one train and one test file"));
                }
                DataSource::Cifar10 { train_files, test_files }
            }
        };

        let trainer = TrainerConfig {
            trainer: trainer_kind,
            proposal: ProposalSpec { kind: proposal_kind, eta },
            freeze: FreezePolicy { kind: freeze_kind, gamma },
            epochs,
            batch_size,
            seed,
            conv_mode,
            hidden_filters: defaults.hidden_filters,
        };
        trainer.validate()?;
        trainer.freeze.validate()?;
        Ok(Self {
            trainer,
            data,
            subset_train: get("subset_train").map(|v| parse_num("subset_train", v)).transpose()?,
            subset_test: get("subset_test").map(|v| parse_num("subset_test", v)).transpose()?,
            out: get("out").map_or_else(|| PathBuf::from("runs"), PathBuf::from),
            verbose_steps: get("verbose_steps").map(|v| parse_bool("verbose_steps", v)).transpose()?.unwrap_or(false),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Canonical text form; [`ExperimentConfig::parse`] maps it back to an equal value.
    pub fn to_text(&self) -> String {
        let t = &self.trainer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("trainer", t.trainer.as_str().into());
        kv("proposal", t.proposal.kind.as_str().into());
        kv("freeze", t.freeze.kind.as_str().into());
        kv("gamma", format!("{:?}", t.freeze.gamma));
        kv("eta", format!("{:?}", t.proposal.eta));
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("conv_mode", t.conv_mode.as_str().into());
        kv("dataset", self.data.kind().as_str().into());
        match &self.data {
            DataSource::Mnist { train_images, train_labels, test_images, test_labels } => {
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
            }
            DataSource::Cifar10 { train_files, test_files } => {
                let join = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
                kv("train_files", join(train_files));
                kv("test_files", join(test_files));
            }
        }
        if let Some(n) = self.subset_train {
            kv("subset_train", n.to_string());
        }
        if let Some(n) = self.subset_test {
            kv("subset_test", n.to_string());
        }
        kv("out", self.out.display().to_string());
        kv("verbose_steps", self.verbose_steps.to_string());
        s
    }

    /// Loads both splits and applies the configured stratified subsets.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.data {
            DataSource::Mnist { train_images, train_labels, test_images, test_labels } => {
                (load_mnist_idx(train_images, train_labels)?, load_mnist_idx(test_images, test_labels)?)
            }
            DataSource::Cifar10 { train_files, test_files } => {
                (load_cifar10_bin(train_files)?, load_cifar10_bin(test_files)?)
            }
        };
        let seed = self.trainer.seed;
        let train = match self.subset_train {
            Some(n) => subset(&train, n, derive_seed(seed, &[TAG_SUBSET_TRAIN]))?,
            None => train,
        };
        let test = match self.subset_test {
            Some(n) => subset(&test, n, derive_seed(seed, &[TAG_SUBSET_TEST]))?,
            None => test,
        };
        Ok((train, test))
    }
}

/// Result of one training run, as written to `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub accepted_steps: usize,
    pub total_steps: usize,
    pub train_examples: usize,
    pub test_examples: usize,
}

impl RunSummary {
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.total_steps > 0).then(|| self.accepted_steps as f64 / self.total_steps as f64)
    }
}

const SUMMARY_HEADER: &str = "dataset,trainer,proposal,freeze,gamma,eta,conv_mode,batch,epochs,seed,train_examples,\
test_examples,initial_accuracy,final_accuracy,acceptance_rate,accepted_steps,total_steps";

pub fn summary_csv(config: &ExperimentConfig, summary: &RunSummary) -> String {
    let t = &config.trainer;
    format!(
        "{SUMMARY_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        config.data.kind().as_str(),
        t.trainer.as_str(),
        t.proposal.kind.as_str(),
        t.freeze.kind.as_str(),
        fmt17(t.freeze.gamma),
        fmt17(t.proposal.eta),
        t.conv_mode.as_str(),
        t.batch_size,
        t.epochs,
        t.seed,
        summary.train_examples,
        summary.test_examples,
        fmt17(summary.initial_accuracy),
        fmt17(summary.final_accuracy),
        summary.acceptance_rate().map(fmt17).unwrap_or_default(),
        summary.accepted_steps,
        summary.total_steps,
    )
}

pub fn step_record(s: &StepOutcome) -> String {
    let mut line = format!(
        "{{\"batch_index\":{},\"loss_before\":{},\"loss_after\":{},\"accepted\":{}",
        s.batch_index,
        fmt17(s.loss_before),
        fmt17(s.loss_after),
        s.accepted
    );
    if let Some(eta) = s.sampled_eta {
        let _ = write!(line, ",\"sampled_eta\":{}", fmt17(eta));
    }
    if s.nonfinite_gradient {
        line.push_str(",\"nonfinite_gradient\":true");
    }
    line.push('}');
    line
}

/// Recomputes the acceptance rate from a `steps.jsonl` stream.
pub fn replay_acceptance_rate(steps_jsonl: &str) -> Result<f64> {
    let mut total = 0usize;
    let mut accepted = 0usize;
    for line in steps_jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(0, format!("bad step record: {e}")))?;
        total += 1;
        if v["accepted"].as_bool() == Some(true) {
            accepted += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("replay_acceptance_rate"));
    }
    Ok(accepted as f64 / total as f64)
}

pub fn weights_text(model: &Network) -> String {
    let mut s = format!("# weights {} {}\n", model.mode().as_str(), model.num_params());
    for w in model.flat_weights() {
        s.push_str(&fmt17(w));
        s.push('\n');
    }
    s
}

pub fn parse_weights(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|_| Error::format(0, format!("bad weight `{l}`"))))
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Trains on already-loaded data and writes the run's files into `out`:
/// `config.txt`, `summary.csv`, `epochs.jsonl`, `weights.txt`, `timing.csv`
/// and, with `verbose_steps`, `steps.jsonl`. Only `timing.csv` varies between
/// identical runs.
pub fn run_on(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> Result<(RunSummary, TrainOutcome<f64>)> {
    fs::create_dir_all(out)?;
    write_file(&out.join("config.txt"), &config.to_text())?;
    let mut epochs_file = fs::File::create(out.join("epochs.jsonl"))?;
    let mut timing = String::from("epoch,wall_clock_seconds\n");
    let mut io_error = None;
    let outcome = train_with(&config.trainer, train, test, |e| {
        let line = format!(
            "{{\"epoch\":{},\"test_accuracy\":{},\"acceptance_rate\":{},\"mean_loss\":{}}}\n",
            e.epoch,
            fmt17(e.test_accuracy),
            fmt17(e.acceptance_rate),
            fmt17(e.mean_loss)
        );
        if let Err(err) = epochs_file.write_all(line.as_bytes()) {
            io_error.get_or_insert(err);
        }
        let _ = writeln!(timing, "{},{:.3}", e.epoch, e.wall_clock);
    })?;
    if let Some(err) = io_error {
        return Err(err.into());
    }
    if config.verbose_steps {
        let mut s = String::new();
        for step in &outcome.steps {
            s.push_str(&step_record(step));
            s.push('\n');
        }
        write_file(&out.join("steps.jsonl"), &s)?;
    }
    let summary = RunSummary {
        initial_accuracy: outcome.initial_accuracy,
        final_accuracy: outcome.final_accuracy(),
        accepted_steps: outcome.steps.iter().filter(|s| s.accepted).count(),
        total_steps: outcome.steps.len(),
        train_examples: train.len(),
        test_examples: test.len(),
    };
    debug_assert!(outcome.steps.is_empty() || acceptance_rate(&outcome.steps).ok() == summary.acceptance_rate());
    write_file(&out.join("summary.csv"), &summary_csv(config, &summary))?;
    write_file(&out.join("weights.txt"), &weights_text(&outcome.model))?;
    write_file(&out.join("timing.csv"), &timing)?;
    Ok((summary, outcome))
}

/// Loads the configured data and trains; files go to `config.out`.
pub fn run_train(config: &ExperimentConfig) -> Result<RunSummary> {
    let (train, test) = config.load_datasets()?;
    run_on(config, &train, &test, &config.out).map(|(s, _)| s)
}

/// Test accuracy of the weights in `weights_path` under `config`'s architecture.
pub fn run_eval(config: &ExperimentConfig, weights_path: &Path) -> Result<f64> {
    let (train, test) = config.load_datasets()?;
    let mut model = initial_model(&config.trainer, &train)?;
    model.set_flat_weights(&parse_weights(&fs::read_to_string(weights_path)?)?)?;
    model.evaluate(&test, 256)
}

/// Sub-seed for sweep cell `(row, col)`.
pub fn cell_seed(base: u64, row: usize, col: usize) -> u64 {
    derive_seed(base, &[row as u64, col as u64])
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub row: usize,
    pub col: usize,
    pub label: String,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

fn run_cells(
    base: &ExperimentConfig,
    cells: Vec<(usize, usize, String, ExperimentConfig)>,
    train: &Dataset,
    test: &Dataset,
    mut progress: impl FnMut(&SweepCell),
) -> Result<Vec<SweepCell>> {
    let mut done = Vec::with_capacity(cells.len());
    for (row, col, label, config) in cells {
        let out = base.out.join(format!("cell-{row}-{col}"));
        let (summary, _) = run_on(&config, train, test, &out)?;
        let cell = SweepCell { row, col, label, config, summary };
        progress(&cell);
        done.push(cell);
    }
    Ok(done)
}

fn cell_config(base: &ExperimentConfig, row: usize, col: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.trainer.trainer = TrainerKind::BlindDescent;
    cfg.trainer.seed = cell_seed(base.trainer.seed, row, col);
    cfg.out = base.out.join(format!("cell-{row}-{col}"));
    cfg
}

/// Blind Descent for every batch size × {uniform, normal}.
pub fn sweep_batch(
    base: &ExperimentConfig,
    batch_sizes: &[usize],
    train: &Dataset,
    test: &Dataset,
    progress: impl FnMut(&SweepCell),
) -> Result<SweepTable> {
    if batch_sizes.is_empty() {
        return Err(Error::config("no batch sizes given"));
    }
    let columns = [ProposalKind::UniformAdditive, ProposalKind::NormalCentered];
    let mut cells = Vec::new();
    for (i, &bs) in batch_sizes.iter().enumerate() {
        for (j, &kind) in columns.iter().enumerate() {
            let mut cfg = cell_config(base, i, j);
            cfg.trainer.batch_size = bs;
            cfg.trainer.proposal.kind = kind;
            cfg.trainer.validate()?;
            cells.push((i, j, format!("{bs}/{}", kind.as_str()), cfg));
        }
    }
    let cells = run_cells(base, cells, train, test, progress)?;
    let rows = batch_sizes
        .iter()
        .enumerate()
        .map(|(i, bs)| {
            let mut row = vec![bs.to_string()];
            row.extend(cells.iter().filter(|c| c.row == i).map(|c| fmt17(c.summary.final_accuracy)));
            row
        })
        .collect();
    Ok(SweepTable {
        header: vec!["batch_size".into(), "uniform_test_accuracy".into(), "normal_test_accuracy".into()],
        rows,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistSweepMode {
    /// 3 distributions × 3 freeze policies.
    Grid,
    /// 3 distributions with the base freeze policy.
    Dist,
}

const GRID_NAMES: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// Distribution sweep: grid rows are ordered distribution-major
/// (unit-uniform, uniform, normal) × (none, layer-cyclic, random-filter).
pub fn sweep_dist(
    base: &ExperimentConfig,
    mode: DistSweepMode,
    train: &Dataset,
    test: &Dataset,
    progress: impl FnMut(&SweepCell),
) -> Result<SweepTable> {
    let freezes: Vec<FreezeKind> = match mode {
        DistSweepMode::Grid => FreezeKind::ALL.to_vec(),
        DistSweepMode::Dist => vec![base.trainer.freeze.kind],
    };
    let mut cells = Vec::new();
    for (i, &kind) in ProposalKind::ALL.iter().enumerate() {
        for (j, &freeze) in freezes.iter().enumerate() {
            let mut cfg = cell_config(base, i, j);
            cfg.trainer.proposal.kind = kind;
            cfg.trainer.freeze.kind = freeze;
            cfg.trainer.validate()?;
            let label = match mode {
                DistSweepMode::Grid => GRID_NAMES[i * 3 + j].to_string(),
                DistSweepMode::Dist => kind.as_str().to_string(),
            };
            cells.push((i, j, label, cfg));
        }
    }
    let cells = run_cells(base, cells, train, test, progress)?;
    let rows = cells
        .iter()
        .map(|c| {
            let t = &c.config.trainer;
            let mut row = Vec::new();
            if mode == DistSweepMode::Grid {
                row.push(c.label.clone());
            }
            row.push(t.proposal.kind.as_str().to_string());
            row.push(t.freeze.kind.as_str().to_string());
            row.push(fmt17(c.summary.final_accuracy));
            row.push(c.summary.acceptance_rate().map(fmt17).unwrap_or_default());
            row.push(t.seed.to_string());
            row
        })
        .collect();
    let mut header = Vec::new();
    if mode == DistSweepMode::Grid {
        header.push("experiment".to_string());
    }
    header.extend(["proposal", "freeze", "test_accuracy", "acceptance_rate", "seed"].map(String::from));
    Ok(SweepTable { header, rows, cells })
}

/// Worst backward-vs-central-difference discrepancy per convolution mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub epsilon: f64,
    pub seeds: u64,
    pub max_error: Vec<(ConvMode, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_error.iter().all(|&(_, e)| e <= self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (mode, err) in &self.max_error {
            let verdict = if *err <= self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{:<12} seeds={} eps={:e} max_rel_err={} tol={:e} {verdict}",
                mode.as_str(),
                self.seeds,
                self.epsilon,
                fmt17(*err),
                self.tolerance
            );
        }
        s
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_SEEDS: u64 = 20;

/// Shrunken model used by the gradient check: 10×10 single-channel input,
/// two filters in each hidden layer, ten classes.
pub fn gradcheck_model(mode: ConvMode, seed: u64) -> Result<(Network, Tensor4<f64>, Vec<usize>)> {
    let model =
        NetworkModel::three_layer(mode, Geometry::new(1, 10, 10), 10, [2, 2])?.init_weights(derive_seed(seed, &[1]));
    let mut rng = RngStream::derived(seed, &[2]);
    let batch = Tensor4::from_vec([2, 1, 10, 10], (0..200).map(|_| rng.unit()).collect())?;
    let labels = vec![rng.below(10) as usize, rng.below(10) as usize];
    Ok((model, batch, labels))
}

/// Runs the gradient check over `seeds` random tiny models in both modes.
/// `corrupt_backward`, when set, multiplies the analytic gradient by that
/// factor (negative control).
pub fn gradcheck(seeds: u64, corrupt_backward: Option<f64>) -> Result<GradcheckReport> {
    let mut max_error = Vec::new();
    for mode in [ConvMode::Standard, ConvMode::ChannelSum] {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let (model, batch, labels) = gradcheck_model(mode, seed)?;
            let mut analytic = backward(&model, &forward_with_cache(&model, &batch, &labels)?)?;
            if let Some(f) = corrupt_backward {
                analytic.scale(f);
            }
            let numeric = finite_difference_gradient(&model, &batch, &labels, GRADCHECK_EPSILON)?;
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        max_error.push((mode, worst));
    }
    Ok(GradcheckReport { tolerance: GRADCHECK_TOLERANCE, epsilon: GRADCHECK_EPSILON, seeds, max_error })
}

/// Writes `dataset` as a pair of IDX files; handy for building fixtures.
pub fn write_idx_fixture(dataset: &LabeledDataset<f64>, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let images = dir.join(format!("{stem}-images-idx3-ubyte"));
    let labels = dir.join(format!("{stem}-labels-idx1-ubyte"));
    crate::data::write_mnist_idx(dataset, &images, &labels)?;
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = mnist\ntrain_images = a\ntrain_labels = b\ntest_images = c\ntest_labels = d\n";

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.trainer.proposal.eta, 0.001);
        assert_eq!(cfg.trainer.epochs, 40);
        assert_eq!(cfg.trainer.batch_size, 16);
        assert_eq!(cfg.trainer.freeze.gamma, 0.75);
        assert!(!cfg.verbose_steps);
    }

    #[test]
    fn rejects_unknown_missing_and_duplicate_keys() {
        assert!(matches!(ExperimentConfig::parse(&format!("{MINIMAL}colour = red\n")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("dataset = mnist\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse(&format!("{MINIMAL}eta = 1\neta = 2\n")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse(&format!("{MINIMAL}eta = fast\n")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse(&format!("{MINIMAL}gamma = 2\n")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse(&format!("{MINIMAL}train_files = x\n")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("no equals sign\n"), Err(Error::Config(_))));
    }

    #[test]
    fn echo_reparses_to_equal_config() {
        let text = "# comment\ntrainer = gradient-check\nproposal = unit-uniform\nfreeze = random-filter\n\
                    gamma = 0.3\neta = 0.0123\nepochs = 3\nbatch = 7\nseed = 99\nconv_mode = standard\n\
                    dataset = cifar10\ntrain_files = x.bin, y.bin\ntest_files = z.bin\nsubset_train = 10\n\
                    subset_test = 5\nout = somewhere\nverbose_steps = true\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn step_records_are_json() {
        let s = StepOutcome {
            batch_index: 3,
            loss_before: 2.0,
            loss_after: 1.5,
            accepted: true,
            trainer: TrainerKind::GradientCheck,
            sampled_eta: Some(0.1),
            nonfinite_gradient: false,
        };
        let v: serde_json::Value = serde_json::from_str(&step_record(&s)).unwrap();
        assert_eq!(v["loss_after"].as_f64(), Some(1.5));
        assert_eq!(v["sampled_eta"].as_f64(), Some(0.1));
        assert_eq!(replay_acceptance_rate(&format!("{}\n{}\n", step_record(&s), step_record(&s))).unwrap(), 1.0);
    }

    #[test]
    fn fmt17_round_trips() {
        for x in [0.1, 1.0 / 3.0, std::f64::consts::LN_10, 1e-300, 123456.789] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn cell_seeds_are_pure_and_distinct() {
        assert_eq!(cell_seed(4, 1, 2), cell_seed(4, 1, 2));
        assert_ne!(cell_seed(4, 1, 2), cell_seed(4, 2, 1));
    }

    #[test]
    fn corrupted_backward_fails_gradcheck() {
        assert!(gradcheck(2, None).unwrap().passed());
        let bad = gradcheck(2, Some(1.01)).unwrap();
        assert!(!bad.passed());
        assert!(bad.render().contains("FAIL"));
    }
}
