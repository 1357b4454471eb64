use std::fs;
use std::path::Path;

use bdlab::data::LabeledDataset;
use bdlab::experiment::{
    self, cell_seed, gradcheck, replay_acceptance_rate, sweep_batch, sweep_dist, write_idx_fixture, DistSweepMode,
    ExperimentConfig,
};
use bdlab::sampling::RngStream;
use bdlab::Dataset;

/// 28×28 digits-shaped noise with a class-dependent bright bar, so the
/// fixtures look like MNIST to the network without shipping real data.
fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        for r in 0..28 {
            for c in 0..28 {
                let bar = r / 3 == class || c / 3 == class;
                let base = if bar { 200.0 } else { 20.0 };
                pixels.push((base + 40.0 * rng.unit()) as u8);
            }
        }
        labels.push(class);
    }
    LabeledDataset::from_bytes([n, 1, 28, 28], &pixels, labels, 10).unwrap()
}

fn config_text(dir: &Path, extra: &str) -> String {
    let (tri, trl) = write_idx_fixture(&synthetic(48, 1), dir, "train").unwrap();
    let (tei, tel) = write_idx_fixture(&synthetic(20, 2), dir, "t10k").unwrap();
    format!(
        "dataset = mnist\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n\
         epochs = 2\nbatch = 16\nout = {}\n{extra}",
        tri.display(),
        trl.display(),
        tei.display(),
        tel.display(),
        dir.join("runs").display()
    )
}

fn run_into(text: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(text).unwrap();
    cfg.out = out.to_path_buf();
    experiment::run_train(&cfg).unwrap();
    cfg
}

const DETERMINISTIC_FILES: [&str; 5] = ["config.txt", "summary.csv", "epochs.jsonl", "weights.txt", "steps.jsonl"];

fn snapshot(out: &Path) -> Vec<Vec<u8>> {
    DETERMINISTIC_FILES.iter().map(|f| fs::read(out.join(f)).unwrap()).collect()
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        "trainer = blind-descent\nproposal = uniform\nverbose_steps = true\nseed = 3\n",
        "trainer = blind-descent\nproposal = normal\nfreeze = random-filter\nverbose_steps = true\n",
        "trainer = gradient-check\nconv_mode = standard\nverbose_steps = true\n",
    ] {
        let text = config_text(dir.path(), extra);
        let out = dir.path().join("a");
        run_into(&text, &out);
        let first = snapshot(&out);
        fs::remove_dir_all(&out).unwrap();
        run_into(&text, &out);
        for (f, (x, y)) in DETERMINISTIC_FILES.iter().zip(first.iter().zip(snapshot(&out))) {
            assert_eq!(*x, y, "{f} differs");
        }
    }
}

#[test]
fn seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = config_text(dir.path(), "proposal = uniform\n");
    run_into(&format!("{text}seed = 1\n"), &dir.path().join("a"));
    run_into(&format!("{text}seed = 2\n"), &dir.path().join("b"));
    let w = |d: &str| fs::read(dir.path().join(d).join("weights.txt")).unwrap();
    assert_ne!(w("a"), w("b"));
}

fn summary_field(out: &Path, name: &str) -> String {
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let values: Vec<&str> = lines.next().unwrap().split(',').collect();
    values[header.iter().position(|h| *h == name).unwrap()].to_string()
}

#[test]
fn acceptance_rate_replays_exactly_from_step_stream() {
    let dir = tempfile::tempdir().unwrap();
    for extra in ["verbose_steps = true\n", "verbose_steps = true\ntrainer = gradient-check\n"] {
        let out = dir.path().join("r");
        run_into(&config_text(dir.path(), extra), &out);
        let replayed = replay_acceptance_rate(&fs::read_to_string(out.join("steps.jsonl")).unwrap()).unwrap();
        let reported: f64 = summary_field(&out, "acceptance_rate").parse().unwrap();
        assert_eq!(replayed.to_bits(), reported.to_bits());
        let steps = fs::read_to_string(out.join("steps.jsonl")).unwrap().lines().count();
        // 48 examples in batches of 16, two epochs
        assert_eq!(steps, 6);
        assert_eq!(summary_field(&out, "total_steps"), "6");
    }
}

#[test]
fn step_records_satisfy_greedy_rule() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    run_into(&config_text(dir.path(), "verbose_steps = true\nproposal = unit-uniform\n"), &out);
    for line in fs::read_to_string(out.join("steps.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let before = v["loss_before"].as_f64().unwrap();
        let after = v["loss_after"].as_f64().unwrap();
        assert_eq!(v["accepted"].as_bool().unwrap(), after < before, "{line}");
    }
}

#[test]
fn epoch_log_has_one_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    run_into(&config_text(dir.path(), ""), &out);
    let epochs: Vec<serde_json::Value> = fs::read_to_string(out.join("epochs.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 2);
    assert_eq!(epochs[1]["epoch"], 2);
    let last = epochs[1]["test_accuracy"].as_f64().unwrap();
    assert_eq!(summary_field(&out, "final_accuracy").parse::<f64>().unwrap(), last);
    assert!(!out.join("steps.jsonl").exists());
    assert_eq!(fs::read_to_string(out.join("timing.csv")).unwrap().lines().count(), 3);
}

#[test]
fn saved_weights_evaluate_to_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let cfg = run_into(&config_text(dir.path(), "trainer = gradient-check\n"), &out);
    let acc = experiment::run_eval(&cfg, &out.join("weights.txt")).unwrap();
    assert_eq!(acc.to_string(), summary_field(&out, "final_accuracy").parse::<f64>().unwrap().to_string());
}

#[test]
fn config_echo_parses_back_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let cfg = run_into(&config_text(dir.path(), "freeze = layer-cyclic\neta = 0.25\nseed = 99\n"), &out);
    let echoed = ExperimentConfig::parse(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn batch_sweep_table_shape_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg =
        ExperimentConfig::parse(&config_text(dir.path(), "epochs = 1\nseed = 5\n").replace("epochs = 2\n", ""))
            .unwrap();
    cfg.out = dir.path().join("sweep");
    let (train, test) = cfg.load_datasets().unwrap();
    let mut seen = 0;
    let table = sweep_batch(&cfg, &[16, 48], &train, &test, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(table.header, ["batch_size", "uniform_test_accuracy", "normal_test_accuracy"]);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1][0], "48");
    for cell in &table.cells {
        assert_eq!(cell.config.trainer.seed, cell_seed(5, cell.row, cell.col));
        assert!(cfg.out.join(format!("cell-{}-{}", cell.row, cell.col)).join("summary.csv").exists());
    }
    let again = sweep_batch(&cfg, &[16, 48], &train, &test, |_| {}).unwrap();
    assert_eq!(again.to_csv(), table.to_csv());
}

#[test]
fn grid_sweep_covers_nine_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg =
        ExperimentConfig::parse(&config_text(dir.path(), "epochs = 1\n").replace("epochs = 2\n", "")).unwrap();
    cfg.out = dir.path().join("grid");
    let (train, test) = cfg.load_datasets().unwrap();
    let table = sweep_dist(&cfg, DistSweepMode::Grid, &train, &test, |_| {}).unwrap();
    assert_eq!(table.rows.len(), 9);
    let combos: Vec<(String, String)> = table.rows.iter().map(|r| (r[1].clone(), r[2].clone())).collect();
    let mut unique = combos.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), 9);
    assert_eq!(table.rows[0][0], "one");
    assert_eq!(table.rows[8][0], "nine");
    // "six" is uniform proposals with random filter freezing
    assert_eq!((table.rows[5][1].as_str(), table.rows[5][2].as_str()), ("uniform", "random-filter"));

    let dist = sweep_dist(&cfg, DistSweepMode::Dist, &train, &test, |_| {}).unwrap();
    assert_eq!(dist.rows.len(), 3);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let report = gradcheck(5, None).unwrap();
    assert!(report.passed(), "{}", report.render());
    let bad = gradcheck(2, Some(1.01)).unwrap();
    assert!(!bad.passed());
}

#[test]
fn subsets_are_applied_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&config_text(dir.path(), "subset_train = 30\nsubset_test = 10\n")).unwrap();
    let (train, test) = cfg.load_datasets().unwrap();
    assert_eq!((train.len(), test.len()), (30, 10));
    for c in 0..10 {
        assert_eq!(test.labels().iter().filter(|&&l| l == c).count(), 1);
    }
}
