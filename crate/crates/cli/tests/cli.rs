use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpssm_cli::experiment::{read_records, ResultRecord};
use gpssm_cli::table::{Cell, Table};
use gpssm_core::data::{read_trajectories, ColumnSpec};

fn gpssm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpssm"))
        .args(args)
        .env("GPSSM_OUT", out)
        .env_remove("GPSSM_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// The single run directory under `<out>/<name>/`.
fn run_dir(out: &Path, name: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.join(name))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    dirs.sort();
    dirs.pop().expect("a run directory")
}

const LINEAR: &str = r#"
name = "linear"
seeds = [0]
[dataset]
kind = "linear"
a = [[0.9]]
b = [[1.0]]
c = [[1.0]]
q = [[0.01]]
r = [[0.01]]
length = 40
train_trajectories = 2
test_trajectories = 1
[model]
num_inducing = 5
identity_mean = true
[train]
algorithm = "cbf-ssm"
iterations = 5
seq_len = 10
batch_size = 2
samples = 2
[eval]
samples = 4
"#;

#[test]
fn unknown_config_key_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "name = \"x\"\nlearning_rate = 0.1\n");
    let out = gpssm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let missing = gpssm(&["train", "--config", "/nonexistent/config.toml"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "m.toml",
        "[dataset]\nkind = \"manifest\"\npath = \"nowhere/manifest.toml\"\n",
    );
    let out = gpssm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(tmp.path(), "lin.toml", LINEAR);
    let too_long = gpssm(&["train", "--config", cfg.to_str().unwrap(), "--seqlen", "500"], tmp.path());
    assert_eq!(too_long.status.code(), Some(3));
}

#[test]
fn numeric_failure_exits_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let body = LINEAR.replace("iterations = 5", "iterations = 50\nlearning_rate = 1e8");
    let cfg = write_config(tmp.path(), "huge.toml", &body);
    let out = gpssm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_layout_and_repeats_over_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let body = LINEAR.replace("seeds = [0]", "seeds = [0, 1, 2, 3, 4]");
    let cfg = write_config(tmp.path(), "lin.toml", &body);
    let out = gpssm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(tmp.path(), "linear");
    let records = read_records(&dir.join("results.jsonl")).unwrap();
    assert_eq!(records.len(), 5);
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
    for r in &records {
        assert!(r.rmse.is_finite());
        assert!(dir.join(&r.elbo_trace).exists());
        assert!(dir.join(&r.model_file).exists());
    }
    assert_eq!(fs::read_to_string(dir.join("timings.jsonl")).unwrap().lines().count(), 5);
    assert!(dir.join("config.toml").exists());
}

#[test]
fn dubins_smoke_run_has_finite_rmse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "dubins.toml",
        r#"
name = "dubins"
[dataset]
kind = "dubins"
length = 100
train_trajectories = 2
test_trajectories = 1
[model]
identity_mean = true
kernel_variance = 0.001
[train]
iterations = 200
seq_len = 50
batch_size = 2
samples = 4
learning_rate = 0.01
[eval]
samples = 16
"#,
    );
    let out = gpssm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_records(&run_dir(tmp.path(), "dubins").join("results.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    assert!(records[0].rmse.is_finite() && records[0].rmse_raw.is_finite());
    assert_eq!(records[0].algorithm, "CBF-SSM-50");
}

#[test]
fn reruns_reproduce_records_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lin.toml", LINEAR);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = gpssm(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7"], out);
        assert!(o.status.success());
    }
    let ra = fs::read(run_dir(&a, "linear").join("results.jsonl")).unwrap();
    let rb = fs::read(run_dir(&b, "linear").join("results.jsonl")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn seqlen_sweep_emits_one_row_per_algorithm_and_length() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{LINEAR}\n[[algorithms]]\nalgorithm = \"pr-ssm\"\n[[algorithms]]\nalgorithm = \"cbf-ssm\"\n");
    let cfg = write_config(tmp.path(), "lin.toml", &body);
    let out = gpssm(
        &["seqlen-sweep", "--config", cfg.to_str().unwrap(), "--lengths", "10,20"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run_dir(tmp.path(), "linear").join("seqlen.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "algorithm,seqlen,rmse_mean,rmse_std,runs");
    assert_eq!(lines.len(), 1 + 2 * 2);

    let single = gpssm(
        &["seqlen-sweep", "--config", cfg.to_str().unwrap(), "--seqlen", "10", "--algorithm", "pr-ssm"],
        &tmp.path().join("single"),
    );
    assert!(single.status.success());
    let csv = fs::read_to_string(run_dir(&tmp.path().join("single"), "linear").join("seqlen.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

fn record(dataset: &str, algorithm: &str, seed: u64, rmse: f64) -> ResultRecord {
    ResultRecord {
        experiment: "fixture".into(),
        dataset: dataset.into(),
        algorithm: algorithm.into(),
        k_soft: 50.0,
        beta: 1.0,
        seed,
        seqlen: 50,
        iterations: 0,
        rmse,
        rmse_raw: rmse,
        log_likelihood: 0.0,
        final_elbo: 0.0,
        elbo_trace: String::new(),
        model_file: String::new(),
    }
}

#[test]
fn benchmark_table_aggregates_records() {
    let values = [0.41, 0.47, 0.44, 0.52, 0.39];
    let mut records: Vec<ResultRecord> =
        values.iter().enumerate().map(|(i, v)| record("Tank", "PR-SSM", i as u64, *v)).collect();
    records.push(record("Tank", "VCDT", 0, 0.9));
    records.push(record("Dryer", "PR-SSM", 0, 0.1));
    let table = Table::from_records(&records);

    // hand-computed sample statistics
    let mean = values.iter().sum::<f64>() / 5.0;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    let cell = table.rows[0].1[0].unwrap();
    assert!((cell.mean - mean).abs() < 1e-12);
    assert!((cell.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(table.rows[0].1[1].unwrap().render(), "0.900 (0.000)");
    assert_eq!(table.best(0), "PR-SSM");
    assert_eq!(table.missing(), vec![("Dryer".to_string(), "VCDT".to_string())]);
    let text = table.to_text();
    assert!(text.lines().next().unwrap().starts_with("dataset"));
    assert!(text.contains("Dryer"));
}

#[test]
fn published_actuator_row_renders() {
    let cells = [(0.446, 0.017), (1.060, 0.490), (0.452, 0.014), (0.452, 0.013), (0.985, 0.360)];
    let table = Table {
        algorithms: ["PR-SSM", "VCDT", "CBF-SSM-1", "CBF-SSM-50", "CBF-SSM-1S"].map(String::from).to_vec(),
        rows: vec![(
            "Actuator".into(),
            cells.iter().map(|&(mean, std)| Some(Cell { mean, std, runs: 5 })).collect(),
        )],
    };
    let text = table.to_text();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("Actuator"));
    assert!(row.contains("0.446 (0.017)"));
    assert!(row.contains("1.060 (0.490)"));
    assert_eq!(table.best(0), "PR-SSM");
}

#[test]
fn benchmark_command_reads_results_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("results.jsonl");
    let lines: Vec<String> = [0.40, 0.50]
        .iter()
        .enumerate()
        .map(|(i, v)| serde_json::to_string(&record("Flutter", "CBF-SSM-50", i as u64, *v)).unwrap())
        .collect();
    fs::write(&path, lines.join("\n")).unwrap();
    let out = gpssm(&["benchmark", "--results", path.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.450 (0.071)"), "{stdout}");
    let dir = run_dir(tmp.path(), "benchmark");
    let csv = fs::read_to_string(dir.join("benchmark.csv")).unwrap();
    assert!(csv.starts_with("dataset,CBF-SSM-50_mean,CBF-SSM-50_std,best"));
}

#[test]
fn simulate_then_train_and_predict_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lin.toml", LINEAR);
    let out = gpssm(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "3"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data_dir = run_dir(tmp.path(), "linear");
    let manifest = data_dir.join("manifest.toml");
    assert!(data_dir.join("train.csv").exists() && manifest.exists());

    let body = format!(
        "name = \"from-csv\"\n[dataset]\nkind = \"manifest\"\npath = \"{}\"\n[model]\nnum_inducing = 5\n[train]\niterations = 5\nseq_len = 10\nsamples = 2\n[eval]\nsamples = 8\n",
        manifest.display()
    );
    let cfg = write_config(tmp.path(), "csv.toml", &body);
    let out = gpssm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(tmp.path(), "from-csv");
    let rec = &read_records(&dir.join("results.jsonl")).unwrap()[0];
    let model = dir.join(&rec.model_file);
    let test_csv = data_dir.join("test.csv");

    // horizon equal to the lag leaves nothing to predict
    let pred = dir.join("empty.csv");
    let args = [
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--input",
        test_csv.to_str().unwrap(),
        "--horizon",
        "5",
        "--out",
        pred.to_str().unwrap(),
    ];
    assert_eq!(gpssm(&args, tmp.path()).status.code(), Some(2));
    assert!(!pred.exists());

    let out = gpssm(
        &["predict", "--model", model.to_str().unwrap(), "--input", test_csv.to_str().unwrap()],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 40 - 5);
    let path = dir.join("pred.csv");
    fs::write(&path, &text).unwrap();
    // predictions load back through the CSV reader and bands bracket the mean
    let spec = ColumnSpec {
        u: vec!["t".into()],
        y: vec!["y0_lower".into(), "y0_mean".into(), "y0_upper".into()],
        seq: None,
    };
    let back = read_trajectories(&path, &spec).unwrap();
    let y = &back[0].y;
    for i in 0..y.rows() {
        assert!(y.at(i, 0) <= y.at(i, 1) && y.at(i, 1) <= y.at(i, 2));
    }

    // a model with different columns cannot read the file
    let wrong = data_dir.join("wrong.csv");
    fs::write(&wrong, "seq,a,b\n1,0,0\n1,1,1\n").unwrap();
    let out = gpssm(
        &["predict", "--model", model.to_str().unwrap(), "--input", wrong.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_csv_round_trips_through_the_reader() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lin.toml", LINEAR);
    let out = gpssm(&["seqlen-sweep", "--config", cfg.to_str().unwrap(), "--lengths", "10,20"], tmp.path());
    assert!(out.status.success());
    let dir = run_dir(tmp.path(), "linear");
    let records = read_records(&dir.join("results.jsonl")).unwrap();
    let spec = ColumnSpec {
        u: vec!["seqlen".into()],
        y: vec!["rmse_mean".into(), "rmse_std".into()],
        seq: None,
    };
    let back = read_trajectories(&dir.join("seqlen.csv"), &spec).unwrap();
    assert_eq!(back[0].u.data(), &[10.0, 20.0]);
    assert_eq!(back[0].y.at(0, 0), records[0].rmse);
    assert_eq!(back[0].y.at(1, 0), records[1].rmse);
    assert_eq!(back[0].y.at(0, 1), 0.0);
}

#[test]
fn shipped_configs_and_manifests_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let cfg = gpssm_cli::ExperimentConfig::from_file(&root.join("configs/dubins_seqlen.toml")).unwrap();
    assert_eq!(cfg.lengths, vec![50, 150, 300]);
    assert_eq!(cfg.seeds.len(), 3);
    let mut names = Vec::new();
    for entry in fs::read_dir(root.join("configs/benchmarks")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = gpssm_cli::ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.algorithms.len(), 5);
        let stem = path.file_stem().unwrap().to_str().unwrap().to_string();
        let manifest = root.join("datasets").join(&stem).join("manifest.toml");
        let text = fs::read_to_string(&manifest).unwrap();
        let m: gpssm_core::data::Manifest = toml::from_str(&text).unwrap();
        assert_eq!(m.file, PathBuf::from(format!("{stem}.csv")));
        names.push(stem);
    }
    names.sort();
    assert_eq!(names, ["actuator", "ballbeam", "drives", "dryer", "flutter", "furnace", "tank"]);
}
