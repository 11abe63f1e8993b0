use std::fs;

use lbgm_core::harness::{parse_config, run, MetricsTable};

fn config(out: &std::path::Path, algorithm: &str, extra: &str) -> String {
    format!(
        "algorithm = {algorithm}\nout = {}\n{extra}\n[data]\nn_train = 300\nn_test = 60\n[model]\nhidden = 8\n[train]\nworkers = 3\nrounds = 5\n",
        out.display()
    )
}

#[test]
fn run_writes_metrics_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path(), "lbgm", "")).unwrap();
    let report = run(&cfg).unwrap();
    assert_eq!(report.files.len(), 2);

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,train_loss,test_metric,cum_floats,cum_bits,scalar_fraction,delta_sq_proxy"
    );
    let rounds: Vec<usize> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(rounds, (0..=5).collect::<Vec<_>>());

    let ledger = fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    let mut lines = ledger.lines();
    assert_eq!(lines.next().unwrap(), "round,worker,floats,bits");
    let floats: f64 = lines
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    let table = MetricsTable::read_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(table.last().unwrap().cum_floats, floats);
    assert!(report.summary.starts_with("lbgm rounds=5 test_accuracy="));
}

#[test]
fn identical_configs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run(&parse_config(&config(d.path(), "topk_lbgm", "seed = 3")).unwrap()).unwrap();
    }
    for f in ["metrics.csv", "ledger.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn summary_reports_savings_against_baseline() {
    let base = tempfile::tempdir().unwrap();
    run(&parse_config(&config(base.path(), "vanilla", "")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let baseline = format!("baseline = {}", base.path().join("metrics.csv").display());
    let report = run(&parse_config(&config(dir.path(), "lbgm", &baseline)).unwrap()).unwrap();
    assert!(
        report.summary.contains("savings_vs_baseline="),
        "{}",
        report.summary
    );

    let same = tempfile::tempdir().unwrap();
    let report = run(&parse_config(&config(same.path(), "vanilla", &baseline)).unwrap()).unwrap();
    assert!(
        report.summary.ends_with("savings_vs_baseline=0.00%"),
        "{}",
        report.summary
    );
}

#[test]
fn analysis_run_writes_pca_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path(), "centralized_analyze", "")).unwrap();
    let report = run(&cfg).unwrap();
    assert_eq!(report.files.len(), 3);
    let npca = fs::read_to_string(dir.path().join("npca.csv")).unwrap();
    assert_eq!(npca.lines().next().unwrap(), "epoch,n95,n99");
    assert_eq!(npca.lines().count(), 6);
    let sim = fs::read_to_string(dir.path().join("similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 6);
    assert_eq!(sim.lines().nth(1).unwrap().split(',').count(), 6);
    assert!(dir.path().join("overlap.csv").exists());
}

#[test]
fn regression_runs_report_test_loss() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "algorithm = vanilla\nout = {}\n[model]\nkind = linear_regression\n[data]\nsource = synthetic_regression\nn_train = 200\nn_test = 50\ndim = 4\noutputs = 2\n[train]\nworkers = 2\nrounds = 30\neta = corollary\n",
        dir.path().display()
    );
    let report = run(&parse_config(&text).unwrap()).unwrap();
    assert!(report.summary.contains("test_loss="));
    let t = MetricsTable::read_csv(&dir.path().join("metrics.csv")).unwrap();
    assert!(t.last().unwrap().test_metric < t.rows[0].test_metric);
}

#[test]
fn idx_source_loads_files() {
    use lbgm_core::data::{write_idx, Dataset};
    use lbgm_core::models::Labels;
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let images = |n: usize| {
        let pixels = (0..n * 4).map(|i| (i * 37 % 256) as f64 / 255.0).collect();
        Dataset::new(
            pixels,
            4,
            Labels::Classes((0..n).map(|i| i % 10).collect()),
            10,
        )
        .unwrap()
    };
    write_idx(p("tri"), p("trl"), &images(40), 2, 2).unwrap();
    write_idx(p("tei"), p("tel"), &images(20), 2, 2).unwrap();
    let text = format!(
        "algorithm = vanilla\nout = {}\n[data]\nsource = idx\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n[train]\nworkers = 2\nrounds = 2\n",
        p("out").display(),
        p("tri").display(),
        p("trl").display(),
        p("tei").display(),
        p("tel").display()
    );
    let report = run(&parse_config(&text).unwrap()).unwrap();
    assert!(report.summary.starts_with("vanilla rounds=2"));
}
