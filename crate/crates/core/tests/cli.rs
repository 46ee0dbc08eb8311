use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use typicality::baselines::DEFAULT_REFERENCE_SIZE;
use typicality::cli::{run, EXIT_FLAGS, EXIT_INPUT, EXIT_MISMATCH, EXIT_OK};
use typicality::harness::{read_sweep_csv, RejectionReport};
use typicality::models::{ExternalModel, IsotropicGaussian, LikelihoodRecord, Model};
use typicality::typicality::{bootstrap_indices, Calibration};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("typicality").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn loglik_csv(values: &[f64]) -> String {
    let mut s = String::from("id,loglik\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("r{i},{v:?}\n"));
    }
    s
}

/// Records of `n` draws from `source` scored by `model`, with latent norms and scores.
fn scored_file(dir: &TempDir, name: &str, model: &dyn Model, source: &dyn Model, n: usize, seed: u64) -> PathBuf {
    let records = source
        .sample(n, seed)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, x)| LikelihoodRecord {
            id: format!("{name}{i}"),
            loglik: model.log_prob(x).unwrap(),
            latent_sqnorm: Some(model.latent_sqnorm(x).unwrap()),
            score: Some(model.score(x).unwrap()),
        })
        .collect();
    let path = dir.path().join(name);
    ExternalModel::from_records(records).unwrap().to_path(&path).unwrap();
    path
}

fn gaussian_file(dir: &TempDir, name: &str, model: &dyn Model, n: usize, seed: u64) -> PathBuf {
    scored_file(dir, name, model, model, n, seed)
}

fn verdict_rows(csv_text: &str) -> Vec<(usize, f64, f64, bool)> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["batch_index", "statistic", "threshold", "is_ood"]);
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap())
        })
        .collect()
}

fn error_code(stderr: &str) -> i64 {
    let line = stderr.lines().next().expect("error line");
    let v: serde_json::Value = serde_json::from_str(line).expect("machine-readable error line");
    v["exit_code"].as_i64().unwrap()
}

const TRAIN: [f64; 10] = [-2.0, -3.0, -2.5, -2.25, -2.75, -2.0, -3.0, -2.5, -2.25, -2.75];
const VAL: [f64; 10] = [-1.0, -2.0, -3.0, -4.0, -5.0, -1.5, -2.5, -3.5, -4.5, -5.5];

#[test]
fn toy_single_replicate_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(&dir, "train.csv", &loglik_csv(&TRAIN));
    let val = write(&dir, "val.csv", &loglik_csv(&VAL));
    let out = dir.path().join("cal.json");
    let r = cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "4", "--K", "1", "--seed", "9", "--out", p(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);

    // entropy: mean of 2, 3, 2.5, 2.25, 2.75 (twice) = 2.5
    let idx = bootstrap_indices(10, 4, 9, 0);
    let batch_nll = -(idx.iter().map(|&i| VAL[i]).sum::<f64>()) / 4.0;
    let expected = (batch_nll - 2.5).abs();
    let cal = Calibration::from_path(&out).unwrap();
    assert_eq!(cal.entropy.unwrap().value, 2.5);
    assert_eq!(cal.threshold, expected);
    assert_eq!(cal.bootstrap_stats, vec![expected]);
    assert!(r.stdout.contains("threshold="));
    assert!(r.stdout.contains("entropy=2.5"));
    assert!(r.stdout.contains("K=1"));
    assert!(r.stdout.contains("alpha=0.99"));
}

#[test]
fn toy_constant_validation_threshold_and_tie_rule() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(&dir, "train.csv", &loglik_csv(&TRAIN));
    let val = write(&dir, "val.csv", &loglik_csv(&[-3.0; 10]));
    let out = dir.path().join("cal.json");
    let r = cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "2", "--out", p(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let cal = Calibration::from_path(&out).unwrap();
    assert_eq!(cal.threshold, 0.5);

    // first batch sits exactly on the threshold; the second is beyond it
    let input = write(&dir, "test.csv", &loglik_csv(&[-3.0, -3.0, -3.25, -3.25]));
    let r = cli(&["test", "--calibration", p(&out), "--input", p(&input)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rows = verdict_rows(&r.stdout);
    assert_eq!(rows, vec![(0, 0.5, 0.5, false), (1, 0.75, 0.5, true)]);
    assert!(r.stderr.contains("fraction_rejected=0.5"));
}

#[test]
fn calibrate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(&dir, "train.csv", &loglik_csv(&TRAIN));
    let val = write(&dir, "val.csv", &loglik_csv(&VAL));
    let outs: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("c{i}.json"));
            assert_eq!(cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "3", "--out", p(&out)]).code, 0);
            fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let stdout_json = cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "3"]).stdout;
    assert_eq!(stdout_json.as_bytes(), outs[0].as_slice());
}

#[test]
fn flag_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let val = write(&dir, "val.csv", &loglik_csv(&VAL));
    for args in [
        vec!["calibrate", "--val", p(&val), "--M", "2", "--alpha", "1.0", "--entropy", "closed", "--model", "iso:d=1,sigma=1"],
        vec!["calibrate", "--val", p(&val), "--M", "0", "--entropy", "closed", "--model", "iso:d=1,sigma=1"],
        vec!["calibrate", "--val", p(&val), "--M", "2", "--K", "0", "--entropy", "closed", "--model", "iso:d=1,sigma=1"],
        vec!["calibrate", "--val", p(&val), "--M", "2"],
        vec!["calibrate", "--val", p(&val), "--M", "2", "--test-name", "wilcoxon"],
        vec!["calibrate", "--val", p(&val), "--M", "2", "--test-name", "ttest"],
        vec!["calibrate", "--val", p(&val), "--M", "2", "--entropy", "closed", "--model", "cube:d=3"],
        vec!["calibrate", "--val", p(&val), "--M", "11", "--entropy", "closed", "--model", "iso:d=1,sigma=1"],
        vec!["calibrate", "--val", p(&val), "--M", "notanumber"],
        vec!["calibrate", "--unknown-flag"],
        vec!["frobnicate"],
        vec!["simulate", "no-such-experiment"],
    ] {
        let r = cli(&args);
        assert_eq!(r.code, EXIT_FLAGS, "{args:?}: {}", r.stderr);
        assert_eq!(error_code(&r.stderr), 3);
    }
    let r = cli(&["simulate", "no-such-experiment"]);
    for name in ["annulus-sweep", "m-sweep", "evaluate", "overlap"] {
        assert!(r.stderr.contains(name));
    }
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(&dir, "train.csv", &loglik_csv(&TRAIN));
    let val = write(&dir, "val.csv", &loglik_csv(&VAL));
    let cal = dir.path().join("cal.json");
    assert_eq!(cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "2", "--out", p(&cal)]).code, 0);

    let empty = write(&dir, "empty.csv", "");
    let header_only = write(&dir, "header.csv", "id,loglik\n");
    let garbage = write(&dir, "bad.csv", "id,loglik\na,not-a-number\n");
    let missing = dir.path().join("missing.csv");
    for input in [&empty, &header_only, &garbage, &missing] {
        let r = cli(&["test", "--calibration", p(&cal), "--input", p(input)]);
        assert_eq!(r.code, EXIT_INPUT, "{input:?}: {}", r.stderr);
        assert_eq!(error_code(&r.stderr), 2);
    }
    let r = cli(&["calibrate", "--train", p(&train), "--val", p(&garbage), "--M", "2"]);
    assert_eq!(r.code, EXIT_INPUT);
    let bad_json = write(&dir, "bad.json", "{\"threshold\": 1}");
    assert_eq!(cli(&["test", "--calibration", p(&bad_json), "--input", p(&val)]).code, EXIT_INPUT);
}

#[test]
fn batch_size_mismatch_exits_four_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(&dir, "train.csv", &loglik_csv(&TRAIN));
    let val = write(&dir, "val.csv", &loglik_csv(&VAL));
    let cal = dir.path().join("cal.json");
    assert_eq!(cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "4", "--out", p(&cal)]).code, 0);

    let r = cli(&["test", "--calibration", p(&cal), "--input", p(&val), "--M", "5"]);
    assert_eq!(r.code, EXIT_MISMATCH);
    assert_eq!(error_code(&r.stderr), 4);
    let r = cli(&["test", "--calibration", p(&cal), "--input", p(&val), "--M", "5", "--allow-m-mismatch"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(verdict_rows(&r.stdout).len(), 2);

    let short = write(&dir, "short.csv", &loglik_csv(&[-2.0, -3.0]));
    assert_eq!(cli(&["test", "--calibration", p(&cal), "--input", p(&short)]).code, EXIT_MISMATCH);

    // 10 rows at M=4: two full batches; the trailing pair is dropped by default
    let r = cli(&["test", "--calibration", p(&cal), "--input", p(&val)]);
    assert_eq!(verdict_rows(&r.stdout).len(), 2);
    assert!(r.stderr.contains("dropped_rows=2"));
    let r = cli(&["test", "--calibration", p(&cal), "--input", p(&val), "--allow-m-mismatch"]);
    assert_eq!(verdict_rows(&r.stdout).len(), 3);
}

#[test]
fn several_calibrations_select_by_m() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(&dir, "train.csv", &loglik_csv(&TRAIN));
    let val = write(&dir, "val.csv", &loglik_csv(&VAL));
    let cals: Vec<PathBuf> = [2, 5]
        .iter()
        .map(|m| {
            let out = dir.path().join(format!("cal{m}.json"));
            let ms = m.to_string();
            assert_eq!(cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", &ms, "--out", p(&out)]).code, 0);
            out
        })
        .collect();
    let five = Calibration::from_path(&cals[1]).unwrap();
    let r = cli(&["test", "--calibration", p(&cals[0]), "--calibration", p(&cals[1]), "--input", p(&val), "--M", "5"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rows = verdict_rows(&r.stdout);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|row| row.2 == five.threshold));
    assert_eq!(cli(&["test", "--calibration", p(&cals[0]), "--calibration", p(&cals[1]), "--input", p(&val)]).code, EXIT_FLAGS);
}

#[test]
fn self_test_rejects_few_batches() {
    let dir = tempfile::tempdir().unwrap();
    let g = IsotropicGaussian::standard(16, 1.0).unwrap();
    let train = gaussian_file(&dir, "train.csv", &g, 5000, 1);
    let val = gaussian_file(&dir, "val.csv", &g, 5000, 2);
    let cal = dir.path().join("cal.json");
    let out = dir.path().join("verdicts.csv");
    assert_eq!(cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "10", "--out", p(&cal)]).code, 0);
    let r = cli(&["test", "--calibration", p(&cal), "--input", p(&val), "--out", p(&out)]);
    assert_eq!(r.code, EXIT_OK);
    let rows = verdict_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 500);
    let fraction = rows.iter().filter(|r| r.3).count() as f64 / rows.len() as f64;
    assert!(fraction <= 0.05, "{fraction}");
    assert!(r.stdout.contains("batches=500"));
}

#[test]
fn baseline_tests_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let g = IsotropicGaussian::standard(4, 1.0).unwrap();
    let q = IsotropicGaussian::standard(4, 0.3).unwrap();
    let train = gaussian_file(&dir, "train.csv", &g, 2000, 1);
    let val = gaussian_file(&dir, "val.csv", &g, 2000, 2);
    let ood = scored_file(&dir, "ood.csv", &g, &q, 500, 3);
    let rejected = |r: &Run| {
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
        let rows = verdict_rows(&r.stdout);
        rows.iter().filter(|row| row.3).count() as f64 / rows.len() as f64
    };

    for test in ["ttest", "kstest"] {
        let r = cli(&["test", "--test-name", test, "--train", p(&train), "--input", p(&ood), "--M", "25"]);
        assert!(rejected(&r) > 0.9, "{test}");
    }
    assert_eq!(cli(&["test", "--test-name", "ttest", "--input", p(&ood), "--M", "25"]).code, EXIT_FLAGS);
    assert_eq!(cli(&["test", "--test-name", "ttest", "--train", p(&train), "--input", p(&ood), "--M", "1"]).code, EXIT_FLAGS);

    let annulus = dir.path().join("annulus.json");
    let r = cli(&["calibrate", "--val", p(&val), "--M", "25", "--test-name", "annulus", "--dim", "4", "--out", p(&annulus)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(Calibration::from_path(&annulus).unwrap().latent_dim, Some(4));
    assert!(rejected(&cli(&["test", "--calibration", p(&annulus), "--input", p(&ood)])) > 0.9);

    let mmd = dir.path().join("mmd.json");
    let r = cli(&["calibrate", "--train", p(&train), "--val", p(&val), "--M", "25", "--test-name", "mmd", "--out", p(&mmd)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(Calibration::from_path(&mmd).unwrap().reference_size, Some(DEFAULT_REFERENCE_SIZE));
    // a linear score kernel only sees mean shifts in the scores
    let shifted = IsotropicGaussian::new(vec![1.0; 4], 1.0).unwrap();
    let moved = scored_file(&dir, "moved.csv", &g, &shifted, 500, 4);
    assert!(rejected(&cli(&["test", "--calibration", p(&mmd), "--train", p(&train), "--input", p(&moved)])) > 0.9);
    assert!(rejected(&cli(&["test", "--calibration", p(&mmd), "--train", p(&train), "--input", p(&val)])) < 0.1);
    assert_eq!(cli(&["test", "--calibration", p(&mmd), "--input", p(&ood)]).code, EXIT_FLAGS);

    assert_eq!(cli(&["calibrate", "--val", p(&val), "--M", "5", "--test-name", "ksd"]).code, EXIT_FLAGS);
}

#[test]
fn bits_per_dim_matches_nats() {
    let dir = tempfile::tempdir().unwrap();
    let d = 8usize;
    let bpd = |v: &[f64]| -> Vec<f64> { v.iter().map(|ll| -ll / (d as f64 * std::f64::consts::LN_2)).collect() };
    let train_n = write(&dir, "tn.csv", &loglik_csv(&TRAIN));
    let val_n = write(&dir, "vn.csv", &loglik_csv(&VAL));
    let train_b = write(&dir, "tb.csv", &loglik_csv(&bpd(&TRAIN)));
    let val_b = write(&dir, "vb.csv", &loglik_csv(&bpd(&VAL)));
    let a = Calibration::from_json(&cli(&["calibrate", "--train", p(&train_n), "--val", p(&val_n), "--M", "3"]).stdout).unwrap();
    let b = Calibration::from_json(
        &cli(&["calibrate", "--train", p(&train_b), "--val", p(&val_b), "--M", "3", "--bits-per-dim", "8"]).stdout,
    )
    .unwrap();
    assert!((a.threshold - b.threshold).abs() < 1e-12);
    assert!((a.entropy.unwrap().value - b.entropy.unwrap().value).abs() < 1e-12);
}

#[test]
fn closed_and_mc_entropy_flags() {
    let dir = tempfile::tempdir().unwrap();
    let g = IsotropicGaussian::standard(2, 1.0).unwrap();
    let val = gaussian_file(&dir, "val.csv", &g, 500, 2);
    let closed = Calibration::from_json(
        &cli(&["calibrate", "--val", p(&val), "--M", "5", "--entropy", "closed", "--model", "iso:d=2,sigma=1"]).stdout,
    )
    .unwrap();
    let h = closed.entropy.unwrap().value;
    assert!((h - (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    let mc = Calibration::from_json(
        &cli(&["calibrate", "--val", p(&val), "--M", "5", "--entropy", "mc", "--model", "iso:d=2,sigma=1", "--mc-samples", "20000"])
            .stdout,
    )
    .unwrap();
    assert_eq!(mc.entropy.unwrap().n_used, 20000);
    assert!((mc.entropy.unwrap().value - h).abs() < 0.05);
}

#[test]
fn annulus_sweep_minimum_at_sqrt_d() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let r = cli(&["simulate", "annulus-sweep", "--d", "16", "--sigma", "1", "--M", "16", "--out", p(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let pts = read_sweep_csv(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(pts.len(), 33);
    let best = pts.iter().min_by(|a, b| a.mean_epsilon_hat.total_cmp(&b.mean_epsilon_hat)).unwrap();
    assert_eq!(best.radius, 4.0);
}

#[test]
fn m_sweep_shape_and_equal_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let r = cli(&[
        "simulate", "m-sweep", "--model", "iso:d=8,sigma=1", "--ood", "same=iso:d=8,sigma=1", "--M", "2,10,25",
        "--repetitions", "3", "--val-size", "1000", "--test-size", "1000", "--train-size", "2000", "--out", p(&out),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rows = RejectionReport::read_csv_rows(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 3);
    for test in ["typicality", "ttest", "kstest"] {
        for dataset in ["in-dist", "same"] {
            let ms: Vec<usize> = rows.iter().filter(|r| r.test == test && r.dataset == dataset).map(|r| r.m).collect();
            assert_eq!(ms, vec![2, 10, 25]);
        }
    }
    for r in &rows {
        assert!(r.mean_fraction <= 0.06, "{r:?}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.csv.meta.json")).unwrap()).unwrap();
    assert!(meta["batching"].as_str().unwrap().contains("disjoint"));
}

#[test]
fn evaluate_on_likelihood_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = IsotropicGaussian::standard(4, 1.0).unwrap();
    let q = IsotropicGaussian::standard(4, 0.3).unwrap();
    let train = gaussian_file(&dir, "train.csv", &g, 2000, 1);
    let val = gaussian_file(&dir, "val.csv", &g, 1000, 2);
    let test_in = gaussian_file(&dir, "in.csv", &g, 1000, 3);
    let test_out = scored_file(&dir, "out.csv", &g, &q, 1000, 4);
    let in_arg = format!("in={}", p(&test_in));
    let out_arg = format!("far={}", p(&test_out));
    let r = cli(&[
        "evaluate", "--train", p(&train), "--val", p(&val), "--input", &in_arg, "--input", &out_arg, "--M", "10",
        "--repetitions", "2", "--test-name", "typicality,annulus", "--dim", "4",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rows = RejectionReport::read_csv_rows(r.stdout.as_bytes()).unwrap();
    let get = |t: &str, d: &str| rows.iter().find(|r| r.test == t && r.dataset == d).unwrap().mean_fraction;
    assert!(get("typicality", "far") > 0.95);
    assert!(get("annulus", "in") <= 0.05);
    assert_eq!(cli(&["evaluate", "--train", p(&train), "--val", p(&val), "--M", "10"]).code, EXIT_FLAGS);
}

#[test]
fn overlap_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = IsotropicGaussian::standard(4, 1.0).unwrap();
    let a = gaussian_file(&dir, "a.csv", &g, 1000, 1);
    let b = gaussian_file(&dir, "b.csv", &g, 1000, 2);
    let out = dir.path().join("hist.csv");
    let r = cli(&["simulate", "overlap", "--val", p(&a), "--input", p(&b), "--out", p(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("indistinguishable=true"));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["bin", "lo", "hi", "reference_count", "other_count"]);
    let total: usize = rdr.records().map(|r| r.unwrap()[3].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 1000);
}

#[test]
fn help_exits_zero() {
    let r = cli(&["--help"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.contains("calibrate"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_typicality");
    let status = std::process::Command::new(bin)
        .args(["simulate", "nope"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));
    let status = std::process::Command::new(bin).args(["--version"]).output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}
