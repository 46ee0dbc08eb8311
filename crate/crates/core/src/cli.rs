//! Command-line surface: `calibrate`, `test`, `simulate`, `evaluate`.
//!
//! Every command writes its primary artifact to `--out` when given and to
//! standard output otherwise. The short human summary goes to standard
//! output when `--out` is set and to standard error when it is not, so the
//! artifact stream stays parseable. Failures print one JSON object on
//! standard error and map to a stable exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | input or parse error |
//! | 3 | invalid flags |
//! | 4 | calibration / batch-size mismatch |

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{
    annulus_statistic, bootstrap_baseline, ks_test, mmd_statistic, select_reference, t_test, BaselineStatistic,
    ScoreSet, DEFAULT_REFERENCE_SIZE,
};
use crate::entropy::{monte_carlo_entropy, resubstitution_entropy, EntropyEstimate, DEFAULT_MC_SAMPLES};
use crate::error::Error;
use crate::harness::{
    annulus_sweep, overlap_diagnostic, run_evaluation, write_sweep_csv, DataSetting, EntropyChoice,
    ExperimentConfig, RejectionReport, TestKind, BATCHING, DEFAULT_BATCH_SIZES, DEFAULT_BINS, DEFAULT_M_SWEEP,
    DEFAULT_REPETITIONS, DEFAULT_TEST_SIZE, DEFAULT_TRAIN_SIZE, DEFAULT_VALIDATION_SIZE,
};
use crate::models::{fmt_f64, log_probs, AnalyticModel, ExternalModel, Model};
use crate::rng;
use crate::typicality::{
    bootstrap_threshold, epsilon_hat, select_calibration, Calibration, MatchMode, DEFAULT_ALPHA, DEFAULT_BOOTSTRAP,
    TYPICALITY,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_FLAGS: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

pub const EXPERIMENTS: [&str; 4] = ["annulus-sweep", "m-sweep", "evaluate", "overlap"];

/// Seed tag for the MMD training reference, shared by `calibrate` and `test`.
const REFERENCE_TAG: u64 = 3;
const ENTROPY_TAG: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "typicality", version, about = "Batch OOD detection with the typicality test")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bootstrap a threshold from validation likelihoods and write Calibration JSON.
    Calibrate(CalibrateArgs),
    /// Classify consecutive M-sized batches of a likelihood file.
    Test(TestArgs),
    /// Run a named experiment: annulus-sweep, m-sweep, evaluate, overlap.
    Simulate(SimulateArgs),
    /// Batch-classification campaign over analytic models or likelihood files.
    Evaluate(CampaignArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EntropyFlag {
    Resub,
    Mc,
    Closed,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Training likelihood CSV (entropy and MMD reference).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation likelihood CSV.
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "M")]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long = "K", default_value_t = DEFAULT_BOOTSTRAP)]
    k: usize,
    #[arg(long, default_value_t = rng::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value = "resub")]
    entropy: EntropyFlag,
    /// Analytic model spec, e.g. `iso:d=16,sigma=1`, for mc/closed entropy.
    #[arg(long)]
    model: Option<String>,
    #[arg(long = "test-name", default_value = TYPICALITY)]
    test_name: String,
    /// Treat likelihood columns as bits/dim for dimension d.
    #[arg(long = "bits-per-dim", value_name = "d")]
    bits_per_dim: Option<usize>,
    #[arg(long = "mc-samples", default_value_t = DEFAULT_MC_SAMPLES)]
    mc_samples: usize,
    #[arg(long = "reference-size", default_value_t = DEFAULT_REFERENCE_SIZE)]
    reference_size: usize,
    /// Latent dimension for the annulus test.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Debug, Args)]
struct TestArgs {
    /// Calibration JSON; repeat to supply one per batch size.
    #[arg(long)]
    calibration: Vec<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Training likelihood CSV (t-test, KS-test and MMD reference).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long = "test-name")]
    test_name: Option<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Score batches whose size has no matching calibration against the nearest M.
    #[arg(long = "allow-m-mismatch")]
    allow_m_mismatch: bool,
    #[arg(long = "bits-per-dim", value_name = "d")]
    bits_per_dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CampaignArgs {
    /// Analytic in-distribution model spec.
    #[arg(long)]
    model: Option<String>,
    /// Alternative `NAME=SPEC` (analytic) sampled as an OOD test pool.
    #[arg(long)]
    ood: Vec<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test likelihood file `NAME=PATH`; repeatable.
    #[arg(long)]
    input: Vec<String>,
    #[arg(long = "M", value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long = "K", default_value_t = DEFAULT_BOOTSTRAP)]
    k: usize,
    #[arg(long, default_value_t = rng::DEFAULT_SEED)]
    seed: u64,
    #[arg(long = "test-name", value_delimiter = ',')]
    test_name: Vec<String>,
    #[arg(long, value_enum, default_value = "resub")]
    entropy: EntropyFlag,
    #[arg(long = "mc-samples", default_value_t = DEFAULT_MC_SAMPLES)]
    mc_samples: usize,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    repetitions: usize,
    #[arg(long = "val-size", default_value_t = DEFAULT_VALIDATION_SIZE)]
    val_size: usize,
    #[arg(long = "test-size", default_value_t = DEFAULT_TEST_SIZE)]
    test_size: usize,
    #[arg(long = "train-size", default_value_t = DEFAULT_TRAIN_SIZE)]
    train_size: usize,
    #[arg(long = "reference-size", default_value_t = DEFAULT_REFERENCE_SIZE)]
    reference_size: usize,
    #[arg(long = "bits-per-dim", value_name = "d")]
    bits_per_dim: Option<usize>,
    /// Latent dimension for the annulus test on likelihood files.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// One of annulus-sweep, m-sweep, evaluate, overlap.
    experiment: String,
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Dimension for annulus-sweep.
    #[arg(long = "d", default_value_t = 16)]
    d: usize,
    #[arg(long = "radius-max", default_value_t = 8.0)]
    radius_max: f64,
    #[arg(long = "radius-step", default_value_t = 0.25)]
    radius_step: f64,
    /// Batches averaged per radius.
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn flags(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FLAGS,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn mismatch(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISMATCH,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_INPUT => "input_error",
            EXIT_FLAGS => "invalid_flags",
            EXIT_MISMATCH => "batch_size_mismatch",
            _ => "error",
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidParameter { .. } | Error::Unsupported { .. } => EXIT_FLAGS,
            Error::BatchSizeMismatch { .. } => EXIT_MISMATCH,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    exit_code: i32,
    message: &'a str,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report(stderr, &CliError::flags(first.trim_start_matches("error: ")));
            let _ = write!(stderr, "{}", e.render());
            return EXIT_FLAGS;
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => cmd_calibrate(&a, stdout, stderr),
        Command::Test(a) => cmd_test(&a, stdout, stderr),
        Command::Simulate(a) => cmd_simulate(&a, stdout, stderr),
        Command::Evaluate(a) => cmd_evaluate(&a, None, stdout, stderr),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report(stderr, &e);
            e.code
        }
    }
}

fn report(stderr: &mut dyn Write, e: &CliError) {
    let line = ErrorLine {
        error: e.kind(),
        exit_code: e.code,
        message: &e.message,
    };
    let _ = writeln!(stderr, "{}", serde_json::to_string(&line).expect("error line serializes"));
}

/// Writes the artifact to `--out` or stdout and returns the summary sink.
fn emit<'a>(
    out: Option<&Path>,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
    write: impl FnOnce(&mut dyn Write) -> CliResult<()>,
) -> CliResult<&'a mut dyn Write> {
    match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let mut w = BufWriter::new(file);
            write(&mut w)?;
            w.flush()?;
            Ok(stdout)
        }
        None => {
            write(stdout)?;
            stdout.flush()?;
            Ok(stderr)
        }
    }
}

fn check_alpha(alpha: f64) -> CliResult<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::flags(format!("--alpha must lie in the open interval (0, 1), got {alpha}")))
    }
}

fn check_positive(name: &str, v: usize) -> CliResult<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(CliError::flags(format!("{name} must be at least 1")))
    }
}

fn parse_model(spec: &str) -> CliResult<AnalyticModel> {
    spec.parse::<AnalyticModel>()
        .map_err(|e| CliError::flags(format!("--model {spec:?}: {e}")))
}

fn parse_test(name: &str) -> CliResult<TestKind> {
    name.parse::<TestKind>().map_err(|_| {
        let names: Vec<&str> = TestKind::ALL.iter().map(|t| t.as_str()).collect();
        CliError::flags(format!("unknown --test-name {name:?}; valid: {}", names.join(", ")))
    })
}

/// Reads a likelihood CSV; every failure here is an input error.
fn load(path: &Path, bits_per_dim: Option<usize>) -> CliResult<ExternalModel> {
    let records = ExternalModel::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(CliError::input(format!("{}: no likelihood rows", path.display())));
    }
    Ok(match bits_per_dim {
        Some(d) => records.convert_bits_per_dim(d),
        None => records,
    })
}

fn scores_of(records: &ExternalModel, path: &Path) -> CliResult<ScoreSet> {
    let scores = records
        .scores()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(ScoreSet::new(scores)?)
}

fn sqnorms_of(records: &ExternalModel, path: &Path) -> CliResult<Vec<f64>> {
    records
        .latent_sqnorms()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn cmd_calibrate(a: &CalibrateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    check_alpha(a.alpha)?;
    check_positive("--M", a.m)?;
    check_positive("--K", a.k)?;
    check_positive("--reference-size", a.reference_size)?;
    let test = parse_test(&a.test_name)?;
    let model = a.model.as_deref().map(parse_model).transpose()?;
    match test {
        TestKind::TTest | TestKind::KsTest => {
            return Err(CliError::flags(format!(
                "{test} uses its own critical values; run `test --test-name {test} --train ...` directly"
            )))
        }
        TestKind::Ksd => {
            return Err(CliError::flags(
                "ksd needs model evaluations at the data points; use `evaluate --model ... --test-name ksd`",
            ))
        }
        TestKind::Typicality => {
            match a.entropy {
                EntropyFlag::Resub if a.train.is_none() => {
                    return Err(CliError::flags("--entropy resub needs --train"))
                }
                EntropyFlag::Mc | EntropyFlag::Closed if model.is_none() => {
                    return Err(CliError::flags("--entropy mc/closed needs --model"))
                }
                EntropyFlag::Mc => check_positive("--mc-samples", a.mc_samples)?,
                _ => {}
            }
        }
        TestKind::Mmd if a.train.is_none() => return Err(CliError::flags("mmd needs --train for its reference")),
        TestKind::Annulus if a.dim.or(model.as_ref().map(AnalyticModel::d)).is_none() => {
            return Err(CliError::flags("annulus needs --dim or --model"))
        }
        _ => {}
    }

    let val = load(&a.val, a.bits_per_dim)?;
    let train = a.train.as_deref().map(|p| load(p, a.bits_per_dim)).transpose()?;
    let cal = match test {
        TestKind::Typicality => {
            let entropy = match a.entropy {
                EntropyFlag::Resub => resubstitution_entropy(&train.as_ref().expect("checked").logliks())?,
                EntropyFlag::Mc => monte_carlo_entropy(
                    model.as_ref().expect("checked"),
                    a.mc_samples,
                    rng::derive(a.seed, ENTROPY_TAG),
                )?,
                EntropyFlag::Closed => EntropyEstimate::closed_form(model.as_ref().expect("checked"))?,
            };
            bootstrap_threshold(&val.logliks(), entropy, a.m, a.k, a.alpha, a.seed)?
        }
        TestKind::Mmd => {
            let train_path = a.train.as_deref().expect("checked");
            let reference = select_reference(
                &scores_of(train.as_ref().expect("checked"), train_path)?,
                a.reference_size,
                rng::derive(a.seed, REFERENCE_TAG),
            )?;
            let validation = scores_of(&val, &a.val)?;
            let stat = BaselineStatistic::Mmd {
                validation: &validation,
                reference: &reference,
            };
            bootstrap_baseline(&stat, a.m, a.k, a.alpha, a.seed)?
        }
        TestKind::Annulus => {
            let dim = a.dim.or(model.as_ref().map(AnalyticModel::d)).expect("checked");
            let sq = sqnorms_of(&val, &a.val)?;
            let stat = BaselineStatistic::Annulus {
                validation_sqnorms: &sq,
                dim,
            };
            bootstrap_baseline(&stat, a.m, a.k, a.alpha, a.seed)?
        }
        _ => unreachable!("rejected above"),
    };
    let json = cal.to_json()?;
    let summary = emit(a.out.as_deref(), stdout, stderr, |w| Ok(w.write_all(json.as_bytes())?))?;
    writeln!(summary, "test_name={}", cal.test_name)?;
    if let Some(h) = &cal.entropy {
        writeln!(summary, "entropy={}", fmt_f64(h.value))?;
        writeln!(summary, "entropy_method={}", h.method.as_str())?;
    }
    writeln!(summary, "threshold={}", fmt_f64(cal.threshold))?;
    writeln!(summary, "M={}", cal.batch_size)?;
    writeln!(summary, "K={}", cal.bootstrap_count)?;
    writeln!(summary, "alpha={}", cal.alpha)?;
    Ok(())
}

struct BatchLine {
    statistic: f64,
    threshold: f64,
    is_ood: bool,
}

fn cmd_test(a: &TestArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    check_alpha(a.alpha)?;
    if let Some(m) = a.m {
        check_positive("--M", m)?;
    }
    let cals: Vec<Calibration> = a
        .calibration
        .iter()
        .map(|p| Calibration::from_path(p).map_err(|e| CliError::input(format!("{}: {e}", p.display()))))
        .collect::<CliResult<_>>()?;

    let test = match (&a.test_name, cals.first()) {
        (Some(name), _) => parse_test(name)?,
        (None, Some(c)) => parse_test(&c.test_name)?,
        (None, None) => return Err(CliError::flags("give --calibration or --test-name")),
    };
    if let Some(c) = cals.iter().find(|c| c.test_name != test.as_str()) {
        return Err(CliError::flags(format!(
            "calibration for {:?} cannot drive the {test} test",
            c.test_name
        )));
    }
    let m = match test {
        TestKind::TTest | TestKind::KsTest => {
            let m = a.m.ok_or_else(|| CliError::flags(format!("{test} needs --M")))?;
            if test == TestKind::TTest && m < 2 {
                return Err(CliError::flags("ttest needs --M of at least 2"));
            }
            if a.train.is_none() {
                return Err(CliError::flags(format!("{test} needs --train")));
            }
            m
        }
        TestKind::Ksd => return Err(CliError::flags("ksd is available through `evaluate --model` only")),
        _ => {
            if cals.is_empty() {
                return Err(CliError::flags(format!("{test} needs --calibration")));
            }
            if test == TestKind::Mmd && a.train.is_none() {
                return Err(CliError::flags("mmd needs --train to rebuild its reference"));
            }
            match a.m {
                Some(m) => m,
                None if cals.len() == 1 => cals[0].batch_size,
                None => return Err(CliError::flags("several calibrations given; choose a batch size with --M")),
            }
        }
    };
    let calibrated = |size: usize| -> CliResult<&Calibration> {
        let mode = if a.allow_m_mismatch { MatchMode::NearestM } else { MatchMode::Exact };
        select_calibration(&cals, size, mode).map_err(|_| {
            let have: Vec<String> = cals.iter().map(|c| c.batch_size.to_string()).collect();
            CliError::mismatch(format!(
                "batch size {size} has no calibration (calibrated M: {}); pass --allow-m-mismatch to use the nearest",
                have.join(", ")
            ))
        })
    };
    if !cals.is_empty() {
        calibrated(m)?;
    }

    let input = load(&a.input, a.bits_per_dim)?;
    let train = a.train.as_deref().map(|p| load(p, a.bits_per_dim)).transpose()?;
    let n = input.len();
    let mut sizes = vec![m; n / m];
    let remainder = n % m;
    if remainder > 0 && (a.allow_m_mismatch || sizes.is_empty()) {
        sizes.push(remainder);
    }
    let logliks = input.logliks();
    let sqnorms = if test == TestKind::Annulus { Some(sqnorms_of(&input, &a.input)?) } else { None };
    let scores = if test == TestKind::Mmd { Some(scores_of(&input, &a.input)?) } else { None };
    let train_logliks = train.as_ref().map(ExternalModel::logliks);

    let mut lines = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let idx: Vec<usize> = (start..start + size).collect();
        let batch = &logliks[start..start + size];
        start += size;
        let line = match test {
            TestKind::TTest | TestKind::KsTest => {
                let reference = train_logliks.as_deref().expect("checked");
                if size != m && !a.allow_m_mismatch {
                    return Err(CliError::mismatch(format!("input has {n} rows, fewer than M={m}")));
                }
                let r = if test == TestKind::TTest {
                    if size < 2 {
                        return Err(CliError::mismatch("trailing batch of one row cannot be t-tested"));
                    }
                    t_test(reference, batch, a.alpha)?
                } else {
                    ks_test(reference, batch, a.alpha)?
                };
                BatchLine {
                    statistic: r.statistic,
                    threshold: r.critical_value.unwrap_or(f64::NAN),
                    is_ood: r.reject,
                }
            }
            _ => {
                let cal = calibrated(size)?;
                let statistic = match test {
                    TestKind::Typicality => {
                        let h = cal
                            .entropy
                            .as_ref()
                            .ok_or_else(|| CliError::input("typicality calibration is missing its entropy"))?;
                        epsilon_hat(batch, h)?
                    }
                    TestKind::Annulus => {
                        let d = cal
                            .latent_dim
                            .ok_or_else(|| CliError::input("annulus calibration is missing latent_dim"))?;
                        let sq: Vec<f64> = idx.iter().map(|&i| sqnorms.as_ref().expect("loaded")[i]).collect();
                        annulus_statistic(&sq, d)?
                    }
                    TestKind::Mmd => {
                        let train_path = a.train.as_deref().expect("checked");
                        let size = cal
                            .reference_size
                            .ok_or_else(|| CliError::input("mmd calibration is missing reference_size"))?;
                        let reference = select_reference(
                            &scores_of(train.as_ref().expect("checked"), train_path)?,
                            size,
                            rng::derive(cal.seed, REFERENCE_TAG),
                        )?;
                        mmd_statistic(&scores.as_ref().expect("loaded").select(&idx), &reference)?
                    }
                    _ => unreachable!("rejected above"),
                };
                let v = cal.verdict(statistic, size);
                BatchLine {
                    statistic: v.statistic,
                    threshold: v.threshold,
                    is_ood: v.is_ood,
                }
            }
        };
        lines.push(line);
    }

    let summary = emit(a.out.as_deref(), stdout, stderr, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["batch_index", "statistic", "threshold", "is_ood"])
            .map_err(Error::from)?;
        for (i, l) in lines.iter().enumerate() {
            wtr.write_record([i.to_string(), fmt_f64(l.statistic), fmt_f64(l.threshold), l.is_ood.to_string()])
                .map_err(Error::from)?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    let rejected = lines.iter().filter(|l| l.is_ood).count();
    let dropped = n - start;
    writeln!(
        summary,
        "batches={} rejected={} fraction_rejected={} dropped_rows={}",
        lines.len(),
        rejected,
        fmt_f64(rejected as f64 / lines.len() as f64),
        dropped
    )?;
    Ok(())
}

fn split_named(value: &str) -> (String, &str) {
    match value.split_once('=') {
        Some((name, rest)) if !name.is_empty() && !name.contains(':') => (name.to_string(), rest),
        _ => (
            Path::new(value)
                .file_stem()
                .map_or_else(|| value.to_string(), |s| s.to_string_lossy().into_owned()),
            value,
        ),
    }
}

fn campaign_config(a: &CampaignArgs, default_m: &[usize]) -> CliResult<ExperimentConfig> {
    check_alpha(a.alpha)?;
    check_positive("--K", a.k)?;
    check_positive("--repetitions", a.repetitions)?;
    check_positive("--val-size", a.val_size)?;
    check_positive("--test-size", a.test_size)?;
    check_positive("--reference-size", a.reference_size)?;
    let batch_sizes = if a.m.is_empty() { default_m.to_vec() } else { a.m.clone() };
    for &m in &batch_sizes {
        check_positive("--M", m)?;
    }
    let tests = if a.test_name.is_empty() {
        vec![TestKind::Typicality, TestKind::TTest, TestKind::KsTest]
    } else {
        a.test_name.iter().map(|t| parse_test(t)).collect::<CliResult<_>>()?
    };
    let entropy = match a.entropy {
        EntropyFlag::Resub => EntropyChoice::Resubstitution,
        EntropyFlag::Mc => EntropyChoice::MonteCarlo { samples: a.mc_samples },
        EntropyFlag::Closed => EntropyChoice::ClosedForm,
    };

    let setting = match &a.model {
        Some(spec) => {
            if a.train.is_some() || a.val.is_some() || !a.input.is_empty() {
                return Err(CliError::flags("--model cannot be combined with --train/--val/--input"));
            }
            check_positive("--train-size", a.train_size)?;
            let alternatives = a
                .ood
                .iter()
                .map(|o| {
                    let (name, spec) = split_named(o);
                    Ok((name, parse_model(spec)?))
                })
                .collect::<CliResult<Vec<_>>>()?;
            DataSetting::Analytic {
                model: parse_model(spec)?,
                alternatives,
                train_size: a.train_size,
            }
        }
        None => {
            if !a.ood.is_empty() {
                return Err(CliError::flags("--ood takes analytic specs and needs --model"));
            }
            let (Some(train), Some(val)) = (&a.train, &a.val) else {
                return Err(CliError::flags("give --model, or --train and --val with at least one --input"));
            };
            if a.input.is_empty() {
                return Err(CliError::flags("likelihood-file campaigns need at least one --input NAME=PATH"));
            }
            if a.entropy != EntropyFlag::Resub {
                return Err(CliError::flags("likelihood-file campaigns support --entropy resub only"));
            }
            let datasets = a
                .input
                .iter()
                .map(|v| {
                    let (name, path) = split_named(v);
                    Ok((name, load(Path::new(path), a.bits_per_dim)?))
                })
                .collect::<CliResult<Vec<_>>>()?;
            DataSetting::External {
                train: load(train, a.bits_per_dim)?,
                validation: load(val, a.bits_per_dim)?,
                datasets,
                latent_dim: a.dim,
            }
        }
    };
    Ok(ExperimentConfig {
        setting,
        batch_sizes,
        alpha: a.alpha,
        bootstrap: a.k,
        repetitions: a.repetitions,
        validation_size: a.val_size,
        test_size: a.test_size,
        tests,
        entropy,
        mmd_reference_size: a.reference_size,
        likelihood_reference_size: None,
        seed: a.seed,
    })
}

#[derive(Serialize)]
struct ReportMetadata<'a> {
    batching: &'a str,
    repetitions: usize,
    seed: u64,
    alpha: f64,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: &'a [usize],
    tests: Vec<&'static str>,
    datasets: Vec<&'a str>,
}

fn cmd_evaluate(
    a: &CampaignArgs,
    default_m: Option<&[usize]>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<()> {
    let config = campaign_config(a, default_m.unwrap_or(&DEFAULT_BATCH_SIZES))?;
    let report = run_evaluation(&config)?;
    let summary = emit(a.out.as_deref(), stdout, stderr, |w| Ok(report.write_csv(w)?))?;
    if let Some(out) = &a.out {
        let mut datasets: Vec<&str> = Vec::new();
        for r in &report.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        let meta = ReportMetadata {
            batching: BATCHING,
            repetitions: report.repetitions,
            seed: report.seed,
            alpha: config.alpha,
            k: config.bootstrap,
            m: &config.batch_sizes,
            tests: config.tests.iter().map(|t| t.as_str()).collect(),
            datasets,
        };
        let mut path = out.clone().into_os_string();
        path.push(".meta.json");
        let mut text = serde_json::to_string_pretty(&meta).map_err(Error::from)?;
        text.push('\n');
        std::fs::write(&path, text)?;
    }
    summarize_report(&report, summary)?;
    Ok(())
}

fn summarize_report(report: &RejectionReport, w: &mut dyn Write) -> CliResult<()> {
    writeln!(w, "rows={} repetitions={} batching={}", report.rows.len(), report.repetitions, BATCHING)?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    match a.experiment.as_str() {
        "annulus-sweep" => {
            if !(a.radius_step > 0.0 && a.radius_step.is_finite()) || !(a.radius_max >= 0.0 && a.radius_max.is_finite()) {
                return Err(CliError::flags("--radius-step must be positive and --radius-max nonnegative"));
            }
            if !(a.sigma > 0.0 && a.sigma.is_finite()) {
                return Err(CliError::flags("--sigma must be positive"));
            }
            check_positive("--d", a.d)?;
            check_positive("--batches", a.batches)?;
            let m = match a.campaign.m.as_slice() {
                [] => 16,
                [m] => *m,
                _ => return Err(CliError::flags("annulus-sweep takes a single --M")),
            };
            check_positive("--M", m)?;
            let steps = (a.radius_max / a.radius_step + 1e-9).floor() as usize;
            let radii: Vec<f64> = (0..=steps).map(|i| i as f64 * a.radius_step).collect();
            let points = annulus_sweep(a.sigma, a.d, &radii, m, a.batches, a.campaign.seed)?;
            let summary = emit(a.campaign.out.as_deref(), stdout, stderr, |w| Ok(write_sweep_csv(&points, w)?))?;
            let best = points
                .iter()
                .min_by(|x, y| x.mean_epsilon_hat.total_cmp(&y.mean_epsilon_hat))
                .expect("at least one radius");
            writeln!(summary, "min_radius={} min_mean_epsilon_hat={}", fmt_f64(best.radius), fmt_f64(best.mean_epsilon_hat))?;
            Ok(())
        }
        "m-sweep" => cmd_evaluate(&a.campaign, Some(&DEFAULT_M_SWEEP), stdout, stderr),
        "evaluate" => cmd_evaluate(&a.campaign, None, stdout, stderr),
        "overlap" => cmd_overlap(a, stdout, stderr),
        other => Err(CliError::flags(format!(
            "unknown experiment {other:?}; valid experiments: {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

fn cmd_overlap(a: &SimulateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let c = &a.campaign;
    check_positive("--bins", a.bins)?;
    let (reference, other) = match &c.model {
        Some(spec) => {
            let model = parse_model(spec)?;
            let [alt] = c.ood.as_slice() else {
                return Err(CliError::flags("overlap with --model needs exactly one --ood"));
            };
            let alt = parse_model(split_named(alt).1)?;
            if alt.d() != model.d() {
                return Err(CliError::flags("--ood model dimension differs from --model"));
            }
            check_positive("--test-size", c.test_size)?;
            let xs = model.sample(c.test_size, rng::derive(c.seed, 1))?;
            let ys = alt.sample(c.test_size, rng::derive(c.seed, 2))?;
            (log_probs(&model, &xs)?, log_probs(&model, &ys)?)
        }
        None => {
            let (Some(val), [input]) = (&c.val, c.input.as_slice()) else {
                return Err(CliError::flags("overlap needs --model with one --ood, or --val and one --input"));
            };
            let other = load(Path::new(split_named(input).1), c.bits_per_dim)?;
            (load(val, c.bits_per_dim)?.logliks(), other.logliks())
        }
    };
    let s = overlap_diagnostic(&reference, &other, a.bins)?;
    let summary = emit(c.out.as_deref(), stdout, stderr, |w| Ok(s.write_csv(w)?))?;
    writeln!(summary, "overlap={} indistinguishable={}", fmt_f64(s.overlap), s.indistinguishable)?;
    Ok(())
}
