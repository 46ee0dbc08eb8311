//! Simulation and evaluation campaigns.
//!
//! [`run_evaluation`] follows the batch-classification protocol: per
//! repetition, draw (or reshuffle) validation and test pools, calibrate
//! every enabled test on the validation pool, cut each test pool into
//! disjoint `M`-sized batches after a seeded shuffle (the remainder is
//! dropped), and record the fraction of batches rejected. Fractions are
//! aggregated as mean and sample standard deviation over repetitions.
//!
//! Pools depend only on `(seed, repetition)`, never on the list of batch
//! sizes, so a sweep over `M` reuses the same data at every `M`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    annulus_statistic, bootstrap_baseline, mmd_statistic, select_reference, t_test, BaselineStatistic, KsReference,
    ScoreSet, SteinFeatures, ANNULUS, DEFAULT_REFERENCE_SIZE, KSD, KS_TEST, MMD, T_TEST,
};
use crate::entropy::{monte_carlo_entropy, resubstitution_entropy, EntropyEstimate, DEFAULT_MC_SAMPLES};
use crate::error::{Error, Result};
use crate::models::{fmt_f64, log_probs, AnalyticModel, ExternalModel, IsotropicGaussian, Model};
use crate::rng::{self, NormalStream};
use crate::typicality::{bootstrap_threshold, epsilon_hat, Calibration, DEFAULT_ALPHA, DEFAULT_BOOTSTRAP, TYPICALITY};

pub const IN_DIST: &str = "in-dist";
pub const DEFAULT_VALIDATION_SIZE: usize = 5000;
pub const DEFAULT_TEST_SIZE: usize = 5000;
pub const DEFAULT_TRAIN_SIZE: usize = 10_000;
pub const DEFAULT_REPETITIONS: usize = 10;
pub const DEFAULT_BATCH_SIZES: [usize; 3] = [2, 10, 25];
pub const DEFAULT_M_SWEEP: [usize; 10] = [1, 2, 5, 10, 25, 50, 75, 100, 125, 150];
pub const DEFAULT_BINS: usize = 50;
/// Overlap at or above this marks likelihood histograms as indistinguishable.
pub const OVERLAP_FLAG: f64 = 0.9;
pub const BATCHING: &str = "disjoint consecutive batches after a seeded shuffle; remainder dropped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TestKind {
    Typicality,
    TTest,
    KsTest,
    Mmd,
    Ksd,
    Annulus,
}

impl TestKind {
    pub const ALL: [TestKind; 6] = [
        TestKind::Typicality,
        TestKind::TTest,
        TestKind::KsTest,
        TestKind::Mmd,
        TestKind::Ksd,
        TestKind::Annulus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Typicality => TYPICALITY,
            TestKind::TTest => T_TEST,
            TestKind::KsTest => KS_TEST,
            TestKind::Mmd => MMD,
            TestKind::Ksd => KSD,
            TestKind::Annulus => ANNULUS,
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid("test-name", format!("unknown test {s:?}")))
    }
}

/// Which entropy estimate anchors the typicality test.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EntropyChoice {
    #[default]
    Resubstitution,
    MonteCarlo {
        samples: usize,
    },
    ClosedForm,
}

impl EntropyChoice {
    pub fn monte_carlo() -> Self {
        EntropyChoice::MonteCarlo {
            samples: DEFAULT_MC_SAMPLES,
        }
    }
}

/// Where the data for an experiment comes from.
#[derive(Debug, Clone)]
pub enum DataSetting {
    /// Train/validation/in-distribution pools are sampled from `model`;
    /// each alternative contributes one OOD test pool.
    Analytic {
        model: AnalyticModel,
        alternatives: Vec<(String, AnalyticModel)>,
        train_size: usize,
    },
    /// Precomputed likelihood records. Each repetition reshuffles the
    /// validation and test files and takes up to the configured sizes.
    External {
        train: ExternalModel,
        validation: ExternalModel,
        datasets: Vec<(String, ExternalModel)>,
        latent_dim: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub setting: DataSetting,
    pub batch_sizes: Vec<usize>,
    pub alpha: f64,
    pub bootstrap: usize,
    pub repetitions: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub tests: Vec<TestKind>,
    pub entropy: EntropyChoice,
    /// Training scores each MMD batch is compared against.
    pub mmd_reference_size: usize,
    /// Training likelihoods used by the t- and KS-tests; `None` uses all.
    pub likelihood_reference_size: Option<usize>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Defaults for an analytic setting: 5000 validation and test examples,
    /// K = 50, α = 0.99, 10 repetitions, `M ∈ {2, 10, 25}`.
    pub fn analytic(model: AnalyticModel, alternatives: Vec<(String, AnalyticModel)>) -> Self {
        Self::with_setting(DataSetting::Analytic {
            model,
            alternatives,
            train_size: DEFAULT_TRAIN_SIZE,
        })
    }

    pub fn with_setting(setting: DataSetting) -> Self {
        Self {
            setting,
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
            alpha: DEFAULT_ALPHA,
            bootstrap: DEFAULT_BOOTSTRAP,
            repetitions: DEFAULT_REPETITIONS,
            validation_size: DEFAULT_VALIDATION_SIZE,
            test_size: DEFAULT_TEST_SIZE,
            tests: vec![TestKind::Typicality, TestKind::TTest, TestKind::KsTest],
            entropy: EntropyChoice::Resubstitution,
            mmd_reference_size: DEFAULT_REFERENCE_SIZE,
            likelihood_reference_size: None,
            seed: rng::DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() {
            return Err(Error::invalid("M", "batch size list is empty"));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::invalid("M", "batch sizes must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions", "must be at least 1"));
        }
        if self.validation_size == 0 || self.test_size == 0 {
            return Err(Error::invalid("size", "validation and test sizes must be positive"));
        }
        if self.bootstrap == 0 {
            return Err(Error::invalid("K", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.tests.is_empty() {
            return Err(Error::invalid("test-name", "no tests enabled"));
        }
        if let DataSetting::Analytic { train_size: 0, .. } = self.setting {
            return Err(Error::invalid("train_size", "must be positive"));
        }
        Ok(())
    }

    fn dataset_names(&self) -> Vec<String> {
        match &self.setting {
            DataSetting::Analytic { alternatives, .. } => std::iter::once(IN_DIST.to_string())
                .chain(alternatives.iter().map(|(n, _)| n.clone()))
                .collect(),
            DataSetting::External { datasets, .. } => datasets.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// One row of a rejection report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub test: String,
    pub dataset: String,
    pub m: usize,
    pub mean_fraction: f64,
    pub std_fraction: f64,
    /// Batches classified per repetition.
    pub n_batches: usize,
    /// Per-repetition fractions, in repetition order.
    #[serde(skip)]
    pub fractions: Vec<f64>,
}

/// Fraction of `M`-sized batches classified as OOD, per test and dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionReport {
    pub rows: Vec<ReportRow>,
    pub repetitions: usize,
    pub batching: String,
    pub seed: u64,
}

pub const REPORT_HEADER: [&str; 6] = ["test", "dataset", "M", "mean_fraction", "std_fraction", "n_batches"];

impl RejectionReport {
    pub fn row(&self, test: &str, dataset: &str, m: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.test == test && r.dataset == dataset && r.m == m)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            wtr.write_record([
                r.test.clone(),
                r.dataset.clone(),
                r.m.to_string(),
                fmt_f64(r.mean_fraction),
                fmt_f64(r.std_fraction),
                r.n_batches.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses the CSV rows back; per-repetition fractions are not stored
    /// in the file and come back empty.
    pub fn read_csv_rows<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
        let mut rdr = csv::Reader::from_reader(reader);
        if rdr.headers()?.iter().ne(REPORT_HEADER) {
            return Err(Error::parse(Some(1), format!("report header must be {}", REPORT_HEADER.join(","))));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line());
            let bad = |what: &str| Error::parse(line, format!("bad {what}"));
            rows.push(ReportRow {
                test: rec[0].to_string(),
                dataset: rec[1].to_string(),
                m: rec[2].parse().map_err(|_| bad("M"))?,
                mean_fraction: rec[3].parse().map_err(|_| bad("mean_fraction"))?,
                std_fraction: rec[4].parse().map_err(|_| bad("std_fraction"))?,
                n_batches: rec[5].parse().map_err(|_| bad("n_batches"))?,
                fractions: Vec::new(),
            });
        }
        Ok(rows)
    }
}

/// Per-example quantities one pool needs for the enabled tests.
struct Pool {
    logliks: Vec<f64>,
    sqnorms: Option<Vec<f64>>,
    scores: Option<ScoreSet>,
    stein: Option<SteinFeatures>,
}

struct Needs {
    sqnorms: bool,
    scores: bool,
    stein: bool,
}

impl Needs {
    fn of(tests: &[TestKind]) -> Self {
        Self {
            sqnorms: tests.contains(&TestKind::Annulus),
            scores: tests.contains(&TestKind::Mmd),
            stein: tests.contains(&TestKind::Ksd),
        }
    }
}

impl Pool {
    fn from_model(model: &dyn Model, xs: &[Vec<f64>], needs: &Needs) -> Result<Self> {
        Ok(Self {
            logliks: log_probs(model, xs)?,
            sqnorms: if needs.sqnorms {
                Some(xs.iter().map(|x| model.latent_sqnorm(x)).collect::<Result<_>>()?)
            } else {
                None
            },
            scores: if needs.scores {
                Some(ScoreSet::new(xs.iter().map(|x| model.score(x)).collect::<Result<_>>()?)?)
            } else {
                None
            },
            stein: if needs.stein {
                Some(SteinFeatures::new(model, xs)?)
            } else {
                None
            },
        })
    }

    fn from_records(records: &ExternalModel, needs: &Needs) -> Result<Self> {
        if needs.stein {
            return Err(Error::Unsupported {
                model: "ExternalModel",
                capability: "KSD (needs exact score and Hessian products)",
            });
        }
        Ok(Self {
            logliks: records.logliks(),
            sqnorms: if needs.sqnorms { Some(records.latent_sqnorms()?) } else { None },
            scores: if needs.scores { Some(ScoreSet::new(records.scores()?)?) } else { None },
            stein: None,
        })
    }

    fn len(&self) -> usize {
        self.logliks.len()
    }

    fn sqnorms(&self) -> &[f64] {
        self.sqnorms.as_deref().expect("latent norms prepared")
    }

    fn scores(&self) -> &ScoreSet {
        self.scores.as_ref().expect("scores prepared")
    }

    fn stein(&self) -> &SteinFeatures {
        self.stein.as_ref().expect("Stein features prepared")
    }
}

struct RepData {
    train: Pool,
    validation: Pool,
    tests: Vec<Pool>,
    entropy: Option<EntropyEstimate>,
    latent_dim: Option<usize>,
}

mod tags {
    pub const TRAIN: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const REFERENCE: u64 = 3;
    pub const ENTROPY: u64 = 4;
    pub const DATASET: u64 = 10;
    pub const SHUFFLE: u64 = 1_000;
    pub const CALIBRATE: u64 = 5_000;
}

fn take_shuffled(records: &ExternalModel, size: usize, seed: u64) -> ExternalModel {
    let perm = rng::permutation(records.len(), &mut rng::stream(seed, 0));
    records.select(&perm[..size.min(records.len())])
}

fn prepare(config: &ExperimentConfig, rep_seed: u64) -> Result<RepData> {
    let needs = Needs::of(&config.tests);
    let typicality = config.tests.contains(&TestKind::Typicality);
    match &config.setting {
        DataSetting::Analytic {
            model,
            alternatives,
            train_size,
        } => {
            let draw = |m: &AnalyticModel, n: usize, tag: u64| m.sample(n, rng::derive(rep_seed, tag));
            let train_x = draw(model, *train_size, tags::TRAIN)?;
            let train = Pool::from_model(
                model,
                &train_x,
                &Needs {
                    sqnorms: false,
                    scores: needs.scores,
                    stein: false,
                },
            )?;
            let validation = Pool::from_model(model, &draw(model, config.validation_size, tags::VALIDATION)?, &needs)?;
            let mut tests = vec![Pool::from_model(model, &draw(model, config.test_size, tags::DATASET)?, &needs)?];
            for (i, (_, alt)) in alternatives.iter().enumerate() {
                if alt.d() != model.d() {
                    return Err(Error::DimensionMismatch {
                        expected: model.d(),
                        got: alt.d(),
                    });
                }
                let xs = draw(alt, config.test_size, tags::DATASET + 1 + i as u64)?;
                tests.push(Pool::from_model(model, &xs, &needs)?);
            }
            let entropy = if typicality {
                Some(match config.entropy {
                    EntropyChoice::Resubstitution => resubstitution_entropy(&train.logliks)?,
                    EntropyChoice::MonteCarlo { samples } => {
                        monte_carlo_entropy(model, samples, rng::derive(rep_seed, tags::ENTROPY))?
                    }
                    EntropyChoice::ClosedForm => EntropyEstimate::closed_form(model)?,
                })
            } else {
                None
            };
            Ok(RepData {
                train,
                validation,
                tests,
                entropy,
                latent_dim: Some(model.d()),
            })
        }
        DataSetting::External {
            train,
            validation,
            datasets,
            latent_dim,
        } => {
            let train_pool = Pool::from_records(
                train,
                &Needs {
                    sqnorms: false,
                    scores: needs.scores,
                    stein: false,
                },
            )?;
            let val = take_shuffled(validation, config.validation_size, rng::derive(rep_seed, tags::VALIDATION));
            let validation = Pool::from_records(&val, &needs)?;
            let tests = datasets
                .iter()
                .enumerate()
                .map(|(i, (_, recs))| {
                    let pool = take_shuffled(recs, config.test_size, rng::derive(rep_seed, tags::DATASET + i as u64));
                    Pool::from_records(&pool, &needs)
                })
                .collect::<Result<Vec<_>>>()?;
            let entropy = if typicality {
                Some(match config.entropy {
                    EntropyChoice::Resubstitution => resubstitution_entropy(&train_pool.logliks)?,
                    _ => {
                        return Err(Error::Unsupported {
                            model: "ExternalModel",
                            capability: "Monte Carlo or closed-form entropy",
                        })
                    }
                })
            } else {
                None
            };
            if needs.sqnorms && latent_dim.is_none() {
                return Err(Error::invalid("dim", "annulus test needs the latent dimension"));
            }
            Ok(RepData {
                train: train_pool,
                validation,
                tests,
                entropy,
                latent_dim: *latent_dim,
            })
        }
    }
}

/// A calibrated test ready to score batches of pool indices.
enum Classifier<'a> {
    Bootstrap(Calibration, BatchStat<'a>),
    TTest(&'a [f64], f64),
    KsTest(KsReference, f64),
}

enum BatchStat<'a> {
    Typicality(EntropyEstimate),
    Mmd(&'a ScoreSet),
    Ksd,
    Annulus(usize),
}

impl Classifier<'_> {
    fn rejects(&self, pool: &Pool, batch: &[usize]) -> Result<bool> {
        let logliks = || batch.iter().map(|&i| pool.logliks[i]).collect::<Vec<f64>>();
        match self {
            Classifier::Bootstrap(cal, stat) => {
                let s = match stat {
                    BatchStat::Typicality(h) => epsilon_hat(&logliks(), h)?,
                    BatchStat::Mmd(reference) => mmd_statistic(&pool.scores().select(batch), reference)?,
                    BatchStat::Ksd => pool.stein().statistic(batch)?,
                    BatchStat::Annulus(d) => {
                        let sq: Vec<f64> = batch.iter().map(|&i| pool.sqnorms()[i]).collect();
                        annulus_statistic(&sq, *d)?
                    }
                };
                Ok(cal.verdict(s, batch.len()).is_ood)
            }
            Classifier::TTest(reference, alpha) => {
                if batch.len() < 2 {
                    // Welch needs two values per sample; a singleton batch is never rejected.
                    return Ok(false);
                }
                Ok(t_test(reference, &logliks(), *alpha)?.reject)
            }
            Classifier::KsTest(reference, alpha) => Ok(reference.test(&logliks(), *alpha)?.reject),
        }
    }
}

fn run_repetition(config: &ExperimentConfig, rep: usize) -> Result<Vec<(usize, usize)>> {
    let rep_seed = rng::derive(config.seed, rep as u64);
    let data = prepare(config, rep_seed)?;
    let reference_len = config
        .likelihood_reference_size
        .map_or(data.train.len(), |r| r.min(data.train.len()));
    let likelihood_reference = &data.train.logliks[..reference_len];
    let ks_reference = if config.tests.contains(&TestKind::KsTest) {
        Some(KsReference::new(likelihood_reference)?)
    } else {
        None
    };
    let mmd_reference = if config.tests.contains(&TestKind::Mmd) {
        Some(select_reference(
            data.train.scores(),
            config.mmd_reference_size,
            rng::derive(rep_seed, tags::REFERENCE),
        )?)
    } else {
        None
    };
    let orders: Vec<Vec<usize>> = data
        .tests
        .iter()
        .enumerate()
        .map(|(i, pool)| rng::permutation(pool.len(), &mut rng::stream(rng::derive(rep_seed, tags::SHUFFLE + i as u64), 0)))
        .collect();

    let mut classifiers = Vec::new();
    if let (Some(&m), Some(short)) = (config.batch_sizes.iter().max(), data.tests.iter().map(Pool::len).min()) {
        if short < m {
            return Err(Error::invalid("M", format!("test pool has {short} examples, fewer than M={m}")));
        }
    }
    for &test in &config.tests {
        for &m in &config.batch_sizes {
            let seed = rng::derive(rng::derive(rep_seed, tags::CALIBRATE + test.tag()), m as u64);
            let (k, alpha) = (config.bootstrap, config.alpha);
            let classifier = match test {
                TestKind::Typicality => {
                    let h = data.entropy.expect("entropy prepared");
                    let cal = bootstrap_threshold(&data.validation.logliks, h, m, k, alpha, seed)?;
                    Classifier::Bootstrap(cal, BatchStat::Typicality(h))
                }
                TestKind::TTest => Classifier::TTest(likelihood_reference, alpha),
                TestKind::KsTest => Classifier::KsTest(ks_reference.clone().expect("KS reference"), alpha),
                TestKind::Mmd => {
                    let reference = mmd_reference.as_ref().expect("MMD reference");
                    let stat = BaselineStatistic::Mmd {
                        validation: data.validation.scores(),
                        reference,
                    };
                    Classifier::Bootstrap(bootstrap_baseline(&stat, m, k, alpha, seed)?, BatchStat::Mmd(reference))
                }
                TestKind::Ksd => {
                    let stat = BaselineStatistic::Ksd {
                        validation: data.validation.stein(),
                    };
                    Classifier::Bootstrap(bootstrap_baseline(&stat, m, k, alpha, seed)?, BatchStat::Ksd)
                }
                TestKind::Annulus => {
                    let dim = data.latent_dim.expect("latent dimension checked");
                    let stat = BaselineStatistic::Annulus {
                        validation_sqnorms: data.validation.sqnorms(),
                        dim,
                    };
                    Classifier::Bootstrap(bootstrap_baseline(&stat, m, k, alpha, seed)?, BatchStat::Annulus(dim))
                }
            };
            classifiers.push((classifier, m));
        }
    }

    // (rejected, batches) for every (test, dataset, M), in report order.
    let mut out = Vec::new();
    let n_m = config.batch_sizes.len();
    for (t, _) in config.tests.iter().enumerate() {
        for (pool, order) in data.tests.iter().zip(&orders) {
            for j in 0..n_m {
                let (classifier, m) = &classifiers[t * n_m + j];
                let mut rejected = 0;
                let mut batches = 0;
                for batch in order.chunks_exact(*m) {
                    batches += 1;
                    if classifier.rejects(pool, batch)? {
                        rejected += 1;
                    }
                }
                out.push((rejected, batches));
            }
        }
    }
    Ok(out)
}

/// Runs the full protocol and aggregates rejection fractions.
pub fn run_evaluation(config: &ExperimentConfig) -> Result<RejectionReport> {
    config.validate()?;
    let per_rep = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(config, rep))
        .collect::<Result<Vec<_>>>()?;

    let names = config.dataset_names();
    let mut rows = Vec::new();
    let mut idx = 0;
    for test in &config.tests {
        for name in &names {
            for &m in &config.batch_sizes {
                let fractions: Vec<f64> = per_rep.iter().map(|c| c[idx].0 as f64 / c[idx].1 as f64).collect();
                let n_batches = per_rep[0][idx].1;
                let r = fractions.len() as f64;
                let mean = fractions.iter().sum::<f64>() / r;
                let std = if fractions.len() > 1 {
                    (fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / (r - 1.0)).sqrt()
                } else {
                    0.0
                };
                rows.push(ReportRow {
                    test: test.to_string(),
                    dataset: name.clone(),
                    m,
                    mean_fraction: mean,
                    std_fraction: std,
                    n_batches,
                    fractions,
                });
                idx += 1;
            }
        }
    }
    Ok(RejectionReport {
        rows,
        repetitions: config.repetitions,
        batching: BATCHING.to_string(),
        seed: config.seed,
    })
}

/// [`run_evaluation`] over a list of batch sizes, typically spanning 1..=150.
pub fn m_sweep(config: &ExperimentConfig) -> Result<RejectionReport> {
    run_evaluation(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub radius: f64,
    pub mean_epsilon_hat: f64,
}

/// Mean ε̂ for batches of points placed uniformly on spheres of the given
/// radii around the mean of `N(0, σ² I_d)`, against its closed-form entropy.
pub fn annulus_sweep(sigma: f64, d: usize, radii: &[f64], m: usize, batches: usize, seed: u64) -> Result<Vec<SweepPoint>> {
    if d < 1 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    if radii.is_empty() {
        return Err(Error::empty("radii"));
    }
    if m == 0 || batches == 0 {
        return Err(Error::invalid("M", "batch size and batch count must be positive"));
    }
    if let Some(r) = radii.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::invalid("radius", format!("must be finite and nonnegative, got {r}")));
    }
    let model = IsotropicGaussian::standard(d, sigma)?;
    let entropy = EntropyEstimate::closed_form(&model)?;
    radii
        .iter()
        .enumerate()
        .map(|(i, &radius)| {
            let mut normals = NormalStream::new(rng::stream(seed, i as u64));
            let mut total = 0.0;
            let mut x = vec![0.0; d];
            for _ in 0..batches {
                let mut logliks = Vec::with_capacity(m);
                for _ in 0..m {
                    normals.fill(&mut x);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    x.iter_mut().for_each(|v| *v *= radius / norm);
                    logliks.push(model.log_prob(&x)?);
                }
                total += epsilon_hat(&logliks, &entropy)?;
            }
            Ok(SweepPoint {
                radius,
                mean_epsilon_hat: total / batches as f64,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["radius", "mean_epsilon_hat"])?;
    for p in points {
        wtr.write_record([fmt_f64(p.radius), fmt_f64(p.mean_epsilon_hat)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepPoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().ne(["radius", "mean_epsilon_hat"]) {
        return Err(Error::parse(Some(1), "sweep header must be radius,mean_epsilon_hat"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map(|p| p.line());
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::parse(line, "bad number"));
            Ok(SweepPoint {
                radius: num(0)?,
                mean_epsilon_hat: num(1)?,
            })
        })
        .collect()
}

/// ε̂ of `batches` batches of size `m` drawn from `source`, scored by `model`.
pub fn epsilon_hat_draws(
    model: &dyn Model,
    source: &dyn Model,
    entropy: &EntropyEstimate,
    m: usize,
    batches: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if m == 0 || batches == 0 {
        return Err(Error::invalid("M", "batch size and batch count must be positive"));
    }
    (0..batches as u64)
        .into_par_iter()
        .map(|b| {
            let xs = source.sample(m, rng::derive(seed, b))?;
            epsilon_hat(&log_probs(model, &xs)?, entropy)
        })
        .collect()
}

/// Shared-bin histograms of two likelihood samples and their overlap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub lo: f64,
    pub hi: f64,
    pub reference_counts: Vec<usize>,
    pub other_counts: Vec<usize>,
    /// Σ min(mass_ref, mass_other) over bins, in `[0, 1]`.
    pub overlap: f64,
    /// Overlap ≥ [`OVERLAP_FLAG`]: the likelihoods alone cannot separate the sets.
    pub indistinguishable: bool,
}

impl OverlapSummary {
    pub fn bins(&self) -> usize {
        self.reference_counts.len()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + i as f64 * w, if i + 1 == self.bins() { self.hi } else { self.lo + (i + 1) as f64 * w })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["bin", "lo", "hi", "reference_count", "other_count"])?;
        for i in 0..self.bins() {
            let (lo, hi) = self.bin_edges(i);
            wtr.write_record([
                i.to_string(),
                fmt_f64(lo),
                fmt_f64(hi),
                self.reference_counts[i].to_string(),
                self.other_counts[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Equal-width histograms over the pooled range with `bins` bins.
pub fn overlap_diagnostic(reference_logliks: &[f64], other_logliks: &[f64], bins: usize) -> Result<OverlapSummary> {
    if reference_logliks.is_empty() || other_logliks.is_empty() {
        return Err(Error::empty("likelihood lists"));
    }
    if bins == 0 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    crate::error::ensure_finite(reference_logliks, "reference log-likelihoods")?;
    crate::error::ensure_finite(other_logliks, "other log-likelihoods")?;
    let all = reference_logliks.iter().chain(other_logliks);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bin_of = |v: f64| -> usize {
        if span == 0.0 {
            0
        } else {
            (((v - lo) / span * bins as f64) as usize).min(bins - 1)
        }
    };
    let histogram = |values: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &v in values {
            counts[bin_of(v)] += 1;
        }
        counts
    };
    let (rc, oc) = (histogram(reference_logliks), histogram(other_logliks));
    let (nr, no) = (reference_logliks.len() as f64, other_logliks.len() as f64);
    let overlap = rc
        .iter()
        .zip(&oc)
        .map(|(&a, &b)| (a as f64 / nr).min(b as f64 / no))
        .sum::<f64>()
        .min(1.0);
    Ok(OverlapSummary {
        lo,
        hi,
        reference_counts: rc,
        other_counts: oc,
        overlap,
        indistinguishable: overlap >= OVERLAP_FLAG,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(d: usize, sigma: f64) -> AnalyticModel {
        IsotropicGaussian::standard(d, sigma).unwrap().into()
    }

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::analytic(iso(16, 1.0), vec![("half".into(), iso(16, 0.5))]);
        cfg.repetitions = 3;
        cfg.validation_size = 1000;
        cfg.test_size = 1000;
        cfg.set_train(2000);
        cfg
    }

    trait TrainSize {
        fn set_train(&mut self, n: usize);
    }

    impl TrainSize for ExperimentConfig {
        fn set_train(&mut self, n: usize) {
            if let DataSetting::Analytic { train_size, .. } = &mut self.setting {
                *train_size = n;
            }
        }
    }

    #[test]
    fn sweep_minimum_and_mode() {
        let radii: Vec<f64> = (0..=32).map(|i| i as f64 * 0.25).collect();
        let pts = annulus_sweep(1.0, 16, &radii, 4, 3, 1).unwrap();
        let best = pts.iter().min_by(|a, b| a.mean_epsilon_hat.total_cmp(&b.mean_epsilon_hat)).unwrap();
        assert_eq!(best.radius, 4.0);
        let mode = annulus_sweep(1.0, 16, &[0.0], 1, 1, 1).unwrap();
        assert!((mode[0].mean_epsilon_hat - 8.0).abs() < 1e-12);
        // nondecreasing away from the minimum on both sides
        let at = pts.iter().position(|p| p.radius == 4.0).unwrap();
        assert!(pts[..=at].windows(2).all(|w| w[0].mean_epsilon_hat >= w[1].mean_epsilon_hat));
        assert!(pts[at..].windows(2).all(|w| w[0].mean_epsilon_hat <= w[1].mean_epsilon_hat));
        assert!(annulus_sweep(1.0, 0, &radii, 4, 3, 1).is_err());
        assert!(annulus_sweep(1.0, 16, &[], 4, 3, 1).is_err());
    }

    #[test]
    fn sweep_csv_round_trip() {
        let pts = annulus_sweep(1.0, 4, &[0.0, 1.5, 2.0], 2, 2, 3).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&pts, &mut buf).unwrap();
        assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), pts);
    }

    #[test]
    fn evaluation_separates_in_and_out() {
        let mut cfg = small_config();
        cfg.set_train(2000);
        cfg.batch_sizes = vec![10];
        let report = run_evaluation(&cfg).unwrap();
        let ind = report.row(TYPICALITY, IN_DIST, 10).unwrap();
        assert!(ind.mean_fraction <= 0.05, "{}", ind.mean_fraction);
        assert_eq!(ind.n_batches, 100);
        let ood = report.row(TYPICALITY, "half", 10).unwrap();
        assert!(ood.mean_fraction >= 0.99, "{}", ood.mean_fraction);
        assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_fraction) && r.std_fraction >= 0.0));
    }

    #[test]
    fn identical_alternative_looks_in_distribution() {
        let mut cfg = ExperimentConfig::analytic(iso(8, 1.0), vec![("same".into(), iso(8, 1.0))]);
        cfg.repetitions = 4;
        cfg.validation_size = 1000;
        cfg.test_size = 1000;
        cfg.set_train(2000);
        cfg.batch_sizes = vec![10];
        let report = run_evaluation(&cfg).unwrap();
        for t in [TYPICALITY, T_TEST, KS_TEST] {
            let a = report.row(t, IN_DIST, 10).unwrap().mean_fraction;
            let b = report.row(t, "same", 10).unwrap().mean_fraction;
            assert!((a - b).abs() <= 0.05, "{t}: {a} vs {b}");
        }
    }

    #[test]
    fn report_is_reproducible_and_round_trips() {
        let mut cfg = small_config();
        cfg.set_train(500);
        cfg.validation_size = 300;
        cfg.test_size = 300;
        cfg.repetitions = 2;
        cfg.tests = TestKind::ALL.to_vec();
        cfg.mmd_reference_size = 100;
        let a = run_evaluation(&cfg).unwrap();
        let b = run_evaluation(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6 * 2 * 3);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let rows = RejectionReport::read_csv_rows(buf.as_slice()).unwrap();
        for (x, y) in rows.iter().zip(&a.rows) {
            assert_eq!((x.mean_fraction.to_bits(), x.std_fraction.to_bits()), (y.mean_fraction.to_bits(), y.std_fraction.to_bits()));
            assert_eq!((&x.test, &x.dataset, x.m, x.n_batches), (&y.test, &y.dataset, y.m, y.n_batches));
        }
    }

    #[test]
    fn sweep_column_matches_single_run() {
        let mut cfg = small_config();
        cfg.set_train(500);
        cfg.repetitions = 2;
        cfg.batch_sizes = vec![1, 5, 20];
        let sweep = m_sweep(&cfg).unwrap();
        cfg.batch_sizes = vec![1];
        let single = run_evaluation(&cfg).unwrap();
        for row in &single.rows {
            assert_eq!(sweep.row(&row.test, &row.dataset, 1).unwrap(), row);
        }
    }

    #[test]
    fn pool_smaller_than_m_is_an_error() {
        let mut cfg = small_config();
        cfg.test_size = 5;
        cfg.validation_size = 50;
        cfg.batch_sizes = vec![10];
        assert!(run_evaluation(&cfg).is_err());
    }

    #[test]
    fn external_setting_runs() {
        let g = IsotropicGaussian::standard(4, 1.0).unwrap();
        let to_records = |xs: Vec<Vec<f64>>, prefix: &str| {
            ExternalModel::from_records(
                xs.iter()
                    .enumerate()
                    .map(|(i, x)| crate::models::LikelihoodRecord {
                        id: format!("{prefix}{i}"),
                        loglik: g.log_prob(x).unwrap(),
                        latent_sqnorm: Some(g.latent_sqnorm(x).unwrap()),
                        score: Some(g.score(x).unwrap()),
                    })
                    .collect(),
            )
            .unwrap()
        };
        let q = IsotropicGaussian::standard(4, 0.3).unwrap();
        let setting = DataSetting::External {
            train: to_records(g.sample(1000, 1).unwrap(), "t"),
            validation: to_records(g.sample(800, 2).unwrap(), "v"),
            datasets: vec![
                ("in".into(), to_records(g.sample(800, 3).unwrap(), "i")),
                ("ood".into(), to_records(q.sample(800, 4).unwrap(), "o")),
            ],
            latent_dim: Some(4),
        };
        let mut cfg = ExperimentConfig::with_setting(setting);
        cfg.repetitions = 2;
        cfg.batch_sizes = vec![20];
        cfg.tests = vec![TestKind::Typicality, TestKind::Annulus, TestKind::Mmd];
        let report = run_evaluation(&cfg).unwrap();
        assert!(report.row(TYPICALITY, "ood", 20).unwrap().mean_fraction > 0.9);
        assert_eq!(report.row(ANNULUS, "in", 20).unwrap().n_batches, 40);

        cfg.tests = vec![TestKind::Ksd];
        assert!(matches!(run_evaluation(&cfg), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn overlap_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let s = overlap_diagnostic(&a, &a, DEFAULT_BINS).unwrap();
        assert!((s.overlap - 1.0).abs() < 1e-12);
        assert!(s.indistinguishable);
        let s = overlap_diagnostic(&[0.0, 0.1], &[10.0, 10.5], DEFAULT_BINS).unwrap();
        assert_eq!(s.overlap, 0.0);
        assert!(overlap_diagnostic(&[], &a, DEFAULT_BINS).is_err());
        let s = overlap_diagnostic(&[2.0], &[2.0], DEFAULT_BINS).unwrap();
        assert_eq!(s.overlap, 1.0);
    }

    #[test]
    fn overlap_of_separated_normals() {
        let g = IsotropicGaussian::standard(1, 1.0).unwrap();
        let a: Vec<f64> = g.sample(10_000, 1).unwrap().into_iter().map(|x| x[0]).collect();
        let b: Vec<f64> = g.sample(10_000, 2).unwrap().into_iter().map(|x| x[0] + 5.0).collect();
        let s = overlap_diagnostic(&a, &b, DEFAULT_BINS).unwrap();
        assert!(s.overlap < 0.1, "{}", s.overlap);
        assert_eq!(s.reference_counts.iter().sum::<usize>(), 10_000);
    }

    #[test]
    fn test_kind_names_round_trip() {
        for t in TestKind::ALL {
            assert_eq!(t.as_str().parse::<TestKind>().unwrap(), t);
        }
        assert!("wilcoxon".parse::<TestKind>().is_err());
    }
}
