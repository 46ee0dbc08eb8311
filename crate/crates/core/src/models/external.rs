//! Externally computed likelihoods.
//!
//! CSV layout, UTF-8, one header row:
//!
//! ```text
//! id,loglik[,latent_sqnorm][,score_0,...,score_{d-1}]
//! ```
//!
//! Log-likelihoods are in nats. Values are written with Rust's shortest
//! round-trip formatting, so parse → write → parse is the identity.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::Model;
use crate::error::{Error, Result};

/// One example's precomputed model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodRecord {
    pub id: String,
    pub loglik: f64,
    pub latent_sqnorm: Option<f64>,
    pub score: Option<Vec<f64>>,
}

impl LikelihoodRecord {
    pub fn new(id: impl Into<String>, loglik: f64) -> Self {
        Self {
            id: id.into(),
            loglik,
            latent_sqnorm: None,
            score: None,
        }
    }
}

/// Converts a bits-per-dimension negative log-likelihood into a
/// log-likelihood in nats.
pub fn bits_per_dim_to_nats(bpd: f64, d: usize) -> f64 {
    -bpd * d as f64 * std::f64::consts::LN_2
}

/// A likelihood source backed by precomputed records.
///
/// It cannot evaluate new inputs, sample, or provide an entropy. Scores
/// and latent norms are available only when the file carried them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalModel {
    records: Vec<LikelihoodRecord>,
    dimension: Option<usize>,
    has_latent: bool,
}

impl ExternalModel {
    pub fn from_records(records: Vec<LikelihoodRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let has_latent = records.first().is_some_and(|r| r.latent_sqnorm.is_some());
        let dimension = records.first().and_then(|r| r.score.as_ref().map(Vec::len));
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid("id", format!("duplicate record id {:?}", r.id)));
            }
            if !r.loglik.is_finite() {
                return Err(Error::non_finite(format!("loglik of record {:?}", r.id)));
            }
            match r.latent_sqnorm {
                Some(v) if !(v.is_finite() && v >= 0.0) => {
                    return Err(Error::invalid(
                        "latent_sqnorm",
                        format!("record {:?} has {v}; must be finite and nonnegative", r.id),
                    ))
                }
                Some(_) if !has_latent => {
                    return Err(Error::invalid("latent_sqnorm", "present on some records only"))
                }
                None if has_latent => {
                    return Err(Error::invalid("latent_sqnorm", "present on some records only"))
                }
                _ => {}
            }
            match (&r.score, dimension) {
                (Some(s), Some(d)) if s.len() == d => {
                    if s.iter().any(|v| !v.is_finite()) {
                        return Err(Error::non_finite(format!("score of record {:?}", r.id)));
                    }
                }
                (Some(s), Some(d)) => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: s.len(),
                    })
                }
                (None, None) => {}
                _ => return Err(Error::invalid("score", "present on some records only")),
            }
        }
        if dimension == Some(0) {
            return Err(Error::invalid("score", "score vectors must be nonempty"));
        }
        Ok(Self {
            records,
            dimension,
            has_latent,
        })
    }

    pub fn records(&self) -> &[LikelihoodRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Score dimension, when the records carry scores.
    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn has_scores(&self) -> bool {
        self.dimension.is_some()
    }

    pub fn has_latent(&self) -> bool {
        self.has_latent
    }

    pub fn get(&self, id: &str) -> Option<&LikelihoodRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn logliks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loglik).collect()
    }

    pub fn latent_sqnorms(&self) -> Result<Vec<f64>> {
        if !self.has_latent {
            return Err(Error::Unsupported {
                model: "ExternalModel",
                capability: "latent_sqnorm (column absent)",
            });
        }
        Ok(self.records.iter().filter_map(|r| r.latent_sqnorm).collect())
    }

    pub fn scores(&self) -> Result<Vec<Vec<f64>>> {
        if !self.has_scores() {
            return Err(Error::Unsupported {
                model: "ExternalModel",
                capability: "score (columns absent)",
            });
        }
        Ok(self.records.iter().filter_map(|r| r.score.clone()).collect())
    }

    /// Score of a stored record.
    pub fn score_of(&self, id: &str) -> Result<Vec<f64>> {
        if !self.has_scores() {
            return Err(Error::Unsupported {
                model: "ExternalModel",
                capability: "score (columns absent)",
            });
        }
        self.get(id)
            .and_then(|r| r.score.clone())
            .ok_or_else(|| Error::invalid("id", format!("unknown record {id:?}")))
    }

    /// Records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            dimension: self.dimension,
            has_latent: self.has_latent,
        }
    }

    /// Replaces each loglik, read as bits/dim, with its value in nats.
    pub fn convert_bits_per_dim(mut self, d: usize) -> Self {
        for r in &mut self.records {
            r.loglik = bits_per_dim_to_nats(r.loglik, d);
        }
        self
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let layout = Layout::from_header(&header)?;
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| match e.kind() {
                csv::ErrorKind::UnequalLengths { pos, .. } => Error::parse(
                    pos.as_ref().map(|p| p.line()),
                    "row length does not match header",
                ),
                _ => Error::Csv(e),
            })?;
            let line = row.position().map(|p| p.line());
            let num = |i: usize, name: &str| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .map_err(|_| Error::parse(line, format!("{name}: cannot parse {:?} as a number", &row[i])))
            };
            let loglik = num(1, "loglik")?;
            if !loglik.is_finite() {
                return Err(Error::parse(line, "loglik must be finite"));
            }
            let latent_sqnorm = if layout.latent {
                Some(num(2, "latent_sqnorm")?)
            } else {
                None
            };
            let offset = 2 + layout.latent as usize;
            let score = if layout.dim > 0 {
                Some(
                    (0..layout.dim)
                        .map(|j| num(offset + j, "score"))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            records.push(LikelihoodRecord {
                id: row[0].to_string(),
                loglik,
                latent_sqnorm,
                score,
            });
        }
        Self::from_records(records).map_err(|e| match e {
            Error::Parse { .. } => e,
            other => Error::parse(None, other.to_string()),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "loglik".to_string()];
        if self.has_latent {
            header.push("latent_sqnorm".into());
        }
        header.extend((0..self.dimension.unwrap_or(0)).map(|j| format!("score_{j}")));
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.clone(), fmt_f64(r.loglik)];
            if let Some(v) = r.latent_sqnorm {
                row.push(fmt_f64(v));
            }
            if let Some(s) = &r.score {
                row.extend(s.iter().map(|v| fmt_f64(*v)));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path.as_ref())?)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

struct Layout {
    latent: bool,
    dim: usize,
}

impl Layout {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 2 || cols[0] != "id" || cols[1] != "loglik" {
            return Err(Error::parse(Some(1), "header must start with id,loglik"));
        }
        let latent = cols.get(2) == Some(&"latent_sqnorm");
        let rest = &cols[2 + latent as usize..];
        for (j, name) in rest.iter().enumerate() {
            if *name != format!("score_{j}") {
                return Err(Error::parse(
                    Some(1),
                    format!("unexpected column {name:?}; expected score_{j}"),
                ));
            }
        }
        Ok(Self {
            latent,
            dim: rest.len(),
        })
    }
}

impl Model for ExternalModel {
    fn kind(&self) -> &'static str {
        "ExternalModel"
    }

    fn dim(&self) -> Option<usize> {
        self.dimension
    }

    fn log_prob(&self, _x: &[f64]) -> Result<f64> {
        Err(Error::Unsupported {
            model: "ExternalModel",
            capability: "log_prob of new inputs",
        })
    }
}
