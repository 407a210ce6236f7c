//! CSV ingestion and emission.
//!
//! Data files hold one row per cluster member:
//! `cluster_id,member_id,time,status,stratum,x1,...,xp`. `time` is on the
//! natural scale and log-transformed at load; a `log_time` column is
//! accepted instead and read verbatim, which is what [`write_dataset`]
//! emits so that a written dataset reads back bit-for-bit. Members of
//! unsampled clusters leave every covariate field empty.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Cluster, ClusteredDataset, Observation, StratumCount};
use crate::error::{Error, Result};
use crate::km::WeightedSurvival;
use crate::simulation::StudyResult;
use crate::tuning::CvCurve;

const FIXED_COLUMNS: [&str; 5] = ["cluster_id", "member_id", "time", "status", "stratum"];

fn row_err(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Input(format!("row {line}: {msg}"))
}

/// Parses a data file; strata counts come from `strata` when given, else
/// they are derived from the clusters (the file must then hold the cohort).
pub fn read_dataset<R: Read>(reader: R, strata: Option<Vec<StratumCount>>) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < FIXED_COLUMNS.len() {
        return Err(Error::Input(format!(
            "header has {} columns; expected {} followed by covariates",
            headers.len(),
            FIXED_COLUMNS.join(",")
        )));
    }
    let log_scale = match &headers[2] {
        "time" => false,
        "log_time" => true,
        other => return Err(Error::Input(format!("third column must be 'time' or 'log_time', found '{other}'"))),
    };
    for (k, want) in FIXED_COLUMNS.iter().enumerate() {
        if k != 2 && &headers[k] != *want {
            return Err(Error::Input(format!(
                "column {} must be '{want}', found '{}'",
                k + 1,
                &headers[k]
            )));
        }
    }
    let names: Vec<String> = headers.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();
    let p = names.len();

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut first_line: Vec<u64> = Vec::new();
    let mut member_ids: Vec<Vec<String>> = Vec::new();
    let mut any_row = false;
    for rec in rdr.records() {
        let rec = rec?;
        any_row = true;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(row_err(line, format!("{} fields, expected {}", rec.len(), headers.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(row_err(line, "empty cluster_id"));
        }
        let raw_time: f64 = rec[2]
            .parse()
            .map_err(|_| row_err(line, format!("time '{}' is not a number", &rec[2])))?;
        let log_time = if log_scale {
            raw_time
        } else {
            if !(raw_time > 0.0) {
                return Err(row_err(line, format!("time must be positive, got {raw_time}")));
            }
            raw_time.ln()
        };
        if !log_time.is_finite() {
            return Err(row_err(line, "time is not finite"));
        }
        let event = match &rec[3] {
            "1" => true,
            "0" => false,
            other => return Err(row_err(line, format!("status must be 0 or 1, got '{other}'"))),
        };
        let stratum: usize = rec[4]
            .parse()
            .ok()
            .filter(|&s| s >= 1)
            .ok_or_else(|| row_err(line, format!("stratum must be a positive integer, got '{}'", &rec[4])))?;
        let fields: Vec<&str> = (FIXED_COLUMNS.len()..rec.len()).map(|k| &rec[k]).collect();
        let empty = fields.iter().filter(|f| f.is_empty()).count();
        let covariates = if p > 0 && empty == p {
            Vec::new()
        } else if empty > 0 {
            return Err(row_err(line, format!("cluster {id}: {empty} of {p} covariates missing")));
        } else {
            fields
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| row_err(line, format!("{} = '{f}' is not a finite number", names[j])))
                })
                .collect::<Result<Vec<f64>>>()?
        };
        let sampled = p == 0 || !covariates.is_empty();
        let pos = match index.get(&id) {
            Some(&pos) => pos,
            None => {
                index.insert(id.clone(), clusters.len());
                order.push(id.clone());
                clusters.push(Cluster {
                    id: id.clone(),
                    stratum,
                    sampled,
                    members: Vec::new(),
                });
                first_line.push(line);
                member_ids.push(Vec::new());
                clusters.len() - 1
            }
        };
        let c = &mut clusters[pos];
        if c.stratum != stratum {
            return Err(row_err(line, format!("cluster {id}: stratum {stratum} differs from {} on row {}", c.stratum, first_line[pos])));
        }
        if c.sampled != sampled {
            return Err(row_err(line, format!("cluster {id}: covariates present for some members only")));
        }
        let mid = rec[1].to_string();
        if member_ids[pos].contains(&mid) {
            return Err(row_err(line, format!("cluster {id}: duplicate member_id '{mid}'")));
        }
        member_ids[pos].push(mid);
        c.members.push(Observation::new(log_time, event, covariates));
    }
    if !any_row {
        return Err(Error::Input("data file has no rows".into()));
    }
    ClusteredDataset::new(clusters, names, strata)
}

pub fn read_dataset_path(path: &Path, strata: Option<&Path>) -> Result<ClusteredDataset> {
    let counts = strata.map(read_strata_counts_path).transpose()?;
    read_dataset(std::fs::File::open(path)?, counts)
}

/// Writes the dataset with a `log_time` column.
pub fn write_dataset<W: Write>(ds: &ClusteredDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["cluster_id".into(), "member_id".into(), "log_time".into(), "status".into(), "stratum".into()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for c in &ds.clusters {
        for (k, o) in c.members.iter().enumerate() {
            let mut row = vec![
                c.id.clone(),
                (k + 1).to_string(),
                o.log_time.to_string(),
                u8::from(o.event).to_string(),
                c.stratum.to_string(),
            ];
            if o.covariates.is_empty() {
                row.extend(std::iter::repeat(String::new()).take(ds.p));
            } else {
                row.extend(o.covariates.iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct StratumRow {
    stratum: usize,
    cohort: usize,
    sampled: usize,
}

pub fn read_strata_counts<R: Read>(reader: R) -> Result<Vec<StratumCount>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<StratumRow>().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("strata file row {}: {e}", i + 2)))?;
        out.push(StratumCount::new(row.stratum, row.cohort, row.sampled));
    }
    if out.is_empty() {
        return Err(Error::Input("strata file has no rows".into()));
    }
    Ok(out)
}

pub fn read_strata_counts_path(path: &Path) -> Result<Vec<StratumCount>> {
    read_strata_counts(std::fs::File::open(path)?)
}

pub fn write_strata_counts<W: Write>(counts: &[StratumCount], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for c in counts {
        w.serialize(StratumRow {
            stratum: c.stratum,
            cohort: c.cohort,
            sampled: c.sampled,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub selected: bool,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

pub fn write_coefficients<W: Write>(rows: &[CoefficientRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_coefficients<R: Read>(reader: R) -> Result<Vec<CoefficientRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Input(format!("coefficient file row {}: {e}", i + 2))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub lambda: f64,
    pub mu: f64,
    pub n_valid_folds: usize,
}

pub fn write_curve<W: Write>(curve: &CvCurve, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for i in 0..curve.lambdas.len() {
        w.serialize(CurveRow {
            lambda: curve.lambdas[i],
            mu: curve.mu[i],
            n_valid_folds: curve.n_valid_folds[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve<R: Read>(reader: R) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Input(format!("curve file row {}: {e}", i + 2))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmRow {
    pub t: f64,
    pub cdf: f64,
}

pub fn write_km<W: Write>(surv: &WeightedSurvival, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (t, cdf) in surv.table() {
        w.serialize(KmRow { t, cdf })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_km<R: Read>(reader: R) -> Result<Vec<KmRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Input(format!("km file row {}: {e}", i + 2))))
        .collect()
}

#[derive(Debug, Serialize)]
struct Table1Row<'a> {
    method: &'a str,
    tp: f64,
    fp: f64,
    c_pct: f64,
    me_median: f64,
    mse_mean: f64,
    nonconverged: usize,
}

#[derive(Debug, Serialize)]
struct Table2Row<'a> {
    method: &'a str,
    n_c: usize,
    br_pct: f64,
    se_a: f64,
    se_e: f64,
    cp_pct: f64,
}

/// Writes `selection.csv`, `estimation.csv` and `replications.csv` to `dir`.
pub fn write_study(result: &StudyResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("selection.csv"))?;
    for s in &result.summaries {
        w.serialize(Table1Row {
            method: &s.label,
            tp: s.selection.tp,
            fp: s.selection.fp,
            c_pct: s.selection.c_pct,
            me_median: s.selection.me_median,
            mse_mean: s.selection.mse_mean,
            nonconverged: s.nonconverged,
        })?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("estimation.csv"))?;
    for s in &result.summaries {
        w.serialize(Table2Row {
            method: &s.label,
            n_c: s.estimation.n_c,
            br_pct: s.estimation.br_pct,
            se_a: s.estimation.se_a,
            se_e: s.estimation.se_e,
            cp_pct: s.estimation.cp_pct,
        })?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("replications.csv"))?;
    let p = result.records.first().and_then(|r| r.methods.first()).map_or(0, |m| m.beta.len());
    let mut header: Vec<String> = ["replication", "method", "n_sampled", "censoring_rate", "lambda", "converged", "model_error", "focus_se", "focus_ci_lower", "focus_ci_upper"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=p).map(|j| format!("beta{j}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &result.records {
        for (m, s) in r.methods.iter().zip(&result.summaries) {
            let mut row = vec![
                r.index.to_string(),
                s.label.clone(),
                r.n_sampled.to_string(),
                r.censoring_rate.to_string(),
                opt(m.lambda),
                m.converged.to_string(),
                m.model_error.to_string(),
                opt(m.focus_se),
                opt(m.focus_ci.map(|c| c.0)),
                opt(m.focus_ci.map(|c| c.1)),
            ];
            row.extend(m.beta.iter().map(|b| b.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["replication", "error"])?;
    for (r, e) in &result.failures {
        w.write_record([r.to_string(), e.clone()])?;
    }
    w.flush()?;
    Ok(())
}
