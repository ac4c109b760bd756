//! Persistence of trial records: one CSV row per recorded step, plus JSON
//! summaries. Floats are written in shortest round-trip decimal form, so
//! reading a file back reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::InitScheme;
use crate::runner::{compute_optima, Optimum, SweepGrid, SweepResult, TrialRecord};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 10] =
    ["width", "scheme", "lr", "seed", "step", "train_loss", "test_loss", "meanZA", "meanZB", "diverged"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    width: usize,
    scheme: InitScheme,
    lr: f64,
    seed: u64,
    step: usize,
    train_loss: f64,
    test_loss: f64,
    #[serde(rename = "meanZA")]
    mean_za: f64,
    #[serde(rename = "meanZB")]
    mean_zb: f64,
    diverged: bool,
}

pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        for (i, &step) in r.steps.iter().enumerate() {
            w.serialize(Row {
                width: r.width,
                scheme: r.scheme,
                lr: r.lr,
                seed: r.seed,
                step,
                train_loss: r.train_loss[i],
                test_loss: r.test_loss[i],
                mean_za: r.mean_za[i],
                mean_zb: r.mean_zb[i],
                diverged: r.diverged,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn to_csv_string(records: &[TrialRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn save_csv(records: &[TrialRecord], path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(records)?).map_err(|e| Error::io(path, e))
}

/// Parses rows into records. Consecutive rows sharing (width, scheme, lr,
/// seed) form one trial. `origin` names the source in error messages; rows
/// are numbered from 1 after the header.
pub fn parse_csv(text: &str, origin: &Path) -> Result<Vec<TrialRecord>> {
    let err = |row: usize, msg: String| Error::Record { path: origin.to_path_buf(), row, msg };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(err(0, format!("expected header `{}`", CSV_HEADER.join(","))));
    }

    let mut records: Vec<TrialRecord> = Vec::new();
    for (i, result) in reader.deserialize::<Row>().enumerate() {
        let row_no = i + 1;
        let row = result.map_err(|e| err(row_no, e.to_string()))?;
        let same_trial = records.last().is_some_and(|r| {
            r.width == row.width && r.scheme == row.scheme && r.lr.to_bits() == row.lr.to_bits() && r.seed == row.seed
        });
        if same_trial {
            let r = records.last_mut().expect("checked above");
            if row.step <= *r.steps.last().expect("records start with a row") {
                return Err(err(row_no, format!("step {} does not increase", row.step)));
            }
            if row.diverged != r.diverged {
                return Err(err(row_no, "diverged flag changes within a trial".into()));
            }
        } else {
            if row.step != 0 {
                return Err(err(row_no, format!("trial starts at step {} instead of 0", row.step)));
            }
            records.push(TrialRecord {
                width: row.width,
                scheme: row.scheme,
                lr: row.lr,
                seed: row.seed,
                steps: Vec::new(),
                train_loss: Vec::new(),
                test_loss: Vec::new(),
                mean_za: Vec::new(),
                mean_zb: Vec::new(),
                diverged: row.diverged,
                final_train_loss: f64::INFINITY,
                final_test_loss: f64::INFINITY,
            });
        }
        let r = records.last_mut().expect("pushed above");
        r.steps.push(row.step);
        r.train_loss.push(row.train_loss);
        r.test_loss.push(row.test_loss);
        r.mean_za.push(row.mean_za);
        r.mean_zb.push(row.mean_zb);
    }
    for r in records.iter_mut().filter(|r| !r.diverged) {
        r.final_train_loss = *r.train_loss.last().expect("nonempty");
        r.final_test_loss = *r.test_loss.last().expect("nonempty");
    }
    if records.is_empty() {
        return Err(err(0, "no records".into()));
    }
    Ok(records)
}

pub fn load_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// Records plus optima recomputed from them.
pub fn load_sweep(path: &Path) -> Result<SweepResult> {
    let records = load_csv(path)?;
    Ok(SweepResult { optima: compute_optima(&records), records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub grid: SweepGrid,
    pub base_seed: u64,
    pub trials: usize,
    pub diverged: usize,
    pub optima: Vec<Optimum>,
}

impl SweepSummary {
    pub fn new(grid: &SweepGrid, base_seed: u64, result: &SweepResult) -> Self {
        SweepSummary {
            schema_version: SCHEMA_VERSION,
            grid: grid.clone(),
            base_seed,
            trials: result.records.len(),
            diverged: result.records.iter().filter(|r| r.diverged).count(),
            optima: result.optima.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub schema_version: u32,
    pub width: usize,
    pub scheme: InitScheme,
    pub lr: f64,
    pub seed: u64,
    pub diverged: bool,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    #[serde(rename = "final_meanZA")]
    pub final_mean_za: f64,
    #[serde(rename = "final_meanZB")]
    pub final_mean_zb: f64,
}

impl From<&TrialRecord> for TrialSummary {
    fn from(r: &TrialRecord) -> Self {
        TrialSummary {
            schema_version: SCHEMA_VERSION,
            width: r.width,
            scheme: r.scheme,
            lr: r.lr,
            seed: r.seed,
            diverged: r.diverged,
            initial_train_loss: r.train_loss[0],
            final_train_loss: r.final_train_loss,
            final_test_loss: r.final_test_loss,
            final_mean_za: r.final_mean_za(),
            final_mean_zb: r.final_mean_zb(),
        }
    }
}

/// Pretty JSON with a trailing newline. Non-finite floats become `null`.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}
