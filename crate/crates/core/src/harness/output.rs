use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentResult, ResultRecord, SummaryRow};
use crate::error::{Error, Result};

pub const RECORD_HEADER: [&str; 6] = [
    "learner",
    "tau",
    "seed",
    "rmse",
    "walltime_s",
    "clip_fraction",
];
pub const SUMMARY_HEADER: [&str; 5] = ["learner", "tau", "n_seeds", "mean_rmse", "sd_rmse"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::Unknown {
                what: "output format",
                name: s.to_string(),
            }),
        }
    }
}

/// A real with 17 significant digits, which parses back bit-exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Records as CSV with the fixed header.
pub fn records_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.learner.key().to_string(),
            r.tau.to_string(),
            r.seed.to_string(),
            fmt17(r.rmse),
            fmt17(r.walltime_s),
            fmt17(r.clip_fraction),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Parse records written by [`records_csv`]; diagnostics not in the CSV are zero.
pub fn parse_records_csv(data: &[u8]) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_reader(data);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let real = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad real {s:?}")))
    };
    let int = |s: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad integer {s:?}")))
    };
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(ResultRecord {
                learner: rec[0].parse()?,
                tau: int(&rec[1])? as usize,
                seed: int(&rec[2])?,
                rmse: real(&rec[3])?,
                walltime_s: real(&rec[4])?,
                clip_fraction: real(&rec[5])?,
                weight_spread: 0.0,
            })
        })
        .collect()
}

pub fn summary_csv(summary: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for s in summary {
        w.write_record([
            s.learner.key().to_string(),
            s.tau.to_string(),
            s.n_seeds.to_string(),
            fmt17(s.mean_rmse),
            fmt17(s.sd_rmse),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Write records to `path` (CSV, or JSON with the summary alongside).
pub fn emit_results(result: &ExperimentResult, format: OutputFormat, path: &Path) -> Result<()> {
    if result.records.is_empty() {
        return Err(Error::InvalidArgument("no records to emit".into()));
    }
    ensure_parent(path)?;
    let bytes = match format {
        OutputFormat::Csv => records_csv(&result.records)?,
        OutputFormat::Json => {
            let mut v = serde_json::to_vec_pretty(result)?;
            v.push(b'\n');
            v
        }
    };
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Write the per-(learner, tau) summary CSV.
pub fn emit_summary(summary: &[SummaryRow], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, summary_csv(summary)?)?;
    Ok(())
}

/// Human-readable `mean ± sd` table; `times_ten` scales by 10.
pub fn format_summary(summary: &[SummaryRow], times_ten: bool) -> String {
    let scale = if times_ten { 10.0 } else { 1.0 };
    let mut taus: Vec<usize> = summary.iter().map(|s| s.tau).collect();
    taus.dedup();
    taus.sort_unstable();
    taus.dedup();
    let mut learners = Vec::new();
    for s in summary {
        if !learners.contains(&s.learner) {
            learners.push(s.learner);
        }
    }
    let mut out = format!("{:<8}", "learner");
    for t in &taus {
        out.push_str(&format!(" {:>18}", format!("tau={t}")));
    }
    out.push_str(if times_ten { "   (rmse x10)\n" } else { "\n" });
    for l in learners {
        out.push_str(&format!("{:<8}", l.key()));
        for &t in &taus {
            match summary.iter().find(|s| s.learner == l && s.tau == t) {
                Some(s) => out.push_str(&format!(
                    " {:>18}",
                    format!("{:.3} ± {:.3}", s.mean_rmse * scale, s.sd_rmse * scale)
                )),
                None => out.push_str(&format!(" {:>18}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::summarize;
    use crate::meta::LearnerKind;

    fn rec(rmse: f64) -> ResultRecord {
        ResultRecord {
            learner: LearnerKind::IvwDr,
            tau: 2,
            seed: 4,
            rmse,
            walltime_s: 0.0,
            clip_fraction: 1.0 / 3.0,
            weight_spread: 0.0,
        }
    }

    #[test]
    fn one_record_gives_two_lines() {
        let text = String::from_utf8(records_csv(&[rec(0.1)]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "learner,tau,seed,rmse,walltime_s,clip_fraction");
        assert!(lines[1].starts_with("ivw-dr,2,4,1.0000000000000001e-1,"));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let records: Vec<ResultRecord> = [0.1, std::f64::consts::PI, 1e-300, 12345.678901234567]
            .iter()
            .map(|&v| rec(v))
            .collect();
        let back = parse_records_csv(&records_csv(&records).unwrap()).unwrap();
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
            assert_eq!(a.clip_fraction.to_bits(), b.clip_fraction.to_bits());
            assert_eq!((a.learner, a.tau, a.seed), (b.learner, b.tau, b.seed));
        }
    }

    #[test]
    fn json_mirrors_fields() {
        let result = ExperimentResult {
            records: vec![rec(0.25)],
            summary: summarize(&[rec(0.25)]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/r.json");
        emit_results(&result, OutputFormat::Json, &path).unwrap();
        let back: ExperimentResult = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, result);
        let empty = ExperimentResult {
            records: vec![],
            summary: vec![],
        };
        assert!(emit_results(&empty, OutputFormat::Csv, &path).is_err());
    }

    #[test]
    fn summary_csv_and_display() {
        let s = summarize(&[
            rec(0.2),
            ResultRecord {
                seed: 5,
                ..rec(0.4)
            },
        ]);
        let text = String::from_utf8(summary_csv(&s).unwrap()).unwrap();
        assert!(text.starts_with("learner,tau,n_seeds,mean_rmse,sd_rmse\n"));
        let table = format_summary(&s, true);
        assert!(table.contains("3.000 ± 1.414"), "{table}");
    }
}
