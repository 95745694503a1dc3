use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_sweep, SweepSpec};
use crate::error::{Error, Result};
use crate::metrics::{confusion, report, ConfusionCounts, MetricReport};
use crate::model::ChangeModel;
use crate::synthesis::{BitemporalSample, Slot};

pub const CSV_HEADER: [&str; 7] = ["ratio", "precision", "recall", "f1", "iou", "oa", "n_pixels"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub ratio: f64,
    pub counts: ConfusionCounts,
    pub report: MetricReport,
}

/// One row of a result file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub ratio: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub n_pixels: u64,
}

impl From<&EvalResult> for ResultRow {
    fn from(r: &EvalResult) -> Self {
        Self {
            ratio: r.ratio,
            precision: r.report.precision,
            recall: r.report.recall,
            f1: r.report.f1,
            iou: r.report.iou,
            oa: r.report.oa,
            n_pixels: r.counts.total(),
        }
    }
}

/// Confusion counts over HR-sized samples whose `degraded` slot is degraded
/// to `ratio` and restored before inference.
pub fn evaluate(
    model: &ChangeModel,
    samples: &[BitemporalSample],
    ratio: f64,
    degraded: Slot,
    batch_size: usize,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let spec = SweepSpec::new(vec![ratio], degraded)?;
    let counts: Vec<ConfusionCounts> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let degraded_samples = chunk
                .iter()
                .map(|s| make_sweep(s, &spec).map(|mut v| v.remove(0)))
                .collect::<Result<Vec<_>>>()?;
            let input = model.inference_input(&degraded_samples, degraded)?;
            let masks = model.predict(&input)?;
            masks
                .iter()
                .zip(&degraded_samples)
                .map(|(m, s)| confusion(m, &s.label))
                .sum::<Result<ConfusionCounts>>()
        })
        .collect::<Result<_>>()?;
    let counts: ConfusionCounts = counts.into_iter().sum();
    Ok(EvalResult {
        ratio,
        counts,
        report: report(&counts),
    })
}

pub fn sweep(
    model: &ChangeModel,
    samples: &[BitemporalSample],
    spec: &SweepSpec,
    batch_size: usize,
) -> Result<Vec<EvalResult>> {
    spec.validate()?;
    spec.ratios
        .iter()
        .map(|&r| evaluate(model, samples, r, spec.degraded_slot, batch_size))
        .collect()
}

pub fn write_csv(path: &Path, results: &[EvalResult]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(ResultRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a result file; errors carry the 1-based line number.
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_error(path, 1, e))?;
    let headers = rdr.headers().map_err(|e| parse_error(path, 1, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<ResultRow>().enumerate() {
        rows.push(rec.map_err(|e| parse_error(path, i + 2, e))?);
    }
    Ok(rows)
}

fn parse_error(path: &Path, fallback_row: usize, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(fallback_row);
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(r: f64) -> EvalResult {
        let counts = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 10 };
        EvalResult {
            ratio: r,
            counts,
            report: report(&counts),
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rs = vec![result(1.0), result(1.3)];
        write_csv(&p, &rs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("ratio,precision,recall,f1,iou,oa,n_pixels\n"));
        let rows = read_csv(&p).unwrap();
        assert_eq!(rows, rs.iter().map(ResultRow::from).collect::<Vec<_>>());
        assert_eq!(rows[1].n_pixels, 16);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "ratio,precision,recall,f1,iou,oa,n_pixels\n1,1,1,1,1,1,4\n2,x,1,1,1,1,4\n").unwrap();
        match read_csv(&p) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Parse { row: 1, .. })));
    }
}
