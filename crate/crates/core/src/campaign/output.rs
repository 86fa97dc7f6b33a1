//! Result files: CSV with a fixed header, jsonl, and the figure table.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::config::{ExperimentKind, OutputFormat};
use super::runner::RunRecord;
use crate::metrics::{aggregate_runs, Classification};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("results i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("jsonl line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("results row {row}: {reason}")]
    Field { row: usize, reason: String },
}

pub const CSV_COLUMNS: [&str; 18] = [
    "experiment",
    "mlp_depth",
    "mlp_hidden",
    "embed_dim",
    "dense_dim",
    "sparse_dim",
    "sparsity",
    "target",
    "mitigation",
    "clip_mode",
    "clip_T",
    "ber",
    "run_seed",
    "metric",
    "value",
    "n_inf",
    "n_nan",
    "classification",
];
pub const WALL_TIME_COLUMN: &str = "wall_time_s";

/// Shortest round-trip decimal; non-finite values as `inf`, `-inf`, `nan`.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn parse_float(s: &str) -> Result<f64, String> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|e| format!("`{s}`: {e}")),
    }
}

/// Serde adapter writing non-finite floats as strings so jsonl stays valid JSON.
pub mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_float(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => super::parse_float(&s).map_err(serde::de::Error::custom),
        }
    }
}

fn csv_row(r: &RunRecord, wall_time: bool) -> Vec<String> {
    let mut row = vec![
        r.experiment.as_str().to_owned(),
        r.mlp_depth.to_string(),
        r.mlp_hidden.to_string(),
        r.embed_dim.to_string(),
        r.dense_dim.to_string(),
        r.sparse_dim.to_string(),
        fmt_float(r.sparsity),
        r.target.clone(),
        r.mitigation.as_str().to_owned(),
        r.clip_mode.map(|m| m.as_str().to_owned()).unwrap_or_default(),
        r.clip_t.map(|t| fmt_float(t as f64)).unwrap_or_default(),
        fmt_float(r.ber),
        r.run_seed.to_string(),
        r.metric.clone(),
        fmt_float(r.value),
        r.n_inf.to_string(),
        r.n_nan.to_string(),
        r.classification.as_str().to_owned(),
    ];
    if wall_time {
        row.push(r.wall_time_s.map(fmt_float).unwrap_or_default());
    }
    row
}

pub fn write_csv<W: Write>(records: &[RunRecord], w: W, wall_time: bool) -> Result<(), OutputError> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if wall_time {
        header.push(WALL_TIME_COLUMN);
    }
    out.write_record(&header)?;
    for r in records {
        out.write_record(csv_row(r, wall_time))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<RunRecord>, OutputError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(r);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let has_wall = names.len() == CSV_COLUMNS.len() + 1 && names.last() == Some(&WALL_TIME_COLUMN);
    if names[..CSV_COLUMNS.len().min(names.len())] != CSV_COLUMNS[..] || !(names.len() == CSV_COLUMNS.len() || has_wall) {
        return Err(OutputError::Field {
            row: 0,
            reason: format!("unexpected header {names:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 1;
        let f = |k: usize| row.get(k).unwrap_or("");
        let err = |reason: String| OutputError::Field { row: line, reason };
        let int = |k: usize| f(k).parse::<usize>().map_err(|e| err(format!("{}: {e}", CSV_COLUMNS[k])));
        let float = |k: usize| parse_float(f(k)).map_err(|e| err(format!("{}: {e}", CSV_COLUMNS[k])));
        out.push(RunRecord {
            experiment: f(0).parse::<ExperimentKind>().map_err(err)?,
            mlp_depth: int(1)?,
            mlp_hidden: int(2)?,
            embed_dim: int(3)?,
            dense_dim: int(4)?,
            sparse_dim: int(5)?,
            sparsity: float(6)?,
            target: f(7).to_owned(),
            mitigation: f(8).parse().map_err(err)?,
            clip_mode: match f(9) {
                "" => None,
                s => Some(s.parse().map_err(err)?),
            },
            clip_t: match f(10) {
                "" => None,
                _ => Some(float(10)? as f32),
            },
            ber: float(11)?,
            run_seed: f(12).parse().map_err(|e| err(format!("run_seed: {e}")))?,
            metric: f(13).to_owned(),
            value: float(14)?,
            n_inf: int(15)?,
            n_nan: int(16)?,
            classification: f(17).parse::<Classification>().map_err(err)?,
            abft: None,
            error: None,
            wall_time_s: if has_wall && !f(18).is_empty() {
                Some(parse_float(f(18)).map_err(err)?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(records: &[RunRecord], mut w: W, wall_time: bool) -> Result<(), OutputError> {
    for r in records {
        let line = if wall_time {
            serde_json::to_string(r)
        } else {
            serde_json::to_string(&RunRecord { wall_time_s: None, ..r.clone() })
        }
        .map_err(|source| OutputError::Json { line: 0, source })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RunRecord>, OutputError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| OutputError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn emit_results(
    records: &[RunRecord],
    format: OutputFormat,
    path: &Path,
    wall_time: bool,
) -> Result<(), OutputError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        OutputFormat::Csv => write_csv(records, f, wall_time),
        OutputFormat::Jsonl => write_jsonl(records, f, wall_time),
    }
}

/// Reads a results file, choosing the parser by extension (`.jsonl` or CSV).
pub fn load_results(path: &Path) -> Result<Vec<RunRecord>, OutputError> {
    let f = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl(std::io::BufReader::new(f))
    } else {
        read_csv(f)
    }
}

/// Raw RMSE below this displays as `0.0` in the figure table.
pub const DISPLAY_ZERO_BELOW: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct FigureCell {
    /// The first record of the group, carrying its descriptor columns.
    pub key: RunRecord,
    pub runs: usize,
    pub invalid_runs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub cell: String,
}

fn same_group(a: &RunRecord, b: &RunRecord) -> bool {
    a.experiment == b.experiment
        && a.config() == b.config()
        && a.sparsity.to_bits() == b.sparsity.to_bits()
        && a.target == b.target
        && a.mitigation == b.mitigation
        && a.clip_mode == b.clip_mode
        && a.clip_t.map(f32::to_bits) == b.clip_t.map(f32::to_bits)
        && a.ber.to_bits() == b.ber.to_bits()
        && a.metric == b.metric
}

/// Aggregates runs per cell. RMSE cells show the worst classification over
/// runs when any run is invalid, otherwise the mean with small values
/// displayed as `0.0`; AUC cells show the mean.
pub fn figure_table(records: &[RunRecord]) -> Vec<FigureCell> {
    let mut groups: Vec<Vec<&RunRecord>> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| same_group(g[0], r)) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let values: Vec<f64> = g.iter().map(|r| r.value).collect();
            let agg = aggregate_runs(&values);
            let worst = g.iter().map(|r| r.classification).max().unwrap_or(Classification::Numeric);
            let invalid_runs = g.iter().filter(|r| r.classification.is_invalid()).count();
            let cell = if g[0].metric == "error" {
                "error".to_owned()
            } else if g[0].metric == "rmse" && worst.is_invalid() {
                worst.as_str().to_owned()
            } else if g[0].metric == "rmse" && agg.mean < DISPLAY_ZERO_BELOW {
                "0.0".to_owned()
            } else {
                fmt_float(agg.mean)
            };
            FigureCell {
                key: g[0].clone(),
                runs: g.len(),
                invalid_runs,
                mean: agg.mean,
                min: agg.min,
                max: agg.max,
                cell,
            }
        })
        .collect()
}

pub fn write_figure_table<W: Write>(cells: &[FigureCell], w: W) -> Result<(), OutputError> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header: Vec<&str> = CSV_COLUMNS[..12].to_vec();
    header.extend(["metric", "runs", "invalid_runs", "mean", "min", "max", "cell"]);
    out.write_record(&header)?;
    for c in cells {
        let mut row = csv_row(&c.key, false);
        row.truncate(12);
        row.extend([
            c.key.metric.clone(),
            c.runs.to_string(),
            c.invalid_runs.to_string(),
            fmt_float(c.mean),
            fmt_float(c.min),
            fmt_float(c.max),
            c.cell.clone(),
        ]);
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mitigate::{ClipMode, MitigationKind};

    fn record(value: f64, class: Classification) -> RunRecord {
        RunRecord {
            experiment: ExperimentKind::DummyRmse,
            mlp_depth: 1,
            mlp_hidden: 64,
            embed_dim: 64,
            dense_dim: 128,
            sparse_dim: 8192,
            sparsity: 0.001,
            target: "names:a,b".into(),
            mitigation: MitigationKind::Clip,
            clip_mode: Some(ClipMode::Clamp),
            clip_t: Some(6.0),
            ber: 1e-9,
            run_seed: u64::MAX,
            metric: "rmse".into(),
            value,
            n_inf: 0,
            n_nan: 0,
            classification: class,
            abft: None,
            error: None,
            wall_time_s: None,
        }
    }

    fn same(a: &[RunRecord], b: &[RunRecord]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.value.to_bits() == y.value.to_bits() && RunRecord { value: 0.0, ..x.clone() } == RunRecord { value: 0.0, ..y.clone() }
            })
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf, false).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), CSV_COLUMNS.join(",") + "\n");
    }

    #[test]
    fn nan_value_written_literally() {
        let mut buf = Vec::new();
        write_csv(&[record(f64::NAN, Classification::Nan)], &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert!(row.contains(",nan,0,0,nan"), "{row}");
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let mut recs = vec![
            record(0.1, Classification::Numeric),
            record(f64::INFINITY, Classification::Inf),
            record(f64::NEG_INFINITY, Classification::Inf),
            record(f64::NAN, Classification::Nan),
            record(1.0 / 3.0, Classification::Numeric),
        ];
        recs[4].clip_mode = None;
        recs[4].clip_t = None;
        let mut buf = Vec::new();
        write_csv(&recs, &mut buf, false).unwrap();
        assert!(same(&read_csv(buf.as_slice()).unwrap(), &recs));
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf, false).unwrap();
        assert!(same(&read_jsonl(buf.as_slice()).unwrap(), &recs));
    }

    #[test]
    fn wall_time_column_is_optional() {
        let mut r = record(0.5, Classification::Numeric);
        r.wall_time_s = Some(0.25);
        let mut buf = Vec::new();
        write_csv(&[r.clone()], &mut buf, true).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(&(CSV_COLUMNS.join(",") + ",wall_time_s\n")));
        assert_eq!(read_csv(buf.as_slice()).unwrap()[0].wall_time_s, Some(0.25));
    }

    #[test]
    fn figure_table_display_rules() {
        let cells = figure_table(&[record(0.004, Classification::Numeric), record(0.004, Classification::Numeric)]);
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].cell, "0.0");
        assert_eq!(cells[0].mean, 0.004);

        let cells = figure_table(&[record(0.3, Classification::Numeric), record(0.1, Classification::Inf)]);
        assert_eq!(cells[0].cell, "inf");
        let cells = figure_table(&[record(0.3, Classification::Nan), record(0.1, Classification::Inf)]);
        assert_eq!(cells[0].cell, "nan");
        let cells = figure_table(&[record(0.25, Classification::Numeric)]);
        assert_eq!(cells[0].cell, "0.25");

        let mut a = record(0.7, Classification::Numeric);
        a.metric = "auc".into();
        let mut b = a.clone();
        b.value = 0.9;
        let cells = figure_table(&[a, b]);
        assert_eq!((cells[0].min, cells[0].max), (0.7, 0.9));
        assert_eq!(cells[0].cell, fmt_float(cells[0].mean));
    }

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_float(1e-9), "1e-9");
        assert_eq!(fmt_float(0.001), "0.001");
        assert_eq!(fmt_float(2.0), "2.0");
        for v in [1e-9, 0.1, 1.0 / 3.0, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(parse_float(&fmt_float(v)).unwrap(), v);
        }
    }
}
