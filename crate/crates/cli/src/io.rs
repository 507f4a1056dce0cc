//! Delimited-text ingestion and artifact writers.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rnnc::geometry::{canonicalize, LocationSet};
use rnnc::rnnc::{Basis, FidelityDataset};

use crate::config::Delimiter;
use crate::CliError;

/// First line of every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn line(&self) -> String {
        format!("# config_sha256={} seed={}", self.config_hash, self.seed)
    }
}

/// One row of an input file with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub line: u64,
    pub x: f64,
    pub y: f64,
    pub value: Option<f64>,
    pub level: Option<usize>,
}

fn input_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Input(format!("{}: {}", path.display(), msg.into()))
}

/// Reads `x`, `y` and, when present, `value` and `level`. Lines starting
/// with `#` are skipped; coordinates are rounded to 12 significant digits.
pub fn read_rows(path: &Path, delim: Delimiter, need_value: bool, need_level: bool) -> Result<Vec<Row>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim.byte())
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_err(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| input_err(path, e.to_string()))?.clone();
    let col = |name: &str, required: bool| -> Result<Option<usize>, CliError> {
        match headers.iter().position(|h| h == name) {
            Some(i) => Ok(Some(i)),
            None if required => Err(input_err(path, format!("missing column '{name}'"))),
            None => Ok(None),
        }
    };
    let (cx, cy) = (col("x", true)?.unwrap(), col("y", true)?.unwrap());
    let cv = col("value", need_value)?;
    let cl = col("level", need_level)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input_err(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize, name: &str| -> Result<f64, CliError> {
            let cell = rec.get(i).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(input_err(path, format!("line {line}: column '{name}' is not a finite number: '{cell}'"))),
            }
        };
        let level = match cl {
            Some(i) => {
                let cell = rec.get(i).unwrap_or("");
                Some(cell.parse::<usize>().map_err(|_| {
                    input_err(path, format!("line {line}: column 'level' is not a positive integer: '{cell}'"))
                })?)
            }
            None => None,
        };
        rows.push(Row {
            line,
            x: canonicalize(num(cx, "x")?),
            y: canonicalize(num(cy, "y")?),
            value: cv.map(|i| num(i, "value")).transpose()?,
            level,
        });
    }
    Ok(rows)
}

/// How the level location sets overlap.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnosis {
    /// `shared[t − 2]` = number of level-`t` locations also observed at level `t − 1`.
    pub shared: Vec<usize>,
    pub sizes: Vec<usize>,
    pub verdict: String,
}

pub fn diagnose(sets: &[LocationSet]) -> Diagnosis {
    let shared: Vec<usize> = sets.windows(2).map(|w| w[1].points().filter(|p| w[0].contains(p)).count()).collect();
    let sizes: Vec<usize> = sets.iter().map(LocationSet::len).collect();
    let verdict = if shared.iter().zip(&sizes[1..]).all(|(s, n)| s == n) {
        "fully nested"
    } else if shared.iter().all(|&s| s == 0) {
        "non-nested"
    } else {
        "partially nested"
    };
    Diagnosis { shared, sizes, verdict: verdict.into() }
}

/// Multiplier applied to `x` under the equirectangular projection.
pub fn projection_scale(rows: &[Row]) -> f64 {
    let lat = rows.iter().map(|r| r.y).sum::<f64>() / rows.len().max(1) as f64;
    lat.to_radians().cos()
}

#[derive(Debug)]
pub struct Ingested {
    pub datasets: Vec<FidelityDataset>,
    pub diagnosis: Diagnosis,
}

/// Splits observation rows by level into datasets `1..=levels`.
pub fn ingest(
    path: &Path,
    rows: &[Row],
    levels: usize,
    x_scale: f64,
    trend: Basis,
    scale: Basis,
) -> Result<Ingested, CliError> {
    let mut by_level: Vec<Vec<&Row>> = vec![Vec::new(); levels];
    for r in rows {
        let t = r.level.expect("level column required");
        if t == 0 || t > levels {
            return Err(input_err(path, format!("line {}: level {t} outside 1..={levels}", r.line)));
        }
        by_level[t - 1].push(r);
    }
    let mut datasets = Vec::with_capacity(levels);
    for (t, rs) in by_level.iter().enumerate() {
        if rs.is_empty() {
            return Err(input_err(path, format!("level {} has no rows", t + 1)));
        }
        let mut seen: HashMap<(u64, u64), u64> = HashMap::new();
        for r in rs {
            if let Some(first) = seen.insert((r.x.to_bits(), r.y.to_bits()), r.line) {
                return Err(input_err(
                    path,
                    format!("lines {first} and {}: duplicate location ({}, {}) at level {}", r.line, r.x, r.y, t + 1),
                ));
            }
        }
        let coords = rs.iter().flat_map(|r| [r.x * x_scale, r.y]).collect();
        let locs = LocationSet::new(2, coords).map_err(|e| input_err(path, e.to_string()))?;
        let z = rs.iter().map(|r| r.value.expect("value column required")).collect();
        let ds = FidelityDataset::new(t + 1, locs, z, trend, (t > 0).then_some(scale)).map_err(CliError::Model)?;
        datasets.push(ds);
    }
    let diagnosis = diagnose(&datasets.iter().map(|d| d.locs.clone()).collect::<Vec<_>>());
    Ok(Ingested { datasets, diagnosis })
}

/// Writes the stamp line followed by a delimited table.
pub fn write_table(
    path: &Path,
    stamp: &Stamp,
    delim: Delimiter,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut f = File::create(path).map_err(io)?;
    writeln!(f, "{}", stamp.line()).map_err(io)?;
    let mut w = csv::WriterBuilder::new().delimiter(delim.byte()).from_writer(f);
    let csv_err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn num(v: f64) -> String {
    format!("{v}")
}
